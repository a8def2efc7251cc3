#include "lbr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written as native little-endian float32");

namespace lbr {

namespace {

struct TensorEntry {
  std::string name;
  std::vector<int> shape;
  std::int64_t numel() const {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
};

struct Header {
  CheckpointInfo info;
  std::vector<TensorEntry> tensors;
  std::int64_t adam_step = 0;
};

std::string header_line(std::istream& in, const std::string& path) {
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error(path + ": unexpected end of checkpoint (header)");
  return line;
}

Header read_header(std::istream& in, const std::string& path) {
  Header h;
  {
    std::istringstream ls(header_line(in, path));
    std::string magic;
    int version = 0;
    if (!(ls >> magic >> version)) throw std::runtime_error(path + ": malformed checkpoint header");
    if (magic != kCheckpointMagic)
      throw std::runtime_error(path + ": bad checkpoint magic '" + magic + "' (expected " +
                               kCheckpointMagic + ")");
    if (version != kCheckpointVersion)
      throw std::runtime_error(path + ": unsupported checkpoint version " +
                               std::to_string(version));
    h.info.version = version;
  }
  {
    std::istringstream ls(header_line(in, path));
    std::string key;
    if (!(ls >> key >> h.info.config_hash) || key != "config_hash")
      throw std::runtime_error(path + ": malformed checkpoint header (config_hash)");
  }
  {
    std::istringstream ls(header_line(in, path));
    std::string key;
    ModelConfig& m = h.info.model_config;
    if (!(ls >> key >> m.vocab_size >> m.d_model >> m.n_layers >> m.n_heads >> m.d_ff >>
          m.max_seq_len) ||
        key != "model")
      throw std::runtime_error(path + ": malformed checkpoint header (model)");
  }
  {
    std::istringstream ls(header_line(in, path));
    std::string key;
    if (!(ls >> key >> h.info.step) || key != "step")
      throw std::runtime_error(path + ": malformed checkpoint header (step)");
  }
  std::string line = header_line(in, path);
  if (line.rfind("adam_step", 0) == 0) {
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key >> h.adam_step))
      throw std::runtime_error(path + ": malformed checkpoint header (adam_step)");
    h.info.has_optimizer_state = true;
    line = header_line(in, path);
  }
  std::size_t count = 0;
  {
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key >> count) || key != "tensors")
      throw std::runtime_error(path + ": malformed checkpoint header (tensors)");
  }
  for (std::size_t i = 0; i < count; ++i) {
    std::istringstream ls(header_line(in, path));
    TensorEntry e;
    int ndim = 0;
    if (!(ls >> e.name >> ndim) || ndim < 1 || ndim > 8)
      throw std::runtime_error(path + ": malformed tensor table entry " + std::to_string(i));
    e.shape.resize(static_cast<std::size_t>(ndim));
    for (int d = 0; d < ndim; ++d) {
      if (!(ls >> e.shape[static_cast<std::size_t>(d)]) || e.shape[static_cast<std::size_t>(d)] < 1)
        throw std::runtime_error(path + ": malformed tensor shape for '" + e.name + "'");
    }
    h.tensors.push_back(std::move(e));
  }
  if (header_line(in, path) != "data")
    throw std::runtime_error(path + ": malformed checkpoint header (data marker)");
  return h;
}

void read_payload(std::istream& in, const std::string& path, std::vector<float>& buf) {
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != buf.size() * sizeof(float))
    throw std::runtime_error(path + ": unexpected end of checkpoint");
}

void skip_payload(std::istream& in, const std::string& path, std::int64_t numel) {
  in.seekg(static_cast<std::streamoff>(numel * static_cast<std::int64_t>(sizeof(float))),
           std::ios::cur);
  if (!in) throw std::runtime_error(path + ": unexpected end of checkpoint");
}

}  // namespace

void save_checkpoint(const std::string& path, const TransformerModel& model, std::int64_t step,
                     const std::string& config_hash, const AdamW<float>* optimizer) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open '" + path + "' for writing");
  const auto params = model.named_parameters();
  const ModelConfig& m = model.config();

  std::vector<std::pair<std::string, const std::vector<float>*>> entries;
  for (const auto& [name, t] : params) entries.emplace_back(name, &t.value());
  if (optimizer) {
    const auto& ms = optimizer->first_moments();
    const auto& vs = optimizer->second_moments();
    if (ms.size() != params.size() || vs.size() != params.size())
      throw std::logic_error("save_checkpoint: optimizer state does not match parameter registry");
    for (std::size_t i = 0; i < params.size(); ++i)
      entries.emplace_back("adam.m." + params[i].first, &ms[i]);
    for (std::size_t i = 0; i < params.size(); ++i)
      entries.emplace_back("adam.v." + params[i].first, &vs[i]);
  }

  out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  out << "config_hash " << (config_hash.empty() ? "unknown" : config_hash) << '\n';
  out << "model " << m.vocab_size << ' ' << m.d_model << ' ' << m.n_layers << ' ' << m.n_heads
      << ' ' << m.d_ff << ' ' << m.max_seq_len << '\n';
  out << "step " << step << '\n';
  if (optimizer) out << "adam_step " << optimizer->step_count() << '\n';
  out << "tensors " << entries.size() << '\n';
  // Moment buffers are flat; their logical shape is the owning parameter's.
  std::map<std::string, std::vector<int>> shapes;
  for (const auto& [name, t] : params) shapes[name] = t.shape();
  for (const auto& [name, data] : entries) {
    std::vector<int> shape;
    if (name.rfind("adam.", 0) == 0)
      shape = shapes.at(name.substr(7));  // strip "adam.m." / "adam.v."
    else
      shape = shapes.at(name);
    out << name << ' ' << shape.size();
    for (int d : shape) out << ' ' << d;
    out << '\n';
  }
  out << "data\n";
  for (const auto& [name, data] : entries)
    out.write(reinterpret_cast<const char*>(data->data()),
              static_cast<std::streamsize>(data->size() * sizeof(float)));
  if (!out) throw std::runtime_error("save_checkpoint: write failed for '" + path + "'");
}

CheckpointInfo load_checkpoint(const std::string& path, TransformerModel& model,
                               AdamW<float>* optimizer) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open '" + path + "'");
  Header h = read_header(in, path);
  if (optimizer && !h.info.has_optimizer_state)
    throw std::runtime_error(path + ": checkpoint has no optimizer state");

  auto params = model.named_parameters();
  std::map<std::string, std::size_t> registry;
  for (std::size_t i = 0; i < params.size(); ++i) registry[params[i].first] = i;

  // Validate the name set both ways before touching any parameter.
  std::map<std::string, const TensorEntry*> by_name;
  for (const auto& e : h.tensors) {
    if (!by_name.emplace(e.name, &e).second)
      throw std::runtime_error(path + ": duplicate tensor '" + e.name + "'");
    std::string base = e.name;
    if (base.rfind("adam.m.", 0) == 0 || base.rfind("adam.v.", 0) == 0) base = base.substr(7);
    auto it = registry.find(base);
    if (it == registry.end())
      throw std::runtime_error(path + ": unexpected tensor '" + e.name + "'");
    if (params[it->second].second.shape() != e.shape)
      throw std::runtime_error(path + ": tensor '" + e.name + "' shape mismatch");
  }
  for (const auto& [name, idx] : registry)
    if (!by_name.count(name))
      throw std::runtime_error(path + ": checkpoint missing tensor '" + name + "'");
  if (h.info.has_optimizer_state)
    for (const auto& [name, idx] : registry) {
      if (!by_name.count("adam.m." + name))
        throw std::runtime_error(path + ": checkpoint missing tensor 'adam.m." + name + "'");
      if (!by_name.count("adam.v." + name))
        throw std::runtime_error(path + ": checkpoint missing tensor 'adam.v." + name + "'");
    }

  if (optimizer) optimizer->register_params(model.parameters());
  for (const auto& e : h.tensors) {
    std::vector<float> buf(static_cast<std::size_t>(e.numel()));
    const bool is_m = e.name.rfind("adam.m.", 0) == 0;
    const bool is_v = e.name.rfind("adam.v.", 0) == 0;
    if (!is_m && !is_v) {
      read_payload(in, path, buf);
      params[registry.at(e.name)].second.mutable_value() = std::move(buf);
    } else if (optimizer) {
      read_payload(in, path, buf);
      const std::size_t idx = registry.at(e.name.substr(7));
      if (is_m)
        optimizer->mutable_first_moments()[idx] = std::move(buf);
      else
        optimizer->mutable_second_moments()[idx] = std::move(buf);
    } else {
      skip_payload(in, path, e.numel());
    }
  }
  if (optimizer) optimizer->set_step_count(h.adam_step);
  return h.info;
}

CheckpointInfo peek_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("peek_checkpoint: cannot open '" + path + "'");
  return read_header(in, path).info;
}

TransformerModel load_checkpoint_model(const std::string& path, CheckpointInfo* info) {
  CheckpointInfo head = peek_checkpoint(path);
  TransformerModel model(head.model_config);
  CheckpointInfo loaded = load_checkpoint(path, model);
  if (info) *info = loaded;
  return model;
}

}  // namespace lbr
