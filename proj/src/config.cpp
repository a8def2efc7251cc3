#include "lbr/config.hpp"

#include <cctype>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#ifndef LBR_REVISION
#define LBR_REVISION "unknown"
#endif

namespace lbr {

std::string pipeline_variant_to_string(PipelineVariant v) {
  switch (v) {
    case PipelineVariant::kClOnly: return "cl";
    case PipelineVariant::kNaiveGlCl: return "gl_cl";
    case PipelineVariant::kIbGlCl: return "ibgl_cl";
    case PipelineVariant::kIbGlOnly: return "ibgl";
  }
  throw std::invalid_argument("pipeline_variant_to_string: bad enum");
}

PipelineVariant pipeline_variant_from_string(const std::string& s) {
  if (s == "cl") return PipelineVariant::kClOnly;
  if (s == "gl_cl") return PipelineVariant::kNaiveGlCl;
  if (s == "ibgl_cl") return PipelineVariant::kIbGlCl;
  if (s == "ibgl") return PipelineVariant::kIbGlOnly;
  throw std::invalid_argument("unknown pipeline variant '" + s +
                              "' (expected cl | gl_cl | ibgl_cl | ibgl)");
}

void RunConfig::validate() const {
  model.validate();
  stage1.validate();
  stage2.validate();
  if (corpus.n_entities < 2) throw std::invalid_argument("config: need at least 2 entities");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0))
    throw std::invalid_argument("config: holdout_fraction must be in (0, 1)");
  if (eval_k < 1) throw std::invalid_argument("config: eval_k must be >= 1");
  if (eval_max_new_tokens < 1)
    throw std::invalid_argument("config: eval_max_new_tokens must be >= 1");
  if (eval_generation_examples < 1)
    throw std::invalid_argument("config: eval_generation_examples must be >= 1");
  if (allocation_budget < 0)
    throw std::invalid_argument("config: allocation_budget must be >= 0");
}

namespace {

struct RawConfig {
  // section -> key -> value, with the file's origin for error messages.
  std::map<std::string, std::map<std::string, std::string>> sections;
  std::string origin;

  bool has(const std::string& sec, const std::string& key) const {
    auto s = sections.find(sec);
    return s != sections.end() && s->second.count(key) != 0;
  }

  std::string take(std::set<std::string>& unused, const std::string& sec,
                   const std::string& key) {
    unused.erase(sec + "." + key);
    return sections.at(sec).at(key);
  }
};

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

RawConfig parse_raw(const std::string& text, const std::string& origin) {
  RawConfig raw;
  raw.origin = origin;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": unterminated section");
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty())
        throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": empty section name");
      raw.sections[section];  // a section may legitimately stay empty
      continue;
    }
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": expected key = value");
    if (section.empty())
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": key outside a section");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": empty key");
    if (raw.sections[section].count(key))
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": duplicate key '" +
                               section + "." + key + "'");
    raw.sections[section][key] = value;
  }
  return raw;
}

long long to_int(const RawConfig& raw, const std::string& spec, const std::string& value) {
  try {
    std::size_t pos = 0;
    long long v = std::stoll(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error(raw.origin + ": key '" + spec + "': expected integer, got '" +
                             value + "'");
  }
}

double to_double(const RawConfig& raw, const std::string& spec, const std::string& value) {
  try {
    std::size_t pos = 0;
    double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error(raw.origin + ": key '" + spec + "': expected number, got '" +
                             value + "'");
  }
}

std::uint64_t to_u64(const RawConfig& raw, const std::string& spec, const std::string& value) {
  try {
    std::size_t pos = 0;
    unsigned long long v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error(raw.origin + ": key '" + spec + "': expected unsigned integer, got '" +
                             value + "'");
  }
}

}  // namespace

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
  RawConfig raw = parse_raw(text, origin);

  static const std::set<std::string> kKnown = {
      "run.seed", "run.output_dir", "run.variant",
      "model.vocab_size", "model.d_model", "model.n_layers", "model.n_heads", "model.d_ff",
      "model.max_seq_len",
      "corpus.n_entities", "corpus.n_aliases_per_entity", "corpus.n_facts_per_entity",
      "corpus.n_relations", "corpus.n_values", "corpus.holdout_fraction",
      "stage1.ratio", "stage1.batch_size", "stage1.steps", "stage1.lr", "stage1.warmup_steps",
      "stage1.style", "stage1.checkpoint_interval",
      "stage2.temperature", "stage2.batch_size", "stage2.steps", "stage2.lr",
      "stage2.warmup_steps", "stage2.attention",
      "eval.k", "eval.max_new_tokens", "eval.generation_examples", "eval.allocation_budget"};
  static const std::set<std::string> kSections = {"run", "model", "corpus", "stage1", "stage2",
                                                  "eval"};

  std::set<std::string> unused;
  for (const auto& [sec, kv] : raw.sections) {
    if (!kSections.count(sec))
      throw std::runtime_error(origin + ": unknown section '[" + sec + "]'");
    for (const auto& [key, value] : kv) {
      const std::string spec = sec + "." + key;
      if (!kKnown.count(spec)) throw std::runtime_error(origin + ": unknown key '" + spec + "'");
      unused.insert(spec);
    }
  }

  if (!raw.has("run", "seed")) throw std::runtime_error(origin + ": seed required ([run] seed)");

  RunConfig cfg;
  cfg.seed = to_u64(raw, "run.seed", raw.take(unused, "run", "seed"));
  if (raw.has("run", "output_dir")) cfg.output_dir = raw.take(unused, "run", "output_dir");
  if (raw.has("run", "variant"))
    cfg.variant = pipeline_variant_from_string(raw.take(unused, "run", "variant"));

  auto geti = [&](const char* sec, const char* key, int dflt) {
    if (!raw.has(sec, key)) return dflt;
    const std::string spec = std::string(sec) + "." + key;
    return static_cast<int>(to_int(raw, spec, raw.take(unused, sec, key)));
  };
  auto getd = [&](const char* sec, const char* key, double dflt) {
    if (!raw.has(sec, key)) return dflt;
    const std::string spec = std::string(sec) + "." + key;
    return to_double(raw, spec, raw.take(unused, sec, key));
  };

  cfg.model.vocab_size = geti("model", "vocab_size", cfg.model.vocab_size);
  cfg.model.d_model = geti("model", "d_model", cfg.model.d_model);
  cfg.model.n_layers = geti("model", "n_layers", cfg.model.n_layers);
  cfg.model.n_heads = geti("model", "n_heads", cfg.model.n_heads);
  cfg.model.d_ff = geti("model", "d_ff", cfg.model.d_ff);
  cfg.model.max_seq_len = geti("model", "max_seq_len", cfg.model.max_seq_len);

  cfg.corpus.n_entities = geti("corpus", "n_entities", cfg.corpus.n_entities);
  cfg.corpus.n_aliases_per_entity =
      geti("corpus", "n_aliases_per_entity", cfg.corpus.n_aliases_per_entity);
  cfg.corpus.n_facts_per_entity =
      geti("corpus", "n_facts_per_entity", cfg.corpus.n_facts_per_entity);
  cfg.corpus.n_relations = geti("corpus", "n_relations", cfg.corpus.n_relations);
  cfg.corpus.n_values = geti("corpus", "n_values", cfg.corpus.n_values);
  cfg.corpus.vocab_budget = cfg.model.vocab_size;
  cfg.holdout_fraction = getd("corpus", "holdout_fraction", cfg.holdout_fraction);

  cfg.stage1.policy.ratio = getd("stage1", "ratio", cfg.stage1.policy.ratio);
  cfg.stage1.batch_size = geti("stage1", "batch_size", cfg.stage1.batch_size);
  cfg.stage1.steps = geti("stage1", "steps", cfg.stage1.steps);
  cfg.stage1.adam.lr = getd("stage1", "lr", cfg.stage1.adam.lr);
  cfg.stage1.warmup_steps = geti("stage1", "warmup_steps", cfg.stage1.warmup_steps);
  if (raw.has("stage1", "style"))
    cfg.stage1.style = gen_style_from_string(raw.take(unused, "stage1", "style"));
  cfg.stage1.checkpoint_interval =
      geti("stage1", "checkpoint_interval", cfg.stage1.checkpoint_interval);

  cfg.stage2.policy.ratio = cfg.stage1.policy.ratio;  // encoder mirrors stage 1
  cfg.stage2.temperature = getd("stage2", "temperature", cfg.stage2.temperature);
  cfg.stage2.batch_size = geti("stage2", "batch_size", cfg.stage2.batch_size);
  cfg.stage2.steps = geti("stage2", "steps", cfg.stage2.steps);
  cfg.stage2.adam.lr = getd("stage2", "lr", cfg.stage2.adam.lr);
  cfg.stage2.warmup_steps = geti("stage2", "warmup_steps", cfg.stage2.warmup_steps);
  if (raw.has("stage2", "attention"))
    cfg.stage2.attention_mode =
        attention_mode_from_string(raw.take(unused, "stage2", "attention"));

  cfg.eval_k = geti("eval", "k", cfg.eval_k);
  cfg.eval_max_new_tokens = geti("eval", "max_new_tokens", cfg.eval_max_new_tokens);
  cfg.eval_generation_examples =
      geti("eval", "generation_examples", cfg.eval_generation_examples);
  cfg.allocation_budget = geti("eval", "allocation_budget", cfg.allocation_budget);

  if (!unused.empty())
    throw std::logic_error(origin + ": internal: unconsumed key '" + *unused.begin() + "'");
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path);
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string write_config_text(const RunConfig& cfg, bool include_output_dir) {
  std::ostringstream out;
  out << "[run]\n";
  out << "seed = " << cfg.seed << "\n";
  if (include_output_dir && !cfg.output_dir.empty())
    out << "output_dir = " << cfg.output_dir << "\n";
  out << "variant = " << pipeline_variant_to_string(cfg.variant) << "\n";
  out << "\n[model]\n";
  out << "vocab_size = " << cfg.model.vocab_size << "\n";
  out << "d_model = " << cfg.model.d_model << "\n";
  out << "n_layers = " << cfg.model.n_layers << "\n";
  out << "n_heads = " << cfg.model.n_heads << "\n";
  out << "d_ff = " << cfg.model.d_ff << "\n";
  out << "max_seq_len = " << cfg.model.max_seq_len << "\n";
  out << "\n[corpus]\n";
  out << "n_entities = " << cfg.corpus.n_entities << "\n";
  out << "n_aliases_per_entity = " << cfg.corpus.n_aliases_per_entity << "\n";
  out << "n_facts_per_entity = " << cfg.corpus.n_facts_per_entity << "\n";
  out << "n_relations = " << cfg.corpus.n_relations << "\n";
  out << "n_values = " << cfg.corpus.n_values << "\n";
  out << "holdout_fraction = " << fmt_double(cfg.holdout_fraction) << "\n";
  out << "\n[stage1]\n";
  out << "ratio = " << fmt_double(cfg.stage1.policy.ratio) << "\n";
  out << "batch_size = " << cfg.stage1.batch_size << "\n";
  out << "steps = " << cfg.stage1.steps << "\n";
  out << "lr = " << fmt_double(cfg.stage1.adam.lr) << "\n";
  out << "warmup_steps = " << cfg.stage1.warmup_steps << "\n";
  out << "style = " << gen_style_to_string(cfg.stage1.style) << "\n";
  out << "checkpoint_interval = " << cfg.stage1.checkpoint_interval << "\n";
  out << "\n[stage2]\n";
  out << "temperature = " << fmt_double(cfg.stage2.temperature) << "\n";
  out << "batch_size = " << cfg.stage2.batch_size << "\n";
  out << "steps = " << cfg.stage2.steps << "\n";
  out << "lr = " << fmt_double(cfg.stage2.adam.lr) << "\n";
  out << "warmup_steps = " << cfg.stage2.warmup_steps << "\n";
  out << "attention = " << attention_mode_to_string(cfg.stage2.attention_mode) << "\n";
  out << "\n[eval]\n";
  out << "k = " << cfg.eval_k << "\n";
  out << "max_new_tokens = " << cfg.eval_max_new_tokens << "\n";
  out << "generation_examples = " << cfg.eval_generation_examples << "\n";
  out << "allocation_budget = " << cfg.allocation_budget << "\n";
  return out.str();
}

void save_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_config: cannot open '" + path + "' for writing");
  out << write_config_text(cfg);
  if (!out) throw std::runtime_error("save_config: write failed for '" + path + "'");
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string config_hash(const RunConfig& cfg) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64,
                fnv1a64(write_config_text(cfg, /*include_output_dir=*/false)));
  return buf;
}

std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view tag) {
  // splitmix64 finalizer over (seed ^ tag hash) decorrelates per-purpose streams
  std::uint64_t z = global_seed ^ fnv1a64(tag);
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string build_revision() { return LBR_REVISION; }

}  // namespace lbr
