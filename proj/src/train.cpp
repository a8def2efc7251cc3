#include "lbr/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace lbr {

std::vector<float> encode(const TransformerModel& model, const std::vector<int>& tokens,
                          const CompressionPolicy& policy, AttentionMode mode) {
  Tape<float> tape(/*recording=*/false);
  return encode_tensor(tape, model, tokens, policy, mode).value();
}

EmbeddingMatrix encode_all(const TransformerModel& model,
                           const std::vector<std::pair<int, std::vector<int>>>& id_tokens,
                           const CompressionPolicy& policy, AttentionMode mode) {
  EmbeddingMatrix m;
  m.d = model.config().d_model;
  m.ids.reserve(id_tokens.size());
  m.data.reserve(id_tokens.size() * static_cast<std::size_t>(m.d));
  for (const auto& [id, tokens] : id_tokens) {
    std::vector<float> v = encode(model, tokens, policy, mode);
    m.ids.push_back(id);
    m.data.insert(m.data.end(), v.begin(), v.end());
  }
  return m;
}

namespace {

float lr_at(int step, int warmup, double base) {
  if (warmup > 0 && step < warmup)
    return static_cast<float>(base * static_cast<double>(step + 1) / static_cast<double>(warmup));
  return static_cast<float>(base);
}

// Continuous stream of seeded shuffled indices; reshuffles when exhausted so
// every batch is full-sized.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : rng_(seed), order_(n), pos_(n) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }

  std::vector<std::size_t> take(std::size_t k) {
    std::vector<std::size_t> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_;
};

}  // namespace

StageResult run_stage1(TransformerModel& model, const std::vector<GenExample>& dataset,
                       const Stage1Config& config, const MetricsSink& sink,
                       const CheckpointHook& checkpoint) {
  config.validate();
  if (dataset.empty()) throw std::invalid_argument("run_stage1: empty dataset");
  StageResult res;
  if (config.steps == 0) return res;
  AdamW<float> opt(config.adam);
  opt.register_params(model.parameters());
  BatchSampler sampler(dataset.size(), config.seed);
  for (int step = 0; step < config.steps; ++step) {
    const float lr = lr_at(step, config.warmup_steps, config.adam.lr);
    float loss_value = 0.0f;
    try {
      Tape<float> tape;
      std::vector<std::size_t> idx = sampler.take(static_cast<std::size_t>(config.batch_size));
      Tensor<float> total =
          stage1_loss(tape, model, dataset[idx[0]], config.policy, config.mask_variant);
      for (std::size_t i = 1; i < idx.size(); ++i)
        total = tape.add(
            total, stage1_loss(tape, model, dataset[idx[i]], config.policy, config.mask_variant));
      Tensor<float> loss = tape.scale(total, 1.0f / static_cast<float>(idx.size()));
      loss_value = loss.scalar();
      opt.zero_grad();
      tape.backward(loss);
      opt.step(lr);
    } catch (const NumericError& e) {
      throw std::runtime_error("run_stage1: training diverged at step " + std::to_string(step) +
                               ": " + e.what());
    }
    res.loss_history.push_back(loss_value);
    if (sink) sink(StepRecord{step, loss_value, lr});
    if (checkpoint && config.checkpoint_interval > 0 &&
        (step + 1) % config.checkpoint_interval == 0)
      checkpoint(step + 1);
  }
  return res;
}

StageResult run_stage2(TransformerModel& model, const std::vector<PairExample>& dataset,
                       const Stage2Config& config, const MetricsSink& sink) {
  config.validate();
  if (dataset.size() < static_cast<std::size_t>(config.batch_size))
    throw std::invalid_argument("run_stage2: dataset smaller than one batch");
  StageResult res;
  if (config.steps == 0) return res;
  AdamW<float> opt(config.adam);
  opt.register_params(model.parameters());
  BatchSampler sampler(dataset.size(), config.seed);
  for (int step = 0; step < config.steps; ++step) {
    const float lr = lr_at(step, config.warmup_steps, config.adam.lr);
    float loss_value = 0.0f;
    try {
      Tape<float> tape;
      std::vector<std::size_t> idx = sampler.take(static_cast<std::size_t>(config.batch_size));
      std::vector<PairExample> batch;
      batch.reserve(idx.size());
      for (std::size_t i : idx) batch.push_back(dataset[i]);
      Tensor<float> loss = stage2_loss(tape, model, batch, config);
      loss_value = loss.scalar();
      opt.zero_grad();
      tape.backward(loss);
      opt.step(lr);
    } catch (const NumericError& e) {
      throw std::runtime_error("run_stage2: training diverged at step " + std::to_string(step) +
                               ": " + e.what());
    }
    res.loss_history.push_back(loss_value);
    if (sink) sink(StepRecord{step, loss_value, lr});
  }
  return res;
}

std::pair<std::vector<GenExample>, std::vector<PairExample>> split_allocation(
    const std::vector<GenExample>& gen_data, const std::vector<PairExample>& pair_data,
    double r_learn, int budget, std::uint64_t seed) {
  if (!(r_learn >= 0.0 && r_learn <= 1.0))
    throw std::invalid_argument("split_allocation: r_learn must be in [0, 1]");
  if (budget < 1) throw std::invalid_argument("split_allocation: budget must be >= 1");
  const int n1 = static_cast<int>(std::llround(r_learn * static_cast<double>(budget)));
  const int n2 = budget - n1;
  if (n1 > static_cast<int>(gen_data.size()) || n2 > static_cast<int>(pair_data.size()))
    throw std::runtime_error("split_allocation: budget exceeds available data (need " +
                             std::to_string(n1) + " gen of " + std::to_string(gen_data.size()) +
                             ", " + std::to_string(n2) + " pairs of " +
                             std::to_string(pair_data.size()) + ")");

  auto sample_indices = [](std::size_t n, int k, std::uint64_t s) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(s);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(static_cast<std::size_t>(k));
    std::sort(order.begin(), order.end());  // stable downstream iteration order
    return order;
  };
  std::pair<std::vector<GenExample>, std::vector<PairExample>> out;
  for (std::size_t i : sample_indices(gen_data.size(), n1, seed))
    out.first.push_back(gen_data[i]);
  for (std::size_t i : sample_indices(pair_data.size(), n2, seed ^ 0xa5a5a5a5a5a5a5a5ULL))
    out.second.push_back(pair_data[i]);
  return out;
}

std::vector<int> greedy_decode(const TransformerModel& model, const std::vector<int>& x_tokens,
                               const CompressionPolicy& policy, int max_new_tokens,
                               int stop_token) {
  if (x_tokens.empty()) throw std::invalid_argument("greedy_decode: empty input");
  if (max_new_tokens < 1) throw std::invalid_argument("greedy_decode: max_new_tokens must be >= 1");
  const int x_len = static_cast<int>(x_tokens.size());
  const int z_len = z_count(x_len, policy);
  std::vector<int> generated;
  for (int t = 0; t < max_new_tokens; ++t) {
    SegmentLayout layout{x_len, z_len, t};
    if (layout.total() + 1 > model.config().max_seq_len) break;
    std::vector<int> tokens;
    tokens.reserve(static_cast<std::size_t>(layout.total()));
    tokens.insert(tokens.end(), x_tokens.begin(), x_tokens.end());
    tokens.insert(tokens.end(), static_cast<std::size_t>(z_len), Vocabulary::kBnk);
    tokens.insert(tokens.end(), generated.begin(), generated.end());
    Tape<float> tape(/*recording=*/false);
    ForwardOptions fo;
    fo.want_logits = false;
    ForwardOutputT<float> out = model.forward(
        tape, tokens, build_ib_mask(layout).allowed, contiguous_positions(layout.total()), fo);
    Tensor<float> logits = model.project_rows(tape, out.final_hidden, layout.total() - 1, 1);
    const std::vector<float>& row = logits.value();
    int best = 0;
    for (int v = 1; v < model.config().vocab_size; ++v)
      if (row[static_cast<std::size_t>(v)] > row[static_cast<std::size_t>(best)]) best = v;
    generated.push_back(best);
    if (best == stop_token) break;
  }
  return generated;
}

}  // namespace lbr
