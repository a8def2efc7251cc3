// Two-stage training: bottleneck-masked generative learning (stage 1) and
// in-batch-negative contrastive alignment of the bottleneck embedding
// (stage 2), plus the encoder and greedy decoder used downstream.

#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lbr/corpus.hpp"
#include "lbr/ib_mask.hpp"
#include "lbr/model.hpp"
#include "lbr/optimizer.hpp"
#include "lbr/tensor.hpp"

namespace lbr {

// Attention regime for the stage-1 packed sequence. kBottleneck is the
// information-cut-off mask; kBottleneckBlockedDiag additionally blocks the
// Z->X edges (test-only: proves exactly-zero gradients reach X); kCausal is
// the no-bottleneck baseline where Y reads X directly.
enum class Stage1MaskVariant { kBottleneck, kBottleneckBlockedDiag, kCausal };

struct Stage1Config {
  CompressionPolicy policy;  // compression ratio R
  int batch_size = 8;
  int steps = 1000;
  AdamConfig adam;
  int warmup_steps = 50;  // linear warmup to adam.lr, then constant
  GenStyle style = GenStyle::kSft;
  Stage1MaskVariant mask_variant = Stage1MaskVariant::kBottleneck;
  std::uint64_t seed = 0;
  int checkpoint_interval = 0;  // 0 = no periodic checkpoints

  void validate() const {
    policy.validate();
    adam.validate();
    if (steps < 0) throw std::invalid_argument("stage1: steps must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("stage1: batch size must be >= 1");
    if (warmup_steps < 0) throw std::invalid_argument("stage1: warmup must be >= 0");
  }

  bool operator==(const Stage1Config&) const = default;
};

struct Stage2Config {
  CompressionPolicy policy;  // encoder reuses the stage-1 bottleneck sizing
  double temperature = 0.05;
  int batch_size = 16;  // in-batch negatives = batch_size - 1
  int steps = 600;
  AdamConfig adam;
  int warmup_steps = 50;
  AttentionMode attention_mode = AttentionMode::kCausal;
  std::uint64_t seed = 0;

  void validate() const {
    policy.validate();
    adam.validate();
    if (!(temperature > 0.0)) throw std::invalid_argument("stage2: temperature must be > 0");
    if (batch_size < 2)
      throw std::invalid_argument("stage2: batch size must be >= 2 (need a negative)");
    if (steps < 0) throw std::invalid_argument("stage2: steps must be >= 0");
    if (warmup_steps < 0) throw std::invalid_argument("stage2: warmup must be >= 0");
  }

  bool operator==(const Stage2Config&) const = default;
};

// Handles exposed for gradient-flow tests on the stage-1 graph.
template <class T>
struct Stage1DebugT {
  Tensor<T> embedded;  // token+position embedding rows of the packed sequence
  SegmentLayout layout;
};

// Packs [X; BNK*z_count; Y], applies the selected mask, and scores
// next-token cross-entropy at Y positions only (Y_t is predicted from the
// logits at position t-1; the first Y token from the last bottleneck slot).
template <class T>
Tensor<T> stage1_loss(Tape<T>& tape, const TransformerModelT<T>& model, const GenExample& ex,
                      const CompressionPolicy& policy,
                      Stage1MaskVariant variant = Stage1MaskVariant::kBottleneck,
                      Stage1DebugT<T>* debug = nullptr) {
  if (ex.x_tokens.empty()) throw std::invalid_argument("stage1_loss: empty X");
  if (ex.y_tokens.empty()) throw std::invalid_argument("stage1_loss: empty Y");
  SegmentLayout layout{static_cast<int>(ex.x_tokens.size()),
                       z_count(static_cast<int>(ex.x_tokens.size()), policy),
                       static_cast<int>(ex.y_tokens.size())};
  if (layout.total() > model.config().max_seq_len)
    throw std::invalid_argument("stage1_loss: packed length " + std::to_string(layout.total()) +
                                " exceeds max_seq_len " +
                                std::to_string(model.config().max_seq_len));
  std::vector<int> tokens;
  tokens.reserve(static_cast<std::size_t>(layout.total()));
  tokens.insert(tokens.end(), ex.x_tokens.begin(), ex.x_tokens.end());
  tokens.insert(tokens.end(), static_cast<std::size_t>(layout.z_len), Vocabulary::kBnk);
  tokens.insert(tokens.end(), ex.y_tokens.begin(), ex.y_tokens.end());

  BoolMatrix allowed =
      variant == Stage1MaskVariant::kCausal
          ? causal_mask(layout.total())
          : build_ib_mask(layout, variant == Stage1MaskVariant::kBottleneckBlockedDiag).allowed;
  ForwardOptions fo;
  fo.want_logits = false;
  ForwardOutputT<T> out =
      model.forward(tape, tokens, allowed, contiguous_positions(layout.total()), fo);
  if (debug) {
    debug->embedded = out.embedded;
    debug->layout = layout;
  }
  // Rows [y_begin-1, total-2] predict tokens [y_begin, total-1] = Y.
  Tensor<T> logits = model.project_rows(tape, out.final_hidden, layout.y_begin() - 1, layout.y_len);
  return tape.cross_entropy(logits, ex.y_tokens, BoolVec(ex.y_tokens.size(), 1));
}

// Embedding forward: pack [tokens; BNK*z_count], run under the selected
// attention mode, L2-normalize the hidden state at the final bottleneck slot.
// Returns a [1, d_model] tensor on the tape.
template <class T>
Tensor<T> encode_tensor(Tape<T>& tape, const TransformerModelT<T>& model,
                        const std::vector<int>& tokens, const CompressionPolicy& policy,
                        AttentionMode mode = AttentionMode::kCausal) {
  if (tokens.empty()) throw std::invalid_argument("encode: empty input");
  SegmentLayout layout = build_stage2_layout(static_cast<int>(tokens.size()), policy);
  if (layout.total() > model.config().max_seq_len)
    throw std::invalid_argument("encode: packed length " + std::to_string(layout.total()) +
                                " exceeds max_seq_len " +
                                std::to_string(model.config().max_seq_len));
  std::vector<int> packed;
  packed.reserve(static_cast<std::size_t>(layout.total()));
  packed.insert(packed.end(), tokens.begin(), tokens.end());
  packed.insert(packed.end(), static_cast<std::size_t>(layout.z_len), Vocabulary::kBnk);
  ForwardOptions fo;
  fo.want_logits = false;
  ForwardOutputT<T> out = model.forward(tape, packed, encode_mask(layout, mode),
                                        contiguous_positions(layout.total()), fo);
  return tape.l2_normalize_rows(tape.slice_rows(out.final_hidden, embedding_position(layout), 1));
}

// One-directional InfoNCE over in-batch negatives: softmax over cosine
// similarities at temperature tau, targets on the diagonal.
template <class T>
Tensor<T> stage2_loss(Tape<T>& tape, const TransformerModelT<T>& model,
                      const std::vector<PairExample>& batch, const Stage2Config& config) {
  if (batch.size() < 2) throw std::invalid_argument("stage2_loss: batch must be >= 2");
  std::vector<Tensor<T>> q_rows, p_rows;
  q_rows.reserve(batch.size());
  p_rows.reserve(batch.size());
  for (const PairExample& ex : batch) {
    q_rows.push_back(
        encode_tensor(tape, model, ex.query_tokens, config.policy, config.attention_mode));
    p_rows.push_back(
        encode_tensor(tape, model, ex.positive_tokens, config.policy, config.attention_mode));
  }
  Tensor<T> q = tape.concat_rows(q_rows);
  Tensor<T> p = tape.concat_rows(p_rows);
  Tensor<T> logits = tape.scale(tape.matmul_nt(q, p), T(1) / static_cast<T>(config.temperature));
  std::vector<int> targets(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) targets[i] = static_cast<int>(i);
  return tape.cross_entropy(logits, targets, BoolVec(batch.size(), 1));
}

// No-grad encode to a plain unit vector.
std::vector<float> encode(const TransformerModel& model, const std::vector<int>& tokens,
                          const CompressionPolicy& policy,
                          AttentionMode mode = AttentionMode::kCausal);

// Unit-norm embedding rows with an aligned id list.
struct EmbeddingMatrix {
  int d = 0;
  std::vector<int> ids;
  std::vector<float> data;  // rows() * d, row-major

  int rows() const { return static_cast<int>(ids.size()); }
  const float* row(int i) const { return data.data() + static_cast<std::size_t>(i) * d; }
};

EmbeddingMatrix encode_all(const TransformerModel& model,
                           const std::vector<std::pair<int, std::vector<int>>>& id_tokens,
                           const CompressionPolicy& policy,
                           AttentionMode mode = AttentionMode::kCausal);

// Per-step record for the deterministic metrics stream (wall time is kept out
// of this stream on purpose; see the timings artifact).
struct StepRecord {
  int step = 0;
  float loss = 0.0f;
  float lr = 0.0f;
};
using MetricsSink = std::function<void(const StepRecord&)>;
using CheckpointHook = std::function<void(int step)>;

struct StageResult {
  std::vector<float> loss_history;  // one entry per step
};

// Seeded-shuffle minibatch training. The model is updated in place (its
// parameters share storage with the optimizer's view). Non-finite losses
// abort with the failing step index.
StageResult run_stage1(TransformerModel& model, const std::vector<GenExample>& dataset,
                       const Stage1Config& config, const MetricsSink& sink = nullptr,
                       const CheckpointHook& checkpoint = nullptr);

StageResult run_stage2(TransformerModel& model, const std::vector<PairExample>& dataset,
                       const Stage2Config& config, const MetricsSink& sink = nullptr);

// Seeded sampling without replacement: |stage1| = round(r_learn * budget),
// |stage2| = budget - |stage1|.
std::pair<std::vector<GenExample>, std::vector<PairExample>> split_allocation(
    const std::vector<GenExample>& gen_data, const std::vector<PairExample>& pair_data,
    double r_learn, int budget, std::uint64_t seed);

// Greedy (temperature-0) decoding under the bottleneck layout: repeatedly
// forward [X; Z; y_so_far] and append the argmax token (lowest id wins ties)
// until `stop_token` was emitted or `max_new_tokens` reached. The stop token
// is ordinary content here (the answers' sentence-final mark), so it stays in
// the output.
std::vector<int> greedy_decode(const TransformerModel& model, const std::vector<int>& x_tokens,
                               const CompressionPolicy& policy, int max_new_tokens,
                               int stop_token);

}  // namespace lbr
