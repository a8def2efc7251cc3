// Small decoder-only transformer whose attention takes an arbitrary
// per-sequence boolean mask, so the same weights serve standard causal
// attention, the bottleneck mask, and the bidirectional ablation.
//
// Pre-norm residual blocks with RMS normalization, learned absolute position
// embeddings (positions supplied explicitly by the caller), bias-free
// projections, and the output projection weight-tied to the token embedding.

#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lbr/tensor.hpp"

namespace lbr {

struct ModelConfig {
  int vocab_size = 512;
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 512;
  int max_seq_len = 256;
  std::uint64_t seed = 0;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (vocab_size < 4)
      throw std::invalid_argument("model config: vocab_size must be >= 4 (reserved specials)");
    if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 || max_seq_len < 1)
      throw std::invalid_argument("model config: all counts must be >= 1");
    if (d_model % n_heads != 0)
      throw std::invalid_argument("model config: d_model must be divisible by n_heads");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct ForwardOutputT {
  Tensor<T> logits;        // [seq, vocab] (undefined when not requested)
  Tensor<T> final_hidden;  // [seq, d_model], post final norm
  Tensor<T> embedded;      // [seq, d_model], token+position embedding sum
  std::vector<Tensor<T>> attn_probs;  // per layer, heads concatenated row-blocks
};

struct ForwardOptions {
  bool want_logits = true;
  bool want_attn_probs = false;
};

template <class T>
class TransformerModelT {
 public:
  struct Layer {
    Tensor<T> attn_norm;
    Tensor<T> wq, wk, wv, wo;
    Tensor<T> ff_norm;
    Tensor<T> w1, w2;
  };

  explicit TransformerModelT(const ModelConfig& config) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(config_.seed);
    const T std_base = T(0.02);
    const T std_resid = std_base / std::sqrt(T(2) * static_cast<T>(config_.n_layers));
    tok_embed_ = init_normal(rng, {config_.vocab_size, config_.d_model}, std_base);
    pos_embed_ = init_normal(rng, {config_.max_seq_len, config_.d_model}, std_base);
    layers_.reserve(config_.n_layers);
    for (int l = 0; l < config_.n_layers; ++l) {
      Layer layer;
      layer.attn_norm = init_ones({config_.d_model});
      layer.wq = init_normal(rng, {config_.d_model, config_.d_model}, std_base);
      layer.wk = init_normal(rng, {config_.d_model, config_.d_model}, std_base);
      layer.wv = init_normal(rng, {config_.d_model, config_.d_model}, std_base);
      layer.wo = init_normal(rng, {config_.d_model, config_.d_model}, std_resid);
      layer.ff_norm = init_ones({config_.d_model});
      layer.w1 = init_normal(rng, {config_.d_model, config_.d_ff}, std_base);
      layer.w2 = init_normal(rng, {config_.d_ff, config_.d_model}, std_resid);
      layers_.push_back(std::move(layer));
    }
    final_norm_ = init_ones({config_.d_model});
  }

  const ModelConfig& config() const { return config_; }
  const Tensor<T>& token_embedding() const { return tok_embed_; }

  // Stable name -> tensor registry; order defines checkpoint layout.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("tok_embed", tok_embed_);
    out.emplace_back("pos_embed", pos_embed_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      out.emplace_back(p + "attn_norm", layers_[l].attn_norm);
      out.emplace_back(p + "wq", layers_[l].wq);
      out.emplace_back(p + "wk", layers_[l].wk);
      out.emplace_back(p + "wv", layers_[l].wv);
      out.emplace_back(p + "wo", layers_[l].wo);
      out.emplace_back(p + "ff_norm", layers_[l].ff_norm);
      out.emplace_back(p + "w1", layers_[l].w1);
      out.emplace_back(p + "w2", layers_[l].w2);
    }
    out.emplace_back("final_norm", final_norm_);
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : named_parameters()) n += t.numel();
    return n;
  }

  ForwardOutputT<T> forward(Tape<T>& tape, const std::vector<int>& tokens, const BoolMatrix& mask,
                            const std::vector<int>& positions,
                            const ForwardOptions& opts = {}) const {
    const int n = static_cast<int>(tokens.size());
    if (n == 0) throw std::invalid_argument("forward: empty token sequence");
    if (n > config_.max_seq_len)
      throw std::invalid_argument("forward: sequence length " + std::to_string(n) +
                                  " exceeds max_seq_len " + std::to_string(config_.max_seq_len));
    if (mask.rows != n || mask.cols != n)
      throw std::invalid_argument("forward: mask shape must equal sequence length");
    if (static_cast<int>(positions.size()) != n)
      throw std::invalid_argument("forward: positions length mismatch");
    for (int t : tokens)
      if (t < 0 || t >= config_.vocab_size)
        throw std::out_of_range("forward: token id " + std::to_string(t) + " out of vocab");
    for (int p : positions)
      if (p < 0 || p >= config_.max_seq_len)
        throw std::out_of_range("forward: position id " + std::to_string(p) + " out of range");

    ForwardOutputT<T> out;
    Tensor<T> x = tape.add(tape.rows_from_table(tok_embed_, tokens),
                           tape.rows_from_table(pos_embed_, positions));
    out.embedded = x;
    const int hd = config_.head_dim();
    const T inv_sqrt_hd = T(1) / std::sqrt(static_cast<T>(hd));
    for (const Layer& layer : layers_) {
      Tensor<T> h = tape.rmsnorm(x, layer.attn_norm);
      Tensor<T> q = tape.matmul(h, layer.wq);
      Tensor<T> k = tape.matmul(h, layer.wk);
      Tensor<T> v = tape.matmul(h, layer.wv);
      std::vector<Tensor<T>> head_ctx;
      std::vector<Tensor<T>> head_probs;
      head_ctx.reserve(config_.n_heads);
      for (int head = 0; head < config_.n_heads; ++head) {
        Tensor<T> qh = tape.slice_cols(q, head * hd, hd);
        Tensor<T> kh = tape.slice_cols(k, head * hd, hd);
        Tensor<T> vh = tape.slice_cols(v, head * hd, hd);
        Tensor<T> scores = tape.scale(tape.matmul_nt(qh, kh), inv_sqrt_hd);
        Tensor<T> probs = tape.masked_softmax(scores, mask);
        if (opts.want_attn_probs) head_probs.push_back(probs);
        head_ctx.push_back(tape.matmul(probs, vh));
      }
      if (opts.want_attn_probs) out.attn_probs.push_back(tape.concat_rows(head_probs));
      Tensor<T> ctx = config_.n_heads == 1 ? head_ctx[0] : tape.concat_cols(head_ctx);
      x = tape.add(x, tape.matmul(ctx, layer.wo));
      Tensor<T> f = tape.rmsnorm(x, layer.ff_norm);
      f = tape.matmul(tape.gelu(tape.matmul(f, layer.w1)), layer.w2);
      x = tape.add(x, f);
    }
    out.final_hidden = tape.rmsnorm(x, final_norm_);
    if (opts.want_logits) out.logits = tape.matmul_nt(out.final_hidden, tok_embed_);
    return out;
  }

  // Logits for selected rows of the final hidden state only; avoids the full
  // [seq, vocab] projection when the loss touches a small suffix.
  Tensor<T> project_rows(Tape<T>& tape, const Tensor<T>& final_hidden, int start, int len) const {
    return tape.matmul_nt(tape.slice_rows(final_hidden, start, len), tok_embed_);
  }

 private:
  Tensor<T> init_normal(std::mt19937_64& rng, std::vector<int> shape, T std) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    std::normal_distribution<double> dist(0.0, static_cast<double>(std));
    std::vector<T> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>::parameter(std::move(shape), std::move(v));
  }

  Tensor<T> init_ones(std::vector<int> shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return Tensor<T>::parameter(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), T(1)));
  }

  ModelConfig config_;
  Tensor<T> tok_embed_;
  Tensor<T> pos_embed_;
  std::vector<Layer> layers_;
  Tensor<T> final_norm_;
};

using TransformerModel = TransformerModelT<float>;
using ForwardOutput = ForwardOutputT<float>;

inline std::vector<int> contiguous_positions(int n) {
  std::vector<int> p(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
  return p;
}

}  // namespace lbr
