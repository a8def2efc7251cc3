// Segment layouts [X; Z; Y] and the bottleneck attention mask.
//
// The mask routes all information from the input segment X to the target
// segment Y through the bottleneck segment Z: X rows are causal within X,
// Z rows see all of X plus Z causally, and Y rows see Z plus Y causally but
// nothing in X. A diagnostic variant also blocks Z from X so tests can prove
// that no X information reaches the loss at all.

#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "lbr/tensor.hpp"

namespace lbr {

struct SegmentLayout {
  int x_len = 0;
  int z_len = 0;
  int y_len = 0;

  int total() const { return x_len + z_len + y_len; }
  int x_begin() const { return 0; }
  int x_end() const { return x_len; }
  int z_begin() const { return x_len; }
  int z_end() const { return x_len + z_len; }
  int y_begin() const { return x_len + z_len; }
  int y_end() const { return total(); }

  void validate() const {
    if (x_len < 0 || z_len < 0 || y_len < 0)
      throw std::invalid_argument("layout: negative segment length");
    if (y_len >= 1 && z_len == 0)
      throw std::invalid_argument("layout: bottleneck absent (y_len >= 1 requires z_len >= 1)");
    if (total() == 0) throw std::invalid_argument("layout: empty sequence");
  }
};

// Number of bottleneck tokens per input token; ceiling with a minimum of 1.
struct CompressionPolicy {
  double ratio = 32.0;

  void validate() const {
    if (!(ratio > 0)) throw std::invalid_argument("compression policy: ratio must be > 0");
  }

  bool operator==(const CompressionPolicy&) const = default;
};

// Plain lower-triangular causal mask (the no-bottleneck baseline).
inline BoolMatrix causal_mask(int n) {
  if (n < 1) throw std::invalid_argument("causal_mask: length must be >= 1");
  BoolMatrix m(n, n, false);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) m.set(i, j, true);
  return m;
}

inline int z_count(int x_len, const CompressionPolicy& policy) {
  policy.validate();
  if (x_len < 1)
    throw std::invalid_argument("z_count: empty input has no representation (x_len must be >= 1)");
  const int z = static_cast<int>(std::ceil(static_cast<double>(x_len) / policy.ratio));
  return z < 1 ? 1 : z;
}

// Layout for encoding: [X; Z] with no target segment.
inline SegmentLayout build_stage2_layout(int x_len, const CompressionPolicy& policy) {
  SegmentLayout layout{x_len, z_count(x_len, policy), 0};
  layout.validate();
  return layout;
}

// Index of the final bottleneck token, whose hidden state is the sequence
// representation.
inline int embedding_position(const SegmentLayout& layout) {
  if (layout.z_len < 1) throw std::invalid_argument("embedding_position: z_len must be >= 1");
  return layout.x_len + layout.z_len - 1;
}

struct IbMask {
  BoolMatrix allowed;
  SegmentLayout layout;
  bool diagnostic_block_z_to_x = false;
};

inline IbMask build_ib_mask(const SegmentLayout& layout, bool diagnostic_block_z_to_x = false) {
  layout.validate();
  const int n = layout.total();
  IbMask mask;
  mask.layout = layout;
  mask.diagnostic_block_z_to_x = diagnostic_block_z_to_x;
  mask.allowed = BoolMatrix(n, n, false);
  for (int i = layout.x_begin(); i < layout.x_end(); ++i)
    for (int j = layout.x_begin(); j <= i; ++j) mask.allowed.set(i, j, true);
  for (int i = layout.z_begin(); i < layout.z_end(); ++i) {
    if (!diagnostic_block_z_to_x)
      for (int j = layout.x_begin(); j < layout.x_end(); ++j) mask.allowed.set(i, j, true);
    for (int j = layout.z_begin(); j <= i; ++j) mask.allowed.set(i, j, true);
  }
  for (int i = layout.y_begin(); i < layout.y_end(); ++i) {
    for (int j = layout.z_begin(); j < layout.z_end(); ++j) mask.allowed.set(i, j, true);
    for (int j = layout.y_begin(); j <= i; ++j) mask.allowed.set(i, j, true);
  }
  return mask;
}

enum class AttentionMode { kCausal, kBidirectional };

inline AttentionMode attention_mode_from_string(const std::string& s) {
  if (s == "causal") return AttentionMode::kCausal;
  if (s == "bidirectional") return AttentionMode::kBidirectional;
  throw std::invalid_argument("unknown attention mode '" + s + "'");
}

inline std::string attention_mode_to_string(AttentionMode m) {
  return m == AttentionMode::kCausal ? "causal" : "bidirectional";
}

// Mask used when encoding a [X; Z] sequence. Causal mode is the bottleneck
// layout mask (which degenerates to plain causal when y_len = 0); the
// bidirectional mode is an all-true mask used by the attention ablation.
inline BoolMatrix encode_mask(const SegmentLayout& layout, AttentionMode mode) {
  if (mode == AttentionMode::kBidirectional) return BoolMatrix(layout.total(), layout.total(), true);
  return build_ib_mask(layout).allowed;
}

// ASCII rendering: '#' allowed, '.' blocked, one line per query row.
inline std::string render_mask(const BoolMatrix& mask) {
  std::string out;
  out.reserve(static_cast<std::size_t>(mask.rows) * (mask.cols + 1));
  for (int i = 0; i < mask.rows; ++i) {
    for (int j = 0; j < mask.cols; ++j) out.push_back(mask.at(i, j) ? '#' : '.');
    out.push_back('\n');
  }
  return out;
}

}  // namespace lbr
