// Run configuration: sectioned key=value text files with strict parsing
// (unknown keys rejected, defaults for absent optional keys), a canonical
// serialization, and an FNV-1a hash stamped into every artifact.

#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "lbr/corpus.hpp"
#include "lbr/model.hpp"
#include "lbr/train.hpp"

namespace lbr {

enum class PipelineVariant {
  kClOnly,    // stage 2 only
  kNaiveGlCl, // causal-mask stage 1, then stage 2
  kIbGlCl,    // bottleneck-mask stage 1, then stage 2
  kIbGlOnly,  // bottleneck-mask stage 1 only
};
std::string pipeline_variant_to_string(PipelineVariant v);
PipelineVariant pipeline_variant_from_string(const std::string& s);

struct RunConfig {
  std::uint64_t seed = 0;   // required in config files
  std::string output_dir;   // optional; CLI flag / LBR_OUTPUT_DIR may supply it
  PipelineVariant variant = PipelineVariant::kIbGlCl;

  ModelConfig model;        // model.seed is derived from the run seed
  WorldParams corpus;
  double holdout_fraction = 0.25;

  Stage1Config stage1;      // stage seeds/mask variant are derived at run time
  Stage2Config stage2;

  int eval_k = 10;
  int eval_max_new_tokens = 16;
  int eval_generation_examples = 32;  // held-in SFT questions decoded per eval
  int allocation_budget = 0;          // used by the allocation sweep

  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

RunConfig load_config(const std::string& path);
RunConfig parse_config_text(const std::string& text, const std::string& origin);

// Canonical serialization: every key in a fixed order, normalized values.
// `include_output_dir=false` is the form that gets hashed so that the same
// experiment written to two directories shares one hash.
std::string write_config_text(const RunConfig& cfg, bool include_output_dir = true);
void save_config(const RunConfig& cfg, const std::string& path);

std::uint64_t fnv1a64(std::string_view bytes);
std::string config_hash(const RunConfig& cfg);  // 16 hex chars

// Deterministic per-purpose seed derivation from the global run seed.
std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view tag);

// Revision string baked in at build time ("unknown" outside a git checkout).
std::string build_revision();

}  // namespace lbr
