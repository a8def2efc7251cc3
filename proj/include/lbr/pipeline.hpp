// End-to-end orchestration: world generation -> stage 1 -> stage 2 -> eval,
// in four variants (contrastive only, causal-mask generative + contrastive,
// bottleneck-mask generative + contrastive, bottleneck-mask generative only),
// plus the experiment sweeps over compression ratio, data allocation, and
// stage-2 attention mode.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lbr/checkpoint.hpp"
#include "lbr/config.hpp"
#include "lbr/eval.hpp"
#include "lbr/train.hpp"

namespace lbr {

struct StageTimings {
  double gen_seconds = 0.0;
  double stage1_seconds = 0.0;
  double stage2_seconds = 0.0;
  double eval_seconds = 0.0;
  double total_seconds = 0.0;
};

struct PipelineOptions {
  // When set, training data is cut to round(r_learn * allocation_budget)
  // generative examples and the remainder contrastive pairs. Endpoints skip
  // the starved stage entirely (r=0 -> pure contrastive, r=1 -> pure
  // generative).
  std::optional<double> r_learn;
  bool evaluate_stage1_generation = true;  // decode after stage 1 too
  MetricsSink stage1_sink;
  MetricsSink stage2_sink;
  std::string save_checkpoint_dir;  // empty = keep everything in memory
};

struct PipelineResult {
  MetricReport report;
  StageTimings timings;
  std::vector<float> stage1_loss_history;
  std::vector<float> stage2_loss_history;
  TransformerModel model;
  EvalSet eval_set;
};

PipelineResult run_pipeline(const RunConfig& cfg, const PipelineOptions& opts = {});

enum class SweepKind { kCompression, kAllocation, kAttention };
std::string sweep_kind_to_string(SweepKind k);
SweepKind sweep_kind_from_string(const std::string& s);

struct SweepResult {
  std::vector<MetricReport> reports;  // grid order
  std::string table;                  // aligned-column text
};

// One full pipeline run per grid point (shared seed). Grid values are parsed
// per kind: compression -> ratio, allocation -> r_learn, attention -> mode
// name. When `partial_report_path` is set, each completed point is appended
// and flushed immediately, so an aborted sweep leaves its finished points
// behind.
SweepResult run_sweep(SweepKind kind, const std::vector<std::string>& grid, const RunConfig& base,
                      const std::string& partial_report_path = "");

// Metric key helpers shared by reports and acceptance checks.
std::string recall_key(int k);
std::string ndcg_key(int k);

// Mean sentence BLEU-4 / ROUGE-L of greedy decodes over style-matched probe
// examples built from up to `limit` of the given entities (the pipeline uses
// held-in train entities).
struct GenerationScores {
  double bleu4 = 0.0;
  double rouge_l = 0.0;
};
GenerationScores evaluate_generation(const TransformerModel& model, const World& world,
                                     const std::vector<int>& entity_indices, GenStyle style,
                                     const CompressionPolicy& policy, int max_new_tokens,
                                     int limit);

}  // namespace lbr
