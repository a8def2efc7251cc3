// Retrieval and generation metrics, exact nearest-neighbor search, and
// embedding-collapse diagnostics. Everything here is pure and deterministic;
// brute-force implementations double as their own oracles.

#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lbr/train.hpp"

namespace lbr {

struct ScoredDoc {
  int doc_id = 0;
  float score = 0.0f;
};

// Per-query ranked lists, scores non-increasing, ids unique per query.
struct RetrievalRun {
  std::vector<int> query_ids;
  std::vector<std::vector<ScoredDoc>> rankings;  // aligned with query_ids
};

using Qrels = std::map<int, std::set<int>>;

// Exact top-k by dot product of the given rows (cosine when rows are unit);
// ties broken by ascending document id; k larger than the corpus returns the
// full ranking.
RetrievalRun retrieve(const EmbeddingMatrix& corpus, const EmbeddingMatrix& queries, int k);

// Mean over queries of |relevant in top-k| / |relevant|.
double recall_at_k(const RetrievalRun& run, const Qrels& qrels, int k = 10);

// Binary-gain NDCG: DCG = sum rel_i / log2(i + 1) over ranks i <= k,
// normalized by the ideal DCG.
double ndcg_at_k(const RetrievalRun& run, const Qrels& qrels, int k = 10);

// Sentence BLEU-4: geometric mean of clipped modified n-gram precisions
// (n = 1..4) times the brevity penalty; no smoothing, so any empty n-gram
// precision (e.g. candidates shorter than 4 tokens) scores 0.
double bleu4(const std::vector<int>& candidate, const std::vector<int>& reference);

// LCS-based F1 (beta = 1).
double rouge_l(const std::vector<int>& candidate, const std::vector<int>& reference);

struct CollapseDiagnostics {
  double mean_pairwise_cosine = 0.0;  // mean over unordered row pairs
  double effective_rank = 0.0;        // participation ratio (sum s^2)^2 / sum s^4
};

CollapseDiagnostics collapse_diagnostics(const EmbeddingMatrix& embeddings);

// Eigenvalues of a symmetric matrix (row-major n*n) by cyclic Jacobi
// rotations, descending order. Exposed for the diagnostics oracle tests.
std::vector<double> symmetric_eigenvalues(std::vector<double> a, int n);

struct MetricReport {
  std::string name;                      // run / sweep-point label
  std::map<std::string, double> metrics; // key-sorted, deterministic
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string revision;
  double wall_time_seconds = 0.0;  // kept out of the deterministic stream
};

// `include_wall_time=false` yields the byte-stable form used for report JSONL;
// wall time goes to the separate timings artifact.
nlohmann::json metric_report_json(const MetricReport& report, bool include_wall_time);

// Aligned-column text table (two-space gutters, left-aligned).
std::string render_table(const std::vector<std::string>& header,
                         const std::vector<std::vector<std::string>>& rows);

std::string format_metric(double value);  // fixed 4 decimals

}  // namespace lbr
