#include "lbr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace lbr {

RetrievalRun retrieve(const EmbeddingMatrix& corpus, const EmbeddingMatrix& queries, int k) {
  if (corpus.rows() == 0) throw std::invalid_argument("retrieve: empty corpus");
  if (k < 1) throw std::invalid_argument("retrieve: k must be >= 1");
  if (queries.d != corpus.d)
    throw std::invalid_argument("retrieve: query/corpus dimensionality mismatch");
  const int keep = std::min(k, corpus.rows());
  RetrievalRun run;
  run.query_ids.reserve(queries.ids.size());
  run.rankings.reserve(queries.ids.size());
  for (int qi = 0; qi < queries.rows(); ++qi) {
    const float* q = queries.row(qi);
    std::vector<ScoredDoc> scored(static_cast<std::size_t>(corpus.rows()));
    for (int ci = 0; ci < corpus.rows(); ++ci) {
      const float* c = corpus.row(ci);
      float dot = 0.0f;
      for (int j = 0; j < corpus.d; ++j) dot += q[j] * c[j];
      scored[static_cast<std::size_t>(ci)] = ScoredDoc{corpus.ids[static_cast<std::size_t>(ci)], dot};
    }
    std::sort(scored.begin(), scored.end(), [](const ScoredDoc& a, const ScoredDoc& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.doc_id < b.doc_id;
    });
    scored.resize(static_cast<std::size_t>(keep));
    run.query_ids.push_back(queries.ids[static_cast<std::size_t>(qi)]);
    run.rankings.push_back(std::move(scored));
  }
  return run;
}

namespace {

const std::set<int>& relevant_for(const Qrels& qrels, int query_id) {
  auto it = qrels.find(query_id);
  if (it == qrels.end() || it->second.empty())
    throw std::invalid_argument("missing qrels for query " + std::to_string(query_id));
  return it->second;
}

}  // namespace

double recall_at_k(const RetrievalRun& run, const Qrels& qrels, int k) {
  if (k < 1) throw std::invalid_argument("recall_at_k: k must be >= 1");
  if (run.query_ids.empty()) throw std::invalid_argument("recall_at_k: empty run");
  double total = 0.0;
  for (std::size_t qi = 0; qi < run.query_ids.size(); ++qi) {
    const std::set<int>& rel = relevant_for(qrels, run.query_ids[qi]);
    int hits = 0;
    const auto& ranking = run.rankings[qi];
    for (std::size_t r = 0; r < ranking.size() && r < static_cast<std::size_t>(k); ++r)
      if (rel.count(ranking[r].doc_id)) ++hits;
    total += static_cast<double>(hits) / static_cast<double>(rel.size());
  }
  return total / static_cast<double>(run.query_ids.size());
}

double ndcg_at_k(const RetrievalRun& run, const Qrels& qrels, int k) {
  if (k < 1) throw std::invalid_argument("ndcg_at_k: k must be >= 1");
  if (run.query_ids.empty()) throw std::invalid_argument("ndcg_at_k: empty run");
  double total = 0.0;
  for (std::size_t qi = 0; qi < run.query_ids.size(); ++qi) {
    const std::set<int>& rel = relevant_for(qrels, run.query_ids[qi]);
    double dcg = 0.0;
    const auto& ranking = run.rankings[qi];
    for (std::size_t r = 0; r < ranking.size() && r < static_cast<std::size_t>(k); ++r)
      if (rel.count(ranking[r].doc_id))
        dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);  // rank r+1
    double idcg = 0.0;
    const std::size_t ideal = std::min(rel.size(), static_cast<std::size_t>(k));
    for (std::size_t r = 0; r < ideal; ++r) idcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
    total += dcg / idcg;
  }
  return total / static_cast<double>(run.query_ids.size());
}

namespace {

// Multiset of n-grams as (start-index ordered) count map.
std::map<std::vector<int>, int> ngram_counts(const std::vector<int>& tokens, int n) {
  std::map<std::vector<int>, int> counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i)
    ++counts[std::vector<int>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                              tokens.begin() + static_cast<std::ptrdiff_t>(i) + n)];
  return counts;
}

}  // namespace

double bleu4(const std::vector<int>& candidate, const std::vector<int>& reference) {
  if (reference.empty()) throw std::invalid_argument("bleu4: empty reference");
  if (candidate.empty()) return 0.0;
  double log_sum = 0.0;
  for (int n = 1; n <= 4; ++n) {
    const auto cand = ngram_counts(candidate, n);
    const auto ref = ngram_counts(reference, n);
    std::int64_t matched = 0, total = 0;
    for (const auto& [gram, count] : cand) {
      total += count;
      auto it = ref.find(gram);
      if (it != ref.end()) matched += std::min(count, it->second);
    }
    if (total == 0 || matched == 0) return 0.0;  // no smoothing: hard zero
    log_sum += 0.25 * std::log(static_cast<double>(matched) / static_cast<double>(total));
  }
  const double c = static_cast<double>(candidate.size());
  const double r = static_cast<double>(reference.size());
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum);
}

double rouge_l(const std::vector<int>& candidate, const std::vector<int>& reference) {
  if (reference.empty()) throw std::invalid_argument("rouge_l: empty reference");
  if (candidate.empty()) return 0.0;
  const std::size_t nc = candidate.size(), nr = reference.size();
  std::vector<int> prev(nr + 1, 0), cur(nr + 1, 0);
  for (std::size_t i = 1; i <= nc; ++i) {
    for (std::size_t j = 1; j <= nr; ++j) {
      if (candidate[i - 1] == reference[j - 1])
        cur[j] = prev[j - 1] + 1;
      else
        cur[j] = std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  const double lcs = static_cast<double>(prev[nr]);
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(nc);
  const double r = lcs / static_cast<double>(nr);
  return 2.0 * p * r / (p + r);
}

std::vector<double> symmetric_eigenvalues(std::vector<double> a, int n) {
  if (n < 1 || static_cast<int>(a.size()) != n * n)
    throw std::invalid_argument("symmetric_eigenvalues: bad dimensions");
  auto at = [&](int i, int j) -> double& { return a[static_cast<std::size_t>(i) * n + j]; };
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) off += at(i, j) * at(i, j);
    double trace = 0.0;
    for (int i = 0; i < n; ++i) trace += std::abs(at(i, i));
    if (off <= 1e-24 * std::max(1.0, trace * trace)) break;
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = at(p, q);
        if (apq == 0.0) continue;
        const double app = at(p, p), aqq = at(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double cth = 1.0 / std::sqrt(t * t + 1.0);
        const double sth = t * cth;
        for (int i = 0; i < n; ++i) {
          const double aip = at(i, p), aiq = at(i, q);
          at(i, p) = cth * aip - sth * aiq;
          at(i, q) = sth * aip + cth * aiq;
        }
        for (int i = 0; i < n; ++i) {
          const double api = at(p, i), aqi = at(q, i);
          at(p, i) = cth * api - sth * aqi;
          at(q, i) = sth * api + cth * aqi;
        }
      }
    }
  }
  std::vector<double> eig(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) eig[static_cast<std::size_t>(i)] = at(i, i);
  std::sort(eig.begin(), eig.end(), std::greater<double>());
  return eig;
}

CollapseDiagnostics collapse_diagnostics(const EmbeddingMatrix& embeddings) {
  const int n = embeddings.rows();
  const int d = embeddings.d;
  if (n < 2) throw std::invalid_argument("collapse_diagnostics: need >= 2 rows");

  std::vector<double> norms(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double ss = 0.0;
    const float* ri = embeddings.row(i);
    for (int j = 0; j < d; ++j) ss += static_cast<double>(ri[j]) * ri[j];
    if (ss <= 0.0)
      throw std::invalid_argument("collapse_diagnostics: zero-norm row " + std::to_string(i));
    norms[static_cast<std::size_t>(i)] = std::sqrt(ss);
  }
  double cos_sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const float* ri = embeddings.row(i);
    for (int j = i + 1; j < n; ++j) {
      const float* rj = embeddings.row(j);
      double dot = 0.0;
      for (int c = 0; c < d; ++c) dot += static_cast<double>(ri[c]) * rj[c];
      cos_sum += dot / (norms[static_cast<std::size_t>(i)] * norms[static_cast<std::size_t>(j)]);
    }
  }
  CollapseDiagnostics out;
  out.mean_pairwise_cosine = cos_sum / (0.5 * static_cast<double>(n) * (n - 1));

  // Gram matrix on the smaller side; its eigenvalues are the squared
  // singular values of the embedding matrix.
  const int m = std::min(n, d);
  std::vector<double> gram(static_cast<std::size_t>(m) * m, 0.0);
  if (n <= d) {
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        double dot = 0.0;
        const float* ri = embeddings.row(i);
        const float* rj = embeddings.row(j);
        for (int c = 0; c < d; ++c) dot += static_cast<double>(ri[c]) * rj[c];
        gram[static_cast<std::size_t>(i) * m + j] = dot;
      }
  } else {
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) {
        double dot = 0.0;
        for (int r = 0; r < n; ++r)
          dot += static_cast<double>(embeddings.row(r)[i]) * embeddings.row(r)[j];
        gram[static_cast<std::size_t>(i) * m + j] = dot;
      }
  }
  std::vector<double> eig = symmetric_eigenvalues(std::move(gram), m);
  double s2 = 0.0, s4 = 0.0;
  for (double lambda : eig) {
    const double l = std::max(lambda, 0.0);  // clamp numerical negatives
    s2 += l;
    s4 += l * l;
  }
  if (s4 <= 0.0) throw std::invalid_argument("collapse_diagnostics: zero embedding matrix");
  out.effective_rank = s2 * s2 / s4;
  return out;
}

nlohmann::json metric_report_json(const MetricReport& report, bool include_wall_time) {
  nlohmann::json j;
  j["name"] = report.name;
  j["seed"] = report.seed;
  j["config_hash"] = report.config_hash;
  j["revision"] = report.revision;
  nlohmann::json m;
  for (const auto& [key, value] : report.metrics) m[key] = value;
  j["metrics"] = m;
  if (include_wall_time) j["wall_time_seconds"] = report.wall_time_seconds;
  return j;
}

std::string format_metric(double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", value);
  return buf;
}

std::string render_table(const std::vector<std::string>& header,
                         const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& row : rows) {
    if (row.size() != header.size())
      throw std::invalid_argument("render_table: row width mismatch");
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  auto emit = [&](const std::vector<std::string>& row) {
    std::string line;
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) line += "  ";
      line += row[c];
      if (c + 1 < row.size()) line.append(width[c] - row[c].size(), ' ');
    }
    return line + "\n";
  };
  std::string out = emit(header);
  std::string rule;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c) rule += "  ";
    rule.append(width[c], '-');
  }
  out += rule + "\n";
  for (const auto& row : rows) out += emit(row);
  return out;
}

}  // namespace lbr
