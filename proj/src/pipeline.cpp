#include "lbr/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <stdexcept>

namespace lbr {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::vector<GenExample> make_gen_dataset(const World& world, GenStyle style) {
  if (style == GenStyle::kSft) return make_sft_examples(world);
  return make_pt_examples(world, style, 0.5);
}

// Generation-retention probe: style-matched examples for the first G train
// entities (fact 0), decoded greedily and scored against the reference Y.
std::vector<GenExample> gen_eval_examples(const World& world,
                                          const std::vector<int>& train_entities, GenStyle style,
                                          int limit) {
  std::vector<GenExample> out;
  for (int idx : train_entities) {
    if (static_cast<int>(out.size()) >= limit) break;
    const EntityRecord& e = world.entities[static_cast<std::size_t>(idx)];
    GenExample ex;
    ex.style = style;
    if (style == GenStyle::kSft) {
      ex.x_tokens = world.vocab.encode(question_text(world, e.aliases[0], e.facts[0]));
      ex.y_tokens = world.vocab.encode(answer_text(world, e, e.facts[0]));
    } else {
      std::vector<int> passage = world.vocab.encode(passage_text(world, e));
      if (style == GenStyle::kPtRecon) {
        ex.x_tokens = passage;
        ex.y_tokens = passage;
      } else {
        std::size_t split = passage.size() / 2;
        if (split < 1 || split >= passage.size()) continue;
        ex.x_tokens.assign(passage.begin(), passage.begin() + static_cast<std::ptrdiff_t>(split));
        ex.y_tokens.assign(passage.begin() + static_cast<std::ptrdiff_t>(split), passage.end());
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

GenerationScores score_generation(const TransformerModel& model,
                                  const std::vector<GenExample>& probes,
                                  const CompressionPolicy& policy, int max_new_tokens,
                                  int stop_token) {
  if (probes.empty()) throw std::invalid_argument("score_generation: no probe examples");
  GenerationScores s;
  for (const GenExample& ex : probes) {
    std::vector<int> decoded =
        greedy_decode(model, ex.x_tokens, policy, max_new_tokens, stop_token);
    s.bleu4 += bleu4(decoded, ex.y_tokens);
    s.rouge_l += rouge_l(decoded, ex.y_tokens);
  }
  s.bleu4 /= static_cast<double>(probes.size());
  s.rouge_l /= static_cast<double>(probes.size());
  return s;
}

}  // namespace

GenerationScores evaluate_generation(const TransformerModel& model, const World& world,
                                     const std::vector<int>& entity_indices, GenStyle style,
                                     const CompressionPolicy& policy, int max_new_tokens,
                                     int limit) {
  return score_generation(model, gen_eval_examples(world, entity_indices, style, limit), policy,
                          max_new_tokens, world.vocab.id_of("."));
}

std::string recall_key(int k) { return "recall@" + std::to_string(k); }
std::string ndcg_key(int k) { return "ndcg@" + std::to_string(k); }

PipelineResult run_pipeline(const RunConfig& cfg, const PipelineOptions& opts) {
  cfg.validate();
  const auto t_total = Clock::now();
  StageTimings timings;

  // --- data ---------------------------------------------------------------
  auto t_gen = Clock::now();
  World world = generate_world(cfg.seed, cfg.corpus);
  EvalSet eval_set = make_eval_set(world, cfg.holdout_fraction);
  std::vector<GenExample> gen_data = make_gen_dataset(world, cfg.stage1.style);
  std::vector<PairExample> pairs = make_cl_pairs(world, eval_set.train_entity_indices);
  if (leaks_eval_entities(world, eval_set, pairs))
    throw std::logic_error("run_pipeline: eval entities leaked into contrastive pairs");
  if (opts.r_learn.has_value()) {
    if (cfg.allocation_budget < 1)
      throw std::invalid_argument("run_pipeline: r_learn requires allocation_budget >= 1");
    auto split = split_allocation(gen_data, pairs, *opts.r_learn, cfg.allocation_budget,
                                  derive_seed(cfg.seed, "allocation"));
    gen_data = std::move(split.first);
    pairs = std::move(split.second);
  }
  timings.gen_seconds = seconds_since(t_gen);

  // --- model --------------------------------------------------------------
  ModelConfig mc = cfg.model;
  mc.seed = derive_seed(cfg.seed, "model");
  TransformerModel model(mc);

  const bool want_stage1 =
      cfg.variant != PipelineVariant::kClOnly && !gen_data.empty() && cfg.stage1.steps > 0;
  const bool want_stage2 =
      cfg.variant != PipelineVariant::kIbGlOnly && !pairs.empty() && cfg.stage2.steps > 0;

  MetricReport report;
  report.name = pipeline_variant_to_string(cfg.variant);
  report.seed = cfg.seed;
  report.config_hash = config_hash(cfg);
  report.revision = build_revision();

  const int stop_token = world.vocab.id_of(".");
  std::vector<GenExample> probes = gen_eval_examples(
      world, eval_set.train_entity_indices, cfg.stage1.style, cfg.eval_generation_examples);

  PipelineResult result{std::move(report), timings, {}, {}, std::move(model), std::move(eval_set)};

  // --- stage 1 --------------------------------------------------------------
  if (want_stage1) {
    auto t1 = Clock::now();
    Stage1Config s1 = cfg.stage1;
    s1.seed = derive_seed(cfg.seed, "stage1");
    s1.mask_variant = cfg.variant == PipelineVariant::kNaiveGlCl ? Stage1MaskVariant::kCausal
                                                                 : Stage1MaskVariant::kBottleneck;
    CheckpointHook hook;
    if (!opts.save_checkpoint_dir.empty() && s1.checkpoint_interval > 0) {
      hook = [&](int step) {
        save_checkpoint(opts.save_checkpoint_dir + "/stage1_step" + std::to_string(step) + ".ckpt",
                        result.model, step, result.report.config_hash);
      };
    }
    StageResult r1 = run_stage1(result.model, gen_data, s1, opts.stage1_sink, hook);
    result.stage1_loss_history = std::move(r1.loss_history);
    result.timings.stage1_seconds = seconds_since(t1);
    if (!result.stage1_loss_history.empty())
      result.report.metrics["stage1_final_loss"] =
          static_cast<double>(result.stage1_loss_history.back());
    if (!opts.save_checkpoint_dir.empty())
      save_checkpoint(opts.save_checkpoint_dir + "/stage1.ckpt", result.model, s1.steps,
                      result.report.config_hash);
    if (opts.evaluate_stage1_generation) {
      auto te = Clock::now();
      GenerationScores s = score_generation(result.model, probes, cfg.stage1.policy,
                                     cfg.eval_max_new_tokens, stop_token);
      result.report.metrics["bleu4_stage1"] = s.bleu4;
      result.report.metrics["rouge_l_stage1"] = s.rouge_l;
      result.timings.eval_seconds += seconds_since(te);
    }
  }

  // --- stage 2 --------------------------------------------------------------
  if (want_stage2) {
    auto t2 = Clock::now();
    Stage2Config s2 = cfg.stage2;
    s2.seed = derive_seed(cfg.seed, "stage2");
    StageResult r2 = run_stage2(result.model, pairs, s2, opts.stage2_sink);
    result.stage2_loss_history = std::move(r2.loss_history);
    result.timings.stage2_seconds = seconds_since(t2);
    if (!result.stage2_loss_history.empty())
      result.report.metrics["stage2_final_loss"] =
          static_cast<double>(result.stage2_loss_history.back());
  }
  if (!opts.save_checkpoint_dir.empty())
    save_checkpoint(opts.save_checkpoint_dir + "/final.ckpt", result.model,
                    cfg.stage1.steps + cfg.stage2.steps, result.report.config_hash);

  // --- eval -----------------------------------------------------------------
  auto te = Clock::now();
  std::vector<std::pair<int, std::vector<int>>> corpus_inputs, query_inputs;
  for (const EvalPassage& p : result.eval_set.passages)
    corpus_inputs.emplace_back(p.passage_id, p.tokens);
  for (const EvalQuery& q : result.eval_set.queries) query_inputs.emplace_back(q.query_id, q.tokens);
  EmbeddingMatrix corpus_embed =
      encode_all(result.model, corpus_inputs, cfg.stage2.policy, cfg.stage2.attention_mode);
  EmbeddingMatrix query_embed =
      encode_all(result.model, query_inputs, cfg.stage2.policy, cfg.stage2.attention_mode);
  RetrievalRun run = retrieve(corpus_embed, query_embed, cfg.eval_k);
  result.report.metrics[recall_key(cfg.eval_k)] = recall_at_k(run, result.eval_set.qrels, cfg.eval_k);
  result.report.metrics[ndcg_key(cfg.eval_k)] = ndcg_at_k(run, result.eval_set.qrels, cfg.eval_k);
  CollapseDiagnostics diag = collapse_diagnostics(corpus_embed);
  result.report.metrics["mean_pairwise_cosine"] = diag.mean_pairwise_cosine;
  result.report.metrics["effective_rank"] = diag.effective_rank;
  GenerationScores final_scores = score_generation(result.model, probes, cfg.stage1.policy,
                                            cfg.eval_max_new_tokens, stop_token);
  result.report.metrics["bleu4_final"] = final_scores.bleu4;
  result.report.metrics["rouge_l_final"] = final_scores.rouge_l;
  result.timings.eval_seconds += seconds_since(te);

  result.timings.total_seconds = seconds_since(t_total);
  result.report.wall_time_seconds = result.timings.total_seconds;
  return result;
}

std::string sweep_kind_to_string(SweepKind k) {
  switch (k) {
    case SweepKind::kCompression: return "compression";
    case SweepKind::kAllocation: return "allocation";
    case SweepKind::kAttention: return "attention";
  }
  throw std::invalid_argument("sweep_kind_to_string: bad enum");
}

SweepKind sweep_kind_from_string(const std::string& s) {
  if (s == "compression") return SweepKind::kCompression;
  if (s == "allocation") return SweepKind::kAllocation;
  if (s == "attention") return SweepKind::kAttention;
  throw std::invalid_argument("unknown sweep kind '" + s +
                              "' (expected compression | allocation | attention)");
}

namespace {

double parse_grid_number(const std::string& value, const char* what) {
  try {
    std::size_t pos = 0;
    double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument(std::string("run_sweep: bad ") + what + " grid value '" + value +
                                "'");
  }
}

}  // namespace

SweepResult run_sweep(SweepKind kind, const std::vector<std::string>& grid, const RunConfig& base,
                      const std::string& partial_report_path) {
  if (grid.empty()) throw std::invalid_argument("run_sweep: empty grid");
  std::ofstream partial;
  if (!partial_report_path.empty()) {
    partial.open(partial_report_path, std::ios::binary);
    if (!partial)
      throw std::runtime_error("run_sweep: cannot open '" + partial_report_path +
                               "' for writing");
  }

  SweepResult out;
  for (const std::string& value : grid) {
    RunConfig cfg = base;
    PipelineOptions opts;
    switch (kind) {
      case SweepKind::kCompression: {
        const double ratio = parse_grid_number(value, "compression");
        cfg.stage1.policy.ratio = ratio;
        cfg.stage2.policy.ratio = ratio;
        break;
      }
      case SweepKind::kAllocation: {
        opts.r_learn = parse_grid_number(value, "allocation");
        break;
      }
      case SweepKind::kAttention: {
        cfg.stage2.attention_mode = attention_mode_from_string(value);
        break;
      }
    }
    PipelineResult res = run_pipeline(cfg, opts);
    res.report.name = sweep_kind_to_string(kind) + "=" + value;
    out.reports.push_back(res.report);
    if (partial.is_open()) {
      partial << metric_report_json(res.report, /*include_wall_time=*/false).dump() << '\n';
      partial.flush();
    }
  }

  // Comparison table keyed by the swept variable, columns = union of metrics.
  std::vector<std::string> keys;
  for (const MetricReport& r : out.reports)
    for (const auto& [k, v] : r.metrics)
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  std::vector<std::string> header{sweep_kind_to_string(kind)};
  header.insert(header.end(), keys.begin(), keys.end());
  std::vector<std::vector<std::string>> rows;
  for (const MetricReport& r : out.reports) {
    std::vector<std::string> row{r.name};
    for (const std::string& k : keys) {
      auto it = r.metrics.find(k);
      row.push_back(it == r.metrics.end() ? "-" : format_metric(it->second));
    }
    rows.push_back(std::move(row));
  }
  out.table = render_table(header, rows);
  return out;
}

}  // namespace lbr
