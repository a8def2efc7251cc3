// Command-line front end: dataset generation, the two training stages, the
// full pipeline, evaluation, experiment sweeps, embedding export, and a mask
// inspector. Exit codes: 0 success, 1 runtime error (one "error: ..." line on
// stderr), 2 usage.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lbr/checkpoint.hpp"
#include "lbr/config.hpp"
#include "lbr/corpus.hpp"
#include "lbr/eval.hpp"
#include "lbr/ib_mask.hpp"
#include "lbr/pipeline.hpp"
#include "lbr/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string resolve_output_dir(const std::string& flag, const lbr::RunConfig& cfg) {
  if (!flag.empty()) return flag;
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  if (const char* env = std::getenv("LBR_OUTPUT_DIR"); env && *env) return env;
  throw std::runtime_error(
      "output directory required (--out, [run] output_dir, or LBR_OUTPUT_DIR)");
}

std::string ensure_dir(const std::string& flag, const lbr::RunConfig& cfg) {
  std::string dir = resolve_output_dir(flag, cfg);
  fs::create_directories(dir);
  return dir;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t b = item.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    std::size_t e = item.find_last_not_of(" \t");
    out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

lbr::MetricsSink jsonl_sink(std::ofstream& out) {
  return [&out](const lbr::StepRecord& r) {
    out << json{{"step", r.step}, {"loss", r.loss}, {"lr", r.lr}}.dump() << '\n';
  };
}

// Every metrics stream starts with a header record carrying the config hash
// so the artifact is attributable on its own.
std::ofstream open_stream(const std::string& path, const std::string& stage,
                          const std::string& hash) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << json{{"type", "run_header"}, {"stage", stage}, {"config_hash", hash}}.dump() << '\n';
  return out;
}

void write_timings(const std::string& path, const lbr::StageTimings& t, const std::string& hash) {
  json j{{"config_hash", hash},
         {"gen_seconds", t.gen_seconds},
         {"stage1_seconds", t.stage1_seconds},
         {"stage2_seconds", t.stage2_seconds},
         {"eval_seconds", t.eval_seconds},
         {"total_seconds", t.total_seconds}};
  write_text(path, j.dump(2) + "\n");
}

void check_hash(const lbr::CheckpointInfo& info, const lbr::RunConfig& cfg, bool allow_mismatch) {
  const std::string want = lbr::config_hash(cfg);
  if (info.config_hash != want && !allow_mismatch)
    throw std::runtime_error("config hash mismatch: checkpoint " + info.config_hash +
                             " vs config " + want + " (pass --allow-hash-mismatch to override)");
}

std::vector<lbr::GenExample> gen_dataset_for(const lbr::RunConfig& cfg, const lbr::World& world) {
  if (cfg.stage1.style == lbr::GenStyle::kSft) return lbr::make_sft_examples(world);
  return lbr::make_pt_examples(world, cfg.stage1.style, 0.5);
}

std::string report_table(const std::vector<lbr::MetricReport>& reports) {
  std::vector<std::string> keys;
  for (const auto& r : reports)
    for (const auto& [k, v] : r.metrics)
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  std::vector<std::string> header{"run"};
  header.insert(header.end(), keys.begin(), keys.end());
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : reports) {
    std::vector<std::string> row{r.name};
    for (const auto& k : keys) {
      auto it = r.metrics.find(k);
      row.push_back(it == r.metrics.end() ? "-" : lbr::format_metric(it->second));
    }
    rows.push_back(std::move(row));
  }
  return lbr::render_table(header, rows);
}

void write_report(const std::string& dir, const lbr::MetricReport& report) {
  lbr::write_jsonl(dir + "/report.jsonl",
                   {lbr::metric_report_json(report, /*include_wall_time=*/false)});
}

int cmd_gen_data(const std::string& config_path, const std::string& out_flag) {
  lbr::RunConfig cfg = lbr::load_config(config_path);
  const std::string dir = ensure_dir(out_flag, cfg);
  const std::string hash = lbr::config_hash(cfg);

  lbr::World world = lbr::generate_world(cfg.seed, cfg.corpus);
  lbr::EvalSet eval_set = lbr::make_eval_set(world, cfg.holdout_fraction);
  std::vector<lbr::GenExample> gen = gen_dataset_for(cfg, world);
  std::vector<lbr::PairExample> pairs = lbr::make_cl_pairs(world, eval_set.train_entity_indices);
  if (lbr::leaks_eval_entities(world, eval_set, pairs))
    throw std::logic_error("gen-data: eval entities leaked into contrastive pairs");

  std::vector<json> gen_records, pair_records, query_records, passage_records, qrel_records;
  for (const auto& ex : gen) gen_records.push_back(lbr::gen_example_to_json(ex, world.vocab));
  for (const auto& p : pairs) pair_records.push_back(lbr::pair_example_to_json(p, world.vocab));
  for (const auto& q : eval_set.queries)
    query_records.push_back(json{{"query_id", q.query_id},
                                 {"entity_index", q.entity_index},
                                 {"text", world.vocab.decode(q.tokens)}});
  for (const auto& p : eval_set.passages)
    passage_records.push_back(json{{"passage_id", p.passage_id},
                                   {"entity_index", p.entity_index},
                                   {"text", world.vocab.decode(p.tokens)}});
  for (const auto& [qid, rel] : eval_set.qrels)
    qrel_records.push_back(json{{"query_id", qid}, {"passage_ids", rel}});

  lbr::write_jsonl(dir + "/gen.jsonl", gen_records);
  lbr::write_jsonl(dir + "/pairs.jsonl", pair_records);
  lbr::write_jsonl(dir + "/eval_queries.jsonl", query_records);
  lbr::write_jsonl(dir + "/eval_passages.jsonl", passage_records);
  lbr::write_jsonl(dir + "/qrels.jsonl", qrel_records);

  json manifest = lbr::world_manifest_json(world);
  manifest["config_hash"] = hash;
  manifest["gen_examples"] = gen_records.size();
  manifest["pairs"] = pair_records.size();
  manifest["eval_queries"] = query_records.size();
  manifest["eval_passages"] = passage_records.size();
  manifest["style"] = lbr::gen_style_to_string(cfg.stage1.style);
  write_text(dir + "/manifest.json", manifest.dump(2) + "\n");
  lbr::save_config(cfg, dir + "/config.cfg");
  std::cout << "wrote " << gen_records.size() << " generative examples, " << pair_records.size()
            << " pairs, " << query_records.size() << " eval queries to " << dir << "\n";
  return 0;
}

int cmd_train_stage1(const std::string& config_path, const std::string& out_flag) {
  lbr::RunConfig cfg = lbr::load_config(config_path);
  const std::string dir = ensure_dir(out_flag, cfg);
  const std::string hash = lbr::config_hash(cfg);

  lbr::World world = lbr::generate_world(cfg.seed, cfg.corpus);
  std::vector<lbr::GenExample> gen = gen_dataset_for(cfg, world);

  lbr::ModelConfig mc = cfg.model;
  mc.seed = lbr::derive_seed(cfg.seed, "model");
  lbr::TransformerModel model(mc);

  lbr::Stage1Config s1 = cfg.stage1;
  s1.seed = lbr::derive_seed(cfg.seed, "stage1");
  s1.mask_variant = cfg.variant == lbr::PipelineVariant::kNaiveGlCl
                        ? lbr::Stage1MaskVariant::kCausal
                        : lbr::Stage1MaskVariant::kBottleneck;

  std::ofstream stream = open_stream(dir + "/stage1_metrics.jsonl", "stage1", hash);
  lbr::CheckpointHook hook;
  if (s1.checkpoint_interval > 0)
    hook = [&](int step) {
      lbr::save_checkpoint(dir + "/stage1_step" + std::to_string(step) + ".ckpt", model, step,
                           hash);
    };
  lbr::StageResult res = lbr::run_stage1(model, gen, s1, jsonl_sink(stream), hook);
  lbr::save_checkpoint(dir + "/stage1.ckpt", model, s1.steps, hash);
  std::cout << "stage1 done: " << res.loss_history.size() << " steps, final loss "
            << (res.loss_history.empty() ? 0.0f : res.loss_history.back()) << ", checkpoint "
            << dir << "/stage1.ckpt\n";
  return 0;
}

int cmd_train_stage2(const std::string& config_path, const std::string& out_flag,
                     const std::string& checkpoint, bool allow_mismatch) {
  lbr::RunConfig cfg = lbr::load_config(config_path);
  const std::string dir = ensure_dir(out_flag, cfg);
  const std::string hash = lbr::config_hash(cfg);
  if (checkpoint.empty()) throw std::runtime_error("checkpoint required (--checkpoint)");

  lbr::ModelConfig mc = cfg.model;
  mc.seed = lbr::derive_seed(cfg.seed, "model");
  lbr::TransformerModel model(mc);
  lbr::CheckpointInfo info = lbr::load_checkpoint(checkpoint, model);
  check_hash(info, cfg, allow_mismatch);

  lbr::World world = lbr::generate_world(cfg.seed, cfg.corpus);
  lbr::EvalSet eval_set = lbr::make_eval_set(world, cfg.holdout_fraction);
  std::vector<lbr::PairExample> pairs = lbr::make_cl_pairs(world, eval_set.train_entity_indices);

  lbr::Stage2Config s2 = cfg.stage2;
  s2.seed = lbr::derive_seed(cfg.seed, "stage2");
  std::ofstream stream = open_stream(dir + "/stage2_metrics.jsonl", "stage2", hash);
  lbr::StageResult res = lbr::run_stage2(model, pairs, s2, jsonl_sink(stream));
  lbr::save_checkpoint(dir + "/final.ckpt", model, info.step + s2.steps, hash);
  std::cout << "stage2 done: " << res.loss_history.size() << " steps, final loss "
            << (res.loss_history.empty() ? 0.0f : res.loss_history.back()) << ", checkpoint "
            << dir << "/final.ckpt\n";
  return 0;
}

int cmd_pipeline(const std::string& config_path, const std::string& out_flag,
                 const std::string& variant_flag) {
  lbr::RunConfig cfg = lbr::load_config(config_path);
  if (!variant_flag.empty()) cfg.variant = lbr::pipeline_variant_from_string(variant_flag);
  const std::string dir = ensure_dir(out_flag, cfg);
  const std::string hash = lbr::config_hash(cfg);

  std::ofstream s1_stream = open_stream(dir + "/stage1_metrics.jsonl", "stage1", hash);
  std::ofstream s2_stream = open_stream(dir + "/stage2_metrics.jsonl", "stage2", hash);
  lbr::PipelineOptions opts;
  opts.stage1_sink = jsonl_sink(s1_stream);
  opts.stage2_sink = jsonl_sink(s2_stream);
  opts.save_checkpoint_dir = dir;
  lbr::PipelineResult res = lbr::run_pipeline(cfg, opts);

  write_report(dir, res.report);
  write_timings(dir + "/timings.json", res.timings, hash);
  lbr::save_config(cfg, dir + "/config.cfg");
  std::cout << report_table({res.report});
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& out_flag,
             const std::string& checkpoint, bool allow_mismatch) {
  lbr::RunConfig cfg = lbr::load_config(config_path);
  const std::string dir = ensure_dir(out_flag, cfg);
  if (checkpoint.empty()) throw std::runtime_error("checkpoint required (--checkpoint)");

  lbr::ModelConfig mc = cfg.model;
  mc.seed = lbr::derive_seed(cfg.seed, "model");
  lbr::TransformerModel model(mc);
  lbr::CheckpointInfo info = lbr::load_checkpoint(checkpoint, model);
  check_hash(info, cfg, allow_mismatch);

  lbr::World world = lbr::generate_world(cfg.seed, cfg.corpus);
  lbr::EvalSet eval_set = lbr::make_eval_set(world, cfg.holdout_fraction);

  std::vector<std::pair<int, std::vector<int>>> corpus_inputs, query_inputs;
  for (const auto& p : eval_set.passages) corpus_inputs.emplace_back(p.passage_id, p.tokens);
  for (const auto& q : eval_set.queries) query_inputs.emplace_back(q.query_id, q.tokens);
  lbr::EmbeddingMatrix corpus_embed =
      lbr::encode_all(model, corpus_inputs, cfg.stage2.policy, cfg.stage2.attention_mode);
  lbr::EmbeddingMatrix query_embed =
      lbr::encode_all(model, query_inputs, cfg.stage2.policy, cfg.stage2.attention_mode);
  lbr::RetrievalRun run = lbr::retrieve(corpus_embed, query_embed, cfg.eval_k);

  lbr::MetricReport report;
  report.name = "eval:" + pipeline_variant_to_string(cfg.variant);
  report.seed = cfg.seed;
  report.config_hash = lbr::config_hash(cfg);
  report.revision = lbr::build_revision();
  report.metrics[lbr::recall_key(cfg.eval_k)] = lbr::recall_at_k(run, eval_set.qrels, cfg.eval_k);
  report.metrics[lbr::ndcg_key(cfg.eval_k)] = lbr::ndcg_at_k(run, eval_set.qrels, cfg.eval_k);
  lbr::CollapseDiagnostics diag = lbr::collapse_diagnostics(corpus_embed);
  report.metrics["mean_pairwise_cosine"] = diag.mean_pairwise_cosine;
  report.metrics["effective_rank"] = diag.effective_rank;
  lbr::GenerationScores gen = lbr::evaluate_generation(
      model, world, eval_set.train_entity_indices, cfg.stage1.style, cfg.stage1.policy,
      cfg.eval_max_new_tokens, cfg.eval_generation_examples);
  report.metrics["bleu4_final"] = gen.bleu4;
  report.metrics["rouge_l_final"] = gen.rouge_l;

  write_report(dir, report);
  std::cout << report_table({report});
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& out_flag,
              const std::string& kind_str, const std::string& grid_str) {
  lbr::RunConfig cfg = lbr::load_config(config_path);
  const std::string dir = ensure_dir(out_flag, cfg);
  lbr::SweepKind kind = lbr::sweep_kind_from_string(kind_str);
  std::vector<std::string> grid = split_csv(grid_str);
  if (grid.empty()) throw std::runtime_error("sweep: empty --grid");
  lbr::SweepResult res = lbr::run_sweep(kind, grid, cfg, dir + "/sweep_report.jsonl");
  write_text(dir + "/sweep_table.txt", res.table);
  std::cout << res.table;
  return 0;
}

int cmd_export_embed(const std::string& config_path, const std::string& out_flag,
                     const std::string& checkpoint, bool allow_mismatch) {
  lbr::RunConfig cfg = lbr::load_config(config_path);
  const std::string dir = ensure_dir(out_flag, cfg);
  if (checkpoint.empty()) throw std::runtime_error("checkpoint required (--checkpoint)");

  lbr::ModelConfig mc = cfg.model;
  mc.seed = lbr::derive_seed(cfg.seed, "model");
  lbr::TransformerModel model(mc);
  lbr::CheckpointInfo info = lbr::load_checkpoint(checkpoint, model);
  check_hash(info, cfg, allow_mismatch);

  lbr::World world = lbr::generate_world(cfg.seed, cfg.corpus);
  lbr::EvalSet eval_set = lbr::make_eval_set(world, cfg.holdout_fraction);

  std::vector<json> records;
  records.push_back(json{{"type", "run_header"}, {"config_hash", lbr::config_hash(cfg)}});
  auto emit = [&](const char* kind, int id, const std::vector<int>& tokens) {
    std::vector<float> v = lbr::encode(model, tokens, cfg.stage2.policy, cfg.stage2.attention_mode);
    records.push_back(json{{"kind", kind}, {"id", id}, {"vector", v}});
  };
  for (const auto& p : eval_set.passages) emit("passage", p.passage_id, p.tokens);
  for (const auto& q : eval_set.queries) emit("query", q.query_id, q.tokens);
  lbr::write_jsonl(dir + "/embeddings.jsonl", records);
  std::cout << "wrote " << records.size() - 1 << " embeddings to " << dir
            << "/embeddings.jsonl\n";
  return 0;
}

int cmd_inspect_mask(int x, int z, int y, bool diagnostic) {
  lbr::SegmentLayout layout{x, z, y};
  lbr::IbMask mask = lbr::build_ib_mask(layout, diagnostic);
  std::cout << lbr::render_mask(mask.allowed);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learn-before-represent pipeline: bottleneck-masked generative training, "
               "contrastive alignment, and retrieval/generation evaluation"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint, variant, kind, grid;
  bool allow_mismatch = false;
  int mask_x = 3, mask_z = 2, mask_y = 2;
  bool mask_diag = false;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run configuration file")->required();
    sub->add_option("--out", out_dir, "output directory (overrides config / LBR_OUTPUT_DIR)");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate datasets and eval sets");
  add_config(gen);
  CLI::App* t1 = app.add_subcommand("train-stage1", "bottleneck-masked generative training");
  add_config(t1);
  CLI::App* t2 = app.add_subcommand("train-stage2", "contrastive alignment training");
  add_config(t2);
  t2->add_option("--checkpoint", checkpoint, "stage-1 checkpoint to start from");
  t2->add_flag("--allow-hash-mismatch", allow_mismatch, "accept checkpoints from other configs");
  CLI::App* pipe = app.add_subcommand("pipeline", "gen-data -> stage1 -> stage2 -> eval");
  add_config(pipe);
  pipe->add_option("--variant", variant, "cl | gl_cl | ibgl_cl | ibgl (overrides config)");
  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_config(ev);
  ev->add_option("--checkpoint", checkpoint, "checkpoint to evaluate");
  ev->add_flag("--allow-hash-mismatch", allow_mismatch, "accept checkpoints from other configs");
  CLI::App* sw = app.add_subcommand("sweep", "run an experiment sweep");
  add_config(sw);
  sw->add_option("--kind", kind, "compression | allocation | attention")->required();
  sw->add_option("--grid", grid, "comma-separated grid values")->required();
  CLI::App* ex = app.add_subcommand("export-embed", "export eval-set embeddings as JSONL");
  add_config(ex);
  ex->add_option("--checkpoint", checkpoint, "checkpoint to export from");
  ex->add_flag("--allow-hash-mismatch", allow_mismatch, "accept checkpoints from other configs");
  CLI::App* im = app.add_subcommand("inspect-mask", "print the attention mask as an ASCII grid");
  im->add_option("--x", mask_x, "input segment length");
  im->add_option("--z", mask_z, "bottleneck segment length");
  im->add_option("--y", mask_y, "target segment length");
  im->add_flag("--diag", mask_diag, "also block bottleneck->input edges (diagnostic)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(config_path, out_dir);
    if (*t1) return cmd_train_stage1(config_path, out_dir);
    if (*t2) return cmd_train_stage2(config_path, out_dir, checkpoint, allow_mismatch);
    if (*pipe) return cmd_pipeline(config_path, out_dir, variant);
    if (*ev) return cmd_eval(config_path, out_dir, checkpoint, allow_mismatch);
    if (*sw) return cmd_sweep(config_path, out_dir, kind, grid);
    if (*ex) return cmd_export_embed(config_path, out_dir, checkpoint, allow_mismatch);
    if (*im) return cmd_inspect_mask(mask_x, mask_z, mask_y, mask_diag);
    std::cerr << "error: no subcommand\n" << app.help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
