#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "lbr/checkpoint.hpp"
#include "lbr/config.hpp"
#include "lbr/model.hpp"
#include "lbr/optimizer.hpp"
#include "lbr/train.hpp"

using lbr::ModelConfig;
using lbr::PipelineVariant;
using lbr::RunConfig;
using lbr::TransformerModel;

namespace {

const char* kMinimalConfig = "[run]\nseed = 42\n";

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.vocab_size = 16;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.max_seq_len = 32;
  cfg.seed = 3;
  return cfg;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() / ("cfg_ckpt_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::vector<float> logits_fingerprint(const TransformerModel& m) {
  lbr::Tape<float> tape(false);
  auto out = m.forward(tape, {1, 5, 9, 2}, lbr::causal_mask(4), lbr::contiguous_positions(4));
  return out.logits.value();
}

}  // namespace

TEST_CASE("minimal config yields the documented defaults") {
  RunConfig cfg = lbr::parse_config_text(kMinimalConfig, "mem");
  CHECK(cfg.seed == 42);
  CHECK(cfg.variant == PipelineVariant::kIbGlCl);
  CHECK(cfg.model.vocab_size == 512);
  CHECK(cfg.model.d_model == 128);
  CHECK(cfg.model.n_layers == 4);
  CHECK(cfg.corpus.n_entities == 120);
  CHECK(cfg.corpus.vocab_budget == cfg.model.vocab_size);  // budget follows the model
  CHECK(cfg.holdout_fraction == 0.25);
  CHECK(cfg.stage1.policy.ratio == 32.0);
  CHECK(cfg.stage2.policy.ratio == cfg.stage1.policy.ratio);  // encoder reuses stage-1 sizing
  CHECK(cfg.stage2.temperature == 0.05);
  CHECK(cfg.eval_k == 10);
  CHECK(cfg.output_dir.empty());
}

TEST_CASE("config parser rejects malformed input with file:line diagnostics") {
  CHECK_THROWS_WITH_AS(lbr::parse_config_text("seed = 1\n", "f.cfg"),
                       doctest::Contains("f.cfg:1"), std::runtime_error);
  CHECK_THROWS_WITH_AS(lbr::parse_config_text("[run\nseed = 1\n", "f.cfg"),
                       doctest::Contains("f.cfg:1"), std::runtime_error);
  CHECK_THROWS_WITH_AS(lbr::parse_config_text("[run]\nseed\n", "f.cfg"),
                       doctest::Contains("f.cfg:2"), std::runtime_error);
  CHECK_THROWS_WITH_AS(lbr::parse_config_text("[run]\nseed = 1\nseed = 2\n", "f.cfg"),
                       doctest::Contains("duplicate"), std::runtime_error);
  CHECK_THROWS_WITH_AS(lbr::parse_config_text("[run]\nseed = 1\n[mystery]\nx = 1\n", "f.cfg"),
                       doctest::Contains("unknown section"), std::runtime_error);
  CHECK_THROWS_WITH_AS(lbr::parse_config_text("[run]\nseed = 1\nbogus = 2\n", "f.cfg"),
                       doctest::Contains("unknown key"), std::runtime_error);
  CHECK_THROWS_WITH_AS(lbr::parse_config_text("[model]\nd_model = 64\n", "f.cfg"),
                       doctest::Contains("seed required"), std::runtime_error);
  CHECK_THROWS_WITH_AS(lbr::parse_config_text("[run]\nseed = soon\n", "f.cfg"),
                       doctest::Contains("expected"), std::runtime_error);
  CHECK_THROWS_WITH_AS(
      lbr::parse_config_text("[model]\nd_model = 3.5\n[run]\nseed = 1\n", "f.cfg"),
      doctest::Contains("expected integer"), std::runtime_error);
}

TEST_CASE("config parser handles comments, blank lines, and whitespace") {
  RunConfig cfg = lbr::parse_config_text(
      "# leading comment\n\n[run]\n  seed =  7   \n; another comment\nvariant = cl\n", "mem");
  CHECK(cfg.seed == 7);
  CHECK(cfg.variant == PipelineVariant::kClOnly);
}

TEST_CASE("config round trip: parse(write(cfg)) == cfg") {
  RunConfig cfg = lbr::parse_config_text(kMinimalConfig, "mem");
  cfg.variant = PipelineVariant::kNaiveGlCl;
  cfg.model.d_model = 64;
  cfg.stage1.policy.ratio = 8.0;
  cfg.stage2.policy.ratio = 8.0;
  cfg.stage1.style = lbr::GenStyle::kPtPrefix;
  cfg.stage2.attention_mode = lbr::AttentionMode::kBidirectional;
  cfg.holdout_fraction = 0.3;
  cfg.allocation_budget = 99;
  cfg.output_dir = "/tmp/somewhere";
  RunConfig back = lbr::parse_config_text(lbr::write_config_text(cfg), "mem");
  CHECK(back == cfg);
}

TEST_CASE("save/load config through a file") {
  TempDir dir;
  RunConfig cfg = lbr::parse_config_text(kMinimalConfig, "mem");
  cfg.eval_k = 7;
  lbr::save_config(cfg, dir.file("a.cfg"));
  RunConfig back = lbr::load_config(dir.file("a.cfg"));
  CHECK(back == cfg);
  CHECK_THROWS_AS(lbr::load_config(dir.file("missing.cfg")), std::runtime_error);
}

TEST_CASE("pipeline variant string round trip") {
  for (PipelineVariant v : {PipelineVariant::kClOnly, PipelineVariant::kNaiveGlCl,
                            PipelineVariant::kIbGlCl, PipelineVariant::kIbGlOnly})
    CHECK(lbr::pipeline_variant_from_string(lbr::pipeline_variant_to_string(v)) == v);
  CHECK(lbr::pipeline_variant_to_string(PipelineVariant::kIbGlCl) == "ibgl_cl");
  CHECK_THROWS_AS(lbr::pipeline_variant_from_string("nope"), std::invalid_argument);
}

TEST_CASE("config hash: stable, sensitive to content, blind to output_dir") {
  RunConfig a = lbr::parse_config_text(kMinimalConfig, "mem");
  RunConfig b = a;
  CHECK(lbr::config_hash(a) == lbr::config_hash(b));
  CHECK(lbr::config_hash(a).size() == 16);
  b.output_dir = "/elsewhere";
  CHECK(lbr::config_hash(a) == lbr::config_hash(b));  // placement must not change identity
  b.stage1.steps += 1;
  CHECK(lbr::config_hash(a) != lbr::config_hash(b));
}

TEST_CASE("fnv1a64 known vectors") {
  CHECK(lbr::fnv1a64("") == 14695981039346656037ULL);
  CHECK(lbr::fnv1a64("a") == 12638187200555641996ULL);
  CHECK(lbr::fnv1a64("foobar") == 9625390261332436968ULL);
}

TEST_CASE("derive_seed: deterministic, tag- and seed-sensitive") {
  CHECK(lbr::derive_seed(1, "stage1") == lbr::derive_seed(1, "stage1"));
  CHECK(lbr::derive_seed(1, "stage1") != lbr::derive_seed(1, "stage2"));
  CHECK(lbr::derive_seed(1, "stage1") != lbr::derive_seed(2, "stage1"));
}

TEST_CASE("checkpoint round trip restores weights bitwise") {
  TempDir dir;
  TransformerModel m(tiny_config());
  const auto before = logits_fingerprint(m);
  lbr::save_checkpoint(dir.file("m.ckpt"), m, 123, "deadbeefdeadbeef");

  ModelConfig other = tiny_config();
  other.seed = 999;  // different init, same architecture
  TransformerModel loaded(other);
  lbr::CheckpointInfo info = lbr::load_checkpoint(dir.file("m.ckpt"), loaded);
  CHECK(info.step == 123);
  CHECK(info.config_hash == "deadbeefdeadbeef");
  CHECK(info.version == lbr::kCheckpointVersion);
  CHECK_FALSE(info.has_optimizer_state);
  CHECK(logits_fingerprint(loaded) == before);  // bitwise identical outputs
}

TEST_CASE("peek and load_checkpoint_model recover the embedded architecture") {
  TempDir dir;
  TransformerModel m(tiny_config());
  lbr::save_checkpoint(dir.file("m.ckpt"), m, 5);
  lbr::CheckpointInfo peeked = lbr::peek_checkpoint(dir.file("m.ckpt"));
  CHECK(peeked.model_config.d_model == 8);
  CHECK(peeked.model_config.vocab_size == 16);
  CHECK(peeked.config_hash == "unknown");
  lbr::CheckpointInfo info;
  TransformerModel rebuilt = lbr::load_checkpoint_model(dir.file("m.ckpt"), &info);
  CHECK(info.step == 5);
  CHECK(logits_fingerprint(rebuilt) == logits_fingerprint(m));
}

TEST_CASE("optimizer state round trips and resumes identically") {
  TempDir dir;
  // Train a few steps so Adam moments are non-trivial.
  std::vector<lbr::GenExample> data;
  lbr::GenExample ex;
  ex.x_tokens = {4, 5};
  ex.y_tokens = {6, 7};
  data.push_back(ex);
  lbr::Stage1Config cfg;
  cfg.policy = {2.0};
  cfg.batch_size = 1;
  cfg.steps = 5;
  cfg.seed = 1;

  TransformerModel m(tiny_config());
  lbr::AdamW<float> opt(cfg.adam);
  opt.register_params(m.parameters());
  {
    lbr::Tape<float> tape;
    auto loss = lbr::stage1_loss(tape, m, data[0], cfg.policy);
    tape.backward(loss);
    opt.step(cfg.adam.lr);
  }
  lbr::save_checkpoint(dir.file("opt.ckpt"), m, 1, "h", &opt);

  TransformerModel m2(tiny_config());
  lbr::AdamW<float> opt2(cfg.adam);
  lbr::CheckpointInfo info = lbr::load_checkpoint(dir.file("opt.ckpt"), m2, &opt2);
  CHECK(info.has_optimizer_state);
  CHECK(opt2.step_count() == opt.step_count());
  REQUIRE(opt2.mutable_first_moments().size() == opt.mutable_first_moments().size());
  CHECK(opt2.mutable_first_moments()[0] == opt.mutable_first_moments()[0]);

  // One more identical step on both copies must produce identical weights.
  auto advance = [&](TransformerModel& model, lbr::AdamW<float>& o) {
    for (auto& p : model.parameters()) p.zero_grad();
    lbr::Tape<float> tape;
    auto loss = lbr::stage1_loss(tape, model, data[0], cfg.policy);
    tape.backward(loss);
    o.step(cfg.adam.lr);
  };
  advance(m, opt);
  advance(m2, opt2);
  CHECK(logits_fingerprint(m) == logits_fingerprint(m2));
}

TEST_CASE("loading without optimizer state skips adam payloads cleanly") {
  TempDir dir;
  TransformerModel m(tiny_config());
  lbr::AdamW<float> opt;
  opt.register_params(m.parameters());
  lbr::save_checkpoint(dir.file("o.ckpt"), m, 2, "h", &opt);
  TransformerModel m2(tiny_config());
  lbr::CheckpointInfo info = lbr::load_checkpoint(dir.file("o.ckpt"), m2);  // no optimizer
  CHECK(info.has_optimizer_state);
  CHECK(logits_fingerprint(m2) == logits_fingerprint(m));
}

TEST_CASE("requesting optimizer state from a bare checkpoint is an error") {
  TempDir dir;
  TransformerModel m(tiny_config());
  lbr::save_checkpoint(dir.file("bare.ckpt"), m, 1);
  TransformerModel m2(tiny_config());
  lbr::AdamW<float> opt;
  CHECK_THROWS_WITH_AS(lbr::load_checkpoint(dir.file("bare.ckpt"), m2, &opt),
                       doctest::Contains("no optimizer state"), std::runtime_error);
}

TEST_CASE("checkpoint errors: bad magic, bad version, architecture mismatch, truncation") {
  TempDir dir;
  TransformerModel m(tiny_config());
  lbr::save_checkpoint(dir.file("good.ckpt"), m, 1);

  std::ofstream bad(dir.file("bad_magic.ckpt"), std::ios::binary);
  bad << "NOPE 1\n";
  bad.close();
  TransformerModel sink(tiny_config());
  CHECK_THROWS_WITH_AS(lbr::load_checkpoint(dir.file("bad_magic.ckpt"), sink),
                       doctest::Contains("magic"), std::runtime_error);

  // Bump the version string in an otherwise valid header.
  {
    std::ifstream in(dir.file("good.ckpt"), std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    all.replace(all.find("LBR1 1"), 6, "LBR1 9");
    std::ofstream out(dir.file("bad_version.ckpt"), std::ios::binary);
    out << all;
  }
  CHECK_THROWS_WITH_AS(lbr::load_checkpoint(dir.file("bad_version.ckpt"), sink),
                       doctest::Contains("version"), std::runtime_error);

  ModelConfig widened = tiny_config();
  widened.d_model = 16;
  widened.d_ff = 32;
  TransformerModel wrong(widened);
  CHECK_THROWS_WITH_AS(lbr::load_checkpoint(dir.file("good.ckpt"), wrong),
                       doctest::Contains("shape mismatch"), std::runtime_error);

  // Chop off the tail of the payload.
  {
    std::ifstream in(dir.file("good.ckpt"), std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    all.resize(all.size() - 64);
    std::ofstream out(dir.file("trunc.ckpt"), std::ios::binary);
    out << all;
  }
  CHECK_THROWS_WITH_AS(lbr::load_checkpoint(dir.file("trunc.ckpt"), sink),
                       doctest::Contains("unexpected end"), std::runtime_error);

  CHECK_THROWS_AS(lbr::load_checkpoint(dir.file("missing.ckpt"), sink), std::runtime_error);
}

TEST_CASE("checkpoint bytes are deterministic") {
  TempDir dir;
  TransformerModel m(tiny_config());
  lbr::save_checkpoint(dir.file("a.ckpt"), m, 9, "h");
  lbr::save_checkpoint(dir.file("b.ckpt"), m, 9, "h");
  std::ifstream fa(dir.file("a.ckpt"), std::ios::binary);
  std::ifstream fb(dir.file("b.ckpt"), std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  CHECK(sa == sb);
  CHECK(sa.substr(0, 4) == "LBR1");
}
