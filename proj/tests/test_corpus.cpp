#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "lbr/corpus.hpp"

using lbr::GenStyle;
using lbr::Vocabulary;
using lbr::World;
using lbr::WorldParams;
using nlohmann::json;

namespace {

WorldParams small_params() {
  WorldParams p;
  p.n_entities = 12;
  p.n_aliases_per_entity = 2;
  p.n_facts_per_entity = 2;
  p.n_relations = 3;
  p.n_values = 3;
  p.vocab_budget = 256;
  return p;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("corpus_test_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("vocabulary: specials are fixed, add is idempotent, encode/decode round trip") {
  Vocabulary v;
  CHECK(v.size() == 4);
  CHECK(v.token_of(Vocabulary::kPad) == "<pad>");
  CHECK(v.token_of(Vocabulary::kBos) == "<bos>");
  CHECK(v.token_of(Vocabulary::kEos) == "<eos>");
  CHECK(v.token_of(Vocabulary::kBnk) == "<bnk>");
  const int id = v.add("hello");
  CHECK(v.add("hello") == id);
  v.add("world");
  CHECK(v.contains("hello"));
  CHECK_FALSE(v.contains("missing"));
  const std::string text = "hello world hello";
  CHECK(v.decode(v.encode(text)) == text);
  CHECK_THROWS_AS(v.encode("hello unknown"), std::out_of_range);
  CHECK_THROWS_AS(v.id_of("unknown"), std::out_of_range);
  CHECK_THROWS_AS(v.token_of(99), std::out_of_range);
}

TEST_CASE("world generation is deterministic in the seed") {
  World a = lbr::generate_world(11, small_params());
  World b = lbr::generate_world(11, small_params());
  World c = lbr::generate_world(12, small_params());
  REQUIRE(a.entities.size() == 12);
  CHECK(a.category == b.category);
  CHECK(a.entities[0].canonical == b.entities[0].canonical);
  CHECK(a.entities[3].facts == b.entities[3].facts);
  bool all_same = a.category == c.category;
  for (std::size_t i = 0; i < a.entities.size() && all_same; ++i)
    all_same = a.entities[i].canonical == c.entities[i].canonical;
  CHECK_FALSE(all_same);
}

TEST_CASE("world invariants: unique names, distinct relations per entity, vocab coverage") {
  World w = lbr::generate_world(5, small_params());
  std::set<std::string> names;
  for (const auto& e : w.entities) {
    names.insert(e.canonical);
    for (const auto& a : e.aliases) names.insert(a);
    CHECK(e.aliases.size() == 2);
    REQUIRE(e.facts.size() == 2);
    CHECK(e.facts[0].first != e.facts[1].first);  // relations distinct within an entity
  }
  CHECK(names.size() == 12 * 3);  // canonical + 2 aliases each, no collisions
  for (const auto& e : w.entities) {
    CHECK(w.vocab.contains(e.canonical));
    for (const auto& [r, val] : e.facts) {
      CHECK(w.vocab.contains(r));
      CHECK(w.vocab.contains(val));
    }
  }
  CHECK(w.vocab.size() <= small_params().vocab_budget);
}

TEST_CASE("world generation rejects impossible parameter sets") {
  WorldParams p = small_params();
  p.n_facts_per_entity = 4;  // only 3 relations available
  CHECK_THROWS_AS(lbr::generate_world(1, p), std::invalid_argument);
  p = small_params();
  p.vocab_budget = 20;  // cannot fit 12 entities * 3 names
  CHECK_THROWS_WITH_AS(lbr::generate_world(1, p), doctest::Contains("vocabulary overflow"),
                       std::runtime_error);
}

TEST_CASE("templates produce the documented shapes") {
  World w = lbr::generate_world(3, small_params());
  const auto& e = w.entities[0];
  const std::string q = lbr::question_text(w, e.aliases[0], e.facts[0]);
  const std::string a = lbr::answer_text(w, e, e.facts[0]);
  const std::string p = lbr::passage_text(w, e);
  CHECK(q == "query: which " + w.category + " " + e.facts[0].first + " " + e.facts[0].second +
                 " ? ( " + e.aliases[0] + " )");
  CHECK(a == "the " + w.category + " " + e.canonical + " " + e.facts[0].first + " " +
                 e.facts[0].second + " .");
  CHECK(p == "the " + w.category + " " + e.canonical + " " + e.facts[0].first + " " +
                 e.facts[0].second + " and " + e.facts[1].first + " " + e.facts[1].second + " .");
  CHECK(w.vocab.encode(q).size() == 9);
  CHECK(w.vocab.encode(a).size() == 6);
  CHECK(w.vocab.encode(p).size() == 3 * 2 + 3);
}

TEST_CASE("sft examples: one per entity-fact, alias rotates, answer is canonical") {
  World w = lbr::generate_world(7, small_params());
  auto ex = lbr::make_sft_examples(w);
  REQUIRE(ex.size() == 12 * 2);
  const auto& e0 = w.entities[0];
  CHECK(w.vocab.decode(ex[0].x_tokens) ==
        lbr::question_text(w, e0.aliases[0], e0.facts[0]));
  CHECK(w.vocab.decode(ex[1].x_tokens) ==
        lbr::question_text(w, e0.aliases[1], e0.facts[1]));  // alias rotated by fact index
  CHECK(w.vocab.decode(ex[0].y_tokens) == lbr::answer_text(w, e0, e0.facts[0]));
  for (const auto& g : ex) CHECK(g.style == GenStyle::kSft);
}

TEST_CASE("pt examples: reconstruction echoes the passage; prefix splits at floor(k*len)") {
  World w = lbr::generate_world(9, small_params());
  auto recon = lbr::make_pt_examples(w, GenStyle::kPtRecon, 0.5);
  REQUIRE(recon.size() == 12);
  for (std::size_t i = 0; i < recon.size(); ++i) {
    CHECK(recon[i].x_tokens == recon[i].y_tokens);
    CHECK(w.vocab.decode(recon[i].x_tokens) == lbr::passage_text(w, w.entities[i]));
  }
  int skipped = -1;
  auto prefix = lbr::make_pt_examples(w, GenStyle::kPtPrefix, 0.5, &skipped);
  CHECK(skipped == 0);
  REQUIRE(prefix.size() == 12);
  const auto full = w.vocab.encode(lbr::passage_text(w, w.entities[0]));
  const std::size_t cut = full.size() / 2;  // floor(0.5 * 9) = 4
  CHECK(prefix[0].x_tokens ==
        std::vector<int>(full.begin(), full.begin() + static_cast<long>(cut)));
  CHECK(prefix[0].y_tokens ==
        std::vector<int>(full.begin() + static_cast<long>(cut), full.end()));
}

TEST_CASE("pt prefix split skips degenerate splits and counts them") {
  World w = lbr::generate_world(9, small_params());
  CHECK_THROWS_AS(lbr::make_pt_examples(w, GenStyle::kPtPrefix, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(lbr::make_pt_examples(w, GenStyle::kPtPrefix, 1.0), std::invalid_argument);
  int skipped = -1;
  // floor(0.05 * 9) = 0: every prefix would be empty, so everything is skipped.
  auto none = lbr::make_pt_examples(w, GenStyle::kPtPrefix, 0.05, &skipped);
  CHECK(none.empty());
  CHECK(skipped == 12);
}

TEST_CASE("cl pairs are canonical-only and restrictable to a subset") {
  World w = lbr::generate_world(13, small_params());
  auto pairs = lbr::make_cl_pairs(w);
  REQUIRE(pairs.size() == 12 * 2);
  for (const auto& p : pairs) {
    const std::string q = w.vocab.decode(p.query_tokens);
    for (const auto& e : w.entities)
      for (const auto& a : e.aliases)
        CHECK(q.find(" " + a + " ") == std::string::npos);  // no alias surfaces anywhere
  }
  auto subset = lbr::make_cl_pairs(w, {0, 5});
  REQUIRE(subset.size() == 2 * 2);
  CHECK(w.vocab.decode(subset[0].positive_tokens) == lbr::passage_text(w, w.entities[0]));
  CHECK(w.vocab.decode(subset[2].positive_tokens) == lbr::passage_text(w, w.entities[5]));
}

TEST_CASE("eval set: holdout sizes, passages cover all entities, qrels point home") {
  World w = lbr::generate_world(21, small_params());
  lbr::EvalSet es = lbr::make_eval_set(w, 0.25);
  CHECK(es.eval_entity_indices.size() == 3);   // llround(0.25 * 12)
  CHECK(es.train_entity_indices.size() == 9);
  CHECK(es.passages.size() == 12);
  CHECK(es.queries.size() == 3 * 2);           // eval entities x facts, alias rotated per fact
  for (std::size_t i = 0; i < es.passages.size(); ++i) {
    CHECK(es.passages[i].passage_id == static_cast<int>(i));
    CHECK(es.passages[i].entity_index == static_cast<int>(i));
  }
  std::set<int> train(es.train_entity_indices.begin(), es.train_entity_indices.end());
  std::set<int> eval(es.eval_entity_indices.begin(), es.eval_entity_indices.end());
  CHECK(train.size() + eval.size() == 12);
  for (int i : eval) CHECK_FALSE(train.count(i));
  for (const auto& q : es.queries) {
    CHECK(eval.count(q.entity_index));
    REQUIRE(es.qrels.count(q.query_id));
    CHECK(es.qrels.at(q.query_id) == std::set<int>{q.entity_index});
    // Queries name the entity only by alias; the canonical form never appears.
    const std::string text = w.vocab.decode(q.tokens);
    const auto& e = w.entities[static_cast<std::size_t>(q.entity_index)];
    CHECK(text.find(e.canonical) == std::string::npos);
    bool has_alias = false;
    for (const auto& a : e.aliases)
      if (text.find("( " + a + " )") != std::string::npos) has_alias = true;
    CHECK(has_alias);
  }
}

TEST_CASE("eval set is deterministic and validates the holdout fraction") {
  World w = lbr::generate_world(21, small_params());
  lbr::EvalSet a = lbr::make_eval_set(w, 0.25);
  lbr::EvalSet b = lbr::make_eval_set(w, 0.25);
  CHECK(a.eval_entity_indices == b.eval_entity_indices);
  CHECK_THROWS_AS(lbr::make_eval_set(w, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(lbr::make_eval_set(w, 1.0), std::invalid_argument);
}

TEST_CASE("leakage guard flags pairs drawn from eval entities") {
  World w = lbr::generate_world(31, small_params());
  lbr::EvalSet es = lbr::make_eval_set(w, 0.25);
  auto clean = lbr::make_cl_pairs(w, es.train_entity_indices);
  CHECK_FALSE(lbr::leaks_eval_entities(w, es, clean));
  auto dirty = lbr::make_cl_pairs(w);  // includes everything
  CHECK(lbr::leaks_eval_entities(w, es, dirty));
}

TEST_CASE("jsonl round trip and malformed-line diagnostics") {
  TempDir dir;
  std::vector<json> records{{{"a", 1}}, {{"b", "x"}}};
  lbr::write_jsonl(dir.file("ok.jsonl"), records);
  auto back = lbr::read_jsonl(dir.file("ok.jsonl"));
  REQUIRE(back.size() == 2);
  CHECK(back[0]["a"] == 1);
  CHECK(back[1]["b"] == "x");

  std::ofstream bad(dir.file("bad.jsonl"));
  bad << "{\"ok\": 1}\n" << "{not json\n";
  bad.close();
  CHECK_THROWS_WITH_AS(lbr::read_jsonl(dir.file("bad.jsonl")), doctest::Contains("bad.jsonl:2"),
                       std::runtime_error);
  CHECK_THROWS_AS(lbr::read_jsonl(dir.file("missing.jsonl")), std::runtime_error);
}

TEST_CASE("example json round trips preserve tokens exactly") {
  World w = lbr::generate_world(17, small_params());
  auto gen = lbr::make_sft_examples(w);
  auto pairs = lbr::make_cl_pairs(w);
  json g = lbr::gen_example_to_json(gen[4], w.vocab);
  CHECK(lbr::gen_example_from_json(g, w.vocab) == gen[4]);
  json p = lbr::pair_example_to_json(pairs[7], w.vocab);
  CHECK(lbr::pair_example_from_json(p, w.vocab) == pairs[7]);
  CHECK(g.contains("x"));
  CHECK(g.contains("y"));
  CHECK(g.contains("style"));
}

TEST_CASE("world manifest reports sizes") {
  World w = lbr::generate_world(2, small_params());
  json m = lbr::world_manifest_json(w);
  CHECK(m["n_entities"] == 12);
  CHECK(m["vocab_size"] == w.vocab.size());
  CHECK(m["seed"] == 2);
}
