// Seeded synthetic vertical-domain corpora: entity worlds with canonical
// names, aliases and (relation, value) facts, emitted as question->answer
// generative examples, query->positive contrastive pairs, and a retrieval
// eval set (alias-form queries over held-out entities, canonical passages).
//
// All generators are pure functions of (seed, parameters).

#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace lbr {

// Word-level closed vocabulary. Ids 0..3 are reserved specials that the text
// generators never emit as content.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kBnk = 3;  // bottleneck token

  Vocabulary();

  int size() const { return static_cast<int>(id_to_token_.size()); }
  int add(const std::string& token);           // idempotent; returns id
  bool contains(const std::string& token) const;
  int id_of(const std::string& token) const;   // throws std::out_of_range
  const std::string& token_of(int id) const;   // throws std::out_of_range

  std::vector<int> encode(const std::string& text) const;  // whitespace split
  std::string decode(const std::vector<int>& ids) const;   // space-joined

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

struct EntityRecord {
  std::string canonical;
  std::vector<std::string> aliases;                         // >= 1
  std::vector<std::pair<std::string, std::string>> facts;   // (relation, value), >= 1
};

struct WorldParams {
  int n_entities = 120;
  int n_aliases_per_entity = 1;
  int n_facts_per_entity = 2;
  int n_relations = 3;   // shared relation pool (facts deliberately collide)
  int n_values = 3;      // shared value pool
  int vocab_budget = 512;  // must cover specials + templates + all names

  bool operator==(const WorldParams&) const = default;
};

struct World {
  std::uint64_t seed = 0;
  WorldParams params;
  std::vector<EntityRecord> entities;
  std::string category;  // world-level noun used in templates ("drug"-like)
  Vocabulary vocab;
};

World generate_world(std::uint64_t seed, const WorldParams& params);

enum class GenStyle { kSft, kPtRecon, kPtPrefix };
std::string gen_style_to_string(GenStyle s);
GenStyle gen_style_from_string(const std::string& s);

struct GenExample {
  std::vector<int> x_tokens;
  std::vector<int> y_tokens;
  GenStyle style = GenStyle::kSft;

  bool operator==(const GenExample&) const = default;
};

struct PairExample {
  std::vector<int> query_tokens;
  std::vector<int> positive_tokens;

  bool operator==(const PairExample&) const = default;
};

// Text templates (word-level, space-separated):
//   question(entity surface s, fact (r,v)):  "query: which <category> <r> <v> ? ( <s> )"
//   answer(entity e, fact (r,v)):            "the <category> <canonical> <r> <v> ."
//   passage(entity e):                       "the <category> <canonical> <r1> <v1> and <r2> <v2> ... ."
std::string question_text(const World& world, const std::string& surface,
                          const std::pair<std::string, std::string>& fact);
std::string answer_text(const World& world, const EntityRecord& e,
                        const std::pair<std::string, std::string>& fact);
std::string passage_text(const World& world, const EntityRecord& e);

// One example per (entity, fact); X uses the alias rotated by fact index,
// Y states the canonical answer. This is the alias->canonical link that only
// Stage 1 ever sees.
std::vector<GenExample> make_sft_examples(const World& world);

// Passage reconstruction (X = Y = passage) or prefix->suffix split at
// floor(k * len). Too-short passages are skipped and counted.
std::vector<GenExample> make_pt_examples(const World& world, GenStyle style,
                                         double split_fraction,
                                         int* skipped_count = nullptr);

// Canonical-name queries against canonical passages; alias surface forms are
// deliberately absent so alias knowledge can only enter in Stage 1.
// `entity_indices` restricts the pairs to a subset of the world (defaults to
// every entity when empty is passed via the overload).
std::vector<PairExample> make_cl_pairs(const World& world);
std::vector<PairExample> make_cl_pairs(const World& world,
                                       const std::vector<int>& entity_indices);

struct EvalQuery {
  int query_id = 0;
  int entity_index = 0;
  std::vector<int> tokens;
};

struct EvalPassage {
  int passage_id = 0;
  int entity_index = 0;
  std::vector<int> tokens;
};

struct EvalSet {
  std::vector<EvalQuery> queries;       // alias-form, held-out entities only
  std::vector<EvalPassage> passages;    // canonical passages for ALL entities
  std::map<int, std::set<int>> qrels;   // query_id -> relevant passage ids
  std::vector<int> train_entity_indices;
  std::vector<int> eval_entity_indices;
};

// Splits entities into train/eval by a seeded shuffle (eval count =
// round(holdout_fraction * n)); queries use alias surface forms and each one
// has exactly one relevant passage: its entity's canonical passage.
EvalSet make_eval_set(const World& world, double holdout_fraction);

// Guard used by tests and the pipeline: no eval-entity canonical or alias
// token may appear in Stage-2 pair text.
bool leaks_eval_entities(const World& world, const EvalSet& eval_set,
                         const std::vector<PairExample>& pairs);

// JSONL I/O. Malformed input reports the 1-based line number.
void write_jsonl(const std::string& path, const std::vector<nlohmann::json>& records);
std::vector<nlohmann::json> read_jsonl(const std::string& path);

nlohmann::json gen_example_to_json(const GenExample& ex, const Vocabulary& vocab);
GenExample gen_example_from_json(const nlohmann::json& j, const Vocabulary& vocab);
nlohmann::json pair_example_to_json(const PairExample& ex, const Vocabulary& vocab);
PairExample pair_example_from_json(const nlohmann::json& j, const Vocabulary& vocab);

nlohmann::json world_manifest_json(const World& world);

}  // namespace lbr
