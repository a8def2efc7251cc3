#include "lbr/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace lbr {

Vocabulary::Vocabulary() {
  add("<pad>");
  add("<bos>");
  add("<eos>");
  add("<bnk>");
}

int Vocabulary::add(const std::string& token) {
  if (token.empty()) throw std::invalid_argument("vocabulary: empty token");
  auto it = token_to_id_.find(token);
  if (it != token_to_id_.end()) return it->second;
  int id = static_cast<int>(id_to_token_.size());
  id_to_token_.push_back(token);
  token_to_id_.emplace(token, id);
  return id;
}

bool Vocabulary::contains(const std::string& token) const {
  return token_to_id_.count(token) != 0;
}

int Vocabulary::id_of(const std::string& token) const {
  auto it = token_to_id_.find(token);
  if (it == token_to_id_.end())
    throw std::out_of_range("vocabulary: unknown token '" + token + "'");
  return it->second;
}

const std::string& Vocabulary::token_of(int id) const {
  if (id < 0 || id >= size())
    throw std::out_of_range("vocabulary: id " + std::to_string(id) + " out of range");
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::vector<int> out;
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) out.push_back(id_of(tok));
  return out;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token_of(ids[i]);
  }
  return out;
}

std::string gen_style_to_string(GenStyle s) {
  switch (s) {
    case GenStyle::kSft: return "sft";
    case GenStyle::kPtRecon: return "pt-recon";
    case GenStyle::kPtPrefix: return "pt-prefix";
  }
  throw std::invalid_argument("gen_style_to_string: bad enum");
}

GenStyle gen_style_from_string(const std::string& s) {
  if (s == "sft") return GenStyle::kSft;
  if (s == "pt-recon") return GenStyle::kPtRecon;
  if (s == "pt-prefix") return GenStyle::kPtPrefix;
  throw std::invalid_argument("unknown generative style '" + s + "'");
}

namespace {

// Word-like synthetic names: 2-4 consonant+vowel syllables.
std::string draw_word(std::mt19937_64& rng, int min_syllables, int max_syllables) {
  static const char* kCons = "bcdfghjklmnprstvz";
  static const char* kVow = "aeiou";
  std::uniform_int_distribution<int> syl(min_syllables, max_syllables);
  std::uniform_int_distribution<int> c(0, 16);
  std::uniform_int_distribution<int> v(0, 4);
  int n = syl(rng);
  std::string w;
  for (int i = 0; i < n; ++i) {
    w += kCons[static_cast<std::size_t>(c(rng))];
    w += kVow[static_cast<std::size_t>(v(rng))];
  }
  return w;
}

std::string draw_unique_word(std::mt19937_64& rng, std::set<std::string>& used,
                             int min_syl, int max_syl) {
  for (int attempt = 0; attempt < 10000; ++attempt) {
    std::string w = draw_word(rng, min_syl, max_syl);
    if (used.insert(w).second) return w;
  }
  throw std::runtime_error("generate_world: exhausted name space; reduce counts");
}

const std::vector<std::string>& template_words() {
  static const std::vector<std::string> kWords = {"query:", "which", "?", "(",
                                                  ")", "the", "and", "."};
  return kWords;
}

}  // namespace

World generate_world(std::uint64_t seed, const WorldParams& p) {
  if (p.n_entities < 1 || p.n_aliases_per_entity < 1 || p.n_facts_per_entity < 1 ||
      p.n_relations < 1 || p.n_values < 1)
    throw std::invalid_argument("generate_world: all counts must be >= 1");
  if (p.n_facts_per_entity > p.n_relations)
    throw std::invalid_argument(
        "generate_world: n_facts_per_entity exceeds n_relations (facts use distinct relations)");

  World world;
  world.seed = seed;
  world.params = p;

  std::mt19937_64 rng(seed);
  std::set<std::string> used(template_words().begin(), template_words().end());

  world.category = draw_unique_word(rng, used, 2, 2);
  std::vector<std::string> relations, values;
  for (int i = 0; i < p.n_relations; ++i)
    relations.push_back(draw_unique_word(rng, used, 3, 3));
  for (int i = 0; i < p.n_values; ++i)
    values.push_back(draw_unique_word(rng, used, 2, 3));

  std::uniform_int_distribution<int> value_pick(0, p.n_values - 1);
  world.entities.reserve(static_cast<std::size_t>(p.n_entities));
  for (int e = 0; e < p.n_entities; ++e) {
    EntityRecord rec;
    rec.canonical = draw_unique_word(rng, used, 2, 4);
    for (int a = 0; a < p.n_aliases_per_entity; ++a)
      rec.aliases.push_back(draw_unique_word(rng, used, 2, 4));
    // Distinct relations per entity, values drawn with replacement so that
    // (relation, value) combinations are widely shared across entities.
    std::vector<int> rel_idx(static_cast<std::size_t>(p.n_relations));
    for (int i = 0; i < p.n_relations; ++i) rel_idx[static_cast<std::size_t>(i)] = i;
    std::shuffle(rel_idx.begin(), rel_idx.end(), rng);
    for (int f = 0; f < p.n_facts_per_entity; ++f)
      rec.facts.emplace_back(relations[static_cast<std::size_t>(rel_idx[static_cast<std::size_t>(f)])],
                             values[static_cast<std::size_t>(value_pick(rng))]);
    world.entities.push_back(std::move(rec));
  }

  for (const auto& w : template_words()) world.vocab.add(w);
  world.vocab.add(world.category);
  for (const auto& r : relations) world.vocab.add(r);
  for (const auto& v : values) world.vocab.add(v);
  for (const auto& e : world.entities) {
    world.vocab.add(e.canonical);
    for (const auto& a : e.aliases) world.vocab.add(a);
  }
  if (world.vocab.size() > p.vocab_budget)
    throw std::runtime_error("generate_world: vocabulary overflow: " +
                             std::to_string(world.vocab.size()) + " tokens exceeds budget " +
                             std::to_string(p.vocab_budget));
  return world;
}

std::string question_text(const World& world, const std::string& surface,
                          const std::pair<std::string, std::string>& fact) {
  return "query: which " + world.category + " " + fact.first + " " + fact.second +
         " ? ( " + surface + " )";
}

std::string answer_text(const World& world, const EntityRecord& e,
                        const std::pair<std::string, std::string>& fact) {
  return "the " + world.category + " " + e.canonical + " " + fact.first + " " +
         fact.second + " .";
}

std::string passage_text(const World& world, const EntityRecord& e) {
  std::string s = "the " + world.category + " " + e.canonical;
  for (std::size_t f = 0; f < e.facts.size(); ++f) {
    if (f) s += " and";
    s += " " + e.facts[f].first + " " + e.facts[f].second;
  }
  return s + " .";
}

std::vector<GenExample> make_sft_examples(const World& world) {
  if (world.entities.empty()) throw std::invalid_argument("make_sft_examples: empty world");
  std::vector<GenExample> out;
  for (const EntityRecord& e : world.entities) {
    for (std::size_t f = 0; f < e.facts.size(); ++f) {
      const std::string& alias = e.aliases[f % e.aliases.size()];
      GenExample ex;
      ex.style = GenStyle::kSft;
      ex.x_tokens = world.vocab.encode(question_text(world, alias, e.facts[f]));
      ex.y_tokens = world.vocab.encode(answer_text(world, e, e.facts[f]));
      out.push_back(std::move(ex));
    }
  }
  return out;
}

std::vector<GenExample> make_pt_examples(const World& world, GenStyle style,
                                         double split_fraction, int* skipped_count) {
  if (world.entities.empty()) throw std::invalid_argument("make_pt_examples: empty world");
  if (style == GenStyle::kSft)
    throw std::invalid_argument("make_pt_examples: style must be pt-recon or pt-prefix");
  if (style == GenStyle::kPtPrefix && !(split_fraction > 0.0 && split_fraction < 1.0))
    throw std::invalid_argument("make_pt_examples: pt-prefix requires 0 < k < 1");
  int skipped = 0;
  std::vector<GenExample> out;
  for (const EntityRecord& e : world.entities) {
    std::vector<int> passage = world.vocab.encode(passage_text(world, e));
    GenExample ex;
    ex.style = style;
    if (style == GenStyle::kPtRecon) {
      ex.x_tokens = passage;
      ex.y_tokens = passage;
    } else {
      auto split = static_cast<std::size_t>(
          std::floor(split_fraction * static_cast<double>(passage.size())));
      if (split < 1 || split >= passage.size()) {
        ++skipped;
        continue;
      }
      ex.x_tokens.assign(passage.begin(), passage.begin() + static_cast<std::ptrdiff_t>(split));
      ex.y_tokens.assign(passage.begin() + static_cast<std::ptrdiff_t>(split), passage.end());
    }
    out.push_back(std::move(ex));
  }
  if (skipped_count) *skipped_count = skipped;
  return out;
}

std::vector<PairExample> make_cl_pairs(const World& world) {
  std::vector<int> all(world.entities.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  return make_cl_pairs(world, all);
}

std::vector<PairExample> make_cl_pairs(const World& world,
                                       const std::vector<int>& entity_indices) {
  if (world.entities.empty()) throw std::invalid_argument("make_cl_pairs: empty world");
  std::vector<PairExample> out;
  for (int idx : entity_indices) {
    if (idx < 0 || idx >= static_cast<int>(world.entities.size()))
      throw std::out_of_range("make_cl_pairs: entity index out of range");
    const EntityRecord& e = world.entities[static_cast<std::size_t>(idx)];
    std::vector<int> positive = world.vocab.encode(passage_text(world, e));
    for (const auto& fact : e.facts) {
      PairExample p;
      p.query_tokens = world.vocab.encode(question_text(world, e.canonical, fact));
      p.positive_tokens = positive;
      out.push_back(std::move(p));
    }
  }
  return out;
}

EvalSet make_eval_set(const World& world, double holdout_fraction) {
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0))
    throw std::invalid_argument("make_eval_set: holdout_fraction must be in (0, 1)");
  const int n = static_cast<int>(world.entities.size());
  const int n_eval =
      static_cast<int>(std::llround(holdout_fraction * static_cast<double>(n)));
  if (n_eval < 1 || n_eval >= n)
    throw std::invalid_argument("make_eval_set: too few entities to hold out " +
                                std::to_string(n_eval) + " of " + std::to_string(n));

  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 rng(world.seed ^ 0x9e3779b97f4a7c15ULL);
  std::shuffle(order.begin(), order.end(), rng);

  EvalSet set;
  set.eval_entity_indices.assign(order.begin(), order.begin() + n_eval);
  set.train_entity_indices.assign(order.begin() + n_eval, order.end());
  std::sort(set.eval_entity_indices.begin(), set.eval_entity_indices.end());
  std::sort(set.train_entity_indices.begin(), set.train_entity_indices.end());

  for (int i = 0; i < n; ++i) {
    EvalPassage p;
    p.passage_id = i;
    p.entity_index = i;
    p.tokens = world.vocab.encode(passage_text(world, world.entities[static_cast<std::size_t>(i)]));
    set.passages.push_back(std::move(p));
  }
  int qid = 0;
  for (int idx : set.eval_entity_indices) {
    const EntityRecord& e = world.entities[static_cast<std::size_t>(idx)];
    for (std::size_t f = 0; f < e.facts.size(); ++f) {
      EvalQuery q;
      q.query_id = qid++;
      q.entity_index = idx;
      const std::string& alias = e.aliases[f % e.aliases.size()];
      q.tokens = world.vocab.encode(question_text(world, alias, e.facts[f]));
      set.qrels[q.query_id] = {idx};
      set.queries.push_back(std::move(q));
    }
  }
  return set;
}

bool leaks_eval_entities(const World& world, const EvalSet& eval_set,
                         const std::vector<PairExample>& pairs) {
  std::set<int> banned;
  for (int idx : eval_set.eval_entity_indices) {
    const EntityRecord& e = world.entities[static_cast<std::size_t>(idx)];
    banned.insert(world.vocab.id_of(e.canonical));
    for (const auto& a : e.aliases) banned.insert(world.vocab.id_of(a));
  }
  for (const PairExample& p : pairs) {
    for (int t : p.query_tokens)
      if (banned.count(t)) return true;
    for (int t : p.positive_tokens)
      if (banned.count(t)) return true;
  }
  return false;
}

void write_jsonl(const std::string& path, const std::vector<nlohmann::json>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_jsonl: cannot open '" + path + "' for writing");
  for (const auto& r : records) out << r.dump() << '\n';
  if (!out) throw std::runtime_error("write_jsonl: write failed for '" + path + "'");
}

std::vector<nlohmann::json> read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_jsonl: cannot open '" + path + "'");
  std::vector<nlohmann::json> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": malformed JSON line: " + e.what());
    }
  }
  return out;
}

nlohmann::json gen_example_to_json(const GenExample& ex, const Vocabulary& vocab) {
  return {{"x", vocab.decode(ex.x_tokens)},
          {"y", vocab.decode(ex.y_tokens)},
          {"style", gen_style_to_string(ex.style)}};
}

GenExample gen_example_from_json(const nlohmann::json& j, const Vocabulary& vocab) {
  GenExample ex;
  ex.x_tokens = vocab.encode(j.at("x").get<std::string>());
  ex.y_tokens = vocab.encode(j.at("y").get<std::string>());
  ex.style = gen_style_from_string(j.at("style").get<std::string>());
  return ex;
}

nlohmann::json pair_example_to_json(const PairExample& ex, const Vocabulary& vocab) {
  return {{"query", vocab.decode(ex.query_tokens)},
          {"positive", vocab.decode(ex.positive_tokens)}};
}

PairExample pair_example_from_json(const nlohmann::json& j, const Vocabulary& vocab) {
  PairExample ex;
  ex.query_tokens = vocab.encode(j.at("query").get<std::string>());
  ex.positive_tokens = vocab.encode(j.at("positive").get<std::string>());
  return ex;
}

nlohmann::json world_manifest_json(const World& world) {
  return {{"seed", world.seed},
          {"n_entities", world.params.n_entities},
          {"n_aliases_per_entity", world.params.n_aliases_per_entity},
          {"n_facts_per_entity", world.params.n_facts_per_entity},
          {"n_relations", world.params.n_relations},
          {"n_values", world.params.n_values},
          {"vocab_budget", world.params.vocab_budget},
          {"vocab_size", world.vocab.size()},
          {"category", world.category}};
}

}  // namespace lbr
