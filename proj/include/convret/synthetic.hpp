#pragma once

#include <string>
#include <vector>

#include "convret/common.hpp"
#include "convret/evalset.hpp"
#include "convret/metrics.hpp"
#include "convret/text.hpp"

namespace convret {

// Seeded coreference retrieval task. The corpus covers an entity x aspect
// grid; each conversation establishes an entity and then asks about aspects
// anaphorically, so the current query alone cannot name the gold passage.
struct SyntheticSpec {
  int n_entities = 100;
  int n_aspects = 20;
  int n_sessions = 200;
  int n_heldout = 40;
  int n_hard_negatives = 4;
  uint64_t seed = 1;

  void validate() const {
    if (n_entities < 4 || n_aspects < 4) throw ConfigError("SyntheticSpec: grid too small");
    if (n_entities > 400) throw ConfigError("SyntheticSpec: at most 400 entities");
    if (n_sessions < 2 || n_heldout < 1 || n_heldout >= n_sessions) {
      throw ConfigError("SyntheticSpec: need n_sessions > n_heldout >= 1");
    }
    if (n_sessions > n_entities * n_aspects) {
      throw ConfigError("SyntheticSpec: more sessions than entity/aspect pairs");
    }
    if (n_hard_negatives < 2) throw ConfigError("SyntheticSpec: need at least 2 hard negatives");
  }
};

struct SyntheticData {
  std::vector<Passage> corpus;
  std::vector<TrainingSample> train;
  EvalDataset eval;
  Qrels eval_qrels;
};

namespace synth_detail {

// Unique pronounceable entity names: one syllable per base-20 digit, with
// disjoint syllable tables per digit position so names cannot collide.
inline std::string entity_name(int i) {
  static const char* hi[] = {"bar", "den", "fil", "gor", "hul", "jin", "kel", "lom",
                             "mur", "nav", "pol", "qib", "ras", "sil", "tor", "vun",
                             "wex", "yal", "zem", "cro"};
  static const char* lo[] = {"ba", "de", "fi", "go", "hu", "ji", "ke", "lo", "mu", "na",
                             "po", "qi", "ra", "si", "to", "vu", "we", "ya", "ze", "cu"};
  if (i < 0 || i >= 400) throw ConfigError("entity_name: supports up to 400 entities");
  return std::string(hi[i / 20]) + lo[i % 20];
}

inline const std::vector<std::string>& aspect_words() {
  static const std::vector<std::string> words{
      "cost",   "height",  "weight", "color",  "origin",  "diet",    "speed",  "range",
      "span",   "habitat", "grain",  "mass",   "volume",  "purpose", "age",    "build",
      "flavor", "sound",   "girth",  "shape",  "temper",  "sheen",   "pull",   "worth"};
  return words;
}

inline const std::vector<std::string>& value_words() {
  static const std::vector<std::string> words{
      "vast",   "narrow", "ancient", "recent", "smooth", "coarse", "dense", "airy",
      "vivid",  "pale",   "swift",   "slow",   "common", "rare",   "plain", "ornate",
      "sturdy", "frail",  "mild",    "sharp",  "deep",   "flat",   "warm",  "cool"};
  return words;
}

inline std::string passage_text(const std::string& entity, const std::string& aspect,
                                uint64_t seed, int e, int a) {
  Rng rng(mix_seed(seed, static_cast<uint64_t>(e) * 1000003ull + static_cast<uint64_t>(a)));
  const auto& vals = value_words();
  const size_t i1 = bounded(rng, vals.size());
  size_t i2 = bounded(rng, vals.size());
  if (i2 == i1) i2 = (i2 + 1) % vals.size();
  return "the " + entity + " " + aspect + " is " + vals[i1] + " and " + vals[i2];
}

}  // namespace synth_detail

inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const auto& aspects = synth_detail::aspect_words();

  SyntheticData data;
  std::vector<std::vector<std::string>> pid_grid(static_cast<size_t>(spec.n_entities));
  std::vector<std::string> entities;
  for (int e = 0; e < spec.n_entities; ++e) {
    entities.push_back(synth_detail::entity_name(e));
    for (int a = 0; a < spec.n_aspects; ++a) {
      const std::string& aspect = aspects[static_cast<size_t>(a) % aspects.size()];
      Passage p;
      p.pid = "p_" + entities.back() + "_" + aspect;
      p.text = synth_detail::passage_text(entities.back(), aspect, spec.seed, e, a);
      pid_grid[static_cast<size_t>(e)].push_back(p.pid);
      data.corpus.push_back(std::move(p));
    }
  }
  auto passage_at = [&](int e, int a) -> const Passage& {
    return data.corpus[static_cast<size_t>(e) * spec.n_aspects + static_cast<size_t>(a)];
  };

  // distinct (entity, aspect) targets, one conversation each
  std::vector<std::pair<int, int>> pairs;
  for (int e = 0; e < spec.n_entities; ++e) {
    for (int a = 0; a < spec.n_aspects; ++a) pairs.emplace_back(e, a);
  }
  std::vector<std::pair<int, int>> targets =
      sample_without_replacement(pairs, static_cast<size_t>(spec.n_sessions), rng);

  static const std::vector<std::string> openers{"tell me about the ", "describe the ",
                                                "i want to learn about the "};
  static const std::vector<std::string> ask_templates{"what about that ", "and that ",
                                                      "how about that ", "what is that "};

  for (int si = 0; si < spec.n_sessions; ++si) {
    auto [e, a] = targets[static_cast<size_t>(si)];
    const std::string& entity = entities[static_cast<size_t>(e)];
    const std::string conv_id = "syn" + std::to_string(si);

    // intro aspect differs from every queried aspect in this conversation
    int intro_a = static_cast<int>(bounded(rng, static_cast<size_t>(spec.n_aspects)));
    int mid_a = -1;
    const bool with_mid = bounded(rng, 2) == 0;
    if (with_mid) {
      do {
        mid_a = static_cast<int>(bounded(rng, static_cast<size_t>(spec.n_aspects)));
      } while (mid_a == a);
    }
    while (intro_a == a || intro_a == mid_a) {
      intro_a = static_cast<int>(bounded(rng, static_cast<size_t>(spec.n_aspects)));
    }

    EvalConversation conv;
    conv.conversation_id = conv_id;
    conv.turns.push_back({Role::user, openers[bounded(rng, openers.size())] + entity, {}, {}});
    conv.turns.push_back({Role::assistant, passage_at(e, intro_a).text, {}, {}});
    int turn_counter = 0;
    auto add_query_turn = [&](int aspect_idx) {
      const std::string& aspect = aspects[static_cast<size_t>(aspect_idx) % aspects.size()];
      EvalTurn t;
      t.role = Role::user;
      t.text = ask_templates[bounded(rng, ask_templates.size())] + aspect;
      t.qid = conv_id + "_q" + std::to_string(turn_counter++);
      t.rewrite = "what is the " + aspect + " of the " + entity;
      conv.turns.push_back(std::move(t));
    };
    if (with_mid) {
      add_query_turn(mid_a);
      conv.turns.push_back({Role::assistant, passage_at(e, mid_a).text, {}, {}});
    }
    add_query_turn(a);

    // qrels: gold passage per judged turn
    std::vector<int> judged_aspects;
    if (with_mid) judged_aspects.push_back(mid_a);
    judged_aspects.push_back(a);
    size_t qn = 0;
    for (const EvalTurn& t : conv.turns) {
      if (!t.qid) continue;
      data.eval_qrels.judgments[*t.qid][pid_grid[static_cast<size_t>(e)]
                                                [static_cast<size_t>(judged_aspects[qn++])]] = 2;
    }

    const bool heldout = si >= spec.n_sessions - spec.n_heldout;
    if (heldout) {
      data.eval.push_back(std::move(conv));
      continue;
    }

    // training samples: one per judged user turn, history prefix as session
    for (size_t ti = 0; ti < conv.turns.size(); ++ti) {
      if (!conv.turns[ti].qid) continue;
      const int aspect_idx = judged_aspects[static_cast<size_t>(
          std::count_if(conv.turns.begin(), conv.turns.begin() + static_cast<ptrdiff_t>(ti),
                        [](const EvalTurn& t) { return t.qid.has_value(); }))];
      TrainingSample sample;
      sample.session = session_prefix(conv, ti);
      sample.session.conversation_id = conv_id + "_s" + std::to_string(ti);
      sample.positive = passage_at(e, aspect_idx);

      // confusable negatives: same aspect under other entities, then other
      // aspects of the same entity
      for (int k = 0; k < spec.n_hard_negatives; ++k) {
        if (k % 2 == 0) {
          int oe;
          do {
            oe = static_cast<int>(bounded(rng, static_cast<size_t>(spec.n_entities)));
          } while (oe == e);
          sample.hard_negatives.push_back(passage_at(oe, aspect_idx));
        } else {
          int oa;
          do {
            oa = static_cast<int>(bounded(rng, static_cast<size_t>(spec.n_aspects)));
          } while (oa == aspect_idx);
          sample.hard_negatives.push_back(passage_at(e, oa));
        }
      }
      // dedup pids drawn twice
      std::unordered_set<std::string> seen{sample.positive.pid};
      std::vector<Passage> unique_negs;
      for (Passage& n : sample.hard_negatives) {
        if (seen.insert(n.pid).second) unique_negs.push_back(std::move(n));
      }
      sample.hard_negatives = std::move(unique_negs);
      data.train.push_back(std::move(sample));
    }
  }
  return data;
}

// Every text the synthetic task can produce, for vocabulary construction.
inline std::vector<std::string> synthetic_vocabulary_texts(const SyntheticData& data) {
  std::vector<std::string> texts;
  for (const Passage& p : data.corpus) texts.push_back(p.text);
  for (const TrainingSample& s : data.train) {
    for (const Turn& t : s.session.turns) texts.push_back(t.text);
  }
  for (const EvalConversation& c : data.eval) {
    for (const EvalTurn& t : c.turns) {
      texts.push_back(t.text);
      if (t.rewrite) texts.push_back(*t.rewrite);
    }
  }
  texts.push_back("what is the of and tell me about describe i want to learn how");
  return texts;
}

}  // namespace convret
