#pragma once

#include <cstdlib>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "convret/evalset.hpp"
#include "convret/metrics.hpp"
#include "convret/prompts.hpp"
#include "convret/text.hpp"

namespace convret {

// ---- deterministic building blocks ----------------------------------------

inline const std::set<std::string>& stopwords() {
  static const std::set<std::string> words{
      "a",    "an",   "and",  "are",  "as",   "at",   "be",   "but",  "by",   "for",
      "from", "has",  "have", "i",    "in",   "is",   "it",   "its",  "me",   "of",
      "on",   "or",   "so",   "that", "the",  "their", "them", "they", "this", "to",
      "was",  "we",   "were", "what", "when", "where", "which", "who",  "will", "with",
      "you",  "your", "how",  "about"};
  return words;
}

inline std::set<std::string> content_words(const std::string& text) {
  std::set<std::string> out;
  for (const std::string& w : word_split(text)) {
    if (w.size() < 2 && !std::isalnum(static_cast<unsigned char>(w[0]))) continue;  // punctuation
    if (stopwords().count(w)) continue;
    out.insert(w);
  }
  return out;
}

// Jaccard overlap of content-word sets; two empty sets count as identical.
inline double content_overlap(const std::string& a, const std::string& b) {
  std::set<std::string> wa = content_words(a);
  std::set<std::string> wb = content_words(b);
  if (wa.empty() && wb.empty()) return 1.0;
  size_t inter = 0;
  for (const std::string& w : wa) inter += wb.count(w);
  const size_t uni = wa.size() + wb.size() - inter;
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Anaphoric markers, with inflected forms of the base lexicon
// {it, they, this, that, these, those, he, she, one}.
inline bool has_anaphora(const std::string& query) {
  static const std::set<std::string> markers{"it",   "its",  "they", "their", "them", "theirs",
                                             "this", "that", "these", "those", "he",  "his",
                                             "him",  "she",  "her",  "hers",  "one",  "ones"};
  for (const std::string& w : word_split(query)) {
    if (markers.count(w)) return true;
  }
  return false;
}

// Lead sentence of the top passage, capped at 64 words. Empty retrieval
// yields an empty response; callers surface the warning.
inline std::string synthesize_response(const std::vector<Passage>& top_passages) {
  if (top_passages.empty()) return "";
  const std::string& text = top_passages.front().text;
  const size_t cut = text.find_first_of(".!?");
  std::string lead = cut == std::string::npos ? text : text.substr(0, cut);
  std::vector<std::string> words = split_ws(lead);
  if (words.size() > 64) words.resize(64);
  std::string out;
  for (const std::string& w : words) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

struct JudgeVerdict {
  bool reasonable = true;
  std::optional<std::string> substituted_query;  // present iff !reasonable
};

// Heuristic stand-in for an LLM judge: a query becomes unreasonable when it
// is anaphoric and the synthesized response has drifted far from the
// original one (content overlap below 0.3).
inline JudgeVerdict judge_query_reasonable(const std::string& query,
                                           const std::vector<Turn>& new_context,
                                           const std::string& original_response,
                                           const std::string& rewrite) {
  if (query.empty()) throw ContractError("judge_query_reasonable: empty query");
  std::string synthesized;
  for (auto it = new_context.rbegin(); it != new_context.rend(); ++it) {
    if (it->role == Role::assistant) {
      synthesized = it->text;
      break;
    }
  }
  const bool unreasonable =
      has_anaphora(query) && content_overlap(original_response, synthesized) < 0.3;
  if (unreasonable) return {false, rewrite};
  return {true, std::nullopt};
}

// ---- context variants --------------------------------------------------------

struct ContextVariant {
  int variant_id = 0;
  std::vector<Turn> turns;  // modified history; the current query is never stored here
  std::string provenance;
  bool collapsed = false;  // fell back to the original context
};

// Exactly five context variants for one evaluated turn. Variant 0 is the
// original history; generators that need history collapse to it (flagged)
// on single-turn conversations.
inline std::vector<ContextVariant> full_context_variants(const std::vector<Turn>& history,
                                                         const Turn& current_query,
                                                         const std::string& rewrite) {
  if (current_query.role != Role::user) {
    throw ContractError("full_context_variants: evaluated turn must be a user turn");
  }
  if (rewrite.empty()) throw ContractError("full_context_variants: rewrite required");

  std::vector<ContextVariant> variants;
  variants.push_back({0, history, "original", false});

  {  // 1: drop the earliest turn
    ContextVariant v{1, history, "drop-earliest-turn", history.empty()};
    if (!history.empty()) v.turns.erase(v.turns.begin());
    variants.push_back(std::move(v));
  }
  {  // 2: responses truncated to their lead sentence
    ContextVariant v{2, history, "lead-sentence-responses", history.empty()};
    for (Turn& t : v.turns) {
      if (t.role == Role::assistant) t.text = synthesize_response({Passage{"", t.text}});
    }
    variants.push_back(std::move(v));
  }
  {  // 3: synthetic context rebuilt from the rewrite's extra content words
    std::set<std::string> extra = content_words(rewrite);
    for (const std::string& w : content_words(current_query.text)) extra.erase(w);
    ContextVariant v{3, {}, "rewrite-content-context", extra.empty()};
    if (extra.empty()) {
      v.turns = history;
    } else {
      std::string topic;
      for (const std::string& w : extra) {
        if (!topic.empty()) topic.push_back(' ');
        topic += w;
      }
      v.turns.push_back({Role::user, "tell me about " + topic});
      v.turns.push_back({Role::assistant, "here is some information about " + topic});
    }
    variants.push_back(std::move(v));
  }
  {  // 4: distractor injected before the final history turn
    ContextVariant v{4, history, "distractor-injection", history.empty()};
    if (!history.empty()) {
      v.turns.insert(v.turns.end() - 1,
                     {Role::user, "by the way what is the weather like today"});
    }
    variants.push_back(std::move(v));
  }
  return variants;
}

// ---- reports ----------------------------------------------------------------

struct RobustSummary {
  double mean = 0.0;
  double sd = 0.0;  // population
};

inline RobustSummary robust_report(const std::vector<double>& per_variant_values) {
  if (per_variant_values.size() < 2) {
    throw ContractError("robust_report: need at least two variants for a standard deviation");
  }
  RobustSummary s;
  for (double v : per_variant_values) s.mean += v;
  s.mean /= static_cast<double>(per_variant_values.size());
  for (double v : per_variant_values) s.sd += (v - s.mean) * (v - s.mean);
  s.sd = std::sqrt(s.sd / static_cast<double>(per_variant_values.size()));
  return s;
}

struct RobustCsvRow {
  std::string dataset;
  std::string protocol;
  std::string variant;
  std::string metric;
  double value = 0.0;
};

inline void save_robust_csv(const std::vector<RobustCsvRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open robustness report for writing: '" + path + "'");
  out << "dataset,protocol,variant,metric,value\n" << std::setprecision(10);
  for (const auto& r : rows) {
    out << r.dataset << ',' << r.protocol << ',' << r.variant << ',' << r.metric << ',' << r.value
        << '\n';
  }
}

// ---- protocol drivers ---------------------------------------------------------

struct ResponderInput {
  std::vector<Passage> top_passages;
  const EvalConversation* conversation = nullptr;
  size_t turn_index = 0;        // index of the assistant turn being replaced
  std::string original_response;
};

using ResponderFn = std::function<std::string(const ResponderInput&)>;
using JudgeFn = std::function<JudgeVerdict(const std::string& query,
                                           const std::vector<Turn>& new_context,
                                           const std::string& original_response,
                                           const std::string& rewrite)>;

inline ResponderFn default_responder() {
  return [](const ResponderInput& in) { return synthesize_response(in.top_passages); };
}

inline JudgeFn default_judge() {
  return [](const std::string& query, const std::vector<Turn>& ctx, const std::string& orig,
            const std::string& rewrite) {
    return judge_query_reasonable(query, ctx, orig, rewrite);
  };
}

struct PartialTurnRecord {
  std::string qid;
  double ndcg3 = 0.0;
  bool substituted = false;
};

struct PartialReport {
  std::vector<PartialTurnRecord> turns;
  RunFile run;           // modified-context retrieval results
  RunFile reference_run; // unmodified-context results for the same turns
  double mean_ndcg3 = 0.0;
  double reference_mean_ndcg3 = 0.0;
  double diff = 0.0;
  int empty_responses = 0;
  bool provider_fallback = false;
};

// Turn-by-turn protocol: retrieve, synthesize the next response from the
// top-3 passages, judge the following query against the drifted context, and
// substitute its human rewrite when it no longer stands on its own.
inline PartialReport partial_response_eval(const EvalDataset& dataset,
                                           const std::vector<Passage>& corpus,
                                           const RetrieveFn& retrieve, const Qrels& qrels,
                                           const JudgeFn& judge = default_judge(),
                                           const ResponderFn& responder = default_responder(),
                                           const std::string& tag = "convret-partial") {
  std::map<std::string, const Passage*> by_pid;
  for (const Passage& p : corpus) by_pid.emplace(p.pid, &p);

  PartialReport report;
  report.reference_run = run_normal_eval(dataset, retrieve, tag + "-ref");

  for (const EvalConversation& conv : dataset) {
    std::vector<Turn> modified;
    std::vector<Passage> last_top3;
    for (size_t i = 0; i < conv.turns.size(); ++i) {
      const EvalTurn& turn = conv.turns[i];
      if (turn.role == Role::user) {
        std::string query_text = turn.text;
        bool substituted = false;
        if (!modified.empty()) {
          // the preceding original response, for the judge's drift check
          std::string original_response;
          for (size_t j = i; j-- > 0;) {
            if (conv.turns[j].role == Role::assistant) {
              original_response = conv.turns[j].text;
              break;
            }
          }
          JudgeVerdict verdict =
              judge(turn.text, modified, original_response, turn.rewrite.value_or(""));
          if (!verdict.reasonable) {
            if (!turn.rewrite) {
              throw FormatError("partial_response_eval: turn '" + conv.conversation_id + "#" +
                                std::to_string(i) + "' needs substitution but has no rewrite");
            }
            query_text = *verdict.substituted_query;
            substituted = true;
          }
        }
        Session session;
        session.conversation_id = conv.conversation_id;
        session.turns = modified;
        session.turns.push_back({Role::user, query_text});
        SearchResult result = retrieve(session);
        last_top3.clear();
        for (const SearchHit& h : result.hits) {
          if (static_cast<int>(last_top3.size()) >= 3) break;
          auto it = by_pid.find(h.pid);
          last_top3.push_back(it == by_pid.end() ? Passage{h.pid, ""} : *it->second);
        }
        if (turn.qid) {
          for (const SearchHit& h : result.hits) {
            report.run.push_back({*turn.qid, h.pid, h.rank, h.score, tag});
          }
          if (qrels.has_relevant(*turn.qid)) {
            std::vector<std::string> ranked;
            for (const SearchHit& h : result.hits) ranked.push_back(h.pid);
            report.turns.push_back(
                {*turn.qid, ndcg_at_k(ranked, qrels.judgments.at(*turn.qid), 3), substituted});
          }
        }
        modified.push_back({Role::user, query_text});
      } else {
        std::string synthesized = responder({last_top3, &conv, i, turn.text});
        if (synthesized.empty()) ++report.empty_responses;
        modified.push_back({Role::assistant, synthesized});
      }
    }
  }

  double acc = 0.0;
  for (const auto& t : report.turns) acc += t.ndcg3;
  report.mean_ndcg3 = report.turns.empty() ? 0.0 : acc / static_cast<double>(report.turns.size());
  MetricReport ref = evaluate_run(report.reference_run, qrels, {3});
  report.reference_mean_ndcg3 = ref.means.at("ndcg@3");
  report.diff = std::abs(report.mean_ndcg3 - report.reference_mean_ndcg3);
  return report;
}

struct FullContextReport {
  std::vector<RunFile> variant_runs;        // one per variant id 0..4
  std::vector<double> variant_ndcg3;        // mean ndcg@3 per variant
  RobustSummary summary;
  int collapsed_variants = 0;
  bool provider_fallback = false;
};

// Five-contexts protocol: every judged turn is retrieved under each context
// variant with its query byte-identical, then the five per-variant runs are
// summarized by mean and population SD.
inline FullContextReport full_context_eval(const EvalDataset& dataset, const RetrieveFn& retrieve,
                                           const Qrels& qrels,
                                           const std::string& tag = "convret-full") {
  FullContextReport report;
  report.variant_runs.resize(5);

  for (const EvalConversation& conv : dataset) {
    for (size_t i = 0; i < conv.turns.size(); ++i) {
      const EvalTurn& turn = conv.turns[i];
      if (turn.role != Role::user || !turn.qid) continue;
      if (!turn.rewrite) {
        throw FormatError("full_context_eval: judged turn '" + conv.conversation_id + "#" +
                          std::to_string(i) + "' has no rewrite");
      }
      std::vector<Turn> history;
      for (size_t j = 0; j < i; ++j) history.push_back({conv.turns[j].role, conv.turns[j].text});
      Turn query{Role::user, turn.text};
      std::vector<ContextVariant> variants = full_context_variants(history, query, *turn.rewrite);
      for (const ContextVariant& v : variants) {
        if (v.variant_id != 0 && v.collapsed) ++report.collapsed_variants;
        Session session;
        session.conversation_id = conv.conversation_id;
        session.turns = v.turns;
        session.turns.push_back(query);  // byte-identical across variants
        SearchResult result = retrieve(session);
        for (const SearchHit& h : result.hits) {
          report.variant_runs[static_cast<size_t>(v.variant_id)].push_back(
              {*turn.qid, h.pid, h.rank, h.score, tag + "-v" + std::to_string(v.variant_id)});
        }
      }
    }
  }

  for (const RunFile& run : report.variant_runs) {
    MetricReport m = evaluate_run(run, qrels, {3});
    report.variant_ndcg3.push_back(m.means.at("ndcg@3"));
  }
  report.summary = robust_report(report.variant_ndcg3);
  return report;
}

}  // namespace convret
