#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "convret/index.hpp"
#include "convret/metrics.hpp"
#include "convret/text.hpp"

namespace convret {

// A conversation turn as evaluated: user turns may carry a query id (they
// are then scored against the qrels) and a standalone human rewrite.
struct EvalTurn {
  Role role = Role::user;
  std::string text;
  std::optional<std::string> qid;
  std::optional<std::string> rewrite;
};

struct EvalConversation {
  std::string conversation_id;
  std::vector<EvalTurn> turns;
};

using EvalDataset = std::vector<EvalConversation>;

inline EvalDataset load_eval_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open eval dataset: '" + path + "'");
  EvalDataset out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (normalize_whitespace(line).empty()) continue;
    nlohmann::json j = detail::parse_json_line(line, path, lineno);
    EvalConversation conv;
    conv.conversation_id = detail::require_field<std::string>(j, "conversation_id", path, lineno);
    auto turns = detail::require_field<nlohmann::json>(j, "turns", path, lineno);
    if (!turns.is_array() || turns.empty()) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": 'turns' must be a non-empty array");
    }
    for (const auto& tj : turns) {
      EvalTurn t;
      t.role = parse_role(detail::require_field<std::string>(tj, "role", path, lineno));
      t.text = detail::require_field<std::string>(tj, "text", path, lineno);
      if (tj.contains("qid")) t.qid = tj.at("qid").get<std::string>();
      if (tj.contains("rewrite")) t.rewrite = tj.at("rewrite").get<std::string>();
      if (t.qid && t.role != Role::user) {
        throw FormatError(path + ":" + std::to_string(lineno) + ": only user turns may carry a qid");
      }
      conv.turns.push_back(std::move(t));
    }
    out.push_back(std::move(conv));
  }
  return out;
}

inline void save_eval_dataset(const EvalDataset& dataset, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open eval dataset for writing: '" + path + "'");
  for (const EvalConversation& conv : dataset) {
    nlohmann::json turns = nlohmann::json::array();
    for (const EvalTurn& t : conv.turns) {
      nlohmann::json tj{{"role", role_name(t.role)}, {"text", t.text}};
      if (t.qid) tj["qid"] = *t.qid;
      if (t.rewrite) tj["rewrite"] = *t.rewrite;
      turns.push_back(std::move(tj));
    }
    out << nlohmann::json{{"conversation_id", conv.conversation_id}, {"turns", turns}} << '\n';
  }
}

// The session seen at turn `turn_index`: all prior turns plus that query.
inline Session session_prefix(const EvalConversation& conv, size_t turn_index,
                              bool include_history = true) {
  if (turn_index >= conv.turns.size() || conv.turns[turn_index].role != Role::user) {
    throw ContractError("session_prefix: turn index does not name a user turn");
  }
  Session s;
  s.conversation_id = conv.conversation_id;
  if (include_history) {
    for (size_t i = 0; i < turn_index; ++i) {
      s.turns.push_back(Turn{conv.turns[i].role, conv.turns[i].text});
    }
  }
  s.turns.push_back(Turn{Role::user, conv.turns[turn_index].text});
  return s;
}

using RetrieveFn = std::function<SearchResult(const Session&)>;

inline RetrieveFn make_retriever(const ModelWeights& weights, const Vocabulary& vocab,
                                 const EmbeddingIndex& index, int k) {
  return [&weights, &vocab, &index, k](const Session& session) {
    std::vector<double> q =
        embed_text(format_session(session, vocab, weights.config.max_seq_len), weights, vocab);
    return search_topk(q, index, k);
  };
}

// Retrieval over every judged turn with its unmodified history.
inline RunFile run_normal_eval(const EvalDataset& dataset, const RetrieveFn& retrieve,
                               const std::string& tag = "convret", bool include_history = true) {
  RunFile run;
  for (const EvalConversation& conv : dataset) {
    for (size_t i = 0; i < conv.turns.size(); ++i) {
      if (conv.turns[i].role != Role::user || !conv.turns[i].qid) continue;
      SearchResult result = retrieve(session_prefix(conv, i, include_history));
      for (const SearchHit& h : result.hits) {
        run.push_back({*conv.turns[i].qid, h.pid, h.rank, h.score, tag});
      }
    }
  }
  return run;
}

}  // namespace convret
