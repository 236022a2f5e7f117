#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "convret/common.hpp"

namespace convret {

enum class Role { user, assistant };

inline const char* role_name(Role r) { return r == Role::user ? "user" : "assistant"; }

inline Role parse_role(const std::string& s) {
  if (s == "user") return Role::user;
  if (s == "assistant") return Role::assistant;
  throw FormatError("unknown role '" + s + "' (expected user|assistant)");
}

struct Turn {
  Role role = Role::user;
  std::string text;
};

// Conversation history plus the current query (always the last, user turn).
struct Session {
  std::string conversation_id;
  std::vector<Turn> turns;

  const Turn& current_query() const { return turns.back(); }

  void validate() const {
    if (turns.empty()) throw ContractError("Session: no turns");
    if (turns.back().role != Role::user) throw ContractError("Session: last turn must be a user turn");
    for (const Turn& t : turns) {
      if (normalize_whitespace(t.text).empty()) throw ContractError("Session: empty turn text");
    }
  }
};

struct Passage {
  std::string pid;
  std::string text;
};

struct TrainingSample {
  Session session;
  Passage positive;
  std::vector<Passage> hard_negatives;

  void validate() const {
    session.validate();
    for (const Passage& n : hard_negatives) {
      if (n.pid == positive.pid) {
        throw FormatError("TrainingSample: positive pid '" + positive.pid +
                          "' also appears in hard_negatives");
      }
    }
  }
};

// Token ids: fixed specials first, then the t text-embedding markers,
// then corpus words. Ordinary tokenization can never emit an id below
// first_word_id().
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kUser = 2;
  static constexpr int kAssistant = 3;
  static constexpr int kSep = 4;
  static constexpr int kFirstEmb = 5;

  Vocabulary() = default;
  explicit Vocabulary(int t_special) : t_(t_special) {
    if (t_ < 1 || t_ > 8) throw ConfigError("Vocabulary: t_special must be in [1, 8]");
    id_to_token_ = {"<pad>", "<unk>", "<user>", "<assistant>", "<sep>"};
    for (int i = 1; i <= t_; ++i) id_to_token_.push_back("<emb_" + std::to_string(i) + ">");
  }

  int t_special() const { return t_; }
  int emb_id(int i) const {
    if (i < 0 || i >= t_) throw ContractError("Vocabulary: emb index out of range");
    return kFirstEmb + i;
  }
  int last_emb_id() const { return kFirstEmb + t_ - 1; }
  int first_word_id() const { return kFirstEmb + t_; }
  int size() const { return static_cast<int>(id_to_token_.size()); }

  int word_id(const std::string& w) const {
    auto it = token_to_id_.find(w);
    return it == token_to_id_.end() ? kUnk : it->second;
  }
  const std::string& token(int id) const { return id_to_token_.at(static_cast<size_t>(id)); }

  int add_word(const std::string& w) {
    auto it = token_to_id_.find(w);
    if (it != token_to_id_.end()) return it->second;
    const int id = size();
    token_to_id_.emplace(w, id);
    id_to_token_.push_back(w);
    return id;
  }

  // Frequency-then-lexicographic order keeps the build deterministic
  // regardless of how the texts are traversed.
  static Vocabulary build(const std::vector<std::string>& texts, int t_special,
                          size_t max_words = 8000);

  const std::vector<std::string>& tokens() const { return id_to_token_; }

 private:
  int t_ = 0;
  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
};

// Lowercased word/punctuation split. Alphanumeric runs are words; every
// other non-space character stands alone.
inline std::vector<std::string> word_split(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      if (!cur.empty()) {
        out.push_back(cur);
        cur.clear();
      }
      if (!std::isspace(c)) out.push_back(std::string(1, raw));
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

inline Vocabulary Vocabulary::build(const std::vector<std::string>& texts, int t_special,
                                    size_t max_words) {
  std::map<std::string, size_t> counts;
  for (const std::string& text : texts) {
    for (const std::string& w : word_split(text)) ++counts[w];
  }
  std::vector<std::pair<std::string, size_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary v(t_special);
  for (const auto& [w, c] : ranked) {
    if (static_cast<size_t>(v.size()) >= max_words + static_cast<size_t>(v.first_word_id())) break;
    v.add_word(w);
  }
  return v;
}

inline std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
  std::vector<int> ids;
  for (const std::string& w : word_split(text)) ids.push_back(vocab.word_id(w));
  return ids;
}

inline std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

namespace detail {

inline std::vector<int> render_turn(const Turn& t, const Vocabulary& vocab) {
  std::vector<int> ids;
  ids.push_back(t.role == Role::user ? Vocabulary::kUser : Vocabulary::kAssistant);
  for (int id : tokenize(t.text, vocab)) ids.push_back(id);
  ids.push_back(Vocabulary::kSep);
  return ids;
}

}  // namespace detail

// Role-tagged chat rendering of a session, ending with the t embedding
// markers. Over-length input drops whole oldest turns first; the current
// query and the trailing markers always survive, with a left hard-truncation
// as the last resort.
inline std::vector<int> format_session(const Session& session, const Vocabulary& vocab,
                                       int max_seq_len = 1024) {
  session.validate();
  const int t = vocab.t_special();
  if (max_seq_len < t + 2) throw ConfigError("format_session: max_seq_len too small");

  std::vector<std::vector<int>> rendered;
  rendered.reserve(session.turns.size());
  for (const Turn& turn : session.turns) rendered.push_back(detail::render_turn(turn, vocab));

  size_t total = 0;
  for (const auto& r : rendered) total += r.size();
  size_t first = 0;
  const size_t budget = static_cast<size_t>(max_seq_len - t);
  while (total > budget && first + 1 < rendered.size()) {
    total -= rendered[first].size();
    ++first;
  }

  std::vector<int> ids;
  for (size_t i = first; i < rendered.size(); ++i) {
    ids.insert(ids.end(), rendered[i].begin(), rendered[i].end());
  }
  if (ids.size() > budget) {
    ids.erase(ids.begin(), ids.end() - static_cast<ptrdiff_t>(budget));
  }
  for (int i = 0; i < t; ++i) ids.push_back(vocab.emb_id(i));
  return ids;
}

// Passages and responses share one template: text tokens plus the trailing
// embedding markers.
inline std::vector<int> format_passage(const std::string& text, const Vocabulary& vocab,
                                       int max_seq_len = 1024) {
  const int t = vocab.t_special();
  std::vector<int> ids = tokenize(text, vocab);
  const size_t budget = static_cast<size_t>(max_seq_len - t);
  if (ids.size() > budget) ids.resize(budget);
  for (int i = 0; i < t; ++i) ids.push_back(vocab.emb_id(i));
  return ids;
}

enum class Segment : uint8_t { session, session_special, response, response_special };

// Packed training sequence: [session tokens, t markers, response tokens,
// t markers] with per-position region labels.
struct PackedSequence {
  std::vector<int> token_ids;
  std::vector<Segment> segment_map;
  int n_session = 0;   // N
  int n_response = 0;  // M
  int t_special = 0;   // t

  int length() const { return static_cast<int>(token_ids.size()); }

  void validate() const {
    if (t_special < 1) throw ConfigError("PackedSequence: t_special must be >= 1");
    if (length() != n_session + n_response + 2 * t_special || segment_map.size() != token_ids.size()) {
      throw ContractError("PackedSequence: layout does not match (N, t, M, t)");
    }
    int i = 0;
    for (int k = 0; k < n_session; ++k, ++i) {
      if (segment_map[i] != Segment::session) throw ContractError("PackedSequence: bad session label");
    }
    for (int k = 0; k < t_special; ++k, ++i) {
      if (segment_map[i] != Segment::session_special) {
        throw ContractError("PackedSequence: bad session_special label");
      }
    }
    for (int k = 0; k < n_response; ++k, ++i) {
      if (segment_map[i] != Segment::response) throw ContractError("PackedSequence: bad response label");
    }
    for (int k = 0; k < t_special; ++k, ++i) {
      if (segment_map[i] != Segment::response_special) {
        throw ContractError("PackedSequence: bad response_special label");
      }
    }
  }
};

// Thrown when a sample cannot fit the sequence budget even with an empty
// session side.
struct SampleRejected : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline PackedSequence pack_training_sequence(const TrainingSample& sample, const Vocabulary& vocab,
                                             int max_seq_len = 1024) {
  sample.validate();
  const int t = vocab.t_special();

  std::vector<int> response = tokenize(sample.positive.text, vocab);
  const int m = static_cast<int>(response.size());
  if (m < 1) throw SampleRejected("pack_training_sequence: response has no tokens");
  // Minimum viable session side: role marker + one token + separator + t markers.
  if (m + 2 * t + 3 > max_seq_len) {
    throw SampleRejected("pack_training_sequence: response alone exceeds max_seq_len (pid '" +
                         sample.positive.pid + "')");
  }

  // Session side absorbs all truncation; its budget includes its t markers.
  const int session_budget = max_seq_len - m - t;
  std::vector<int> session_ids = format_session(sample.session, vocab, session_budget);

  PackedSequence seq;
  seq.t_special = t;
  seq.n_session = static_cast<int>(session_ids.size()) - t;
  seq.n_response = m;
  seq.token_ids = std::move(session_ids);
  seq.token_ids.insert(seq.token_ids.end(), response.begin(), response.end());
  for (int i = 0; i < t; ++i) seq.token_ids.push_back(vocab.emb_id(i));

  seq.segment_map.assign(seq.token_ids.size(), Segment::session);
  int pos = seq.n_session;
  for (int i = 0; i < t; ++i) seq.segment_map[pos++] = Segment::session_special;
  for (int i = 0; i < m; ++i) seq.segment_map[pos++] = Segment::response;
  for (int i = 0; i < t; ++i) seq.segment_map[pos++] = Segment::response_special;
  seq.validate();
  return seq;
}

// ---- loaders ------------------------------------------------------------

namespace detail {

inline nlohmann::json parse_json_line(const std::string& line, const std::string& path, size_t lineno) {
  try {
    return nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ":" + std::to_string(lineno) + ": invalid JSON: " + e.what());
  }
}

template <typename T>
T require_field(const nlohmann::json& j, const char* field, const std::string& path, size_t lineno) {
  if (!j.contains(field)) {
    throw FormatError(path + ":" + std::to_string(lineno) + ": missing required field '" + field + "'");
  }
  try {
    return j.at(field).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError(path + ":" + std::to_string(lineno) + ": field '" + field + "' has wrong type");
  }
}

inline Passage parse_passage(const nlohmann::json& j, const std::string& path, size_t lineno) {
  return Passage{require_field<std::string>(j, "pid", path, lineno),
                 require_field<std::string>(j, "text", path, lineno)};
}

}  // namespace detail

inline Session parse_session_json(const nlohmann::json& j, const std::string& path, size_t lineno) {
  Session s;
  s.conversation_id = detail::require_field<std::string>(j, "conversation_id", path, lineno);
  auto turns = detail::require_field<nlohmann::json>(j, "turns", path, lineno);
  if (!turns.is_array() || turns.empty()) {
    throw FormatError(path + ":" + std::to_string(lineno) + ": 'turns' must be a non-empty array");
  }
  for (const auto& tj : turns) {
    Turn t;
    t.role = parse_role(detail::require_field<std::string>(tj, "role", path, lineno));
    t.text = detail::require_field<std::string>(tj, "text", path, lineno);
    s.turns.push_back(std::move(t));
  }
  try {
    s.validate();
  } catch (const ContractError& e) {
    throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
  }
  return s;
}

inline std::vector<TrainingSample> load_training_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open training file '" + path + "'");
  std::vector<TrainingSample> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (normalize_whitespace(line).empty()) continue;
    nlohmann::json j = detail::parse_json_line(line, path, lineno);
    TrainingSample s;
    s.session = parse_session_json(j, path, lineno);
    s.positive =
        detail::parse_passage(detail::require_field<nlohmann::json>(j, "positive", path, lineno),
                              path, lineno);
    auto negs = detail::require_field<nlohmann::json>(j, "hard_negatives", path, lineno);
    if (!negs.is_array()) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": 'hard_negatives' must be an array");
    }
    for (const auto& nj : negs) s.hard_negatives.push_back(detail::parse_passage(nj, path, lineno));
    try {
      s.validate();
    } catch (const FormatError& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(std::move(s));
  }
  return out;
}

// Corpus as TSV ("pid\ttext") or JSONL ({"pid": ..., "text": ...}); the two
// encodings load identically.
inline std::vector<Passage> load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open corpus file '" + path + "'");
  std::vector<Passage> out;
  std::unordered_set<std::string> seen;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (normalize_whitespace(line).empty()) continue;
    Passage p;
    if (line.front() == '{') {
      nlohmann::json j = detail::parse_json_line(line, path, lineno);
      p = detail::parse_passage(j, path, lineno);
    } else {
      const size_t tab = line.find('\t');
      if (tab == std::string::npos) {
        throw FormatError(path + ":" + std::to_string(lineno) + ": expected 'pid<TAB>text'");
      }
      p.pid = line.substr(0, tab);
      p.text = line.substr(tab + 1);
    }
    if (!seen.insert(p.pid).second) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": duplicate pid '" + p.pid + "'");
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace convret
