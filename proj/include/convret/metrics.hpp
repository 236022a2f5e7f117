#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "convret/common.hpp"

namespace convret {

// TREC-style graded relevance judgments: qid -> pid -> grade.
struct Qrels {
  std::map<std::string, std::map<std::string, int>> judgments;

  bool has_relevant(const std::string& qid) const {
    auto it = judgments.find(qid);
    if (it == judgments.end()) return false;
    for (const auto& [pid, rel] : it->second) {
      if (rel >= 1) return true;
    }
    return false;
  }

  int grade(const std::string& qid, const std::string& pid) const {
    auto it = judgments.find(qid);
    if (it == judgments.end()) return 0;
    auto jt = it->second.find(pid);
    return jt == it->second.end() ? 0 : jt->second;
  }
};

struct RunEntry {
  std::string qid;
  std::string pid;
  int rank = 0;
  double score = 0.0;
  std::string tag;
};

using RunFile = std::vector<RunEntry>;

// "qid 0 pid rel", whitespace-separated.
inline Qrels load_qrels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open qrels: '" + path + "'");
  Qrels q;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (normalize_whitespace(line).empty()) continue;
    std::istringstream ss(line);
    std::string qid, iter, pid;
    int rel;
    if (!(ss >> qid >> iter >> pid >> rel) || rel < 0) {
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": expected 'qid 0 pid rel' with rel >= 0");
    }
    q.judgments[qid][pid] = rel;
  }
  return q;
}

// "qid Q0 pid rank score tag". Per qid: contiguous 1-based ranks and
// non-increasing scores, checked on load.
inline RunFile load_run(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open run file: '" + path + "'");
  RunFile run;
  std::string line;
  size_t lineno = 0;
  std::map<std::string, std::pair<int, double>> last;  // qid -> (rank, score)
  while (std::getline(in, line)) {
    ++lineno;
    if (normalize_whitespace(line).empty()) continue;
    std::istringstream ss(line);
    RunEntry e;
    std::string q0;
    if (!(ss >> e.qid >> q0 >> e.pid >> e.rank >> e.score >> e.tag)) {
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": expected 'qid Q0 pid rank score tag'");
    }
    auto [it, fresh] = last.try_emplace(e.qid, 0, 0.0);
    auto& [prev_rank, prev_score] = it->second;
    if (e.rank != prev_rank + 1) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": ranks for qid '" + e.qid +
                        "' are not contiguous from 1");
    }
    if (!fresh && e.score > prev_score) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": scores for qid '" + e.qid +
                        "' increase with rank");
    }
    prev_rank = e.rank;
    prev_score = e.score;
    run.push_back(std::move(e));
  }
  return run;
}

inline void save_run(const RunFile& run, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open run file for writing: '" + path + "'");
  out << std::setprecision(10);
  for (const RunEntry& e : run) {
    out << e.qid << " Q0 " << e.pid << ' ' << e.rank << ' ' << e.score << ' ' << e.tag << '\n';
  }
}

namespace detail {

inline double dcg_gain(int rel) { return std::pow(2.0, rel) - 1.0; }
inline double dcg_discount(int rank) { return 1.0 / std::log2(static_cast<double>(rank) + 1.0); }

}  // namespace detail

// NDCG@k with exponential gain and log2 discount; unjudged pids gain 0.
// Caller guarantees the query has at least one positively judged pid.
inline double ndcg_at_k(const std::vector<std::string>& ranked_pids,
                        const std::map<std::string, int>& judged, int k) {
  double dcg = 0.0;
  const int depth = std::min<int>(k, static_cast<int>(ranked_pids.size()));
  for (int r = 1; r <= depth; ++r) {
    auto it = judged.find(ranked_pids[static_cast<size_t>(r - 1)]);
    if (it != judged.end() && it->second > 0) {
      dcg += detail::dcg_gain(it->second) * detail::dcg_discount(r);
    }
  }
  std::vector<int> grades;
  for (const auto& [pid, rel] : judged) {
    if (rel > 0) grades.push_back(rel);
  }
  if (grades.empty()) throw ContractError("ndcg_at_k: query has no positively judged pid");
  std::sort(grades.rbegin(), grades.rend());
  double idcg = 0.0;
  for (int r = 1; r <= std::min<int>(k, static_cast<int>(grades.size())); ++r) {
    idcg += detail::dcg_gain(grades[static_cast<size_t>(r - 1)]) * detail::dcg_discount(r);
  }
  return dcg / idcg;
}

// Binary relevance (grade >= 1) fraction of relevant pids found in the top k.
inline double recall_at_k(const std::vector<std::string>& ranked_pids,
                          const std::map<std::string, int>& judged, int k) {
  int total = 0;
  for (const auto& [pid, rel] : judged) {
    if (rel >= 1) ++total;
  }
  if (total == 0) throw ContractError("recall_at_k: query has no positively judged pid");
  int found = 0;
  const int depth = std::min<int>(k, static_cast<int>(ranked_pids.size()));
  for (int r = 0; r < depth; ++r) {
    auto it = judged.find(ranked_pids[static_cast<size_t>(r)]);
    if (it != judged.end() && it->second >= 1) ++found;
  }
  return static_cast<double>(found) / total;
}

// Reciprocal rank of the first relevant pid, 0 when none is retrieved.
inline double mrr(const std::vector<std::string>& ranked_pids,
                  const std::map<std::string, int>& judged) {
  for (size_t r = 0; r < ranked_pids.size(); ++r) {
    auto it = judged.find(ranked_pids[r]);
    if (it != judged.end() && it->second >= 1) return 1.0 / static_cast<double>(r + 1);
  }
  return 0.0;
}

struct MetricReport {
  std::vector<std::string> metric_names;
  std::map<std::string, std::map<std::string, double>> per_query;  // qid -> metric -> value
  std::map<std::string, double> means;
  int evaluated = 0;
  int excluded = 0;  // run queries with no positive judgment

  std::string to_csv() const {
    std::ostringstream out;
    out << std::setprecision(10);
    out << "qid";
    for (const auto& m : metric_names) out << ',' << m;
    out << '\n';
    for (const auto& [qid, vals] : per_query) {
      out << qid;
      for (const auto& m : metric_names) out << ',' << vals.at(m);
      out << '\n';
    }
    out << "mean";
    for (const auto& m : metric_names) out << ',' << means.at(m);
    out << '\n';
    return out.str();
  }

  std::string to_table() const {
    std::ostringstream out;
    out << std::left << std::setw(16) << "metric" << std::right << std::setw(10) << "mean" << '\n';
    for (const auto& m : metric_names) {
      out << std::left << std::setw(16) << m << std::right << std::setw(10) << std::fixed
          << std::setprecision(5) << means.at(m) << '\n';
    }
    out << "queries evaluated: " << evaluated << ", excluded (no positive judgment): " << excluded
        << '\n';
    return out.str();
  }
};

inline MetricReport evaluate_run(const RunFile& run, const Qrels& qrels,
                                 const std::vector<int>& k_list) {
  std::map<std::string, std::vector<std::pair<int, std::string>>> by_qid;
  for (const RunEntry& e : run) by_qid[e.qid].emplace_back(e.rank, e.pid);

  MetricReport report;
  for (int k : k_list) {
    report.metric_names.push_back("ndcg@" + std::to_string(k));
    report.metric_names.push_back("recall@" + std::to_string(k));
  }
  report.metric_names.push_back("mrr");

  for (auto& [qid, entries] : by_qid) {
    if (!qrels.has_relevant(qid)) {
      ++report.excluded;
      continue;
    }
    std::sort(entries.begin(), entries.end());
    std::vector<std::string> ranked;
    ranked.reserve(entries.size());
    for (const auto& [rank, pid] : entries) ranked.push_back(pid);
    const auto& judged = qrels.judgments.at(qid);
    auto& vals = report.per_query[qid];
    for (int k : k_list) {
      vals["ndcg@" + std::to_string(k)] = ndcg_at_k(ranked, judged, k);
      vals["recall@" + std::to_string(k)] = recall_at_k(ranked, judged, k);
    }
    vals["mrr"] = mrr(ranked, judged);
    ++report.evaluated;
  }

  for (const auto& m : report.metric_names) {
    double acc = 0.0;
    for (const auto& [qid, vals] : report.per_query) acc += vals.at(m);
    report.means[m] = report.evaluated > 0 ? acc / report.evaluated : 0.0;
  }
  return report;
}

inline MetricReport evaluate_run_files(const std::string& run_path, const std::string& qrels_path,
                                       const std::vector<int>& k_list) {
  return evaluate_run(load_run(run_path), load_qrels(qrels_path), k_list);
}

}  // namespace convret
