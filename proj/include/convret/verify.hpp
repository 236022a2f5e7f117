#pragma once

#include <chrono>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "convret/metrics.hpp"
#include "convret/objectives.hpp"
#include "convret/trainer.hpp"

namespace convret::verify {

struct SuiteResult {
  std::string name;
  bool pass = false;
  double max_error = 0.0;
  std::string note;
};

namespace detail {

inline ModelWeights toy_model(int vocab, int layers, int t, uint64_t seed) {
  ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.d_model = 16;
  cfg.n_layers = layers;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.max_seq_len = 80;
  cfg.t_special = t;
  Rng rng(seed);
  return ModelWeights::init(cfg, rng);
}

inline PackedSequence random_packed(int n, int t, int m, int vocab, Rng& rng) {
  PackedSequence seq;
  seq.n_session = n;
  seq.n_response = m;
  seq.t_special = t;
  const int first_word = 5 + t;
  for (int i = 0; i < n; ++i) {
    seq.token_ids.push_back(first_word + static_cast<int>(bounded(rng, vocab - first_word)));
  }
  for (int i = 0; i < t; ++i) seq.token_ids.push_back(5 + i);
  for (int i = 0; i < m; ++i) {
    seq.token_ids.push_back(first_word + static_cast<int>(bounded(rng, vocab - first_word)));
  }
  for (int i = 0; i < t; ++i) seq.token_ids.push_back(5 + i);
  for (int i = 0; i < n; ++i) seq.segment_map.push_back(Segment::session);
  for (int i = 0; i < t; ++i) seq.segment_map.push_back(Segment::session_special);
  for (int i = 0; i < m; ++i) seq.segment_map.push_back(Segment::response);
  for (int i = 0; i < t; ++i) seq.segment_map.push_back(Segment::response_special);
  return seq;
}

}  // namespace detail

// Reverse-mode gradients of the full combined loss on a 2-layer toy model
// against central finite differences, every parameter coordinate.
inline SuiteResult run_gradient_suite(uint64_t seed = 4242, double eps = 1e-5,
                                      double tolerance = 1e-4) {
  SuiteResult result{"gradient-check", false, 0.0, {}};
  const int t = 2;
  Vocabulary vocab(t);
  while (vocab.size() < 32) vocab.add_word("w" + std::to_string(vocab.size()));
  ModelWeights w = detail::toy_model(vocab.size(), 2, t, seed);

  Rng rng(seed);
  PackedSequence seq = detail::random_packed(5, t, 4, vocab.size(), rng);
  std::vector<int> session_ids(seq.token_ids.begin(),
                               seq.token_ids.begin() + seq.n_session + seq.t_special);
  auto passage_ids = [&](int a, int b) {
    std::vector<int> ids{vocab.first_word_id() + a, vocab.first_word_id() + b};
    for (int i = 0; i < t; ++i) ids.push_back(vocab.emb_id(i));
    return ids;
  };
  const std::vector<int> pos_ids = passage_ids(1, 3);
  const std::vector<int> neg1_ids = passage_ids(2, 7);
  const std::vector<int> neg2_ids = passage_ids(8, 4);

  ContrastiveConfig ccfg;
  ccfg.temperature = 0.1;
  LossWeights lw{0.7};
  auto loss_value = [&]() -> double {
    Tensor e_x = embed_text_t(session_ids, w, vocab);
    Tensor e_pos = embed_text_t(pos_ids, w, vocab);
    std::vector<Tensor> negs{embed_text_t(neg1_ids, w, vocab), embed_text_t(neg2_ids, w, vocab)};
    Tensor l_c = contrastive_loss(e_x, e_pos, negs, ccfg);
    Tensor l_s = session_masked_lm_loss(seq, w);
    return combined_loss(l_c, l_s, lw).item();
  };
  auto loss_tensor = [&]() -> Tensor {
    Tensor e_x = embed_text_t(session_ids, w, vocab);
    Tensor e_pos = embed_text_t(pos_ids, w, vocab);
    std::vector<Tensor> negs{embed_text_t(neg1_ids, w, vocab), embed_text_t(neg2_ids, w, vocab)};
    Tensor l_c = contrastive_loss(e_x, e_pos, negs, ccfg);
    Tensor l_s = session_masked_lm_loss(seq, w);
    return combined_loss(l_c, l_s, lw);
  };

  w.zero_grad();
  backward(loss_tensor());

  // Central differences carry ~ulp(f)/eps cancellation noise, so relative
  // error is measured against a 1e-5 floor where the true gradient vanishes.
  double max_rel = 0.0;
  std::string worst;
  for (auto& [name, p] : w.named_parameters()) {
    const std::vector<double> ad = p.grad();
    const std::vector<double> fd = finite_difference_gradient(loss_value, p, eps);
    for (size_t i = 0; i < fd.size(); ++i) {
      const double denom = std::max({std::abs(ad[i]), std::abs(fd[i]), 1e-5});
      const double rel = std::abs(ad[i] - fd[i]) / denom;
      if (rel > max_rel) {
        max_rel = rel;
        worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  result.max_error = max_rel;
  result.pass = max_rel < tolerance;
  result.note = "worst at " + worst;
  return result;
}

using MaskBuilder = std::function<AttentionMask(const PackedSequence&)>;

// Post-softmax attention on forbidden columns must be exactly zero, for
// every layer and head, across random (N, M, t) configurations. The mask
// builder is injectable so a corrupted builder is detectable.
inline SuiteResult run_mask_suite(uint64_t seed = 777, int n_configs = 100,
                                  const MaskBuilder& builder = {}) {
  SuiteResult result{"mask-zeroing", false, 0.0, {}};
  const MaskBuilder build = builder ? builder : [](const PackedSequence& s) {
    return build_session_mask(s);
  };
  Rng rng(seed);
  double max_forbidden_mass = 0.0;
  int checked = 0;
  for (int c = 0; c < n_configs; ++c) {
    const int t = 1 + static_cast<int>(bounded(rng, 3));
    const int n = 1 + static_cast<int>(bounded(rng, 16));
    const int m = 1 + static_cast<int>(bounded(rng, 16));
    ModelWeights w = detail::toy_model(40, 1 + static_cast<int>(bounded(rng, 2)), t,
                                       seed * 1000 + static_cast<uint64_t>(c));
    PackedSequence seq = detail::random_packed(n, t, m, 40, rng);
    AttentionMask mask = build(seq);

    // rule check: response rows must hide all raw session columns
    for (int i = n + t; i < seq.length(); ++i) {
      for (int j = 0; j < n; ++j) {
        if (mask.allowed(i, j)) {
          result.note = "mask allows a session column from a response row";
          result.max_error = 1.0;
          return result;
        }
      }
    }
    ForwardTrace trace;
    encoder_forward(seq.token_ids, mask, w, &trace);
    for (const auto& layer : trace.attention) {
      for (const Tensor& probs : layer) {
        for (int i = n + t; i < seq.length(); ++i) {
          for (int j = 0; j < n; ++j) {
            max_forbidden_mass = std::max(max_forbidden_mass, std::abs(probs.at(i, j)));
          }
          for (int j = i + 1; j < seq.length(); ++j) {
            max_forbidden_mass = std::max(max_forbidden_mass, std::abs(probs.at(i, j)));
          }
        }
      }
    }
    ++checked;
  }
  result.max_error = max_forbidden_mass;
  result.pass = max_forbidden_mass == 0.0;
  result.note = std::to_string(checked) + " configurations";
  return result;
}

// Masked LM loss against the independent two-pass oracle.
inline SuiteResult run_two_pass_suite(uint64_t seed = 99, int n_configs = 100,
                                      double tolerance = 1e-5) {
  SuiteResult result{"two-pass-equivalence", false, 0.0, {}};
  Rng rng(seed);
  double max_diff = 0.0;
  for (int c = 0; c < n_configs; ++c) {
    const int t = 1 + static_cast<int>(bounded(rng, 3));
    const int n = 1 + static_cast<int>(bounded(rng, 16));
    const int m = 1 + static_cast<int>(bounded(rng, 16));
    const int layers = 1 + static_cast<int>(bounded(rng, 3));
    ModelWeights w = detail::toy_model(40, layers, t, seed * 31 + static_cast<uint64_t>(c));
    PackedSequence seq = detail::random_packed(n, t, m, 40, rng);
    const double impl = session_masked_lm_loss(seq, w).item();
    const double orc = two_pass_lm_loss_oracle(seq, w);
    max_diff = std::max(max_diff, std::abs(impl - orc));
  }
  result.max_error = max_diff;
  result.pass = max_diff < tolerance;
  result.note = std::to_string(n_configs) + " configurations";
  return result;
}

// Ranking metrics against plain brute-force reevaluation, plus the worked
// closed-form example.
inline SuiteResult run_metric_suite(uint64_t seed = 123, int n_instances = 25,
                                    double tolerance = 1e-9) {
  SuiteResult result{"metric-oracle", false, 0.0, {}};
  double max_diff = 0.0;

  {  // worked example: grades {2, 1}, retrieved rels [1, 0, 2]
    std::map<std::string, int> judged{{"da", 2}, {"db", 1}};
    std::vector<std::string> ranked{"db", "dx", "da"};
    const double got = ndcg_at_k(ranked, judged, 3);
    const double expect = 2.5 / (3.0 + 1.0 / std::log2(3.0));
    max_diff = std::max(max_diff, std::abs(got - expect));
    if (std::abs(got - 0.68853) > 1e-5) {
      result.note = "worked example mismatch";
      result.max_error = std::abs(got - 0.68853);
      return result;
    }
  }

  Rng rng(seed);
  for (int inst = 0; inst < n_instances; ++inst) {
    std::map<std::string, int> judged;
    const int jn = 1 + static_cast<int>(bounded(rng, 6));
    for (int i = 0; i < jn; ++i) {
      judged["d" + std::to_string(bounded(rng, 15))] = static_cast<int>(bounded(rng, 4));
    }
    judged["d_sure"] = 1 + static_cast<int>(bounded(rng, 3));
    std::vector<std::string> pool;
    for (int i = 0; i < 15; ++i) pool.push_back("d" + std::to_string(i));
    pool.push_back("d_sure");
    std::vector<std::string> ranked = sample_without_replacement(pool, 10, rng);

    for (int k : {1, 3, 5}) {
      // independent direct evaluation
      double dcg = 0.0, idcg = 0.0;
      for (int r = 0; r < k && r < static_cast<int>(ranked.size()); ++r) {
        auto it = judged.find(ranked[static_cast<size_t>(r)]);
        if (it != judged.end()) dcg += (std::pow(2.0, it->second) - 1.0) / std::log2(r + 2.0);
      }
      std::vector<int> grades;
      for (auto& [p, g] : judged) {
        if (g > 0) grades.push_back(g);
      }
      std::sort(grades.rbegin(), grades.rend());
      for (int r = 0; r < k && r < static_cast<int>(grades.size()); ++r) {
        idcg += (std::pow(2.0, grades[static_cast<size_t>(r)]) - 1.0) / std::log2(r + 2.0);
      }
      max_diff = std::max(max_diff, std::abs(ndcg_at_k(ranked, judged, k) - dcg / idcg));

      int found = 0, total = 0;
      for (auto& [p, g] : judged) total += g >= 1 ? 1 : 0;
      for (int r = 0; r < k; ++r) {
        auto it = judged.find(ranked[static_cast<size_t>(r)]);
        found += it != judged.end() && it->second >= 1 ? 1 : 0;
      }
      max_diff = std::max(
          max_diff, std::abs(recall_at_k(ranked, judged, k) - static_cast<double>(found) / total));
    }
    double rr = 0.0;
    for (size_t r = 0; r < ranked.size(); ++r) {
      auto it = judged.find(ranked[r]);
      if (it != judged.end() && it->second >= 1) {
        rr = 1.0 / static_cast<double>(r + 1);
        break;
      }
    }
    max_diff = std::max(max_diff, std::abs(mrr(ranked, judged) - rr));
  }
  result.max_error = max_diff;
  result.pass = max_diff < tolerance;
  result.note = std::to_string(n_instances) + " random instances + worked example";
  return result;
}

inline std::vector<SuiteResult> run_all(uint64_t seed = 1) {
  return {run_gradient_suite(seed + 1), run_mask_suite(seed + 2), run_two_pass_suite(seed + 3),
          run_metric_suite(seed + 4)};
}

inline std::string format_results(const std::vector<SuiteResult>& results) {
  std::ostringstream out;
  for (const SuiteResult& r : results) {
    out << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << "  max error " << std::scientific
        << r.max_error << "  (" << r.note << ")\n";
  }
  return out.str();
}

}  // namespace convret::verify
