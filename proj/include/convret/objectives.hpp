#pragma once

#include <cmath>
#include <vector>

#include "convret/common.hpp"
#include "convret/model.hpp"
#include "convret/tensor.hpp"
#include "convret/text.hpp"

namespace convret {

struct ContrastiveConfig {
  double temperature = 0.05;
  bool use_in_batch_negatives = true;

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("ContrastiveConfig: temperature must be positive");
  }
};

struct LossWeights {
  double alpha = 1.0;

  void validate() const {
    if (alpha < 0.0) throw ConfigError("LossWeights: alpha must be non-negative");
  }
};

namespace detail {

inline void check_unit(const std::vector<double>& v, const char* who) {
  double n = 0.0;
  for (double x : v) n += x * x;
  if (n == 0.0) throw ContractError(std::string(who) + ": zero vector");
  if (std::abs(std::sqrt(n) - 1.0) > 1e-3) {
    throw ContractError(std::string(who) + ": input is not unit-norm");
  }
}

}  // namespace detail

// phi(x, y) = exp(cos / tau); monotone in the cosine.
inline double score_phi(const std::vector<double>& e_x, const std::vector<double>& e_y, double tau) {
  if (!(tau > 0.0)) throw ConfigError("score_phi: tau must be positive");
  if (e_x.size() != e_y.size()) throw DimError("score_phi: dimension mismatch");
  detail::check_unit(e_x, "score_phi");
  detail::check_unit(e_y, "score_phi");
  double cos = 0.0;
  for (size_t i = 0; i < e_x.size(); ++i) cos += e_x[i] * e_y[i];
  return std::exp(cos / tau);
}

// -log( phi+ / (phi+ + sum phi-) ), evaluated in log space: a softmax cross
// entropy over temperature-scaled cosines with the positive at slot 0.
inline Tensor contrastive_loss(const Tensor& e_x, const Tensor& e_pos,
                               const std::vector<Tensor>& negatives, const ContrastiveConfig& cfg) {
  cfg.validate();
  if (negatives.empty()) throw ContractError("contrastive_loss: empty negative set");
  const double inv_tau = 1.0 / cfg.temperature;
  std::vector<Tensor> scores;
  scores.reserve(negatives.size() + 1);
  scores.push_back(scale(dot(e_x, e_pos), inv_tau));
  for (const Tensor& e_neg : negatives) scores.push_back(scale(dot(e_x, e_neg), inv_tau));
  return cross_entropy_with_logits(stack_scalars(scores), {0});
}

enum class LmMaskMode {
  session_masked,  // the custom mask: response rows see anchors only
  causal,          // vanilla instruction tuning ablation
};

// Mean next-token cross entropy over the M response tokens. Prediction for
// y_1 reads the last session special's state; session tokens and special
// positions contribute no loss terms.
inline Tensor session_masked_lm_loss(const PackedSequence& seq, const ModelWeights& w,
                                     LmMaskMode mode = LmMaskMode::session_masked) {
  seq.validate();
  if (seq.n_response < 1) throw ContractError("session_masked_lm_loss: no response tokens");
  AttentionMask mask = mode == LmMaskMode::session_masked ? build_session_mask(seq)
                                                          : build_causal_mask(seq.length());
  Tensor hidden = encoder_forward(seq.token_ids, mask, w);
  const int first_pred = seq.n_session + seq.t_special - 1;
  std::vector<int> rows, targets;
  rows.reserve(seq.n_response);
  targets.reserve(seq.n_response);
  for (int i = 0; i < seq.n_response; ++i) {
    rows.push_back(first_pred + i);
    targets.push_back(seq.token_ids[static_cast<size_t>(seq.n_session + seq.t_special + i)]);
  }
  return cross_entropy_with_logits(lm_logits(hidden, rows, w), targets);
}

// ---- two-pass oracle ------------------------------------------------------
//
// Independent evaluation of the masked LM loss: pass 1 runs the session
// region alone under plain causal attention and captures each layer's
// key/value vectors at the t special positions; pass 2 runs the response
// tokens with those captures as the only attendable prefix. Plain double
// arithmetic, no computation graph, no attention-mask machinery.

namespace oracle_detail {

using Vec = std::vector<double>;
using Rows = std::vector<Vec>;

inline Vec vecmat(const Vec& x, const Tensor& w) {
  const int k = w.shape()[0], n = w.shape()[1];
  Vec out(n, 0.0);
  for (int r = 0; r < k; ++r) {
    const double xv = x[r];
    const double* wr = w.data() + static_cast<size_t>(r) * n;
    for (int j = 0; j < n; ++j) out[j] += xv * wr[j];
  }
  return out;
}

inline Vec ln_row(const Vec& x, const Tensor& gain, const Tensor& bias, double eps) {
  const int n = static_cast<int>(x.size());
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= n;
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= n;
  const double is = 1.0 / std::sqrt(var + eps);
  Vec out(n);
  for (int j = 0; j < n; ++j) out[j] = gain.data()[j] * (x[j] - mu) * is + bias.data()[j];
  return out;
}

inline void add_in_place(Vec& a, const Vec& b) {
  for (size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

inline Vec ffn_row(const Vec& x, const LayerWeights& lw) {
  Vec h = vecmat(x, lw.ff1);
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  for (size_t j = 0; j < h.size(); ++j) {
    const double z = h[j] + lw.ff1_bias.data()[j];
    h[j] = 0.5 * z * (1.0 + std::erf(z * kInvSqrt2));
  }
  Vec out = vecmat(h, lw.ff2);
  for (size_t j = 0; j < out.size(); ++j) out[j] += lw.ff2_bias.data()[j];
  return out;
}

// Attention for one query row over an explicit key/value list.
inline Vec attend(const Vec& q, const Rows& keys, const Rows& values, int n_heads) {
  const int d = static_cast<int>(q.size());
  const int dh = d / n_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  Vec out(d, 0.0);
  std::vector<double> scores(keys.size());
  for (int h = 0; h < n_heads; ++h) {
    const int off = h * dh;
    double mx = -std::numeric_limits<double>::infinity();
    for (size_t j = 0; j < keys.size(); ++j) {
      double s = 0.0;
      for (int c = 0; c < dh; ++c) s += q[off + c] * keys[j][off + c];
      scores[j] = s * inv_sqrt_dh;
      mx = std::max(mx, scores[j]);
    }
    double denom = 0.0;
    for (double& s : scores) {
      s = std::exp(s - mx);
      denom += s;
    }
    for (size_t j = 0; j < keys.size(); ++j) {
      const double p = scores[j] / denom;
      for (int c = 0; c < dh; ++c) out[off + c] += p * values[j][off + c];
    }
  }
  return out;
}

struct PassState {
  Rows h;                               // residual stream, one row per position
  std::vector<Rows> key_capture;        // [layer][position]
  std::vector<Rows> value_capture;      // [layer][position]
};

// One transformer stack over rows, attending per position to an optional
// captured prefix plus the causal prefix of the pass itself.
inline PassState run_pass(const std::vector<int>& ids, int pos_offset, const ModelWeights& w,
                          const PassState* prefix) {
  const ModelConfig& cfg = w.config;
  PassState st;
  st.key_capture.resize(cfg.n_layers);
  st.value_capture.resize(cfg.n_layers);
  for (size_t i = 0; i < ids.size(); ++i) {
    Vec row(cfg.d_model);
    const double* emb = w.tok_embed.data() + static_cast<size_t>(ids[i]) * cfg.d_model;
    const double* pos = w.pos_table.data() + static_cast<size_t>(pos_offset + i) * cfg.d_model;
    for (int c = 0; c < cfg.d_model; ++c) row[c] = emb[c] + pos[c];
    st.h.push_back(std::move(row));
  }
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& lw = w.layers[l];
    Rows xn, qs, ks, vs;
    for (const Vec& row : st.h) {
      Vec x = ln_row(row, lw.ln1_gain, lw.ln1_bias, kLayerNormEps);
      qs.push_back(vecmat(x, lw.wq));
      ks.push_back(vecmat(x, lw.wk));
      vs.push_back(vecmat(x, lw.wv));
    }
    st.key_capture[l] = ks;
    st.value_capture[l] = vs;
    for (size_t i = 0; i < st.h.size(); ++i) {
      Rows keys, values;
      if (prefix) {
        keys = prefix->key_capture[l];
        values = prefix->value_capture[l];
      }
      for (size_t j = 0; j <= i; ++j) {
        keys.push_back(ks[j]);
        values.push_back(vs[j]);
      }
      Vec attn = vecmat(attend(qs[i], keys, values, cfg.n_heads), lw.wo);
      add_in_place(st.h[i], attn);
      Vec x2 = ln_row(st.h[i], lw.ln2_gain, lw.ln2_bias, kLayerNormEps);
      add_in_place(st.h[i], ffn_row(x2, lw));
    }
  }
  return st;
}

inline double neg_log_prob(const Vec& hidden_row, const ModelWeights& w, int target) {
  Vec final_row = ln_row(hidden_row, w.lnf_gain, w.lnf_bias, kLayerNormEps);
  Vec logits = vecmat(final_row, w.w_out);
  double mx = logits[0];
  for (double z : logits) mx = std::max(mx, z);
  double s = 0.0;
  for (double z : logits) s += std::exp(z - mx);
  return mx + std::log(s) - logits[static_cast<size_t>(target)];
}

}  // namespace oracle_detail

inline double two_pass_lm_loss_oracle(const PackedSequence& seq, const ModelWeights& w) {
  seq.validate();
  if (seq.n_response < 1) throw ContractError("two_pass_lm_loss_oracle: no response tokens");
  const int n = seq.n_session, t = seq.t_special, m = seq.n_response;

  std::vector<int> session_ids(seq.token_ids.begin(), seq.token_ids.begin() + n + t);
  oracle_detail::PassState pass1 = oracle_detail::run_pass(session_ids, 0, w, nullptr);

  // only the special positions stay attendable for pass 2
  oracle_detail::PassState specials;
  specials.key_capture.resize(w.config.n_layers);
  specials.value_capture.resize(w.config.n_layers);
  for (int l = 0; l < w.config.n_layers; ++l) {
    for (int i = n; i < n + t; ++i) {
      specials.key_capture[l].push_back(pass1.key_capture[l][static_cast<size_t>(i)]);
      specials.value_capture[l].push_back(pass1.value_capture[l][static_cast<size_t>(i)]);
    }
  }

  double total = oracle_detail::neg_log_prob(pass1.h.back(), w,
                                             seq.token_ids[static_cast<size_t>(n + t)]);
  if (m > 1) {
    std::vector<int> response_ids(seq.token_ids.begin() + n + t, seq.token_ids.begin() + n + t + m);
    oracle_detail::PassState pass2 = oracle_detail::run_pass(response_ids, n + t, w, &specials);
    for (int i = 0; i + 1 < m; ++i) {
      total += oracle_detail::neg_log_prob(pass2.h[static_cast<size_t>(i)], w,
                                           seq.token_ids[static_cast<size_t>(n + t + i + 1)]);
    }
  }
  return total / m;
}

// L = L_C + alpha * L_S.
inline Tensor combined_loss(const Tensor& contrastive, const Tensor& lm, const LossWeights& w) {
  w.validate();
  if (!std::isfinite(contrastive.item()) || !std::isfinite(lm.item())) {
    throw ContractError("combined_loss: non-finite input loss");
  }
  return add(contrastive, scale(lm, w.alpha));
}

}  // namespace convret
