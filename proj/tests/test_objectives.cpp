#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "convret/objectives.hpp"

using namespace convret;

namespace {

Tensor unit_vec(std::vector<double> v) {
  const int dim = static_cast<int>(v.size());
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return Tensor({dim}, std::move(v));
}

ModelWeights tiny_model(int vocab, int layers, int t, uint64_t seed) {
  ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.d_model = 16;
  cfg.n_layers = layers;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.max_seq_len = 96;
  cfg.t_special = t;
  Rng rng(seed);
  return ModelWeights::init(cfg, rng);
}

PackedSequence random_packed(int n, int t, int m, int vocab, Rng& rng) {
  PackedSequence seq;
  seq.n_session = n;
  seq.n_response = m;
  seq.t_special = t;
  for (int i = 0; i < n + t + m + t; ++i) {
    seq.token_ids.push_back(static_cast<int>(bounded(rng, static_cast<size_t>(vocab))));
  }
  for (int i = 0; i < n; ++i) seq.segment_map.push_back(Segment::session);
  for (int i = 0; i < t; ++i) seq.segment_map.push_back(Segment::session_special);
  for (int i = 0; i < m; ++i) seq.segment_map.push_back(Segment::response);
  for (int i = 0; i < t; ++i) seq.segment_map.push_back(Segment::response_special);
  return seq;
}

// Orthonormal basis vectors give exact control over pairwise cosines.
Tensor basis(int dim, int axis) {
  Tensor t({dim}, 0.0);
  t.values()[static_cast<size_t>(axis)] = 1.0;
  return t;
}

}  // namespace

TEST_CASE("score_phi closed forms") {
  std::vector<double> e1{1.0, 0.0, 0.0};
  std::vector<double> e2{0.0, 1.0, 0.0};
  CHECK(score_phi(e1, e1, 1.0) == Catch::Approx(std::exp(1.0)).margin(1e-12));
  CHECK(score_phi(e1, e2, 1.0) == Catch::Approx(1.0).margin(1e-12));

  // cosine 0.5 at tau 0.1 -> e^5
  std::vector<double> a{1.0, 0.0, 0.0};
  std::vector<double> b{0.5, std::sqrt(3.0) / 2.0, 0.0};
  CHECK(score_phi(a, b, 0.1) == Catch::Approx(std::exp(5.0)).margin(1e-9));

  std::vector<double> zero{0.0, 0.0, 0.0};
  CHECK_THROWS_AS(score_phi(e1, zero, 1.0), ContractError);
}

TEST_CASE("contrastive loss: uniform scores give ln(K+1)") {
  // positive and all negatives orthogonal to the query: every cosine is 0
  Tensor e_x = basis(8, 0);
  Tensor e_pos = basis(8, 1);
  std::vector<Tensor> negs{basis(8, 2), basis(8, 3), basis(8, 4), basis(8, 5)};
  ContrastiveConfig cfg;
  cfg.temperature = 0.05;
  Tensor loss = contrastive_loss(e_x, e_pos, negs, cfg);
  CHECK(loss.item() == Catch::Approx(std::log(5.0)).margin(1e-15));
}

TEST_CASE("contrastive loss: cosines (1; 0, 0) at tau=1 give ln(1 + 2/e)") {
  Tensor e_x = basis(4, 0);
  Tensor e_pos = basis(4, 0);
  std::vector<Tensor> negs{basis(4, 1), basis(4, 2)};
  ContrastiveConfig cfg;
  cfg.temperature = 1.0;
  Tensor loss = contrastive_loss(e_x, e_pos, negs, cfg);
  CHECK(loss.item() == Catch::Approx(std::log(1.0 + 2.0 * std::exp(-1.0))).margin(1e-9));
  CHECK(loss.item() == Catch::Approx(0.551445).margin(1e-6));
}

TEST_CASE("contrastive loss: vanishing temperature with a dominant positive") {
  Tensor e_x = unit_vec({1, 0.1, 0});
  Tensor e_pos = unit_vec({1, 0.12, 0});
  std::vector<Tensor> negs{unit_vec({0, 1, 0.4}), unit_vec({0.1, -1, 0})};
  ContrastiveConfig cfg;
  cfg.temperature = 1e-4;
  Tensor loss = contrastive_loss(e_x, e_pos, negs, cfg);
  CHECK(loss.item() >= 0.0);
  CHECK(loss.item() < 1e-9);
}

TEST_CASE("contrastive loss: permutation of negatives is value-invariant") {
  Rng rng(5);
  Tensor e_x = l2_normalize(randn({8}, rng));
  Tensor e_pos = l2_normalize(randn({8}, rng));
  std::vector<Tensor> negs;
  for (int i = 0; i < 5; ++i) negs.push_back(l2_normalize(randn({8}, rng)));
  ContrastiveConfig cfg;
  Tensor l1 = contrastive_loss(e_x, e_pos, negs, cfg);
  std::reverse(negs.begin(), negs.end());
  std::swap(negs[1], negs[3]);
  Tensor l2 = contrastive_loss(e_x, e_pos, negs, cfg);
  CHECK(l1.item() == Catch::Approx(l2.item()).margin(1e-12));
}

TEST_CASE("contrastive loss strictly decreases as the positive cosine rises") {
  Rng rng(6);
  std::vector<Tensor> negs;
  for (int i = 0; i < 4; ++i) negs.push_back(l2_normalize(randn({8}, rng)));
  ContrastiveConfig cfg;
  Tensor e_x = basis(8, 0);
  double prev = std::numeric_limits<double>::infinity();
  for (double c : {-0.5, 0.0, 0.4, 0.8, 0.99}) {
    Tensor e_pos = unit_vec({c, std::sqrt(1.0 - c * c), 0, 0, 0, 0, 0, 0});
    double cur = contrastive_loss(e_x, e_pos, negs, cfg).item();
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("contrastive loss requires at least one negative") {
  Tensor e_x = basis(4, 0);
  CHECK_THROWS_AS(contrastive_loss(e_x, e_x, {}, ContrastiveConfig{}), ContractError);
}

TEST_CASE("masked LM loss with a zeroed output projection is exactly ln V") {
  ModelWeights w = tiny_model(64, 2, 3, 11);
  std::fill(w.w_out.values().begin(), w.w_out.values().end(), 0.0);
  Rng rng(3);
  auto seq = random_packed(4, 3, 5, 64, rng);
  Tensor loss = session_masked_lm_loss(seq, w);
  CHECK(loss.item() == Catch::Approx(std::log(64.0)).margin(1e-12));
}

TEST_CASE("masked LM loss with M=1 is a single-token cross entropy") {
  ModelWeights w = tiny_model(32, 2, 2, 13);
  Rng rng(4);
  auto seq = random_packed(3, 2, 1, 32, rng);
  Tensor loss = session_masked_lm_loss(seq, w);

  AttentionMask mask = build_session_mask(seq);
  Tensor hidden = encoder_forward(seq.token_ids, mask, w);
  const int pred_row = seq.n_session + seq.t_special - 1;
  Tensor logits = lm_logits(hidden, {pred_row}, w);
  Tensor expect = cross_entropy_with_logits(logits, {seq.token_ids[static_cast<size_t>(
                                                 seq.n_session + seq.t_special)]});
  CHECK(loss.item() == Catch::Approx(expect.item()).margin(1e-15));
}

TEST_CASE("masked LM loss rejects sequences without response tokens") {
  ModelWeights w = tiny_model(32, 1, 2, 17);
  PackedSequence seq;
  seq.n_session = 2;
  seq.n_response = 0;
  seq.t_special = 2;
  seq.token_ids = {1, 2, 5, 6, 5, 6};
  seq.segment_map = {Segment::session,         Segment::session,
                     Segment::session_special, Segment::session_special,
                     Segment::response_special, Segment::response_special};
  CHECK_THROWS_AS(session_masked_lm_loss(seq, w), ContractError);
}

TEST_CASE("masked LM loss equals the two-pass oracle across random configurations") {
  Rng rng(21);
  double max_diff = 0.0;
  for (int iter = 0; iter < 30; ++iter) {
    const int layers = 1 + static_cast<int>(bounded(rng, 3));
    const int t = 1 + static_cast<int>(bounded(rng, 3));
    const int n = 1 + static_cast<int>(bounded(rng, 16));
    const int m = 1 + static_cast<int>(bounded(rng, 16));
    ModelWeights w = tiny_model(48, layers, t, 1000 + iter);
    auto seq = random_packed(n, t, m, 48, rng);
    const double impl = session_masked_lm_loss(seq, w).item();
    const double orc = two_pass_lm_loss_oracle(seq, w);
    max_diff = std::max(max_diff, std::abs(impl - orc));
    CHECK(std::abs(impl - orc) < 1e-5);
  }
  INFO("max |impl - oracle| = " << max_diff);
  CHECK(max_diff < 1e-5);
}

TEST_CASE("vanilla (causal) LM mode differs from the session-masked mode") {
  ModelWeights w = tiny_model(48, 2, 3, 23);
  Rng rng(8);
  auto seq = random_packed(6, 3, 6, 48, rng);
  const double masked = session_masked_lm_loss(seq, w, LmMaskMode::session_masked).item();
  const double vanilla = session_masked_lm_loss(seq, w, LmMaskMode::causal).item();
  CHECK(masked != vanilla);
}

TEST_CASE("replacing a session token changes the oracle through the anchors") {
  ModelWeights w = tiny_model(48, 2, 2, 29);
  Rng rng(9);
  auto seq = random_packed(5, 2, 4, 48, rng);
  const double before = two_pass_lm_loss_oracle(seq, w);
  auto altered = seq;
  altered.token_ids[2] = (altered.token_ids[2] + 7) % 48;
  const double after = two_pass_lm_loss_oracle(altered, w);
  CHECK(before != after);
}

TEST_CASE("different special-token counts give different losses in general") {
  Rng rng(10);
  bool any_differ = false;
  for (int iter = 0; iter < 3; ++iter) {
    ModelWeights w1 = tiny_model(48, 2, 1, 31 + iter);
    ModelWeights w3 = tiny_model(48, 2, 3, 31 + iter);
    std::vector<int> body;
    for (int i = 0; i < 10; ++i) body.push_back(static_cast<int>(bounded(rng, 40)));
    auto build = [&](int t) {
      PackedSequence seq;
      seq.n_session = 5;
      seq.n_response = 5;
      seq.t_special = t;
      for (int i = 0; i < 5; ++i) seq.token_ids.push_back(body[static_cast<size_t>(i)]);
      for (int i = 0; i < t; ++i) seq.token_ids.push_back(5 + i);
      for (int i = 5; i < 10; ++i) seq.token_ids.push_back(body[static_cast<size_t>(i)]);
      for (int i = 0; i < t; ++i) seq.token_ids.push_back(5 + i);
      for (int i = 0; i < 5; ++i) seq.segment_map.push_back(Segment::session);
      for (int i = 0; i < t; ++i) seq.segment_map.push_back(Segment::session_special);
      for (int i = 0; i < 5; ++i) seq.segment_map.push_back(Segment::response);
      for (int i = 0; i < t; ++i) seq.segment_map.push_back(Segment::response_special);
      return seq;
    };
    const double l1 = session_masked_lm_loss(build(1), w1).item();
    const double l3 = session_masked_lm_loss(build(3), w3).item();
    any_differ = any_differ || l1 != l3;
  }
  CHECK(any_differ);
}

TEST_CASE("combined loss arithmetic and the alpha=0 ablation") {
  Tensor lc = Tensor::scalar(1.0);
  Tensor ls = Tensor::scalar(2.0);
  CHECK(combined_loss(lc, ls, LossWeights{1.0}).item() == 3.0);

  Tensor lc2 = Tensor::scalar(0.7312938471);
  CHECK(combined_loss(lc2, ls, LossWeights{0.0}).item() == lc2.item());

  CHECK_THROWS_AS(combined_loss(Tensor::scalar(std::nan("")), ls, LossWeights{1.0}), ContractError);
  CHECK_THROWS_AS(LossWeights{-0.5}.validate(), ConfigError);
}

TEST_CASE("combined loss gradient is grad(L_C) + alpha * grad(L_S)") {
  const double alpha = 0.75;
  ModelWeights w = tiny_model(32, 1, 2, 37);
  Rng rng(12);
  auto seq = random_packed(3, 2, 3, 32, rng);
  Vocabulary vocab(2);
  while (vocab.size() < 32) vocab.add_word("w" + std::to_string(vocab.size()));

  auto session_ids = [&] {
    std::vector<int> ids(seq.token_ids.begin(), seq.token_ids.begin() + seq.n_session);
    for (int i = 0; i < 2; ++i) ids.push_back(vocab.emb_id(i));
    return ids;
  }();
  std::vector<int> pos_ids{9, 8, vocab.emb_id(0), vocab.emb_id(1)};
  std::vector<int> neg_ids{7, 6, vocab.emb_id(0), vocab.emb_id(1)};

  auto build_losses = [&] {
    Tensor e_x = embed_text_t(session_ids, w, vocab);
    Tensor e_pos = embed_text_t(pos_ids, w, vocab);
    Tensor e_neg = embed_text_t(neg_ids, w, vocab);
    Tensor lc = contrastive_loss(e_x, e_pos, {e_neg}, ContrastiveConfig{});
    Tensor ls = session_masked_lm_loss(seq, w);
    return std::pair{lc, ls};
  };

  // combined backward
  auto [lc, ls] = build_losses();
  backward(combined_loss(lc, ls, LossWeights{alpha}));
  std::vector<std::vector<double>> combined_grads;
  for (Tensor p : w.parameters()) {
    combined_grads.push_back(p.grad());
    p.zero_grad();
  }

  // separate backwards, manually mixed
  auto [lc2, ls2] = build_losses();
  backward(lc2);
  std::vector<std::vector<double>> lc_grads;
  for (Tensor p : w.parameters()) {
    lc_grads.push_back(p.grad());
    p.zero_grad();
  }
  backward(ls2);
  auto params = w.parameters();
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& gs = params[i].grad();
    for (size_t j = 0; j < gs.size(); ++j) {
      const double expect = lc_grads[i][j] + alpha * gs[j];
      CHECK(combined_grads[i][j] == Catch::Approx(expect).margin(1e-10));
    }
  }
}

TEST_CASE("losses are non-negative") {
  Rng rng(14);
  for (int iter = 0; iter < 5; ++iter) {
    ModelWeights w = tiny_model(32, 1, 2, 41 + iter);
    auto seq = random_packed(4, 2, 4, 32, rng);
    CHECK(session_masked_lm_loss(seq, w).item() >= 0.0);
    Tensor e_x = l2_normalize(randn({8}, rng));
    Tensor e_pos = l2_normalize(randn({8}, rng));
    std::vector<Tensor> negs{l2_normalize(randn({8}, rng))};
    CHECK(contrastive_loss(e_x, e_pos, negs, ContrastiveConfig{}).item() >= 0.0);
  }
}
