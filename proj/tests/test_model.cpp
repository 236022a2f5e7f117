#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "convret/model.hpp"

using namespace convret;

namespace {

// Hand-assembled packed sequence; ids only need to be in-vocab.
PackedSequence make_packed(int n, int t, int m, int base_id = 10) {
  PackedSequence seq;
  seq.n_session = n;
  seq.n_response = m;
  seq.t_special = t;
  for (int i = 0; i < n + t + m + t; ++i) seq.token_ids.push_back(base_id + (i % 5));
  for (int i = 0; i < n; ++i) seq.segment_map.push_back(Segment::session);
  for (int i = 0; i < t; ++i) seq.segment_map.push_back(Segment::session_special);
  for (int i = 0; i < m; ++i) seq.segment_map.push_back(Segment::response);
  for (int i = 0; i < t; ++i) seq.segment_map.push_back(Segment::response_special);
  return seq;
}

ModelWeights small_model(int vocab = 32, int layers = 2, uint64_t seed = 1234) {
  ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.d_model = 16;
  cfg.n_layers = layers;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.max_seq_len = 64;
  cfg.t_special = 3;
  Rng rng(seed);
  return ModelWeights::init(cfg, rng);
}

std::vector<int> allowed_cols(const AttentionMask& m, int row) {
  std::vector<int> out;
  for (int j = 0; j < m.length; ++j) {
    if (m.allowed(row, j)) out.push_back(j);
  }
  return out;
}

}  // namespace

TEST_CASE("causal mask basics") {
  AttentionMask m1 = build_causal_mask(1);
  CHECK(m1.additive.values() == std::vector<double>{0.0});

  AttentionMask m3 = build_causal_mask(3);
  CHECK(allowed_cols(m3, 2) == std::vector<int>{0, 1, 2});

  Rng rng(2);
  const int len = 2 + static_cast<int>(bounded(rng, 10));
  AttentionMask m = build_causal_mask(len);
  for (int i = 0; i < len; ++i) {
    std::vector<int> expect;
    for (int j = 0; j <= i; ++j) expect.push_back(j);
    CHECK(allowed_cols(m, i) == expect);
  }
}

TEST_CASE("session mask: worked enumeration for N=2, t=2, M=1") {
  auto seq = make_packed(2, 2, 1);
  AttentionMask m = build_session_mask(seq);
  REQUIRE(m.length == 7);
  CHECK(allowed_cols(m, 3) == std::vector<int>{0, 1, 2, 3});
  CHECK(allowed_cols(m, 4) == std::vector<int>{2, 3, 4});
  CHECK(allowed_cols(m, 5) == std::vector<int>{2, 3, 4, 5});
  CHECK(allowed_cols(m, 6) == std::vector<int>{2, 3, 4, 5, 6});
}

TEST_CASE("session mask: response rows never see raw session columns") {
  Rng rng(7);
  for (int iter = 0; iter < 40; ++iter) {
    const int n = 1 + static_cast<int>(bounded(rng, 8));
    const int t = 1 + static_cast<int>(bounded(rng, 3));
    const int m = 1 + static_cast<int>(bounded(rng, 8));
    auto seq = make_packed(n, t, m);
    AttentionMask mask = build_session_mask(seq);
    for (int i = n + t; i < mask.length; ++i) {
      for (int j = 0; j < n; ++j) CHECK_FALSE(mask.allowed(i, j));
      // session specials and own causal prefix stay open
      CHECK(mask.allowed(i, n));
      CHECK(mask.allowed(i, i));
      for (int j = i + 1; j < mask.length; ++j) CHECK_FALSE(mask.allowed(i, j));
    }
    // session region stays causal
    for (int i = 0; i < n + t; ++i) {
      std::vector<int> expect;
      for (int j = 0; j <= i; ++j) expect.push_back(j);
      CHECK(allowed_cols(mask, i) == expect);
    }
  }
}

TEST_CASE("forward shapes and determinism") {
  ModelWeights w = small_model();
  std::vector<int> ids{5};
  auto [hidden, logits] = forward_with_logits(ids, build_causal_mask(1), w);
  CHECK(hidden.shape() == Shape{1, 16});
  CHECK(logits.shape() == Shape{1, 32});

  std::vector<int> longer{3, 7, 7, 1, 0};
  Tensor h1 = encoder_forward(longer, build_causal_mask(5), w);
  Tensor h2 = encoder_forward(longer, build_causal_mask(5), w);
  CHECK(h1.values() == h2.values());
}

TEST_CASE("forward rejects oversize input and bad ids") {
  ModelWeights w = small_model();
  std::vector<int> too_long(w.config.max_seq_len + 1, 1);
  CHECK_THROWS_AS(encoder_forward(too_long, build_causal_mask(static_cast<int>(too_long.size())), w),
                  ContractError);
  std::vector<int> bad{1, 99};
  CHECK_THROWS_AS(encoder_forward(bad, build_causal_mask(2), w), std::out_of_range);
}

TEST_CASE("attention probabilities are exactly zero wherever the mask forbids") {
  Rng rng(11);
  ModelWeights w = small_model();
  for (int iter = 0; iter < 10; ++iter) {
    const int n = 1 + static_cast<int>(bounded(rng, 5));
    const int t = 1 + static_cast<int>(bounded(rng, 3));
    const int m = 1 + static_cast<int>(bounded(rng, 5));
    auto seq = make_packed(n, t, m);
    AttentionMask mask = build_session_mask(seq);
    ForwardTrace trace;
    encoder_forward(seq.token_ids, mask, w, &trace);
    REQUIRE(trace.attention.size() == static_cast<size_t>(w.config.n_layers));
    for (const auto& layer : trace.attention) {
      REQUIRE(layer.size() == static_cast<size_t>(w.config.n_heads));
      for (const Tensor& probs : layer) {
        for (int i = 0; i < mask.length; ++i) {
          double row_sum = 0.0;
          for (int j = 0; j < mask.length; ++j) {
            if (!mask.allowed(i, j)) CHECK(probs.at(i, j) == 0.0);
            row_sum += probs.at(i, j);
          }
          CHECK(row_sum == Catch::Approx(1.0).margin(1e-9));
        }
      }
    }
  }
}

TEST_CASE("causality probe: perturbing token j leaves earlier states bitwise unchanged") {
  ModelWeights w = small_model();
  std::vector<int> ids{4, 9, 2, 6, 8};
  AttentionMask mask = build_causal_mask(5);
  Tensor before = encoder_forward(ids, mask, w);

  const int j = 3;
  std::vector<int> perturbed = ids;
  perturbed[j] = 17;
  Tensor after = encoder_forward(perturbed, mask, w);
  const int d = w.config.d_model;
  for (int i = 0; i < j; ++i) {
    for (int c = 0; c < d; ++c) CHECK(before.at(i, c) == after.at(i, c));
  }
}

TEST_CASE("single-layer session mask: response states ignore raw session token changes") {
  ModelWeights w = small_model(32, 1);
  auto seq = make_packed(3, 2, 2, 10);
  // ensure a session-only token id so the perturbation cannot leak elsewhere
  seq.token_ids[1] = 25;
  AttentionMask mask = build_session_mask(seq);
  Tensor before = encoder_forward(seq.token_ids, mask, w);

  for (double& v : w.tok_embed.values()) (void)v;
  const int d = w.config.d_model;
  for (int c = 0; c < d; ++c) w.tok_embed.at(25, c) += 3.14159;
  Tensor after = encoder_forward(seq.token_ids, mask, w);

  for (int i = seq.n_session + seq.t_special; i < seq.length(); ++i) {
    for (int c = 0; c < d; ++c) CHECK(before.at(i, c) == after.at(i, c));
  }
  // while the anchor states themselves do change
  bool anchors_changed = false;
  for (int i = seq.n_session; i < seq.n_session + seq.t_special; ++i) {
    for (int c = 0; c < d; ++c) anchors_changed |= before.at(i, c) != after.at(i, c);
  }
  CHECK(anchors_changed);
}

TEST_CASE("embed_text is unit-norm, deterministic, and checks the trailing markers") {
  ModelWeights w = small_model();
  Vocabulary vocab = Vocabulary::build({"alpha beta gamma delta"}, 3);
  ModelConfig cfg = w.config;
  cfg.vocab_size = vocab.size();
  Rng rng(5);
  ModelWeights wv = ModelWeights::init(cfg, rng);

  auto ids = format_passage("alpha beta", vocab);
  auto e1 = embed_text(ids, wv, vocab);
  auto e2 = embed_text(ids, wv, vocab);
  CHECK(e1 == e2);
  double n = 0.0;
  for (double v : e1) n += v * v;
  CHECK(std::sqrt(n) == Catch::Approx(1.0).margin(1e-9));

  auto other = embed_text(format_passage("gamma delta", vocab), wv, vocab);
  double cos = 0.0;
  for (size_t i = 0; i < e1.size(); ++i) cos += e1[i] * other[i];
  CHECK(cos < 1.0);

  std::vector<int> nospecials = tokenize("alpha beta", vocab);
  CHECK_THROWS_AS(embed_text(nospecials, wv, vocab), ContractError);
}

TEST_CASE("anchors are the rows at positions N..N+t-1, bitwise") {
  ModelWeights w = small_model();
  auto seq = make_packed(4, 3, 2);
  Tensor hidden = encoder_forward(seq.token_ids, build_session_mask(seq), w);
  SessionAnchor anchors = extract_session_anchors(seq, hidden);
  REQUIRE(anchors.states.shape() == Shape{3, 16});
  for (int i = 0; i < 3; ++i) {
    for (int c = 0; c < 16; ++c) {
      CHECK(anchors.states.at(i, c) == hidden.at(seq.n_session + i, c));
    }
  }

  auto seq1 = make_packed(2, 1, 2);
  Tensor h1 = encoder_forward(seq1.token_ids, build_session_mask(seq1), w);
  SessionAnchor a1 = extract_session_anchors(seq1, h1);
  CHECK(a1.states.shape() == Shape{1, 16});
  for (int c = 0; c < 16; ++c) CHECK(a1.states.at(0, c) == h1.at(2, c));
}

TEST_CASE("checkpoint round-trips weights bitwise") {
  Vocabulary vocab = Vocabulary::build({"alpha beta gamma delta epsilon"}, 3);
  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.max_seq_len = 64;
  cfg.t_special = 3;
  Rng rng(77);
  ModelWeights w = ModelWeights::init(cfg, rng);

  auto path = (std::filesystem::temp_directory_path() / "convret_ckpt_test.csit").string();
  save_model_checkpoint(w, vocab, path);
  LoadedCheckpoint loaded = load_model_checkpoint(path);

  CHECK(loaded.weights.config == cfg);
  CHECK(loaded.vocab.size() == vocab.size());
  auto a = w.named_parameters();
  auto b = loaded.weights.named_parameters();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second.values() == b[i].second.values());
  }
  CHECK(loaded.weights.hash() == w.hash());
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint loader rejects bad magic, bad version, and truncation") {
  auto dir = std::filesystem::temp_directory_path();
  auto bad = (dir / "convret_bad_magic.csit").string();
  {
    std::ofstream outf(bad, std::ios::binary);
    outf << "NOPEnothing";
  }
  CHECK_THROWS_AS(load_model_checkpoint(bad), VersionError);
  std::filesystem::remove(bad);

  Vocabulary vocab = Vocabulary::build({"alpha beta"}, 2);
  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.max_seq_len = 32;
  cfg.t_special = 2;
  Rng rng(3);
  ModelWeights w = ModelWeights::init(cfg, rng);
  auto good = (dir / "convret_trunc.csit").string();
  save_model_checkpoint(w, vocab, good);

  // flip the version field
  {
    std::fstream f(good, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(4);
    uint32_t v = 9999;
    f.write(reinterpret_cast<const char*>(&v), 4);
  }
  CHECK_THROWS_AS(load_model_checkpoint(good), VersionError);

  save_model_checkpoint(w, vocab, good);
  const auto full = std::filesystem::file_size(good);
  std::filesystem::resize_file(good, full / 2);
  CHECK_THROWS_AS(load_model_checkpoint(good), FormatError);
  std::filesystem::remove(good);
}

TEST_CASE("dropout: zero by default, deterministic under a fixed rng, off at eval") {
  ModelConfig cfg;
  cfg.vocab_size = 16;
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.max_seq_len = 16;
  cfg.t_special = 1;
  cfg.dropout = 0.5;
  Rng rng(9);
  ModelWeights w = ModelWeights::init(cfg, rng);
  std::vector<int> ids{1, 2, 3};
  AttentionMask mask = build_causal_mask(3);

  Tensor eval1 = encoder_forward(ids, mask, w);
  Tensor eval2 = encoder_forward(ids, mask, w);
  CHECK(eval1.values() == eval2.values());

  Rng d1(42), d2(42), d3(43);
  Tensor t1 = encoder_forward(ids, mask, w, nullptr, &d1);
  Tensor t2 = encoder_forward(ids, mask, w, nullptr, &d2);
  Tensor t3 = encoder_forward(ids, mask, w, nullptr, &d3);
  CHECK(t1.values() == t2.values());
  CHECK(t1.values() != t3.values());
  CHECK(t1.values() != eval1.values());
}
