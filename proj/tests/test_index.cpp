#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "convret/index.hpp"

using namespace convret;

namespace {

std::vector<double> random_unit(int dim, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(static_cast<size_t>(dim));
  double n = 0.0;
  for (double& x : v) {
    x = dist(rng);
    n += x * x;
  }
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

EmbeddingIndex random_index(int count, int dim, Rng& rng) {
  EmbeddingIndex index;
  index.dim = dim;
  for (int i = 0; i < count; ++i) {
    char pid[16];
    std::snprintf(pid, sizeof pid, "p%05d", i);
    index.add(pid, random_unit(dim, rng));
  }
  return index;
}

struct ModelFixture {
  Vocabulary vocab = Vocabulary::build({"steel iron alloy metal ore furnace forge anvil"}, 3);
  ModelWeights weights;
  ModelFixture() {
    ModelConfig cfg;
    cfg.vocab_size = vocab.size();
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.max_seq_len = 32;
    cfg.t_special = 3;
    Rng rng(55);
    weights = ModelWeights::init(cfg, rng);
  }
};

}  // namespace

TEST_CASE("build_index yields one unit vector per passage in corpus order") {
  ModelFixture fx;
  std::vector<Passage> corpus{{"a", "steel iron"}, {"b", "alloy metal"}, {"c", "ore furnace"}};
  EmbeddingIndex index = build_index(corpus, fx.weights, fx.vocab);
  REQUIRE(index.size() == 3);
  CHECK(index.pids == std::vector<std::string>{"a", "b", "c"});
  for (size_t i = 0; i < 3; ++i) {
    double n = 0.0;
    for (int c = 0; c < index.dim; ++c) n += static_cast<double>(index.vec(i)[c]) * index.vec(i)[c];
    CHECK(std::sqrt(n) == Catch::Approx(1.0).margin(1e-6));
  }

  EmbeddingIndex again = build_index(corpus, fx.weights, fx.vocab);
  CHECK(index.vectors == again.vectors);
  CHECK(index.encoder_hash == again.encoder_hash);
}

TEST_CASE("index metadata hash changes when the encoder changes") {
  ModelFixture fx;
  std::vector<Passage> corpus{{"a", "steel iron"}};
  EmbeddingIndex before = build_index(corpus, fx.weights, fx.vocab);
  fx.weights.tok_embed.values()[0] += 0.25;
  EmbeddingIndex after = build_index(corpus, fx.weights, fx.vocab);
  CHECK(before.encoder_hash != after.encoder_hash);
}

TEST_CASE("searching with a stored vector returns it at rank 1 with score 1") {
  Rng rng(1);
  EmbeddingIndex index = random_index(50, 8, rng);
  std::vector<double> q(index.vec(17), index.vec(17) + 8);
  double n = 0.0;
  for (double v : q) n += v * v;
  n = std::sqrt(n);
  for (double& v : q) v /= n;
  SearchResult r = search_topk(q, index, 5);
  REQUIRE(r.hits.size() == 5);
  CHECK(r.hits[0].pid == "p00017");
  CHECK(r.hits[0].rank == 1);
  CHECK(r.hits[0].score == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("k larger than the corpus returns everything, ranked") {
  Rng rng(2);
  EmbeddingIndex index = random_index(7, 4, rng);
  SearchResult r = search_topk(random_unit(4, rng), index, 50);
  REQUIRE(r.hits.size() == 7);
  for (size_t i = 0; i < r.hits.size(); ++i) {
    CHECK(r.hits[i].rank == static_cast<int>(i) + 1);
    if (i > 0) CHECK(r.hits[i].score <= r.hits[i - 1].score);
  }
}

TEST_CASE("search matches a full-sort oracle on 1000 random vectors") {
  Rng rng(3);
  EmbeddingIndex index = random_index(1000, 12, rng);
  for (int iter = 0; iter < 5; ++iter) {
    std::vector<double> q = random_unit(12, rng);
    SearchResult got = search_topk(q, index, 10);

    // oracle: score everything, full sort with the same tie-break
    std::vector<std::pair<double, std::string>> all;
    for (size_t i = 0; i < index.size(); ++i) {
      double norm = 0.0, dot = 0.0;
      for (int c = 0; c < 12; ++c) norm += static_cast<double>(index.vec(i)[c]) * index.vec(i)[c];
      norm = std::sqrt(norm);
      for (int c = 0; c < 12; ++c) dot += q[static_cast<size_t>(c)] * index.vec(i)[c] / norm;
      all.emplace_back(dot, index.pids[i]);
    }
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    REQUIRE(got.hits.size() == 10);
    for (size_t i = 0; i < 10; ++i) {
      CHECK(got.hits[i].pid == all[i].second);
      CHECK(got.hits[i].score == Catch::Approx(all[i].first).margin(1e-12));
    }
  }
}

TEST_CASE("cosine scores stay within [-1, 1]") {
  Rng rng(4);
  EmbeddingIndex index = random_index(200, 6, rng);
  for (int iter = 0; iter < 10; ++iter) {
    SearchResult r = search_topk(random_unit(6, rng), index, 200);
    for (const SearchHit& h : r.hits) {
      CHECK(h.score <= 1.0 + 1e-9);
      CHECK(h.score >= -1.0 - 1e-9);
    }
  }
}

TEST_CASE("search rejects dimension mismatches and bad k") {
  Rng rng(5);
  EmbeddingIndex index = random_index(10, 8, rng);
  CHECK_THROWS_AS(search_topk(random_unit(4, rng), index, 3), ContractError);
  CHECK_THROWS_AS(search_topk(random_unit(8, rng), index, 0), ContractError);
}

TEST_CASE("index round-trip is bit-exact and search-identical") {
  Rng rng(6);
  EmbeddingIndex index = random_index(64, 8, rng);
  index.encoder_hash = 0xdeadbeefcafef00dull;
  auto path = (std::filesystem::temp_directory_path() / "convret_index_test.csix").string();
  save_index(index, path);
  EmbeddingIndex loaded = load_index(path);

  CHECK(loaded.dim == index.dim);
  CHECK(loaded.pids == index.pids);
  CHECK(loaded.encoder_hash == index.encoder_hash);
  CHECK(loaded.build_timestamp == index.build_timestamp);
  REQUIRE(loaded.vectors.size() == index.vectors.size());
  CHECK(std::memcmp(loaded.vectors.data(), index.vectors.data(),
                    index.vectors.size() * sizeof(float)) == 0);

  std::vector<double> q = random_unit(8, rng);
  SearchResult a = search_topk(q, index, 12);
  SearchResult b = search_topk(q, loaded, 12);
  REQUIRE(a.hits.size() == b.hits.size());
  for (size_t i = 0; i < a.hits.size(); ++i) {
    CHECK(a.hits[i].pid == b.hits[i].pid);
    CHECK(a.hits[i].score == b.hits[i].score);
  }
  std::filesystem::remove(path);
}

TEST_CASE("corrupted index files produce structured errors") {
  auto dir = std::filesystem::temp_directory_path();
  Rng rng(7);
  EmbeddingIndex index = random_index(8, 4, rng);
  auto path = (dir / "convret_index_corrupt.csix").string();
  save_index(index, path);

  const auto full = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, full - 6);
  CHECK_THROWS_AS(load_index(path), FormatError);

  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "JUNKdata";
  }
  CHECK_THROWS_AS(load_index(path), VersionError);
  std::filesystem::remove(path);
}

TEST_CASE("permuted corpora give identical search results") {
  ModelFixture fx;
  std::vector<Passage> corpus{
      {"a", "steel iron"}, {"b", "alloy metal"}, {"c", "ore furnace"}, {"d", "forge anvil"}};
  EmbeddingIndex i1 = build_index(corpus, fx.weights, fx.vocab);
  std::reverse(corpus.begin(), corpus.end());
  EmbeddingIndex i2 = build_index(corpus, fx.weights, fx.vocab);

  Rng rng(8);
  std::vector<double> q = random_unit(fx.weights.config.d_model, rng);
  SearchResult a = search_topk(q, i1, 4);
  SearchResult b = search_topk(q, i2, 4);
  REQUIRE(a.hits.size() == b.hits.size());
  for (size_t i = 0; i < a.hits.size(); ++i) {
    CHECK(a.hits[i].pid == b.hits[i].pid);
    CHECK(a.hits[i].score == Catch::Approx(b.hits[i].score).margin(1e-12));
  }
}

TEST_CASE("build_index rejects empty corpora and duplicate pids") {
  ModelFixture fx;
  CHECK_THROWS_AS(build_index({}, fx.weights, fx.vocab), ContractError);
  std::vector<Passage> dup{{"a", "steel"}, {"a", "iron"}};
  CHECK_THROWS_WITH(build_index(dup, fx.weights, fx.vocab),
                    Catch::Matchers::ContainsSubstring("'a'"));
}
