#pragma once

#include <algorithm>
#include <chrono>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "convret/common.hpp"
#include "convret/model.hpp"
#include "convret/text.hpp"

namespace convret {

// Flat store of unit vectors. Storage is 32-bit; scoring widens to 64-bit
// against a renormalized copy so cosines stay in [-1, 1].
struct EmbeddingIndex {
  int dim = 0;
  std::vector<std::string> pids;
  std::vector<float> vectors;     // pids.size() * dim, row-major
  uint64_t encoder_hash = 0;
  uint64_t build_timestamp = 0;   // unix seconds

  size_t size() const { return pids.size(); }

  const float* vec(size_t i) const { return vectors.data() + i * static_cast<size_t>(dim); }

  void add(const std::string& pid, const std::vector<double>& v) {
    if (dim == 0) dim = static_cast<int>(v.size());
    if (static_cast<int>(v.size()) != dim) throw DimError("EmbeddingIndex: dimension mismatch");
    pids.push_back(pid);
    for (double x : v) vectors.push_back(static_cast<float>(x));
  }
};

struct SearchHit {
  std::string pid;
  double score = 0.0;  // cosine
  int rank = 0;        // 1-based
};

struct SearchResult {
  std::vector<SearchHit> hits;
};

inline EmbeddingIndex build_index(const std::vector<Passage>& corpus, const ModelWeights& weights,
                                  const Vocabulary& vocab) {
  if (corpus.empty()) throw ContractError("build_index: empty corpus");
  EmbeddingIndex index;
  index.dim = weights.config.d_model;
  index.encoder_hash = weights.hash();
  index.build_timestamp = static_cast<uint64_t>(
      std::chrono::duration_cast<std::chrono::seconds>(
          std::chrono::system_clock::now().time_since_epoch())
          .count());
  std::unordered_set<std::string> seen;
  for (const Passage& p : corpus) {
    if (!seen.insert(p.pid).second) throw FormatError("build_index: duplicate pid '" + p.pid + "'");
    try {
      index.add(p.pid, embed_text(format_passage(p.text, vocab, weights.config.max_seq_len),
                                  weights, vocab));
    } catch (const std::exception& e) {
      throw FormatError("build_index: failed to encode pid '" + p.pid + "': " + e.what());
    }
  }
  return index;
}

// Exact top-k scan by inner product over widened, renormalized vectors.
// Ties break by ascending pid, so results are independent of corpus order.
inline SearchResult search_topk(const std::vector<double>& query, const EmbeddingIndex& index,
                                int k) {
  if (k < 1) throw ContractError("search_topk: k must be >= 1");
  if (static_cast<int>(query.size()) != index.dim) {
    throw ContractError("search_topk: query dimension mismatch");
  }
  struct Scored {
    double score;
    size_t i;
  };
  std::vector<Scored> scored;
  scored.reserve(index.size());
  std::vector<double> widened(static_cast<size_t>(index.dim));
  for (size_t i = 0; i < index.size(); ++i) {
    const float* v = index.vec(i);
    double norm = 0.0;
    for (int c = 0; c < index.dim; ++c) {
      widened[static_cast<size_t>(c)] = static_cast<double>(v[c]);
      norm += widened[static_cast<size_t>(c)] * widened[static_cast<size_t>(c)];
    }
    norm = std::sqrt(norm);
    double score = 0.0;
    if (norm > 0.0) {
      for (int c = 0; c < index.dim; ++c) score += query[static_cast<size_t>(c)] * widened[static_cast<size_t>(c)] / norm;
    }
    scored.push_back({score, i});
  }
  const size_t take = std::min(static_cast<size_t>(k), scored.size());
  auto better = [&](const Scored& a, const Scored& b) {
    if (a.score != b.score) return a.score > b.score;
    return index.pids[a.i] < index.pids[b.i];
  };
  std::partial_sort(scored.begin(), scored.begin() + static_cast<ptrdiff_t>(take), scored.end(),
                    better);
  SearchResult out;
  out.hits.reserve(take);
  for (size_t r = 0; r < take; ++r) {
    out.hits.push_back({index.pids[scored[r].i], scored[r].score, static_cast<int>(r) + 1});
  }
  return out;
}

// ---- index file -----------------------------------------------------------
//
// magic "CSIX", u32 version, u32 dim, u64 count, u64 encoder hash,
// u64 build timestamp, pid string table, then float32 LE vectors.

namespace csix {
constexpr char kMagic[4] = {'C', 'S', 'I', 'X'};
constexpr uint32_t kVersion = 1;
}  // namespace csix

inline void save_index(const EmbeddingIndex& index, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open index for writing: '" + path + "'");
  ckpt::write_bytes(out, csix::kMagic, 4);
  ckpt::write_pod<uint32_t>(out, csix::kVersion);
  ckpt::write_pod<uint32_t>(out, static_cast<uint32_t>(index.dim));
  ckpt::write_pod<uint64_t>(out, index.size());
  ckpt::write_pod<uint64_t>(out, index.encoder_hash);
  ckpt::write_pod<uint64_t>(out, index.build_timestamp);
  for (const std::string& pid : index.pids) ckpt::write_string(out, pid);
  for (float v : index.vectors) ckpt::write_pod<float>(out, v);
  if (!out) throw FormatError("index write failed: '" + path + "'");
}

inline EmbeddingIndex load_index(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open index: '" + path + "'");
  char magic[4];
  ckpt::read_bytes(in, magic, 4);
  if (std::memcmp(magic, csix::kMagic, 4) != 0) {
    throw VersionError("index: bad magic (not a CSIX index): '" + path + "'");
  }
  const auto version = ckpt::read_pod<uint32_t>(in);
  if (version != csix::kVersion) {
    throw VersionError("index: incompatible format version " + std::to_string(version));
  }
  EmbeddingIndex index;
  index.dim = static_cast<int>(ckpt::read_pod<uint32_t>(in));
  const auto count = ckpt::read_pod<uint64_t>(in);
  index.encoder_hash = ckpt::read_pod<uint64_t>(in);
  index.build_timestamp = ckpt::read_pod<uint64_t>(in);
  if (index.dim < 1 || count > (1ull << 32)) throw FormatError("index: implausible header");
  index.pids.reserve(count);
  for (uint64_t i = 0; i < count; ++i) index.pids.push_back(ckpt::read_string(in));
  index.vectors.resize(count * static_cast<uint64_t>(index.dim));
  for (float& v : index.vectors) v = ckpt::read_pod<float>(in);
  char probe;
  if (in.read(&probe, 1)) throw FormatError("index: trailing bytes after vector data");
  return index;
}

}  // namespace convret
