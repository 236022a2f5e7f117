#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "convret/common.hpp"
#include "convret/tensor.hpp"
#include "convret/text.hpp"

namespace convret {

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 256;
  int max_seq_len = 256;
  int t_special = 3;
  double dropout = 0.0;

  void validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 ||
        max_seq_len < 1) {
      throw ConfigError("ModelConfig: all sizes must be positive");
    }
    if (d_model % n_heads != 0) throw ConfigError("ModelConfig: d_model must be divisible by n_heads");
    if (t_special < 1 || t_special > 8) throw ConfigError("ModelConfig: t_special must be in [1, 8]");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("ModelConfig: dropout must be in [0, 1)");
  }

  bool operator==(const ModelConfig&) const = default;
};

// L x L additive attention mask over {0, -inf}.
struct AttentionMask {
  int length = 0;
  Tensor additive;  // constant, never requires grad

  bool allowed(int i, int j) const { return additive.at(i, j) == 0.0; }
};

inline AttentionMask build_causal_mask(int length) {
  if (length < 1) throw ContractError("build_causal_mask: length must be >= 1");
  AttentionMask m;
  m.length = length;
  m.additive = Tensor({length, length}, 0.0);
  const double ninf = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < length; ++i) {
    for (int j = i + 1; j < length; ++j) m.additive.at(i, j) = ninf;
  }
  return m;
}

// Session rows stay causal. Response rows see only the session's special
// positions plus their own causal response prefix; the N raw session
// columns are closed off entirely.
inline AttentionMask build_session_mask(const PackedSequence& seq) {
  seq.validate();
  const int n = seq.n_session, t = seq.t_special;
  const int length = seq.length();
  AttentionMask m = build_causal_mask(length);
  const double ninf = -std::numeric_limits<double>::infinity();
  for (int i = n + t; i < length; ++i) {
    for (int j = 0; j < n; ++j) m.additive.at(i, j) = ninf;
  }
  return m;
}

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, wk, wv, wo;
  Tensor ln2_gain, ln2_bias;
  Tensor ff1, ff1_bias, ff2, ff2_bias;
};

struct ModelWeights {
  ModelConfig config;
  Tensor tok_embed;  // vocab_size x d_model
  std::vector<LayerWeights> layers;
  Tensor lnf_gain, lnf_bias;
  Tensor w_out;      // d_model x vocab_size
  Tensor pos_table;  // max_seq_len x d_model, fixed sinusoidal, not a parameter

  static ModelWeights init(const ModelConfig& cfg, Rng& rng);

  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("tok_embed", tok_embed);
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      const LayerWeights& lw = layers[l];
      out.emplace_back(p + "ln1_gain", lw.ln1_gain);
      out.emplace_back(p + "ln1_bias", lw.ln1_bias);
      out.emplace_back(p + "wq", lw.wq);
      out.emplace_back(p + "wk", lw.wk);
      out.emplace_back(p + "wv", lw.wv);
      out.emplace_back(p + "wo", lw.wo);
      out.emplace_back(p + "ln2_gain", lw.ln2_gain);
      out.emplace_back(p + "ln2_bias", lw.ln2_bias);
      out.emplace_back(p + "ff1", lw.ff1);
      out.emplace_back(p + "ff1_bias", lw.ff1_bias);
      out.emplace_back(p + "ff2", lw.ff2);
      out.emplace_back(p + "ff2_bias", lw.ff2_bias);
    }
    out.emplace_back("lnf_gain", lnf_gain);
    out.emplace_back("lnf_bias", lnf_bias);
    out.emplace_back("w_out", w_out);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  void zero_grad() const {
    for (Tensor t : parameters()) t.zero_grad();
  }

  uint64_t hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : named_parameters()) {
      h = fnv1a64(name.data(), name.size(), h);
      h = fnv1a64(t.values().data(), t.values().size() * sizeof(double), h);
    }
    return h;
  }
};

inline Tensor sinusoidal_positions(int max_len, int d_model) {
  Tensor p({max_len, d_model}, 0.0);
  for (int pos = 0; pos < max_len; ++pos) {
    for (int i = 0; i < d_model; i += 2) {
      const double rate = std::pow(10000.0, -static_cast<double>(i) / d_model);
      p.at(pos, i) = std::sin(pos * rate);
      if (i + 1 < d_model) p.at(pos, i + 1) = std::cos(pos * rate);
    }
  }
  return p;
}

inline ModelWeights ModelWeights::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelWeights w;
  w.config = cfg;
  const double s = 0.02;
  auto param = [&](Shape shape, double stddev) {
    Tensor t = randn(std::move(shape), rng, stddev);
    t.set_requires_grad(true);
    return t;
  };
  auto ones = [&](int n) {
    Tensor t({n}, 1.0);
    t.set_requires_grad(true);
    return t;
  };
  auto zeros = [&](int n) {
    Tensor t({n}, 0.0);
    t.set_requires_grad(true);
    return t;
  };
  w.tok_embed = param({cfg.vocab_size, cfg.d_model}, s);
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerWeights lw;
    lw.ln1_gain = ones(cfg.d_model);
    lw.ln1_bias = zeros(cfg.d_model);
    lw.wq = param({cfg.d_model, cfg.d_model}, s);
    lw.wk = param({cfg.d_model, cfg.d_model}, s);
    lw.wv = param({cfg.d_model, cfg.d_model}, s);
    lw.wo = param({cfg.d_model, cfg.d_model}, s);
    lw.ln2_gain = ones(cfg.d_model);
    lw.ln2_bias = zeros(cfg.d_model);
    lw.ff1 = param({cfg.d_model, cfg.d_ff}, s);
    lw.ff1_bias = zeros(cfg.d_ff);
    lw.ff2 = param({cfg.d_ff, cfg.d_model}, s);
    lw.ff2_bias = zeros(cfg.d_model);
    w.layers.push_back(std::move(lw));
  }
  w.lnf_gain = ones(cfg.d_model);
  w.lnf_bias = zeros(cfg.d_model);
  w.w_out = param({cfg.d_model, cfg.vocab_size}, s);
  w.pos_table = sinusoidal_positions(cfg.max_seq_len, cfg.d_model);
  return w;
}

// Post-softmax attention probabilities, per layer and head, when requested.
struct ForwardTrace {
  std::vector<std::vector<Tensor>> attention;  // [layer][head], each L x L
};

constexpr double kLayerNormEps = 1e-5;

// Token ids -> contextual hidden states (after the final norm). Dropout is
// applied only when an rng is supplied; evaluation passes none.
inline Tensor encoder_forward(const std::vector<int>& ids, const AttentionMask& mask,
                              const ModelWeights& w, ForwardTrace* trace = nullptr,
                              Rng* dropout_rng = nullptr) {
  const ModelConfig& cfg = w.config;
  const int length = static_cast<int>(ids.size());
  if (length < 1) throw ContractError("encoder_forward: empty input");
  if (length > cfg.max_seq_len) throw ContractError("encoder_forward: input exceeds max_seq_len");
  if (mask.length != length) throw ContractError("encoder_forward: mask dimension mismatch");
  for (int id : ids) {
    if (id < 0 || id >= cfg.vocab_size) throw std::out_of_range("encoder_forward: token id out of range");
  }

  auto maybe_dropout = [&](Tensor x) {
    if (!dropout_rng || cfg.dropout == 0.0) return x;
    Tensor keep(x.shape());
    const double scale_back = 1.0 / (1.0 - cfg.dropout);
    for (double& v : keep.values()) {
      const double u = static_cast<double>((*dropout_rng)() >> 11) * 0x1.0p-53;
      v = u < cfg.dropout ? 0.0 : scale_back;
    }
    return mul(x, keep);
  };

  const int dh = cfg.d_model / cfg.n_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor pos_slice({length, cfg.d_model});
  std::copy(w.pos_table.data(), w.pos_table.data() + static_cast<size_t>(length) * cfg.d_model,
            pos_slice.data());
  Tensor h = add(gather_rows(w.tok_embed, ids), pos_slice);

  if (trace) trace->attention.assign(cfg.n_layers, {});
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& lw = w.layers[l];
    Tensor xn = layer_norm(h, lw.ln1_gain, lw.ln1_bias, kLayerNormEps);
    Tensor q = matmul(xn, lw.wq);
    Tensor k = matmul(xn, lw.wk);
    Tensor v = matmul(xn, lw.wv);
    std::vector<Tensor> head_outs;
    head_outs.reserve(cfg.n_heads);
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
      Tensor qh = slice_cols(q, hd * dh, (hd + 1) * dh);
      Tensor kh = slice_cols(k, hd * dh, (hd + 1) * dh);
      Tensor vh = slice_cols(v, hd * dh, (hd + 1) * dh);
      Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt_dh);
      Tensor probs = softmax_lastdim(scores, &mask.additive);
      if (trace) trace->attention[l].push_back(probs);
      head_outs.push_back(matmul(probs, vh));
    }
    Tensor attn = maybe_dropout(matmul(concat_cols(head_outs), lw.wo));
    h = add(h, attn);
    Tensor x2 = layer_norm(h, lw.ln2_gain, lw.ln2_bias, kLayerNormEps);
    Tensor ff = add_rowvec(matmul(gelu(add_rowvec(matmul(x2, lw.ff1), lw.ff1_bias)), lw.ff2),
                           lw.ff2_bias);
    h = add(h, maybe_dropout(ff));
  }
  return layer_norm(h, w.lnf_gain, w.lnf_bias, kLayerNormEps);
}

// Next-token logits for a subset of positions; full logits are the
// rows = 0..L-1 case.
inline Tensor lm_logits(const Tensor& hidden, const std::vector<int>& rows, const ModelWeights& w) {
  return matmul(gather_rows(hidden, rows), w.w_out);
}

inline std::pair<Tensor, Tensor> forward_with_logits(const std::vector<int>& ids,
                                                     const AttentionMask& mask,
                                                     const ModelWeights& w) {
  Tensor hidden = encoder_forward(ids, mask, w);
  std::vector<int> rows(ids.size());
  for (size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<int>(i);
  return {hidden, lm_logits(hidden, rows, w)};
}

// Unit-length text embedding: hidden state of the final embedding marker
// under a plain causal mask. Differentiable when the weights require grad.
inline Tensor embed_text_t(const std::vector<int>& ids, const ModelWeights& w,
                           const Vocabulary& vocab) {
  const int t = vocab.t_special();
  if (static_cast<int>(ids.size()) < t + 1) {
    throw ContractError("embed_text: input too short to carry the trailing markers");
  }
  for (int i = 0; i < t; ++i) {
    if (ids[ids.size() - t + i] != vocab.emb_id(i)) {
      throw ContractError("embed_text: input does not end with the embedding markers");
    }
  }
  AttentionMask mask = build_causal_mask(static_cast<int>(ids.size()));
  Tensor hidden = encoder_forward(ids, mask, w);
  return l2_normalize(row(hidden, static_cast<int>(ids.size()) - 1));
}

inline std::vector<double> embed_text(const std::vector<int>& ids, const ModelWeights& w,
                                      const Vocabulary& vocab) {
  return embed_text_t(ids, w, vocab).values();
}

// The t contextualized hidden states of the session's special-token span.
struct SessionAnchor {
  Tensor states;  // t x d_model
};

inline SessionAnchor extract_session_anchors(const PackedSequence& seq, const Tensor& hidden) {
  if (hidden.rank() != 2 || hidden.shape()[0] != seq.length()) {
    throw ContractError("extract_session_anchors: hidden states do not match the sequence");
  }
  std::vector<int> rows;
  for (int i = 0; i < seq.t_special; ++i) rows.push_back(seq.n_session + i);
  return SessionAnchor{gather_rows(hidden, rows)};
}

// ---- checkpoint file ----------------------------------------------------
//
// Layout: magic "CSIT", u32 version, ModelConfig, vocabulary strings,
// manifest of (name, shape, byte offset), then the parameter blob as
// little-endian 64-bit floats. Optional tagged sections follow the blob.

namespace ckpt {

constexpr char kMagic[4] = {'C', 'S', 'I', 'T'};
constexpr uint32_t kVersion = 1;

inline void write_bytes(std::ostream& out, const void* p, size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void write_pod(std::ostream& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  write_bytes(out, &v, sizeof(T));
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_pod<uint32_t>(out, static_cast<uint32_t>(s.size()));
  write_bytes(out, s.data(), s.size());
}

inline void read_bytes(std::istream& in, void* p, size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(in.gcount()) != n) throw FormatError("checkpoint: truncated file");
}

template <typename T>
T read_pod(std::istream& in) {
  T v;
  read_bytes(in, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  return v;
}

inline std::string read_string(std::istream& in) {
  const auto n = read_pod<uint32_t>(in);
  if (n > (1u << 24)) throw FormatError("checkpoint: implausible string length");
  std::string s(n, '\0');
  read_bytes(in, s.data(), n);
  return s;
}

inline void write_f64_array(std::ostream& out, const std::vector<double>& v) {
  for (double d : v) write_pod<double>(out, d);
}

inline std::vector<double> read_f64_array(std::istream& in, size_t n) {
  std::vector<double> v(n);
  for (size_t i = 0; i < n; ++i) v[i] = read_pod<double>(in);
  return v;
}

// Extra payloads appended by callers (optimizer state, training config).
struct Section {
  std::string tag;  // 4 chars
  std::vector<char> payload;
};

}  // namespace ckpt

inline void save_model_checkpoint(const ModelWeights& w, const Vocabulary& vocab,
                                  const std::string& path,
                                  const std::vector<ckpt::Section>& sections = {}) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open checkpoint for writing: '" + path + "'");
  ckpt::write_bytes(out, ckpt::kMagic, 4);
  ckpt::write_pod<uint32_t>(out, ckpt::kVersion);

  const ModelConfig& c = w.config;
  for (int v : {c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_seq_len, c.t_special}) {
    ckpt::write_pod<uint32_t>(out, static_cast<uint32_t>(v));
  }
  ckpt::write_pod<double>(out, c.dropout);

  const auto& toks = vocab.tokens();
  ckpt::write_pod<uint32_t>(out, static_cast<uint32_t>(toks.size()));
  for (const std::string& t : toks) ckpt::write_string(out, t);

  auto named = w.named_parameters();
  ckpt::write_pod<uint32_t>(out, static_cast<uint32_t>(named.size()));
  uint64_t offset = 0;
  for (const auto& [name, t] : named) {
    ckpt::write_string(out, name);
    ckpt::write_pod<uint32_t>(out, static_cast<uint32_t>(t.shape().size()));
    for (int d : t.shape()) ckpt::write_pod<uint32_t>(out, static_cast<uint32_t>(d));
    ckpt::write_pod<uint64_t>(out, offset);
    offset += t.size() * sizeof(double);
  }
  ckpt::write_pod<uint64_t>(out, offset);
  for (const auto& [name, t] : named) ckpt::write_f64_array(out, t.values());

  ckpt::write_pod<uint32_t>(out, static_cast<uint32_t>(sections.size()));
  for (const auto& s : sections) {
    if (s.tag.size() != 4) throw ContractError("checkpoint section tag must be 4 chars");
    ckpt::write_bytes(out, s.tag.data(), 4);
    ckpt::write_pod<uint64_t>(out, s.payload.size());
    ckpt::write_bytes(out, s.payload.data(), s.payload.size());
  }
  if (!out) throw FormatError("checkpoint write failed: '" + path + "'");
}

struct LoadedCheckpoint {
  ModelWeights weights;
  Vocabulary vocab;
  std::vector<ckpt::Section> sections;

  const ckpt::Section* find_section(const std::string& tag) const {
    for (const auto& s : sections) {
      if (s.tag == tag) return &s;
    }
    return nullptr;
  }
};

inline LoadedCheckpoint load_model_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint: '" + path + "'");
  char magic[4];
  ckpt::read_bytes(in, magic, 4);
  if (std::memcmp(magic, ckpt::kMagic, 4) != 0) {
    throw VersionError("checkpoint: bad magic (not a CSIT checkpoint): '" + path + "'");
  }
  const auto version = ckpt::read_pod<uint32_t>(in);
  if (version != ckpt::kVersion) {
    throw VersionError("checkpoint: incompatible format version " + std::to_string(version) +
                       " (expected " + std::to_string(ckpt::kVersion) + ")");
  }

  ModelConfig c;
  c.vocab_size = static_cast<int>(ckpt::read_pod<uint32_t>(in));
  c.d_model = static_cast<int>(ckpt::read_pod<uint32_t>(in));
  c.n_layers = static_cast<int>(ckpt::read_pod<uint32_t>(in));
  c.n_heads = static_cast<int>(ckpt::read_pod<uint32_t>(in));
  c.d_ff = static_cast<int>(ckpt::read_pod<uint32_t>(in));
  c.max_seq_len = static_cast<int>(ckpt::read_pod<uint32_t>(in));
  c.t_special = static_cast<int>(ckpt::read_pod<uint32_t>(in));
  c.dropout = ckpt::read_pod<double>(in);
  c.validate();

  const auto n_tokens = ckpt::read_pod<uint32_t>(in);
  Vocabulary vocab(c.t_special);
  for (uint32_t i = 0; i < n_tokens; ++i) {
    std::string tok = ckpt::read_string(in);
    if (i < static_cast<uint32_t>(vocab.first_word_id())) continue;  // reserved names are fixed
    vocab.add_word(tok);
  }
  if (vocab.size() != c.vocab_size) throw FormatError("checkpoint: vocabulary size mismatch");

  struct Entry {
    std::string name;
    Shape shape;
    uint64_t offset;
  };
  const auto n_params = ckpt::read_pod<uint32_t>(in);
  std::vector<Entry> entries(n_params);
  for (auto& e : entries) {
    e.name = ckpt::read_string(in);
    const auto rank = ckpt::read_pod<uint32_t>(in);
    if (rank > 4) throw FormatError("checkpoint: implausible tensor rank");
    for (uint32_t r = 0; r < rank; ++r) {
      e.shape.push_back(static_cast<int>(ckpt::read_pod<uint32_t>(in)));
    }
    e.offset = ckpt::read_pod<uint64_t>(in);
  }
  const auto blob_size = ckpt::read_pod<uint64_t>(in);

  std::map<std::string, Tensor> by_name;
  uint64_t consumed = 0;
  for (const auto& e : entries) {
    if (e.offset != consumed) throw FormatError("checkpoint: manifest offsets are not contiguous");
    const size_t numel = shape_numel(e.shape);
    Tensor t(e.shape, ckpt::read_f64_array(in, numel));
    t.set_requires_grad(true);
    by_name.emplace(e.name, t);
    consumed += numel * sizeof(double);
  }
  if (consumed != blob_size) throw FormatError("checkpoint: parameter blob size mismatch");

  Rng dummy(0);
  LoadedCheckpoint result{ModelWeights::init(c, dummy), std::move(vocab), {}};
  for (auto& [name, t] : result.weights.named_parameters()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing parameter '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw FormatError("checkpoint: shape mismatch for parameter '" + name + "'");
    }
    t.values() = it->second.values();
  }

  const auto n_sections = ckpt::read_pod<uint32_t>(in);
  for (uint32_t i = 0; i < n_sections; ++i) {
    ckpt::Section s;
    char tag[4];
    ckpt::read_bytes(in, tag, 4);
    s.tag.assign(tag, 4);
    const auto size = ckpt::read_pod<uint64_t>(in);
    s.payload.resize(size);
    if (size > 0) ckpt::read_bytes(in, s.payload.data(), size);
    result.sections.push_back(std::move(s));
  }
  return result;
}

}  // namespace convret
