#pragma once

#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "convret/adam.hpp"
#include "convret/common.hpp"
#include "convret/index.hpp"
#include "convret/model.hpp"
#include "convret/objectives.hpp"
#include "convret/text.hpp"

namespace convret {

struct TrainConfig {
  // defaults follow the "paper" preset; desk runs override
  int steps = 2500;
  int batch_size = 64;
  int grad_accum_steps = 4;
  int n_hard_negatives = 4;
  double learning_rate = 1e-4;
  double temperature = 0.05;
  double alpha = 1.0;
  uint64_t seed = 42;
  bool no_sit = false;
  bool vanilla_it = false;
  bool no_rcot = false;
  bool in_batch_negatives = true;

  void validate() const {
    if (steps < 1 || batch_size < 1 || grad_accum_steps < 1 || n_hard_negatives < 0) {
      throw ConfigError("TrainConfig: steps, batch_size, grad_accum_steps must be positive");
    }
    if (!(learning_rate > 0.0)) throw ConfigError("TrainConfig: learning_rate must be positive");
    if (!(temperature > 0.0)) throw ConfigError("TrainConfig: temperature must be positive");
    if (alpha < 0.0) throw ConfigError("TrainConfig: alpha must be non-negative");
    if (no_sit && vanilla_it) throw ConfigError("TrainConfig: no_sit and vanilla_it are exclusive");
  }

  static TrainConfig paper_preset() { return TrainConfig{}; }

  static TrainConfig desk_preset() {
    TrainConfig c;
    c.steps = 2000;
    c.batch_size = 16;
    c.grad_accum_steps = 1;
    return c;
  }

  bool operator==(const TrainConfig&) const = default;
};

// One micro-batch plus each sample's derived negative pool.
struct Batch {
  std::vector<TrainingSample> samples;
};

// Deterministic epoch order: every epoch reshuffles under a seed derived
// from (seed, epoch), so any point in training is reachable statelessly.
inline std::vector<size_t> epoch_order(size_t n_samples, uint64_t seed, uint64_t epoch) {
  std::vector<size_t> order(n_samples);
  for (size_t i = 0; i < n_samples; ++i) order[i] = i;
  Rng rng(mix_seed(seed, epoch));
  shuffle_in_place(order, rng);
  return order;
}

// All micro-batches of one epoch; the final short batch is kept.
inline std::vector<std::vector<size_t>> make_batches(size_t n_samples, int batch_size,
                                                     uint64_t seed, uint64_t epoch = 0) {
  if (n_samples == 0) throw ContractError("make_batches: no samples");
  std::vector<size_t> order = epoch_order(n_samples, seed, epoch);
  std::vector<std::vector<size_t>> batches;
  for (size_t i = 0; i < n_samples; i += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(n_samples, i + static_cast<size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<ptrdiff_t>(i),
                         order.begin() + static_cast<ptrdiff_t>(end));
  }
  return batches;
}

// Negative pids for one sample: its hard negatives, then (optionally) the
// other samples' positives, deduplicated by pid with the positive excluded.
inline std::vector<const Passage*> negative_pool(const Batch& batch, size_t sample_idx,
                                                 bool in_batch_negatives) {
  const TrainingSample& self = batch.samples[sample_idx];
  std::vector<const Passage*> pool;
  std::unordered_set<std::string> seen{self.positive.pid};
  for (const Passage& n : self.hard_negatives) {
    if (seen.insert(n.pid).second) pool.push_back(&n);
  }
  if (in_batch_negatives) {
    for (size_t j = 0; j < batch.samples.size(); ++j) {
      if (j == sample_idx) continue;
      const Passage& p = batch.samples[j].positive;
      if (seen.insert(p.pid).second) pool.push_back(&p);
    }
  }
  return pool;
}

struct LossTraceRow {
  int64_t step = 0;
  double l_c = 0.0;
  double l_s = 0.0;
  double l = 0.0;
};

inline void save_loss_trace(const std::vector<LossTraceRow>& trace, const std::string& path,
                            bool append = false) {
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw FormatError("cannot open loss trace for writing: '" + path + "'");
  if (!append) out << "step,L_C,L_S,L\n";
  out << std::setprecision(17);
  for (const auto& row : trace) {
    out << row.step << ',' << row.l_c << ',' << row.l_s << ',' << row.l << '\n';
  }
}

namespace detail {

inline Tensor mean_scalars(const std::vector<Tensor>& xs) {
  if (xs.size() == 1) return xs[0];
  return scale(sum(stack_scalars(xs)), 1.0 / static_cast<double>(xs.size()));
}

}  // namespace detail

struct MicroLoss {
  Tensor contrastive;  // batch mean
  Tensor lm;           // batch mean; scalar 0 when the SIT term is off
  Tensor combined;
  bool lm_active = false;
};

// Loss of one micro-batch. Embeddings of shared passages are computed once
// and reused across the batch, which is also what lets in-batch negatives
// share gradient paths.
inline MicroLoss compute_micro_loss(const Batch& batch, const ModelWeights& w,
                                    const Vocabulary& vocab, const TrainConfig& cfg) {
  cfg.validate();
  if (batch.samples.empty()) throw ContractError("compute_micro_loss: empty batch");
  const int max_len = w.config.max_seq_len;
  ContrastiveConfig ccfg{cfg.temperature, cfg.in_batch_negatives};
  const bool lm_active = !cfg.no_sit && cfg.alpha > 0.0;

  std::unordered_map<std::string, Tensor> passage_embed;
  auto embed_passage = [&](const Passage& p) -> Tensor {
    auto it = passage_embed.find(p.pid);
    if (it != passage_embed.end()) return it->second;
    Tensor e = embed_text_t(format_passage(p.text, vocab, max_len), w, vocab);
    passage_embed.emplace(p.pid, e);
    return e;
  };

  std::vector<Tensor> l_c_terms, l_s_terms;
  for (size_t i = 0; i < batch.samples.size(); ++i) {
    const TrainingSample& s = batch.samples[i];
    try {
      Tensor e_x = embed_text_t(format_session(s.session, vocab, max_len), w, vocab);
      Tensor e_pos = embed_passage(s.positive);
      std::vector<Tensor> negs;
      for (const Passage* p : negative_pool(batch, i, cfg.in_batch_negatives)) {
        negs.push_back(embed_passage(*p));
      }
      Tensor l_c = contrastive_loss(e_x, e_pos, negs, ccfg);
      if (!std::isfinite(l_c.item())) throw std::runtime_error("non-finite contrastive loss");
      l_c_terms.push_back(l_c);
      if (lm_active) {
        PackedSequence seq = pack_training_sequence(s, vocab, max_len);
        Tensor l_s = session_masked_lm_loss(
            seq, w, cfg.vanilla_it ? LmMaskMode::causal : LmMaskMode::session_masked);
        if (!std::isfinite(l_s.item())) throw std::runtime_error("non-finite LM loss");
        l_s_terms.push_back(l_s);
      }
    } catch (const std::exception& e) {
      throw std::runtime_error("train: sample '" + s.session.conversation_id + "': " + e.what());
    }
  }

  MicroLoss out;
  out.contrastive = detail::mean_scalars(l_c_terms);
  out.lm_active = lm_active;
  if (lm_active) {
    out.lm = detail::mean_scalars(l_s_terms);
    out.combined = combined_loss(out.contrastive, out.lm, LossWeights{cfg.alpha});
  } else {
    out.lm = Tensor::scalar(0.0);
    out.combined = out.contrastive;  // bitwise the contrastive-only path
  }
  return out;
}

struct TrainerState {
  ModelWeights weights;
  Vocabulary vocab;
  TrainConfig config;
  AdamOptimizer optimizer;
  int64_t step = 0;  // completed optimizer steps
};

inline TrainerState make_trainer(ModelWeights weights, Vocabulary vocab, TrainConfig cfg) {
  cfg.validate();
  if (cfg.no_rcot && weights.config.t_special != 1) {
    throw ConfigError("TrainConfig: no_rcot requires a model built with t_special = 1");
  }
  if (weights.config.t_special != vocab.t_special()) {
    throw ConfigError("make_trainer: model and vocabulary disagree on t_special");
  }
  AdamConfig acfg;
  acfg.learning_rate = cfg.learning_rate;
  return TrainerState{std::move(weights), std::move(vocab), cfg, AdamOptimizer(acfg), 0};
}

using StepCallback = std::function<void(int64_t step, const TrainerState& st)>;

// Runs optimizer steps (st.step, cfg.steps]. Each step averages gradients
// over grad_accum_steps micro-batches; the emitted trace rows are the means
// of the per-micro-batch loss values.
inline std::vector<LossTraceRow> train(TrainerState& st, const std::vector<TrainingSample>& data,
                                       const StepCallback& after_step = {}) {
  st.config.validate();
  if (data.empty()) throw ContractError("train: no training samples");
  for (const TrainingSample& s : data) s.validate();

  const int accum = st.config.grad_accum_steps;
  const size_t micros_per_epoch =
      (data.size() + static_cast<size_t>(st.config.batch_size) - 1) /
      static_cast<size_t>(st.config.batch_size);

  uint64_t cached_epoch = ~0ull;
  std::vector<std::vector<size_t>> epoch_batches;
  auto micro_batch = [&](uint64_t micro_index) -> Batch {
    const uint64_t epoch = micro_index / micros_per_epoch;
    const size_t pos = static_cast<size_t>(micro_index % micros_per_epoch);
    if (epoch != cached_epoch) {
      epoch_batches = make_batches(data.size(), st.config.batch_size, st.config.seed, epoch);
      cached_epoch = epoch;
    }
    Batch b;
    for (size_t idx : epoch_batches[pos]) b.samples.push_back(data[idx]);
    return b;
  };

  std::vector<Tensor> params = st.weights.parameters();
  std::vector<LossTraceRow> trace;
  for (int64_t step = st.step + 1; step <= st.config.steps; ++step) {
    st.weights.zero_grad();
    double lc_acc = 0.0, ls_acc = 0.0, l_acc = 0.0;
    for (int g = 0; g < accum; ++g) {
      const uint64_t micro_index = static_cast<uint64_t>(step - 1) * accum + g;
      Batch batch = micro_batch(micro_index);
      MicroLoss loss = compute_micro_loss(batch, st.weights, st.vocab, st.config);
      backward(loss.combined);
      lc_acc += loss.contrastive.item();
      ls_acc += loss.lm.item();
      l_acc += loss.combined.item();
    }
    st.optimizer.step(params, 1.0 / accum);
    st.step = step;
    trace.push_back({step, lc_acc / accum, ls_acc / accum, l_acc / accum});
    if (after_step) after_step(step, st);
  }
  return trace;
}

// ---- hard-negative mining -------------------------------------------------

struct MiningResult {
  std::vector<TrainingSample> samples;
  std::vector<std::string> warnings;
};

// Retrieves by the session embedding and draws k negatives uniformly without
// replacement from the rank window [lo, hi] (1-based, inclusive), excluding
// the positive. A corpus smaller than the window shrinks it, with a warning.
inline MiningResult mine_hard_negatives(const std::vector<TrainingSample>& samples,
                                        const EmbeddingIndex& index,
                                        const std::vector<Passage>& corpus,
                                        const ModelWeights& weights, const Vocabulary& vocab,
                                        uint64_t seed, int window_lo = 15, int window_hi = 30,
                                        int k_per_sample = 4) {
  if (window_lo < 1 || window_hi < window_lo) {
    throw ConfigError("mine_hard_negatives: window must satisfy 1 <= lo <= hi");
  }
  std::unordered_map<std::string, const Passage*> by_pid;
  for (const Passage& p : corpus) by_pid.emplace(p.pid, &p);

  MiningResult result;
  const int n = static_cast<int>(index.size());
  int hi = std::min(window_hi, n);
  int lo = std::min(window_lo, hi);
  if (hi < window_hi) {
    result.warnings.push_back("corpus has only " + std::to_string(n) +
                              " passages; shrinking mining window to [" + std::to_string(lo) +
                              ", " + std::to_string(hi) + "]");
  }

  for (size_t si = 0; si < samples.size(); ++si) {
    TrainingSample s = samples[si];
    std::vector<double> query =
        embed_text(format_session(s.session, vocab, weights.config.max_seq_len), weights, vocab);
    SearchResult hits = search_topk(query, index, hi);
    std::vector<std::string> window;
    for (const SearchHit& h : hits.hits) {
      if (h.rank < lo || h.rank > hi) continue;
      if (h.pid == s.positive.pid) continue;
      window.push_back(h.pid);
    }
    Rng rng(mix_seed(seed, si));
    std::vector<std::string> chosen =
        sample_without_replacement(window, static_cast<size_t>(k_per_sample), rng);
    if (chosen.size() < static_cast<size_t>(k_per_sample)) {
      result.warnings.push_back("sample '" + s.session.conversation_id + "': only " +
                                std::to_string(chosen.size()) + " negatives available in window");
    }
    s.hard_negatives.clear();
    for (const std::string& pid : chosen) {
      auto it = by_pid.find(pid);
      if (it == by_pid.end()) throw FormatError("mine_hard_negatives: pid '" + pid + "' not in corpus");
      s.hard_negatives.push_back(*it->second);
    }
    result.samples.push_back(std::move(s));
  }
  return result;
}

// ---- trainer checkpoints ----------------------------------------------------
//
// Model checkpoint plus two sections: "TCFG" (train config, JSON) and
// "OPTM" (step counter and Adam moments).

inline void save_checkpoint(const TrainerState& st, const std::string& path) {
  std::vector<ckpt::Section> sections;

  nlohmann::json j{{"steps", st.config.steps},
                   {"batch_size", st.config.batch_size},
                   {"grad_accum_steps", st.config.grad_accum_steps},
                   {"n_hard_negatives", st.config.n_hard_negatives},
                   {"learning_rate", st.config.learning_rate},
                   {"temperature", st.config.temperature},
                   {"alpha", st.config.alpha},
                   {"seed", st.config.seed},
                   {"no_sit", st.config.no_sit},
                   {"vanilla_it", st.config.vanilla_it},
                   {"no_rcot", st.config.no_rcot},
                   {"in_batch_negatives", st.config.in_batch_negatives},
                   {"step", st.step}};
  const std::string cfg_str = j.dump();
  sections.push_back({"TCFG", std::vector<char>(cfg_str.begin(), cfg_str.end())});

  std::ostringstream opt;
  ckpt::write_pod<int64_t>(opt, st.optimizer.step_count());
  const auto& slots = st.optimizer.slots();
  ckpt::write_pod<uint32_t>(opt, static_cast<uint32_t>(slots.size()));
  for (const AdamSlot& slot : slots) {
    ckpt::write_pod<uint64_t>(opt, slot.m.size());
    ckpt::write_f64_array(opt, slot.m);
    ckpt::write_f64_array(opt, slot.v);
  }
  const std::string opt_str = opt.str();
  sections.push_back({"OPTM", std::vector<char>(opt_str.begin(), opt_str.end())});

  save_model_checkpoint(st.weights, st.vocab, path, sections);
}

inline TrainerState load_checkpoint(const std::string& path) {
  LoadedCheckpoint loaded = load_model_checkpoint(path);
  const ckpt::Section* tcfg = loaded.find_section("TCFG");
  const ckpt::Section* optm = loaded.find_section("OPTM");
  if (!tcfg || !optm) {
    throw FormatError("checkpoint: missing trainer sections (model-only checkpoint?)");
  }

  TrainConfig cfg;
  int64_t step = 0;
  try {
    nlohmann::json j = nlohmann::json::parse(std::string(tcfg->payload.begin(), tcfg->payload.end()));
    cfg.steps = j.at("steps").get<int>();
    cfg.batch_size = j.at("batch_size").get<int>();
    cfg.grad_accum_steps = j.at("grad_accum_steps").get<int>();
    cfg.n_hard_negatives = j.at("n_hard_negatives").get<int>();
    cfg.learning_rate = j.at("learning_rate").get<double>();
    cfg.temperature = j.at("temperature").get<double>();
    cfg.alpha = j.at("alpha").get<double>();
    cfg.seed = j.at("seed").get<uint64_t>();
    cfg.no_sit = j.at("no_sit").get<bool>();
    cfg.vanilla_it = j.at("vanilla_it").get<bool>();
    cfg.no_rcot = j.at("no_rcot").get<bool>();
    cfg.in_batch_negatives = j.at("in_batch_negatives").get<bool>();
    step = j.at("step").get<int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed TCFG section: ") + e.what());
  }

  std::istringstream in(std::string(optm->payload.begin(), optm->payload.end()));
  const auto opt_step = ckpt::read_pod<int64_t>(in);
  const auto n_slots = ckpt::read_pod<uint32_t>(in);
  std::vector<AdamSlot> slots(n_slots);
  for (AdamSlot& slot : slots) {
    const auto sz = ckpt::read_pod<uint64_t>(in);
    slot.m = ckpt::read_f64_array(in, sz);
    slot.v = ckpt::read_f64_array(in, sz);
  }

  TrainerState st = make_trainer(std::move(loaded.weights), std::move(loaded.vocab), cfg);
  st.step = step;
  st.optimizer.restore(opt_step, std::move(slots));
  return st;
}

}  // namespace convret
