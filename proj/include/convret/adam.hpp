#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "convret/common.hpp"
#include "convret/tensor.hpp"

namespace convret {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment slots for one parameter tensor.
struct AdamSlot {
  std::vector<double> m;
  std::vector<double> v;
};

// Bias-corrected Adam update for one parameter array, in place.
// `step` is 1-based and must already count this update.
inline void adam_step(std::span<double> param, std::span<const double> grad, AdamSlot& slot,
                      int64_t step, const AdamConfig& cfg) {
  if (param.size() != grad.size()) throw DimError("adam_step: param/grad size mismatch");
  if (slot.m.empty()) {
    slot.m.assign(param.size(), 0.0);
    slot.v.assign(param.size(), 0.0);
  }
  if (slot.m.size() != param.size()) throw DimError("adam_step: state size mismatch");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (size_t i = 0; i < param.size(); ++i) {
    slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * grad[i];
    slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = slot.m[i] / bc1;
    const double vhat = slot.v[i] / bc2;
    param[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

// Steps a fixed list of named parameter tensors in declaration order.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(AdamConfig cfg = {}) : cfg_(cfg) {}

  // Consumes each tensor's accumulated grad, scaled by grad_scale.
  void step(std::vector<Tensor>& params, double grad_scale = 1.0) {
    if (slots_.empty()) slots_.resize(params.size());
    if (slots_.size() != params.size()) throw DimError("AdamOptimizer: parameter count changed");
    ++t_;
    scratch_.clear();
    for (size_t p = 0; p < params.size(); ++p) {
      Tensor& par = params[p];
      if (!par.has_grad()) par.grad_mut();
      scratch_.assign(par.grad().begin(), par.grad().end());
      if (grad_scale != 1.0) {
        for (double& g : scratch_) g *= grad_scale;
      }
      adam_step(std::span<double>(par.values()), std::span<const double>(scratch_), slots_[p], t_,
                cfg_);
    }
  }

  int64_t step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  std::vector<AdamSlot>& slots() { return slots_; }
  const std::vector<AdamSlot>& slots() const { return slots_; }
  void restore(int64_t step_count, std::vector<AdamSlot> slots) {
    t_ = step_count;
    slots_ = std::move(slots);
  }

 private:
  AdamConfig cfg_;
  int64_t t_ = 0;
  std::vector<AdamSlot> slots_;
  std::vector<double> scratch_;
};

}  // namespace convret
