#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <utility>
#include <vector>

#include "convret/common.hpp"

namespace convret {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) n *= static_cast<size_t>(d);
  return n;
}

// One record of the computation graph. Op outputs hold their inputs as
// parents, so a graph lives exactly as long as its root tensor.
struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // sized lazily; persistent for leaves
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backward_fn;

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
  bool is_leaf() const { return !backward_fn; }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0) : n_(std::make_shared<TensorNode>()) {
    validate_shape(shape);
    n_->shape = std::move(shape);
    n_->values.assign(shape_numel(n_->shape), fill);
  }
  Tensor(Shape shape, std::vector<double> values) : n_(std::make_shared<TensorNode>()) {
    validate_shape(shape);
    if (values.size() != shape_numel(shape)) {
      throw DimError("Tensor: values length does not match shape");
    }
    n_->shape = std::move(shape);
    n_->values = std::move(values);
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int rows() const { return rank() == 2 ? n_->shape[0] : 1; }
  int cols() const { return n_->shape[rank() - 1]; }
  size_t size() const { return n_->values.size(); }

  std::vector<double>& values() { return n_->values; }
  const std::vector<double>& values() const { return n_->values; }
  double* data() { return n_->values.data(); }
  const double* data() const { return n_->values.data(); }

  double item() const {
    if (size() != 1) throw ContractError("item(): tensor is not scalar");
    return n_->values[0];
  }
  double& at(int i, int j) {
    if (rank() != 2) throw DimError("at(i,j): tensor is not rank-2");
    return n_->values[static_cast<size_t>(i) * n_->shape[1] + j];
  }
  double at(int i, int j) const { return const_cast<Tensor*>(this)->at(i, j); }

  Tensor& set_requires_grad(bool b) {
    n_->requires_grad = b;
    return *this;
  }
  bool requires_grad() const { return n_->requires_grad; }

  bool has_grad() const { return n_->grad.size() == n_->values.size(); }
  const std::vector<double>& grad() const {
    if (!has_grad()) throw ContractError("grad(): no gradient; run backward first");
    return n_->grad;
  }
  std::vector<double>& grad_mut() {
    n_->ensure_grad();
    return n_->grad;
  }
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
  }

  TensorNode* node() const { return n_.get(); }
  const std::shared_ptr<TensorNode>& node_ptr() const { return n_; }

 private:
  static void validate_shape(const Shape& s) {
    if (s.empty()) throw DimError("Tensor: shape must have at least one dimension");
    for (int d : s) {
      if (d <= 0) throw DimError("Tensor: shape dimensions must be positive");
    }
  }
  std::shared_ptr<TensorNode> n_;
};

inline Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

inline bool all_finite(const Tensor& t) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

namespace detail {

inline bool any_needs_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Op output: requires_grad propagates so eval-only forwards build no tape.
inline Tensor make_op(Shape shape, const char* op, std::vector<Tensor> inputs) {
  Tensor out(std::move(shape));
  bool needs = false;
  for (const Tensor& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    out.set_requires_grad(true);
    out.node()->op = op;
    for (const Tensor& in : inputs) out.node()->parents.push_back(in.node_ptr());
  }
  return out;
}

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn_acc(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* a = A + static_cast<size_t>(i) * k;
    double* c = C + static_cast<size_t>(i) * n;
    for (int r = 0; r < k; ++r) {
      const double av = a[r];
      const double* b = B + static_cast<size_t>(r) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void gemm_nt_acc(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* a = A + static_cast<size_t>(i) * k;
    double* c = C + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* b = B + static_cast<size_t>(j) * k;
      double acc = 0.0;
      for (int r = 0; r < k; ++r) acc += a[r] * b[r];
      c[j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void gemm_tn_acc(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* a = A + static_cast<size_t>(i) * k;
    const double* b = B + static_cast<size_t>(i) * n;
    for (int r = 0; r < k; ++r) {
      const double av = a[r];
      double* c = C + static_cast<size_t>(r) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw DimError("matmul: inputs must be rank-2");
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) throw DimError("matmul: inner dimensions disagree");
  Tensor out = detail::make_op({m, n}, "matmul", {a, b});
  detail::gemm_nn_acc(a.data(), b.data(), out.data(), m, k, n);
  if (out.requires_grad()) {
    TensorNode* an = a.node();
    TensorNode* bn = b.node();
    TensorNode* cn = out.node();
    cn->backward_fn = [an, bn, cn, m, k, n] {
      if (an->requires_grad) {
        an->ensure_grad();
        detail::gemm_nt_acc(cn->grad.data(), bn->values.data(), an->grad.data(), m, n, k);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::gemm_tn_acc(an->values.data(), cn->grad.data(), bn->grad.data(), m, k, n);
      }
    };
  }
  return out;
}

// a[m,k] * b[n,k]^T; the attention-score shape without materializing transposes.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw DimError("matmul_nt: inputs must be rank-2");
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) throw DimError("matmul_nt: inner dimensions disagree");
  Tensor out = detail::make_op({m, n}, "matmul_nt", {a, b});
  detail::gemm_nt_acc(a.data(), b.data(), out.data(), m, k, n);
  if (out.requires_grad()) {
    TensorNode* an = a.node();
    TensorNode* bn = b.node();
    TensorNode* cn = out.node();
    cn->backward_fn = [an, bn, cn, m, k, n] {
      if (an->requires_grad) {
        an->ensure_grad();
        detail::gemm_nn_acc(cn->grad.data(), bn->values.data(), an->grad.data(), m, n, k);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::gemm_tn_acc(cn->grad.data(), an->values.data(), bn->grad.data(), m, n, k);
      }
    };
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimError("add: shape mismatch");
  Tensor out = detail::make_op(a.shape(), "add", {a, b});
  for (size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (out.requires_grad()) {
    TensorNode* an = a.node();
    TensorNode* bn = b.node();
    TensorNode* cn = out.node();
    cn->backward_fn = [an, bn, cn] {
      for (TensorNode* p : {an, bn}) {
        if (!p->requires_grad) continue;
        p->ensure_grad();
        for (size_t i = 0; i < cn->grad.size(); ++i) p->grad[i] += cn->grad[i];
      }
    };
  }
  return out;
}

// a[m,n] + b[n] broadcast over rows.
inline Tensor add_rowvec(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 1 || a.shape()[1] != b.shape()[0]) {
    throw DimError("add_rowvec: expected [m,n] + [n]");
  }
  const int m = a.shape()[0], n = a.shape()[1];
  Tensor out = detail::make_op(a.shape(), "add_rowvec", {a, b});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      out.data()[static_cast<size_t>(i) * n + j] = a.data()[static_cast<size_t>(i) * n + j] + b.data()[j];
    }
  }
  if (out.requires_grad()) {
    TensorNode* an = a.node();
    TensorNode* bn = b.node();
    TensorNode* cn = out.node();
    cn->backward_fn = [an, bn, cn, m, n] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < cn->grad.size(); ++i) an->grad[i] += cn->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < n; ++j) bn->grad[j] += cn->grad[static_cast<size_t>(i) * n + j];
        }
      }
    };
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimError("mul: shape mismatch");
  Tensor out = detail::make_op(a.shape(), "mul", {a, b});
  for (size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (out.requires_grad()) {
    TensorNode* an = a.node();
    TensorNode* bn = b.node();
    TensorNode* cn = out.node();
    cn->backward_fn = [an, bn, cn] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < cn->grad.size(); ++i) an->grad[i] += cn->grad[i] * bn->values[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < cn->grad.size(); ++i) bn->grad[i] += cn->grad[i] * an->values[i];
      }
    };
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = detail::make_op(a.shape(), "scale", {a});
  for (size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] * c;
  if (out.requires_grad()) {
    TensorNode* an = a.node();
    TensorNode* cn = out.node();
    cn->backward_fn = [an, cn, c] {
      an->ensure_grad();
      for (size_t i = 0; i < cn->grad.size(); ++i) an->grad[i] += cn->grad[i] * c;
    };
  }
  return out;
}

inline Tensor sum(const Tensor& a) {
  Tensor out = detail::make_op({1}, "sum", {a});
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += a.data()[i];
  out.data()[0] = acc;
  if (out.requires_grad()) {
    TensorNode* an = a.node();
    TensorNode* cn = out.node();
    cn->backward_fn = [an, cn] {
      an->ensure_grad();
      for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += cn->grad[0];
    };
  }
  return out;
}

inline Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.rank() != 1 || b.rank() != 1 || a.size() != b.size()) {
    throw DimError("dot: expected two equal-length vectors");
  }
  Tensor out = detail::make_op({1}, "dot", {a, b});
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += a.data()[i] * b.data()[i];
  out.data()[0] = acc;
  if (out.requires_grad()) {
    TensorNode* an = a.node();
    TensorNode* bn = b.node();
    TensorNode* cn = out.node();
    cn->backward_fn = [an, bn, cn] {
      const double g = cn->grad[0];
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g * bn->values[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += g * an->values[i];
      }
    };
  }
  return out;
}

// Stacks K scalar tensors into a [1,K] row; carrier of contrastive score lists.
inline Tensor stack_scalars(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw DimError("stack_scalars: empty input");
  Tensor out(Shape{1, static_cast<int>(xs.size())});
  bool needs = false;
  for (const Tensor& x : xs) {
    if (x.size() != 1) throw DimError("stack_scalars: inputs must be scalar");
    needs = needs || x.requires_grad();
  }
  for (size_t i = 0; i < xs.size(); ++i) out.data()[i] = xs[i].item();
  if (needs) {
    out.set_requires_grad(true);
    out.node()->op = "stack_scalars";
    for (const Tensor& x : xs) out.node()->parents.push_back(x.node_ptr());
    TensorNode* cn = out.node();
    cn->backward_fn = [cn] {
      for (size_t i = 0; i < cn->parents.size(); ++i) {
        TensorNode* p = cn->parents[i].get();
        if (!p->requires_grad) continue;
        p->ensure_grad();
        p->grad[0] += cn->grad[i];
      }
    };
  }
  return out;
}

// out[r,:] = a[idx[r],:]; also serves as the embedding lookup.
inline Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
  if (a.rank() != 2) throw DimError("gather_rows: input must be rank-2");
  const int n = a.shape()[1];
  for (int i : idx) {
    if (i < 0 || i >= a.shape()[0]) throw std::out_of_range("gather_rows: row index out of range");
  }
  Tensor out = detail::make_op({static_cast<int>(idx.size()), n}, "gather_rows", {a});
  for (size_t r = 0; r < idx.size(); ++r) {
    const double* src = a.data() + static_cast<size_t>(idx[r]) * n;
    std::copy(src, src + n, out.data() + r * n);
  }
  if (out.requires_grad()) {
    TensorNode* an = a.node();
    TensorNode* cn = out.node();
    auto indices = idx;
    cn->backward_fn = [an, cn, indices, n] {
      an->ensure_grad();
      for (size_t r = 0; r < indices.size(); ++r) {
        double* dst = an->grad.data() + static_cast<size_t>(indices[r]) * n;
        const double* src = cn->grad.data() + r * n;
        for (int j = 0; j < n; ++j) dst[j] += src[j];
      }
    };
  }
  return out;
}

inline Tensor row(const Tensor& a, int i) {
  if (a.rank() != 2) throw DimError("row: input must be rank-2");
  if (i < 0 || i >= a.shape()[0]) throw std::out_of_range("row: index out of range");
  const int n = a.shape()[1];
  Tensor out = detail::make_op({n}, "row", {a});
  std::copy(a.data() + static_cast<size_t>(i) * n, a.data() + static_cast<size_t>(i + 1) * n, out.data());
  if (out.requires_grad()) {
    TensorNode* an = a.node();
    TensorNode* cn = out.node();
    cn->backward_fn = [an, cn, i, n] {
      an->ensure_grad();
      double* dst = an->grad.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) dst[j] += cn->grad[j];
    };
  }
  return out;
}

inline Tensor slice_cols(const Tensor& a, int c0, int c1) {
  if (a.rank() != 2) throw DimError("slice_cols: input must be rank-2");
  const int m = a.shape()[0], n = a.shape()[1];
  if (c0 < 0 || c1 > n || c0 >= c1) throw DimError("slice_cols: bad column range");
  const int w = c1 - c0;
  Tensor out = detail::make_op({m, w}, "slice_cols", {a});
  for (int i = 0; i < m; ++i) {
    const double* src = a.data() + static_cast<size_t>(i) * n + c0;
    std::copy(src, src + w, out.data() + static_cast<size_t>(i) * w);
  }
  if (out.requires_grad()) {
    TensorNode* an = a.node();
    TensorNode* cn = out.node();
    cn->backward_fn = [an, cn, m, n, c0, w] {
      an->ensure_grad();
      for (int i = 0; i < m; ++i) {
        double* dst = an->grad.data() + static_cast<size_t>(i) * n + c0;
        const double* src = cn->grad.data() + static_cast<size_t>(i) * w;
        for (int j = 0; j < w; ++j) dst[j] += src[j];
      }
    };
  }
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimError("concat_cols: empty input");
  const int m = parts[0].shape()[0];
  int n = 0;
  bool needs = false;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.shape()[0] != m) throw DimError("concat_cols: row counts disagree");
    n += p.shape()[1];
    needs = needs || p.requires_grad();
  }
  Tensor out(Shape{m, n});
  int off = 0;
  for (const Tensor& p : parts) {
    const int w = p.shape()[1];
    for (int i = 0; i < m; ++i) {
      std::copy(p.data() + static_cast<size_t>(i) * w, p.data() + static_cast<size_t>(i + 1) * w,
                out.data() + static_cast<size_t>(i) * n + off);
    }
    off += w;
  }
  if (needs) {
    out.set_requires_grad(true);
    out.node()->op = "concat_cols";
    for (const Tensor& p : parts) out.node()->parents.push_back(p.node_ptr());
    TensorNode* cn = out.node();
    cn->backward_fn = [cn, m, n] {
      int off2 = 0;
      for (auto& pp : cn->parents) {
        TensorNode* p = pp.get();
        const int w = p->shape[1];
        if (p->requires_grad) {
          p->ensure_grad();
          for (int i = 0; i < m; ++i) {
            const double* src = cn->grad.data() + static_cast<size_t>(i) * n + off2;
            double* dst = p->grad.data() + static_cast<size_t>(i) * w;
            for (int j = 0; j < w; ++j) dst[j] += src[j];
          }
        }
        off2 += w;
      }
    };
  }
  return out;
}

inline Tensor gelu(const Tensor& a) {
  Tensor out = detail::make_op(a.shape(), "gelu", {a});
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  for (size_t i = 0; i < a.size(); ++i) {
    const double x = a.data()[i];
    out.data()[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  if (out.requires_grad()) {
    TensorNode* an = a.node();
    TensorNode* cn = out.node();
    cn->backward_fn = [an, cn, kInvSqrt2] {
      constexpr double kInvSqrt2Pi = 0.3989422804014326779;
      an->ensure_grad();
      for (size_t i = 0; i < cn->grad.size(); ++i) {
        const double x = an->values[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        an->grad[i] += cn->grad[i] * (cdf + x * pdf);
      }
    };
  }
  return out;
}

// Row softmax with optional additive {0, -inf} mask. Masked entries come out
// exactly 0; max-subtraction over the unmasked support keeps it stable.
inline Tensor softmax_lastdim(const Tensor& x, const Tensor* additive_mask = nullptr) {
  const int n = x.cols();
  const int m = static_cast<int>(x.size()) / n;
  const double* mk = nullptr;
  if (additive_mask) {
    if (additive_mask->shape() != x.shape()) throw DimError("softmax_lastdim: mask shape mismatch");
    mk = additive_mask->data();
  }
  Tensor out = detail::make_op(x.shape(), "softmax", {x});
  const double neg_inf = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < m; ++i) {
    const double* xr = x.data() + static_cast<size_t>(i) * n;
    const double* mr = mk ? mk + static_cast<size_t>(i) * n : nullptr;
    double* yr = out.data() + static_cast<size_t>(i) * n;
    double mx = neg_inf;
    bool any_open = false;
    for (int j = 0; j < n; ++j) {
      if (mr && mr[j] == neg_inf) continue;
      any_open = true;
      const double z = xr[j] + (mr ? mr[j] : 0.0);
      if (z > mx) mx = z;
    }
    if (!any_open) throw ContractError("softmax_lastdim: fully masked row");
    if (!std::isfinite(mx)) throw ContractError("softmax_lastdim: non-finite row");
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
      if (mr && mr[j] == neg_inf) {
        yr[j] = 0.0;
      } else {
        yr[j] = std::exp(xr[j] + (mr ? mr[j] : 0.0) - mx);
        s += yr[j];
      }
    }
    for (int j = 0; j < n; ++j) yr[j] /= s;
    if (mr) {
      for (int j = 0; j < n; ++j) {
        if (mr[j] == neg_inf) yr[j] = 0.0;
      }
    }
  }
  if (out.requires_grad()) {
    TensorNode* xn = x.node();
    TensorNode* cn = out.node();
    cn->backward_fn = [xn, cn, m, n] {
      xn->ensure_grad();
      for (int i = 0; i < m; ++i) {
        const double* p = cn->values.data() + static_cast<size_t>(i) * n;
        const double* dy = cn->grad.data() + static_cast<size_t>(i) * n;
        double* dx = xn->grad.data() + static_cast<size_t>(i) * n;
        double inner = 0.0;
        for (int j = 0; j < n; ++j) inner += p[j] * dy[j];
        for (int j = 0; j < n; ++j) dx[j] += p[j] * (dy[j] - inner);
      }
    };
  }
  return out;
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() != 2) throw DimError("layer_norm: input must be rank-2");
  const int m = x.shape()[0], n = x.shape()[1];
  if (gain.rank() != 1 || gain.shape()[0] != n || bias.rank() != 1 || bias.shape()[0] != n) {
    throw DimError("layer_norm: gain/bias must match last dimension");
  }
  Tensor out = detail::make_op({m, n}, "layer_norm", {x, gain, bias});
  std::vector<double> xhat(static_cast<size_t>(m) * n);
  std::vector<double> inv_sigma(m);
  for (int i = 0; i < m; ++i) {
    const double* xr = x.data() + static_cast<size_t>(i) * n;
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += xr[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= n;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[i] = is;
    double* xh = xhat.data() + static_cast<size_t>(i) * n;
    double* yr = out.data() + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      xh[j] = (xr[j] - mu) * is;
      yr[j] = gain.data()[j] * xh[j] + bias.data()[j];
    }
  }
  if (out.requires_grad()) {
    TensorNode* xn = x.node();
    TensorNode* gn = gain.node();
    TensorNode* bn = bias.node();
    TensorNode* cn = out.node();
    cn->backward_fn = [xn, gn, bn, cn, m, n, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)] {
      for (int i = 0; i < m; ++i) {
        const double* dy = cn->grad.data() + static_cast<size_t>(i) * n;
        const double* xh = xhat.data() + static_cast<size_t>(i) * n;
        if (gn->requires_grad) {
          gn->ensure_grad();
          for (int j = 0; j < n; ++j) gn->grad[j] += dy[j] * xh[j];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int j = 0; j < n; ++j) bn->grad[j] += dy[j];
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          double m1 = 0.0, m2 = 0.0;
          for (int j = 0; j < n; ++j) {
            const double dyg = dy[j] * gn->values[j];
            m1 += dyg;
            m2 += dyg * xh[j];
          }
          m1 /= n;
          m2 /= n;
          double* dx = xn->grad.data() + static_cast<size_t>(i) * n;
          for (int j = 0; j < n; ++j) {
            const double dyg = dy[j] * gn->values[j];
            dx[j] += (dyg - m1 - xh[j] * m2) * inv_sigma[i];
          }
        }
      }
    };
  }
  return out;
}

// Mean negative log-softmax probability of the targets, stably in log space.
inline Tensor cross_entropy_with_logits(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2) throw DimError("cross_entropy_with_logits: logits must be rank-2");
  const int m = logits.shape()[0], v = logits.shape()[1];
  if (static_cast<int>(targets.size()) != m) {
    throw DimError("cross_entropy_with_logits: one target per row required");
  }
  for (int t : targets) {
    if (t < 0 || t >= v) throw std::out_of_range("cross_entropy_with_logits: target out of range");
  }
  Tensor out = detail::make_op({1}, "cross_entropy", {logits});
  std::vector<double> probs;
  const bool needs = out.requires_grad();
  if (needs) probs.resize(static_cast<size_t>(m) * v);
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    const double* zr = logits.data() + static_cast<size_t>(i) * v;
    double mx = zr[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, zr[j]);
    double s = 0.0;
    for (int j = 0; j < v; ++j) s += std::exp(zr[j] - mx);
    const double lse = mx + std::log(s);
    total += lse - zr[targets[i]];
    if (needs) {
      double* pr = probs.data() + static_cast<size_t>(i) * v;
      for (int j = 0; j < v; ++j) pr[j] = std::exp(zr[j] - mx) / s;
    }
  }
  out.data()[0] = total / m;
  if (needs) {
    TensorNode* zn = logits.node();
    TensorNode* cn = out.node();
    auto tg = targets;
    cn->backward_fn = [zn, cn, m, v, tg, probs = std::move(probs)] {
      zn->ensure_grad();
      const double g = cn->grad[0] / m;
      for (int i = 0; i < m; ++i) {
        const double* pr = probs.data() + static_cast<size_t>(i) * v;
        double* dz = zn->grad.data() + static_cast<size_t>(i) * v;
        for (int j = 0; j < v; ++j) dz[j] += g * pr[j];
        dz[tg[i]] -= g;
      }
    };
  }
  return out;
}

inline Tensor l2_normalize(const Tensor& x) {
  if (x.rank() != 1) throw DimError("l2_normalize: input must be rank-1");
  double nrm = 0.0;
  for (size_t i = 0; i < x.size(); ++i) nrm += x.data()[i] * x.data()[i];
  nrm = std::sqrt(nrm);
  if (nrm == 0.0) throw ContractError("l2_normalize: zero vector");
  Tensor out = detail::make_op(x.shape(), "l2_normalize", {x});
  for (size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] / nrm;
  if (out.requires_grad()) {
    TensorNode* xn = x.node();
    TensorNode* cn = out.node();
    cn->backward_fn = [xn, cn, nrm] {
      xn->ensure_grad();
      double proj = 0.0;
      for (size_t i = 0; i < cn->grad.size(); ++i) proj += cn->values[i] * cn->grad[i];
      for (size_t i = 0; i < cn->grad.size(); ++i) {
        xn->grad[i] += (cn->grad[i] - cn->values[i] * proj) / nrm;
      }
    };
  }
  return out;
}

// Reverse-mode sweep from a scalar root. Leaf gradients accumulate across
// calls; interior gradients are scratch, zeroed per sweep.
inline void backward(const Tensor& root) {
  if (root.size() != 1) throw ContractError("backward: root must be a scalar tensor");
  if (!root.requires_grad()) return;

  std::vector<TensorNode*> topo;
  std::unordered_set<TensorNode*> done;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(root.node(), 0);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (done.count(node)) {
      stack.pop_back();
      continue;
    }
    if (next < node->parents.size()) {
      TensorNode* p = node->parents[next++].get();
      if (!done.count(p) && p->requires_grad) stack.emplace_back(p, 0);
    } else {
      done.insert(node);
      topo.push_back(node);
      stack.pop_back();
    }
  }

  for (TensorNode* n : topo) {
    if (!n->is_leaf()) n->grad.assign(n->values.size(), 0.0);
  }
  root.node()->ensure_grad();
  root.node()->grad[0] += 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn();
  }
}

// Central-difference estimate of d f / d x, one coordinate at a time.
// f is evaluated with x perturbed in place and must depend on x's current
// values only through reads made during the call.
inline std::vector<double> finite_difference_gradient(const std::function<double()>& f, Tensor& x,
                                                      double eps) {
  if (eps <= 0.0) throw ContractError("finite_difference_gradient: eps must be positive");
  std::vector<double> g(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const double orig = x.data()[i];
    x.data()[i] = orig + eps;
    const double fp = f();
    x.data()[i] = orig - eps;
    const double fm = f();
    x.data()[i] = orig;
    g[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

}  // namespace convret
