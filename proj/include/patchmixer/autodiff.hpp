#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "patchmixer/rng.hpp"
#include "patchmixer/tensor.hpp"

// Reverse-mode automatic differentiation over pm::Tensor. The graph is a DAG
// of shared_ptr nodes; free functions build it, backward() walks it. Exactly
// the operations the forecasting model needs, nothing more.

namespace pm {

enum class Phase { train, eval };

template <typename T>
struct Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // same shape as value, zero until backward reaches it
  std::vector<NodePtr<T>> parents;
  std::function<void(Node<T>&)> backward_rule;
  const char* op_name = "leaf";
  bool requires_grad = false;

  explicit Node(Tensor<T> v)
      : value(std::move(v)), grad(Tensor<T>::zeros(value.shape)) {}
};

// Leaf that gradients flow into (model parameters, probe inputs).
template <typename T>
NodePtr<T> make_param(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>(std::move(value));
  n->requires_grad = true;
  return n;
}

// Leaf treated as data: no gradient is computed for it.
template <typename T>
NodePtr<T> make_constant(Tensor<T> value) {
  return std::make_shared<Node<T>>(std::move(value));
}

namespace detail {

template <typename T>
NodePtr<T> make_op(Tensor<T> value, std::vector<NodePtr<T>> parents,
                   const char* name, std::function<void(Node<T>&)> rule) {
  auto n = std::make_shared<Node<T>>(std::move(value));
  n->op_name = name;
  for (const auto& p : parents) {
    if (p->requires_grad) n->requires_grad = true;
  }
  n->parents = std::move(parents);
  if (n->requires_grad) n->backward_rule = std::move(rule);
  return n;
}

template <typename T>
std::vector<Node<T>*> topo_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents before children; root last
}

}  // namespace detail

// Reverse traversal from a scalar root. Gradients of leaves accumulate
// across calls; interior gradients are recomputed each call.
template <typename T>
void backward(const NodePtr<T>& root) {
  if (root->value.numel() != 1) {
    throw std::invalid_argument("backward: root must be a scalar, got shape " +
                                shape_str(root->value.shape));
  }
  auto order = detail::topo_order(root.get());
  for (Node<T>* n : order) {
    if (!n->parents.empty()) n->grad.fill(T(0));
  }
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_rule) n->backward_rule(*n);
  }
}

template <typename T>
void zero_grad(const std::vector<NodePtr<T>>& nodes) {
  for (const auto& n : nodes) n->grad.fill(T(0));
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> add(const NodePtr<T>& a, const NodePtr<T>& b) {
  require_same_shape(a->value, b->value, "add");
  Tensor<T> out = a->value;
  out.array() += b->value.array();
  return detail::make_op<T>(std::move(out), {a, b}, "add", [](Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) pa.grad.array() += n.grad.array();
    if (pb.requires_grad) pb.grad.array() += n.grad.array();
  });
}

template <typename T>
NodePtr<T> sub(const NodePtr<T>& a, const NodePtr<T>& b) {
  require_same_shape(a->value, b->value, "sub");
  Tensor<T> out = a->value;
  out.array() -= b->value.array();
  return detail::make_op<T>(std::move(out), {a, b}, "sub", [](Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) pa.grad.array() += n.grad.array();
    if (pb.requires_grad) pb.grad.array() -= n.grad.array();
  });
}

template <typename T>
NodePtr<T> mul(const NodePtr<T>& a, const NodePtr<T>& b) {
  require_same_shape(a->value, b->value, "mul");
  Tensor<T> out = a->value;
  out.array() *= b->value.array();
  return detail::make_op<T>(std::move(out), {a, b}, "mul", [](Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) pa.grad.array() += n.grad.array() * pb.value.array();
    if (pb.requires_grad) pb.grad.array() += n.grad.array() * pa.value.array();
  });
}

template <typename T>
NodePtr<T> scale(const NodePtr<T>& a, T factor) {
  Tensor<T> out = a->value;
  out.array() *= factor;
  return detail::make_op<T>(std::move(out), {a}, "scale", [factor](Node<T>& n) {
    auto& pa = *n.parents[0];
    if (pa.requires_grad) pa.grad.array() += n.grad.array() * factor;
  });
}

template <typename T>
NodePtr<T> add_scalar(const NodePtr<T>& a, T shift) {
  Tensor<T> out = a->value;
  out.array() += shift;
  return detail::make_op<T>(std::move(out), {a}, "add_scalar", [](Node<T>& n) {
    auto& pa = *n.parents[0];
    if (pa.requires_grad) pa.grad.array() += n.grad.array();
  });
}

// |x| with subgradient 0 at the origin.
template <typename T>
NodePtr<T> abs_value(const NodePtr<T>& a) {
  Tensor<T> out = a->value;
  out.array() = out.array().abs();
  return detail::make_op<T>(std::move(out), {a}, "abs", [](Node<T>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    for (Index i = 0; i < n.grad.numel(); ++i) {
      T x = pa.value[i];
      T s = x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0));
      pa.grad[i] += n.grad[i] * s;
    }
  });
}

// Huber-style kernel applied to a residual: 0.5*x^2/beta inside the
// threshold, |x| - 0.5*beta outside.
template <typename T>
NodePtr<T> smooth_l1(const NodePtr<T>& a, T beta) {
  if (!(beta > T(0))) {
    throw std::invalid_argument("smooth_l1: beta must be positive");
  }
  Tensor<T> out(a->value.shape);
  for (Index i = 0; i < out.numel(); ++i) {
    T x = a->value[i];
    T ax = std::abs(x);
    out[i] = ax < beta ? T(0.5) * x * x / beta : ax - T(0.5) * beta;
  }
  return detail::make_op<T>(std::move(out), {a}, "smooth_l1", [beta](Node<T>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    for (Index i = 0; i < n.grad.numel(); ++i) {
      T x = pa.value[i];
      T g = std::abs(x) < beta ? x / beta
                               : (x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)));
      pa.grad[i] += n.grad[i] * g;
    }
  });
}

// Exact GELU: x * Phi(x) with the erf form, not the tanh approximation.
template <typename T>
NodePtr<T> gelu(const NodePtr<T>& a) {
  constexpr T inv_sqrt2 = T(0.7071067811865475244);
  Tensor<T> out(a->value.shape);
  for (Index i = 0; i < out.numel(); ++i) {
    T x = a->value[i];
    out[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
  }
  return detail::make_op<T>(std::move(out), {a}, "gelu", [](Node<T>& n) {
    constexpr T c = T(0.7071067811865475244);
    const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    for (Index i = 0; i < n.grad.numel(); ++i) {
      T x = pa.value[i];
      T cdf = T(0.5) * (T(1) + std::erf(x * c));
      T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
      pa.grad[i] += n.grad[i] * (cdf + x * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> sum(const NodePtr<T>& a) {
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(a->value.array().template cast<double>().sum()));
  return detail::make_op<T>(std::move(out), {a}, "sum", [](Node<T>& n) {
    auto& pa = *n.parents[0];
    if (pa.requires_grad) pa.grad.array() += n.grad[0];
  });
}

template <typename T>
NodePtr<T> mean(const NodePtr<T>& a) {
  const T inv_n = T(1) / static_cast<T>(a->value.numel());
  Tensor<T> out = Tensor<T>::scalar(
      static_cast<T>(a->value.array().template cast<double>().sum()) * inv_n);
  return detail::make_op<T>(std::move(out), {a}, "mean", [inv_n](Node<T>& n) {
    auto& pa = *n.parents[0];
    if (pa.requires_grad) pa.grad.array() += n.grad[0] * inv_n;
  });
}

template <typename T>
NodePtr<T> reshape(const NodePtr<T>& a, Shape new_shape) {
  if (shape_numel(new_shape) != a->value.numel()) {
    throw std::invalid_argument("reshape: cannot view " +
                                shape_str(a->value.shape) + " as " +
                                shape_str(new_shape));
  }
  Tensor<T> out(std::move(new_shape), a->value.data);
  return detail::make_op<T>(std::move(out), {a}, "reshape", [](Node<T>& n) {
    auto& pa = *n.parents[0];
    if (pa.requires_grad) pa.grad.array() += n.grad.array();
  });
}

// ---------------------------------------------------------------------------
// Affine map over the last axis: y = x W + b
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> linear(const NodePtr<T>& x, const NodePtr<T>& w, const NodePtr<T>& b) {
  const Tensor<T>& xv = x->value;
  const Tensor<T>& wv = w->value;
  const Tensor<T>& bv = b->value;
  if (wv.rank() != 2 || xv.rank() < 1 || xv.shape.back() != wv.shape[0]) {
    throw std::invalid_argument("linear: shape mismatch " + shape_str(xv.shape) +
                                " vs " + shape_str(wv.shape));
  }
  if (bv.rank() != 1 || bv.shape[0] != wv.shape[1]) {
    throw std::invalid_argument("linear: bias shape mismatch " +
                                shape_str(bv.shape) + " vs " + shape_str(wv.shape));
  }
  const Index in = wv.shape[0];
  const Index out_dim = wv.shape[1];
  const Index rows = xv.numel() / in;

  Shape out_shape = xv.shape;
  out_shape.back() = out_dim;
  Tensor<T> out(out_shape);
  out.matrix(rows, out_dim).noalias() = xv.matrix(rows, in) * wv.matrix(in, out_dim);
  out.matrix(rows, out_dim).rowwise() += bv.matrix(1, out_dim).row(0);

  return detail::make_op<T>(
      std::move(out), {x, w, b}, "linear", [rows, in, out_dim](Node<T>& n) {
        auto& px = *n.parents[0];
        auto& pw = *n.parents[1];
        auto& pb = *n.parents[2];
        auto dy = n.grad.matrix(rows, out_dim);
        if (px.requires_grad) {
          px.grad.matrix(rows, in).noalias() +=
              dy * pw.value.matrix(in, out_dim).transpose();
        }
        if (pw.requires_grad) {
          pw.grad.matrix(in, out_dim).noalias() +=
              px.value.matrix(rows, in).transpose() * dy;
        }
        if (pb.requires_grad) {
          pb.grad.matrix(1, out_dim).row(0) += dy.colwise().sum();
        }
      });
}

// ---------------------------------------------------------------------------
// Grouped 1-d cross-correlation
// ---------------------------------------------------------------------------
//
// x: [C, L] or [B, C, L]; kernels: [C_out, C/groups, K]; bias: [C_out].
// groups == C gives the depthwise stage, K == 1, groups == 1 the pointwise
// stage. Output length follows L_out = (L - K) / stride + 1.

template <typename T>
NodePtr<T> grouped_conv1d(const NodePtr<T>& x, const NodePtr<T>& kernels,
                          const NodePtr<T>& bias, Index stride, Index groups) {
  const Tensor<T>& xv = x->value;
  const Tensor<T>& kv = kernels->value;
  const Tensor<T>& bv = bias->value;
  if (xv.rank() != 2 && xv.rank() != 3) {
    throw std::invalid_argument("grouped_conv1d: input must be [C,L] or [B,C,L], got " +
                                shape_str(xv.shape));
  }
  if (kv.rank() != 3) {
    throw std::invalid_argument("grouped_conv1d: kernels must be [C_out,C_in/groups,K], got " +
                                shape_str(kv.shape));
  }
  const bool batched = xv.rank() == 3;
  const Index batch = batched ? xv.shape[0] : 1;
  const Index c_in = batched ? xv.shape[1] : xv.shape[0];
  const Index len = batched ? xv.shape[2] : xv.shape[1];
  const Index c_out = kv.shape[0];
  const Index k = kv.shape[2];
  if (stride < 1) throw std::invalid_argument("grouped_conv1d: stride must be >= 1");
  if (groups < 1 || c_in % groups != 0 || c_out % groups != 0) {
    throw std::invalid_argument(
        "grouped_conv1d: channels not divisible by groups (C_in=" +
        std::to_string(c_in) + ", C_out=" + std::to_string(c_out) +
        ", groups=" + std::to_string(groups) + ")");
  }
  if (kv.shape[1] != c_in / groups) {
    throw std::invalid_argument("grouped_conv1d: kernel shape " + shape_str(kv.shape) +
                                " inconsistent with C_in=" + std::to_string(c_in) +
                                ", groups=" + std::to_string(groups));
  }
  if (len < k) {
    throw std::invalid_argument("grouped_conv1d: input shorter than kernel (L=" +
                                std::to_string(len) + ", K=" + std::to_string(k) + ")");
  }
  if (bv.rank() != 1 || bv.shape[0] != c_out) {
    throw std::invalid_argument("grouped_conv1d: bias shape mismatch " +
                                shape_str(bv.shape) + " vs C_out=" + std::to_string(c_out));
  }
  const Index c_in_g = c_in / groups;
  const Index out_per_group = c_out / groups;
  const Index l_out = (len - k) / stride + 1;
  const bool pointwise = (k == 1 && stride == 1 && groups == 1);

  Shape out_shape = batched ? Shape{batch, c_out, l_out} : Shape{c_out, l_out};
  Tensor<T> out(out_shape);

  if (pointwise) {
    auto kmat = kv.matrix(c_out, c_in);
    for (Index b = 0; b < batch; ++b) {
      auto xin = Tensor<T>::ConstMapType(xv.data.data() + b * c_in * len, c_in, len);
      auto yout = typename Tensor<T>::MapType(out.data.data() + b * c_out * l_out, c_out, l_out);
      yout.noalias() = kmat * xin;
      yout.colwise() += bv.matrix(c_out, 1).col(0);
    }
  } else {
    for (Index b = 0; b < batch; ++b) {
      for (Index oc = 0; oc < c_out; ++oc) {
        const Index g = oc / out_per_group;
        for (Index t = 0; t < l_out; ++t) {
          T acc = bv[oc];
          const Index base = t * stride;
          for (Index icg = 0; icg < c_in_g; ++icg) {
            const Index ic = g * c_in_g + icg;
            const T* xp = xv.data.data() + (b * c_in + ic) * len + base;
            const T* kp = kv.data.data() + (oc * c_in_g + icg) * k;
            T dot = T(0);
            for (Index j = 0; j < k; ++j) dot += xp[j] * kp[j];
            acc += dot;
          }
          out.data[static_cast<std::size_t>((b * c_out + oc) * l_out + t)] = acc;
        }
      }
    }
  }

  auto rule = [batch, c_in, len, c_out, k, stride, groups, c_in_g, out_per_group,
               l_out, pointwise](Node<T>& n) {
    auto& px = *n.parents[0];
    auto& pk = *n.parents[1];
    auto& pb = *n.parents[2];
    const Tensor<T>& xv2 = px.value;
    const Tensor<T>& kv2 = pk.value;
    if (pb.requires_grad) {
      for (Index b = 0; b < batch; ++b)
        for (Index oc = 0; oc < c_out; ++oc) {
          const T* gp = n.grad.data.data() + (b * c_out + oc) * l_out;
          T s = T(0);
          for (Index t = 0; t < l_out; ++t) s += gp[t];
          pb.grad[oc] += s;
        }
    }
    if (pointwise) {
      auto kmat = kv2.matrix(c_out, c_in);
      for (Index b = 0; b < batch; ++b) {
        auto dy = Tensor<T>::ConstMapType(n.grad.data.data() + b * c_out * l_out, c_out, l_out);
        auto xin = Tensor<T>::ConstMapType(xv2.data.data() + b * c_in * len, c_in, len);
        if (px.requires_grad) {
          typename Tensor<T>::MapType dx(px.grad.data.data() + b * c_in * len, c_in, len);
          dx.noalias() += kmat.transpose() * dy;
        }
        if (pk.requires_grad) {
          pk.grad.matrix(c_out, c_in).noalias() += dy * xin.transpose();
        }
      }
      return;
    }
    for (Index b = 0; b < batch; ++b) {
      for (Index oc = 0; oc < c_out; ++oc) {
        const Index g = oc / out_per_group;
        const T* gp = n.grad.data.data() + (b * c_out + oc) * l_out;
        for (Index t = 0; t < l_out; ++t) {
          const T gy = gp[t];
          if (gy == T(0)) continue;
          const Index base = t * stride;
          for (Index icg = 0; icg < c_in_g; ++icg) {
            const Index ic = g * c_in_g + icg;
            const T* xp = xv2.data.data() + (b * c_in + ic) * len + base;
            const T* kp = kv2.data.data() + (oc * c_in_g + icg) * k;
            if (pk.requires_grad) {
              T* dkp = pk.grad.data.data() + (oc * c_in_g + icg) * k;
              for (Index j = 0; j < k; ++j) dkp[j] += gy * xp[j];
            }
            if (px.requires_grad) {
              T* dxp = px.grad.data.data() + (b * c_in + ic) * len + base;
              for (Index j = 0; j < k; ++j) dxp[j] += gy * kp[j];
            }
          }
        }
      }
    }
  };
  return detail::make_op<T>(std::move(out), {x, kernels, bias}, "grouped_conv1d",
                            std::move(rule));
}

// ---------------------------------------------------------------------------
// Batch normalization over (batch, length) per channel
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  explicit BatchNormState(Index channels)
      : running_mean(Tensor<T>::zeros({channels})),
        running_var(Tensor<T>::full({channels}, T(1))) {}
  BatchNormState() = default;
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// x: [B, C, L]; gamma, beta: [C]. Train mode normalizes with batch moments
// and folds them into the running statistics; eval mode normalizes with the
// running statistics.
template <typename T>
NodePtr<T> batchnorm1d(const NodePtr<T>& x, const NodePtr<T>& gamma,
                       const NodePtr<T>& beta, BatchNormState<T>& state,
                       Phase phase) {
  const Tensor<T>& xv = x->value;
  if (xv.rank() != 3) {
    throw std::invalid_argument("batchnorm1d: input must be [B,C,L], got " +
                                shape_str(xv.shape));
  }
  const Index batch = xv.shape[0];
  const Index channels = xv.shape[1];
  const Index len = xv.shape[2];
  if (gamma->value.numel() != channels || beta->value.numel() != channels ||
      state.running_mean.numel() != channels) {
    throw std::invalid_argument("batchnorm1d: parameter length does not match C=" +
                                std::to_string(channels));
  }
  const T eps = static_cast<T>(kBatchNormEps);
  const Index m = batch * len;

  Tensor<T> mean_c({channels});
  Tensor<T> inv_std_c({channels});
  if (phase == Phase::train) {
    for (Index c = 0; c < channels; ++c) {
      double s = 0.0, s2 = 0.0;
      for (Index b = 0; b < batch; ++b) {
        const T* xp = xv.data.data() + (b * channels + c) * len;
        for (Index t = 0; t < len; ++t) {
          s += xp[t];
          s2 += static_cast<double>(xp[t]) * xp[t];
        }
      }
      const double mu = s / static_cast<double>(m);
      const double var = std::max(0.0, s2 / static_cast<double>(m) - mu * mu);
      mean_c[c] = static_cast<T>(mu);
      inv_std_c[c] = T(1) / std::sqrt(static_cast<T>(var) + eps);
      const double mom = kBatchNormMomentum;
      const double var_unbiased =
          m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
      state.running_mean[c] =
          static_cast<T>((1.0 - mom) * state.running_mean[c] + mom * mu);
      state.running_var[c] =
          static_cast<T>((1.0 - mom) * state.running_var[c] + mom * var_unbiased);
    }
  } else {
    for (Index c = 0; c < channels; ++c) {
      mean_c[c] = state.running_mean[c];
      inv_std_c[c] = T(1) / std::sqrt(state.running_var[c] + eps);
    }
  }

  Tensor<T> normalized(xv.shape);
  Tensor<T> out(xv.shape);
  for (Index b = 0; b < batch; ++b) {
    for (Index c = 0; c < channels; ++c) {
      const T* xp = xv.data.data() + (b * channels + c) * len;
      T* np = normalized.data.data() + (b * channels + c) * len;
      T* op = out.data.data() + (b * channels + c) * len;
      const T g = gamma->value[c];
      const T bshift = beta->value[c];
      for (Index t = 0; t < len; ++t) {
        np[t] = (xp[t] - mean_c[c]) * inv_std_c[c];
        op[t] = g * np[t] + bshift;
      }
    }
  }

  const bool train_mode = phase == Phase::train;
  auto rule = [batch, channels, len, m, train_mode, normalized = std::move(normalized),
               inv_std = std::move(inv_std_c)](Node<T>& n) {
    auto& px = *n.parents[0];
    auto& pg = *n.parents[1];
    auto& pb = *n.parents[2];
    for (Index c = 0; c < channels; ++c) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (Index b = 0; b < batch; ++b) {
        const T* gp = n.grad.data.data() + (b * channels + c) * len;
        const T* np = normalized.data.data() + (b * channels + c) * len;
        for (Index t = 0; t < len; ++t) {
          sum_dy += gp[t];
          sum_dy_xhat += static_cast<double>(gp[t]) * np[t];
        }
      }
      if (pg.requires_grad) pg.grad[c] += static_cast<T>(sum_dy_xhat);
      if (pb.requires_grad) pb.grad[c] += static_cast<T>(sum_dy);
      if (px.requires_grad) {
        const T g = pg.value[c];
        const T istd = inv_std[c];
        if (train_mode) {
          const T mean_dy = static_cast<T>(sum_dy / static_cast<double>(m));
          const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / static_cast<double>(m));
          for (Index b = 0; b < batch; ++b) {
            const T* gp = n.grad.data.data() + (b * channels + c) * len;
            const T* np = normalized.data.data() + (b * channels + c) * len;
            T* dxp = px.grad.data.data() + (b * channels + c) * len;
            for (Index t = 0; t < len; ++t) {
              dxp[t] += g * istd * (gp[t] - mean_dy - np[t] * mean_dy_xhat);
            }
          }
        } else {
          for (Index b = 0; b < batch; ++b) {
            const T* gp = n.grad.data.data() + (b * channels + c) * len;
            T* dxp = px.grad.data.data() + (b * channels + c) * len;
            for (Index t = 0; t < len; ++t) dxp[t] += g * istd * gp[t];
          }
        }
      }
    }
  };
  return detail::make_op<T>(std::move(out), {x, gamma, beta}, "batchnorm1d",
                            std::move(rule));
}

// ---------------------------------------------------------------------------
// Series ops used by the patching pipeline
// ---------------------------------------------------------------------------

// Replicate the last element of each row `count` times: [..., L] -> [..., L+count].
template <typename T>
NodePtr<T> pad_last(const NodePtr<T>& x, Index count) {
  if (count < 0) throw std::invalid_argument("pad_last: negative count");
  const Tensor<T>& xv = x->value;
  if (xv.rank() < 1) throw std::invalid_argument("pad_last: rank-0 input");
  const Index last = xv.shape.back();
  const Index rows = xv.numel() / last;
  Shape out_shape = xv.shape;
  out_shape.back() = last + count;
  Tensor<T> out(out_shape);
  for (Index r = 0; r < rows; ++r) {
    const T* xp = xv.data.data() + r * last;
    T* op = out.data.data() + r * (last + count);
    std::copy(xp, xp + last, op);
    std::fill(op + last, op + last + count, xp[last - 1]);
  }
  return detail::make_op<T>(std::move(out), {x}, "pad_last",
                            [rows, last, count](Node<T>& n) {
                              auto& px = *n.parents[0];
                              if (!px.requires_grad) return;
                              for (Index r = 0; r < rows; ++r) {
                                const T* gp = n.grad.data.data() + r * (last + count);
                                T* dxp = px.grad.data.data() + r * last;
                                for (Index t = 0; t < last; ++t) dxp[t] += gp[t];
                                T tail = T(0);
                                for (Index t = last; t < last + count; ++t) tail += gp[t];
                                dxp[last - 1] += tail;
                              }
                            });
}

// Sliding windows of length `patch_len` at stride `stride` over the last
// axis: [B, L] -> [B, N, P]. Overlapping windows copy; the backward pass
// scatter-adds the overlaps.
template <typename T>
NodePtr<T> unfold_windows(const NodePtr<T>& x, Index patch_len, Index stride) {
  const Tensor<T>& xv = x->value;
  if (xv.rank() != 2) {
    throw std::invalid_argument("unfold_windows: input must be [B,L], got " +
                                shape_str(xv.shape));
  }
  if (patch_len < 1 || stride < 1) {
    throw std::invalid_argument("unfold_windows: patch length and stride must be >= 1");
  }
  const Index rows = xv.shape[0];
  const Index len = xv.shape[1];
  if (patch_len > len) {
    throw std::invalid_argument("unfold_windows: patch length " +
                                std::to_string(patch_len) +
                                " exceeds series length " + std::to_string(len));
  }
  const Index n_patches = (len - patch_len) / stride + 1;
  Tensor<T> out({rows, n_patches, patch_len});
  for (Index r = 0; r < rows; ++r) {
    const T* xp = xv.data.data() + r * len;
    for (Index i = 0; i < n_patches; ++i) {
      T* op = out.data.data() + (r * n_patches + i) * patch_len;
      std::copy(xp + i * stride, xp + i * stride + patch_len, op);
    }
  }
  return detail::make_op<T>(
      std::move(out), {x}, "unfold_windows",
      [rows, len, n_patches, patch_len, stride](Node<T>& n) {
        auto& px = *n.parents[0];
        if (!px.requires_grad) return;
        for (Index r = 0; r < rows; ++r) {
          T* dxp = px.grad.data.data() + r * len;
          for (Index i = 0; i < n_patches; ++i) {
            const T* gp = n.grad.data.data() + (r * n_patches + i) * patch_len;
            for (Index j = 0; j < patch_len; ++j) dxp[i * stride + j] += gp[j];
          }
        }
      });
}

// Per-row affine with data-derived constants (the instance-norm inverse):
// y[r, ...] = scale[r] * x[r, ...] + shift[r].
template <typename T>
NodePtr<T> row_affine(const NodePtr<T>& x, Tensor<T> row_scale, Tensor<T> row_shift) {
  const Tensor<T>& xv = x->value;
  if (xv.rank() < 2) {
    throw std::invalid_argument("row_affine: input must have a leading row axis, got " +
                                shape_str(xv.shape));
  }
  const Index rows = xv.shape[0];
  if (row_scale.numel() != rows || row_shift.numel() != rows) {
    throw std::invalid_argument("row_affine: per-row constants " +
                                shape_str(row_scale.shape) + " do not match rows=" +
                                std::to_string(rows));
  }
  const Index cols = xv.numel() / rows;
  Tensor<T> out(xv.shape);
  for (Index r = 0; r < rows; ++r) {
    const T* xp = xv.data.data() + r * cols;
    T* op = out.data.data() + r * cols;
    for (Index j = 0; j < cols; ++j) op[j] = row_scale[r] * xp[j] + row_shift[r];
  }
  return detail::make_op<T>(std::move(out), {x}, "row_affine",
                            [rows, cols, row_scale = std::move(row_scale)](Node<T>& n) {
                              auto& px = *n.parents[0];
                              if (!px.requires_grad) return;
                              for (Index r = 0; r < rows; ++r) {
                                const T* gp = n.grad.data.data() + r * cols;
                                T* dxp = px.grad.data.data() + r * cols;
                                for (Index j = 0; j < cols; ++j)
                                  dxp[j] += gp[j] * row_scale[r];
                              }
                            });
}

// Inverted dropout; identity in eval mode or at rate 0.
template <typename T>
NodePtr<T> dropout(const NodePtr<T>& x, double rate, Rng& rng, Phase phase) {
  if (rate < 0.0 || rate >= 1.0) {
    throw std::invalid_argument("dropout: rate must be in [0, 1)");
  }
  if (phase == Phase::eval || rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  Tensor<T> mask(x->value.shape);
  for (Index i = 0; i < mask.numel(); ++i) {
    mask[i] = rng.uniform() < rate ? T(0) : keep_scale;
  }
  Tensor<T> out = x->value;
  out.array() *= mask.array();
  return detail::make_op<T>(std::move(out), {x}, "dropout",
                            [mask = std::move(mask)](Node<T>& n) {
                              auto& px = *n.parents[0];
                              if (!px.requires_grad) return;
                              px.grad.array() += n.grad.array() * mask.array();
                            });
}

}  // namespace pm
