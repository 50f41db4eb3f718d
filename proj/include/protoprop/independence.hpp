#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "protoprop/common.hpp"
#include "protoprop/tape.hpp"
#include "protoprop/tensor.hpp"

namespace protoprop {

inline constexpr double kBandwidthFloor = 1e-8;

struct HsicConfig {
  double lambda_h = 10.0;
  bool normalized = true;
  // The biased estimator's O(1/m) bias dominates at tiny m, so smaller
  // batches skip the loss for that step.
  std::size_t min_batch = 8;
};

enum class KernelKind { gaussian, linear };

inline Tensor one_hot(const std::vector<std::size_t>& labels, std::size_t k) {
  Tensor out({labels.size(), k});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= k) {
      throw ContractError("one_hot: label out of range");
    }
    out(i, labels[i]) = 1.0;
  }
  return out;
}

// Median of the m(m-1)/2 pairwise Euclidean distances, floored at 1e-8 so
// degenerate point sets still give a usable bandwidth. Even pair counts
// average the two middle distances.
inline double median_heuristic(const Tensor& U) {
  if (U.rank() != 2) throw ShapeError("median_heuristic expects [m, d]");
  const std::size_t m = U.rows();
  if (m < 2) {
    throw ContractError("median_heuristic: need at least 2 points");
  }
  std::vector<double> dists;
  dists.reserve(m * (m - 1) / 2);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < U.cols(); ++c) {
        const double d = U(i, c) - U(j, c);
        s += d * d;
      }
      dists.push_back(std::sqrt(s));
    }
  }
  std::sort(dists.begin(), dists.end());
  const std::size_t n = dists.size();
  const double med = (n % 2 == 1)
                         ? dists[n / 2]
                         : 0.5 * (dists[n / 2 - 1] + dists[n / 2]);
  return std::max(med, kBandwidthFloor);
}

// k_ij = exp(-||u_i - u_j||^2 / sigma^2); note the convention has no
// factor 2 in the denominator.
inline Tensor gaussian_kernel_matrix(const Tensor& U, double sigma) {
  if (U.rank() != 2) throw ShapeError("gaussian_kernel expects [m, d]");
  if (!(sigma > 0.0)) {
    throw ContractError("gaussian_kernel: bandwidth must be positive");
  }
  const std::size_t m = U.rows();
  const double inv = 1.0 / (sigma * sigma);
  Tensor k({m, m});
  for (std::size_t i = 0; i < m; ++i) {
    k(i, i) = 1.0;
    for (std::size_t j = i + 1; j < m; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < U.cols(); ++c) {
        const double d = U(i, c) - U(j, c);
        s += d * d;
      }
      const double v = std::exp(-s * inv);
      k(i, j) = v;
      k(j, i) = v;
    }
  }
  return k;
}

inline Tensor linear_kernel_matrix(const Tensor& V) {
  if (V.rank() != 2) throw ShapeError("linear_kernel expects [m, d]");
  const std::size_t m = V.rows();
  Tensor k({m, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i; j < m; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < V.cols(); ++c) s += V(i, c) * V(j, c);
      k(i, j) = s;
      k(j, i) = s;
    }
  }
  return k;
}

inline Tensor kernel_matrix(const Tensor& X, KernelKind kind) {
  return kind == KernelKind::gaussian
             ? gaussian_kernel_matrix(X, median_heuristic(X))
             : linear_kernel_matrix(X);
}

namespace detail {

// H K H with H = I - (1/m) 11^T.
inline Tensor double_center(const Tensor& k) {
  const std::size_t m = k.rows();
  Tensor out = k;
  std::vector<double> row_mean(m, 0.0), col_mean(m, 0.0);
  double grand = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      row_mean[i] += k(i, j);
      col_mean[j] += k(i, j);
      grand += k(i, j);
    }
  }
  for (double& v : row_mean) v /= static_cast<double>(m);
  for (double& v : col_mean) v /= static_cast<double>(m);
  grand /= static_cast<double>(m * m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j)
      out(i, j) = k(i, j) - row_mean[i] - col_mean[j] + grand;
  return out;
}

// trace(K H L H) = trace((H K H)(H L H)) since H is idempotent; centering
// both sides makes a constant input on either side an exact zero.
inline double hsic_from_kernels(const Tensor& k, const Tensor& l) {
  const std::size_t m = k.rows();
  const Tensor kc = double_center(k);
  const Tensor lc = double_center(l);
  double tr = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) tr += kc(i, j) * lc(j, i);
  // nonnegative in exact arithmetic; clamp roundoff
  return std::max(0.0, tr / static_cast<double>(m * m));
}

}  // namespace detail

// Biased empirical HSIC: (1/m^2) trace(K H L H). Gaussian kernels use the
// median-distance bandwidth of their own side.
inline double hsic_biased(const Tensor& U, KernelKind ku, const Tensor& V,
                          KernelKind kv) {
  if (U.rank() != 2 || V.rank() != 2 || U.rows() != V.rows()) {
    throw ContractError("hsic_biased: inputs must share the batch size");
  }
  if (U.rows() < 2) {
    throw ContractError("hsic_biased: need at least 2 samples");
  }
  return detail::hsic_from_kernels(kernel_matrix(U, ku),
                                   kernel_matrix(V, kv));
}

struct NormalizedHsic {
  double value = 0.0;
  bool degenerate = false;
};

// hsic(U,V) / sqrt(hsic(U,U) hsic(V,V)); constant inputs make a self-term
// vanish, reported as degenerate with value 0.
inline NormalizedHsic hsic_normalized(const Tensor& U, KernelKind ku,
                                      const Tensor& V, KernelKind kv) {
  if (U.rank() != 2 || V.rank() != 2 || U.rows() != V.rows()) {
    throw ContractError("hsic_normalized: inputs must share the batch size");
  }
  const Tensor k = kernel_matrix(U, ku);
  const Tensor l = kernel_matrix(V, kv);
  const double hxx = detail::hsic_from_kernels(k, k);
  const double hyy = detail::hsic_from_kernels(l, l);
  if (hxx <= 1e-20 || hyy <= 1e-20) {
    return {0.0, true};
  }
  return {detail::hsic_from_kernels(k, l) / std::sqrt(hxx * hyy), false};
}

// ---- differentiable path -------------------------------------------------

inline VarId gaussian_kernel_node(Tape& t, VarId z, double sigma) {
  if (!(sigma > 0.0)) {
    throw ContractError("gaussian_kernel: bandwidth must be positive");
  }
  return t.exp(t.scale(t.self_sqdist(z), -1.0 / (sigma * sigma)));
}

inline VarId linear_kernel_node(Tape& t, VarId v) {
  return t.matmul(v, t.transpose(v));
}

inline VarId hsic_biased_node(Tape& t, VarId k, VarId l) {
  const std::size_t m = t.value(k).rows();
  return t.scale(t.dot(t.center(k), t.center(l)),
                 1.0 / static_cast<double>(m * m));
}

struct HsicNode {
  VarId value;
  bool degenerate = false;
};

inline HsicNode hsic_normalized_node(Tape& t, VarId k, VarId l) {
  const VarId hxy = hsic_biased_node(t, k, l);
  const VarId hxx = hsic_biased_node(t, k, k);
  const VarId hyy = hsic_biased_node(t, l, l);
  if (t.value(hxx).item() <= 1e-20 || t.value(hyy).item() <= 1e-20) {
    return {t.leaf(Tensor::scalar(0.0)), true};
  }
  return {t.div(hxy, t.sqrt(t.mul(hxx, hyy))), false};
}

struct IndependenceLoss {
  VarId value;
  bool skipped = false;      // batch below the minimum size
  bool degenerate = false;   // a normalization self-term vanished
};

// Cross-term HSIC penalty with explicit bandwidths: lambda_h/2 *
// (HSIC(z_a, O) + HSIC(z_o, A)). The bandwidths are constants of the
// batch; no gradient flows through them.
inline IndependenceLoss independence_loss_with_bandwidths(
    Tape& t, VarId z_a, VarId z_o, const Tensor& attr_onehot,
    const Tensor& obj_onehot, const HsicConfig& cfg, double sigma_a,
    double sigma_o) {
  if (cfg.lambda_h < 0.0) {
    throw ContractError("independence loss weight must be nonnegative");
  }
  const std::size_t m = t.value(z_a).rows();
  if (t.value(z_o).rows() != m || attr_onehot.rows() != m ||
      obj_onehot.rows() != m) {
    throw ContractError("independence_loss: batch sizes disagree");
  }
  if (m < 2 || m < cfg.min_batch) {
    return {t.leaf(Tensor::scalar(0.0)), true, false};
  }
  if (cfg.lambda_h == 0.0) {
    return {t.leaf(Tensor::scalar(0.0)), false, false};
  }

  const VarId k_a = gaussian_kernel_node(t, z_a, sigma_a);
  const VarId k_o = gaussian_kernel_node(t, z_o, sigma_o);
  const VarId l_attr = linear_kernel_node(t, t.leaf(attr_onehot));
  const VarId l_obj = linear_kernel_node(t, t.leaf(obj_onehot));

  VarId ha, ho;
  bool degenerate = false;
  if (cfg.normalized) {
    const HsicNode na = hsic_normalized_node(t, k_a, l_obj);
    const HsicNode no = hsic_normalized_node(t, k_o, l_attr);
    ha = na.value;
    ho = no.value;
    degenerate = na.degenerate || no.degenerate;
  } else {
    ha = hsic_biased_node(t, k_a, l_obj);
    ho = hsic_biased_node(t, k_o, l_attr);
  }
  return {t.scale(t.add(ha, ho), 0.5 * cfg.lambda_h), false, degenerate};
}

// Bandwidths from the current batch embeddings via the median heuristic.
inline IndependenceLoss independence_loss(Tape& t, VarId z_a, VarId z_o,
                                          const Tensor& attr_onehot,
                                          const Tensor& obj_onehot,
                                          const HsicConfig& cfg) {
  const std::size_t m = t.value(z_a).rows();
  if (m < 2 || m < cfg.min_batch || cfg.lambda_h < 0.0) {
    return independence_loss_with_bandwidths(t, z_a, z_o, attr_onehot,
                                             obj_onehot, cfg, 1.0, 1.0);
  }
  return independence_loss_with_bandwidths(
      t, z_a, z_o, attr_onehot, obj_onehot, cfg,
      median_heuristic(t.value(z_a)), median_heuristic(t.value(z_o)));
}

}  // namespace protoprop
