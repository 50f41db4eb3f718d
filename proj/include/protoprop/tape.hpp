#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "protoprop/tensor.hpp"

namespace protoprop {

// Handle to a node on a Tape. Only meaningful for the tape that issued it.
struct VarId {
  std::uint32_t index = UINT32_MAX;
  bool valid() const { return index != UINT32_MAX; }
};

// Gradients for every differentiable leaf, in registration order.
// max_rel_error is filled in by fd_check, not by backward().
struct GradientReport {
  std::vector<VarId> leaves;
  std::vector<Tensor> grads;
  double max_rel_error = 0.0;
};

namespace detail {

using EigenMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                               Eigen::RowMajor>;
using MapMat = Eigen::Map<EigenMat>;
using CMapMat = Eigen::Map<const EigenMat>;

inline CMapMat as_mat(const Tensor& t) {
  return CMapMat(t.data(), static_cast<Eigen::Index>(t.rows()),
                 static_cast<Eigen::Index>(t.cols()));
}

inline MapMat as_mat(Tensor& t) {
  return MapMat(t.data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

}  // namespace detail

// Geometry of a stride/pad convolution expressed through im2col: the input
// batch [N,H,W,C] is unrolled to a patch matrix [N*OH*OW, K*K*C] so the
// convolution itself becomes a matmul with a [K*K*C, C_out] weight.
struct Conv2dGeom {
  std::size_t in_h = 0, in_w = 0, in_c = 0;
  std::size_t kernel = 3, stride = 2, pad = 1;

  std::size_t out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  std::size_t out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
  std::size_t patch_len() const { return kernel * kernel * in_c; }
};

// Record of tensor operations with reverse-mode differentiation.
// Nodes are appended in topological order; backward() walks them in
// reverse. Rebuilt per training step rather than reused.
class Tape {
  struct Node {
    Tensor value;
    Tensor grad;                   // allocated by backward()
    bool requires_grad = false;    // reaches a differentiable leaf
    bool is_leaf = false;
    std::function<Tensor(const Tape&)> forward;           // null for leaves
    std::function<void(Tape&, const Node&)> backprop;     // null for leaves
  };

 public:
  VarId leaf(Tensor value, bool requires_grad = false) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.is_leaf = true;
    const VarId id = push(std::move(n));
    if (requires_grad) diff_leaves_.push_back(id);
    return id;
  }

  const Tensor& value(VarId id) const { return node(id).value; }
  const Tensor& grad(VarId id) const { return node(id).grad; }
  std::size_t node_count() const { return nodes_.size(); }
  const std::vector<VarId>& differentiable_leaves() const {
    return diff_leaves_;
  }

  // Recomputes every non-leaf value in recording order. Identical inputs
  // reproduce recorded outputs bit-exactly (all forwards are deterministic).
  void replay() {
    for (auto& n : nodes_) {
      if (!n.is_leaf) n.value = n.forward(*this);
    }
  }

  void set_leaf_value(VarId id, Tensor value) {
    Node& n = node_mut(id);
    if (!n.is_leaf) throw ContractError("set_leaf_value on a non-leaf node");
    if (!n.value.same_shape(value)) {
      throw ShapeError("set_leaf_value: shape mismatch");
    }
    n.value = std::move(value);
  }

  // Reverse sweep from a scalar output. Returns gradients for every
  // differentiable leaf; leaves unreached by the output get zeros.
  GradientReport backward(VarId output) {
    const Node& out = node(output);
    if (out.value.size() != 1) {
      throw ContractError("backward requires a scalar output, got shape " +
                          shape_to_string(out.value.shape()));
    }
    for (auto& n : nodes_) {
      n.grad = Tensor::zeros(n.value.shape());
    }
    node_mut(output).grad.at(0) = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (n.is_leaf || !n.requires_grad) continue;
      n.backprop(*this, n);
    }
    GradientReport report;
    report.leaves = diff_leaves_;
    for (VarId id : diff_leaves_) report.grads.push_back(node(id).grad);
    return report;
  }

  // ---- primitive ops -------------------------------------------------

  VarId matmul(VarId a, VarId b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    require_rank2(av, "matmul lhs");
    require_rank2(bv, "matmul rhs");
    if (av.cols() != bv.rows()) {
      throw ShapeError("matmul: inner dimensions disagree, " +
                       shape_to_string(av.shape()) + " x " +
                       shape_to_string(bv.shape()));
    }
    return record(
        {a, b},
        [a, b](const Tape& t) {
          const Tensor& x = t.value(a);
          const Tensor& y = t.value(b);
          Tensor out({x.rows(), y.cols()});
          detail::as_mat(out).noalias() =
              detail::as_mat(x) * detail::as_mat(y);
          return out;
        },
        [a, b](Tape& t, const Node& n) {
          const Tensor& x = t.value(a);
          const Tensor& y = t.value(b);
          if (t.wants_grad(a)) {
            detail::as_mat(t.grad_mut(a)).noalias() +=
                detail::as_mat(n.grad) * detail::as_mat(y).transpose();
          }
          if (t.wants_grad(b)) {
            detail::as_mat(t.grad_mut(b)).noalias() +=
                detail::as_mat(x).transpose() * detail::as_mat(n.grad);
          }
        });
  }

  VarId transpose(VarId a) {
    require_rank2(value(a), "transpose");
    return record(
        {a},
        [a](const Tape& t) {
          const Tensor& x = t.value(a);
          Tensor out({x.cols(), x.rows()});
          for (std::size_t r = 0; r < x.rows(); ++r)
            for (std::size_t c = 0; c < x.cols(); ++c) out(c, r) = x(r, c);
          return out;
        },
        [a](Tape& t, const Node& n) {
          if (!t.wants_grad(a)) return;
          Tensor& g = t.grad_mut(a);
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c)
              g(r, c) += n.grad(c, r);
        });
  }

  // Same data, new shape; the element count must match.
  VarId reshape(VarId a, std::vector<std::size_t> shape) {
    if (shape_product(shape) != value(a).size()) {
      throw ShapeError("reshape: element count mismatch from " +
                       shape_to_string(value(a).shape()) + " to " +
                       shape_to_string(shape));
    }
    auto shp = std::make_shared<std::vector<std::size_t>>(std::move(shape));
    return record(
        {a},
        [a, shp](const Tape& t) {
          const Tensor& x = t.value(a);
          Tensor out(*shp);
          std::copy(x.data(), x.data() + x.size(), out.data());
          return out;
        },
        [a](Tape& t, const Node& n) {
          if (!t.wants_grad(a)) return;
          Tensor& g = t.grad_mut(a);
          for (std::size_t i = 0; i < g.size(); ++i)
            g.at(i) += n.grad.at(i);
        });
  }

  VarId add(VarId a, VarId b) { return binary_elementwise(a, b, OpAdd{}); }
  VarId sub(VarId a, VarId b) { return binary_elementwise(a, b, OpSub{}); }
  VarId mul(VarId a, VarId b) { return binary_elementwise(a, b, OpMul{}); }
  VarId div(VarId a, VarId b) { return binary_elementwise(a, b, OpDiv{}); }

  VarId scale(VarId a, double c) {
    return record(
        {a},
        [a, c](const Tape& t) {
          Tensor out = t.value(a);
          for (std::size_t i = 0; i < out.size(); ++i) out.at(i) *= c;
          return out;
        },
        [a, c](Tape& t, const Node& n) {
          if (!t.wants_grad(a)) return;
          Tensor& g = t.grad_mut(a);
          for (std::size_t i = 0; i < g.size(); ++i)
            g.at(i) += c * n.grad.at(i);
        });
  }

  VarId add_scalar(VarId a, double c) {
    return record(
        {a},
        [a, c](const Tape& t) {
          Tensor out = t.value(a);
          for (std::size_t i = 0; i < out.size(); ++i) out.at(i) += c;
          return out;
        },
        [a](Tape& t, const Node& n) {
          if (!t.wants_grad(a)) return;
          Tensor& g = t.grad_mut(a);
          for (std::size_t i = 0; i < g.size(); ++i) g.at(i) += n.grad.at(i);
        });
  }

  VarId relu(VarId a) {
    return record(
        {a},
        [a](const Tape& t) {
          Tensor out = t.value(a);
          for (std::size_t i = 0; i < out.size(); ++i)
            if (out.at(i) < 0.0) out.at(i) = 0.0;
          return out;
        },
        [a](Tape& t, const Node& n) {
          if (!t.wants_grad(a)) return;
          const Tensor& x = t.value(a);
          Tensor& g = t.grad_mut(a);
          for (std::size_t i = 0; i < g.size(); ++i)
            if (x.at(i) > 0.0) g.at(i) += n.grad.at(i);
        });
  }

  VarId exp(VarId a) {
    return record(
        {a},
        [a](const Tape& t) {
          Tensor out = t.value(a);
          for (std::size_t i = 0; i < out.size(); ++i)
            out.at(i) = std::exp(out.at(i));
          return out;
        },
        [a](Tape& t, const Node& n) {
          if (!t.wants_grad(a)) return;
          Tensor& g = t.grad_mut(a);
          for (std::size_t i = 0; i < g.size(); ++i)
            g.at(i) += n.value.at(i) * n.grad.at(i);
        });
  }

  VarId sqrt(VarId a) {
    return record(
        {a},
        [a](const Tape& t) {
          Tensor out = t.value(a);
          for (std::size_t i = 0; i < out.size(); ++i)
            out.at(i) = std::sqrt(out.at(i));
          return out;
        },
        [a](Tape& t, const Node& n) {
          if (!t.wants_grad(a)) return;
          Tensor& g = t.grad_mut(a);
          for (std::size_t i = 0; i < g.size(); ++i)
            g.at(i) += 0.5 / n.value.at(i) * n.grad.at(i);
        });
  }

  VarId sum(VarId a) {
    return record(
        {a},
        [a](const Tape& t) {
          const Tensor& x = t.value(a);
          double s = 0.0;
          for (std::size_t i = 0; i < x.size(); ++i) s += x.at(i);
          return Tensor::scalar(s);
        },
        [a](Tape& t, const Node& n) {
          if (!t.wants_grad(a)) return;
          Tensor& g = t.grad_mut(a);
          const double d = n.grad.at(0);
          for (std::size_t i = 0; i < g.size(); ++i) g.at(i) += d;
        });
  }

  VarId mean(VarId a) {
    const double inv = 1.0 / static_cast<double>(value(a).size());
    return scale(sum(a), inv);
  }

  // Sum of the elementwise product; the workhorse for trace-style
  // contractions like trace(K M) with symmetric M.
  VarId dot(VarId a, VarId b) {
    if (!value(a).same_shape(value(b))) {
      throw ShapeError("dot: shape mismatch " +
                       shape_to_string(value(a).shape()) + " vs " +
                       shape_to_string(value(b).shape()));
    }
    return record(
        {a, b},
        [a, b](const Tape& t) {
          const Tensor& x = t.value(a);
          const Tensor& y = t.value(b);
          double s = 0.0;
          for (std::size_t i = 0; i < x.size(); ++i) s += x.at(i) * y.at(i);
          return Tensor::scalar(s);
        },
        [a, b](Tape& t, const Node& n) {
          const double d = n.grad.at(0);
          if (t.wants_grad(a)) {
            const Tensor& y = t.value(b);
            Tensor& g = t.grad_mut(a);
            for (std::size_t i = 0; i < g.size(); ++i)
              g.at(i) += d * y.at(i);
          }
          if (t.wants_grad(b)) {
            const Tensor& x = t.value(a);
            Tensor& g = t.grad_mut(b);
            for (std::size_t i = 0; i < g.size(); ++i)
              g.at(i) += d * x.at(i);
          }
        });
  }

  // Broadcast-add a row vector to every row of a matrix (bias add).
  VarId add_rowvec(VarId m, VarId v) {
    const Tensor& mv = value(m);
    const Tensor& vv = value(v);
    require_rank2(mv, "add_rowvec matrix");
    if (vv.rank() != 1 || vv.size() != mv.cols()) {
      throw ShapeError("add_rowvec: vector length " +
                       std::to_string(vv.size()) + " vs matrix cols " +
                       std::to_string(mv.cols()));
    }
    return record(
        {m, v},
        [m, v](const Tape& t) {
          Tensor out = t.value(m);
          const Tensor& b = t.value(v);
          for (std::size_t r = 0; r < out.rows(); ++r)
            for (std::size_t c = 0; c < out.cols(); ++c)
              out(r, c) += b.at(c);
          return out;
        },
        [m, v](Tape& t, const Node& n) {
          if (t.wants_grad(m)) {
            Tensor& g = t.grad_mut(m);
            for (std::size_t i = 0; i < g.size(); ++i)
              g.at(i) += n.grad.at(i);
          }
          if (t.wants_grad(v)) {
            Tensor& g = t.grad_mut(v);
            for (std::size_t r = 0; r < n.grad.rows(); ++r)
              for (std::size_t c = 0; c < n.grad.cols(); ++c)
                g.at(c) += n.grad(r, c);
          }
        });
  }

  // Numerically stable softmax over a rank-1 tensor; max-subtracted so
  // saturated inputs stay finite. Entries sum to 1.
  VarId softmax(VarId a, double temperature = 1.0) {
    if (value(a).rank() != 1) {
      throw ShapeError("softmax expects a rank-1 tensor");
    }
    if (!(temperature > 0.0)) {
      throw ContractError("softmax temperature must be positive");
    }
    return record(
        {a},
        [a, temperature](const Tape& t) {
          const Tensor& x = t.value(a);
          Tensor out(x.shape());
          softmax_fill(x.data(), out.data(), x.size(), temperature);
          return out;
        },
        [a, temperature](Tape& t, const Node& n) {
          if (!t.wants_grad(a)) return;
          Tensor& g = t.grad_mut(a);
          softmax_backprop(n.value.data(), n.grad.data(), g.data(), g.size(),
                           temperature);
        });
  }

  // Row-wise softmax of a rank-2 tensor.
  VarId softmax_rows(VarId a, double temperature = 1.0) {
    require_rank2(value(a), "softmax_rows");
    if (!(temperature > 0.0)) {
      throw ContractError("softmax temperature must be positive");
    }
    return record(
        {a},
        [a, temperature](const Tape& t) {
          const Tensor& x = t.value(a);
          Tensor out(x.shape());
          for (std::size_t r = 0; r < x.rows(); ++r)
            softmax_fill(x.data() + r * x.cols(), out.data() + r * x.cols(),
                         x.cols(), temperature);
          return out;
        },
        [a, temperature](Tape& t, const Node& n) {
          if (!t.wants_grad(a)) return;
          Tensor& g = t.grad_mut(a);
          const std::size_t cols = g.cols();
          for (std::size_t r = 0; r < g.rows(); ++r)
            softmax_backprop(n.value.data() + r * cols,
                             n.grad.data() + r * cols, g.data() + r * cols,
                             cols, temperature);
        });
  }

  // log sum exp of a rank-1 tensor, max-shifted.
  VarId logsumexp(VarId a) {
    if (value(a).rank() != 1) {
      throw ShapeError("logsumexp expects a rank-1 tensor");
    }
    return record(
        {a},
        [a](const Tape& t) {
          const Tensor& x = t.value(a);
          return Tensor::scalar(lse(x.data(), x.size()));
        },
        [a](Tape& t, const Node& n) {
          if (!t.wants_grad(a)) return;
          const Tensor& x = t.value(a);
          Tensor& g = t.grad_mut(a);
          const double d = n.grad.at(0);
          const double l = n.value.at(0);
          for (std::size_t i = 0; i < g.size(); ++i)
            g.at(i) += d * std::exp(x.at(i) - l);
        });
  }

  // Row-wise log sum exp: [N,K] -> [N].
  VarId logsumexp_rows(VarId a) {
    require_rank2(value(a), "logsumexp_rows");
    return record(
        {a},
        [a](const Tape& t) {
          const Tensor& x = t.value(a);
          Tensor out({x.rows()});
          for (std::size_t r = 0; r < x.rows(); ++r)
            out.at(r) = lse(x.data() + r * x.cols(), x.cols());
          return out;
        },
        [a](Tape& t, const Node& n) {
          if (!t.wants_grad(a)) return;
          const Tensor& x = t.value(a);
          Tensor& g = t.grad_mut(a);
          for (std::size_t r = 0; r < x.rows(); ++r) {
            const double d = n.grad.at(r);
            const double l = n.value.at(r);
            for (std::size_t c = 0; c < x.cols(); ++c)
              g(r, c) += d * std::exp(x(r, c) - l);
          }
        });
  }

  // Picks entry (i, cols[i]) from each row: [N,K] -> [N].
  VarId gather_rows(VarId a, std::vector<std::size_t> cols) {
    const Tensor& av = value(a);
    require_rank2(av, "gather_rows");
    if (cols.size() != av.rows()) {
      throw ShapeError("gather_rows: need one column index per row");
    }
    for (std::size_t c : cols) {
      if (c >= av.cols()) {
        throw ContractError("gather_rows: column index " + std::to_string(c) +
                            " out of range for " + std::to_string(av.cols()) +
                            " columns");
      }
    }
    auto idx = std::make_shared<std::vector<std::size_t>>(std::move(cols));
    return record(
        {a},
        [a, idx](const Tape& t) {
          const Tensor& x = t.value(a);
          Tensor out({x.rows()});
          for (std::size_t r = 0; r < x.rows(); ++r)
            out.at(r) = x(r, (*idx)[r]);
          return out;
        },
        [a, idx](Tape& t, const Node& n) {
          if (!t.wants_grad(a)) return;
          Tensor& g = t.grad_mut(a);
          for (std::size_t r = 0; r < n.grad.size(); ++r)
            g(r, (*idx)[r]) += n.grad.at(r);
        });
  }

  // Keeps the listed columns, in the given order: [N,K] -> [N,|cols|].
  VarId select_cols(VarId a, std::vector<std::size_t> cols) {
    const Tensor& av = value(a);
    require_rank2(av, "select_cols");
    for (std::size_t c : cols) {
      if (c >= av.cols()) {
        throw ContractError("select_cols: column index out of range");
      }
    }
    auto idx = std::make_shared<std::vector<std::size_t>>(std::move(cols));
    return record(
        {a},
        [a, idx](const Tape& t) {
          const Tensor& x = t.value(a);
          Tensor out({x.rows(), idx->size()});
          for (std::size_t r = 0; r < x.rows(); ++r)
            for (std::size_t c = 0; c < idx->size(); ++c)
              out(r, c) = x(r, (*idx)[c]);
          return out;
        },
        [a, idx](Tape& t, const Node& n) {
          if (!t.wants_grad(a)) return;
          Tensor& g = t.grad_mut(a);
          for (std::size_t r = 0; r < n.grad.rows(); ++r)
            for (std::size_t c = 0; c < idx->size(); ++c)
              g(r, (*idx)[c]) += n.grad(r, c);
        });
  }

  // Rows [begin, end) of a rank-2 tensor.
  VarId slice_rows(VarId a, std::size_t begin, std::size_t end) {
    const Tensor& av = value(a);
    require_rank2(av, "slice_rows");
    if (begin >= end || end > av.rows()) {
      throw ContractError("slice_rows: bad range");
    }
    return record(
        {a},
        [a, begin, end](const Tape& t) {
          const Tensor& x = t.value(a);
          Tensor out({end - begin, x.cols()});
          for (std::size_t r = begin; r < end; ++r)
            for (std::size_t c = 0; c < x.cols(); ++c)
              out(r - begin, c) = x(r, c);
          return out;
        },
        [a, begin](Tape& t, const Node& n) {
          if (!t.wants_grad(a)) return;
          Tensor& g = t.grad_mut(a);
          for (std::size_t r = 0; r < n.grad.rows(); ++r)
            for (std::size_t c = 0; c < n.grad.cols(); ++c)
              g(r + begin, c) += n.grad(r, c);
        });
  }

  // Vertical concatenation of two rank-2 tensors with equal column count.
  VarId concat_rows(VarId a, VarId b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    require_rank2(av, "concat_rows lhs");
    require_rank2(bv, "concat_rows rhs");
    if (av.cols() != bv.cols()) {
      throw ShapeError("concat_rows: column counts differ");
    }
    return record(
        {a, b},
        [a, b](const Tape& t) {
          const Tensor& x = t.value(a);
          const Tensor& y = t.value(b);
          Tensor out({x.rows() + y.rows(), x.cols()});
          std::copy(x.data(), x.data() + x.size(), out.data());
          std::copy(y.data(), y.data() + y.size(), out.data() + x.size());
          return out;
        },
        [a, b](Tape& t, const Node& n) {
          const std::size_t asz = t.value(a).size();
          if (t.wants_grad(a)) {
            Tensor& g = t.grad_mut(a);
            for (std::size_t i = 0; i < asz; ++i) g.at(i) += n.grad.at(i);
          }
          if (t.wants_grad(b)) {
            Tensor& g = t.grad_mut(b);
            for (std::size_t i = 0; i < g.size(); ++i)
              g.at(i) += n.grad.at(asz + i);
          }
        });
  }

  // Unrolls an image batch [N,H,W,C] into the im2col patch matrix
  // [N*OH*OW, K*K*C]. Out-of-bounds taps read zero padding.
  VarId im2col(VarId images, const Conv2dGeom& g) {
    const Tensor& iv = value(images);
    if (iv.rank() != 4 || iv.dim(1) != g.in_h || iv.dim(2) != g.in_w ||
        iv.dim(3) != g.in_c) {
      throw ShapeError("im2col: image batch shape " +
                       shape_to_string(iv.shape()) +
                       " does not match geometry");
    }
    return record(
        {images},
        [images, g](const Tape& t) {
          const Tensor& x = t.value(images);
          const std::size_t n = x.dim(0), oh = g.out_h(), ow = g.out_w();
          Tensor out({n * oh * ow, g.patch_len()});
          std::size_t row = 0;
          for (std::size_t s = 0; s < n; ++s) {
            const double* img = x.data() + s * g.in_h * g.in_w * g.in_c;
            for (std::size_t y = 0; y < oh; ++y) {
              for (std::size_t xcol = 0; xcol < ow; ++xcol, ++row) {
                double* dst = out.data() + row * g.patch_len();
                for (std::size_t ky = 0; ky < g.kernel; ++ky) {
                  const std::ptrdiff_t sy =
                      static_cast<std::ptrdiff_t>(y * g.stride + ky) -
                      static_cast<std::ptrdiff_t>(g.pad);
                  for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                    const std::ptrdiff_t sx =
                        static_cast<std::ptrdiff_t>(xcol * g.stride + kx) -
                        static_cast<std::ptrdiff_t>(g.pad);
                    const bool in =
                        sy >= 0 && sy < static_cast<std::ptrdiff_t>(g.in_h) &&
                        sx >= 0 && sx < static_cast<std::ptrdiff_t>(g.in_w);
                    for (std::size_t c = 0; c < g.in_c; ++c) {
                      *dst++ = in ? img[(static_cast<std::size_t>(sy) *
                                             g.in_w +
                                         static_cast<std::size_t>(sx)) *
                                            g.in_c +
                                        c]
                                  : 0.0;
                    }
                  }
                }
              }
            }
          }
          return out;
        },
        [images, g](Tape& t, const Node& n) {
          if (!t.wants_grad(images)) return;
          Tensor& gr = t.grad_mut(images);
          const std::size_t nimg = gr.dim(0), oh = g.out_h(), ow = g.out_w();
          std::size_t row = 0;
          for (std::size_t s = 0; s < nimg; ++s) {
            double* img = gr.data() + s * g.in_h * g.in_w * g.in_c;
            for (std::size_t y = 0; y < oh; ++y) {
              for (std::size_t xcol = 0; xcol < ow; ++xcol, ++row) {
                const double* src = n.grad.data() + row * g.patch_len();
                for (std::size_t ky = 0; ky < g.kernel; ++ky) {
                  const std::ptrdiff_t sy =
                      static_cast<std::ptrdiff_t>(y * g.stride + ky) -
                      static_cast<std::ptrdiff_t>(g.pad);
                  for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                    const std::ptrdiff_t sx =
                        static_cast<std::ptrdiff_t>(xcol * g.stride + kx) -
                        static_cast<std::ptrdiff_t>(g.pad);
                    const bool in =
                        sy >= 0 && sy < static_cast<std::ptrdiff_t>(g.in_h) &&
                        sx >= 0 && sx < static_cast<std::ptrdiff_t>(g.in_w);
                    if (in) {
                      double* cell = img + (static_cast<std::size_t>(sy) *
                                                g.in_w +
                                            static_cast<std::size_t>(sx)) *
                                               g.in_c;
                      for (std::size_t c = 0; c < g.in_c; ++c)
                        cell[c] += src[c];
                      src += g.in_c;
                    } else {
                      src += g.in_c;
                    }
                  }
                }
              }
            }
          }
        });
  }

  // Column-wise max within each consecutive segment of `seg` rows:
  // [N*seg, K] -> [N, K]. The gradient routes to the argmax row; ties
  // break toward the first row in row-major order.
  VarId segment_colmax(VarId a, std::size_t seg) {
    const Tensor& av = value(a);
    require_rank2(av, "segment_colmax");
    if (seg == 0 || av.rows() % seg != 0) {
      throw ShapeError("segment_colmax: row count not divisible by segment");
    }
    auto argmax = std::make_shared<std::vector<std::size_t>>();
    return record(
        {a},
        [a, seg, argmax](const Tape& t) {
          const Tensor& x = t.value(a);
          const std::size_t n = x.rows() / seg, k = x.cols();
          Tensor out({n, k});
          argmax->assign(n * k, 0);
          for (std::size_t s = 0; s < n; ++s) {
            for (std::size_t c = 0; c < k; ++c) {
              double best = x(s * seg, c);
              std::size_t bestr = 0;
              for (std::size_t r = 1; r < seg; ++r) {
                const double v = x(s * seg + r, c);
                if (v > best) {
                  best = v;
                  bestr = r;
                }
              }
              out(s, c) = best;
              (*argmax)[s * k + c] = bestr;
            }
          }
          return out;
        },
        [a, seg, argmax](Tape& t, const Node& n) {
          if (!t.wants_grad(a)) return;
          Tensor& g = t.grad_mut(a);
          const std::size_t k = n.grad.cols();
          for (std::size_t s = 0; s < n.grad.rows(); ++s)
            for (std::size_t c = 0; c < k; ++c)
              g(s * seg + (*argmax)[s * k + c], c) += n.grad(s, c);
        });
  }

  // Mean over each consecutive segment of `seg` rows: [N*seg, C] -> [N, C].
  VarId segment_mean_rows(VarId a, std::size_t seg) {
    const Tensor& av = value(a);
    require_rank2(av, "segment_mean_rows");
    if (seg == 0 || av.rows() % seg != 0) {
      throw ShapeError("segment_mean_rows: row count not divisible");
    }
    return record(
        {a},
        [a, seg](const Tape& t) {
          const Tensor& x = t.value(a);
          const std::size_t n = x.rows() / seg, c = x.cols();
          Tensor out({n, c});
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t r = 0; r < seg; ++r)
              for (std::size_t j = 0; j < c; ++j)
                out(s, j) += x(s * seg + r, j);
          const double inv = 1.0 / static_cast<double>(seg);
          for (std::size_t i = 0; i < out.size(); ++i) out.at(i) *= inv;
          return out;
        },
        [a, seg](Tape& t, const Node& n) {
          if (!t.wants_grad(a)) return;
          Tensor& g = t.grad_mut(a);
          const double inv = 1.0 / static_cast<double>(seg);
          const std::size_t c = n.grad.cols();
          for (std::size_t s = 0; s < n.grad.rows(); ++s)
            for (std::size_t r = 0; r < seg; ++r)
              for (std::size_t j = 0; j < c; ++j)
                g(s * seg + r, j) += inv * n.grad(s, j);
        });
  }

  // Squared Euclidean distances between rows of z [r,C] and rows of
  // p [k,C]: out[i,j] = ||z_i - p_j||^2.
  VarId pairwise_sqdist(VarId z, VarId p) {
    const Tensor& zv = value(z);
    const Tensor& pv = value(p);
    require_rank2(zv, "pairwise_sqdist lhs");
    require_rank2(pv, "pairwise_sqdist rhs");
    if (zv.cols() != pv.cols()) {
      throw ShapeError("pairwise_sqdist: feature widths differ");
    }
    return record(
        {z, p},
        [z, p](const Tape& t) {
          const Tensor& x = t.value(z);
          const Tensor& y = t.value(p);
          Tensor out({x.rows(), y.rows()});
          for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < y.rows(); ++j) {
              double s = 0.0;
              for (std::size_t c = 0; c < x.cols(); ++c) {
                const double d = x(i, c) - y(j, c);
                s += d * d;
              }
              out(i, j) = s;
            }
          return out;
        },
        [z, p](Tape& t, const Node& n) {
          const Tensor& x = t.value(z);
          const Tensor& y = t.value(p);
          const bool wz = t.wants_grad(z), wp = t.wants_grad(p);
          if (!wz && !wp) return;
          Tensor& gz = t.grad_mut(z);
          Tensor& gp = t.grad_mut(p);
          for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < y.rows(); ++j) {
              const double d = n.grad(i, j);
              if (d == 0.0) continue;
              for (std::size_t c = 0; c < x.cols(); ++c) {
                const double diff = 2.0 * (x(i, c) - y(j, c)) * d;
                if (wz) gz(i, c) += diff;
                if (wp) gp(j, c) -= diff;
              }
            }
        });
  }

  // Squared distances between all row pairs of z: out[i,j] = ||z_i - z_j||^2.
  VarId self_sqdist(VarId z) {
    require_rank2(value(z), "self_sqdist");
    return record(
        {z},
        [z](const Tape& t) {
          const Tensor& x = t.value(z);
          const std::size_t m = x.rows();
          Tensor out({m, m});
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = i + 1; j < m; ++j) {
              double s = 0.0;
              for (std::size_t c = 0; c < x.cols(); ++c) {
                const double d = x(i, c) - x(j, c);
                s += d * d;
              }
              out(i, j) = s;
              out(j, i) = s;
            }
          return out;
        },
        [z](Tape& t, const Node& n) {
          if (!t.wants_grad(z)) return;
          const Tensor& x = t.value(z);
          Tensor& g = t.grad_mut(z);
          const std::size_t m = x.rows();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < m; ++j) {
              if (i == j) continue;
              const double d = n.grad(i, j) + n.grad(j, i);
              if (d == 0.0) continue;
              for (std::size_t c = 0; c < x.cols(); ++c)
                g(i, c) += 2.0 * (x(i, c) - x(j, c)) * d;
            }
        });
  }

  // Double-centering K -> H K H with H = I - (1/m) 11^T. Linear and
  // self-adjoint, so the backward pass centers the incoming gradient.
  VarId center(VarId k) {
    const Tensor& kv = value(k);
    require_rank2(kv, "center");
    if (kv.rows() != kv.cols()) {
      throw ShapeError("center expects a square matrix");
    }
    return record(
        {k},
        [k](const Tape& t) { return centered(t.value(k)); },
        [k](Tape& t, const Node& n) {
          if (!t.wants_grad(k)) return;
          const Tensor cg = centered(n.grad);
          Tensor& g = t.grad_mut(k);
          for (std::size_t i = 0; i < g.size(); ++i) g.at(i) += cg.at(i);
        });
  }

  // Differentiable proxy for "the best-matching patch": per sample, softmax
  // the label-column scores over that sample's `seg` patch rows and return
  // the weighted patch average. sim is [N*seg, k], patches [N*seg, C],
  // labels one prototype column per sample; output [N, C].
  VarId softmax_pool_labels(VarId sim, VarId patches,
                            std::vector<std::size_t> labels, std::size_t seg,
                            double temperature = 1.0) {
    const Tensor& sv = value(sim);
    const Tensor& pv = value(patches);
    require_rank2(sv, "softmax_pool sim");
    require_rank2(pv, "softmax_pool patches");
    if (seg == 0 || sv.rows() % seg != 0 || sv.rows() != pv.rows()) {
      throw ShapeError("softmax_pool: row layout mismatch");
    }
    const std::size_t n = sv.rows() / seg;
    if (labels.size() != n) {
      throw ShapeError("softmax_pool: one label per sample required");
    }
    for (std::size_t y : labels) {
      if (y >= sv.cols()) {
        throw ContractError("softmax_pool: label out of prototype range");
      }
    }
    if (!(temperature > 0.0)) {
      throw ContractError("softmax temperature must be positive");
    }
    auto lab = std::make_shared<std::vector<std::size_t>>(std::move(labels));
    auto weights = std::make_shared<std::vector<double>>();
    return record(
        {sim, patches},
        [sim, patches, lab, seg, temperature, weights](const Tape& t) {
          const Tensor& s = t.value(sim);
          const Tensor& x = t.value(patches);
          const std::size_t n = s.rows() / seg, c = x.cols();
          Tensor out({n, c});
          weights->assign(n * seg, 0.0);
          std::vector<double> col(seg);
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t r = 0; r < seg; ++r)
              col[r] = s(i * seg + r, (*lab)[i]);
            softmax_fill(col.data(), weights->data() + i * seg, seg,
                         temperature);
            for (std::size_t r = 0; r < seg; ++r) {
              const double w = (*weights)[i * seg + r];
              const double* patch = x.data() + (i * seg + r) * c;
              double* dst = out.data() + i * c;
              for (std::size_t j = 0; j < c; ++j) dst[j] += w * patch[j];
            }
          }
          return out;
        },
        [sim, patches, lab, seg, temperature, weights](Tape& t,
                                                       const Node& n) {
          const Tensor& x = t.value(patches);
          const std::size_t ns = n.grad.rows(), c = x.cols();
          const bool ws = t.wants_grad(sim), wp = t.wants_grad(patches);
          if (!ws && !wp) return;
          Tensor& gsim = t.grad_mut(sim);
          Tensor& gpat = t.grad_mut(patches);
          std::vector<double> inner(seg, 0.0);
          for (std::size_t i = 0; i < ns; ++i) {
            const double* dz = n.grad.data() + i * c;
            // inner[r] = <patch_r, dz>
            double avg = 0.0;
            for (std::size_t r = 0; r < seg; ++r) {
              const double* patch = x.data() + (i * seg + r) * c;
              double s = 0.0;
              for (std::size_t j = 0; j < c; ++j) s += patch[j] * dz[j];
              inner[r] = s;
              avg += (*weights)[i * seg + r] * s;
            }
            for (std::size_t r = 0; r < seg; ++r) {
              const double w = (*weights)[i * seg + r];
              if (wp) {
                double* gp = gpat.data() + (i * seg + r) * c;
                for (std::size_t j = 0; j < c; ++j) gp[j] += w * dz[j];
              }
              if (ws) {
                gsim(i * seg + r, (*lab)[i]) +=
                    w * (inner[r] - avg) / temperature;
              }
            }
          }
        });
  }

  // Per-sample min over its `seg` rows of the own-class column:
  // out[i] = min_r dist[i*seg + r, labels[i]]. Gradient routes to the
  // argmin row (first-index tie-break).
  VarId min_own_class(VarId dist, std::vector<std::size_t> labels,
                      std::size_t seg) {
    return segment_min(dist, std::move(labels), seg, /*own_class=*/true);
  }

  // Per-sample min over patches and every wrong-class column:
  // out[i] = min_{r, j != labels[i]} dist[i*seg + r, j]. Requires k >= 2.
  VarId min_other_class(VarId dist, std::vector<std::size_t> labels,
                        std::size_t seg) {
    if (value(dist).cols() < 2) {
      throw ContractError("min_other_class: no wrong class exists for k = 1");
    }
    return segment_min(dist, std::move(labels), seg, /*own_class=*/false);
  }

 private:
  struct OpAdd {
    static double fwd(double x, double y) { return x + y; }
    static double dx(double, double, double) { return 1.0; }
    static double dy(double, double, double) { return 1.0; }
  };
  struct OpSub {
    static double fwd(double x, double y) { return x - y; }
    static double dx(double, double, double) { return 1.0; }
    static double dy(double, double, double) { return -1.0; }
  };
  struct OpMul {
    static double fwd(double x, double y) { return x * y; }
    static double dx(double, double y, double) { return y; }
    static double dy(double x, double, double) { return x; }
  };
  struct OpDiv {
    static double fwd(double x, double y) { return x / y; }
    static double dx(double, double y, double) { return 1.0 / y; }
    static double dy(double x, double y, double) { return -x / (y * y); }
  };

  template <class Op>
  VarId binary_elementwise(VarId a, VarId b, Op) {
    if (!value(a).same_shape(value(b))) {
      throw ShapeError("elementwise op: shape mismatch " +
                       shape_to_string(value(a).shape()) + " vs " +
                       shape_to_string(value(b).shape()));
    }
    return record(
        {a, b},
        [a, b](const Tape& t) {
          const Tensor& x = t.value(a);
          const Tensor& y = t.value(b);
          Tensor out(x.shape());
          for (std::size_t i = 0; i < out.size(); ++i)
            out.at(i) = Op::fwd(x.at(i), y.at(i));
          return out;
        },
        [a, b](Tape& t, const Node& n) {
          const Tensor& x = t.value(a);
          const Tensor& y = t.value(b);
          if (t.wants_grad(a)) {
            Tensor& g = t.grad_mut(a);
            for (std::size_t i = 0; i < g.size(); ++i)
              g.at(i) += Op::dx(x.at(i), y.at(i), n.value.at(i)) *
                         n.grad.at(i);
          }
          if (t.wants_grad(b)) {
            Tensor& g = t.grad_mut(b);
            for (std::size_t i = 0; i < g.size(); ++i)
              g.at(i) += Op::dy(x.at(i), y.at(i), n.value.at(i)) *
                         n.grad.at(i);
          }
        });
  }

  VarId segment_min(VarId dist, std::vector<std::size_t> labels,
                    std::size_t seg, bool own_class) {
    const Tensor& dv = value(dist);
    require_rank2(dv, "segment_min");
    if (seg == 0 || dv.rows() % seg != 0) {
      throw ShapeError("segment_min: row count not divisible by segment");
    }
    const std::size_t n = dv.rows() / seg;
    if (labels.size() != n) {
      throw ShapeError("segment_min: one label per sample required");
    }
    for (std::size_t y : labels) {
      if (y >= dv.cols()) {
        throw ContractError("segment_min: label out of range");
      }
    }
    auto lab = std::make_shared<std::vector<std::size_t>>(std::move(labels));
    auto arg = std::make_shared<std::vector<std::pair<std::size_t,
                                                      std::size_t>>>();
    return record(
        {dist},
        [dist, lab, seg, own_class, arg](const Tape& t) {
          const Tensor& d = t.value(dist);
          const std::size_t n = d.rows() / seg, k = d.cols();
          Tensor out({n});
          arg->assign(n, {0, 0});
          for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            std::size_t br = 0, bc = 0;
            for (std::size_t r = 0; r < seg; ++r) {
              for (std::size_t j = 0; j < k; ++j) {
                const bool keep = own_class ? (j == (*lab)[i])
                                            : (j != (*lab)[i]);
                if (!keep) continue;
                const double v = d(i * seg + r, j);
                if (v < best) {
                  best = v;
                  br = r;
                  bc = j;
                }
              }
            }
            out.at(i) = best;
            (*arg)[i] = {br, bc};
          }
          return out;
        },
        [dist, seg, arg](Tape& t, const Node& n) {
          if (!t.wants_grad(dist)) return;
          Tensor& g = t.grad_mut(dist);
          for (std::size_t i = 0; i < n.grad.size(); ++i)
            g(i * seg + (*arg)[i].first, (*arg)[i].second) += n.grad.at(i);
        });
  }

  static void softmax_fill(const double* in, double* out, std::size_t n,
                           double temperature) {
    double mx = in[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = std::exp((in[i] - mx) / temperature);
      total += out[i];
    }
    for (std::size_t i = 0; i < n; ++i) out[i] /= total;
  }

  // dx = (y  (dy - <dy, y>)) / T for y = softmax(x / T).
  static void softmax_backprop(const double* y, const double* dy, double* dx,
                               std::size_t n, double temperature) {
    double inner = 0.0;
    for (std::size_t i = 0; i < n; ++i) inner += dy[i] * y[i];
    for (std::size_t i = 0; i < n; ++i)
      dx[i] += y[i] * (dy[i] - inner) / temperature;
  }

  static double lse(const double* in, std::size_t n) {
    double mx = in[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += std::exp(in[i] - mx);
    return mx + std::log(total);
  }

  static Tensor centered(const Tensor& k) {
    const std::size_t m = k.rows();
    Tensor out = k;
    std::vector<double> rowmean(m, 0.0), colmean(m, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        rowmean[i] += k(i, j);
        colmean[j] += k(i, j);
        total += k(i, j);
      }
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i) rowmean[i] *= inv;
    for (std::size_t j = 0; j < m; ++j) colmean[j] *= inv;
    total *= inv * inv;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j)
        out(i, j) = k(i, j) - rowmean[i] - colmean[j] + total;
    return out;
  }

  static void require_rank2(const Tensor& t, const char* what) {
    if (t.rank() != 2) {
      throw ShapeError(std::string(what) + ": expected rank 2, got " +
                       shape_to_string(t.shape()));
    }
  }

  bool wants_grad(VarId id) const { return node(id).requires_grad; }

  Tensor& grad_mut(VarId id) { return node_mut(id).grad; }

  VarId record(std::initializer_list<VarId> inputs,
               std::function<Tensor(const Tape&)> forward,
               std::function<void(Tape&, const Node&)> backprop) {
    Node n;
    for (VarId in : inputs) {
      n.requires_grad = n.requires_grad || node(in).requires_grad;
    }
    n.value = forward(*this);
    n.forward = std::move(forward);
    n.backprop = std::move(backprop);
    return push(std::move(n));
  }

  VarId push(Node n) {
    nodes_.push_back(std::move(n));
    return VarId{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  const Node& node(VarId id) const {
    if (!id.valid() || id.index >= nodes_.size()) {
      throw ContractError("invalid tape node handle");
    }
    return nodes_[id.index];
  }

  Node& node_mut(VarId id) {
    if (!id.valid() || id.index >= nodes_.size()) {
      throw ContractError("invalid tape node handle");
    }
    return nodes_[id.index];
  }

  // Deque so value/grad references handed to callers survive later
  // recordings (vector reallocation would invalidate them).
  std::deque<Node> nodes_;
  std::vector<VarId> diff_leaves_;
};

}  // namespace protoprop
