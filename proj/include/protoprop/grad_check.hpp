#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "protoprop/tape.hpp"

namespace protoprop {

// A parameterized scalar function for finite-difference checking: given a
// fresh tape and leaves for the current parameter values, build and return
// the scalar output node.
using ScalarFn = std::function<VarId(Tape&, const std::vector<VarId>&)>;

namespace detail {

inline double eval_scalar(const ScalarFn& f, const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<VarId> leaves;
  leaves.reserve(params.size());
  for (const Tensor& p : params) leaves.push_back(tape.leaf(p, false));
  return tape.value(f(tape, leaves)).item();
}

}  // namespace detail

// Central finite differences against the tape's reverse-mode gradients.
// Returns the max over all parameter coordinates of
//   |analytic - central| / max(|analytic|, |central|, 1e-8).
inline double fd_check(const ScalarFn& f, const std::vector<Tensor>& params,
                       double eps = 1e-4) {
  if (!(eps > 0.0)) throw ContractError("fd_check: eps must be positive");

  Tape tape;
  std::vector<VarId> leaves;
  leaves.reserve(params.size());
  for (const Tensor& p : params) leaves.push_back(tape.leaf(p, true));
  const VarId out = f(tape, leaves);
  GradientReport report = tape.backward(out);

  double worst = 0.0;
  std::vector<Tensor> work = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double orig = work[p].at(i);
      work[p].at(i) = orig + eps;
      const double fp = detail::eval_scalar(f, work);
      work[p].at(i) = orig - eps;
      const double fm = detail::eval_scalar(f, work);
      work[p].at(i) = orig;

      const double numeric = (fp - fm) / (2.0 * eps);
      const double analytic = report.grads[p].at(i);
      const double denom = std::max({std::abs(analytic), std::abs(numeric),
                                     1e-8});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace protoprop
