#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "protoprop/common.hpp"
#include "protoprop/tensor.hpp"

namespace protoprop {

// Saturating calibration bias standing in for +-infinity.
inline constexpr double kBiasSentinel = 1e9;
inline constexpr std::size_t kDefaultBiasSteps = 201;

// Raw evaluation scores: one row per sample over every composition, with
// the mask singling out the unseen classes that receive the calibration
// bias.
struct ScoreMatrix {
  Tensor scores;                    // [N, |Y|]
  std::vector<std::size_t> labels;  // composition index per sample
  std::vector<bool> unseen;         // size |Y|

  std::size_t samples() const { return labels.size(); }
  std::size_t classes() const { return unseen.size(); }

  void validate() const {
    if (scores.rank() != 2 || scores.rows() != labels.size() ||
        scores.cols() != unseen.size()) {
      throw ShapeError("score matrix: rows must match labels and columns "
                       "the class mask");
    }
    if (labels.empty() || unseen.empty()) {
      throw ContractError("score matrix: no samples or no classes");
    }
    for (std::size_t y : labels) {
      if (y >= unseen.size()) {
        throw ContractError("score matrix: label outside the class set");
      }
    }
    if (!scores.all_finite()) {
      throw NumericError("score matrix: non-finite scores");
    }
  }
};

inline Tensor biased_scores(const ScoreMatrix& sm, double b) {
  sm.validate();
  Tensor out = sm.scores;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t y = 0; y < out.cols(); ++y)
      if (sm.unseen[y]) out(r, y) += b;
  return out;
}

namespace detail {

// Argmax of row r with the bias applied on the fly; ties break toward the
// lowest class index, matching the classifier.
inline std::size_t biased_argmax(const ScoreMatrix& sm, std::size_t r,
                                 double b) {
  std::size_t best = 0;
  double best_v = sm.scores(r, 0) + (sm.unseen[0] ? b : 0.0);
  for (std::size_t y = 1; y < sm.classes(); ++y) {
    const double v = sm.scores(r, y) + (sm.unseen[y] ? b : 0.0);
    if (v > best_v) {
      best_v = v;
      best = y;
    }
  }
  return best;
}

}  // namespace detail

// Top-1 accuracy over the seen-labeled and unseen-labeled sample subsets
// at one bias value.
inline std::pair<double, double> accuracy_pair(const ScoreMatrix& sm,
                                               double b) {
  sm.validate();
  std::size_t seen_n = 0, seen_ok = 0, unseen_n = 0, unseen_ok = 0;
  for (std::size_t r = 0; r < sm.samples(); ++r) {
    const bool correct = detail::biased_argmax(sm, r, b) == sm.labels[r];
    if (sm.unseen[sm.labels[r]]) {
      ++unseen_n;
      unseen_ok += correct ? 1 : 0;
    } else {
      ++seen_n;
      seen_ok += correct ? 1 : 0;
    }
  }
  if (seen_n == 0 || unseen_n == 0) {
    throw ContractError("accuracy_pair: need both seen- and unseen-labeled "
                        "samples");
  }
  return {static_cast<double>(seen_ok) / static_cast<double>(seen_n),
          static_cast<double>(unseen_ok) / static_cast<double>(unseen_n)};
}

// Uniform bias steps spanning [min - max, max - min] of the scores, plus
// the two saturating sentinels.
inline std::vector<double> default_bias_grid(
    const ScoreMatrix& sm, std::size_t steps = kDefaultBiasSteps) {
  sm.validate();
  if (steps < 2) throw ContractError("bias grid needs at least 2 steps");
  double lo = sm.scores.at(0), hi = sm.scores.at(0);
  for (std::size_t i = 0; i < sm.scores.size(); ++i) {
    lo = std::min(lo, sm.scores.at(i));
    hi = std::max(hi, sm.scores.at(i));
  }
  const double span = hi - lo;
  std::vector<double> grid;
  grid.reserve(steps + 2);
  grid.push_back(-kBiasSentinel);
  for (std::size_t i = 0; i < steps; ++i) {
    grid.push_back(-span + 2.0 * span * static_cast<double>(i) /
                              static_cast<double>(steps - 1));
  }
  grid.push_back(kBiasSentinel);
  return grid;
}

struct EvalCurve {
  std::vector<double> bias;                       // ascending
  std::vector<std::pair<double, double>> points;  // (acc_s, acc_u) per bias
};

inline EvalCurve sweep(const ScoreMatrix& sm, std::vector<double> grid) {
  if (grid.empty()) throw ContractError("sweep: empty bias grid");
  std::sort(grid.begin(), grid.end());
  EvalCurve curve;
  curve.bias = std::move(grid);
  curve.points.reserve(curve.bias.size());
  for (const double b : curve.bias) {
    curve.points.push_back(accuracy_pair(sm, b));
  }
  return curve;
}

inline EvalCurve sweep(const ScoreMatrix& sm) {
  return sweep(sm, default_bias_grid(sm));
}

// Trapezoid area of acc_u over acc_s, after sorting by acc_s and keeping
// the best acc_u among points with equal acc_s.
inline double auc(const EvalCurve& curve) {
  if (curve.points.size() < 2) {
    throw ContractError("auc: need at least 2 curve points");
  }
  std::vector<std::pair<double, double>> pts = curve.points;
  std::sort(pts.begin(), pts.end());
  std::vector<std::pair<double, double>> dedup;
  for (const auto& p : pts) {
    if (!dedup.empty() && dedup.back().first == p.first) {
      dedup.back().second = std::max(dedup.back().second, p.second);
    } else {
      dedup.push_back(p);
    }
  }
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < dedup.size(); ++i) {
    area += (dedup[i + 1].first - dedup[i].first) *
            0.5 * (dedup[i].second + dedup[i + 1].second);
  }
  return area;
}

inline double harmonic_mean(double acc_s, double acc_u) {
  if (!(acc_s >= 0.0 && acc_s <= 1.0 && acc_u >= 0.0 && acc_u <= 1.0)) {
    throw ContractError("harmonic_mean: accuracies must lie in [0, 1]");
  }
  if (acc_s + acc_u == 0.0) return 0.0;
  return 2.0 * acc_s * acc_u / (acc_s + acc_u);
}

struct EvalReport {
  double auc_value = 0.0;
  double best_harmonic = 0.0;
  double closed_seen = 0.0;    // bias -> -inf: predictions within Y_s
  double closed_unseen = 0.0;  // bias -> +inf: predictions within Y_u
  EvalCurve curve;
};

inline EvalReport report(const ScoreMatrix& sm,
                         std::size_t grid_steps = kDefaultBiasSteps) {
  EvalReport rep;
  rep.curve = sweep(sm, default_bias_grid(sm, grid_steps));
  rep.auc_value = auc(rep.curve);
  for (const auto& [s, u] : rep.curve.points) {
    rep.best_harmonic = std::max(rep.best_harmonic, harmonic_mean(s, u));
  }
  // Evaluated at the sentinels directly: if the score span exceeds the
  // sentinel magnitude the sorted grid endpoints are not the closed settings.
  rep.closed_seen = accuracy_pair(sm, -kBiasSentinel).first;
  rep.closed_unseen = accuracy_pair(sm, kBiasSentinel).second;
  return rep;
}

inline void write_report(const EvalReport& rep, std::ostream& os) {
  char buf[64];
  auto line = [&](const char* name, double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << name << " " << buf << "\n";
  };
  line("auc", rep.auc_value);
  line("best_harmonic", rep.best_harmonic);
  line("closed_seen", rep.closed_seen);
  line("closed_unseen", rep.closed_unseen);
}

inline void write_curve(const EvalCurve& curve, std::ostream& os) {
  char buf[200];
  for (std::size_t i = 0; i < curve.bias.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g", curve.bias[i],
                  curve.points[i].first, curve.points[i].second);
    os << buf << "\n";
  }
}

}  // namespace protoprop
