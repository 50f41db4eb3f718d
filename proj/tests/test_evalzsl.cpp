#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "protoprop/common.hpp"
#include "protoprop/evalzsl.hpp"

using namespace protoprop;

namespace {

// Counting oracle: per-sample biased argmax with explicit loops, then
// subset accuracy, independent of the module internals.
std::pair<double, double> accuracy_oracle(const ScoreMatrix& sm, double b) {
  std::size_t sn = 0, sk = 0, un = 0, uk = 0;
  for (std::size_t r = 0; r < sm.samples(); ++r) {
    std::size_t arg = 0;
    double best = -1e300;
    for (std::size_t y = 0; y < sm.classes(); ++y) {
      const double v = sm.scores(r, y) + (sm.unseen[y] ? b : 0.0);
      if (v > best) {
        best = v;
        arg = y;
      }
    }
    if (sm.unseen[sm.labels[r]]) {
      ++un;
      if (arg == sm.labels[r]) ++uk;
    } else {
      ++sn;
      if (arg == sm.labels[r]) ++sk;
    }
  }
  return {static_cast<double>(sk) / sn, static_cast<double>(uk) / un};
}

ScoreMatrix random_matrix(Rng& rng, std::size_t n, std::size_t y,
                          std::size_t unseen_count) {
  ScoreMatrix sm;
  sm.scores = Tensor::random_normal({n, y}, rng);
  sm.unseen.assign(y, false);
  for (std::size_t i = 0; i < unseen_count; ++i) sm.unseen[y - 1 - i] = true;
  // ensure both subsets are populated
  sm.labels.push_back(0);
  sm.labels.push_back(y - 1);
  for (std::size_t i = 2; i < n; ++i) {
    sm.labels.push_back(
        static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(y) - 1)));
  }
  return sm;
}

// Six samples over four classes (last two unseen) with hand-set scores.
ScoreMatrix fixture_matrix() {
  ScoreMatrix sm;
  sm.scores = Tensor({6, 4}, {
      2.0, 0.5, 1.0, 0.1,   // seen label 0, correct at b=0
      0.2, 1.5, 1.4, 0.3,   // seen label 1, correct
      1.9, 2.0, 1.0, 0.0,   // seen label 0, wrong at b=0
      0.0, 0.3, 1.2, 0.9,   // unseen label 2, correct
      0.4, 0.1, 0.6, 0.7,   // unseen label 3, correct
      1.3, 0.2, 1.1, 0.4,   // unseen label 2, wrong at b=0
  });
  sm.labels = {0, 1, 0, 2, 3, 2};
  sm.unseen = {false, false, true, true};
  return sm;
}

}  // namespace

TEST_CASE("bias shifts only the unseen columns") {
  const ScoreMatrix sm = fixture_matrix();

  SECTION("zero bias is the identity") {
    REQUIRE(biased_scores(sm, 0.0) == sm.scores);
  }

  SECTION("saturating positive bias forces unseen predictions") {
    const Tensor b = biased_scores(sm, kBiasSentinel);
    for (std::size_t r = 0; r < 6; ++r) {
      std::size_t arg = 0;
      for (std::size_t y = 1; y < 4; ++y)
        if (b(r, y) > b(r, arg)) arg = y;
      REQUIRE(sm.unseen[arg]);
    }
  }

  SECTION("saturating negative bias forces seen predictions") {
    const Tensor b = biased_scores(sm, -kBiasSentinel);
    for (std::size_t r = 0; r < 6; ++r) {
      std::size_t arg = 0;
      for (std::size_t y = 1; y < 4; ++y)
        if (b(r, y) > b(r, arg)) arg = y;
      REQUIRE_FALSE(sm.unseen[arg]);
    }
  }
}

TEST_CASE("accuracy pairs count subset top-1 hits") {
  SECTION("a perfect classifier scores one-one") {
    ScoreMatrix sm;
    sm.scores = Tensor::zeros({4, 3});
    sm.labels = {0, 1, 2, 2};
    sm.unseen = {false, false, true};
    for (std::size_t r = 0; r < 4; ++r) sm.scores(r, sm.labels[r]) = 5.0;
    const auto [s, u] = accuracy_pair(sm, 0.0);
    REQUIRE(s == 1.0);
    REQUIRE(u == 1.0);
  }

  SECTION("negative saturation zeroes the unseen accuracy") {
    const auto [s, u] = accuracy_pair(fixture_matrix(), -kBiasSentinel);
    REQUIRE(u == 0.0);
    REQUIRE(s >= 0.0);
  }

  SECTION("fixture matches the counting oracle at several biases") {
    const ScoreMatrix sm = fixture_matrix();
    for (const double b : {-2.0, -0.5, 0.0, 0.3, 0.9, 2.5}) {
      const auto got = accuracy_pair(sm, b);
      const auto expect = accuracy_oracle(sm, b);
      REQUIRE(got.first == expect.first);
      REQUIRE(got.second == expect.second);
    }
  }

  SECTION("fixture at zero bias, counted by hand") {
    const auto [s, u] = accuracy_pair(fixture_matrix(), 0.0);
    REQUIRE(s == Catch::Approx(2.0 / 3.0).margin(1e-15));
    REQUIRE(u == Catch::Approx(2.0 / 3.0).margin(1e-15));
  }

  SECTION("a single-population matrix is rejected") {
    ScoreMatrix sm;
    sm.scores = Tensor::zeros({2, 3});
    sm.labels = {0, 1};
    sm.unseen = {false, false, true};  // nobody labeled unseen
    REQUIRE_THROWS_AS(accuracy_pair(sm, 0.0), ContractError);
  }
}

TEST_CASE("sweep evaluates the grid in ascending order") {
  const ScoreMatrix sm = fixture_matrix();

  SECTION("sentinel-only grids reproduce the closed settings") {
    const EvalCurve c = sweep(sm, {kBiasSentinel, -kBiasSentinel});
    REQUIRE(c.bias.front() == -kBiasSentinel);
    REQUIRE(c.bias.back() == kBiasSentinel);
    const auto closed_seen = accuracy_pair(sm, -kBiasSentinel);
    const auto closed_unseen = accuracy_pair(sm, kBiasSentinel);
    REQUIRE(c.points.front().first == closed_seen.first);
    REQUIRE(c.points.back().second == closed_unseen.second);
  }

  SECTION("a perfect classifier sweeps out the full square") {
    ScoreMatrix perfect;
    perfect.scores = Tensor::zeros({4, 4});
    perfect.labels = {0, 1, 2, 3};
    perfect.unseen = {false, false, true, true};
    for (std::size_t r = 0; r < 4; ++r) {
      perfect.scores(r, perfect.labels[r]) = 5.0;
    }
    // The sentinels force cross-subset predictions no matter how good the
    // classifier is, so the ends of the curve are (1,0) and (0,1); moderate
    // biases keep every prediction correct.
    const EvalCurve c = sweep(perfect);
    REQUIRE(c.points.front().first == 1.0);
    REQUIRE(c.points.front().second == 0.0);
    REQUIRE(c.points.back().first == 0.0);
    REQUIRE(c.points.back().second == 1.0);
    bool saw_perfect_point = false;
    for (const auto& [s, u] : c.points) {
      if (s == 1.0 && u == 1.0) saw_perfect_point = true;
    }
    REQUIRE(saw_perfect_point);
    REQUIRE(auc(c) == Catch::Approx(1.0).margin(1e-12));
  }

  SECTION("every default-grid point matches the per-bias oracle") {
    const EvalCurve c = sweep(sm);
    REQUIRE(c.bias.size() == kDefaultBiasSteps + 2);
    for (std::size_t i = 0; i < c.bias.size(); ++i) {
      const auto expect = accuracy_oracle(sm, c.bias[i]);
      REQUIRE(c.points[i].first == expect.first);
      REQUIRE(c.points[i].second == expect.second);
    }
  }

  SECTION("an empty grid is rejected") {
    REQUIRE_THROWS_AS(sweep(sm, {}), ContractError);
  }
}

TEST_CASE("curve accuracy is monotone in the bias") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const ScoreMatrix sm = random_matrix(rng, 20, 6, 2);
    const EvalCurve c = sweep(sm);
    for (std::size_t i = 0; i + 1 < c.points.size(); ++i) {
      REQUIRE(c.points[i + 1].first <= c.points[i].first + 1e-15);
      REQUIRE(c.points[i + 1].second >= c.points[i].second - 1e-15);
    }
  }
}

TEST_CASE("area under the curve uses sorted deduplicated trapezoids") {
  SECTION("a flat unit curve covers its seen span") {
    EvalCurve c;
    c.bias = {0.0, 1.0};
    c.points = {{1.0, 1.0}, {0.0, 1.0}};
    REQUIRE(auc(c) == Catch::Approx(1.0).margin(1e-15));
  }

  SECTION("a straight diagonal halves the square") {
    EvalCurve c;
    c.bias = {0.0, 1.0};
    c.points = {{0.0, 0.0}, {1.0, 1.0}};
    REQUIRE(auc(c) == Catch::Approx(0.5).margin(1e-15));
  }

  SECTION("duplicate seen-accuracies keep their best unseen value") {
    EvalCurve c;
    c.bias = {0.0, 1.0, 2.0, 3.0};
    c.points = {{0.0, 0.2}, {0.5, 0.1}, {0.5, 0.9}, {1.0, 0.4}};
    // after dedupe: (0,0.2), (0.5,0.9), (1,0.4)
    const double expect = 0.5 * 0.5 * (0.2 + 0.9) + 0.5 * 0.5 * (0.9 + 0.4);
    REQUIRE(auc(c) == Catch::Approx(expect).margin(1e-15));
  }

  SECTION("fixture curve equals an independent trapezoid sum") {
    const EvalCurve c = sweep(fixture_matrix());
    std::vector<std::pair<double, double>> pts = c.points;
    std::sort(pts.begin(), pts.end());
    std::vector<std::pair<double, double>> d;
    for (const auto& p : pts) {
      if (!d.empty() && d.back().first == p.first) {
        if (p.second > d.back().second) d.back().second = p.second;
      } else {
        d.push_back(p);
      }
    }
    double area = 0.0;
    for (std::size_t i = 0; i + 1 < d.size(); ++i) {
      area += (d[i + 1].first - d[i].first) * 0.5 *
              (d[i].second + d[i + 1].second);
    }
    REQUIRE(auc(c) == Catch::Approx(area).margin(1e-15));
    REQUIRE(auc(c) >= 0.0);
  }

  SECTION("fewer than two points is a contract violation") {
    EvalCurve c;
    c.bias = {0.0};
    c.points = {{0.5, 0.5}};
    REQUIRE_THROWS_AS(auc(c), ContractError);
  }
}

TEST_CASE("harmonic mean follows the published convention") {
  REQUIRE(harmonic_mean(0.979, 0.955) == Catch::Approx(0.967).margin(0.001));
  REQUIRE(harmonic_mean(0.42, 0.42) == Catch::Approx(0.42).margin(1e-15));
  REQUIRE(harmonic_mean(1.0, 0.0) == 0.0);
  REQUIRE(harmonic_mean(0.0, 0.0) == 0.0);
  REQUIRE_THROWS_AS(harmonic_mean(1.2, 0.5), ContractError);
  REQUIRE_THROWS_AS(harmonic_mean(0.5, -0.1), ContractError);
}

TEST_CASE("reports compose the sweep metrics") {
  SECTION("perfect classifier maxes every metric") {
    ScoreMatrix perfect;
    perfect.scores = Tensor::zeros({4, 4});
    perfect.labels = {0, 1, 2, 3};
    perfect.unseen = {false, false, true, true};
    for (std::size_t r = 0; r < 4; ++r)
      perfect.scores(r, perfect.labels[r]) = 5.0;
    const EvalReport rep = report(perfect);
    REQUIRE(rep.auc_value == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(rep.best_harmonic == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(rep.closed_seen == 1.0);
    REQUIRE(rep.closed_unseen == 1.0);
  }

  SECTION("a classifier that ranks unseen classes backwards scores zero there") {
    // Bias shifts every unseen column equally, so it can never repair the
    // within-unseen ranking: the wrong unseen class stays on top at any bias.
    ScoreMatrix sm;
    sm.scores = Tensor::zeros({4, 4});
    sm.labels = {0, 1, 2, 3};
    sm.unseen = {false, false, true, true};
    for (std::size_t r = 0; r < 4; ++r) {
      sm.scores(r, 0) = sm.labels[r] == 0 ? 2.0 : 1.0;
      sm.scores(r, 1) = sm.labels[r] == 1 ? 2.0 : 1.0;
      sm.scores(r, 2) = sm.labels[r] == 2 ? -6.0 : -5.0;
      sm.scores(r, 3) = sm.labels[r] == 3 ? -6.0 : -5.0;
    }
    const EvalReport rep = report(sm);
    REQUIRE(rep.closed_seen == 1.0);
    REQUIRE(rep.closed_unseen == 0.0);
    REQUIRE(rep.best_harmonic == 0.0);
  }

  SECTION("all report values stay within the unit interval") {
    Rng rng(37);
    for (int trial = 0; trial < 10; ++trial) {
      const EvalReport rep = report(random_matrix(rng, 15, 5, 2));
      for (const double v : {rep.auc_value, rep.best_harmonic,
                             rep.closed_seen, rep.closed_unseen}) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
      }
      double max_s = 0.0, max_u = 0.0;
      for (const auto& [s, u] : rep.curve.points) {
        max_s = std::max(max_s, s);
        max_u = std::max(max_u, u);
      }
      REQUIRE(rep.auc_value <= max_s * max_u + 1e-12);
    }
  }

  SECTION("shifting every column together changes nothing") {
    const ScoreMatrix sm = fixture_matrix();
    ScoreMatrix shifted = sm;
    for (std::size_t i = 0; i < shifted.scores.size(); ++i)
      shifted.scores.at(i) += 17.25;
    // Grid biases chosen away from every seen/unseen score crossing (the
    // fixture crossings sit on multiples of 0.1): at a crossing the shifted
    // and unshifted comparisons may round a near-tie differently.
    const std::vector<double> grid = {-kBiasSentinel, -1.03, -0.51, 0.0,
                                      0.47, 1.09, kBiasSentinel};
    const EvalCurve a = sweep(sm, grid);
    const EvalCurve b = sweep(shifted, grid);
    for (std::size_t i = 0; i < a.points.size(); ++i) {
      REQUIRE(a.points[i] == b.points[i]);
    }
    REQUIRE(auc(a) == auc(b));
    REQUIRE(accuracy_pair(sm, -kBiasSentinel) ==
            accuracy_pair(shifted, -kBiasSentinel));
    REQUIRE(accuracy_pair(sm, kBiasSentinel) ==
            accuracy_pair(shifted, kBiasSentinel));
  }
}

TEST_CASE("report and curve files are line-delimited text") {
  const EvalReport rep = report(fixture_matrix());
  std::ostringstream rs;
  write_report(rep, rs);
  std::istringstream rin(rs.str());
  std::string name;
  double value = -1.0;
  std::size_t lines = 0;
  bool saw_auc = false;
  while (rin >> name >> value) {
    ++lines;
    if (name == "auc") {
      saw_auc = true;
      REQUIRE(value == rep.auc_value);
    }
  }
  REQUIRE(lines == 4);
  REQUIRE(saw_auc);

  std::ostringstream cs;
  write_curve(rep.curve, cs);
  std::istringstream cin(cs.str());
  double b = 0.0, s = 0.0, u = 0.0;
  std::size_t rows = 0;
  while (cin >> b >> s >> u) {
    REQUIRE(s == rep.curve.points[rows].first);
    REQUIRE(u == rep.curve.points[rows].second);
    ++rows;
  }
  REQUIRE(rows == rep.curve.bias.size());
}
