#include <algorithm>
#include <cmath>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "protoprop/grad_check.hpp"
#include "protoprop/independence.hpp"

using namespace protoprop;

namespace {

// Matrix-arithmetic oracle: builds H = I - (1/m)11^T explicitly and takes
// trace(K H L H) with plain loops, independent of the centering shortcut
// in the implementation.
double hsic_oracle(const Tensor& k, const Tensor& l) {
  const std::size_t m = k.rows();
  std::vector<std::vector<double>> h(m, std::vector<double>(m, -1.0 / m));
  for (std::size_t i = 0; i < m; ++i) h[i][i] += 1.0;

  auto matmul = [m](const std::vector<std::vector<double>>& a,
                    const std::vector<std::vector<double>>& b) {
    std::vector<std::vector<double>> c(m, std::vector<double>(m, 0.0));
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < m; ++p)
        for (std::size_t j = 0; j < m; ++j) c[i][j] += a[i][p] * b[p][j];
    return c;
  };
  auto to_rows = [m](const Tensor& t) {
    std::vector<std::vector<double>> r(m, std::vector<double>(m));
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) r[i][j] = t(i, j);
    return r;
  };

  const auto khlh = matmul(matmul(matmul(to_rows(k), h), to_rows(l)), h);
  double tr = 0.0;
  for (std::size_t i = 0; i < m; ++i) tr += khlh[i][i];
  return tr / static_cast<double>(m * m);
}

std::vector<std::size_t> balanced_labels(std::size_t classes,
                                         std::size_t per_class) {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i) out.push_back(c);
  return out;
}

}  // namespace

TEST_CASE("median bandwidth over pairwise distances") {
  SECTION("a single pair returns its distance") {
    const Tensor u({2, 1}, {0.0, 3.0});
    REQUIRE(median_heuristic(u) == 3.0);
  }

  SECTION("identical points hit the floor") {
    const Tensor u = Tensor::full({5, 3}, 2.5);
    REQUIRE(median_heuristic(u) == 1e-8);
  }

  SECTION("four points match the sort-based oracle over all six pairs") {
    Rng rng(4);
    const Tensor u = Tensor::random_normal({4, 3}, rng);
    std::vector<double> d;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = i + 1; j < 4; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < 3; ++c)
          s += (u(i, c) - u(j, c)) * (u(i, c) - u(j, c));
        d.push_back(std::sqrt(s));
      }
    std::sort(d.begin(), d.end());
    REQUIRE(median_heuristic(u) ==
            Catch::Approx(0.5 * (d[2] + d[3])).margin(1e-14));
  }

  SECTION("fewer than two points is a contract violation") {
    REQUIRE_THROWS_AS(median_heuristic(Tensor({1, 3})), ContractError);
  }
}

TEST_CASE("gaussian kernel entries follow the no-factor-2 convention") {
  SECTION("coincident points score one") {
    const Tensor u({2, 2}, {1.0, 2.0, 1.0, 2.0});
    const Tensor k = gaussian_kernel_matrix(u, 1.5);
    REQUIRE(k(0, 1) == 1.0);
    REQUIRE(k(0, 0) == 1.0);
  }

  SECTION("distance equal to the bandwidth gives 1/e") {
    const Tensor u({2, 1}, {0.0, 2.0});
    const Tensor k = gaussian_kernel_matrix(u, 2.0);
    REQUIRE(k(0, 1) ==
            Catch::Approx(0.36787944117144233).margin(1e-15));
  }

  SECTION("random input matches the scalar-loop oracle") {
    Rng rng(7);
    const Tensor u = Tensor::random_normal({3, 2}, rng);
    const double sigma = 0.8;
    const Tensor k = gaussian_kernel_matrix(u, sigma);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < 2; ++c)
          s += (u(i, c) - u(j, c)) * (u(i, c) - u(j, c));
        REQUIRE(k(i, j) ==
                Catch::Approx(std::exp(-s / (sigma * sigma))).margin(1e-12));
        REQUIRE(k(i, j) > 0.0);
        REQUIRE(k(i, j) <= 1.0);
        REQUIRE(std::abs(k(i, j) - k(j, i)) < 1e-12);
      }
      REQUIRE(k(i, i) == 1.0);
    }
  }

  SECTION("nonpositive bandwidths are rejected") {
    REQUIRE_THROWS_AS(gaussian_kernel_matrix(Tensor({2, 1}), 0.0),
                      ContractError);
  }
}

TEST_CASE("biased HSIC matches hand and matrix oracles") {
  SECTION("constant input yields exactly zero") {
    Rng rng(9);
    const Tensor u = Tensor::full({6, 2}, 3.0);
    const Tensor v = Tensor::random_normal({6, 4}, rng);
    REQUIRE(hsic_biased(u, KernelKind::gaussian, v, KernelKind::gaussian) ==
            0.0);
    // constant V kills the statistic for any U as well
    REQUIRE(hsic_biased(v, KernelKind::gaussian, u, KernelKind::linear) ==
            0.0);
  }

  SECTION("two-sample hand oracle") {
    const Tensor u({2, 1}, {0.0, 1.0});
    const Tensor v({2, 2}, {1.0, 0.0, 0.0, 1.0});
    // sigma = median = 1; K = [[1, 1/e], [1/e, 1]]; L = I; H halves the
    // difference, trace(KHLH) = 1 - 1/e, over m^2 = 4.
    const double expect = (1.0 - std::exp(-1.0)) / 4.0;
    REQUIRE(hsic_biased(u, KernelKind::gaussian, v, KernelKind::linear) ==
            Catch::Approx(expect).margin(1e-12));
    REQUIRE(expect == Catch::Approx(0.15803013971520527).margin(1e-15));
  }

  SECTION("argument swap with matching kernels is symmetric") {
    Rng rng(11);
    const Tensor u = Tensor::random_normal({8, 3}, rng);
    const Tensor v = one_hot(balanced_labels(2, 4), 2);
    const double a = hsic_biased(u, KernelKind::gaussian, v,
                                 KernelKind::linear);
    const double b = hsic_biased(v, KernelKind::linear, u,
                                 KernelKind::gaussian);
    REQUIRE(a == Catch::Approx(b).margin(1e-12));
  }

  SECTION("random inputs equal the explicit-H matrix oracle") {
    Rng rng(13);
    for (int trial = 0; trial < 5; ++trial) {
      const Tensor u = Tensor::random_normal({7, 3}, rng);
      const Tensor v = Tensor::random_normal({7, 2}, rng);
      const Tensor k = kernel_matrix(u, KernelKind::gaussian);
      const Tensor l = kernel_matrix(v, KernelKind::linear);
      const double got = hsic_biased(u, KernelKind::gaussian, v,
                                     KernelKind::linear);
      REQUIRE(got == Catch::Approx(hsic_oracle(k, l)).margin(1e-12));
      REQUIRE(got >= 0.0);
    }
  }

  SECTION("simultaneous row permutation leaves the value unchanged") {
    Rng rng(15);
    const std::size_t m = 9;
    const Tensor u = Tensor::random_normal({m, 4}, rng);
    const Tensor v = one_hot({0, 1, 2, 0, 1, 2, 0, 1, 2}, 3);
    std::vector<std::size_t> perm(m);
    for (std::size_t i = 0; i < m; ++i) perm[i] = i;
    rng.shuffle(perm.begin(), perm.end());
    Tensor up({m, 4}), vp({m, 3});
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t c = 0; c < 4; ++c) up(i, c) = u(perm[i], c);
      for (std::size_t c = 0; c < 3; ++c) vp(i, c) = v(perm[i], c);
    }
    const double a = hsic_biased(u, KernelKind::gaussian, v,
                                 KernelKind::linear);
    const double b = hsic_biased(up, KernelKind::gaussian, vp,
                                 KernelKind::linear);
    REQUIRE(a == Catch::Approx(b).margin(1e-12));
  }

  SECTION("batch size mismatch is rejected") {
    REQUIRE_THROWS_AS(hsic_biased(Tensor({3, 2}), KernelKind::gaussian,
                                  Tensor({4, 2}), KernelKind::linear),
                      ContractError);
  }
}

TEST_CASE("normalized HSIC is a unit-scaled alignment") {
  Rng rng(17);

  SECTION("identical inputs align perfectly") {
    const Tensor u = Tensor::random_normal({8, 3}, rng);
    const NormalizedHsic r =
        hsic_normalized(u, KernelKind::gaussian, u, KernelKind::gaussian);
    REQUIRE_FALSE(r.degenerate);
    REQUIRE(r.value == Catch::Approx(1.0).margin(1e-12));
  }

  SECTION("constant input reports the degenerate flag") {
    const Tensor u = Tensor::full({8, 2}, 1.0);
    const Tensor v = Tensor::random_normal({8, 2}, rng);
    const NormalizedHsic r =
        hsic_normalized(u, KernelKind::gaussian, v, KernelKind::gaussian);
    REQUIRE(r.degenerate);
    REQUIRE(r.value == 0.0);
  }

  SECTION("random inputs stay in [0,1] and match the ratio oracle") {
    for (int trial = 0; trial < 5; ++trial) {
      const Tensor u = Tensor::random_normal({8, 3}, rng);
      const Tensor v = Tensor::random_normal({8, 2}, rng);
      const NormalizedHsic r =
          hsic_normalized(u, KernelKind::gaussian, v, KernelKind::linear);
      REQUIRE_FALSE(r.degenerate);
      REQUIRE(r.value >= 0.0);
      REQUIRE(r.value <= 1.0);
      const Tensor k = kernel_matrix(u, KernelKind::gaussian);
      const Tensor l = kernel_matrix(v, KernelKind::linear);
      const double expect =
          hsic_oracle(k, l) /
          std::sqrt(hsic_oracle(k, k) * hsic_oracle(l, l));
      REQUIRE(r.value == Catch::Approx(expect).margin(1e-12));
    }
  }
}

TEST_CASE("independent inputs score low, dependent inputs score higher") {
  const std::size_t m = 64, d = 8, classes = 4;
  std::size_t low_count = 0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    Rng rng(derive_seed(123, trial));
    const Tensor u = Tensor::random_normal({m, d}, rng);
    std::vector<std::size_t> labels(m);
    for (std::size_t i = 0; i < m; ++i) {
      labels[i] = static_cast<std::size_t>(rng.uniform_int(0, classes - 1));
    }
    const Tensor v = one_hot(labels, classes);
    const double indep =
        hsic_normalized(u, KernelKind::gaussian, v, KernelKind::linear)
            .value;
    if (indep < 0.2) ++low_count;

    // deterministic function of the label: a fixed class codebook
    const Tensor codebook = Tensor::random_normal({classes, d}, rng);
    Tensor dep_u({m, d});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t c = 0; c < d; ++c)
        dep_u(i, c) = codebook(labels[i], c);
    const double dep =
        hsic_normalized(dep_u, KernelKind::gaussian, v, KernelKind::linear)
            .value;
    REQUIRE(dep > indep);
  }
  REQUIRE(low_count >= 95);
}

TEST_CASE("tape kernels and HSIC nodes agree with the plain path") {
  Rng rng(19);
  const Tensor u = Tensor::random_normal({8, 3}, rng);
  const Tensor v = one_hot(balanced_labels(4, 2), 4);
  const double sigma = median_heuristic(u);

  Tape t;
  const VarId k = gaussian_kernel_node(t, t.leaf(u), sigma);
  const VarId l = linear_kernel_node(t, t.leaf(v));
  REQUIRE(max_abs_diff(t.value(k), gaussian_kernel_matrix(u, sigma)) < 1e-12);
  REQUIRE(max_abs_diff(t.value(l), linear_kernel_matrix(v)) < 1e-12);

  const double plain =
      hsic_biased(u, KernelKind::gaussian, v, KernelKind::linear);
  REQUIRE(t.value(hsic_biased_node(t, k, l)).item() ==
          Catch::Approx(plain).margin(1e-12));

  const HsicNode n = hsic_normalized_node(t, k, l);
  REQUIRE_FALSE(n.degenerate);
  REQUIRE(t.value(n.value).item() ==
          Catch::Approx(hsic_normalized(u, KernelKind::gaussian, v,
                                        KernelKind::linear)
                            .value)
              .margin(1e-12));
}

TEST_CASE("independence loss follows its weight and batch rules") {
  Rng rng(23);
  const std::vector<std::size_t> attrs = balanced_labels(4, 4);
  std::vector<std::size_t> objs = attrs;
  std::reverse(objs.begin(), objs.end());
  const Tensor a1 = one_hot(attrs, 4);
  const Tensor o1 = one_hot(objs, 4);

  SECTION("zero weight reports a zero loss") {
    HsicConfig cfg;
    cfg.lambda_h = 0.0;
    Tape t;
    const IndependenceLoss l = independence_loss(
        t, t.leaf(Tensor::random_normal({16, 3}, rng)),
        t.leaf(Tensor::random_normal({16, 3}, rng)), a1, o1, cfg);
    REQUIRE_FALSE(l.skipped);
    REQUIRE(t.value(l.value).item() == 0.0);
  }

  SECTION("constant embeddings degenerate to zero") {
    HsicConfig cfg;
    cfg.lambda_h = 1.0;
    Tape t;
    const IndependenceLoss l = independence_loss(
        t, t.leaf(Tensor::full({16, 3}, 2.0)),
        t.leaf(Tensor::full({16, 3}, -1.0)), a1, o1, cfg);
    REQUIRE(l.degenerate);
    REQUIRE(t.value(l.value).item() == 0.0);
  }

  SECTION("embeddings copying the opposite labels saturate the loss") {
    HsicConfig cfg;
    cfg.lambda_h = 1.0;
    Tape t;
    // z_a literally encodes the object label and vice versa: the centered
    // gaussian kernel is then proportional to the centered label kernel,
    // so each normalized term is exactly 1.
    const IndependenceLoss l =
        independence_loss(t, t.leaf(o1), t.leaf(a1), a1, o1, cfg);
    REQUIRE_FALSE(l.skipped);
    REQUIRE_FALSE(l.degenerate);
    const double v = t.value(l.value).item();
    REQUIRE(v >= 0.4);
    REQUIRE(v == Catch::Approx(1.0).margin(1e-9));
  }

  SECTION("small batches skip the term") {
    HsicConfig cfg;
    Tape t;
    const IndependenceLoss l = independence_loss(
        t, t.leaf(Tensor::random_normal({4, 3}, rng)),
        t.leaf(Tensor::random_normal({4, 3}, rng)),
        one_hot({0, 1, 0, 1}, 2), one_hot({1, 0, 1, 0}, 2), cfg);
    REQUIRE(l.skipped);
    REQUIRE(t.value(l.value).item() == 0.0);
  }

  SECTION("batch size mismatch is rejected") {
    HsicConfig cfg;
    Tape t;
    REQUIRE_THROWS_AS(
        independence_loss(t, t.leaf(Tensor::random_normal({16, 3}, rng)),
                          t.leaf(Tensor::random_normal({12, 3}, rng)), a1,
                          o1, cfg),
        ContractError);
  }
}

TEST_CASE("independence loss gradients match finite differences") {
  Rng rng(29);
  const std::size_t m = 8;
  const Tensor z_a = Tensor::random_normal({m, 3}, rng);
  const Tensor z_o = Tensor::random_normal({m, 3}, rng);
  const Tensor a1 = one_hot(balanced_labels(2, 4), 2);
  const Tensor o1 = one_hot({0, 1, 2, 0, 1, 2, 0, 1}, 3);
  const double sigma_a = median_heuristic(z_a);
  const double sigma_o = median_heuristic(z_o);

  SECTION("normalized variant") {
    HsicConfig cfg;
    cfg.lambda_h = 2.0;
    const double err = fd_check(
        [&](Tape& t, const std::vector<VarId>& xs) {
          return independence_loss_with_bandwidths(t, xs[0], xs[1], a1, o1,
                                                   cfg, sigma_a, sigma_o)
              .value;
        },
        {z_a, z_o});
    REQUIRE(err < 1e-4);
  }

  SECTION("raw variant") {
    HsicConfig cfg;
    cfg.lambda_h = 5.0;
    cfg.normalized = false;
    const double err = fd_check(
        [&](Tape& t, const std::vector<VarId>& xs) {
          return independence_loss_with_bandwidths(t, xs[0], xs[1], a1, o1,
                                                   cfg, sigma_a, sigma_o)
              .value;
        },
        {z_a, z_o});
    REQUIRE(err < 1e-4);
  }
}
