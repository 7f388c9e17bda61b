#include <cmath>
#include <numbers>

#include "doctest.h"
#include "test_util.hpp"
#include "unetvl/gradcheck.hpp"
#include "unetvl/kan.hpp"

using namespace uvl;
using uvl::testing::max_abs_diff;
using uvl::testing::probe;
using uvl::testing::randn;

TEST_CASE("chebyshev basis worked examples") {
  const Tensor t = chebyshev_basis(Tensor::zeros({1, 1}), 2);
  CHECK(t.shape() == Shape{1, 1, 3});
  CHECK(t[0] == 1.0);
  CHECK(t[1] == 0.0);
  CHECK(t[2] == -1.0);

  const Tensor t0 = chebyshev_basis(randn({3, 4}, 1, 3.0), 0);
  for (double v : t0.data()) CHECK(v == 1.0);

  CHECK_THROWS_AS(chebyshev_basis(Tensor::zeros({1, 1}), -1), ConfigError);
}

TEST_CASE("chebyshev recurrence matches the trigonometric identity") {
  Prng rng(3);
  std::vector<double> u(4096);
  for (double& x : u) x = -1.0 + 2.0 * rng.uniform();
  const Tensor t = chebyshev_polynomials(Tensor({64, 64}, u), 12);
  double worst6 = 0.0, worst12 = 0.0;
  for (std::size_t e = 0; e < u.size(); ++e) {
    for (int m = 0; m <= 12; ++m) {
      const double err = std::abs(t[e * 13 + m] - std::cos(m * std::acos(u[e])));
      if (m <= 6) worst6 = std::max(worst6, err);
      worst12 = std::max(worst12, err);
    }
  }
  CHECK(worst6 <= 1e-12);
  CHECK(worst12 <= 1e-10);
}

TEST_CASE("chebyshev basis entries stay in [-1, 1]") {
  const Tensor t = chebyshev_basis(randn({16, 8}, 4, 5.0), 9);
  for (double v : t.data()) CHECK(std::abs(v) <= 1.0 + 1e-15);
}

TEST_CASE("chebyshev forward worked examples") {
  SUBCASE("degree 0 with unit coefficients sums the inputs' count") {
    const ChebyshevKANLayer layer(Tensor::ones({5, 3, 1}), 0);
    const Tensor y = layer.forward(randn({4, 5}, 2));
    CHECK(y.shape() == Shape{4, 3});
    for (double v : y.data()) CHECK(v == 5.0);
  }
  SUBCASE("T2 at 0.5") {
    const ChebyshevKANLayer layer(Tensor({1, 1, 3}, {0, 0, 1}), 2);
    const Tensor y = layer.forward(Tensor({1, 1}, {std::atanh(0.5)}));
    CHECK(y.item() == doctest::Approx(-0.5).epsilon(1e-14));
  }
  SUBCASE("shape errors") {
    Prng rng(0);
    const ChebyshevKANLayer layer(3, 2, 4, rng);
    CHECK_THROWS_AS(layer.forward(Tensor::zeros({4, 5})), DimensionError);
    CHECK_THROWS_AS(ChebyshevKANLayer(Tensor::zeros({3, 2, 4}), 4), DimensionError);
  }
}

TEST_CASE("chebyshev forward equals the naive triple loop") {
  const std::size_t n = 4, k = 3, out = 2;
  const int deg = 4;
  const Tensor x = randn({n, k}, 5), c = randn({k, out, deg + 1}, 6);
  const ChebyshevKANLayer layer(c, deg);
  const Tensor y = layer.forward(x);
  double worst = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t o = 0; o < out; ++o) {
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        const double u = std::tanh(x[r * k + i]);
        double tm2 = 1.0, tm1 = u;
        for (int j = 0; j <= deg; ++j) {
          double tj;
          if (j == 0) tj = 1.0;
          else if (j == 1) tj = u;
          else {
            tj = 2.0 * u * tm1 - tm2;
            tm2 = tm1;
            tm1 = tj;
          }
          acc += tj * c[(i * out + o) * (deg + 1) + j];
        }
      }
      worst = std::max(worst, std::abs(acc - y[r * out + o]));
    }
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("chebyshev forward is linear in the coefficients") {
  const Tensor x = randn({6, 3}, 7);
  const Tensor c1 = randn({3, 4, 5}, 8), c2 = randn({3, 4, 5}, 9);
  const double a = 0.7, b = -1.3;
  const Tensor lhs = ChebyshevKANLayer(add(scale(c1, a), scale(c2, b)), 4).forward(x);
  const Tensor rhs = add(scale(ChebyshevKANLayer(c1, 4).forward(x), a), scale(ChebyshevKANLayer(c2, 4).forward(x), b));
  CHECK(max_abs_diff(lhs, rhs) <= 1e-10);
}

TEST_CASE("projections act on tokens independently") {
  Prng rng(10);
  ProjectionHyper hyper;
  const Tensor x = randn({5, 3}, 11);
  const Tensor perm_idx({5}, {3, 0, 4, 1, 2});
  for (auto kind : {ProjectionKind::Chebyshev, ProjectionKind::BSpline, ProjectionKind::GaussianRBF,
                    ProjectionKind::Mlp, ProjectionKind::Linear}) {
    CAPTURE(to_string(kind));
    auto p = make_projection(kind, 3, 4, hyper, rng);
    std::vector<double> xp(15);
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t c = 0; c < 3; ++c) xp[r * 3 + c] = x[static_cast<std::size_t>(perm_idx[r]) * 3 + c];
    const Tensor y = p->forward(x), yp = p->forward(Tensor({5, 3}, xp));
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t o = 0; o < 4; ++o)
        // GEMM edge tiles may round differently per row position
        CHECK(std::abs(yp[r * 4 + o] - y[static_cast<std::size_t>(perm_idx[r]) * 4 + o]) <= 1e-13);
    CHECK(p->num_parameters() == projection_param_count(kind, 3, 4, hyper));
  }
}

TEST_CASE("b-spline basis is a partition of unity") {
  Prng rng(12);
  std::vector<double> u(200);
  for (double& x : u) x = -1.0 + 2.0 * rng.uniform();
  u[0] = -1.0;
  u[1] = 1.0;
  u[2] = 0.2;  // a knot for grid 5
  const Tensor b = bspline_basis(Tensor({200, 1}, u), 5, 3);
  CHECK(b.shape() == Shape{200, 1, 8});
  for (std::size_t e = 0; e < 200; ++e) {
    double s = 0.0;
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(b[e * 8 + j] >= 0.0);
      s += b[e * 8 + j];
    }
    CHECK(std::abs(s - 1.0) <= 1e-10);
  }
}

TEST_CASE("b-spline layer with constant weights returns the weight") {
  Prng rng(13);
  BSplineKANLayer layer(1, 1, 5, 3, rng);
  Tensor c = layer.coeffs();
  for (double& w : c.mutable_data()) w = 2.5;
  const Tensor y = layer.forward(Tensor({3, 1}, {0.0, std::atanh(0.2), -0.7}));
  for (double v : y.data()) CHECK(v == doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("rbf basis equals one at its own center") {
  const std::size_t m = 5;
  std::vector<double> centers;
  for (std::size_t j = 0; j < m; ++j) centers.push_back(-1.0 + 2.0 * static_cast<double>(j) / (m - 1));
  const Tensor b = rbf_basis(Tensor({m, 1}, centers), m);
  for (std::size_t j = 0; j < m; ++j) CHECK(b[j * m + j] == 1.0);

  // weight 1 on the matching center, 0 elsewhere
  std::vector<double> w(m, 0.0);
  w[3] = 1.0;
  const GaussianRBFKANLayer layer(Tensor({1, 1, m}, w));
  CHECK(layer.forward(Tensor({1, 1}, {std::atanh(centers[3])})).item() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("every projection kind passes gradcheck") {
  Prng rng(14);
  ProjectionHyper hyper;
  GradcheckOptions opt;
  opt.tol = 1e-5;
  const Tensor x = randn({4, 3}, 15);
  for (auto kind : {ProjectionKind::Chebyshev, ProjectionKind::BSpline, ProjectionKind::GaussianRBF,
                    ProjectionKind::Mlp, ProjectionKind::Linear}) {
    CAPTURE(to_string(kind));
    auto p = make_projection(kind, 3, 2, hyper, rng);
    const auto rx = gradcheck([&](const Tensor& v) { return probe(p->forward(v)); }, x, opt);
    CHECK_MESSAGE(rx.passed, describe(rx));
    std::vector<Tensor> params;
    for (auto& [name, t] : p->parameters()) params.push_back(t);
    const auto rp = gradcheck_params([&] { return probe(p->forward(x)); }, params, opt);
    CHECK_MESSAGE(rp.passed, describe(rp));
  }
}

TEST_CASE("parameter counts") {
  ProjectionHyper hyper;
  CHECK(projection_param_count(ProjectionKind::Chebyshev, 384, 768, hyper) == 1474560);
  CHECK(projection_param_count(ProjectionKind::Linear, 384, 768, hyper) == 295680);
  CHECK(projection_param_count(ProjectionKind::Mlp, 10, 20, hyper) == 10 * 20 + 20 + 20 * 20 + 20);
  for (int d = 0; d < 8; ++d) {
    ProjectionHyper a, b;
    a.degree = d;
    b.degree = d + 1;
    CHECK(projection_param_count(ProjectionKind::Chebyshev, 7, 5, b) -
              projection_param_count(ProjectionKind::Chebyshev, 7, 5, a) ==
          35);
  }
  Prng rng(1);
  CHECK(ChebyshevKANLayer(384, 768, 4, rng).num_parameters() == 1474560);
}

TEST_CASE("projection kind names round-trip") {
  for (auto kind : {ProjectionKind::Chebyshev, ProjectionKind::BSpline, ProjectionKind::GaussianRBF,
                    ProjectionKind::Mlp, ProjectionKind::Linear})
    CHECK(parse_projection_kind(to_string(kind)) == kind);
  CHECK(parse_projection_kind("Chebyshev") == ProjectionKind::Chebyshev);
  CHECK_THROWS_AS(parse_projection_kind("fourier"), ConfigError);
}
