#include <cmath>
#include <sstream>

#include "doctest.h"
#include "unetvl/gradcheck.hpp"
#include "unetvl/ops.hpp"
#include "unetvl/prng.hpp"
#include "unetvl/serialize.hpp"

using namespace uvl;

namespace {

Tensor randn(const Shape& s, std::uint64_t seed, double std = 1.0) {
  Prng rng(seed);
  return normal_tensor(s, std, rng);
}

// Scalar probe that weights every output element differently, so gradchecks
// exercise more than the column sums of a Jacobian.
Tensor probe(const Tensor& y, std::uint64_t seed = 99) {
  return sum(mul(y, randn(y.shape(), seed)));
}

double inner(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

// y = x^2 with a deliberately doubled backward rule.
Tensor buggy_square(const Tensor& x) {
  std::vector<double> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * x[i];
  return make_result("buggy_square", x.shape(), std::move(y), x.dtype(), {x},
                     [x](std::span<const double> g, std::span<const double>, GradSink& sink) {
                       auto d = sink.at(0);
                       for (std::size_t i = 0; i < g.size(); ++i) d[i] += 2.0 * (2.0 * x[i]) * g[i];
                     });
}

}  // namespace

TEST_CASE("matmul examples") {
  const Tensor a({2, 2}, {1, 2, 3, 4});
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  const Tensor y = matmul(a, eye);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y[i] == a[i]);

  const Tensor row({1, 2}, {1, 0});
  const Tensor col({2, 1}, {0, 1});
  CHECK(matmul(row, col).item() == 0.0);
}

TEST_CASE("matmul gradient matches finite differences") {
  const Tensor a = randn({5, 7}, 1), b = randn({7, 3}, 2);
  GradcheckOptions opt;
  opt.tol = 1e-6;
  CHECK(gradcheck([&](const Tensor& x) { return sum(matmul(x, b)); }, a, opt).passed);
  CHECK(gradcheck([&](const Tensor& x) { return sum(matmul(a, x)); }, b, opt).passed);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  const Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({4, 5});
  try {
    (void)matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x5]") != std::string::npos);
  }
  CHECK_THROWS_AS((void)matmul(Tensor::zeros({2, 2}), Tensor::zeros({2, 2}, DType::F32)), DimensionError);
}

TEST_CASE("conv3d examples") {
  const Tensor x = randn({1, 4, 4, 4}, 3);
  const Tensor w = Tensor::ones({1, 1, 1, 1, 1});
  const Tensor y = conv3d(x, w, 1, 0);
  CHECK(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);

  const Tensor z = conv3d(Tensor::zeros({2, 5, 5, 5}), randn({3, 2, 3, 3, 3}, 4), 1, 1);
  CHECK(z.shape() == Shape{3, 5, 5, 5});
  for (double v : z.data()) CHECK(v == 0.0);

  CHECK(conv3d(Tensor::zeros({1, 9, 9, 9}), Tensor::zeros({1, 1, 3, 3, 3}), 2, 1).shape() == Shape{1, 5, 5, 5});
  CHECK_THROWS_AS((void)conv3d(Tensor::zeros({1, 2, 2, 2}), Tensor::zeros({1, 1, 3, 3, 3}), 1, 0), DimensionError);
  CHECK_THROWS_AS((void)conv3d(Tensor::zeros({2, 4, 4, 4}), Tensor::zeros({1, 1, 3, 3, 3}), 1, 1), DimensionError);
}

TEST_CASE("conv3d gradient matches finite differences") {
  const Tensor x = randn({2, 8, 8, 8}, 5), w = randn({3, 2, 3, 3, 3}, 6, 0.3);
  GradcheckOptions opt;
  opt.tol = 1e-5;
  CHECK(gradcheck([&](const Tensor& t) { return probe(conv3d(t, w, 1, 1)); }, x, opt).passed);
  CHECK(gradcheck([&](const Tensor& t) { return probe(conv3d(x, t, 1, 1)); }, w, opt).passed);
  CHECK(gradcheck([&](const Tensor& t) { return probe(conv3d(t, w, 2, 1)); }, x, opt).passed);
}

TEST_CASE("conv_transpose3d shape law and replication") {
  const Tensor y = conv_transpose3d(randn({1, 2, 2, 2}, 7), randn({1, 1, 2, 2, 2}, 8), 2);
  CHECK(y.shape() == Shape{1, 4, 4, 4});

  const Tensor ones = conv_transpose3d(Tensor::ones({1, 3, 3, 3}), Tensor::ones({1, 1, 1, 1, 1}), 1);
  CHECK(ones.shape() == Shape{1, 3, 3, 3});
  for (double v : ones.data()) CHECK(v == 1.0);

  // stride-2, k=2 with unit weights replicates each voxel into a 2x2x2 block
  const Tensor x = randn({1, 2, 2, 2}, 9);
  const Tensor up = conv_transpose3d(x, Tensor::ones({1, 1, 2, 2, 2}), 2);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t k = 0; k < 4; ++k) CHECK(up[(i * 4 + j) * 4 + k] == x[((i / 2) * 2 + j / 2) * 2 + k / 2]);
}

TEST_CASE("conv_transpose3d is the adjoint of conv3d") {
  struct Case {
    std::size_t ext, k, stride;
  };
  for (const Case c : {Case{4, 2, 2}, Case{5, 3, 1}, Case{7, 3, 2}, Case{6, 1, 1}}) {
    const Tensor w = randn({3, 2, c.k, c.k, c.k}, 10 + c.k);
    const Tensor x = randn({2, c.ext, c.ext, c.ext}, 20 + c.ext);
    const Tensor cx = conv3d(x, w, c.stride, 0);
    const Tensor y = randn(cx.shape(), 30 + c.stride);
    const Tensor ty = conv_transpose3d(y, w, c.stride);
    REQUIRE(ty.shape() == x.shape());
    const double lhs = inner(cx, y), rhs = inner(x, ty);
    CHECK(std::abs(lhs - rhs) <= 1e-10 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("conv_transpose3d gradient matches finite differences") {
  const Tensor x = randn({3, 3, 3, 3}, 11), w = randn({3, 2, 2, 2, 2}, 12);
  CHECK(gradcheck([&](const Tensor& t) { return probe(conv_transpose3d(t, w, 2)); }, x).passed);
  CHECK(gradcheck([&](const Tensor& t) { return probe(conv_transpose3d(x, t, 2)); }, w).passed);
}

TEST_CASE("layer_norm examples") {
  const Tensor g = Tensor::ones({3}), b = Tensor::zeros({3});
  const Tensor c = layer_norm(Tensor::full({2, 3}, 4.5), g, b);
  for (double v : c.data()) CHECK(v == 0.0);

  const Tensor y = layer_norm(Tensor({1, 3}, {1, 2, 3}), g, b);
  const double mu = (y[0] + y[1] + y[2]) / 3.0;
  const double var = (y[0] * y[0] + y[1] * y[1] + y[2] * y[2]) / 3.0 - mu * mu;
  CHECK(std::abs(mu) < 1e-15);
  CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  CHECK_THROWS_AS((void)layer_norm(Tensor::zeros({2, 4}), g, b), DimensionError);

  const Tensor x = randn({4, 6}, 13), gamma = randn({6}, 14), beta = randn({6}, 15);
  GradcheckOptions opt;
  opt.tol = 1e-5;
  CHECK(gradcheck([&](const Tensor& t) { return probe(layer_norm(t, gamma, beta)); }, x, opt).passed);
  CHECK(gradcheck([&](const Tensor& t) { return probe(layer_norm(x, t, beta)); }, gamma, opt).passed);
  CHECK(gradcheck([&](const Tensor& t) { return probe(layer_norm(x, gamma, t)); }, beta, opt).passed);
}

TEST_CASE("elementwise examples") {
  const Tensor z = Tensor::scalar(0.0).set_requires_grad();
  const Tensor y = tanh(z);
  CHECK(y.item() == 0.0);
  y.backward();
  CHECK(z.grad().item() == 1.0);

  const Tensor s = softmax_last(Tensor::full({2, 5}, 3.0));
  for (double v : s.data()) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));

  GradcheckOptions opt;
  opt.tol = 1e-6;
  CHECK(gradcheck([](const Tensor& t) { return sum(silu(t)); }, Tensor({3}, {-2.0, 0.0, 3.0}), opt).passed);
}

TEST_CASE("every differentiable op passes gradcheck") {
  const Tensor a = randn({3, 4}, 40), b = randn({3, 4}, 41);
  const Tensor pos = add_scalar(square(a), 0.5).detach();
  const Tensor v4 = randn({4}, 42), v3 = randn({3}, 43);
  const Tensor x3 = randn({2, 3, 4}, 44);
  struct Case {
    const char* name;
    std::function<Tensor(const Tensor&)> f;
    Tensor x;
  };
  const std::vector<Case> cases = {
      {"add", [&](const Tensor& t) { return probe(add(t, b)); }, a},
      {"sub", [&](const Tensor& t) { return probe(sub(b, t)); }, a},
      {"mul", [&](const Tensor& t) { return probe(mul(t, b)); }, a},
      {"div num", [&](const Tensor& t) { return probe(div(t, pos)); }, a},
      {"div den", [&](const Tensor& t) { return probe(div(b, t)); }, pos},
      {"scale", [&](const Tensor& t) { return probe(scale(t, -1.7)); }, a},
      {"tanh", [&](const Tensor& t) { return probe(tanh(t)); }, a},
      {"sigmoid", [&](const Tensor& t) { return probe(sigmoid(t)); }, a},
      {"exp", [&](const Tensor& t) { return probe(exp(t)); }, a},
      {"log", [&](const Tensor& t) { return probe(log(t)); }, pos},
      {"silu", [&](const Tensor& t) { return probe(silu(t)); }, a},
      {"relu", [&](const Tensor& t) { return probe(relu(t)); }, a},
      {"leaky_relu", [&](const Tensor& t) { return probe(leaky_relu(t, 0.1)); }, a},
      {"square", [&](const Tensor& t) { return probe(square(t)); }, a},
      {"add_last", [&](const Tensor& t) { return probe(add_last(a, t)); }, v4},
      {"mul_last x", [&](const Tensor& t) { return probe(mul_last(t, v4)); }, a},
      {"mul_last v", [&](const Tensor& t) { return probe(mul_last(a, t)); }, v4},
      {"add_first", [&](const Tensor& t) { return probe(add_first(a, t)); }, v3},
      {"mul_first v", [&](const Tensor& t) { return probe(mul_first(a, t)); }, v3},
      {"mean", [&](const Tensor& t) { return mean(square(t)); }, a},
      {"sum_last", [&](const Tensor& t) { return probe(sum_last(t)); }, x3},
      {"softmax_last", [&](const Tensor& t) { return probe(softmax_last(t)); }, x3},
      {"log_softmax_last", [&](const Tensor& t) { return probe(log_softmax_last(t)); }, x3},
      {"normalize_last", [&](const Tensor& t) { return probe(normalize_last(t)); }, x3},
      {"instance_norm", [&](const Tensor& t) { return probe(instance_norm(t, v3.detach(), v3.detach())); }, randn({3, 2, 2, 2}, 45)},
      {"permute", [&](const Tensor& t) { return probe(permute(t, {2, 0, 1})); }, x3},
      {"flip", [&](const Tensor& t) { return probe(flip(t, 1)); }, x3},
      {"reshape", [&](const Tensor& t) { return probe(reshape(t, {4, 6})); }, x3},
      {"transpose", [&](const Tensor& t) { return probe(transpose(t)); }, a},
      {"concat", [&](const Tensor& t) { return probe(concat({t, b, t})); }, a},
      {"block_linear x", [&](const Tensor& t) { return probe(block_linear(t, randn({2, 2, 3}, 46), randn({2, 3}, 47))); }, a},
      {"block_linear w", [&](const Tensor& t) { return probe(block_linear(a, t, Tensor())); }, randn({2, 2, 3}, 46)},
  };
  for (const Case& c : cases) {
    const Tensor before = c.x.detach();
    const auto report = gradcheck(c.f, c.x);
    INFO(c.name << ": " << describe(report));
    CHECK(report.passed);
    for (std::size_t i = 0; i < before.numel(); ++i) REQUIRE(before[i] == c.x[i]);
  }
}

TEST_CASE("backward examples") {
  Tensor x = randn({2, 3}, 50).set_requires_grad();
  sum(x).backward();
  const Tensor gx = x.grad();
  for (double g : gx.data()) CHECK(g == 1.0);

  x.zero_grad();
  sum(mul(x, x)).backward();
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == 2.0 * x[i]);

  // additive accumulation across separate graphs
  sum(x).backward();
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == doctest::Approx(2.0 * x[i] + 1.0));

  const Tensor w = randn({3, 4}, 51);
  const auto report = gradcheck([&](const Tensor& t) { return probe(tanh(matmul(t, w))); }, randn({2, 3}, 52));
  CHECK(report.max_rel_error <= 1e-5);
}

TEST_CASE("backward errors") {
  Tensor x = randn({2, 2}, 53).set_requires_grad();
  CHECK_THROWS_AS(mul(x, x).backward(), GraphError);
  const Tensor loss = sum(tanh(x));
  loss.backward();
  CHECK_THROWS_AS(loss.backward(), GraphError);
  CHECK_THROWS_AS(sum(Tensor::ones({3})).backward(), GraphError);
}

TEST_CASE("every reachable leaf gets a gradient") {
  Tensor used = randn({3}, 54).set_requires_grad();
  Tensor dead = randn({3}, 55).set_requires_grad();
  // dead enters the graph through a zero-weighted branch
  sum(add(used, scale(dead, 0.0))).backward();
  REQUIRE(dead.has_grad());
  const Tensor gd = dead.grad();
  for (double g : gd.data()) CHECK(g == 0.0);
  CHECK(Graph::from(sum(add(used, dead))).size() == 2);
}

TEST_CASE("gradcheck oracle behaviour") {
  // integer-valued x and a dyadic step keep the difference quotient exact
  GradcheckOptions exact;
  exact.eps = 0x1p-16;
  const Tensor ints({2, 3}, {1, -2, 3, 4, 0, 7});
  CHECK(gradcheck([](const Tensor& t) { return sum(t); }, ints, exact).max_rel_error == 0.0);

  const Tensor x = randn({4, 3}, 60);
  GradcheckOptions opt;
  opt.tol = 1e-7;
  CHECK(gradcheck([](const Tensor& t) { return sum(tanh(t)); }, x, opt).passed);

  const auto bug = gradcheck([](const Tensor& t) { return sum(buggy_square(t)); }, x);
  CHECK_FALSE(bug.passed);
  CHECK(bug.max_rel_error == doctest::Approx(1.0).epsilon(1e-4));

  int calls = 0;
  CHECK_THROWS_AS(gradcheck([&](const Tensor& t) { return scale(sum(t), 1.0 + (calls++)); }, x), OracleError);
  CHECK_THROWS_AS(gradcheck([](const Tensor& t) { return sum(t); }, x.to(DType::F32)), OracleError);
}

TEST_CASE("non-finite values are detected") {
  set_check_finite_each_op(true);
  CHECK_THROWS_AS((void)log(Tensor({2}, {1.0, -1.0})), NumericError);
  set_check_finite_each_op(false);
  const Tensor bad = log(Tensor({2}, {1.0, -1.0}));
  CHECK_THROWS_AS(check_finite(bad, "loss"), NumericError);
#ifndef NDEBUG
  set_check_finite_each_op(true);
#endif
}

TEST_CASE("f32 tensors hold binary32 values") {
  const Tensor t({1}, {0.1}, DType::F32);
  CHECK(t[0] == static_cast<double>(0.1f));
  const Tensor y = scale(t, 3.0);
  CHECK(y.dtype() == DType::F32);
  CHECK(y[0] == static_cast<double>(static_cast<float>(3.0 * static_cast<double>(0.1f))));
}

TEST_CASE("memory accounting tracks live tensors") {
  const auto base = memory_stats().live_bytes;
  {
    const Tensor a = Tensor::zeros({10, 10});
    CHECK(memory_stats().live_bytes - base == 800);
    const Tensor b = Tensor::zeros({10}, DType::F32);
    CHECK(memory_stats().live_bytes - base == 840);
  }
  CHECK(memory_stats().live_bytes == base);
}

TEST_CASE("prng determinism and stream separation") {
  Prng a(7), b(7), c(8);
  for (int i = 0; i < 100; ++i) {
    const auto va = a.next_u64();
    CHECK(va == b.next_u64());
    CHECK(va != c.next_u64());
  }
  Prng s1 = a.split(1), s2 = a.split(2), s1b = a.split(1);
  CHECK(s1.key() != s2.key());
  CHECK(s1.next_u64() == s1b.next_u64());

  Prng t(3);
  for (int i = 0; i < 1000; ++i) CHECK(std::abs(t.truncated_normal(0.02)) <= 0.04);
  double m = 0.0;
  Prng u(4);
  for (int i = 0; i < 20000; ++i) m += u.uniform();
  CHECK(m / 20000 == doctest::Approx(0.5).epsilon(0.02));
}

TEST_CASE("UVL1 record layout") {
  std::ostringstream os;
  write_tensor(os, Tensor({2}, {1.0, -2.0}, DType::F32));
  const std::string bytes = os.str();
  REQUIRE(bytes.size() == 4 + 1 + 1 + 4 + 8);
  CHECK(bytes.substr(0, 4) == "UVL1");
  CHECK(bytes[4] == 0);
  CHECK(bytes[5] == 1);
  CHECK(static_cast<unsigned char>(bytes[6]) == 2);
  CHECK(bytes[7] == 0);
  // 1.0f = 0x3F800000 little-endian
  CHECK(static_cast<unsigned char>(bytes[10]) == 0x00);
  CHECK(static_cast<unsigned char>(bytes[13]) == 0x3F);
}

TEST_CASE("UVL1 round-trips random tensors bitwise") {
  Prng rng(70);
  for (int trial = 0; trial < 20; ++trial) {
    Shape s(1 + rng.below(4));
    for (auto& e : s) e = 1 + rng.below(5);
    const DType dt = rng.below(2) ? DType::F64 : DType::F32;
    const Tensor t = normal_tensor(s, 3.0, rng, dt);
    std::stringstream ss;
    write_tensor(ss, t);
    const Tensor r = read_tensor(ss);
    CHECK(r.shape() == t.shape());
    CHECK(r.dtype() == t.dtype());
    for (std::size_t i = 0; i < t.numel(); ++i) CHECK(r[i] == t[i]);
  }
  std::stringstream bad("UVLX\x01\x00");
  CHECK_THROWS_AS(read_tensor(bad), FormatError);
  std::stringstream truncated(std::string("UVL1\x01\x01\x05\x00\x00\x00", 10));
  CHECK_THROWS_AS(read_tensor(truncated), FormatError);
}
