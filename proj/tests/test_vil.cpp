#include <cmath>
#include <limits>

#include "doctest.h"
#include "test_util.hpp"
#include "unetvl/gradcheck.hpp"
#include "unetvl/mlstm.hpp"
#include "unetvl/vil.hpp"

using namespace uvl;
using uvl::testing::bitwise_equal;
using uvl::testing::max_abs_diff;
using uvl::testing::probe;
using uvl::testing::randn;

namespace {

struct Seq {
  Tensor q, k, v, i, f;
};

Seq random_seq(std::size_t n, std::size_t heads, std::size_t d, std::uint64_t seed, double gate_std = 1.0) {
  return {randn({n, heads * d}, seed), randn({n, heads * d}, seed + 1), randn({n, heads * d}, seed + 2),
          randn({n, heads}, seed + 3, gate_std), randn({n, heads}, seed + 4, gate_std)};
}

// Unstabilized recurrence: C = f C + i v k^T, h = C q / max(|n.q|, exp(m)).
std::vector<double> naive_mlstm(const Seq& s, std::size_t heads, std::size_t d) {
  const std::size_t n = s.q.dim(0), w = heads * d;
  std::vector<double> out(n * w);
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<double> C(d * d, 0.0), nv(d, 0.0);
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < n; ++t) {
      const double ig = std::exp(s.i[t * heads + h]), fg = std::exp(s.f[t * heads + h]);
      m = std::max(s.f[t * heads + h] + m, s.i[t * heads + h]);
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b)
          C[a * d + b] = fg * C[a * d + b] + ig * s.v[t * w + h * d + a] * s.k[t * w + h * d + b];
      for (std::size_t b = 0; b < d; ++b) nv[b] = fg * nv[b] + ig * s.k[t * w + h * d + b];
      double nq = 0.0;
      for (std::size_t b = 0; b < d; ++b) nq += nv[b] * s.q[t * w + h * d + b];
      const double denom = std::max(std::abs(nq), std::exp(m));
      for (std::size_t a = 0; a < d; ++a) {
        double cq = 0.0;
        for (std::size_t b = 0; b < d; ++b) cq += C[a * d + b] * s.q[t * w + h * d + b];
        out[t * w + h * d + a] = cq / denom;
      }
    }
  }
  return out;
}

Tensor zeros_like(const Tensor& t) { return Tensor::zeros(t.shape(), t.dtype()); }

void zero_all(const Module& m) {
  for (auto& [name, t] : m.parameters()) {
    Tensor p = t;
    for (double& x : p.mutable_data()) x = 0.0;
  }
}

UNETVLConfig block_cfg() {
  UNETVLConfig c = UNETVLConfig::micro();
  c.embed_dim = 8;
  c.head_dim = 4;
  return c;
}

}  // namespace

TEST_CASE("patchify token counts") {
  CHECK(num_patches(128, 128, 128, {16, 16, 16}) == 512);
  CHECK(num_patches(16, 256, 224, {16, 16, 16}) == 224);
  const Tensor v = Tensor::zeros({1, 16, 256, 224});
  CHECK(patchify(v, {16, 16, 16}).shape() == Shape{224, 4096});
  CHECK(patchify(Tensor::zeros({1, 128, 128, 128}), {16, 16, 16}).shape() == Shape{512, 4096});
  try {
    num_patches(16, 250, 224, {16, 16, 16});
    FAIL("expected an error");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("width") != std::string::npos);
  }
}

TEST_CASE("patchify raster order and round trip") {
  const Tensor v = randn({2, 4, 6, 8}, 1);
  const PatchSize p{2, 3, 4};
  const Tensor t = patchify(v, p);
  CHECK(t.shape() == Shape{2 * 2 * 2, 2 * 24});
  // token 1 is the next patch along depth, token 2 the next along width
  CHECK(t[1 * 48 + 0] == v[(0 * 4 + 0) * 6 * 8 + 0 * 8 + 4]);
  CHECK(t[2 * 48 + 0] == v[0 * 8 + 3 * 8 + 0]);
  CHECK(bitwise_equal(unpatchify(t, 2, 4, 6, 8, p), v));
}

TEST_CASE("patch embedding") {
  UNETVLConfig cfg = UNETVLConfig::micro();
  Prng rng(2);
  PatchEmbed3D pe(cfg, rng);
  const Tensor zero_patches = Tensor::zeros({cfg.num_tokens(), 64}, DType::F64);
  CHECK(bitwise_equal(pe.forward(zero_patches), pe.pos()));
  zero_all(pe);
  const Tensor y0 = pe.forward(zero_patches);
  for (double x : y0.data()) CHECK(x == 0.0);

  PatchEmbed3D pe2(cfg, rng);
  const Tensor vol = randn({1, 8, 8, 8}, 3);
  GradcheckOptions opt;
  opt.tol = 1e-5;
  auto r = gradcheck([&](const Tensor& x) { return probe(pe2.forward(patchify(x, {4, 4, 4}))); }, vol, opt);
  CHECK_MESSAGE(r.passed, describe(r));
  std::vector<Tensor> ps{pe2.weight(), pe2.pos()};
  auto rp = gradcheck_params([&] { return probe(pe2.forward(patchify(vol, {4, 4, 4}))); }, ps, opt);
  CHECK_MESSAGE(rp.passed, describe(rp));
  CHECK_THROWS_AS(pe2.forward(Tensor::zeros({8, 63})), DimensionError);
}

TEST_CASE("mlstm: zero values give zero outputs") {
  Seq s = random_seq(10, 2, 4, 5);
  s.v = zeros_like(s.v);
  const Tensor h = mlstm_sequence(s.q, s.k, s.v, s.i, s.f);
  for (double x : h.data()) CHECK(x == 0.0);
}

TEST_CASE("mlstm: single step hand recurrence") {
  const Tensor e1({1, 2}, {1, 0});
  const Tensor h = mlstm_sequence(e1, e1, e1, Tensor({1, 1}, {0.3}), Tensor({1, 1}, {-2.0}));
  CHECK(h[0] == 1.0);
  CHECK(h[1] == 0.0);
}

TEST_CASE("mlstm matches the naive unstabilized recurrence") {
  const Seq s = random_seq(16, 3, 4, 7, 0.5);
  const Tensor h = mlstm_sequence(s.q, s.k, s.v, s.i, s.f);
  const auto ref = naive_mlstm(s, 3, 4);
  double worst = 0.0;
  for (std::size_t e = 0; e < ref.size(); ++e) worst = std::max(worst, std::abs(ref[e] - h[e]));
  CHECK(worst <= 1e-8);
}

TEST_CASE("mlstm chunkwise equals sequential") {
  const Seq s = random_seq(64, 2, 4, 11);
  const Tensor seq = mlstm_sequence(s.q, s.k, s.v, s.i, s.f);
  CHECK(bitwise_equal(mlstm_chunkwise(s.q, s.k, s.v, s.i, s.f, 1), seq));
  for (std::size_t c : {4, 8, 16, 64, 100}) {
    CAPTURE(c);
    CHECK(max_abs_diff(mlstm_chunkwise(s.q, s.k, s.v, s.i, s.f, c), seq) <= 1e-8);
  }
  CHECK_THROWS_AS(mlstm_chunkwise(s.q, s.k, s.v, s.i, s.f, 0), ConfigError);
}

TEST_CASE("mlstm final state size does not depend on N") {
  std::size_t bytes = 0;
  for (std::size_t n : {8, 64, 256}) {
    const Seq s = random_seq(n, 2, 4, 13);
    std::size_t b = 0;
    for (const auto& st : mlstm_final_states(s.q, s.k, s.v, s.i, s.f)) b += st.size_bytes(DType::F64);
    if (bytes) CHECK(b == bytes);
    bytes = b;
  }
  CHECK(bytes == 2 * (16 + 4 + 1) * 8);
}

TEST_CASE("mlstm reports the failing step") {
  Seq s = random_seq(5, 1, 2, 17);
  std::vector<double> ig(s.i.data().begin(), s.i.data().end());
  ig[3] = std::numeric_limits<double>::infinity();
  try {
    mlstm_sequence(s.q, s.k, s.v, Tensor({5, 1}, ig), s.f);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step 3") != std::string::npos);
  }
}

TEST_CASE("mlstm gradients") {
  const Seq s = random_seq(7, 2, 3, 19);
  GradcheckOptions opt;
  opt.tol = 1e-5;
  for (std::size_t chunk : {0, 3}) {
    CAPTURE(chunk);
    auto run = [&](const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& i, const Tensor& f) {
      return probe(chunk ? mlstm_chunkwise(q, k, v, i, f, chunk) : mlstm_sequence(q, k, v, i, f));
    };
    auto check = [&](const GradcheckReport& r) { CHECK_MESSAGE(r.passed, describe(r)); };
    check(gradcheck([&](const Tensor& x) { return run(x, s.k, s.v, s.i, s.f); }, s.q, opt));
    check(gradcheck([&](const Tensor& x) { return run(s.q, x, s.v, s.i, s.f); }, s.k, opt));
    check(gradcheck([&](const Tensor& x) { return run(s.q, s.k, x, s.i, s.f); }, s.v, opt));
    check(gradcheck([&](const Tensor& x) { return run(s.q, s.k, s.v, x, s.f); }, s.i, opt));
    check(gradcheck([&](const Tensor& x) { return run(s.q, s.k, s.v, s.i, x); }, s.f, opt));
  }
  // large values push |n.q| above the floor, exercising the other branch
  const Seq big = random_seq(7, 1, 3, 23);
  const Tensor q3 = scale(big.q, 4.0).detach(), k3 = scale(big.k, 4.0).detach();
  auto r = gradcheck([&](const Tensor& x) { return probe(mlstm_sequence(x, k3, big.v, big.i, big.f)); }, q3, opt);
  CHECK_MESSAGE(r.passed, describe(r));
}

TEST_CASE("vil block residual identity with zero weights") {
  UNETVLConfig cfg = block_cfg();
  for (auto kind : {ProjectionKind::Chebyshev, ProjectionKind::Linear}) {
    cfg.projection = kind;
    Prng rng(29);
    ViLBlock block(cfg, Direction::Forward, rng);
    zero_all(block);
    const Tensor x = randn({6, 8}, 31);
    CHECK(bitwise_equal(block.forward(x), x));
  }
}

TEST_CASE("vil block flip conjugation") {
  const UNETVLConfig cfg = block_cfg();
  Prng rng(37);
  ViLBlock block(cfg, Direction::Backward, rng);
  const Tensor x = randn({9, 8}, 41);
  const Tensor bwd = block.forward(x);
  block.set_direction(Direction::Forward);
  CHECK(bitwise_equal(bwd, flip(block.forward(flip(x, 0)), 0)));
  CHECK(bitwise_equal(block.forward(flip(x, 0)), flip(bwd, 0)));
}

TEST_CASE("vil block gradients") {
  UNETVLConfig cfg = block_cfg();
  GradcheckOptions opt;
  for (auto kind : {ProjectionKind::Chebyshev, ProjectionKind::Mlp}) {
    CAPTURE(to_string(kind));
    cfg.projection = kind;
    Prng rng(43);
    ViLBlock fwd(cfg, Direction::Forward, rng), bwd(cfg, Direction::Backward, rng);
    const Tensor x = randn({6, 8}, 47);
    auto pair = [&](const Tensor& v) { return probe(bwd.forward(fwd.forward(v))); };
    auto r = gradcheck(pair, x, opt);
    CHECK_MESSAGE(r.passed, describe(r));
    std::vector<Tensor> ps;
    for (auto& [n, t] : fwd.parameters()) ps.push_back(t);
    for (auto& [n, t] : bwd.parameters()) ps.push_back(t);
    opt.max_coords = 16;
    auto rp = gradcheck_params([&] { return pair(x); }, ps, opt);
    CHECK_MESSAGE(rp.passed, describe(rp));
  }
}

TEST_CASE("encoder taps") {
  SUBCASE("depth 12") {
    UNETVLConfig cfg = UNETVLConfig::micro();
    cfg.depth = 12;
    cfg.taps = {3, 6, 9, 12};
    Prng rng(53);
    ViLEncoder enc(cfg, rng);
    const Tensor tokens = randn({cfg.num_tokens(), cfg.embed_dim}, 59);
    const EncoderTaps taps = enc.forward(tokens);
    REQUIRE(taps.size() == 4);
    for (std::size_t t : {3, 6, 9, 12}) CHECK(taps.at(t).shape() == Shape{cfg.num_tokens(), cfg.embed_dim});
    Tensor z = tokens;
    for (const auto& b : enc.blocks()) z = b->forward(z);
    CHECK(bitwise_equal(taps.at(12), z));
    for (std::size_t b = 0; b < 12; ++b)
      CHECK(enc.blocks()[b]->direction() == (b % 2 ? Direction::Backward : Direction::Forward));
  }
  SUBCASE("tiny depth 4") {
    UNETVLConfig cfg = UNETVLConfig::tiny();
    cfg.dtype = DType::F64;
    Prng rng(61);
    ViLEncoder enc(cfg, rng);
    const EncoderTaps taps = enc.forward(randn({64, 32}, 67));
    CHECK(taps.size() == 4);
    for (const auto& [i, t] : taps) CHECK(t.shape() == Shape{64, 32});
  }
  SUBCASE("tap beyond depth") {
    UNETVLConfig cfg = UNETVLConfig::micro();
    cfg.taps = {1, 3};
    Prng rng(0);
    CHECK_THROWS_AS(ViLEncoder(cfg, rng), ConfigError);
  }
}

TEST_CASE("encoder gradient") {
  const UNETVLConfig cfg = UNETVLConfig::micro();
  Prng rng(71);
  ViLEncoder enc(cfg, rng);
  const Tensor x = randn({cfg.num_tokens(), cfg.embed_dim}, 73);
  auto f = [&](const Tensor& v) {
    const auto taps = enc.forward(v);
    return add(probe(taps.at(1), 1), probe(taps.at(2), 2));
  };
  auto r = gradcheck(f, x);
  CHECK_MESSAGE(r.passed, describe(r));
}

TEST_CASE("parameter names are hierarchical") {
  const UNETVLConfig cfg = UNETVLConfig::micro();
  Prng rng(0);
  ViLEncoder enc(cfg, rng);
  const auto ps = enc.parameters("encoder");
  bool found = false;
  for (const auto& [n, t] : ps) found = found || n == "encoder.block02.up_proj.coeffs";
  CHECK(found);
}
