#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "test_util.hpp"
#include "unetvl/gradcheck.hpp"
#include "unetvl/model.hpp"

using namespace uvl;
using uvl::testing::bitwise_equal;
using uvl::testing::max_abs_diff;
using uvl::testing::probe;
using uvl::testing::randn;

TEST_CASE("tokens_to_grid") {
  const Tensor z = randn({512, 8}, 1);
  const Tensor g = tokens_to_grid(z, {8, 8, 8});
  CHECK(g.shape() == Shape{8, 8, 8, 8});
  CHECK(bitwise_equal(grid_to_tokens(g), z));
  for (std::size_t c = 0; c < 8; ++c) CHECK(g[c * 512] == z[c]);
  // token 1 is one step along depth, token 8 one step along width
  CHECK(g[0 * 512 + 1] == z[1 * 8]);
  CHECK(g[0 * 512 + 8] == z[8 * 8]);
  CHECK_THROWS_AS(tokens_to_grid(z, {8, 8, 4}), DimensionError);
}

TEST_CASE("tokens_to_grid matches the patchify raster") {
  // a volume whose patch means identify the token position
  UNETVLConfig cfg = UNETVLConfig::micro();
  std::vector<double> v(512);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j)
      for (std::size_t l = 0; l < 8; ++l) v[(i * 8 + j) * 8 + l] = static_cast<double>((i / 4) * 100 + (j / 4) * 10 + l / 4);
  const Tensor p = patchify(Tensor({1, 8, 8, 8}, v), {4, 4, 4});
  const Tensor g = tokens_to_grid(p, cfg.grid());  // first channel = voxel (0,0,0) of each patch
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t l = 0; l < 2; ++l) CHECK(g[(i * 2 + j) * 2 + l] == static_cast<double>(i * 100 + j * 10 + l));
}

TEST_CASE("decoder plan") {
  const DecoderPlan p = plan_decoder(UNETVLConfig::tiny());
  CHECK(p.stages == 4);
  CHECK(p.levels == 3);
  CHECK(p.widths == std::vector<std::size_t>{32, 16, 16, 16});
  CHECK(p.upsample == std::vector<bool>{false, true, true, true});
  CHECK(p.skip_units == std::vector<std::size_t>{0, 1, 2, 3});

  UNETVLConfig big;
  const DecoderPlan q = plan_decoder(big);
  CHECK(q.widths == std::vector<std::size_t>{384, 192, 96, 48});
  CHECK(q.upsample == std::vector<bool>{true, true, true, true});

  UNETVLConfig bad = UNETVLConfig::tiny();
  bad.patch = 16;
  bad.taps = {2, 4};
  CHECK_THROWS_AS(plan_decoder(bad), ConfigError);
}

TEST_CASE("tiny model output shape") {
  UNETVLConfig cfg = UNETVLConfig::tiny();
  const UNETVL model(cfg, 5);
  const Tensor vol = randn({1, 32, 32, 32}, 6).to(DType::F32);
  NoGradGuard ng;
  const Tensor logits = model.forward(vol);
  CHECK(logits.shape() == Shape{3, 32, 32, 32});
  CHECK(logits.dtype() == DType::F32);
  for (double x : logits.data()) REQUIRE(std::isfinite(x));
  CHECK_THROWS_AS(model.forward(Tensor::zeros({1, 16, 32, 32}, DType::F32)), DimensionError);
}

TEST_CASE("permuting head channels permutes logits") {
  const UNETVLConfig cfg = UNETVLConfig::micro();
  UNETVL model(cfg, 7);
  const Tensor vol = randn({1, 8, 8, 8}, 8);
  const Tensor before = model.forward(vol);
  // swap class rows 0 and 1 of the output conv
  Tensor w = model.head_weight(), b = model.head_bias();
  auto wd = w.mutable_data();
  const std::size_t width = w.dim(1);
  for (std::size_t i = 0; i < width; ++i) std::swap(wd[i], wd[width + i]);
  std::swap(b.mutable_data()[0], b.mutable_data()[1]);
  const Tensor after = model.forward(vol);
  const std::size_t v = 512;
  for (std::size_t i = 0; i < v; ++i) {
    CHECK(after[i] == before[v + i]);
    CHECK(after[v + i] == before[i]);
  }
}

TEST_CASE("micro model end-to-end gradient") {
  const UNETVLConfig cfg = UNETVLConfig::micro();
  UNETVL model(cfg, 9);
  const Tensor vol = randn({1, 8, 8, 8}, 10);
  GradcheckOptions opt;
  opt.max_coords = 24;
  auto r = gradcheck([&](const Tensor& x) { return probe(model.forward(x)); }, vol, opt);
  CHECK_MESSAGE(r.passed, describe(r));
  std::vector<Tensor> ps;
  for (auto& [n, t] : model.parameters()) ps.push_back(t);
  opt.max_coords = 4;
  auto rp = gradcheck_params([&] { return probe(model.forward(vol)); }, ps, opt);
  CHECK_MESSAGE(rp.passed, describe(rp));
}

TEST_CASE("parameter accounting") {
  SUBCASE("closed form equals built model") {
    for (auto kind : {ProjectionKind::Chebyshev, ProjectionKind::Linear, ProjectionKind::Mlp,
                      ProjectionKind::BSpline, ProjectionKind::GaussianRBF}) {
      for (UNETVLConfig cfg : {UNETVLConfig::micro(), UNETVLConfig::tiny()}) {
        cfg.projection = kind;
        const UNETVL model(cfg, 0);
        const ParameterTable a = count_parameters(model), b = count_parameters(cfg);
        CHECK(a.embed == b.embed);
        CHECK(a.encoder == b.encoder);
        CHECK(a.projections == b.projections);
        CHECK(a.decoder == b.decoder);
        CHECK(model.num_parameters() == a.total());
      }
    }
  }
  SUBCASE("hand count of the micro model") {
    const UNETVLConfig cfg = UNETVLConfig::micro();
    // embed: 64*8 + 8*8; blocks: norm 16, cell 4 heads * (4*16 + 24 + 2) = 360,
    // projections 2 * 8*16*5 = 1280
    const ParameterTable t = count_parameters(cfg);
    CHECK(t.embed == 576);
    CHECK(t.encoder == 2 * (16 + 360));
    CHECK(t.projections == 2 * 1280);
    // stage1 (w=8): up 8*8*8, skip unit up 8*8*8 + conv 8*8*27+16, merge 16*8*27+16, 8*8*27+16
    // stage2 (w=4): up 8*4*8, merge 8*4*27+8, 4*4*27+8; stems 1*4*27+8, 4*4*27+8; head 2*4+2
    const std::size_t s1 = 512 + 512 + (1728 + 16) + (3456 + 16) + (1728 + 16);
    const std::size_t s2 = 256 + (864 + 8) + (432 + 8);
    const std::size_t stems = (108 + 8) + (432 + 8);
    CHECK(t.decoder == s1 + s2 + stems + 10);
  }
  SUBCASE("KAN delta and width ordering") {
    UNETVLConfig cfg;  // K=384, depth 12
    cfg.projection = ProjectionKind::Linear;
    const ParameterTable lin = count_parameters(cfg);
    cfg.projection = ProjectionKind::Chebyshev;
    const ParameterTable kan = count_parameters(cfg);
    const std::size_t per_block = projection_param_count(ProjectionKind::Chebyshev, 384, 768, cfg.hyper) +
                                  projection_param_count(ProjectionKind::Chebyshev, 768, 384, cfg.hyper) -
                                  projection_param_count(ProjectionKind::Linear, 384, 768, cfg.hyper) -
                                  projection_param_count(ProjectionKind::Linear, 768, 384, cfg.hyper);
    CHECK(kan.total() - lin.total() == 12 * per_block);
    UNETVLConfig small = cfg;
    small.embed_dim = 192;
    small.projection = ProjectionKind::Linear;
    CHECK(count_parameters(small).total() < lin.total());
    CHECK(lin.total() < kan.total());
  }
}

TEST_CASE("weights round trip through a checkpoint") {
  const UNETVLConfig cfg = UNETVLConfig::micro();
  const UNETVL a(cfg, 11), b(cfg, 12);
  const auto path = (std::filesystem::temp_directory_path() / "unetvl_test_ckpt.uvlc").string();
  save_weights(path, a, {{"optim.step", Tensor::scalar(3)}});
  const NamedTensors rest = load_weights(path, b);
  REQUIRE(rest.size() == 1);
  CHECK(rest[0].first == "optim.step");
  const Tensor vol = randn({1, 8, 8, 8}, 13);
  CHECK(bitwise_equal(a.forward(vol), b.forward(vol)));

  { std::ofstream(path, std::ios::binary) << "XXXX"; }
  CHECK_THROWS_AS(load_weights(path, b), FormatError);
  std::filesystem::remove(path);
}
