#include "unetvl/model.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

#include "unetvl/ops.hpp"
#include "unetvl/serialize.hpp"

namespace uvl {

Tensor tokens_to_grid(const Tensor& z, const std::array<std::size_t, 3>& grid) {
  const std::size_t n = grid[0] * grid[1] * grid[2];
  if (z.rank() != 2 || z.dim(0) != n)
    throw DimensionError("tokens_to_grid: " + shape_str(z.shape()) + " does not hold " + std::to_string(n) +
                         " tokens for grid " + shape_str({grid[0], grid[1], grid[2]}));
  return reshape(transpose(z), {z.dim(1), grid[0], grid[1], grid[2]});
}

Tensor grid_to_tokens(const Tensor& g) {
  if (g.rank() != 4) throw DimensionError("grid_to_tokens: expected [K, h, w, d], got " + shape_str(g.shape()));
  return transpose(reshape(g, {g.dim(0), g.dim(1) * g.dim(2) * g.dim(3)}));
}

ConvBlock::ConvBlock(std::size_t in, std::size_t out, Prng& rng, DType dtype)
    : weight_(param(trunc_normal_tensor({out, in, 3, 3, 3}, 0.02, rng, dtype))),
      gamma_(param(Tensor::ones({out}, dtype))),
      beta_(param(Tensor::zeros({out}, dtype))) {}

Tensor ConvBlock::forward(const Tensor& x) const {
  return leaky_relu(instance_norm(conv3d(x, weight_, 1, 1), gamma_, beta_), 0.01);
}

void ConvBlock::collect_parameters(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(join_name(prefix, "conv.weight"), weight_);
  out.emplace_back(join_name(prefix, "norm.gamma"), gamma_);
  out.emplace_back(join_name(prefix, "norm.beta"), beta_);
}

Upsample::Upsample(std::size_t in, std::size_t out, Prng& rng, DType dtype)
    : weight_(param(trunc_normal_tensor({in, out, 2, 2, 2}, 0.02, rng, dtype))) {}

Tensor Upsample::forward(const Tensor& x) const { return conv_transpose3d(x, weight_, 2); }

void Upsample::collect_parameters(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(join_name(prefix, "deconv.weight"), weight_);
}

DecoderPlan plan_decoder(const UNETVLConfig& cfg) {
  cfg.validate();
  std::size_t levels = 0;
  while ((std::size_t{1} << levels) < cfg.patch) ++levels;
  if ((std::size_t{1} << levels) != cfg.patch)
    throw ConfigError("model: patch size " + std::to_string(cfg.patch) + " must be a power of two");
  DecoderPlan p;
  p.stages = cfg.taps.size();
  p.levels = levels;
  if (levels > p.stages)
    throw ConfigError("model: patch size " + std::to_string(cfg.patch) + " needs " + std::to_string(levels) +
                      " upsampling stages but only " + std::to_string(p.stages) + " taps are configured");
  const std::size_t first_up = p.stages - levels;  // stages j > first_up upsample
  for (std::size_t j = 1; j <= p.stages; ++j) {
    p.widths.push_back(std::max(cfg.decoder_min_width, cfg.embed_dim >> std::min<std::size_t>(j - 1, 63)));
    p.upsample.push_back(j > first_up);
    p.skip_units.push_back(j > first_up ? j - first_up : 0);
  }
  return p;
}

UNETVL::UNETVL(const UNETVLConfig& cfg, std::uint64_t seed)
    : cfg_(cfg),
      plan_(plan_decoder(cfg)),
      embed_(cfg, Prng(seed).split(1)),
      encoder_(cfg, Prng(seed).split(2)) {
  Prng rng = Prng(seed).split(3);
  const DType dt = cfg.dtype;
  const std::size_t K = cfg.embed_dim, T = plan_.stages;
  std::size_t prev = K;
  for (std::size_t j = 1; j <= T; ++j) {
    const std::size_t w = plan_.widths[j - 1];
    Stage s;
    if (plan_.upsample[j - 1]) s.up = std::make_unique<Upsample>(prev, w, rng, dt);
    else s.adapt = std::make_unique<ConvBlock>(prev, w, rng, dt);
    if (j < T) {
      const std::size_t units = plan_.skip_units[j - 1];
      for (std::size_t u = 0; u < units; ++u)
        s.skip_units.emplace_back(std::make_unique<Upsample>(u == 0 ? K : w, w, rng, dt),
                                  std::make_unique<ConvBlock>(w, w, rng, dt));
      if (units == 0) s.skip_conv = std::make_unique<ConvBlock>(K, w, rng, dt);
    }
    s.merge1 = std::make_unique<ConvBlock>(2 * w, w, rng, dt);
    s.merge2 = std::make_unique<ConvBlock>(w, w, rng, dt);
    stages_.push_back(std::move(s));
    prev = w;
  }
  stem1_ = std::make_unique<ConvBlock>(cfg.in_channels, plan_.widths.back(), rng, dt);
  stem2_ = std::make_unique<ConvBlock>(plan_.widths.back(), plan_.widths.back(), rng, dt);
  head_w_ = param(trunc_normal_tensor({cfg.num_classes, prev, 1, 1, 1}, 0.02, rng, dt));
  head_b_ = param(Tensor::zeros({cfg.num_classes}, dt));
}

Tensor UNETVL::stage_forward(std::size_t j, const Tensor& x, const Tensor& skip) const {
  const Stage& s = stages_[j];
  const Tensor main = s.up ? s.up->forward(x) : s.adapt->forward(x);
  return s.merge2->forward(s.merge1->forward(concat({main, skip})));
}

Tensor UNETVL::forward(const Tensor& volume) const {
  const Shape want{cfg_.in_channels, cfg_.H, cfg_.W, cfg_.D};
  if (volume.shape() != want)
    throw DimensionError("model: input " + shape_str(volume.shape()) + " does not match configured " +
                         shape_str(want));
  std::string stage = "embed";
  try {
    const Tensor tokens = embed_.forward(patchify(volume, {cfg_.patch, cfg_.patch, cfg_.patch}));
    stage = "encoder";
    const EncoderTaps taps = encoder_.forward(tokens);
    const auto grid = cfg_.grid();
    const std::size_t T = plan_.stages;
    stage = "bottleneck";
    Tensor x = tokens_to_grid(taps.at(cfg_.taps[T - 1]), grid);
    for (std::size_t j = 1; j <= T; ++j) {
      stage = "decoder stage " + std::to_string(j) + " skip";
      const Stage& s = stages_[j - 1];
      Tensor skip;
      if (j < T) {
        skip = tokens_to_grid(taps.at(cfg_.taps[T - 1 - j]), grid);
        if (s.skip_conv) skip = s.skip_conv->forward(skip);
        for (const auto& [up, conv] : s.skip_units) skip = conv->forward(up->forward(skip));
      } else {
        skip = stem2_->forward(stem1_->forward(volume));
      }
      stage = "decoder stage " + std::to_string(j);
      x = stage_forward(j - 1, x, skip);
    }
    stage = "head";
    return add_first(conv3d(x, head_w_), head_b_);
  } catch (const DimensionError& e) {
    throw DimensionError("model " + stage + ": " + e.what());
  }
}

void UNETVL::collect_parameters(const std::string& prefix, NamedTensors& out) const {
  embed_.collect_parameters(join_name(prefix, "embed"), out);
  encoder_.collect_parameters(join_name(prefix, "encoder"), out);
  char buf[32];
  for (std::size_t j = 0; j < stages_.size(); ++j) {
    std::snprintf(buf, sizeof buf, "decoder.stage%zu", j + 1);
    const std::string base = join_name(prefix, buf);
    const Stage& s = stages_[j];
    if (s.up) s.up->collect_parameters(join_name(base, "up"), out);
    if (s.adapt) s.adapt->collect_parameters(join_name(base, "adapt"), out);
    if (s.skip_conv) s.skip_conv->collect_parameters(join_name(base, "skip"), out);
    for (std::size_t u = 0; u < s.skip_units.size(); ++u) {
      const std::string ub = join_name(base, "skip" + std::to_string(u + 1));
      s.skip_units[u].first->collect_parameters(join_name(ub, "up"), out);
      s.skip_units[u].second->collect_parameters(join_name(ub, "block"), out);
    }
    s.merge1->collect_parameters(join_name(base, "merge1"), out);
    s.merge2->collect_parameters(join_name(base, "merge2"), out);
  }
  stem1_->collect_parameters(join_name(prefix, "decoder.stem1"), out);
  stem2_->collect_parameters(join_name(prefix, "decoder.stem2"), out);
  out.emplace_back(join_name(prefix, "decoder.head.weight"), head_w_);
  out.emplace_back(join_name(prefix, "decoder.head.bias"), head_b_);
}

ParameterTable count_parameters(const UNETVL& model) {
  ParameterTable t;
  for (const auto& [name, p] : model.parameters()) {
    if (name.starts_with("embed.")) t.embed += p.numel();
    else if (name.starts_with("encoder.")) {
      if (name.find(".up_proj.") != std::string::npos || name.find(".down_proj.") != std::string::npos)
        t.projections += p.numel();
      else
        t.encoder += p.numel();
    } else {
      t.decoder += p.numel();
    }
  }
  return t;
}

ParameterTable count_parameters(const UNETVLConfig& cfg) {
  const DecoderPlan plan = plan_decoder(cfg);
  const std::size_t K = cfg.embed_dim, E = cfg.inner_dim(), d = cfg.head_dim, H = cfg.num_heads();
  const std::size_t P3 = cfg.patch * cfg.patch * cfg.patch;
  ParameterTable t;
  t.embed = cfg.in_channels * P3 * K + cfg.num_tokens() * K;
  t.encoder = cfg.depth * (2 * K + H * (4 * d * d + 6 * d + 2));
  t.projections = cfg.depth * (projection_param_count(cfg.projection, K, E, cfg.hyper) +
                               projection_param_count(cfg.projection, E, K, cfg.hyper));
  auto conv = [](std::size_t in, std::size_t out) { return out * in * 27 + 2 * out; };
  auto up = [](std::size_t in, std::size_t out) { return in * out * 8; };
  std::size_t prev = K;
  for (std::size_t j = 1; j <= plan.stages; ++j) {
    const std::size_t w = plan.widths[j - 1];
    t.decoder += plan.upsample[j - 1] ? up(prev, w) : conv(prev, w);
    if (j < plan.stages) {
      const std::size_t units = plan.skip_units[j - 1];
      for (std::size_t u = 0; u < units; ++u) t.decoder += up(u == 0 ? K : w, w) + conv(w, w);
      if (units == 0) t.decoder += conv(K, w);
    }
    t.decoder += conv(2 * w, w) + conv(w, w);
    prev = w;
  }
  t.decoder += conv(cfg.in_channels, prev) + conv(prev, prev);
  t.decoder += cfg.num_classes * prev + cfg.num_classes;
  return t;
}

std::string format_parameter_table(const ParameterTable& t) {
  std::ostringstream os;
  char line[96];
  auto row = [&](const char* name, std::size_t n) {
    std::snprintf(line, sizeof line, "%-12s %14zu %10.3fM\n", name, n, static_cast<double>(n) / 1e6);
    os << line;
  };
  std::snprintf(line, sizeof line, "%-12s %14s %11s\n", "component", "params", "millions");
  os << line;
  row("embed", t.embed);
  row("encoder", t.encoder);
  row("projections", t.projections);
  row("decoder", t.decoder);
  row("total", t.total());
  return os.str();
}

void save_weights(const std::string& path, const Module& model, const NamedTensors& extra) {
  NamedTensors all = model.parameters();
  all.insert(all.end(), extra.begin(), extra.end());
  save_container(path, all);
}

NamedTensors load_weights(const std::string& path, const Module& model) {
  NamedTensors stored = load_container(path);
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [n, t] : stored) by_name[n] = &t;
  for (const auto& [name, p] : model.parameters()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint " + path + " lacks parameter '" + name + "'");
    const Tensor& src = *it->second;
    if (src.shape() != p.shape())
      throw FormatError("checkpoint parameter '" + name + "' has shape " + shape_str(src.shape()) + ", model expects " +
                        shape_str(p.shape()));
    Tensor dst = p;
    const Tensor conv = src.to(p.dtype());
    std::copy(conv.data().begin(), conv.data().end(), dst.mutable_data().begin());
    by_name.erase(it);
  }
  NamedTensors rest;
  for (auto& [n, t] : stored)
    if (by_name.count(n)) rest.emplace_back(n, t);
  return rest;
}

}  // namespace uvl
