#include "unetvl/vil.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

#include "unetvl/mlstm.hpp"
#include "unetvl/ops.hpp"

namespace uvl {

UNETVLConfig UNETVLConfig::tiny() {
  UNETVLConfig c;
  c.H = c.W = c.D = 32;
  c.patch = 8;
  c.embed_dim = 32;
  c.depth = 4;
  c.taps = {1, 2, 3, 4};
  c.num_classes = 3;
  return c;
}

UNETVLConfig UNETVLConfig::micro() {
  UNETVLConfig c;
  c.H = c.W = c.D = 8;
  c.patch = 4;
  c.embed_dim = 8;
  c.head_dim = 4;
  c.depth = 2;
  c.taps = {1, 2};
  c.num_classes = 2;
  c.decoder_min_width = 2;
  c.dtype = DType::F64;
  return c;
}

void UNETVLConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (patch == 0) fail("patch size must be positive");
  const char* names[] = {"H", "W", "D"};
  const std::size_t ext[] = {H, W, D};
  for (int a = 0; a < 3; ++a) {
    if (ext[a] == 0 || ext[a] % patch != 0)
      fail(std::string("volume extent ") + names[a] + "=" + std::to_string(ext[a]) + " is not divisible by patch " +
           std::to_string(patch));
  }
  if (in_channels == 0) fail("in_channels must be positive");
  if (embed_dim == 0 || head_dim == 0 || expansion == 0) fail("embed_dim, head_dim and expansion must be positive");
  if (inner_dim() % head_dim != 0)
    fail("expansion*embed_dim=" + std::to_string(inner_dim()) + " is not divisible by head_dim " +
         std::to_string(head_dim));
  if (depth == 0) fail("depth must be positive");
  if (taps.empty()) fail("at least one tap is required");
  for (std::size_t i = 0; i < taps.size(); ++i) {
    if (taps[i] == 0 || taps[i] > depth)
      fail("tap index " + std::to_string(taps[i]) + " outside 1.." + std::to_string(depth));
    if (i && taps[i] <= taps[i - 1]) fail("taps must be strictly ascending");
  }
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (hyper.degree < 0) fail("chebyshev degree must be >= 0");
  if (decoder_min_width == 0) fail("decoder_min_width must be positive");
}

std::size_t num_patches(std::size_t H, std::size_t W, std::size_t D, const PatchSize& patch) {
  const char* names[] = {"height", "width", "depth"};
  const std::size_t ext[] = {H, W, D};
  std::size_t n = 1;
  for (int a = 0; a < 3; ++a) {
    if (patch[a] == 0 || ext[a] % patch[a] != 0)
      throw DimensionError(std::string("patchify: ") + names[a] + " extent " + std::to_string(ext[a]) +
                           " is not divisible by patch size " + std::to_string(patch[a]));
    n *= ext[a] / patch[a];
  }
  return n;
}

namespace {

// Flat source index of every patch element, in patchify output order.
std::vector<std::size_t> patch_index(std::size_t C, std::size_t H, std::size_t W, std::size_t D, const PatchSize& p) {
  const std::size_t gh = H / p[0], gw = W / p[1], gd = D / p[2];
  std::vector<std::size_t> idx;
  idx.reserve(C * H * W * D);
  for (std::size_t i = 0; i < gh; ++i)
    for (std::size_t j = 0; j < gw; ++j)
      for (std::size_t l = 0; l < gd; ++l)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t a = 0; a < p[0]; ++a)
            for (std::size_t b = 0; b < p[1]; ++b)
              for (std::size_t e = 0; e < p[2]; ++e)
                idx.push_back(((c * H + i * p[0] + a) * W + j * p[1] + b) * D + l * p[2] + e);
  return idx;
}

}  // namespace

Tensor patchify(const Tensor& volume, const PatchSize& patch) {
  if (volume.rank() != 4) throw DimensionError("patchify: expected [C, H, W, D], got " + shape_str(volume.shape()));
  const std::size_t C = volume.dim(0), H = volume.dim(1), W = volume.dim(2), D = volume.dim(3);
  const std::size_t n = num_patches(H, W, D, patch);
  return gather(volume, patch_index(C, H, W, D, patch), {n, C * patch[0] * patch[1] * patch[2]});
}

Tensor unpatchify(const Tensor& patches, std::size_t channels, std::size_t H, std::size_t W, std::size_t D,
                  const PatchSize& patch) {
  const std::size_t n = num_patches(H, W, D, patch);
  const std::size_t row = channels * patch[0] * patch[1] * patch[2];
  if (patches.shape() != Shape{n, row})
    throw DimensionError("unpatchify: expected " + shape_str({n, row}) + ", got " + shape_str(patches.shape()));
  const auto fwd = patch_index(channels, H, W, D, patch);
  std::vector<std::size_t> inv(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = i;
  return gather(patches, std::move(inv), {channels, H, W, D});
}

// ---------------------------------------------------------------------------

PatchEmbed3D::PatchEmbed3D(const UNETVLConfig& cfg, Prng rng)
    : weight_(param(trunc_normal_tensor({cfg.in_channels * cfg.patch * cfg.patch * cfg.patch, cfg.embed_dim}, 0.02,
                                        rng, cfg.dtype))),
      pos_(param(trunc_normal_tensor({cfg.num_tokens(), cfg.embed_dim}, 0.02, rng, cfg.dtype))) {}

Tensor PatchEmbed3D::forward(const Tensor& patches) const {
  if (patches.rank() != 2 || patches.dim(1) != weight_.dim(0) || patches.dim(0) != pos_.dim(0))
    throw DimensionError("embed: expected patches " + shape_str({pos_.dim(0), weight_.dim(0)}) + ", got " +
                         shape_str(patches.shape()));
  return add(matmul(patches, weight_), pos_);
}

void PatchEmbed3D::collect_parameters(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(join_name(prefix, "proj.weight"), weight_);
  out.emplace_back(join_name(prefix, "pos"), pos_);
}

MLSTMCell::MLSTMCell(std::size_t heads, std::size_t head_dim, Prng& rng, DType dtype) : heads_(heads), d_(head_dim) {
  auto w = [&](std::size_t out) { return param(trunc_normal_tensor({heads, head_dim, out}, 0.02, rng, dtype)); };
  auto b = [&](std::size_t out) { return param(Tensor::zeros({heads, out}, dtype)); };
  wq_ = w(d_), bq_ = b(d_);
  wk_ = w(d_), bk_ = b(d_);
  wv_ = w(d_), bv_ = b(d_);
  wo_ = w(d_), bo_ = b(d_);
  wi_ = w(1), bi_ = b(1);
  wf_ = w(1), bf_ = b(1);
}

Tensor MLSTMCell::forward(const Tensor& u, std::size_t chunk_size) const {
  if (u.rank() != 2 || u.dim(1) != heads_ * d_)
    throw DimensionError("mlstm cell: expected [N, " + std::to_string(heads_ * d_) + "], got " +
                         shape_str(u.shape()));
  const Tensor q = block_linear(u, wq_, bq_);
  const Tensor k = scale(block_linear(u, wk_, bk_), 1.0 / std::sqrt(static_cast<double>(d_)));
  const Tensor v = block_linear(u, wv_, bv_);
  const Tensor ig = block_linear(u, wi_, bi_);
  const Tensor fg = block_linear(u, wf_, bf_);
  const Tensor h = chunk_size ? mlstm_chunkwise(q, k, v, ig, fg, chunk_size) : mlstm_sequence(q, k, v, ig, fg);
  return mul(sigmoid(block_linear(u, wo_, bo_)), h);
}

void MLSTMCell::collect_parameters(const std::string& prefix, NamedTensors& out) const {
  const std::pair<const char*, const Tensor*> all[] = {{"wq", &wq_}, {"bq", &bq_}, {"wk", &wk_}, {"bk", &bk_},
                                                       {"wv", &wv_}, {"bv", &bv_}, {"wo", &wo_}, {"bo", &bo_},
                                                       {"wi", &wi_}, {"bi", &bi_}, {"wf", &wf_}, {"bf", &bf_}};
  for (const auto& [name, t] : all) out.emplace_back(join_name(prefix, name), *t);
}

ViLBlock::ViLBlock(const UNETVLConfig& cfg, Direction dir, Prng& rng)
    : dir_(dir),
      dim_(cfg.embed_dim),
      chunk_size_(cfg.chunk_size),
      gamma_(param(Tensor::ones({cfg.embed_dim}, cfg.dtype))),
      beta_(param(Tensor::zeros({cfg.embed_dim}, cfg.dtype))),
      up_(make_projection(cfg.projection, cfg.embed_dim, cfg.inner_dim(), cfg.hyper, rng, cfg.dtype)),
      down_(make_projection(cfg.projection, cfg.inner_dim(), cfg.embed_dim, cfg.hyper, rng, cfg.dtype)),
      cell_(cfg.num_heads(), cfg.head_dim, rng, cfg.dtype) {}

Tensor ViLBlock::core(const Tensor& tokens) const {
  if (tokens.rank() != 2 || tokens.dim(1) != dim_)
    throw DimensionError("vil block: expected [N, " + std::to_string(dim_) + "], got " + shape_str(tokens.shape()));
  const Tensor u = up_->forward(layer_norm(tokens, gamma_, beta_));
  const Tensor mixed = mul(cell_.forward(u, chunk_size_), silu(u));
  return add(tokens, down_->forward(mixed));
}

Tensor ViLBlock::forward(const Tensor& tokens) const {
  if (dir_ == Direction::Forward) return core(tokens);
  return flip(core(flip(tokens, 0)), 0);
}

void ViLBlock::collect_parameters(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(join_name(prefix, "norm.gamma"), gamma_);
  out.emplace_back(join_name(prefix, "norm.beta"), beta_);
  up_->collect_parameters(join_name(prefix, "up_proj"), out);
  cell_.collect_parameters(join_name(prefix, "mlstm"), out);
  down_->collect_parameters(join_name(prefix, "down_proj"), out);
}

ViLEncoder::ViLEncoder(const UNETVLConfig& cfg, const Prng& rng) : taps_(cfg.taps) {
  cfg.validate();
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    Prng block_rng = rng.split(b);
    blocks_.push_back(
        std::make_unique<ViLBlock>(cfg, b % 2 == 0 ? Direction::Forward : Direction::Backward, block_rng));
  }
}

EncoderTaps ViLEncoder::forward(const Tensor& tokens) const {
  EncoderTaps taps;
  Tensor z = tokens;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    z = blocks_[b]->forward(z);
    if (std::find(taps_.begin(), taps_.end(), b + 1) != taps_.end()) taps.emplace(b + 1, z);
  }
  return taps;
}

void ViLEncoder::collect_parameters(const std::string& prefix, NamedTensors& out) const {
  char name[16];
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    std::snprintf(name, sizeof name, "block%02zu", b + 1);
    blocks_[b]->collect_parameters(join_name(prefix, name), out);
  }
}

std::size_t ViLEncoder::projection_parameters() const {
  std::size_t n = 0;
  for (const auto& b : blocks_) n += b->up_proj().num_parameters() + b->down_proj().num_parameters();
  return n;
}

}  // namespace uvl
