#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <memory>
#include <vector>

#include "unetvl/kan.hpp"
#include "unetvl/module.hpp"
#include "unetvl/prng.hpp"
#include "unetvl/tensor.hpp"

namespace uvl {

/// Architecture parameters shared by encoder and model.
struct UNETVLConfig {
  std::size_t H = 128, W = 128, D = 128;
  std::size_t in_channels = 1;
  std::size_t patch = 16;  // isotropic P
  std::size_t embed_dim = 384;  // K
  std::size_t depth = 12;
  std::vector<std::size_t> taps{3, 6, 9, 12};  // 1-based block indices
  std::size_t head_dim = 16;  // d
  std::size_t expansion = 2;  // e
  ProjectionKind projection = ProjectionKind::Chebyshev;
  ProjectionHyper hyper;  // hyper.degree is the Chebyshev degree
  std::size_t num_classes = 4;
  std::size_t decoder_min_width = 16;
  std::size_t chunk_size = 0;  // 0: sequential scan
  DType dtype = DType::F32;

  /// 32^3, P=8, K=32, depth 4, taps {1,2,3,4}, 3 classes.
  static UNETVLConfig tiny();
  /// 8^3, P=4, K=8, d=4, depth 2, taps {1,2}, 2 classes, f64.
  static UNETVLConfig micro();

  std::size_t inner_dim() const { return expansion * embed_dim; }
  std::size_t num_heads() const { return inner_dim() / head_dim; }
  std::array<std::size_t, 3> grid() const { return {H / patch, W / patch, D / patch}; }
  std::size_t num_tokens() const { return (H / patch) * (W / patch) * (D / patch); }
  /// Throws ConfigError describing the first violated constraint.
  void validate() const;
};

using PatchSize = std::array<std::size_t, 3>;

/// N = (H/ph)(W/pw)(D/pd); throws DimensionError naming a non-divisible axis.
std::size_t num_patches(std::size_t H, std::size_t W, std::size_t D, const PatchSize& patch);

/// [C, H, W, D] -> [N, C*ph*pw*pd]. Tokens in raster order (height-major,
/// depth fastest); each row is the patch flattened as (c, ph, pw, pd).
Tensor patchify(const Tensor& volume, const PatchSize& patch);
/// Exact inverse of patchify.
Tensor unpatchify(const Tensor& patches, std::size_t channels, std::size_t H, std::size_t W, std::size_t D,
                  const PatchSize& patch);

/// Linear patch projection plus a learnable positional table.
class PatchEmbed3D : public Module {
 public:
  PatchEmbed3D(const UNETVLConfig& cfg, Prng rng);
  /// patches [N, C*P^3] -> tokens [N, K].
  Tensor forward(const Tensor& patches) const;
  void collect_parameters(const std::string& prefix, NamedTensors& out) const override;

  const Tensor& weight() const { return weight_; }
  const Tensor& pos() const { return pos_; }

 private:
  Tensor weight_, pos_;
};

/// Per-head affine maps producing q, k, v, gate preactivations and the
/// output gate from a [N, H*d] sequence, followed by the mLSTM scan.
class MLSTMCell : public Module {
 public:
  MLSTMCell(std::size_t heads, std::size_t head_dim, Prng& rng, DType dtype);
  /// [N, H*d] -> sigmoid(o) * h, [N, H*d]. chunk_size 0 runs sequentially.
  Tensor forward(const Tensor& u, std::size_t chunk_size = 0) const;
  void collect_parameters(const std::string& prefix, NamedTensors& out) const override;

  std::size_t heads() const { return heads_; }
  std::size_t head_dim() const { return d_; }

 private:
  std::size_t heads_, d_;
  Tensor wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_, wi_, bi_, wf_, bf_;
};

enum class Direction { Forward, Backward };

/// Residual block: x + down(mlstm(up(norm x)) * silu(up(norm x))).
/// Backward blocks run the same core on the reversed sequence.
class ViLBlock : public Module {
 public:
  ViLBlock(const UNETVLConfig& cfg, Direction dir, Prng& rng);

  Tensor forward(const Tensor& tokens) const;
  /// The direction-free computation.
  Tensor core(const Tensor& tokens) const;
  void collect_parameters(const std::string& prefix, NamedTensors& out) const override;

  Direction direction() const { return dir_; }
  void set_direction(Direction dir) { dir_ = dir; }
  const Projection& up_proj() const { return *up_; }
  const Projection& down_proj() const { return *down_; }

 private:
  Direction dir_;
  std::size_t dim_, chunk_size_;
  Tensor gamma_, beta_;
  std::unique_ptr<Projection> up_, down_;
  MLSTMCell cell_;
};

/// tap index (1-based block number) -> [N, K] output of that block.
using EncoderTaps = std::map<std::size_t, Tensor>;

/// Stack of `depth` blocks alternating Forward, Backward, ...
class ViLEncoder : public Module {
 public:
  /// Block b draws its weights from rng.split(b).
  ViLEncoder(const UNETVLConfig& cfg, const Prng& rng);
  EncoderTaps forward(const Tensor& tokens) const;
  void collect_parameters(const std::string& prefix, NamedTensors& out) const override;

  const std::vector<std::unique_ptr<ViLBlock>>& blocks() const { return blocks_; }
  /// Parameters of all up/down projections.
  std::size_t projection_parameters() const;

 private:
  std::vector<std::size_t> taps_;
  std::vector<std::unique_ptr<ViLBlock>> blocks_;
};

}  // namespace uvl
