#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "unetvl/module.hpp"
#include "unetvl/vil.hpp"

namespace uvl {

/// [N, K] -> [K, H/P, W/P, D/P] following the patchify raster.
Tensor tokens_to_grid(const Tensor& z, const std::array<std::size_t, 3>& grid);
/// [K, h, w, d] -> [h*w*d, K].
Tensor grid_to_tokens(const Tensor& g);

/// conv3d(k3, p1) -> instance norm -> leaky relu(0.01).
class ConvBlock : public Module {
 public:
  ConvBlock(std::size_t in, std::size_t out, Prng& rng, DType dtype);
  Tensor forward(const Tensor& x) const;
  void collect_parameters(const std::string& prefix, NamedTensors& out) const override;

 private:
  Tensor weight_, gamma_, beta_;
};

/// Stride-2, kernel-2 transposed convolution (no bias).
class Upsample : public Module {
 public:
  Upsample(std::size_t in, std::size_t out, Prng& rng, DType dtype);
  Tensor forward(const Tensor& x) const;
  void collect_parameters(const std::string& prefix, NamedTensors& out) const override;

 private:
  Tensor weight_;
};

/// Decoder layout derived from the config: T = number of taps, L = log2 P.
/// Stage j = 1..T has width max(min_width, K >> (j-1)) and upsamples iff
/// j > T - L. The skip of stage j < T is tap T-j raised by
/// max(0, j - (T - L)) [upsample + conv block] units; stage T merges an
/// input stem at full resolution.
struct DecoderPlan {
  std::size_t stages = 0, levels = 0;
  std::vector<std::size_t> widths;  // per stage
  std::vector<bool> upsample;       // per stage
  std::vector<std::size_t> skip_units;  // per stage; 0 means one conv block
};
DecoderPlan plan_decoder(const UNETVLConfig& cfg);

struct ParameterTable {
  std::size_t embed = 0, encoder = 0, projections = 0, decoder = 0;
  std::size_t total() const { return embed + encoder + projections + decoder; }
};

class UNETVL : public Module {
 public:
  UNETVL(const UNETVLConfig& cfg, std::uint64_t seed);

  /// volume [C_in, H, W, D] -> logits [num_classes, H, W, D].
  Tensor forward(const Tensor& volume) const;
  void collect_parameters(const std::string& prefix, NamedTensors& out) const override;

  const UNETVLConfig& config() const { return cfg_; }
  const ViLEncoder& encoder() const { return encoder_; }
  const Tensor& head_weight() const { return head_w_; }
  const Tensor& head_bias() const { return head_b_; }

 private:
  struct Stage {
    std::unique_ptr<Upsample> up;      // main path upsampler, or
    std::unique_ptr<ConvBlock> adapt;  // same-resolution width change
    std::vector<std::pair<std::unique_ptr<Upsample>, std::unique_ptr<ConvBlock>>> skip_units;
    std::unique_ptr<ConvBlock> skip_conv;  // used when there are no units
    std::unique_ptr<ConvBlock> merge1, merge2;
  };

  Tensor stage_forward(std::size_t j, const Tensor& x, const Tensor& skip) const;

  UNETVLConfig cfg_;
  DecoderPlan plan_;
  PatchEmbed3D embed_;
  ViLEncoder encoder_;
  std::vector<Stage> stages_;
  std::unique_ptr<ConvBlock> stem1_, stem2_;
  Tensor head_w_, head_b_;
};

ParameterTable count_parameters(const UNETVL& model);
/// Closed-form total for a config without building the model.
ParameterTable count_parameters(const UNETVLConfig& cfg);

/// Aligned text rendering of a parameter table.
std::string format_parameter_table(const ParameterTable& t);

/// Writes learnable tensors plus `extra` named tensors to a UVLC container.
void save_weights(const std::string& path, const Module& model, const NamedTensors& extra = {});
/// Copies stored values into the model's parameters; returns the entries
/// that are not model parameters. Throws FormatError on any name or shape
/// mismatch.
NamedTensors load_weights(const std::string& path, const Module& model);

}  // namespace uvl
