#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "unetvl/model.hpp"
#include "unetvl/prng.hpp"
#include "unetvl/tensor.hpp"

namespace uvl {

using Labels = std::vector<std::uint8_t>;

// Data -------------------------------------------------------------------------

struct Sample {
  Tensor volume;  // [1, H, W, D], values in [0, 1]
  Labels label;   // H*W*D class ids
};

/// Intensity band of a class: background takes the middle band
/// (num_classes / 2), foreground classes fill the others in label order.
std::size_t intensity_rank(std::size_t label, std::size_t num_classes);

/// One random-ellipsoid volume: class c > 0 occupies an axis-aligned
/// ellipsoid with radii in [0.15, 0.3] x extent; intensities are per-class
/// bands plus N(0, 0.05) noise, clipped to [0, 1]. Every class is present.
Sample gen_synthetic_volume(Prng& rng, const std::array<std::size_t, 3>& extent, std::size_t num_classes,
                            DType dtype = DType::F32);

/// Deterministic pool of synthetic volumes; sample i is drawn from
/// Prng(seed).split(i), so the pool is independent of access order.
class SyntheticVolumeDataset {
 public:
  SyntheticVolumeDataset(std::uint64_t seed, std::array<std::size_t, 3> extent, std::size_t num_classes,
                         std::size_t train_size, std::size_t val_size, DType dtype = DType::F32);

  const Sample& train(std::size_t i) const { return samples_.at(train_idx_.at(i)); }
  const Sample& val(std::size_t i) const { return samples_.at(val_idx_.at(i)); }
  std::size_t train_size() const { return train_idx_.size(); }
  std::size_t val_size() const { return val_idx_.size(); }
  std::size_t num_classes() const { return num_classes_; }

  /// Same pool re-split for k-fold use: fold f of k is the validation set.
  SyntheticVolumeDataset fold(std::size_t f, std::size_t k) const;

 private:
  SyntheticVolumeDataset() = default;
  std::size_t num_classes_ = 0;
  std::vector<Sample> samples_;
  std::vector<std::size_t> train_idx_, val_idx_;
};

// Loss and metric -------------------------------------------------------------

struct LossConfig {
  double ce_weight = 1.0;
  double dice_weight = 1.0;
  double smooth = 1e-5;
  void validate() const;
};

/// ce_weight * mean voxel cross-entropy + dice_weight * (1 - mean soft Dice
/// over foreground classes). logits: [C, ...spatial].
Tensor dice_ce_loss(const Tensor& logits, const Labels& labels, const LossConfig& cfg);

struct DiceResult {
  std::vector<double> per_class;  // classes 1..C-1
  double mean = 0.0;
};

/// Hard Dice per foreground class; a class absent from both inputs scores 1.
DiceResult dice_metric(const Labels& pred, const Labels& gt, std::size_t num_classes);

/// argmax over the leading class axis.
Labels argmax_labels(const Tensor& logits);

// Optimization ----------------------------------------------------------------

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t step = 0;
};

/// Decoupled-weight-decay Adam update of every parameter in place, using
/// the accumulated grads. Throws GraphError if a parameter has no grad.
void adamw_step(const NamedTensors& params, AdamState& state, const AdamWConfig& cfg, double lr);

/// lr0 * (1 - step/total)^power.
double polynomial_lr(std::uint64_t step, std::uint64_t total_steps, double lr0, double power = 0.9);

// Training --------------------------------------------------------------------

struct TrainOptions {
  LossConfig loss;
  AdamWConfig optim;
  double lr_power = 0.9;
  std::size_t batch_size = 4;
  std::size_t total_steps = 200;
  std::uint64_t seed = 0;  // shuffling
  /// Stop (for checkpointing) once this many steps have run; 0 = no early stop.
  std::size_t stop_after = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  DiceResult val;
  /// One structured text line: "epoch=.. step=.. lr=.. train_loss=.. val_dice=.. dice_c1=..".
  std::string to_line() const;
};

struct TrainState {
  AdamState optim;
  /// Loss sum of the steps already run in the current epoch.
  double epoch_loss_sum = 0.0;
};

/// Runs optimizer steps from state.optim.step up to the step budget (or
/// stop_after). Epochs shuffle the training indices with
/// Prng(seed).split(epoch); the batch composition depends only on the step
/// number, so a resumed run continues bit-identically. Throws NumericError
/// naming the step and lr on a non-finite loss.
std::vector<EpochRecord> train_loop(const UNETVL& model, const SyntheticVolumeDataset& data,
                                    const TrainOptions& options, TrainState& state,
                                    const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Mean Dice of the model on the validation (or training) split.
DiceResult evaluate(const UNETVL& model, const SyntheticVolumeDataset& data, bool train_split = false);

/// Model weights + optimizer moments + step in one container.
void save_train_state(const std::string& path, const UNETVL& model, const TrainState& state);
TrainState load_train_state(const std::string& path, const UNETVL& model);

}  // namespace uvl
