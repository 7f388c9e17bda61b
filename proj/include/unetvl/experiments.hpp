#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unetvl/module.hpp"
#include "unetvl/train.hpp"
#include "unetvl/vil.hpp"

namespace uvl {

// Scaling benchmark -------------------------------------------------------------

/// Reference pre-norm multi-head self-attention block with residual:
/// x + Wo softmax(Q K^T / sqrt(d)) V, heads = K / d.
class AttentionBlock : public Module {
 public:
  AttentionBlock(std::size_t dim, std::size_t head_dim, Prng& rng, DType dtype);
  Tensor forward(const Tensor& tokens) const;
  void collect_parameters(const std::string& prefix, NamedTensors& out) const override;

 private:
  std::size_t dim_, head_dim_;
  Tensor gamma_, beta_, wqkv_, bqkv_, wo_, bo_;
};

struct BenchRow {
  std::string block;  // "attention" or "vil"
  std::size_t tokens = 0;
  std::int64_t peak_bytes = 0;  // forward activations above the input
  std::uint64_t flops = 0;
  std::int64_t state_bytes = 0;  // vil: recurrent state of all heads after the scan
};

struct BenchResult {
  std::vector<BenchRow> rows;
  double attention_memory_slope = 0.0, vil_memory_slope = 0.0;
  double attention_flop_slope = 0.0, vil_flop_slope = 0.0;
};

/// Forward-only (no graph) peak memory and FLOPs of one attention block and
/// one ViL block (Linear projections, sequential scan) at each length.
BenchResult bench_scaling(const std::vector<std::size_t>& lengths, std::size_t dim, std::size_t head_dim,
                          std::uint64_t seed = 0, DType dtype = DType::F32);

/// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

std::string format_bench_table(const BenchResult& r);
std::string bench_csv(const BenchResult& r);

// Basis bakeoff -----------------------------------------------------------------

struct BakeoffConfig {
  UNETVLConfig model;  // projection is overridden per kind
  std::vector<ProjectionKind> kinds;
  std::size_t folds = 3;
  std::size_t pool_size = 12;  // volumes shared by all folds
  std::uint64_t data_seed = 0;
  std::uint64_t model_seed = 0;
  TrainOptions train;
};

struct BakeoffCell {
  bool ok = false;
  double dice = 0.0;
  std::string error;
};

struct BakeoffTable {
  std::vector<ProjectionKind> kinds;
  std::vector<std::vector<BakeoffCell>> cells;  // [fold][kind]
  /// Mean over successful folds; NaN if every fold failed.
  std::vector<double> means;
};

/// Trains one model per (kind, fold) with shared data and seeds. A failed
/// run becomes a failed cell.
BakeoffTable bakeoff_run(const BakeoffConfig& cfg,
                         const std::function<void(std::size_t fold, ProjectionKind, const BakeoffCell&)>& on_cell = {});

/// Folds as rows, kinds as columns, then an Avg row; Dice in percent.
std::string format_bakeoff_table(const BakeoffTable& t);
std::string bakeoff_csv(const BakeoffTable& t);

}  // namespace uvl
