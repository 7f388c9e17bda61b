#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unetvl/experiments.hpp"
#include "unetvl/train.hpp"
#include "unetvl/vil.hpp"

namespace uvl {

/// Everything a CLI run needs, read from `key = value` text.
struct RunConfig {
  UNETVLConfig model = default_model();
  TrainOptions train;
  std::uint64_t seed = 0;  // weight init and epoch shuffling
  std::uint64_t data_seed = 1;
  std::string out_dir = "runs/default";
  std::size_t train_size = 32;
  std::size_t val_size = 8;
  // bench
  std::vector<std::size_t> bench_lengths{64, 128, 256, 512, 1024};
  std::size_t bench_dim = 32;
  std::size_t bench_head_dim = 4;
  // bakeoff
  std::vector<ProjectionKind> bakeoff_kinds{ProjectionKind::Mlp, ProjectionKind::BSpline, ProjectionKind::GaussianRBF,
                                            ProjectionKind::Chebyshev};
  std::size_t bakeoff_folds = 3;
  std::size_t bakeoff_pool = 12;

  /// The tiny model with decoder_min_width 8.
  static UNETVLConfig default_model();

  /// Applies one assignment; throws ConfigError on an unknown key or a bad
  /// value. A leading section name (model., train., loss., optim., data.,
  /// bench., bakeoff.) is ignored.
  void set(const std::string& key, const std::string& value);
  /// Applies every `key = value` line; `#` starts a comment.
  void apply_text(const std::string& text, const std::string& origin = "<text>");
  void apply_file(const std::string& path);

  /// Canonical text form; apply_text(to_text()) reproduces the config.
  std::string to_text() const;
  /// Training options with the shuffle seed filled in.
  TrainOptions train_options() const;
  BakeoffConfig bakeoff() const;
  void validate() const;
};

/// Every accepted key with a one-line description.
std::vector<std::pair<std::string, std::string>> run_config_keys();

}  // namespace uvl
