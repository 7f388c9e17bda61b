#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "unetvl/tensor.hpp"

namespace uvl {

struct GradcheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  /// Coordinates checked per tensor; larger tensors are subsampled.
  std::size_t max_coords = 64;
  std::uint64_t seed = 0;
};

struct GradcheckReport {
  bool passed = false;
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  /// Location of the worst coordinate: tensor position in the checked list
  /// and flat index inside it.
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  /// Coordinates re-estimated with smaller steps after failing at eps.
  std::size_t refined = 0;
};

/// Compares backward() against central differences
/// (f(x + eps e_i) - f(x - eps e_i)) / 2 eps on (a sample of) coordinates of x.
///
/// Per-coordinate error is |a - n| / max(|n|, 1e-2 * scale, 1e-10), where
/// scale is the largest gradient magnitude among checked coordinates. x must
/// be f64 and f scalar-valued; f is evaluated twice up front and must agree
/// bitwise, otherwise OracleError is thrown. Coordinates failing at eps are
/// re-estimated at eps/16 and eps/256 and keep the closest estimate, so a
/// step straddling a kink is not mistaken for a wrong gradient.
GradcheckReport gradcheck(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                          const GradcheckOptions& options = {});

/// Same check over every coordinate sample of several leaf parameters that
/// `loss` closes over. Parameters are perturbed in place and restored.
GradcheckReport gradcheck_params(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                                 const GradcheckOptions& options = {});

std::string describe(const GradcheckReport& report);

}  // namespace uvl
