#pragma once

#include <string>
#include <vector>

#include "unetvl/gradcheck.hpp"

namespace uvl {

struct ComponentCheck {
  std::string component;
  GradcheckReport input;  // gradient with respect to the component input
  GradcheckReport params;  // gradient with respect to its learnable tensors
  bool passed() const { return input.passed && params.passed; }
  double max_rel_error() const { return std::max(input.max_rel_error, params.max_rel_error); }
};

/// chebyshev, bspline, rbf, mlp, linear, mlstm, vilblock, encoder, model, loss.
const std::vector<std::string>& gradcheck_components();

/// Runs the f64 gradient check of one component at tolerance `tol`. With
/// `planted_fault` the checked function gains a term whose gradient is
/// withheld from backward, which the check must detect. Throws ConfigError
/// for an unknown component.
ComponentCheck run_gradcheck(const std::string& component, double tol = 1e-4, bool planted_fault = false);

/// "component  PASS  max_rel=..." plus the worst coordinate on failure.
std::string describe(const ComponentCheck& c);

}  // namespace uvl
