#pragma once

#include <cstddef>
#include <memory>
#include <string_view>

#include "unetvl/module.hpp"
#include "unetvl/prng.hpp"
#include "unetvl/tensor.hpp"

namespace uvl {

enum class ProjectionKind { Chebyshev, BSpline, GaussianRBF, Mlp, Linear };

std::string_view to_string(ProjectionKind kind);
/// Accepts chebyshev, bspline, rbf, mlp, linear (case-insensitive).
ProjectionKind parse_projection_kind(std::string_view name);

/// Per-kind hyperparameters. Zero means "derive the default".
struct ProjectionHyper {
  int degree = 4;                   // Chebyshev
  std::size_t grid_size = 5;        // B-spline intervals on [-1, 1]
  std::size_t spline_order = 3;     // cubic
  std::size_t num_centers = 0;      // RBF; default degree + 1
  std::size_t mlp_hidden = 0;       // MLP; default output_dim

  std::size_t rbf_centers() const;
  std::size_t hidden_for(std::size_t output_dim) const { return mlp_hidden ? mlp_hidden : output_dim; }
};

/// Closed-form learnable-parameter count of one projection.
std::size_t projection_param_count(ProjectionKind kind, std::size_t input_dim, std::size_t output_dim,
                                   const ProjectionHyper& hyper);

// Basis evaluations ------------------------------------------------------------

/// T[n, i, m] = T_m(u[n, i]) for m = 0..degree via T_m = 2u T_{m-1} - T_{m-2}.
/// u is used as given (no squashing).
Tensor chebyshev_polynomials(const Tensor& u, int degree);
/// chebyshev_polynomials(tanh(x), degree).
Tensor chebyshev_basis(const Tensor& x, int degree);

/// Uniform-knot B-spline basis of the given order on [-1, 1], extended by
/// `order` knots on each side: [N, K] -> [N, K, grid + order].
Tensor bspline_basis(const Tensor& u, std::size_t grid, std::size_t order);

/// Gaussian bumps exp(-((u - c_j) / s)^2) with centers uniform on [-1, 1]
/// and s the center spacing: [N, K] -> [N, K, num_centers].
Tensor rbf_basis(const Tensor& u, std::size_t num_centers);

/// y[n, o] = sum_i sum_j basis[n, i, j] * coeffs[i, o, j].
Tensor basis_contract(const Tensor& basis, const Tensor& coeffs);

// Projections ------------------------------------------------------------------

/// Common shape contract: [N, input_dim] -> [N, output_dim].
class Projection : public Module {
 public:
  Projection(ProjectionKind kind, std::size_t input_dim, std::size_t output_dim)
      : kind_(kind), input_dim_(input_dim), output_dim_(output_dim) {}

  virtual Tensor forward(const Tensor& x) const = 0;

  ProjectionKind kind() const { return kind_; }
  std::size_t input_dim() const { return input_dim_; }
  std::size_t output_dim() const { return output_dim_; }

 protected:
  void check_input(const Tensor& x) const;

 private:
  ProjectionKind kind_;
  std::size_t input_dim_, output_dim_;
};

/// Chebyshev KAN layer with coefficient tensor C of shape
/// [input_dim, output_dim, degree + 1]. Inputs are squashed by tanh before
/// the recurrence.
class ChebyshevKANLayer final : public Projection {
 public:
  ChebyshevKANLayer(std::size_t input_dim, std::size_t output_dim, int degree, Prng& rng,
                    DType dtype = DType::F64);
  ChebyshevKANLayer(Tensor coeffs, int degree);

  Tensor forward(const Tensor& x) const override;
  void collect_parameters(const std::string& prefix, NamedTensors& out) const override;

  int degree() const { return degree_; }
  const Tensor& coeffs() const { return coeffs_; }

 private:
  int degree_;
  Tensor coeffs_;
};

class BSplineKANLayer final : public Projection {
 public:
  BSplineKANLayer(std::size_t input_dim, std::size_t output_dim, std::size_t grid, std::size_t order, Prng& rng,
                  DType dtype = DType::F64);

  Tensor forward(const Tensor& x) const override;
  void collect_parameters(const std::string& prefix, NamedTensors& out) const override;
  const Tensor& coeffs() const { return coeffs_; }

 private:
  std::size_t grid_, order_;
  Tensor coeffs_;
};

/// Fixed centers and bandwidth; only the weights learn.
class GaussianRBFKANLayer final : public Projection {
 public:
  GaussianRBFKANLayer(std::size_t input_dim, std::size_t output_dim, std::size_t num_centers, Prng& rng,
                      DType dtype = DType::F64);
  GaussianRBFKANLayer(Tensor weights);

  Tensor forward(const Tensor& x) const override;
  void collect_parameters(const std::string& prefix, NamedTensors& out) const override;
  const Tensor& weights() const { return weights_; }

 private:
  std::size_t num_centers_;
  Tensor weights_;
};

/// input -> hidden (silu) -> output.
class MLPProjection final : public Projection {
 public:
  MLPProjection(std::size_t input_dim, std::size_t output_dim, std::size_t hidden, Prng& rng,
                DType dtype = DType::F64);

  Tensor forward(const Tensor& x) const override;
  void collect_parameters(const std::string& prefix, NamedTensors& out) const override;

 private:
  Tensor w1_, b1_, w2_, b2_;
};

class LinearProjection final : public Projection {
 public:
  LinearProjection(std::size_t input_dim, std::size_t output_dim, Prng& rng, DType dtype = DType::F64);

  Tensor forward(const Tensor& x) const override;
  void collect_parameters(const std::string& prefix, NamedTensors& out) const override;
  const Tensor& weight() const { return weight_; }

 private:
  Tensor weight_, bias_;
};

std::unique_ptr<Projection> make_projection(ProjectionKind kind, std::size_t input_dim, std::size_t output_dim,
                                            const ProjectionHyper& hyper, Prng& rng, DType dtype = DType::F64);

}  // namespace uvl
