#include "unetvl/kan.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <string>

#include "unetvl/ops.hpp"

namespace uvl {

std::string_view to_string(ProjectionKind kind) {
  switch (kind) {
    case ProjectionKind::Chebyshev: return "chebyshev";
    case ProjectionKind::BSpline: return "bspline";
    case ProjectionKind::GaussianRBF: return "rbf";
    case ProjectionKind::Mlp: return "mlp";
    case ProjectionKind::Linear: return "linear";
  }
  return "?";
}

ProjectionKind parse_projection_kind(std::string_view name) {
  std::string s(name);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "chebyshev" || s == "cheby") return ProjectionKind::Chebyshev;
  if (s == "bspline" || s == "b-spline") return ProjectionKind::BSpline;
  if (s == "rbf" || s == "gaussian_rbf") return ProjectionKind::GaussianRBF;
  if (s == "mlp") return ProjectionKind::Mlp;
  if (s == "linear") return ProjectionKind::Linear;
  throw ConfigError("unknown projection kind '" + std::string(name) + "'");
}

std::size_t ProjectionHyper::rbf_centers() const {
  return num_centers ? num_centers : static_cast<std::size_t>(std::max(degree, 1)) + 1;
}

std::size_t projection_param_count(ProjectionKind kind, std::size_t input_dim, std::size_t output_dim,
                                   const ProjectionHyper& hyper) {
  switch (kind) {
    case ProjectionKind::Chebyshev:
      return input_dim * output_dim * static_cast<std::size_t>(hyper.degree + 1);
    case ProjectionKind::BSpline:
      return input_dim * output_dim * (hyper.grid_size + hyper.spline_order);
    case ProjectionKind::GaussianRBF:
      return input_dim * output_dim * hyper.rbf_centers();
    case ProjectionKind::Mlp: {
      const std::size_t h = hyper.hidden_for(output_dim);
      return input_dim * h + h + h * output_dim + output_dim;
    }
    case ProjectionKind::Linear:
      return input_dim * output_dim + output_dim;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// bases

Tensor chebyshev_polynomials(const Tensor& u, int degree) {
  if (degree < 0) throw ConfigError("chebyshev: degree must be >= 0, got " + std::to_string(degree));
  if (u.rank() != 2) throw DimensionError("chebyshev: expected [N, K] input, got " + shape_str(u.shape()));
  const std::size_t terms = static_cast<std::size_t>(degree) + 1;
  const std::size_t n = u.numel();
  std::vector<double> t(n * terms);
  for (std::size_t e = 0; e < n; ++e) {
    double* row = t.data() + e * terms;
    const double x = u[e];
    row[0] = 1.0;
    if (terms > 1) row[1] = x;
    for (std::size_t m = 2; m < terms; ++m) row[m] = 2.0 * x * row[m - 1] - row[m - 2];
  }
  add_flops(3 * n * terms);
  return make_result("chebyshev_polynomials", {u.dim(0), u.dim(1), terms}, std::move(t), u.dtype(), {u},
                     [u, terms](std::span<const double> g, std::span<const double> out, GradSink& sink) {
                       auto du = sink.at(0);
                       std::vector<double> dt(terms);
                       for (std::size_t e = 0; e < du.size(); ++e) {
                         const double x = u[e];
                         const double* tr = out.data() + e * terms;
                         // T'_0 = 0, T'_1 = 1, T'_m = 2 T_{m-1} + 2x T'_{m-1} - T'_{m-2}
                         double acc = 0.0;
                         for (std::size_t m = 0; m < terms; ++m) {
                           if (m == 0) dt[m] = 0.0;
                           else if (m == 1) dt[m] = 1.0;
                           else dt[m] = 2.0 * tr[m - 1] + 2.0 * x * dt[m - 1] - dt[m - 2];
                           acc += g[e * terms + m] * dt[m];
                         }
                         du[e] += acc;
                       }
                     });
}

Tensor chebyshev_basis(const Tensor& x, int degree) { return chebyshev_polynomials(tanh(x), degree); }

namespace {

struct UniformKnots {
  std::size_t grid, order;
  double h;
  double at(std::size_t i) const { return -1.0 + (static_cast<double>(i) - static_cast<double>(order)) * h; }
};

// Values of all order-p B-splines at x (Cox-de Boor). Returns count = grid + 2*order - p.
void bspline_values(const UniformKnots& kn, double x, std::size_t p, std::vector<double>& b) {
  const std::size_t n0 = kn.grid + 2 * kn.order;  // number of order-0 functions
  b.assign(n0, 0.0);
  for (std::size_t i = 0; i < n0; ++i) b[i] = (kn.at(i) <= x && x < kn.at(i + 1)) ? 1.0 : 0.0;
  for (std::size_t q = 1; q <= p; ++q) {
    for (std::size_t i = 0; i + q < n0; ++i) {
      const double left = (x - kn.at(i)) / (kn.at(i + q) - kn.at(i)) * b[i];
      const double right = (kn.at(i + q + 1) - x) / (kn.at(i + q + 1) - kn.at(i + 1)) * b[i + 1];
      b[i] = left + right;
    }
  }
  b.resize(n0 - p);
}

// Keeps squashed inputs inside the half-open support [-1, 1).
double clamp_unit(double u) { return std::clamp(u, -1.0, std::nextafter(1.0, 0.0)); }

}  // namespace

Tensor bspline_basis(const Tensor& u, std::size_t grid, std::size_t order) {
  if (u.rank() != 2) throw DimensionError("bspline: expected [N, K] input, got " + shape_str(u.shape()));
  if (grid == 0) throw ConfigError("bspline: grid size must be positive");
  const UniformKnots kn{grid, order, 2.0 / static_cast<double>(grid)};
  const std::size_t nb = grid + order;
  std::vector<double> out(u.numel() * nb);
  std::vector<double> b;
  for (std::size_t e = 0; e < u.numel(); ++e) {
    bspline_values(kn, clamp_unit(u[e]), order, b);
    std::copy(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(nb), out.begin() + static_cast<std::ptrdiff_t>(e * nb));
  }
  add_flops(u.numel() * nb * (order + 1) * 6);
  return make_result("bspline_basis", {u.dim(0), u.dim(1), nb}, std::move(out), u.dtype(), {u},
                     [u, kn, nb](std::span<const double> g, std::span<const double>, GradSink& sink) {
                       auto du = sink.at(0);
                       const std::size_t p = kn.order;
                       if (p == 0) return;
                       std::vector<double> lower;
                       for (std::size_t e = 0; e < du.size(); ++e) {
                         const double x = clamp_unit(u[e]);
                         if (x != u[e]) continue;
                         bspline_values(kn, x, p - 1, lower);
                         double acc = 0.0;
                         for (std::size_t i = 0; i < nb; ++i) {
                           // B'_{i,p} = p/(t_{i+p}-t_i) B_{i,p-1} - p/(t_{i+p+1}-t_{i+1}) B_{i+1,p-1}
                           const double d = static_cast<double>(p) *
                                            (lower[i] / (kn.at(i + p) - kn.at(i)) -
                                             lower[i + 1] / (kn.at(i + p + 1) - kn.at(i + 1)));
                           acc += g[e * nb + i] * d;
                         }
                         du[e] += acc;
                       }
                     });
}

Tensor rbf_basis(const Tensor& u, std::size_t num_centers) {
  if (u.rank() != 2) throw DimensionError("rbf: expected [N, K] input, got " + shape_str(u.shape()));
  if (num_centers < 2) throw ConfigError("rbf: need at least 2 centers");
  const double spacing = 2.0 / static_cast<double>(num_centers - 1);
  auto center = [spacing](std::size_t j) { return -1.0 + spacing * static_cast<double>(j); };
  const std::size_t m = num_centers;
  std::vector<double> out(u.numel() * m);
  for (std::size_t e = 0; e < u.numel(); ++e) {
    for (std::size_t j = 0; j < m; ++j) {
      const double z = (u[e] - center(j)) / spacing;
      out[e * m + j] = std::exp(-z * z);
    }
  }
  add_flops(u.numel() * m * 4);
  return make_result("rbf_basis", {u.dim(0), u.dim(1), m}, std::move(out), u.dtype(), {u},
                     [u, m, spacing, center](std::span<const double> g, std::span<const double> out, GradSink& sink) {
                       auto du = sink.at(0);
                       for (std::size_t e = 0; e < du.size(); ++e) {
                         double acc = 0.0;
                         for (std::size_t j = 0; j < m; ++j) {
                           const double z = (u[e] - center(j)) / spacing;
                           acc += g[e * m + j] * out[e * m + j] * (-2.0 * z / spacing);
                         }
                         du[e] += acc;
                       }
                     });
}

Tensor basis_contract(const Tensor& basis, const Tensor& coeffs) {
  if (basis.rank() != 3 || coeffs.rank() != 3 || basis.dim(1) != coeffs.dim(0) || basis.dim(2) != coeffs.dim(2)) {
    throw DimensionError("basis_contract: basis " + shape_str(basis.shape()) + " incompatible with coefficients " +
                         shape_str(coeffs.shape()));
  }
  const std::size_t n = basis.dim(0), k = basis.dim(1), j = basis.dim(2), o = coeffs.dim(1);
  const Tensor c = reshape(permute(coeffs, {0, 2, 1}), {k * j, o});
  return matmul(reshape(basis, {n, k * j}), c);
}

// ---------------------------------------------------------------------------
// projections

void Projection::check_input(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != input_dim_) {
    throw DimensionError(std::string(to_string(kind_)) + " projection expects [N, " + std::to_string(input_dim_) +
                         "] input, got " + shape_str(x.shape()));
  }
}

ChebyshevKANLayer::ChebyshevKANLayer(std::size_t input_dim, std::size_t output_dim, int degree, Prng& rng,
                                     DType dtype)
    : Projection(ProjectionKind::Chebyshev, input_dim, output_dim), degree_(degree) {
  if (degree < 0) throw ConfigError("chebyshev: degree must be >= 0");
  const std::size_t terms = static_cast<std::size_t>(degree) + 1;
  coeffs_ = param(normal_tensor({input_dim, output_dim, terms}, 1.0 / static_cast<double>(input_dim * terms), rng, dtype));
}

ChebyshevKANLayer::ChebyshevKANLayer(Tensor coeffs, int degree)
    : Projection(ProjectionKind::Chebyshev, coeffs.dim(0), coeffs.dim(1)), degree_(degree), coeffs_(std::move(coeffs)) {
  if (degree < 0) throw ConfigError("chebyshev: degree must be >= 0");
  if (coeffs_.rank() != 3 || coeffs_.dim(2) != static_cast<std::size_t>(degree) + 1) {
    throw DimensionError("chebyshev: coefficients " + shape_str(coeffs_.shape()) + " do not match degree " +
                         std::to_string(degree));
  }
}

Tensor ChebyshevKANLayer::forward(const Tensor& x) const {
  check_input(x);
  return basis_contract(chebyshev_basis(x, degree_), coeffs_);
}

void ChebyshevKANLayer::collect_parameters(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(join_name(prefix, "coeffs"), coeffs_);
}

BSplineKANLayer::BSplineKANLayer(std::size_t input_dim, std::size_t output_dim, std::size_t grid, std::size_t order,
                                 Prng& rng, DType dtype)
    : Projection(ProjectionKind::BSpline, input_dim, output_dim), grid_(grid), order_(order) {
  const std::size_t nb = grid + order;
  coeffs_ = param(normal_tensor({input_dim, output_dim, nb}, 1.0 / static_cast<double>(input_dim * nb), rng, dtype));
}

Tensor BSplineKANLayer::forward(const Tensor& x) const {
  check_input(x);
  return basis_contract(bspline_basis(tanh(x), grid_, order_), coeffs_);
}

void BSplineKANLayer::collect_parameters(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(join_name(prefix, "coeffs"), coeffs_);
}

GaussianRBFKANLayer::GaussianRBFKANLayer(std::size_t input_dim, std::size_t output_dim, std::size_t num_centers,
                                         Prng& rng, DType dtype)
    : Projection(ProjectionKind::GaussianRBF, input_dim, output_dim), num_centers_(num_centers) {
  weights_ = param(normal_tensor({input_dim, output_dim, num_centers},
                                 1.0 / static_cast<double>(input_dim * num_centers), rng, dtype));
}

GaussianRBFKANLayer::GaussianRBFKANLayer(Tensor weights)
    : Projection(ProjectionKind::GaussianRBF, weights.dim(0), weights.dim(1)),
      num_centers_(weights.dim(2)),
      weights_(std::move(weights)) {}

Tensor GaussianRBFKANLayer::forward(const Tensor& x) const {
  check_input(x);
  return basis_contract(rbf_basis(tanh(x), num_centers_), weights_);
}

void GaussianRBFKANLayer::collect_parameters(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(join_name(prefix, "weights"), weights_);
}

MLPProjection::MLPProjection(std::size_t input_dim, std::size_t output_dim, std::size_t hidden, Prng& rng,
                             DType dtype)
    : Projection(ProjectionKind::Mlp, input_dim, output_dim),
      w1_(param(trunc_normal_tensor({input_dim, hidden}, 0.02, rng, dtype))),
      b1_(param(Tensor::zeros({hidden}, dtype))),
      w2_(param(trunc_normal_tensor({hidden, output_dim}, 0.02, rng, dtype))),
      b2_(param(Tensor::zeros({output_dim}, dtype))) {}

Tensor MLPProjection::forward(const Tensor& x) const {
  check_input(x);
  return add_last(matmul(silu(add_last(matmul(x, w1_), b1_)), w2_), b2_);
}

void MLPProjection::collect_parameters(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(join_name(prefix, "w1"), w1_);
  out.emplace_back(join_name(prefix, "b1"), b1_);
  out.emplace_back(join_name(prefix, "w2"), w2_);
  out.emplace_back(join_name(prefix, "b2"), b2_);
}

LinearProjection::LinearProjection(std::size_t input_dim, std::size_t output_dim, Prng& rng, DType dtype)
    : Projection(ProjectionKind::Linear, input_dim, output_dim),
      weight_(param(trunc_normal_tensor({input_dim, output_dim}, 0.02, rng, dtype))),
      bias_(param(Tensor::zeros({output_dim}, dtype))) {}

Tensor LinearProjection::forward(const Tensor& x) const {
  check_input(x);
  return add_last(matmul(x, weight_), bias_);
}

void LinearProjection::collect_parameters(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(join_name(prefix, "weight"), weight_);
  out.emplace_back(join_name(prefix, "bias"), bias_);
}

std::unique_ptr<Projection> make_projection(ProjectionKind kind, std::size_t input_dim, std::size_t output_dim,
                                            const ProjectionHyper& hyper, Prng& rng, DType dtype) {
  switch (kind) {
    case ProjectionKind::Chebyshev:
      return std::make_unique<ChebyshevKANLayer>(input_dim, output_dim, hyper.degree, rng, dtype);
    case ProjectionKind::BSpline:
      return std::make_unique<BSplineKANLayer>(input_dim, output_dim, hyper.grid_size, hyper.spline_order, rng, dtype);
    case ProjectionKind::GaussianRBF:
      return std::make_unique<GaussianRBFKANLayer>(input_dim, output_dim, hyper.rbf_centers(), rng, dtype);
    case ProjectionKind::Mlp:
      return std::make_unique<MLPProjection>(input_dim, output_dim, hyper.hidden_for(output_dim), rng, dtype);
    case ProjectionKind::Linear:
      return std::make_unique<LinearProjection>(input_dim, output_dim, rng, dtype);
  }
  throw ConfigError("unknown projection kind");
}

}  // namespace uvl
