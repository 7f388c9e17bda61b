#include "unetvl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "unetvl/prng.hpp"

namespace uvl {

namespace {

std::vector<std::size_t> pick_coords(std::size_t n, std::size_t max_coords, Prng rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (n <= max_coords) return idx;
  rng.shuffle(idx);
  idx.resize(max_coords);
  std::sort(idx.begin(), idx.end());
  return idx;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

double eval_scalar(const std::function<Tensor()>& loss) {
  NoGradGuard guard;
  const Tensor y = loss();
  if (y.numel() != 1) throw DimensionError("gradcheck: function must be scalar-valued, got " + shape_str(y.shape()));
  return y.item();
}

struct Sample {
  std::size_t tensor, index;
  double analytic, numeric;
};

GradcheckReport summarize(const std::vector<Sample>& samples, double tol) {
  GradcheckReport r;
  r.coords_checked = samples.size();
  double scale = 0.0;
  for (const Sample& s : samples) scale = std::max({scale, std::abs(s.analytic), std::abs(s.numeric)});
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const Sample& s = samples[k];
    const double denom = std::max({std::abs(s.numeric), 1e-2 * scale, 1e-10});
    const double rel = std::abs(s.analytic - s.numeric) / denom;
    if (k == 0 || rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst_tensor = s.tensor;
      r.worst_index = s.index;
      r.analytic_at_worst = s.analytic;
      r.numeric_at_worst = s.numeric;
    }
  }
  r.passed = r.max_rel_error <= tol;
  return r;
}

}  // namespace

GradcheckReport gradcheck_params(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                                 const GradcheckOptions& options) {
  for (const Tensor& p : params) {
    if (p.dtype() != DType::F64) throw OracleError("gradcheck is only defined for f64 tensors");
    if (!p.is_leaf()) throw OracleError("gradcheck: parameters must be leaf tensors");
  }
  {
    NoGradGuard guard;
    const Tensor y1 = loss();
    const Tensor y2 = loss();
    if (!bitwise_equal(y1, y2)) throw OracleError("gradcheck: function is not deterministic across two calls");
    if (y1.numel() != 1) throw DimensionError("gradcheck: function must be scalar-valued, got " + shape_str(y1.shape()));
  }

  std::vector<bool> prior(params.size());
  for (std::size_t t = 0; t < params.size(); ++t) {
    prior[t] = params[t].requires_grad();
    params[t].zero_grad();
    params[t].set_requires_grad(true);
  }
  loss().backward();

  auto central = [&](Tensor& p, std::size_t i, double eps) {
    auto v = p.mutable_data();
    const double orig = v[i];
    v[i] = orig + eps;
    const double fp = eval_scalar(loss);
    v[i] = orig - eps;
    const double fm = eval_scalar(loss);
    v[i] = orig;
    return (fp - fm) / (2.0 * eps);
  };

  Prng rng(options.seed);
  std::vector<Sample> samples;
  std::vector<Tensor> grads;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor& p = params[t];
    grads.push_back(p.grad());
    for (std::size_t i : pick_coords(p.numel(), options.max_coords, rng.split(t))) {
      const double analytic = grads[t].defined() ? grads[t][i] : 0.0;
      samples.push_back({t, i, analytic, central(p, i, options.eps)});
    }
  }

  // A step that straddles a kink (relu, max) spoils that one estimate;
  // smaller steps recover the one-sided derivative. A wrong gradient fails
  // at every step size.
  GradcheckReport first = summarize(samples, options.tol);
  std::size_t refined = 0;
  if (!first.passed) {
    double scale = 0.0;
    for (const Sample& s : samples) scale = std::max({scale, std::abs(s.analytic), std::abs(s.numeric)});
    for (Sample& s : samples) {
      auto err = [&](double n) { return std::abs(s.analytic - n) / std::max({std::abs(n), 1e-2 * scale, 1e-10}); };
      if (err(s.numeric) <= options.tol) continue;
      for (double div : {16.0, 256.0}) {
        const double n = central(params[s.tensor], s.index, options.eps / div);
        if (err(n) < err(s.numeric)) s.numeric = n;
      }
      ++refined;
    }
  }
  for (std::size_t t = 0; t < params.size(); ++t) {
    params[t].zero_grad();
    params[t].set_requires_grad(prior[t]);
  }
  GradcheckReport r = summarize(samples, options.tol);
  r.refined = refined;
  return r;
}

GradcheckReport gradcheck(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                          const GradcheckOptions& options) {
  if (x.dtype() != DType::F64) throw OracleError("gradcheck is only defined for f64 tensors");
  Tensor leaf = x.detach();
  return gradcheck_params([&] { return f(leaf); }, {leaf}, options);
}

std::string describe(const GradcheckReport& r) {
  std::ostringstream os;
  os << (r.passed ? "pass" : "FAIL") << " max_rel_err=" << r.max_rel_error << " coords=" << r.coords_checked;
  if (r.refined) os << " refined=" << r.refined;
  if (!r.passed) {
    os << " worst=(tensor " << r.worst_tensor << ", index " << r.worst_index << ") analytic=" << r.analytic_at_worst
       << " numeric=" << r.numeric_at_worst;
  }
  return os.str();
}

}  // namespace uvl
