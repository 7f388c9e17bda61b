#include "unetvl/checks.hpp"

#include <cstdio>
#include <functional>

#include "unetvl/kan.hpp"
#include "unetvl/model.hpp"
#include "unetvl/ops.hpp"
#include "unetvl/train.hpp"
#include "unetvl/vil.hpp"

namespace uvl {

namespace {

Tensor randn(const Shape& s, std::uint64_t seed, double std = 1.0) {
  Prng rng(seed);
  return normal_tensor(s, std, rng);
}

// Scalar readout with distinct random weights per output element.
Tensor probe(const Tensor& y) { return sum(mul(y, randn(y.shape(), 991))); }

std::vector<Tensor> leaves(const Module& m) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : m.parameters()) out.push_back(t);
  return out;
}

using InputFn = std::function<Tensor(const Tensor&)>;

ComponentCheck check(const std::string& name, const InputFn& f, const Tensor& x, const std::vector<Tensor>& params,
                     double tol, bool fault, std::size_t input_coords = 64, std::size_t param_coords = 16) {
  // the planted term changes f but contributes nothing to backward
  auto planted = [](const Tensor& t) { return scale(sum(square(t.detach())), 0.1); };
  ComponentCheck c;
  c.component = name;
  GradcheckOptions opt;
  opt.tol = tol;
  opt.max_coords = input_coords;
  c.input = gradcheck(
      [&](const Tensor& in) {
        const Tensor y = f(in);
        return fault ? add(y, planted(in)) : y;
      },
      x, opt);
  if (params.empty()) {
    c.params.passed = true;
    return c;
  }
  opt.max_coords = param_coords;
  c.params = gradcheck_params(
      [&] {
        const Tensor y = f(x);
        return fault ? add(y, planted(params.front())) : y;
      },
      params, opt);
  return c;
}

ComponentCheck check_projection(const std::string& name, ProjectionKind kind, double tol, bool fault) {
  Prng rng(11);
  const auto proj = make_projection(kind, 4, 3, ProjectionHyper{}, rng, DType::F64);
  return check(
      name, [&](const Tensor& x) { return probe(proj->forward(x)); }, randn({5, 4}, 12, 0.7), leaves(*proj), tol,
      fault);
}

UNETVLConfig block_config() {
  UNETVLConfig c;
  c.embed_dim = 8;
  c.head_dim = 4;
  c.dtype = DType::F64;
  return c;
}

}  // namespace

const std::vector<std::string>& gradcheck_components() {
  static const std::vector<std::string> names = {"chebyshev", "bspline", "rbf",     "mlp",   "linear",
                                                 "mlstm",     "vilblock", "encoder", "model", "loss"};
  return names;
}

ComponentCheck run_gradcheck(const std::string& component, double tol, bool fault) {
  if (component == "chebyshev") return check_projection(component, ProjectionKind::Chebyshev, tol, fault);
  if (component == "bspline") return check_projection(component, ProjectionKind::BSpline, tol, fault);
  if (component == "rbf") return check_projection(component, ProjectionKind::GaussianRBF, tol, fault);
  if (component == "mlp") return check_projection(component, ProjectionKind::Mlp, tol, fault);
  if (component == "linear") return check_projection(component, ProjectionKind::Linear, tol, fault);
  if (component == "mlstm") {
    Prng rng(21);
    const MLSTMCell cell(2, 4, rng, DType::F64);
    return check(
        component, [&](const Tensor& u) { return probe(cell.forward(u)); }, randn({6, 8}, 22, 2.0), leaves(cell), tol,
        fault);
  }
  if (component == "vilblock") {
    const UNETVLConfig cfg = block_config();
    Prng rng(31);
    const ViLBlock fwd(cfg, Direction::Forward, rng), bwd(cfg, Direction::Backward, rng);
    std::vector<Tensor> ps = leaves(fwd);
    for (const auto& t : leaves(bwd)) ps.push_back(t);
    return check(
        component, [&](const Tensor& x) { return probe(bwd.forward(fwd.forward(x))); }, randn({6, 8}, 32), ps, tol,
        fault);
  }
  if (component == "encoder") {
    const UNETVLConfig cfg = UNETVLConfig::micro();
    const ViLEncoder enc(cfg, Prng(41));
    return check(
        component,
        [&](const Tensor& x) {
          Tensor s;
          for (const auto& [i, z] : enc.forward(x)) s = s.defined() ? add(s, probe(z)) : probe(z);
          return s;
        },
        randn({cfg.num_tokens(), cfg.embed_dim}, 42), leaves(enc), tol, fault);
  }
  if (component == "model") {
    const UNETVL model(UNETVLConfig::micro(), 51);
    return check(
        component, [&](const Tensor& x) { return probe(model.forward(x)); }, randn({1, 8, 8, 8}, 52), leaves(model),
        tol, fault, 24, 4);
  }
  if (component == "loss") {
    Labels y(64);
    Prng rng(61);
    for (auto& c : y) c = static_cast<std::uint8_t>(rng.uniform() < 0.5 ? 0 : 1);
    return check(
        component, [&](const Tensor& x) { return dice_ce_loss(x, y, LossConfig{}); }, randn({2, 4, 4, 4}, 62), {}, tol,
        fault, 128);
  }
  throw ConfigError("unknown gradcheck component '" + component + "'");
}

std::string describe(const ComponentCheck& c) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%-9s %s  max_rel_err=%.3e", c.component.c_str(), c.passed() ? "PASS" : "FAIL",
                c.max_rel_error());
  std::string s = buf;
  if (!c.input.passed) s += "\n  input:  " + describe(c.input);
  if (!c.params.passed) s += "\n  params: " + describe(c.params);
  return s;
}

}  // namespace uvl
