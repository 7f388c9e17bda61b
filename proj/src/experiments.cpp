#include "unetvl/experiments.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "unetvl/mlstm.hpp"
#include "unetvl/ops.hpp"

namespace uvl {

AttentionBlock::AttentionBlock(std::size_t dim, std::size_t head_dim, Prng& rng, DType dtype)
    : dim_(dim), head_dim_(head_dim) {
  if (head_dim == 0 || dim % head_dim != 0)
    throw ConfigError("attention: dim " + std::to_string(dim) + " is not divisible by head_dim " +
                      std::to_string(head_dim));
  gamma_ = param(Tensor::ones({dim}, dtype));
  beta_ = param(Tensor::zeros({dim}, dtype));
  wqkv_ = param(trunc_normal_tensor({dim, 3 * dim}, 0.02, rng, dtype));
  bqkv_ = param(Tensor::zeros({3 * dim}, dtype));
  wo_ = param(trunc_normal_tensor({dim, dim}, 0.02, rng, dtype));
  bo_ = param(Tensor::zeros({dim}, dtype));
}

Tensor AttentionBlock::forward(const Tensor& tokens) const {
  if (tokens.rank() != 2 || tokens.dim(1) != dim_)
    throw DimensionError("attention: expected [N, " + std::to_string(dim_) + "], got " + shape_str(tokens.shape()));
  const std::size_t N = tokens.dim(0), H = dim_ / head_dim_, d = head_dim_;
  const Tensor qkv = add_last(matmul(layer_norm(tokens, gamma_, beta_), wqkv_), bqkv_);  // [N, 3K]
  auto columns = [&](std::size_t offset) {
    std::vector<std::size_t> idx(N * d);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < d; ++c) idx[n * d + c] = n * 3 * dim_ + offset + c;
    return gather(qkv, std::move(idx), {N, d});
  };
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < H; ++h) {
    const Tensor q = columns(h * d), k = columns(dim_ + h * d), v = columns(2 * dim_ + h * d);
    const Tensor att = softmax_last(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d))));
    heads.push_back(transpose(matmul(att, v)));  // [d, N]
  }
  const Tensor mixed = transpose(concat(heads));  // [N, K]
  return add(tokens, add_last(matmul(mixed, wo_), bo_));
}

void AttentionBlock::collect_parameters(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(join_name(prefix, "norm.gamma"), gamma_);
  out.emplace_back(join_name(prefix, "norm.beta"), beta_);
  out.emplace_back(join_name(prefix, "wqkv"), wqkv_);
  out.emplace_back(join_name(prefix, "bqkv"), bqkv_);
  out.emplace_back(join_name(prefix, "wo"), wo_);
  out.emplace_back(join_name(prefix, "bo"), bo_);
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("loglog_slope: need at least two paired points");
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] <= 0 || y[i] <= 0) throw ConfigError("loglog_slope: values must be positive");
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx, sy += ly, sxx += lx * lx, sxy += lx * ly;
  }
  const double den = n * sxx - sx * sx;
  if (den == 0) throw ConfigError("loglog_slope: all x values are equal");
  return (n * sxy - sx * sy) / den;
}

namespace {

template <class F>
BenchRow measure(const std::string& name, std::size_t n, const Tensor& x, F&& run) {
  NoGradGuard ng;
  const std::int64_t base = reset_peak_memory();
  reset_flop_count();
  { const Tensor y = run(x); }
  BenchRow r;
  r.block = name;
  r.tokens = n;
  r.peak_bytes = memory_stats().peak_bytes - base;
  r.flops = flop_count();
  return r;
}

}  // namespace

BenchResult bench_scaling(const std::vector<std::size_t>& lengths, std::size_t dim, std::size_t head_dim,
                          std::uint64_t seed, DType dtype) {
  if (lengths.size() < 2) throw ConfigError("bench: need at least two sequence lengths");
  UNETVLConfig cfg;
  cfg.embed_dim = dim;
  cfg.head_dim = head_dim;
  cfg.projection = ProjectionKind::Linear;
  cfg.dtype = dtype;
  const Prng root(seed);
  Prng ra = root.split(0), rv = root.split(1);
  const AttentionBlock attn(dim, head_dim, ra, dtype);
  const ViLBlock vil(cfg, Direction::Forward, rv);
  const std::size_t H = cfg.num_heads();

  BenchResult res;
  std::vector<double> ns, am, vm, af, vf;
  for (std::size_t n : lengths) {
    if (n == 0) throw ConfigError("bench: sequence length must be positive");
    Prng rx = root.split(2 + n);
    const Tensor x = normal_tensor({n, dim}, 1.0, rx, dtype);
    BenchRow a = measure("attention", n, x, [&](const Tensor& t) { return attn.forward(t); });
    BenchRow v = measure("vil", n, x, [&](const Tensor& t) { return vil.forward(t); });
    {
      NoGradGuard ng;
      const Tensor q = normal_tensor({n, H * head_dim}, 1.0, rx, dtype);
      const Tensor k = normal_tensor({n, H * head_dim}, 1.0, rx, dtype);
      const Tensor vv = normal_tensor({n, H * head_dim}, 1.0, rx, dtype);
      const Tensor ig = normal_tensor({n, H}, 1.0, rx, dtype), fg = normal_tensor({n, H}, 1.0, rx, dtype);
      for (const auto& s : mlstm_final_states(q, k, vv, ig, fg)) v.state_bytes += s.size_bytes(dtype);
    }
    ns.push_back(static_cast<double>(n));
    am.push_back(static_cast<double>(a.peak_bytes));
    vm.push_back(static_cast<double>(v.peak_bytes));
    af.push_back(static_cast<double>(a.flops));
    vf.push_back(static_cast<double>(v.flops));
    res.rows.push_back(a);
    res.rows.push_back(v);
  }
  res.attention_memory_slope = loglog_slope(ns, am);
  res.vil_memory_slope = loglog_slope(ns, vm);
  res.attention_flop_slope = loglog_slope(ns, af);
  res.vil_flop_slope = loglog_slope(ns, vf);
  return res;
}

std::string format_bench_table(const BenchResult& r) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-10s %6s %14s %16s %12s\n", "block", "N", "peak_bytes", "flops", "state_bytes");
  os << buf;
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof buf, "%-10s %6zu %14lld %16llu %12lld\n", row.block.c_str(), row.tokens,
                  static_cast<long long>(row.peak_bytes), static_cast<unsigned long long>(row.flops),
                  static_cast<long long>(row.state_bytes));
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "memory slope: attention %.3f  vil %.3f\nflop slope:   attention %.3f  vil %.3f\n",
                r.attention_memory_slope, r.vil_memory_slope, r.attention_flop_slope, r.vil_flop_slope);
  os << buf;
  return os.str();
}

std::string bench_csv(const BenchResult& r) {
  std::ostringstream os;
  os << "block,tokens,peak_bytes,flops,state_bytes\n";
  for (const auto& row : r.rows)
    os << row.block << ',' << row.tokens << ',' << row.peak_bytes << ',' << row.flops << ',' << row.state_bytes << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------

BakeoffTable bakeoff_run(const BakeoffConfig& cfg,
                         const std::function<void(std::size_t, ProjectionKind, const BakeoffCell&)>& on_cell) {
  if (cfg.kinds.size() < 2) throw ConfigError("bakeoff: need at least two projection kinds");
  if (cfg.folds < 2) throw ConfigError("bakeoff: need at least two folds");
  cfg.model.validate();
  const SyntheticVolumeDataset pool(cfg.data_seed, {cfg.model.H, cfg.model.W, cfg.model.D}, cfg.model.num_classes,
                                    cfg.pool_size, 0, cfg.model.dtype);
  BakeoffTable t;
  t.kinds = cfg.kinds;
  t.cells.assign(cfg.folds, std::vector<BakeoffCell>(cfg.kinds.size()));
  for (std::size_t f = 0; f < cfg.folds; ++f) {
    const SyntheticVolumeDataset data = pool.fold(f, cfg.folds);
    for (std::size_t k = 0; k < cfg.kinds.size(); ++k) {
      BakeoffCell& cell = t.cells[f][k];
      try {
        UNETVLConfig mc = cfg.model;
        mc.projection = cfg.kinds[k];
        const UNETVL model(mc, cfg.model_seed + f);
        TrainState st;
        train_loop(model, data, cfg.train, st);
        cell.dice = evaluate(model, data).mean;
        cell.ok = true;
      } catch (const NumericError& e) {
        cell.error = e.what();
      }
      if (on_cell) on_cell(f, cfg.kinds[k], cell);
    }
  }
  for (std::size_t k = 0; k < cfg.kinds.size(); ++k) {
    double s = 0;
    std::size_t n = 0;
    for (const auto& row : t.cells)
      if (row[k].ok) s += row[k].dice, ++n;
    t.means.push_back(n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN());
  }
  return t;
}

std::string format_bakeoff_table(const BakeoffTable& t) {
  std::ostringstream os;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-6s", "Fold");
  os << buf;
  for (auto k : t.kinds) {
    std::snprintf(buf, sizeof buf, " %10s", std::string(to_string(k)).c_str());
    os << buf;
  }
  os << '\n';
  auto cell = [&](bool ok, double v) {
    if (ok && std::isfinite(v))
      std::snprintf(buf, sizeof buf, " %10.2f", 100.0 * v);
    else
      std::snprintf(buf, sizeof buf, " %10s", "failed");
    os << buf;
  };
  for (std::size_t f = 0; f < t.cells.size(); ++f) {
    std::snprintf(buf, sizeof buf, "%-6zu", f + 1);
    os << buf;
    for (const auto& c : t.cells[f]) cell(c.ok, c.dice);
    os << '\n';
  }
  std::snprintf(buf, sizeof buf, "%-6s", "Avg");
  os << buf;
  for (double m : t.means) cell(true, m);
  os << '\n';
  return os.str();
}

std::string bakeoff_csv(const BakeoffTable& t) {
  std::ostringstream os;
  char buf[64];
  os << "fold,kind,dice,status\n";
  for (std::size_t f = 0; f < t.cells.size(); ++f)
    for (std::size_t k = 0; k < t.kinds.size(); ++k) {
      const auto& c = t.cells[f][k];
      std::snprintf(buf, sizeof buf, "%.9f", c.dice);
      os << f + 1 << ',' << to_string(t.kinds[k]) << ',' << (c.ok ? buf : "") << ',' << (c.ok ? "ok" : "failed")
         << '\n';
    }
  for (std::size_t k = 0; k < t.kinds.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%.9f", t.means[k]);
    os << "mean," << to_string(t.kinds[k]) << ',' << buf << ",\n";
  }
  return os.str();
}

}  // namespace uvl
