#include "unetvl/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

#include "unetvl/ops.hpp"

namespace uvl {

// ---------------------------------------------------------------------------
// data

std::size_t intensity_rank(std::size_t label, std::size_t num_classes) {
  const std::size_t mid = num_classes / 2;
  if (label == 0) return mid;
  return label - 1 < mid ? label - 1 : label;
}

Sample gen_synthetic_volume(Prng& rng, const std::array<std::size_t, 3>& extent, std::size_t num_classes,
                            DType dtype) {
  if (num_classes < 2) throw ConfigError("synthetic volume: num_classes must be >= 2");
  const std::size_t H = extent[0], W = extent[1], D = extent[2], V = H * W * D;
  if (V == 0) throw ConfigError("synthetic volume: empty extent");
  Labels label(V);
  std::vector<std::size_t> painted(num_classes), visible(num_classes);
  for (int attempt = 0;; ++attempt) {
    std::fill(label.begin(), label.end(), 0);
    std::fill(painted.begin(), painted.end(), 0);
    for (std::size_t c = 1; c < num_classes; ++c) {
      double r[3], ctr[3];
      for (int a = 0; a < 3; ++a) {
        const double ext = static_cast<double>(extent[a]);
        r[a] = ext * (0.3 + 0.1 * rng.uniform());
        ctr[a] = r[a] + (ext - 2 * r[a]) * rng.uniform();
      }
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          for (std::size_t l = 0; l < D; ++l) {
            const double x = (i + 0.5 - ctr[0]) / r[0], y = (j + 0.5 - ctr[1]) / r[1], z = (l + 0.5 - ctr[2]) / r[2];
            if (x * x + y * y + z * z <= 1.0) {
              label[(i * W + j) * D + l] = static_cast<std::uint8_t>(c);
              ++painted[c];
            }
          }
    }
    std::fill(visible.begin(), visible.end(), 0);
    for (auto c : label) ++visible[c];
    bool ok = visible[0] > 0;
    // later classes may cover earlier ones; keep at least half of each visible
    for (std::size_t c = 1; c < num_classes; ++c) ok = ok && visible[c] > 0 && 2 * visible[c] >= painted[c];
    if (ok) break;
    if (attempt == 1000) throw NumericError("synthetic volume: could not place all classes in the extent");
  }
  std::vector<double> v(V);
  for (std::size_t i = 0; i < V; ++i) {
    const double band = (static_cast<double>(intensity_rank(label[i], num_classes)) + 0.5) / static_cast<double>(num_classes);
    v[i] = std::clamp(band + 0.05 * rng.normal(), 0.0, 1.0);
  }
  return {Tensor({1, H, W, D}, std::move(v), dtype), std::move(label)};
}

SyntheticVolumeDataset::SyntheticVolumeDataset(std::uint64_t seed, std::array<std::size_t, 3> extent,
                                               std::size_t num_classes, std::size_t train_size, std::size_t val_size,
                                               DType dtype)
    : num_classes_(num_classes) {
  const Prng root(seed);
  for (std::size_t i = 0; i < train_size + val_size; ++i) {
    Prng rng = root.split(i);
    samples_.push_back(gen_synthetic_volume(rng, extent, num_classes, dtype));
    (i < train_size ? train_idx_ : val_idx_).push_back(i);
  }
}

SyntheticVolumeDataset SyntheticVolumeDataset::fold(std::size_t f, std::size_t k) const {
  if (k < 2 || f >= k) throw ConfigError("fold " + std::to_string(f) + " of " + std::to_string(k) + " is invalid");
  if (samples_.size() < k) throw ConfigError("dataset has fewer samples than folds");
  SyntheticVolumeDataset out;
  out.num_classes_ = num_classes_;
  out.samples_ = samples_;
  for (std::size_t i = 0; i < samples_.size(); ++i) (i % k == f ? out.val_idx_ : out.train_idx_).push_back(i);
  return out;
}

// ---------------------------------------------------------------------------
// loss and metric

void LossConfig::validate() const {
  if (ce_weight < 0 || dice_weight < 0) throw ConfigError("loss weights must be >= 0");
  if (ce_weight == 0 && dice_weight == 0) throw ConfigError("loss weights must not both be zero");
  if (smooth < 0) throw ConfigError("dice smoothing must be >= 0");
}

Tensor dice_ce_loss(const Tensor& logits, const Labels& labels, const LossConfig& cfg) {
  cfg.validate();
  if (logits.rank() < 2) throw DimensionError("dice_ce_loss: logits need a class axis, got " + shape_str(logits.shape()));
  const std::size_t C = logits.dim(0), V = logits.numel() / C;
  if (labels.size() != V)
    throw DimensionError("dice_ce_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(V) +
                         " voxels");
  const DType dt = logits.dtype();
  std::vector<std::size_t> pick(V);
  std::vector<double> onehot(C * V, 0.0), gsum(C, 0.0);
  for (std::size_t v = 0; v < V; ++v) {
    if (labels[v] >= C)
      throw DimensionError("dice_ce_loss: label " + std::to_string(labels[v]) + " >= num_classes " +
                           std::to_string(C));
    pick[v] = v * C + labels[v];
    onehot[labels[v] * V + v] = 1.0;
    gsum[labels[v]] += 1.0;
  }
  const Tensor lp = log_softmax_last(transpose(reshape(logits, {C, V})));  // [V, C]
  Tensor loss;
  if (cfg.ce_weight > 0) loss = scale(mean(gather(lp, std::move(pick), {V})), -cfg.ce_weight);
  if (cfg.dice_weight > 0) {
    const Tensor p = transpose(exp(lp));  // [C, V]
    const Tensor inter = sum_last(mul(p, Tensor({C, V}, std::move(onehot), dt)));
    const Tensor denom = add_scalar(add(sum_last(p), Tensor({C}, gsum, dt)), cfg.smooth);
    const Tensor dice = div(add_scalar(scale(inter, 2.0), cfg.smooth), denom);
    std::vector<std::size_t> fg(C - 1);
    std::iota(fg.begin(), fg.end(), 1);
    const Tensor dl = scale(add_scalar(neg(mean(gather(dice, fg, {C - 1}))), 1.0), cfg.dice_weight);
    loss = loss.defined() ? add(loss, dl) : dl;
  }
  return loss;
}

DiceResult dice_metric(const Labels& pred, const Labels& gt, std::size_t num_classes) {
  if (pred.size() != gt.size())
    throw DimensionError("dice_metric: prediction has " + std::to_string(pred.size()) + " voxels, ground truth " +
                         std::to_string(gt.size()));
  if (num_classes < 2) throw ConfigError("dice_metric: num_classes must be >= 2");
  std::vector<std::size_t> p(num_classes), g(num_classes), both(num_classes);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] >= num_classes || gt[i] >= num_classes) throw DimensionError("dice_metric: label out of range");
    ++p[pred[i]];
    ++g[gt[i]];
    if (pred[i] == gt[i]) ++both[gt[i]];
  }
  DiceResult r;
  for (std::size_t c = 1; c < num_classes; ++c) {
    const double denom = static_cast<double>(p[c] + g[c]);
    r.per_class.push_back(denom == 0 ? 1.0 : 2.0 * static_cast<double>(both[c]) / denom);
  }
  r.mean = std::accumulate(r.per_class.begin(), r.per_class.end(), 0.0) / static_cast<double>(r.per_class.size());
  return r;
}

Labels argmax_labels(const Tensor& logits) {
  const std::size_t C = logits.dim(0), V = logits.numel() / C;
  if (C > 256) throw DimensionError("argmax_labels: too many classes");
  Labels out(V, 0);
  const auto x = logits.data();
  for (std::size_t v = 0; v < V; ++v) {
    double best = x[v];
    for (std::size_t c = 1; c < C; ++c)
      if (x[c * V + v] > best) {
        best = x[c * V + v];
        out[v] = static_cast<std::uint8_t>(c);
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// optimizer

void adamw_step(const NamedTensors& params, AdamState& state, const AdamWConfig& cfg, double lr) {
  if (state.m.empty()) {
    for (const auto& [name, p] : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw GraphError("adamw: optimizer state does not match parameter list");
  for (const auto& [name, p] : params)
    if (!p.has_grad()) throw GraphError("adamw: parameter '" + name + "' has no gradient");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t), c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k].second;
    const Tensor g = p.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != p.numel()) throw GraphError("adamw: moment size mismatch for '" + params[k].first + "'");
    auto w = p.mutable_data();
    const bool f32 = p.dtype() == DType::F32;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      double x = w[i] * (1.0 - lr * cfg.weight_decay);
      x -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
      w[i] = f32 ? static_cast<double>(static_cast<float>(x)) : x;
    }
  }
}

double polynomial_lr(std::uint64_t step, std::uint64_t total_steps, double lr0, double power) {
  if (total_steps == 0) throw ConfigError("polynomial_lr: total_steps must be positive");
  if (step > total_steps)
    throw ConfigError("polynomial_lr: step " + std::to_string(step) + " beyond " + std::to_string(total_steps));
  return lr0 * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total_steps), power);
}

// ---------------------------------------------------------------------------
// training

std::string EpochRecord::to_line() const {
  char buf[160];
  std::snprintf(buf, sizeof buf, "epoch=%zu step=%llu lr=%.9e train_loss=%.9f val_dice=%.9f", epoch,
                static_cast<unsigned long long>(step), lr, train_loss, val.mean);
  std::string s = buf;
  for (std::size_t c = 0; c < val.per_class.size(); ++c) {
    std::snprintf(buf, sizeof buf, " dice_c%zu=%.9f", c + 1, val.per_class[c]);
    s += buf;
  }
  return s;
}

namespace {

Tensor as_dtype(const Tensor& t, DType dt) { return t.dtype() == dt ? t : t.to(dt); }

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Prng rng = Prng(seed).split(epoch);
  rng.shuffle(idx);
  return idx;
}

}  // namespace

DiceResult evaluate(const UNETVL& model, const SyntheticVolumeDataset& data, bool train_split) {
  NoGradGuard ng;
  const std::size_t n = train_split ? data.train_size() : data.val_size();
  if (n == 0) throw ConfigError("evaluate: empty split");
  DiceResult acc;
  acc.per_class.assign(data.num_classes() - 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const Sample& s = train_split ? data.train(i) : data.val(i);
    const Tensor logits = model.forward(as_dtype(s.volume, model.config().dtype));
    const DiceResult r = dice_metric(argmax_labels(logits), s.label, data.num_classes());
    for (std::size_t c = 0; c < r.per_class.size(); ++c) acc.per_class[c] += r.per_class[c];
  }
  for (double& d : acc.per_class) d /= static_cast<double>(n);
  acc.mean = std::accumulate(acc.per_class.begin(), acc.per_class.end(), 0.0) / static_cast<double>(acc.per_class.size());
  return acc;
}

std::vector<EpochRecord> train_loop(const UNETVL& model, const SyntheticVolumeDataset& data,
                                    const TrainOptions& options, TrainState& state,
                                    const std::function<void(const EpochRecord&)>& on_epoch) {
  options.loss.validate();
  const std::size_t B = options.batch_size;
  if (B == 0) throw ConfigError("batch_size must be positive");
  if (data.train_size() < B)
    throw ConfigError("training split (" + std::to_string(data.train_size()) + ") is smaller than one batch");
  if (data.num_classes() != model.config().num_classes)
    throw ConfigError("dataset has " + std::to_string(data.num_classes()) + " classes, model " +
                      std::to_string(model.config().num_classes));
  const std::size_t per_epoch = data.train_size() / B;
  const std::uint64_t total = options.total_steps;
  const std::uint64_t stop = options.stop_after ? std::min<std::uint64_t>(options.stop_after, total) : total;
  const NamedTensors params = model.parameters();
  std::vector<EpochRecord> log;

  while (state.optim.step < stop) {
    const std::uint64_t step = state.optim.step;
    const std::size_t epoch = step / per_epoch, pos = step % per_epoch;
    const auto order = epoch_order(options.seed, epoch, data.train_size());
    for (const auto& [n, p] : params) {
      Tensor t = p;
      t.zero_grad();
    }
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const Sample& s = data.train(order[pos * B + b]);
      const Tensor loss =
          scale(dice_ce_loss(model.forward(as_dtype(s.volume, model.config().dtype)), s.label, options.loss),
                1.0 / static_cast<double>(B));
      if (!std::isfinite(loss.item()))
        throw NumericError("training diverged at step " + std::to_string(step) + " (lr " +
                           std::to_string(polynomial_lr(step, total, options.optim.lr, options.lr_power)) + ")");
      batch_loss += loss.item();
      loss.backward();
    }
    const double lr = polynomial_lr(step, total, options.optim.lr, options.lr_power);
    adamw_step(params, state.optim, options.optim, lr);
    state.epoch_loss_sum += batch_loss;

    const std::uint64_t done = state.optim.step;
    const bool epoch_end = done % per_epoch == 0 || done == total;
    if (epoch_end) {
      EpochRecord rec;
      rec.epoch = epoch;
      rec.step = done;
      rec.lr = lr;
      rec.train_loss = state.epoch_loss_sum / static_cast<double>(pos + 1);
      rec.val = evaluate(model, data);
      state.epoch_loss_sum = 0.0;
      log.push_back(rec);
      if (on_epoch) on_epoch(rec);
    }
  }
  return log;
}

void save_train_state(const std::string& path, const UNETVL& model, const TrainState& state) {
  NamedTensors extra;
  extra.emplace_back("optim.step", Tensor::scalar(static_cast<double>(state.optim.step)));
  extra.emplace_back("optim.epoch_loss_sum", Tensor::scalar(state.epoch_loss_sum));
  const NamedTensors params = model.parameters();
  for (std::size_t k = 0; k < state.optim.m.size() && k < params.size(); ++k) {
    extra.emplace_back("optim.m." + params[k].first, Tensor(params[k].second.shape(), state.optim.m[k]));
    extra.emplace_back("optim.v." + params[k].first, Tensor(params[k].second.shape(), state.optim.v[k]));
  }
  save_weights(path, model, extra);
}

TrainState load_train_state(const std::string& path, const UNETVL& model) {
  const NamedTensors rest = load_weights(path, model);
  std::map<std::string, Tensor> by_name(rest.begin(), rest.end());
  TrainState st;
  if (by_name.count("optim.step")) st.optim.step = static_cast<std::uint64_t>(by_name["optim.step"].item());
  if (by_name.count("optim.epoch_loss_sum")) st.epoch_loss_sum = by_name["optim.epoch_loss_sum"].item();
  const NamedTensors params = model.parameters();
  if (by_name.count("optim.m." + params.front().first)) {
    for (const auto& [name, p] : params) {
      auto m = by_name.find("optim.m." + name), v = by_name.find("optim.v." + name);
      if (m == by_name.end() || v == by_name.end())
        throw FormatError("checkpoint " + path + " lacks optimizer moments for '" + name + "'");
      st.optim.m.emplace_back(m->second.data().begin(), m->second.data().end());
      st.optim.v.emplace_back(v->second.data().begin(), v->second.data().end());
    }
  }
  return st;
}

}  // namespace uvl
