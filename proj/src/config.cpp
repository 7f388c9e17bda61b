#include "unetvl/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace uvl {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return x;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used == v.size() && std::isfinite(x)) return x;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
}

std::vector<std::size_t> to_uint_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& s : split_list(v)) out.push_back(to_uint(key, s));
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string num(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

DType parse_dtype(const std::string& v) {
  if (v == "f32" || v == "float32") return DType::F32;
  if (v == "f64" || v == "float64") return DType::F64;
  throw ConfigError("dtype must be f32 or f64, got '" + v + "'");
}

const std::vector<std::pair<std::string, std::string>> kKeys = {
    {"extent", "volume extent H,W,D (or one value for a cube)"},
    {"in_channels", "input channels"},
    {"patch", "isotropic patch size P"},
    {"embed_dim", "token width K"},
    {"depth", "number of ViL blocks"},
    {"taps", "1-based block indices feeding the decoder"},
    {"head_dim", "mLSTM head size d"},
    {"expansion", "up-projection factor e"},
    {"projection", "chebyshev | bspline | rbf | mlp | linear"},
    {"degree", "Chebyshev degree"},
    {"spline_grid", "B-spline intervals"},
    {"spline_order", "B-spline order"},
    {"rbf_centers", "RBF centers (0: degree + 1)"},
    {"mlp_hidden", "MLP hidden width (0: output width)"},
    {"num_classes", "segmentation classes including background"},
    {"decoder_min_width", "narrowest decoder stage"},
    {"chunk_size", "mLSTM chunk length (0: sequential)"},
    {"dtype", "f32 | f64"},
    {"seed", "weight initialization and shuffling seed"},
    {"data_seed", "synthetic dataset seed"},
    {"train_size", "training volumes"},
    {"val_size", "validation volumes"},
    {"batch_size", "volumes per optimizer step"},
    {"steps", "optimizer step budget"},
    {"lr", "initial learning rate"},
    {"lr_power", "PolynomialLR exponent"},
    {"weight_decay", "AdamW decoupled weight decay"},
    {"beta1", "AdamW beta1"},
    {"beta2", "AdamW beta2"},
    {"adam_eps", "AdamW epsilon"},
    {"ce_weight", "cross-entropy weight"},
    {"dice_weight", "soft Dice weight"},
    {"dice_smooth", "soft Dice smoothing"},
    {"bench_lengths", "sequence lengths for bench"},
    {"bench_dim", "token width for bench"},
    {"bench_head_dim", "head size for bench"},
    {"bakeoff_kinds", "projection kinds compared by bakeoff"},
    {"bakeoff_folds", "bakeoff folds"},
    {"bakeoff_pool", "volumes shared by the bakeoff folds"},
    {"out", "output directory"},
};

}  // namespace

UNETVLConfig RunConfig::default_model() {
  UNETVLConfig m = UNETVLConfig::tiny();
  m.decoder_min_width = 8;
  return m;
}

std::vector<std::pair<std::string, std::string>> run_config_keys() { return kKeys; }

void RunConfig::set(const std::string& full_key, const std::string& raw) {
  const std::string v = trim(raw);
  std::string key = trim(full_key);
  static const char* sections[] = {"model.", "train.", "loss.", "optim.", "data.", "bench.", "bakeoff."};
  for (const char* s : sections)
    if (key.rfind(s, 0) == 0) {
      key = key.substr(std::char_traits<char>::length(s));
      break;
    }
  UNETVLConfig& m = model;
  auto u = [&] { return to_uint(key, v); };
  auto d = [&] { return to_double(key, v); };
  if (key == "extent") {
    const auto e = to_uint_list(key, v);
    if (e.size() == 1)
      m.H = m.W = m.D = e[0];
    else if (e.size() == 3)
      m.H = e[0], m.W = e[1], m.D = e[2];
    else
      throw ConfigError("config key 'extent': expected 1 or 3 values");
  } else if (key == "in_channels") m.in_channels = u();
  else if (key == "patch") m.patch = u();
  else if (key == "embed_dim") m.embed_dim = u();
  else if (key == "depth") m.depth = u();
  else if (key == "taps") m.taps = to_uint_list(key, v);
  else if (key == "head_dim") m.head_dim = u();
  else if (key == "expansion") m.expansion = u();
  else if (key == "projection") m.projection = parse_projection_kind(v);
  else if (key == "degree") m.hyper.degree = static_cast<int>(u());
  else if (key == "spline_grid") m.hyper.grid_size = u();
  else if (key == "spline_order") m.hyper.spline_order = u();
  else if (key == "rbf_centers") m.hyper.num_centers = u();
  else if (key == "mlp_hidden") m.hyper.mlp_hidden = u();
  else if (key == "num_classes") m.num_classes = u();
  else if (key == "decoder_min_width") m.decoder_min_width = u();
  else if (key == "chunk_size") m.chunk_size = u();
  else if (key == "dtype") m.dtype = parse_dtype(v);
  else if (key == "seed") seed = u();
  else if (key == "data_seed") data_seed = u();
  else if (key == "train_size") train_size = u();
  else if (key == "val_size") val_size = u();
  else if (key == "batch_size") train.batch_size = u();
  else if (key == "steps") train.total_steps = u();
  else if (key == "lr") train.optim.lr = d();
  else if (key == "lr_power") train.lr_power = d();
  else if (key == "weight_decay") train.optim.weight_decay = d();
  else if (key == "beta1") train.optim.beta1 = d();
  else if (key == "beta2") train.optim.beta2 = d();
  else if (key == "adam_eps") train.optim.eps = d();
  else if (key == "ce_weight") train.loss.ce_weight = d();
  else if (key == "dice_weight") train.loss.dice_weight = d();
  else if (key == "dice_smooth") train.loss.smooth = d();
  else if (key == "bench_lengths") bench_lengths = to_uint_list(key, v);
  else if (key == "bench_dim") bench_dim = u();
  else if (key == "bench_head_dim") bench_head_dim = u();
  else if (key == "bakeoff_kinds") {
    bakeoff_kinds.clear();
    for (const auto& s : split_list(v)) bakeoff_kinds.push_back(parse_projection_kind(s));
  } else if (key == "bakeoff_folds") bakeoff_folds = u();
  else if (key == "bakeoff_pool") bakeoff_pool = u();
  else if (key == "out") {
    if (v.empty()) throw ConfigError("config key 'out': empty path");
    out_dir = v;
  } else throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::apply_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(no) + ": expected 'key = value', got '" + line + "'");
    try {
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(no) + ": " + e.what());
    }
  }
}

void RunConfig::apply_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  apply_text(ss.str(), path);
}

std::string RunConfig::to_text() const {
  const UNETVLConfig& m = model;
  std::string kinds;
  for (std::size_t i = 0; i < bakeoff_kinds.size(); ++i) kinds += (i ? "," : "") + std::string(to_string(bakeoff_kinds[i]));
  const std::vector<std::pair<std::string, std::string>> kv = {
      {"extent", join({m.H, m.W, m.D})},
      {"in_channels", std::to_string(m.in_channels)},
      {"patch", std::to_string(m.patch)},
      {"embed_dim", std::to_string(m.embed_dim)},
      {"depth", std::to_string(m.depth)},
      {"taps", join(m.taps)},
      {"head_dim", std::to_string(m.head_dim)},
      {"expansion", std::to_string(m.expansion)},
      {"projection", std::string(to_string(m.projection))},
      {"degree", std::to_string(m.hyper.degree)},
      {"spline_grid", std::to_string(m.hyper.grid_size)},
      {"spline_order", std::to_string(m.hyper.spline_order)},
      {"rbf_centers", std::to_string(m.hyper.num_centers)},
      {"mlp_hidden", std::to_string(m.hyper.mlp_hidden)},
      {"num_classes", std::to_string(m.num_classes)},
      {"decoder_min_width", std::to_string(m.decoder_min_width)},
      {"chunk_size", std::to_string(m.chunk_size)},
      {"dtype", m.dtype == DType::F32 ? "f32" : "f64"},
      {"seed", std::to_string(seed)},
      {"data_seed", std::to_string(data_seed)},
      {"train_size", std::to_string(train_size)},
      {"val_size", std::to_string(val_size)},
      {"batch_size", std::to_string(train.batch_size)},
      {"steps", std::to_string(train.total_steps)},
      {"lr", num(train.optim.lr)},
      {"lr_power", num(train.lr_power)},
      {"weight_decay", num(train.optim.weight_decay)},
      {"beta1", num(train.optim.beta1)},
      {"beta2", num(train.optim.beta2)},
      {"adam_eps", num(train.optim.eps)},
      {"ce_weight", num(train.loss.ce_weight)},
      {"dice_weight", num(train.loss.dice_weight)},
      {"dice_smooth", num(train.loss.smooth)},
      {"bench_lengths", join(bench_lengths)},
      {"bench_dim", std::to_string(bench_dim)},
      {"bench_head_dim", std::to_string(bench_head_dim)},
      {"bakeoff_kinds", kinds},
      {"bakeoff_folds", std::to_string(bakeoff_folds)},
      {"bakeoff_pool", std::to_string(bakeoff_pool)},
      {"out", out_dir},
  };
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

TrainOptions RunConfig::train_options() const {
  TrainOptions t = train;
  t.seed = seed;
  return t;
}

BakeoffConfig RunConfig::bakeoff() const {
  BakeoffConfig b;
  b.model = model;
  b.kinds = bakeoff_kinds;
  b.folds = bakeoff_folds;
  b.pool_size = bakeoff_pool;
  b.data_seed = data_seed;
  b.model_seed = seed;
  b.train = train_options();
  return b;
}

void RunConfig::validate() const {
  model.validate();
  train.loss.validate();
  if (train.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (train.total_steps == 0) throw ConfigError("steps must be positive");
  if (!(train.optim.lr >= 0)) throw ConfigError("lr must be >= 0");
  if (train_size < train.batch_size) throw ConfigError("train_size must be at least batch_size");
  if (val_size == 0) throw ConfigError("val_size must be positive");
}

}  // namespace uvl
