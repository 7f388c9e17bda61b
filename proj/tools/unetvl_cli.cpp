// unetvl command-line driver: train, eval, gradcheck, bench, bakeoff, inspect.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "unetvl/checks.hpp"
#include "unetvl/config.hpp"
#include "unetvl/experiments.hpp"
#include "unetvl/model.hpp"
#include "unetvl/train.hpp"
#include "unetvl/version.hpp"

namespace fs = std::filesystem;
using namespace uvl;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kBadInput = 2, kDiverged = 3 };

/// Flags shared by the config-driven subcommands.
struct CommonFlags {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string dtype;

  void add_to(CLI::App* app) {
    app->add_option("--config", config, "key = value config file (defaults built in)");
    app->add_option("--set", sets, "override one key, KEY=VALUE (repeatable)");
    app->add_option("--seed", seed, "weight init and shuffling seed (default 0)");
    app->add_option("--out", out, "output directory (default runs/default)");
    app->add_option("--dtype", dtype, "f32 or f64 (default f32)")->check(CLI::IsMember({"f32", "f64"}));
  }

  RunConfig resolve() const {
    RunConfig rc;
    if (!config.empty()) rc.apply_file(config);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got '" + s + "'");
      rc.set(s.substr(0, eq), s.substr(eq + 1));
    }
    if (seed) rc.seed = *seed;
    if (!out.empty()) rc.out_dir = out;
    if (!dtype.empty()) rc.set("dtype", dtype);
    return rc;
  }
};

fs::path prepare_out(const std::string& dir) {
  fs::path p(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  const fs::path probe = p / ".write_test";
  std::ofstream f(probe);
  if (ec || !f) throw ConfigError("output directory " + dir + " is not writable");
  f.close();
  fs::remove(probe, ec);
  return p;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  f << text;
  if (!f) throw FormatError("cannot write " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot read " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

SyntheticVolumeDataset make_dataset(const RunConfig& rc) {
  return SyntheticVolumeDataset(rc.data_seed, {rc.model.H, rc.model.W, rc.model.D}, rc.model.num_classes,
                                rc.train_size, rc.val_size, rc.model.dtype);
}

std::string manifest_text(const RunConfig& rc, const UNETVL& model, std::uint64_t steps, const EpochRecord* last) {
  std::ostringstream os;
  os << "unetvl_version = " << kVersion << "\n"
     << "checkpoint = checkpoint.uvlc\nconfig = config.txt\nmetrics = metrics.log\n"
     << "parameters = " << model.num_parameters() << "\n"
     << "steps_completed = " << steps << "\n";
  if (last) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9f", last->val.mean);
    os << "final_val_dice = " << buf << "\n";
  }
  os << "# effective config\n";
  std::istringstream cfg(rc.to_text());
  for (std::string line; std::getline(cfg, line);) os << "#   " << line << "\n";
  return os.str();
}

std::string manifest_version(const std::string& text) {
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);)
    if (line.rfind("unetvl_version = ", 0) == 0) return line.substr(17);
  return "";
}

int cmd_train(const CommonFlags& flags, bool resume) {
  const RunConfig rc = flags.resolve();
  rc.validate();
  const fs::path out = prepare_out(rc.out_dir);
  write_file(out / "config.txt", rc.to_text());
  const UNETVL model(rc.model, rc.seed);
  const SyntheticVolumeDataset data = make_dataset(rc);
  const fs::path ckpt = out / "checkpoint.uvlc";
  TrainState state;
  if (resume) state = load_train_state(ckpt.string(), model);
  std::ofstream log(out / "metrics.log", resume ? std::ios::app : std::ios::trunc);
  if (!log) throw ConfigError("cannot write " + (out / "metrics.log").string());
  std::cout << "unetvl " << kVersion << " train: " << model.num_parameters() << " parameters, "
            << rc.train.total_steps << " steps, out " << out.string() << "\n";
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<EpochRecord> records;
  try {
    records = train_loop(model, data, rc.train_options(), state, [&](const EpochRecord& r) {
      log << r.to_line() << "\n";
      log.flush();
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::printf("%s  (%.1fs)\n", r.to_line().c_str(), s);
      std::fflush(stdout);
    });
  } catch (const NumericError& e) {
    save_train_state((out / "diverged.uvlc").string(), model, state);
    throw;
  }
  save_train_state(ckpt.string(), model, state);
  write_file(out / "manifest.txt", manifest_text(rc, model, state.optim.step, records.empty() ? nullptr : &records.back()));
  return kOk;
}

int cmd_eval(const CommonFlags& flags, std::string checkpoint, std::optional<std::uint64_t> data_seed,
             const std::string& split) {
  RunConfig rc = flags.resolve();
  if (checkpoint.empty()) checkpoint = (fs::path(rc.out_dir) / "checkpoint.uvlc").string();
  const fs::path dir = fs::path(checkpoint).parent_path();
  if (flags.config.empty() && fs::exists(dir / "config.txt")) {
    CommonFlags from_run = flags;
    from_run.config = (dir / "config.txt").string();
    rc = from_run.resolve();
  }
  if (fs::exists(dir / "manifest.txt")) {
    const std::string v = manifest_version(read_file(dir / "manifest.txt"));
    if (v != kVersion) throw FormatError("checkpoint manifest is for unetvl '" + v + "', this is " + kVersion);
  }
  if (data_seed) rc.data_seed = *data_seed;
  rc.validate();
  const UNETVL model(rc.model, rc.seed);
  load_weights(checkpoint, model);
  const DiceResult r = evaluate(model, make_dataset(rc), split == "train");
  std::printf("%-8s %12s\n", "class", "dice");
  for (std::size_t c = 0; c < r.per_class.size(); ++c) std::printf("%-8zu %12.9f\n", c + 1, r.per_class[c]);
  std::printf("%-8s %12.9f\n", "mean", r.mean);
  std::printf("%s_dice=%.9f\n", split.c_str(), r.mean);
  return kOk;
}

int cmd_gradcheck(std::vector<std::string> components, double tol, bool fault) {
  if (components.empty() || (components.size() == 1 && components[0] == "all")) components = gradcheck_components();
  bool ok = true;
  for (const auto& c : components) {
    const auto t0 = std::chrono::steady_clock::now();
    const ComponentCheck r = run_gradcheck(c, tol, fault);
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s  (%.2fs)\n", describe(r).c_str(), s);
    std::fflush(stdout);
    ok = ok && r.passed();
  }
  return ok ? kOk : kCheckFailed;
}

int cmd_bench(const CommonFlags& flags, const std::vector<std::size_t>& lens) {
  RunConfig rc = flags.resolve();
  if (!lens.empty()) rc.bench_lengths = lens;
  const BenchResult r = bench_scaling(rc.bench_lengths, rc.bench_dim, rc.bench_head_dim, rc.seed, rc.model.dtype);
  std::cout << format_bench_table(r);
  const fs::path out = prepare_out(rc.out_dir);
  write_file(out / "bench.csv", bench_csv(r));
  std::cout << "wrote " << (out / "bench.csv").string() << "\n";
  return kOk;
}

int cmd_bakeoff(const CommonFlags& flags, const std::vector<std::string>& kinds, std::optional<std::size_t> folds) {
  RunConfig rc = flags.resolve();
  if (!kinds.empty()) {
    rc.bakeoff_kinds.clear();
    for (const auto& k : kinds) rc.bakeoff_kinds.push_back(parse_projection_kind(k));
  }
  if (folds) rc.bakeoff_folds = *folds;
  rc.validate();
  const fs::path out = prepare_out(rc.out_dir);
  const BakeoffTable t = bakeoff_run(rc.bakeoff(), [](std::size_t f, ProjectionKind k, const BakeoffCell& c) {
    if (c.ok)
      std::fprintf(stderr, "fold %zu %-10s dice %.4f\n", f + 1, std::string(to_string(k)).c_str(), c.dice);
    else
      std::fprintf(stderr, "fold %zu %-10s failed: %s\n", f + 1, std::string(to_string(k)).c_str(), c.error.c_str());
  });
  std::cout << "Dice (%) per fold and projection kind\n" << format_bakeoff_table(t);
  write_file(out / "bakeoff.csv", bakeoff_csv(t));
  std::cout << "wrote " << (out / "bakeoff.csv").string() << "\n";
  return kOk;
}

int cmd_inspect(const CommonFlags& flags) {
  const RunConfig rc = flags.resolve();
  rc.model.validate();
  const UNETVLConfig& m = rc.model;
  const ParameterTable t = count_parameters(m);
  UNETVLConfig plain = m;
  plain.projection = ProjectionKind::Linear;
  UNETVLConfig wide = m;
  wide.embed_dim *= 2;
  const std::size_t n_plain = count_parameters(plain).total(), n_wide = count_parameters(wide).total();
  std::printf("volume %zux%zux%zu  P=%zu  K=%zu  depth=%zu  tokens=%zu  projection=%s\n", m.H, m.W, m.D, m.patch,
              m.embed_dim, m.depth, m.num_tokens(), std::string(to_string(m.projection)).c_str());
  std::cout << format_parameter_table(t);
  std::printf("%-12s %14zu %10.3fM\n", "w/o KAN", n_plain, n_plain / 1e6);
  std::printf("%-12s %14lld %10.3fM\n", "KAN delta", static_cast<long long>(t.total()) - static_cast<long long>(n_plain),
              (static_cast<double>(t.total()) - static_cast<double>(n_plain)) / 1e6);
  std::printf("%-12s %14zu %10.3fM\n", "2K total", n_wide, n_wide / 1e6);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"UNETVL: Chebyshev-KAN / mLSTM volumetric segmentation toolkit"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  CommonFlags train_f, eval_f, bench_f, bakeoff_f, inspect_f;
  auto* train = app.add_subcommand("train", "train on the synthetic dataset; writes checkpoint, manifest and metrics log");
  train_f.add_to(train);
  bool resume = false;
  train->add_flag("--resume", resume, "continue from <out>/checkpoint.uvlc");

  auto* eval = app.add_subcommand("eval", "per-class Dice of a checkpoint on the seeded dataset");
  eval_f.add_to(eval);
  std::string checkpoint, split = "val";
  std::optional<std::uint64_t> data_seed;
  eval->add_option("--checkpoint", checkpoint, "checkpoint file (default <out>/checkpoint.uvlc)");
  eval->add_option("--data-seed", data_seed, "dataset seed (default from the run config)");
  eval->add_option("--split", split, "val or train (default val)")->check(CLI::IsMember({"val", "train"}));

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks (f64)");
  std::vector<std::string> components;
  double tol = 1e-4;
  bool fault = false;
  std::vector<std::string> allowed = gradcheck_components();
  allowed.push_back("all");
  gc->add_option("component", components, "components to check (default all)")->check(CLI::IsMember(allowed));
  gc->add_option("--tol", tol, "relative error tolerance (default 1e-4)");
  gc->add_flag("--plant-fault", fault, "test fixture: withhold one gradient term so every check must fail");

  auto* bench = app.add_subcommand("bench", "activation memory and FLOPs, attention vs ViL block");
  bench_f.add_to(bench);
  std::vector<std::size_t> lens;
  bench->add_option("--lens", lens, "sequence lengths (default 64,128,256,512,1024)")->delimiter(',');

  auto* bake = app.add_subcommand("bakeoff", "paired fold comparison of projection kinds");
  bakeoff_f.add_to(bake);
  std::vector<std::string> kinds;
  std::optional<std::size_t> folds;
  bake->add_option("--kinds", kinds, "projection kinds (default mlp,bspline,rbf,chebyshev)")->delimiter(',');
  bake->add_option("--folds", folds, "number of folds (default 3)");

  auto* inspect = app.add_subcommand("inspect", "parameter accounting for a config");
  inspect_f.add_to(inspect);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kBadInput;
  }

  try {
    if (*train) return cmd_train(train_f, resume);
    if (*eval) return cmd_eval(eval_f, checkpoint, data_seed, split);
    if (*gc) return cmd_gradcheck(components, tol, fault);
    if (*bench) return cmd_bench(bench_f, lens);
    if (*bake) return cmd_bakeoff(bakeoff_f, kinds, folds);
    if (*inspect) return cmd_inspect(inspect_f);
  } catch (const NumericError& e) {
    std::cerr << "error: numerical divergence: " << e.what() << "\n";
    return kDiverged;
  } catch (const ConfigError& e) {
    std::cerr << "error: invalid input: " << e.what() << "\n";
    return kBadInput;
  } catch (const FormatError& e) {
    std::cerr << "error: invalid input: " << e.what() << "\n";
    return kBadInput;
  } catch (const DimensionError& e) {
    std::cerr << "error: invalid input: " << e.what() << "\n";
    return kBadInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckFailed;
  }
  return kCheckFailed;
}
