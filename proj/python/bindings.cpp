// Python bindings for the unetvl core.
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "unetvl/checks.hpp"
#include "unetvl/config.hpp"
#include "unetvl/experiments.hpp"
#include "unetvl/kan.hpp"
#include "unetvl/mlstm.hpp"
#include "unetvl/model.hpp"
#include "unetvl/ops.hpp"
#include "unetvl/train.hpp"
#include "unetvl/version.hpp"
#include "unetvl/vil.hpp"

namespace py = pybind11;
using namespace uvl;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

DType parse_dtype(const std::string& s) {
  if (s == "f32" || s == "float32") return DType::F32;
  if (s == "f64" || s == "float64") return DType::F64;
  throw ConfigError("unknown dtype '" + s + "' (expected f32 or f64)");
}

Tensor from_numpy(const Array& a, DType dtype = DType::F64) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  std::vector<double> values(a.data(), a.data() + a.size());
  return Tensor(std::move(shape), std::move(values), DType::F64).to(dtype);
}

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::array_t<std::uint8_t> labels_to_numpy(const Labels& l, const Shape& shape) {
  std::vector<py::ssize_t> s(shape.begin(), shape.end());
  py::array_t<std::uint8_t> out(s);
  std::copy(l.begin(), l.end(), out.mutable_data());
  return out;
}

Labels labels_from_numpy(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a) {
  return Labels(a.data(), a.data() + a.size());
}

py::dict named_to_dict(const NamedTensors& named) {
  py::dict d;
  for (const auto& [name, t] : named) d[py::str(name)] = to_numpy(t);
  return d;
}

py::dict report_to_dict(const GradcheckReport& r) {
  py::dict d;
  d["passed"] = r.passed;
  d["max_rel_error"] = r.max_rel_error;
  d["coords_checked"] = r.coords_checked;
  d["refined"] = r.refined;
  return d;
}

py::dict table_to_dict(const ParameterTable& t) {
  py::dict d;
  d["embed"] = t.embed;
  d["encoder"] = t.encoder;
  d["projections"] = t.projections;
  d["decoder"] = t.decoder;
  d["total"] = t.total();
  return d;
}

py::dict dice_to_dict(const DiceResult& r) {
  py::dict d;
  d["mean"] = r.mean;
  d["per_class"] = r.per_class;
  return d;
}

// Owns a projection built by make_projection.
struct PyProjection {
  std::unique_ptr<Projection> proj;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "3D segmentation network with ViL encoder and KAN projections";
  m.attr("__version__") = kVersion;

  // Exceptions: ValueError for user input, RuntimeError otherwise.
  static py::exception<DimensionError> dim_err(m, "DimensionError", PyExc_ValueError);
  static py::exception<ConfigError> cfg_err(m, "ConfigError", PyExc_ValueError);
  static py::exception<FormatError> fmt_err(m, "FormatError", PyExc_ValueError);
  static py::exception<NumericError> num_err(m, "NumericError", PyExc_ArithmeticError);
  static py::exception<GraphError> graph_err(m, "GraphError", PyExc_RuntimeError);
  static py::exception<OracleError> oracle_err(m, "OracleError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const DimensionError& e) {
      PyErr_SetString(dim_err.ptr(), e.what());
    } catch (const ConfigError& e) {
      PyErr_SetString(cfg_err.ptr(), e.what());
    } catch (const FormatError& e) {
      PyErr_SetString(fmt_err.ptr(), e.what());
    } catch (const NumericError& e) {
      PyErr_SetString(num_err.ptr(), e.what());
    } catch (const GraphError& e) {
      PyErr_SetString(graph_err.ptr(), e.what());
    } catch (const OracleError& e) {
      PyErr_SetString(oracle_err.ptr(), e.what());
    }
  });

  // Tensor ----------------------------------------------------------------------
  py::class_<Tensor>(m, "Tensor")
      .def(py::init([](const Array& a, const std::string& dtype, bool requires_grad) {
             Tensor t = from_numpy(a, parse_dtype(dtype));
             if (requires_grad) t.set_requires_grad(true);
             return t;
           }),
           py::arg("array"), py::arg("dtype") = "f64", py::arg("requires_grad") = false)
      .def_property_readonly("shape", [](const Tensor& t) { return t.shape(); })
      .def_property_readonly("dtype", [](const Tensor& t) { return std::string(dtype_name(t.dtype())); })
      .def_property_readonly("requires_grad", &Tensor::requires_grad)
      .def("numpy", &to_numpy)
      .def("item", &Tensor::item)
      .def("backward", &Tensor::backward)
      .def("grad", [](const Tensor& t) -> py::object {
        if (!t.has_grad()) return py::none();
        return to_numpy(t.grad());
      })
      .def("zero_grad", &Tensor::zero_grad)
      .def("detach", &Tensor::detach)
      .def("__repr__", [](const Tensor& t) {
        return "Tensor(shape=" + shape_str(t.shape()) + ", dtype=" + std::string(dtype_name(t.dtype())) + ")";
      });
  py::implicitly_convertible<py::array, Tensor>();

  m.def("sum", py::overload_cast<const Tensor&>(&sum));
  m.def("mean", py::overload_cast<const Tensor&>(&mean));
  m.def("add", &add);
  m.def("mul", &mul);
  m.def("matmul", &matmul);
  m.def("square", &square);
  m.def("tanh", py::overload_cast<const Tensor&>(&uvl::tanh));

  m.def("memory_stats", [] {
    const MemoryStats s = memory_stats();
    return py::dict(py::arg("live_bytes") = s.live_bytes, py::arg("peak_bytes") = s.peak_bytes);
  });
  m.def("flop_count", &flop_count);
  m.def("reset_flop_count", &reset_flop_count);

  // Bases and projections -------------------------------------------------------
  m.def("chebyshev_polynomials", &chebyshev_polynomials, py::arg("u"), py::arg("degree"),
        "T[n, i, m] = T_m(u[n, i]) for m = 0..degree.");
  m.def("chebyshev_basis", &chebyshev_basis, py::arg("x"), py::arg("degree"));
  m.def("bspline_basis", &bspline_basis, py::arg("u"), py::arg("grid"), py::arg("order"));
  m.def("rbf_basis", &rbf_basis, py::arg("u"), py::arg("num_centers"));
  m.def(
      "projection_param_count",
      [](const std::string& kind, std::size_t in, std::size_t out, int degree) {
        ProjectionHyper h;
        h.degree = degree;
        return projection_param_count(parse_projection_kind(kind), in, out, h);
      },
      py::arg("kind"), py::arg("input_dim"), py::arg("output_dim"), py::arg("degree") = 4);

  py::class_<PyProjection>(m, "Projection")
      .def(py::init([](const std::string& kind, std::size_t in, std::size_t out, std::uint64_t seed, int degree,
                       const std::string& dtype) {
             ProjectionHyper h;
             h.degree = degree;
             Prng rng(seed);
             return PyProjection{make_projection(parse_projection_kind(kind), in, out, h, rng, parse_dtype(dtype))};
           }),
           py::arg("kind"), py::arg("input_dim"), py::arg("output_dim"), py::arg("seed") = 0, py::arg("degree") = 4,
           py::arg("dtype") = "f64")
      .def("forward", [](const PyProjection& p, const Tensor& x) { return p.proj->forward(x); })
      .def("__call__", [](const PyProjection& p, const Tensor& x) { return p.proj->forward(x); })
      .def_property_readonly("kind", [](const PyProjection& p) { return std::string(to_string(p.proj->kind())); })
      .def_property_readonly("num_parameters", [](const PyProjection& p) { return p.proj->num_parameters(); })
      .def("parameters", [](const PyProjection& p) { return named_to_dict(p.proj->parameters()); });

  // mLSTM -------------------------------------------------------------------------
  m.def("mlstm_sequence", &mlstm_sequence, py::arg("q"), py::arg("k"), py::arg("v"), py::arg("igate"),
        py::arg("fgate"));
  m.def("mlstm_chunkwise", &mlstm_chunkwise, py::arg("q"), py::arg("k"), py::arg("v"), py::arg("igate"),
        py::arg("fgate"), py::arg("chunk_size"));
  m.def(
      "mlstm_state_bytes",
      [](const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& i, const Tensor& f) {
        std::size_t n = 0;
        for (const auto& s : mlstm_final_states(q, k, v, i, f)) n += s.size_bytes(q.dtype());
        return n;
      },
      "Bytes of recurrent state held after the scan.");

  m.def(
      "patchify", [](const Tensor& v, std::size_t p) { return patchify(v, {p, p, p}); }, py::arg("volume"),
      py::arg("patch"));
  m.def(
      "unpatchify",
      [](const Tensor& x, std::size_t c, std::size_t h, std::size_t w, std::size_t d, std::size_t p) {
        return unpatchify(x, c, h, w, d, {p, p, p});
      },
      py::arg("patches"), py::arg("channels"), py::arg("H"), py::arg("W"), py::arg("D"), py::arg("patch"));

  // Model ---------------------------------------------------------------------------
  py::class_<UNETVLConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_static("tiny", &UNETVLConfig::tiny)
      .def_static("micro", &UNETVLConfig::micro)
      .def_readwrite("H", &UNETVLConfig::H)
      .def_readwrite("W", &UNETVLConfig::W)
      .def_readwrite("D", &UNETVLConfig::D)
      .def_readwrite("in_channels", &UNETVLConfig::in_channels)
      .def_readwrite("patch", &UNETVLConfig::patch)
      .def_readwrite("embed_dim", &UNETVLConfig::embed_dim)
      .def_readwrite("depth", &UNETVLConfig::depth)
      .def_readwrite("taps", &UNETVLConfig::taps)
      .def_readwrite("head_dim", &UNETVLConfig::head_dim)
      .def_readwrite("expansion", &UNETVLConfig::expansion)
      .def_readwrite("num_classes", &UNETVLConfig::num_classes)
      .def_readwrite("decoder_min_width", &UNETVLConfig::decoder_min_width)
      .def_readwrite("chunk_size", &UNETVLConfig::chunk_size)
      .def_property(
          "projection", [](const UNETVLConfig& c) { return std::string(to_string(c.projection)); },
          [](UNETVLConfig& c, const std::string& s) { c.projection = parse_projection_kind(s); })
      .def_property(
          "degree", [](const UNETVLConfig& c) { return c.hyper.degree; },
          [](UNETVLConfig& c, int d) { c.hyper.degree = d; })
      .def_property(
          "dtype", [](const UNETVLConfig& c) { return std::string(dtype_name(c.dtype)); },
          [](UNETVLConfig& c, const std::string& s) { c.dtype = parse_dtype(s); })
      .def_property_readonly("num_tokens", &UNETVLConfig::num_tokens)
      .def("validate", &UNETVLConfig::validate);

  m.def(
      "count_parameters", [](const UNETVLConfig& c) { return table_to_dict(count_parameters(c)); },
      "Closed-form parameter counts by component.");

  py::class_<UNETVL>(m, "UNETVL")
      .def(py::init<const UNETVLConfig&, std::uint64_t>(), py::arg("config"), py::arg("seed") = 0)
      .def("forward", &UNETVL::forward, py::arg("volume"))
      .def("__call__", &UNETVL::forward)
      .def(
          "predict",
          [](const UNETVL& model, const Tensor& volume) {
            NoGradGuard g;
            const Tensor logits = model.forward(volume);
            Shape spatial(logits.shape().begin() + 1, logits.shape().end());
            return labels_to_numpy(argmax_labels(logits), spatial);
          },
          py::arg("volume"), "Per-voxel argmax labels.")
      .def(
          "encoder_taps",
          [](const UNETVL& model, const Tensor& tokens) {
            std::map<std::size_t, py::array_t<double>> out;
            for (const auto& [i, z] : model.encoder().forward(tokens)) out[i] = to_numpy(z);
            return out;
          },
          py::arg("tokens"), "Encoder outputs [N, K] keyed by 1-based block index.")
      .def_property_readonly("config", &UNETVL::config)
      .def_property_readonly("num_parameters", &UNETVL::num_parameters)
      .def("parameter_table", [](const UNETVL& model) { return table_to_dict(count_parameters(model)); })
      .def("parameters", [](const UNETVL& model) { return named_to_dict(model.parameters()); })
      .def(
          "save", [](const UNETVL& model, const std::string& path) { save_weights(path, model); }, py::arg("path"))
      .def(
          "load", [](const UNETVL& model, const std::string& path) { load_weights(path, model); }, py::arg("path"));

  // Data, loss, metric ------------------------------------------------------------------
  m.def(
      "synthetic_volume",
      [](std::uint64_t seed, std::size_t extent, std::size_t num_classes) {
        Prng rng(seed);
        const Sample s = gen_synthetic_volume(rng, {extent, extent, extent}, num_classes, DType::F64);
        return py::make_tuple(to_numpy(s.volume), labels_to_numpy(s.label, {extent, extent, extent}));
      },
      py::arg("seed"), py::arg("extent"), py::arg("num_classes"), "(volume [1, E, E, E], labels [E, E, E]).");
  m.def(
      "dice_ce_loss",
      [](const Tensor& logits, const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& labels,
         double ce_weight, double dice_weight) {
        LossConfig c;
        c.ce_weight = ce_weight;
        c.dice_weight = dice_weight;
        return dice_ce_loss(logits, labels_from_numpy(labels), c);
      },
      py::arg("logits"), py::arg("labels"), py::arg("ce_weight") = 1.0, py::arg("dice_weight") = 1.0);
  m.def(
      "dice_metric",
      [](const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& pred,
         const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& gt, std::size_t num_classes) {
        return dice_to_dict(dice_metric(labels_from_numpy(pred), labels_from_numpy(gt), num_classes));
      },
      py::arg("pred"), py::arg("gt"), py::arg("num_classes"));
  m.def("polynomial_lr", &polynomial_lr, py::arg("step"), py::arg("total_steps"), py::arg("lr0"),
        py::arg("power") = 0.9);

  // Runs ------------------------------------------------------------------------------------
  m.def(
      "train",
      [](const std::string& config_text, std::size_t steps) {
        RunConfig rc;
        rc.apply_text(config_text, "<python>");
        rc.validate();
        TrainOptions opt = rc.train_options();
        if (steps) opt.total_steps = steps;
        py::gil_scoped_release release;
        const UNETVL model(rc.model, rc.seed);
        const SyntheticVolumeDataset data(rc.data_seed, {rc.model.H, rc.model.W, rc.model.D}, rc.model.num_classes,
                                          rc.train_size, rc.val_size, rc.model.dtype);
        TrainState state;
        std::vector<std::string> lines;
        for (const auto& r : train_loop(model, data, opt, state)) lines.push_back(r.to_line());
        return lines;
      },
      py::arg("config_text") = "", py::arg("steps") = 0,
      "Trains from `key = value` config text; returns the per-epoch log lines.");
  m.def("config_keys", &run_config_keys);

  m.def(
      "gradcheck",
      [](const std::string& component, double tol, bool planted_fault) {
        const ComponentCheck c = run_gradcheck(component, tol, planted_fault);
        py::dict d;
        d["component"] = c.component;
        d["passed"] = c.passed();
        d["max_rel_error"] = c.max_rel_error();
        d["input"] = report_to_dict(c.input);
        d["params"] = report_to_dict(c.params);
        return d;
      },
      py::arg("component"), py::arg("tol") = 1e-4, py::arg("planted_fault") = false);
  m.def("gradcheck_components", &gradcheck_components);

  m.def(
      "bench",
      [](const std::vector<std::size_t>& lengths, std::size_t dim, std::size_t head_dim, std::uint64_t seed) {
        BenchResult r;
        {
          py::gil_scoped_release release;
          r = bench_scaling(lengths, dim, head_dim, seed);
        }
        py::list rows;
        for (const auto& row : r.rows)
          rows.append(py::dict(py::arg("block") = row.block, py::arg("tokens") = row.tokens,
                               py::arg("peak_bytes") = row.peak_bytes, py::arg("flops") = row.flops,
                               py::arg("state_bytes") = row.state_bytes));
        py::dict d;
        d["rows"] = rows;
        d["attention_memory_slope"] = r.attention_memory_slope;
        d["vil_memory_slope"] = r.vil_memory_slope;
        d["attention_flop_slope"] = r.attention_flop_slope;
        d["vil_flop_slope"] = r.vil_flop_slope;
        d["csv"] = bench_csv(r);
        return d;
      },
      py::arg("lengths"), py::arg("dim") = 32, py::arg("head_dim") = 4, py::arg("seed") = 0);
}
