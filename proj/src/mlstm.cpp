#include "unetvl/mlstm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace uvl {

MLSTMState::MLSTMState(std::size_t head_dim)
    : d(head_dim), C(head_dim * head_dim, 0.0), n(head_dim, 0.0), m(-std::numeric_limits<double>::infinity()) {}

namespace {

struct Dims {
  std::size_t steps, heads, d;
  std::size_t width() const { return heads * d; }
};

Dims check_inputs(const char* op, const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& ig,
                  const Tensor& fg) {
  auto fail = [&](const std::string& why) {
    throw DimensionError(std::string(op) + ": " + why + " (q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()) + ", i " + shape_str(ig.shape()) +
                         ", f " + shape_str(fg.shape()) + ")");
  };
  if (q.rank() != 2 || k.shape() != q.shape() || v.shape() != q.shape()) fail("q, k, v must share an [N, H*d] shape");
  if (ig.rank() != 2 || fg.shape() != ig.shape() || ig.dim(0) != q.dim(0)) fail("gates must be [N, H]");
  const std::size_t heads = ig.dim(1);
  if (heads == 0 || q.dim(1) % heads != 0) fail("feature width not divisible by head count");
  if (q.dim(0) == 0) fail("empty sequence");
  common_dtype(op, {q, k, v, ig, fg});
  return {q.dim(0), heads, q.dim(1) / heads};
}

inline double dot(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) s += a[i] * b[i];
  return s;
}

struct Inputs {
  const double *q, *k, *v, *ig, *fg;
};

// States before every step of one head, kept for backward.
struct HeadTrace {
  std::vector<double> C, n, m;
};

[[noreturn]] void diverged(std::size_t step, std::size_t head) {
  throw NumericError("mlstm: stabilization failure, non-finite state at step " + std::to_string(step) + " (head " +
                     std::to_string(head) + ")");
}

void scan_head(const Dims& dm, std::size_t head, const Inputs& in, double* out, MLSTMState& st, HeadTrace* trace) {
  const std::size_t d = dm.d, w = dm.width();
  if (trace) {
    trace->C.resize(dm.steps * d * d);
    trace->n.resize(dm.steps * d);
    trace->m.resize(dm.steps);
  }
  for (std::size_t t = 0; t < dm.steps; ++t) {
    const double* qt = in.q + t * w + head * d;
    const double* kt = in.k + t * w + head * d;
    const double* vt = in.v + t * w + head * d;
    const double it = in.ig[t * dm.heads + head];
    const double ft = in.fg[t * dm.heads + head];
    if (trace) {
      std::copy(st.C.begin(), st.C.end(), trace->C.begin() + static_cast<std::ptrdiff_t>(t * d * d));
      std::copy(st.n.begin(), st.n.end(), trace->n.begin() + static_cast<std::ptrdiff_t>(t * d));
      trace->m[t] = st.m;
    }
    const double g = ft + st.m;
    const double m_new = std::max(g, it);
    const double a = std::exp(g - m_new);
    const double b = std::exp(it - m_new);
    const double kq = dot(kt, qt, d);
    const double nq = dot(st.n.data(), qt, d);
    const double s = a * nq + b * kq;
    const double denom = std::max(std::abs(s), 1.0);
    double* ht = out + t * w + head * d;
    bool finite = std::isfinite(m_new) && std::isfinite(s);
    for (std::size_t i = 0; i < d; ++i) {
      const double cq = dot(st.C.data() + i * d, qt, d);
      const double r = a * cq + (b * kq) * vt[i];
      ht[i] = r / denom;
      finite = finite && std::isfinite(ht[i]);
    }
    if (!finite) diverged(t, head);
    for (std::size_t i = 0; i < d; ++i) {
      const double bv = b * vt[i];
      double* row = st.C.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) row[j] = a * row[j] + bv * kt[j];
    }
    for (std::size_t j = 0; j < d; ++j) st.n[j] = a * st.n[j] + b * kt[j];
    st.m = m_new;
  }
}

struct Grads {
  std::vector<double> q, k, v, ig, fg;
};

void backward_head(const Dims& dm, std::size_t head, const Inputs& in, const HeadTrace& tr,
                   std::span<const double> grad_out, Grads& gr) {
  const std::size_t d = dm.d, w = dm.width();
  std::vector<double> GC(d * d, 0.0), Gn(d, 0.0), gCp(d * d), gnp(d), cq(d), r(d), grv(d);
  double gm_next = 0.0;
  for (std::size_t t = dm.steps; t-- > 0;) {
    const std::size_t off = t * w + head * d;
    const double* qt = in.q + off;
    const double* kt = in.k + off;
    const double* vt = in.v + off;
    const double it = in.ig[t * dm.heads + head];
    const double ft = in.fg[t * dm.heads + head];
    const double* Cp = tr.C.data() + t * d * d;
    const double* np = tr.n.data() + t * d;
    const double g = ft + tr.m[t];
    const double m_t = std::max(g, it);
    const double a = std::exp(g - m_t);
    const double b = std::exp(it - m_t);
    const double kq = dot(kt, qt, d);
    const double nq = dot(np, qt, d);
    const double s = a * nq + b * kq;
    const double denom = std::max(std::abs(s), 1.0);
    for (std::size_t i = 0; i < d; ++i) {
      cq[i] = dot(Cp + i * d, qt, d);
      r[i] = a * cq[i] + (b * kq) * vt[i];
    }
    const double* gh = grad_out.data() + off;
    double* gq = gr.q.data() + off;
    double* gk = gr.k.data() + off;
    double* gv = gr.v.data() + off;

    double gs = 0.0;
    if (std::abs(s) > 1.0) {
      double gden = 0.0;
      for (std::size_t i = 0; i < d; ++i) gden -= gh[i] * r[i];
      gs = gden / (denom * denom) * (s > 0 ? 1.0 : -1.0);
    }
    double ga = 0.0, gb = 0.0, gkq = 0.0;
    // readout r = a Cp q + b kq v
    double gr_dot_v = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      grv[i] = gh[i] / denom;
      ga += grv[i] * cq[i];
      gr_dot_v += grv[i] * vt[i];
      gv[i] += b * kq * grv[i];
    }
    gb += kq * gr_dot_v;
    gkq += b * gr_dot_v;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        gCp[i * d + j] = a * grv[i] * qt[j];
        gq[j] += a * Cp[i * d + j] * grv[i];
      }
    // normalizer s = a n.q + b kq
    ga += gs * nq;
    gb += gs * kq;
    gkq += b * gs;
    for (std::size_t j = 0; j < d; ++j) {
      gnp[j] = a * gs * qt[j];
      gq[j] += a * gs * np[j];
    }
    for (std::size_t j = 0; j < d; ++j) {
      gk[j] += gkq * qt[j];
      gq[j] += gkq * kt[j];
    }
    // state update C_t = a Cp + b v k^T, n_t = a np + b k
    for (std::size_t i = 0; i < d; ++i) {
      double row_k = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double G = GC[i * d + j];
        ga += G * Cp[i * d + j];
        row_k += G * kt[j];
        gk[j] += b * G * vt[i];
        gCp[i * d + j] += a * G;
      }
      gb += row_k * vt[i];
      gv[i] += b * row_k;
    }
    for (std::size_t j = 0; j < d; ++j) {
      ga += Gn[j] * np[j];
      gb += Gn[j] * kt[j];
      gk[j] += b * Gn[j];
      gnp[j] += a * Gn[j];
    }
    // gates and stabilizer
    const double gm = gm_next - ga * a - gb * b;
    double& gf = gr.fg[t * dm.heads + head];
    double& gi = gr.ig[t * dm.heads + head];
    gf += ga * a;
    gi += gb * b;
    double gmp = ga * a;
    if (g >= it) {
      gf += gm;
      gmp += gm;
    } else {
      gi += gm;
    }
    GC.swap(gCp);
    Gn.swap(gnp);
    gm_next = gmp;
  }
}

void flush(GradSink& sink, const Grads& gr) {
  const std::vector<double>* all[] = {&gr.q, &gr.k, &gr.v, &gr.ig, &gr.fg};
  for (std::size_t i = 0; i < 5; ++i) {
    if (!sink.wants(i)) continue;
    auto dst = sink.at(i);
    for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += (*all[i])[e];
  }
}

std::uint64_t step_flops(const Dims& dm) { return dm.steps * dm.heads * (5 * dm.d * dm.d + 8 * dm.d); }

// Sequential trace for every head; used by both backward rules.
std::vector<HeadTrace> record_traces(const Dims& dm, const Inputs& in) {
  std::vector<HeadTrace> traces(dm.heads);
  std::vector<double> scratch(dm.steps * dm.width());
  for (std::size_t h = 0; h < dm.heads; ++h) {
    MLSTMState st(dm.d);
    scan_head(dm, h, in, scratch.data(), st, &traces[h]);
  }
  return traces;
}

BackwardFn make_backward(Dims dm, Tensor q, Tensor k, Tensor v, Tensor ig, Tensor fg,
                         std::shared_ptr<std::vector<HeadTrace>> traces) {
  return [=](std::span<const double> g, std::span<const double>, GradSink& sink) {
    const Inputs in{q.data().data(), k.data().data(), v.data().data(), ig.data().data(), fg.data().data()};
    std::vector<HeadTrace> local;
    const std::vector<HeadTrace>* tr = traces.get();
    if (!tr) {
      local = record_traces(dm, in);
      tr = &local;
    }
    Grads gr{std::vector<double>(q.numel()), std::vector<double>(k.numel()), std::vector<double>(v.numel()),
             std::vector<double>(ig.numel()), std::vector<double>(fg.numel())};
    for (std::size_t h = 0; h < dm.heads; ++h) backward_head(dm, h, in, (*tr)[h], g, gr);
    add_flops(2 * step_flops(dm));
    flush(sink, gr);
  };
}

bool needs_graph(std::initializer_list<Tensor> xs) {
  if (!grad_mode_enabled()) return false;
  for (const auto& x : xs)
    if (x.requires_grad()) return true;
  return false;
}

}  // namespace

Tensor mlstm_sequence(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& igate, const Tensor& fgate) {
  const Dims dm = check_inputs("mlstm_sequence", q, k, v, igate, fgate);
  const Inputs in{q.data().data(), k.data().data(), v.data().data(), igate.data().data(), fgate.data().data()};
  const bool graph = needs_graph({q, k, v, igate, fgate});
  std::vector<double> out(dm.steps * dm.width());
  auto traces = graph ? std::make_shared<std::vector<HeadTrace>>(dm.heads) : nullptr;
  {
    // one live state per head at a time
    ScratchTicket state_bytes(static_cast<std::int64_t>(MLSTMState(dm.d).size_bytes(q.dtype())));
    for (std::size_t h = 0; h < dm.heads; ++h) {
      MLSTMState st(dm.d);
      scan_head(dm, h, in, out.data(), st, graph ? &(*traces)[h] : nullptr);
    }
  }
  add_flops(step_flops(dm));
  return make_result("mlstm_sequence", {dm.steps, dm.width()}, std::move(out), q.dtype(), {q, k, v, igate, fgate},
                     make_backward(dm, q, k, v, igate, fgate, traces));
}

Tensor mlstm_chunkwise(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& igate, const Tensor& fgate,
                       std::size_t chunk_size) {
  if (chunk_size < 1) throw ConfigError("mlstm_chunkwise: chunk_size must be >= 1");
  const Dims dm = check_inputs("mlstm_chunkwise", q, k, v, igate, fgate);
  const Inputs in{q.data().data(), k.data().data(), v.data().data(), igate.data().data(), fgate.data().data()};
  const std::size_t d = dm.d, w = dm.width(), L = std::min(chunk_size, dm.steps);
  std::vector<double> out(dm.steps * w);
  std::vector<double> F(L), mloc(L), aloc(L), kq(L * L), wgt(L * L), cq(d);
  for (std::size_t h = 0; h < dm.heads; ++h) {
    MLSTMState st(d);
    for (std::size_t t0 = 0; t0 < dm.steps; t0 += L) {
      const std::size_t len = std::min(L, dm.steps - t0);
      auto row = [&](const double* base, std::size_t tau) { return base + (t0 + tau) * w + h * d; };
      auto gate = [&](const double* base, std::size_t tau) { return base[(t0 + tau) * dm.heads + h]; };
      // cumulative log-forget within the chunk
      for (std::size_t tau = 0; tau < len; ++tau) F[tau] = tau ? F[tau - 1] + gate(in.fg, tau) : gate(in.fg, tau);
      // stabilizers and decay weights: D[tau, j] = (F_tau - F_j) + i_j
      for (std::size_t tau = 0; tau < len; ++tau) {
        const double g = F[tau] + st.m;
        double mx = g;
        for (std::size_t j = 0; j <= tau; ++j) mx = std::max(mx, (F[tau] - F[j]) + gate(in.ig, j));
        mloc[tau] = mx;
        aloc[tau] = std::exp(g - mx);
        for (std::size_t j = 0; j <= tau; ++j) {
          wgt[tau * L + j] = std::exp(((F[tau] - F[j]) + gate(in.ig, j)) - mx);
          kq[tau * L + j] = dot(row(in.k, j), row(in.q, tau), d);
        }
      }
      // outputs
      for (std::size_t tau = 0; tau < len; ++tau) {
        const double* qt = row(in.q, tau);
        const double a = aloc[tau];
        double s = a * dot(st.n.data(), qt, d);
        for (std::size_t j = 0; j <= tau; ++j) s = s + wgt[tau * L + j] * kq[tau * L + j];
        const double denom = std::max(std::abs(s), 1.0);
        for (std::size_t i = 0; i < d; ++i) cq[i] = a * dot(st.C.data() + i * d, qt, d);
        double* ht = out.data() + (t0 + tau) * w + h * d;
        bool finite = std::isfinite(mloc[tau]) && std::isfinite(s);
        for (std::size_t i = 0; i < d; ++i) {
          double r = cq[i];
          for (std::size_t j = 0; j <= tau; ++j) r = r + (wgt[tau * L + j] * kq[tau * L + j]) * row(in.v, j)[i];
          ht[i] = r / denom;
          finite = finite && std::isfinite(ht[i]);
        }
        if (!finite) diverged(t0 + tau, h);
      }
      // carry the state to the next chunk
      const std::size_t last = len - 1;
      const double a = aloc[last];
      for (std::size_t i = 0; i < d; ++i) {
        double* crow = st.C.data() + i * d;
        for (std::size_t c = 0; c < d; ++c) {
          double acc = a * crow[c];
          for (std::size_t j = 0; j <= last; ++j) acc = acc + (wgt[last * L + j] * row(in.v, j)[i]) * row(in.k, j)[c];
          crow[c] = acc;
        }
      }
      for (std::size_t c = 0; c < d; ++c) {
        double acc = a * st.n[c];
        for (std::size_t j = 0; j <= last; ++j) acc = acc + wgt[last * L + j] * row(in.k, j)[c];
        st.n[c] = acc;
      }
      st.m = mloc[last];
    }
  }
  add_flops(dm.heads * dm.steps * (3 * d * d + 4 * L * d + 6 * L));
  return make_result("mlstm_chunkwise", {dm.steps, w}, std::move(out), q.dtype(), {q, k, v, igate, fgate},
                     make_backward(dm, q, k, v, igate, fgate, nullptr));
}

std::vector<MLSTMState> mlstm_final_states(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& igate,
                                           const Tensor& fgate) {
  const Dims dm = check_inputs("mlstm_final_states", q, k, v, igate, fgate);
  const Inputs in{q.data().data(), k.data().data(), v.data().data(), igate.data().data(), fgate.data().data()};
  std::vector<double> out(dm.steps * dm.width());
  std::vector<MLSTMState> states;
  for (std::size_t h = 0; h < dm.heads; ++h) {
    states.emplace_back(dm.d);
    scan_head(dm, h, in, out.data(), states.back(), nullptr);
  }
  return states;
}

}  // namespace uvl
