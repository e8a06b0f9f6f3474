#include "pacn/arn.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "pacn/ops.hpp"

namespace pacn {
namespace {

using i64 = std::int64_t;

struct FinGeometry {
  i64 n, c, f, t;
  i64 index(i64 s, i64 ch, i64 fi, i64 ti) const { return ((s * c + ch) * f + fi) * t + ti; }
};

FinGeometry geometry(const Shape& s) {
  if (s.size() != 4) throw ConfigError("fin: input must be (n,c,f,t), got " + shape_str(s));
  return {s[0], s[1], s[2], s[3]};
}

// Normalized values and 1/sqrt(var + eps) per (n, f).
template <class T>
void fin_forward(const BasicTensor<T>& x, const FinGeometry& g, BasicTensor<T>& xhat,
                 std::vector<T>& invstd) {
  const T eps = static_cast<T>(kNormEps);
  const T count = static_cast<T>(g.c * g.t);
  invstd.assign(static_cast<std::size_t>(g.n * g.f), T(0));
  for (i64 s = 0; s < g.n; ++s)
    for (i64 fi = 0; fi < g.f; ++fi) {
      T m = 0;
      for (i64 ch = 0; ch < g.c; ++ch)
        for (i64 ti = 0; ti < g.t; ++ti) m += x[g.index(s, ch, fi, ti)];
      m /= count;
      T var = 0;
      for (i64 ch = 0; ch < g.c; ++ch)
        for (i64 ti = 0; ti < g.t; ++ti) {
          const T d = x[g.index(s, ch, fi, ti)] - m;
          var += d * d;
        }
      var /= count;
      const T is = T(1) / std::sqrt(var + eps);
      invstd[s * g.f + fi] = is;
      for (i64 ch = 0; ch < g.c; ++ch)
        for (i64 ti = 0; ti < g.t; ++ti) {
          const i64 k = g.index(s, ch, fi, ti);
          xhat[k] = (x[k] - m) * is;
        }
    }
}

// gx += d FIN / dx applied to upstream gradient `gh` (same layout as x).
template <class T>
void fin_backward(const BasicTensor<T>& xhat, const std::vector<T>& invstd, const FinGeometry& g,
                  const BasicTensor<T>& gh, BasicTensor<T>& gx) {
  const T inv_count = T(1) / static_cast<T>(g.c * g.t);
  for (i64 s = 0; s < g.n; ++s)
    for (i64 fi = 0; fi < g.f; ++fi) {
      T sum_g = 0, sum_gx = 0;
      for (i64 ch = 0; ch < g.c; ++ch)
        for (i64 ti = 0; ti < g.t; ++ti) {
          const i64 k = g.index(s, ch, fi, ti);
          sum_g += gh[k];
          sum_gx += gh[k] * xhat[k];
        }
      const T is = invstd[s * g.f + fi];
      for (i64 ch = 0; ch < g.c; ++ch)
        for (i64 ti = 0; ti < g.t; ++ti) {
          const i64 k = g.index(s, ch, fi, ti);
          gx[k] += is * (gh[k] - inv_count * sum_g - xhat[k] * inv_count * sum_gx);
        }
    }
}

}  // namespace

template <class T>
Var fin(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  const FinGeometry g = geometry(xv.shape());
  BasicTensor<T> out(xv.shape());
  std::vector<T> invstd;
  fin_forward(xv, g, out, invstd);
  return tape.record(std::move(out), {x},
                     [x, g, invstd = std::move(invstd)](Tape<T>& tp, const BasicTensor<T>& y,
                                                        const BasicTensor<T>& grad) {
                       fin_backward(y, invstd, g, grad, tp.grad(x));
                     },
                     "fin");
}

template <class T>
Var arn(Tape<T>& tape, Var x, Var rho, Var gamma, Var beta) {
  const auto& xv = tape.value(x);
  const FinGeometry g = geometry(xv.shape());
  const auto& rv = tape.value(rho);
  const auto& gv = tape.value(gamma);
  const auto& bv = tape.value(beta);
  if (rv.size() != 1 || gv.size() != g.c || bv.size() != g.c) {
    throw ConfigError("arn: expected scalar rho and " + std::to_string(g.c) +
                      "-channel gamma/beta");
  }
  BasicTensor<T> xhat(xv.shape());
  std::vector<T> invstd;
  fin_forward(xv, g, xhat, invstd);
  const T r = rv[0];
  BasicTensor<T> out(xv.shape());
  for (i64 s = 0; s < g.n; ++s)
    for (i64 ch = 0; ch < g.c; ++ch) {
      const i64 plane = g.f * g.t;
      const i64 base = (s * g.c + ch) * plane;
      for (i64 i = 0; i < plane; ++i) {
        out[base + i] = (r * xv[base + i] + (T(1) - r) * xhat[base + i]) * gv[ch] + bv[ch];
      }
    }
  return tape.record(
      std::move(out), {x, rho, gamma, beta},
      [x, rho, gamma, beta, g, xhat = std::move(xhat), invstd = std::move(invstd)](
          Tape<T>& tp, const BasicTensor<T>&, const BasicTensor<T>& grad) {
        const auto& xv = tp.value(x);
        const auto& gv = tp.value(gamma);
        const T r = tp.value(rho)[0];
        const i64 plane = g.f * g.t;
        T g_rho = 0;
        BasicTensor<T> gh(xv.shape());
        for (i64 s = 0; s < g.n; ++s)
          for (i64 ch = 0; ch < g.c; ++ch) {
            const i64 base = (s * g.c + ch) * plane;
            T g_gamma = 0, g_beta = 0;
            for (i64 i = 0; i < plane; ++i) {
              const T go = grad[base + i];
              const T mix = r * xv[base + i] + (T(1) - r) * xhat[base + i];
              g_gamma += go * mix;
              g_beta += go;
              g_rho += go * gv[ch] * (xv[base + i] - xhat[base + i]);
              gh[base + i] = go * gv[ch] * (T(1) - r);
            }
            if (tp.requires_grad(gamma)) tp.grad(gamma)[ch] += g_gamma;
            if (tp.requires_grad(beta)) tp.grad(beta)[ch] += g_beta;
          }
        if (tp.requires_grad(rho)) tp.grad(rho)[0] += g_rho;
        if (tp.requires_grad(x)) {
          auto& gx = tp.grad(x);
          for (i64 i = 0; i < gx.size(); ++i) gx[i] += grad[i] * gv[(i / plane) % g.c] * r;
          fin_backward(xhat, invstd, g, gh, gx);
        }
      },
      "arn");
}

template Var fin<float>(Tape<float>&, Var);
template Var fin<double>(Tape<double>&, Var);
template Var arn<float>(Tape<float>&, Var, Var, Var, Var);
template Var arn<double>(Tape<double>&, Var, Var, Var, Var);

}  // namespace pacn
