#include "pacn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "pacn/mac_tally.hpp"

namespace pacn {
namespace {

using i64 = std::int64_t;

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

// Eight independent partial sums: vectorizes without reassociation flags and
// stays deterministic.
template <class T>
T dot(const T* a, const T* b, i64 n) {
  T acc[8] = {};
  i64 i = 0;
  for (; i + 8 <= n; i += 8)
    for (int j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  T tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

template <class T>
T total(const T* a, i64 n) {
  T acc[8] = {};
  i64 i = 0;
  for (; i + 8 <= n; i += 8)
    for (int j = 0; j < 8; ++j) acc[j] += a[i + j];
  T tail = 0;
  for (; i < n; ++i) tail += a[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  require(a == b, std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

i64 normalize_axis(i64 axis, std::size_t rank, const char* op) {
  if (axis < 0) axis += static_cast<i64>(rank);
  require(axis >= 0 && axis < static_cast<i64>(rank),
          std::string(op) + ": axis out of range for rank " + std::to_string(rank));
  return axis;
}

// Splits a shape around `axis` into (outer, len, inner).
struct AxisSplit {
  i64 outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, i64 axis) {
  AxisSplit r;
  for (i64 i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (i64 i = axis + 1; i < static_cast<i64>(s.size()); ++i) r.inner *= s[i];
  return r;
}

i64 ceil_div(i64 a, i64 b) { return (a + b - 1) / b; }

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise / shape ops

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  require_same_shape(av.shape(), bv.shape(), "add");
  BasicTensor<T> out(av.shape());
  for (i64 i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return tape.record(std::move(out), {a, b},
                     [a, b](Tape<T>& tp, const BasicTensor<T>&, const BasicTensor<T>& g) {
                       for (Var v : {a, b}) {
                         if (!tp.requires_grad(v)) continue;
                         auto& ga = tp.grad(v);
                         for (i64 i = 0; i < g.size(); ++i) ga[i] += g[i];
                       }
                     },
                     "add");
}

template <class T>
Var scale(Tape<T>& tape, Var a, T factor) {
  const auto& av = tape.value(a);
  BasicTensor<T> out(av.shape());
  for (i64 i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  return tape.record(std::move(out), {a},
                     [a, factor](Tape<T>& tp, const BasicTensor<T>&, const BasicTensor<T>& g) {
                       auto& ga = tp.grad(a);
                       for (i64 i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
                     },
                     "scale");
}

template <class T>
Var add_scalar(Tape<T>& tape, Var a, T value) {
  const auto& av = tape.value(a);
  BasicTensor<T> out(av.shape());
  for (i64 i = 0; i < out.size(); ++i) out[i] = av[i] + value;
  return tape.record(std::move(out), {a},
                     [a](Tape<T>& tp, const BasicTensor<T>&, const BasicTensor<T>& g) {
                       auto& ga = tp.grad(a);
                       for (i64 i = 0; i < g.size(); ++i) ga[i] += g[i];
                     },
                     "add_scalar");
}

template <class T>
Var relu(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  BasicTensor<T> out(xv.shape());
  for (i64 i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  return tape.record(std::move(out), {x},
                     [x](Tape<T>& tp, const BasicTensor<T>& y, const BasicTensor<T>& g) {
                       auto& gx = tp.grad(x);
                       for (i64 i = 0; i < g.size(); ++i) {
                         if (y[i] > T(0)) gx[i] += g[i];
                       }
                     },
                     "relu");
}

template <class T>
Var sum(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  T acc = 0;
  for (i64 i = 0; i < xv.size(); ++i) acc += xv[i];
  return tape.record(BasicTensor<T>({1}, std::vector<T>{acc}), {x},
                     [x](Tape<T>& tp, const BasicTensor<T>&, const BasicTensor<T>& g) {
                       auto& gx = tp.grad(x);
                       for (i64 i = 0; i < gx.size(); ++i) gx[i] += g[0];
                     },
                     "sum");
}

template <class T>
Var mean(Tape<T>& tape, Var x) {
  const auto n = static_cast<T>(tape.value(x).size());
  return scale(tape, sum(tape, x), T(1) / n);
}

template <class T>
Var dot_const(Tape<T>& tape, Var x, const BasicTensor<T>& weights) {
  const auto& xv = tape.value(x);
  require(xv.size() == weights.size(), "dot_const: size mismatch");
  T acc = 0;
  for (i64 i = 0; i < xv.size(); ++i) acc += xv[i] * weights[i];
  return tape.record(BasicTensor<T>({1}, std::vector<T>{acc}), {x},
                     [x, weights](Tape<T>& tp, const BasicTensor<T>&, const BasicTensor<T>& g) {
                       auto& gx = tp.grad(x);
                       for (i64 i = 0; i < gx.size(); ++i) gx[i] += g[0] * weights[i];
                     },
                     "dot_const");
}

template <class T>
Var concat(Tape<T>& tape, const std::vector<Var>& xs, i64 axis) {
  require(!xs.empty(), "concat: no inputs");
  const Shape& first = tape.value(xs[0]).shape();
  axis = normalize_axis(axis, first.size(), "concat");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<i64> lens;
  for (Var v : xs) {
    const Shape& s = tape.value(v).shape();
    require(s.size() == first.size(), "concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (static_cast<i64>(d) != axis) {
        require(s[d] == first[d], "concat: shape mismatch " + shape_str(s) + " vs " +
                                      shape_str(first));
      }
    }
    lens.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const AxisSplit sp = split_at(out_shape, axis);
  BasicTensor<T> out(out_shape);
  i64 offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto& xv = tape.value(xs[k]);
    const i64 chunk = lens[k] * sp.inner;
    for (i64 o = 0; o < sp.outer; ++o) {
      std::copy_n(xv.ptr() + o * chunk, chunk, out.ptr() + o * sp.len * sp.inner + offset);
    }
    offset += chunk;
  }
  return tape.record(std::move(out), xs,
                     [xs, lens, sp](Tape<T>& tp, const BasicTensor<T>&, const BasicTensor<T>& g) {
                       i64 off = 0;
                       for (std::size_t k = 0; k < xs.size(); ++k) {
                         const i64 chunk = lens[k] * sp.inner;
                         if (tp.requires_grad(xs[k])) {
                           auto& gx = tp.grad(xs[k]);
                           for (i64 o = 0; o < sp.outer; ++o) {
                             const T* src = g.ptr() + o * sp.len * sp.inner + off;
                             T* dst = gx.ptr() + o * chunk;
                             for (i64 i = 0; i < chunk; ++i) dst[i] += src[i];
                           }
                         }
                         off += chunk;
                       }
                     },
                     "concat");
}

template <class T>
Var mean_axis(Tape<T>& tape, Var x, i64 axis) {
  const auto& xv = tape.value(x);
  axis = normalize_axis(axis, xv.rank(), "mean_axis");
  const AxisSplit sp = split_at(xv.shape(), axis);
  Shape out_shape;
  for (std::size_t d = 0; d < xv.rank(); ++d) {
    if (static_cast<i64>(d) != axis) out_shape.push_back(xv.shape()[d]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  BasicTensor<T> out(out_shape);
  const T inv = T(1) / static_cast<T>(sp.len);
  for (i64 o = 0; o < sp.outer; ++o) {
    T* dst = out.ptr() + o * sp.inner;
    for (i64 l = 0; l < sp.len; ++l) {
      const T* src = xv.ptr() + (o * sp.len + l) * sp.inner;
      for (i64 i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
    for (i64 i = 0; i < sp.inner; ++i) dst[i] *= inv;
  }
  return tape.record(std::move(out), {x},
                     [x, sp, inv](Tape<T>& tp, const BasicTensor<T>&, const BasicTensor<T>& g) {
                       auto& gx = tp.grad(x);
                       for (i64 o = 0; o < sp.outer; ++o) {
                         const T* src = g.ptr() + o * sp.inner;
                         for (i64 l = 0; l < sp.len; ++l) {
                           T* dst = gx.ptr() + (o * sp.len + l) * sp.inner;
                           for (i64 i = 0; i < sp.inner; ++i) dst[i] += src[i] * inv;
                         }
                       }
                     },
                     "mean_axis");
}

template <class T>
Var transpose12(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  require(xv.rank() == 3, "transpose12: expected rank 3, got " + shape_str(xv.shape()));
  const i64 a = xv.dim(0), b = xv.dim(1), c = xv.dim(2);
  BasicTensor<T> out({a, c, b});
  for (i64 i = 0; i < a; ++i)
    for (i64 j = 0; j < b; ++j)
      for (i64 k = 0; k < c; ++k) out[(i * c + k) * b + j] = xv[(i * b + j) * c + k];
  return tape.record(std::move(out), {x},
                     [x, a, b, c](Tape<T>& tp, const BasicTensor<T>&, const BasicTensor<T>& g) {
                       auto& gx = tp.grad(x);
                       for (i64 i = 0; i < a; ++i)
                         for (i64 j = 0; j < b; ++j)
                           for (i64 k = 0; k < c; ++k)
                             gx[(i * b + j) * c + k] += g[(i * c + k) * b + j];
                     },
                     "transpose12");
}

template <class T>
Var add_freq_broadcast(Tape<T>& tape, Var map, Var rows) {
  const auto& mv = tape.value(map);
  const auto& rv = tape.value(rows);
  require(mv.rank() == 4 && rv.rank() == 3 && mv.dim(0) == rv.dim(0) && mv.dim(1) == rv.dim(1) &&
              mv.dim(3) == rv.dim(2),
          "add_freq_broadcast: incompatible shapes " + shape_str(mv.shape()) + " and " +
              shape_str(rv.shape()));
  const i64 nc = mv.dim(0) * mv.dim(1), F = mv.dim(2), Tn = mv.dim(3);
  BasicTensor<T> out = mv;
  for (i64 p = 0; p < nc; ++p)
    for (i64 f = 0; f < F; ++f)
      for (i64 t = 0; t < Tn; ++t) out[(p * F + f) * Tn + t] += rv[p * Tn + t];
  return tape.record(std::move(out), {map, rows},
                     [map, rows, nc, F, Tn](Tape<T>& tp, const BasicTensor<T>&,
                                            const BasicTensor<T>& g) {
                       if (tp.requires_grad(map)) {
                         auto& gm = tp.grad(map);
                         for (i64 i = 0; i < g.size(); ++i) gm[i] += g[i];
                       }
                       if (tp.requires_grad(rows)) {
                         auto& gr = tp.grad(rows);
                         for (i64 p = 0; p < nc; ++p)
                           for (i64 f = 0; f < F; ++f)
                             for (i64 t = 0; t < Tn; ++t) gr[p * Tn + t] += g[(p * F + f) * Tn + t];
                       }
                     },
                     "add_freq_broadcast");
}

template <class T>
Var channel_shuffle(Tape<T>& tape, Var x, i64 groups) {
  const auto& xv = tape.value(x);
  require(xv.rank() >= 2, "channel_shuffle: expected rank >= 2");
  const i64 n = xv.dim(0), c = xv.dim(1);
  require(groups > 0 && c % groups == 0,
          "channel_shuffle: " + std::to_string(c) + " channels not divisible by " +
              std::to_string(groups) + " groups");
  const i64 inner = xv.size() / (n * c);
  const i64 per = c / groups;
  // Output channel j*groups + g reads input channel g*per + j.
  std::vector<i64> src(static_cast<std::size_t>(c));
  for (i64 g = 0; g < groups; ++g)
    for (i64 j = 0; j < per; ++j) src[j * groups + g] = g * per + j;
  BasicTensor<T> out(xv.shape());
  for (i64 s = 0; s < n; ++s)
    for (i64 o = 0; o < c; ++o)
      std::copy_n(xv.ptr() + (s * c + src[o]) * inner, inner, out.ptr() + (s * c + o) * inner);
  return tape.record(std::move(out), {x},
                     [x, src, n, c, inner](Tape<T>& tp, const BasicTensor<T>&,
                                           const BasicTensor<T>& g) {
                       auto& gx = tp.grad(x);
                       for (i64 s = 0; s < n; ++s)
                         for (i64 o = 0; o < c; ++o) {
                           const T* gs = g.ptr() + (s * c + o) * inner;
                           T* gd = gx.ptr() + (s * c + src[o]) * inner;
                           for (i64 i = 0; i < inner; ++i) gd[i] += gs[i];
                         }
                     },
                     "channel_shuffle");
}

template <class T>
Var softmax(Tape<T>& tape, Var x, i64 axis) {
  const auto& xv = tape.value(x);
  axis = normalize_axis(axis, xv.rank(), "softmax");
  const AxisSplit sp = split_at(xv.shape(), axis);
  BasicTensor<T> out(xv.shape());
  for (i64 o = 0; o < sp.outer; ++o)
    for (i64 i = 0; i < sp.inner; ++i) {
      const i64 base = o * sp.len * sp.inner + i;
      T mx = xv[base];
      for (i64 l = 1; l < sp.len; ++l) mx = std::max(mx, xv[base + l * sp.inner]);
      T z = 0;
      for (i64 l = 0; l < sp.len; ++l) {
        const T e = std::exp(xv[base + l * sp.inner] - mx);
        out[base + l * sp.inner] = e;
        z += e;
      }
      for (i64 l = 0; l < sp.len; ++l) out[base + l * sp.inner] /= z;
    }
  return tape.record(std::move(out), {x},
                     [x, sp](Tape<T>& tp, const BasicTensor<T>& y, const BasicTensor<T>& g) {
                       auto& gx = tp.grad(x);
                       for (i64 o = 0; o < sp.outer; ++o)
                         for (i64 i = 0; i < sp.inner; ++i) {
                           const i64 base = o * sp.len * sp.inner + i;
                           T dot = 0;
                           for (i64 l = 0; l < sp.len; ++l)
                             dot += g[base + l * sp.inner] * y[base + l * sp.inner];
                           for (i64 l = 0; l < sp.len; ++l) {
                             const i64 k = base + l * sp.inner;
                             gx[k] += y[k] * (g[k] - dot);
                           }
                         }
                     },
                     "softmax");
}

// ---------------------------------------------------------------------------
// Layers

template <class T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias) {
  const auto& xv = tape.value(x);
  const auto& wv = tape.value(weight);
  const auto& bv = tape.value(bias);
  require(wv.rank() == 2, "linear: weight must be (out, in)");
  const i64 out_f = wv.dim(0), in_f = wv.dim(1);
  require(xv.shape().back() == in_f,
          "linear: input " + shape_str(xv.shape()) + " does not match weight " +
              shape_str(wv.shape()));
  require(bv.size() == out_f, "linear: bias length mismatch");
  const i64 rows = xv.size() / in_f;
  Shape out_shape = xv.shape();
  out_shape.back() = out_f;
  BasicTensor<T> out(out_shape);
  for (i64 r = 0; r < rows; ++r) {
    const T* xr = xv.ptr() + r * in_f;
    for (i64 o = 0; o < out_f; ++o) {
      const T* wr = wv.ptr() + o * in_f;
      T acc = bv[o];
      for (i64 i = 0; i < in_f; ++i) acc += wr[i] * xr[i];
      out[r * out_f + o] = acc;
    }
    tally_macs(out_f * in_f);
  }
  return tape.record(
      std::move(out), {x, weight, bias},
      [x, weight, bias, rows, in_f, out_f](Tape<T>& tp, const BasicTensor<T>&,
                                           const BasicTensor<T>& g) {
        const auto& xv = tp.value(x);
        const auto& wv = tp.value(weight);
        if (tp.requires_grad(x)) {
          auto& gx = tp.grad(x);
          for (i64 r = 0; r < rows; ++r)
            for (i64 o = 0; o < out_f; ++o) {
              const T go = g[r * out_f + o];
              const T* wr = wv.ptr() + o * in_f;
              T* gxr = gx.ptr() + r * in_f;
              for (i64 i = 0; i < in_f; ++i) gxr[i] += go * wr[i];
            }
        }
        if (tp.requires_grad(weight)) {
          auto& gw = tp.grad(weight);
          for (i64 r = 0; r < rows; ++r)
            for (i64 o = 0; o < out_f; ++o) {
              const T go = g[r * out_f + o];
              const T* xr = xv.ptr() + r * in_f;
              T* gwr = gw.ptr() + o * in_f;
              for (i64 i = 0; i < in_f; ++i) gwr[i] += go * xr[i];
            }
        }
        if (tp.requires_grad(bias)) {
          auto& gb = tp.grad(bias);
          for (i64 r = 0; r < rows; ++r)
            for (i64 o = 0; o < out_f; ++o) gb[o] += g[r * out_f + o];
        }
      },
      "linear");
}

template <class T>
Var pointwise_conv(Tape<T>& tape, Var x, Var weight, Var bias) {
  const auto& xv = tape.value(x);
  const auto& wv = tape.value(weight);
  const auto& bv = tape.value(bias);
  require(xv.rank() == 4, "pointwise_conv: input must be (n,c,f,t), got " + shape_str(xv.shape()));
  require(wv.rank() == 2 && wv.dim(1) == xv.dim(1),
          "pointwise_conv: weight " + shape_str(wv.shape()) + " does not map " +
              std::to_string(xv.dim(1)) + " input channels");
  const i64 n = xv.dim(0), ci = xv.dim(1), co = wv.dim(0);
  require(bv.size() == co, "pointwise_conv: bias length mismatch");
  const i64 S = xv.dim(2) * xv.dim(3);
  BasicTensor<T> out({n, co, xv.dim(2), xv.dim(3)});
  for (i64 s = 0; s < n; ++s)
    for (i64 o = 0; o < co; ++o) {
      T* y = out.ptr() + (s * co + o) * S;
      std::fill_n(y, S, bv[o]);
      for (i64 i = 0; i < ci; ++i) {
        const T w = wv[o * ci + i];
        const T* xs = xv.ptr() + (s * ci + i) * S;
        for (i64 p = 0; p < S; ++p) y[p] += w * xs[p];
        tally_macs(S);
      }
    }
  return tape.record(
      std::move(out), {x, weight, bias},
      [x, weight, bias, n, ci, co, S](Tape<T>& tp, const BasicTensor<T>&,
                                      const BasicTensor<T>& g) {
        const auto& xv = tp.value(x);
        const auto& wv = tp.value(weight);
        const bool gx_on = tp.requires_grad(x);
        const bool gw_on = tp.requires_grad(weight);
        const bool gb_on = tp.requires_grad(bias);
        for (i64 s = 0; s < n; ++s)
          for (i64 o = 0; o < co; ++o) {
            const T* gy = g.ptr() + (s * co + o) * S;
            if (gb_on) {
              tp.grad(bias)[o] += total(gy, S);
            }
            for (i64 i = 0; i < ci; ++i) {
              const T* xs = xv.ptr() + (s * ci + i) * S;
              if (gw_on) {
                tp.grad(weight)[o * ci + i] += dot(gy, xs, S);
              }
              if (gx_on) {
                const T w = wv[o * ci + i];
                T* gxs = tp.grad(x).ptr() + (s * ci + i) * S;
                for (i64 p = 0; p < S; ++p) gxs[p] += w * gy[p];
              }
            }
          }
      },
      "pointwise_conv");
}

template <class T>
Var depthwise_conv(Tape<T>& tape, Var x, Var weight, Var bias, Stride2 stride) {
  const auto& xv = tape.value(x);
  const auto& wv = tape.value(weight);
  const auto& bv = tape.value(bias);
  require(xv.rank() == 4, "depthwise_conv: input must be (n,c,f,t), got " + shape_str(xv.shape()));
  const i64 n = xv.dim(0), c = xv.dim(1), F = xv.dim(2), Tn = xv.dim(3);
  require(wv.rank() == 3 && wv.dim(0) == c && wv.dim(1) == wv.dim(2),
          "depthwise_conv: weight " + shape_str(wv.shape()) + " does not match " +
              std::to_string(c) + " channels");
  require(bv.size() == c, "depthwise_conv: bias length mismatch");
  require(stride.f >= 1 && stride.t >= 1, "depthwise_conv: stride must be positive");
  const i64 k = wv.dim(1);
  require(F >= k && Tn >= k, "depthwise_conv: spatial dims smaller than kernel");
  const i64 Fo = ceil_div(F, stride.f), To = ceil_div(Tn, stride.t);
  const i64 pad_f_total = std::max<i64>((Fo - 1) * stride.f + k - F, 0);
  const i64 pad_t_total = std::max<i64>((To - 1) * stride.t + k - Tn, 0);
  const i64 pad_f = pad_f_total / 2, pad_t = pad_t_total / 2;
  const i64 Fp = F + pad_f_total, Tp = Tn + pad_t_total;

  BasicTensor<T> out({n, c, Fo, To});
  std::vector<T> plane(static_cast<std::size_t>(Fp * Tp));
  for (i64 s = 0; s < n; ++s)
    for (i64 ch = 0; ch < c; ++ch) {
      std::fill(plane.begin(), plane.end(), T(0));
      const T* xs = xv.ptr() + (s * c + ch) * F * Tn;
      for (i64 f = 0; f < F; ++f) std::copy_n(xs + f * Tn, Tn, plane.data() + (f + pad_f) * Tp + pad_t);
      const T* w = wv.ptr() + ch * k * k;
      T* y = out.ptr() + (s * c + ch) * Fo * To;
      for (i64 fo = 0; fo < Fo; ++fo) {
        T* yr = y + fo * To;
        std::fill_n(yr, To, bv[ch]);
        for (i64 i = 0; i < k; ++i)
          for (i64 j = 0; j < k; ++j) {
            const T wij = w[i * k + j];
            const T* src = plane.data() + (fo * stride.f + i) * Tp + j;
            if (stride.t == 1) {
              for (i64 to = 0; to < To; ++to) yr[to] += wij * src[to];
            } else {
              for (i64 to = 0; to < To; ++to) yr[to] += wij * src[to * stride.t];
            }
          }
        tally_macs(To * k * k);
      }
    }

  return tape.record(
      std::move(out), {x, weight, bias},
      [=](Tape<T>& tp, const BasicTensor<T>&, const BasicTensor<T>& g) {
        const auto& xv = tp.value(x);
        const auto& wv = tp.value(weight);
        const bool gx_on = tp.requires_grad(x);
        const bool gw_on = tp.requires_grad(weight);
        const bool gb_on = tp.requires_grad(bias);
        std::vector<T> plane(static_cast<std::size_t>(Fp * Tp));
        std::vector<T> dplane(static_cast<std::size_t>(Fp * Tp));
        for (i64 s = 0; s < n; ++s)
          for (i64 ch = 0; ch < c; ++ch) {
            const T* xs = xv.ptr() + (s * c + ch) * F * Tn;
            const T* gy = g.ptr() + (s * c + ch) * Fo * To;
            if (gw_on) {
              std::fill(plane.begin(), plane.end(), T(0));
              for (i64 f = 0; f < F; ++f)
                std::copy_n(xs + f * Tn, Tn, plane.data() + (f + pad_f) * Tp + pad_t);
            }
            if (gx_on) std::fill(dplane.begin(), dplane.end(), T(0));
            const T* w = wv.ptr() + ch * k * k;
            T gb = 0;
            std::vector<T> gw(static_cast<std::size_t>(k * k), T(0));
            const i64 st = stride.t;
            for (i64 fo = 0; fo < Fo; ++fo) {
              const T* gyr = gy + fo * To;
              gb += total(gyr, To);
              for (i64 i = 0; i < k; ++i)
                for (i64 j = 0; j < k; ++j) {
                  const i64 base = (fo * stride.f + i) * Tp + j;
                  if (gw_on) {
                    if (st == 1) {
                      gw[i * k + j] += dot(gyr, plane.data() + base, To);
                    } else {
                      T acc = 0;
                      for (i64 to = 0; to < To; ++to) acc += gyr[to] * plane[base + to * st];
                      gw[i * k + j] += acc;
                    }
                  }
                  if (gx_on) {
                    const T wij = w[i * k + j];
                    T* dst = dplane.data() + base;
                    if (st == 1) {
                      for (i64 to = 0; to < To; ++to) dst[to] += gyr[to] * wij;
                    } else {
                      for (i64 to = 0; to < To; ++to) dst[to * st] += gyr[to] * wij;
                    }
                  }
                }
            }
            if (gb_on) tp.grad(bias)[ch] += gb;
            if (gw_on) {
              auto& gwt = tp.grad(weight);
              for (i64 q = 0; q < k * k; ++q) gwt[ch * k * k + q] += gw[q];
            }
            if (gx_on) {
              T* gxs = tp.grad(x).ptr() + (s * c + ch) * F * Tn;
              for (i64 f = 0; f < F; ++f)
                for (i64 t = 0; t < Tn; ++t) gxs[f * Tn + t] += dplane[(f + pad_f) * Tp + t + pad_t];
            }
          }
      },
      "depthwise_conv");
}

template <class T>
Var bsconv(Tape<T>& tape, Var x, Var pw_weight, Var pw_bias, Var dw_weight, Var dw_bias,
           Stride2 stride) {
  const auto& pw = tape.value(pw_weight);
  const auto& dw = tape.value(dw_weight);
  require(pw.rank() == 2 && dw.rank() == 3 && pw.dim(0) == dw.dim(0),
          "bsconv: point-wise output channels " + std::to_string(pw.rank() == 2 ? pw.dim(0) : -1) +
              " do not match depth-wise channels " + std::to_string(dw.rank() >= 1 ? dw.dim(0) : -1));
  Var h = pointwise_conv(tape, x, pw_weight, pw_bias);
  return depthwise_conv(tape, h, dw_weight, dw_bias, stride);
}

template <class T>
Var maxpool2d(Tape<T>& tape, Var x, Stride2 window, Stride2 stride) {
  const auto& xv = tape.value(x);
  require(xv.rank() == 4, "maxpool2d: input must be (n,c,f,t)");
  const i64 nc = xv.dim(0) * xv.dim(1), F = xv.dim(2), Tn = xv.dim(3);
  require(window.f >= 1 && window.t >= 1 && F >= window.f && Tn >= window.t,
          "maxpool2d: window larger than input " + shape_str(xv.shape()));
  const i64 Fo = (F - window.f) / stride.f + 1;
  const i64 To = (Tn - window.t) / stride.t + 1;
  BasicTensor<T> out({xv.dim(0), xv.dim(1), Fo, To});
  std::vector<std::int32_t> arg(static_cast<std::size_t>(out.size()));
  for (i64 p = 0; p < nc; ++p) {
    const T* xs = xv.ptr() + p * F * Tn;
    for (i64 fo = 0; fo < Fo; ++fo)
      for (i64 to = 0; to < To; ++to) {
        i64 best = (fo * stride.f) * Tn + to * stride.t;
        for (i64 i = 0; i < window.f; ++i)
          for (i64 j = 0; j < window.t; ++j) {
            const i64 idx = (fo * stride.f + i) * Tn + to * stride.t + j;
            if (xs[idx] > xs[best]) best = idx;
          }
        const i64 o = (p * Fo + fo) * To + to;
        out[o] = xs[best];
        arg[o] = static_cast<std::int32_t>(best);
      }
  }
  const i64 plane_out = Fo * To, plane_in = F * Tn;
  return tape.record(std::move(out), {x},
                     [x, arg = std::move(arg), plane_out, plane_in](
                         Tape<T>& tp, const BasicTensor<T>&, const BasicTensor<T>& g) {
                       auto& gx = tp.grad(x);
                       for (i64 o = 0; o < g.size(); ++o) {
                         gx[(o / plane_out) * plane_in + arg[o]] += g[o];
                       }
                     },
                     "maxpool2d");
}

template <class T>
Var global_avg_pool(Tape<T>& tape, Var x) {
  const auto& xv = tape.value(x);
  require(xv.rank() == 4, "global_avg_pool: input must be (n,c,f,t)");
  Var flat = tape.record(xv.reshaped({xv.dim(0), xv.dim(1), xv.dim(2) * xv.dim(3)}), {x},
                         [x](Tape<T>& tp, const BasicTensor<T>&, const BasicTensor<T>& g) {
                           auto& gx = tp.grad(x);
                           for (i64 i = 0; i < g.size(); ++i) gx[i] += g[i];
                         },
                         "reshape");
  return mean_axis(tape, flat, 2);
}

// ---------------------------------------------------------------------------
// Normalizations

template <class T>
Var batch_norm(Tape<T>& tape, Var x, Var gamma, Var beta, BatchNormStats<T>& stats,
               bool training) {
  const auto& xv = tape.value(x);
  require(xv.rank() >= 2, "batch_norm: expected (n,c,...)");
  const i64 n = xv.dim(0), c = xv.dim(1);
  const i64 S = xv.size() / (n * c);
  const auto& gv = tape.value(gamma);
  const auto& bv = tape.value(beta);
  require(gv.size() == c && bv.size() == c && stats.running_mean.size() == c &&
              stats.running_var.size() == c,
          "batch_norm: parameter length does not match " + std::to_string(c) + " channels");
  const T eps = static_cast<T>(kNormEps);
  BasicTensor<T> out(xv.shape());
  std::vector<T> invstd(static_cast<std::size_t>(c));
  std::vector<T> mu(static_cast<std::size_t>(c));
  const i64 M = n * S;
  for (i64 ch = 0; ch < c; ++ch) {
    T m, var;
    if (training) {
      T acc = 0;
      for (i64 s = 0; s < n; ++s) {
        const T* p = xv.ptr() + (s * c + ch) * S;
        for (i64 i = 0; i < S; ++i) acc += p[i];
      }
      m = acc / static_cast<T>(M);
      T sq = 0;
      for (i64 s = 0; s < n; ++s) {
        const T* p = xv.ptr() + (s * c + ch) * S;
        for (i64 i = 0; i < S; ++i) sq += (p[i] - m) * (p[i] - m);
      }
      var = sq / static_cast<T>(M);
      const T mom = stats.momentum;
      const T unbiased = M > 1 ? var * static_cast<T>(M) / static_cast<T>(M - 1) : var;
      stats.running_mean[ch] = (T(1) - mom) * stats.running_mean[ch] + mom * m;
      stats.running_var[ch] = (T(1) - mom) * stats.running_var[ch] + mom * unbiased;
    } else {
      m = stats.running_mean[ch];
      var = stats.running_var[ch];
    }
    mu[ch] = m;
    invstd[ch] = T(1) / std::sqrt(var + eps);
    const T a = gv[ch] * invstd[ch];
    const T b = bv[ch] - a * m;
    for (i64 s = 0; s < n; ++s) {
      const T* p = xv.ptr() + (s * c + ch) * S;
      T* y = out.ptr() + (s * c + ch) * S;
      for (i64 i = 0; i < S; ++i) y[i] = a * p[i] + b;
    }
  }
  return tape.record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, n, c, S, M, training, mu = std::move(mu), invstd = std::move(invstd)](
          Tape<T>& tp, const BasicTensor<T>&, const BasicTensor<T>& g) {
        const auto& xv = tp.value(x);
        const auto& gv = tp.value(gamma);
        for (i64 ch = 0; ch < c; ++ch) {
          T sum_g = 0, sum_gx = 0;
          for (i64 s = 0; s < n; ++s) {
            const T* p = xv.ptr() + (s * c + ch) * S;
            const T* gy = g.ptr() + (s * c + ch) * S;
            for (i64 i = 0; i < S; ++i) {
              sum_g += gy[i];
              sum_gx += gy[i] * (p[i] - mu[ch]) * invstd[ch];
            }
          }
          if (tp.requires_grad(gamma)) tp.grad(gamma)[ch] += sum_gx;
          if (tp.requires_grad(beta)) tp.grad(beta)[ch] += sum_g;
          if (!tp.requires_grad(x)) continue;
          auto& gx = tp.grad(x);
          const T a = gv[ch] * invstd[ch];
          for (i64 s = 0; s < n; ++s) {
            const T* p = xv.ptr() + (s * c + ch) * S;
            const T* gy = g.ptr() + (s * c + ch) * S;
            T* gxs = gx.ptr() + (s * c + ch) * S;
            if (training) {
              const T invM = T(1) / static_cast<T>(M);
              for (i64 i = 0; i < S; ++i) {
                const T xhat = (p[i] - mu[ch]) * invstd[ch];
                gxs[i] += a * (gy[i] - invM * sum_g - xhat * invM * sum_gx);
              }
            } else {
              for (i64 i = 0; i < S; ++i) gxs[i] += a * gy[i];
            }
          }
        }
      },
      "batch_norm");
}

template <class T>
Var layer_norm(Tape<T>& tape, Var x, Var gamma, Var beta) {
  const auto& xv = tape.value(x);
  const i64 D = xv.shape().back();
  const auto& gv = tape.value(gamma);
  const auto& bv = tape.value(beta);
  require(gv.size() == D && bv.size() == D,
          "layer_norm: parameter length does not match feature size " + std::to_string(D));
  const i64 rows = xv.size() / D;
  const T eps = static_cast<T>(kNormEps);
  BasicTensor<T> out(xv.shape());
  std::vector<T> invstd(static_cast<std::size_t>(rows));
  BasicTensor<T> xhat(xv.shape());
  for (i64 r = 0; r < rows; ++r) {
    const T* p = xv.ptr() + r * D;
    T m = 0;
    for (i64 i = 0; i < D; ++i) m += p[i];
    m /= static_cast<T>(D);
    T var = 0;
    for (i64 i = 0; i < D; ++i) var += (p[i] - m) * (p[i] - m);
    var /= static_cast<T>(D);
    invstd[r] = T(1) / std::sqrt(var + eps);
    for (i64 i = 0; i < D; ++i) {
      const T h = (p[i] - m) * invstd[r];
      xhat[r * D + i] = h;
      out[r * D + i] = gv[i] * h + bv[i];
    }
  }
  return tape.record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, rows, D, invstd = std::move(invstd), xhat = std::move(xhat)](
          Tape<T>& tp, const BasicTensor<T>&, const BasicTensor<T>& g) {
        const auto& gv = tp.value(gamma);
        const bool gx_on = tp.requires_grad(x);
        std::vector<T> dh(static_cast<std::size_t>(D));
        for (i64 r = 0; r < rows; ++r) {
          T sum_dh = 0, sum_dhx = 0;
          for (i64 i = 0; i < D; ++i) {
            const T go = g[r * D + i];
            if (tp.requires_grad(gamma)) tp.grad(gamma)[i] += go * xhat[r * D + i];
            if (tp.requires_grad(beta)) tp.grad(beta)[i] += go;
            dh[i] = go * gv[i];
            sum_dh += dh[i];
            sum_dhx += dh[i] * xhat[r * D + i];
          }
          if (!gx_on) continue;
          auto& gx = tp.grad(x);
          const T invD = T(1) / static_cast<T>(D);
          for (i64 i = 0; i < D; ++i) {
            gx[r * D + i] += invstd[r] * (dh[i] - invD * sum_dh - xhat[r * D + i] * invD * sum_dhx);
          }
        }
      },
      "layer_norm");
}

template <class T>
Var grn(Tape<T>& tape, Var x, Var gamma, Var beta) {
  const auto& xv = tape.value(x);
  require(xv.rank() == 4, "grn: input must be (n,c,f,t)");
  const i64 n = xv.dim(0), c = xv.dim(1), S = xv.dim(2) * xv.dim(3);
  const auto& gv = tape.value(gamma);
  const auto& bv = tape.value(beta);
  require(gv.size() == c && bv.size() == c,
          "grn: parameter length does not match " + std::to_string(c) + " channels");
  const T eps = static_cast<T>(kNormEps);
  BasicTensor<T> out(xv.shape());
  // Per (n,c): G = ||x||_2 over (f,t), N = G / (mean_c G + eps).
  std::vector<T> G(static_cast<std::size_t>(n * c)), Nrm(static_cast<std::size_t>(n * c));
  std::vector<T> denom(static_cast<std::size_t>(n));
  for (i64 s = 0; s < n; ++s) {
    T mean_g = 0;
    for (i64 ch = 0; ch < c; ++ch) {
      const T* p = xv.ptr() + (s * c + ch) * S;
      T sq = 0;
      for (i64 i = 0; i < S; ++i) sq += p[i] * p[i];
      G[s * c + ch] = std::sqrt(sq);
      mean_g += G[s * c + ch];
    }
    mean_g /= static_cast<T>(c);
    denom[s] = mean_g + eps;
    for (i64 ch = 0; ch < c; ++ch) {
      Nrm[s * c + ch] = G[s * c + ch] / denom[s];
      const T a = gv[ch] * Nrm[s * c + ch] + T(1);
      const T* p = xv.ptr() + (s * c + ch) * S;
      T* y = out.ptr() + (s * c + ch) * S;
      for (i64 i = 0; i < S; ++i) y[i] = a * p[i] + bv[ch];
    }
  }
  return tape.record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, n, c, S, G = std::move(G), Nrm = std::move(Nrm),
       denom = std::move(denom)](Tape<T>& tp, const BasicTensor<T>&, const BasicTensor<T>& g) {
        const auto& xv = tp.value(x);
        const auto& gv = tp.value(gamma);
        std::vector<T> dN(static_cast<std::size_t>(c));
        for (i64 s = 0; s < n; ++s) {
          for (i64 ch = 0; ch < c; ++ch) {
            const T* p = xv.ptr() + (s * c + ch) * S;
            const T* gy = g.ptr() + (s * c + ch) * S;
            T sgx = 0, sg = 0;
            for (i64 i = 0; i < S; ++i) {
              sgx += gy[i] * p[i];
              sg += gy[i];
            }
            if (tp.requires_grad(gamma)) tp.grad(gamma)[ch] += sgx * Nrm[s * c + ch];
            if (tp.requires_grad(beta)) tp.grad(beta)[ch] += sg;
            dN[ch] = sgx * gv[ch];
          }
          if (!tp.requires_grad(x)) continue;
          // dL/dG_j = dN_j / D - (1/C) * sum_c dN_c G_c / D^2
          T cross = 0;
          for (i64 ch = 0; ch < c; ++ch) cross += dN[ch] * G[s * c + ch];
          cross /= static_cast<T>(c) * denom[s] * denom[s];
          auto& gx = tp.grad(x);
          for (i64 ch = 0; ch < c; ++ch) {
            const T dG = dN[ch] / denom[s] - cross;
            const T gnorm = G[s * c + ch];
            const T a = gv[ch] * Nrm[s * c + ch] + T(1);
            const T* p = xv.ptr() + (s * c + ch) * S;
            const T* gy = g.ptr() + (s * c + ch) * S;
            T* gxs = gx.ptr() + (s * c + ch) * S;
            const T via_g = gnorm > T(0) ? dG / gnorm : T(0);
            for (i64 i = 0; i < S; ++i) gxs[i] += a * gy[i] + via_g * p[i];
          }
        }
      },
      "grn");
}

// ---------------------------------------------------------------------------
// Attention

namespace {

// y (L, out) = x (L, in) W^T + b
template <class T>
void project(const T* x, const T* w, const T* b, i64 L, i64 in, i64 out, T* y) {
  for (i64 l = 0; l < L; ++l) {
    for (i64 o = 0; o < out; ++o) {
      T acc = b[o];
      const T* wr = w + o * in;
      const T* xr = x + l * in;
      for (i64 i = 0; i < in; ++i) acc += wr[i] * xr[i];
      y[l * out + o] = acc;
    }
    tally_macs(out * in);
  }
}

// Accumulates the adjoints of project(): gx += gy W, gw += gy^T x, gb += sum gy.
template <class T>
void project_backward(const T* x, const T* w, const T* gy, i64 L, i64 in, i64 out, T* gx, T* gw,
                      T* gb) {
  for (i64 l = 0; l < L; ++l)
    for (i64 o = 0; o < out; ++o) {
      const T go = gy[l * out + o];
      if (gb) gb[o] += go;
      for (i64 i = 0; i < in; ++i) {
        if (gx) gx[l * in + i] += go * w[o * in + i];
        if (gw) gw[o * in + i] += go * x[l * in + i];
      }
    }
}

// Per-head scaled dot-product probabilities P (heads, L, L) for one sample.
template <class T>
void head_probs(const T* q, const T* k, i64 L, i64 d, i64 heads, T* P) {
  const i64 dh = d / heads;
  const T inv = T(1) / std::sqrt(static_cast<T>(dh));
  for (i64 h = 0; h < heads; ++h) {
    for (i64 l = 0; l < L; ++l) {
      T* row = P + (h * L + l) * L;
      T mx = -std::numeric_limits<T>::infinity();
      for (i64 m = 0; m < L; ++m) {
        T acc = 0;
        for (i64 e = 0; e < dh; ++e) acc += q[l * d + h * dh + e] * k[m * d + h * dh + e];
        row[m] = acc * inv;
        mx = std::max(mx, row[m]);
      }
      tally_macs(L * dh);
      T z = 0;
      for (i64 m = 0; m < L; ++m) {
        row[m] = std::exp(row[m] - mx);
        z += row[m];
      }
      for (i64 m = 0; m < L; ++m) row[m] /= z;
    }
  }
}

}  // namespace

template <class T>
BasicTensor<T> attention_probs(const BasicTensor<T>& x, const BasicTensor<T>& wq,
                               const BasicTensor<T>& bq, const BasicTensor<T>& wk,
                               const BasicTensor<T>& bk, i64 heads) {
  require(x.rank() == 3, "attention_probs: expected (n, L, d)");
  const i64 n = x.dim(0), L = x.dim(1), d = x.dim(2);
  require(heads > 0 && d % heads == 0, "attention_probs: d not divisible by heads");
  BasicTensor<T> P({n, heads, L, L});
  std::vector<T> q(static_cast<std::size_t>(L * d)), k(static_cast<std::size_t>(L * d));
  for (i64 s = 0; s < n; ++s) {
    project(x.ptr() + s * L * d, wq.ptr(), bq.ptr(), L, d, d, q.data());
    project(x.ptr() + s * L * d, wk.ptr(), bk.ptr(), L, d, d, k.data());
    head_probs(q.data(), k.data(), L, d, heads, P.ptr() + s * heads * L * L);
  }
  return P;
}

template <class T>
Var mha(Tape<T>& tape, Var x, const MhaWeights& w, i64 heads) {
  const auto& xv = tape.value(x);
  require(xv.rank() == 2 || xv.rank() == 3, "mha: input must be (L, d) or (n, L, d)");
  const bool batched = xv.rank() == 3;
  const i64 n = batched ? xv.dim(0) : 1;
  const i64 L = xv.dim(xv.rank() - 2), d = xv.dim(xv.rank() - 1);
  require(heads > 0 && d % heads == 0,
          "mha: embedding size " + std::to_string(d) + " not divisible by " +
              std::to_string(heads) + " heads");
  for (Var wv : {w.wq, w.wk, w.wv, w.wo}) {
    require(tape.value(wv).shape() == Shape{d, d}, "mha: projection weights must be (d, d)");
  }
  for (Var bv : {w.bq, w.bk, w.bv, w.bo}) {
    require(tape.value(bv).size() == d, "mha: projection bias must have length d");
  }
  const i64 dh = d / heads;
  const i64 Ld = L * d;
  auto Q = std::make_shared<std::vector<T>>(n * Ld);
  auto K = std::make_shared<std::vector<T>>(n * Ld);
  auto V = std::make_shared<std::vector<T>>(n * Ld);
  auto O = std::make_shared<std::vector<T>>(n * Ld);
  auto P = std::make_shared<std::vector<T>>(n * heads * L * L);
  BasicTensor<T> out(xv.shape());
  const T* wq = tape.value(w.wq).ptr();
  const T* wk = tape.value(w.wk).ptr();
  const T* wv = tape.value(w.wv).ptr();
  const T* wo = tape.value(w.wo).ptr();
  for (i64 s = 0; s < n; ++s) {
    const T* xs = xv.ptr() + s * Ld;
    T* q = Q->data() + s * Ld;
    T* k = K->data() + s * Ld;
    T* v = V->data() + s * Ld;
    T* o = O->data() + s * Ld;
    T* p = P->data() + s * heads * L * L;
    project(xs, wq, tape.value(w.bq).ptr(), L, d, d, q);
    project(xs, wk, tape.value(w.bk).ptr(), L, d, d, k);
    project(xs, wv, tape.value(w.bv).ptr(), L, d, d, v);
    head_probs(q, k, L, d, heads, p);
    for (i64 h = 0; h < heads; ++h)
      for (i64 l = 0; l < L; ++l) {
        const T* prow = p + (h * L + l) * L;
        for (i64 e = 0; e < dh; ++e) {
          T acc = 0;
          for (i64 m = 0; m < L; ++m) acc += prow[m] * v[m * d + h * dh + e];
          o[l * d + h * dh + e] = acc;
        }
        tally_macs(L * dh);
      }
    project(o, wo, tape.value(w.bo).ptr(), L, d, d, out.ptr() + s * Ld);
  }

  return tape.record(
      std::move(out), {x, w.wq, w.bq, w.wk, w.bk, w.wv, w.bv, w.wo, w.bo},
      [=](Tape<T>& tp, const BasicTensor<T>&, const BasicTensor<T>& g) {
        auto grad_ptr = [&tp](Var v) -> T* { return tp.requires_grad(v) ? tp.grad(v).ptr() : nullptr; };
        const auto& xv = tp.value(x);
        T* gx = grad_ptr(x);
        T* gwq = grad_ptr(w.wq);
        T* gbq = grad_ptr(w.bq);
        T* gwk = grad_ptr(w.wk);
        T* gbk = grad_ptr(w.bk);
        T* gwv = grad_ptr(w.wv);
        T* gbv = grad_ptr(w.bv);
        T* gwo = grad_ptr(w.wo);
        T* gbo = grad_ptr(w.bo);
        const T* wq = tp.value(w.wq).ptr();
        const T* wk = tp.value(w.wk).ptr();
        const T* wv = tp.value(w.wv).ptr();
        const T* wo = tp.value(w.wo).ptr();
        const T inv = T(1) / std::sqrt(static_cast<T>(dh));
        std::vector<T> dO(Ld), dQ(Ld), dK(Ld), dV(Ld), dP(L), dS(L);
        for (i64 s = 0; s < n; ++s) {
          const T* xs = xv.ptr() + s * Ld;
          const T* q = Q->data() + s * Ld;
          const T* k = K->data() + s * Ld;
          const T* v = V->data() + s * Ld;
          const T* o = O->data() + s * Ld;
          const T* p = P->data() + s * heads * L * L;
          const T* gy = g.ptr() + s * Ld;
          std::fill(dO.begin(), dO.end(), T(0));
          std::fill(dQ.begin(), dQ.end(), T(0));
          std::fill(dK.begin(), dK.end(), T(0));
          std::fill(dV.begin(), dV.end(), T(0));
          project_backward(o, wo, gy, L, d, d, dO.data(), gwo, gbo);
          for (i64 h = 0; h < heads; ++h)
            for (i64 l = 0; l < L; ++l) {
              const T* prow = p + (h * L + l) * L;
              T dot = 0;
              for (i64 m = 0; m < L; ++m) {
                T acc = 0;
                for (i64 e = 0; e < dh; ++e) {
                  acc += dO[l * d + h * dh + e] * v[m * d + h * dh + e];
                  dV[m * d + h * dh + e] += prow[m] * dO[l * d + h * dh + e];
                }
                dP[m] = acc;
                dot += acc * prow[m];
              }
              for (i64 m = 0; m < L; ++m) dS[m] = prow[m] * (dP[m] - dot) * inv;
              for (i64 m = 0; m < L; ++m)
                for (i64 e = 0; e < dh; ++e) {
                  dQ[l * d + h * dh + e] += dS[m] * k[m * d + h * dh + e];
                  dK[m * d + h * dh + e] += dS[m] * q[l * d + h * dh + e];
                }
            }
          T* gxs = gx ? gx + s * Ld : nullptr;
          project_backward(xs, wq, dQ.data(), L, d, d, gxs, gwq, gbq);
          project_backward(xs, wk, dK.data(), L, d, d, gxs, gwk, gbk);
          project_backward(xs, wv, dV.data(), L, d, d, gxs, gwv, gbv);
        }
      },
      "mha");
}

// ---------------------------------------------------------------------------
// Losses

namespace {

template <class T>
void log_softmax_row(const T* z, i64 k, T scale, T* out) {
  T mx = z[0] * scale;
  for (i64 j = 1; j < k; ++j) mx = std::max(mx, z[j] * scale);
  T acc = 0;
  for (i64 j = 0; j < k; ++j) acc += std::exp(z[j] * scale - mx);
  const T lse = mx + std::log(acc);
  for (i64 j = 0; j < k; ++j) out[j] = z[j] * scale - lse;
}

}  // namespace

template <class T>
Var soft_cross_entropy(Tape<T>& tape, Var logits, const BasicTensor<T>& targets) {
  const auto& zv = tape.value(logits);
  require(zv.rank() == 2 && targets.shape() == zv.shape(),
          "soft_cross_entropy: logits " + shape_str(zv.shape()) + " vs targets " +
              shape_str(targets.shape()));
  const i64 n = zv.dim(0), k = zv.dim(1);
  std::vector<T> logp(static_cast<std::size_t>(k));
  T loss = 0;
  for (i64 r = 0; r < n; ++r) {
    log_softmax_row(zv.ptr() + r * k, k, T(1), logp.data());
    for (i64 j = 0; j < k; ++j) loss -= targets[r * k + j] * logp[j];
  }
  loss /= static_cast<T>(n);
  return tape.record(BasicTensor<T>({1}, std::vector<T>{loss}), {logits},
                     [logits, targets, n, k](Tape<T>& tp, const BasicTensor<T>&,
                                             const BasicTensor<T>& g) {
                       const auto& zv = tp.value(logits);
                       auto& gz = tp.grad(logits);
                       std::vector<T> logp(static_cast<std::size_t>(k));
                       const T coef = g[0] / static_cast<T>(n);
                       for (i64 r = 0; r < n; ++r) {
                         log_softmax_row(zv.ptr() + r * k, k, T(1), logp.data());
                         T mass = 0;
                         for (i64 j = 0; j < k; ++j) mass += targets[r * k + j];
                         for (i64 j = 0; j < k; ++j) {
                           gz[r * k + j] += coef * (std::exp(logp[j]) * mass - targets[r * k + j]);
                         }
                       }
                     },
                     "soft_cross_entropy");
}

template <class T>
Var kl_div_temperature(Tape<T>& tape, Var student_logits, const BasicTensor<T>& teacher_logits,
                       T temperature) {
  if (!(temperature > T(0))) throw UsageError("kl_div_temperature: temperature must be > 0");
  const auto& zv = tape.value(student_logits);
  require(zv.rank() == 2 && teacher_logits.shape() == zv.shape(),
          "kl_div_temperature: student " + shape_str(zv.shape()) + " vs teacher " +
              shape_str(teacher_logits.shape()));
  const i64 n = zv.dim(0), k = zv.dim(1);
  const T inv_t = T(1) / temperature;
  std::vector<T> ls(static_cast<std::size_t>(k)), lt(static_cast<std::size_t>(k));
  T loss = 0;
  for (i64 r = 0; r < n; ++r) {
    log_softmax_row(zv.ptr() + r * k, k, inv_t, ls.data());
    log_softmax_row(teacher_logits.ptr() + r * k, k, inv_t, lt.data());
    for (i64 j = 0; j < k; ++j) loss += std::exp(lt[j]) * (lt[j] - ls[j]);
  }
  loss /= static_cast<T>(n);
  return tape.record(BasicTensor<T>({1}, std::vector<T>{loss}), {student_logits},
                     [student_logits, teacher_logits, n, k, inv_t](
                         Tape<T>& tp, const BasicTensor<T>&, const BasicTensor<T>& g) {
                       const auto& zv = tp.value(student_logits);
                       auto& gz = tp.grad(student_logits);
                       std::vector<T> ls(static_cast<std::size_t>(k)), lt(static_cast<std::size_t>(k));
                       const T coef = g[0] * inv_t / static_cast<T>(n);
                       for (i64 r = 0; r < n; ++r) {
                         log_softmax_row(zv.ptr() + r * k, k, inv_t, ls.data());
                         log_softmax_row(teacher_logits.ptr() + r * k, k, inv_t, lt.data());
                         for (i64 j = 0; j < k; ++j) {
                           gz[r * k + j] += coef * (std::exp(ls[j]) - std::exp(lt[j]));
                         }
                       }
                     },
                     "kl_div_temperature");
}

#define PACN_INSTANTIATE_OPS(T)                                                                 \
  template Var add<T>(Tape<T>&, Var, Var);                                                     \
  template Var scale<T>(Tape<T>&, Var, T);                                                     \
  template Var add_scalar<T>(Tape<T>&, Var, T);                                                \
  template Var relu<T>(Tape<T>&, Var);                                                         \
  template Var sum<T>(Tape<T>&, Var);                                                          \
  template Var mean<T>(Tape<T>&, Var);                                                         \
  template Var dot_const<T>(Tape<T>&, Var, const BasicTensor<T>&);                             \
  template Var concat<T>(Tape<T>&, const std::vector<Var>&, i64);                              \
  template Var mean_axis<T>(Tape<T>&, Var, i64);                                               \
  template Var transpose12<T>(Tape<T>&, Var);                                                  \
  template Var add_freq_broadcast<T>(Tape<T>&, Var, Var);                                      \
  template Var channel_shuffle<T>(Tape<T>&, Var, i64);                                         \
  template Var softmax<T>(Tape<T>&, Var, i64);                                                 \
  template Var linear<T>(Tape<T>&, Var, Var, Var);                                             \
  template Var pointwise_conv<T>(Tape<T>&, Var, Var, Var);                                     \
  template Var depthwise_conv<T>(Tape<T>&, Var, Var, Var, Stride2);                            \
  template Var bsconv<T>(Tape<T>&, Var, Var, Var, Var, Var, Stride2);                          \
  template Var maxpool2d<T>(Tape<T>&, Var, Stride2, Stride2);                                  \
  template Var global_avg_pool<T>(Tape<T>&, Var);                                              \
  template Var batch_norm<T>(Tape<T>&, Var, Var, Var, BatchNormStats<T>&, bool);               \
  template Var layer_norm<T>(Tape<T>&, Var, Var, Var);                                         \
  template Var grn<T>(Tape<T>&, Var, Var, Var);                                                \
  template Var mha<T>(Tape<T>&, Var, const MhaWeights&, i64);                                  \
  template BasicTensor<T> attention_probs<T>(const BasicTensor<T>&, const BasicTensor<T>&,     \
                                             const BasicTensor<T>&, const BasicTensor<T>&,     \
                                             const BasicTensor<T>&, i64);                      \
  template Var soft_cross_entropy<T>(Tape<T>&, Var, const BasicTensor<T>&);                    \
  template Var kl_div_temperature<T>(Tape<T>&, Var, const BasicTensor<T>&, T);

PACN_INSTANTIATE_OPS(float)
PACN_INSTANTIATE_OPS(double)

}  // namespace pacn
