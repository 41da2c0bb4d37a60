#include "adderkit/gradients.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>

#include "adderkit/detail/kernels.hpp"
#include "adderkit/parallel.hpp"
#include "adderkit/rng.hpp"

namespace adderkit {

const char* to_string(GradMode m) {
  return m == GradMode::Sign ? "sign" : "hardtanh-l2";
}

GradMode grad_mode_from_string(const std::string& s) {
  if (s == "sign") return GradMode::Sign;
  if (s == "hardtanh-l2" || s == "hardtanh") return GradMode::HardTanhL2;
  throw std::invalid_argument("unknown gradient mode: " + s);
}

namespace {

detail::FilterGeom resolve(const Tensor4& x, const FilterBank& f,
                           const Tensor4& gy) {
  const Shape4& s = x.shape();
  if (s.c != f.c_in()) {
    throw std::invalid_argument("input channel count does not match filter");
  }
  detail::FilterGeom g;
  g.c_in = f.c_in();
  g.c_out = f.c_out();
  g.kh = f.geom().kernel_h;
  g.kw = f.geom().kernel_w;
  g.stride = f.geom().stride;
  g.padding = f.geom().padding;
  g.in_h = s.h;
  g.in_w = s.w;
  g.oh = f.geom().out_h(s.h);
  g.ow = f.geom().out_w(s.w);
  const Shape4 want{s.n, g.c_out, g.oh, g.ow};
  if (!(gy.shape() == want)) {
    throw std::invalid_argument("output gradient shape " + gy.shape().str() +
                                " does not match expected " + want.str());
  }
  return g;
}

}  // namespace

Tensor4 adder_backward_weight(const Tensor4& x, const FilterBank& f,
                              const Tensor4& gy) {
  const detail::FilterGeom g = resolve(x, f, gy);
  const int batch = x.shape().n;
  Tensor4 gw(f.weights().shape());
  // Independent per out-channel; each task owns one weight slice.
  parallel_for(0, g.c_out, [&](std::int64_t t) {
    std::vector<double> acc(
        static_cast<std::size_t>(g.c_in) * g.kh * g.kw, 0.0);
    for (int b = 0; b < batch; ++b) {
      for (int m = 0; m < g.oh; ++m) {
        for (int n = 0; n < g.ow; ++n) {
          const double gout = gy(b, static_cast<int>(t), m, n);
          if (gout == 0.0) continue;
          std::size_t wi = 0;
          for (int k = 0; k < g.c_in; ++k) {
            for (int i = 0; i < g.kh; ++i) {
              const int iy = m * g.stride + i - g.padding;
              for (int j = 0; j < g.kw; ++j, ++wi) {
                const int ix = n * g.stride + j - g.padding;
                const double xv =
                    (iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w)
                        ? static_cast<double>(x(b, k, iy, ix))
                        : 0.0;
                const double wv = f.weights()(static_cast<int>(t), k, i, j);
                acc[wi] += gout * (xv - wv);
              }
            }
          }
        }
      }
    }
    std::size_t wi = 0;
    for (int k = 0; k < g.c_in; ++k) {
      for (int i = 0; i < g.kh; ++i) {
        for (int j = 0; j < g.kw; ++j, ++wi) {
          gw(static_cast<int>(t), k, i, j) = static_cast<float>(acc[wi]);
        }
      }
    }
  });
  return gw;
}

Tensor4 adder_backward_input(const Tensor4& x, const FilterBank& f,
                             const Tensor4& gy, GradMode mode) {
  const detail::FilterGeom g = resolve(x, f, gy);
  const Shape4& s = x.shape();
  Tensor4 gx(s);
  // Independent per batch item.
  parallel_for(0, s.n, [&](std::int64_t b) {
    std::vector<double> acc(
        static_cast<std::size_t>(g.c_in) * g.in_h * g.in_w, 0.0);
    for (int t = 0; t < g.c_out; ++t) {
      for (int m = 0; m < g.oh; ++m) {
        for (int n = 0; n < g.ow; ++n) {
          const double gout = gy(static_cast<int>(b), t, m, n);
          if (gout == 0.0) continue;
          for (int k = 0; k < g.c_in; ++k) {
            for (int i = 0; i < g.kh; ++i) {
              const int iy = m * g.stride + i - g.padding;
              if (iy < 0 || iy >= g.in_h) continue;
              for (int j = 0; j < g.kw; ++j) {
                const int ix = n * g.stride + j - g.padding;
                if (ix < 0 || ix >= g.in_w) continue;
                const double xv = x(static_cast<int>(b), k, iy, ix);
                const double wv = f.weights()(t, k, i, j);
                double factor;
                if (mode == GradMode::Sign) {
                  factor = wv > xv ? 1.0 : (wv < xv ? -1.0 : 0.0);
                } else {
                  factor = std::clamp(wv - xv, -1.0, 1.0);
                }
                acc[(static_cast<std::size_t>(k) * g.in_h + iy) * g.in_w + ix] +=
                    gout * factor;
              }
            }
          }
        }
      }
    }
    float* out = gx.data() + b * static_cast<std::int64_t>(g.c_in) * g.in_h * g.in_w;
    for (std::size_t i = 0; i < acc.size(); ++i) {
      out[i] = static_cast<float>(acc[i]);
    }
  });
  return gx;
}

ConvGrads conv_backward(const Tensor4& x, const FilterBank& f,
                        const Tensor4& gy) {
  const detail::FilterGeom g = resolve(x, f, gy);
  const Shape4& s = x.shape();
  ConvGrads out;
  out.weight = Tensor4(f.weights().shape());
  out.input = Tensor4(s);
  if (f.has_bias()) out.bias = filter_backward_bias(gy);

  parallel_for(0, g.c_out, [&](std::int64_t t) {
    std::vector<double> acc(
        static_cast<std::size_t>(g.c_in) * g.kh * g.kw, 0.0);
    for (int b = 0; b < s.n; ++b) {
      for (int m = 0; m < g.oh; ++m) {
        for (int n = 0; n < g.ow; ++n) {
          const double gout = gy(b, static_cast<int>(t), m, n);
          if (gout == 0.0) continue;
          std::size_t wi = 0;
          for (int k = 0; k < g.c_in; ++k) {
            for (int i = 0; i < g.kh; ++i) {
              const int iy = m * g.stride + i - g.padding;
              for (int j = 0; j < g.kw; ++j, ++wi) {
                const int ix = n * g.stride + j - g.padding;
                if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
                acc[wi] += gout * static_cast<double>(x(b, k, iy, ix));
              }
            }
          }
        }
      }
    }
    std::size_t wi = 0;
    for (int k = 0; k < g.c_in; ++k) {
      for (int i = 0; i < g.kh; ++i) {
        for (int j = 0; j < g.kw; ++j, ++wi) {
          out.weight(static_cast<int>(t), k, i, j) = static_cast<float>(acc[wi]);
        }
      }
    }
  });

  parallel_for(0, s.n, [&](std::int64_t b) {
    std::vector<double> acc(
        static_cast<std::size_t>(g.c_in) * g.in_h * g.in_w, 0.0);
    for (int t = 0; t < g.c_out; ++t) {
      for (int m = 0; m < g.oh; ++m) {
        for (int n = 0; n < g.ow; ++n) {
          const double gout = gy(static_cast<int>(b), t, m, n);
          if (gout == 0.0) continue;
          for (int k = 0; k < g.c_in; ++k) {
            for (int i = 0; i < g.kh; ++i) {
              const int iy = m * g.stride + i - g.padding;
              if (iy < 0 || iy >= g.in_h) continue;
              for (int j = 0; j < g.kw; ++j) {
                const int ix = n * g.stride + j - g.padding;
                if (ix < 0 || ix >= g.in_w) continue;
                acc[(static_cast<std::size_t>(k) * g.in_h + iy) * g.in_w + ix] +=
                    gout * static_cast<double>(f.weights()(t, k, i, j));
              }
            }
          }
        }
      }
    }
    float* dst = out.input.data() +
                 b * static_cast<std::int64_t>(g.c_in) * g.in_h * g.in_w;
    for (std::size_t i = 0; i < acc.size(); ++i) {
      dst[i] = static_cast<float>(acc[i]);
    }
  });
  return out;
}

std::vector<float> filter_backward_bias(const Tensor4& gy) {
  const Shape4& s = gy.shape();
  std::vector<float> gb(static_cast<std::size_t>(s.c), 0.0f);
  for (int c = 0; c < s.c; ++c) {
    double acc = 0.0;
    for (int b = 0; b < s.n; ++b) {
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) acc += gy(b, c, y, x);
      }
    }
    gb[c] = static_cast<float>(acc);
  }
  return gb;
}

BatchNormGrads batchnorm_backward(const Tensor4& x, const BatchNormState& bn,
                                  const Tensor4& gy, bool use_batch_stats) {
  const Shape4& s = x.shape();
  if (s.c != bn.channels() || !(gy.shape() == s)) {
    throw std::invalid_argument("batchnorm backward shape mismatch");
  }
  const double eps = bn.eps;
  std::vector<double> mean(static_cast<std::size_t>(s.c));
  std::vector<double> var(static_cast<std::size_t>(s.c));
  if (use_batch_stats) {
    detail::channel_moments(x.data(), s.n, s.c, s.h, s.w, mean.data(),
                            var.data());
  } else {
    for (int c = 0; c < s.c; ++c) {
      mean[c] = bn.running_mean[c];
      var[c] = bn.running_var[c];
    }
  }

  BatchNormGrads out;
  out.input = Tensor4(s);
  out.gamma.assign(static_cast<std::size_t>(s.c), 0.0f);
  out.beta.assign(static_cast<std::size_t>(s.c), 0.0f);
  const double count = static_cast<double>(s.n) * s.h * s.w;

  for (int c = 0; c < s.c; ++c) {
    const double inv_std = 1.0 / std::sqrt(var[c] + eps);
    double sum_gy = 0.0;
    double sum_gy_xhat = 0.0;
    for (int b = 0; b < s.n; ++b) {
      for (int y = 0; y < s.h; ++y) {
        for (int xx = 0; xx < s.w; ++xx) {
          const double go = gy(b, c, y, xx);
          const double xhat = (x(b, c, y, xx) - mean[c]) * inv_std;
          sum_gy += go;
          sum_gy_xhat += go * xhat;
        }
      }
    }
    out.beta[c] = static_cast<float>(sum_gy);
    out.gamma[c] = static_cast<float>(sum_gy_xhat);
    const double gscale = static_cast<double>(bn.gamma[c]) * inv_std;
    for (int b = 0; b < s.n; ++b) {
      for (int y = 0; y < s.h; ++y) {
        for (int xx = 0; xx < s.w; ++xx) {
          const double go = gy(b, c, y, xx);
          if (use_batch_stats) {
            const double xhat = (x(b, c, y, xx) - mean[c]) * inv_std;
            out.input(b, c, y, xx) = static_cast<float>(
                gscale * (go - sum_gy / count - xhat * sum_gy_xhat / count));
          } else {
            out.input(b, c, y, xx) = static_cast<float>(gscale * go);
          }
        }
      }
    }
  }
  return out;
}

Tensor4 relu_backward(const Tensor4& pre_relu, const Tensor4& gy) {
  if (!(pre_relu.shape() == gy.shape())) {
    throw std::invalid_argument("relu backward shape mismatch");
  }
  Tensor4 gx(pre_relu.shape());
  for (std::int64_t i = 0; i < gx.count(); ++i) {
    gx.data()[i] = pre_relu.data()[i] > 0.0f ? gy.data()[i] : 0.0f;
  }
  return gx;
}

Tensor4 upsample_nearest2x_backward(const Tensor4& gy) {
  const Shape4& s = gy.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw std::invalid_argument("upsample backward needs even spatial dims");
  }
  Tensor4 gx(s.n, s.c, s.h / 2, s.w / 2);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) {
          gx(n, c, y / 2, x / 2) += gy(n, c, y, x);
        }
      }
    }
  }
  return gx;
}

Tensor4 global_avg_pool_backward(const Tensor4& gy, int h, int w) {
  const Shape4& s = gy.shape();
  if (s.h != 1 || s.w != 1 || h < 1 || w < 1) {
    throw std::invalid_argument("pool backward expects (n, c, 1, 1) gradient");
  }
  Tensor4 gx(s.n, s.c, h, w);
  const float inv = 1.0f / (static_cast<float>(h) * static_cast<float>(w));
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const float v = gy(n, c, 0, 0) * inv;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) gx(n, c, y, x) = v;
      }
    }
  }
  return gx;
}

GradCheckResult gradcheck(const std::function<double()>& forward,
                          const std::vector<GradCheckParam>& params,
                          const GradCheckOptions& opts) {
  GradCheckResult res;
  for (const auto& p : params) {
    if (p.values == nullptr || p.analytic == nullptr) {
      throw std::invalid_argument("gradcheck parameter " + p.name +
                                  " has no buffers");
    }
    for (std::size_t i = 0; i < p.size; ++i) {
      const double saved = p.values[i];
      p.values[i] = saved + opts.step;
      const double up = forward();
      p.values[i] = saved - opts.step;
      const double down = forward();
      p.values[i] = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double analytic = p.analytic[i];
      const double denom = std::max(
          {std::abs(analytic), std::abs(numeric), opts.abs_floor});
      const double rel = std::abs(analytic - numeric) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = p.name;
        res.worst_index = i;
      }
      if (rel > opts.rel_tol) {
        res.pass = false;
        if (res.failures.size() < opts.max_failures_kept) {
          res.failures.push_back({p.name, i, analytic, numeric, rel});
        }
      }
    }
  }
  return res;
}

// ---- battery ---------------------------------------------------------------

namespace {

using PlaneFn = void (*)(const double*, const detail::FilterGeom&,
                         const double*, int, double, double*);

Tensor4 to_f32(const std::vector<double>& v, Shape4 s) {
  Tensor4 t(s);
  for (std::int64_t i = 0; i < t.count(); ++i) {
    t.data()[i] = static_cast<float>(v[static_cast<std::size_t>(i)]);
  }
  return t;
}

std::vector<double> to_f64(const Tensor4& t) {
  return std::vector<double>(t.data(), t.data() + t.count());
}

std::vector<double> to_f64(const std::vector<float>& v) {
  return std::vector<double>(v.begin(), v.end());
}

// Values are drawn as float then widened so the float production path and the
// double reference path see bit-identical inputs.
void fill_normal(std::vector<double>& v, Rng& rng, double stddev) {
  for (auto& e : v) e = static_cast<float>(rng.normal(0.0, stddev));
}

struct FilterCase {
  detail::FilterGeom g{};
  int batch = 0;
  std::vector<double> x, w, bias, gy;

  Shape4 x_shape() const { return {batch, g.c_in, g.in_h, g.in_w}; }
  Shape4 w_shape() const { return {g.c_out, g.c_in, g.kh, g.kw}; }
  Shape4 y_shape() const { return {batch, g.c_out, g.oh, g.ow}; }

  FilterBank bank(FilterKind kind) const {
    FilterBank f(kind, g.c_out, g.c_in, g.kh, g.kw, g.stride, g.padding,
                 !bias.empty());
    Tensor4 wt = to_f32(w, w_shape());
    std::copy(wt.data(), wt.data() + wt.count(), f.weights().data());
    for (std::size_t i = 0; i < bias.size(); ++i) {
      f.bias()[i] = static_cast<float>(bias[i]);
    }
    return f;
  }

  double loss(PlaneFn fn) const {
    const std::int64_t slab =
        static_cast<std::int64_t>(g.c_in) * g.in_h * g.in_w;
    const std::int64_t plane = static_cast<std::int64_t>(g.oh) * g.ow;
    std::vector<double> y(static_cast<std::size_t>(plane));
    double total = 0.0;
    for (int b = 0; b < batch; ++b) {
      for (int t = 0; t < g.c_out; ++t) {
        fn(x.data() + b * slab, g, w.data(), t,
           bias.empty() ? 0.0 : bias[static_cast<std::size_t>(t)], y.data());
        const double* gp =
            gy.data() + (static_cast<std::int64_t>(b) * g.c_out + t) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          total += y[static_cast<std::size_t>(i)] * gp[i];
        }
      }
    }
    return total;
  }
};

FilterCase make_case(Rng& rng, int batch, int c_in, int c_out, int in_h,
                     int in_w, int k, int stride, int padding, bool bias) {
  FilterCase fc;
  fc.batch = batch;
  fc.g.c_in = c_in;
  fc.g.c_out = c_out;
  fc.g.kh = k;
  fc.g.kw = k;
  fc.g.stride = stride;
  fc.g.padding = padding;
  fc.g.in_h = in_h;
  fc.g.in_w = in_w;
  ConvGeometry geom{k, k, stride, padding};
  fc.g.oh = geom.out_h(in_h);
  fc.g.ow = geom.out_w(in_w);
  fc.x.resize(static_cast<std::size_t>(batch) * c_in * in_h * in_w);
  fc.w.resize(static_cast<std::size_t>(c_out) * c_in * k * k);
  fc.gy.resize(static_cast<std::size_t>(batch) * c_out * fc.g.oh * fc.g.ow);
  fill_normal(fc.x, rng, 1.0);
  fill_normal(fc.w, rng, 0.5);
  fill_normal(fc.gy, rng, 1.0);
  if (bias) {
    fc.bias.resize(static_cast<std::size_t>(c_out));
    fill_normal(fc.bias, rng, 0.5);
  }
  return fc;
}

GradCheckRow row_from(const std::string& op, const std::string& param,
                      const GradCheckResult& res) {
  return {op, param, res.max_rel_err, res.pass};
}

}  // namespace

std::vector<GradCheckRow> gradcheck_battery(std::uint64_t seed) {
  std::vector<GradCheckRow> rows;
  Rng rng(seed);

  {  // conv3x3, all three gradients against the conv forward
    FilterCase fc = make_case(rng, 2, 3, 4, 5, 5, 3, 1, 1, true);
    const FilterBank f = fc.bank(FilterKind::Conv);
    const Tensor4 x32 = to_f32(fc.x, fc.x_shape());
    const Tensor4 gy32 = to_f32(fc.gy, fc.y_shape());
    const ConvGrads grads = conv_backward(x32, f, gy32);
    const std::vector<double> gw = to_f64(grads.weight);
    const std::vector<double> gx = to_f64(grads.input);
    const std::vector<double> gb = to_f64(grads.bias);
    auto fwd = [&fc] { return fc.loss(detail::conv_plane<double>); };
    rows.push_back(row_from(
        "conv3x3", "weight",
        gradcheck(fwd, {{"w", fc.w.data(), gw.data(), fc.w.size()}})));
    rows.push_back(row_from(
        "conv3x3", "input",
        gradcheck(fwd, {{"x", fc.x.data(), gx.data(), fc.x.size()}})));
    rows.push_back(row_from(
        "conv3x3", "bias",
        gradcheck(fwd, {{"b", fc.bias.data(), gb.data(), fc.bias.size()}})));
  }

  {  // adder3x3 weight rule against the l2 matching companion, plus bias
     // against the true forward (the bias enters both the same way)
    FilterCase fc = make_case(rng, 2, 3, 4, 6, 6, 3, 2, 1, true);
    const FilterBank f = fc.bank(FilterKind::Adder);
    const Tensor4 x32 = to_f32(fc.x, fc.x_shape());
    const Tensor4 gy32 = to_f32(fc.gy, fc.y_shape());
    const std::vector<double> gw =
        to_f64(adder_backward_weight(x32, f, gy32));
    auto fwd_l2 = [&fc] { return fc.loss(detail::l2_match_plane<double>); };
    rows.push_back(row_from(
        "adder3x3", "weight_vs_l2",
        gradcheck(fwd_l2, {{"w", fc.w.data(), gw.data(), fc.w.size()}})));

    const std::vector<double> gb = to_f64(filter_backward_bias(gy32));
    auto fwd_true = [&fc] { return fc.loss(detail::adder_plane<double>); };
    rows.push_back(row_from(
        "adder3x3", "bias",
        gradcheck(fwd_true,
                  {{"b", fc.bias.data(), gb.data(), fc.bias.size()}})));
  }

  {  // adder3x3 sign input rule against the true forward. Values sit on two
     // interleaved grids 0.1 apart, so no tap is within the step of a kink.
    FilterCase fc = make_case(rng, 2, 3, 4, 5, 5, 3, 1, 1, false);
    for (auto& v : fc.w) {
      v = static_cast<float>(rng.uniform_int(-5, 4) * 0.2 + 0.05);
    }
    for (auto& v : fc.x) {
      v = static_cast<float>(rng.uniform_int(-5, 4) * 0.2 + 0.15);
    }
    const FilterBank f = fc.bank(FilterKind::Adder);
    const Tensor4 x32 = to_f32(fc.x, fc.x_shape());
    const Tensor4 gy32 = to_f32(fc.gy, fc.y_shape());
    const std::vector<double> gx =
        to_f64(adder_backward_input(x32, f, gy32, GradMode::Sign));
    auto fwd = [&fc] { return fc.loss(detail::adder_plane<double>); };
    rows.push_back(row_from(
        "adder3x3", "input_sign",
        gradcheck(fwd, {{"x", fc.x.data(), gx.data(), fc.x.size()}})));
  }

  {  // adder3x3 hardtanh input rule against the true forward. Every tap is
     // built in the saturated region |w - x| > 1, where the clamp coincides
     // with the exact subgradient.
    FilterCase fc = make_case(rng, 2, 3, 4, 5, 5, 3, 1, 0, false);
    for (auto& v : fc.w) v = static_cast<float>(rng.uniform(-0.2, 0.2));
    for (auto& v : fc.x) {
      const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      v = static_cast<float>(sign * (1.4 + 0.4 * rng.uniform()));
    }
    const FilterBank f = fc.bank(FilterKind::Adder);
    const Tensor4 x32 = to_f32(fc.x, fc.x_shape());
    const Tensor4 gy32 = to_f32(fc.gy, fc.y_shape());
    const std::vector<double> gx =
        to_f64(adder_backward_input(x32, f, gy32, GradMode::HardTanhL2));
    auto fwd = [&fc] { return fc.loss(detail::adder_plane<double>); };
    rows.push_back(row_from(
        "adder3x3", "input_hardtanh_saturated",
        gradcheck(fwd, {{"x", fc.x.data(), gx.data(), fc.x.size()}})));
  }

  for (const bool use_batch : {true, false}) {  // batchnorm, both formulas
    const Shape4 s{3, 4, 5, 5};
    std::vector<double> x(static_cast<std::size_t>(s.count()));
    std::vector<double> gy(x.size());
    std::vector<double> gamma(static_cast<std::size_t>(s.c));
    std::vector<double> beta(static_cast<std::size_t>(s.c));
    fill_normal(x, rng, 1.0);
    fill_normal(gy, rng, 1.0);
    for (auto& v : gamma) v = static_cast<float>(rng.uniform(0.5, 1.5));
    fill_normal(beta, rng, 0.5);

    BatchNormState bn(s.c);
    for (int c = 0; c < s.c; ++c) {
      bn.gamma[c] = static_cast<float>(gamma[static_cast<std::size_t>(c)]);
      bn.beta[c] = static_cast<float>(beta[static_cast<std::size_t>(c)]);
      bn.running_mean[c] = static_cast<float>(rng.normal(0.0, 0.5));
      bn.running_var[c] = static_cast<float>(rng.uniform(0.5, 1.5));
    }
    const std::vector<double> rmean = to_f64(bn.running_mean);
    const std::vector<double> rvar = to_f64(bn.running_var);

    const Tensor4 x32 = to_f32(x, s);
    const Tensor4 gy32 = to_f32(gy, s);
    const BatchNormGrads grads = batchnorm_backward(x32, bn, gy32, use_batch);
    const std::vector<double> gx = to_f64(grads.input);
    const std::vector<double> ggamma = to_f64(grads.gamma);
    const std::vector<double> gbeta = to_f64(grads.beta);

    const double eps = bn.eps;
    auto fwd = [&, use_batch] {
      std::vector<double> mean(static_cast<std::size_t>(s.c));
      std::vector<double> var(static_cast<std::size_t>(s.c));
      if (use_batch) {
        detail::channel_moments(x.data(), s.n, s.c, s.h, s.w, mean.data(),
                                var.data());
      } else {
        mean = rmean;
        var = rvar;
      }
      std::vector<double> y(x.size());
      detail::bn_apply(x.data(), s.n, s.c, s.h, s.w, mean.data(), var.data(),
                       gamma.data(), beta.data(), eps, y.data());
      double total = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) total += y[i] * gy[i];
      return total;
    };
    const std::string op = use_batch ? "batchnorm_batch" : "batchnorm_frozen";
    rows.push_back(row_from(
        op, "input", gradcheck(fwd, {{"x", x.data(), gx.data(), x.size()}})));
    rows.push_back(row_from(
        op, "gamma",
        gradcheck(fwd, {{"gamma", gamma.data(), ggamma.data(), gamma.size()}})));
    rows.push_back(row_from(
        op, "beta",
        gradcheck(fwd, {{"beta", beta.data(), gbeta.data(), beta.size()}})));
  }

  {  // relu away from the kink
    const Shape4 s{2, 3, 4, 4};
    std::vector<double> x(static_cast<std::size_t>(s.count()));
    std::vector<double> gy(x.size());
    for (auto& v : x) {
      const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      v = static_cast<float>(sign * (0.1 + rng.uniform()));
    }
    fill_normal(gy, rng, 1.0);
    const Tensor4 x32 = to_f32(x, s);
    const Tensor4 gy32 = to_f32(gy, s);
    const std::vector<double> gx = to_f64(relu_backward(x32, gy32));
    auto fwd = [&] {
      double total = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        total += (x[i] > 0.0 ? x[i] : 0.0) * gy[i];
      }
      return total;
    };
    rows.push_back(row_from(
        "relu", "input", gradcheck(fwd, {{"x", x.data(), gx.data(), x.size()}})));
  }

  return rows;
}

GradCheckRow adder_weight_rule_vs_true_forward(std::uint64_t seed) {
  Rng rng(seed);
  FilterCase fc = make_case(rng, 2, 3, 4, 5, 5, 3, 1, 1, false);
  // Same grid trick as the sign check so the true forward is differentiable
  // at every tap; the mismatch reported here is the surrogate itself, not
  // kink noise.
  for (auto& v : fc.w) {
    v = static_cast<float>(rng.uniform_int(-5, 4) * 0.2 + 0.05);
  }
  for (auto& v : fc.x) {
    v = static_cast<float>(rng.uniform_int(-5, 4) * 0.2 + 0.15);
  }
  const FilterBank f = fc.bank(FilterKind::Adder);
  const Tensor4 x32 = to_f32(fc.x, fc.x_shape());
  const Tensor4 gy32 = to_f32(fc.gy, fc.y_shape());
  const std::vector<double> gw = to_f64(adder_backward_weight(x32, f, gy32));
  auto fwd = [&fc] { return fc.loss(detail::adder_plane<double>); };
  return row_from(
      "adder3x3", "weight_vs_true_forward",
      gradcheck(fwd, {{"w", fc.w.data(), gw.data(), fc.w.size()}}));
}

void write_gradcheck_csv(std::ostream& out,
                         const std::vector<GradCheckRow>& rows) {
  out << "layer,parameter,max_rel_err,pass\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.3e", r.max_rel_err);
    out << r.op << "," << r.param << "," << buf << "," << (r.pass ? 1 : 0)
        << "\n";
  }
}

}  // namespace adderkit
