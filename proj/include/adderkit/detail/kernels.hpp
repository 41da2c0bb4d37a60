#pragma once

// Internal loop kernels, templated on the scalar type. The public float ops
// and the double-precision paths used by gradient checking share these so
// there is a single definition of each op. Accumulation is always double.

#include <cmath>
#include <cstdint>

namespace adderkit::detail {

struct FilterGeom {
  int c_in = 0;
  int c_out = 0;
  int kh = 0;
  int kw = 0;
  int stride = 1;
  int padding = 0;
  int in_h = 0;
  int in_w = 0;
  int oh = 0;
  int ow = 0;
};

// x: one batch slab (c_in, in_h, in_w). w: (c_out, c_in, kh, kw).
// y: one output plane (oh, ow) for out channel t.
template <typename T>
void conv_plane(const T* x, const FilterGeom& g, const T* w, int t, T bias,
                T* y) {
  for (int m = 0; m < g.oh; ++m) {
    for (int n = 0; n < g.ow; ++n) {
      double acc = static_cast<double>(bias);
      for (int k = 0; k < g.c_in; ++k) {
        const T* xk = x + static_cast<std::int64_t>(k) * g.in_h * g.in_w;
        const T* wk = w + ((static_cast<std::int64_t>(t) * g.c_in + k) * g.kh) * g.kw;
        for (int i = 0; i < g.kh; ++i) {
          const int iy = m * g.stride + i - g.padding;
          if (iy < 0 || iy >= g.in_h) continue;
          for (int j = 0; j < g.kw; ++j) {
            const int ix = n * g.stride + j - g.padding;
            if (ix < 0 || ix >= g.in_w) continue;
            acc += static_cast<double>(xk[iy * g.in_w + ix]) *
                   static_cast<double>(wk[i * g.kw + j]);
          }
        }
      }
      y[m * g.ow + n] = static_cast<T>(acc);
    }
  }
}

// Negated l1 matching: y = bias - sum |x - w| over the window. Taps that fall
// in the zero padding still contribute |0 - w|.
template <typename T>
void adder_plane(const T* x, const FilterGeom& g, const T* w, int t, T bias,
                 T* y) {
  for (int m = 0; m < g.oh; ++m) {
    for (int n = 0; n < g.ow; ++n) {
      double acc = 0.0;
      for (int k = 0; k < g.c_in; ++k) {
        const T* xk = x + static_cast<std::int64_t>(k) * g.in_h * g.in_w;
        const T* wk = w + ((static_cast<std::int64_t>(t) * g.c_in + k) * g.kh) * g.kw;
        for (int i = 0; i < g.kh; ++i) {
          const int iy = m * g.stride + i - g.padding;
          for (int j = 0; j < g.kw; ++j) {
            const int ix = n * g.stride + j - g.padding;
            const double xv =
                (iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w)
                    ? static_cast<double>(xk[iy * g.in_w + ix])
                    : 0.0;
            acc += std::abs(xv - static_cast<double>(wk[i * g.kw + j]));
          }
        }
      }
      y[m * g.ow + n] = static_cast<T>(static_cast<double>(bias) - acc);
    }
  }
}

// Companion similarity with an l2 kernel: y = bias - 1/2 sum (x - w)^2.
// Its exact weight gradient equals the surrogate weight rule of the adder
// op, which is what makes it useful as a finite-difference reference.
template <typename T>
void l2_match_plane(const T* x, const FilterGeom& g, const T* w, int t, T bias,
                    T* y) {
  for (int m = 0; m < g.oh; ++m) {
    for (int n = 0; n < g.ow; ++n) {
      double acc = 0.0;
      for (int k = 0; k < g.c_in; ++k) {
        const T* xk = x + static_cast<std::int64_t>(k) * g.in_h * g.in_w;
        const T* wk = w + ((static_cast<std::int64_t>(t) * g.c_in + k) * g.kh) * g.kw;
        for (int i = 0; i < g.kh; ++i) {
          const int iy = m * g.stride + i - g.padding;
          for (int j = 0; j < g.kw; ++j) {
            const int ix = n * g.stride + j - g.padding;
            const double xv =
                (iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w)
                    ? static_cast<double>(xk[iy * g.in_w + ix])
                    : 0.0;
            const double d = xv - static_cast<double>(wk[i * g.kw + j]);
            acc += d * d;
          }
        }
      }
      y[m * g.ow + n] = static_cast<T>(static_cast<double>(bias) - 0.5 * acc);
    }
  }
}

// Biased per-channel moments over (n, h, w).
template <typename T>
void channel_moments(const T* x, int n, int c, int h, int w, double* mean,
                     double* var) {
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t per_channel = static_cast<std::int64_t>(n) * plane;
  for (int ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (int b = 0; b < n; ++b) {
      const T* p = x + (static_cast<std::int64_t>(b) * c + ch) * plane;
      for (std::int64_t i = 0; i < plane; ++i) sum += static_cast<double>(p[i]);
    }
    const double mu = sum / static_cast<double>(per_channel);
    double sq = 0.0;
    for (int b = 0; b < n; ++b) {
      const T* p = x + (static_cast<std::int64_t>(b) * c + ch) * plane;
      for (std::int64_t i = 0; i < plane; ++i) {
        const double d = static_cast<double>(p[i]) - mu;
        sq += d * d;
      }
    }
    mean[ch] = mu;
    var[ch] = sq / static_cast<double>(per_channel);
  }
}

template <typename T>
void bn_apply(const T* x, int n, int c, int h, int w, const double* mean,
              const double* var, const T* gamma, const T* beta, double eps,
              T* y) {
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const double scale =
          static_cast<double>(gamma[ch]) / std::sqrt(var[ch] + eps);
      const double shift =
          static_cast<double>(beta[ch]) - scale * mean[ch];
      const std::int64_t base = (static_cast<std::int64_t>(b) * c + ch) * plane;
      for (std::int64_t i = 0; i < plane; ++i) {
        y[base + i] =
            static_cast<T>(static_cast<double>(x[base + i]) * scale + shift);
      }
    }
  }
}

}  // namespace adderkit::detail
