#pragma once

// Brute-force double-precision references, written straight from the op
// definitions. Deliberately no sharing with the library internals: a flat
// f64 image type and naive nested loops, so a bug in the production kernels
// cannot hide in its own reference.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "adderkit/tensor.hpp"

namespace oracle {

struct Image {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;

  Image() = default;
  Image(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_),
        v(static_cast<std::size_t>(n_) * c_ * h_ * w_, 0.0) {}

  std::size_t idx(int b, int ch, int y, int x) const {
    return ((static_cast<std::size_t>(b) * c + ch) * h + y) * w + x;
  }
  double& at(int b, int ch, int y, int x) { return v[idx(b, ch, y, x)]; }
  double at(int b, int ch, int y, int x) const { return v[idx(b, ch, y, x)]; }
};

inline Image from_tensor(const adderkit::Tensor4& t) {
  const adderkit::Shape4& s = t.shape();
  Image im(s.n, s.c, s.h, s.w);
  for (std::size_t i = 0; i < im.v.size(); ++i) {
    im.v[i] = static_cast<double>(t.data()[i]);
  }
  return im;
}

inline adderkit::Tensor4 to_tensor(const Image& im) {
  adderkit::Tensor4 t(im.n, im.c, im.h, im.w);
  for (std::size_t i = 0; i < im.v.size(); ++i) {
    t.data()[i] = static_cast<float>(im.v[i]);
  }
  return t;
}

// Zero-padded read.
inline double tap(const Image& im, int b, int ch, int y, int x) {
  if (y < 0 || y >= im.h || x < 0 || x >= im.w) return 0.0;
  return im.at(b, ch, y, x);
}

enum class Match { Dot, NegAbs, NegHalfSquare };

// The three sliding ops share one skeleton:
//   y(b,t,m,n) = bias_t + sum over (k,i,j) of combine(x tap, w(t,k,i,j))
// where combine is x*w, -|x-w| or -(x-w)^2/2. Weights are an Image with
// (n,c,h,w) read as (c_out, c_in, kh, kw).
inline Image slide(const Image& x, const Image& wt,
                   const std::vector<double>& bias, int stride, int pad,
                   Match match) {
  const int c_out = wt.n, c_in = wt.c, kh = wt.h, kw = wt.w;
  if (c_in != x.c) throw std::logic_error("oracle slide channel mismatch");
  const int oh = (x.h + 2 * pad - kh) / stride + 1;
  const int ow = (x.w + 2 * pad - kw) / stride + 1;
  Image y(x.n, c_out, oh, ow);
  for (int b = 0; b < x.n; ++b) {
    for (int t = 0; t < c_out; ++t) {
      for (int m = 0; m < oh; ++m) {
        for (int nn = 0; nn < ow; ++nn) {
          double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(t)];
          for (int k = 0; k < c_in; ++k) {
            for (int i = 0; i < kh; ++i) {
              for (int j = 0; j < kw; ++j) {
                const double xv =
                    tap(x, b, k, m * stride + i - pad, nn * stride + j - pad);
                const double wv = wt.at(t, k, i, j);
                switch (match) {
                  case Match::Dot: acc += xv * wv; break;
                  case Match::NegAbs: acc -= std::fabs(xv - wv); break;
                  case Match::NegHalfSquare:
                    acc -= 0.5 * (xv - wv) * (xv - wv);
                    break;
                }
              }
            }
          }
          y.at(b, t, m, nn) = acc;
        }
      }
    }
  }
  return y;
}

// Per-channel biased moments over (n, h, w).
inline void moments(const Image& x, std::vector<double>& mean,
                    std::vector<double>& var) {
  mean.assign(static_cast<std::size_t>(x.c), 0.0);
  var.assign(static_cast<std::size_t>(x.c), 0.0);
  const double count = static_cast<double>(x.n) * x.h * x.w;
  for (int ch = 0; ch < x.c; ++ch) {
    double s = 0.0;
    for (int b = 0; b < x.n; ++b) {
      for (int y = 0; y < x.h; ++y) {
        for (int xx = 0; xx < x.w; ++xx) s += x.at(b, ch, y, xx);
      }
    }
    const double mu = s / count;
    double sq = 0.0;
    for (int b = 0; b < x.n; ++b) {
      for (int y = 0; y < x.h; ++y) {
        for (int xx = 0; xx < x.w; ++xx) {
          const double d = x.at(b, ch, y, xx) - mu;
          sq += d * d;
        }
      }
    }
    mean[static_cast<std::size_t>(ch)] = mu;
    var[static_cast<std::size_t>(ch)] = sq / count;
  }
}

// Normalize with the given statistics, then the affine map.
inline Image bn_apply(const Image& x, const std::vector<double>& mean,
                      const std::vector<double>& var,
                      const std::vector<double>& gamma,
                      const std::vector<double>& beta, double eps) {
  Image y(x.n, x.c, x.h, x.w);
  for (int b = 0; b < x.n; ++b) {
    for (int ch = 0; ch < x.c; ++ch) {
      const std::size_t cc = static_cast<std::size_t>(ch);
      const double inv = 1.0 / std::sqrt(var[cc] + eps);
      for (int y2 = 0; y2 < x.h; ++y2) {
        for (int xx = 0; xx < x.w; ++xx) {
          y.at(b, ch, y2, xx) =
              gamma[cc] * (x.at(b, ch, y2, xx) - mean[cc]) * inv + beta[cc];
        }
      }
    }
  }
  return y;
}

// Training-mode batchnorm: moments from the batch itself.
inline Image bn_train(const Image& x, const std::vector<double>& gamma,
                      const std::vector<double>& beta, double eps) {
  std::vector<double> mean, var;
  moments(x, mean, var);
  return bn_apply(x, mean, var, gamma, beta, eps);
}

inline Image relu(const Image& x) {
  Image y = x;
  for (double& v : y.v) v = v > 0.0 ? v : 0.0;
  return y;
}

inline Image upsample2x(const Image& x) {
  Image y(x.n, x.c, x.h * 2, x.w * 2);
  for (int b = 0; b < x.n; ++b) {
    for (int ch = 0; ch < x.c; ++ch) {
      for (int yy = 0; yy < 2 * x.h; ++yy) {
        for (int xx = 0; xx < 2 * x.w; ++xx) {
          y.at(b, ch, yy, xx) = x.at(b, ch, yy / 2, xx / 2);
        }
      }
    }
  }
  return y;
}

inline Image add(const Image& a, const Image& b) {
  Image y = a;
  for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] += b.v[i];
  return y;
}

// <loss functional, image> so finite differences have a scalar to probe.
inline double dot(const Image& a, const Image& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) s += a.v[i] * b.v[i];
  return s;
}

}  // namespace oracle
