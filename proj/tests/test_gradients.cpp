#include <cmath>
#include <sstream>
#include <vector>

#include "adderkit/gradients.hpp"
#include "adderkit/layers.hpp"
#include "adderkit/rng.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace adderkit;

namespace {

Tensor4 random_tensor(Rng& rng, int n, int c, int h, int w, double lo = -1.0,
                      double hi = 1.0) {
  Tensor4 t(n, c, h, w);
  for (std::int64_t i = 0; i < t.count(); ++i) {
    t.data()[i] = static_cast<float>(rng.uniform(lo, hi));
  }
  return t;
}

// Direct tap-by-tap reference for the three filter backward rules. Loops over
// output cells exactly as the forward definition reads them; no shared code
// with the library.
struct FilterGradsRef {
  oracle::Image weight;
  oracle::Image input;
  std::vector<double> bias;
};

enum class Rule { ConvExact, AdderWeight, AdderInputSign, AdderInputHardTanh };

FilterGradsRef filter_backward_ref(const Tensor4& xt, const FilterBank& f,
                                   const Tensor4& gyt, Rule rule) {
  const oracle::Image x = oracle::from_tensor(xt);
  const oracle::Image w = oracle::from_tensor(f.weights());
  const oracle::Image gy = oracle::from_tensor(gyt);
  const int stride = f.geom().stride, pad = f.geom().padding;

  FilterGradsRef out;
  out.weight = oracle::Image(w.n, w.c, w.h, w.w);
  out.input = oracle::Image(x.n, x.c, x.h, x.w);
  out.bias.assign(static_cast<std::size_t>(w.n), 0.0);

  for (int b = 0; b < gy.n; ++b) {
    for (int t = 0; t < gy.c; ++t) {
      for (int m = 0; m < gy.h; ++m) {
        for (int n = 0; n < gy.w; ++n) {
          const double g = gy.at(b, t, m, n);
          out.bias[static_cast<std::size_t>(t)] += g;
          for (int k = 0; k < x.c; ++k) {
            for (int i = 0; i < w.h; ++i) {
              for (int j = 0; j < w.w; ++j) {
                const int yy = m * stride + i - pad;
                const int xx = n * stride + j - pad;
                const bool inside =
                    yy >= 0 && yy < x.h && xx >= 0 && xx < x.w;
                const double xv = inside ? x.at(b, k, yy, xx) : 0.0;
                const double wv = w.at(t, k, i, j);
                switch (rule) {
                  case Rule::ConvExact:
                    out.weight.at(t, k, i, j) += g * xv;
                    if (inside) out.input.at(b, k, yy, xx) += g * wv;
                    break;
                  case Rule::AdderWeight:
                    out.weight.at(t, k, i, j) += g * (xv - wv);
                    break;
                  case Rule::AdderInputSign:
                    if (inside) {
                      const double d = wv - xv;
                      out.input.at(b, k, yy, xx) +=
                          g * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
                    }
                    break;
                  case Rule::AdderInputHardTanh:
                    if (inside) {
                      double d = wv - xv;
                      if (d > 1.0) d = 1.0;
                      if (d < -1.0) d = -1.0;
                      out.input.at(b, k, yy, xx) += g * d;
                    }
                    break;
                }
              }
            }
          }
        }
      }
    }
  }
  return out;
}

double max_abs_diff(const Tensor4& got, const oracle::Image& want) {
  REQUIRE(got.count() == static_cast<std::int64_t>(want.v.size()));
  double m = 0.0;
  for (std::int64_t i = 0; i < got.count(); ++i) {
    m = std::max(m, std::fabs(static_cast<double>(got.data()[i]) -
                              want.v[static_cast<std::size_t>(i)]));
  }
  return m;
}

}  // namespace

TEST_SUITE_BEGIN("gradients");

TEST_CASE("grad mode strings") {
  CHECK(grad_mode_from_string("sign") == GradMode::Sign);
  CHECK(grad_mode_from_string("hardtanh-l2") == GradMode::HardTanhL2);
  CHECK_THROWS_AS(grad_mode_from_string("relu"), std::invalid_argument);
  CHECK(std::string(to_string(GradMode::Sign)) == "sign");
}

TEST_CASE("conv backward matches the direct tap sums") {
  Rng rng(31);
  Tensor4 x = random_tensor(rng, 2, 3, 5, 6);
  FilterBank f(FilterKind::Conv, 4, 3, 3, 3, 2, 1, true);
  f.init_gaussian(rng);
  Tensor4 gy = random_tensor(rng, 2, 4, 3, 3);

  ConvGrads got = conv_backward(x, f, gy);
  FilterGradsRef want = filter_backward_ref(x, f, gy, Rule::ConvExact);
  CHECK(max_abs_diff(got.weight, want.weight) < 1e-5);
  CHECK(max_abs_diff(got.input, want.input) < 1e-5);
  REQUIRE(got.bias.size() == 4);
  for (int t = 0; t < 4; ++t) {
    CHECK(got.bias[static_cast<std::size_t>(t)] ==
          doctest::Approx(want.bias[static_cast<std::size_t>(t)]).epsilon(1e-5));
  }
}

TEST_CASE("adder weight rule matches sum gy*(x-w) including padding taps") {
  Rng rng(32);
  Tensor4 x = random_tensor(rng, 2, 2, 5, 5);
  FilterBank f(FilterKind::Adder, 3, 2, 3, 3, 1, 1);
  f.init_gaussian(rng);
  Tensor4 gy = random_tensor(rng, 2, 3, 5, 5);

  Tensor4 got = adder_backward_weight(x, f, gy);
  FilterGradsRef want = filter_backward_ref(x, f, gy, Rule::AdderWeight);
  CHECK(max_abs_diff(got, want.weight) < 1e-5);
}

TEST_CASE("adder input rules match their per-tap factors") {
  Rng rng(33);
  Tensor4 x = random_tensor(rng, 1, 2, 4, 6, -2.0, 2.0);
  FilterBank f(FilterKind::Adder, 2, 2, 3, 3, 2, 1);
  f.init_gaussian(rng);
  Tensor4 gy = random_tensor(rng, 1, 2, 2, 3);

  Tensor4 sign_got = adder_backward_input(x, f, gy, GradMode::Sign);
  FilterGradsRef sign_want =
      filter_backward_ref(x, f, gy, Rule::AdderInputSign);
  CHECK(max_abs_diff(sign_got, sign_want.input) < 1e-5);

  Tensor4 ht_got = adder_backward_input(x, f, gy, GradMode::HardTanhL2);
  FilterGradsRef ht_want =
      filter_backward_ref(x, f, gy, Rule::AdderInputHardTanh);
  CHECK(max_abs_diff(ht_got, ht_want.input) < 1e-5);
}

TEST_CASE("filter_backward_bias sums gy per out channel") {
  Tensor4 gy(2, 2, 1, 2);
  gy(0, 0, 0, 0) = 1;
  gy(0, 0, 0, 1) = 2;
  gy(1, 0, 0, 0) = 3;
  gy(1, 0, 0, 1) = -1;
  gy(0, 1, 0, 0) = 0.5f;
  gy(0, 1, 0, 1) = 0.5f;
  gy(1, 1, 0, 0) = -0.5f;
  gy(1, 1, 0, 1) = 1.0f;
  std::vector<float> gb = filter_backward_bias(gy);
  REQUIRE(gb.size() == 2);
  CHECK(gb[0] == doctest::Approx(5.0));
  CHECK(gb[1] == doctest::Approx(1.5));
}

TEST_CASE("frozen batchnorm backward is the affine map derivative") {
  Rng rng(34);
  Tensor4 x = random_tensor(rng, 2, 2, 3, 3);
  Tensor4 gy = random_tensor(rng, 2, 2, 3, 3);
  BatchNormState bn(2);
  bn.running_mean = {0.4f, -0.1f};
  bn.running_var = {1.5f, 0.7f};
  bn.gamma = {1.2f, -0.5f};
  bn.beta = {0.0f, 0.3f};

  BatchNormGrads got = batchnorm_backward(x, bn, gy, false);
  for (int c = 0; c < 2; ++c) {
    const std::size_t cc = static_cast<std::size_t>(c);
    const double inv = 1.0 / std::sqrt(static_cast<double>(bn.running_var[cc]) +
                                       bn.eps);
    double want_gamma = 0.0, want_beta = 0.0;
    for (int b = 0; b < 2; ++b) {
      for (int y = 0; y < 3; ++y) {
        for (int xx = 0; xx < 3; ++xx) {
          const double g = gy(b, c, y, xx);
          const double xhat =
              (x(b, c, y, xx) - bn.running_mean[cc]) * inv;
          want_gamma += g * xhat;
          want_beta += g;
          CHECK(got.input(b, c, y, xx) ==
                doctest::Approx(g * bn.gamma[cc] * inv).epsilon(1e-5));
        }
      }
    }
    CHECK(got.gamma[cc] == doctest::Approx(want_gamma).epsilon(1e-4));
    CHECK(got.beta[cc] == doctest::Approx(want_beta).epsilon(1e-4));
  }
}

TEST_CASE("batch-mode batchnorm backward matches finite differences of the oracle") {
  Rng rng(35);
  Tensor4 x = random_tensor(rng, 3, 2, 4, 4, -1.5, 1.5);
  Tensor4 gy = random_tensor(rng, 3, 2, 4, 4);
  BatchNormState bn(2);
  bn.gamma = {1.3f, 0.6f};
  bn.beta = {-0.2f, 0.4f};

  BatchNormGrads got = batchnorm_backward(x, bn, gy, true);

  oracle::Image x64 = oracle::from_tensor(x);
  const oracle::Image gy64 = oracle::from_tensor(gy);
  std::vector<double> gamma64{1.3, 0.6}, beta64{-0.2, 0.4};
  auto loss = [&](const oracle::Image& in) {
    return oracle::dot(oracle::bn_train(in, gamma64, beta64, bn.eps), gy64);
  };
  const double step = 1e-4;
  for (std::size_t i = 0; i < x64.v.size(); ++i) {
    const double keep = x64.v[i];
    x64.v[i] = keep + step;
    const double up = loss(x64);
    x64.v[i] = keep - step;
    const double dn = loss(x64);
    x64.v[i] = keep;
    const double fd = (up - dn) / (2.0 * step);
    const double an = got.input.data()[i];
    CHECK(std::fabs(an - fd) <
          1e-3 * std::max({std::fabs(an), std::fabs(fd), 1e-5}));
  }

  // gamma and beta by the closed form of the normalized activations
  std::vector<double> mean, var;
  oracle::moments(x64, mean, var);
  for (int c = 0; c < 2; ++c) {
    const std::size_t cc = static_cast<std::size_t>(c);
    double want_gamma = 0.0, want_beta = 0.0;
    const double inv = 1.0 / std::sqrt(var[cc] + bn.eps);
    for (int b = 0; b < 3; ++b) {
      for (int y = 0; y < 4; ++y) {
        for (int xx = 0; xx < 4; ++xx) {
          want_gamma += gy(b, c, y, xx) * (x(b, c, y, xx) - mean[cc]) * inv;
          want_beta += gy(b, c, y, xx);
        }
      }
    }
    CHECK(got.gamma[cc] == doctest::Approx(want_gamma).epsilon(1e-4));
    CHECK(got.beta[cc] == doctest::Approx(want_beta).epsilon(1e-4));
  }
}

TEST_CASE("relu backward gates on the pre-activation") {
  Tensor4 pre(1, 1, 1, 3);
  pre(0, 0, 0, 0) = -1.0f;
  pre(0, 0, 0, 1) = 0.0f;
  pre(0, 0, 0, 2) = 2.0f;
  Tensor4 gy(1, 1, 1, 3, 5.0f);
  Tensor4 gx = relu_backward(pre, gy);
  CHECK(gx(0, 0, 0, 0) == 0.0f);
  CHECK(gx(0, 0, 0, 1) == 0.0f);
  CHECK(gx(0, 0, 0, 2) == 5.0f);
}

TEST_CASE("upsample backward folds each 2x2 block") {
  Tensor4 gy(1, 1, 2, 2);
  gy(0, 0, 0, 0) = 1;
  gy(0, 0, 0, 1) = 2;
  gy(0, 0, 1, 0) = 3;
  gy(0, 0, 1, 1) = 4;
  Tensor4 gx = upsample_nearest2x_backward(gy);
  REQUIRE(gx.shape() == Shape4{1, 1, 1, 1});
  CHECK(gx(0, 0, 0, 0) == doctest::Approx(10.0));

  Tensor4 odd(1, 1, 3, 2, 1.0f);
  CHECK_THROWS_AS(upsample_nearest2x_backward(odd), std::invalid_argument);
}

TEST_CASE("global pool backward spreads the average weight") {
  Tensor4 gy(1, 2, 1, 1);
  gy(0, 0, 0, 0) = 8.0f;
  gy(0, 1, 0, 0) = -4.0f;
  Tensor4 gx = global_avg_pool_backward(gy, 2, 2);
  REQUIRE(gx.shape() == Shape4{1, 2, 2, 2});
  CHECK(gx(0, 0, 1, 1) == doctest::Approx(2.0));
  CHECK(gx(0, 1, 0, 0) == doctest::Approx(-1.0));
}

TEST_CASE("gradcheck passes exact gradients and flags wrong ones") {
  std::vector<double> values{0.5, -1.25, 2.0};
  std::vector<double> analytic(3);
  auto forward = [&]() {
    double s = 0.0;
    for (double v : values) s += v * v;
    return s;
  };
  for (std::size_t i = 0; i < 3; ++i) analytic[i] = 2.0 * values[i];

  GradCheckParam p{"quad", values.data(), analytic.data(), values.size()};
  GradCheckResult ok = gradcheck(forward, {p});
  CHECK(ok.pass);
  CHECK(ok.max_rel_err < 1e-6);

  for (std::size_t i = 0; i < 3; ++i) analytic[i] = 3.0 * values[i];
  GradCheckResult bad = gradcheck(forward, {p});
  CHECK_FALSE(bad.pass);
  CHECK(bad.max_rel_err > 0.1);
  CHECK(bad.failures.size() == 3);
  CHECK(bad.worst_param == "quad");
}

TEST_CASE("gradcheck caps the kept failure list") {
  std::vector<double> values(32, 1.0);
  std::vector<double> analytic(32, 0.0);
  auto forward = [&]() {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  };
  GradCheckParam p{"lin", values.data(), analytic.data(), values.size()};
  GradCheckOptions opts;
  opts.max_failures_kept = 4;
  GradCheckResult res = gradcheck(forward, {p}, opts);
  CHECK_FALSE(res.pass);
  CHECK(res.failures.size() == 4);
}

TEST_CASE("stock battery passes on several seeds") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull}) {
    CAPTURE(seed);
    const std::vector<GradCheckRow> rows = gradcheck_battery(seed);
    CHECK(rows.size() >= 12);
    for (const GradCheckRow& r : rows) {
      CAPTURE(r.op);
      CAPTURE(r.param);
      CHECK(r.pass);
      CHECK(r.max_rel_err < 1e-3);
    }
  }
}

TEST_CASE("surrogate weight rule really diverges from the true forward") {
  for (std::uint64_t seed : {1ull, 5ull, 9ull}) {
    const GradCheckRow row = adder_weight_rule_vs_true_forward(seed);
    CHECK_FALSE(row.pass);
    CHECK(row.max_rel_err > 1e-3);
  }
}

TEST_CASE("gradcheck csv format") {
  std::vector<GradCheckRow> rows{{"conv3x3", "weight", 5e-6, true},
                                 {"adder3x3", "input", 2e-1, false}};
  std::ostringstream out;
  write_gradcheck_csv(out, rows);
  const std::string text = out.str();
  CHECK(text.rfind("layer,parameter,max_rel_err,pass\n", 0) == 0);
  CHECK(text.find("conv3x3,weight,5.000e-06,1") != std::string::npos);
  CHECK(text.find("adder3x3,input,2.000e-01,0") != std::string::npos);
}

TEST_SUITE_END();
