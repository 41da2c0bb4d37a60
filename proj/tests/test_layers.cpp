#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

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

}  // namespace

TEST_SUITE_BEGIN("layers");

TEST_CASE("filter kind strings") {
  CHECK(std::string(to_string(FilterKind::Conv)) == "conv");
  CHECK(std::string(to_string(FilterKind::Adder)) == "adder");
  CHECK(filter_kind_from_string("conv") == FilterKind::Conv);
  CHECK(filter_kind_from_string("adder") == FilterKind::Adder);
  CHECK_THROWS_AS(filter_kind_from_string("dense"), std::invalid_argument);
}

TEST_CASE("filter bank geometry and bias") {
  FilterBank f(FilterKind::Conv, 4, 3, 3, 2, 2, 1, true);
  CHECK(f.c_out() == 4);
  CHECK(f.c_in() == 3);
  CHECK(f.weights().shape() == Shape4{4, 3, 3, 2});
  CHECK(f.geom().kernel_h == 3);
  CHECK(f.geom().kernel_w == 2);
  CHECK(f.geom().stride == 2);
  CHECK(f.geom().padding == 1);
  CHECK(f.has_bias());
  CHECK(f.bias().size() == 4);

  FilterBank g(FilterKind::Adder, 1, 1, 1, 1, 1, 0);
  CHECK_FALSE(g.has_bias());
}

TEST_CASE("gaussian init is deterministic with matched seeds") {
  FilterBank a(FilterKind::Conv, 8, 4, 3, 3, 1, 1);
  FilterBank b(FilterKind::Conv, 8, 4, 3, 3, 1, 1);
  Rng r1(42), r2(42);
  a.init_gaussian(r1);
  b.init_gaussian(r2);
  for (std::int64_t i = 0; i < a.weights().count(); ++i) {
    CHECK(a.weights().data()[i] == b.weights().data()[i]);
  }

  // std close to sqrt(2 / (kh*kw*c_in)) over the 288 draws
  double sq = 0.0;
  for (std::int64_t i = 0; i < a.weights().count(); ++i) {
    sq += a.weights().data()[i] * a.weights().data()[i];
  }
  const double std_hat = std::sqrt(sq / static_cast<double>(a.weights().count()));
  const double target = std::sqrt(2.0 / (3 * 3 * 4));
  CHECK(std_hat == doctest::Approx(target).epsilon(0.25));
}

TEST_CASE("conv forward literal 2x2") {
  Tensor4 x(1, 1, 2, 2);
  x(0, 0, 0, 0) = 1;
  x(0, 0, 0, 1) = 2;
  x(0, 0, 1, 0) = 3;
  x(0, 0, 1, 1) = 4;
  FilterBank f(FilterKind::Conv, 1, 1, 2, 2, 1, 0, true);
  f.weights().fill(1.0f);
  f.bias()[0] = 0.5f;
  Tensor4 y = conv_forward(x, f);
  REQUIRE(y.shape() == Shape4{1, 1, 1, 1});
  CHECK(y(0, 0, 0, 0) == doctest::Approx(10.5));
}

TEST_CASE("adder forward literal 2x2") {
  Tensor4 x(1, 1, 2, 2);
  x(0, 0, 0, 0) = 1;
  x(0, 0, 0, 1) = 2;
  x(0, 0, 1, 0) = 3;
  x(0, 0, 1, 1) = 4;
  FilterBank f(FilterKind::Adder, 1, 1, 2, 2, 1, 0);
  f.weights().fill(1.0f);
  Tensor4 y = adder_forward(x, f);
  REQUIRE(y.shape() == Shape4{1, 1, 1, 1});
  // -(|1-1| + |2-1| + |3-1| + |4-1|)
  CHECK(y(0, 0, 0, 0) == doctest::Approx(-6.0));
}

TEST_CASE("adder padding taps match against the weight, not skip it") {
  Tensor4 x(1, 1, 1, 1);
  x(0, 0, 0, 0) = 0.0f;
  FilterBank f(FilterKind::Adder, 1, 1, 3, 3, 1, 1);
  f.weights().fill(0.5f);
  Tensor4 y = adder_forward(x, f);
  // all nine taps see |0 - 0.5|
  CHECK(y(0, 0, 0, 0) == doctest::Approx(-4.5));
}

TEST_CASE("sliding ops agree with the brute-force references") {
  Rng rng(7);
  struct Case {
    int n, c_in, c_out, h, w, k, stride, pad;
    bool bias;
  };
  const Case cases[] = {
      {2, 3, 4, 6, 5, 3, 1, 1, true},
      {1, 2, 3, 7, 7, 3, 2, 1, false},
      {2, 1, 2, 4, 4, 1, 1, 0, true},
      {1, 4, 2, 5, 6, 2, 2, 0, false},
  };
  for (const Case& cs : cases) {
    CAPTURE(cs.k);
    CAPTURE(cs.stride);
    Tensor4 x = random_tensor(rng, cs.n, cs.c_in, cs.h, cs.w);
    for (FilterKind kind : {FilterKind::Conv, FilterKind::Adder}) {
      FilterBank f(kind, cs.c_out, cs.c_in, cs.k, cs.k, cs.stride, cs.pad,
                   cs.bias);
      f.init_gaussian(rng);
      std::vector<double> bias64;
      if (cs.bias) {
        for (std::size_t i = 0; i < f.bias().size(); ++i) {
          f.bias()[i] = static_cast<float>(rng.uniform(-0.5, 0.5));
          bias64.push_back(f.bias()[i]);
        }
      }
      Tensor4 y = filter_forward(x, f);
      oracle::Image ref = oracle::slide(
          oracle::from_tensor(x), oracle::from_tensor(f.weights()), bias64,
          cs.stride, cs.pad,
          kind == FilterKind::Conv ? oracle::Match::Dot
                                   : oracle::Match::NegAbs);
      REQUIRE(y.count() == static_cast<std::int64_t>(ref.v.size()));
      double max_abs = 0.0;
      for (std::int64_t i = 0; i < y.count(); ++i) {
        max_abs = std::max(max_abs, std::fabs(y.data()[i] - ref.v[i]));
      }
      CHECK(max_abs < 1e-5);
      if (kind == FilterKind::Adder) {
        for (std::int64_t i = 0; i < y.count(); ++i) {
          const int t = static_cast<int>((i / (y.shape().h * y.shape().w)) %
                                         y.shape().c);
          CHECK(y.data()[i] <= (cs.bias ? f.bias()[static_cast<std::size_t>(t)]
                                        : 0.0f) + 1e-6f);
        }
      }
    }
  }
}

TEST_CASE("batchnorm training normalizes and folds batch moments") {
  Rng rng(11);
  Tensor4 x = random_tensor(rng, 4, 3, 5, 5, -2.0, 3.0);
  BatchNormState bn(3);
  Tensor4 y = batchnorm_forward(x, bn, true);

  TensorStats st = tensor_stats(y, true);
  for (int c = 0; c < 3; ++c) {
    CHECK(std::fabs(st.mean[static_cast<std::size_t>(c)]) < 1e-4);
    CHECK(std::fabs(st.var[static_cast<std::size_t>(c)] - 1.0) < 1e-3);
  }

  // one EMA step from the fresh state
  TensorStats batch = tensor_stats(x, true);
  for (int c = 0; c < 3; ++c) {
    const float want_mean = static_cast<float>(
        0.9 * 0.0 + 0.1 * batch.mean[static_cast<std::size_t>(c)]);
    const float want_var = static_cast<float>(
        0.9 * 1.0 + 0.1 * batch.var[static_cast<std::size_t>(c)]);
    CHECK(bn.running_mean[static_cast<std::size_t>(c)] ==
          doctest::Approx(want_mean).epsilon(1e-6));
    CHECK(bn.running_var[static_cast<std::size_t>(c)] ==
          doctest::Approx(want_var).epsilon(1e-6));
  }
}

TEST_CASE("batchnorm eval and frozen use running stats and leave them alone") {
  Rng rng(12);
  Tensor4 x = random_tensor(rng, 2, 2, 4, 4);
  BatchNormState bn(2);
  bn.running_mean = {0.3f, -0.2f};
  bn.running_var = {2.0f, 0.5f};
  bn.gamma = {1.5f, 0.8f};
  bn.beta = {0.1f, -0.4f};

  Tensor4 eval_y = batchnorm_forward(x, bn, false);
  CHECK(bn.running_mean[0] == 0.3f);
  CHECK(bn.running_var[1] == 0.5f);

  bn.frozen = true;
  Tensor4 frozen_y = batchnorm_forward(x, bn, true);
  CHECK(bn.running_mean[0] == 0.3f);
  CHECK(bn.running_var[1] == 0.5f);
  for (std::int64_t i = 0; i < eval_y.count(); ++i) {
    CHECK(frozen_y.data()[i] == eval_y.data()[i]);
  }

  // hand affine check on one entry
  const float x0 = x(0, 0, 1, 2);
  const float want = 1.5f * (x0 - 0.3f) / std::sqrt(2.0f + bn.eps) + 0.1f;
  CHECK(eval_y(0, 0, 1, 2) == doctest::Approx(want).epsilon(1e-5));
}

TEST_CASE("batchnorm training needs two values per channel") {
  Tensor4 x(1, 3, 1, 1, 1.0f);
  BatchNormState bn(3);
  CHECK_THROWS_AS(batchnorm_forward(x, bn, true), std::invalid_argument);
  CHECK_NOTHROW(batchnorm_forward(x, bn, false));
}

TEST_CASE("batchnorm channel mismatch throws") {
  Tensor4 x(1, 2, 2, 2, 1.0f);
  BatchNormState bn(3);
  CHECK_THROWS_AS(batchnorm_forward(x, bn, false), std::invalid_argument);
}

TEST_CASE("relu upsample and pool literals") {
  Tensor4 x(1, 1, 2, 2);
  x(0, 0, 0, 0) = -1.0f;
  x(0, 0, 0, 1) = 2.0f;
  x(0, 0, 1, 0) = 0.0f;
  x(0, 0, 1, 1) = -0.5f;

  Tensor4 r = relu(x);
  CHECK(r(0, 0, 0, 0) == 0.0f);
  CHECK(r(0, 0, 0, 1) == 2.0f);
  CHECK(r(0, 0, 1, 0) == 0.0f);
  CHECK(r(0, 0, 1, 1) == 0.0f);

  Tensor4 up = upsample_nearest2x(x);
  REQUIRE(up.shape() == Shape4{1, 1, 4, 4});
  CHECK(up(0, 0, 0, 0) == -1.0f);
  CHECK(up(0, 0, 0, 1) == -1.0f);
  CHECK(up(0, 0, 1, 1) == -1.0f);
  CHECK(up(0, 0, 0, 2) == 2.0f);
  CHECK(up(0, 0, 2, 0) == 0.0f);
  CHECK(up(0, 0, 3, 3) == -0.5f);

  Tensor4 pooled = global_avg_pool(x);
  REQUIRE(pooled.shape() == Shape4{1, 1, 1, 1});
  CHECK(pooled(0, 0, 0, 0) == doctest::Approx(0.125));
}

TEST_CASE("sparsity counts entries within tolerance") {
  Tensor4 x(1, 1, 1, 4);
  x(0, 0, 0, 0) = 0.0f;
  x(0, 0, 0, 1) = 1e-3f;
  x(0, 0, 0, 2) = -1e-3f;
  x(0, 0, 0, 3) = 2.0f;
  CHECK(sparsity(x) == doctest::Approx(0.25));
  CHECK(sparsity(x, 1e-3f) == doctest::Approx(0.75));
  CHECK(sparsity(x, 10.0f) == doctest::Approx(1.0));
}

TEST_CASE("checkpoint round trip with vectors and metadata") {
  const std::string path =
      (std::filesystem::temp_directory_path() / "adderkit_test_ck.ckpt")
          .string();
  Checkpoint ck;
  Tensor4 t(2, 1, 2, 2);
  for (std::int64_t i = 0; i < t.count(); ++i) {
    t.data()[i] = static_cast<float>(i) * 0.25f;
  }
  ck.tensors["block.w"] = t;
  ck.put_vector("block.bias", {1.0f, -2.0f, 0.5f});
  ck.metadata["format"] = "test-v1";
  ck.save(path);

  Checkpoint back = Checkpoint::load(path);
  CHECK(back.metadata.at("format") == "test-v1");
  const Tensor4& w = back.get("block.w");
  REQUIRE(w.shape() == t.shape());
  for (std::int64_t i = 0; i < t.count(); ++i) {
    CHECK(w.data()[i] == t.data()[i]);
  }
  const std::vector<float> bias = back.get_vector("block.bias");
  REQUIRE(bias.size() == 3);
  CHECK(bias[1] == -2.0f);
  CHECK_THROWS(back.get("missing.entry"));
  std::remove(path.c_str());
}

TEST_SUITE_END();
