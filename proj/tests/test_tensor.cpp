#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>

#include "adderkit/tensor.hpp"
#include "doctest.h"

using namespace adderkit;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("shape count and equality") {
  Shape4 a{2, 3, 4, 5};
  CHECK(a.count() == 120);
  CHECK(a == Shape4{2, 3, 4, 5});
  CHECK_FALSE(a == Shape4{2, 3, 5, 4});
  CHECK(a.str().find('2') != std::string::npos);
}

TEST_CASE("layout is row major with w fastest") {
  Tensor4 t(2, 3, 4, 5);
  for (std::int64_t i = 0; i < t.count(); ++i) {
    t.data()[i] = static_cast<float>(i);
  }
  CHECK(t(0, 0, 0, 0) == 0.0f);
  CHECK(t(0, 0, 0, 1) == 1.0f);
  CHECK(t(0, 0, 1, 0) == 5.0f);
  CHECK(t(0, 1, 0, 0) == 20.0f);
  CHECK(t(1, 0, 0, 0) == 60.0f);
  CHECK(t.index(1, 2, 3, 4) == t.count() - 1);
}

TEST_CASE("fill and at bounds") {
  Tensor4 t(1, 2, 2, 2, 7.0f);
  CHECK(t(0, 1, 1, 1) == 7.0f);
  t.fill(-1.0f);
  CHECK(t(0, 0, 0, 0) == -1.0f);
  CHECK(t.at(0, 1, 1, 1) == -1.0f);
  CHECK_THROWS_AS(t.at(1, 0, 0, 0), std::out_of_range);
  CHECK_THROWS_AS(t.at(0, 2, 0, 0), std::out_of_range);
  CHECK_THROWS_AS(t.at(0, 0, -1, 0), std::out_of_range);
  CHECK_THROWS_AS(t.at(0, 0, 0, 2), std::out_of_range);
}

TEST_CASE("out_extent formula and empty guard") {
  ConvGeometry g;
  g.kernel_h = 3;
  g.kernel_w = 3;
  g.stride = 1;
  g.padding = 1;
  CHECK(g.out_h(5) == 5);
  CHECK(g.out_w(8) == 8);

  g.stride = 2;
  CHECK(g.out_h(5) == 3);
  CHECK(g.out_h(4) == 2);

  g.padding = 0;
  g.stride = 1;
  CHECK(g.out_h(3) == 1);
  CHECK_THROWS_AS(g.out_h(2), std::invalid_argument);
}

TEST_CASE("extract_patch orders taps ky kx channel and zero pads") {
  Tensor4 x(1, 2, 2, 2);
  x(0, 0, 0, 0) = 1;
  x(0, 0, 0, 1) = 2;
  x(0, 0, 1, 0) = 3;
  x(0, 0, 1, 1) = 4;
  x(0, 1, 0, 0) = 5;
  x(0, 1, 0, 1) = 6;
  x(0, 1, 1, 0) = 7;
  x(0, 1, 1, 1) = 8;

  ConvGeometry g;
  g.kernel_h = 2;
  g.kernel_w = 2;
  g.stride = 1;
  g.padding = 1;

  // Output cell (0,0) sees rows -1..0, cols -1..0; only tap (1,1) is inside.
  auto p = extract_patch(x, g, 0, 0, 0);
  REQUIRE(p.size() == 8);
  CHECK(p[0] == 0.0f);
  CHECK(p[1] == 0.0f);
  CHECK(p[2] == 0.0f);
  CHECK(p[3] == 0.0f);
  CHECK(p[4] == 0.0f);
  CHECK(p[5] == 0.0f);
  CHECK(p[6] == 1.0f);
  CHECK(p[7] == 5.0f);

  // Fully interior cell: (ky, kx, channel) ordering over the 2x2 window.
  auto q = extract_patch(x, g, 0, 1, 1);
  REQUIRE(q.size() == 8);
  CHECK(q[0] == 1.0f);
  CHECK(q[1] == 5.0f);
  CHECK(q[2] == 2.0f);
  CHECK(q[3] == 6.0f);
  CHECK(q[4] == 3.0f);
  CHECK(q[5] == 7.0f);
  CHECK(q[6] == 4.0f);
  CHECK(q[7] == 8.0f);
}

TEST_CASE("tensor_stats per channel and whole tensor") {
  Tensor4 t(2, 2, 1, 2);
  // channel 0 values: 1, 3, 5, 7; channel 1 values: 2, 2, 2, 2
  t(0, 0, 0, 0) = 1;
  t(0, 0, 0, 1) = 3;
  t(1, 0, 0, 0) = 5;
  t(1, 0, 0, 1) = 7;
  t(0, 1, 0, 0) = 2;
  t(0, 1, 0, 1) = 2;
  t(1, 1, 0, 0) = 2;
  t(1, 1, 0, 1) = 2;

  TensorStats per = tensor_stats(t, true);
  REQUIRE(per.mean.size() == 2);
  CHECK(per.mean[0] == doctest::Approx(4.0));
  CHECK(per.var[0] == doctest::Approx(5.0));
  CHECK(per.mean[1] == doctest::Approx(2.0));
  CHECK(per.var[1] == doctest::Approx(0.0));

  TensorStats whole = tensor_stats(t, false);
  REQUIRE(whole.mean.size() == 1);
  CHECK(whole.mean[0] == doctest::Approx(3.0));
  CHECK(whole.var[0] == doctest::Approx(3.5));
}

TEST_CASE("binary round trip is exact") {
  Tensor4 t(2, 1, 3, 2);
  for (std::int64_t i = 0; i < t.count(); ++i) {
    t.data()[i] = std::sin(static_cast<float>(i)) * 1e-3f;
  }
  std::stringstream ss;
  write_tensor(ss, t);
  Tensor4 back = read_tensor(ss);
  REQUIRE(back.shape() == t.shape());
  for (std::int64_t i = 0; i < t.count(); ++i) {
    CHECK(back.data()[i] == t.data()[i]);
  }
}

TEST_CASE("read_tensor rejects bad magic and truncation") {
  {
    std::stringstream ss;
    ss << "NOPE";
    CHECK_THROWS_AS(read_tensor(ss), std::runtime_error);
  }
  {
    Tensor4 t(1, 1, 2, 2, 1.0f);
    std::stringstream ss;
    write_tensor(ss, t);
    std::string bytes = ss.str();
    bytes.resize(bytes.size() - 3);
    std::stringstream cut(bytes);
    CHECK_THROWS_AS(read_tensor(cut), std::runtime_error);
  }
}

TEST_CASE("csv dump has shape header and one line per row") {
  Tensor4 t(1, 2, 2, 3);
  t(0, 1, 1, 2) = 0.1f;
  const std::string csv = tensor_to_csv(t);
  CHECK(csv.rfind("# shape 1 2 2 3\n", 0) == 0);

  int lines = 0;
  for (char ch : csv) {
    if (ch == '\n') ++lines;
  }
  CHECK(lines == 1 + 1 * 2 * 2);

  // float32 round trip through the printed digits
  const auto pos = csv.rfind(',');
  CHECK(std::stof(csv.substr(pos + 1)) == 0.1f);
}

TEST_SUITE_END();
