#include "adderkit/tensor.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace adderkit {

std::string Shape4::str() const {
  std::ostringstream os;
  os << "(" << n << "," << c << "," << h << "," << w << ")";
  return os.str();
}

namespace {

void require_positive(const Shape4& s) {
  if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
    throw std::invalid_argument("tensor shape must be positive, got " + s.str());
  }
}

}  // namespace

Tensor4::Tensor4(Shape4 s, float fill) : shape_(s) {
  require_positive(s);
  data_.assign(static_cast<std::size_t>(s.count()), fill);
}

Tensor4::Tensor4(int n, int c, int h, int w, float fill)
    : Tensor4(Shape4{n, c, h, w}, fill) {}

float& Tensor4::at(int n, int c, int y, int x) {
  if (n < 0 || n >= shape_.n || c < 0 || c >= shape_.c || y < 0 ||
      y >= shape_.h || x < 0 || x >= shape_.w) {
    throw std::out_of_range("tensor index out of range for shape " + shape_.str());
  }
  return data_[index(n, c, y, x)];
}

float Tensor4::at(int n, int c, int y, int x) const {
  return const_cast<Tensor4*>(this)->at(n, c, y, x);
}

void Tensor4::fill(float v) {
  std::fill(data_.begin(), data_.end(), v);
}

int ConvGeometry::out_extent(int in, int kernel) const {
  if (in < 1 || kernel < 1 || stride < 1 || padding < 0) {
    throw std::invalid_argument("bad kernel geometry");
  }
  const int span = in + 2 * padding - kernel;
  if (span < 0) {
    throw std::invalid_argument("kernel does not fit input even with padding");
  }
  return span / stride + 1;
}

std::vector<float> extract_patch(const Tensor4& x, const ConvGeometry& g, int n,
                                 int out_y, int out_x) {
  const Shape4& s = x.shape();
  if (n < 0 || n >= s.n) {
    throw std::out_of_range("batch index out of range");
  }
  const int oh = g.out_h(s.h);
  const int ow = g.out_w(s.w);
  if (out_y < 0 || out_y >= oh || out_x < 0 || out_x >= ow) {
    throw std::out_of_range("output cell out of range");
  }
  std::vector<float> patch(static_cast<std::size_t>(g.kernel_h) * g.kernel_w * s.c,
                           0.0f);
  std::size_t idx = 0;
  for (int ky = 0; ky < g.kernel_h; ++ky) {
    for (int kx = 0; kx < g.kernel_w; ++kx) {
      const int in_y = out_y * g.stride + ky - g.padding;
      const int in_x = out_x * g.stride + kx - g.padding;
      const bool inside =
          in_y >= 0 && in_y < s.h && in_x >= 0 && in_x < s.w;
      for (int c = 0; c < s.c; ++c, ++idx) {
        if (inside) patch[idx] = x(n, c, in_y, in_x);
      }
    }
  }
  return patch;
}

TensorStats tensor_stats(const Tensor4& t, bool per_channel) {
  const Shape4& s = t.shape();
  if (t.empty()) {
    throw std::invalid_argument("tensor_stats on empty tensor");
  }
  const int groups = per_channel ? s.c : 1;
  TensorStats st;
  st.mean.assign(groups, 0.0);
  st.var.assign(groups, 0.0);
  const std::int64_t per_group = t.count() / groups;

  for (int g = 0; g < groups; ++g) {
    double sum = 0.0;
    auto for_each = [&](auto&& fn) {
      for (int n = 0; n < s.n; ++n) {
        const int c0 = per_channel ? g : 0;
        const int c1 = per_channel ? g + 1 : s.c;
        for (int c = c0; c < c1; ++c) {
          for (int y = 0; y < s.h; ++y) {
            for (int x = 0; x < s.w; ++x) fn(t(n, c, y, x));
          }
        }
      }
    };
    for_each([&](float v) { sum += v; });
    const double mean = sum / static_cast<double>(per_group);
    double sq = 0.0;
    for_each([&](float v) {
      const double d = v - mean;
      sq += d * d;
    });
    st.mean[g] = mean;
    st.var[g] = sq / static_cast<double>(per_group);
  }
  return st;
}

namespace {

constexpr char kMagic[4] = {'A', 'K', 'T', '4'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<unsigned char, 4> b = {
      static_cast<unsigned char>(v & 0xff),
      static_cast<unsigned char>((v >> 8) & 0xff),
      static_cast<unsigned char>((v >> 16) & 0xff),
      static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b.data()), 4);
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (!in) throw std::runtime_error("tensor stream truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor4& t) {
  if (t.empty()) throw std::invalid_argument("cannot serialize empty tensor");
  out.write(kMagic, 4);
  const Shape4& s = t.shape();
  put_u32(out, static_cast<std::uint32_t>(s.n));
  put_u32(out, static_cast<std::uint32_t>(s.c));
  put_u32(out, static_cast<std::uint32_t>(s.h));
  put_u32(out, static_cast<std::uint32_t>(s.w));
  for (std::int64_t i = 0; i < t.count(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(t.data()[i]);
    put_u32(out, bits);
  }
  if (!out) throw std::runtime_error("tensor write failed");
}

Tensor4 read_tensor(std::istream& in) {
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("not a tensor stream (bad magic)");
  }
  Shape4 s;
  s.n = static_cast<int>(get_u32(in));
  s.c = static_cast<int>(get_u32(in));
  s.h = static_cast<int>(get_u32(in));
  s.w = static_cast<int>(get_u32(in));
  if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1 || s.count() > (1ll << 31)) {
    throw std::runtime_error("tensor stream has implausible shape " + s.str());
  }
  Tensor4 t(s);
  for (std::int64_t i = 0; i < t.count(); ++i) {
    t.data()[i] = std::bit_cast<float>(get_u32(in));
  }
  return t;
}

void save_tensor(const std::string& path, const Tensor4& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  write_tensor(out, t);
}

Tensor4 load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for read: " + path);
  return read_tensor(in);
}

void tensor_to_csv(std::ostream& out, const Tensor4& t) {
  const Shape4& s = t.shape();
  out << "# shape " << s.n << " " << s.c << " " << s.h << " " << s.w << "\n";
  out.precision(9);  // round trips float32
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < s.h; ++y) {
        out << n << "," << c << "," << y;
        for (int x = 0; x < s.w; ++x) out << "," << t(n, c, y, x);
        out << "\n";
      }
    }
  }
}

std::string tensor_to_csv(const Tensor4& t) {
  std::ostringstream os;
  tensor_to_csv(os, t);
  return os.str();
}

}  // namespace adderkit
