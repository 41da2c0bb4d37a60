#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace adderkit {

// Dense NCHW shape. All dims must be >= 1 for a usable tensor.
struct Shape4 {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::int64_t count() const {
    return static_cast<std::int64_t>(n) * c * h * w;
  }
  bool operator==(const Shape4&) const = default;
  std::string str() const;
};

// Owning 4-D float tensor, NCHW, row-major with w fastest.
// Reductions over tensor data accumulate in double; storage stays float.
class Tensor4 {
 public:
  Tensor4() = default;
  explicit Tensor4(Shape4 s, float fill = 0.0f);
  Tensor4(int n, int c, int h, int w, float fill = 0.0f);

  const Shape4& shape() const { return shape_; }
  std::int64_t count() const { return shape_.count(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }

  std::int64_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::int64_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  float& operator()(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  float operator()(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

  // Bounds-checked access; throws std::out_of_range.
  float& at(int n, int c, int y, int x);
  float at(int n, int c, int y, int x) const;

  void fill(float v);

 private:
  Shape4 shape_{};
  std::vector<float> data_;
};

// Spatial geometry of a sliding kernel application.
struct ConvGeometry {
  int kernel_h = 1;
  int kernel_w = 1;
  int stride = 1;
  int padding = 0;

  // Output extent for an input extent; throws std::invalid_argument when the
  // result would be empty.
  int out_extent(int in, int kernel) const;
  int out_h(int in_h) const { return out_extent(in_h, kernel_h); }
  int out_w(int in_w) const { return out_extent(in_w, kernel_w); }
};

// Copies the receptive field of output cell (out_y, out_x) for batch item n
// into a flat vector ordered (ky, kx, channel). Taps outside the input read
// as zero, matching the zero padding used by the sliding ops.
std::vector<float> extract_patch(const Tensor4& x, const ConvGeometry& g, int n,
                                 int out_y, int out_x);

struct TensorStats {
  std::vector<double> mean;  // per channel, or single entry for whole tensor
  std::vector<double> var;   // biased (divide by count)
};

// per_channel=true reduces over (n, h, w) for each channel.
TensorStats tensor_stats(const Tensor4& t, bool per_channel);

// Binary round trip. Little-endian on every host: magic "AKT4", four u32
// dims, then float32 payload. Throws std::runtime_error on malformed input.
void write_tensor(std::ostream& out, const Tensor4& t);
Tensor4 read_tensor(std::istream& in);
void save_tensor(const std::string& path, const Tensor4& t);
Tensor4 load_tensor(const std::string& path);

// Debug CSV: "# shape n c h w" then one line per (n, c, y) row holding
// "n,c,y,v0,...,v{w-1}". Values use enough digits to round trip float32.
void tensor_to_csv(std::ostream& out, const Tensor4& t);
std::string tensor_to_csv(const Tensor4& t);

}  // namespace adderkit
