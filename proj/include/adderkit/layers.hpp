#pragma once

#include <map>
#include <string>
#include <vector>

#include "adderkit/rng.hpp"
#include "adderkit/tensor.hpp"

namespace adderkit {

enum class FilterKind { Conv, Adder };

const char* to_string(FilterKind k);
FilterKind filter_kind_from_string(const std::string& s);

// Weights for one sliding-filter layer, laid out (c_out, c_in, kh, kw).
// The op kind is fixed at construction; swapping the op under trained
// weights is meaningless, so there is no setter.
class FilterBank {
 public:
  FilterBank(FilterKind kind, int c_out, int c_in, int kh, int kw, int stride,
             int padding, bool has_bias = false);

  FilterKind kind() const { return kind_; }
  const ConvGeometry& geom() const { return geom_; }
  int c_out() const { return weights_.shape().n; }
  int c_in() const { return weights_.shape().c; }
  bool has_bias() const { return !bias_.empty(); }

  Tensor4& weights() { return weights_; }
  const Tensor4& weights() const { return weights_; }
  std::vector<float>& bias() { return bias_; }
  const std::vector<float>& bias() const { return bias_; }

  // Zero-mean Gaussian, std = sqrt(2 / (kh * kw * c_in)). Bias stays zero.
  void init_gaussian(Rng& rng);

 private:
  FilterKind kind_;
  ConvGeometry geom_;
  Tensor4 weights_;
  std::vector<float> bias_;
};

struct BatchNormState {
  explicit BatchNormState(int channels);

  int channels() const { return static_cast<int>(gamma.size()); }

  float momentum = 0.1f;
  float eps = 1e-5f;
  // A frozen layer normalizes with its running statistics in every mode and
  // never updates them.
  bool frozen = false;
  std::vector<float> gamma;         // init 1
  std::vector<float> beta;          // init 0
  std::vector<float> running_mean;  // init 0
  std::vector<float> running_var;   // init 1
};

// Sliding matching with a negated l1 kernel:
//   y(b,t,m,n) = bias_t - sum_{i,j,k} |x(b,k,m*s+i-p,n*s+j-p) - w(t,k,i,j)|
// Padding taps read x as zero; every output is <= bias.
Tensor4 adder_forward(const Tensor4& x, const FilterBank& f);

// Plain cross-correlation with the same layout and padding conventions.
Tensor4 conv_forward(const Tensor4& x, const FilterBank& f);

// Dispatch on f.kind().
Tensor4 filter_forward(const Tensor4& x, const FilterBank& f);

// training && !frozen: normalize with biased batch moments, then fold them
// into the running stats as r = (1 - momentum) * r + momentum * batch.
// Otherwise normalizes with the running stats and leaves them untouched.
// Training mode with fewer than two values per channel is an error.
Tensor4 batchnorm_forward(const Tensor4& x, BatchNormState& bn, bool training);

Tensor4 relu(const Tensor4& x);

// Nearest neighbour, each cell becomes a 2x2 block.
Tensor4 upsample_nearest2x(const Tensor4& x);

// (n, c, h, w) -> (n, c, 1, 1)
Tensor4 global_avg_pool(const Tensor4& x);

// Fraction of entries with |v| <= tol. tol = 0 counts exact zeros, which is
// the meaningful reading for post-relu activations.
double sparsity(const Tensor4& x, float tol = 0.0f);

// Named tensor container with string metadata. Single-file format: a text
// header (entry names, shapes, metadata), a DATA marker, then the tensors in
// header order using the binary tensor encoding.
struct Checkpoint {
  std::map<std::string, Tensor4> tensors;
  std::map<std::string, std::string> metadata;

  // Helpers for 1-d entries, stored as (1, len, 1, 1).
  void put_vector(const std::string& name, const std::vector<float>& v);
  std::vector<float> get_vector(const std::string& name) const;
  const Tensor4& get(const std::string& name) const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

}  // namespace adderkit
