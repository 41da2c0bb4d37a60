#include "adderkit/layers.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "adderkit/detail/kernels.hpp"
#include "adderkit/parallel.hpp"

namespace adderkit {

const char* to_string(FilterKind k) {
  return k == FilterKind::Conv ? "conv" : "adder";
}

FilterKind filter_kind_from_string(const std::string& s) {
  if (s == "conv") return FilterKind::Conv;
  if (s == "adder") return FilterKind::Adder;
  throw std::invalid_argument("unknown filter kind: " + s);
}

FilterBank::FilterBank(FilterKind kind, int c_out, int c_in, int kh, int kw,
                       int stride, int padding, bool has_bias)
    : kind_(kind), geom_{kh, kw, stride, padding} {
  if (c_out < 1 || c_in < 1 || kh < 1 || kw < 1 || stride < 1 || padding < 0) {
    throw std::invalid_argument("bad filter bank configuration");
  }
  weights_ = Tensor4(c_out, c_in, kh, kw);
  if (has_bias) bias_.assign(static_cast<std::size_t>(c_out), 0.0f);
}

void FilterBank::init_gaussian(Rng& rng) {
  const auto& s = weights_.shape();
  const double std = std::sqrt(2.0 / (static_cast<double>(s.h) * s.w * s.c));
  for (std::int64_t i = 0; i < weights_.count(); ++i) {
    weights_.data()[i] = static_cast<float>(rng.normal(0.0, std));
  }
  std::fill(bias_.begin(), bias_.end(), 0.0f);
}

BatchNormState::BatchNormState(int channels) {
  if (channels < 1) throw std::invalid_argument("batchnorm needs channels >= 1");
  gamma.assign(static_cast<std::size_t>(channels), 1.0f);
  beta.assign(static_cast<std::size_t>(channels), 0.0f);
  running_mean.assign(static_cast<std::size_t>(channels), 0.0f);
  running_var.assign(static_cast<std::size_t>(channels), 1.0f);
}

namespace {

detail::FilterGeom resolve(const Tensor4& x, const FilterBank& f) {
  const Shape4& s = x.shape();
  if (s.c != f.c_in()) {
    throw std::invalid_argument("input has " + std::to_string(s.c) +
                                " channels but filter expects " +
                                std::to_string(f.c_in()));
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
  return g;
}

template <void (*Plane)(const float*, const detail::FilterGeom&, const float*,
                        int, float, float*)>
Tensor4 run_filter(const Tensor4& x, const FilterBank& f) {
  const detail::FilterGeom g = resolve(x, f);
  Tensor4 y(x.shape().n, g.c_out, g.oh, g.ow);
  const std::int64_t in_slab = static_cast<std::int64_t>(g.c_in) * g.in_h * g.in_w;
  const std::int64_t out_plane = static_cast<std::int64_t>(g.oh) * g.ow;
  // One task per (batch, out channel) plane; writes are disjoint.
  parallel_for(0, static_cast<std::int64_t>(x.shape().n) * g.c_out,
               [&](std::int64_t task) {
                 const int b = static_cast<int>(task / g.c_out);
                 const int t = static_cast<int>(task % g.c_out);
                 const float bias = f.has_bias() ? f.bias()[t] : 0.0f;
                 Plane(x.data() + b * in_slab, g, f.weights().data(), t, bias,
                       y.data() + task * out_plane);
               });
  return y;
}

}  // namespace

Tensor4 adder_forward(const Tensor4& x, const FilterBank& f) {
  return run_filter<detail::adder_plane<float>>(x, f);
}

Tensor4 conv_forward(const Tensor4& x, const FilterBank& f) {
  return run_filter<detail::conv_plane<float>>(x, f);
}

Tensor4 filter_forward(const Tensor4& x, const FilterBank& f) {
  return f.kind() == FilterKind::Adder ? adder_forward(x, f)
                                       : conv_forward(x, f);
}

Tensor4 batchnorm_forward(const Tensor4& x, BatchNormState& bn, bool training) {
  const Shape4& s = x.shape();
  if (s.c != bn.channels()) {
    throw std::invalid_argument("input has " + std::to_string(s.c) +
                                " channels but batchnorm expects " +
                                std::to_string(bn.channels()));
  }
  const bool use_batch = training && !bn.frozen;
  std::vector<double> mean(static_cast<std::size_t>(s.c));
  std::vector<double> var(static_cast<std::size_t>(s.c));
  if (use_batch) {
    if (static_cast<std::int64_t>(s.n) * s.h * s.w < 2) {
      throw std::invalid_argument(
          "batchnorm training needs at least 2 values per channel");
    }
    detail::channel_moments(x.data(), s.n, s.c, s.h, s.w, mean.data(),
                            var.data());
  } else {
    for (int c = 0; c < s.c; ++c) {
      mean[c] = bn.running_mean[c];
      var[c] = bn.running_var[c];
    }
  }
  Tensor4 y(s);
  detail::bn_apply(x.data(), s.n, s.c, s.h, s.w, mean.data(), var.data(),
                   bn.gamma.data(), bn.beta.data(),
                   static_cast<double>(bn.eps), y.data());
  if (use_batch) {
    const double m = bn.momentum;
    for (int c = 0; c < s.c; ++c) {
      bn.running_mean[c] =
          static_cast<float>((1.0 - m) * bn.running_mean[c] + m * mean[c]);
      bn.running_var[c] =
          static_cast<float>((1.0 - m) * bn.running_var[c] + m * var[c]);
    }
  }
  return y;
}

Tensor4 relu(const Tensor4& x) {
  Tensor4 y(x.shape());
  for (std::int64_t i = 0; i < x.count(); ++i) {
    y.data()[i] = x.data()[i] > 0.0f ? x.data()[i] : 0.0f;
  }
  return y;
}

Tensor4 upsample_nearest2x(const Tensor4& x) {
  const Shape4& s = x.shape();
  Tensor4 y(s.n, s.c, s.h * 2, s.w * 2);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int yy = 0; yy < s.h * 2; ++yy) {
        for (int xx = 0; xx < s.w * 2; ++xx) {
          y(n, c, yy, xx) = x(n, c, yy / 2, xx / 2);
        }
      }
    }
  }
  return y;
}

Tensor4 global_avg_pool(const Tensor4& x) {
  const Shape4& s = x.shape();
  Tensor4 y(s.n, s.c, 1, 1);
  const double inv = 1.0 / (static_cast<double>(s.h) * s.w);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      double acc = 0.0;
      for (int yy = 0; yy < s.h; ++yy) {
        for (int xx = 0; xx < s.w; ++xx) acc += x(n, c, yy, xx);
      }
      y(n, c, 0, 0) = static_cast<float>(acc * inv);
    }
  }
  return y;
}

double sparsity(const Tensor4& x, float tol) {
  if (x.empty()) throw std::invalid_argument("sparsity of empty tensor");
  if (tol < 0.0f) throw std::invalid_argument("sparsity tolerance must be >= 0");
  std::int64_t zeros = 0;
  for (std::int64_t i = 0; i < x.count(); ++i) {
    if (std::abs(x.data()[i]) <= tol) ++zeros;
  }
  return static_cast<double>(zeros) / static_cast<double>(x.count());
}

void Checkpoint::put_vector(const std::string& name,
                            const std::vector<float>& v) {
  if (v.empty()) throw std::invalid_argument("empty vector entry: " + name);
  Tensor4 t(1, static_cast<int>(v.size()), 1, 1);
  std::copy(v.begin(), v.end(), t.data());
  tensors[name] = std::move(t);
}

const Tensor4& Checkpoint::get(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) {
    throw std::runtime_error("checkpoint has no entry named " + name);
  }
  return it->second;
}

std::vector<float> Checkpoint::get_vector(const std::string& name) const {
  const Tensor4& t = get(name);
  return std::vector<float>(t.data(), t.data() + t.count());
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << "AKCK1\n";
  out << "meta " << metadata.size() << "\n";
  for (const auto& [k, v] : metadata) {
    if (k.find_first_of(" \n") != std::string::npos ||
        v.find('\n') != std::string::npos) {
      throw std::invalid_argument("metadata keys must be atoms, values single line");
    }
    out << k << " " << v << "\n";
  }
  out << "tensors " << tensors.size() << "\n";
  for (const auto& [name, t] : tensors) {
    if (name.find_first_of(" \n") != std::string::npos) {
      throw std::invalid_argument("tensor names must not contain spaces");
    }
    const Shape4& s = t.shape();
    out << name << " " << s.n << " " << s.c << " " << s.h << " " << s.w << "\n";
  }
  out << "DATA\n";
  for (const auto& [name, t] : tensors) write_tensor(out, t);
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for read: " + path);
  std::string line;
  auto next_line = [&]() -> std::string {
    if (!std::getline(in, line)) {
      throw std::runtime_error("checkpoint truncated: " + path);
    }
    return line;
  };
  if (next_line() != "AKCK1") {
    throw std::runtime_error("not a checkpoint file: " + path);
  }
  Checkpoint ck;
  std::size_t meta_count = 0;
  {
    std::istringstream ls(next_line());
    std::string tag;
    if (!(ls >> tag >> meta_count) || tag != "meta") {
      throw std::runtime_error("checkpoint header corrupt: " + path);
    }
  }
  for (std::size_t i = 0; i < meta_count; ++i) {
    const std::string ml = next_line();
    const auto sp = ml.find(' ');
    if (sp == std::string::npos) {
      throw std::runtime_error("checkpoint metadata corrupt: " + path);
    }
    ck.metadata[ml.substr(0, sp)] = ml.substr(sp + 1);
  }
  std::size_t tensor_count = 0;
  {
    std::istringstream ls(next_line());
    std::string tag;
    if (!(ls >> tag >> tensor_count) || tag != "tensors") {
      throw std::runtime_error("checkpoint header corrupt: " + path);
    }
  }
  std::vector<std::pair<std::string, Shape4>> order;
  for (std::size_t i = 0; i < tensor_count; ++i) {
    std::istringstream ls(next_line());
    std::string name;
    Shape4 s;
    if (!(ls >> name >> s.n >> s.c >> s.h >> s.w)) {
      throw std::runtime_error("checkpoint tensor header corrupt: " + path);
    }
    order.emplace_back(name, s);
  }
  if (next_line() != "DATA") {
    throw std::runtime_error("checkpoint missing DATA marker: " + path);
  }
  for (const auto& [name, declared] : order) {
    Tensor4 t = read_tensor(in);
    if (!(t.shape() == declared)) {
      throw std::runtime_error("checkpoint entry " + name +
                               " does not match its declared shape");
    }
    ck.tensors[name] = std::move(t);
  }
  return ck;
}

}  // namespace adderkit
