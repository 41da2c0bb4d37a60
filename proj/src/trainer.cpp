#include "adderkit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace adderkit {

namespace {

constexpr std::uint64_t kPretrainSampleSeed = 101;
constexpr std::uint64_t kPretrainEvalSeed = 202;
constexpr std::uint64_t kStaleNoiseSeed = 424242;  // arch-independent

double l2_norm(const std::vector<float>& v) {
  double acc = 0.0;
  for (float x : v) acc += static_cast<double>(x) * x;
  return std::sqrt(acc);
}

}  // namespace

// ---- optimizer -------------------------------------------------------------

void OptimConfig::validate() const {
  if (!(base_lr > 0.0)) throw std::invalid_argument("base_lr must be > 0");
  if (steps < 1) throw std::invalid_argument("steps must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (lr_min < 0.0 || lr_min > base_lr) {
    throw std::invalid_argument("lr_min must lie in [0, base_lr]");
  }
  if (momentum < 0.0 || momentum >= 1.0) {
    throw std::invalid_argument("momentum must lie in [0, 1)");
  }
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
  if (!(eta > 0.0)) throw std::invalid_argument("eta must be > 0");
}

double cosine_lr(int step, int total, double lr_max, double lr_min) {
  if (total < 1) throw std::invalid_argument("total steps must be >= 1");
  if (step < 0 || step > total) {
    throw std::invalid_argument("cosine_lr step outside [0, total]");
  }
  const double phase = 3.14159265358979323846 * static_cast<double>(step) /
                       static_cast<double>(total);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(phase));
}

double schedule_lr(const OptimConfig& cfg, int step) {
  if (cfg.schedule == LrSchedule::Cosine) {
    return cosine_lr(step, cfg.steps, cfg.base_lr, cfg.lr_min);
  }
  double lr = cfg.base_lr;
  for (int m : cfg.milestones) {
    if (step >= m) lr *= cfg.step_gamma;
  }
  return lr;
}

void SgdOptimizer::step(std::vector<ParamRef>& params, double lr) {
  if (velocity_.empty()) {
    velocity_.reserve(params.size());
    for (const ParamRef& p : params) {
      velocity_.emplace_back(p.values.size(), 0.0f);
    }
  }
  if (velocity_.size() != params.size()) {
    throw std::invalid_argument("optimizer was created over a different param set");
  }
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    ParamRef& p = params[pi];
    if (p.values.size() != p.grads.size() ||
        velocity_[pi].size() != p.values.size()) {
      throw std::invalid_argument("param " + p.name + " buffer sizes differ");
    }
    double norm_sq = 0.0;
    for (float g : p.grads) {
      if (!std::isfinite(g)) {
        throw std::runtime_error("non-finite gradient in " + p.name);
      }
      norm_sq += static_cast<double>(g) * g;
    }
    double scale = 1.0;
    if (cfg_.adaptive_local_lr && p.adder_filter && norm_sq > 0.0) {
      scale = cfg_.eta * std::sqrt(static_cast<double>(p.values.size())) /
              std::sqrt(norm_sq);
    }
    std::vector<float>& v = velocity_[pi];
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      const double g = scale * static_cast<double>(p.grads[i]) +
                       cfg_.weight_decay * static_cast<double>(p.values[i]);
      const double vel = cfg_.momentum * static_cast<double>(v[i]) + g;
      v[i] = static_cast<float>(vel);
      p.values[i] = static_cast<float>(static_cast<double>(p.values[i]) - lr * vel);
    }
  }
}

// ---- train record ----------------------------------------------------------

void TrainRecord::append(TrainRecordRow row) {
  if (!rows_.empty() && row.step < rows_.back().step) {
    throw std::invalid_argument("train record steps must not decrease");
  }
  rows_.push_back(std::move(row));
}

void write_train_record_csv(std::ostream& out, const TrainRecord& rec) {
  out << "step,loss,lr,layer,bn_mean_norm,bn_var_norm,weight_l2\n";
  char buf[160];
  for (const TrainRecordRow& r : rec.rows()) {
    std::snprintf(buf, sizeof(buf), "%d,%.6g,%.6g,", r.step, r.loss, r.lr);
    out << buf << r.layer << ",";
    if (r.has_bn) {
      std::snprintf(buf, sizeof(buf), "%.6g,%.6g,", r.bn_mean_norm,
                    r.bn_var_norm);
      out << buf;
    } else {
      out << ",,";
    }
    std::snprintf(buf, sizeof(buf), "%.6g", r.weight_l2);
    out << buf << "\n";
  }
}

double bn_mean_total_variation(const TrainRecord& rec,
                               const std::string& layer) {
  double tv = 0.0;
  bool seen = false;
  double prev = 0.0;
  for (const TrainRecordRow& r : rec.rows()) {
    if (r.layer != layer || !r.has_bn) continue;
    if (seen) tv += std::abs(r.bn_mean_norm - prev);
    prev = r.bn_mean_norm;
    seen = true;
  }
  return tv;
}

// ---- config files ----------------------------------------------------------

std::map<std::string, std::string> parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": expected key=value");
    }
    kv[key] = value;
  }
  return kv;
}

void apply_config(OptimConfig& cfg,
                  const std::map<std::string, std::string>& kv) {
  auto as_double = [](const std::string& k, const std::string& v) {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) {
      throw std::invalid_argument("config key " + k + " has a malformed number");
    }
    return d;
  };
  for (const auto& [key, value] : kv) {
    if (key == "base_lr") cfg.base_lr = as_double(key, value);
    else if (key == "lr_min") cfg.lr_min = as_double(key, value);
    else if (key == "momentum") cfg.momentum = as_double(key, value);
    else if (key == "weight_decay") cfg.weight_decay = as_double(key, value);
    else if (key == "eta") cfg.eta = as_double(key, value);
    else if (key == "step_gamma") cfg.step_gamma = as_double(key, value);
    else if (key == "steps") cfg.steps = static_cast<int>(as_double(key, value));
    else if (key == "batch_size") cfg.batch_size = static_cast<int>(as_double(key, value));
    else if (key == "adaptive_local_lr") cfg.adaptive_local_lr = value != "0";
    else if (key == "input_rule") cfg.input_rule = grad_mode_from_string(value);
    else if (key == "schedule") {
      if (value == "cosine") cfg.schedule = LrSchedule::Cosine;
      else if (value == "step") cfg.schedule = LrSchedule::Step;
      else throw std::invalid_argument("unknown schedule: " + value);
    } else if (key == "milestones") {
      cfg.milestones.clear();
      std::istringstream ms(value);
      std::string tok;
      while (std::getline(ms, tok, ',')) {
        cfg.milestones.push_back(std::stoi(tok));
      }
    } else {
      throw std::invalid_argument("unknown config key: " + key);
    }
  }
  cfg.validate();
}

// ---- datasets --------------------------------------------------------------

namespace {

// 3x3 box blur with edge clamping, applied in place.
void box_blur(Tensor4& t) {
  const Shape4& s = t.shape();
  Tensor4 out(s);
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      double acc = 0.0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = std::clamp(y + dy, 0, s.h - 1);
          const int xx = std::clamp(x + dx, 0, s.w - 1);
          acc += t(0, 0, yy, xx);
        }
      }
      out(0, 0, y, x) = static_cast<float>(acc / 9.0);
    }
  }
  t = std::move(out);
}

void standardize(Tensor4& t) {
  const TensorStats st = tensor_stats(t, false);
  const double inv = 1.0 / std::sqrt(st.var[0] + 1e-8);
  for (std::int64_t i = 0; i < t.count(); ++i) {
    t.data()[i] = static_cast<float>((t.data()[i] - st.mean[0]) * inv);
  }
}

Tensor4 shifted(const Tensor4& t, int dy, int dx) {
  const Shape4& s = t.shape();
  Tensor4 out(s);
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      const int yy = (y - dy + s.h) % s.h;
      const int xx = (x - dx + s.w) % s.w;
      out(0, 0, y, x) = t(0, 0, yy, xx);
    }
  }
  return out;
}

}  // namespace

ClusterDataset::ClusterDataset(int num_classes, int num_samples,
                               std::uint64_t template_seed,
                               std::uint64_t sample_seed, double noise,
                               bool jitter)
    : num_classes_(num_classes) {
  if (num_classes < 2 || num_samples < num_classes) {
    throw std::invalid_argument("cluster dataset needs >= 2 classes and enough samples");
  }
  Rng trng(template_seed);
  std::vector<Tensor4> templates;
  templates.reserve(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) {
    Tensor4 t(1, 1, 16, 16);
    for (std::int64_t i = 0; i < t.count(); ++i) {
      t.data()[i] = static_cast<float>(trng.normal());
    }
    box_blur(t);
    box_blur(t);
    standardize(t);
    templates.push_back(std::move(t));
  }

  Rng srng(sample_seed);
  images_.reserve(static_cast<std::size_t>(num_samples));
  labels_.reserve(static_cast<std::size_t>(num_samples));
  for (int i = 0; i < num_samples; ++i) {
    const int label = i % num_classes;
    Tensor4 img = templates[static_cast<std::size_t>(label)];
    if (jitter) {
      const int dy = srng.uniform_int(-1, 1);
      const int dx = srng.uniform_int(-1, 1);
      img = shifted(img, dy, dx);
    }
    for (std::int64_t j = 0; j < img.count(); ++j) {
      img.data()[j] += static_cast<float>(noise * srng.normal());
    }
    images_.push_back(std::move(img));
    labels_.push_back(label);
  }
}

ClassifierBatch ClusterDataset::make_batch(int start, int count) const {
  if (count < 1) throw std::invalid_argument("batch needs count >= 1");
  ClassifierBatch b;
  b.x = Tensor4(count, 1, 16, 16);
  b.labels.resize(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int idx = (start + i) % size();
    const Tensor4& img = images_[static_cast<std::size_t>(idx)];
    std::copy(img.data(), img.data() + img.count(),
              b.x.data() + b.x.index(i, 0, 0, 0));
    b.labels[static_cast<std::size_t>(i)] = labels_[static_cast<std::size_t>(idx)];
  }
  return b;
}

float box_iou(const DetBox& a, const DetBox& b) {
  const float ix0 = std::max(a.x0, b.x0);
  const float iy0 = std::max(a.y0, b.y0);
  const float ix1 = std::min(a.x1, b.x1);
  const float iy1 = std::min(a.y1, b.y1);
  const float iw = std::max(0.0f, ix1 - ix0);
  const float ih = std::max(0.0f, iy1 - iy0);
  const float inter = iw * ih;
  const float uni = a.area() + b.area() - inter;
  return uni > 0.0f ? inter / uni : 0.0f;
}

ShapesDataset::ShapesDataset(int num_samples, std::uint64_t seed) {
  if (num_samples < 1) throw std::invalid_argument("shapes dataset needs samples");
  Rng base(seed);
  samples_.reserve(static_cast<std::size_t>(num_samples));
  for (int i = 0; i < num_samples; ++i) {
    Rng rng = base.fork(static_cast<std::uint64_t>(i) + 1);
    DetSample s;
    s.image = Tensor4(1, 3, 64, 64);
    for (int c = 0; c < 3; ++c) {
      const float base_level = static_cast<float>(rng.uniform(0.05, 0.20));
      for (int y = 0; y < 64; ++y) {
        for (int x = 0; x < 64; ++x) {
          s.image(0, c, y, x) =
              base_level + static_cast<float>(0.04 * rng.normal());
        }
      }
    }
    const int want = rng.uniform_int(1, 3);
    for (int k = 0; k < want; ++k) {
      for (int attempt = 0; attempt < 25; ++attempt) {
        const int cls = rng.uniform_int(0, 2);
        const bool disk = rng.uniform() < 0.5;
        const float hw = static_cast<float>(rng.uniform(4.0, 16.0));
        const float hh = disk ? hw : static_cast<float>(rng.uniform(4.0, 16.0));
        const float cx = static_cast<float>(rng.uniform(hw + 2.0, 62.0 - hw));
        const float cy = static_cast<float>(rng.uniform(hh + 2.0, 62.0 - hh));
        DetBox box{cx - hw, cy - hh, cx + hw, cy + hh, cls};
        bool ok = true;
        for (const DetBox& other : s.boxes) {
          if (box_iou(box, other) > 0.1f) {
            ok = false;
            break;
          }
        }
        if (!ok) continue;
        const float level = static_cast<float>(rng.uniform(0.80, 1.00));
        for (int y = static_cast<int>(box.y0); y <= static_cast<int>(box.y1); ++y) {
          for (int x = static_cast<int>(box.x0); x <= static_cast<int>(box.x1); ++x) {
            if (y < 0 || y >= 64 || x < 0 || x >= 64) continue;
            const float px = static_cast<float>(x) + 0.5f;
            const float py = static_cast<float>(y) + 0.5f;
            if (disk) {
              const float dx = px - cx;
              const float dy = py - cy;
              if (dx * dx + dy * dy > hw * hw) continue;
            }
            for (int c = 0; c < 3; ++c) {
              s.image(0, c, y, x) = c == cls ? level : 0.05f;
            }
          }
        }
        s.boxes.push_back(box);
        break;
      }
    }
    samples_.push_back(std::move(s));
  }
}

Tensor4 ShapesDataset::batch_images(int start, int count) const {
  if (count < 1) throw std::invalid_argument("batch needs count >= 1");
  Tensor4 out(count, 3, 64, 64);
  for (int i = 0; i < count; ++i) {
    const Tensor4& img = samples_[static_cast<std::size_t>((start + i) % size())].image;
    std::copy(img.data(), img.data() + img.count(),
              out.data() + out.index(i, 0, 0, 0));
  }
  return out;
}

std::vector<const std::vector<DetBox>*> ShapesDataset::batch_boxes(
    int start, int count) const {
  std::vector<const std::vector<DetBox>*> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    out.push_back(&samples_[static_cast<std::size_t>((start + i) % size())].boxes);
  }
  return out;
}

// ---- blocks ------------------------------------------------------------------

FilterBlock::FilterBlock(FilterKind kind, int c_in, int c_out, int k,
                         int stride, bool use_bn, bool relu_after,
                         bool use_bias, Rng& rng)
    : filter(kind, c_out, c_in, k, k, stride, k / 2, use_bias),
      use_relu(relu_after) {
  filter.init_gaussian(rng);
  if (use_bn) bn.emplace(c_out);
  zero_grads();
}

Tensor4 FilterBlock::forward(const Tensor4& x, bool training,
                             BlockCache& cache) {
  cache.in = x;
  cache.pre_bn = filter_forward(x, filter);
  Tensor4 t = bn ? batchnorm_forward(cache.pre_bn, *bn, training)
                 : cache.pre_bn;
  cache.pre_relu = std::move(t);
  return use_relu ? relu(cache.pre_relu) : cache.pre_relu;
}

Tensor4 FilterBlock::backward(const BlockCache& cache, const Tensor4& g_out,
                              GradMode mode, bool training) {
  Tensor4 g = use_relu ? relu_backward(cache.pre_relu, g_out) : g_out;
  if (bn) {
    const bool use_batch = training && !bn->frozen;
    BatchNormGrads bg = batchnorm_backward(cache.pre_bn, *bn, g, use_batch);
    for (std::size_t i = 0; i < ggamma.size(); ++i) {
      ggamma[i] += bg.gamma[i];
      gbeta[i] += bg.beta[i];
    }
    g = std::move(bg.input);
  }
  if (filter.has_bias()) {
    const std::vector<float> gb = filter_backward_bias(g);
    for (std::size_t i = 0; i < gbias.size(); ++i) gbias[i] += gb[i];
  }
  Tensor4 g_in;
  if (filter.kind() == FilterKind::Adder) {
    const Tensor4 gw_part = adder_backward_weight(cache.in, filter, g);
    for (std::int64_t i = 0; i < gw.count(); ++i) {
      gw.data()[i] += gw_part.data()[i];
    }
    g_in = adder_backward_input(cache.in, filter, g, mode);
  } else {
    ConvGrads cg = conv_backward(cache.in, filter, g);
    for (std::int64_t i = 0; i < gw.count(); ++i) {
      gw.data()[i] += cg.weight.data()[i];
    }
    g_in = std::move(cg.input);
  }
  return g_in;
}

void FilterBlock::zero_grads() {
  // In-place when possible so ParamRef spans survive the reset.
  if (gw.shape() == filter.weights().shape()) {
    gw.fill(0.0f);
  } else {
    gw = Tensor4(filter.weights().shape());
  }
  gbias.assign(filter.bias().size(), 0.0f);
  if (bn) {
    ggamma.assign(static_cast<std::size_t>(bn->channels()), 0.0f);
    gbeta.assign(static_cast<std::size_t>(bn->channels()), 0.0f);
  }
}

void FilterBlock::collect_params(const std::string& prefix,
                                 std::vector<ParamRef>& out) {
  const bool adder = filter.kind() == FilterKind::Adder;
  out.push_back({prefix + ".w",
                 {filter.weights().data(), static_cast<std::size_t>(filter.weights().count())},
                 {gw.data(), static_cast<std::size_t>(gw.count())},
                 adder});
  if (filter.has_bias()) {
    out.push_back({prefix + ".b", filter.bias(), gbias, false});
  }
  if (bn) {
    out.push_back({prefix + ".bn.gamma", bn->gamma, ggamma, false});
    out.push_back({prefix + ".bn.beta", bn->beta, gbeta, false});
  }
}

void FilterBlock::save(Checkpoint& ck, const std::string& prefix) const {
  ck.tensors[prefix + ".w"] = filter.weights();
  if (filter.has_bias()) ck.put_vector(prefix + ".b", filter.bias());
  if (bn) {
    ck.put_vector(prefix + ".bn.gamma", bn->gamma);
    ck.put_vector(prefix + ".bn.beta", bn->beta);
    ck.put_vector(prefix + ".bn.rmean", bn->running_mean);
    ck.put_vector(prefix + ".bn.rvar", bn->running_var);
  }
}

void FilterBlock::load(const Checkpoint& ck, const std::string& prefix) {
  const Tensor4& w = ck.get(prefix + ".w");
  if (!(w.shape() == filter.weights().shape())) {
    throw std::runtime_error("checkpoint entry " + prefix +
                             ".w has shape " + w.shape().str() +
                             ", expected " + filter.weights().shape().str());
  }
  filter.weights() = w;
  if (filter.has_bias()) {
    auto b = ck.get_vector(prefix + ".b");
    if (b.size() != filter.bias().size()) {
      throw std::runtime_error("checkpoint entry " + prefix + ".b has wrong size");
    }
    filter.bias() = std::move(b);
  }
  if (bn) {
    auto expect = [&](const std::string& name) {
      auto v = ck.get_vector(name);
      if (static_cast<int>(v.size()) != bn->channels()) {
        throw std::runtime_error("checkpoint entry " + name + " has wrong size");
      }
      return v;
    };
    bn->gamma = expect(prefix + ".bn.gamma");
    bn->beta = expect(prefix + ".bn.beta");
    bn->running_mean = expect(prefix + ".bn.rmean");
    bn->running_var = expect(prefix + ".bn.rvar");
  }
}

double FilterBlock::weight_l2() const {
  double acc = 0.0;
  for (std::int64_t i = 0; i < filter.weights().count(); ++i) {
    const double v = filter.weights().data()[i];
    acc += v * v;
  }
  return std::sqrt(acc);
}

// ---- classifier ---------------------------------------------------------------

ClassifierNet::ClassifierNet(FilterKind block_kind, Rng&& rng)
    : stem(FilterKind::Conv, 1, 8, 3, 1, true, true, false, rng),
      block1(block_kind, 8, 16, 3, 2, true, true, false, rng),
      block2(block_kind, 16, 16, 3, 1, true, true, false, rng),
      fc(FilterKind::Conv, 16, kClusterClasses, 1, 1, false, false, true, rng) {}

ClassifierNet::ClassifierNet(FilterKind block_kind, std::uint64_t seed)
    : ClassifierNet(block_kind, Rng(seed)) {}

Tensor4 ClassifierNet::logits(const Tensor4& x, bool training) {
  Tensor4 t = stem.forward(x, training, stem_c_);
  t = block1.forward(t, training, b1_c_);
  t = block2.forward(t, training, b2_c_);
  pre_pool_shape_ = t.shape();
  t = global_avg_pool(t);
  return fc.forward(t, training, fc_c_);
}

double softmax_cross_entropy(const Tensor4& logits,
                             const std::vector<int>& labels, Tensor4* grad) {
  const Shape4& s = logits.shape();
  if (s.h != 1 || s.w != 1 || labels.size() != static_cast<std::size_t>(s.n)) {
    throw std::invalid_argument("cross entropy expects (n, classes, 1, 1) logits");
  }
  if (grad) *grad = Tensor4(s);
  double total = 0.0;
  for (int n = 0; n < s.n; ++n) {
    const int label = labels[static_cast<std::size_t>(n)];
    if (label < 0 || label >= s.c) {
      throw std::invalid_argument("label out of range");
    }
    double mx = logits(n, 0, 0, 0);
    for (int c = 1; c < s.c; ++c) mx = std::max(mx, static_cast<double>(logits(n, c, 0, 0)));
    double denom = 0.0;
    for (int c = 0; c < s.c; ++c) denom += std::exp(logits(n, c, 0, 0) - mx);
    const double log_denom = std::log(denom);
    total += -(logits(n, label, 0, 0) - mx - log_denom);
    if (grad) {
      for (int c = 0; c < s.c; ++c) {
        const double p = std::exp(logits(n, c, 0, 0) - mx - log_denom);
        (*grad)(n, c, 0, 0) = static_cast<float>(
            (p - (c == label ? 1.0 : 0.0)) / static_cast<double>(s.n));
      }
    }
  }
  return total / static_cast<double>(s.n);
}

double ClassifierNet::loss_and_backward(const Tensor4& x,
                                        const std::vector<int>& labels,
                                        GradMode mode, bool training) {
  const Tensor4 z = logits(x, training);
  Tensor4 gz;
  const double loss = softmax_cross_entropy(z, labels, &gz);
  Tensor4 g = fc.backward(fc_c_, gz, mode, training);
  g = global_avg_pool_backward(g, pre_pool_shape_.h, pre_pool_shape_.w);
  g = block2.backward(b2_c_, g, mode, training);
  g = block1.backward(b1_c_, g, mode, training);
  stem.backward(stem_c_, g, mode, training);
  return loss;
}

namespace {

template <typename Fn>
void for_eval_batches(const ClusterDataset& data, Fn&& fn) {
  const int chunk = 32;
  for (int start = 0; start < data.size(); start += chunk) {
    const int count = std::min(chunk, data.size() - start);
    fn(data.make_batch(start, count), count);
  }
}

}  // namespace

double ClassifierNet::eval_loss(const ClusterDataset& data) {
  double total = 0.0;
  for_eval_batches(data, [&](const ClassifierBatch& b, int count) {
    const Tensor4 z = logits(b.x, false);
    total += softmax_cross_entropy(z, b.labels, nullptr) * count;
  });
  return total / data.size();
}

double ClassifierNet::eval_accuracy(const ClusterDataset& data) {
  int correct = 0;
  for_eval_batches(data, [&](const ClassifierBatch& b, int count) {
    const Tensor4 z = logits(b.x, false);
    for (int n = 0; n < count; ++n) {
      int best = 0;
      for (int c = 1; c < z.shape().c; ++c) {
        if (z(n, c, 0, 0) > z(n, best, 0, 0)) best = c;
      }
      if (best == b.labels[static_cast<std::size_t>(n)]) ++correct;
    }
  });
  return static_cast<double>(correct) / data.size();
}

Tensor4 ClassifierNet::last_block_activations(const Tensor4& x) {
  Tensor4 t = stem.forward(x, false, stem_c_);
  t = block1.forward(t, false, b1_c_);
  return block2.forward(t, false, b2_c_);
}

void ClassifierNet::zero_grads() {
  stem.zero_grads();
  block1.zero_grads();
  block2.zero_grads();
  fc.zero_grads();
}

std::vector<ParamRef> ClassifierNet::params() {
  std::vector<ParamRef> out;
  stem.collect_params("stem", out);
  block1.collect_params("block1", out);
  block2.collect_params("block2", out);
  fc.collect_params("fc", out);
  return out;
}

void ClassifierNet::set_bn_frozen(bool frozen) {
  for (FilterBlock* b : {&stem, &block1, &block2}) {
    if (b->bn) b->bn->frozen = frozen;
  }
}

void ClassifierNet::perturb_running_stats(double strength,
                                          std::uint64_t noise_seed) {
  Rng rng(noise_seed);
  for (FilterBlock* b : {&stem, &block1, &block2}) {
    if (!b->bn) continue;
    for (int c = 0; c < b->bn->channels(); ++c) {
      const double u_mean = rng.uniform(-1.0, 1.0);
      const double u_var = rng.uniform(-1.0, 1.0);
      b->bn->running_mean[c] =
          static_cast<float>(b->bn->running_mean[c] * (1.0 + strength * u_mean));
      b->bn->running_var[c] =
          static_cast<float>(b->bn->running_var[c] * std::exp(strength * u_var));
    }
  }
}

void ClassifierNet::save(const std::string& path) const {
  Checkpoint ck;
  ck.metadata["format"] = "toy-classifier-v1";
  ck.metadata["arch"] = to_string(block1.filter.kind());
  stem.save(ck, "stem");
  block1.save(ck, "block1");
  block2.save(ck, "block2");
  fc.save(ck, "fc");
  ck.save(path);
}

ClassifierNet ClassifierNet::load_file(const std::string& path) {
  const Checkpoint ck = Checkpoint::load(path);
  auto fmt = ck.metadata.find("format");
  if (fmt == ck.metadata.end() || fmt->second != "toy-classifier-v1") {
    throw std::runtime_error(path + " is not a toy classifier checkpoint");
  }
  auto arch = ck.metadata.find("arch");
  if (arch == ck.metadata.end()) {
    throw std::runtime_error(path + " is missing arch metadata");
  }
  ClassifierNet net(filter_kind_from_string(arch->second), std::uint64_t{0});
  net.stem.load(ck, "stem");
  net.block1.load(ck, "block1");
  net.block2.load(ck, "block2");
  net.fc.load(ck, "fc");
  return net;
}

void ClassifierNet::record_rows(TrainRecord& rec, int step, double loss,
                                double lr) {
  auto row = [&](const char* name, const FilterBlock& b) {
    TrainRecordRow r;
    r.step = step;
    r.loss = loss;
    r.lr = lr;
    r.layer = name;
    r.weight_l2 = b.weight_l2();
    if (b.bn) {
      r.has_bn = true;
      r.bn_mean_norm = l2_norm(b.bn->running_mean);
      r.bn_var_norm = l2_norm(b.bn->running_var);
    }
    rec.append(std::move(r));
  };
  row("stem", stem);
  row("block1", block1);
  row("block2", block2);
  row("fc", fc);
}

// ---- classifier experiments ------------------------------------------------

namespace {

ClassifierExperimentResult run_classifier_training(
    ClassifierNet net, const OptimConfig& optim, const ClusterDataset& train,
    const ClusterDataset& eval, GradMode mode, int record_every) {
  const double initial = net.eval_loss(eval);
  SgdOptimizer opt(optim);
  std::vector<ParamRef> params = net.params();
  TrainRecord rec;
  const int bs = optim.batch_size;
  OrderedBatchQueue<ClassifierBatch> queue(
      [&train, bs](int i) { return train.make_batch((i * bs) % train.size(), bs); },
      optim.steps);
  for (int step = 0; step < optim.steps; ++step) {
    const ClassifierBatch batch = queue.pop();
    const double lr = schedule_lr(optim, step);
    net.zero_grads();
    const double loss = net.loss_and_backward(batch.x, batch.labels, mode, true);
    opt.step(params, lr);
    if (step % record_every == 0 || step == optim.steps - 1) {
      net.record_rows(rec, step, loss, lr);
    }
  }
  const double final_loss = net.eval_loss(eval);
  const double acc = net.eval_accuracy(eval);
  return ClassifierExperimentResult{initial, final_loss, acc, std::move(rec),
                                    std::move(net)};
}

}  // namespace

ClassifierExperimentResult train_toy_classifier(
    const ClassifierExperimentConfig& cfg) {
  cfg.optim.validate();
  if (cfg.checkpoint.empty()) {
    throw std::invalid_argument(
        "fine-tuning needs a pretrained checkpoint (see the pretrain task)");
  }
  ClassifierNet net = ClassifierNet::load_file(cfg.checkpoint);
  if (net.block_kind() != cfg.arch) {
    throw std::runtime_error("checkpoint arch is " +
                             std::string(to_string(net.block_kind())) +
                             " but the experiment asked for " +
                             to_string(cfg.arch));
  }
  if (cfg.inject_stale_stats) {
    net.perturb_running_stats(cfg.stale_strength, kStaleNoiseSeed);
  }
  net.set_bn_frozen(cfg.frozen_bn);

  const ClusterDataset train(kClusterClasses, cfg.train_size, kClusterTemplateSeed,
                             2000 + cfg.seed, kClusterNoise, true);
  const ClusterDataset eval(kClusterClasses, cfg.eval_size, kClusterTemplateSeed,
                            3000 + cfg.seed, kClusterNoise, true);
  return run_classifier_training(std::move(net), cfg.optim, train, eval,
                                 cfg.optim.input_rule, cfg.record_every);
}

ClassifierExperimentResult pretrain_toy_classifier(FilterKind arch,
                                                   const OptimConfig& optim,
                                                   std::uint64_t seed,
                                                   const std::string& out_path) {
  optim.validate();
  ClassifierNet net(arch, 7000 + seed);
  const ClusterDataset train(kClusterClasses, 512, kClusterTemplateSeed,
                             kPretrainSampleSeed + seed, kClusterNoise, false);
  const ClusterDataset eval(kClusterClasses, 96, kClusterTemplateSeed,
                            kPretrainEvalSeed + seed, kClusterNoise, false);
  ClassifierExperimentResult res = run_classifier_training(
      std::move(net), optim, train, eval, optim.input_rule, 1);
  if (!out_path.empty()) res.net.save(out_path);
  return res;
}

// ---- bn statistic spread -----------------------------------------------------

BnStatVarianceResult bn_stat_spread(const std::vector<Tensor4>& samples,
                                    const std::vector<int>& batch_sizes) {
  if (samples.empty()) throw std::invalid_argument("no samples");
  if (batch_sizes.empty()) throw std::invalid_argument("no batch sizes");
  const Shape4 s = samples[0].shape();
  BnStatVarianceResult out;
  for (int bs : batch_sizes) {
    if (bs < 1) throw std::invalid_argument("batch size must be >= 1");
    const int num_batches = static_cast<int>(samples.size()) / bs;
    if (num_batches < 2) {
      throw std::invalid_argument("not enough samples for batch size " +
                                  std::to_string(bs));
    }
    // Per-channel lists of the per-batch estimates.
    std::vector<std::vector<double>> means(static_cast<std::size_t>(s.c));
    std::vector<std::vector<double>> vars(static_cast<std::size_t>(s.c));
    for (int b = 0; b < num_batches; ++b) {
      Tensor4 batch(bs, s.c, s.h, s.w);
      for (int i = 0; i < bs; ++i) {
        const Tensor4& t = samples[static_cast<std::size_t>(b * bs + i)];
        std::copy(t.data(), t.data() + t.count(),
                  batch.data() + batch.index(i, 0, 0, 0));
      }
      const TensorStats st = tensor_stats(batch, true);
      for (int c = 0; c < s.c; ++c) {
        means[static_cast<std::size_t>(c)].push_back(st.mean[static_cast<std::size_t>(c)]);
        vars[static_cast<std::size_t>(c)].push_back(st.var[static_cast<std::size_t>(c)]);
      }
    }
    auto spread = [](const std::vector<double>& v) {
      double mean = 0.0;
      for (double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      double acc = 0.0;
      for (double x : v) acc += (x - mean) * (x - mean);
      return std::sqrt(acc / static_cast<double>(v.size()));
    };
    double mean_std = 0.0, var_std = 0.0;
    for (int c = 0; c < s.c; ++c) {
      mean_std += spread(means[static_cast<std::size_t>(c)]);
      var_std += spread(vars[static_cast<std::size_t>(c)]);
    }
    out.batch_sizes.push_back(bs);
    out.mean_std.push_back(mean_std / s.c);
    out.var_std.push_back(var_std / s.c);
  }
  return out;
}

BnStatVarianceResult bn_stat_variance_experiment(
    const std::vector<int>& batch_sizes, std::uint64_t seed) {
  Rng rng(seed);
  const int total = 960;
  std::vector<Tensor4> samples;
  samples.reserve(total);
  for (int i = 0; i < total; ++i) {
    Tensor4 t(1, 4, 6, 6);
    for (int c = 0; c < 4; ++c) {
      const double mu = 0.5 * c;
      const double sigma = 1.0 + 0.25 * c;
      for (int y = 0; y < 6; ++y) {
        for (int x = 0; x < 6; ++x) {
          t(0, c, y, x) = static_cast<float>(rng.normal(mu, sigma));
        }
      }
    }
    samples.push_back(std::move(t));
  }
  return bn_stat_spread(samples, batch_sizes);
}

void write_bn_stat_csv(std::ostream& out, const BnStatVarianceResult& r) {
  out << "batch_size,mean_std,var_std\n";
  char buf[96];
  for (std::size_t i = 0; i < r.batch_sizes.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%d,%.6g,%.6g", r.batch_sizes[i],
                  r.mean_std[i], r.var_std[i]);
    out << buf << "\n";
  }
}

}  // namespace adderkit
