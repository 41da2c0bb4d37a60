#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <iosfwd>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "adderkit/gradients.hpp"
#include "adderkit/layers.hpp"
#include "adderkit/necks.hpp"
#include "adderkit/rng.hpp"
#include "adderkit/tensor.hpp"

namespace adderkit {

// ---- optimizer -------------------------------------------------------------

enum class LrSchedule { Cosine, Step };

struct OptimConfig {
  double base_lr = 0.05;
  double lr_min = 0.0;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  LrSchedule schedule = LrSchedule::Cosine;
  std::vector<int> milestones;  // Step schedule: lr *= step_gamma at each
  double step_gamma = 0.1;
  bool adaptive_local_lr = true;  // adder filter grads rescaled to eta*sqrt(k)
  double eta = 0.1;
  int steps = 300;
  int batch_size = 32;
  GradMode input_rule = GradMode::Sign;

  void validate() const;  // throws std::invalid_argument
};

// lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2.
// step must lie in [0, total].
double cosine_lr(int step, int total, double lr_max, double lr_min);

double schedule_lr(const OptimConfig& cfg, int step);

// One optimizable buffer. Gradients live beside the values; the optimizer
// never allocates them. adder_filter marks weights eligible for the adaptive
// per-layer rescale.
struct ParamRef {
  std::string name;
  std::span<float> values;
  std::span<float> grads;
  bool adder_filter = false;
};

// Momentum SGD: v <- momentum * v + (g + weight_decay * p); p <- p - lr * v.
// With adaptive_local_lr, an adder filter's gradient is first rescaled to
// l2 norm eta * sqrt(k); a zero-norm gradient skips the rescale. Velocities
// are keyed by position, so the params vector must keep a stable order.
class SgdOptimizer {
 public:
  explicit SgdOptimizer(const OptimConfig& cfg) : cfg_(cfg) {}

  void step(std::vector<ParamRef>& params, double lr);

 private:
  OptimConfig cfg_;
  std::vector<std::vector<float>> velocity_;
};

// ---- train record ----------------------------------------------------------

struct TrainRecordRow {
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::string layer;
  bool has_bn = false;
  double bn_mean_norm = 0.0;  // l2 norm of the layer's running mean
  double bn_var_norm = 0.0;
  double weight_l2 = 0.0;
};

// Append-only, step indices never decrease.
class TrainRecord {
 public:
  void append(TrainRecordRow row);
  const std::vector<TrainRecordRow>& rows() const { return rows_; }
  bool empty() const { return rows_.empty(); }

 private:
  std::vector<TrainRecordRow> rows_;
};

// Columns: step,loss,lr,layer,bn_mean_norm,bn_var_norm,weight_l2. Layers
// without batchnorm leave the bn fields empty.
void write_train_record_csv(std::ostream& out, const TrainRecord& rec);

// Sum of |delta| of bn_mean_norm over consecutive rows of one layer.
double bn_mean_total_variation(const TrainRecord& rec, const std::string& layer);

// Plain `key=value` lines, '#' comments. Applied onto an OptimConfig;
// unknown keys are an error.
std::map<std::string, std::string> parse_config_file(const std::string& path);
void apply_config(OptimConfig& cfg,
                  const std::map<std::string, std::string>& kv);

// ---- ordered batch prefetch ------------------------------------------------

// Single producer thread evaluating make(0), make(1), ... into a bounded
// queue; pop() hands the batches back strictly in index order, so training
// sees the same sequence whether or not the producer runs ahead.
template <typename Batch>
class OrderedBatchQueue {
 public:
  OrderedBatchQueue(std::function<Batch(int)> make, int total, int capacity = 2)
      : total_(total), capacity_(capacity < 1 ? 1 : capacity) {
    producer_ = std::thread([this, make = std::move(make)] {
      for (int i = 0; i < total_; ++i) {
        Batch b = make(i);
        std::unique_lock<std::mutex> lock(mu_);
        not_full_.wait(lock, [this] {
          return stop_ || static_cast<int>(queue_.size()) < capacity_;
        });
        if (stop_) return;
        queue_.push_back(std::move(b));
        not_empty_.notify_one();
      }
    });
  }

  // Safe to destroy without draining; the producer is told to stop.
  ~OrderedBatchQueue() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      stop_ = true;
    }
    not_full_.notify_all();
    if (producer_.joinable()) producer_.join();
  }

  Batch pop() {
    std::unique_lock<std::mutex> lock(mu_);
    not_empty_.wait(lock, [this] { return !queue_.empty(); });
    Batch b = std::move(queue_.front());
    queue_.pop_front();
    not_full_.notify_one();
    return b;
  }

 private:
  int total_;
  int capacity_;
  bool stop_ = false;
  std::deque<Batch> queue_;
  std::mutex mu_;
  std::condition_variable not_empty_;
  std::condition_variable not_full_;
  std::thread producer_;
};

// ---- datasets --------------------------------------------------------------

struct ClassifierBatch {
  Tensor4 x;  // (n, 1, 16, 16)
  std::vector<int> labels;
};

// The canonical cluster task. The template seed pins the class templates;
// datasets built with it describe the same task regardless of sample seed.
inline constexpr std::uint64_t kClusterTemplateSeed = 0x5eedc1a5;
inline constexpr double kClusterNoise = 0.35;
inline constexpr int kClusterClasses = 3;

// Per-class smoothed random-field templates plus per-sample noise. The
// template seed fixes the classes; the sample seed fixes the draws, so two
// datasets with the same template seed describe the same task.
class ClusterDataset {
 public:
  ClusterDataset(int num_classes, int num_samples, std::uint64_t template_seed,
                 std::uint64_t sample_seed, double noise, bool jitter);

  int size() const { return static_cast<int>(labels_.size()); }
  int num_classes() const { return num_classes_; }

  // count samples starting at index `start`, wrapping around.
  ClassifierBatch make_batch(int start, int count) const;

 private:
  int num_classes_;
  std::vector<Tensor4> images_;  // each (1, 1, 16, 16)
  std::vector<int> labels_;
};

struct DetBox {
  float x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int cls = 0;

  float area() const { return (x1 - x0) * (y1 - y0); }
};

float box_iou(const DetBox& a, const DetBox& b);

struct DetSample {
  Tensor4 image;  // (1, 3, 64, 64)
  std::vector<DetBox> boxes;
};

// Colored rectangles and disks on a noisy background; the class is the
// color channel. 1 to 3 objects per image, overlap-limited placement.
class ShapesDataset {
 public:
  ShapesDataset(int num_samples, std::uint64_t seed);

  int size() const { return static_cast<int>(samples_.size()); }
  const DetSample& sample(int i) const { return samples_[static_cast<std::size_t>(i)]; }

  Tensor4 batch_images(int start, int count) const;  // wraps around
  std::vector<const std::vector<DetBox>*> batch_boxes(int start, int count) const;

 private:
  std::vector<DetSample> samples_;
};

// ---- building blocks -------------------------------------------------------

struct BlockCache {
  Tensor4 in;
  Tensor4 pre_bn;
  Tensor4 pre_relu;
};

// filter [+ batchnorm] [+ relu], with gradient buffers. Caches are passed in
// so one block can be applied at several sites (shared detection head).
class FilterBlock {
 public:
  FilterBlock(FilterKind kind, int c_in, int c_out, int k, int stride,
              bool use_bn, bool use_relu, bool use_bias, Rng& rng);

  Tensor4 forward(const Tensor4& x, bool training, BlockCache& cache);
  // Gradient wrt the block input; parameter gradients accumulate into the
  // block's buffers. `training` must match the forward call.
  Tensor4 backward(const BlockCache& cache, const Tensor4& g_out, GradMode mode,
                   bool training);

  void zero_grads();
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out);
  void save(Checkpoint& ck, const std::string& prefix) const;
  void load(const Checkpoint& ck, const std::string& prefix);
  double weight_l2() const;

  FilterBank filter;
  std::optional<BatchNormState> bn;
  bool use_relu = true;

  Tensor4 gw;
  std::vector<float> gbias, ggamma, gbeta;
};

// ---- toy classifier ---------------------------------------------------------

// stem conv(1>8, 3x3) -> block1 (8>16, 3x3, stride 2) -> block2 (16>16, 3x3)
// -> global average pool -> fc (1x1, bias). block1/block2 use the chosen
// kind; stem and fc stay convolutions.
class ClassifierNet {
 public:
  ClassifierNet(FilterKind block_kind, std::uint64_t seed);

  FilterKind block_kind() const { return block1.filter.kind(); }

  Tensor4 logits(const Tensor4& x, bool training);
  double loss_and_backward(const Tensor4& x, const std::vector<int>& labels,
                           GradMode mode, bool training);
  double eval_loss(const ClusterDataset& data);
  double eval_accuracy(const ClusterDataset& data);

  // Post-relu output of the last block for a batch, eval mode.
  Tensor4 last_block_activations(const Tensor4& x);

  void zero_grads();
  std::vector<ParamRef> params();
  void set_bn_frozen(bool frozen);
  // Multiplies running means by (1 + strength*u) and running variances by
  // exp(strength*u'), u, u' uniform in [-1, 1] from the given seed. Models
  // statistics that have gone stale between pretraining and fine-tuning.
  void perturb_running_stats(double strength, std::uint64_t noise_seed);

  void save(const std::string& path) const;
  static ClassifierNet load_file(const std::string& path);

  void record_rows(TrainRecord& rec, int step, double loss, double lr);

  FilterBlock stem, block1, block2, fc;

 private:
  ClassifierNet(FilterKind block_kind, Rng&& rng);
  BlockCache stem_c_, b1_c_, b2_c_, fc_c_;
  Shape4 pre_pool_shape_{};
};

// mean cross entropy; when grad != nullptr it receives d loss / d logits.
double softmax_cross_entropy(const Tensor4& logits,
                             const std::vector<int>& labels, Tensor4* grad);

// ---- toy detector ------------------------------------------------------------

// stem conv(3>8) -> c1(8>12, s2) -> c2(12>16, s2) -> c3(16>24, s2)
// -> c4(24>32, s2); pyramid taps c2/c3/c4 at strides 4/8/16; neck width 16.
// The head keeps separate class and box branches: each pyramid level owns a
// 3x3+BN+ReLU tower pair per branch (per-level stacks keep the BN statistics
// honest, whatever scale the chosen neck hands over), while the final 3x3
// predictors for 3 class logits / 4 box distances are shared across levels.
// arch = Adder converts every backbone block after the stem plus the neck
// filters; stem and head stay convolutions.
class DetectorNet {
 public:
  DetectorNet(FilterKind arch, NeckKind neck_kind, std::uint64_t seed);

  static const std::vector<int>& strides();

  struct Activations {
    BlockCache stem_c, c1_c, c2_c, c3_c, c4_c;
    NeckActivations neck_acts;
    std::vector<Tensor4> neck_outs;
    std::vector<BlockCache> ct1_c, ct2_c, bt1_c, bt2_c, cls_c, box_c;
    std::vector<Tensor4> cls_logits;  // (n, 3, h, w) per level
    std::vector<Tensor4> box_raw;     // (n, 4, h, w) per level, pre-exp
  };

  void forward(const Tensor4& images, bool training, Activations& acts);
  void backward(const Activations& acts, const std::vector<Tensor4>& g_cls,
                const std::vector<Tensor4>& g_box, GradMode mode,
                bool training);

  void zero_grads();
  std::vector<ParamRef> params();
  void record_rows(TrainRecord& rec, int step, double loss, double lr);

  FilterBlock stem, c1, c2, c3, c4;
  FusionGraph neck;
  NeckParamGrads neck_grads;
  // Indexed [level][layer]; see the class comment for the layout.
  std::vector<std::vector<FilterBlock>> cls_towers, box_towers;
  FilterBlock cls_head, box_head;

 private:
  DetectorNet(FilterKind arch, NeckKind neck_kind, Rng&& rng);
};

// Box distances are predicted as stride * exp(clamp(raw, -6, 6)), so they
// are positive by construction.
float decode_distance(float raw, int stride);

struct Detection {
  DetBox box;
  float score = 0.0f;
};

// Per-image decode: sigmoid scores, threshold, class-wise greedy suppression.
// Without a dedicated center-quality head, neighbouring cells produce
// near-duplicate boxes, so the suppression overlap is kept low.
std::vector<Detection> decode_detections(
    const std::vector<Tensor4>& cls_logits, const std::vector<Tensor4>& box_raw,
    int batch_index, float score_thresh = 0.3f, int max_dets = 20,
    float nms_iou = 0.35f);

// Greedy score-ordered matching at IoU 0.5, class-aware. Returns F1 over the
// whole set.
double detection_f1(const std::vector<std::vector<Detection>>& detections,
                    const std::vector<const std::vector<DetBox>*>& truths);

// Assigns ground truth to head cells (center sampling, size ranges per
// level), then evaluates the focal classification loss plus the smooth-l1
// box loss in log space, normalized by the positive count. The gradients
// are exact, which makes the whole thing finite-difference checkable.
struct DetectionLossResult {
  double loss = 0.0;
  int num_pos = 0;
  std::vector<Tensor4> g_cls;
  std::vector<Tensor4> g_box;
};
DetectionLossResult detection_loss_and_grads(
    const std::vector<Tensor4>& cls_logits, const std::vector<Tensor4>& box_raw,
    const std::vector<const std::vector<DetBox>*>& boxes);

// ---- experiments -------------------------------------------------------------

struct ClassifierExperimentConfig {
  FilterKind arch = FilterKind::Adder;
  bool frozen_bn = false;
  // Fine-tuning starts from this checkpoint; required by train_toy_classifier.
  std::string checkpoint;
  bool inject_stale_stats = true;
  double stale_strength = 0.6;
  OptimConfig optim;
  std::uint64_t seed = 1;
  int train_size = 384;
  int eval_size = 96;
  int record_every = 1;
};

struct ClassifierExperimentResult {
  double initial_eval_loss = 0.0;
  double final_eval_loss = 0.0;
  double final_accuracy = 0.0;
  TrainRecord record;
  ClassifierNet net;
};

// Fine-tunes a pretrained twin on freshly drawn (jittered) data under the
// chosen BN policy. Deterministic for fixed seed and single thread.
ClassifierExperimentResult train_toy_classifier(
    const ClassifierExperimentConfig& cfg);

// From-scratch training on the canonical cluster task; writes the checkpoint
// consumed by train_toy_classifier.
ClassifierExperimentResult pretrain_toy_classifier(FilterKind arch,
                                                   const OptimConfig& optim,
                                                   std::uint64_t seed,
                                                   const std::string& out_path);

struct DetectorExperimentConfig {
  // Detection wants smaller batches and a cooler learning rate than the
  // classifier twins; the residual necks in particular diverge at 0.05.
  DetectorExperimentConfig() {
    optim.base_lr = 0.02;
    optim.batch_size = 8;
  }

  FilterKind arch = FilterKind::Conv;
  NeckKind neck = NeckKind::FPN;
  OptimConfig optim;
  std::uint64_t seed = 1;
  int train_size = 512;
  int eval_size = 40;
  int record_every = 10;
};

struct DetectorExperimentResult {
  double final_train_loss = 0.0;
  double f1 = 0.0;
  TrainRecord record;
};

DetectorExperimentResult train_toy_detector(const DetectorExperimentConfig& cfg);

struct BnStatVarianceResult {
  std::vector<int> batch_sizes;
  std::vector<double> mean_std;  // std of per-batch channel means, averaged
  std::vector<double> var_std;   // same for the variance estimates
};

// Splits `samples` (all one shape, batch dim 1) into disjoint batches of each
// requested size and reports the standard deviation of the per-batch channel
// statistics. Needs at least two batches per size.
BnStatVarianceResult bn_stat_spread(const std::vector<Tensor4>& samples,
                                    const std::vector<int>& batch_sizes);

// Fixed Gaussian data, disjoint batches per batch size; spread of the
// per-batch statistics shrinks as batches grow.
BnStatVarianceResult bn_stat_variance_experiment(
    const std::vector<int>& batch_sizes, std::uint64_t seed);

void write_bn_stat_csv(std::ostream& out, const BnStatVarianceResult& r);

}  // namespace adderkit
