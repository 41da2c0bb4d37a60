#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "adderkit/trainer.hpp"

namespace adderkit {

namespace {

constexpr float kFocalAlpha = 0.25f;
constexpr float kFocalGamma = 2.0f;
constexpr float kClsBiasInit = -4.59f;  // sigmoid ~ 0.01
// Log-space offset of a typical object side, so box regression starts near
// the data mean instead of spending its first steps on violent corrections.
constexpr float kBoxBiasInit = 0.4f;
constexpr float kCenterRadius = 1.5f;

void add_into(Tensor4& dst, const Tensor4& src) {
  if (!(dst.shape() == src.shape())) {
    throw std::logic_error("gradient shape mismatch");
  }
  for (std::int64_t i = 0; i < dst.count(); ++i) {
    dst.data()[i] += src.data()[i];
  }
}

}  // namespace

DetectorNet::DetectorNet(FilterKind arch, NeckKind neck_kind, Rng&& rng)
    : stem(FilterKind::Conv, 3, 8, 3, 1, true, true, false, rng),
      c1(arch, 8, 12, 3, 2, true, true, false, rng),
      c2(arch, 12, 16, 3, 2, true, true, false, rng),
      c3(arch, 16, 24, 3, 2, true, true, false, rng),
      c4(arch, 24, 32, 3, 2, true, true, false, rng),
      neck(build_neck(NeckConfig{neck_kind, arch, 16, 0}, {16, 24, 32}, rng)),
      cls_head(FilterKind::Conv, 16, 3, 3, 1, false, false, true, rng),
      box_head(FilterKind::Conv, 16, 4, 3, 1, false, false, true, rng) {
  const std::size_t levels = strides().size();
  for (auto* towers : {&cls_towers, &box_towers}) {
    towers->reserve(levels);
    for (std::size_t lvl = 0; lvl < levels; ++lvl) {
      std::vector<FilterBlock> stack;
      stack.reserve(2);
      stack.emplace_back(FilterKind::Conv, 16, 16, 3, 1, true, true, false,
                         rng);
      stack.emplace_back(FilterKind::Conv, 16, 16, 3, 1, true, true, false,
                         rng);
      towers->push_back(std::move(stack));
    }
  }
  neck_grads.init(neck);
  std::fill(cls_head.filter.bias().begin(), cls_head.filter.bias().end(),
            kClsBiasInit);
  std::fill(box_head.filter.bias().begin(), box_head.filter.bias().end(),
            kBoxBiasInit);
}

DetectorNet::DetectorNet(FilterKind arch, NeckKind neck_kind,
                         std::uint64_t seed)
    : DetectorNet(arch, neck_kind, Rng(seed)) {}

const std::vector<int>& DetectorNet::strides() {
  static const std::vector<int> s{4, 8, 16};
  return s;
}

void DetectorNet::forward(const Tensor4& images, bool training,
                          Activations& acts) {
  Tensor4 t = stem.forward(images, training, acts.stem_c);
  t = c1.forward(t, training, acts.c1_c);
  const Tensor4 x2 = c2.forward(t, training, acts.c2_c);
  const Tensor4 x3 = c3.forward(x2, training, acts.c3_c);
  const Tensor4 x4 = c4.forward(x3, training, acts.c4_c);
  acts.neck_outs = neck_forward(neck, {x2, x3, x4}, training, &acts.neck_acts);

  const std::size_t levels = acts.neck_outs.size();
  acts.ct1_c.resize(levels);
  acts.ct2_c.resize(levels);
  acts.bt1_c.resize(levels);
  acts.bt2_c.resize(levels);
  acts.cls_c.resize(levels);
  acts.box_c.resize(levels);
  acts.cls_logits.resize(levels);
  acts.box_raw.resize(levels);
  for (std::size_t lvl = 0; lvl < levels; ++lvl) {
    Tensor4 hc = cls_towers[lvl][0].forward(acts.neck_outs[lvl], training,
                                            acts.ct1_c[lvl]);
    hc = cls_towers[lvl][1].forward(hc, training, acts.ct2_c[lvl]);
    acts.cls_logits[lvl] = cls_head.forward(hc, training, acts.cls_c[lvl]);
    Tensor4 hb = box_towers[lvl][0].forward(acts.neck_outs[lvl], training,
                                            acts.bt1_c[lvl]);
    hb = box_towers[lvl][1].forward(hb, training, acts.bt2_c[lvl]);
    acts.box_raw[lvl] = box_head.forward(hb, training, acts.box_c[lvl]);
  }
}

void DetectorNet::backward(const Activations& acts,
                           const std::vector<Tensor4>& g_cls,
                           const std::vector<Tensor4>& g_box, GradMode mode,
                           bool training) {
  const std::size_t levels = acts.neck_outs.size();
  if (g_cls.size() != levels || g_box.size() != levels) {
    throw std::invalid_argument("head gradients must cover every level");
  }
  std::vector<Tensor4> g_neck(levels);
  for (std::size_t lvl = 0; lvl < levels; ++lvl) {
    Tensor4 gc = cls_head.backward(acts.cls_c[lvl], g_cls[lvl], mode, training);
    gc = cls_towers[lvl][1].backward(acts.ct2_c[lvl], gc, mode, training);
    g_neck[lvl] =
        cls_towers[lvl][0].backward(acts.ct1_c[lvl], gc, mode, training);
    Tensor4 gb = box_head.backward(acts.box_c[lvl], g_box[lvl], mode, training);
    gb = box_towers[lvl][1].backward(acts.bt2_c[lvl], gb, mode, training);
    add_into(g_neck[lvl],
             box_towers[lvl][0].backward(acts.bt1_c[lvl], gb, mode, training));
  }
  const std::vector<Tensor4> g_pyr =
      neck_backward(neck, acts.neck_acts, g_neck, mode, training, neck_grads);

  Tensor4 g = c4.backward(acts.c4_c, g_pyr[2], mode, training);
  add_into(g, g_pyr[1]);
  g = c3.backward(acts.c3_c, g, mode, training);
  add_into(g, g_pyr[0]);
  g = c2.backward(acts.c2_c, g, mode, training);
  g = c1.backward(acts.c1_c, g, mode, training);
  stem.backward(acts.stem_c, g, mode, training);
}

void DetectorNet::zero_grads() {
  for (FilterBlock* b : {&stem, &c1, &c2, &c3, &c4, &cls_head, &box_head}) {
    b->zero_grads();
  }
  for (auto* towers : {&cls_towers, &box_towers}) {
    for (auto& stack : *towers) {
      for (FilterBlock& b : stack) b.zero_grads();
    }
  }
  neck_grads.init(neck);
}

std::vector<ParamRef> DetectorNet::params() {
  std::vector<ParamRef> out;
  stem.collect_params("stem", out);
  c1.collect_params("c1", out);
  c2.collect_params("c2", out);
  c3.collect_params("c3", out);
  c4.collect_params("c4", out);
  const bool adder_neck = neck.filter_kind == FilterKind::Adder;
  for (FusionNode& node : neck.nodes) {
    if (!node.filter) continue;
    const std::size_t i = static_cast<std::size_t>(node.id);
    const std::string prefix = "neck.n" + std::to_string(node.id);
    Tensor4& w = node.filter->weights();
    out.push_back({prefix + ".w",
                   {w.data(), static_cast<std::size_t>(w.count())},
                   {neck_grads.weight[i].data(),
                    static_cast<std::size_t>(neck_grads.weight[i].count())},
                   adder_neck});
    out.push_back({prefix + ".bn.gamma", node.bn->gamma, neck_grads.gamma[i],
                   false});
    out.push_back({prefix + ".bn.beta", node.bn->beta, neck_grads.beta[i],
                   false});
  }
  for (std::size_t lvl = 0; lvl < cls_towers.size(); ++lvl) {
    const std::string tag = ".p" + std::to_string(lvl) + ".";
    for (std::size_t k = 0; k < cls_towers[lvl].size(); ++k) {
      cls_towers[lvl][k].collect_params(
          "cls_tower" + tag + std::to_string(k), out);
      box_towers[lvl][k].collect_params(
          "box_tower" + tag + std::to_string(k), out);
    }
  }
  cls_head.collect_params("cls", out);
  box_head.collect_params("box", out);
  return out;
}

void DetectorNet::record_rows(TrainRecord& rec, int step, double loss,
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
      double m = 0.0, v = 0.0;
      for (float x : b.bn->running_mean) m += static_cast<double>(x) * x;
      for (float x : b.bn->running_var) v += static_cast<double>(x) * x;
      r.bn_mean_norm = std::sqrt(m);
      r.bn_var_norm = std::sqrt(v);
    }
    rec.append(std::move(r));
  };
  row("stem", stem);
  row("c2", c2);
  row("c3", c3);
  row("c4", c4);
}

// ---- targets and losses ------------------------------------------------------

float decode_distance(float raw, int stride) {
  return static_cast<float>(stride) *
         std::exp(std::clamp(raw, -6.0f, 6.0f));
}

namespace {

// Per-level flattened targets: cls[i] is the assigned class or -1 for
// background; box targets are in log space (ln(d / stride), l t r b order).
struct LevelTargets {
  std::vector<std::vector<int>> cls;
  std::vector<std::vector<float>> box;
  int num_pos = 0;
};

// Size range (by max side distance) each level is responsible for.
constexpr float kRangeLo[3] = {0.0f, 16.0f, 32.0f};
constexpr float kRangeHi[3] = {16.0f, 32.0f, 1e9f};

LevelTargets assign_targets(const std::vector<Tensor4>& cls_logits,
                            const std::vector<const std::vector<DetBox>*>& boxes,
                            const std::vector<int>& strides) {
  LevelTargets tg;
  tg.cls.resize(cls_logits.size());
  tg.box.resize(cls_logits.size());
  for (std::size_t lvl = 0; lvl < cls_logits.size(); ++lvl) {
    const Shape4& s = cls_logits[lvl].shape();
    const int stride = strides[lvl];
    tg.cls[lvl].assign(static_cast<std::size_t>(s.n) * s.h * s.w, -1);
    tg.box[lvl].assign(static_cast<std::size_t>(s.n) * 4 * s.h * s.w, 0.0f);
    for (int n = 0; n < s.n; ++n) {
      const std::vector<DetBox>& gt = *boxes[static_cast<std::size_t>(n)];
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) {
          const float cx = (static_cast<float>(x) + 0.5f) * stride;
          const float cy = (static_cast<float>(y) + 0.5f) * stride;
          int best = -1;
          float best_area = 0.0f;
          for (std::size_t bi = 0; bi < gt.size(); ++bi) {
            const DetBox& b = gt[bi];
            const float dl = cx - b.x0, dt = cy - b.y0;
            const float dr = b.x1 - cx, db = b.y1 - cy;
            const float dmin = std::min(std::min(dl, dt), std::min(dr, db));
            if (dmin <= 0.0f) continue;  // outside the box
            const float dmax = std::max(std::max(dl, dt), std::max(dr, db));
            if (dmax <= kRangeLo[lvl] || dmax > kRangeHi[lvl]) continue;
            const float bcx = 0.5f * (b.x0 + b.x1);
            const float bcy = 0.5f * (b.y0 + b.y1);
            const float r = kCenterRadius * static_cast<float>(stride);
            if (std::abs(cx - bcx) > r || std::abs(cy - bcy) > r) continue;
            if (best < 0 || b.area() < best_area) {
              best = static_cast<int>(bi);
              best_area = b.area();
            }
          }
          if (best < 0) continue;
          const DetBox& b = gt[static_cast<std::size_t>(best)];
          const std::size_t cell =
              (static_cast<std::size_t>(n) * s.h + y) * s.w + x;
          tg.cls[lvl][cell] = b.cls;
          const float d[4] = {cx - b.x0, cy - b.y0, b.x1 - cx, b.y1 - cy};
          for (int k = 0; k < 4; ++k) {
            tg.box[lvl][((static_cast<std::size_t>(n) * 4 + k) * s.h + y) * s.w +
                        x] = std::log(d[k] / static_cast<float>(stride));
          }
          ++tg.num_pos;
        }
      }
    }
  }
  return tg;
}

// Focal-weighted binary cross entropy on the class logits plus smooth l1 on
// the log-space box offsets, both normalized by the positive count.
double detection_loss(const std::vector<Tensor4>& cls_logits,
                      const std::vector<Tensor4>& box_raw,
                      const LevelTargets& tg, std::vector<Tensor4>* g_cls,
                      std::vector<Tensor4>* g_box) {
  const double norm = 1.0 / std::max(1, tg.num_pos);
  double loss = 0.0;
  if (g_cls) g_cls->resize(cls_logits.size());
  if (g_box) g_box->resize(box_raw.size());
  for (std::size_t lvl = 0; lvl < cls_logits.size(); ++lvl) {
    const Shape4& s = cls_logits[lvl].shape();
    if (g_cls) (*g_cls)[lvl] = Tensor4(s);
    if (g_box) (*g_box)[lvl] = Tensor4(box_raw[lvl].shape());
    for (int n = 0; n < s.n; ++n) {
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) {
          const std::size_t cell =
              (static_cast<std::size_t>(n) * s.h + y) * s.w + x;
          const int target = tg.cls[lvl][cell];
          for (int c = 0; c < s.c; ++c) {
            const double z = cls_logits[lvl](n, c, y, x);
            const double p = 1.0 / (1.0 + std::exp(-z));
            double term, dz;
            if (c == target) {
              const double q = std::max(p, 1e-12);
              const double w = std::pow(1.0 - p, static_cast<double>(kFocalGamma));
              term = -kFocalAlpha * w * std::log(q);
              dz = kFocalAlpha * w * (kFocalGamma * p * std::log(q) - (1.0 - p));
            } else {
              const double q = std::max(1.0 - p, 1e-12);
              const double w = std::pow(p, static_cast<double>(kFocalGamma));
              term = -(1.0 - kFocalAlpha) * w * std::log(q);
              dz = (1.0 - kFocalAlpha) * w *
                   (p - kFocalGamma * (1.0 - p) * std::log(q));
            }
            loss += norm * term;
            if (g_cls) {
              (*g_cls)[lvl](n, c, y, x) = static_cast<float>(norm * dz);
            }
          }
          if (target < 0) continue;
          for (int k = 0; k < 4; ++k) {
            const double o = box_raw[lvl](n, k, y, x);
            const double ot = tg.box[lvl][((static_cast<std::size_t>(n) * 4 + k) *
                                           s.h + y) * s.w + x];
            const double d = o - ot;
            double term, dd;
            if (std::abs(d) < 1.0) {
              term = 0.5 * d * d;
              dd = d;
            } else {
              term = std::abs(d) - 0.5;
              dd = d > 0 ? 1.0 : -1.0;
            }
            loss += norm * term;
            if (g_box) {
              (*g_box)[lvl](n, k, y, x) = static_cast<float>(norm * dd);
            }
          }
        }
      }
    }
  }
  return loss;
}

}  // namespace

DetectionLossResult detection_loss_and_grads(
    const std::vector<Tensor4>& cls_logits, const std::vector<Tensor4>& box_raw,
    const std::vector<const std::vector<DetBox>*>& boxes) {
  const LevelTargets tg =
      assign_targets(cls_logits, boxes, DetectorNet::strides());
  DetectionLossResult res;
  res.num_pos = tg.num_pos;
  res.loss = detection_loss(cls_logits, box_raw, tg, &res.g_cls, &res.g_box);
  return res;
}

std::vector<Detection> decode_detections(const std::vector<Tensor4>& cls_logits,
                                         const std::vector<Tensor4>& box_raw,
                                         int batch_index, float score_thresh,
                                         int max_dets, float nms_iou) {
  std::vector<Detection> cand;
  const std::vector<int>& strides = DetectorNet::strides();
  for (std::size_t lvl = 0; lvl < cls_logits.size(); ++lvl) {
    const Shape4& s = cls_logits[lvl].shape();
    const int stride = strides[lvl];
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        const float cx = (static_cast<float>(x) + 0.5f) * stride;
        const float cy = (static_cast<float>(y) + 0.5f) * stride;
        for (int c = 0; c < s.c; ++c) {
          const float z = cls_logits[lvl](batch_index, c, y, x);
          const float score = 1.0f / (1.0f + std::exp(-z));
          if (score < score_thresh) continue;
          Detection det;
          det.score = score;
          det.box.cls = c;
          det.box.x0 = cx - decode_distance(box_raw[lvl](batch_index, 0, y, x), stride);
          det.box.y0 = cy - decode_distance(box_raw[lvl](batch_index, 1, y, x), stride);
          det.box.x1 = cx + decode_distance(box_raw[lvl](batch_index, 2, y, x), stride);
          det.box.y1 = cy + decode_distance(box_raw[lvl](batch_index, 3, y, x), stride);
          det.box.x0 = std::clamp(det.box.x0, 0.0f, 64.0f);
          det.box.y0 = std::clamp(det.box.y0, 0.0f, 64.0f);
          det.box.x1 = std::clamp(det.box.x1, 0.0f, 64.0f);
          det.box.y1 = std::clamp(det.box.y1, 0.0f, 64.0f);
          cand.push_back(det);
        }
      }
    }
  }
  std::sort(cand.begin(), cand.end(), [](const Detection& a, const Detection& b) {
    return a.score > b.score;
  });
  std::vector<Detection> kept;
  for (const Detection& det : cand) {
    if (static_cast<int>(kept.size()) >= max_dets) break;
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (k.box.cls == det.box.cls && box_iou(k.box, det.box) >= nms_iou) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(det);
  }
  return kept;
}

double detection_f1(const std::vector<std::vector<Detection>>& detections,
                    const std::vector<const std::vector<DetBox>*>& truths) {
  if (detections.size() != truths.size()) {
    throw std::invalid_argument("detections and truths must align");
  }
  int tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < detections.size(); ++i) {
    const std::vector<DetBox>& gt = *truths[i];
    std::vector<bool> matched(gt.size(), false);
    for (const Detection& det : detections[i]) {
      int best = -1;
      float best_iou = 0.5f;
      for (std::size_t j = 0; j < gt.size(); ++j) {
        if (matched[j] || gt[j].cls != det.box.cls) continue;
        const float iou = box_iou(det.box, gt[j]);
        if (iou >= best_iou) {
          best = static_cast<int>(j);
          best_iou = iou;
        }
      }
      if (best >= 0) {
        matched[static_cast<std::size_t>(best)] = true;
        ++tp;
      } else {
        ++fp;
      }
    }
    for (bool m : matched) {
      if (!m) ++fn;
    }
  }
  const int denom = 2 * tp + fp + fn;
  return denom == 0 ? 1.0 : 2.0 * tp / denom;
}

// ---- detector experiment -------------------------------------------------------

DetectorExperimentResult train_toy_detector(const DetectorExperimentConfig& cfg) {
  cfg.optim.validate();
  DetectorNet net(cfg.arch, cfg.neck, 9000 + cfg.seed);
  const ShapesDataset train(cfg.train_size, 5000 + cfg.seed);
  const ShapesDataset eval(cfg.eval_size, 6000 + cfg.seed);

  SgdOptimizer opt(cfg.optim);
  std::vector<ParamRef> params = net.params();
  TrainRecord rec;
  const int bs = cfg.optim.batch_size;

  struct DetBatch {
    Tensor4 images;
    std::vector<const std::vector<DetBox>*> boxes;
  };
  OrderedBatchQueue<DetBatch> queue(
      [&train, bs](int i) {
        const int start = (i * bs) % train.size();
        return DetBatch{train.batch_images(start, bs),
                        train.batch_boxes(start, bs)};
      },
      cfg.optim.steps);

  DetectorNet::Activations acts;
  double last_loss = 0.0;
  for (int step = 0; step < cfg.optim.steps; ++step) {
    const DetBatch batch = queue.pop();
    const double lr = schedule_lr(cfg.optim, step);
    net.zero_grads();
    net.forward(batch.images, true, acts);
    DetectionLossResult dl =
        detection_loss_and_grads(acts.cls_logits, acts.box_raw, batch.boxes);
    last_loss = dl.loss;
    net.backward(acts, dl.g_cls, dl.g_box, cfg.optim.input_rule, true);
    opt.step(params, lr);
    if (step % cfg.record_every == 0 || step == cfg.optim.steps - 1) {
      net.record_rows(rec, step, last_loss, lr);
    }
  }

  std::vector<std::vector<Detection>> dets;
  std::vector<const std::vector<DetBox>*> truths;
  const int eval_bs = 8;
  for (int start = 0; start < eval.size(); start += eval_bs) {
    const int count = std::min(eval_bs, eval.size() - start);
    net.forward(eval.batch_images(start, count), false, acts);
    const auto boxes = eval.batch_boxes(start, count);
    for (int i = 0; i < count; ++i) {
      dets.push_back(decode_detections(acts.cls_logits, acts.box_raw, i));
      truths.push_back(boxes[static_cast<std::size_t>(i)]);
    }
  }
  DetectorExperimentResult res;
  res.final_train_loss = last_loss;
  res.f1 = detection_f1(dets, truths);
  res.record = std::move(rec);
  return res;
}

}  // namespace adderkit
