#include "adderkit/necks.hpp"

#include <ostream>
#include <sstream>
#include <stdexcept>

namespace adderkit {

const char* to_string(NeckKind k) {
  switch (k) {
    case NeckKind::FPN: return "fpn";
    case NeckKind::PAFPN: return "pafpn";
    case NeckKind::PAFPNShortcut: return "pafpn-shortcut";
    case NeckKind::RPAFPN: return "rpafpn";
  }
  return "?";
}

NeckKind neck_kind_from_string(const std::string& s) {
  if (s == "fpn") return NeckKind::FPN;
  if (s == "pafpn") return NeckKind::PAFPN;
  if (s == "pafpn-shortcut") return NeckKind::PAFPNShortcut;
  if (s == "rpafpn") return NeckKind::RPAFPN;
  throw std::invalid_argument("unknown neck kind: " + s);
}

const char* to_string(NodeKind k) {
  switch (k) {
    case NodeKind::Lateral1x1: return "lateral1x1";
    case NodeKind::Fuse3x3: return "fuse3x3";
    case NodeKind::UpsampleAdd: return "upsample_add";
    case NodeKind::DownsampleAdd: return "downsample_add";
    case NodeKind::Identity: return "identity";
  }
  return "?";
}

namespace {

int add_node(FusionGraph& g, FusionNode node) {
  node.id = static_cast<int>(g.nodes.size());
  for (int in : node.inputs) {
    if (in < 0 || in >= node.id) {
      throw std::invalid_argument("fusion graph input must reference an earlier node");
    }
  }
  g.nodes.push_back(std::move(node));
  return g.nodes.back().id;
}

int add_filter_node(FusionGraph& g, NodeKind kind, int level,
                    std::vector<int> inputs, int pyramid_input, int c_in,
                    int kernel, int stride, bool residual, Rng& rng) {
  FusionNode n;
  n.kind = kind;
  n.level = level;
  n.has_residual = residual;
  n.inputs = std::move(inputs);
  n.pyramid_input = pyramid_input;
  n.filter = std::make_unique<FilterBank>(g.filter_kind, g.width, c_in, kernel,
                                          kernel, stride, kernel / 2);
  n.filter->init_gaussian(rng);
  n.bn = std::make_unique<BatchNormState>(g.width);
  // A shortcut-carrying branch starts at zero gain so the node opens as an
  // identity; stacking several post-BN skip additions otherwise inflates the
  // activation scale the shared heads see.
  if (residual) std::fill(n.bn->gamma.begin(), n.bn->gamma.end(), 0.0f);
  return add_node(g, std::move(n));
}

int add_free_node(FusionGraph& g, NodeKind kind, int level,
                  std::vector<int> inputs) {
  FusionNode n;
  n.kind = kind;
  n.level = level;
  n.inputs = std::move(inputs);
  return add_node(g, std::move(n));
}

// Top-down chain over per-level representatives; fuses each merged map.
// reps and the returned output ids are fine to coarse.
std::vector<int> top_down_pass(FusionGraph& g, const std::vector<int>& reps,
                               bool residual_fuse, Rng& rng) {
  const int levels = static_cast<int>(reps.size());
  std::vector<int> merged(reps);
  for (int lvl = levels - 2; lvl >= 0; --lvl) {
    merged[lvl] = add_free_node(g, NodeKind::UpsampleAdd, lvl,
                                {merged[lvl + 1], reps[lvl]});
  }
  std::vector<int> out(levels);
  for (int lvl = 0; lvl < levels; ++lvl) {
    out[lvl] = add_filter_node(g, NodeKind::Fuse3x3, lvl, {merged[lvl]}, -1,
                               g.width, 3, 1, residual_fuse, rng);
  }
  return out;
}

// Bottom-up chain; each downsample junction is fused before feeding the next
// one, and the finest level passes through untouched.
std::vector<int> bottom_up_pass(FusionGraph& g, const std::vector<int>& reps,
                                bool residual_fuse, Rng& rng) {
  const int levels = static_cast<int>(reps.size());
  std::vector<int> out(reps);
  for (int lvl = 1; lvl < levels; ++lvl) {
    const int da = add_free_node(g, NodeKind::DownsampleAdd, lvl,
                                 {out[lvl - 1], reps[lvl]});
    // DownsampleAdd carries the stride-2 filter applied to its fine input.
    FusionNode& node = g.nodes[static_cast<std::size_t>(da)];
    node.filter = std::make_unique<FilterBank>(g.filter_kind, g.width, g.width,
                                               3, 3, 2, 1);
    node.filter->init_gaussian(rng);
    node.bn = std::make_unique<BatchNormState>(g.width);
    out[lvl] = add_filter_node(g, NodeKind::Fuse3x3, lvl, {da}, -1, g.width, 3,
                               1, residual_fuse, rng);
  }
  return out;
}

Tensor4 add_tensors(const Tensor4& a, const Tensor4& b) {
  if (!(a.shape() == b.shape())) {
    throw std::invalid_argument("junction operands differ: " + a.shape().str() +
                                " vs " + b.shape().str());
  }
  Tensor4 y(a.shape());
  for (std::int64_t i = 0; i < y.count(); ++i) {
    y.data()[i] = a.data()[i] + b.data()[i];
  }
  return y;
}

void accumulate(Tensor4& dst, const Tensor4& src) {
  if (dst.empty()) {
    dst = src;
    return;
  }
  if (!(dst.shape() == src.shape())) {
    throw std::invalid_argument("gradient accumulation shape mismatch");
  }
  for (std::int64_t i = 0; i < dst.count(); ++i) {
    dst.data()[i] += src.data()[i];
  }
}

}  // namespace

FusionGraph build_neck(const NeckConfig& cfg,
                       const std::vector<int>& in_channels, Rng& rng) {
  if (in_channels.size() < 2) {
    throw std::invalid_argument("unsupported level count: a neck needs at least 2 levels");
  }
  if (cfg.width < 1) throw std::invalid_argument("neck width must be >= 1");
  if (cfg.extra_levels < 0) {
    throw std::invalid_argument("extra level count must be >= 0");
  }
  for (int c : in_channels) {
    if (c < 1) throw std::invalid_argument("backbone channels must be >= 1");
  }

  FusionGraph g;
  g.kind = cfg.kind;
  g.filter_kind = cfg.filter_kind;
  g.levels = static_cast<int>(in_channels.size());
  g.width = cfg.width;
  g.extra_levels = cfg.extra_levels;
  g.in_channels = in_channels;

  std::vector<int> laterals(static_cast<std::size_t>(g.levels));
  for (int lvl = 0; lvl < g.levels; ++lvl) {
    laterals[static_cast<std::size_t>(lvl)] =
        add_filter_node(g, NodeKind::Lateral1x1, lvl, {}, lvl,
                        in_channels[static_cast<std::size_t>(lvl)], 1, 1,
                        false, rng);
  }

  switch (cfg.kind) {
    case NeckKind::FPN:
      g.outputs = top_down_pass(g, laterals, false, rng);
      break;
    case NeckKind::PAFPN:
      g.outputs = bottom_up_pass(g, top_down_pass(g, laterals, false, rng),
                                 false, rng);
      break;
    case NeckKind::PAFPNShortcut:
      g.outputs = bottom_up_pass(g, top_down_pass(g, laterals, true, rng),
                                 true, rng);
      break;
    case NeckKind::RPAFPN:
      g.outputs = top_down_pass(g, bottom_up_pass(g, laterals, true, rng),
                                true, rng);
      break;
  }

  for (int e = 0; e < cfg.extra_levels; ++e) {
    const int src = g.outputs.back();
    g.outputs.push_back(add_filter_node(g, NodeKind::Fuse3x3, g.levels + e,
                                        {src}, -1, g.width, 3, 2, false, rng));
  }
  return g;
}

std::vector<Tensor4> neck_forward(FusionGraph& g,
                                  const std::vector<Tensor4>& pyramid,
                                  bool training, NeckActivations* acts) {
  if (static_cast<int>(pyramid.size()) != g.levels) {
    throw std::invalid_argument("expected " + std::to_string(g.levels) +
                                " pyramid levels, got " +
                                std::to_string(pyramid.size()));
  }
  for (int lvl = 0; lvl < g.levels; ++lvl) {
    const Shape4& s = pyramid[static_cast<std::size_t>(lvl)].shape();
    if (s.c != g.in_channels[static_cast<std::size_t>(lvl)]) {
      throw std::invalid_argument(
          "pyramid level " + std::to_string(lvl) + " has " +
          std::to_string(s.c) + " channels, neck expects " +
          std::to_string(g.in_channels[static_cast<std::size_t>(lvl)]));
    }
    if (s.n != pyramid[0].shape().n) {
      throw std::invalid_argument("pyramid batch sizes differ");
    }
    if (lvl > 0) {
      const Shape4& fine = pyramid[static_cast<std::size_t>(lvl - 1)].shape();
      if (fine.h != 2 * s.h || fine.w != 2 * s.w) {
        throw std::invalid_argument(
            "pyramid spatial sizes must halve level to level, got " +
            fine.str() + " then " + s.str());
      }
    }
  }

  std::vector<NodeCache> local;
  std::vector<NodeCache>& cache = acts ? acts->nodes : local;
  cache.assign(g.nodes.size(), NodeCache{});

  for (FusionNode& node : g.nodes) {
    NodeCache& c = cache[static_cast<std::size_t>(node.id)];
    switch (node.kind) {
      case NodeKind::Lateral1x1:
      case NodeKind::Fuse3x3: {
        c.in = node.kind == NodeKind::Lateral1x1
                   ? pyramid[static_cast<std::size_t>(node.pyramid_input)]
                   : cache[static_cast<std::size_t>(node.inputs[0])].out;
        c.pre_bn = filter_forward(c.in, *node.filter);
        Tensor4 bn_out = batchnorm_forward(c.pre_bn, *node.bn, training);
        c.pre_relu = node.has_residual ? add_tensors(bn_out, c.in)
                                       : std::move(bn_out);
        c.out = relu(c.pre_relu);
        break;
      }
      case NodeKind::UpsampleAdd: {
        const Tensor4& coarse = cache[static_cast<std::size_t>(node.inputs[0])].out;
        const Tensor4& fine = cache[static_cast<std::size_t>(node.inputs[1])].out;
        c.out = add_tensors(upsample_nearest2x(coarse), fine);
        break;
      }
      case NodeKind::DownsampleAdd: {
        const Tensor4& fine = cache[static_cast<std::size_t>(node.inputs[0])].out;
        const Tensor4& coarse = cache[static_cast<std::size_t>(node.inputs[1])].out;
        c.in = fine;
        c.pre_bn = filter_forward(c.in, *node.filter);
        c.pre_relu = batchnorm_forward(c.pre_bn, *node.bn, training);
        c.out = add_tensors(relu(c.pre_relu), coarse);
        break;
      }
      case NodeKind::Identity:
        c.out = cache[static_cast<std::size_t>(node.inputs[0])].out;
        break;
    }
  }

  std::vector<Tensor4> outs;
  outs.reserve(g.outputs.size());
  for (int id : g.outputs) {
    outs.push_back(cache[static_cast<std::size_t>(id)].out);
  }
  return outs;
}

void NeckParamGrads::init(const FusionGraph& g) {
  // Reuses existing buffers when the sizes already match, so spans handed to
  // an optimizer stay valid across re-initialization.
  if (weight.size() != g.nodes.size()) {
    weight.assign(g.nodes.size(), Tensor4());
    gamma.assign(g.nodes.size(), {});
    beta.assign(g.nodes.size(), {});
  }
  for (const FusionNode& node : g.nodes) {
    if (!node.filter) continue;
    const std::size_t i = static_cast<std::size_t>(node.id);
    if (weight[i].shape() == node.filter->weights().shape()) {
      weight[i].fill(0.0f);
    } else {
      weight[i] = Tensor4(node.filter->weights().shape());
    }
    gamma[i].assign(static_cast<std::size_t>(node.bn->channels()), 0.0f);
    beta[i].assign(static_cast<std::size_t>(node.bn->channels()), 0.0f);
  }
}

void NeckParamGrads::accumulate_scaled(const NeckParamGrads& other,
                                       float scale) {
  for (std::size_t i = 0; i < weight.size(); ++i) {
    if (weight[i].empty()) continue;
    for (std::int64_t j = 0; j < weight[i].count(); ++j) {
      weight[i].data()[j] += scale * other.weight[i].data()[j];
    }
    for (std::size_t j = 0; j < gamma[i].size(); ++j) {
      gamma[i][j] += scale * other.gamma[i][j];
      beta[i][j] += scale * other.beta[i][j];
    }
  }
}

std::vector<Tensor4> neck_backward(FusionGraph& g, const NeckActivations& acts,
                                   const std::vector<Tensor4>& grad_outputs,
                                   GradMode mode, bool training,
                                   NeckParamGrads& grads) {
  if (acts.nodes.size() != g.nodes.size()) {
    throw std::invalid_argument("activations do not belong to this graph");
  }
  if (grad_outputs.size() != g.outputs.size()) {
    throw std::invalid_argument("expected one output gradient per neck output");
  }
  if (grads.weight.size() != g.nodes.size()) grads.init(g);

  std::vector<Tensor4> node_grad(g.nodes.size());
  for (std::size_t i = 0; i < g.outputs.size(); ++i) {
    accumulate(node_grad[static_cast<std::size_t>(g.outputs[i])],
               grad_outputs[i]);
  }

  std::vector<Tensor4> pyramid_grads(static_cast<std::size_t>(g.levels));

  auto filter_branch_backward = [&](const FusionNode& node, const NodeCache& c,
                                    const Tensor4& g_branch) -> Tensor4 {
    // g_branch arrives at the relu output of filter -> bn -> relu.
    const Tensor4 g_pre_relu = relu_backward(c.pre_relu, g_branch);
    const bool use_batch = training && !node.bn->frozen;
    BatchNormGrads bg =
        batchnorm_backward(c.pre_bn, *node.bn, g_pre_relu, use_batch);
    const std::size_t i = static_cast<std::size_t>(node.id);
    for (std::size_t j = 0; j < grads.gamma[i].size(); ++j) {
      grads.gamma[i][j] += bg.gamma[j];
      grads.beta[i][j] += bg.beta[j];
    }
    Tensor4 g_in;
    if (node.filter->kind() == FilterKind::Adder) {
      accumulate(grads.weight[i],
                 adder_backward_weight(c.in, *node.filter, bg.input));
      g_in = adder_backward_input(c.in, *node.filter, bg.input, mode);
    } else {
      ConvGrads cg = conv_backward(c.in, *node.filter, bg.input);
      accumulate(grads.weight[i], cg.weight);
      g_in = std::move(cg.input);
    }
    if (node.has_residual) accumulate(g_in, g_pre_relu);
    return g_in;
  };

  for (auto it = g.nodes.rbegin(); it != g.nodes.rend(); ++it) {
    const FusionNode& node = *it;
    const std::size_t i = static_cast<std::size_t>(node.id);
    if (node_grad[i].empty()) continue;
    const NodeCache& c = acts.nodes[i];
    const Tensor4& gout = node_grad[i];
    switch (node.kind) {
      case NodeKind::Lateral1x1:
      case NodeKind::Fuse3x3: {
        Tensor4 g_in = filter_branch_backward(node, c, gout);
        if (node.kind == NodeKind::Lateral1x1) {
          accumulate(pyramid_grads[static_cast<std::size_t>(node.pyramid_input)],
                     g_in);
        } else {
          accumulate(node_grad[static_cast<std::size_t>(node.inputs[0])], g_in);
        }
        break;
      }
      case NodeKind::UpsampleAdd: {
        accumulate(node_grad[static_cast<std::size_t>(node.inputs[0])],
                   upsample_nearest2x_backward(gout));
        accumulate(node_grad[static_cast<std::size_t>(node.inputs[1])], gout);
        break;
      }
      case NodeKind::DownsampleAdd: {
        // Branch relu sees pre_relu; the skip to the coarse input is direct.
        accumulate(node_grad[static_cast<std::size_t>(node.inputs[1])], gout);
        Tensor4 g_fine = filter_branch_backward(node, c, gout);
        accumulate(node_grad[static_cast<std::size_t>(node.inputs[0])], g_fine);
        break;
      }
      case NodeKind::Identity:
        accumulate(node_grad[static_cast<std::size_t>(node.inputs[0])], gout);
        break;
    }
  }

  // Levels nothing depended on get an all-zero gradient in the right shape.
  for (const FusionNode& node : g.nodes) {
    if (node.kind != NodeKind::Lateral1x1) continue;
    Tensor4& pg = pyramid_grads[static_cast<std::size_t>(node.pyramid_input)];
    if (pg.empty()) {
      pg = Tensor4(acts.nodes[static_cast<std::size_t>(node.id)].in.shape());
    }
  }
  return pyramid_grads;
}

void export_graph(std::ostream& out, const FusionGraph& g) {
  out << "neck " << to_string(g.kind) << " filters " << to_string(g.filter_kind)
      << " levels " << g.levels << " width " << g.width << "\n";
  for (const FusionNode& node : g.nodes) {
    out << node.id << " " << to_string(node.kind) << " "
        << (node.filter ? to_string(node.filter->kind()) : "-") << " "
        << (node.has_residual ? 1 : 0) << " ";
    if (node.kind == NodeKind::Lateral1x1) {
      out << "x" << node.pyramid_input;
    } else {
      for (std::size_t i = 0; i < node.inputs.size(); ++i) {
        if (i) out << ",";
        out << node.inputs[i];
      }
      if (node.inputs.empty()) out << "-";
    }
    out << "\n";
  }
  out << "outputs ";
  for (std::size_t i = 0; i < g.outputs.size(); ++i) {
    if (i) out << ",";
    out << g.outputs[i];
  }
  out << "\n";
}

std::string export_graph(const FusionGraph& g) {
  std::ostringstream os;
  export_graph(os, g);
  return os.str();
}

}  // namespace adderkit
