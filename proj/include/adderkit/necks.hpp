#pragma once

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "adderkit/gradients.hpp"
#include "adderkit/layers.hpp"
#include "adderkit/rng.hpp"

namespace adderkit {

// Fusion topology over a feature pyramid.
//   FPN:           top-down merge, then one 3x3 fuse per level
//   PAFPN:         FPN followed by a bottom-up pass
//   PAFPNShortcut: PAFPN with a residual skip on every 3x3 fuse
//   RPAFPN:        bottom-up pass first, then top-down, residual fuses
enum class NeckKind { FPN, PAFPN, PAFPNShortcut, RPAFPN };

const char* to_string(NeckKind k);
NeckKind neck_kind_from_string(const std::string& s);

enum class NodeKind { Lateral1x1, Fuse3x3, UpsampleAdd, DownsampleAdd, Identity };

const char* to_string(NodeKind k);

// One node of the fusion graph. Lateral1x1, Fuse3x3 and DownsampleAdd own a
// filter plus batchnorm (relu after); UpsampleAdd and Identity are free.
// A residual fuse computes relu(bn(filter(x)) + x).
struct FusionNode {
  int id = -1;
  NodeKind kind = NodeKind::Identity;
  int level = 0;             // pyramid level of the node output
  bool has_residual = false;
  std::vector<int> inputs;   // producer node ids, empty for laterals
  int pyramid_input = -1;    // backbone level consumed, laterals only
  std::unique_ptr<FilterBank> filter;
  std::unique_ptr<BatchNormState> bn;
};

struct FusionGraph {
  NeckKind kind = NeckKind::FPN;
  FilterKind filter_kind = FilterKind::Conv;
  int levels = 0;  // pyramid inputs consumed
  int width = 0;   // channel count of every node output
  int extra_levels = 0;
  std::vector<int> in_channels;
  std::vector<FusionNode> nodes;  // topological order by construction
  std::vector<int> outputs;       // node id per output level, fine to coarse
};

struct NeckConfig {
  NeckKind kind = NeckKind::FPN;
  FilterKind filter_kind = FilterKind::Conv;
  int width = 16;
  // Stride-2 fuse heads appended past the top pyramid level.
  int extra_levels = 0;
};

// in_channels: backbone channel count per level, fine to coarse. At least
// two levels. Filters are Gaussian-initialized from rng in node id order.
FusionGraph build_neck(const NeckConfig& cfg, const std::vector<int>& in_channels,
                       Rng& rng);

// Per-node intermediates kept for the backward pass. `pre_bn` doubles as the
// probe point for the sign of adder outputs.
struct NodeCache {
  Tensor4 in;        // filter input
  Tensor4 pre_bn;    // filter output
  Tensor4 pre_relu;  // bn output, plus the skip for residual nodes
  Tensor4 out;
};

struct NeckActivations {
  std::vector<NodeCache> nodes;
};

// Runs the graph. Pyramid tensors are fine to coarse, each level exactly
// half the spatial size of the previous, channels matching in_channels.
// Returns one tensor per output level. With `acts` the intermediates are
// kept; pass training = true to use and update batch statistics.
std::vector<Tensor4> neck_forward(FusionGraph& g,
                                  const std::vector<Tensor4>& pyramid,
                                  bool training = false,
                                  NeckActivations* acts = nullptr);

// Gradients for every filter and batchnorm in the graph, indexed by node id.
// Entries stay empty for nodes without parameters.
struct NeckParamGrads {
  std::vector<Tensor4> weight;
  std::vector<std::vector<float>> gamma;
  std::vector<std::vector<float>> beta;

  void init(const FusionGraph& g);
  void accumulate_scaled(const NeckParamGrads& other, float scale);
};

// Reverse pass. grad_outputs aligns with neck_forward's return value.
// `training` must match the forward call so batchnorm differentiates through
// the statistics it actually used. Returns gradients for the pyramid inputs.
std::vector<Tensor4> neck_backward(FusionGraph& g, const NeckActivations& acts,
                                   const std::vector<Tensor4>& grad_outputs,
                                   GradMode mode, bool training,
                                   NeckParamGrads& grads);

// Deterministic description: a header line, one line per node
// (id kind filter_kind residual inputs), then the output node list. Lateral
// inputs are written as x<level>.
void export_graph(std::ostream& out, const FusionGraph& g);
std::string export_graph(const FusionGraph& g);

}  // namespace adderkit
