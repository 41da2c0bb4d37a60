#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "adderkit/layers.hpp"

namespace adderkit {

// One counted layer of a model description. h_out/w_out are output extents;
// nothing else about the geometry matters for counting.
struct LayerSpec {
  std::string name;
  FilterKind kind = FilterKind::Conv;
  std::int64_t kh = 1, kw = 1;
  std::int64_t c_in = 1, c_out = 1;
  std::int64_t h_out = 1, w_out = 1;
};

struct ModelSpec {
  std::string name;
  std::string input_size;  // informational, e.g. "1333x800"
  std::vector<LayerSpec> layers;
};

struct OpCount {
  // Wide on purpose: realistic models exceed 2^32 ops.
  std::int64_t muls = 0;
  std::int64_t adds = 0;

  OpCount& operator+=(const OpCount& o) {
    muls += o.muls;
    adds += o.adds;
    return *this;
  }
  friend OpCount operator+(OpCount a, const OpCount& b) { return a += b; }
  bool operator==(const OpCount&) const = default;
};

struct EnergyModel {
  double e_mul_pj = 3.7;
  double e_add_pj = 0.9;
  std::string precision = "fp32";
};

EnergyModel fp32_energy_model();
EnergyModel int8_energy_model();
EnergyModel energy_model_from_string(const std::string& precision);

// taps = kh*kw*c_in*c_out*h_out*w_out. Conv: muls = adds = taps. Adder:
// muls = 0, adds = 2*taps (one subtraction plus one magnitude accumulation
// per tap), which conserves muls+adds under conversion.
OpCount count_layer(const LayerSpec& layer);

OpCount count_model(const ModelSpec& spec);

// Component of a layer = name prefix before the first '.', or the whole name.
std::string layer_component(const std::string& layer_name);

// Flips the masked components to adder. The first layer of the model keeps
// its kind unless force_first is set. Unknown component names are an error.
ModelSpec convert_to_adder(const ModelSpec& spec,
                           const std::vector<std::string>& components,
                           bool force_first = false);

// Millijoules for the counts under the model: ops are priced in pJ.
double energy_mj(const OpCount& counts, const EnergyModel& model);

// Text format: one layer per line,
//   name kind kh kw c_in c_out h_out w_out
// with '#' comments. Optional directive lines `model <name>` and
// `input <size>` fill the metadata. Duplicate layer names are rejected.
ModelSpec parse_model_spec(std::istream& in, const std::string& origin);
ModelSpec load_model_spec(const std::string& path);
void write_model_spec(std::ostream& out, const ModelSpec& spec);

}  // namespace adderkit
