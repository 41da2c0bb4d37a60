#include "adderkit/profiler.hpp"

#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

namespace adderkit {

EnergyModel fp32_energy_model() { return {3.7, 0.9, "fp32"}; }
EnergyModel int8_energy_model() { return {0.2, 0.03, "int8"}; }

EnergyModel energy_model_from_string(const std::string& precision) {
  if (precision == "fp32") return fp32_energy_model();
  if (precision == "int8") return int8_energy_model();
  throw std::invalid_argument("unsupported precision: " + precision);
}

namespace {

std::int64_t checked_mul(std::int64_t a, std::int64_t b) {
  if (a != 0 && b > std::numeric_limits<std::int64_t>::max() / a) {
    throw std::overflow_error("op count overflow");
  }
  return a * b;
}

void validate_layer(const LayerSpec& l) {
  if (l.name.empty()) throw std::invalid_argument("layer without a name");
  for (std::int64_t d : {l.kh, l.kw, l.c_in, l.c_out, l.h_out, l.w_out}) {
    if (d < 1) {
      throw std::invalid_argument("layer " + l.name + " has a non-positive dimension");
    }
  }
}

}  // namespace

OpCount count_layer(const LayerSpec& layer) {
  validate_layer(layer);
  std::int64_t taps = checked_mul(layer.kh, layer.kw);
  taps = checked_mul(taps, layer.c_in);
  taps = checked_mul(taps, layer.c_out);
  taps = checked_mul(taps, layer.h_out);
  taps = checked_mul(taps, layer.w_out);
  if (layer.kind == FilterKind::Adder) {
    return {0, checked_mul(taps, 2)};
  }
  return {taps, taps};
}

OpCount count_model(const ModelSpec& spec) {
  if (spec.layers.empty()) {
    throw std::invalid_argument("model spec has no layers");
  }
  OpCount total;
  for (const LayerSpec& l : spec.layers) total += count_layer(l);
  return total;
}

std::string layer_component(const std::string& layer_name) {
  const auto dot = layer_name.find('.');
  return dot == std::string::npos ? layer_name : layer_name.substr(0, dot);
}

ModelSpec convert_to_adder(const ModelSpec& spec,
                           const std::vector<std::string>& components,
                           bool force_first) {
  if (spec.layers.empty()) {
    throw std::invalid_argument("model spec has no layers");
  }
  std::set<std::string> mask(components.begin(), components.end());
  std::set<std::string> known;
  for (const LayerSpec& l : spec.layers) known.insert(layer_component(l.name));
  for (const std::string& c : mask) {
    if (!known.count(c)) {
      throw std::invalid_argument("unknown component in conversion mask: " + c);
    }
  }
  ModelSpec out = spec;
  for (std::size_t i = 0; i < out.layers.size(); ++i) {
    LayerSpec& l = out.layers[i];
    if (!mask.count(layer_component(l.name))) continue;
    if (i == 0 && !force_first) continue;  // the stem stays a convolution
    l.kind = FilterKind::Adder;
  }
  return out;
}

double energy_mj(const OpCount& counts, const EnergyModel& model) {
  if (counts.muls < 0 || counts.adds < 0) {
    throw std::invalid_argument("negative op count");
  }
  if (model.e_mul_pj <= 0.0 || model.e_add_pj <= 0.0) {
    throw std::invalid_argument("energy coefficients must be positive");
  }
  const double pj = static_cast<double>(counts.muls) * model.e_mul_pj +
                    static_cast<double>(counts.adds) * model.e_add_pj;
  return pj * 1e-9;
}

ModelSpec parse_model_spec(std::istream& in, const std::string& origin) {
  ModelSpec spec;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string first;
    if (!(ls >> first)) continue;  // blank or comment-only

    if (first == "model") {
      if (!(ls >> spec.name)) {
        throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                                 ": model directive needs a name");
      }
      continue;
    }
    if (first == "input") {
      if (!(ls >> spec.input_size)) {
        throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                                 ": input directive needs a size");
      }
      continue;
    }

    LayerSpec l;
    l.name = first;
    std::string kind;
    if (!(ls >> kind >> l.kh >> l.kw >> l.c_in >> l.c_out >> l.h_out >> l.w_out)) {
      throw std::runtime_error(
          origin + ":" + std::to_string(lineno) +
          ": expected `name kind kh kw c_in c_out h_out w_out`");
    }
    std::string extra;
    if (ls >> extra) {
      throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                               ": trailing tokens after layer definition");
    }
    try {
      l.kind = filter_kind_from_string(kind);
      validate_layer(l);
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": " +
                               e.what());
    }
    if (!seen.insert(l.name).second) {
      throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                               ": duplicate layer name " + l.name);
    }
    spec.layers.push_back(std::move(l));
  }
  if (spec.layers.empty()) {
    throw std::runtime_error(origin + ": model spec has no layers");
  }
  return spec;
}

ModelSpec load_model_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open model spec: " + path);
  ModelSpec spec = parse_model_spec(in, path);
  if (spec.name.empty()) {
    auto slash = path.find_last_of("/\\");
    std::string base = slash == std::string::npos ? path : path.substr(slash + 1);
    const auto dot = base.rfind('.');
    if (dot != std::string::npos) base.erase(dot);
    spec.name = base;
  }
  return spec;
}

void write_model_spec(std::ostream& out, const ModelSpec& spec) {
  if (!spec.name.empty()) out << "model " << spec.name << "\n";
  if (!spec.input_size.empty()) out << "input " << spec.input_size << "\n";
  for (const LayerSpec& l : spec.layers) {
    out << l.name << " " << to_string(l.kind) << " " << l.kh << " " << l.kw
        << " " << l.c_in << " " << l.c_out << " " << l.h_out << " " << l.w_out
        << "\n";
  }
}

}  // namespace adderkit
