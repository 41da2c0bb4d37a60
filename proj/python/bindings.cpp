#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <optional>

#include "adderkit/gradients.hpp"
#include "adderkit/layers.hpp"
#include "adderkit/necks.hpp"
#include "adderkit/profiler.hpp"
#include "adderkit/rng.hpp"

namespace py = pybind11;

namespace {

using namespace adderkit;

using FloatArray =
    py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor4 to_tensor(const FloatArray& a, const char* what) {
  if (a.ndim() != 4) {
    throw std::invalid_argument(std::string(what) +
                                " must be a 4-d array (n, c, h, w)");
  }
  Tensor4 t(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)),
            static_cast<int>(a.shape(2)), static_cast<int>(a.shape(3)));
  std::copy(a.data(), a.data() + t.count(), t.data());
  return t;
}

py::array_t<float> to_array(const Tensor4& t) {
  const Shape4& s = t.shape();
  py::array_t<float> a({s.n, s.c, s.h, s.w});
  std::copy(t.data(), t.data() + t.count(), a.mutable_data());
  return a;
}

FilterBank make_bank(FilterKind kind, const FloatArray& w,
                     const std::optional<std::vector<float>>& bias, int stride,
                     int padding) {
  if (w.ndim() != 4) {
    throw std::invalid_argument("weights must be (c_out, c_in, kh, kw)");
  }
  const int c_out = static_cast<int>(w.shape(0));
  FilterBank f(kind, c_out, static_cast<int>(w.shape(1)),
               static_cast<int>(w.shape(2)), static_cast<int>(w.shape(3)),
               stride, padding, bias.has_value());
  std::copy(w.data(), w.data() + f.weights().count(), f.weights().data());
  if (bias) {
    if (static_cast<int>(bias->size()) != c_out) {
      throw std::invalid_argument("bias length must equal c_out");
    }
    f.bias() = *bias;
  }
  return f;
}

}  // namespace

PYBIND11_MODULE(_adderkit, m) {
  m.doc() = "adder network kernels: l1-matching filters, their surrogate "
            "gradients and the operation/energy counters";
  m.attr("__version__") = "0.1.0";

  m.def(
      "adder_forward",
      [](const FloatArray& x, const FloatArray& w,
         const std::optional<std::vector<float>>& bias, int stride,
         int padding) {
        const FilterBank f = make_bank(FilterKind::Adder, w, bias, stride, padding);
        return to_array(adder_forward(to_tensor(x, "x"), f));
      },
      py::arg("x"), py::arg("weights"), py::arg("bias") = std::nullopt,
      py::arg("stride") = 1, py::arg("padding") = 0,
      "Negated l1 sliding matching: y = bias - sum |x - w|. Padding taps "
      "read x as zero.");

  m.def(
      "conv_forward",
      [](const FloatArray& x, const FloatArray& w,
         const std::optional<std::vector<float>>& bias, int stride,
         int padding) {
        const FilterBank f = make_bank(FilterKind::Conv, w, bias, stride, padding);
        return to_array(conv_forward(to_tensor(x, "x"), f));
      },
      py::arg("x"), py::arg("weights"), py::arg("bias") = std::nullopt,
      py::arg("stride") = 1, py::arg("padding") = 0,
      "Plain cross-correlation with the same layout conventions.");

  m.def(
      "adder_backward_weight",
      [](const FloatArray& x, const FloatArray& w, const FloatArray& gy,
         int stride, int padding) {
        const FilterBank f =
            make_bank(FilterKind::Adder, w, std::nullopt, stride, padding);
        return to_array(
            adder_backward_weight(to_tensor(x, "x"), f, to_tensor(gy, "gy")));
      },
      py::arg("x"), py::arg("weights"), py::arg("gy"), py::arg("stride") = 1,
      py::arg("padding") = 0,
      "Surrogate weight gradient sum gy * (x - w); exact for the l2 "
      "matching companion forward.");

  m.def(
      "adder_backward_input",
      [](const FloatArray& x, const FloatArray& w, const FloatArray& gy,
         int stride, int padding, const std::string& rule) {
        const FilterBank f =
            make_bank(FilterKind::Adder, w, std::nullopt, stride, padding);
        return to_array(adder_backward_input(to_tensor(x, "x"), f,
                                             to_tensor(gy, "gy"),
                                             grad_mode_from_string(rule)));
      },
      py::arg("x"), py::arg("weights"), py::arg("gy"), py::arg("stride") = 1,
      py::arg("padding") = 0, py::arg("rule") = "sign",
      "Input gradient under the chosen rule: 'sign' or 'hardtanh-l2'.");

  m.def(
      "conv_backward",
      [](const FloatArray& x, const FloatArray& w, const FloatArray& gy,
         int stride, int padding) {
        const FilterBank f =
            make_bank(FilterKind::Conv, w, std::nullopt, stride, padding);
        ConvGrads g = conv_backward(to_tensor(x, "x"), f, to_tensor(gy, "gy"));
        return py::make_tuple(to_array(g.weight), to_array(g.input));
      },
      py::arg("x"), py::arg("weights"), py::arg("gy"), py::arg("stride") = 1,
      py::arg("padding") = 0, "Exact convolution gradients (weight, input).");

  m.def(
      "relu",
      [](const FloatArray& x) { return to_array(relu(to_tensor(x, "x"))); },
      py::arg("x"));

  m.def(
      "sparsity",
      [](const FloatArray& x, float tol) {
        return sparsity(to_tensor(x, "x"), tol);
      },
      py::arg("x"), py::arg("tol") = 0.0f,
      "Fraction of entries with |v| <= tol.");

  m.def(
      "gradcheck_battery",
      [](std::uint64_t seed) {
        py::list out;
        for (const GradCheckRow& r : gradcheck_battery(seed)) {
          py::dict d;
          d["op"] = r.op;
          d["param"] = r.param;
          d["max_rel_err"] = r.max_rel_err;
          d["pass"] = r.pass;
          out.append(d);
        }
        return out;
      },
      py::arg("seed") = 1,
      "Finite-difference check of every backward rule; every row passes.");

  m.def(
      "count_layer",
      [](const std::string& kind, std::int64_t kh, std::int64_t kw,
         std::int64_t c_in, std::int64_t c_out, std::int64_t h_out,
         std::int64_t w_out) {
        LayerSpec l;
        l.name = "layer";
        l.kind = filter_kind_from_string(kind);
        l.kh = kh;
        l.kw = kw;
        l.c_in = c_in;
        l.c_out = c_out;
        l.h_out = h_out;
        l.w_out = w_out;
        const OpCount c = count_layer(l);
        return py::make_tuple(c.muls, c.adds);
      },
      py::arg("kind"), py::arg("kh"), py::arg("kw"), py::arg("c_in"),
      py::arg("c_out"), py::arg("h_out"), py::arg("w_out"),
      "(muls, adds) for one layer; adder layers trade each multiply for two "
      "additions.");

  m.def(
      "energy_mj",
      [](std::int64_t muls, std::int64_t adds, const std::string& precision) {
        return energy_mj(OpCount{muls, adds},
                         energy_model_from_string(precision));
      },
      py::arg("muls"), py::arg("adds"), py::arg("precision") = "fp32");

  m.def(
      "export_graph",
      [](const std::string& neck, const std::string& filters, int levels,
         int width) {
        NeckConfig cfg;
        cfg.kind = neck_kind_from_string(neck);
        cfg.filter_kind = filter_kind_from_string(filters);
        cfg.width = width;
        std::vector<int> in_channels;
        for (int i = 0; i < levels; ++i) in_channels.push_back(8 << i);
        Rng rng(0);
        return export_graph(build_neck(cfg, in_channels, rng));
      },
      py::arg("neck") = "fpn", py::arg("filters") = "conv",
      py::arg("levels") = 3, py::arg("width") = 16,
      "Text description of a fusion graph.");
}
