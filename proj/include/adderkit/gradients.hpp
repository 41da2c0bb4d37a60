#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "adderkit/layers.hpp"
#include "adderkit/tensor.hpp"

namespace adderkit {

// Input-gradient rule for the adder op. The weight rule is not configurable:
// it is always the l2-style surrogate gW = sum gy * (x - w).
//   HardTanhL2: dx factor = clamp(w - x, -1, 1)
//   Sign:       dx factor = sign(w - x), sign(0) = 0; this one is the exact
//               subgradient of the forward.
enum class GradMode { HardTanhL2, Sign };

const char* to_string(GradMode m);
GradMode grad_mode_from_string(const std::string& s);

// Surrogate weight gradient for the adder op. Zero-padding taps participate
// with x = 0, mirroring the forward.
Tensor4 adder_backward_weight(const Tensor4& x, const FilterBank& f,
                              const Tensor4& gy);

// Input gradient for the adder op under the chosen mode. Contributions of
// padding taps fall outside the input and are discarded.
Tensor4 adder_backward_input(const Tensor4& x, const FilterBank& f,
                             const Tensor4& gy, GradMode mode);

struct ConvGrads {
  Tensor4 weight;
  Tensor4 input;
  std::vector<float> bias;  // empty when the filter has no bias
};

ConvGrads conv_backward(const Tensor4& x, const FilterBank& f,
                        const Tensor4& gy);

// d loss / d bias for any filter op: per out channel sum of gy over (b,h,w).
std::vector<float> filter_backward_bias(const Tensor4& gy);

struct BatchNormGrads {
  Tensor4 input;
  std::vector<float> gamma;
  std::vector<float> beta;
};

// use_batch_stats picks the training-mode formula (moments recomputed from x,
// including the coupling terms through mean and variance). With it false the
// layer is an affine map through the running stats, which is the frozen and
// eval behaviour.
BatchNormGrads batchnorm_backward(const Tensor4& x, const BatchNormState& bn,
                                  const Tensor4& gy, bool use_batch_stats);

Tensor4 relu_backward(const Tensor4& pre_relu, const Tensor4& gy);

Tensor4 upsample_nearest2x_backward(const Tensor4& gy);

Tensor4 global_avg_pool_backward(const Tensor4& gy, int h, int w);

// ---- finite-difference checking ----------------------------------------

// One checked parameter buffer. The forward functor must read `values`; the
// checker perturbs entries in place and restores them.
struct GradCheckParam {
  std::string name;
  double* values = nullptr;
  const double* analytic = nullptr;
  std::size_t size = 0;
};

struct GradCheckOptions {
  double step = 1e-3;      // central difference half-width
  double rel_tol = 1e-3;
  double abs_floor = 1e-5; // relative error denominators are floored here
  std::size_t max_failures_kept = 8;
};

struct GradCheckMismatch {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckResult {
  bool pass = true;
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::vector<GradCheckMismatch> failures;
};

// Central differences of `forward` against the supplied analytic gradients,
// rel err |a - n| / max(|a|, |n|, abs_floor). Reports; never throws on a
// mismatch.
GradCheckResult gradcheck(const std::function<double()>& forward,
                          const std::vector<GradCheckParam>& params,
                          const GradCheckOptions& opts = {});

// ---- stock battery -------------------------------------------------------

struct GradCheckRow {
  std::string op;
  std::string param;
  double max_rel_err = 0.0;
  bool pass = false;
};

// Checks every production backward rule on small random cases:
//   conv3x3      weight, input, bias  vs the conv forward
//   adder3x3     weight               vs the l2 matching companion forward
//   adder3x3     bias                 vs the true forward
//   adder3x3     input (sign)         vs the true forward, taps kept away
//                                     from the kink
//   adder3x3     input (hardtanh)     vs the true forward, taps built in the
//                                     saturated region where the clamp equals
//                                     the exact subgradient
//   batchnorm    input, gamma, beta   in batch-stats and in frozen mode
//   relu         input, away from 0
// Every row is expected to pass.
std::vector<GradCheckRow> gradcheck_battery(std::uint64_t seed);

// The deliberate divergence: the surrogate weight rule checked against the
// true forward instead of its l2 companion. The returned row reports
// pass = false by construction; callers present it, they should not "fix" it.
GradCheckRow adder_weight_rule_vs_true_forward(std::uint64_t seed);

// CSV with header layer,parameter,max_rel_err,pass.
void write_gradcheck_csv(std::ostream& out,
                         const std::vector<GradCheckRow>& rows);

}  // namespace adderkit
