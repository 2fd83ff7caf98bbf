#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dtsst/model.hpp"
#include "dtsst/tensor.hpp"

namespace dtsst {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_name;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

// |a - n| / max(|a|, |n|, floor). The floor keeps exactly-zero gradients from
// turning float round-off into an unbounded ratio.
double relative_error(double analytic, double numeric, double floor = 1e-6);

// Compares analytic gradients of `loss_fn` with central differences of step
// `h` for every element of every tensor in `params`. `loss_fn` must rebuild the
// loss from the current parameter values on each call.
GradCheckResult gradcheck(const std::function<Tensor()>& loss_fn, std::vector<NamedTensor>& params,
                          double h = 1e-6);

// Cross-entropy of the whole model on one batch, in training mode.
GradCheckResult gradcheck_model(DualTsst& model, const Tensor& eeg, const Tensor& tfr,
                                std::span<const int> labels, double h = 1e-6);

}  // namespace dtsst
