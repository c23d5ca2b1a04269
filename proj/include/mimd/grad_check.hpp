#pragma once

#include <functional>
#include <span>
#include <vector>

#include "mimd/tensor.hpp"

namespace mimd {

struct GradCheckResult {
  double max_relative_error = 0.0;
  Array analytic;  // all parameters, concatenated in order
  Array numeric;
};

/// Scalar objective of a parameter list. Called once with tracked tensors and
/// 2 * (parameter count) times with perturbed constants.
using Objective = std::function<Tensor(std::span<const Tensor>)>;

/// Compares reverse-mode gradients with central differences. The per-coordinate
/// error is |a - b| / max(1e-8, |a| + |b|); the maximum is returned.
GradCheckResult grad_check(const Objective& f, std::span<const Tensor> theta, double eps = 1e-5);

}  // namespace mimd
