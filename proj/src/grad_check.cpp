#include "mimd/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace mimd {

GradCheckResult grad_check(const Objective& f, std::span<const Tensor> theta, double eps) {
  Index total = 0;
  for (const Tensor& t : theta) total += t.size();

  GradCheckResult result;
  result.analytic = Array::Zero(total);
  result.numeric = Array::Zero(total);

  {
    Tape tape;
    std::vector<Tensor> tracked;
    for (const Tensor& t : theta) tracked.push_back(tape.track(t.clone()));
    Tensor root = f(tracked);
    Gradients grads = tape.backward(root);
    Index offset = 0;
    for (const Tensor& t : tracked) {
      if (grads.contains(t)) result.analytic.segment(offset, t.size()) = grads.of(t);
      offset += t.size();
    }
  }

  std::vector<Tensor> probe;
  for (const Tensor& t : theta) probe.push_back(t.clone());
  Index offset = 0;
  for (Tensor& p : probe) {
    for (Index i = 0; i < p.size(); ++i) {
      double original = p.values()(i);
      p.mutable_values()(i) = original + eps;
      double up = f(probe).item();
      p.mutable_values()(i) = original - eps;
      double down = f(probe).item();
      p.mutable_values()(i) = original;
      result.numeric(offset + i) = (up - down) / (2.0 * eps);
    }
    offset += p.size();
  }

  for (Index i = 0; i < total; ++i) {
    double a = result.analytic(i), b = result.numeric(i);
    double err = std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b));
    result.max_relative_error = std::max(result.max_relative_error, err);
  }
  return result;
}

}  // namespace mimd
