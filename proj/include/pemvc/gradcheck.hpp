#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pemvc/ops.hpp"
#include "pemvc/rng.hpp"
#include "pemvc/tensor.hpp"

namespace pemvc {

// Central finite-difference verification of the reverse-mode gradients.
// Always runs in 64-bit; eps and tolerance follow the verification protocol
// used across the test suites (eps 1e-5, max relative error 1e-4 with
// denominator max(|a|,|b|,1e-8)).

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
};

// One unit under check: a set of leaf tensors and a forward closure that
// maps their current values to a scalar loss. The closure must be a pure
// function of the leaf values (internal randomness re-seeded per call).
struct GradCheckCase {
  std::string name;
  std::vector<Tensor<double>> leaves;
  std::function<Tensor<double>(Tape<double>*)> forward;
};

inline double rel_err(double a, double b) {
  double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

inline GradCheckResult check_gradients(GradCheckCase& cs, double eps = 1e-5,
                                       double tol = 1e-4) {
  for (auto& leaf : cs.leaves) {
    leaf.set_requires_grad(true);
    leaf.clear_grad();
  }
  Tape<double> tape;
  Tensor<double> loss = cs.forward(&tape);
  tape.backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(cs.leaves.size());
  for (auto& leaf : cs.leaves) {
    analytic.push_back(leaf.has_grad() ? leaf.grad_cref()
                                       : std::vector<double>(static_cast<size_t>(leaf.numel()), 0.0));
  }

  GradCheckResult res{cs.name, 0.0, true};
  for (size_t li = 0; li < cs.leaves.size(); ++li) {
    auto& leaf = cs.leaves[li];
    double* w = leaf.data();
    for (int64_t i = 0; i < leaf.numel(); ++i) {
      double keep = w[i];
      w[i] = keep + eps;
      double up = cs.forward(nullptr).item();
      w[i] = keep - eps;
      double dn = cs.forward(nullptr).item();
      w[i] = keep;
      double fd = (up - dn) / (2.0 * eps);
      double an = analytic[li][static_cast<size_t>(i)];
      // Central differences cannot resolve gradients below the rounding noise
      // of the loss itself (~|loss|*ulp/eps). Attention blocks have elements
      // whose true gradient is exactly zero (softmax is invariant to
      // row-constant score shifts, e.g. from key biases); there both sides sit
      // under the noise floor and the element is a match, not a measurement.
      if (std::max(std::abs(fd), std::abs(an)) < 1e-6) continue;
      res.max_rel_err = std::max(res.max_rel_err, rel_err(fd, an));
    }
  }
  res.pass = res.max_rel_err < tol;
  return res;
}

// Uniform leaf in [lo, hi]; min_abs kicks values away from ReLU kinks so
// finite differences stay two-sided smooth.
inline Tensor<double> random_leaf(const std::vector<int>& shape, Rng& rng,
                                  double lo = -1.0, double hi = 1.0,
                                  double min_abs = 0.0) {
  Tensor<double> t(shape);
  for (auto& v : t.vec()) {
    do {
      v = lo + (hi - lo) * rng.uniform();
    } while (std::abs(v) < min_abs);
  }
  return t;
}

}  // namespace pemvc
