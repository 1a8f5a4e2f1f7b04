#pragma once

// Central finite-difference oracle for gradient tests. Evaluated in double
// precision so that h = 1e-3 differences are not swamped by rounding.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "saor/diffcore/tensor.hpp"

namespace saor::testing {

using DTensor = ad::BasicTensor<double>;

struct GradCheckResult {
  double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
};

/// `fn` maps the input tensors to a scalar. Inputs are rebuilt as fresh
/// variables for every evaluation so that no graph state leaks between them.
inline GradCheckResult grad_check(const std::function<DTensor(const std::vector<DTensor>&)>& fn,
                                  const std::vector<ad::Shape>& shapes,
                                  const std::vector<std::vector<double>>& values, double h = 1e-3) {
  auto make = [&](const std::vector<std::vector<double>>& vals) {
    std::vector<DTensor> in;
    for (std::size_t i = 0; i < shapes.size(); ++i) in.push_back(DTensor::variable(shapes[i], vals[i]));
    return in;
  };
  auto inputs = make(values);
  const DTensor loss = fn(inputs);
  ad::backward(loss);

  std::vector<double> analytic, numeric;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    for (std::size_t k = 0; k < values[t].size(); ++k) {
      analytic.push_back(inputs[t].has_grad() ? inputs[t].grad()[k] : 0.0);
      auto plus = values;
      auto minus = values;
      plus[t][k] += h;
      minus[t][k] -= h;
      const double fp = fn(make(plus)).item();
      const double fm = fn(make(minus)).item();
      numeric.push_back((fp - fm) / (2.0 * h));
    }
  }
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  GradCheckResult r;
  r.analytic_norm = std::sqrt(na);
  r.numeric_norm = std::sqrt(nn);
  r.rel_error = std::sqrt(diff) / std::max({r.analytic_norm, r.numeric_norm, 1e-12});
  return r;
}

}  // namespace saor::testing
