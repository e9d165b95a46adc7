// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference verification of tape gradients.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "transunet/tensor.hpp"

namespace transunet {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t failing_input = 0;  // location of the worst element
  std::size_t failing_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;

  bool passed(double tol) const { return max_rel_error < tol; }
};

template <class To, class From>
Tensor<To> cast(const Tensor<From>& x) {
  std::vector<To> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(x[i]);
  return Tensor<To>(x.shape(), std::move(out));
}

namespace detail {

template <class F>
double eval_scalar(F& f, const std::vector<Tensor<double>>& xs) {
  auto y = f(xs);
  if (y.size() != 1) throw ContractError("grad_check: function must return a scalar");
  double v = y[0];
  if (!std::isfinite(v)) throw OracleError("grad_check: non-finite function value during finite differencing");
  return v;
}

}  // namespace detail

// Compares gradients recorded in precision `Analytic` against central
// differences (f(x+eps) - f(x-eps)) / (2 eps) evaluated in 64-bit.
// `f` must be generic over the scalar type: f(const std::vector<Tensor<S>>&).
// Relative error uses a max(1, |analytic|, |numeric|) denominator.
template <class Analytic, class F>
GradCheckReport grad_check_as(F&& f, const std::vector<Tensor<double>>& inputs, double eps = 1e-5) {
  Tape<Analytic> tape;
  std::vector<Tensor<Analytic>> watched;
  for (const auto& x : inputs) watched.push_back(tape.watch(cast<Analytic>(x)));
  auto loss = f(watched);
  if (!std::isfinite(static_cast<double>(loss.item()))) throw OracleError("grad_check: non-finite loss");
  tape.backward(loss);

  GradCheckReport report;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto g = tape.grad(watched[k]);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto perturbed = [&](double delta) {
        std::vector<Tensor<double>> xs = inputs;
        std::vector<double> buf = inputs[k].vec();
        buf[i] += delta;
        xs[k] = Tensor<double>(inputs[k].shape(), std::move(buf));
        return detail::eval_scalar(f, xs);
      };
      const double numeric = (perturbed(eps) - perturbed(-eps)) / (2.0 * eps);
      const double analytic = static_cast<double>(g[i]);
      if (!std::isfinite(analytic)) throw OracleError("grad_check: non-finite analytic gradient");
      const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.checked;
      if (report.checked == 1 || rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.failing_input = k;
        report.failing_index = i;
        report.analytic = analytic;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

template <class F>
GradCheckReport grad_check(F&& f, const std::vector<Tensor<double>>& inputs, double eps = 1e-5) {
  return grad_check_as<double>(std::forward<F>(f), inputs, eps);
}

}  // namespace transunet
