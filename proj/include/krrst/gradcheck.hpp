#ifndef KRRST_GRADCHECK_HPP_
#define KRRST_GRADCHECK_HPP_

#include <functional>

#include "krrst/autodiff.hpp"

namespace krrst {

// Builds a scalar loss on `tape` from the input leaf `x`.
using ScalarGraph = std::function<ad::Var(ad::Tape& tape, const ad::Var& x)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::int64_t worst_index = -1;
  double analytic = 0.0;  // at worst_index
  double numeric = 0.0;
};

// Compares reverse-mode gradients of f at x against central differences
// with step h. Per coordinate the error is
//   |analytic - numeric| / max(|analytic|, |numeric|, floor).
// Throws NumericError if f evaluates to a non-finite value.
GradCheckResult finite_diff_check(const ScalarGraph& f, const Tensor& x, double h, double floor = 1e-12);

// Reverse-mode gradient of f at x.
Tensor analytic_grad(const ScalarGraph& f, const Tensor& x);
// f evaluated without gradient tracking.
double evaluate(const ScalarGraph& f, const Tensor& x);

}  // namespace krrst

#endif  // KRRST_GRADCHECK_HPP_
