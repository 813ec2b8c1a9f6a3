#include "krrst/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "krrst/errors.hpp"

namespace krrst {

double evaluate(const ScalarGraph& f, const Tensor& x) {
  ad::Tape tape;
  const auto loss = f(tape, tape.constant(x));
  const double v = loss.value().item();
  if (!std::isfinite(v)) throw NumericError("finite_diff_check: function returned a non-finite value");
  return v;
}

Tensor analytic_grad(const ScalarGraph& f, const Tensor& x) {
  ad::Tape tape;
  const auto leaf = tape.leaf(x, true);
  const auto loss = f(tape, leaf);
  if (!std::isfinite(loss.value().item())) throw NumericError("finite_diff_check: function returned a non-finite value");
  tape.backward(loss);
  return tape.grad(leaf);
}

GradCheckResult finite_diff_check(const ScalarGraph& f, const Tensor& x, double h, double floor) {
  if (!(h > 0.0)) throw ContractError("finite_diff_check: step must be positive");
  const Tensor grad = analytic_grad(f, x);
  GradCheckResult result;
  Tensor probe = x;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double x0 = x[i];
    probe[i] = x0 + h;
    const double fp = evaluate(f, probe);
    probe[i] = x0 - h;
    const double fm = evaluate(f, probe);
    probe[i] = x0;
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(grad[i]), std::abs(numeric), floor});
    const double err = std::abs(grad[i] - numeric) / denom;
    if (err > result.max_rel_error || result.worst_index < 0) {
      result.max_rel_error = err;
      result.worst_index = i;
      result.analytic = grad[i];
      result.numeric = numeric;
    }
  }
  return result;
}

}  // namespace krrst
