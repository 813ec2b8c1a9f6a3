#include "krrst/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "krrst/errors.hpp"

namespace krrst {

namespace {

void check_slots(std::string_view who, const std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
  if (params.size() != grads.size()) {
    throw DimensionError(std::string(who) + ": " + std::to_string(params.size()) + " params but " +
                         std::to_string(grads.size()) + " grads");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape()) {
      throw DimensionError(std::string(who) + ": param " + std::to_string(i) + " shape " +
                           shape_str(params[i].shape()) + " vs grad " + shape_str(grads[i].shape()));
    }
  }
}

void ensure_slots(std::vector<Tensor>& slots, const std::vector<Tensor>& params, std::string_view who) {
  if (slots.empty()) {
    for (const auto& p : params) slots.push_back(Tensor::zeros(p.shape()));
    return;
  }
  if (slots.size() != params.size()) throw DimensionError(std::string(who) + ": optimizer slot count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (slots[i].shape() != params[i].shape()) {
      throw DimensionError(std::string(who) + ": slot " + std::to_string(i) + " shape " +
                           shape_str(slots[i].shape()) + " vs param " + shape_str(params[i].shape()));
    }
  }
}

}  // namespace

void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, SgdState& state, double lr_factor) {
  check_slots("sgd_step", params, grads);
  ensure_slots(state.velocity, params, "sgd_step");
  const auto& c = state.config;
  const double lr = c.lr * lr_factor;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto g = grads[i].data();
    auto v = state.velocity[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = c.momentum * v[j] + g[j] + c.weight_decay * p[j];
      p[j] -= lr * v[j];
    }
    params[i].quantize();
  }
  ++state.steps;
}

void adamw_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamWState& state,
                double lr_factor) {
  check_slots("adamw_step", params, grads);
  ensure_slots(state.m, params, "adamw_step");
  ensure_slots(state.v, params, "adamw_step");
  const auto& c = state.config;
  ++state.steps;
  const double t = static_cast<double>(state.steps);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  const double lr = c.lr * lr_factor;
  const double decay = 1.0 - c.lr * c.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto g = grads[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] *= decay;
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      p[j] -= lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
    params[i].quantize();
  }
}

ScheduleKind parse_schedule(std::string_view name) {
  if (name == "constant") return ScheduleKind::constant;
  if (name == "linear_decay" || name == "linear") return ScheduleKind::linear_decay;
  if (name == "cosine") return ScheduleKind::cosine;
  throw ConfigError("unknown schedule '" + std::string(name) + "'");
}

std::string_view schedule_name(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::constant: return "constant";
    case ScheduleKind::linear_decay: return "linear_decay";
    case ScheduleKind::cosine: return "cosine";
  }
  return "?";
}

double lr_schedule(ScheduleKind kind, std::int64_t step, std::int64_t total) {
  if (total <= 0) throw ContractError("lr_schedule: total must be positive");
  if (step < 0 || step > total) {
    throw ContractError("lr_schedule: step " + std::to_string(step) + " outside [0, " + std::to_string(total) + "]");
  }
  const double frac = static_cast<double>(step) / static_cast<double>(total);
  switch (kind) {
    case ScheduleKind::constant: return 1.0;
    case ScheduleKind::linear_decay: return 1.0 - frac;
    case ScheduleKind::cosine: return 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
  }
  return 1.0;
}

}  // namespace krrst
