#ifndef KRRST_OPTIM_HPP_
#define KRRST_OPTIM_HPP_

#include <cstdint>
#include <string_view>
#include <vector>

#include "krrst/tensor.hpp"

namespace krrst {

struct SgdConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.001;
};

struct SgdState {
  SgdConfig config;
  std::vector<Tensor> velocity;  // lazily shaped like the params
  std::int64_t steps = 0;
};

// v <- momentum * v + grad + weight_decay * param;  param <- param - lr * factor * v
void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, SgdState& state,
              double lr_factor = 1.0);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamWState {
  AdamWConfig config;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t steps = 0;
};

// Decoupled weight decay (param *= 1 - lr * weight_decay) followed by the
// bias-corrected adaptive step scaled by lr * lr_factor.
void adamw_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamWState& state,
                double lr_factor = 1.0);

enum class ScheduleKind { constant, linear_decay, cosine };

ScheduleKind parse_schedule(std::string_view name);
std::string_view schedule_name(ScheduleKind kind);

// Multiplier in [0, 1]; linear: 1 - step/total, cosine: (1 + cos(pi step/total)) / 2.
double lr_schedule(ScheduleKind kind, std::int64_t step, std::int64_t total);

}  // namespace krrst

#endif  // KRRST_OPTIM_HPP_
