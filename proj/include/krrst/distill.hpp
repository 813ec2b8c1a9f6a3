#ifndef KRRST_DISTILL_HPP_
#define KRRST_DISTILL_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "krrst/krr.hpp"
#include "krrst/models.hpp"
#include "krrst/optim.hpp"
#include "krrst/rng.hpp"
#include "krrst/ssl.hpp"

namespace krrst {

enum class YInit { target_embed, standard_normal };
std::string_view y_init_name(YInit mode);
YInit parse_y_init(std::string_view name);

// sum: gradient of 0.5 * ||R||_F^2 as written.
// mean: the same gradient divided by the residual's element count, which
// keeps the 0.1 learning rate stable regardless of m and d_y.
enum class LossReduction { sum, mean };
std::string_view loss_reduction_name(LossReduction r);
LossReduction parse_loss_reduction(std::string_view name);

struct DistillConfig {
  std::int64_t m = 32;
  std::int64_t pool_size = 4;   // l
  std::int64_t max_steps = 200; // T
  std::int64_t meta_iterations = 5000;
  std::int64_t batch_size = 64;  // b
  double meta_lr = 1e-3;         // alpha
  ScheduleKind meta_schedule = ScheduleKind::linear_decay;
  double meta_weight_decay = 0.0;
  SgdConfig inner{0.1, 0.9, 1e-3};  // eta, momentum, weight decay
  LossReduction inner_reduction = LossReduction::mean;
  RidgeConfig ridge;
  YInit y_init = YInit::target_embed;
  ArchConfig arch = ConvNetConfig{};
  std::uint64_t seed = 0;

  // l = 10, T = 1000, 160k iterations.
  static DistillConfig full_scale_preset();

  void validate() const;  // throws ConfigError
  nlohmann::json to_json() const;
  static DistillConfig from_json(const nlohmann::json& j);
};

struct DistilledSet {
  Tensor x_s;  // m x d_x, normalized pixel space (unconstrained)
  Tensor y_s;  // m x d_y
  AdamWState opt_x;
  AdamWState opt_y;
  std::int64_t step = 0;
  std::vector<std::int64_t> source_rows;  // rows of X_t used to initialize X_s

  bool all_finite() const { return x_s.all_finite() && y_s.all_finite(); }
};

struct ModelPoolEntry {
  FeatureExtractor omega;
  Tensor w;  // d_h x d_y
  SgdState opt;
  std::int64_t t = 0;
};

struct ModelPool {
  std::vector<ModelPoolEntry> entries;
};

// X_t rows are normalized; `targets` are g_phi(X_t), precomputed once since
// phi is frozen and its eval-mode embedding is deterministic.
DistilledSet init_distilled(Rng& rng, const Tensor& x_t, const Tensor& targets, const DistillConfig& cfg);

// 0.5 * ||Y - f(X) W||_F^2.
double inner_loss(const ModelPoolEntry& entry, const Tensor& x_s, const Tensor& y_s, NormMode mode);

ModelPoolEntry fresh_entry(Rng& rng, const DistillConfig& cfg, std::int64_t d_y);
// One full-batch SGD step on the inner MSE; t -> t + 1. Returns the loss
// before the step.
double inner_step(ModelPoolEntry& entry, const Tensor& x_s, const Tensor& y_s, const DistillConfig& cfg);
void reset_entry(Rng& rng, ModelPoolEntry& entry, const DistillConfig& cfg);
ModelPool init_pool(Rng& rng, const Tensor& x_s, const Tensor& y_s, const DistillConfig& cfg);

struct MetaStepRecord {
  std::int64_t step = 0;
  double outer_loss = 0.0;
  std::int64_t pool_index = 0;
  std::int64_t t_before = 0;
  bool reset = false;
  SolveDiagnostics diag;

  nlohmann::json to_json() const;
};

MetaStepRecord meta_step(DistilledSet& state, ModelPool& pool, const Tensor& x_t, const Tensor& targets, Rng& rng,
                         const DistillConfig& cfg);

struct DistillRunOptions {
  std::filesystem::path log_path;         // JSON-lines; empty disables
  std::filesystem::path checkpoint_dir;   // empty disables
  std::int64_t checkpoint_every = 0;      // 0 disables periodic checkpoints
  std::int64_t stop_after = -1;           // stop early at this step (testing resume)
  bool resume = false;                    // continue from checkpoint_dir
  std::function<void(const MetaStepRecord&)> on_step;
};

struct DistillRunResult {
  DistilledSet distilled;
  ModelPool pool;
  RngState rng;
  std::vector<MetaStepRecord> records;  // records produced by this call
};

DistillRunResult run_distillation(const Tensor& x_t, const Tensor& targets, const DistillConfig& cfg,
                                  const DistillRunOptions& opts = {});

void save_checkpoint(const DistilledSet& state, const ModelPool& pool, const RngState& rng,
                     const std::filesystem::path& dir);
struct Checkpoint {
  DistilledSet distilled;
  ModelPool pool;
  RngState rng;
};
Checkpoint load_checkpoint(const std::filesystem::path& dir, const DistillConfig& cfg);

// x_s.bin / y_s.bin bundles plus distilled.json (step, config).
void save_distilled(const DistilledSet& state, const DistillConfig& cfg, const std::filesystem::path& dir);
DistilledSet load_distilled(const std::filesystem::path& dir);

}  // namespace krrst

#endif  // KRRST_DISTILL_HPP_
