#ifndef KRRST_MODELS_HPP_
#define KRRST_MODELS_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "krrst/autodiff.hpp"
#include "krrst/rng.hpp"
#include "krrst/tensor.hpp"

namespace krrst {

enum class NormKind { batch_norm, none };

// train:       batch statistics, running statistics updated
// eval:        running statistics
// batch_stats: batch statistics, running statistics untouched
enum class NormMode { train, eval, batch_stats };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

struct ImageShape {
  std::int64_t channels = 3;
  std::int64_t height = 16;
  std::int64_t width = 16;

  std::int64_t numel() const { return channels * height * width; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

// conv(3x3) -> norm -> ReLU -> 2x2 average pool, repeated `depth` times,
// then flattened.
struct ConvNetConfig {
  std::int64_t depth = 3;
  std::int64_t width = 32;
  ImageShape input;
  NormKind norm = NormKind::batch_norm;
};

// Fully connected layers with ReLU; the last hidden layer is the feature.
struct MlpConfig {
  std::vector<std::int64_t> hidden{128};
  std::int64_t input_dim = 768;
  NormKind norm = NormKind::none;
};

using ArchConfig = std::variant<ConvNetConfig, MlpConfig>;

void validate(const ArchConfig& cfg);  // throws ConfigError
std::int64_t feature_dim(const ArchConfig& cfg);
std::int64_t input_dim(const ArchConfig& cfg);
nlohmann::json to_json(const ArchConfig& cfg);
ArchConfig arch_from_json(const nlohmann::json& j);
std::string_view norm_name(NormKind kind);
NormKind parse_norm(std::string_view name);

// Parameters (omega) of a feature extractor f: R^{d_x} -> R^{d_h} plus the
// normalization running statistics.
class FeatureExtractor {
 public:
  FeatureExtractor() = default;

  // He fan-in normal weights, zero biases/shifts, unit norm scales.
  static FeatureExtractor init(const ArchConfig& cfg, Rng& rng);

  const ArchConfig& config() const { return cfg_; }
  std::int64_t feature_dim() const { return krrst::feature_dim(cfg_); }
  std::int64_t input_dim() const { return krrst::input_dim(cfg_); }

  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<std::string>& param_names() const { return names_; }
  std::vector<Tensor>& running_mean() { return running_mean_; }
  const std::vector<Tensor>& running_mean() const { return running_mean_; }
  std::vector<Tensor>& running_var() { return running_var_; }
  const std::vector<Tensor>& running_var() const { return running_var_; }

  // Places every parameter on the tape as a leaf.
  std::vector<ad::Var> bind(ad::Tape& tape, bool requires_grad) const;

  // x: batch x d_x (flattened rows). Returns batch x d_h. Train mode
  // updates the running statistics. Eval mode treats the norm scale/shift
  // as constants.
  ad::Var forward(ad::Tape& tape, const std::vector<ad::Var>& bound, const ad::Var& x, NormMode mode);
  // eval / batch_stats only; train mode is a ContractError.
  ad::Var forward(ad::Tape& tape, const std::vector<ad::Var>& bound, const ad::Var& x, NormMode mode) const;

  // Non-differentiable convenience wrapper. Not const because train mode
  // mutates running statistics.
  Tensor features(const Tensor& x, NormMode mode);
  Tensor features(const Tensor& x, NormMode mode) const;

  bool all_finite() const;

 private:
  ad::Var norm_layer(ad::Tape& tape, const ad::Var& h, const ad::Var& gamma, const ad::Var& beta,
                     std::size_t index, NormMode mode);

  ArchConfig cfg_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  std::vector<Tensor> running_mean_;
  std::vector<Tensor> running_var_;
};

// h_W(v) = v^T W with W: d_h x d_y.
Tensor init_head(std::int64_t d_h, std::int64_t d_y, Rng& rng);
ad::Var forward_head(const ad::Var& w, const ad::Var& features);
Tensor forward_head(const Tensor& w, const Tensor& features);

// Checkpoint: <dir>/model.json naming the config, one bundle per tensor.
void save_extractor(const FeatureExtractor& fe, const std::filesystem::path& dir);
FeatureExtractor load_extractor(const std::filesystem::path& dir);

// Used by the checkpoint code of other modules.
void save_tensor_list(const std::vector<Tensor>& tensors, const std::filesystem::path& dir, const std::string& prefix);
std::vector<Tensor> load_tensor_list(const std::filesystem::path& dir, const std::string& prefix, std::size_t count);

}  // namespace krrst

#endif  // KRRST_MODELS_HPP_
