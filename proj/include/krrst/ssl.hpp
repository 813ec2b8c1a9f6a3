#ifndef KRRST_SSL_HPP_
#define KRRST_SSL_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <utility>
#include <vector>

#include "json.hpp"
#include "krrst/autodiff.hpp"
#include "krrst/data.hpp"
#include "krrst/models.hpp"
#include "krrst/rng.hpp"

namespace krrst {

struct AugmentationConfig {
  std::int64_t crop_padding = 2;  // pixels; random translation in [-pad, pad] with zero fill
  double flip_prob = 0.5;
  double brightness = 0.2;  // additive shift drawn from [-b, b]
  double contrast = 0.2;    // scale about the image mean drawn from [1 - c, 1 + c]
  double channel_permute_prob = 0.8;  // random RGB reordering (hue change)
  double grayscale_prob = 0.2;
  bool independent_views = true;

  void validate() const;  // throws ConfigError
  nlohmann::json to_json() const;
  static AugmentationConfig from_json(const nlohmann::json& j);
};

// Two augmented copies of every row of `x` (raw pixels in [0, 1]).
std::pair<Tensor, Tensor> augment_two_views(Rng& rng, const Tensor& x, const ImageShape& shape,
                                            const AugmentationConfig& cfg);
Tensor hflip(const Tensor& x, const ImageShape& shape);

struct BarlowTwinsConfig {
  double lambda = 5e-3;
  std::vector<std::int64_t> projector_hidden{128};
  std::int64_t embedding_dim = 64;
  std::int64_t epochs = 200;
  std::int64_t batch_size = 128;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double norm_eps = 1e-8;  // guards zero-variance embedding columns

  void validate() const;  // throws ConfigError
  nlohmann::json to_json() const;
  static BarlowTwinsConfig from_json(const nlohmann::json& j);
};

// sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2 where C is the
// cross-correlation of the per-column standardized embeddings.
ad::Var barlow_twins_loss(const ad::Var& z_a, const ad::Var& z_b, double lambda, double eps = 1e-8);

enum class EmbeddingSource { backbone_features, projector_output };
std::string_view embedding_source_name(EmbeddingSource s);
EmbeddingSource parse_embedding_source(std::string_view name);

// Frozen self-supervised target g_phi: backbone + projector MLP + final
// linear projection. Mutable access after freeze() is a ContractError.
class TargetModel {
 public:
  TargetModel() = default;
  TargetModel(FeatureExtractor backbone, FeatureExtractor projector, Tensor projection, EmbeddingSource source);

  const FeatureExtractor& backbone() const { return backbone_; }
  const FeatureExtractor& projector() const { return projector_; }
  const Tensor& projection() const { return projection_; }
  FeatureExtractor& mutable_backbone();
  FeatureExtractor& mutable_projector();
  Tensor& mutable_projection();

  EmbeddingSource source() const { return source_; }
  void set_source(EmbeddingSource s);
  std::int64_t embedding_dim() const;
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  // Eval-mode embedding of normalized rows.
  Tensor embed(const Tensor& x) const;

 private:
  void check_mutable() const;

  FeatureExtractor backbone_;
  FeatureExtractor projector_;
  Tensor projection_;
  EmbeddingSource source_ = EmbeddingSource::backbone_features;
  bool frozen_ = false;
};

struct TargetTrainingResult {
  TargetModel model;
  std::vector<double> epoch_loss;  // mean Barlow Twins loss per epoch
};

// Barlow Twins on raw source pixels: augment, normalize, SGD with momentum
// and cosine decay. Throws TrainingError (with step index) on divergence.
TargetTrainingResult train_target(const Tensor& raw_x, const ImageShape& shape, const Normalization& norm,
                                  const ArchConfig& arch, const BarlowTwinsConfig& cfg,
                                  const AugmentationConfig& aug, EmbeddingSource source, std::uint64_t seed,
                                  const std::function<void(std::int64_t epoch, double loss)>& on_epoch = {});

// Eval-mode embeddings of normalized rows, computed in chunks of
// `batch_size`; row order is preserved.
Tensor embed_dataset(const TargetModel& phi, const Tensor& x, std::int64_t batch_size);

void save_target(const TargetModel& phi, const std::filesystem::path& dir);
TargetModel load_target(const std::filesystem::path& dir);  // returned frozen

}  // namespace krrst

#endif  // KRRST_SSL_HPP_
