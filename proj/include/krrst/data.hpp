#ifndef KRRST_DATA_HPP_
#define KRRST_DATA_HPP_

#include <cstdint>
#include <filesystem>
#include <vector>

#include "json.hpp"
#include "krrst/models.hpp"
#include "krrst/tensor.hpp"

namespace krrst {

// Per-channel standardization computed once on the source set.
struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Normalization compute(const Tensor& raw, const ImageShape& shape);
  Tensor apply(const Tensor& raw, const ImageShape& shape) const;
  Tensor invert(const Tensor& normalized, const ImageShape& shape) const;
  nlohmann::json to_json() const;
  static Normalization from_json(const nlohmann::json& j);
};

struct LabeledDataset {
  Tensor x;                          // k x d_x, raw pixels in [0, 1]
  std::vector<std::int64_t> labels;  // k entries in [0, classes)
  std::int64_t classes = 0;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  void validate() const;  // throws ContractError
};

struct SyntheticSourceSpec {
  std::int64_t source_count = 2048;
  std::int64_t image_size = 16;
  std::int64_t channels = 3;
  std::int64_t latent_factors = 5;  // shape, hue, x, y, scale
  std::int64_t classes_a = 4;
  std::int64_t classes_b = 4;
  std::int64_t train_per_class = 20;
  std::int64_t test_per_class = 200;
  std::uint64_t seed = 0;

  ImageShape image_shape() const { return {channels, image_size, image_size}; }
  void validate() const;  // throws ConfigError
  nlohmann::json to_json() const;
  static SyntheticSourceSpec from_json(const nlohmann::json& j);
};

// Unlabeled source plus two labeled target tasks rendered from the same
// latent factors. Task A labels the primitive's shape; task B labels its
// size crossed with its vertical placement.
struct SyntheticSuite {
  ImageShape shape;
  Tensor source;  // n x d_x raw pixels
  Normalization norm;
  LabeledDataset task_a_train, task_a_test;
  LabeledDataset task_b_train, task_b_test;
};

SyntheticSuite gen_data(const SyntheticSourceSpec& spec);

// Directory layout: source/, task_a/{train,test}/{x,labels}/, task_b/...
// The source manifest carries the image shape and normalization stats.
void save_suite(const SyntheticSuite& suite, const std::filesystem::path& dir);
SyntheticSuite load_suite(const std::filesystem::path& dir);

struct SourceSet {
  Tensor raw;
  ImageShape shape;
  Normalization norm;
};
SourceSet load_source(const std::filesystem::path& source_bundle_dir);
void save_labeled(const LabeledDataset& data, const std::filesystem::path& dir);
LabeledDataset load_labeled(const std::filesystem::path& dir);

// Writes one binary PPM (3 channels) or PGM (1 channel) per row, named
// <index>.ppm / .pgm. Returns the number of files written.
std::int64_t export_images(const Tensor& x_s, const ImageShape& shape, const Normalization& norm,
                           const std::filesystem::path& dir);

}  // namespace krrst

#endif  // KRRST_DATA_HPP_
