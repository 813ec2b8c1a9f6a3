#ifndef KRRST_EVAL_HPP_
#define KRRST_EVAL_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "krrst/data.hpp"
#include "krrst/distill.hpp"
#include "krrst/models.hpp"
#include "krrst/optim.hpp"
#include "krrst/rng.hpp"

namespace krrst {

// Regression of f(X_s) W onto Y_s.
struct PretrainConfig {
  std::int64_t epochs = 1000;
  std::int64_t batch_size = 256;  // clipped to m
  SgdConfig sgd{0.1, 0.9, 1e-3};
  ScheduleKind schedule = ScheduleKind::cosine;
  LossReduction reduction = LossReduction::mean;

  nlohmann::json to_json() const;
  static PretrainConfig from_json(const nlohmann::json& j);
};

struct PretrainResult {
  FeatureExtractor omega;
  Tensor w;
  std::vector<double> epoch_loss;  // 0.5 * ||f(X_s) W - Y_s||_F^2 before each epoch, plus the final value
};

PretrainResult pretrain_on_distilled(std::uint64_t seed, const Tensor& x_s, const Tensor& y_s, const ArchConfig& arch,
                                     const PretrainConfig& cfg);

enum class HeadInit { normal, zero };

struct FinetuneConfig {
  std::int64_t steps = 2000;
  std::int64_t batch_size = 64;  // clipped to the train size
  SgdConfig sgd{0.01, 0.9, 5e-4};
  ScheduleKind schedule = ScheduleKind::cosine;
  HeadInit head_init = HeadInit::normal;
  std::int64_t eval_batch = 256;

  nlohmann::json to_json() const;
  static FinetuneConfig from_json(const nlohmann::json& j);
};

// Feature extractor plus softmax head h_Q.
struct Classifier {
  FeatureExtractor omega;
  Tensor q;  // d_h x c

  // Softmax outputs, rows on the simplex.
  Tensor probabilities(const Tensor& x, NormMode mode, std::int64_t batch) const;
  std::vector<std::int64_t> predict(const Tensor& x, NormMode mode, std::int64_t batch) const;
};

void save_classifier(const Classifier& c, const std::filesystem::path& dir);
Classifier load_classifier(const std::filesystem::path& dir);

double accuracy(const std::vector<std::int64_t>& predicted, const std::vector<std::int64_t>& labels);
Tensor one_hot(const std::vector<std::int64_t>& labels, std::int64_t classes);
Tensor softmax_rows(const Tensor& logits);

// Datasets given to the eval functions hold normalized rows.
LabeledDataset normalized(const LabeledDataset& raw, const Normalization& norm, const ImageShape& shape);

struct FinetuneResult {
  Classifier model;
  double test_accuracy = 0.0;
  std::vector<double> loss;  // cross-entropy per step
};

// Fresh head from `seed`, then cross-entropy SGD on (omega, Q). Held-out
// accuracy uses running statistics.
FinetuneResult finetune(const FeatureExtractor& omega, const LabeledDataset& train, const LabeledDataset& test,
                        const FinetuneConfig& cfg, std::uint64_t seed);
// Same head draw and schedule with omega frozen.
FinetuneResult linear_probe(const FeatureExtractor& omega, const LabeledDataset& train, const LabeledDataset& test,
                            const FinetuneConfig& cfg, std::uint64_t seed);

// Supervised ConvNet trained from scratch; the KD teacher.
Classifier train_teacher(const ArchConfig& arch, const LabeledDataset& train, const FinetuneConfig& cfg,
                         std::uint64_t seed);

struct KdConfig {
  std::int64_t epochs = 300;
  std::int64_t batch_size = 32;  // clipped to m; must be >= 2
  AdamWConfig adamw{1e-4, 0.9, 0.999, 1e-8, 0.0};
  std::int64_t eval_batch = 256;  // test-time batch for batch statistics

  nlohmann::json to_json() const;
  static KdConfig from_json(const nlohmann::json& j);
};

struct KdResult {
  Classifier student;
  std::vector<double> epoch_kl;  // mean KL(teacher || student) on X_s, measured before each epoch and at the end
  double test_accuracy = 0.0;
};

// Student (omega, fresh Q) matches the teacher's soft labels on the
// surrogate inputs. Both networks use batch statistics at train and test.
KdResult kd_finetune(const FeatureExtractor& omega, const Classifier& teacher, const Tensor& x_s,
                     const LabeledDataset& test, const KdConfig& cfg, std::uint64_t seed);
double mean_kl(const Classifier& teacher, const Classifier& student, const Tensor& x, std::int64_t batch);

Tensor gaussian_inputs(Rng& rng, std::int64_t m, std::int64_t d_x);

// Random rows of X_t with Y_s = g_phi(X_s); no meta-optimization.
DistilledSet random_subset_baseline(Rng& rng, const Tensor& x_t, const Tensor& targets, std::int64_t m);

struct Summary {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation (0 for a single value)
  std::vector<double> values;

  nlohmann::json to_json() const;
};
Summary summarize(const std::vector<double>& values);

// Sets results[key] = summary in a results.json file, creating it if needed.
void record_result(const std::filesystem::path& path, const std::string& key, const Summary& s,
                   const nlohmann::json& extra = {});

}  // namespace krrst

#endif  // KRRST_EVAL_HPP_
