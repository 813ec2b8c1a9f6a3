#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "krrst/bundle.hpp"
#include "krrst/errors.hpp"
#include "krrst/eval.hpp"

using namespace krrst;
namespace fs = std::filesystem;

namespace {

// Two well separated Gaussian blobs in 4-D.
LabeledDataset blobs(std::uint64_t seed, std::int64_t per_class) {
  Rng rng(seed);
  LabeledDataset d;
  d.classes = 2;
  d.x = rng.normal_tensor({2 * per_class, 4}, 0.0, 0.5);
  for (std::int64_t i = 0; i < 2 * per_class; ++i) {
    const auto label = i % 2;
    d.labels.push_back(label);
    d.x(i, 0) += label == 0 ? -2.0 : 2.0;
  }
  return d;
}

FeatureExtractor small_mlp(std::uint64_t seed) {
  MlpConfig cfg;
  cfg.input_dim = 4;
  cfg.hidden = {16};
  cfg.norm = NormKind::batch_norm;
  Rng rng(seed);
  return FeatureExtractor::init(cfg, rng);
}

FinetuneConfig quick_finetune(std::int64_t steps) {
  FinetuneConfig cfg;
  cfg.steps = steps;
  cfg.batch_size = 16;
  cfg.sgd = {0.05, 0.9, 5e-4};
  return cfg;
}

}  // namespace

TEST_CASE("softmax rows lie on the simplex even for extreme logits") {
  const Tensor p = softmax_rows(Tensor::matrix({{1000, 0, -1000}, {0.1, 0.2, 0.3}, {-800, -800, -800}}));
  for (std::int64_t i = 0; i < 3; ++i) {
    double s = 0;
    for (std::int64_t j = 0; j < 3; ++j) {
      CHECK(p(i, j) >= 0.0);
      s += p(i, j);
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
  }
  CHECK(p(2, 0) == doctest::Approx(1.0 / 3));
}

TEST_CASE("one_hot and accuracy") {
  const Tensor t = one_hot({2, 0, 1}, 3);
  CHECK(t(0, 2) == 1.0);
  CHECK(t(1, 0) == 1.0);
  CHECK(t(0, 0) == 0.0);
  CHECK(accuracy({1, 2, 3, 4}, {1, 2, 0, 4}) == doctest::Approx(0.75));
  CHECK_THROWS_AS(one_hot({3}, 3), ContractError);
}

TEST_CASE("fine-tuning separates a linearly separable toy set") {
  const auto r = finetune(small_mlp(1), blobs(2, 40), blobs(3, 100), quick_finetune(200), 0);
  CHECK(r.test_accuracy >= 0.95);
  for (double l : r.loss) CHECK(l >= 0.0);
  CHECK(r.loss.back() < r.loss.front());
}

TEST_CASE("zero-step fine-tuning equals zero-step probing") {
  const auto omega = small_mlp(4);
  const auto train = blobs(5, 20), test = blobs(6, 50);
  const auto a = finetune(omega, train, test, quick_finetune(0), 7);
  const auto b = linear_probe(omega, train, test, quick_finetune(0), 7);
  CHECK(bit_equal(a.model.q, b.model.q));
  CHECK(a.test_accuracy == b.test_accuracy);
}

TEST_CASE("linear probing leaves the backbone untouched") {
  const auto omega = small_mlp(8);
  const auto r = linear_probe(omega, blobs(9, 20), blobs(10, 50), quick_finetune(50), 0);
  for (std::size_t i = 0; i < omega.params().size(); ++i) CHECK(bit_equal(omega.params()[i], r.model.omega.params()[i]));
  CHECK(r.test_accuracy >= 0.9);
}

TEST_CASE("pretraining on a distilled set reduces its regression loss") {
  Rng rng(11);
  const Tensor x_s = rng.normal_tensor({12, 4}), y_s = rng.normal_tensor({12, 3});
  MlpConfig arch;
  arch.input_dim = 4;
  arch.hidden = {16};
  PretrainConfig cfg;
  cfg.epochs = 100;
  const auto r = pretrain_on_distilled(0, x_s, y_s, arch, cfg);
  CHECK(r.epoch_loss.size() == 101);
  CHECK(r.epoch_loss.back() < 0.5 * r.epoch_loss.front());
  const auto again = pretrain_on_distilled(0, x_s, y_s, arch, cfg);
  CHECK(bit_equal(again.w, r.w));
  CHECK_THROWS_AS(pretrain_on_distilled(0, x_s, rng.normal_tensor({11, 3}), arch, cfg), DimensionError);
}

TEST_CASE("knowledge distillation drives the student toward the teacher") {
  const auto train = blobs(12, 30);
  MlpConfig arch;
  arch.input_dim = 4;
  arch.hidden = {16};
  arch.norm = NormKind::batch_norm;
  const auto teacher = train_teacher(arch, train, quick_finetune(200), 0);
  KdConfig cfg;
  cfg.epochs = 60;
  cfg.batch_size = 8;
  cfg.adamw.lr = 1e-2;
  const auto r = kd_finetune(small_mlp(13), teacher, train.x, blobs(14, 50), cfg, 0);
  CHECK(r.epoch_kl.size() == 61);
  CHECK(r.epoch_kl.back() < 0.5 * r.epoch_kl.front());
  for (double kl : r.epoch_kl) CHECK(kl >= -1e-12);
  cfg.batch_size = 1;
  CHECK_THROWS_AS(kd_finetune(small_mlp(13), teacher, train.x, blobs(14, 50), cfg, 0), ContractError);
}

TEST_CASE("random subset baseline embeds the rows it picks") {
  Rng rng(15);
  const Tensor x_t = rng.normal_tensor({20, 4}), g = rng.normal_tensor({20, 3});
  const auto s = random_subset_baseline(rng, x_t, g, 5);
  CHECK(bit_equal(s.x_s, x_t.gather_rows(s.source_rows)));
  CHECK(bit_equal(s.y_s, g.gather_rows(s.source_rows)));
  CHECK_THROWS_AS(random_subset_baseline(rng, x_t, g, 21), ContractError);
}

TEST_CASE("summaries and the results file") {
  const auto s = summarize({0.5, 0.7, 0.9});
  CHECK(s.mean == doctest::Approx(0.7));
  CHECK(s.stddev == doctest::Approx(0.2));
  CHECK(summarize({0.4}).stddev == 0.0);
  const auto dir = fs::temp_directory_path() / "krrst_test_results";
  fs::remove_all(dir);
  fs::create_directories(dir);
  record_result(dir / "results.json", "a", s);
  record_result(dir / "results.json", "b", summarize({0.1}), {{"note", "x"}});
  const auto j = read_json(dir / "results.json");
  CHECK(j.at("a").at("mean").get<double>() == doctest::Approx(0.7));
  CHECK(j.contains("b"));
}

TEST_CASE("classifier checkpoints round-trip") {
  const auto r = finetune(small_mlp(16), blobs(17, 10), blobs(18, 10), quick_finetune(5), 0);
  const auto dir = fs::temp_directory_path() / "krrst_test_classifier";
  fs::remove_all(dir);
  save_classifier(r.model, dir);
  const auto back = load_classifier(dir);
  CHECK(bit_equal(back.q, r.model.q));
  const Tensor x = blobs(19, 5).x;
  CHECK(bit_equal(back.probabilities(x, NormMode::eval, 4), r.model.probabilities(x, NormMode::eval, 4)));
}
