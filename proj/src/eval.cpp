#include "krrst/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "krrst/bundle.hpp"
#include "krrst/errors.hpp"

namespace krrst {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json sgd_json(const SgdConfig& c) { return {{"lr", c.lr}, {"momentum", c.momentum}, {"weight_decay", c.weight_decay}}; }

SgdConfig sgd_from_json(const json& j, SgdConfig c) {
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  return c;
}

// Moves the extractor params and extra tensors into one list for an
// optimizer step and back.
template <typename Step>
void step_params(FeatureExtractor* omega, std::vector<Tensor*> extra, Step&& step) {
  std::vector<Tensor> params;
  if (omega != nullptr)
    for (auto& p : omega->params()) params.push_back(std::move(p));
  for (auto* t : extra) params.push_back(std::move(*t));
  step(params);
  std::size_t i = 0;
  if (omega != nullptr)
    for (auto& p : omega->params()) p = std::move(params[i++]);
  for (auto* t : extra) *t = std::move(params[i++]);
}

// Chunk boundaries of size `batch` where no chunk has a single row, so
// batch statistics stay defined.
std::vector<std::pair<std::int64_t, std::int64_t>> chunks(std::int64_t n, std::int64_t batch) {
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  for (std::int64_t s = 0; s < n; s += batch) out.emplace_back(s, std::min(n, s + batch));
  if (out.size() > 1 && out.back().second - out.back().first == 1) {
    out.pop_back();
    out.back().second = n;
  }
  return out;
}

void check_finite_loss(double v, const char* what, std::int64_t step) {
  if (!std::isfinite(v)) throw TrainingError(std::string(what) + " diverged at step " + std::to_string(step));
}

}  // namespace

// ---- configs --------------------------------------------------------------------------

json PretrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"sgd", sgd_json(sgd)},
          {"schedule", schedule_name(schedule)},
          {"reduction", loss_reduction_name(reduction)}};
}

PretrainConfig PretrainConfig::from_json(const json& j) {
  PretrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("sgd")) c.sgd = sgd_from_json(j.at("sgd"), c.sgd);
  if (j.contains("schedule")) c.schedule = parse_schedule(j.at("schedule").get<std::string>());
  if (j.contains("reduction")) c.reduction = parse_loss_reduction(j.at("reduction").get<std::string>());
  if (c.epochs < 0 || c.batch_size < 2) throw ConfigError("pretrain: epochs >= 0 and batch_size >= 2 required");
  return c;
}

json FinetuneConfig::to_json() const {
  return {{"steps", steps},
          {"batch_size", batch_size},
          {"sgd", sgd_json(sgd)},
          {"schedule", schedule_name(schedule)},
          {"head_init", head_init == HeadInit::normal ? "normal" : "zero"},
          {"eval_batch", eval_batch}};
}

FinetuneConfig FinetuneConfig::from_json(const json& j) {
  FinetuneConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("sgd")) c.sgd = sgd_from_json(j.at("sgd"), c.sgd);
  if (j.contains("schedule")) c.schedule = parse_schedule(j.at("schedule").get<std::string>());
  if (j.contains("head_init")) {
    const auto h = j.at("head_init").get<std::string>();
    if (h != "normal" && h != "zero") throw ConfigError("head_init must be 'normal' or 'zero'");
    c.head_init = h == "normal" ? HeadInit::normal : HeadInit::zero;
  }
  c.eval_batch = j.value("eval_batch", c.eval_batch);
  if (c.steps < 0 || c.batch_size < 2 || c.eval_batch < 2) throw ConfigError("finetune: invalid step/batch settings");
  return c;
}

json KdConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"lr", adamw.lr},
          {"weight_decay", adamw.weight_decay},
          {"eval_batch", eval_batch}};
}

KdConfig KdConfig::from_json(const json& j) {
  KdConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.adamw.lr = j.value("lr", c.adamw.lr);
  c.adamw.weight_decay = j.value("weight_decay", c.adamw.weight_decay);
  c.eval_batch = j.value("eval_batch", c.eval_batch);
  if (c.epochs < 0 || c.eval_batch < 2) throw ConfigError("kd: invalid epoch/batch settings");
  return c;
}

// ---- helpers -----------------------------------------------------------------------------

double accuracy(const std::vector<std::int64_t>& predicted, const std::vector<std::int64_t>& labels) {
  if (predicted.size() != labels.size() || labels.empty()) throw DimensionError("accuracy: size mismatch or empty");
  std::int64_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

Tensor one_hot(const std::vector<std::int64_t>& labels, std::int64_t classes) {
  Tensor t({static_cast<std::int64_t>(labels.size()), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) throw ContractError("one_hot: label out of range");
    t(static_cast<std::int64_t>(i), labels[i]) = 1.0;
  }
  return t;
}

Tensor softmax_rows(const Tensor& logits) {
  Tensor p(logits.shape());
  for (std::int64_t i = 0; i < logits.dim(0); ++i) {
    double mx = -INFINITY;
    for (std::int64_t j = 0; j < logits.dim(1); ++j) mx = std::max(mx, logits(i, j));
    double z = 0.0;
    for (std::int64_t j = 0; j < logits.dim(1); ++j) z += (p(i, j) = std::exp(logits(i, j) - mx));
    for (std::int64_t j = 0; j < logits.dim(1); ++j) p(i, j) /= z;
  }
  return p;
}

LabeledDataset normalized(const LabeledDataset& raw, const Normalization& norm, const ImageShape& shape) {
  LabeledDataset out = raw;
  out.x = norm.apply(raw.x, shape);
  return out;
}

Tensor Classifier::probabilities(const Tensor& x, NormMode mode, std::int64_t batch) const {
  const auto c = q.dim(1);
  Tensor out({x.dim(0), c});
  for (const auto& [s, e] : chunks(x.dim(0), batch)) {
    const Tensor p = softmax_rows(forward_head(q, omega.features(x.slice_rows(s, e), mode)));
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + s * c);
  }
  return out;
}

std::vector<std::int64_t> Classifier::predict(const Tensor& x, NormMode mode, std::int64_t batch) const {
  const Tensor p = probabilities(x, mode, batch);
  std::vector<std::int64_t> out(static_cast<std::size_t>(x.dim(0)));
  for (std::int64_t i = 0; i < p.dim(0); ++i) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < p.dim(1); ++j)
      if (p(i, j) > p(i, best)) best = j;
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

void save_classifier(const Classifier& c, const fs::path& dir) {
  save_extractor(c.omega, dir / "omega");
  save_bundle(c.q, dir / "q", "q");
}

Classifier load_classifier(const fs::path& dir) {
  Classifier c;
  c.omega = load_extractor(dir / "omega");
  c.q = load_bundle(dir / "q").tensor;
  if (c.q.rank() != 2 || c.q.dim(0) != c.omega.feature_dim()) {
    throw FormatError("classifier head " + shape_str(c.q.shape()) + " does not match the feature dimension");
  }
  return c;
}

// ---- pre-training on the distilled set ------------------------------------------------------

PretrainResult pretrain_on_distilled(std::uint64_t seed, const Tensor& x_s, const Tensor& y_s, const ArchConfig& arch,
                                     const PretrainConfig& cfg) {
  if (x_s.rank() != 2 || y_s.rank() != 2 || x_s.dim(0) != y_s.dim(0)) {
    throw DimensionError("pretrain: X_s " + shape_str(x_s.shape()) + " and Y_s " + shape_str(y_s.shape()));
  }
  if (!x_s.all_finite() || !y_s.all_finite()) throw FormatError("pretrain: distilled bundle has non-finite entries");
  const auto m = x_s.dim(0);
  if (m < 2) throw ContractError("pretrain: need at least 2 distilled samples");
  Rng rng(seed);
  Rng init = rng.split();
  PretrainResult r;
  r.omega = FeatureExtractor::init(arch, init);
  r.w = init_head(r.omega.feature_dim(), y_s.dim(1), init);
  SgdState opt;
  opt.config = cfg.sgd;
  const auto bs = std::min(cfg.batch_size, m);
  const auto batches = chunks(m, bs);
  const std::int64_t total = cfg.epochs * static_cast<std::int64_t>(batches.size());
  std::int64_t step = 0;
  auto batch_loss = [&](const Tensor& xb, const Tensor& yb, bool update) {
    ad::Tape tape;
    const auto bound = r.omega.bind(tape, update);
    const auto w = tape.leaf(r.w, update);
    const auto f = update ? r.omega.forward(tape, bound, tape.constant(xb), NormMode::train)
                          : std::as_const(r.omega).forward(tape, bound, tape.constant(xb), NormMode::batch_stats);
    const auto loss = ad::scale(ad::sum_squares(ad::sub(forward_head(w, f), tape.constant(yb))), 0.5);
    const double value = loss.value().item();
    if (!update) return value;
    tape.backward(loss);
    std::vector<Tensor> grads;
    for (const auto& v : bound) grads.push_back(tape.grad(v));
    grads.push_back(tape.grad(w));
    if (cfg.reduction == LossReduction::mean) {
      const double s = 1.0 / static_cast<double>(yb.numel());
      for (auto& g : grads)
        for (auto& v : g.data()) v *= s;
    }
    const double factor = lr_schedule(cfg.schedule, step, total);
    step_params(&r.omega, {&r.w}, [&](std::vector<Tensor>& ps) { sgd_step(ps, grads, opt, factor); });
    return value;
  };
  try {
    for (std::int64_t e = 0; e < cfg.epochs; ++e) {
      const auto perm = rng.permutation(m);
      double total_loss = 0.0;
      for (const auto& [s, t] : batches) {
        const std::vector<std::int64_t> idx(perm.begin() + s, perm.begin() + t);
        total_loss += batch_loss(x_s.gather_rows(idx), y_s.gather_rows(idx), true);
        ++step;
      }
      check_finite_loss(total_loss, "pretrain", step);
      r.epoch_loss.push_back(total_loss);
    }
    double final_loss = 0.0;
    for (const auto& [s, t] : batches) final_loss += batch_loss(x_s.slice_rows(s, t), y_s.slice_rows(s, t), false);
    r.epoch_loss.push_back(final_loss);
  } catch (const NumericError& e) {
    if (dynamic_cast<const TrainingError*>(&e) != nullptr) throw;
    throw TrainingError("pretrain diverged at step " + std::to_string(step) + ": " + e.what());
  }
  if (!r.omega.all_finite() || !r.w.all_finite()) throw TrainingError("pretrain produced non-finite parameters");
  return r;
}

// ---- fine-tuning and probing ----------------------------------------------------------------

namespace {

FinetuneResult train_head(const FeatureExtractor& omega, const LabeledDataset& train, const LabeledDataset& test,
                          const FinetuneConfig& cfg, std::uint64_t seed, bool freeze) {
  train.validate();
  test.validate();
  if (train.classes != test.classes) throw ContractError("finetune: train/test class counts differ");
  if (train.size() < 2) throw ContractError("finetune: need at least 2 training samples");
  Rng rng(seed);
  FinetuneResult r;
  r.model.omega = omega;
  Rng head_rng = rng.split();
  r.model.q = cfg.head_init == HeadInit::normal ? init_head(omega.feature_dim(), train.classes, head_rng)
                                                : Tensor::zeros({omega.feature_dim(), train.classes});
  SgdState opt;
  opt.config = cfg.sgd;
  const auto bs = std::min(cfg.batch_size, train.size());
  const Tensor targets = one_hot(train.labels, train.classes);
  Tensor frozen_features;
  if (freeze) frozen_features = omega.features(train.x, NormMode::eval);
  for (std::int64_t s = 0; s < cfg.steps; ++s) {
    const auto idx = rng.sample_without_replacement(train.size(), bs);
    ad::Tape tape;
    const auto q = tape.leaf(r.model.q, true);
    std::vector<ad::Var> bound;
    ad::Var f;
    if (freeze) {
      f = tape.constant(frozen_features.gather_rows(idx));
    } else {
      bound = r.model.omega.bind(tape, true);
      f = r.model.omega.forward(tape, bound, tape.constant(train.x.gather_rows(idx)), NormMode::train);
    }
    const auto loss = ad::softmax_cross_entropy(forward_head(q, f), targets.gather_rows(idx));
    const double value = loss.value().item();
    check_finite_loss(value, "finetune", s);
    r.loss.push_back(value);
    tape.backward(loss);
    std::vector<Tensor> grads;
    for (const auto& v : bound) grads.push_back(tape.grad(v));
    grads.push_back(tape.grad(q));
    const double factor = lr_schedule(cfg.schedule, s, cfg.steps);
    step_params(freeze ? nullptr : &r.model.omega, {&r.model.q},
                [&](std::vector<Tensor>& ps) { sgd_step(ps, grads, opt, factor); });
  }
  if (!r.model.omega.all_finite() || !r.model.q.all_finite()) throw TrainingError("finetune produced non-finite parameters");
  r.test_accuracy = accuracy(r.model.predict(test.x, NormMode::eval, cfg.eval_batch), test.labels);
  return r;
}

}  // namespace

FinetuneResult finetune(const FeatureExtractor& omega, const LabeledDataset& train, const LabeledDataset& test,
                        const FinetuneConfig& cfg, std::uint64_t seed) {
  try {
    return train_head(omega, train, test, cfg, seed, false);
  } catch (const TrainingError&) {
    throw;
  } catch (const NumericError& e) {
    throw TrainingError(std::string("finetune: ") + e.what());
  }
}

FinetuneResult linear_probe(const FeatureExtractor& omega, const LabeledDataset& train, const LabeledDataset& test,
                            const FinetuneConfig& cfg, std::uint64_t seed) {
  return train_head(omega, train, test, cfg, seed, true);
}

Classifier train_teacher(const ArchConfig& arch, const LabeledDataset& train, const FinetuneConfig& cfg,
                         std::uint64_t seed) {
  Rng rng(seed);
  Rng init = rng.split();
  const auto omega = FeatureExtractor::init(arch, init);
  // No held-out split is needed to fit the teacher; the train set doubles as
  // the accuracy probe here.
  return finetune(omega, train, train, cfg, rng.next_u64()).model;
}

// ---- knowledge distillation -----------------------------------------------------------------

double mean_kl(const Classifier& teacher, const Classifier& student, const Tensor& x, std::int64_t batch) {
  const Tensor p = teacher.probabilities(x, NormMode::batch_stats, batch);
  const Tensor q = student.probabilities(x, NormMode::batch_stats, batch);
  double kl = 0.0;
  for (std::int64_t i = 0; i < p.numel(); ++i)
    if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - std::log(std::max(q[i], 1e-300)));
  return kl / static_cast<double>(x.dim(0));
}

KdResult kd_finetune(const FeatureExtractor& omega, const Classifier& teacher, const Tensor& x_s,
                     const LabeledDataset& test, const KdConfig& cfg, std::uint64_t seed) {
  const auto m = x_s.dim(0);
  const auto bs = std::min(cfg.batch_size, m);
  if (bs < 2) throw ContractError("kd_finetune: batch statistics need a batch of at least 2");
  test.validate();
  if (teacher.q.dim(1) != test.classes) throw ContractError("kd_finetune: teacher classes differ from test set");
  Rng rng(seed);
  KdResult r;
  r.student.omega = omega;
  Rng head_rng = rng.split();
  r.student.q = init_head(omega.feature_dim(), teacher.q.dim(1), head_rng);
  AdamWState opt;
  opt.config = cfg.adamw;
  const auto batches = chunks(m, bs);
  std::int64_t step = 0;
  for (std::int64_t e = 0; e < cfg.epochs; ++e) {
    r.epoch_kl.push_back(mean_kl(teacher, r.student, x_s, bs));
    const auto perm = rng.permutation(m);
    for (const auto& [s, t] : batches) {
      const std::vector<std::int64_t> idx(perm.begin() + s, perm.begin() + t);
      const Tensor xb = x_s.gather_rows(idx);
      const Tensor soft = teacher.probabilities(xb, NormMode::batch_stats, xb.dim(0));
      ad::Tape tape;
      const auto bound = r.student.omega.bind(tape, true);
      const auto q = tape.leaf(r.student.q, true);
      const auto f = std::as_const(r.student.omega).forward(tape, bound, tape.constant(xb), NormMode::batch_stats);
      const auto loss = ad::softmax_cross_entropy(forward_head(q, f), soft);
      check_finite_loss(loss.value().item(), "kd_finetune", step);
      tape.backward(loss);
      std::vector<Tensor> grads;
      for (const auto& v : bound) grads.push_back(tape.grad(v));
      grads.push_back(tape.grad(q));
      step_params(&r.student.omega, {&r.student.q}, [&](std::vector<Tensor>& ps) { adamw_step(ps, grads, opt); });
      ++step;
    }
  }
  r.epoch_kl.push_back(mean_kl(teacher, r.student, x_s, bs));
  r.test_accuracy = accuracy(r.student.predict(test.x, NormMode::batch_stats, cfg.eval_batch), test.labels);
  return r;
}

Tensor gaussian_inputs(Rng& rng, std::int64_t m, std::int64_t d_x) { return rng.normal_tensor({m, d_x}); }

DistilledSet random_subset_baseline(Rng& rng, const Tensor& x_t, const Tensor& targets, std::int64_t m) {
  if (m > x_t.dim(0)) throw ContractError("random_subset_baseline: m exceeds n");
  DistilledSet s;
  s.source_rows = rng.sample_without_replacement(x_t.dim(0), m);
  s.x_s = x_t.gather_rows(s.source_rows);
  s.y_s = targets.gather_rows(s.source_rows);
  return s;
}

// ---- results --------------------------------------------------------------------------------

json Summary::to_json() const { return {{"mean", mean}, {"std", stddev}, {"values", values}}; }

Summary summarize(const std::vector<double>& values) {
  Summary s;
  s.values = values;
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

void record_result(const fs::path& path, const std::string& key, const Summary& s, const json& extra) {
  json doc = fs::exists(path) ? read_json(path) : json::object();
  json entry = s.to_json();
  if (!extra.is_null()) entry["details"] = extra;
  doc[key] = entry;
  write_json(path, doc);
}

}  // namespace krrst
