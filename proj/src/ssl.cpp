#include "krrst/ssl.hpp"

#include <algorithm>
#include <cmath>

#include "krrst/bundle.hpp"
#include "krrst/errors.hpp"
#include "krrst/optim.hpp"

namespace krrst {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- augmentation ----------------------------------------------------------------

void AugmentationConfig::validate() const {
  if (crop_padding < 0) throw ConfigError("crop_padding must be non-negative");
  if (flip_prob < 0.0 || flip_prob > 1.0) throw ConfigError("flip_prob must lie in [0, 1]");
  if (brightness < 0.0 || contrast < 0.0) throw ConfigError("jitter ranges must be non-negative");
  if (channel_permute_prob < 0.0 || channel_permute_prob > 1.0 || grayscale_prob < 0.0 || grayscale_prob > 1.0) {
    throw ConfigError("color augmentation probabilities must lie in [0, 1]");
  }
}

json AugmentationConfig::to_json() const {
  return {{"crop_padding", crop_padding},
          {"flip_prob", flip_prob},
          {"brightness", brightness},
          {"contrast", contrast},
          {"channel_permute_prob", channel_permute_prob},
          {"grayscale_prob", grayscale_prob},
          {"independent_views", independent_views}};
}

AugmentationConfig AugmentationConfig::from_json(const json& j) {
  AugmentationConfig c;
  c.crop_padding = j.value("crop_padding", c.crop_padding);
  c.flip_prob = j.value("flip_prob", c.flip_prob);
  c.brightness = j.value("brightness", c.brightness);
  c.contrast = j.value("contrast", c.contrast);
  c.channel_permute_prob = j.value("channel_permute_prob", c.channel_permute_prob);
  c.grayscale_prob = j.value("grayscale_prob", c.grayscale_prob);
  c.independent_views = j.value("independent_views", c.independent_views);
  return c;
}

namespace {

void augment_row(Rng& rng, const double* src, double* dst, const ImageShape& shape, const AugmentationConfig& cfg) {
  const auto c = shape.channels, h = shape.height, w = shape.width, hw = h * w;
  std::int64_t dx = 0, dy = 0;
  if (cfg.crop_padding > 0) {
    const auto span = static_cast<std::uint64_t>(2 * cfg.crop_padding + 1);
    dx = static_cast<std::int64_t>(rng.below(span)) - cfg.crop_padding;
    dy = static_cast<std::int64_t>(rng.below(span)) - cfg.crop_padding;
  }
  const bool flip = cfg.flip_prob > 0.0 && rng.bernoulli(cfg.flip_prob);
  const double shift = cfg.brightness > 0.0 ? rng.uniform(-cfg.brightness, cfg.brightness) : 0.0;
  const double gain = cfg.contrast > 0.0 ? rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast) : 1.0;
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const std::int64_t sx0 = flip ? (w - 1 - x) : x;
        const std::int64_t sy = y + dy, sx = sx0 + dx;
        dst[ch * hw + y * w + x] = (sy >= 0 && sy < h && sx >= 0 && sx < w) ? src[ch * hw + sy * w + sx] : 0.0;
      }
  if (c == 3 && cfg.channel_permute_prob > 0.0 && rng.bernoulli(cfg.channel_permute_prob)) {
    const auto perm = rng.permutation(3);
    std::vector<double> tmp(dst, dst + 3 * hw);
    for (std::int64_t ch = 0; ch < 3; ++ch)
      std::copy(tmp.begin() + perm[ch] * hw, tmp.begin() + (perm[ch] + 1) * hw, dst + ch * hw);
  }
  if (c == 3 && cfg.grayscale_prob > 0.0 && rng.bernoulli(cfg.grayscale_prob)) {
    for (std::int64_t i = 0; i < hw; ++i) {
      const double g = 0.299 * dst[i] + 0.587 * dst[hw + i] + 0.114 * dst[2 * hw + i];
      dst[i] = dst[hw + i] = dst[2 * hw + i] = g;
    }
  }
  if (cfg.contrast > 0.0) {
    double mean = 0.0;
    for (std::int64_t i = 0; i < c * hw; ++i) mean += dst[i];
    mean /= static_cast<double>(c * hw);
    for (std::int64_t i = 0; i < c * hw; ++i) dst[i] = mean + gain * (dst[i] - mean);
  }
  if (cfg.brightness > 0.0) {
    for (std::int64_t i = 0; i < c * hw; ++i) dst[i] += shift;
  }
  if (cfg.brightness > 0.0 || cfg.contrast > 0.0) {
    for (std::int64_t i = 0; i < c * hw; ++i) dst[i] = std::clamp(dst[i], 0.0, 1.0);
  }
}

}  // namespace

std::pair<Tensor, Tensor> augment_two_views(Rng& rng, const Tensor& x, const ImageShape& shape,
                                            const AugmentationConfig& cfg) {
  cfg.validate();
  if (x.rank() != 2 || x.dim(1) != shape.numel()) {
    throw DimensionError("augment_two_views: rows of " + shape_str(x.shape()) + " do not match image shape");
  }
  Tensor a(x.shape()), b(x.shape());
  const auto d = shape.numel();
  for (std::int64_t i = 0; i < x.dim(0); ++i) {
    Rng row = rng.split();
    augment_row(row, x.ptr() + i * d, a.ptr() + i * d, shape, cfg);
    if (cfg.independent_views) {
      augment_row(row, x.ptr() + i * d, b.ptr() + i * d, shape, cfg);
    } else {
      std::copy(a.ptr() + i * d, a.ptr() + (i + 1) * d, b.ptr() + i * d);
    }
  }
  return {std::move(a), std::move(b)};
}

Tensor hflip(const Tensor& x, const ImageShape& shape) {
  AugmentationConfig cfg;
  cfg.crop_padding = 0;
  cfg.flip_prob = 1.0;
  cfg.brightness = 0.0;
  cfg.contrast = 0.0;
  cfg.channel_permute_prob = 0.0;
  cfg.grayscale_prob = 0.0;
  cfg.independent_views = false;
  Rng rng(0);
  return augment_two_views(rng, x, shape, cfg).first;
}

// ---- Barlow Twins ----------------------------------------------------------------------

void BarlowTwinsConfig::validate() const {
  if (!(lambda > 0.0)) throw ConfigError("barlow twins lambda must be positive");
  if (embedding_dim < 2) throw ConfigError("embedding_dim must be >= 2");
  if (batch_size < 2) throw ConfigError("ssl batch_size must be >= 2");
  if (epochs < 1) throw ConfigError("ssl epochs must be >= 1");
  if (projector_hidden.empty()) throw ConfigError("projector needs at least one hidden layer");
}

json BarlowTwinsConfig::to_json() const {
  return {{"lambda", lambda},   {"projector_hidden", projector_hidden},
          {"embedding_dim", embedding_dim}, {"epochs", epochs},
          {"batch_size", batch_size}, {"lr", lr},
          {"momentum", momentum}, {"weight_decay", weight_decay},
          {"norm_eps", norm_eps}};
}

BarlowTwinsConfig BarlowTwinsConfig::from_json(const json& j) {
  BarlowTwinsConfig c;
  c.lambda = j.value("lambda", c.lambda);
  c.projector_hidden = j.value("projector_hidden", c.projector_hidden);
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.norm_eps = j.value("norm_eps", c.norm_eps);
  return c;
}

ad::Var barlow_twins_loss(const ad::Var& z_a, const ad::Var& z_b, double lambda, double eps) {
  ad::check_same_shape("barlow_twins_loss", z_a.shape(), z_b.shape());
  if (z_a.value().rank() != 2) throw DimensionError("barlow_twins_loss: embeddings must be 2-D");
  const auto b = z_a.shape()[0], d = z_a.shape()[1];
  if (b < 2) throw ContractError("barlow_twins_loss: batch of " + std::to_string(b) + " < 2");
  auto& tape = z_a.tape();
  const auto na = ad::batch_norm(z_a, ad::Var(), ad::Var(), eps);
  const auto nb = ad::batch_norm(z_b, ad::Var(), ad::Var(), eps);
  const auto c = ad::scale(ad::matmul(ad::transpose(na), nb), 1.0 / static_cast<double>(b));
  const auto off_identity = ad::sub(c, tape.constant(Tensor::eye(d)));
  Tensor weights = Tensor::full({d, d}, lambda);
  for (std::int64_t i = 0; i < d; ++i) weights(i, i) = 1.0;
  return ad::weighted_sum_squares(off_identity, weights);
}

std::string_view embedding_source_name(EmbeddingSource s) {
  return s == EmbeddingSource::backbone_features ? "backbone_features" : "projector_output";
}

EmbeddingSource parse_embedding_source(std::string_view name) {
  if (name == "backbone_features") return EmbeddingSource::backbone_features;
  if (name == "projector_output") return EmbeddingSource::projector_output;
  throw ConfigError("unknown embedding source '" + std::string(name) + "'");
}

// ---- target model -------------------------------------------------------------------------

TargetModel::TargetModel(FeatureExtractor backbone, FeatureExtractor projector, Tensor projection,
                         EmbeddingSource source)
    : backbone_(std::move(backbone)),
      projector_(std::move(projector)),
      projection_(std::move(projection)),
      source_(source) {}

void TargetModel::check_mutable() const {
  if (frozen_) throw ContractError("target model is frozen");
}

FeatureExtractor& TargetModel::mutable_backbone() {
  check_mutable();
  return backbone_;
}

FeatureExtractor& TargetModel::mutable_projector() {
  check_mutable();
  return projector_;
}

Tensor& TargetModel::mutable_projection() {
  check_mutable();
  return projection_;
}

void TargetModel::set_source(EmbeddingSource s) {
  check_mutable();
  source_ = s;
}

std::int64_t TargetModel::embedding_dim() const {
  return source_ == EmbeddingSource::backbone_features ? backbone_.feature_dim() : projection_.dim(1);
}

Tensor TargetModel::embed(const Tensor& x) const {
  Tensor f = backbone_.features(x, NormMode::eval);
  if (source_ == EmbeddingSource::backbone_features) return f;
  return forward_head(projection_, projector_.features(f, NormMode::eval));
}

TargetTrainingResult train_target(const Tensor& raw_x, const ImageShape& shape, const Normalization& norm,
                                  const ArchConfig& arch, const BarlowTwinsConfig& cfg,
                                  const AugmentationConfig& aug, EmbeddingSource source, std::uint64_t seed,
                                  const std::function<void(std::int64_t, double)>& on_epoch) {
  cfg.validate();
  aug.validate();
  if (input_dim(arch) != shape.numel()) throw ConfigError("train_target: architecture input does not match images");
  const auto n = raw_x.dim(0);
  if (n < cfg.batch_size) {
    throw ContractError("train_target: " + std::to_string(n) + " rows < batch size " + std::to_string(cfg.batch_size));
  }
  Rng rng(seed);
  Rng init_rng = rng.split();
  FeatureExtractor backbone = FeatureExtractor::init(arch, init_rng);
  MlpConfig proj_cfg;
  proj_cfg.hidden = cfg.projector_hidden;
  proj_cfg.input_dim = backbone.feature_dim();
  proj_cfg.norm = NormKind::batch_norm;
  FeatureExtractor projector = FeatureExtractor::init(proj_cfg, init_rng);
  Tensor projection = init_head(projector.feature_dim(), cfg.embedding_dim, init_rng);

  const std::size_t nb = backbone.params().size(), np = projector.params().size();
  SgdState opt;
  opt.config = {cfg.lr, cfg.momentum, cfg.weight_decay};
  const std::int64_t steps_per_epoch = n / cfg.batch_size;
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
  std::int64_t step = 0;
  TargetTrainingResult result;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto perm = rng.permutation(n);
    double loss_sum = 0.0;
    for (std::int64_t s = 0; s < steps_per_epoch; ++s, ++step) {
      std::vector<std::int64_t> idx(perm.begin() + s * cfg.batch_size, perm.begin() + (s + 1) * cfg.batch_size);
      const Tensor batch = raw_x.gather_rows(idx);
      auto [va, vb] = augment_two_views(rng, batch, shape, aug);
      double loss_value = 0.0;
      std::vector<Tensor> grads;
      try {
        ad::Tape tape;
        const auto bb = backbone.bind(tape, true);
        const auto pb = projector.bind(tape, true);
        const auto wp = tape.leaf(projection, true);
        auto embed_view = [&](const Tensor& view) {
          const auto f = backbone.forward(tape, bb, tape.constant(norm.apply(view, shape)), NormMode::train);
          return forward_head(wp, projector.forward(tape, pb, f, NormMode::train));
        };
        const auto za = embed_view(va);
        const auto zb = embed_view(vb);
        const auto loss = barlow_twins_loss(za, zb, cfg.lambda, cfg.norm_eps);
        loss_value = loss.value().item();
        tape.backward(loss);
        for (const auto& v : bb) grads.push_back(tape.grad(v));
        for (const auto& v : pb) grads.push_back(tape.grad(v));
        grads.push_back(tape.grad(wp));
      } catch (const NumericError& e) {
        throw TrainingError("train_target diverged at step " + std::to_string(step) + ": " + e.what());
      }
      std::vector<Tensor> params;
      params.reserve(nb + np + 1);
      for (auto& p : backbone.params()) params.push_back(std::move(p));
      for (auto& p : projector.params()) params.push_back(std::move(p));
      params.push_back(std::move(projection));
      sgd_step(params, grads, opt, lr_schedule(ScheduleKind::cosine, step, total_steps));
      for (std::size_t i = 0; i < nb; ++i) backbone.params()[i] = std::move(params[i]);
      for (std::size_t i = 0; i < np; ++i) projector.params()[i] = std::move(params[nb + i]);
      projection = std::move(params.back());
      if (!std::isfinite(loss_value) || !backbone.all_finite() || !projector.all_finite() ||
          !projection.all_finite()) {
        throw TrainingError("train_target diverged at step " + std::to_string(step));
      }
      loss_sum += loss_value;
    }
    const double mean_loss = loss_sum / static_cast<double>(steps_per_epoch);
    result.epoch_loss.push_back(mean_loss);
    if (on_epoch) on_epoch(epoch, mean_loss);
  }
  result.model = TargetModel(std::move(backbone), std::move(projector), std::move(projection), source);
  result.model.freeze();
  return result;
}

Tensor embed_dataset(const TargetModel& phi, const Tensor& x, std::int64_t batch_size) {
  if (!phi.frozen()) throw ContractError("embed_dataset: target model must be frozen");
  if (batch_size < 1) throw ContractError("embed_dataset: batch size must be positive");
  if (x.rank() != 2) throw DimensionError("embed_dataset: expected rows, got " + shape_str(x.shape()));
  const auto k = x.dim(0);
  const auto d = phi.embedding_dim();
  Tensor out({k, d});
  // Dense kernels pick different reduction orders by row count, so rows are
  // evaluated one at a time to keep the output independent of the partition.
  for (std::int64_t start = 0; start < k; start += batch_size) {
    const auto end = std::min(k, start + batch_size);
    for (std::int64_t i = start; i < end; ++i) {
      const Tensor e = phi.embed(x.slice_rows(i, i + 1));
      std::copy(e.data().begin(), e.data().end(), out.data().begin() + i * d);
    }
  }
  return out;
}

void save_target(const TargetModel& phi, const fs::path& dir) {
  fs::create_directories(dir);
  write_json(dir / "target.json", {{"embedding_source", embedding_source_name(phi.source())},
                                   {"embedding_dim", phi.embedding_dim()},
                                   {"frozen", phi.frozen()}});
  save_extractor(phi.backbone(), dir / "backbone");
  save_extractor(phi.projector(), dir / "projector");
  save_bundle(phi.projection(), dir / "projection", "projection");
}

TargetModel load_target(const fs::path& dir) {
  const auto header = read_json(dir / "target.json");
  TargetModel phi(load_extractor(dir / "backbone"), load_extractor(dir / "projector"),
                  load_bundle(dir / "projection").tensor,
                  parse_embedding_source(header.value("embedding_source", std::string("backbone_features"))));
  phi.freeze();
  return phi;
}

}  // namespace krrst
