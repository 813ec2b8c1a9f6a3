#include "krrst/models.hpp"

#include <cmath>

#include "krrst/bundle.hpp"
#include "krrst/errors.hpp"

namespace krrst {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view norm_name(NormKind kind) { return kind == NormKind::batch_norm ? "batch_norm" : "none"; }

NormKind parse_norm(std::string_view name) {
  if (name == "batch_norm") return NormKind::batch_norm;
  if (name == "none") return NormKind::none;
  throw ConfigError("unknown norm '" + std::string(name) + "'");
}

void validate(const ArchConfig& cfg) {
  if (const auto* c = std::get_if<ConvNetConfig>(&cfg)) {
    if (c->depth < 1) throw ConfigError("convnet depth must be >= 1");
    if (c->width < 1) throw ConfigError("convnet width must be >= 1");
    if (c->input.channels < 1) throw ConfigError("convnet input needs at least one channel");
    if ((c->input.height >> c->depth) < 1 || (c->input.width >> c->depth) < 1) {
      throw ConfigError("convnet depth " + std::to_string(c->depth) + " pools a " + std::to_string(c->input.height) +
                        "x" + std::to_string(c->input.width) + " input below 1 pixel");
    }
  } else {
    const auto& m = std::get<MlpConfig>(cfg);
    if (m.hidden.empty()) throw ConfigError("mlp needs at least one hidden layer");
    if (m.input_dim < 1) throw ConfigError("mlp input_dim must be >= 1");
    for (auto h : m.hidden)
      if (h < 1) throw ConfigError("mlp hidden sizes must be >= 1");
  }
}

std::int64_t feature_dim(const ArchConfig& cfg) {
  if (const auto* c = std::get_if<ConvNetConfig>(&cfg)) {
    return c->width * (c->input.height >> c->depth) * (c->input.width >> c->depth);
  }
  return std::get<MlpConfig>(cfg).hidden.back();
}

std::int64_t input_dim(const ArchConfig& cfg) {
  if (const auto* c = std::get_if<ConvNetConfig>(&cfg)) return c->input.numel();
  return std::get<MlpConfig>(cfg).input_dim;
}

json to_json(const ArchConfig& cfg) {
  if (const auto* c = std::get_if<ConvNetConfig>(&cfg)) {
    return {{"kind", "convnet"},
            {"depth", c->depth},
            {"width", c->width},
            {"input", {c->input.channels, c->input.height, c->input.width}},
            {"norm", norm_name(c->norm)}};
  }
  const auto& m = std::get<MlpConfig>(cfg);
  return {{"kind", "mlp"}, {"hidden", m.hidden}, {"input_dim", m.input_dim}, {"norm", norm_name(m.norm)}};
}

ArchConfig arch_from_json(const json& j) {
  try {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "convnet") {
      ConvNetConfig c;
      c.depth = j.value("depth", c.depth);
      c.width = j.value("width", c.width);
      if (j.contains("input")) {
        const auto in = j.at("input").get<std::vector<std::int64_t>>();
        if (in.size() != 3) throw ConfigError("convnet input must be [c, h, w]");
        c.input = {in[0], in[1], in[2]};
      }
      c.norm = parse_norm(j.value("norm", std::string("batch_norm")));
      return c;
    }
    if (kind == "mlp") {
      MlpConfig m;
      m.hidden = j.value("hidden", m.hidden);
      m.input_dim = j.value("input_dim", m.input_dim);
      m.norm = parse_norm(j.value("norm", std::string("none")));
      return m;
    }
    throw ConfigError("unknown architecture kind '" + kind + "'");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed architecture config: ") + e.what());
  }
}

FeatureExtractor FeatureExtractor::init(const ArchConfig& cfg, Rng& rng) {
  validate(cfg);
  FeatureExtractor fe;
  fe.cfg_ = cfg;
  auto add = [&fe](std::string name, Tensor t) {
    fe.names_.push_back(std::move(name));
    fe.params_.push_back(std::move(t));
  };
  auto add_norm = [&](const std::string& prefix, std::int64_t c) {
    add(prefix + ".gamma", Tensor::ones({c}));
    add(prefix + ".beta", Tensor::zeros({c}));
    fe.running_mean_.push_back(Tensor::zeros({c}));
    fe.running_var_.push_back(Tensor::ones({c}));
  };
  if (const auto* c = std::get_if<ConvNetConfig>(&cfg)) {
    std::int64_t in = c->input.channels;
    for (std::int64_t l = 0; l < c->depth; ++l) {
      const std::string p = "conv" + std::to_string(l);
      const double std = std::sqrt(2.0 / static_cast<double>(in * 9));
      add(p + ".weight", rng.normal_tensor({c->width, in, 3, 3}, 0.0, std));
      if (c->norm == NormKind::batch_norm) {
        add_norm(p + ".bn", c->width);
      } else {
        add(p + ".bias", Tensor::zeros({c->width}));
      }
      in = c->width;
    }
  } else {
    const auto& m = std::get<MlpConfig>(cfg);
    std::int64_t in = m.input_dim;
    for (std::size_t l = 0; l < m.hidden.size(); ++l) {
      const std::string p = "fc" + std::to_string(l);
      const double std = std::sqrt(2.0 / static_cast<double>(in));
      add(p + ".weight", rng.normal_tensor({in, m.hidden[l]}, 0.0, std));
      if (m.norm == NormKind::batch_norm) {
        add_norm(p + ".bn", m.hidden[l]);
      } else {
        add(p + ".bias", Tensor::zeros({m.hidden[l]}));
      }
      in = m.hidden[l];
    }
  }
  return fe;
}

std::vector<ad::Var> FeatureExtractor::bind(ad::Tape& tape, bool requires_grad) const {
  std::vector<ad::Var> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(tape.leaf(p, requires_grad));
  return out;
}

ad::Var FeatureExtractor::norm_layer(ad::Tape& tape, const ad::Var& h, const ad::Var& gamma, const ad::Var& beta,
                                     std::size_t index, NormMode mode) {
  (void)tape;
  if (mode == NormMode::eval) {
    const auto& rm = running_mean_[index];
    const auto& rv = running_var_[index];
    const auto c = rm.numel();
    std::vector<double> sc(static_cast<std::size_t>(c)), sh(static_cast<std::size_t>(c));
    for (std::int64_t i = 0; i < c; ++i) {
      const double inv = 1.0 / std::sqrt(rv[i] + kBatchNormEps);
      sc[static_cast<std::size_t>(i)] = gamma.value()[i] * inv;
      sh[static_cast<std::size_t>(i)] = beta.value()[i] - rm[i] * gamma.value()[i] * inv;
    }
    return ad::channel_affine(h, sc, sh);
  }
  ad::BatchStats stats;
  auto out = ad::batch_norm(h, gamma, beta, kBatchNormEps, mode == NormMode::train ? &stats : nullptr);
  if (mode == NormMode::train) {
    const auto& shape = h.shape();
    std::int64_t count = shape[0];
    for (std::size_t i = 2; i < shape.size(); ++i) count *= shape[i];
    const double unbias = count > 1 ? static_cast<double>(count) / static_cast<double>(count - 1) : 1.0;
    auto& rm = running_mean_[index];
    auto& rv = running_var_[index];
    for (std::int64_t i = 0; i < rm.numel(); ++i) {
      const auto iu = static_cast<std::size_t>(i);
      rm[i] = (1.0 - kBatchNormMomentum) * rm[i] + kBatchNormMomentum * stats.mean[iu];
      rv[i] = (1.0 - kBatchNormMomentum) * rv[i] + kBatchNormMomentum * stats.var[iu] * unbias;
    }
  }
  return out;
}

ad::Var FeatureExtractor::forward(ad::Tape& tape, const std::vector<ad::Var>& bound, const ad::Var& x,
                                  NormMode mode) {
  if (bound.size() != params_.size()) throw ContractError("forward: bound parameter count mismatch");
  if (x.value().rank() != 2 || x.shape()[1] != input_dim()) {
    throw DimensionError("forward_features: input " + shape_str(x.shape()) + " does not match d_x = " +
                         std::to_string(input_dim()));
  }
  const auto batch = x.shape()[0];
  const bool uses_norm = std::visit([](const auto& c) { return c.norm == NormKind::batch_norm; }, cfg_);
  if (uses_norm && mode != NormMode::eval && batch < 2) {
    throw ContractError("forward_features: batch of " + std::to_string(batch) +
                        " cannot provide batch statistics for normalization");
  }
  std::size_t p = 0, norm_index = 0;
  if (const auto* c = std::get_if<ConvNetConfig>(&cfg_)) {
    auto h = ad::reshape(x, {batch, c->input.channels, c->input.height, c->input.width});
    for (std::int64_t l = 0; l < c->depth; ++l) {
      const auto& w = bound[p++];
      if (c->norm == NormKind::batch_norm) {
        h = ad::conv2d(h, w, ad::Var());
        const auto& gamma = bound[p++];
        const auto& beta = bound[p++];
        h = norm_layer(tape, h, gamma, beta, norm_index++, mode);
      } else {
        const auto& b = bound[p++];
        h = ad::conv2d(h, w, b);
      }
      h = ad::avg_pool2(ad::relu(h));
    }
    return ad::reshape(h, {batch, feature_dim()});
  }
  const auto& m = std::get<MlpConfig>(cfg_);
  ad::Var h = x;
  for (std::size_t l = 0; l < m.hidden.size(); ++l) {
    const auto& w = bound[p++];
    h = ad::matmul(h, w);
    if (m.norm == NormKind::batch_norm) {
      const auto& gamma = bound[p++];
      const auto& beta = bound[p++];
      h = norm_layer(tape, h, gamma, beta, norm_index++, mode);
    } else {
      h = ad::add_row_bias(h, bound[p++]);
    }
    h = ad::relu(h);
  }
  return h;
}

Tensor FeatureExtractor::features(const Tensor& x, NormMode mode) {
  ad::Tape tape;
  auto bound = bind(tape, false);
  return forward(tape, bound, tape.constant(x), mode).value();
}

Tensor FeatureExtractor::features(const Tensor& x, NormMode mode) const {
  ad::Tape tape;
  auto bound = bind(tape, false);
  return forward(tape, bound, tape.constant(x), mode).value();
}

ad::Var FeatureExtractor::forward(ad::Tape& tape, const std::vector<ad::Var>& bound, const ad::Var& x,
                                  NormMode mode) const {
  if (mode == NormMode::train) throw ContractError("forward: train mode needs a mutable extractor");
  // Only train mode writes the running statistics.
  return const_cast<FeatureExtractor*>(this)->forward(tape, bound, x, mode);
}

bool FeatureExtractor::all_finite() const {
  for (const auto& p : params_)
    if (!p.all_finite()) return false;
  for (const auto& v : running_var_)
    for (double x : v.data())
      if (!(x > 0.0) || !std::isfinite(x)) return false;
  return true;
}

Tensor init_head(std::int64_t d_h, std::int64_t d_y, Rng& rng) {
  return rng.normal_tensor({d_h, d_y}, 0.0, std::sqrt(2.0 / static_cast<double>(d_h)));
}

ad::Var forward_head(const ad::Var& w, const ad::Var& features) {
  if (features.value().rank() != 2 || w.value().rank() != 2 || features.shape()[1] != w.shape()[0]) {
    throw DimensionError("forward_head: features " + shape_str(features.shape()) + " vs head " + shape_str(w.shape()));
  }
  return ad::matmul(features, w);
}

Tensor forward_head(const Tensor& w, const Tensor& features) {
  if (features.rank() != 2 || w.rank() != 2 || features.dim(1) != w.dim(0)) {
    throw DimensionError("forward_head: features " + shape_str(features.shape()) + " vs head " + shape_str(w.shape()));
  }
  return ad::matmul(features, w);
}

void save_tensor_list(const std::vector<Tensor>& tensors, const fs::path& dir, const std::string& prefix) {
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const std::string name = prefix + "_" + std::to_string(i);
    save_bundle(tensors[i], dir / name, name);
  }
}

std::vector<Tensor> load_tensor_list(const fs::path& dir, const std::string& prefix, std::size_t count) {
  std::vector<Tensor> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(load_bundle(dir / (prefix + "_" + std::to_string(i))).tensor);
  return out;
}

void save_extractor(const FeatureExtractor& fe, const fs::path& dir) {
  fs::create_directories(dir);
  json header = {{"arch", to_json(fe.config())},
                 {"param_names", fe.param_names()},
                 {"norm_layers", fe.running_mean().size()}};
  write_json(dir / "model.json", header);
  save_tensor_list(fe.params(), dir, "param");
  save_tensor_list(fe.running_mean(), dir, "running_mean");
  save_tensor_list(fe.running_var(), dir, "running_var");
}

FeatureExtractor load_extractor(const fs::path& dir) {
  const json header = read_json(dir / "model.json");
  Rng rng(0);
  FeatureExtractor fe = FeatureExtractor::init(arch_from_json(header.at("arch")), rng);
  auto params = load_tensor_list(dir, "param", fe.params().size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != fe.params()[i].shape()) {
      throw FormatError(dir.string() + ": parameter " + fe.param_names()[i] + " has shape " +
                        shape_str(params[i].shape()) + ", config expects " + shape_str(fe.params()[i].shape()));
    }
  }
  fe.params() = std::move(params);
  fe.running_mean() = load_tensor_list(dir, "running_mean", fe.running_mean().size());
  fe.running_var() = load_tensor_list(dir, "running_var", fe.running_var().size());
  return fe;
}

}  // namespace krrst
