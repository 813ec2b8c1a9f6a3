#include "krrst/distill.hpp"

#include <fstream>
#include <sstream>
#include <string>

#include "krrst/bundle.hpp"
#include "krrst/errors.hpp"

namespace krrst {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view y_init_name(YInit mode) {
  return mode == YInit::target_embed ? "target_embed" : "standard_normal";
}

YInit parse_y_init(std::string_view name) {
  if (name == "target_embed") return YInit::target_embed;
  if (name == "standard_normal") return YInit::standard_normal;
  throw ConfigError("unknown y_init '" + std::string(name) + "'");
}

std::string_view loss_reduction_name(LossReduction r) { return r == LossReduction::sum ? "sum" : "mean"; }

LossReduction parse_loss_reduction(std::string_view name) {
  if (name == "sum") return LossReduction::sum;
  if (name == "mean") return LossReduction::mean;
  throw ConfigError("unknown loss reduction '" + std::string(name) + "'");
}

DistillConfig DistillConfig::full_scale_preset() {
  DistillConfig c;
  c.pool_size = 10;
  c.max_steps = 1000;
  c.meta_iterations = 160000;
  return c;
}

void DistillConfig::validate() const {
  if (m < 1) throw ConfigError("m must be >= 1");
  if (pool_size < 1) throw ConfigError("pool_size (l) must be >= 1");
  if (max_steps < 1) throw ConfigError("max_steps (T) must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size (b) must be >= 1");
  if (meta_iterations < 0) throw ConfigError("meta_iterations must be >= 0");
  if (!(meta_lr >= 0.0) || !(inner.lr >= 0.0)) throw ConfigError("learning rates must be non-negative");
  ridge.validate();
  krrst::validate(arch);
}

json DistillConfig::to_json() const {
  return {{"m", m},
          {"pool_size", pool_size},
          {"max_steps", max_steps},
          {"meta_iterations", meta_iterations},
          {"batch_size", batch_size},
          {"meta_lr", meta_lr},
          {"meta_schedule", schedule_name(meta_schedule)},
          {"meta_weight_decay", meta_weight_decay},
          {"inner_lr", inner.lr},
          {"inner_momentum", inner.momentum},
          {"inner_weight_decay", inner.weight_decay},
          {"inner_reduction", loss_reduction_name(inner_reduction)},
          {"ridge", ridge.to_json()},
          {"y_init", y_init_name(y_init)},
          {"arch", krrst::to_json(arch)},
          {"seed", seed}};
}

DistillConfig DistillConfig::from_json(const json& j) {
  DistillConfig c = j.value("preset", std::string("desk")) == "full_scale" ? full_scale_preset() : DistillConfig{};
  c.m = j.value("m", c.m);
  c.pool_size = j.value("pool_size", c.pool_size);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.meta_iterations = j.value("meta_iterations", c.meta_iterations);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.meta_lr = j.value("meta_lr", c.meta_lr);
  if (j.contains("meta_schedule")) c.meta_schedule = parse_schedule(j.at("meta_schedule").get<std::string>());
  c.meta_weight_decay = j.value("meta_weight_decay", c.meta_weight_decay);
  c.inner.lr = j.value("inner_lr", c.inner.lr);
  c.inner.momentum = j.value("inner_momentum", c.inner.momentum);
  c.inner.weight_decay = j.value("inner_weight_decay", c.inner.weight_decay);
  if (j.contains("inner_reduction")) c.inner_reduction = parse_loss_reduction(j.at("inner_reduction").get<std::string>());
  if (j.contains("ridge")) c.ridge = RidgeConfig::from_json(j.at("ridge"));
  if (j.contains("y_init")) c.y_init = parse_y_init(j.at("y_init").get<std::string>());
  if (j.contains("arch")) c.arch = arch_from_json(j.at("arch"));
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

DistilledSet init_distilled(Rng& rng, const Tensor& x_t, const Tensor& targets, const DistillConfig& cfg) {
  cfg.validate();
  if (x_t.rank() != 2 || targets.rank() != 2 || targets.dim(0) != x_t.dim(0)) {
    throw DimensionError("init_distilled: X_t " + shape_str(x_t.shape()) + " and targets " +
                         shape_str(targets.shape()) + " disagree");
  }
  if (cfg.m > x_t.dim(0)) {
    throw ContractError("init_distilled: m = " + std::to_string(cfg.m) + " exceeds n = " + std::to_string(x_t.dim(0)));
  }
  DistilledSet s;
  s.source_rows = rng.sample_without_replacement(x_t.dim(0), cfg.m);
  s.x_s = x_t.gather_rows(s.source_rows);
  s.y_s = cfg.y_init == YInit::target_embed ? targets.gather_rows(s.source_rows)
                                            : rng.normal_tensor({cfg.m, targets.dim(1)});
  s.opt_x.config = {cfg.meta_lr, 0.9, 0.999, 1e-8, cfg.meta_weight_decay};
  s.opt_y.config = s.opt_x.config;
  return s;
}

namespace {

struct InnerEval {
  double loss = 0.0;
  std::vector<Tensor> grads;  // omega params..., W
};

InnerEval inner_forward_backward(ModelPoolEntry& entry, const Tensor& x_s, const Tensor& y_s) {
  ad::Tape tape;
  const auto bound = entry.omega.bind(tape, true);
  const auto w = tape.leaf(entry.w, true);
  const auto f = entry.omega.forward(tape, bound, tape.constant(x_s), NormMode::train);
  const auto r = ad::sub(forward_head(w, f), tape.constant(y_s));
  const auto loss = ad::scale(ad::sum_squares(r), 0.5);
  tape.backward(loss);
  InnerEval out;
  out.loss = loss.value().item();
  for (const auto& v : bound) out.grads.push_back(tape.grad(v));
  out.grads.push_back(tape.grad(w));
  return out;
}

void apply_sgd(ModelPoolEntry& entry, std::vector<Tensor>& grads) {
  auto& ps = entry.omega.params();
  std::vector<Tensor> params;
  params.reserve(ps.size() + 1);
  for (auto& p : ps) params.push_back(std::move(p));
  params.push_back(std::move(entry.w));
  sgd_step(params, grads, entry.opt);
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i] = std::move(params[i]);
  entry.w = std::move(params.back());
}

}  // namespace

double inner_loss(const ModelPoolEntry& entry, const Tensor& x_s, const Tensor& y_s, NormMode mode) {
  const Tensor pred = forward_head(entry.w, entry.omega.features(x_s, mode));
  double s = 0.0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const double d = pred[i] - y_s[i];
    s += d * d;
  }
  return 0.5 * s;
}

ModelPoolEntry fresh_entry(Rng& rng, const DistillConfig& cfg, std::int64_t d_y) {
  Rng init = rng.split();
  ModelPoolEntry e;
  e.omega = FeatureExtractor::init(cfg.arch, init);
  e.w = init_head(e.omega.feature_dim(), d_y, init);
  e.opt.config = cfg.inner;
  e.t = 0;
  return e;
}

double inner_step(ModelPoolEntry& entry, const Tensor& x_s, const Tensor& y_s, const DistillConfig& cfg) {
  if (entry.t >= cfg.max_steps) {
    throw ContractError("inner_step: entry already at T = " + std::to_string(cfg.max_steps));
  }
  InnerEval ev;
  try {
    ev = inner_forward_backward(entry, x_s, y_s);
  } catch (const NumericError& e) {
    throw TrainingError("inner_step at t = " + std::to_string(entry.t) + ": " + e.what());
  }
  if (cfg.inner_reduction == LossReduction::mean) {
    const double s = 1.0 / static_cast<double>(y_s.numel());
    for (auto& g : ev.grads)
      for (auto& v : g.data()) v *= s;
  }
  apply_sgd(entry, ev.grads);
  if (!entry.omega.all_finite() || !entry.w.all_finite()) {
    throw TrainingError("inner_step produced non-finite parameters at t = " + std::to_string(entry.t));
  }
  ++entry.t;
  return ev.loss;
}

void reset_entry(Rng& rng, ModelPoolEntry& entry, const DistillConfig& cfg) {
  if (entry.t != cfg.max_steps) {
    throw ContractError("reset_entry: t = " + std::to_string(entry.t) + " has not reached T = " +
                        std::to_string(cfg.max_steps));
  }
  entry = fresh_entry(rng, cfg, entry.w.dim(1));
}

ModelPool init_pool(Rng& rng, const Tensor& x_s, const Tensor& y_s, const DistillConfig& cfg) {
  ModelPool pool;
  for (std::int64_t i = 0; i < cfg.pool_size; ++i) {
    const auto t = 1 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(cfg.max_steps)));
    auto e = fresh_entry(rng, cfg, y_s.dim(1));
    for (std::int64_t k = 0; k < t; ++k) inner_step(e, x_s, y_s, cfg);
    pool.entries.push_back(std::move(e));
  }
  return pool;
}

json MetaStepRecord::to_json() const {
  return {{"step", step},
          {"outer_loss", outer_loss},
          {"pool_index", pool_index},
          {"t", t_before},
          {"reset", reset},
          {"lambda", diag.lambda},
          {"jitter", diag.jitter},
          {"residual", diag.residual}};
}

MetaStepRecord meta_step(DistilledSet& state, ModelPool& pool, const Tensor& x_t, const Tensor& targets, Rng& rng,
                         const DistillConfig& cfg) {
  if (pool.entries.empty()) throw ContractError("meta_step: empty model pool");
  const auto b = std::min(cfg.batch_size, x_t.dim(0));
  const auto rows = rng.sample_without_replacement(x_t.dim(0), b);
  const auto i = static_cast<std::int64_t>(rng.below(pool.entries.size()));
  auto& entry = pool.entries[static_cast<std::size_t>(i)];

  MetaStepRecord rec;
  rec.step = state.step;
  rec.pool_index = i;
  rec.t_before = entry.t;

  MetaGradResult g;
  try {
    g = meta_grad(entry.omega, state.x_s, state.y_s, x_t.gather_rows(rows), targets.gather_rows(rows), cfg.ridge);
  } catch (const NumericError& e) {
    throw TrainingError("meta_step " + std::to_string(state.step) + ": " + e.what());
  }
  rec.outer_loss = g.loss;
  rec.diag = g.diag;

  const double factor = lr_schedule(cfg.meta_schedule, state.step, cfg.meta_iterations);
  std::vector<Tensor> px{std::move(state.x_s)}, py{std::move(state.y_s)};
  adamw_step(px, {g.grad_x}, state.opt_x, factor);
  adamw_step(py, {g.grad_y}, state.opt_y, factor);
  state.x_s = std::move(px[0]);
  state.y_s = std::move(py[0]);
  if (!state.all_finite()) throw TrainingError("meta_step " + std::to_string(state.step) + ": distilled set diverged");

  // Pool update after the distilled-set update, on the updated (X_s, Y_s).
  if (entry.t < cfg.max_steps) {
    inner_step(entry, state.x_s, state.y_s, cfg);
  } else {
    reset_entry(rng, entry, cfg);
    rec.reset = true;
  }
  ++state.step;
  return rec;
}

namespace {

void save_adamw(const AdamWState& s, const fs::path& dir, const std::string& prefix) {
  save_tensor_list(s.m, dir, prefix + "_m");
  save_tensor_list(s.v, dir, prefix + "_v");
}

void load_adamw(AdamWState& s, const fs::path& dir, const std::string& prefix, std::size_t count) {
  s.m = load_tensor_list(dir, prefix + "_m", count);
  s.v = load_tensor_list(dir, prefix + "_v", count);
}

// Keeps the first `lines` lines of an existing log (used on resume).
void truncate_log(const fs::path& path, std::int64_t lines) {
  std::vector<std::string> kept;
  {
    std::ifstream in(path);
    std::string line;
    while (static_cast<std::int64_t>(kept.size()) < lines && std::getline(in, line)) kept.push_back(line);
  }
  if (static_cast<std::int64_t>(kept.size()) != lines) {
    throw FormatError("resume: log " + path.string() + " has fewer than " + std::to_string(lines) + " lines");
  }
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : kept) out << l << '\n';
}

}  // namespace

void save_checkpoint(const DistilledSet& state, const ModelPool& pool, const RngState& rng, const fs::path& dir) {
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  json entries = json::array();
  for (std::size_t i = 0; i < pool.entries.size(); ++i) {
    const auto& e = pool.entries[i];
    const auto edir = tmp / ("entry_" + std::to_string(i));
    save_extractor(e.omega, edir / "omega");
    save_bundle(e.w, edir / "w", "w");
    save_tensor_list(e.opt.velocity, edir, "velocity");
    entries.push_back({{"t", e.t}, {"opt_steps", e.opt.steps}, {"velocity", e.opt.velocity.size()}});
  }
  save_bundle(state.x_s, tmp / "x_s", "x_s");
  save_bundle(state.y_s, tmp / "y_s", "y_s");
  save_adamw(state.opt_x, tmp, "adam_x");
  save_adamw(state.opt_y, tmp, "adam_y");
  write_json(tmp / "checkpoint.json",
             {{"step", state.step},
              {"rng_seed", std::to_string(rng.seed)},
              {"rng_counter", std::to_string(rng.counter)},
              {"adam_x_steps", state.opt_x.steps},
              {"adam_x_slots", state.opt_x.m.size()},
              {"adam_y_steps", state.opt_y.steps},
              {"adam_y_slots", state.opt_y.m.size()},
              {"source_rows", state.source_rows},
              {"entries", entries}});
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

Checkpoint load_checkpoint(const fs::path& dir, const DistillConfig& cfg) {
  const auto j = read_json(dir / "checkpoint.json");
  Checkpoint c;
  try {
    c.rng.seed = std::stoull(j.at("rng_seed").get<std::string>());
    c.rng.counter = std::stoull(j.at("rng_counter").get<std::string>());
    auto& s = c.distilled;
    s.step = j.at("step").get<std::int64_t>();
    s.source_rows = j.at("source_rows").get<std::vector<std::int64_t>>();
    s.x_s = load_bundle(dir / "x_s").tensor;
    s.y_s = load_bundle(dir / "y_s").tensor;
    s.opt_x.config = {cfg.meta_lr, 0.9, 0.999, 1e-8, cfg.meta_weight_decay};
    s.opt_y.config = s.opt_x.config;
    s.opt_x.steps = j.at("adam_x_steps").get<std::int64_t>();
    s.opt_y.steps = j.at("adam_y_steps").get<std::int64_t>();
    load_adamw(s.opt_x, dir, "adam_x", j.at("adam_x_slots").get<std::size_t>());
    load_adamw(s.opt_y, dir, "adam_y", j.at("adam_y_slots").get<std::size_t>());
    const auto& entries = j.at("entries");
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto edir = dir / ("entry_" + std::to_string(i));
      ModelPoolEntry e;
      e.omega = load_extractor(edir / "omega");
      e.w = load_bundle(edir / "w").tensor;
      e.opt.config = cfg.inner;
      e.opt.steps = entries[i].at("opt_steps").get<std::int64_t>();
      e.opt.velocity = load_tensor_list(edir, "velocity", entries[i].at("velocity").get<std::size_t>());
      e.t = entries[i].at("t").get<std::int64_t>();
      c.pool.entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw FormatError("checkpoint " + dir.string() + ": " + e.what());
  }
  if (static_cast<std::int64_t>(c.pool.entries.size()) != cfg.pool_size) {
    throw ConfigError("checkpoint pool size does not match config");
  }
  return c;
}

DistillRunResult run_distillation(const Tensor& x_t, const Tensor& targets, const DistillConfig& cfg,
                                  const DistillRunOptions& opts) {
  cfg.validate();
  if (input_dim(cfg.arch) != x_t.dim(1)) throw ConfigError("distill: architecture input does not match X_t");
  DistillRunResult out;
  Rng rng(cfg.seed);
  if (opts.resume) {
    if (opts.checkpoint_dir.empty()) throw ConfigError("resume requested without a checkpoint directory");
    auto c = load_checkpoint(opts.checkpoint_dir, cfg);
    out.distilled = std::move(c.distilled);
    out.pool = std::move(c.pool);
    rng = Rng(c.rng);
    if (!opts.log_path.empty()) truncate_log(opts.log_path, out.distilled.step);
  } else {
    out.distilled = init_distilled(rng, x_t, targets, cfg);
    out.pool = init_pool(rng, out.distilled.x_s, out.distilled.y_s, cfg);
    if (!opts.log_path.empty()) std::ofstream(opts.log_path, std::ios::trunc);
  }
  std::ofstream log;
  if (!opts.log_path.empty()) log.open(opts.log_path, std::ios::app);
  auto& state = out.distilled;
  while (state.step < cfg.meta_iterations && (opts.stop_after < 0 || state.step < opts.stop_after)) {
    auto rec = meta_step(state, out.pool, x_t, targets, rng, cfg);
    if (log.is_open()) log << rec.to_json().dump() << '\n';
    if (opts.on_step) opts.on_step(rec);
    out.records.push_back(rec);
    if (!opts.checkpoint_dir.empty() && opts.checkpoint_every > 0 && state.step % opts.checkpoint_every == 0) {
      log.flush();
      save_checkpoint(state, out.pool, rng.state(), opts.checkpoint_dir);
    }
  }
  if (!opts.checkpoint_dir.empty()) save_checkpoint(state, out.pool, rng.state(), opts.checkpoint_dir);
  out.rng = rng.state();
  return out;
}

void save_distilled(const DistilledSet& state, const DistillConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  save_bundle(state.x_s, dir / "x_s", "x_s");
  save_bundle(state.y_s, dir / "y_s", "y_s");
  write_json(dir / "distilled.json", {{"step", state.step}, {"config", cfg.to_json()}, {"source_rows", state.source_rows}});
}

DistilledSet load_distilled(const fs::path& dir) {
  DistilledSet s;
  s.x_s = load_bundle(dir / "x_s").tensor;
  s.y_s = load_bundle(dir / "y_s").tensor;
  if (s.x_s.rank() != 2 || s.y_s.rank() != 2 || s.x_s.dim(0) != s.y_s.dim(0)) {
    throw FormatError("distilled bundle: x_s " + shape_str(s.x_s.shape()) + " and y_s " + shape_str(s.y_s.shape()) +
                      " disagree on m");
  }
  if (fs::exists(dir / "distilled.json")) {
    const auto j = read_json(dir / "distilled.json");
    s.step = j.value("step", std::int64_t{0});
    s.source_rows = j.value("source_rows", std::vector<std::int64_t>{});
  }
  return s;
}

}  // namespace krrst
