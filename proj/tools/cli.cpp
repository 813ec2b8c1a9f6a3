#include "cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "CLI11.hpp"
#include "krrst/bias_demo.hpp"
#include "krrst/bundle.hpp"
#include "krrst/data.hpp"
#include "krrst/distill.hpp"
#include "krrst/errors.hpp"
#include "krrst/eval.hpp"
#include "krrst/ssl.hpp"

#ifndef KRRST_BUILD_ID
#define KRRST_BUILD_ID "unknown"
#endif

namespace krrst::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---- logging -------------------------------------------------------------------------------

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

Level log_level() {
  const char* env = std::getenv("KRRST_LOG");
  if (env == nullptr) return Level::info;
  const std::string v(env);
  if (v == "error") return Level::error;
  if (v == "warn") return Level::warn;
  if (v == "debug") return Level::debug;
  return Level::info;
}

void log(Level level, const std::string& msg) {
  static const Level threshold = log_level();
  if (level > threshold) return;
  static const char* names[] = {"error", "warn", "info", "debug"};
  std::cerr << "[krrst " << names[static_cast<int>(level)] << "] " << msg << '\n';
}

// ---- config plumbing ------------------------------------------------------------------------

// Subtrees that are replaced wholesale rather than flattened; their shape
// depends on a "kind" field.
bool is_opaque(const std::string& key) { return key == "arch"; }

void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object() && !is_opaque(it.key())) {
      flatten(*it, path, out);
    } else {
      out.emplace_back(path, *it);
    }
  }
}

json::json_pointer pointer_of(const std::string& dotted) {
  std::string p;
  std::size_t start = 0;
  for (;;) {
    const auto dot = dotted.find('.', start);
    p += "/" + dotted.substr(start, dot - start);
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  return json::json_pointer(p);
}

json parse_flag(const std::string& key, const std::string& text, const json& def) {
  if (def.is_string()) return text;
  try {
    json v = json::parse(text);
    if (def.is_number() && !v.is_number()) throw ConfigError("--" + key + " expects a number");
    if (def.is_boolean() && !v.is_boolean()) throw ConfigError("--" + key + " expects true or false");
    return v;
  } catch (const json::parse_error&) {
    throw ConfigError("--" + key + ": cannot parse '" + text + "'");
  }
}

json resolve_config(const std::string& command, const std::optional<std::string>& config_path,
                    const std::map<std::string, std::string>& flags) {
  json cfg = default_config(command);
  std::vector<std::pair<std::string, json>> known;
  flatten(cfg, "", known);
  std::map<std::string, json> defaults(known.begin(), known.end());
  if (config_path) {
    json file = read_json(*config_path);
    if (file.contains("command") && file.contains("config")) {
      if (file.at("command") != command) {
        throw ConfigError("manifest is for command '" + file.at("command").get<std::string>() + "', not '" + command + "'");
      }
      file = file.at("config");
    }
    std::vector<std::pair<std::string, json>> given;
    flatten(file, "", given);
    for (const auto& [k, v] : given) {
      if (!defaults.contains(k)) throw ConfigError("unknown config key '" + k + "' for " + command);
      cfg[pointer_of(k)] = v;
    }
  }
  for (const auto& [k, text] : flags) cfg[pointer_of(k)] = parse_flag(k, text, defaults.at(k));
  return cfg;
}

fs::path require_path(const json& c, const char* key) {
  const auto v = c.at(key).get<std::string>();
  if (v.empty()) throw ConfigError(std::string("--") + key + " is required");
  return v;
}

void write_manifest(const std::string& command, const json& cfg, const fs::path& out) {
  fs::create_directories(out);
  json m = {{"command", command}, {"build_id", KRRST_BUILD_ID}, {"config", cfg}};
  if (cfg.contains("seed")) m["seed"] = cfg.at("seed");
  write_json(out / "run_manifest.json", m);
}

ArchConfig arch_of(const json& c) {
  ArchConfig a = arch_from_json(c.at("arch"));
  validate(a);
  return a;
}

FeatureExtractor model_or_fresh(const json& c, std::uint64_t seed) {
  const auto path = c.at("model").get<std::string>();
  if (!path.empty()) return load_extractor(path);
  Rng rng(seed);
  return FeatureExtractor::init(arch_of(c), rng);
}

const LabeledDataset& task_split(const SyntheticSuite& s, const std::string& task, bool train) {
  if (task == "a") return train ? s.task_a_train : s.task_a_test;
  if (task == "b") return train ? s.task_b_train : s.task_b_test;
  throw ConfigError("task must be 'a' or 'b'");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write " + path.string());
  f << text;
}

// ---- commands -----------------------------------------------------------------------------

void cmd_gen_data(const json& c, const fs::path& out) {
  const auto spec = SyntheticSourceSpec::from_json(c.at("spec"));
  save_suite(gen_data(spec), out);
  log(Level::info, "wrote synthetic suite to " + out.string());
}

void cmd_train_target(const json& c, const fs::path& out) {
  const auto src = load_source(require_path(c, "source"));
  const auto result = train_target(
      src.raw, src.shape, src.norm, arch_of(c), BarlowTwinsConfig::from_json(c.at("ssl")),
      AugmentationConfig::from_json(c.at("augmentation")),
      parse_embedding_source(c.at("embedding_source").get<std::string>()), c.at("seed").get<std::uint64_t>(),
      [](std::int64_t epoch, double loss) {
        log(Level::debug, "epoch " + std::to_string(epoch) + " barlow twins loss " + std::to_string(loss));
      });
  std::ofstream logf(out / "train_log.jsonl", std::ios::trunc);
  for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) logf << json{{"epoch", e}, {"loss", result.epoch_loss[e]}}.dump() << '\n';
  save_target(result.model, out / "target");
  log(Level::info, "target model saved to " + (out / "target").string());
}

void cmd_embed(const json& c, const fs::path& out) {
  const auto phi = load_target(require_path(c, "target"));
  Tensor x = load_bundle(require_path(c, "input")).tensor;
  const auto source = c.at("source").get<std::string>();
  if (!source.empty()) {
    const auto src = load_source(source);
    x = src.norm.apply(x, src.shape);
  }
  save_bundle(embed_dataset(phi, x, c.at("batch_size").get<std::int64_t>()), out / "embeddings", "embeddings");
}

void cmd_distill(const json& c, const fs::path& out) {
  const auto src = load_source(require_path(c, "source"));
  const auto phi = load_target(require_path(c, "target"));
  const auto cfg = DistillConfig::from_json(c.at("distill"));
  const Tensor x_t = src.norm.apply(src.raw, src.shape);
  const Tensor targets = embed_dataset(phi, x_t, c.at("embed_batch").get<std::int64_t>());
  DistillRunOptions opts;
  opts.log_path = out / "distill_log.jsonl";
  opts.checkpoint_every = c.at("checkpoint_every").get<std::int64_t>();
  opts.resume = c.at("resume").get<bool>();
  if (opts.checkpoint_every > 0 || opts.resume) opts.checkpoint_dir = out / "checkpoint";
  opts.on_step = [](const MetaStepRecord& r) {
    if (r.step % 100 == 0) log(Level::debug, r.to_json().dump());
  };
  const auto result = run_distillation(x_t, targets, cfg, opts);
  save_distilled(result.distilled, cfg, out / "distilled");
  log(Level::info, "distilled set saved to " + (out / "distilled").string());
}

void cmd_pretrain(const json& c, const fs::path& out) {
  const auto ds = load_distilled(require_path(c, "distilled"));
  const auto r = pretrain_on_distilled(c.at("seed").get<std::uint64_t>(), ds.x_s, ds.y_s, arch_of(c),
                                       PretrainConfig::from_json(c.at("pretrain")));
  save_extractor(r.omega, out / "omega");
  write_json(out / "pretrain_log.json", {{"epoch_loss", r.epoch_loss}});
}

void cmd_finetune(const json& c, const fs::path& out) {
  const auto suite = load_suite(require_path(c, "data"));
  const auto task = c.at("task").get<std::string>();
  const auto train = normalized(task_split(suite, task, true), suite.norm, suite.shape);
  const auto test = normalized(task_split(suite, task, false), suite.norm, suite.shape);
  const auto mode = c.at("mode").get<std::string>();
  if (mode != "finetune" && mode != "probe") throw ConfigError("mode must be 'finetune' or 'probe'");
  const auto cfg = FinetuneConfig::from_json(c.at("finetune"));
  std::vector<double> acc;
  for (auto seed : c.at("seeds").get<std::vector<std::uint64_t>>()) {
    const auto omega = model_or_fresh(c, seed);
    const auto r = mode == "finetune" ? finetune(omega, train, test, cfg, seed) : linear_probe(omega, train, test, cfg, seed);
    log(Level::info, mode + " seed " + std::to_string(seed) + " accuracy " + std::to_string(r.test_accuracy));
    acc.push_back(r.test_accuracy);
  }
  auto key = c.at("results_key").get<std::string>();
  if (key.empty()) key = mode + "_task_" + task;
  const auto results = c.at("results").get<std::string>();
  record_result(results.empty() ? out / "results.json" : fs::path(results), key, summarize(acc));
}

void cmd_kd(const json& c, const fs::path& out) {
  const auto suite = load_suite(require_path(c, "data"));
  const auto train = normalized(suite.task_a_train, suite.norm, suite.shape);
  const auto test = normalized(suite.task_a_test, suite.norm, suite.shape);
  const auto seeds = c.at("seeds").get<std::vector<std::uint64_t>>();
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  Classifier teacher;
  const auto teacher_path = c.at("teacher").get<std::string>();
  if (teacher_path.empty()) {
    teacher = train_teacher(arch_of(c), train, FinetuneConfig::from_json(c.at("teacher_finetune")), seeds.front());
    save_classifier(teacher, out / "teacher");
  } else {
    teacher = load_classifier(teacher_path);
  }
  const auto cfg = KdConfig::from_json(c.at("kd"));
  const auto surrogate = require_path(c, "surrogate").string();
  std::vector<double> acc;
  json logs = json::array();
  for (auto seed : seeds) {
    Tensor x_s;
    if (surrogate == "gaussian") {
      Rng rng(seed);
      x_s = gaussian_inputs(rng, c.at("gaussian_m").get<std::int64_t>(), suite.shape.numel());
    } else {
      x_s = load_distilled(surrogate).x_s;
    }
    const auto r = kd_finetune(model_or_fresh(c, seed), teacher, x_s, test, cfg, seed);
    log(Level::info, "kd seed " + std::to_string(seed) + " accuracy " + std::to_string(r.test_accuracy));
    acc.push_back(r.test_accuracy);
    logs.push_back({{"seed", seed}, {"epoch_kl", r.epoch_kl}, {"test_accuracy", r.test_accuracy}});
  }
  write_json(out / "kd_log.json", logs);
  auto key = c.at("results_key").get<std::string>();
  if (key.empty()) key = surrogate == "gaussian" ? "kd_gaussian" : "kd_distilled";
  const auto results = c.at("results").get<std::string>();
  record_result(results.empty() ? out / "results.json" : fs::path(results), key, summarize(acc),
                {{"eval_batch", cfg.eval_batch}});
}

void cmd_bias_demo(const json& c, const fs::path& out) {
  const auto inst = load_toy_instance(require_path(c, "instance"));
  const auto r = c.at("r").get<std::int64_t>();
  const auto trials = c.at("trials").get<std::int64_t>();
  const auto seed = c.at("seed").get<std::uint64_t>();
  const auto report = bias_estimate(inst.problem, inst.x_s, r, trials, seed);
  const auto decomp = covariance_decomposition_check(inst.problem, inst.x_s, r, trials, seed);
  std::vector<double> w;
  for (const auto& a : inst.problem.atoms) w.push_back(a.p);
  const auto control = plain_gradient_check(inst.problem, inst.x_s, inner_solution(inst.problem, inst.x_s, w), r,
                                            trials, seed);
  json doc = report.to_json();
  doc["decomposition_residual"] = std::vector<double>(decomp.residual.data().begin(), decomp.residual.data().end());
  doc["decomposition_within_4se"] = decomp.within(4.0);
  doc["plain_gradient"] = {{"exact", control.exact}, {"mean", control.mean}, {"stderr", control.stderr_},
                           {"within_3se", control.within(3.0)}};
  write_json(out / "bias_report.json", doc);
  write_text(out / "bias_report.csv", report.to_csv());
  log(Level::info, std::to_string(report.flagged()) + " coordinate(s) flagged biased at r = " + std::to_string(r));
}

void cmd_export_images(const json& c, const fs::path& out) {
  const auto ds = load_distilled(require_path(c, "distilled"));
  const auto src = load_source(require_path(c, "source"));
  const auto n = export_images(ds.x_s, src.shape, src.norm, out / "images");
  log(Level::info, "wrote " + std::to_string(n) + " images");
}

using CommandFn = void (*)(const json&, const fs::path&);

const std::map<std::string, CommandFn>& commands() {
  static const std::map<std::string, CommandFn> table = {
      {"gen-data", cmd_gen_data},   {"train-target", cmd_train_target}, {"distill", cmd_distill},
      {"pretrain", cmd_pretrain},   {"finetune", cmd_finetune},         {"kd", cmd_kd},
      {"bias-demo", cmd_bias_demo}, {"export-images", cmd_export_images}, {"embed", cmd_embed}};
  return table;
}

int execute(const std::string& command, const std::optional<std::string>& config_path,
            const std::map<std::string, std::string>& flags) {
  const json cfg = resolve_config(command, config_path, flags);
  const fs::path out = require_path(cfg, "out");
  write_manifest(command, cfg, out);
  commands().at(command)(cfg, out);
  return kExitOk;
}

}  // namespace

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"gen-data", "train-target", "distill",        "pretrain", "finetune",
                                                 "kd",       "bias-demo",    "export-images", "embed"};
  return names;
}

json default_config(const std::string& command) {
  const ConvNetConfig convnet;
  const json arch = to_json(ArchConfig{convnet});
  if (command == "gen-data") return {{"out", ""}, {"spec", SyntheticSourceSpec{}.to_json()}};
  if (command == "train-target") {
    return {{"source", ""},
            {"out", ""},
            {"seed", 0},
            {"arch", arch},
            {"ssl", BarlowTwinsConfig{}.to_json()},
            {"augmentation", AugmentationConfig{}.to_json()},
            {"embedding_source", "backbone_features"}};
  }
  if (command == "embed") return {{"target", ""}, {"input", ""}, {"source", ""}, {"out", ""}, {"batch_size", 256}};
  if (command == "distill") {
    return {{"source", ""},       {"target", ""},        {"out", ""},        {"distill", DistillConfig{}.to_json()},
            {"embed_batch", 256}, {"checkpoint_every", 0}, {"resume", false}};
  }
  if (command == "pretrain") {
    return {{"distilled", ""}, {"out", ""}, {"seed", 0}, {"arch", arch}, {"pretrain", PretrainConfig{}.to_json()}};
  }
  if (command == "finetune") {
    return {{"data", ""},         {"task", "a"},     {"model", ""},     {"arch", arch},
            {"mode", "finetune"}, {"finetune", FinetuneConfig{}.to_json()}, {"seeds", {0}},
            {"out", ""},          {"results", ""},   {"results_key", ""}};
  }
  if (command == "kd") {
    return {{"data", ""},       {"teacher", ""},    {"surrogate", ""},       {"gaussian_m", 32},
            {"model", ""},      {"arch", arch},     {"teacher_finetune", FinetuneConfig{}.to_json()},
            {"kd", KdConfig{}.to_json()}, {"seeds", {0}}, {"out", ""}, {"results", ""}, {"results_key", ""}};
  }
  if (command == "bias-demo") {
    return {{"instance", ""}, {"out", ""}, {"r", 2}, {"trials", 10000}, {"seed", 0}};
  }
  if (command == "export-images") return {{"distilled", ""}, {"source", ""}, {"out", ""}};
  throw ConfigError("unknown command '" + command + "'");
}

int run(int argc, const char* const* argv) {
  CLI::App app{"Self-supervised dataset distillation with kernel ridge regression"};
  app.require_subcommand(1);
  struct Slot {
    std::optional<std::string> config;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;
  };
  std::map<std::string, Slot> slots;
  for (const auto& name : command_names()) {
    auto* sub = app.add_subcommand(name);
    auto& slot = slots[name];
    sub->add_option("--config", slot.config, "JSON config or run manifest; flags override it");
    std::vector<std::pair<std::string, json>> keys;
    flatten(default_config(name), "", keys);
    for (const auto& [k, v] : keys) {
      slot.options[k] = sub->add_option("--" + k, slot.values[k], "default: " + v.dump());
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  const auto* chosen = app.get_subcommands().front();
  const auto& slot = slots.at(chosen->get_name());
  std::map<std::string, std::string> flags;
  for (const auto& [k, opt] : slot.options)
    if (opt->count() > 0) flags[k] = slot.values.at(k);
  try {
    return execute(chosen->get_name(), slot.config, flags);
  } catch (const ConfigError& e) {
    log(Level::error, std::string("config error: ") + e.what());
    return kExitConfig;
  } catch (const FormatError& e) {
    log(Level::error, std::string("format error: ") + e.what());
    return kExitFormat;
  } catch (const DimensionError& e) {
    log(Level::error, std::string("data shape error: ") + e.what());
    return kExitFormat;
  } catch (const NumericError& e) {
    log(Level::error, std::string("numeric error: ") + e.what());
    return kExitNumeric;
  } catch (const ContractError& e) {
    log(Level::error, std::string("invalid request: ") + e.what());
    return kExitConfig;
  } catch (const json::exception& e) {
    log(Level::error, std::string("config error: ") + e.what());
    return kExitConfig;
  } catch (const fs::filesystem_error& e) {
    log(Level::error, std::string("file error: ") + e.what());
    return kExitFormat;
  }
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("krrst");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace krrst::cli
