#include "krrst/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "krrst/bundle.hpp"
#include "krrst/errors.hpp"
#include "krrst/rng.hpp"

namespace krrst {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- normalization ------------------------------------------------------------

Normalization Normalization::compute(const Tensor& raw, const ImageShape& shape) {
  if (raw.rank() != 2 || raw.dim(1) != shape.numel()) {
    throw DimensionError("normalization: data " + shape_str(raw.shape()) + " vs image of " +
                         std::to_string(shape.numel()) + " values");
  }
  const auto n = raw.dim(0), c = shape.channels, hw = shape.height * shape.width;
  Normalization norm;
  norm.mean.assign(static_cast<std::size_t>(c), 0.0);
  norm.stddev.assign(static_cast<std::size_t>(c), 0.0);
  const double count = static_cast<double>(n * hw);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t p = 0; p < hw; ++p) s += raw[i * c * hw + ch * hw + p];
    const double mu = s / count;
    double ss = 0.0;
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t p = 0; p < hw; ++p) {
        const double d = raw[i * c * hw + ch * hw + p] - mu;
        ss += d * d;
      }
    norm.mean[static_cast<std::size_t>(ch)] = mu;
    norm.stddev[static_cast<std::size_t>(ch)] = std::max(std::sqrt(ss / count), 1e-6);
  }
  return norm;
}

Tensor Normalization::apply(const Tensor& raw, const ImageShape& shape) const {
  const auto c = shape.channels, hw = shape.height * shape.width;
  if (static_cast<std::int64_t>(mean.size()) != c || raw.rank() != 2 || raw.dim(1) != c * hw) {
    throw DimensionError("normalization: incompatible data " + shape_str(raw.shape()));
  }
  Tensor out = raw;
  for (std::int64_t i = 0; i < raw.dim(0); ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double mu = mean[static_cast<std::size_t>(ch)], sd = stddev[static_cast<std::size_t>(ch)];
      for (std::int64_t p = 0; p < hw; ++p) {
        auto& v = out[i * c * hw + ch * hw + p];
        v = (v - mu) / sd;
      }
    }
  return out;
}

Tensor Normalization::invert(const Tensor& normalized, const ImageShape& shape) const {
  const auto c = shape.channels, hw = shape.height * shape.width;
  if (static_cast<std::int64_t>(mean.size()) != c || normalized.rank() != 2 || normalized.dim(1) != c * hw) {
    throw DimensionError("normalization: incompatible data " + shape_str(normalized.shape()));
  }
  Tensor out = normalized;
  for (std::int64_t i = 0; i < normalized.dim(0); ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double mu = mean[static_cast<std::size_t>(ch)], sd = stddev[static_cast<std::size_t>(ch)];
      for (std::int64_t p = 0; p < hw; ++p) {
        auto& v = out[i * c * hw + ch * hw + p];
        v = v * sd + mu;
      }
    }
  return out;
}

json Normalization::to_json() const { return {{"mean", mean}, {"std", stddev}}; }

Normalization Normalization::from_json(const json& j) {
  try {
    Normalization n;
    n.mean = j.at("mean").get<std::vector<double>>();
    n.stddev = j.at("std").get<std::vector<double>>();
    if (n.mean.size() != n.stddev.size()) throw FormatError("normalization mean/std lengths differ");
    return n;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed normalization stats: ") + e.what());
  }
}

void LabeledDataset::validate() const {
  if (x.rank() != 2 || x.dim(0) != size()) {
    throw ContractError("labeled dataset: " + std::to_string(size()) + " labels for data " + shape_str(x.shape()));
  }
  if (classes < 1) throw ContractError("labeled dataset: class count must be positive");
  if (size() < classes) throw ContractError("labeled dataset: fewer samples than classes");
  for (auto l : labels)
    if (l < 0 || l >= classes) throw ContractError("labeled dataset: label " + std::to_string(l) + " out of range");
}

// ---- synthetic suite ------------------------------------------------------------

void SyntheticSourceSpec::validate() const {
  if (image_size < 8 || (image_size & (image_size - 1)) != 0) {
    throw ConfigError("image_size must be a power of two >= 8, got " + std::to_string(image_size));
  }
  if (channels != 1 && channels != 3) throw ConfigError("channels must be 1 or 3");
  if (source_count < 1 || train_per_class < 1 || test_per_class < 1 || latent_factors < 1) {
    throw ConfigError("sample and factor counts must be positive");
  }
  if (classes_a < 2 || classes_a > 6) throw ConfigError("classes_a must be in [2, 6]");
  if (classes_b != 4 && classes_b != 2) throw ConfigError("classes_b must be 2 or 4");
}

json SyntheticSourceSpec::to_json() const {
  return {{"source_count", source_count},     {"image_size", image_size},     {"channels", channels},
          {"latent_factors", latent_factors}, {"classes_a", classes_a},       {"classes_b", classes_b},
          {"train_per_class", train_per_class}, {"test_per_class", test_per_class}, {"seed", seed}};
}

SyntheticSourceSpec SyntheticSourceSpec::from_json(const json& j) {
  SyntheticSourceSpec s;
  try {
    s.source_count = j.value("source_count", s.source_count);
    s.image_size = j.value("image_size", s.image_size);
    s.channels = j.value("channels", s.channels);
    s.latent_factors = j.value("latent_factors", s.latent_factors);
    s.classes_a = j.value("classes_a", s.classes_a);
    s.classes_b = j.value("classes_b", s.classes_b);
    s.train_per_class = j.value("train_per_class", s.train_per_class);
    s.test_per_class = j.value("test_per_class", s.test_per_class);
    s.seed = j.value("seed", s.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed data spec: ") + e.what());
  }
  return s;
}

namespace {

constexpr int kShapeCount = 6;  // disk, square, triangle, cross, ring, diamond

struct Factors {
  int shape = 0;
  double hue = 0.0;
  double cx = 0.5, cy = 0.5;  // relative to image size
  double scale = 0.3;         // radius relative to image size
};

bool inside(int shape, double u, double v) {
  switch (shape) {
    case 0: return u * u + v * v <= 1.0;
    case 1: return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case 2: return v >= -0.9 && v <= 0.8 && std::abs(u) <= 0.9 * (v + 0.9) / 1.7;
    case 3: return (std::abs(u) <= 0.3 && std::abs(v) <= 0.95) || (std::abs(v) <= 0.3 && std::abs(u) <= 0.95);
    case 4: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.3;
    }
    case 5: return std::abs(u) + std::abs(v) <= 1.0;
  }
  return false;
}

void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int i = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  const double table[6][3] = {{v, t, p}, {q, v, p}, {p, v, t}, {p, q, v}, {t, p, v}, {v, p, q}};
  for (int k = 0; k < 3; ++k) rgb[k] = table[i][k];
}

// Renders one image into `out` (CHW, values in [0, 1]).
void render(const Factors& f, const ImageShape& shape, Rng& rng, double* out) {
  const auto s = shape.height;
  double fg[3], bg[3];
  hsv_to_rgb(f.hue, rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0), fg);
  hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.5), rng.uniform(0.1, 0.4), bg);
  const double tilt = rng.uniform(-0.1, 0.1);
  const double cx = f.cx * static_cast<double>(s), cy = f.cy * static_cast<double>(s);
  const double r = f.scale * static_cast<double>(s);
  const auto hw = shape.height * shape.width;
  for (std::int64_t y = 0; y < shape.height; ++y)
    for (std::int64_t x = 0; x < shape.width; ++x) {
      // 2x2 supersampling for soft edges.
      double cover = 0.0;
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx) {
          const double u = (static_cast<double>(x) + 0.25 + 0.5 * sx - cx) / r;
          const double v = (static_cast<double>(y) + 0.25 + 0.5 * sy - cy) / r;
          cover += inside(f.shape, u, v) ? 0.25 : 0.0;
        }
      const double grad = tilt * (static_cast<double>(y) / static_cast<double>(s) - 0.5);
      double rgb[3];
      for (int k = 0; k < 3; ++k) {
        const double back = bg[k] + grad;
        rgb[k] = std::clamp(cover * fg[k] + (1.0 - cover) * back + 0.03 * rng.normal(), 0.0, 1.0);
      }
      if (shape.channels == 3) {
        for (int k = 0; k < 3; ++k) out[k * hw + y * shape.width + x] = rgb[k];
      } else {
        out[y * shape.width + x] = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
      }
    }
}

Factors random_factors(Rng& rng) {
  Factors f;
  f.shape = static_cast<int>(rng.below(kShapeCount));
  f.hue = rng.uniform();
  f.cx = rng.uniform(0.3, 0.7);
  f.cy = rng.uniform(0.3, 0.7);
  f.scale = rng.uniform(0.22, 0.40);
  return f;
}

// Task B: size (small/large) x vertical half (upper/lower); 2-class
// variant uses size only.
Factors task_b_factors(std::int64_t label, std::int64_t classes, Rng& rng) {
  Factors f = random_factors(rng);
  const bool large = (label % 2) == 1;
  f.scale = large ? rng.uniform(0.34, 0.40) : rng.uniform(0.22, 0.28);
  if (classes == 4) {
    const bool lower = label >= 2;
    f.cy = lower ? rng.uniform(0.55, 0.68) : rng.uniform(0.32, 0.45);
  }
  return f;
}

LabeledDataset make_task(bool task_a, std::int64_t classes, std::int64_t per_class, const ImageShape& shape,
                         Rng& rng) {
  LabeledDataset d;
  d.classes = classes;
  const auto k = classes * per_class;
  d.x = Tensor({k, shape.numel()});
  // Interleave classes, then shuffle, so labels stay exactly balanced.
  std::vector<std::int64_t> labels(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < k; ++i) labels[static_cast<std::size_t>(i)] = i % classes;
  const auto perm = rng.permutation(k);
  d.labels.resize(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < k; ++i) {
    const auto label = labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    d.labels[static_cast<std::size_t>(i)] = label;
    Factors f;
    if (task_a) {
      f = random_factors(rng);
      f.shape = static_cast<int>(label);
    } else {
      f = task_b_factors(label, classes, rng);
    }
    render(f, shape, rng, d.x.ptr() + i * shape.numel());
  }
  return d;
}

Tensor labels_tensor(const LabeledDataset& d) {
  Tensor t({d.size(), 1});
  for (std::int64_t i = 0; i < d.size(); ++i) t[i] = static_cast<double>(d.labels[static_cast<std::size_t>(i)]);
  return t;
}

}  // namespace

SyntheticSuite gen_data(const SyntheticSourceSpec& spec) {
  spec.validate();
  SyntheticSuite suite;
  suite.shape = spec.image_shape();
  Rng root(spec.seed);
  Rng src_rng = root.split(), a_rng = root.split(), b_rng = root.split();
  suite.source = Tensor({spec.source_count, suite.shape.numel()});
  for (std::int64_t i = 0; i < spec.source_count; ++i) {
    render(random_factors(src_rng), suite.shape, src_rng, suite.source.ptr() + i * suite.shape.numel());
  }
  suite.norm = Normalization::compute(suite.source, suite.shape);
  suite.task_a_train = make_task(true, spec.classes_a, spec.train_per_class, suite.shape, a_rng);
  suite.task_a_test = make_task(true, spec.classes_a, spec.test_per_class, suite.shape, a_rng);
  suite.task_b_train = make_task(false, spec.classes_b, spec.train_per_class, suite.shape, b_rng);
  suite.task_b_test = make_task(false, spec.classes_b, spec.test_per_class, suite.shape, b_rng);
  return suite;
}

void save_labeled(const LabeledDataset& data, const fs::path& dir) {
  data.validate();
  save_bundle(data.x, dir / "x", "x");
  save_bundle(labels_tensor(data), dir / "labels", "labels", {{"classes", data.classes}});
}

LabeledDataset load_labeled(const fs::path& dir) {
  LabeledDataset d;
  d.x = load_bundle(dir / "x").tensor;
  const auto lb = load_bundle(dir / "labels");
  if (!lb.extra.contains("classes")) throw FormatError((dir / "labels").string() + ": manifest field 'classes' is missing");
  d.classes = lb.extra.at("classes").get<std::int64_t>();
  for (double v : lb.tensor.data()) d.labels.push_back(static_cast<std::int64_t>(v));
  try {
    d.validate();
  } catch (const ContractError& e) {
    throw FormatError(dir.string() + ": " + e.what());
  }
  return d;
}

void save_suite(const SyntheticSuite& suite, const fs::path& dir) {
  save_bundle(suite.source, dir / "source", "source",
              {{"image_shape", {suite.shape.channels, suite.shape.height, suite.shape.width}},
               {"normalization", suite.norm.to_json()}});
  save_labeled(suite.task_a_train, dir / "task_a" / "train");
  save_labeled(suite.task_a_test, dir / "task_a" / "test");
  save_labeled(suite.task_b_train, dir / "task_b" / "train");
  save_labeled(suite.task_b_test, dir / "task_b" / "test");
}

SourceSet load_source(const fs::path& dir) {
  auto b = load_bundle(dir);
  SourceSet s;
  s.raw = std::move(b.tensor);
  if (!b.extra.contains("image_shape")) throw FormatError(dir.string() + ": manifest field 'image_shape' is missing");
  if (!b.extra.contains("normalization")) {
    throw FormatError(dir.string() + ": manifest field 'normalization' is missing");
  }
  const auto is = b.extra.at("image_shape").get<std::vector<std::int64_t>>();
  if (is.size() != 3) throw FormatError(dir.string() + ": manifest field 'image_shape' must have 3 entries");
  s.shape = {is[0], is[1], is[2]};
  s.norm = Normalization::from_json(b.extra.at("normalization"));
  if (s.raw.rank() != 2 || s.raw.dim(1) != s.shape.numel()) {
    throw FormatError(dir.string() + ": data shape " + shape_str(s.raw.shape()) + " disagrees with image_shape");
  }
  return s;
}

SyntheticSuite load_suite(const fs::path& dir) {
  SyntheticSuite suite;
  auto src = load_source(dir / "source");
  suite.source = std::move(src.raw);
  suite.shape = src.shape;
  suite.norm = src.norm;
  suite.task_a_train = load_labeled(dir / "task_a" / "train");
  suite.task_a_test = load_labeled(dir / "task_a" / "test");
  suite.task_b_train = load_labeled(dir / "task_b" / "train");
  suite.task_b_test = load_labeled(dir / "task_b" / "test");
  return suite;
}

// ---- image export -----------------------------------------------------------------

std::int64_t export_images(const Tensor& x_s, const ImageShape& shape, const Normalization& norm,
                           const fs::path& dir) {
  if (shape.channels != 1 && shape.channels != 3) {
    throw FormatError("export_images: channel count must be 1 or 3, got " + std::to_string(shape.channels));
  }
  if (x_s.rank() != 2 || x_s.dim(1) != shape.numel()) {
    throw FormatError("export_images: rows of " + shape_str(x_s.shape()) + " do not reshape to (" +
                      std::to_string(shape.channels) + ", " + std::to_string(shape.height) + ", " +
                      std::to_string(shape.width) + ")");
  }
  fs::create_directories(dir);
  const Tensor pixels = norm.invert(x_s, shape);
  const auto hw = shape.height * shape.width;
  for (std::int64_t i = 0; i < x_s.dim(0); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%04lld.%s", static_cast<long long>(i), shape.channels == 3 ? "ppm" : "pgm");
    std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + (dir / name).string());
    out << (shape.channels == 3 ? "P6" : "P5") << '\n' << shape.width << ' ' << shape.height << "\n255\n";
    for (std::int64_t p = 0; p < hw; ++p)
      for (std::int64_t ch = 0; ch < shape.channels; ++ch) {
        const double v = std::clamp(pixels[i * shape.numel() + ch * hw + p], 0.0, 1.0);
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
  }
  return x_s.dim(0);
}

}  // namespace krrst
