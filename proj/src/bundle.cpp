#include "krrst/bundle.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include "krrst/errors.hpp"

namespace krrst {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void put_le(std::string& out, std::uint64_t bits, std::size_t bytes) {
  for (std::size_t i = 0; i < bytes; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

std::uint64_t get_le(const unsigned char* p, std::size_t bytes) {
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < bytes; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return bits;
}

template <typename T>
T field(const json& m, const char* key, const fs::path& where) {
  if (!m.contains(key)) throw FormatError(where.string() + ": manifest field '" + key + "' is missing");
  try {
    return m.at(key).get<T>();
  } catch (const json::exception&) {
    throw FormatError(where.string() + ": manifest field '" + key + "' has the wrong type");
  }
}

}  // namespace

void write_json(const fs::path& path, const json& doc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << doc.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": invalid JSON (" + e.what() + ")");
  }
}

void save_bundle(const Tensor& tensor, const fs::path& dir, const std::string& name, const json& extra) {
  fs::create_directories(dir);
  const std::string file = name + ".bin";
  const auto dt = tensor.dtype();
  std::string blob;
  blob.reserve(static_cast<std::size_t>(tensor.numel()) * dtype_size(dt));
  for (double v : tensor.data()) {
    if (dt == DType::f64) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      put_le(blob, bits, 8);
    } else {
      const float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_le(blob, bits, 4);
    }
  }
  {
    std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + (dir / file).string() + " for writing");
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  }
  json manifest = extra.is_object() ? extra : json::object();
  manifest["name"] = name;
  manifest["shape"] = tensor.shape();
  manifest["dtype"] = std::string(dtype_name(dt));
  manifest["layout"] = "row-major";
  manifest["byte_order"] = "little-endian";
  manifest["file"] = file;
  write_json(dir / kManifestFile, manifest);
}

Bundle load_bundle(const fs::path& dir) {
  const fs::path mpath = dir / kManifestFile;
  if (!fs::exists(mpath)) throw FormatError(dir.string() + ": missing " + kManifestFile);
  json m = read_json(mpath);
  Bundle b;
  b.name = field<std::string>(m, "name", mpath);
  const auto shape = field<Shape>(m, "shape", mpath);
  const DType dt = parse_dtype(field<std::string>(m, "dtype", mpath));
  if (field<std::string>(m, "layout", mpath) != "row-major") {
    throw FormatError(mpath.string() + ": manifest field 'layout' must be \"row-major\"");
  }
  if (field<std::string>(m, "byte_order", mpath) != "little-endian") {
    throw FormatError(mpath.string() + ": manifest field 'byte_order' must be \"little-endian\"");
  }
  const auto file = field<std::string>(m, "file", mpath);
  const fs::path blob_path = dir / file;
  std::ifstream in(blob_path, std::ios::binary);
  if (!in) throw FormatError(mpath.string() + ": blob named by field 'file' (" + file + ") is missing");
  const std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  for (auto e : shape)
    if (e < 0) throw FormatError(mpath.string() + ": manifest field 'shape' has a negative extent");
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  const std::size_t width = dtype_size(dt);
  if (blob.size() != n * width) {
    throw FormatError(blob_path.string() + ": length mismatch, expected " + std::to_string(n * width) +
                      " bytes for field 'shape' " + shape_str(shape) + ", found " + std::to_string(blob.size()));
  }
  std::vector<double> data(n);
  const auto* p = reinterpret_cast<const unsigned char*>(blob.data());
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t bits = get_le(p + i * width, width);
    if (dt == DType::f64) {
      std::memcpy(&data[i], &bits, 8);
    } else {
      const auto b32 = static_cast<std::uint32_t>(bits);
      float f;
      std::memcpy(&f, &b32, 4);
      data[i] = f;
    }
  }
  b.tensor = Tensor(shape, std::move(data), dt);
  for (const char* k : {"name", "shape", "dtype", "layout", "byte_order", "file"}) m.erase(k);
  b.extra = std::move(m);
  return b;
}

}  // namespace krrst
