#ifndef KRRST_BUNDLE_HPP_
#define KRRST_BUNDLE_HPP_

#include <filesystem>
#include <string>

#include "json.hpp"

#include "krrst/tensor.hpp"

namespace krrst {

// On-disk tensor bundle: a directory holding manifest.json
//   {"name", "shape", "dtype", "layout": "row-major",
//    "byte_order": "little-endian", "file"}
// plus the raw blob it names. Extra manifest keys (e.g. normalization
// statistics) ride along in `extra` and are merged into the manifest.
struct Bundle {
  std::string name;
  Tensor tensor;
  nlohmann::json extra = nlohmann::json::object();
};

void save_bundle(const Tensor& tensor, const std::filesystem::path& dir, const std::string& name,
                 const nlohmann::json& extra = nlohmann::json::object());
Bundle load_bundle(const std::filesystem::path& dir);

// Keys the loader interprets; everything else lands in Bundle::extra.
inline constexpr const char* kManifestFile = "manifest.json";

// Small helpers used by every writer in the project.
void write_json(const std::filesystem::path& path, const nlohmann::json& doc);
nlohmann::json read_json(const std::filesystem::path& path);  // throws FormatError

}  // namespace krrst

#endif  // KRRST_BUNDLE_HPP_
