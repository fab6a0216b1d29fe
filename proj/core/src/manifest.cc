#include "robustlens/manifest.h"

#include <fstream>

#include "robustlens/errors.h"
#include "robustlens/hashing.h"

namespace rl {

void to_json(nlohmann::json& j, const RunManifest& manifest) {
  auto digests = [](const std::vector<FileDigest>& files) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& f : files) out.push_back({{"path", f.path}, {"sha256", f.sha256}});
    return out;
  };
  j = {
      {"command", manifest.command},
      {"config", manifest.config},
      {"seed", manifest.seed},
      {"inputs", digests(manifest.inputs)},
      {"outputs", digests(manifest.outputs)},
      {"wall_time_seconds", manifest.wall_time_seconds},
      {"notes", manifest.notes},
  };
}

RunDirectory::RunDirectory(std::filesystem::path root)
    : root_(std::move(root)), start_(std::chrono::steady_clock::now()) {
  std::error_code ec;
  std::filesystem::create_directories(root_, ec);
  if (ec || !std::filesystem::is_directory(root_)) {
    throw FormatError("cannot create run directory " + root_.string());
  }
}

std::filesystem::path RunDirectory::claim(const std::string& stem, const std::string& extension) {
  auto candidate = root_ / (stem + extension);
  for (int n = 1; std::filesystem::exists(candidate); ++n) {
    candidate = root_ / (stem + "-" + std::to_string(n) + extension);
  }
  // Touch the file so a second claim in the same run gets a new name.
  std::ofstream(candidate, std::ios::binary);
  return candidate;
}

void RunDirectory::record_output(const std::filesystem::path& path) {
  outputs_.push_back({std::filesystem::relative(path, root_).generic_string(), sha256_file(path)});
}

void RunDirectory::record_input(const std::filesystem::path& path) {
  inputs_.push_back({path.generic_string(), sha256_file(path)});
}

std::filesystem::path RunDirectory::write_manifest(RunManifest manifest) {
  manifest.inputs.insert(manifest.inputs.end(), inputs_.begin(), inputs_.end());
  manifest.outputs.insert(manifest.outputs.end(), outputs_.begin(), outputs_.end());
  manifest.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  const auto path = claim("manifest", ".json");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << nlohmann::json(manifest).dump(2) << '\n';
  return path;
}

}  // namespace rl
