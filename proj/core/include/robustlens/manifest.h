#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace rl {

struct FileDigest {
  std::string path;
  std::string sha256;
};

// Record of one CLI invocation that wrote artifacts.
struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::vector<FileDigest> inputs;
  std::vector<FileDigest> outputs;
  double wall_time_seconds = 0.0;
  nlohmann::json notes = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const RunManifest& manifest);

// Output directory that never overwrites: artifacts claim fresh names and
// the manifest is written once at the end.
class RunDirectory {
 public:
  explicit RunDirectory(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  // `stem` + `extension` if unused, otherwise `stem`-1, `stem`-2, ...
  std::filesystem::path claim(const std::string& stem, const std::string& extension);
  // Hashes the file and lists it in the manifest.
  void record_output(const std::filesystem::path& path);
  void record_input(const std::filesystem::path& path);
  // Finalises timing and writes manifest[-n].json; returns its path.
  std::filesystem::path write_manifest(RunManifest manifest);

 private:
  std::filesystem::path root_;
  std::vector<FileDigest> inputs_;
  std::vector<FileDigest> outputs_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace rl
