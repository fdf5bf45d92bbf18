#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace preroute::pipeline {

// Lowercase hex SHA-256.
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

// One line of manifest.jsonl.
struct ManifestEntry {
  std::string stage;
  std::uint64_t seed = 0;
  std::string config_sha256;
  std::map<std::string, std::string> inputs;   // artifact name -> sha256
  std::map<std::string, std::string> outputs;
  double duration_seconds = 0.0;
  std::map<std::string, double> stats;

  std::string to_json() const;
  static ManifestEntry from_json(const std::string& line);
};

void append_manifest(const std::filesystem::path& path, const ManifestEntry& entry);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

}  // namespace preroute::pipeline
