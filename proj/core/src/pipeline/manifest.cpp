#include "preroute/pipeline/manifest.hpp"

#include <openssl/evp.h>

#include <array>
#include <fstream>
#include <json.hpp>
#include <memory>
#include <sstream>

#include "preroute/error.hpp"

namespace preroute::pipeline {

namespace {

class Digest {
 public:
  Digest() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256: init failed");
  }
  void update(const void* data, std::size_t n) {
    if (EVP_DigestUpdate(ctx_.get(), data, n) != 1) throw Error("sha256: update failed");
  }
  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), md.data(), &len) != 1) throw Error("sha256: final failed");
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out += digits[md[i] >> 4];
      out += digits[md[i] & 15];
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

}  // namespace

std::string sha256_hex(const std::string& bytes) {
  Digest d;
  d.update(bytes.data(), bytes.size());
  return d.hex();
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  Digest d;
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    d.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return d.hex();
}

std::string ManifestEntry::to_json() const {
  nlohmann::ordered_json j;
  j["stage"] = stage;
  j["seed"] = seed;
  j["config_sha256"] = config_sha256;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["duration_seconds"] = duration_seconds;
  j["stats"] = stats;
  return j.dump();
}

ManifestEntry ManifestEntry::from_json(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    ManifestEntry e;
    e.stage = j.at("stage").get<std::string>();
    e.seed = j.at("seed").get<std::uint64_t>();
    e.config_sha256 = j.at("config_sha256").get<std::string>();
    e.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    e.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
    e.duration_seconds = j.at("duration_seconds").get<double>();
    for (const auto& [k, v] : j.at("stats").items()) e.stats[k] = v.is_null() ? std::nan("") : v.get<double>();
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("manifest line: ") + ex.what());
  }
}

void append_manifest(const std::filesystem::path& path, const ManifestEntry& entry) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error("cannot write " + path.string());
  out << entry.to_json() << '\n';
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::vector<ManifestEntry> out;
  std::ifstream in(path);
  if (!in) return out;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(ManifestEntry::from_json(line));
  return out;
}

}  // namespace preroute::pipeline
