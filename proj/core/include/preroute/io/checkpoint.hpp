#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "preroute/autodiff/optim.hpp"

namespace preroute::io {

// Versioned binary parameter container shared by model and grouter
// checkpoints:
//   magic bytes, u16 version,
//   u32 n_fields, n x {u32 key length, key, i64 value}   (configuration)
//   u32 n_params, n x {u32 name length, name, u32 rank, rank x u64 dim,
//                      numel x f64 value}
// All integers and reals little-endian.
struct CheckpointData {
  std::map<std::string, std::int64_t> fields;
  ad::ParameterStore params;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

std::vector<unsigned char> encode_checkpoint(const std::string& magic, const CheckpointData& data);
// Throws FormatError on a wrong magic, version or malformed body.
CheckpointData decode_checkpoint(const std::string& magic, const std::vector<unsigned char>& bytes);

void save_checkpoint(const std::filesystem::path& path, const std::string& magic, const CheckpointData& data);
CheckpointData load_checkpoint(const std::filesystem::path& path, const std::string& magic);

}  // namespace preroute::io
