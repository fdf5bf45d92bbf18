#include "preroute/io/checkpoint.hpp"

#include "preroute/io/binary.hpp"

namespace preroute::io {

std::vector<unsigned char> encode_checkpoint(const std::string& magic, const CheckpointData& data) {
  ByteWriter w;
  w.put_bytes(magic);
  w.put<std::uint16_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(data.fields.size()));
  for (const auto& [key, value] : data.fields) {
    w.put_string(key);
    w.put<std::int64_t>(value);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(data.params.entries().size()));
  for (const auto& [name, t] : data.params.entries()) {
    w.put_string(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.put<std::uint64_t>(d);
    for (double v : t.data()) w.put<double>(v);
  }
  return std::move(w.bytes());
}

CheckpointData decode_checkpoint(const std::string& magic, const std::vector<unsigned char>& bytes) {
  ByteReader r(bytes);
  if (r.remaining() < magic.size() || r.get_bytes(magic.size()) != magic) {
    throw FormatError("checkpoint magic mismatch, expected '" + magic + "'");
  }
  if (const auto v = r.get<std::uint16_t>(); v != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(v));
  }
  CheckpointData out;
  const auto n_fields = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_fields; ++i) {
    auto key = r.get_string(4096);
    out.fields[key] = r.get<std::int64_t>();
  }
  const auto n_params = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_params; ++i) {
    auto name = r.get_string(4096);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw FormatError("parameter '" + name + "' has implausible rank " + std::to_string(rank));
    ad::Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& d : shape) {
      d = r.get<std::uint64_t>();
      if (d != 0 && count > r.remaining() / 8 / d) throw FormatError("parameter '" + name + "' larger than file");
      count *= d;
    }
    if (count > r.remaining() / 8) throw FormatError("parameter '" + name + "' larger than file");
    std::vector<double> values(count);
    for (auto& v : values) v = r.get<double>();
    out.params.add(std::move(name), ad::Tensor(std::move(shape), std::move(values)));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint body");
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const std::string& magic, const CheckpointData& data) {
  write_file(path, encode_checkpoint(magic, data));
}

CheckpointData load_checkpoint(const std::filesystem::path& path, const std::string& magic) {
  return decode_checkpoint(magic, read_file(path));
}

}  // namespace preroute::io
