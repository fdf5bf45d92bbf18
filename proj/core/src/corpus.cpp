#include "preroute/corpus.hpp"

#include "preroute/error.hpp"
#include "preroute/io/binary.hpp"

namespace preroute {
namespace {
constexpr char kMagic[] = "PRCP";
constexpr std::uint16_t kVersion = 1;
}  // namespace

std::vector<std::uint32_t> Corpus::flat() const {
  std::vector<std::uint32_t> out;
  out.reserve(token_count());
  for (const auto& s : sequences) out.insert(out.end(), s.begin(), s.end());
  return out;
}

Corpus Corpus::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > sequences.size()) throw ConfigError("corpus slice out of range");
  Corpus out;
  out.vocab_size = vocab_size;
  out.seq_len = seq_len;
  out.sequences.assign(sequences.begin() + static_cast<std::ptrdiff_t>(begin), sequences.begin() + static_cast<std::ptrdiff_t>(end));
  if (!domains.empty()) out.domains.assign(domains.begin() + static_cast<std::ptrdiff_t>(begin), domains.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

void Corpus::validate() const {
  if (!domains.empty() && domains.size() != sequences.size()) throw ConfigError("corpus domain labels do not match sequence count");
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    if (sequences[i].size() != seq_len) {
      throw ConfigError("corpus sequence " + std::to_string(i) + " has length " + std::to_string(sequences[i].size()) +
                        ", expected " + std::to_string(seq_len));
    }
    for (auto t : sequences[i]) {
      if (t >= vocab_size) throw ConfigError("corpus token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(vocab_size));
    }
  }
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  corpus.validate();
  if (corpus.vocab_size > 65536) throw ConfigError("corpus file stores 16-bit token ids; vocabulary too large");
  io::ByteWriter w;
  w.put_bytes({kMagic, 4});
  w.put<std::uint16_t>(kVersion);
  w.put<std::uint32_t>(corpus.vocab_size);
  w.put<std::uint32_t>(corpus.seq_len);
  w.put<std::uint64_t>(corpus.sequences.size());
  for (std::size_t i = 0; i < corpus.sequences.size(); ++i) {
    w.put<std::uint16_t>(corpus.domains.empty() ? 0 : corpus.domains[i]);
    for (auto t : corpus.sequences[i]) w.put<std::uint16_t>(static_cast<std::uint16_t>(t));
  }
  io::write_file(path, w.bytes());
}

Corpus load_corpus(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes);
  if (r.get_bytes(4) != std::string(kMagic, 4)) throw FormatError("'" + path.string() + "' is not a corpus file");
  if (const auto v = r.get<std::uint16_t>(); v != kVersion) throw FormatError("unsupported corpus version " + std::to_string(v));
  Corpus c;
  c.vocab_size = r.get<std::uint32_t>();
  c.seq_len = r.get<std::uint32_t>();
  const auto count = r.get<std::uint64_t>();
  const std::uint64_t per_seq = 2ULL * (1ULL + c.seq_len);
  if (count > r.remaining() / per_seq || count * per_seq != r.remaining()) throw FormatError("corpus body size does not match header");
  c.sequences.resize(count);
  c.domains.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    c.domains[i] = r.get<std::uint16_t>();
    c.sequences[i].resize(c.seq_len);
    for (auto& t : c.sequences[i]) t = r.get<std::uint16_t>();
  }
  c.validate();
  return c;
}

}  // namespace preroute
