#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace preroute {

// Fixed-length tokenized sequences with a domain label per sequence.
struct Corpus {
  std::uint32_t vocab_size = 0;
  std::uint32_t seq_len = 0;
  std::vector<std::vector<std::uint32_t>> sequences;
  std::vector<std::uint16_t> domains;

  std::size_t size() const { return sequences.size(); }
  std::size_t token_count() const { return sequences.size() * seq_len; }
  // All tokens in sequence order.
  std::vector<std::uint32_t> flat() const;
  // Sequences [begin, end) as a new corpus.
  Corpus slice(std::size_t begin, std::size_t end) const;
  // Throws ConfigError when a sequence has the wrong length or an id >= vocab.
  void validate() const;
};

// Binary corpus file: magic "PRCP", u16 version, u32 vocab, u32 seq_len,
// u64 sequence count, then per sequence a u16 domain id followed by seq_len
// u16 token ids. Little-endian.
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path);

}  // namespace preroute
