#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "preroute/corpus.hpp"
#include "preroute/moe/routing.hpp"
#include "preroute/moe/train.hpp"

namespace preroute::grouter {
class Grouter;
}

namespace preroute::cache {

// Upper 16 bits of the IEEE binary32 encoding, round-to-nearest-even.
std::uint16_t to_bf16(double value);
double from_bf16(std::uint16_t bits);

struct CacheHeader {
  std::uint16_t version = 1;
  std::uint32_t num_experts = 0;
  std::uint8_t k = 0;
  std::uint8_t index_width = 1;
  std::uint64_t token_count = 0;
  std::uint32_t sequence_length = 0;

  static constexpr std::size_t kBytes = 24;
  std::uint64_t body_bytes() const;
  bool operator==(const CacheHeader&) const = default;
};

inline constexpr char kCacheMagic[4] = {'G', 'R', 'T', 'C'};
inline constexpr std::uint16_t kCacheVersion = 1;

// Routing decisions of a whole corpus: k expert indices and k raw selected
// logits (bf16) per token, in corpus order.
class RouteCache {
 public:
  RouteCache() = default;
  RouteCache(std::uint32_t num_experts, std::uint8_t k, std::uint32_t sequence_length);

  const CacheHeader& header() const { return header_; }
  std::uint64_t token_count() const { return header_.token_count; }
  std::size_t num_sequences() const;

  // Appends the token decisions of `decision` with the given raw selected
  // logits (tokens x k, aligned with decision.indices).
  void append(const moe::RoutingDecision& decision, std::span<const double> selected_logits);

  std::span<const std::uint32_t> indices(std::uint64_t offset) const;
  std::span<const std::uint16_t> scores(std::uint64_t offset) const;

  // Decisions for arbitrary token offsets; weights are re-derived from the
  // stored scores with `normalizer`.
  moe::RoutingDecision replay(std::span<const std::uint64_t> offsets, moe::Normalizer normalizer) const;
  moe::RoutingDecision replay_sequences(std::span<const std::size_t> sequence_ids, moe::Normalizer normalizer) const;

  std::vector<unsigned char> encode() const;
  // Validates the header against the buffer length before touching the body.
  static RouteCache decode(std::span<const unsigned char> bytes);
  static CacheHeader decode_header(std::span<const unsigned char> bytes);

  void save(const std::filesystem::path& path) const;
  static RouteCache load(const std::filesystem::path& path);

  bool operator==(const RouteCache&) const = default;

 private:
  CacheHeader header_;
  std::vector<std::uint32_t> indices_;
  std::vector<std::uint16_t> scores_;
};

// Runs a frozen grouter over the corpus once, routing with top-k.
RouteCache build_cache(const grouter::Grouter& g, const Corpus& corpus, std::size_t k);

// train_lm external router replaying cached decisions by sequence id.
moe::ExternalRouter make_cache_router(const RouteCache& cache, moe::Normalizer normalizer);

}  // namespace preroute::cache
