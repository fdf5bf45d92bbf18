#include "preroute/cache/route_cache.hpp"

#include <bit>
#include <cmath>
#include <limits>
#include <numeric>

#include "preroute/error.hpp"
#include "preroute/grouter/grouter.hpp"
#include "preroute/io/binary.hpp"

namespace preroute::cache {

std::uint16_t to_bf16(double value) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(value));
  if ((bits & 0x7F800000U) == 0x7F800000U && (bits & 0x007FFFFFU) != 0) {
    return static_cast<std::uint16_t>((bits >> 16) | 0x0040U);  // keep NaN quiet
  }
  const std::uint32_t bias = 0x7FFFU + ((bits >> 16) & 1U);
  return static_cast<std::uint16_t>((bits + bias) >> 16);
}

double from_bf16(std::uint16_t bits) {
  return static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16));
}

std::uint64_t CacheHeader::body_bytes() const {
  return token_count * k * (static_cast<std::uint64_t>(index_width) + 2);
}

RouteCache::RouteCache(std::uint32_t num_experts, std::uint8_t k, std::uint32_t sequence_length) {
  if (num_experts == 0 || num_experts > 65536) throw ConfigError("route cache supports 1..65536 experts, got " + std::to_string(num_experts));
  if (k == 0 || k > num_experts) throw ConfigError("route cache: invalid k " + std::to_string(k));
  header_.version = kCacheVersion;
  header_.num_experts = num_experts;
  header_.k = k;
  header_.index_width = num_experts > 256 ? 2 : 1;
  header_.sequence_length = sequence_length;
}

std::size_t RouteCache::num_sequences() const {
  return header_.sequence_length == 0 ? 0 : static_cast<std::size_t>(header_.token_count / header_.sequence_length);
}

void RouteCache::append(const moe::RoutingDecision& decision, std::span<const double> selected_logits) {
  if (decision.num_experts != header_.num_experts || decision.k != header_.k) {
    throw ConfigError("route cache: decision shape does not match cache header");
  }
  if (selected_logits.size() != decision.indices.size()) throw ShapeError("route cache: score count does not match decision");
  indices_.insert(indices_.end(), decision.indices.begin(), decision.indices.end());
  for (double s : selected_logits) scores_.push_back(to_bf16(s));
  header_.token_count += decision.tokens();
}

std::span<const std::uint32_t> RouteCache::indices(std::uint64_t offset) const {
  if (offset >= header_.token_count) {
    throw Error("route cache offset " + std::to_string(offset) + " >= token count " + std::to_string(header_.token_count));
  }
  return {indices_.data() + offset * header_.k, header_.k};
}

std::span<const std::uint16_t> RouteCache::scores(std::uint64_t offset) const {
  if (offset >= header_.token_count) {
    throw Error("route cache offset " + std::to_string(offset) + " >= token count " + std::to_string(header_.token_count));
  }
  return {scores_.data() + offset * header_.k, header_.k};
}

moe::RoutingDecision RouteCache::replay(std::span<const std::uint64_t> offsets, moe::Normalizer normalizer) const {
  const std::size_t k = header_.k;
  moe::RoutingDecision d;
  d.num_experts = header_.num_experts;
  d.k = k;
  d.indices.resize(offsets.size() * k);
  d.weights.resize(offsets.size() * k);
  std::vector<double> logits(k);
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    const auto idx = indices(offsets[i]);
    const auto sc = scores(offsets[i]);
    for (std::size_t j = 0; j < k; ++j) {
      d.indices[i * k + j] = idx[j];
      logits[j] = from_bf16(sc[j]);
    }
    moe::normalize_gates(logits, normalizer, std::span<double>(d.weights.data() + i * k, k));
  }
  return d;
}

moe::RoutingDecision RouteCache::replay_sequences(std::span<const std::size_t> sequence_ids, moe::Normalizer normalizer) const {
  const std::uint64_t len = header_.sequence_length;
  if (len == 0) throw Error("route cache has no sequence length");
  std::vector<std::uint64_t> offsets;
  offsets.reserve(sequence_ids.size() * len);
  for (auto s : sequence_ids) {
    if (s >= num_sequences()) throw Error("route cache sequence " + std::to_string(s) + " out of range");
    for (std::uint64_t t = 0; t < len; ++t) offsets.push_back(s * len + t);
  }
  return replay(offsets, normalizer);
}

std::vector<unsigned char> RouteCache::encode() const {
  io::ByteWriter w;
  w.put_bytes(std::string_view(kCacheMagic, 4));
  w.put<std::uint16_t>(header_.version);
  w.put<std::uint32_t>(header_.num_experts);
  w.put<std::uint8_t>(header_.k);
  w.put<std::uint8_t>(header_.index_width);
  w.put<std::uint64_t>(header_.token_count);
  w.put<std::uint32_t>(header_.sequence_length);
  w.bytes().reserve(CacheHeader::kBytes + header_.body_bytes());
  const std::size_t k = header_.k;
  for (std::uint64_t t = 0; t < header_.token_count; ++t) {
    for (std::size_t j = 0; j < k; ++j) {
      const auto e = indices_[t * k + j];
      if (header_.index_width == 1) {
        w.put<std::uint8_t>(static_cast<std::uint8_t>(e));
      } else {
        w.put<std::uint16_t>(static_cast<std::uint16_t>(e));
      }
    }
    for (std::size_t j = 0; j < k; ++j) w.put<std::uint16_t>(scores_[t * k + j]);
  }
  return std::move(w.bytes());
}

CacheHeader RouteCache::decode_header(std::span<const unsigned char> bytes) {
  io::ByteReader r(bytes.data(), bytes.size());
  if (bytes.size() < CacheHeader::kBytes) throw FormatError("route cache shorter than its 24-byte header");
  if (r.get_bytes(4) != std::string_view(kCacheMagic, 4)) throw FormatError("not a route cache (bad magic)");
  CacheHeader h;
  h.version = r.get<std::uint16_t>();
  h.num_experts = r.get<std::uint32_t>();
  h.k = r.get<std::uint8_t>();
  h.index_width = r.get<std::uint8_t>();
  h.token_count = r.get<std::uint64_t>();
  h.sequence_length = r.get<std::uint32_t>();
  if (h.version != kCacheVersion) throw FormatError("unsupported route cache version " + std::to_string(h.version));
  if (h.num_experts == 0 || h.num_experts > 65536) throw FormatError("route cache: expert count out of range");
  if (h.k == 0 || h.k > h.num_experts) throw FormatError("route cache: k out of range");
  if (h.index_width != 1 && h.index_width != 2) throw FormatError("route cache: index width must be 1 or 2");
  if (h.index_width == 1 && h.num_experts > 256) throw FormatError("route cache: 1-byte indices with more than 256 experts");
  if (h.sequence_length != 0 && h.token_count % h.sequence_length != 0) {
    throw FormatError("route cache: token count is not a multiple of the sequence length");
  }
  const std::uint64_t per_token = static_cast<std::uint64_t>(h.k) * (h.index_width + 2U);
  const std::uint64_t available = bytes.size() - CacheHeader::kBytes;
  if (h.token_count > available / per_token || h.token_count * per_token != available) {
    throw FormatError("route cache: body length does not match header (" + std::to_string(available) + " bytes for " +
                      std::to_string(h.token_count) + " tokens)");
  }
  return h;
}

RouteCache RouteCache::decode(std::span<const unsigned char> bytes) {
  RouteCache c;
  c.header_ = decode_header(bytes);
  const std::size_t k = c.header_.k;
  const std::size_t n = static_cast<std::size_t>(c.header_.token_count);
  io::ByteReader r(bytes.data() + CacheHeader::kBytes, bytes.size() - CacheHeader::kBytes);
  c.indices_.resize(n * k);
  c.scores_.resize(n * k);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t j = 0; j < k; ++j) {
      const std::uint32_t e = c.header_.index_width == 1 ? r.get<std::uint8_t>() : r.get<std::uint16_t>();
      if (e >= c.header_.num_experts) throw FormatError("route cache: expert index " + std::to_string(e) + " out of range");
      c.indices_[t * k + j] = e;
    }
    for (std::size_t j = 0; j < k; ++j) c.scores_[t * k + j] = r.get<std::uint16_t>();
  }
  return c;
}

void RouteCache::save(const std::filesystem::path& path) const { io::write_file(path, encode()); }

RouteCache RouteCache::load(const std::filesystem::path& path) { return decode(io::read_file(path)); }

RouteCache build_cache(const grouter::Grouter& g, const Corpus& corpus, std::size_t k) {
  if (!g.frozen()) throw ConfigError("build_cache: grouter must be frozen");
  const std::size_t e = g.config().num_experts;
  if (e > 65536) throw ConfigError("build_cache: " + std::to_string(e) + " experts exceed the 16-bit index range");
  if (k == 0 || k > e || k > 255) throw ConfigError("build_cache: invalid k " + std::to_string(k));
  corpus.validate();
  RouteCache cache(static_cast<std::uint32_t>(e), static_cast<std::uint8_t>(k), static_cast<std::uint32_t>(corpus.seq_len));
  constexpr std::size_t kBatch = 16;
  for (std::size_t begin = 0; begin < corpus.size(); begin += kBatch) {
    const std::size_t end = std::min(corpus.size(), begin + kBatch);
    const moe::Batch batch(corpus.sequences.begin() + static_cast<std::ptrdiff_t>(begin),
                           corpus.sequences.begin() + static_cast<std::ptrdiff_t>(end));
    const ad::Tensor s = g.scores(batch);
    const auto d = moe::route(s, k, moe::Normalizer::softmax);
    std::vector<double> selected(d.indices.size());
    const auto data = s.data();
    for (std::size_t t = 0; t < d.tokens(); ++t)
      for (std::size_t j = 0; j < k; ++j) selected[t * k + j] = data[t * e + d.indices[t * k + j]];
    cache.append(d, selected);
  }
  return cache;
}

moe::ExternalRouter make_cache_router(const RouteCache& cache, moe::Normalizer normalizer) {
  return [&cache, normalizer](const std::vector<std::size_t>& ids, const moe::Batch& batch) {
    if (!batch.empty() && batch.front().size() != cache.header().sequence_length) {
      throw ConfigError("cache router: batch sequence length does not match the cache");
    }
    return cache.replay_sequences(ids, normalizer);
  };
}

}  // namespace preroute::cache
