#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace preroute::moe {

enum class Normalizer : std::uint8_t { softmax = 0, sigmoid = 1 };

std::string to_string(Normalizer n);
Normalizer parse_normalizer(const std::string& text);

struct MoeConfig {
  std::size_t vocab_size = 64;
  std::size_t hidden = 32;
  std::size_t num_layers = 2;
  std::size_t num_heads = 2;
  std::size_t num_experts = 8;
  std::size_t top_k = 2;
  std::size_t expert_hidden = 32;
  std::size_t seq_len = 32;
  Normalizer router_normalizer = Normalizer::softmax;

  // Throws ConfigError on 1 <= k <= E <= 65536 or d % heads violations.
  void validate() const;
  bool operator==(const MoeConfig&) const = default;
};

}  // namespace preroute::moe
