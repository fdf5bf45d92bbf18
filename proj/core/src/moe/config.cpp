#include "preroute/moe/config.hpp"

#include "preroute/error.hpp"

namespace preroute::moe {

std::string to_string(Normalizer n) { return n == Normalizer::softmax ? "softmax" : "sigmoid"; }

Normalizer parse_normalizer(const std::string& text) {
  if (text == "softmax") return Normalizer::softmax;
  if (text == "sigmoid") return Normalizer::sigmoid;
  throw ConfigError("unknown router normalizer '" + text + "'");
}

void MoeConfig::validate() const {
  if (vocab_size == 0 || hidden == 0 || num_layers == 0 || seq_len == 0 || expert_hidden == 0) {
    throw ConfigError("MoeConfig dimensions must be positive");
  }
  if (num_experts == 0 || num_experts > 65536) throw ConfigError("num_experts must be in [1, 65536]");
  if (top_k == 0 || top_k > num_experts) {
    throw ConfigError("top_k=" + std::to_string(top_k) + " must satisfy 1 <= k <= E=" + std::to_string(num_experts));
  }
  if (num_heads == 0 || hidden % num_heads != 0) {
    throw ConfigError("hidden=" + std::to_string(hidden) + " not divisible by num_heads=" + std::to_string(num_heads));
  }
}

}  // namespace preroute::moe
