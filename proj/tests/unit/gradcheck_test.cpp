#include <gtest/gtest.h>

#include "op_catalog.hpp"

namespace {

using namespace preroute;

class OpGradient : public ::testing::TestWithParam<oracle::OpSpec> {};

// 100 random instances per op, dims <= 8, against central differences.
TEST_P(OpGradient, MatchesFiniteDifferences) {
  const auto& spec = GetParam();
  std::mt19937_64 rng(std::hash<std::string>{}(spec.name));
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto c = spec.make(rng);
    worst = std::max(worst, oracle::gradcheck(c.loss, c.inputs, 1e-6).max_rel_error);
  }
  EXPECT_LT(worst, 1e-4) << spec.name;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::ValuesIn(oracle::op_catalog()),
                         [](const auto& info) { return info.param.name; });

}  // namespace
