#include <gtest/gtest.h>

#include "gtrxl/gradcheck_suite.hpp"

namespace gtrxl {
namespace {

TEST(GradCheckSuite, EveryCasePasses) {
  const auto cases = run_gradcheck_suite(0);
  ASSERT_GT(cases.size(), 35u);
  for (const auto& c : cases) EXPECT_TRUE(c.passed()) << c.name << " error " << c.error << " tol " << c.tolerance;
}

TEST(GradCheckSuite, CoversStackAndLosses) {
  const auto cases = run_gradcheck_suite(1);
  auto has = [&](const std::string& name) {
    return std::any_of(cases.begin(), cases.end(), [&](const GradCheckCase& c) { return c.name == name; });
  };
  EXPECT_TRUE(has("stack:gtrxl-gru-2x8"));
  EXPECT_TRUE(has("loss:copy"));
  EXPECT_TRUE(has("loss:actor-critic"));
  EXPECT_TRUE(has("gate:gru"));
  for (const auto& c : cases) EXPECT_TRUE(c.passed()) << c.name << " error " << c.error;
}

}  // namespace
}  // namespace gtrxl
