#include <gtest/gtest.h>

#include "quadnet/gradcheck_suite.hpp"

using namespace quadnet;

TEST(GradCheckSuite, EveryCasePasses) {
  const auto results = run_gradchecks();
  EXPECT_GE(results.size(), 25u);
  for (const auto& r : results) {
    EXPECT_TRUE(r.passed(kGradCheckTolerance)) << r.name << ": err " << r.error << " " << r.failure;
  }
}

TEST(GradCheckSuite, FilterSelectsByName) {
  const auto results = run_gradchecks("batchnorm");
  ASSERT_EQ(results.size(), 2u);
  EXPECT_EQ(results[0].name, "batchnorm_train");
}
