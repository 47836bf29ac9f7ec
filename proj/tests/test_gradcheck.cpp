#include "doctest.h"
#include "gradcheck_suite.hpp"

TEST_CASE("analytic gradients match central differences") {
  for (const auto& result : pulsegate::testing::run_gradient_checks(20)) {
    INFO(result.layer);
    CHECK(result.worst_relative_error < 1e-4);
  }
}
