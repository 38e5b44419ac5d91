// One gtest case per randomized property.
#include <gtest/gtest.h>

#include <cstdio>
#include <ostream>

#include "properties.hpp"

namespace props {
// Keeps discovered test names readable instead of dumping the parameter bytes.
void PrintTo(const Property& p, std::ostream* os) { *os << p.module << "." << p.name; }
}  // namespace props

namespace {

class PropertySuite : public ::testing::TestWithParam<props::Property> {};

TEST_P(PropertySuite, Holds) {
  const props::Property& p = GetParam();
  const props::RunSummary s = props::run_property(p);
  std::printf("  %s.%s: %d passed, %d discarded, %.2fs\n", p.module.c_str(), p.name.c_str(),
              s.passed, s.discarded, s.seconds);
  RecordProperty("passed", s.passed);
  RecordProperty("discarded", s.discarded);
  EXPECT_FALSE(s.failed) << p.module << "." << p.name << " case seed " << s.failing_case << ": "
                         << s.message;
  EXPECT_FALSE(s.exhausted) << "only " << s.passed << " valid cases in " << s.attempts
                            << " attempts";
  EXPECT_GE(s.passed, p.cases);
}

INSTANTIATE_TEST_SUITE_P(All, PropertySuite, ::testing::ValuesIn(props::all_properties()),
                         [](const ::testing::TestParamInfo<props::Property>& info) {
                           return info.param.module + "_" + info.param.name;
                         });

}  // namespace
