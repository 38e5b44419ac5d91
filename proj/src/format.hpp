#pragma once

#include <cstdio>
#include <cstdlib>
#include <string>

namespace perturbcert::detail {

// Shortest %g rendering that parses back to the same double.
inline std::string format_shortest(double v) {
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

}  // namespace perturbcert::detail
