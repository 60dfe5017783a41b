#pragma once

#include <cmath>
#include <cstdio>
#include <string>

namespace chanopt {

// Canonical float rendering for all text artifacts: 9 significant digits,
// shortest form, infinities as literal "inf"/-"inf". Keeping one formatter
// makes reruns byte-comparable.
inline std::string format_g9(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace chanopt
