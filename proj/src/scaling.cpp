#include "chanopt/scaling.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "chanopt/errors.hpp"

namespace chanopt {

int static_scale(int base_size, double max_output_rank,
                 double scale_fraction) {
  if (base_size < 1) {
    throw std::invalid_argument("static_scale: base_size must be >= 1");
  }
  if (!(max_output_rank >= 0.0) || !(max_output_rank <= 1.0)) {
    throw std::invalid_argument("static_scale: max_output_rank outside [0,1]");
  }
  if (!(scale_fraction >= 0.0) || !(scale_fraction <= 1.0)) {
    throw std::invalid_argument("static_scale: scale_fraction outside [0,1]");
  }
  const double kept =
      max_output_rank + (1.0 - scale_fraction) * (1.0 - max_output_rank);
  const long long n = std::llround(base_size * kept);
  return static_cast<int>(std::max<long long>(n, 1));
}

ConcreteSizes static_scale_network(
    const NetGraph& g, const ChannelAssignment& a,
    const ConcreteSizes& baseline_sizes,
    const std::map<std::string, double>& max_output_ranks,
    double scale_fraction) {
  const auto groups = layer_groups(g, a);
  ConcreteSizes out;
  for (const auto& v : a.variables) {
    auto bit = baseline_sizes.find(v);
    if (bit == baseline_sizes.end()) {
      throw IncompatibilityError(
          "static_scale_network: no baseline size for variable '" + v + "'");
    }
    auto git = groups.find(v);
    if (git == groups.end() || git->second.empty()) {
      out[v] = bit->second;  // nothing measurable feeds this variable
      continue;
    }
    double o = 0.0;
    for (const auto& eid : git->second) {
      auto rit = max_output_ranks.find(eid);
      if (rit == max_output_ranks.end()) {
        throw IncompatibilityError(
            "static_scale_network: no max output rank for layer '" + eid +
            "'");
      }
      if (!(rit->second >= 0.0) || !(rit->second <= 1.0)) {
        throw std::invalid_argument(
            "static_scale_network: rank for layer '" + eid +
            "' outside [0,1]");
      }
      o += rit->second;
    }
    o /= git->second.size();
    out[v] = static_scale(bit->second, o, scale_fraction);
  }
  return out;
}

ConcreteSizes compound_scale(const ConcreteSizes& sizes, double multiplier) {
  if (!(multiplier > 0.0)) {
    throw std::invalid_argument("compound_scale: multiplier must be > 0");
  }
  ConcreteSizes out;
  for (const auto& [v, size] : sizes) {
    const long long n = std::llround(size * multiplier);
    out[v] = static_cast<int>(std::max<long long>(n, 1));
  }
  return out;
}

}  // namespace chanopt
