#include "mpo/metrics.hpp"

#include <string>

namespace mpo {

Metric parse_metric(std::string_view name) {
  for (Metric m : kAllMetrics) {
    if (metric_name(m) == name) return m;
  }
  throw std::invalid_argument("unknown metric '" + std::string(name) + "'");
}

}  // namespace mpo
