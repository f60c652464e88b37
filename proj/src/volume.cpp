#include "segkd/volume.hpp"

#include <algorithm>

namespace segkd {

int32_t LabelMap::max_label() const {
  int32_t mx = 0;
  for (int32_t v : labels) mx = std::max(mx, v);
  return mx;
}

}  // namespace segkd
