#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "detforge/geometry.hpp"
#include "detforge/random.hpp"

namespace detforge::testing {

inline std::string data_path(const std::string& name) { return std::string(DETFORGE_DATA_DIR) + "/" + name; }
inline std::string fixture_path(const std::string& name) { return std::string(DETFORGE_FIXTURE_DIR) + "/" + name; }

/// Integer-corner box inside [0, extent]^2, possibly degenerate.
template <class G>
BBox random_int_box(G& rng, int extent) {
  auto a = int(uniform_index(rng, std::uint64_t(extent) + 1));
  auto b = int(uniform_index(rng, std::uint64_t(extent) + 1));
  auto c = int(uniform_index(rng, std::uint64_t(extent) + 1));
  auto d = int(uniform_index(rng, std::uint64_t(extent) + 1));
  return {double(std::min(a, b)), double(std::min(c, d)), double(std::max(a, b)), double(std::max(c, d))};
}

template <class G>
BBox random_real_box(G& rng, double extent) {
  const double x0 = uniform01(rng) * extent, x1 = uniform01(rng) * extent;
  const double y0 = uniform01(rng) * extent, y1 = uniform01(rng) * extent;
  return {std::min(x0, x1), std::min(y0, y1), std::max(x0, x1), std::max(y0, y1)};
}

/// IoU by counting unit pixels covered by integer-corner boxes.
inline double rasterized_iou(const BBox& a, const BBox& b, int extent) {
  long inter = 0, uni = 0;
  for (int y = 0; y < extent; ++y) {
    for (int x = 0; x < extent; ++x) {
      const double cx = x + 0.5, cy = y + 0.5;
      const bool in_a = cx > a.x_min && cx < a.x_max && cy > a.y_min && cy < a.y_max;
      const bool in_b = cx > b.x_min && cx < b.x_max && cy > b.y_min && cy < b.y_max;
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  }
  return uni == 0 || inter == 0 ? 0.0 : double(inter) / double(uni);
}

}  // namespace detforge::testing
