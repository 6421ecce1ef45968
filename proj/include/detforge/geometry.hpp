#pragma once

#include <algorithm>
#include <array>
#include <optional>

#include "detforge/errors.hpp"

namespace detforge {

/// Axis-aligned box in corner form. Coordinates are continuous pixels with
/// the origin at the top-left; width is x_max - x_min (no +1 convention).
struct BBox {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  constexpr double width() const noexcept { return x_max - x_min; }
  constexpr double height() const noexcept { return y_max - y_min; }
  constexpr double area() const noexcept { return width() * height(); }
  constexpr bool valid() const noexcept { return x_max >= x_min && y_max >= y_min; }

  friend constexpr bool operator==(const BBox&, const BBox&) = default;
};

/// Origin-anchored box; only the extents matter.
struct BoxWH {
  double w = 0.0;
  double h = 0.0;

  constexpr double area() const noexcept { return w * h; }
  friend constexpr bool operator==(const BoxWH&, const BoxWH&) = default;
};

constexpr double intersection_area(const BBox& a, const BBox& b) noexcept {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

/// Intersection over union. Zero-area boxes score 0 against everything,
/// themselves included.
constexpr double iou(const BBox& a, const BBox& b) noexcept {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0 || inter <= 0.0) return 0.0;
  return inter / uni;
}

/// IoU of two boxes sharing a corner at the origin.
constexpr double wh_iou(const BoxWH& a, const BoxWH& b) noexcept {
  const double inter = std::min(a.w, b.w) * std::min(a.h, b.h);
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0 || inter <= 0.0) return 0.0;
  return inter / uni;
}

/// Intersection of `b` with `bounds`; empty when the overlap has no area.
constexpr std::optional<BBox> clip(const BBox& b, const BBox& bounds) noexcept {
  BBox out{std::max(b.x_min, bounds.x_min), std::max(b.y_min, bounds.y_min),
           std::min(b.x_max, bounds.x_max), std::min(b.y_max, bounds.y_max)};
  if (out.x_max <= out.x_min || out.y_max <= out.y_min) return std::nullopt;
  return out;
}

inline BBox from_xywh(double x, double y, double w, double h) {
  if (w < 0.0 || h < 0.0) throw ValidationError("negative box extent");
  return BBox{x, y, x + w, y + h};
}

constexpr std::array<double, 4> to_xywh(const BBox& b) noexcept {
  return {b.x_min, b.y_min, b.width(), b.height()};
}

constexpr BBox translated(const BBox& b, double dx, double dy) noexcept {
  return BBox{b.x_min + dx, b.y_min + dy, b.x_max + dx, b.y_max + dy};
}

constexpr BBox scaled(const BBox& b, double sx, double sy) noexcept {
  return BBox{b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy};
}

}  // namespace detforge
