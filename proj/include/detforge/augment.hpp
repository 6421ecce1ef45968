#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "detforge/errors.hpp"
#include "detforge/geometry.hpp"
#include "detforge/random.hpp"

namespace detforge {

struct ImageGeom {
  int width = 0;
  int height = 0;
  friend bool operator==(const ImageGeom&, const ImageGeom&) = default;
};

enum class TransformKind { kFlip, kResize, kCropResize, kFixedResize };

/// Everything needed to re-apply one sampled transform without an RNG.
struct TransformRecord {
  TransformKind kind = TransformKind::kFlip;
  bool flipped = false;
  int target_short_edge = 0;
  double scale_x = 1.0;
  double scale_y = 1.0;
  int crop_x = 0;
  int crop_y = 0;
  int crop_size = 0;
  int out_width = 0;
  int out_height = 0;
  double min_visibility = 0.0;
  std::uint64_t rng_draws = 0;  // engine outputs consumed while sampling

  friend bool operator==(const TransformRecord&, const TransformRecord&) = default;
};

/// Boxes after a transform; `kept[i]` is the input position of boxes[i].
struct AugResult {
  std::vector<BBox> boxes;
  ImageGeom geom;
  std::vector<std::size_t> kept;
  std::vector<TransformRecord> records;
};

inline std::vector<BBox> hflip(std::span<const BBox> boxes, const ImageGeom& geom) {
  const double w = geom.width;
  std::vector<BBox> out;
  out.reserve(boxes.size());
  for (const auto& b : boxes) out.push_back({w - b.x_max, b.y_min, w - b.x_min, b.y_max});
  return out;
}

namespace detail {

inline void check_geom(const ImageGeom& g) {
  if (g.width <= 0 || g.height <= 0) throw ValidationError("image size must be positive");
}

inline BBox clamp_to(const BBox& b, const ImageGeom& g) {
  const double w = g.width;
  const double h = g.height;
  return {std::clamp(b.x_min, 0.0, w), std::clamp(b.y_min, 0.0, h), std::clamp(b.x_max, 0.0, w),
          std::clamp(b.y_max, 0.0, h)};
}

template <Full64BitGenerator G>
struct CountingGenerator {
  using result_type = std::uint64_t;
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<std::uint64_t>::max(); }
  result_type operator()() {
    ++count;
    return inner();
  }
  G& inner;
  std::uint64_t count = 0;
};

}  // namespace detail

/// Uniform rescale so the shorter side becomes `target_short_edge`. The new
/// size is rounded to whole pixels and boxes are clamped into it, which can
/// only touch boxes within half a pixel of the far border.
inline std::pair<std::vector<BBox>, ImageGeom> short_edge_resize(std::span<const BBox> boxes, const ImageGeom& geom,
                                                                 int target_short_edge) {
  detail::check_geom(geom);
  if (target_short_edge <= 0) throw ValidationError("target short edge must be positive");
  const double s = double(target_short_edge) / double(std::min(geom.width, geom.height));
  const ImageGeom out_geom{int(std::lround(geom.width * s)), int(std::lround(geom.height * s))};
  std::vector<BBox> out;
  out.reserve(boxes.size());
  for (const auto& b : boxes) out.push_back(detail::clamp_to(scaled(b, s, s), out_geom));
  return {std::move(out), out_geom};
}

/// Resize to a fixed size, possibly changing aspect ratio (evaluation-side
/// 1600x1600 handling for the crop-and-resize regime).
inline std::pair<std::vector<BBox>, ImageGeom> fixed_resize(std::span<const BBox> boxes, const ImageGeom& geom,
                                                            int out_width, int out_height) {
  detail::check_geom(geom);
  if (out_width <= 0 || out_height <= 0) throw ValidationError("output size must be positive");
  const double sx = double(out_width) / geom.width;
  const double sy = double(out_height) / geom.height;
  const ImageGeom out_geom{out_width, out_height};
  std::vector<BBox> out;
  out.reserve(boxes.size());
  for (const auto& b : boxes) out.push_back(detail::clamp_to(scaled(b, sx, sy), out_geom));
  return {std::move(out), out_geom};
}

/// Deterministic half of random_crop_resize: crop the square at
/// (crop_x, crop_y), drop boxes below min_visibility or under 1 px per side
/// after scaling, then scale survivors to out_size.
inline AugResult crop_resize_at(std::span<const BBox> boxes, const ImageGeom& geom, int crop_x, int crop_y,
                                int crop_size, int out_size, double min_visibility) {
  detail::check_geom(geom);
  if (crop_size <= 0 || out_size <= 0) throw ValidationError("crop and output sizes must be positive");
  if (crop_size > std::min(geom.width, geom.height)) throw ValidationError("crop larger than image");
  if (crop_x < 0 || crop_y < 0 || crop_x + crop_size > geom.width || crop_y + crop_size > geom.height)
    throw ValidationError("crop window outside image");

  const double scale = double(out_size) / double(crop_size);
  const BBox window{double(crop_x), double(crop_y), double(crop_x + crop_size), double(crop_y + crop_size)};
  AugResult r;
  r.geom = {out_size, out_size};
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const double full = boxes[i].area();
    if (full <= 0.0) continue;
    const auto part = clip(boxes[i], window);
    if (!part || part->area() / full < min_visibility) continue;
    const BBox out = scaled(translated(*part, -crop_x, -crop_y), scale, scale);
    if (out.width() < 1.0 || out.height() < 1.0) continue;
    r.boxes.push_back(out);
    r.kept.push_back(i);
  }
  TransformRecord rec;
  rec.kind = TransformKind::kCropResize;
  rec.crop_x = crop_x;
  rec.crop_y = crop_y;
  rec.crop_size = crop_size;
  rec.out_width = out_size;
  rec.out_height = out_size;
  rec.scale_x = rec.scale_y = scale;
  rec.min_visibility = min_visibility;
  r.records.push_back(rec);
  return r;
}

template <Full64BitGenerator G>
AugResult random_crop_resize(std::span<const BBox> boxes, const ImageGeom& geom, int crop_size, int out_size, G& rng,
                             double min_visibility = 0.25) {
  detail::check_geom(geom);
  if (crop_size <= 0 || crop_size > std::min(geom.width, geom.height))
    throw ValidationError("crop larger than image");
  detail::CountingGenerator<G> counted{rng};
  const int x = int(uniform_index(counted, std::uint64_t(geom.width - crop_size) + 1));
  const int y = int(uniform_index(counted, std::uint64_t(geom.height - crop_size) + 1));
  AugResult r = crop_resize_at(boxes, geom, x, y, crop_size, out_size, min_visibility);
  r.records.back().rng_draws = counted.count;
  return r;
}

/// Re-applies one recorded transform.
inline AugResult apply_record(const TransformRecord& rec, std::span<const BBox> boxes, const ImageGeom& geom) {
  AugResult r;
  switch (rec.kind) {
    case TransformKind::kFlip:
      r.boxes = rec.flipped ? hflip(boxes, geom) : std::vector<BBox>(boxes.begin(), boxes.end());
      r.geom = geom;
      break;
    case TransformKind::kResize:
      std::tie(r.boxes, r.geom) = short_edge_resize(boxes, geom, rec.target_short_edge);
      break;
    case TransformKind::kFixedResize:
      std::tie(r.boxes, r.geom) = fixed_resize(boxes, geom, rec.out_width, rec.out_height);
      break;
    case TransformKind::kCropResize: {
      auto c = crop_resize_at(boxes, geom, rec.crop_x, rec.crop_y, rec.crop_size, rec.out_width, rec.min_visibility);
      c.records.clear();
      return c;
    }
  }
  r.kept.resize(r.boxes.size());
  for (std::size_t i = 0; i < r.kept.size(); ++i) r.kept[i] = i;
  return r;
}

namespace detail {

/// Chains a step onto an accumulated result, composing `kept` indices.
inline void chain(AugResult& acc, AugResult step, const TransformRecord& rec) {
  std::vector<std::size_t> kept;
  kept.reserve(step.kept.size());
  for (std::size_t k : step.kept) kept.push_back(acc.kept[k]);
  acc.boxes = std::move(step.boxes);
  acc.geom = step.geom;
  acc.kept = std::move(kept);
  acc.records.push_back(rec);
}

inline void drop_thin(AugResult& acc) {
  std::vector<BBox> boxes;
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < acc.boxes.size(); ++i) {
    if (acc.boxes[i].width() < 1.0 || acc.boxes[i].height() < 1.0) continue;
    boxes.push_back(acc.boxes[i]);
    kept.push_back(acc.kept[i]);
  }
  acc.boxes = std::move(boxes);
  acc.kept = std::move(kept);
}

inline AugResult start(std::span<const BBox> boxes, const ImageGeom& geom) {
  AugResult acc;
  acc.boxes.assign(boxes.begin(), boxes.end());
  acc.geom = geom;
  acc.kept.resize(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) acc.kept[i] = i;
  return acc;
}

}  // namespace detail

/// Replays a record sequence. Like the pipeline, the result never holds a
/// box with a side under 1 px.
inline AugResult replay(std::span<const TransformRecord> records, std::span<const BBox> boxes, const ImageGeom& geom) {
  AugResult acc = detail::start(boxes, geom);
  for (const auto& rec : records) detail::chain(acc, apply_record(rec, acc.boxes, acc.geom), rec);
  detail::drop_thin(acc);
  return acc;
}

inline constexpr std::array<int, 6> kAug1ShortEdges{640, 672, 704, 736, 768, 800};
inline constexpr std::array<int, 6> kAug2ShortEdges{800, 832, 864, 896, 928, 960};

struct PipelineOptions {
  double flip_probability = 0.5;
  int crop_size = 400;
  int crop_out_size = 800;
  double min_visibility = 0.25;
};

/// The three training augmentation recipes: a horizontal flip, then
///   1: short edge drawn from 640..800,
///   2: short edge drawn from 800..960,
///   3: a 400 px crop resized to 800.
/// One RNG stream per instance; do not share an instance across threads.
template <Full64BitGenerator G = Engine>
class Pipeline {
 public:
  Pipeline(int aug_id, G rng, PipelineOptions opt = {}) : aug_id_(aug_id), rng_(std::move(rng)), opt_(opt) {
    if (aug_id < 1 || aug_id > 3) throw ValidationError("unknown augmentation id " + std::to_string(aug_id));
  }

  int aug_id() const noexcept { return aug_id_; }

  AugResult operator()(std::span<const BBox> boxes, const ImageGeom& geom) {
    detail::check_geom(geom);
    AugResult acc = detail::start(boxes, geom);

    detail::CountingGenerator<G> counted{rng_};
    TransformRecord flip;
    flip.kind = TransformKind::kFlip;
    flip.flipped = uniform01(counted) < opt_.flip_probability;
    flip.rng_draws = counted.count;
    detail::chain(acc, apply_record(flip, acc.boxes, acc.geom), flip);

    if (aug_id_ == 3) {
      AugResult step =
          random_crop_resize(acc.boxes, acc.geom, opt_.crop_size, opt_.crop_out_size, rng_, opt_.min_visibility);
      const TransformRecord rec = step.records.back();
      detail::chain(acc, std::move(step), rec);
    } else {
      const auto& edges = aug_id_ == 1 ? kAug1ShortEdges : kAug2ShortEdges;
      counted.count = 0;
      TransformRecord resize;
      resize.kind = TransformKind::kResize;
      resize.target_short_edge = edges[uniform_index(counted, edges.size())];
      resize.rng_draws = counted.count;
      resize.scale_x = resize.scale_y = double(resize.target_short_edge) / std::min(acc.geom.width, acc.geom.height);
      detail::chain(acc, apply_record(resize, acc.boxes, acc.geom), resize);
    }
    detail::drop_thin(acc);
    return acc;
  }

 private:
  int aug_id_;
  G rng_;
  PipelineOptions opt_;
};

inline Pipeline<Engine> make_pipeline(int aug_id, std::uint64_t seed, PipelineOptions opt = {}) {
  return Pipeline<Engine>(aug_id, make_engine(seed), opt);
}

/// Whole-image resize used at inference time for the crop regime.
inline TransformRecord eval_resize_record(int size = 1600) {
  TransformRecord rec;
  rec.kind = TransformKind::kFixedResize;
  rec.out_width = rec.out_height = size;
  return rec;
}

// ---------------------------------------------------------------------------
// JSON lines

inline const char* to_string(TransformKind k) {
  switch (k) {
    case TransformKind::kFlip: return "flip";
    case TransformKind::kResize: return "resize";
    case TransformKind::kCropResize: return "crop_resize";
    case TransformKind::kFixedResize: return "fixed_resize";
  }
  return "?";
}

inline nlohmann::json to_json(const TransformRecord& r) {
  nlohmann::json j{{"kind", to_string(r.kind)}, {"rng_draws", r.rng_draws}};
  switch (r.kind) {
    case TransformKind::kFlip: j["flipped"] = r.flipped; break;
    case TransformKind::kResize:
      j["target_short_edge"] = r.target_short_edge;
      j["scale"] = r.scale_x;
      break;
    case TransformKind::kFixedResize:
      j["out_width"] = r.out_width;
      j["out_height"] = r.out_height;
      break;
    case TransformKind::kCropResize:
      j["crop_x"] = r.crop_x;
      j["crop_y"] = r.crop_y;
      j["crop_size"] = r.crop_size;
      j["out_size"] = r.out_width;
      j["scale"] = r.scale_x;
      j["min_visibility"] = r.min_visibility;
      break;
  }
  return j;
}

inline TransformRecord record_from_json(const nlohmann::json& j) {
  try {
    TransformRecord r;
    const auto kind = j.at("kind").get<std::string>();
    r.rng_draws = j.value("rng_draws", std::uint64_t{0});
    if (kind == "flip") {
      r.kind = TransformKind::kFlip;
      r.flipped = j.at("flipped").get<bool>();
    } else if (kind == "resize") {
      r.kind = TransformKind::kResize;
      r.target_short_edge = j.at("target_short_edge").get<int>();
      r.scale_x = r.scale_y = j.value("scale", 1.0);
    } else if (kind == "fixed_resize") {
      r.kind = TransformKind::kFixedResize;
      r.out_width = j.at("out_width").get<int>();
      r.out_height = j.at("out_height").get<int>();
    } else if (kind == "crop_resize") {
      r.kind = TransformKind::kCropResize;
      r.crop_x = j.at("crop_x").get<int>();
      r.crop_y = j.at("crop_y").get<int>();
      r.crop_size = j.at("crop_size").get<int>();
      r.out_width = r.out_height = j.at("out_size").get<int>();
      r.scale_x = r.scale_y = j.value("scale", 1.0);
      r.min_visibility = j.at("min_visibility").get<double>();
    } else {
      throw ValidationError("unknown transform kind '" + kind + "'");
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed transform record: ") + e.what());
  }
}

}  // namespace detforge
