#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "detforge/annotations.hpp"
#include "detforge/errors.hpp"
#include "detforge/geometry.hpp"

namespace detforge {

struct Detection {
  std::int64_t image_id = 0;
  std::int64_t category_id = 0;
  BBox bbox;
  double score = 0.0;
  std::size_t source_index = 0;  // position in the results file; breaks score ties
};

/// COCO protocol knobs. Defaults: IoU 0.50:0.05:0.95, 101 recall points,
/// 100 detections per image and class, area split at 32^2 / 96^2.
struct EvalParams {
  std::vector<double> iou_thresholds{0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95};
  std::size_t recall_points = 101;
  std::size_t max_dets = 100;
  AreaThresholds areas;
};

struct ClassAP {
  std::int64_t category_id = 0;
  double ap = -1.0;
};

/// Every AP is in [0, 1], or -1 when the slice has no ground truth.
struct EvalResult {
  double ap = -1.0;
  double ap50 = -1.0;
  double ap75 = -1.0;
  double ap_small = -1.0;
  double ap_medium = -1.0;
  double ap_large = -1.0;
  std::vector<ClassAP> per_class;
  std::size_t num_gts = 0;
  std::size_t num_dets = 0;
};

enum class MatchFlag : std::uint8_t { kFalsePositive, kTruePositive, kIgnored };

/// Ground truth as seen by the matcher. `ignore` GTs only absorb detections
/// that found no regular match; `crowd` ones may absorb any number of them.
struct GtRef {
  BBox box;
  bool ignore = false;
  bool crowd = false;
};

/// Greedy matching of score-sorted detections. Each detection takes the
/// unmatched regular GT of highest IoU >= thr (lowest index on ties). A
/// detection left over is excluded when it finds an ignore GT the same way.
inline std::vector<MatchFlag> greedy_match(std::span<const BBox> dets, std::span<const GtRef> gts, double thr) {
  std::vector<MatchFlag> flags(dets.size(), MatchFlag::kFalsePositive);
  std::vector<char> taken(gts.size(), 0);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    std::size_t best = gts.size();
    double best_iou = thr;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].ignore || taken[g]) continue;
      const double v = iou(dets[d], gts[g].box);
      if (v >= best_iou && (best == gts.size() || v > best_iou)) {
        best = g;
        best_iou = v;
      }
    }
    if (best < gts.size()) {
      taken[best] = 1;
      flags[d] = MatchFlag::kTruePositive;
      continue;
    }
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (!gts[g].ignore || (taken[g] && !gts[g].crowd)) continue;
      const double v = iou(dets[d], gts[g].box);
      if (v >= best_iou && (best == gts.size() || v > best_iou)) {
        best = g;
        best_iou = v;
      }
    }
    if (best < gts.size()) {
      taken[best] = 1;
      flags[d] = MatchFlag::kIgnored;
    }
  }
  return flags;
}

/// Interpolated AP from flags given in descending score order (kIgnored
/// entries are skipped). Precision is made monotone from the right and
/// sampled at `recall_points` evenly spaced recalls in [0, 1].
inline double average_precision(std::span<const MatchFlag> flags, std::size_t n_gt, std::size_t recall_points = 101) {
  if (n_gt == 0) return -1.0;
  std::vector<double> recall, precision;
  double tp = 0.0, fp = 0.0;
  for (MatchFlag f : flags) {
    if (f == MatchFlag::kIgnored) continue;
    (f == MatchFlag::kTruePositive ? tp : fp) += 1.0;
    recall.push_back(tp / double(n_gt));
    precision.push_back(tp / (tp + fp));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);

  double sum = 0.0;
  for (std::size_t r = 0; r < recall_points; ++r) {
    const double target = recall_points == 1 ? 0.0 : double(r) / double(recall_points - 1);
    auto it = std::lower_bound(recall.begin(), recall.end(), target);
    if (it != recall.end()) sum += precision[std::size_t(it - recall.begin())];
  }
  return sum / double(recall_points);
}

/// Same, with flags in arbitrary order: sorts by score (descending, stable).
inline double average_precision(std::span<const MatchFlag> flags, std::span<const double> scores, std::size_t n_gt,
                                std::size_t recall_points = 101) {
  std::vector<std::size_t> order(flags.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<MatchFlag> sorted;
  sorted.reserve(order.size());
  for (std::size_t i : order) sorted.push_back(flags[i]);
  return average_precision(sorted, n_gt, recall_points);
}

namespace detail {

struct AreaRange {
  double lo;
  double hi;
  bool contains(double a) const noexcept { return a >= lo && a < hi; }
};

inline double mean_valid(std::span<const double> v) {
  double s = 0.0;
  std::size_t n = 0;
  for (double x : v)
    if (x > -1.0) {
      s += x;
      ++n;
    }
  return n == 0 ? -1.0 : s / double(n);
}

}  // namespace detail

/// COCO-style box AP. Ground truth outside an area slice is treated as
/// ignore; an unmatched detection outside the slice (by box area) is dropped.
/// Classes without ground truth in a slice are excluded from its mean.
inline EvalResult coco_map(std::span<const Detection> dets, const Dataset& ds, const EvalParams& params = {}) {
  if (params.iou_thresholds.empty()) throw ValidationError("at least one IoU threshold is required");
  for (const auto& d : dets) {
    if (!ds.find_image(d.image_id)) throw DanglingReference(d.image_id, "image of detection " + std::to_string(d.source_index));
    if (!ds.find_category(d.category_id))
      throw DanglingReference(d.category_id, "category of detection " + std::to_string(d.source_index));
  }

  const double inf = std::numeric_limits<double>::infinity();
  const std::array<detail::AreaRange, 4> ranges{{{0.0, inf},
                                                 {0.0, params.areas.small_max},
                                                 {params.areas.small_max, params.areas.medium_max},
                                                 {params.areas.medium_max, inf}}};
  const std::size_t n_thr = params.iou_thresholds.size();

  // (image, category) -> detection positions, best first, trimmed to max_dets
  std::map<std::pair<std::int64_t, std::int64_t>, std::vector<std::size_t>> by_cell;
  for (std::size_t i = 0; i < dets.size(); ++i) by_cell[{dets[i].image_id, dets[i].category_id}].push_back(i);
  EvalResult result;
  for (auto& [_, idx] : by_cell) {
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
      return dets[a].source_index < dets[b].source_index;
    });
    if (idx.size() > params.max_dets) idx.resize(params.max_dets);
    result.num_dets += idx.size();
  }
  for (const auto& inst : ds.instances()) result.num_gts += inst.ignore ? 0 : 1;

  struct Scored {
    double score;
    std::size_t source;
    std::vector<MatchFlag> flags;  // one per threshold
  };

  // ap[range][class][threshold]
  std::vector<std::vector<std::vector<double>>> table(ranges.size());
  std::vector<std::int64_t> class_ids;
  for (const auto& c : ds.categories()) class_ids.push_back(c.id);
  std::sort(class_ids.begin(), class_ids.end());

  for (std::size_t r = 0; r < ranges.size(); ++r) {
    const auto& range = ranges[r];
    for (std::int64_t cls : class_ids) {
      std::vector<Scored> scored;
      std::size_t n_gt = 0;
      for (const auto& im : ds.images()) {
        std::vector<GtRef> gts;
        for (std::size_t pos : ds.instances_in(im.id)) {
          const auto& inst = ds.instances()[pos];
          if (inst.category_id != cls) continue;
          const bool ignore = inst.ignore || !range.contains(inst.area);
          gts.push_back({inst.bbox, ignore, inst.ignore});
          n_gt += ignore ? 0 : 1;
        }
        // regular GTs first so they win before ignore GTs are considered
        std::stable_partition(gts.begin(), gts.end(), [](const GtRef& g) { return !g.ignore; });

        auto cell = by_cell.find({im.id, cls});
        if (cell == by_cell.end()) continue;
        std::vector<BBox> boxes;
        for (std::size_t i : cell->second) boxes.push_back(dets[i].bbox);
        const std::size_t first = scored.size();
        for (std::size_t i : cell->second) scored.push_back({dets[i].score, dets[i].source_index, {}});
        for (std::size_t t = 0; t < n_thr; ++t) {
          const auto flags = greedy_match(boxes, gts, params.iou_thresholds[t]);
          for (std::size_t k = 0; k < flags.size(); ++k) {
            MatchFlag f = flags[k];
            if (f == MatchFlag::kFalsePositive && !range.contains(boxes[k].area())) f = MatchFlag::kIgnored;
            scored[first + k].flags.push_back(f);
          }
        }
      }

      std::stable_sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.source < b.source;
      });
      std::vector<double> per_thr(n_thr);
      std::vector<MatchFlag> column(scored.size());
      for (std::size_t t = 0; t < n_thr; ++t) {
        for (std::size_t k = 0; k < scored.size(); ++k) column[k] = scored[k].flags[t];
        per_thr[t] = average_precision(column, n_gt, params.recall_points);
      }
      table[r].push_back(std::move(per_thr));
    }
  }

  auto slice_mean = [&](std::size_t r, std::optional<std::size_t> thr) {
    std::vector<double> cls_vals;
    for (const auto& per_thr : table[r]) {
      if (thr) {
        cls_vals.push_back(per_thr[*thr]);
      } else {
        cls_vals.push_back(detail::mean_valid(per_thr));
      }
    }
    return detail::mean_valid(cls_vals);
  };
  auto find_thr = [&](double v) -> std::optional<std::size_t> {
    for (std::size_t t = 0; t < n_thr; ++t)
      if (std::fabs(params.iou_thresholds[t] - v) < 1e-9) return t;
    return std::nullopt;
  };

  result.ap = slice_mean(0, std::nullopt);
  if (auto t = find_thr(0.5)) result.ap50 = slice_mean(0, t);
  if (auto t = find_thr(0.75)) result.ap75 = slice_mean(0, t);
  result.ap_small = slice_mean(1, std::nullopt);
  result.ap_medium = slice_mean(2, std::nullopt);
  result.ap_large = slice_mean(3, std::nullopt);
  for (std::size_t c = 0; c < class_ids.size(); ++c)
    result.per_class.push_back({class_ids[c], detail::mean_valid(table[0][c])});
  return result;
}

// ---------------------------------------------------------------------------
// JSON

/// Standard COCO results array: [{image_id, category_id, bbox:[x,y,w,h], score}].
inline std::vector<Detection> parse_detections(const nlohmann::json& doc) {
  if (!doc.is_array()) throw ValidationError("detections must be a JSON array");
  std::vector<Detection> out;
  out.reserve(doc.size());
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& d = doc[i];
    const std::string rec = "detection " + std::to_string(i);
    Detection det;
    det.source_index = i;
    det.image_id = detail::get_as<std::int64_t>(d, "image_id", rec);
    det.category_id = detail::get_as<std::int64_t>(d, "category_id", rec);
    det.score = detail::get_as<double>(d, "score", rec);
    if (!(det.score >= 0.0 && det.score <= 1.0)) throw ValidationError("score outside [0, 1] in " + rec);
    const auto xywh = detail::get_as<std::vector<double>>(d, "bbox", rec);
    if (xywh.size() != 4) throw ValidationError("bbox of " + rec + " must have 4 numbers");
    if (xywh[2] < 0.0 || xywh[3] < 0.0) throw ValidationError("negative box extent in " + rec);
    det.bbox = from_xywh(xywh[0], xywh[1], xywh[2], xywh[3]);
    out.push_back(det);
  }
  return out;
}

inline std::vector<Detection> load_detections(const std::filesystem::path& path) {
  return parse_detections(detail::parse_json_file(path));
}

inline nlohmann::json to_json(const EvalResult& r) {
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& c : r.per_class) per_class.push_back({{"category_id", c.category_id}, {"ap", c.ap}});
  return {{"ap", r.ap},
          {"ap50", r.ap50},
          {"ap75", r.ap75},
          {"ap_small", r.ap_small},
          {"ap_medium", r.ap_medium},
          {"ap_large", r.ap_large},
          {"per_class_ap", std::move(per_class)},
          {"num_gts", r.num_gts},
          {"num_dets", r.num_dets}};
}

}  // namespace detforge
