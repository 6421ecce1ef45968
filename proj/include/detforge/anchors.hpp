#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "detforge/annotations.hpp"
#include "detforge/errors.hpp"
#include "detforge/geometry.hpp"
#include "detforge/random.hpp"

namespace detforge {

// ---------------------------------------------------------------------------
// Anchor generation

/// Anchor layout for a feature pyramid. `sizes` holds one size per level
/// when `sizes_per_level` is set, otherwise every size is used on every
/// level. Size means sqrt(area); ratios are h/w; angles must be multiples
/// of 90 degrees.
struct AnchorSpec {
  std::vector<double> sizes{16, 32, 64, 128, 256};
  bool sizes_per_level = true;
  std::vector<double> aspect_ratios{0.5, 1.0, 2.0};
  std::vector<double> angles{-90, 0, 90};
  std::vector<int> strides{4, 8, 16, 32, 64};
  double offset = 0.5;  // anchor centre within a cell, fraction of stride
};

struct Anchor {
  BBox box;
  int level = 0;
  int cell_x = 0;
  int cell_y = 0;
  double size = 0.0;
  double ratio = 0.0;
  double angle = 0.0;  // 0 or 90 after folding
};

struct AnchorSet {
  std::vector<std::vector<Anchor>> levels;

  std::size_t size() const noexcept {
    std::size_t n = 0;
    for (const auto& l : levels) n += l.size();
    return n;
  }
};

struct FmapDims {
  int w = 0;
  int h = 0;
};

inline void validate(const AnchorSpec& spec) {
  if (spec.strides.empty()) throw ValidationError("anchor spec needs at least one stride");
  for (int s : spec.strides)
    if (s <= 0) throw ValidationError("anchor strides must be positive");
  if (spec.sizes.empty()) throw ValidationError("anchor spec needs at least one size");
  for (double s : spec.sizes)
    if (!(s > 0.0)) throw ValidationError("anchor sizes must be positive");
  if (spec.sizes_per_level && spec.sizes.size() != spec.strides.size())
    throw ValidationError("per-level sizing needs one size per stride");
  if (spec.aspect_ratios.empty()) throw ValidationError("anchor spec needs at least one aspect ratio");
  for (double r : spec.aspect_ratios)
    if (!(r > 0.0)) throw ValidationError("aspect ratios must be positive");
  if (spec.angles.empty()) throw ValidationError("anchor spec needs at least one angle");
  for (double a : spec.angles)
    if (std::fmod(a, 90.0) != 0.0) throw ValidationError("anchor angles must be multiples of 90");
  if (!(spec.offset >= 0.0 && spec.offset < 1.0)) throw ValidationError("anchor offset must lie in [0, 1)");
}

/// Angles folded to {0, 90}: a quarter turn swaps w and h, a half turn is
/// the identity, so -90 and +90 give the same rectangle. First-seen order.
inline std::vector<double> effective_angles(std::span<const double> angles) {
  std::vector<double> out;
  for (double a : angles) {
    const double folded = std::fmod(std::fabs(a), 180.0) == 90.0 ? 90.0 : 0.0;
    if (std::find(out.begin(), out.end(), folded) == out.end()) out.push_back(folded);
  }
  return out;
}

/// Feature map extent of every level for an image, ceil(side / stride).
inline std::vector<FmapDims> fmap_dims_for(const AnchorSpec& spec, int width, int height) {
  std::vector<FmapDims> dims;
  for (int s : spec.strides) dims.push_back({(width + s - 1) / s, (height + s - 1) / s});
  return dims;
}

inline AnchorSet generate_anchors(const AnchorSpec& spec, std::span<const FmapDims> fmap_dims) {
  validate(spec);
  if (fmap_dims.size() != spec.strides.size())
    throw ValidationError("expected " + std::to_string(spec.strides.size()) + " feature maps, got " +
                          std::to_string(fmap_dims.size()));
  const auto angles = effective_angles(spec.angles);

  AnchorSet set;
  set.levels.resize(spec.strides.size());
  for (std::size_t l = 0; l < spec.strides.size(); ++l) {
    const double stride = spec.strides[l];
    std::vector<double> sizes =
        spec.sizes_per_level ? std::vector<double>{spec.sizes[l]} : spec.sizes;
    const auto [fw, fh] = fmap_dims[l];
    if (fw < 0 || fh < 0) throw ValidationError("negative feature map extent");
    auto& out = set.levels[l];
    out.reserve(std::size_t(fw) * fh * sizes.size() * spec.aspect_ratios.size() * angles.size());
    for (int j = 0; j < fh; ++j) {
      for (int i = 0; i < fw; ++i) {
        const double cx = (i + spec.offset) * stride;
        const double cy = (j + spec.offset) * stride;
        for (double s : sizes) {
          for (double r : spec.aspect_ratios) {
            const double root = std::sqrt(r);
            for (double angle : angles) {
              double w = s / root;
              double h = s * root;
              if (angle == 90.0) std::swap(w, h);
              out.push_back({BBox{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}, int(l), i, j, s, r, angle});
            }
          }
        }
      }
    }
  }
  return set;
}

// ---------------------------------------------------------------------------
// IoU-distance k-means over box dimensions

enum class ClusterInit { kKMeansPlusPlus, kRandom };

struct ClusterOptions {
  std::size_t k = 4;
  std::uint64_t seed = 0;
  int max_iters = 300;
  int restarts = 10;
  ClusterInit init = ClusterInit::kKMeansPlusPlus;
  unsigned threads = 1;
};

struct ClusterResult {
  std::size_t k = 0;
  std::vector<BoxWH> centroids;  // ascending area
  std::vector<std::size_t> assignments;
  double mean_iou = 0.0;
  int iterations = 0;
  std::uint64_t seed = 0;
  int restart = 0;  // which seeded initialisation won
};

namespace kmeans {

/// Index of the max-IoU centroid for every box; ties go to the lower index.
inline std::vector<std::size_t> assign(std::span<const BoxWH> boxes, std::span<const BoxWH> centroids) {
  std::vector<std::size_t> out(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    double best = -1.0;
    for (std::size_t c = 0; c < centroids.size(); ++c) {
      const double v = wh_iou(boxes[i], centroids[c]);
      if (v > best) {
        best = v;
        out[i] = c;
      }
    }
  }
  return out;
}

inline double mean_iou(std::span<const BoxWH> boxes, std::span<const BoxWH> centroids,
                       std::span<const std::size_t> assignments) {
  if (boxes.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < boxes.size(); ++i) sum += wh_iou(boxes[i], centroids[assignments[i]]);
  return sum / double(boxes.size());
}

/// Per-coordinate mean of members. An empty cluster takes the box farthest
/// (1 - IoU) from its own centroid, and that box moves to it.
inline std::vector<BoxWH> update(std::span<const BoxWH> boxes, std::vector<std::size_t>& assignments,
                                 std::span<const BoxWH> centroids) {
  const std::size_t k = centroids.size();
  std::vector<double> sw(k, 0.0), sh(k, 0.0);
  std::vector<std::size_t> n(k, 0);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    sw[assignments[i]] += boxes[i].w;
    sh[assignments[i]] += boxes[i].h;
    ++n[assignments[i]];
  }
  std::vector<BoxWH> next(k);
  for (std::size_t c = 0; c < k; ++c)
    if (n[c] > 0) next[c] = {sw[c] / double(n[c]), sh[c] / double(n[c])};

  for (std::size_t c = 0; c < k; ++c) {
    if (n[c] > 0) continue;
    std::size_t far = 0;
    double far_d = -1.0;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (n[assignments[i]] <= 1) continue;  // would empty another cluster
      const double d = 1.0 - wh_iou(boxes[i], centroids[assignments[i]]);
      if (d > far_d) {
        far_d = d;
        far = i;
      }
    }
    if (far_d < 0.0) continue;  // every cluster is a singleton; nothing to take
    --n[assignments[far]];
    assignments[far] = c;
    n[c] = 1;
    next[c] = boxes[far];
  }
  return next;
}

template <Full64BitGenerator G>
std::vector<BoxWH> initial_centroids(std::span<const BoxWH> boxes, std::size_t k, ClusterInit init, G& rng) {
  std::vector<BoxWH> centroids;
  centroids.reserve(k);
  if (init == ClusterInit::kRandom) {
    // k distinct indices by partial Fisher-Yates
    std::vector<std::size_t> idx(boxes.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
      std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
      centroids.push_back(boxes[idx[i]]);
    }
    return centroids;
  }

  centroids.push_back(boxes[uniform_index(rng, boxes.size())]);
  std::vector<double> nearest(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) nearest[i] = 1.0 - wh_iou(boxes[i], centroids[0]);
  while (centroids.size() < k) {
    double total = 0.0;
    for (double d : nearest) total += d * d;
    std::size_t pick = 0;
    if (total > 0.0) {
      const double target = uniform01(rng) * total;
      double acc = 0.0;
      pick = boxes.size() - 1;
      for (std::size_t i = 0; i < boxes.size(); ++i) {
        acc += nearest[i] * nearest[i];
        if (acc > target && nearest[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = uniform_index(rng, boxes.size());
    }
    centroids.push_back(boxes[pick]);
    for (std::size_t i = 0; i < boxes.size(); ++i)
      nearest[i] = std::min(nearest[i], 1.0 - wh_iou(boxes[i], centroids.back()));
  }
  return centroids;
}

struct Run {
  std::vector<BoxWH> centroids;
  std::vector<std::size_t> assignments;
  double mean_iou = 0.0;
  int iterations = 0;
};

inline Run run_once(std::span<const BoxWH> boxes, std::size_t k, int max_iters, ClusterInit init, Engine rng) {
  Run run;
  run.centroids = initial_centroids(boxes, k, init, rng);
  run.assignments = assign(boxes, run.centroids);
  for (int it = 1; it <= max_iters; ++it) {
    run.centroids = update(boxes, run.assignments, run.centroids);
    auto next = assign(boxes, run.centroids);
    run.iterations = it;
    const bool converged = next == run.assignments;
    run.assignments = std::move(next);
    if (converged) break;
  }
  run.mean_iou = mean_iou(boxes, run.centroids, run.assignments);
  return run;
}

}  // namespace kmeans

/// k-means on (w, h) with distance 1 - IoU. Runs `restarts` seeded
/// initialisations (possibly on several threads) and keeps the best mean IoU;
/// the lowest restart index wins ties, so the result never depends on the
/// thread count.
inline ClusterResult cluster_anchor_sizes(std::span<const BoxWH> boxes, const ClusterOptions& opt) {
  if (opt.k == 0) throw ValidationError("k must be at least 1");
  if (boxes.size() < opt.k) throw TooFewBoxes(boxes.size(), opt.k);
  if (opt.restarts < 1) throw ValidationError("restarts must be at least 1");
  if (opt.max_iters < 0) throw ValidationError("max_iters must be non-negative");
  for (const auto& b : boxes)
    if (!(b.w > 0.0 && b.h > 0.0)) throw ValidationError("cluster inputs need positive width and height");

  std::vector<kmeans::Run> runs(std::size_t(opt.restarts));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int r = next++; r < opt.restarts; r = next++)
      runs[std::size_t(r)] = kmeans::run_once(boxes, opt.k, opt.max_iters, opt.init, make_engine(opt.seed, std::uint64_t(r)));
  };
  const unsigned threads = std::clamp<unsigned>(opt.threads, 1, unsigned(opt.restarts));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }

  std::size_t best = 0;
  for (std::size_t r = 1; r < runs.size(); ++r)
    if (runs[r].mean_iou > runs[best].mean_iou) best = r;
  kmeans::Run& win = runs[best];

  std::vector<std::size_t> order(opt.k);
  for (std::size_t c = 0; c < opt.k; ++c) order[c] = c;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ca = win.centroids[a];
    const auto& cb = win.centroids[b];
    return ca.area() != cb.area() ? ca.area() < cb.area() : ca.w < cb.w;
  });
  std::vector<std::size_t> rank(opt.k);
  ClusterResult out;
  out.k = opt.k;
  for (std::size_t c = 0; c < opt.k; ++c) {
    rank[order[c]] = c;
    out.centroids.push_back(win.centroids[order[c]]);
  }
  out.assignments.reserve(boxes.size());
  for (std::size_t a : win.assignments) out.assignments.push_back(rank[a]);
  out.mean_iou = win.mean_iou;
  out.iterations = win.iterations;
  out.seed = opt.seed;
  out.restart = int(best);
  return out;
}

struct SweepPoint {
  std::size_t k = 0;
  double mean_iou = 0.0;
};

inline std::vector<SweepPoint> sweep_k(std::span<const BoxWH> boxes, std::size_t k_min, std::size_t k_max,
                                       ClusterOptions opt) {
  if (k_min == 0 || k_min > k_max) throw ValidationError("k range must satisfy 1 <= k_min <= k_max");
  std::vector<SweepPoint> out;
  for (std::size_t k = k_min; k <= k_max; ++k) {
    opt.k = k;
    out.push_back({k, cluster_anchor_sizes(boxes, opt).mean_iou});
  }
  return out;
}

/// Non-ignored instances with positive extent, as clustering input.
inline std::vector<BoxWH> cluster_inputs(const Dataset& ds) {
  std::vector<BoxWH> boxes;
  for (const auto& inst : ds.instances())
    if (!inst.ignore && inst.bbox.width() > 0.0 && inst.bbox.height() > 0.0)
      boxes.push_back({inst.bbox.width(), inst.bbox.height()});
  return boxes;
}

// ---------------------------------------------------------------------------
// Anchor / ground-truth matching

struct MatchParams {
  double pos_iou = 0.7;
  double neg_iou = 0.3;
  bool force_match = true;
};

struct ClassRecall {
  std::size_t recalled = 0;
  std::size_t total = 0;
};

struct MatchReport {
  std::size_t total_anchors = 0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::size_t ignored = 0;
  std::size_t gt_total = 0;  // non-ignore GTs
  std::size_t gt_recalled = 0;
  std::map<std::int64_t, ClassRecall> per_class;
  std::map<std::size_t, std::size_t> anchors_per_gt;  // positive anchors -> number of GTs
  std::vector<std::int64_t> unmatched_gt_ids;

  bool zero_denominator() const noexcept { return gt_total == 0; }
  /// 1.0 with the zero-denominator flag when there is nothing to recall.
  double recall() const noexcept { return gt_total == 0 ? 1.0 : double(gt_recalled) / double(gt_total); }

  void merge(const MatchReport& o) {
    total_anchors += o.total_anchors;
    positives += o.positives;
    negatives += o.negatives;
    ignored += o.ignored;
    gt_total += o.gt_total;
    gt_recalled += o.gt_recalled;
    for (const auto& [c, r] : o.per_class) {
      per_class[c].recalled += r.recalled;
      per_class[c].total += r.total;
    }
    for (const auto& [n, g] : o.anchors_per_gt) anchors_per_gt[n] += g;
    unmatched_gt_ids.insert(unmatched_gt_ids.end(), o.unmatched_gt_ids.begin(), o.unmatched_gt_ids.end());
  }
};

/// Labels every anchor positive (max IoU >= pos_iou), negative (< neg_iou)
/// or ignored, and reports which GTs own at least one positive anchor. A
/// positive anchor belongs to its max-IoU GT. With force_match each
/// non-ignore GT also claims its best anchor (lowest index on ties, IoU > 0),
/// taking it over from whichever GT owned it. Ignore GTs shape anchor labels
/// but are left out of recall.
inline MatchReport match_anchors(const AnchorSet& anchors, std::span<const Instance> gts, const MatchParams& p) {
  if (!(0.0 <= p.neg_iou && p.neg_iou <= p.pos_iou && p.pos_iou <= 1.0))
    throw ValidationError("thresholds must satisfy 0 <= neg_iou <= pos_iou <= 1");

  std::vector<const BBox*> boxes;
  boxes.reserve(anchors.size());
  for (const auto& level : anchors.levels)
    for (const auto& a : level) boxes.push_back(&a.box);

  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> owner(boxes.size(), kNone);
  std::vector<char> positive(boxes.size(), 0);
  std::vector<double> gt_best(gts.size(), 0.0);
  std::vector<std::size_t> gt_best_anchor(gts.size(), kNone);

  MatchReport rep;
  rep.total_anchors = boxes.size();
  for (std::size_t a = 0; a < boxes.size(); ++a) {
    double best = 0.0;
    std::size_t arg = kNone;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(*boxes[a], gts[g].bbox);
      if (arg == kNone || v > best) {
        best = v;
        arg = g;
      }
      if (v > gt_best[g]) {
        gt_best[g] = v;
        gt_best_anchor[g] = a;
      }
    }
    if (best >= p.pos_iou) {
      positive[a] = 1;
      owner[a] = arg;
    } else if (best >= p.neg_iou) {
      positive[a] = 2;  // ignored band
    }
  }
  if (p.force_match) {
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].ignore || gt_best_anchor[g] == kNone) continue;
      positive[gt_best_anchor[g]] = 1;
      owner[gt_best_anchor[g]] = g;
    }
  }

  std::vector<std::size_t> per_gt(gts.size(), 0);
  for (std::size_t a = 0; a < boxes.size(); ++a) {
    if (positive[a] == 1) {
      ++rep.positives;
      if (owner[a] != kNone) ++per_gt[owner[a]];
    } else if (positive[a] == 2) {
      ++rep.ignored;
    } else {
      ++rep.negatives;
    }
  }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (gts[g].ignore) continue;
    auto& cls = rep.per_class[gts[g].category_id];
    ++cls.total;
    ++rep.gt_total;
    ++rep.anchors_per_gt[per_gt[g]];
    if (per_gt[g] > 0) {
      ++cls.recalled;
      ++rep.gt_recalled;
    } else {
      rep.unmatched_gt_ids.push_back(gts[g].id);
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// JSON

inline Json to_json(const AnchorSpec& s) {
  return {{"sizes", s.sizes},   {"sizes_per_level", s.sizes_per_level}, {"aspect_ratios", s.aspect_ratios},
          {"angles", s.angles}, {"strides", s.strides},                 {"offset", s.offset}};
}

inline Json to_json(const ClusterResult& r) {
  Json centroids = Json::array();
  for (const auto& c : r.centroids) centroids.push_back({c.w, c.h});
  return {{"k", r.k},
          {"centroids", std::move(centroids)},
          {"assignments", r.assignments},
          {"mean_iou", r.mean_iou},
          {"iterations", r.iterations},
          {"seed", r.seed},
          {"restart", r.restart}};
}

inline Json to_json(const MatchReport& r) {
  Json classes = Json::array();
  for (const auto& [c, v] : r.per_class) {
    classes.push_back({{"category_id", c},
                       {"recalled", v.recalled},
                       {"total", v.total},
                       {"recall", v.total == 0 ? 1.0 : double(v.recalled) / double(v.total)}});
  }
  Json hist = Json::array();
  for (const auto& [n, g] : r.anchors_per_gt) hist.push_back({{"anchors", n}, {"gts", g}});
  return {{"total_anchors", r.total_anchors},
          {"positives", r.positives},
          {"negatives", r.negatives},
          {"ignored", r.ignored},
          {"gt_total", r.gt_total},
          {"gt_recalled", r.gt_recalled},
          {"recall", r.recall()},
          {"zero_denominator", r.zero_denominator()},
          {"per_class", std::move(classes)},
          {"matched_anchors_histogram", std::move(hist)},
          {"unmatched_gt_ids", r.unmatched_gt_ids}};
}

}  // namespace detforge
