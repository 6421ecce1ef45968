// Acceptance run: one line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "detforge/anchors.hpp"
#include "detforge/annotations.hpp"
#include "detforge/augment.hpp"
#include "detforge/cli.hpp"
#include "detforge/eval.hpp"
#include "detforge/losses.hpp"
#include "support.hpp"

using namespace detforge;

namespace {

// Tolerances and budgets.
constexpr double kIouTol = 1e-12;
constexpr double kIdentityTol = 1e-12;
constexpr double kGradTol = 1e-6;
constexpr double kGradStep = 1e-5;
constexpr double kClusterTol = 0.005;
constexpr double kSweepSlack = 0.01;
constexpr double kEvalTol = 1e-9;
constexpr double kAugTol = 1e-12;

// Best mean IoU over 1,000 seeds x {k-means++, random} for k = 4 on the
// bundled corpus, from tests/oracles/kmeans_restarts_oracle.py.
constexpr double kClusterOracle = 0.792037995341;

struct Check {
  bool ok = true;
  std::ostringstream note;

  void expect(bool cond, const std::string& what) {
    if (!cond && ok) note << "failed: " << what << "; ";
    ok = ok && cond;
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string cli_output(std::vector<std::string> args) {
  args.insert(args.begin(), "detforge");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(int(argv.size()), argv.data(), out, err);
  return std::to_string(code) + "\n" + out.str();
}

// ---------------------------------------------------------------------------

void iou_oracle(Check& c) {
  const auto t0 = Clock::now();
  auto rng = make_engine(2024);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const BBox a = testing::random_int_box(rng, 64);
    const BBox b = testing::random_int_box(rng, 64);
    worst = std::max(worst, std::fabs(iou(a, b) - testing::rasterized_iou(a, b, 64)));
  }
  const double t = seconds_since(t0);
  c.note << "max |diff| " << worst << ", " << t << " s";
  c.expect(worst <= kIouTol, "IoU differs from the raster count");
  c.expect(t < 5.0, "runtime over 5 s");
}

/// Compensated sum (Neumaier).
double careful_sum(const std::vector<double>& v) {
  double s = 0.0, comp = 0.0;
  for (double x : v) {
    const double t = s + x;
    comp += std::fabs(s) >= std::fabs(x) ? (s - t) + x : (x - t) + s;
    s = t;
  }
  return s + comp;
}

void class_weight_suite(Check& c) {
  auto rng = make_engine(77);
  int exact_sums = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 2 + uniform_index(rng, 30);
    std::vector<std::int64_t> counts(k);
    std::int64_t total = 0;
    for (auto& n : counts) total += n = std::int64_t(uniform_index(rng, 100000));
    if (total == 0) total = counts[0] = 1;
    const auto w = class_weights(counts).w;
    std::int64_t numerators = 0;
    for (std::size_t i = 0; i < k; ++i) {
      // the correctly rounded value of 1 - n_c / N
      c.expect(w[i] == double(total - counts[i]) / double(total), "weight is not 1 - n_c/N");
      numerators += total - counts[i];
    }
    // sum of (N - n_c) / N is exactly c - 1 as a rational ...
    c.expect(numerators == std::int64_t(k - 1) * total, "numerators do not sum to (c-1) N");
    // ... and the weights as stored add up to c - 1 after rounding
    exact_sums += careful_sum(w) == double(k - 1);
  }
  c.expect(exact_sums == 100, "floating sum of weights differs from c - 1");
  const std::vector<std::int64_t> fixed{10, 30, 60};
  const auto w = class_weights(fixed).w;
  c.expect(w == std::vector<double>{0.9, 0.7, 0.4}, "(10,30,60) -> (0.9,0.7,0.4)");
  c.note << exact_sums << "/100 sums exact";
}

LogitsBatch random_batch(Engine& rng, std::size_t n, std::size_t k, double spread) {
  LogitsBatch b{n, k, {}, {}};
  for (std::size_t i = 0; i < n * k; ++i) b.values.push_back((uniform01(rng) * 2 - 1) * spread);
  for (std::size_t i = 0; i < n; ++i) b.targets.push_back(uniform_index(rng, k));
  return b;
}

void loss_identities(Check& c) {
  const auto t0 = Clock::now();
  auto rng = make_engine(99);
  double worst_gamma0 = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto b = random_batch(rng, 16, 5, 4.0);
    worst_gamma0 = std::max(worst_gamma0, std::fabs(focal_loss(b, 0.0).value - cross_entropy(b).value));
  }
  c.expect(worst_gamma0 <= kIdentityTol, "gamma = 0 focal differs from CE");

  bool dominated = true;
  for (double gamma : {0.5, 1.0, 2.0}) {
    for (int trial = 0; trial < 50; ++trial) {
      const auto b = random_batch(rng, 16, 5, 6.0);
      for (std::size_t i = 0; i < b.n; ++i) {
        const LogitsBatch one{1, b.c, std::vector<double>(b.row(i).begin(), b.row(i).end()), {b.targets[i]}};
        dominated = dominated && focal_loss(one, gamma).value <= cross_entropy(one).value;
      }
    }
  }
  c.expect(dominated, "focal exceeds CE on some sample");

  double worst_grad = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto b = random_batch(rng, 8, 5, 3.0);
    std::vector<std::int64_t> counts(b.c, 1);
    for (auto t : b.targets) ++counts[t];
    const auto w = class_weights(counts);
    worst_grad = std::max(worst_grad, grad_check(cross_entropy, b, kGradStep));
    worst_grad = std::max(
        worst_grad, grad_check([&](const LogitsBatch& x) { return weighted_cross_entropy(x, w); }, b, kGradStep));
    worst_grad =
        std::max(worst_grad, grad_check([](const LogitsBatch& x) { return focal_loss(x, 2.0); }, b, kGradStep));

    std::vector<double> pred, target;
    for (int i = 0; i < 16; ++i) {
      double d;
      do d = (uniform01(rng) * 2 - 1) * 3; while (std::fabs(std::fabs(d) - 1.0) < 1e-3);  // off the kink
      target.push_back(uniform01(rng) * 10);
      pred.push_back(target.back() + d);
    }
    worst_grad = std::max(
        worst_grad, grad_check([&](std::span<const double> x) { return smooth_l1(x, target); }, pred, kGradStep));
  }
  c.expect(worst_grad < kGradTol, "gradient check above tolerance");
  const double t = seconds_since(t0);
  c.expect(t < 10.0, "runtime over 10 s");
  c.note << "gamma0 diff " << worst_gamma0 << ", grad rel err " << worst_grad << ", " << t << " s";
}

std::vector<BoxWH> synthetic_corpus() {
  const Json doc = detail::parse_json_file(testing::data_path("synthetic_aerial_boxes.json"));
  std::vector<BoxWH> boxes;
  for (const auto& b : doc.at("boxes")) boxes.push_back({b[0].get<double>(), b[1].get<double>()});
  return boxes;
}

void clustering(Check& c) {
  const auto t0 = Clock::now();
  const auto boxes = synthetic_corpus();
  c.expect(boxes.size() == 2000, "corpus size");
  ClusterOptions opt;
  opt.k = 4;
  opt.restarts = 10;
  opt.seed = 0;
  const auto r = cluster_anchor_sizes(boxes, opt);
  c.expect(std::fabs(r.mean_iou - kClusterOracle) <= kClusterTol, "k = 4 mean IoU off the restart oracle");

  const auto again = cluster_anchor_sizes(boxes, opt);
  opt.threads = 4;
  const auto threaded = cluster_anchor_sizes(boxes, opt);
  c.expect(to_json(r) == to_json(again) && to_json(r) == to_json(threaded), "clustering not deterministic");

  opt.threads = 1;
  const auto sweep = sweep_k(boxes, 2, 8, opt);
  for (std::size_t i = 1; i < sweep.size(); ++i)
    c.expect(sweep[i].mean_iou >= sweep[i - 1].mean_iou - kSweepSlack, "sweep drops by more than the slack");
  const double t = seconds_since(t0);
  c.expect(t < 30.0, "runtime over 30 s");
  c.note << "mean IoU " << r.mean_iou << " vs " << kClusterOracle << ", sweep";
  for (const auto& p : sweep) c.note << ' ' << p.mean_iou;
  c.note << ", " << t << " s";
}

/// Fraction of GTs whose best anchor reaches `thr`, scanning every anchor.
double brute_force_recall(const AnchorSet& set, const Dataset& ds, double thr) {
  std::size_t hit = 0;
  for (const auto& g : ds.instances()) {
    double best = 0.0;
    for (const auto& level : set.levels)
      for (const auto& a : level) best = std::max(best, iou(a.box, g.bbox));
    hit += best >= thr;
  }
  return double(hit) / double(ds.instances().size());
}

void matching_direction(Check& c) {
  const Dataset ds = load_dataset(testing::fixture_path("small_objects.json"));
  std::size_t small = 0;
  for (const auto& g : ds.instances()) small += g.area < 32.0 * 32.0;
  c.expect(2 * small > ds.instances().size(), "fixture is not dominated by small objects");

  const auto& im = ds.images().front();
  AnchorSpec fine;
  AnchorSpec coarse;
  coarse.sizes = {32, 64, 128, 256, 512};
  const auto fine_set = generate_anchors(fine, fmap_dims_for(fine, im.width, im.height));
  const auto coarse_set = generate_anchors(coarse, fmap_dims_for(coarse, im.width, im.height));
  const double r_fine = brute_force_recall(fine_set, ds, 0.5);
  const double r_coarse = brute_force_recall(coarse_set, ds, 0.5);
  c.expect(r_fine >= r_coarse, "smaller anchors recall fewer GTs");

  // the matcher agrees with the brute-force scan
  const MatchParams p{0.5, 0.3, false};
  c.expect(match_anchors(fine_set, ds.instances(), p).recall() == r_fine, "matcher recall (16..256)");
  c.expect(match_anchors(coarse_set, ds.instances(), p).recall() == r_coarse, "matcher recall (32..512)");
  c.note << "recall 16..256 " << r_fine << ", 32..512 " << r_coarse;
}

void evaluator(Check& c) {
  const auto t0 = Clock::now();
  const Dataset tiny = load_dataset(testing::data_path("tiny.json"));
  const auto perfect = coco_map(load_detections(testing::fixture_path("perfect.json")), tiny);
  c.expect(perfect.ap == 1.0 && perfect.ap50 == 1.0 && perfect.ap75 == 1.0, "perfect detections below 1.0");

  const Dataset gt = load_dataset(testing::fixture_path("mixed_gt.json"));
  const auto dets = load_detections(testing::fixture_path("mixed_dets.json"));
  const auto expected = detail::parse_json_file(testing::fixture_path("mixed_expected.json"));
  const auto r = coco_map(dets, gt);
  double worst = 0.0;
  for (const char* k : {"ap", "ap50", "ap75", "ap_small", "ap_medium", "ap_large"})
    worst = std::max(worst, std::fabs(to_json(r)[k].get<double>() - expected[k].get<double>()));
  for (std::size_t i = 0; i < r.per_class.size(); ++i)
    worst = std::max(worst, std::fabs(r.per_class[i].ap - expected["per_class_ap"][i]["ap"].get<double>()));
  c.expect(r.per_class.size() == expected["per_class_ap"].size(), "per-class count");
  c.expect(worst <= kEvalTol, "mixed fixture differs from the stored result");

  auto rng = make_engine(555);
  int monotone = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto more = dets;
    const std::size_t extra = 1 + uniform_index(rng, 3);
    for (std::size_t e = 0; e < extra; ++e) {
      const auto& im = gt.images()[uniform_index(rng, gt.images().size())];
      const double s = 5 + uniform01(rng) * 60;
      const double x = uniform01(rng) * (im.width - s), y = uniform01(rng) * (im.height - s);
      BBox box{x, y, x + s, y + s};
      // a box that overlaps no GT of any class can only be a false positive
      bool clear = true;
      for (const auto& g : gt.instances()) clear = clear && iou(box, g.bbox) == 0.0;
      if (!clear) box = {950, 950, 955 + uniform01(rng) * 40, 955 + uniform01(rng) * 40};
      more.push_back({im.id, 1 + std::int64_t(uniform_index(rng, 2)), box, uniform01(rng), more.size()});
    }
    monotone += coco_map(more, gt).ap <= r.ap;
  }
  c.expect(monotone == 100, "injected false positives raised AP");
  const double t = seconds_since(t0);
  c.expect(t < 10.0, "runtime over 10 s");
  c.note << "max |diff| " << worst << ", FP trials " << monotone << "/100, " << t << " s";
}

void augmentation(Check& c) {
  auto rng = make_engine(31337);
  const ImageGeom g{1024, 768};
  std::vector<BBox> boxes;
  for (int i = 0; i < 1000; ++i) {
    BBox b = testing::random_real_box(rng, 760.0);
    b.x_max = std::max(b.x_max, b.x_min + 1.0);
    b.y_max = std::max(b.y_max, b.y_min + 1.0);
    boxes.push_back(b);
  }
  const auto back = hflip(hflip(boxes, g), g);
  double flip_err = 0.0;
  for (std::size_t i = 0; i < boxes.size(); ++i)
    flip_err = std::max({flip_err, std::fabs(back[i].x_min - boxes[i].x_min), std::fabs(back[i].x_max - boxes[i].x_max),
                         std::fabs(back[i].y_min - boxes[i].y_min), std::fabs(back[i].y_max - boxes[i].y_max)});
  c.expect(flip_err <= kAugTol, "flip is not an involution");

  double iou_err = 0.0;
  for (int target : {640, 672, 704, 736, 768, 800, 832, 864, 896, 928, 960}) {
    const auto [resized, rg] = short_edge_resize(boxes, g, target);
    for (std::size_t i = 0; i + 1 < boxes.size(); ++i)
      iou_err = std::max(iou_err, std::fabs(iou(resized[i], resized[i + 1]) - iou(boxes[i], boxes[i + 1])));
  }
  c.expect(iou_err <= kAugTol, "resize changed pairwise IoU");

  // recipe 3 sampled, written as JSON lines, read back and replayed
  auto pipeline = make_pipeline(3, 7);
  bool identical = true;
  for (int image = 0; image < 20; ++image) {
    const auto sampled = pipeline(boxes, g);
    std::string jsonl;
    for (const auto& rec : sampled.records) jsonl += to_json(rec).dump() + "\n";
    std::vector<TransformRecord> parsed;
    std::istringstream lines(jsonl);
    for (std::string line; std::getline(lines, line);) parsed.push_back(record_from_json(Json::parse(line)));
    const auto replayed = replay(parsed, boxes, g);
    auto dump = [](const AugResult& r) {
      Json j = Json::array();
      for (const auto& b : r.boxes) j.push_back(to_xywh(b));
      return Json{{"boxes", j}, {"kept", r.kept}, {"geom", {r.geom.width, r.geom.height}}}.dump();
    };
    identical = identical && dump(sampled) == dump(replayed);
  }
  c.expect(identical, "replay differs from the sampled output");
  c.note << "flip err " << flip_err << ", resize IoU err " << iou_err;
}

/// Tile index -> source image and origin, recovered from the tile file name.
struct TileOrigin {
  std::string stem;
  int ox, oy;
};

TileOrigin parse_tile_name(const std::string& name) {
  const auto dot = name.rfind('.');
  const std::string base = dot == std::string::npos ? name : name.substr(0, dot);
  const auto u2 = base.rfind('_');
  const auto u1 = base.rfind('_', u2 - 1);
  return {base.substr(0, u1), std::stoi(base.substr(u1 + 1, u2 - u1 - 1)), std::stoi(base.substr(u2 + 1))};
}

void tiling_invariants(Check& c, const Dataset& ds, const TileParams& p) {
  const Dataset t = tile(ds, p);
  std::map<std::string, const ImageRecord*> by_stem;
  for (const auto& im : ds.images()) by_stem[im.file_name.substr(0, im.file_name.rfind('.'))] = &im;

  // cover: per source image, the tile windows reach every border and leave no gap
  std::map<std::int64_t, std::vector<int>> xs, ys;
  for (const auto& im : t.images()) {
    const auto o = parse_tile_name(im.file_name);
    const ImageRecord* src = by_stem.at(o.stem);
    xs[src->id].push_back(o.ox);
    ys[src->id].push_back(o.oy);
  }
  for (const auto& im : ds.images()) {
    for (auto [axis, length] : {std::pair{&xs[im.id], im.width}, std::pair{&ys[im.id], im.height}}) {
      std::sort(axis->begin(), axis->end());
      axis->erase(std::unique(axis->begin(), axis->end()), axis->end());
      const int side = std::min(length, p.tile_size);
      c.expect(!axis->empty() && axis->front() == 0, "first tile not at the origin");
      c.expect(axis->back() + side == length, "last tile does not reach the border");
      for (std::size_t i = 1; i < axis->size(); ++i)
        c.expect((*axis)[i] - (*axis)[i - 1] <= side, "gap between tiles");
    }
  }

  // soundness: each tiled box is the visible part of a source box, shifted
  std::size_t sound = 0;
  for (const auto& im : t.images()) {
    const auto o = parse_tile_name(im.file_name);
    const ImageRecord* src = by_stem.at(o.stem);
    const BBox window{double(o.ox), double(o.oy), double(o.ox + im.width), double(o.oy + im.height)};
    for (std::size_t pos : t.instances_in(im.id)) {
      const Instance& ti = t.instances()[pos];
      bool found = false;
      for (std::size_t spos : ds.instances_in(src->id)) {
        const Instance& s = ds.instances()[spos];
        const auto part = clip(s.bbox, window);
        if (!part || s.category_id != ti.category_id) continue;
        if (translated(*part, -o.ox, -o.oy) == ti.bbox && part->area() / s.bbox.area() >= p.min_visibility)
          found = true;
      }
      c.expect(found, "tiled instance without a visible source");
      sound += found;
    }
  }

  // completeness: every sufficiently visible (instance, tile) pair appears
  std::size_t expected = 0;
  for (const auto& im : t.images()) {
    const auto o = parse_tile_name(im.file_name);
    const ImageRecord* src = by_stem.at(o.stem);
    const BBox window{double(o.ox), double(o.oy), double(o.ox + im.width), double(o.oy + im.height)};
    for (std::size_t spos : ds.instances_in(src->id)) {
      const Instance& s = ds.instances()[spos];
      const auto part = clip(s.bbox, window);
      if (part && s.bbox.area() > 0 && part->area() / s.bbox.area() >= p.min_visibility) ++expected;
    }
  }
  c.expect(expected == t.instances().size() && sound == expected, "tiled instance count");
}

void tiling(Check& c) {
  const Dataset tiny = load_dataset(testing::data_path("tiny.json"));
  const TileParams defaults;
  tiling_invariants(c, tiny, defaults);
  c.expect(tile_origins(1000, 800, 200) == std::vector<int>{0, 200}, "1000 px with overlap 200 gives origins 0, 200");
  tiling_invariants(c, tiny, {300, 60, 0.25});
  tiling_invariants(c, load_dataset(testing::fixture_path("mixed_gt.json")), {400, 100, 0.5});
  tiling_invariants(c, load_dataset(testing::fixture_path("small_objects.json")), {100, 30, 0.25});
  c.note << tile(tiny, defaults).images().size() << " tiles from tiny.json at defaults";
}

void end_to_end(Check& c) {
  const std::string ann = testing::data_path("tiny.json");
  const std::vector<std::vector<std::string>> runs{
      {"stats", "--ann", ann},
      {"cluster", "--ann", ann, "--k", "3"},
      {"match", "--ann", ann},
      {"eval", "--ann", ann, "--dets", testing::fixture_path("perfect.json")},
      {"eval", "--ann", testing::fixture_path("mixed_gt.json"), "--dets", testing::fixture_path("mixed_dets.json")},
  };
  for (const auto& args : runs) {
    const auto a = cli_output(args);
    const auto b = cli_output(args);
    auto threaded = args;
    threaded.insert(threaded.end(), {"--threads", "4"});
    const auto t = cli_output(threaded);
    c.expect(a.rfind("0\n", 0) == 0, args[0] + " failed");
    c.expect(a == b && a == t, args[0] + " rerun differs");
  }
  c.note << runs.size() << " commands rerun";
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void(Check&)>>> criteria{
      {"IoU matches rasterized oracle on 10,000 integer box pairs", iou_oracle},
      {"class weights: 1 - n_c/N, sum c - 1, (10,30,60) example", class_weight_suite},
      {"focal/CE identities and gradient checks", loss_identities},
      {"k-means anchor clustering vs restart oracle, sweep, determinism", clustering},
      {"small anchors recall at least as many small GTs as large anchors", matching_direction},
      {"evaluator: perfect, mixed fixture, FP injection", evaluator},
      {"augmentation: flip involution, resize IoU invariance, crop replay", augmentation},
      {"tiling: cover, soundness, completeness", tiling},
      {"end-to-end reruns are byte-identical", end_to_end},
  };
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    Check c;
    c.note.precision(12);
    try {
      fn(c);
    } catch (const std::exception& e) {
      c.ok = false;
      c.note << "exception: " << e.what();
    }
    failures += !c.ok;
    std::printf("[%s] %s (%s)\n", c.ok ? "PASS" : "FAIL", name.c_str(), c.note.str().c_str());
  }
  std::printf("%d/%zu criteria passed\n", int(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
