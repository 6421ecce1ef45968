#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <limits>

#include "detforge/augment.hpp"
#include "support.hpp"

namespace detforge {
namespace {

std::vector<BBox> random_boxes(Engine& rng, std::size_t n, const ImageGeom& g) {
  std::vector<BBox> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = uniform01(rng) * (g.width - 2), y = uniform01(rng) * (g.height - 2);
    const double w = 1 + uniform01(rng) * std::min(150.0, g.width - x - 1);
    const double h = 1 + uniform01(rng) * std::min(150.0, g.height - y - 1);
    out.push_back({x, y, x + w, y + h});
  }
  return out;
}

TEST(Hflip, Examples) {
  const std::vector<BBox> boxes{{10, 20, 30, 40}, {0, 0, 100, 50}};
  const auto out = hflip(boxes, {100, 50});
  EXPECT_EQ(out[0], (BBox{70, 20, 90, 40}));
  EXPECT_EQ(out[1], boxes[1]);
}

TEST(Hflip, IsAnInvolution) {
  auto rng = make_engine(1);
  const ImageGeom g{1333, 800};
  const auto boxes = random_boxes(rng, 500, g);
  const auto back = hflip(hflip(boxes, g), g);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    ASSERT_NEAR(back[i].x_min, boxes[i].x_min, 1e-12);
    ASSERT_NEAR(back[i].x_max, boxes[i].x_max, 1e-12);
    ASSERT_EQ(back[i].y_min, boxes[i].y_min);
  }
}

TEST(Resize, IdentityAtCurrentShortEdge) {
  const std::vector<BBox> boxes{{10, 20, 30, 40}};
  const auto [out, g] = short_edge_resize(boxes, {1000, 800}, 800);
  EXPECT_EQ(g, (ImageGeom{1000, 800}));
  EXPECT_EQ(out[0], boxes[0]);
}

TEST(Resize, ScalesBoxesAndImage) {
  const std::vector<BBox> boxes{{100, 100, 200, 150}};
  const auto [out, g] = short_edge_resize(boxes, {1000, 800}, 640);
  EXPECT_EQ(g, (ImageGeom{800, 640}));
  EXPECT_DOUBLE_EQ(out[0].x_min, 80.0);
  EXPECT_DOUBLE_EQ(out[0].y_max, 120.0);
  EXPECT_THROW(short_edge_resize(boxes, {1000, 800}, 0), ValidationError);
  EXPECT_THROW(short_edge_resize(boxes, {0, 800}, 10), ValidationError);
}

TEST(Resize, PreservesPairwiseIou) {
  auto rng = make_engine(2);
  const ImageGeom g{1200, 900};
  const auto boxes = random_boxes(rng, 200, g);
  for (int target : {640, 800, 960}) {
    const auto [out, og] = short_edge_resize(boxes, g, target);
    for (std::size_t i = 0; i + 1 < boxes.size(); ++i)
      ASSERT_NEAR(iou(out[i], out[i + 1]), iou(boxes[i], boxes[i + 1]), 1e-12);
  }
}

TEST(FixedResize, Anisotropic) {
  const std::vector<BBox> boxes{{100, 100, 200, 200}};
  const auto [out, g] = fixed_resize(boxes, {800, 400}, 1600, 1600);
  EXPECT_EQ(out[0], (BBox{200, 400, 400, 800}));
  EXPECT_EQ(g, (ImageGeom{1600, 1600}));
}

TEST(Crop, FullImageCropIsPlainResize) {
  const std::vector<BBox> boxes{{10, 10, 50, 30}};
  const auto r = crop_resize_at(boxes, {400, 400}, 0, 0, 400, 800, 0.25);
  ASSERT_EQ(r.boxes.size(), 1u);
  EXPECT_EQ(r.boxes[0], (BBox{20, 20, 100, 60}));
  EXPECT_EQ(r.geom, (ImageGeom{800, 800}));
}

TEST(Crop, TranslatesThenScales) {
  const std::vector<BBox> boxes{{150, 250, 170, 260}, {0, 0, 10, 10}, {95, 195, 105, 205}};
  const auto r = crop_resize_at(boxes, {1000, 1000}, 100, 200, 400, 800, 0.25);
  // box 1 is outside; box 2 keeps 25% of its area
  ASSERT_EQ(r.kept, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(r.boxes[0], (BBox{100, 100, 140, 120}));
  EXPECT_EQ(r.boxes[1], (BBox{0, 0, 10, 10}));
  const auto strict = crop_resize_at(boxes, {1000, 1000}, 100, 200, 400, 800, 0.3);
  EXPECT_EQ(strict.kept, std::vector<std::size_t>{0});
}

TEST(Crop, RejectsWindowsOutsideTheImage) {
  const std::vector<BBox> none;
  auto rng = make_engine(3);
  EXPECT_THROW(random_crop_resize(none, {300, 800}, 400, 800, rng), ValidationError);
  EXPECT_THROW(crop_resize_at(none, {500, 500}, 200, 0, 400, 800, 0.25), ValidationError);
}

TEST(Crop, SeededSamplingIsDeterministic) {
  auto a = make_engine(17);
  auto b = make_engine(17);
  auto rng = make_engine(4);
  const ImageGeom g{1024, 768};
  const auto boxes = random_boxes(rng, 100, g);
  const auto ra = random_crop_resize(boxes, g, 400, 800, a);
  const auto rb = random_crop_resize(boxes, g, 400, 800, b);
  EXPECT_EQ(ra.records, rb.records);
  EXPECT_EQ(ra.boxes, rb.boxes);
  EXPECT_EQ(ra.records[0].rng_draws, 2u);
  EXPECT_LE(ra.records[0].crop_x + 400, g.width);
  EXPECT_LE(ra.records[0].crop_y + 400, g.height);
}

/// Always returns the largest value: no flip, last short-edge choice.
struct MaxGenerator {
  using result_type = std::uint64_t;
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<std::uint64_t>::max(); }
  result_type operator()() { return max(); }
};

TEST(Pipeline, RiggedDrawsGiveIdentity) {
  Pipeline<MaxGenerator> p(1, MaxGenerator{});
  const std::vector<BBox> boxes{{10, 10, 20, 20}, {500, 300, 700, 400}};
  const auto r = p(boxes, {800, 800});
  EXPECT_EQ(r.boxes, boxes);
  EXPECT_EQ(r.geom, (ImageGeom{800, 800}));
  ASSERT_EQ(r.records.size(), 2u);
  EXPECT_FALSE(r.records[0].flipped);
  EXPECT_EQ(r.records[1].target_short_edge, 800);
}

TEST(Pipeline, UnknownRecipe) {
  EXPECT_THROW(make_pipeline(0, 1), ValidationError);
  EXPECT_THROW(make_pipeline(4, 1), ValidationError);
}

TEST(Pipeline, SecondRecipeNeverShrinks) {
  auto p = make_pipeline(2, 5);
  for (int i = 0; i < 100; ++i) {
    const auto r = p(std::vector<BBox>{}, {1000, 800});
    EXPECT_GE(std::min(r.geom.width, r.geom.height), 800);
    EXPECT_LE(std::min(r.geom.width, r.geom.height), 960);
  }
}

TEST(Pipeline, FirstRecipeUsesOnlyListedEdges) {
  auto p = make_pipeline(1, 6);
  std::set<int> seen;
  for (int i = 0; i < 200; ++i) seen.insert(p(std::vector<BBox>{}, {800, 600}).records[1].target_short_edge);
  EXPECT_EQ(seen, std::set<int>(kAug1ShortEdges.begin(), kAug1ShortEdges.end()));
}

TEST(Pipeline, OutputsStayInBoundsAndNeverGrow) {
  auto rng = make_engine(7);
  for (int aug = 1; aug <= 3; ++aug) {
    auto p = make_pipeline(aug, 100 + aug);
    for (int trial = 0; trial < 30; ++trial) {
      const ImageGeom g{600 + int(uniform_index(rng, 800)), 500 + int(uniform_index(rng, 600))};
      const auto boxes = random_boxes(rng, 40, g);
      const auto r = p(boxes, g);
      ASSERT_LE(r.boxes.size(), boxes.size());
      ASSERT_EQ(r.kept.size(), r.boxes.size());
      for (const auto& b : r.boxes) {
        EXPECT_GE(b.x_min, 0.0);
        EXPECT_GE(b.y_min, 0.0);
        EXPECT_LE(b.x_max, r.geom.width);
        EXPECT_LE(b.y_max, r.geom.height);
        EXPECT_GE(b.width(), 1.0);
        EXPECT_GE(b.height(), 1.0);
      }
      EXPECT_TRUE(std::is_sorted(r.kept.begin(), r.kept.end()));
    }
  }
}

TEST(Pipeline, CropRecipeReplaysThroughJson) {
  auto rng = make_engine(8);
  const ImageGeom g{1024, 1024};
  const auto boxes = random_boxes(rng, 300, g);
  auto p = make_pipeline(3, 7);
  const auto r = p(boxes, g);

  std::vector<TransformRecord> parsed;
  for (const auto& rec : r.records) parsed.push_back(record_from_json(nlohmann::json::parse(to_json(rec).dump())));
  EXPECT_EQ(parsed.size(), 2u);
  const auto again = replay(parsed, boxes, g);
  EXPECT_EQ(again.boxes, r.boxes);
  EXPECT_EQ(again.kept, r.kept);
  EXPECT_EQ(again.geom, r.geom);
}

TEST(Pipeline, SameSeedSameStream) {
  auto rng = make_engine(9);
  const ImageGeom g{900, 700};
  const auto boxes = random_boxes(rng, 50, g);
  auto a = make_pipeline(3, 11);
  auto b = make_pipeline(3, 11);
  for (int i = 0; i < 10; ++i) {
    const auto ra = a(boxes, g);
    const auto rb = b(boxes, g);
    ASSERT_EQ(ra.records, rb.records);
    ASSERT_EQ(ra.boxes, rb.boxes);
  }
}

TEST(Records, JsonRoundTripAndErrors) {
  TransformRecord r = eval_resize_record();
  EXPECT_EQ(record_from_json(to_json(r)), r);
  EXPECT_THROW(record_from_json({{"kind", "rotate"}}), ValidationError);
  EXPECT_THROW(record_from_json({{"kind", "flip"}}), ValidationError);
  EXPECT_EQ(std::string(to_string(TransformKind::kCropResize)), "crop_resize");
}

}  // namespace
}  // namespace detforge
