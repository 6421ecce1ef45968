#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "detforge/errors.hpp"
#include "detforge/geometry.hpp"

namespace detforge {

using Json = nlohmann::json;

struct Category {
  std::int64_t id = 0;
  std::string name;
  friend bool operator==(const Category&, const Category&) = default;
};

struct ImageRecord {
  std::int64_t id = 0;
  int width = 0;
  int height = 0;
  std::string file_name;
  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct Instance {
  std::int64_t id = 0;
  std::int64_t image_id = 0;
  std::int64_t category_id = 0;
  BBox bbox;
  double area = 0.0;  // pixel^2; may come from a segmentation rather than the box
  bool ignore = false;
};

/// Images, instances and categories with every cross-reference checked.
/// Nothing is mutable after construction.
class Dataset {
 public:
  Dataset() = default;

  Dataset(std::vector<ImageRecord> images, std::vector<Instance> instances,
          std::vector<Category> categories, std::string provenance = {},
          std::vector<std::int64_t> clipped_instance_ids = {})
      : images_(std::move(images)),
        instances_(std::move(instances)),
        categories_(std::move(categories)),
        provenance_(std::move(provenance)),
        clipped_(std::move(clipped_instance_ids)) {
    index();
  }

  const std::vector<ImageRecord>& images() const noexcept { return images_; }
  const std::vector<Instance>& instances() const noexcept { return instances_; }
  const std::vector<Category>& categories() const noexcept { return categories_; }
  const std::string& provenance() const noexcept { return provenance_; }

  /// Annotation ids whose boxes were clamped into their image on load.
  const std::vector<std::int64_t>& clipped_instance_ids() const noexcept { return clipped_; }

  const ImageRecord* find_image(std::int64_t id) const {
    auto it = image_pos_.find(id);
    return it == image_pos_.end() ? nullptr : &images_[it->second];
  }
  const Category* find_category(std::int64_t id) const {
    auto it = category_pos_.find(id);
    return it == category_pos_.end() ? nullptr : &categories_[it->second];
  }

  /// Instance positions for one image, ordered by instance id.
  const std::vector<std::size_t>& instances_in(std::int64_t image_id) const {
    static const std::vector<std::size_t> kEmpty;
    auto it = by_image_.find(image_id);
    return it == by_image_.end() ? kEmpty : it->second;
  }

 private:
  void index() {
    for (std::size_t i = 0; i < images_.size(); ++i) {
      const auto& im = images_[i];
      if (im.width <= 0 || im.height <= 0)
        throw ValidationError("image " + std::to_string(im.id) + " has non-positive size");
      if (!image_pos_.emplace(im.id, i).second)
        throw ValidationError("duplicate image id " + std::to_string(im.id));
    }
    for (std::size_t i = 0; i < categories_.size(); ++i) {
      if (!category_pos_.emplace(categories_[i].id, i).second)
        throw ValidationError("duplicate category id " + std::to_string(categories_[i].id));
    }
    std::unordered_set<std::int64_t> seen;
    for (std::size_t i = 0; i < instances_.size(); ++i) {
      const auto& inst = instances_[i];
      if (!seen.insert(inst.id).second)
        throw ValidationError("duplicate annotation id " + std::to_string(inst.id));
      if (!image_pos_.contains(inst.image_id))
        throw DanglingReference(inst.image_id, "image of annotation " + std::to_string(inst.id));
      if (!category_pos_.contains(inst.category_id))
        throw DanglingReference(inst.category_id, "category of annotation " + std::to_string(inst.id));
      if (!inst.bbox.valid()) throw NegativeExtent(inst.id);
      by_image_[inst.image_id].push_back(i);
    }
    for (auto& [_, positions] : by_image_) {
      std::sort(positions.begin(), positions.end(), [this](std::size_t a, std::size_t b) {
        return instances_[a].id < instances_[b].id;
      });
    }
  }

  std::vector<ImageRecord> images_;
  std::vector<Instance> instances_;
  std::vector<Category> categories_;
  std::string provenance_;
  std::vector<std::int64_t> clipped_;
  std::unordered_map<std::int64_t, std::size_t> image_pos_;
  std::unordered_map<std::int64_t, std::size_t> category_pos_;
  std::unordered_map<std::int64_t, std::vector<std::size_t>> by_image_;
};

// ---------------------------------------------------------------------------
// COCO-style JSON

namespace detail {

inline const Json& require(const Json& obj, const char* key, const std::string& record) {
  if (!obj.is_object()) throw ValidationError(record + " is not an object");
  auto it = obj.find(key);
  if (it == obj.end()) throw MissingKey(key, record);
  return *it;
}

template <class T>
T get_as(const Json& obj, const char* key, const std::string& record) {
  const Json& v = require(obj, key, record);
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError("wrong type for '" + std::string(key) + "' in " + record);
  }
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline Json parse_json_file(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  out.flush();
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace detail

/// Builds a Dataset from a parsed COCO-style document. Boxes arrive as
/// [x, y, w, h] and are clamped into their image; the ids of clamped
/// annotations are kept on the dataset.
inline Dataset parse_dataset(const Json& doc, std::string provenance = {}) {
  using detail::get_as;
  using detail::require;

  const Json& images_js = require(doc, "images", "document");
  const Json& anns_js = require(doc, "annotations", "document");
  const Json& cats_js = require(doc, "categories", "document");
  if (!images_js.is_array() || !anns_js.is_array() || !cats_js.is_array())
    throw ValidationError("images/annotations/categories must be arrays");

  std::vector<Category> categories;
  for (const auto& c : cats_js) {
    const std::string rec = "category";
    categories.push_back({get_as<std::int64_t>(c, "id", rec), get_as<std::string>(c, "name", rec)});
  }

  std::vector<ImageRecord> images;
  std::unordered_map<std::int64_t, std::pair<int, int>> dims;
  for (const auto& im : images_js) {
    const auto id = get_as<std::int64_t>(im, "id", "image");
    const std::string rec = "image " + std::to_string(id);
    ImageRecord r{id, get_as<int>(im, "width", rec), get_as<int>(im, "height", rec),
                  get_as<std::string>(im, "file_name", rec)};
    dims[id] = {r.width, r.height};
    images.push_back(std::move(r));
  }

  std::vector<Instance> instances;
  std::vector<std::int64_t> clipped;
  for (const auto& a : anns_js) {
    const auto id = get_as<std::int64_t>(a, "id", "annotation");
    const std::string rec = "annotation " + std::to_string(id);
    Instance inst;
    inst.id = id;
    inst.image_id = get_as<std::int64_t>(a, "image_id", rec);
    inst.category_id = get_as<std::int64_t>(a, "category_id", rec);
    const auto xywh = get_as<std::vector<double>>(a, "bbox", rec);
    if (xywh.size() != 4) throw ValidationError("bbox of " + rec + " must have 4 numbers");
    if (xywh[2] < 0.0 || xywh[3] < 0.0) throw NegativeExtent(id);
    inst.bbox = from_xywh(xywh[0], xywh[1], xywh[2], xywh[3]);

    auto dim = dims.find(inst.image_id);
    if (dim == dims.end()) throw DanglingReference(inst.image_id, "image of " + rec);
    const double w = dim->second.first;
    const double h = dim->second.second;
    const BBox clamped{std::clamp(inst.bbox.x_min, 0.0, w), std::clamp(inst.bbox.y_min, 0.0, h),
                       std::clamp(inst.bbox.x_max, 0.0, w), std::clamp(inst.bbox.y_max, 0.0, h)};
    if (clamped != inst.bbox) {
      clipped.push_back(id);
      inst.bbox = clamped;
    }

    if (auto it = a.find("area"); it != a.end() && !it->is_null()) {
      if (!it->is_number()) throw ValidationError("wrong type for 'area' in " + rec);
      inst.area = it->get<double>();
      if (inst.area < 0.0) throw ValidationError("negative area in " + rec);
    } else {
      inst.area = inst.bbox.area();
    }
    if (auto it = a.find("iscrowd"); it != a.end() && !it->is_null()) {
      if (!it->is_number() && !it->is_boolean())
        throw ValidationError("wrong type for 'iscrowd' in " + rec);
      inst.ignore = it->is_boolean() ? it->get<bool>() : it->get<double>() != 0.0;
    }
    instances.push_back(inst);
  }

  return Dataset(std::move(images), std::move(instances), std::move(categories), std::move(provenance),
                 std::move(clipped));
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  return parse_dataset(detail::parse_json_file(path), path.string());
}

inline Json to_json(const Dataset& ds) {
  Json images = Json::array();
  for (const auto& im : ds.images())
    images.push_back({{"id", im.id}, {"width", im.width}, {"height", im.height}, {"file_name", im.file_name}});
  Json anns = Json::array();
  for (const auto& inst : ds.instances()) {
    const auto xywh = to_xywh(inst.bbox);
    anns.push_back({{"id", inst.id},
                    {"image_id", inst.image_id},
                    {"category_id", inst.category_id},
                    {"bbox", {xywh[0], xywh[1], xywh[2], xywh[3]}},
                    {"area", inst.area},
                    {"iscrowd", inst.ignore ? 1 : 0}});
  }
  Json cats = Json::array();
  for (const auto& c : ds.categories()) cats.push_back({{"id", c.id}, {"name", c.name}});
  return {{"images", std::move(images)}, {"annotations", std::move(anns)}, {"categories", std::move(cats)}};
}

inline void export_dataset(const Dataset& ds, const std::filesystem::path& path) {
  detail::write_file(path, to_json(ds).dump(1) + "\n");
}

// ---------------------------------------------------------------------------
// Statistics

/// Small/medium/large split on instance area, COCO defaults 32^2 and 96^2.
struct AreaThresholds {
  double small_max = 32.0 * 32.0;
  double medium_max = 96.0 * 96.0;
};

enum class SizeBucket { kSmall, kMedium, kLarge };

inline SizeBucket size_bucket(double area, const AreaThresholds& t) noexcept {
  if (area < t.small_max) return SizeBucket::kSmall;
  if (area < t.medium_max) return SizeBucket::kMedium;
  return SizeBucket::kLarge;
}

struct CategoryStats {
  std::int64_t category_id = 0;
  std::string name;
  std::size_t count = 0;
  std::size_t small = 0;
  std::size_t medium = 0;
  std::size_t large = 0;
};

struct StatsReport {
  std::vector<CategoryStats> categories;
  std::map<std::size_t, std::size_t> images_by_instance_count;  // instances-per-image -> images
  std::size_t total_instances = 0;
  AreaThresholds thresholds;
};

inline StatsReport compute_stats(const Dataset& ds, const AreaThresholds& thresholds = {}) {
  StatsReport report;
  report.thresholds = thresholds;
  std::unordered_map<std::int64_t, std::size_t> pos;
  for (const auto& c : ds.categories()) {
    pos[c.id] = report.categories.size();
    report.categories.push_back({c.id, c.name});
  }
  for (const auto& inst : ds.instances()) {
    auto& cs = report.categories[pos.at(inst.category_id)];
    ++cs.count;
    switch (size_bucket(inst.area, thresholds)) {
      case SizeBucket::kSmall: ++cs.small; break;
      case SizeBucket::kMedium: ++cs.medium; break;
      case SizeBucket::kLarge: ++cs.large; break;
    }
  }
  for (const auto& im : ds.images()) ++report.images_by_instance_count[ds.instances_in(im.id).size()];
  report.total_instances = ds.instances().size();
  return report;
}

inline Json to_json(const StatsReport& r) {
  Json cats = Json::array();
  for (const auto& c : r.categories) {
    cats.push_back({{"category_id", c.category_id},
                    {"name", c.name},
                    {"count", c.count},
                    {"small", c.small},
                    {"medium", c.medium},
                    {"large", c.large}});
  }
  Json hist = Json::array();
  for (const auto& [n, images] : r.images_by_instance_count) hist.push_back({{"instances", n}, {"images", images}});
  return {{"categories", std::move(cats)},
          {"images_by_instance_count", std::move(hist)},
          {"total_instances", r.total_instances},
          {"area_thresholds", {{"small_max", r.thresholds.small_max}, {"medium_max", r.thresholds.medium_max}}}};
}

// ---------------------------------------------------------------------------
// Tiling

struct TileParams {
  int tile_size = 800;
  int overlap = 200;
  double min_visibility = 0.25;
};

/// Tile origins along one axis: stride tile_size - overlap, with the last
/// tile pulled back so it ends on the border. Axes no longer than a tile
/// get a single origin at 0.
inline std::vector<int> tile_origins(int length, int tile_size, int overlap) {
  if (tile_size <= 0 || overlap < 0 || overlap >= tile_size)
    throw InvalidOverlap("overlap must satisfy 0 <= overlap < tile_size");
  const int stride = tile_size - overlap;
  std::vector<int> origins;
  for (int x = 0;; x += stride) {
    if (x + tile_size >= length) {
      origins.push_back(std::max(0, length - tile_size));
      break;
    }
    origins.push_back(x);
  }
  return origins;
}

/// Splits every image into tiles. An instance is copied into each tile where
/// the clipped part keeps at least `min_visibility` of its box area.
inline Dataset tile(const Dataset& ds, const TileParams& p = {}) {
  if (p.tile_size <= 0 || p.overlap < 0 || p.overlap >= p.tile_size)
    throw InvalidOverlap("overlap " + std::to_string(p.overlap) + " invalid for tile size " +
                         std::to_string(p.tile_size));
  if (!(p.min_visibility > 0.0 && p.min_visibility <= 1.0))
    throw ValidationError("min_visibility must lie in (0, 1]");

  std::vector<ImageRecord> images;
  std::vector<Instance> instances;
  std::int64_t next_image = 1;
  std::int64_t next_instance = 1;

  for (const auto& im : ds.images()) {
    const auto xs = tile_origins(im.width, p.tile_size, p.overlap);
    const auto ys = tile_origins(im.height, p.tile_size, p.overlap);
    const int tw = std::min(im.width, p.tile_size);
    const int th = std::min(im.height, p.tile_size);
    const auto dot = im.file_name.rfind('.');
    const std::string stem = dot == std::string::npos ? im.file_name : im.file_name.substr(0, dot);
    const std::string ext = dot == std::string::npos ? std::string{} : im.file_name.substr(dot);

    for (int oy : ys) {
      for (int ox : xs) {
        const std::int64_t tile_id = next_image++;
        images.push_back({tile_id, tw, th, stem + "_" + std::to_string(ox) + "_" + std::to_string(oy) + ext});
        const BBox window{double(ox), double(oy), double(ox + tw), double(oy + th)};
        for (std::size_t pos : ds.instances_in(im.id)) {
          const Instance& src = ds.instances()[pos];
          const double full = src.bbox.area();
          if (full <= 0.0) continue;
          const auto part = clip(src.bbox, window);
          if (!part) continue;
          const double visibility = part->area() / full;
          if (visibility < p.min_visibility) continue;
          Instance out = src;
          out.id = next_instance++;
          out.image_id = tile_id;
          out.bbox = translated(*part, -ox, -oy);
          if (visibility < 1.0) out.area = src.area * visibility;
          instances.push_back(out);
        }
      }
    }
  }
  return Dataset(std::move(images), std::move(instances), ds.categories(), ds.provenance() + "#tiled");
}

}  // namespace detforge
