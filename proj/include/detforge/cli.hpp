#pragma once

#include <cstdio>
#include <deque>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "detforge/anchors.hpp"
#include "detforge/annotations.hpp"
#include "detforge/augment.hpp"
#include "detforge/config.hpp"
#include "detforge/errors.hpp"
#include "detforge/eval.hpp"
#include "detforge/losses.hpp"
#include "detforge/random.hpp"

namespace detforge::cli {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kValidationFailure = 1, kIoFailure = 2, kUsage = 64 };

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw IoError("sha256 failed");
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

namespace detail {

/// A command-line flag bound to a dotted config path.
struct Binding {
  enum class Kind { kInt, kReal, kString, kRealList, kIntList, kTrue, kFalse };
  std::string path;
  Kind kind = Kind::kString;
  CLI::Option* option = nullptr;
  std::string scalar;
  std::vector<std::string> list;
  bool flag = false;
};

class Bindings {
 public:
  void add(CLI::App* app, const std::string& name, const std::string& path, Binding::Kind kind,
           const std::string& help) {
    auto& b = items_.emplace_back();
    b.path = path;
    b.kind = kind;
    switch (kind) {
      case Binding::Kind::kRealList:
      case Binding::Kind::kIntList:
        b.option = app->add_option(name, b.list, help)->delimiter(',');
        break;
      case Binding::Kind::kTrue:
      case Binding::Kind::kFalse:
        b.option = app->add_flag(name, b.flag, help);
        break;
      default:
        b.option = app->add_option(name, b.scalar, help);
    }
    switch (kind) {
      case Binding::Kind::kInt: b.option->type_name("INT"); break;
      case Binding::Kind::kReal: b.option->type_name("FLOAT"); break;
      case Binding::Kind::kRealList: b.option->type_name("FLOAT[,FLOAT]"); break;
      case Binding::Kind::kIntList: b.option->type_name("INT[,INT]"); break;
      default: break;
    }
  }

  std::vector<std::pair<std::string, Json>> overrides() const {
    std::vector<std::pair<std::string, Json>> out;
    for (const auto& b : items_) {
      if (b.option->count() == 0) continue;
      try {
        switch (b.kind) {
          case Binding::Kind::kInt: out.emplace_back(b.path, parse_int(b.scalar)); break;
          case Binding::Kind::kReal: out.emplace_back(b.path, parse_real(b.scalar)); break;
          case Binding::Kind::kString: out.emplace_back(b.path, b.scalar); break;
          case Binding::Kind::kTrue: out.emplace_back(b.path, true); break;
          case Binding::Kind::kFalse: out.emplace_back(b.path, false); break;
          case Binding::Kind::kRealList: {
            Json arr = Json::array();
            for (const auto& s : b.list) arr.push_back(parse_real(s));
            out.emplace_back(b.path, std::move(arr));
            break;
          }
          case Binding::Kind::kIntList: {
            Json arr = Json::array();
            for (const auto& s : b.list) arr.push_back(parse_int(s));
            out.emplace_back(b.path, std::move(arr));
            break;
          }
        }
      } catch (const std::invalid_argument&) {
        throw ConfigError(b.path, "cannot parse value of " + b.option->get_name());
      } catch (const std::out_of_range&) {
        throw ConfigError(b.path, "value out of range for " + b.option->get_name());
      }
    }
    return out;
  }

 private:
  static Json parse_int(const std::string& s) {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  }
  static Json parse_real(const std::string& s) {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  }

  std::deque<Binding> items_;
};

struct Context {
  const Config& cfg;
  Json inputs = Json::array();

  /// Loads an input file, recording its content hash for the report.
  std::string read_input(const std::string& role, const std::string& config_path) {
    const auto path = cfg.get<std::string>(config_path);
    if (path.empty()) throw ConfigError(config_path, "required input path not set");
    std::string bytes = detforge::detail::read_file(path);
    inputs.push_back({{"role", role}, {"path", path}, {"sha256", sha256_hex(bytes)}});
    return bytes;
  }

  static Json parse(const std::string& bytes, const std::string& what) {
    try {
      return Json::parse(bytes);
    } catch (const nlohmann::json::parse_error& e) {
      throw IoError("malformed JSON in " + what + ": " + e.what());
    }
  }

  Dataset dataset() {
    const auto bytes = read_input("annotations", "paths.annotations");
    return parse_dataset(parse(bytes, "annotations"), cfg.get<std::string>("paths.annotations"));
  }
};

inline Json boxes_json(std::span<const BBox> boxes) {
  Json arr = Json::array();
  for (const auto& b : boxes) {
    const auto v = to_xywh(b);
    arr.push_back({v[0], v[1], v[2], v[3]});
  }
  return arr;
}

// -- subcommands -------------------------------------------------------------

inline Json run_stats(Context& ctx) {
  const Dataset ds = ctx.dataset();
  Json r = to_json(compute_stats(ds, ctx.cfg.area_thresholds()));
  r["clipped_instance_ids"] = ds.clipped_instance_ids();
  return r;
}

inline Json run_tile(Context& ctx) {
  const Dataset ds = ctx.dataset();
  const TileParams p = ctx.cfg.tile_params();
  const Dataset tiled = tile(ds, p);
  const auto out_path = ctx.cfg.get<std::string>("paths.tiled_annotations");
  if (!out_path.empty()) export_dataset(tiled, out_path);
  return {{"params", {{"tile_size", p.tile_size}, {"overlap", p.overlap}, {"min_visibility", p.min_visibility}}},
          {"source_images", ds.images().size()},
          {"source_instances", ds.instances().size()},
          {"tiles", tiled.images().size()},
          {"tiled_instances", tiled.instances().size()},
          {"tiled_annotations", out_path}};
}

inline Json run_cluster(Context& ctx) {
  const Dataset ds = ctx.dataset();
  const auto boxes = cluster_inputs(ds);
  ClusterOptions opt = ctx.cfg.cluster_options();
  if (ctx.cfg.get<bool>("cluster.sweep")) {
    const auto k_min = ctx.cfg.get<std::int64_t>("cluster.k_min");
    const auto k_max = ctx.cfg.get<std::int64_t>("cluster.k_max");
    if (k_min < 1 || k_max < k_min) throw ConfigError("cluster.k_min", "k range must satisfy 1 <= k_min <= k_max");
    Json pts = Json::array();
    for (const auto& p : sweep_k(boxes, std::size_t(k_min), std::size_t(k_max), opt))
      pts.push_back({{"k", p.k}, {"mean_iou", p.mean_iou}});
    return {{"boxes", boxes.size()}, {"sweep", std::move(pts)}};
  }
  Json r = to_json(cluster_anchor_sizes(boxes, opt));
  r["boxes"] = boxes.size();
  return r;
}

inline Json run_anchors(Context& ctx) {
  const AnchorSpec spec = ctx.cfg.anchor_spec();
  validate(spec);
  const int w = ctx.cfg.get<int>("image.width");
  const int h = ctx.cfg.get<int>("image.height");
  if (w <= 0 || h <= 0) throw ConfigError("image.width", "image size must be positive");
  const auto dims = fmap_dims_for(spec, w, h);
  const AnchorSet set = generate_anchors(spec, dims);
  Json levels = Json::array();
  for (std::size_t l = 0; l < set.levels.size(); ++l) {
    Json first = set.levels[l].empty() ? Json(nullptr) : boxes_json(std::span<const BBox>(&set.levels[l].front().box, 1))[0];
    levels.push_back({{"level", l},
                      {"stride", spec.strides[l]},
                      {"fmap", {dims[l].w, dims[l].h}},
                      {"count", set.levels[l].size()},
                      {"first_anchor", std::move(first)}});
  }
  return {{"levels", std::move(levels)},
          {"total", set.size()},
          {"effective_angles", effective_angles(spec.angles)}};
}

inline Json run_match(Context& ctx) {
  const Dataset ds = ctx.dataset();
  const AnchorSpec spec = ctx.cfg.anchor_spec();
  const MatchParams params = ctx.cfg.match_params();
  std::map<std::pair<int, int>, AnchorSet> cache;
  MatchReport total;
  for (const auto& im : ds.images()) {
    auto key = std::pair{im.width, im.height};
    auto it = cache.find(key);
    if (it == cache.end())
      it = cache.emplace(key, generate_anchors(spec, fmap_dims_for(spec, im.width, im.height))).first;
    std::vector<Instance> gts;
    for (std::size_t pos : ds.instances_in(im.id)) gts.push_back(ds.instances()[pos]);
    total.merge(match_anchors(it->second, gts, params));
  }
  return to_json(total);
}

inline Json run_eval(Context& ctx) {
  const Dataset ds = ctx.dataset();
  const auto bytes = ctx.read_input("detections", "paths.detections");
  const auto dets = parse_detections(Context::parse(bytes, "detections"));
  return to_json(coco_map(dets, ds, ctx.cfg.eval_params()));
}

inline Json run_augment(Context& ctx) {
  const Dataset ds = ctx.dataset();
  const int aug = ctx.cfg.get<int>("augment.aug");
  const auto seed = ctx.cfg.get<std::uint64_t>("augment.seed");

  std::map<std::int64_t, std::vector<TransformRecord>> recorded;
  const bool replaying = !ctx.cfg.get<std::string>("paths.records").empty();
  if (replaying) {
    std::istringstream lines(ctx.read_input("records", "paths.records"));
    std::string line;
    while (std::getline(lines, line)) {
      if (line.empty()) continue;
      const Json j = Context::parse(line, "records");
      if (!j.is_object() || !j.contains("image_id") || !j.contains("records"))
        throw ValidationError("record line needs image_id and records");
      auto& list = recorded[j["image_id"].get<std::int64_t>()];
      for (const auto& r : j["records"]) list.push_back(record_from_json(r));
    }
  }

  auto pipeline = make_pipeline(aug, seed, ctx.cfg.pipeline_options());
  Json images = Json::array();
  std::string jsonl;
  for (const auto& im : ds.images()) {
    std::vector<BBox> boxes;
    std::vector<std::int64_t> ids;
    for (std::size_t pos : ds.instances_in(im.id)) {
      boxes.push_back(ds.instances()[pos].bbox);
      ids.push_back(ds.instances()[pos].id);
    }
    const ImageGeom geom{im.width, im.height};
    AugResult r;
    if (replaying) {
      auto it = recorded.find(im.id);
      if (it == recorded.end()) throw DanglingReference(im.id, "no transform records for image");
      r = replay(it->second, boxes, geom);
      r.records = it->second;
    } else {
      r = pipeline(boxes, geom);
    }
    Json recs = Json::array();
    for (const auto& rec : r.records) recs.push_back(to_json(rec));
    std::vector<std::int64_t> kept_ids;
    for (std::size_t k : r.kept) kept_ids.push_back(ids[k]);
    jsonl += Json{{"image_id", im.id}, {"records", recs}}.dump() + "\n";
    images.push_back({{"image_id", im.id},
                      {"geom", {r.geom.width, r.geom.height}},
                      {"instance_ids", std::move(kept_ids)},
                      {"boxes", boxes_json(r.boxes)},
                      {"records", std::move(recs)}});
  }
  const auto out = ctx.cfg.get<std::string>("paths.records_out");
  if (!out.empty()) detforge::detail::write_file(out, jsonl);
  return {{"mode", replaying ? "replay" : "sample"}, {"images", std::move(images)}};
}

inline Json run_loss_check(Context& ctx) {
  const auto kind = ctx.cfg.get<std::string>("loss.kind");
  const double gamma = ctx.cfg.get<double>("loss.gamma");
  const auto seed = ctx.cfg.get<std::uint64_t>("loss.seed");
  const auto n = ctx.cfg.get<std::int64_t>("loss.n");
  const auto c = ctx.cfg.get<std::int64_t>("loss.c");
  const double step = ctx.cfg.get<double>("loss.step");
  const double beta = ctx.cfg.get<double>("loss.beta");
  if (n < 1 || c < 1) throw ConfigError("loss.n", "batch shape must be positive");

  Engine rng = make_engine(seed);
  double value = 0.0;
  double err = 0.0;
  if (kind == "smooth_l1") {
    std::vector<double> pred(std::size_t(n * c)), target(std::size_t(n * c));
    for (auto& v : pred) v = 4.0 * uniform01(rng) - 2.0;
    for (auto& v : target) v = 4.0 * uniform01(rng) - 2.0;
    auto fn = [&](std::span<const double> p) { return smooth_l1(p, target, beta); };
    value = fn(pred).value;
    err = grad_check(fn, pred, step);
  } else {
    LogitsBatch batch{std::size_t(n), std::size_t(c), {}, {}};
    for (std::int64_t i = 0; i < n * c; ++i) batch.values.push_back(6.0 * uniform01(rng) - 3.0);
    std::vector<std::int64_t> counts(std::size_t(c), 0);
    for (std::int64_t i = 0; i < n; ++i) {
      batch.targets.push_back(uniform_index(rng, std::uint64_t(c)));
      ++counts[batch.targets.back()];
    }
    std::function<LossOutput(const LogitsBatch&)> fn;
    if (kind == "ce") {
      fn = [](const LogitsBatch& b) { return cross_entropy(b); };
    } else if (kind == "wce") {
      fn = [w = class_weights(counts)](const LogitsBatch& b) { return weighted_cross_entropy(b, w); };
    } else if (kind == "focal") {
      fn = [gamma](const LogitsBatch& b) { return focal_loss(b, gamma); };
    } else {
      throw ConfigError("loss.kind", "expected ce, wce, focal or smooth_l1");
    }
    value = fn(batch).value;
    err = grad_check(fn, batch, step);
  }
  return {{"kind", kind}, {"loss", value}, {"grad_check_max_rel_err", err}, {"gamma", gamma}, {"seed", seed},
          {"n", n},       {"c", c},        {"step", step}};
}

// -- human-readable rendering ------------------------------------------------

inline std::string fmt_ap(double v) {
  if (v < 0.0) return "    -";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%5.1f", 100.0 * v);
  return buf;
}

inline std::string render_pretty(const std::string& command, const Json& result) {
  std::ostringstream os;
  if (command == "stats") {
    os << "category                       count   small  medium   large\n";
    for (const auto& c : result["categories"]) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%-28s %7zu %7zu %7zu %7zu\n", c["name"].get<std::string>().c_str(),
                    c["count"].get<std::size_t>(), c["small"].get<std::size_t>(), c["medium"].get<std::size_t>(),
                    c["large"].get<std::size_t>());
      os << buf;
    }
    os << "total instances: " << result["total_instances"] << "\n";
  } else if (command == "eval") {
    os << "   AP  AP50  AP75   APs   APm   APl\n";
    for (const char* k : {"ap", "ap50", "ap75", "ap_small", "ap_medium", "ap_large"})
      os << fmt_ap(result[k].get<double>()) << ' ';
    os << "\n";
    for (const auto& c : result["per_class_ap"])
      os << "  class " << c["category_id"] << ": " << fmt_ap(c["ap"].get<double>()) << "\n";
  } else {
    os << result.dump(2) << "\n";
  }
  return os.str();
}

}  // namespace detail

inline const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names{"stats", "tile",          "cluster",   "anchors",
                                              "match", "eval",          "augment-replay", "loss-check"};
  return names;
}

/// Parses argv, runs one subcommand and writes its report. Returns the
/// process exit code: 0 success, 1 validation error, 2 IO/parse error,
/// 64 usage error.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using Kind = detail::Binding::Kind;
  CLI::App app{"detforge: detection pipeline toolkit", "detforge"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  detail::Bindings flags;
  std::string config_path;
  bool pretty = false;

  std::map<std::string, CLI::App*> subs;
  for (const auto& name : subcommands()) {
    CLI::App* sub = app.add_subcommand(name);
    subs[name] = sub;
    sub->add_option("--config", config_path, "JSON config file");
    flags.add(sub, "--out", "paths.output", Kind::kString, "report destination (default stdout)");
    sub->add_flag("--pretty", pretty, "human-readable output");
    flags.add(sub, "--threads", "threads", Kind::kInt, "worker threads (env DETFORGE_THREADS)");
    if (name != "anchors" && name != "loss-check")
      flags.add(sub, "--ann", "paths.annotations", Kind::kString, "COCO-style annotation file");
    if (name == "stats" || name == "eval") {
      flags.add(sub, "--small-area", "areas.small_max", Kind::kReal, "upper area of the small bucket");
      flags.add(sub, "--medium-area", "areas.medium_max", Kind::kReal, "upper area of the medium bucket");
    }
  }
  auto* tile_cmd = subs["tile"];
  flags.add(tile_cmd, "--tile-size", "tile.tile_size", Kind::kInt, "tile side in pixels");
  flags.add(tile_cmd, "--overlap", "tile.overlap", Kind::kInt, "overlap between neighbouring tiles");
  flags.add(tile_cmd, "--min-visibility", "tile.min_visibility", Kind::kReal, "minimum kept fraction of a box");
  flags.add(tile_cmd, "--tiled-ann", "paths.tiled_annotations", Kind::kString, "write the tiled dataset here");

  auto* cluster_cmd = subs["cluster"];
  flags.add(cluster_cmd, "--k", "cluster.k", Kind::kInt, "number of clusters");
  flags.add(cluster_cmd, "--sweep", "cluster.sweep", Kind::kTrue, "sweep k over [k-min, k-max]");
  flags.add(cluster_cmd, "--k-min", "cluster.k_min", Kind::kInt, "sweep start");
  flags.add(cluster_cmd, "--k-max", "cluster.k_max", Kind::kInt, "sweep end");
  flags.add(cluster_cmd, "--seed", "cluster.seed", Kind::kInt, "base seed");
  flags.add(cluster_cmd, "--restarts", "cluster.restarts", Kind::kInt, "seeded initialisations");
  flags.add(cluster_cmd, "--max-iters", "cluster.max_iters", Kind::kInt, "iteration cap per run");
  flags.add(cluster_cmd, "--init", "cluster.init", Kind::kString, "kmeans++ or random");

  for (const char* name : {"anchors", "match"}) {
    auto* sub = subs[name];
    flags.add(sub, "--sizes", "anchors.sizes", Kind::kRealList, "anchor sizes (sqrt of area)");
    flags.add(sub, "--shared-sizes", "anchors.sizes_per_level", Kind::kFalse, "use every size on every level");
    flags.add(sub, "--ratios", "anchors.aspect_ratios", Kind::kRealList, "aspect ratios h/w");
    flags.add(sub, "--angles", "anchors.angles", Kind::kRealList, "angles, multiples of 90");
    flags.add(sub, "--strides", "anchors.strides", Kind::kIntList, "stride per level");
    flags.add(sub, "--offset", "anchors.offset", Kind::kReal, "anchor centre offset within a cell");
  }
  flags.add(subs["anchors"], "--width", "image.width", Kind::kInt, "image width");
  flags.add(subs["anchors"], "--height", "image.height", Kind::kInt, "image height");
  auto* match_cmd = subs["match"];
  flags.add(match_cmd, "--pos-iou", "match.pos_iou", Kind::kReal, "positive threshold");
  flags.add(match_cmd, "--neg-iou", "match.neg_iou", Kind::kReal, "negative threshold");
  flags.add(match_cmd, "--no-force-match", "match.force_match", Kind::kFalse, "do not force a best anchor per GT");

  auto* eval_cmd = subs["eval"];
  flags.add(eval_cmd, "--dets", "paths.detections", Kind::kString, "COCO results file");
  flags.add(eval_cmd, "--max-dets", "eval.max_dets", Kind::kInt, "detections kept per image and class");

  auto* aug_cmd = subs["augment-replay"];
  flags.add(aug_cmd, "--aug", "augment.aug", Kind::kInt, "augmentation recipe 1, 2 or 3");
  flags.add(aug_cmd, "--seed", "augment.seed", Kind::kInt, "seed");
  flags.add(aug_cmd, "--min-visibility", "augment.min_visibility", Kind::kReal, "crop visibility threshold");
  flags.add(aug_cmd, "--records", "paths.records", Kind::kString, "replay these JSON-lines records");
  flags.add(aug_cmd, "--records-out", "paths.records_out", Kind::kString, "write sampled records here");

  auto* loss_cmd = subs["loss-check"];
  flags.add(loss_cmd, "--loss", "loss.kind", Kind::kString, "ce, wce, focal or smooth_l1");
  flags.add(loss_cmd, "--gamma", "loss.gamma", Kind::kReal, "focal gamma");
  flags.add(loss_cmd, "--seed", "loss.seed", Kind::kInt, "seed for the random batch");
  flags.add(loss_cmd, "--n", "loss.n", Kind::kInt, "samples");
  flags.add(loss_cmd, "--c", "loss.c", Kind::kInt, "classes");
  flags.add(loss_cmd, "--step", "loss.step", Kind::kReal, "finite-difference step");
  flags.add(loss_cmd, "--beta", "loss.beta", Kind::kReal, "smooth L1 beta");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // prints help/version to `out`, errors to `err`
    return app.exit(e, out, err) == 0 ? kOk : kUsage;
  }

  std::string command;
  for (const auto& [name, sub] : subs)
    if (sub->parsed()) command = name;

  try {
    const Config cfg =
        load_config(config_path.empty() ? std::nullopt : std::optional<std::filesystem::path>(config_path),
                    flags.overrides());
    detail::Context ctx{cfg};
    Json result;
    if (command == "stats") result = detail::run_stats(ctx);
    else if (command == "tile") result = detail::run_tile(ctx);
    else if (command == "cluster") result = detail::run_cluster(ctx);
    else if (command == "anchors") result = detail::run_anchors(ctx);
    else if (command == "match") result = detail::run_match(ctx);
    else if (command == "eval") result = detail::run_eval(ctx);
    else if (command == "augment-replay") result = detail::run_augment(ctx);
    else result = detail::run_loss_check(ctx);

    const auto out_path = cfg.get<std::string>("paths.output");
    std::string text;
    if (pretty) {
      text = detail::render_pretty(command, result);
    } else {
      const Json report{{"tool", "detforge"},
                        {"version", kVersion},
                        {"command", command},
                        {"config", cfg.echo()},
                        {"inputs", ctx.inputs},
                        {"result", std::move(result)}};
      text = report.dump(2) + "\n";
    }
    if (out_path.empty()) {
      out << text;
    } else {
      detforge::detail::write_file(out_path, text);
    }
    return kOk;
  } catch (const ValidationError& e) {
    err << "validation error: " << e.what() << "\n";
    return kValidationFailure;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return kIoFailure;
  } catch (const nlohmann::json::exception& e) {
    err << "validation error: " << e.what() << "\n";
    return kValidationFailure;
  }
}

}  // namespace detforge::cli
