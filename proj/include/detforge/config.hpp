#pragma once

#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "detforge/anchors.hpp"
#include "detforge/annotations.hpp"
#include "detforge/augment.hpp"
#include "detforge/errors.hpp"
#include "detforge/eval.hpp"

namespace detforge {

/// Resolved settings for every subcommand. `values` mirrors the layout of
/// default_config_values(); `provenance` maps each dotted leaf path to
/// "default", "file", "flag" or "env".
struct Config {
  Json values;
  std::map<std::string, std::string> provenance;

  const Json& at(const std::string& dotted) const {
    const Json* node = &values;
    std::size_t start = 0;
    while (true) {
      const auto dot = dotted.find('.', start);
      node = &node->at(dotted.substr(start, dot - start));
      if (dot == std::string::npos) return *node;
      start = dot + 1;
    }
  }
  template <class T>
  T get(const std::string& dotted) const {
    return at(dotted).get<T>();
  }

  AnchorSpec anchor_spec() const {
    AnchorSpec s;
    s.sizes = get<std::vector<double>>("anchors.sizes");
    s.sizes_per_level = get<bool>("anchors.sizes_per_level");
    s.aspect_ratios = get<std::vector<double>>("anchors.aspect_ratios");
    s.angles = get<std::vector<double>>("anchors.angles");
    s.strides = get<std::vector<int>>("anchors.strides");
    s.offset = get<double>("anchors.offset");
    return s;
  }

  ClusterOptions cluster_options() const {
    ClusterOptions o;
    const auto k = get<std::int64_t>("cluster.k");
    if (k < 1) throw ConfigError("cluster.k", "must be at least 1");
    o.k = std::size_t(k);
    o.seed = get<std::uint64_t>("cluster.seed");
    o.restarts = get<int>("cluster.restarts");
    o.max_iters = get<int>("cluster.max_iters");
    const auto init = get<std::string>("cluster.init");
    if (init == "kmeans++") {
      o.init = ClusterInit::kKMeansPlusPlus;
    } else if (init == "random") {
      o.init = ClusterInit::kRandom;
    } else {
      throw ConfigError("cluster.init", "expected 'kmeans++' or 'random'");
    }
    o.threads = threads();
    return o;
  }

  MatchParams match_params() const {
    return {get<double>("match.pos_iou"), get<double>("match.neg_iou"), get<bool>("match.force_match")};
  }

  AreaThresholds area_thresholds() const {
    return {get<double>("areas.small_max"), get<double>("areas.medium_max")};
  }

  EvalParams eval_params() const {
    EvalParams p;
    const auto md = get<std::int64_t>("eval.max_dets");
    if (md < 1) throw ConfigError("eval.max_dets", "must be at least 1");
    p.max_dets = std::size_t(md);
    p.areas = area_thresholds();
    return p;
  }

  TileParams tile_params() const {
    return {get<int>("tile.tile_size"), get<int>("tile.overlap"), get<double>("tile.min_visibility")};
  }

  PipelineOptions pipeline_options() const {
    PipelineOptions o;
    o.min_visibility = get<double>("augment.min_visibility");
    return o;
  }

  unsigned threads() const {
    const auto t = get<std::int64_t>("threads");
    if (t < 1) throw ConfigError("threads", "must be at least 1");
    return unsigned(t);
  }

  /// The config as echoed into reports. Thread count is left out: it never
  /// changes results, and reports must not differ between thread counts.
  Json echo() const {
    Json v = values;
    v.erase("threads");
    auto prov = provenance;
    prov.erase("threads");
    return {{"values", std::move(v)}, {"provenance", std::move(prov)}};
  }
};

inline Json default_config_values() {
  const AnchorSpec anchors;
  const EvalParams eval;
  const TileParams tile;
  const PipelineOptions aug;
  return {
      {"paths",
       {{"annotations", ""}, {"detections", ""}, {"output", ""}, {"tiled_annotations", ""}, {"records", ""}, {"records_out", ""}}},
      {"anchors", to_json(anchors)},
      {"image", {{"width", 800}, {"height", 800}}},
      {"cluster",
       {{"k", 4}, {"sweep", false}, {"k_min", 2}, {"k_max", 8}, {"seed", 0}, {"restarts", 10}, {"max_iters", 300},
        {"init", "kmeans++"}}},
      {"match", {{"pos_iou", 0.7}, {"neg_iou", 0.3}, {"force_match", true}}},
      {"areas", {{"small_max", eval.areas.small_max}, {"medium_max", eval.areas.medium_max}}},
      {"eval", {{"max_dets", eval.max_dets}}},
      {"tile", {{"tile_size", tile.tile_size}, {"overlap", tile.overlap}, {"min_visibility", tile.min_visibility}}},
      {"augment", {{"aug", 1}, {"seed", 0}, {"min_visibility", aug.min_visibility}}},
      {"loss", {{"kind", "focal"}, {"gamma", 2.0}, {"seed", 0}, {"n", 8}, {"c", 4}, {"step", 1e-5}, {"beta", 1.0}}},
      {"threads", 1},
  };
}

namespace detail {

inline bool is_integral(const Json& j) { return j.is_number_integer() || j.is_number_unsigned(); }

/// True when `v` may replace a default of the same shape as `def`.
inline bool same_kind(const Json& def, const Json& v) {
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_string()) return v.is_string();
  if (is_integral(def)) return is_integral(v);
  if (def.is_number_float()) return v.is_number();
  if (def.is_array()) {
    if (!v.is_array()) return false;
    if (def.empty()) return true;
    for (const auto& e : v)
      if (!same_kind(def.front(), e)) return false;
    return true;
  }
  return false;
}

/// `v` stored with the numeric representation of `def` (floats stay floats).
inline Json normalized(const Json& def, const Json& v) {
  if (def.is_number_float()) return Json(v.get<double>());
  if (def.is_array() && !def.empty() && def.front().is_number_float()) {
    Json out = Json::array();
    for (const auto& e : v) out.push_back(e.get<double>());
    return out;
  }
  return v;
}

inline void collect_leaves(const Json& node, const std::string& prefix, const std::string& origin,
                           std::map<std::string, std::string>& prov) {
  if (node.is_object()) {
    for (const auto& [k, v] : node.items()) collect_leaves(v, prefix.empty() ? k : prefix + "." + k, origin, prov);
  } else {
    prov[prefix] = origin;
  }
}

inline void merge_checked(Json& target, const Json& src, const std::string& prefix, const std::string& origin,
                          std::map<std::string, std::string>& prov) {
  if (!src.is_object()) throw ConfigError(prefix.empty() ? "<root>" : prefix, "expected an object");
  for (const auto& [k, v] : src.items()) {
    const std::string path = prefix.empty() ? k : prefix + "." + k;
    auto it = target.find(k);
    if (it == target.end()) throw ConfigError(path, "unknown key");
    if (it->is_object()) {
      merge_checked(*it, v, path, origin, prov);
      continue;
    }
    if (!same_kind(*it, v)) throw ConfigError(path, "type mismatch");
    *it = normalized(*it, v);
    prov[path] = origin;
  }
}

}  // namespace detail

/// Defaults, then the config file (if any), then `overrides` (dotted path ->
/// value, highest precedence). DETFORGE_THREADS fills `threads` when neither
/// file nor flag set it.
inline Config load_config(const std::optional<std::filesystem::path>& file,
                          const std::vector<std::pair<std::string, Json>>& overrides = {}) {
  Config cfg;
  cfg.values = default_config_values();
  detail::collect_leaves(cfg.values, "", "default", cfg.provenance);

  if (file) {
    const Json doc = detail::parse_json_file(*file);
    detail::merge_checked(cfg.values, doc, "", "file", cfg.provenance);
  }
  if (cfg.provenance["threads"] == "default") {
    if (const char* env = std::getenv("DETFORGE_THREADS"); env && *env) {
      char* end = nullptr;
      const long t = std::strtol(env, &end, 10);
      if (*end != '\0' || t < 1) throw ConfigError("DETFORGE_THREADS", "expected a positive integer");
      cfg.values["threads"] = t;
      cfg.provenance["threads"] = "env";
    }
  }
  for (const auto& [path, value] : overrides) {
    Json nested = value;
    std::string rest = path;
    for (auto dot = rest.rfind('.'); dot != std::string::npos; dot = rest.rfind('.')) {
      nested = Json{{rest.substr(dot + 1), std::move(nested)}};
      rest.resize(dot);
    }
    detail::merge_checked(cfg.values, Json{{rest, std::move(nested)}}, "", "flag", cfg.provenance);
  }
  return cfg;
}

}  // namespace detforge
