#pragma once

// Declarative experiment configuration: built-in profiles, strict merging of
// user files and `key.path=value` overrides (unknown keys are rejected).

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace ledet {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Config = nlohmann::ordered_json;

inline const std::vector<std::string>& config_sections() {
  static const std::vector<std::string> s = {"dataset", "split", "augment", "detector", "semisup",
                                             "entreg",  "schedule", "eval", "output_dir"};
  return s;
}

namespace detail {

inline Config stage_schedule(int lb, int ub, double lr, std::vector<int> milestones, int iters, int warmup) {
  return {{"labeled_batch", lb},       {"unlabeled_batch", ub}, {"lr", lr},
          {"milestones", milestones},  {"iterations", iters},   {"warmup_iters", warmup}};
}

}  // namespace detail

/// Minutes-scale synthetic benchmark: 64x64 shape scenes, 6 base / 2 novel.
inline Config desk_profile() {
  Config c;
  c["dataset"] = {{"kind", "synthetic"},
                  {"train_images", 600},
                  {"test_images", 200},
                  {"canvas", 64},
                  {"min_objects", 1},
                  {"max_objects", 4},
                  {"min_size", 10},
                  {"max_size", 22},
                  {"noise", 0.04},
                  {"seed", 7},
                  {"train_json", ""},
                  {"test_json", ""},
                  {"image_root", ""}};
  c["split"] = {{"base_classes", {1, 2, 3, 4, 5, 6}},
                {"novel_classes", {7, 8}},
                {"k", 10},
                {"labeled_percent", 10.0},
                {"seed", 1}};
  c["augment"] = {{"train_short_edge", {56, 72}},
                  {"test_short_edge", 64},
                  {"flip_prob", 0.5},
                  {"color_prob", 1.0},
                  {"geometric_prob", 1.0},
                  {"translate", 0.1},
                  {"shear_deg", 30.0},
                  {"rotate_deg", 30.0},
                  {"cutout_min", 1},
                  {"cutout_max", 5},
                  {"cutout_size", 0.2}};
  c["detector"] = {{"stage_channels", {8, 16, 24, 32}},
                   {"neck_channels", 16},
                   {"fine_anchor_sizes", {10.0, 16.0}},
                   {"coarse_anchor_sizes", {24.0, 36.0}},
                   {"anchor_ratios", {0.5, 1.0, 2.0}},
                   {"roi_size", 4},
                   {"roi_sampling", 2},
                   {"level_split", 20.0},
                   {"cls_hidden", 48},
                   {"reg_hidden", 32},
                   {"rpn_batch", 64},
                   {"roi_batch", 64},
                   {"roi_fg_fraction", 0.25},
                   {"train_proposals", 100},
                   {"test_proposals", 300},
                   {"score_threshold", 0.05},
                   {"nms_iou", 0.5},
                   {"max_detections", 100}};
  c["semisup"] = {{"enabled", true},
                  {"score_threshold", 0.9},
                  {"n_jitter", 10},
                  {"jitter_scale", 0.06},
                  {"variance_threshold", 0.02},
                  {"ema_momentum", 0.99},
                  {"unsup_warmup", 0},
                  {"in_novel_head", true},
                  {"in_balanced_finetune", false}};
  c["entreg"] = {{"enabled", true},
                 {"measure", "cross_entropy"},
                 {"overlap", "iou"},
                 {"beta_multiplier", 2.0},
                 {"num_proposals", 64},
                 {"in_novel_head", true},
                 {"in_balanced_finetune", false}};
  c["schedule"] = {{"momentum", 0.9},
                   {"weight_decay", 1e-4},
                   {"novel_init_std", 0.01},
                   {"novel_head_includes_base", false},
                   {"finetune_trainable", {"roi_classifier"}},
                   {"pretrain", detail::stage_schedule(2, 4, 0.02, {1200}, 1500, 50)},
                   {"novel_head", detail::stage_schedule(2, 4, 0.01, {}, 300, 0)},
                   {"balanced", detail::stage_schedule(4, 0, 0.01, {}, 200, 0)}};
  c["eval"] = {{"ar_limits", {100, 300, 1000}}, {"max_proposals", 1000}, {"base_ap_pretrain", nullptr}};
  c["output_dir"] = "runs/desk";
  return c;
}

/// Recorded full-scale protocol (COCO 60/20, ~10% labels, 8+32 images per batch).
inline Config coco_profile() {
  Config c = desk_profile();
  c["dataset"]["kind"] = "coco";
  c["dataset"]["train_json"] = "annotations/instances_train2017.json";
  c["dataset"]["test_json"] = "annotations/instances_val2017.json";
  c["dataset"]["image_root"] = "images";
  std::vector<int> base;
  const std::vector<int> novel = {1, 2, 3, 4, 5, 6, 7, 9, 16, 17, 18, 19, 20, 21, 44, 62, 63, 64, 67, 72};
  const std::vector<int> all = {1,  2,  3,  4,  5,  6,  7,  8,  9,  10, 11, 13, 14, 15, 16, 17, 18, 19, 20, 21,
                                22, 23, 24, 25, 27, 28, 31, 32, 33, 34, 35, 36, 37, 38, 39, 40, 41, 42, 43, 44,
                                46, 47, 48, 49, 50, 51, 52, 53, 54, 55, 56, 57, 58, 59, 60, 61, 62, 63, 64, 65,
                                67, 70, 72, 73, 74, 75, 76, 77, 78, 79, 80, 81, 82, 84, 85, 86, 87, 88, 89, 90};
  for (int id : all) {
    if (std::find(novel.begin(), novel.end(), id) == novel.end()) base.push_back(id);
  }
  c["split"]["base_classes"] = base;
  c["split"]["novel_classes"] = novel;
  c["augment"]["train_short_edge"] = {400, 1200};
  c["augment"]["test_short_edge"] = 800;
  c["detector"]["fine_anchor_sizes"] = {32.0, 64.0};
  c["detector"]["coarse_anchor_sizes"] = {128.0, 256.0};
  c["detector"]["rpn_batch"] = 256;
  c["detector"]["roi_batch"] = 512;
  c["detector"]["train_proposals"] = 1000;
  c["detector"]["test_proposals"] = 1000;
  c["detector"]["level_split"] = 96.0;
  c["semisup"]["ema_momentum"] = 0.999;
  c["entreg"]["num_proposals"] = 512;
  c["schedule"]["pretrain"] = detail::stage_schedule(8, 32, 0.01, {120000, 160000}, 180000, 500);
  c["schedule"]["novel_head"] = detail::stage_schedule(8, 32, 0.01, {}, 10000, 0);
  c["schedule"]["balanced"] = detail::stage_schedule(16, 0, 0.01, {}, 10000, 0);
  c["output_dir"] = "runs/coco";
  return c;
}

inline Config profile(const std::string& name) {
  if (name == "desk") return desk_profile();
  if (name == "coco") return coco_profile();
  throw ConfigError("unknown profile '" + name + "' (expected desk or coco)");
}

namespace detail {

inline const char* kind_name(const Config& v) {
  if (v.is_null()) return "null";
  if (v.is_boolean()) return "boolean";
  if (v.is_number()) return "number";
  if (v.is_string()) return "string";
  if (v.is_array()) return "array";
  return "object";
}

inline bool compatible(const Config& def, const Config& v) {
  if (def.is_null()) return true;  // optional slots
  if (def.is_number()) return v.is_number();
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_string()) return v.is_string();
  if (def.is_array()) return v.is_array();
  return v.is_object();
}

inline void merge_into(Config& base, const Config& patch, const std::string& path) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    Config& slot = base[it.key()];
    if (slot.is_object() && it.value().is_object()) {
      merge_into(slot, it.value(), key);
      continue;
    }
    if (!compatible(slot, it.value())) {
      throw ConfigError("config key '" + key + "' expects " + kind_name(slot) + ", got " + kind_name(it.value()));
    }
    slot = it.value();
  }
}

}  // namespace detail

/// Merges `patch` into `base`; every patch key must already exist in `base`.
inline void merge_config(Config& base, const Config& patch) {
  if (!patch.is_object()) throw ConfigError("config document must be an object");
  detail::merge_into(base, patch, "");
}

/// Applies `a.b.c=value`; value is parsed as JSON, falling back to a string.
inline void apply_override(Config& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Config value = Config::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  Config patch = value;
  std::vector<std::string> parts;
  std::stringstream ss(path);
  for (std::string p; std::getline(ss, p, '.');) {
    if (p.empty()) throw ConfigError("override key '" + path + "' has an empty component");
    parts.push_back(p);
  }
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = Config{{*it, patch}};
  merge_config(cfg, patch);
}

/// Profile (from the file's optional "profile" key or `default_profile`),
/// then the file, then overrides.
inline Config resolve_config(const std::string& path, const std::vector<std::string>& overrides,
                             const std::string& default_profile = "desk") {
  Config file = Config::object();
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config " + path);
    try {
      file = Config::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config " + path + " is not valid JSON: " + e.what());
    }
    if (!file.is_object()) throw ConfigError("config " + path + " must hold an object");
  }
  std::string prof = default_profile;
  if (file.contains("profile")) {
    if (!file["profile"].is_string()) throw ConfigError("config key 'profile' expects string");
    prof = file["profile"].get<std::string>();
    file.erase("profile");
  }
  Config cfg = profile(prof);
  merge_config(cfg, file);
  for (const auto& o : overrides) apply_override(cfg, o);
  return cfg;
}

/// Typed read with the key path in the error message.
template <class T>
T get(const Config& cfg, const std::string& path) {
  const Config* node = &cfg;
  std::stringstream ss(path);
  for (std::string p; std::getline(ss, p, '.');) {
    if (!node->is_object() || !node->contains(p)) throw ConfigError("missing config key '" + path + "'");
    node = &(*node)[p];
  }
  try {
    return node->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + path + "' has the wrong type (" + detail::kind_name(*node) + ")");
  }
}

}  // namespace ledet
