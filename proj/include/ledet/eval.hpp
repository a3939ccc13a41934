#pragma once

// COCO-style detection metrics, proposal recall and the generalized
// few-shot report with base forgetting.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <vector>

#include "json.hpp"
#include "ledet/geometry.hpp"

namespace ledet {

struct GroundTruth {
  int image_id = 0;
  int class_id = 0;
  Box box;
};

struct Detection {
  int image_id = 0;
  int class_id = 0;
  Box box;
  double score = 0.0;
};

/// 0.50, 0.55, ..., 0.95.
inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

namespace detail {

/// Greedy matching of score-sorted detections (one image, one class): each
/// detection takes the unmatched GT with the highest IoU >= thr.
inline std::vector<char> greedy_match(const std::vector<const Detection*>& dets, const std::vector<const GroundTruth*>& gts,
                                      double thr) {
  std::vector<char> tp(dets.size(), 0);
  std::vector<char> used(gts.size(), 0);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    double best = thr;
    int arg = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g]) continue;
      const double v = iou(dets[d]->box, gts[g]->box);
      if (v >= best) {
        if (arg < 0 || v > best) arg = static_cast<int>(g);
        best = v;
      }
    }
    if (arg >= 0) {
      used[arg] = 1;
      tp[d] = 1;
    }
  }
  return tp;
}

struct ScoredFlag {
  double score;
  char tp;
};

/// 101-point interpolated AP from score-tagged TP flags over `n_gt` objects.
inline double interpolated_ap(std::vector<ScoredFlag> flags, std::size_t n_gt) {
  if (n_gt == 0) return 0.0;
  std::stable_sort(flags.begin(), flags.end(), [](const ScoredFlag& a, const ScoredFlag& b) { return a.score > b.score; });
  std::vector<double> recall;
  std::vector<double> precision;
  double tp = 0.0;
  double fp = 0.0;
  for (const auto& f : flags) {
    (f.tp ? tp : fp) += 1.0;
    recall.push_back(tp / static_cast<double>(n_gt));
    precision.push_back(tp / (tp + fp));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double target = r / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), target - 1e-12);
    if (it != recall.end()) sum += precision[it - recall.begin()];
  }
  return sum / 101.0;
}

}  // namespace detail

struct ClassMetrics {
  double ap = 0.0;     // mean over thresholds
  double ap50 = 0.0;   // at threshold 0.5 when present in the list
  double recall = 0.0; // final recall, mean over thresholds
};

/// Per-class metrics for every class with at least one GT box. Classes with
/// detections but no GT are left out.
inline std::map<int, ClassMetrics> evaluate_detections(const std::vector<Detection>& detections,
                                                       const std::vector<GroundTruth>& ground_truth,
                                                       const std::vector<double>& thresholds = coco_iou_thresholds()) {
  if (thresholds.empty()) throw std::invalid_argument("evaluate_detections: no IoU thresholds");
  std::map<int, std::map<int, std::vector<const GroundTruth*>>> gt;  // class -> image -> boxes
  for (const auto& g : ground_truth) gt[g.class_id][g.image_id].push_back(&g);
  std::map<int, std::map<int, std::vector<const Detection*>>> dt;
  for (const auto& d : detections) dt[d.class_id][d.image_id].push_back(&d);
  std::map<int, ClassMetrics> out;
  for (const auto& [cls, per_image] : gt) {
    std::size_t n_gt = 0;
    for (const auto& [img, list] : per_image) n_gt += list.size();
    ClassMetrics m;
    for (double thr : thresholds) {
      std::vector<detail::ScoredFlag> flags;
      double matched = 0.0;
      const auto dit = dt.find(cls);
      if (dit != dt.end()) {
        for (auto [img, dets] : dit->second) {
          std::stable_sort(dets.begin(), dets.end(), [](const Detection* a, const Detection* b) { return a->score > b->score; });
          static const std::vector<const GroundTruth*> none;
          const auto git = per_image.find(img);
          const auto tp = detail::greedy_match(dets, git == per_image.end() ? none : git->second, thr);
          for (std::size_t k = 0; k < dets.size(); ++k) {
            flags.push_back({dets[k]->score, tp[k]});
            matched += tp[k];
          }
        }
      }
      const double ap = detail::interpolated_ap(std::move(flags), n_gt);
      m.ap += ap / static_cast<double>(thresholds.size());
      m.recall += matched / static_cast<double>(n_gt) / static_cast<double>(thresholds.size());
      if (std::abs(thr - 0.5) < 1e-9) {
        m.ap50 = ap;
      }
    }
    out[cls] = m;
  }
  return out;
}

/// Per-class AP averaged over `thresholds` (classes without GT excluded).
inline std::map<int, double> average_precision(const std::vector<Detection>& detections,
                                               const std::vector<GroundTruth>& ground_truth,
                                               const std::vector<double>& thresholds = coco_iou_thresholds()) {
  std::map<int, double> out;
  for (const auto& [c, m] : evaluate_detections(detections, ground_truth, thresholds)) out[c] = m.ap;
  return out;
}

inline double mean_over(const std::map<int, double>& per_class, const std::vector<int>& classes) {
  double s = 0.0;
  int n = 0;
  for (int c : classes) {
    const auto it = per_class.find(c);
    if (it == per_class.end()) continue;
    s += it->second;
    ++n;
  }
  return n == 0 ? std::nan("") : s / n;
}

struct ScoredProposal {
  int image_id = 0;
  Box box;
  double score = 0.0;
};

/// Class-agnostic recall of the top-p proposals per image, averaged over the
/// IoU thresholds. Images without GT contribute nothing; nullopt when there
/// is no GT at all.
inline std::optional<double> proposal_recall_at(const std::vector<ScoredProposal>& proposals,
                                                const std::vector<GroundTruth>& ground_truth, std::size_t p,
                                                const std::vector<double>& thresholds = coco_iou_thresholds()) {
  if (ground_truth.empty()) return std::nullopt;
  std::map<int, std::vector<const Detection*>> per_image;
  std::vector<Detection> as_dets;
  as_dets.reserve(proposals.size());
  for (const auto& q : proposals) as_dets.push_back({q.image_id, 0, q.box, q.score});
  for (const auto& d : as_dets) per_image[d.image_id].push_back(&d);
  std::map<int, std::vector<const GroundTruth*>> gts;
  for (const auto& g : ground_truth) gts[g.image_id].push_back(&g);
  double acc = 0.0;
  for (double thr : thresholds) {
    double matched = 0.0;
    for (const auto& [img, glist] : gts) {
      auto it = per_image.find(img);
      if (it == per_image.end()) continue;
      auto dets = it->second;
      std::stable_sort(dets.begin(), dets.end(), [](const Detection* a, const Detection* b) { return a->score > b->score; });
      if (dets.size() > p) dets.resize(p);
      for (char t : detail::greedy_match(dets, glist, thr)) matched += t;
    }
    acc += matched / static_cast<double>(ground_truth.size());
  }
  return acc / static_cast<double>(thresholds.size());
}

/// 100 * (reference - current) / reference.
inline double forgetting_pct(double base_ap_reference, double base_ap_current) {
  if (!(base_ap_reference > 0.0)) throw std::invalid_argument("forgetting_pct: reference AP must be positive");
  return 100.0 * (base_ap_reference - base_ap_current) / base_ap_reference;
}

inline double round_to(double v, int decimals) {
  const double s = std::pow(10.0, decimals);
  return std::round(v * s) / s;
}

struct EvalReport {
  std::map<int, double> per_class_ap;
  std::map<int, double> per_class_ap50;
  std::map<int, double> per_class_recall;
  std::vector<int> base_classes;
  std::vector<int> novel_classes;
  double base_ap = std::nan("");
  double novel_ap = std::nan("");
  double overall_ap = std::nan("");
  double base_ap50 = std::nan("");
  double novel_ap50 = std::nan("");
  double base_ar = std::nan("");  // detection recall, mean over base classes
  double novel_ar = std::nan("");
  std::map<int, double> proposal_ar;  // p -> AR@p
  std::optional<double> base_ap_pretrain;
  std::optional<double> forgetting;

  nlohmann::ordered_json to_json() const {
    auto num = [](double v) -> nlohmann::ordered_json { return std::isfinite(v) ? nlohmann::ordered_json(v) : nullptr; };
    auto per_class = [&](const std::map<int, double>& m) {
      nlohmann::ordered_json j = nlohmann::ordered_json::object();
      for (const auto& [c, v] : m) j[std::to_string(c)] = num(v);
      return j;
    };
    nlohmann::ordered_json j;
    j["base_classes"] = base_classes;
    j["novel_classes"] = novel_classes;
    j["base_AP"] = num(base_ap);
    j["novel_AP"] = num(novel_ap);
    j["overall_AP"] = num(overall_ap);
    j["base_AP50"] = num(base_ap50);
    j["novel_AP50"] = num(novel_ap50);
    j["base_AR"] = num(base_ar);
    j["novel_AR"] = num(novel_ar);
    nlohmann::ordered_json ar = nlohmann::ordered_json::object();
    for (const auto& [p, v] : proposal_ar) ar["AR@" + std::to_string(p)] = num(v);
    j["proposal_AR"] = ar;
    j["base_AP_pretrain"] = base_ap_pretrain ? num(*base_ap_pretrain) : nullptr;
    j["forgetting_pct"] = forgetting ? num(*forgetting) : nullptr;
    j["per_class_AP"] = per_class(per_class_ap);
    j["per_class_AP50"] = per_class(per_class_ap50);
    j["per_class_AR"] = per_class(per_class_recall);
    return j;
  }
};

/// Generalized few-shot report over the split's base and novel classes.
/// Detections for classes outside the split are an error.
inline EvalReport generalized_report(const std::vector<Detection>& detections, const std::vector<GroundTruth>& ground_truth,
                                     const std::vector<int>& base_classes, const std::vector<int>& novel_classes,
                                     std::optional<double> base_ap_pretrain = std::nullopt) {
  std::set<int> known(base_classes.begin(), base_classes.end());
  known.insert(novel_classes.begin(), novel_classes.end());
  for (const auto& d : detections) {
    if (!known.count(d.class_id)) throw std::invalid_argument("detection class " + std::to_string(d.class_id) + " not in split");
  }
  std::vector<GroundTruth> gt;
  for (const auto& g : ground_truth) {
    if (known.count(g.class_id)) gt.push_back(g);
  }
  EvalReport r;
  r.base_classes = base_classes;
  r.novel_classes = novel_classes;
  for (const auto& [c, m] : evaluate_detections(detections, gt)) {
    r.per_class_ap[c] = m.ap;
    r.per_class_ap50[c] = m.ap50;
    r.per_class_recall[c] = m.recall;
  }
  std::vector<int> all(known.begin(), known.end());
  r.base_ap = mean_over(r.per_class_ap, base_classes);
  r.novel_ap = mean_over(r.per_class_ap, novel_classes);
  r.overall_ap = mean_over(r.per_class_ap, all);
  r.base_ap50 = mean_over(r.per_class_ap50, base_classes);
  r.novel_ap50 = mean_over(r.per_class_ap50, novel_classes);
  r.base_ar = mean_over(r.per_class_recall, base_classes);
  r.novel_ar = mean_over(r.per_class_recall, novel_classes);
  if (base_ap_pretrain) {
    r.base_ap_pretrain = base_ap_pretrain;
    if (std::isfinite(r.base_ap)) r.forgetting = forgetting_pct(*base_ap_pretrain, r.base_ap);
  }
  return r;
}

}  // namespace ledet
