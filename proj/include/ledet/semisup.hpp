#pragma once

// Mean-teacher machinery: EMA teacher, confidence-thresholded pseudo labels
// with jitter-based box refinement, and the soft-weighted unsupervised RoI loss.

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "ledet/detector.hpp"

namespace ledet {

struct PseudoLabel {
  Box box;  // teacher-view coordinates, jitter-refined
  int class_id = 0;
  double score = 0.0;
  std::array<double, 4> box_variance{0, 0, 0, 0};  // std / box size per coordinate
  bool regress = true;  // mean variance within the regression threshold
};

struct PseudoLabelSettings {
  double score_threshold = 0.9;
  int n_jitter = 10;
  double jitter_scale = 0.06;
  double variance_threshold = 0.02;
  DetectSettings detect{};
};

struct EmaState {
  DetectorParams teacher;
  double momentum = 0.999;
};

/// teacher <- m * teacher + (1 - m) * student, elementwise. Entries already
/// equal to the student are left untouched so frozen weights stay bitwise.
inline void ema_update(EmaState& state, const DetectorParams& student) {
  if (!state.teacher.params.same_layout(student.params)) throw std::invalid_argument("ema_update: parameter layout mismatch");
  if (!(state.momentum >= 0.0 && state.momentum <= 1.0)) throw std::invalid_argument("ema_update: momentum not in [0,1]");
  const double m = state.momentum;
  auto& t = state.teacher.params.entries();
  const auto& s = student.params.entries();
  for (std::size_t i = 0; i < t.size(); ++i) {
    for (std::size_t k = 0; k < t[i].value.size(); ++k) {
      if (t[i].value[k] != s[i].value[k]) t[i].value[k] = m * t[i].value[k] + (1.0 - m) * s[i].value[k];
    }
  }
}

/// Detections with score >= threshold and a foreground class.
inline std::vector<ScoredBox> select_confident(const std::vector<ScoredBox>& detections, double threshold,
                                               int background) {
  std::vector<ScoredBox> out;
  for (const auto& d : detections) {
    if (d.score >= threshold && d.class_id != background) out.push_back(d);
  }
  return out;
}

struct JitterResult {
  Box box;
  std::array<double, 4> variance{0, 0, 0, 0};

  double mean_variance() const { return 0.25 * (variance[0] + variance[1] + variance[2] + variance[3]); }
};

/// `regress` maps a batch of boxes to their re-regressed versions. With
/// n_jitter == 0 the box itself is regressed once and the variance is 0.
template <class Regressor>
JitterResult box_jitter_refine(Regressor&& regress, const Box& box, int n_jitter, double scale, Rng& rng) {
  JitterResult r;
  if (n_jitter <= 0) {
    r.box = regress(std::vector<Box>{box}).at(0);
    return r;
  }
  const double w = box.width();
  const double h = box.height();
  std::vector<Box> jittered;
  jittered.reserve(n_jitter);
  for (int i = 0; i < n_jitter; ++i) {
    const double dx1 = uniform(rng, -scale, scale) * w;
    const double dy1 = uniform(rng, -scale, scale) * h;
    const double dx2 = uniform(rng, -scale, scale) * w;
    const double dy2 = uniform(rng, -scale, scale) * h;
    jittered.push_back({box.x1 + dx1, box.y1 + dy1, box.x2 + dx2, box.y2 + dy2});
  }
  const std::vector<Box> out = regress(jittered);
  std::array<double, 4> mean{0, 0, 0, 0};
  for (const auto& b : out) {
    mean[0] += b.x1 / n_jitter;
    mean[1] += b.y1 / n_jitter;
    mean[2] += b.x2 / n_jitter;
    mean[3] += b.y2 / n_jitter;
  }
  std::array<double, 4> var{0, 0, 0, 0};
  for (const auto& b : out) {
    const double c[4] = {b.x1, b.y1, b.x2, b.y2};
    for (int k = 0; k < 4; ++k) var[k] += (c[k] - mean[k]) * (c[k] - mean[k]) / n_jitter;
  }
  r.box = {mean[0], mean[1], mean[2], mean[3]};
  const double norm[4] = {std::max(w, 1e-6), std::max(h, 1e-6), std::max(w, 1e-6), std::max(h, 1e-6)};
  for (int k = 0; k < 4; ++k) r.variance[k] = std::sqrt(var[k]) / norm[k];
  return r;
}

/// Batch regressor backed by a pass's RoI head; results clipped to the view.
inline auto roi_regressor(ImagePass& pass) {
  return [&pass](const std::vector<Box>& boxes) {
    auto pred = pass.roi_forward(boxes);
    for (auto& b : pred.boxes) b = clip_box(b, pass.width(), pass.height());
    return pred.boxes;
  };
}

inline JitterResult box_jitter_refine(const DetectorParams& teacher, const Image& weak_view, const Box& box,
                                      int n_jitter, double scale, Rng& rng) {
  ImagePass pass(teacher, weak_view, false);
  return box_jitter_refine(roi_regressor(pass), box, n_jitter, scale, rng);
}

/// Pseudo labels from an existing inference pass of the teacher on the weak view.
inline std::vector<PseudoLabel> generate_pseudo_labels(ImagePass& teacher_pass, const PseudoLabelSettings& s,
                                                       Rng& rng) {
  std::vector<Box> rois;
  for (const auto& p : teacher_pass.proposals(s.detect.proposals)) rois.push_back(p.box);
  const auto pred = teacher_pass.roi_forward(rois);
  const auto dets = postprocess_detections(pred, teacher_pass.width(), teacher_pass.height(), s.detect);
  std::vector<PseudoLabel> out;
  for (const auto& d : select_confident(dets, s.score_threshold, teacher_pass.detector().background())) {
    const auto j = box_jitter_refine(roi_regressor(teacher_pass), d.box, s.n_jitter, s.jitter_scale, rng);
    PseudoLabel pl;
    pl.box = s.n_jitter > 0 ? j.box : d.box;
    pl.class_id = d.class_id;
    pl.score = d.score;
    pl.box_variance = j.variance;
    pl.regress = j.mean_variance() <= s.variance_threshold;
    out.push_back(pl);
  }
  return out;
}

inline std::vector<PseudoLabel> generate_pseudo_labels(const DetectorParams& teacher, const Image& weak_view,
                                                       const PseudoLabelSettings& s, Rng& rng) {
  ImagePass pass(teacher, weak_view, false);
  return generate_pseudo_labels(pass, s, rng);
}

/// Assignment of student RoIs to pseudo boxes (already in the student view):
/// RoIs matched to a pseudo box with high jitter variance get no regression target.
inline RoiTargets assign_pseudo_targets(const std::vector<Box>& rois, const std::vector<Box>& pseudo_boxes,
                                        const std::vector<PseudoLabel>& pseudo, int background, double fg_iou) {
  std::vector<int> labels;
  for (const auto& p : pseudo) labels.push_back(p.class_id);
  RoiTargets t = assign_roi_targets(rois, pseudo_boxes, labels, background, fg_iou);
  for (std::size_t i = 0; i < rois.size(); ++i) {
    if (!t.regress[i]) continue;
    double best = -1.0;
    std::size_t arg = 0;
    for (std::size_t g = 0; g < pseudo_boxes.size(); ++g) {
      const double v = iou(rois[i], pseudo_boxes[g]);
      if (v > best) {
        best = v;
        arg = g;
      }
    }
    t.regress[i] = pseudo[arg].regress ? 1 : 0;
  }
  return t;
}

/// Soft-weighted unsupervised RoI loss: foreground-assigned RoIs weigh 1,
/// background-assigned RoIs weigh the teacher's background probability;
/// classification normalized by the weight sum, regression by RoI count.
inline HeadLoss unsup_soft_loss(const RoIPrediction& student_pred, const RoiTargets& targets,
                                const std::vector<double>& teacher_bg_prob) {
  if (teacher_bg_prob.size() != student_pred.size() || targets.labels.size() != student_pred.size()) {
    throw std::invalid_argument("unsup_soft_loss: size mismatch");
  }
  const int bg = student_pred.c_total - 1;
  std::vector<double> w(student_pred.size(), 1.0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (targets.labels[i] == bg) w[i] = teacher_bg_prob[i];
  }
  return roi_head_loss(student_pred, targets, &w);
}

}  // namespace ledet
