#pragma once

// Cross-view consistency on paired proposals: a class-distribution similarity
// loss and a box-overlap consistency loss, plus the weighted total objective.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "ledet/augment.hpp"
#include "ledet/geometry.hpp"
#include "ledet/nn.hpp"

namespace ledet {

struct ProposalPair {
  Box p_s;  // student view
  Box p_t;  // teacher view
  AffineTransform m;  // teacher view -> student view
};

/// Maps original-image proposals into both views. Pairs whose student box
/// clips to less than `min_area` inside the student view are dropped.
inline std::vector<ProposalPair> pair_proposals(const std::vector<Box>& source, const AugmentedView& view_s,
                                                const AugmentedView& view_t, double min_area = 1.0,
                                                std::vector<std::size_t>* kept = nullptr) {
  if (!view_s.transform.invertible() || !view_t.transform.invertible()) {
    throw std::domain_error("pair_proposals: non-invertible view transform");
  }
  const AffineTransform m = relate_views(view_s, view_t);
  std::vector<ProposalPair> out;
  for (std::size_t i = 0; i < source.size(); ++i) {
    const Box ps = apply_affine(view_s.transform, source[i]);
    if (clip_box(ps, view_s.image.width, view_s.image.height).area() < min_area) continue;
    out.push_back({ps, apply_affine(view_t.transform, source[i]), m});
    if (kept) kept->push_back(i);
  }
  return out;
}

/// 1 where the teacher's argmax is a foreground class (background is the
/// last index; ties go to the lower index).
inline std::vector<double> foreground_weights(const std::vector<double>& z_t, int c_total) {
  const std::size_t n = z_t.size() / c_total;
  std::vector<double> w(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = z_t.data() + i * c_total;
    int arg = 0;
    for (int k = 1; k < c_total; ++k) {
      if (z[k] > z[arg]) arg = k;
    }
    w[i] = arg != c_total - 1 ? 1.0 : 0.0;
  }
  return w;
}

enum class SimilarityMeasure { cross_entropy, kl };

inline SimilarityMeasure parse_similarity(const std::string& s) {
  if (s == "cross_entropy") return SimilarityMeasure::cross_entropy;
  if (s == "kl") return SimilarityMeasure::kl;
  throw std::invalid_argument("unknown similarity measure '" + s + "'");
}

inline OverlapKind parse_overlap(const std::string& s) {
  if (s == "iou") return OverlapKind::iou;
  if (s == "giou") return OverlapKind::giou;
  throw std::invalid_argument("unknown overlap '" + s + "'");
}

struct LossGrad {
  double value = 0.0;
  std::vector<double> grad;  // w.r.t. the student-side input only
};

/// (1/sum w) * sum_i w_i * H_i with H = -(1/C) sum_c q_c log p_c over all
/// C = c_total channels (q teacher, p student softmax). The KL measure
/// subtracts the teacher entropy term. Zero when no weight is active.
inline LossGrad entropy_similarity_loss(const std::vector<double>& z_s, const std::vector<double>& z_t,
                                        const std::vector<double>& w, int c_total,
                                        SimilarityMeasure measure = SimilarityMeasure::cross_entropy) {
  if (z_s.size() != z_t.size() || z_s.size() != w.size() * c_total) {
    throw std::invalid_argument("entropy_similarity_loss: shape mismatch");
  }
  LossGrad out;
  out.grad.assign(z_s.size(), 0.0);
  double wsum = 0.0;
  for (double v : w) wsum += v;
  if (wsum <= 0.0) return out;
  const double c = c_total;
  const auto q = nn::softmax_rows(z_t, c_total);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] == 0.0) continue;
    const auto logp = nn::log_softmax_row(z_s.data() + i * c_total, c_total);
    const auto logq = nn::log_softmax_row(z_t.data() + i * c_total, c_total);
    double h = 0.0;
    for (int k = 0; k < c_total; ++k) {
      const double qk = q[i * c_total + k];
      h -= qk * logp[k];
      if (measure == SimilarityMeasure::kl && qk > 0.0) h += qk * logq[k];
    }
    out.value += w[i] * h / c / wsum;
    for (int k = 0; k < c_total; ++k) {
      out.grad[i * c_total + k] = w[i] / wsum / c * (std::exp(logp[k]) - q[i * c_total + k]);
    }
  }
  return out;
}

/// 1 - (1/n) * sum_i w_i * overlap(r_s[i], m_i(r_t[i])) with n = number of
/// pairs. Zero when no weight is active. Gradient is w.r.t. r_s corners.
inline LossGrad iou_consistency_loss(const std::vector<ProposalPair>& pairs, const std::vector<Box>& r_s,
                                     const std::vector<Box>& r_t, const std::vector<double>& w,
                                     OverlapKind kind = OverlapKind::iou) {
  const std::size_t n = pairs.size();
  if (r_s.size() != n || r_t.size() != n || w.size() != n) throw std::invalid_argument("iou_consistency_loss: size mismatch");
  LossGrad out;
  out.grad.assign(4 * n, 0.0);
  double wsum = 0.0;
  for (double v : w) wsum += v;
  if (wsum <= 0.0) return out;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (w[i] == 0.0) continue;
    const auto g = overlap_with_grad(kind, r_s[i], apply_affine(pairs[i].m, r_t[i]));
    acc += w[i] * g.value;
    for (int k = 0; k < 4; ++k) out.grad[4 * i + k] = -w[i] * g.d_first[k] / static_cast<double>(n);
  }
  out.value = 1.0 - acc / static_cast<double>(n);
  return out;
}

struct LossWeights {
  double alpha = 0.0;
  double beta = 0.0;

  /// alpha = |b_u| / |b_l|, beta = multiplier * alpha.
  static LossWeights from_batch(int labeled, int unlabeled, double beta_multiplier = 2.0) {
    if (labeled < 1) throw std::invalid_argument("LossWeights: labeled batch must be >= 1");
    if (unlabeled < 0) throw std::invalid_argument("LossWeights: unlabeled batch must be >= 0");
    const double a = static_cast<double>(unlabeled) / labeled;
    return {a, beta_multiplier * a};
  }
};

inline double total_loss(double l_sup, double l_soft, double l_ent, double l_iou, const LossWeights& w) {
  for (double v : {l_sup, l_soft, l_ent, l_iou}) {
    if (!std::isfinite(v)) {
      throw std::runtime_error("non-finite loss component: sup=" + std::to_string(l_sup) + " soft=" +
                               std::to_string(l_soft) + " ent=" + std::to_string(l_ent) + " iou=" + std::to_string(l_iou));
    }
  }
  return l_sup + w.alpha * l_soft + w.beta * (l_ent + l_iou);
}

}  // namespace ledet
