#pragma once

// Axis-aligned boxes, overlap measures, 2D affine transforms and greedy NMS.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace ledet {

/// Corner-format box in continuous pixel coordinates (width = x2 - x1).
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }

  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) &&
           x2 >= x1 && y2 >= y1;
  }

  friend bool operator==(const Box&, const Box&) = default;
};

inline Box clip_box(const Box& b, double width, double height) {
  return Box{std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height),
             std::clamp(b.x2, 0.0, width), std::clamp(b.y2, 0.0, height)};
}

inline double intersection_area(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

/// Intersection over union; 0 for a degenerate (zero-area) union.
inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

/// Generalized IoU: IoU - (enclosing - union) / enclosing. Returns 0 when the
/// enclosing box has zero area.
inline double giou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  const double enclose = (std::max(a.x2, b.x2) - std::min(a.x1, b.x1)) *
                         (std::max(a.y2, b.y2) - std::min(a.y1, b.y1));
  if (enclose <= 0.0) return 0.0;
  const double io = uni > 0.0 ? inter / uni : 0.0;
  return io - (enclose - uni) / enclose;
}

enum class OverlapKind { iou, giou };

inline double overlap(OverlapKind kind, const Box& a, const Box& b) {
  return kind == OverlapKind::iou ? iou(a, b) : giou(a, b);
}

/// Overlap value together with its gradient w.r.t. the first box's
/// (x1, y1, x2, y2). The second box is treated as a constant.
struct OverlapGrad {
  double value = 0.0;
  std::array<double, 4> d_first{0.0, 0.0, 0.0, 0.0};
};

inline OverlapGrad overlap_with_grad(OverlapKind kind, const Box& a, const Box& b) {
  OverlapGrad out;
  const double wa = a.x2 - a.x1;
  const double ha = a.y2 - a.y1;
  const double area_a = wa * ha;
  const double area_b = b.area();
  // d(area_a)/d(x1,y1,x2,y2)
  const std::array<double, 4> d_area_a{-ha, -wa, ha, wa};

  const double ix1 = std::max(a.x1, b.x1);
  const double iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2);
  const double iy2 = std::min(a.y2, b.y2);
  const double iw = ix2 - ix1;
  const double ih = iy2 - iy1;
  double inter = 0.0;
  std::array<double, 4> d_inter{0.0, 0.0, 0.0, 0.0};
  if (iw > 0.0 && ih > 0.0) {
    inter = iw * ih;
    // the intersection edge follows box a only where a is the binding side
    if (a.x1 > b.x1) d_inter[0] = -ih;
    if (a.y1 > b.y1) d_inter[1] = -iw;
    if (a.x2 < b.x2) d_inter[2] = ih;
    if (a.y2 < b.y2) d_inter[3] = iw;
  }
  const double uni = area_a + area_b - inter;
  std::array<double, 4> d_uni{};
  for (int k = 0; k < 4; ++k) d_uni[k] = d_area_a[k] - d_inter[k];

  double io = 0.0;
  std::array<double, 4> d_io{0.0, 0.0, 0.0, 0.0};
  if (uni > 0.0) {
    io = inter / uni;
    for (int k = 0; k < 4; ++k) d_io[k] = (d_inter[k] * uni - inter * d_uni[k]) / (uni * uni);
  }
  if (kind == OverlapKind::iou) {
    if (uni <= 0.0) return out;
    out.value = io;
    out.d_first = d_io;
    return out;
  }

  const double ex1 = std::min(a.x1, b.x1);
  const double ey1 = std::min(a.y1, b.y1);
  const double ex2 = std::max(a.x2, b.x2);
  const double ey2 = std::max(a.y2, b.y2);
  const double ew = ex2 - ex1;
  const double eh = ey2 - ey1;
  const double enclose = ew * eh;
  if (enclose <= 0.0) return out;
  std::array<double, 4> d_enc{0.0, 0.0, 0.0, 0.0};
  if (a.x1 < b.x1) d_enc[0] = -eh;
  if (a.y1 < b.y1) d_enc[1] = -ew;
  if (a.x2 > b.x2) d_enc[2] = eh;
  if (a.y2 > b.y2) d_enc[3] = ew;

  // giou = io - 1 + uni / enclose
  out.value = io - (enclose - uni) / enclose;
  for (int k = 0; k < 4; ++k) {
    out.d_first[k] = d_io[k] + (d_uni[k] * enclose - uni * d_enc[k]) / (enclose * enclose);
  }
  return out;
}

/// Invertible 2D affine map stored as a row-major 3x3 homogeneous matrix whose
/// last row is fixed to (0, 0, 1).
class AffineTransform {
 public:
  AffineTransform() : m_{1, 0, 0, 0, 1, 0, 0, 0, 1} {}

  static AffineTransform from_rows(double a, double b, double c, double d, double e, double f) {
    AffineTransform t;
    t.m_ = {a, b, c, d, e, f, 0, 0, 1};
    return t;
  }

  static AffineTransform identity() { return {}; }
  static AffineTransform translation(double tx, double ty) { return from_rows(1, 0, tx, 0, 1, ty); }
  static AffineTransform scaling(double sx, double sy) { return from_rows(sx, 0, 0, 0, sy, 0); }

  /// Mirror about the vertical axis of an image `width` pixels wide.
  static AffineTransform hflip(double width) { return from_rows(-1, 0, width, 0, 1, 0); }

  /// Counter-clockwise rotation (in image coordinates, y down) by `radians`
  /// about the point (cx, cy).
  static AffineTransform rotation(double radians, double cx = 0.0, double cy = 0.0) {
    const double c = std::cos(radians);
    const double s = std::sin(radians);
    return translation(cx, cy) * from_rows(c, s, 0, -s, c, 0) * translation(-cx, -cy);
  }

  /// Shear x += tan(ax) * y, y += tan(ay) * x about (cx, cy).
  static AffineTransform shear(double ax_radians, double ay_radians, double cx = 0.0,
                               double cy = 0.0) {
    return translation(cx, cy) *
           from_rows(1, std::tan(ax_radians), 0, std::tan(ay_radians), 1, 0) *
           translation(-cx, -cy);
  }

  /// Composition: (*this * rhs) applies rhs first.
  friend AffineTransform operator*(const AffineTransform& lhs, const AffineTransform& rhs) {
    AffineTransform out;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int k = 0; k < 3; ++k) acc += lhs.m_[r * 3 + k] * rhs.m_[k * 3 + c];
        out.m_[r * 3 + c] = acc;
      }
    }
    out.m_[6] = 0.0;
    out.m_[7] = 0.0;
    out.m_[8] = 1.0;
    return out;
  }

  double determinant() const { return m_[0] * m_[4] - m_[1] * m_[3]; }

  bool invertible(double eps = 1e-12) const {
    const double det = determinant();
    return std::isfinite(det) && std::abs(det) > eps;
  }

  AffineTransform inverse() const {
    if (!invertible()) throw std::domain_error("AffineTransform: matrix is not invertible");
    const double det = determinant();
    const double a = m_[4] / det;
    const double b = -m_[1] / det;
    const double d = -m_[3] / det;
    const double e = m_[0] / det;
    const double c = -(a * m_[2] + b * m_[5]);
    const double f = -(d * m_[2] + e * m_[5]);
    return from_rows(a, b, c, d, e, f);
  }

  std::array<double, 2> apply(double x, double y) const {
    return {m_[0] * x + m_[1] * y + m_[2], m_[3] * x + m_[4] * y + m_[5]};
  }

  const std::array<double, 9>& matrix() const { return m_; }
  double operator()(int row, int col) const { return m_[row * 3 + col]; }

  bool approx_equal(const AffineTransform& other, double tol) const {
    for (int i = 0; i < 9; ++i) {
      if (std::abs(m_[i] - other.m_[i]) > tol) return false;
    }
    return true;
  }

 private:
  std::array<double, 9> m_;
};

/// Axis-aligned hull of the four mapped corners.
inline Box apply_affine(const AffineTransform& m, const Box& b) {
  const std::array<std::array<double, 2>, 4> corners{
      m.apply(b.x1, b.y1), m.apply(b.x2, b.y1), m.apply(b.x1, b.y2), m.apply(b.x2, b.y2)};
  Box out{corners[0][0], corners[0][1], corners[0][0], corners[0][1]};
  for (const auto& p : corners) {
    out.x1 = std::min(out.x1, p[0]);
    out.y1 = std::min(out.y1, p[1]);
    out.x2 = std::max(out.x2, p[0]);
    out.y2 = std::max(out.y2, p[1]);
  }
  return out;
}

struct ScoredBox {
  Box box;
  double score = 0.0;
  int class_id = 0;
};

/// Indices of `boxes` in descending score order (ties: lower index first).
template <class Scores>
std::vector<std::size_t> order_by_score(const Scores& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

/// Greedy non-maximum suppression. A box is dropped when its IoU with an
/// already kept, higher-ranked box exceeds `iou_threshold`. Returns kept
/// indices in descending score order; equal scores rank by lower index.
inline std::vector<std::size_t> nms(std::span<const ScoredBox> boxes, double iou_threshold) {
  std::vector<double> scores(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) scores[i] = boxes[i].score;
  const auto order = order_by_score(scores);
  std::vector<std::size_t> keep;
  std::vector<char> suppressed(boxes.size(), 0);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (suppressed[i]) continue;
    keep.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!suppressed[j] && iou(boxes[i].box, boxes[j].box) > iou_threshold) suppressed[j] = 1;
    }
  }
  return keep;
}

/// NMS applied independently per class_id; result sorted by descending score.
inline std::vector<std::size_t> batched_nms(std::span<const ScoredBox> boxes, double iou_threshold) {
  std::vector<int> classes;
  for (const auto& b : boxes) classes.push_back(b.class_id);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  std::vector<std::size_t> keep;
  for (int c : classes) {
    std::vector<ScoredBox> sub;
    std::vector<std::size_t> map;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (boxes[i].class_id == c) {
        sub.push_back(boxes[i]);
        map.push_back(i);
      }
    }
    for (std::size_t k : nms(sub, iou_threshold)) keep.push_back(map[k]);
  }
  std::stable_sort(keep.begin(), keep.end(), [&](std::size_t a, std::size_t b) {
    if (boxes[a].score != boxes[b].score) return boxes[a].score > boxes[b].score;
    return a < b;
  });
  return keep;
}

}  // namespace ledet
