#pragma once

// Labeled / strong / weak augmentation branches. Every view records the
// affine map from original-image coordinates to view coordinates.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "ledet/geometry.hpp"
#include "ledet/image.hpp"
#include "ledet/rng.hpp"

namespace ledet {

enum class Branch { labeled, strong, weak };

inline const char* branch_name(Branch b) {
  switch (b) {
    case Branch::labeled: return "labeled";
    case Branch::strong: return "strong";
    case Branch::weak: return "weak";
  }
  return "?";
}

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct AugmentationRecipe {
  Branch branch = Branch::weak;
  Range resize_short_edge{48, 96};
  double flip_prob = 0.5;
  // Probability of drawing one of the nine color ops (each then has 1/9).
  double color_prob = 0.0;
  // Probability of drawing one of translate/shear/rotate (each then has 1/3).
  double geometric_prob = 0.0;
  Range translate{-0.1, 0.1};  // fraction of view width/height
  Range shear_deg{-30, 30};
  Range rotate_deg{-30, 30};
  int cutout_min = 0;
  int cutout_max = 0;
  Range cutout_size{0.0, 0.2};  // fraction of the shorter side
  // Color-op magnitudes (RandAugment-style enhancement factors).
  Range enhance_factor{0.5, 1.5};
  Range solarize_threshold{0.5, 1.0};
  Range posterize_bits{4, 8};
  std::array<float, 3> fill{0.25f, 0.25f, 0.25f};
  int max_retries = 10;

  void validate() const {
    auto prob = [](double p, const char* what) {
      if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument(std::string("recipe: ") + what + " not in [0,1]");
    };
    auto ordered = [](const Range& r, const char* what) {
      if (!(r.lo <= r.hi)) throw std::invalid_argument(std::string("recipe: range ") + what + " has lo > hi");
    };
    prob(flip_prob, "flip_prob");
    prob(color_prob, "color_prob");
    prob(geometric_prob, "geometric_prob");
    ordered(resize_short_edge, "resize_short_edge");
    ordered(translate, "translate");
    ordered(shear_deg, "shear_deg");
    ordered(rotate_deg, "rotate_deg");
    ordered(cutout_size, "cutout_size");
    ordered(enhance_factor, "enhance_factor");
    ordered(solarize_threshold, "solarize_threshold");
    ordered(posterize_bits, "posterize_bits");
    if (resize_short_edge.lo < 8) throw std::invalid_argument("recipe: resize short edge below 8 px");
    if (cutout_min < 0 || cutout_max < cutout_min) throw std::invalid_argument("recipe: cutout count range invalid");
    if (cutout_size.lo < 0.0 || cutout_size.hi > 1.0) throw std::invalid_argument("recipe: cutout size outside [0,1]");
  }

  /// Branch defaults. `short_edge` is the resize range for the target
  /// resolution (e.g. {400, 1200} for COCO-sized images).
  static AugmentationRecipe for_branch(Branch b, Range short_edge) {
    AugmentationRecipe r;
    r.branch = b;
    r.resize_short_edge = short_edge;
    r.flip_prob = 0.5;
    if (b != Branch::weak) r.color_prob = 1.0;
    if (b == Branch::strong) {
      r.geometric_prob = 1.0;
      r.cutout_min = 1;
      r.cutout_max = 5;
    }
    return r;
  }
};

struct AppliedOp {
  std::string name;
  std::vector<double> params;
};

struct AugmentedView {
  Image image;
  AffineTransform transform;  // original -> view
  std::vector<AppliedOp> applied_ops;
};

inline const std::array<const char*, 9>& color_op_names() {
  static const std::array<const char*, 9> names = {"identity", "autocontrast", "equalize",
                                                   "solarize", "color",        "contrast",
                                                   "brightness", "sharpness",  "posterize"};
  return names;
}

/// Inverse-mapped bilinear warp of `src` into an out_w x out_h view.
inline Image warp_affine(const Image& src, const AffineTransform& forward, int out_w, int out_h,
                         const std::array<float, 3>& fill) {
  const AffineTransform inv = forward.inverse();
  Image out(src.channels, out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      const auto p = inv.apply(x + 0.5, y + 0.5);
      for (int c = 0; c < src.channels; ++c) {
        out.at(c, y, x) = src.sample(c, p[0], p[1], fill[std::min(c, 2)]);
      }
    }
  }
  return out;
}

namespace detail {

inline float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

inline double luminance(const Image& im, int y, int x) {
  if (im.channels < 3) return im.at(0, y, x);
  return 0.299 * im.at(0, y, x) + 0.587 * im.at(1, y, x) + 0.114 * im.at(2, y, x);
}

inline void apply_color_op(Image& im, int op, Rng& rng, const AugmentationRecipe& r, AppliedOp& log) {
  const std::size_t plane = static_cast<std::size_t>(im.height) * im.width;
  switch (op) {
    case 0:  // identity
      break;
    case 1: {  // autocontrast
      for (int c = 0; c < im.channels; ++c) {
        auto first = im.data.begin() + static_cast<std::ptrdiff_t>(c * plane);
        auto [lo, hi] = std::minmax_element(first, first + static_cast<std::ptrdiff_t>(plane));
        const double l = *lo;
        const double h = *hi;
        if (h - l < 1e-6) continue;
        for (auto it = first; it != first + static_cast<std::ptrdiff_t>(plane); ++it) *it = clamp01((*it - l) / (h - l));
      }
      break;
    }
    case 2: {  // equalize
      for (int c = 0; c < im.channels; ++c) {
        std::array<int, 256> hist{};
        float* p = im.data.data() + c * plane;
        for (std::size_t i = 0; i < plane; ++i) hist[std::clamp(int(std::lround(p[i] * 255.0f)), 0, 255)]++;
        std::array<double, 256> cdf{};
        int acc = 0;
        for (int b = 0; b < 256; ++b) {
          acc += hist[b];
          cdf[b] = static_cast<double>(acc) / static_cast<double>(plane);
        }
        for (std::size_t i = 0; i < plane; ++i) p[i] = clamp01(cdf[std::clamp(int(std::lround(p[i] * 255.0f)), 0, 255)]);
      }
      break;
    }
    case 3: {  // solarize
      const double t = uniform(rng, r.solarize_threshold.lo, r.solarize_threshold.hi);
      log.params.push_back(t);
      for (auto& v : im.data) {
        if (v >= t) v = clamp01(1.0 - v);
      }
      break;
    }
    case 4: {  // color (saturation)
      const double f = uniform(rng, r.enhance_factor.lo, r.enhance_factor.hi);
      log.params.push_back(f);
      if (im.channels < 3) break;
      for (int y = 0; y < im.height; ++y) {
        for (int x = 0; x < im.width; ++x) {
          const double g = luminance(im, y, x);
          for (int c = 0; c < 3; ++c) im.at(c, y, x) = clamp01(g + f * (im.at(c, y, x) - g));
        }
      }
      break;
    }
    case 5: {  // contrast
      const double f = uniform(rng, r.enhance_factor.lo, r.enhance_factor.hi);
      log.params.push_back(f);
      double mean = 0.0;
      for (int y = 0; y < im.height; ++y) {
        for (int x = 0; x < im.width; ++x) mean += luminance(im, y, x);
      }
      mean /= static_cast<double>(plane);
      for (auto& v : im.data) v = clamp01(mean + f * (v - mean));
      break;
    }
    case 6: {  // brightness
      const double f = uniform(rng, r.enhance_factor.lo, r.enhance_factor.hi);
      log.params.push_back(f);
      for (auto& v : im.data) v = clamp01(v * f);
      break;
    }
    case 7: {  // sharpness: blend with the 3x3 smoothing kernel [1 1 1; 1 5 1; 1 1 1] / 13
      const double f = uniform(rng, r.enhance_factor.lo, r.enhance_factor.hi);
      log.params.push_back(f);
      Image blurred = im;
      for (int c = 0; c < im.channels; ++c) {
        for (int y = 1; y + 1 < im.height; ++y) {
          for (int x = 1; x + 1 < im.width; ++x) {
            double acc = 4.0 * im.at(c, y, x);
            for (int dy = -1; dy <= 1; ++dy) {
              for (int dx = -1; dx <= 1; ++dx) acc += im.at(c, y + dy, x + dx);
            }
            blurred.at(c, y, x) = static_cast<float>(acc / 13.0);
          }
        }
      }
      for (std::size_t i = 0; i < im.data.size(); ++i) {
        im.data[i] = clamp01(blurred.data[i] + f * (im.data[i] - blurred.data[i]));
      }
      break;
    }
    case 8: {  // posterize
      const int bits = uniform_int(rng, static_cast<int>(r.posterize_bits.lo), static_cast<int>(r.posterize_bits.hi));
      log.params.push_back(bits);
      const int shift = 8 - bits;
      for (auto& v : im.data) {
        const int q = (std::clamp(int(std::lround(v * 255.0f)), 0, 255) >> shift) << shift;
        v = static_cast<float>(q / 255.0);
      }
      break;
    }
    default:
      throw std::out_of_range("unknown color op");
  }
}

}  // namespace detail

/// Samples one augmented view. Geometric ops (resize, flip, translate, shear,
/// rotate) compose into `transform`; color ops and cutout only touch pixels.
inline AugmentedView augment(const Image& image, const AugmentationRecipe& recipe, Rng& rng) {
  if (image.empty()) throw std::invalid_argument("augment: empty image");
  recipe.validate();
  AugmentedView view;

  const double short_side = std::min(image.width, image.height);
  const double target = recipe.resize_short_edge.lo == recipe.resize_short_edge.hi
                            ? recipe.resize_short_edge.lo
                            : uniform(rng, recipe.resize_short_edge.lo, recipe.resize_short_edge.hi);
  const double scale = target / short_side;
  const int out_w = std::max(1, static_cast<int>(std::lround(image.width * scale)));
  const int out_h = std::max(1, static_cast<int>(std::lround(image.height * scale)));
  const double sx = static_cast<double>(out_w) / image.width;
  const double sy = static_cast<double>(out_h) / image.height;
  AffineTransform t = AffineTransform::scaling(sx, sy);
  view.applied_ops.push_back({"resize", {sx, sy}});

  if (bernoulli(rng, recipe.flip_prob)) {
    t = AffineTransform::hflip(out_w) * t;
    view.applied_ops.push_back({"flip", {static_cast<double>(out_w)}});
  }

  if (bernoulli(rng, recipe.geometric_prob)) {
    const double cx = 0.5 * out_w;
    const double cy = 0.5 * out_h;
    const int op = uniform_int(rng, 0, 2);
    bool ok = false;
    for (int attempt = 0; attempt <= recipe.max_retries && !ok; ++attempt) {
      AffineTransform g;
      AppliedOp log;
      if (op == 0) {
        const double tx = uniform(rng, recipe.translate.lo, recipe.translate.hi) * out_w;
        const double ty = uniform(rng, recipe.translate.lo, recipe.translate.hi) * out_h;
        g = AffineTransform::translation(tx, ty);
        log = {"translate", {tx, ty}};
      } else if (op == 1) {
        const bool along_x = bernoulli(rng, 0.5);
        const double a = uniform(rng, recipe.shear_deg.lo, recipe.shear_deg.hi) * std::numbers::pi / 180.0;
        g = along_x ? AffineTransform::shear(a, 0.0, cx, cy) : AffineTransform::shear(0.0, a, cx, cy);
        log = {along_x ? "shear_x" : "shear_y", {a}};
      } else {
        const double a = uniform(rng, recipe.rotate_deg.lo, recipe.rotate_deg.hi) * std::numbers::pi / 180.0;
        g = AffineTransform::rotation(a, cx, cy);
        log = {"rotate", {a}};
      }
      const AffineTransform candidate = g * t;
      if (candidate.invertible(1e-6)) {
        t = candidate;
        view.applied_ops.push_back(std::move(log));
        ok = true;
      }
    }
    if (!ok) throw std::runtime_error("augment: degenerate geometric transform after retries");
  }
  if (!t.invertible()) throw std::runtime_error("augment: degenerate composed transform");

  view.image = warp_affine(image, t, out_w, out_h, recipe.fill);
  view.transform = t;

  if (bernoulli(rng, recipe.color_prob)) {
    const int op = uniform_int(rng, 0, 8);
    AppliedOp log{color_op_names()[op], {}};
    detail::apply_color_op(view.image, op, rng, recipe, log);
    view.applied_ops.push_back(std::move(log));
  }

  if (recipe.cutout_max > 0) {
    const int n = uniform_int(rng, recipe.cutout_min, recipe.cutout_max);
    const double side = std::min(out_w, out_h);
    for (int i = 0; i < n; ++i) {
      const double w = uniform(rng, recipe.cutout_size.lo, recipe.cutout_size.hi) * side;
      const double h = uniform(rng, recipe.cutout_size.lo, recipe.cutout_size.hi) * side;
      const double cx = uniform(rng, 0.0, out_w);
      const double cy = uniform(rng, 0.0, out_h);
      const Box rect = clip_box({cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}, out_w, out_h);
      for (int y = static_cast<int>(std::ceil(rect.y1 - 0.5)); y < rect.y2 - 0.5; ++y) {
        for (int x = static_cast<int>(std::ceil(rect.x1 - 0.5)); x < rect.x2 - 0.5; ++x) {
          for (int c = 0; c < view.image.channels; ++c) view.image.at(c, y, x) = recipe.fill[std::min(c, 2)];
        }
      }
      view.applied_ops.push_back({"cutout", {rect.x1, rect.y1, rect.x2, rect.y2}});
    }
  }
  return view;
}

/// M mapping teacher-view coordinates into student-view coordinates.
inline AffineTransform relate_views(const AugmentedView& student, const AugmentedView& teacher) {
  if (!teacher.transform.invertible()) throw std::domain_error("relate_views: teacher transform not invertible");
  return student.transform * teacher.transform.inverse();
}

/// Maps boxes through `m`, clips to the view and drops boxes thinner than
/// `min_size`. `keep` (optional) receives the surviving input indices.
inline std::vector<Box> map_boxes(const AffineTransform& m, const std::vector<Box>& boxes, double width,
                                  double height, double min_size, std::vector<std::size_t>* keep = nullptr) {
  std::vector<Box> out;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Box b = clip_box(apply_affine(m, boxes[i]), width, height);
    if (b.width() < min_size || b.height() < min_size) continue;
    out.push_back(b);
    if (keep) keep->push_back(i);
  }
  return out;
}

}  // namespace ledet
