#pragma once

// Desk-scale two-stage detector: strided conv backbone, two-level top-down
// neck, shared RPN head, RoIAlign and separate classifier / regressor
// branches. Forward passes cache what the hand-written backward needs.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "ledet/geometry.hpp"
#include "ledet/image.hpp"
#include "ledet/nn.hpp"
#include "ledet/params.hpp"
#include "ledet/rng.hpp"

namespace ledet {

struct DetectorArch {
  int in_channels = 3;
  std::array<int, 4> stage_channels{8, 16, 24, 32};
  int neck_channels = 16;
  // Anchor base sizes for the stride-4 and stride-8 levels.
  std::vector<double> fine_anchor_sizes{10, 16};
  std::vector<double> coarse_anchor_sizes{24, 36};
  std::vector<double> anchor_ratios{0.5, 1.0, 2.0};  // height / width
  int roi_size = 4;
  int roi_sampling = 2;
  int cls_hidden = 48;
  int reg_hidden = 32;
  int num_classes = 6;  // foreground classes; background is index num_classes
  double level_split = 20.0;  // RoIs with sqrt(area) below this pool from the fine level

  int anchors_per_location() const { return static_cast<int>(fine_anchor_sizes.size() * anchor_ratios.size()); }
  int roi_features() const { return neck_channels * roi_size * roi_size; }

  nlohmann::ordered_json to_json() const {
    return {{"in_channels", in_channels},
            {"stage_channels", stage_channels},
            {"neck_channels", neck_channels},
            {"fine_anchor_sizes", fine_anchor_sizes},
            {"coarse_anchor_sizes", coarse_anchor_sizes},
            {"anchor_ratios", anchor_ratios},
            {"roi_size", roi_size},
            {"roi_sampling", roi_sampling},
            {"cls_hidden", cls_hidden},
            {"reg_hidden", reg_hidden},
            {"num_classes", num_classes},
            {"level_split", level_split}};
  }

  static DetectorArch from_json(const nlohmann::json& j) {
    DetectorArch a;
    a.in_channels = j.at("in_channels").get<int>();
    a.stage_channels = j.at("stage_channels").get<std::array<int, 4>>();
    a.neck_channels = j.at("neck_channels").get<int>();
    a.fine_anchor_sizes = j.at("fine_anchor_sizes").get<std::vector<double>>();
    a.coarse_anchor_sizes = j.at("coarse_anchor_sizes").get<std::vector<double>>();
    a.anchor_ratios = j.at("anchor_ratios").get<std::vector<double>>();
    a.roi_size = j.at("roi_size").get<int>();
    a.roi_sampling = j.at("roi_sampling").get<int>();
    a.cls_hidden = j.at("cls_hidden").get<int>();
    a.reg_hidden = j.at("reg_hidden").get<int>();
    a.num_classes = j.at("num_classes").get<int>();
    a.level_split = j.at("level_split").get<double>();
    a.validate();
    return a;
  }

  void validate() const {
    if (fine_anchor_sizes.size() != coarse_anchor_sizes.size() || fine_anchor_sizes.empty() || anchor_ratios.empty()) {
      throw std::invalid_argument("detector: both levels need the same non-empty anchor layout");
    }
    if (num_classes < 1) throw std::invalid_argument("detector: num_classes must be >= 1");
    if (roi_size < 1 || roi_sampling < 1) throw std::invalid_argument("detector: invalid RoIAlign settings");
  }

  friend bool operator==(const DetectorArch&, const DetectorArch&) = default;
};

struct DetectorParams {
  DetectorArch arch;
  ParamSet params;

  int num_classes() const { return arch.num_classes; }
  int c_total() const { return arch.num_classes + 1; }
  int background() const { return arch.num_classes; }

  friend bool operator==(const DetectorParams&, const DetectorParams&) = default;
};

namespace detail {

inline nn::ConvSpec backbone_spec(const DetectorArch& a, int stage) {
  const int in = stage == 0 ? a.in_channels : a.stage_channels[stage - 1];
  return {in, a.stage_channels[stage], 3, 2, 1};
}
inline nn::ConvSpec lateral_spec(const DetectorArch& a, int stage) { return {a.stage_channels[stage], a.neck_channels, 1, 1, 0}; }
inline nn::ConvSpec rpn_conv_spec(const DetectorArch& a) { return {a.neck_channels, a.neck_channels, 3, 1, 1}; }
inline nn::ConvSpec rpn_cls_spec(const DetectorArch& a) { return {a.neck_channels, a.anchors_per_location(), 1, 1, 0}; }
inline nn::ConvSpec rpn_reg_spec(const DetectorArch& a) { return {a.neck_channels, 4 * a.anchors_per_location(), 1, 1, 0}; }

inline void normal_fill(std::vector<double>& v, double std, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std);
  for (auto& x : v) x = dist(rng);
}

}  // namespace detail

inline constexpr const char* kLateralNames[3] = {"neck.lateral2", "neck.lateral3", "neck.lateral4"};

/// Kaiming-normal convolutions / hidden layers; small-variance output layers.
inline DetectorParams init_detector(const DetectorArch& arch, Rng& rng) {
  arch.validate();
  DetectorParams d;
  d.arch = arch;
  auto conv = [&](const std::string& name, ParamGroup g, const nn::ConvSpec& s, double std) {
    auto& w = d.params.add(name + ".weight", g, {s.out, s.fan_in()});
    detail::normal_fill(w.value, std, rng);
    d.params.add(name + ".bias", g, {s.out});
  };
  auto linear = [&](const std::string& name, ParamGroup g, int in, int out, double std) {
    auto& w = d.params.add(name + ".weight", g, {out, in});
    detail::normal_fill(w.value, std, rng);
    d.params.add(name + ".bias", g, {out});
  };
  for (int s = 0; s < 4; ++s) {
    const auto spec = detail::backbone_spec(arch, s);
    conv("backbone.conv" + std::to_string(s + 1), ParamGroup::backbone, spec, std::sqrt(2.0 / spec.fan_in()));
  }
  for (int l = 0; l < 3; ++l) {
    const auto spec = detail::lateral_spec(arch, l + 1);
    conv(kLateralNames[l], ParamGroup::neck, spec, std::sqrt(1.0 / spec.fan_in()));
  }
  const auto rc = detail::rpn_conv_spec(arch);
  conv("rpn.conv", ParamGroup::rpn, rc, std::sqrt(2.0 / rc.fan_in()));
  conv("rpn.cls", ParamGroup::rpn, detail::rpn_cls_spec(arch), 0.01);
  conv("rpn.reg", ParamGroup::rpn, detail::rpn_reg_spec(arch), 0.01);
  const int f = arch.roi_features();
  linear("roi_classifier.fc1", ParamGroup::roi_classifier, f, arch.cls_hidden, std::sqrt(2.0 / f));
  linear("roi_classifier.fc2", ParamGroup::roi_classifier, arch.cls_hidden, arch.num_classes + 1, 0.01);
  linear("roi_regressor.fc1", ParamGroup::roi_regressor, f, arch.reg_hidden, std::sqrt(2.0 / f));
  linear("roi_regressor.fc2", ParamGroup::roi_regressor, arch.reg_hidden, 4, 0.001);
  return d;
}

// ---------------------------------------------------------------------------
// Box parametrization

struct BoxCoder {
  std::array<double, 4> stds{0.1, 0.1, 0.2, 0.2};
  double max_log_ratio = std::log(1000.0 / 16.0);

  std::array<double, 4> encode(const Box& ref, const Box& target) const {
    const double pw = std::max(ref.width(), 1e-6);
    const double ph = std::max(ref.height(), 1e-6);
    const double gw = std::max(target.width(), 1e-6);
    const double gh = std::max(target.height(), 1e-6);
    return {(target.cx() - ref.cx()) / pw / stds[0], (target.cy() - ref.cy()) / ph / stds[1],
            std::log(gw / pw) / stds[2], std::log(gh / ph) / stds[3]};
  }

  Box decode(const Box& ref, const double* d) const {
    const double pw = std::max(ref.width(), 1e-6);
    const double ph = std::max(ref.height(), 1e-6);
    const double cx = ref.cx() + d[0] * stds[0] * pw;
    const double cy = ref.cy() + d[1] * stds[1] * ph;
    const double w = pw * std::exp(std::clamp(d[2] * stds[2], -max_log_ratio, max_log_ratio));
    const double h = ph * std::exp(std::clamp(d[3] * stds[3], -max_log_ratio, max_log_ratio));
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  }

  /// Chain rule through decode: dL/d(box corners) -> dL/d(deltas).
  std::array<double, 4> decode_backward(const Box& ref, const double* d, const std::array<double, 4>& dbox) const {
    const double pw = std::max(ref.width(), 1e-6);
    const double ph = std::max(ref.height(), 1e-6);
    const double lw = d[2] * stds[2];
    const double lh = d[3] * stds[3];
    const double w = pw * std::exp(std::clamp(lw, -max_log_ratio, max_log_ratio));
    const double h = ph * std::exp(std::clamp(lh, -max_log_ratio, max_log_ratio));
    std::array<double, 4> out{};
    out[0] = (dbox[0] + dbox[2]) * stds[0] * pw;
    out[1] = (dbox[1] + dbox[3]) * stds[1] * ph;
    out[2] = std::abs(lw) < max_log_ratio ? 0.5 * (dbox[2] - dbox[0]) * w * stds[2] : 0.0;
    out[3] = std::abs(lh) < max_log_ratio ? 0.5 * (dbox[3] - dbox[1]) * h * stds[3] : 0.0;
    return out;
  }
};

inline BoxCoder rpn_coder() { return BoxCoder{{1.0, 1.0, 1.0, 1.0}}; }
inline BoxCoder roi_coder() { return BoxCoder{}; }

// ---------------------------------------------------------------------------
// Settings

struct RpnTrainSettings {
  double pos_iou = 0.7;
  double neg_iou = 0.3;
  double min_pos_iou = 0.3;
  int num_samples = 64;
  double pos_fraction = 0.5;
};

struct ProposalSettings {
  int pre_nms_per_level = 300;
  double nms_iou = 0.7;
  int max_proposals = 100;
  double min_size = 1.0;
};

struct RoiTrainSettings {
  double fg_iou = 0.5;
  int num_samples = 64;
  double fg_fraction = 0.25;
  bool add_gt_as_proposals = true;
};

struct DetectSettings {
  ProposalSettings proposals{1000, 0.7, 300, 1.0};
  double score_threshold = 0.05;
  double nms_iou = 0.5;
  int max_detections = 100;
};

struct DetectorSettings {
  RpnTrainSettings rpn;
  ProposalSettings train_proposals;
  RoiTrainSettings roi;
  DetectSettings detect;
};

// ---------------------------------------------------------------------------
// Forward outputs

/// Flattened RPN outputs; anchor i has logit[i] and deltas[4i .. 4i+3].
struct RpnOutput {
  std::vector<Box> anchors;
  std::vector<int> level;
  std::vector<double> logits;
  std::vector<double> deltas;
};

/// One (logits, box) pair per input proposal, order preserved.
struct RoIPrediction {
  std::vector<Box> rois;
  int c_total = 0;
  std::vector<double> logits;  // [n, c_total]
  std::vector<double> deltas;  // [n, 4], class-agnostic
  std::vector<Box> boxes;      // deltas decoded against rois (not clipped)
  int batch = -1;              // handle for ImagePass::add_roi_grad

  std::size_t size() const { return rois.size(); }
  const double* logits_row(std::size_t i) const { return logits.data() + i * c_total; }
};

/// Forward state for one image. With `keep_cache` the pass records
/// activations so gradients added through add_rpn_grad/add_roi_grad can be
/// back-propagated by backward().
class ImagePass {
 public:
  ImagePass(const DetectorParams& det, const Image& image, bool keep_cache)
      : det_(&det), keep_(keep_cache), width_(image.width), height_(image.height) {
    const auto& a = det.arch;
    if (image.channels != a.in_channels) throw std::invalid_argument("ImagePass: channel mismatch");
    nn::FeatureMap x(image.channels, image.height, image.width);
    for (std::size_t i = 0; i < image.data.size(); ++i) x.data[i] = image.data[i];
    const nn::FeatureMap* cur = &x;
    for (int s = 0; s < 4; ++s) {
      const auto spec = detail::backbone_spec(a, s);
      const std::string n = "backbone.conv" + std::to_string(s + 1);
      stage_[s] = nn::conv_forward(*cur, value(n + ".weight"), value(n + ".bias"), spec, stage_col_[s]);
      nn::relu_inplace(stage_[s]);
      cur = &stage_[s];
    }
    lat_[0] = nn::conv_forward(stage_[1], value("neck.lateral2.weight"), value("neck.lateral2.bias"),
                               detail::lateral_spec(a, 1), lat_col_[0]);
    lat_[1] = nn::conv_forward(stage_[2], value("neck.lateral3.weight"), value("neck.lateral3.bias"),
                               detail::lateral_spec(a, 2), lat_col_[1]);
    lat_[2] = nn::conv_forward(stage_[3], value("neck.lateral4.weight"), value("neck.lateral4.bias"),
                               detail::lateral_spec(a, 3), lat_col_[2]);
    levels_[1] = lat_[1];
    auto up4 = nn::upsample_nearest(lat_[2], lat_[1].height, lat_[1].width);
    for (std::size_t i = 0; i < up4.data.size(); ++i) levels_[1].data[i] += up4.data[i];
    levels_[0] = lat_[0];
    auto up3 = nn::upsample_nearest(levels_[1], lat_[0].height, lat_[0].width);
    for (std::size_t i = 0; i < up3.data.size(); ++i) levels_[0].data[i] += up3.data[i];
    if (!keep_) {
      for (auto& c : stage_col_) c.resize(0, 0);
      for (auto& c : lat_col_) c.resize(0, 0);
    }
    d_levels_[0] = nn::FeatureMap(levels_[0].channels, levels_[0].height, levels_[0].width);
    d_levels_[1] = nn::FeatureMap(levels_[1].channels, levels_[1].height, levels_[1].width);
  }

  int width() const { return width_; }
  int height() const { return height_; }
  const DetectorParams& detector() const { return *det_; }
  const nn::FeatureMap& level(int l) const { return levels_[l]; }
  double level_stride(int l) const { return l == 0 ? 4.0 : 8.0; }

  const RpnOutput& rpn() {
    if (!rpn_) compute_rpn();
    return *rpn_;
  }

  void add_rpn_grad(std::span<const double> d_logits, std::span<const double> d_deltas) {
    if (!keep_) throw std::logic_error("ImagePass: gradient on an inference pass");
    rpn();
    if (d_rpn_logits_.empty()) {
      d_rpn_logits_.assign(rpn_->logits.size(), 0.0);
      d_rpn_deltas_.assign(rpn_->deltas.size(), 0.0);
    }
    for (std::size_t i = 0; i < d_logits.size(); ++i) d_rpn_logits_[i] += d_logits[i];
    for (std::size_t i = 0; i < d_deltas.size(); ++i) d_rpn_deltas_[i] += d_deltas[i];
  }

  /// Decoded, clipped, NMS-filtered proposals sorted by objectness.
  std::vector<ScoredBox> proposals(const ProposalSettings& s) {
    const auto& out = rpn();
    const BoxCoder coder = rpn_coder();
    std::vector<ScoredBox> cand;
    for (int l = 0; l < 2; ++l) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < out.anchors.size(); ++i) {
        if (out.level[i] == l) idx.push_back(i);
      }
      std::stable_sort(idx.begin(), idx.end(),
                       [&](std::size_t a, std::size_t b) { return out.logits[a] > out.logits[b]; });
      if (static_cast<int>(idx.size()) > s.pre_nms_per_level) idx.resize(s.pre_nms_per_level);
      for (std::size_t i : idx) {
        const Box b = clip_box(coder.decode(out.anchors[i], &out.deltas[4 * i]), width_, height_);
        if (b.width() < s.min_size || b.height() < s.min_size) continue;
        cand.push_back({b, nn::sigmoid(out.logits[i]), 0});
      }
    }
    std::vector<ScoredBox> result;
    for (std::size_t k : nms(cand, s.nms_iou)) {
      if (static_cast<int>(result.size()) >= s.max_proposals) break;
      result.push_back(cand[k]);
    }
    return result;
  }

  RoIPrediction roi_forward(const std::vector<Box>& rois) {
    const auto& a = det_->arch;
    const int n = static_cast<int>(rois.size());
    const int f = a.roi_features();
    RoIBatch batch;
    batch.rois = rois;
    batch.x.resize(n, f);
    batch.level.resize(n);
    for (int i = 0; i < n; ++i) {
      const int l = std::sqrt(std::max(rois[i].area(), 0.0)) < a.level_split ? 0 : 1;
      batch.level[i] = l;
      nn::roi_align_forward(levels_[l], rois[i], roi_spec(l), batch.x.row(i).data());
    }
    RoIPrediction pred;
    pred.rois = rois;
    pred.c_total = det_->c_total();
    pred.logits.resize(static_cast<std::size_t>(n) * pred.c_total);
    pred.deltas.resize(static_cast<std::size_t>(n) * 4);
    if (n > 0) {
      batch.h_cls = dense(batch.x, "roi_classifier.fc1", a.cls_hidden, f, true);
      batch.h_reg = dense(batch.x, "roi_regressor.fc1", a.reg_hidden, f, true);
      nn::Matrix logits = dense(batch.h_cls, "roi_classifier.fc2", pred.c_total, a.cls_hidden, false);
      nn::Matrix deltas = dense(batch.h_reg, "roi_regressor.fc2", 4, a.reg_hidden, false);
      std::copy(logits.data(), logits.data() + logits.size(), pred.logits.begin());
      std::copy(deltas.data(), deltas.data() + deltas.size(), pred.deltas.begin());
    }
    const BoxCoder coder = roi_coder();
    for (int i = 0; i < n; ++i) pred.boxes.push_back(coder.decode(rois[i], &pred.deltas[4 * i]));
    if (keep_) {
      batch.d_logits.assign(pred.logits.size(), 0.0);
      batch.d_deltas.assign(pred.deltas.size(), 0.0);
      pred.batch = static_cast<int>(batches_.size());
      batches_.push_back(std::move(batch));
    }
    return pred;
  }

  void add_roi_grad(int batch, std::span<const double> d_logits, std::span<const double> d_deltas) {
    if (!keep_ || batch < 0 || batch >= static_cast<int>(batches_.size())) {
      throw std::logic_error("ImagePass: unknown RoI batch");
    }
    auto& b = batches_[batch];
    for (std::size_t i = 0; i < d_logits.size(); ++i) b.d_logits[i] += d_logits[i];
    for (std::size_t i = 0; i < d_deltas.size(); ++i) b.d_deltas[i] += d_deltas[i];
    b.touched = true;
  }

  /// Accumulates parameter gradients for the groups enabled in `trainable`.
  void backward(ParamSet& grads, const GroupMask& trainable) {
    if (!keep_) throw std::logic_error("ImagePass: backward on an inference pass");
    const bool feat_grad = has(trainable, ParamGroup::backbone) || has(trainable, ParamGroup::neck);
    const auto& a = det_->arch;
    for (auto& b : batches_) {
      if (!b.touched || b.rois.empty()) continue;
      const int n = static_cast<int>(b.rois.size());
      const int f = a.roi_features();
      nn::ConstMatrixMap dlog(b.d_logits.data(), n, det_->c_total());
      nn::ConstMatrixMap ddel(b.d_deltas.data(), n, 4);
      nn::Matrix dx = nn::Matrix::Zero(n, f);
      auto branch = [&](const char* prefix, ParamGroup g, const nn::Matrix& h, const auto& dout, int hidden, int outs) {
        const bool train = has(trainable, g);
        if (!train && !feat_grad) return;
        const std::string p(prefix);
        nn::ConstMatrixMap w2(value(p + ".fc2.weight").data(), outs, hidden);
        nn::Matrix dh = dout * w2;
        for (Eigen::Index i = 0; i < dh.size(); ++i) {
          if (!(h.data()[i] > 0.0)) dh.data()[i] = 0.0;
        }
        if (train) {
          nn::MatrixMap gw2(grads.value(p + ".fc2.weight").data(), outs, hidden);
          gw2.noalias() += dout.transpose() * h;
          auto& gb2 = grads.value(p + ".fc2.bias");
          for (int o = 0; o < outs; ++o) gb2[o] += dout.col(o).sum();
          nn::MatrixMap gw1(grads.value(p + ".fc1.weight").data(), hidden, f);
          gw1.noalias() += dh.transpose() * b.x;
          auto& gb1 = grads.value(p + ".fc1.bias");
          for (int o = 0; o < hidden; ++o) gb1[o] += dh.col(o).sum();
        }
        if (feat_grad) {
          nn::ConstMatrixMap w1(value(p + ".fc1.weight").data(), hidden, f);
          dx.noalias() += dh * w1;
        }
      };
      branch("roi_classifier", ParamGroup::roi_classifier, b.h_cls, dlog, a.cls_hidden, det_->c_total());
      branch("roi_regressor", ParamGroup::roi_regressor, b.h_reg, ddel, a.reg_hidden, 4);
      if (feat_grad) {
        for (int i = 0; i < n; ++i) {
          nn::roi_align_backward(d_levels_[b.level[i]], b.rois[i], roi_spec(b.level[i]), dx.row(i).data());
        }
      }
    }
    if (!d_rpn_logits_.empty() && (has(trainable, ParamGroup::rpn) || feat_grad)) rpn_backward(grads, trainable, feat_grad);
    if (feat_grad) neck_backbone_backward(grads, trainable);
  }

 private:
  struct RoIBatch {
    std::vector<Box> rois;
    std::vector<int> level;
    nn::Matrix x;
    nn::Matrix h_cls;
    nn::Matrix h_reg;
    std::vector<double> d_logits;
    std::vector<double> d_deltas;
    bool touched = false;
  };

  struct RpnLevelCache {
    nn::Matrix col_conv;
    nn::FeatureMap hidden;
    nn::Matrix col_hidden;
    nn::Matrix col_hidden2;
    int h = 0;
    int w = 0;
  };

  const std::vector<double>& value(const std::string& name) const { return det_->params.value(name); }

  nn::RoiAlignSpec roi_spec(int level) const {
    return {det_->arch.roi_size, det_->arch.roi_sampling,
            static_cast<double>(levels_[level].width) / static_cast<double>(width_)};
  }

  nn::Matrix dense(const nn::Matrix& x, const std::string& prefix, int out, int in, bool relu) const {
    nn::ConstMatrixMap w(value(prefix + ".weight").data(), out, in);
    const auto& b = value(prefix + ".bias");
    nn::Matrix y = x * w.transpose();
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      for (int c = 0; c < out; ++c) {
        double v = y(r, c) + b[c];
        y(r, c) = relu ? (v > 0.0 ? v : 0.0) : v;
      }
    }
    return y;
  }

  void compute_rpn() {
    const auto& a = det_->arch;
    RpnOutput out;
    const int A = a.anchors_per_location();
    for (int l = 0; l < 2; ++l) {
      RpnLevelCache cache;
      const auto& feat = levels_[l];
      cache.h = feat.height;
      cache.w = feat.width;
      cache.hidden = nn::conv_forward(feat, value("rpn.conv.weight"), value("rpn.conv.bias"), detail::rpn_conv_spec(a),
                                      cache.col_conv);
      nn::relu_inplace(cache.hidden);
      auto cls = nn::conv_forward(cache.hidden, value("rpn.cls.weight"), value("rpn.cls.bias"), detail::rpn_cls_spec(a),
                                  cache.col_hidden);
      auto reg = nn::conv_forward(cache.hidden, value("rpn.reg.weight"), value("rpn.reg.bias"), detail::rpn_reg_spec(a),
                                  cache.col_hidden2);
      const auto& sizes = l == 0 ? a.fine_anchor_sizes : a.coarse_anchor_sizes;
      const double stride = level_stride(l);
      const double sx = static_cast<double>(width_) / feat.width;
      const double sy = static_cast<double>(height_) / feat.height;
      (void)stride;
      for (int k = 0; k < A; ++k) {
        const double size = sizes[k / a.anchor_ratios.size()];
        const double ratio = a.anchor_ratios[k % a.anchor_ratios.size()];
        const double aw = size / std::sqrt(ratio);
        const double ah = size * std::sqrt(ratio);
        for (int y = 0; y < feat.height; ++y) {
          for (int x = 0; x < feat.width; ++x) {
            const double cx = (x + 0.5) * sx;
            const double cy = (y + 0.5) * sy;
            out.anchors.push_back({cx - 0.5 * aw, cy - 0.5 * ah, cx + 0.5 * aw, cy + 0.5 * ah});
            out.level.push_back(l);
            out.logits.push_back(cls.at(k, y, x));
            for (int j = 0; j < 4; ++j) out.deltas.push_back(reg.at(4 * k + j, y, x));
          }
        }
      }
      if (!keep_) {
        cache.col_conv.resize(0, 0);
        cache.col_hidden.resize(0, 0);
        cache.col_hidden2.resize(0, 0);
      }
      rpn_cache_[l] = std::move(cache);
    }
    rpn_ = std::move(out);
  }

  void rpn_backward(ParamSet& grads, const GroupMask& trainable, bool feat_grad) {
    const auto& a = det_->arch;
    const int A = a.anchors_per_location();
    const bool train = has(trainable, ParamGroup::rpn);
    std::size_t offset = 0;
    for (int l = 0; l < 2; ++l) {
      auto& c = rpn_cache_[l];
      const std::size_t plane = static_cast<std::size_t>(c.h) * c.w;
      nn::FeatureMap dcls(A, c.h, c.w);
      nn::FeatureMap dreg(4 * A, c.h, c.w);
      for (int k = 0; k < A; ++k) {
        for (std::size_t p = 0; p < plane; ++p) {
          const std::size_t i = offset + k * plane + p;
          dcls.data[k * plane + p] = d_rpn_logits_[i];
          for (int j = 0; j < 4; ++j) dreg.data[(4 * k + j) * plane + p] = d_rpn_deltas_[4 * i + j];
        }
      }
      offset += static_cast<std::size_t>(A) * plane;
      nn::FeatureMap dhidden(a.neck_channels, c.h, c.w);
      nn::conv_backward(c.col_hidden, value("rpn.cls.weight"), detail::rpn_cls_spec(a), dcls,
                        train ? &grads.value("rpn.cls.weight") : nullptr, train ? &grads.value("rpn.cls.bias") : nullptr,
                        &dhidden);
      nn::conv_backward(c.col_hidden2, value("rpn.reg.weight"), detail::rpn_reg_spec(a), dreg,
                        train ? &grads.value("rpn.reg.weight") : nullptr, train ? &grads.value("rpn.reg.bias") : nullptr,
                        &dhidden);
      nn::relu_backward(c.hidden, dhidden);
      nn::conv_backward(c.col_conv, value("rpn.conv.weight"), detail::rpn_conv_spec(a), dhidden,
                        train ? &grads.value("rpn.conv.weight") : nullptr, train ? &grads.value("rpn.conv.bias") : nullptr,
                        feat_grad ? &d_levels_[l] : nullptr);
    }
  }

  void neck_backbone_backward(ParamSet& grads, const GroupMask& trainable) {
    const auto& a = det_->arch;
    const bool neck = has(trainable, ParamGroup::neck);
    const bool backbone = has(trainable, ParamGroup::backbone);
    nn::FeatureMap dp2 = d_levels_[0];
    nn::FeatureMap dp3 = d_levels_[1];
    nn::upsample_nearest_backward(dp2, dp3);
    nn::FeatureMap dl4(lat_[2].channels, lat_[2].height, lat_[2].width);
    nn::upsample_nearest_backward(dp3, dl4);
    std::array<nn::FeatureMap, 4> dstage;
    for (int s = 1; s < 4; ++s) dstage[s] = nn::FeatureMap(stage_[s].channels, stage_[s].height, stage_[s].width);
    const nn::FeatureMap* dlat[3] = {&dp2, &dp3, &dl4};
    for (int l = 0; l < 3; ++l) {
      const std::string n = kLateralNames[l];
      nn::conv_backward(lat_col_[l], value(n + ".weight"), detail::lateral_spec(a, l + 1), *dlat[l],
                        neck ? &grads.value(n + ".weight") : nullptr, neck ? &grads.value(n + ".bias") : nullptr,
                        backbone ? &dstage[l + 1] : nullptr);
    }
    if (!backbone) return;
    for (int s = 3; s >= 0; --s) {
      nn::relu_backward(stage_[s], dstage[s]);
      const std::string n = "backbone.conv" + std::to_string(s + 1);
      if (s > 0 && dstage[s - 1].data.empty()) {
        dstage[s - 1] = nn::FeatureMap(stage_[s - 1].channels, stage_[s - 1].height, stage_[s - 1].width);
      }
      nn::conv_backward(stage_col_[s], value(n + ".weight"), detail::backbone_spec(a, s), dstage[s],
                        &grads.value(n + ".weight"), &grads.value(n + ".bias"), s > 0 ? &dstage[s - 1] : nullptr);
    }
  }

  const DetectorParams* det_;
  bool keep_;
  int width_;
  int height_;
  std::array<nn::FeatureMap, 4> stage_;
  std::array<nn::Matrix, 4> stage_col_;
  std::array<nn::FeatureMap, 3> lat_;
  std::array<nn::Matrix, 3> lat_col_;
  std::array<nn::FeatureMap, 2> levels_;
  std::array<nn::FeatureMap, 2> d_levels_;
  std::optional<RpnOutput> rpn_;
  std::array<RpnLevelCache, 2> rpn_cache_;
  std::vector<double> d_rpn_logits_;
  std::vector<double> d_rpn_deltas_;
  std::vector<RoIBatch> batches_;
};

// ---------------------------------------------------------------------------
// Public inference entry points

/// Class-agnostic proposals sorted by descending objectness, post-NMS.
inline std::vector<ScoredBox> forward_rpn(const DetectorParams& det, const Image& image, const ProposalSettings& s) {
  ImagePass pass(det, image, false);
  return pass.proposals(s);
}

inline RoIPrediction forward_roi(const DetectorParams& det, const Image& image, const std::vector<Box>& proposals) {
  ImagePass pass(det, image, false);
  return pass.roi_forward(proposals);
}

/// First min(n, size) proposals of an already score-sorted list.
template <class T>
std::vector<T> top_n_proposals(const std::vector<T>& proposals, std::size_t n) {
  return std::vector<T>(proposals.begin(), proposals.begin() + static_cast<std::ptrdiff_t>(std::min(n, proposals.size())));
}

/// Per-class scored detections from RoI predictions: softmax scores,
/// class-agnostic boxes clipped to the image, per-class NMS.
inline std::vector<ScoredBox> postprocess_detections(const RoIPrediction& pred, int width, int height,
                                                     const DetectSettings& s) {
  const int c = pred.c_total;
  const auto probs = nn::softmax_rows(pred.logits, c);
  std::vector<ScoredBox> cand;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const Box b = clip_box(pred.boxes[i], width, height);
    if (b.width() <= 0.0 || b.height() <= 0.0) continue;
    for (int k = 0; k < c - 1; ++k) {
      const double p = probs[i * c + k];
      if (p >= s.score_threshold) cand.push_back({b, p, k});
    }
  }
  std::vector<ScoredBox> out;
  for (std::size_t k : batched_nms(cand, s.nms_iou)) {
    if (static_cast<int>(out.size()) >= s.max_detections) break;
    out.push_back(cand[k]);
  }
  return out;
}

inline std::vector<ScoredBox> detect(const DetectorParams& det, const Image& image, const DetectSettings& s) {
  ImagePass pass(det, image, false);
  std::vector<Box> rois;
  for (const auto& p : pass.proposals(s.proposals)) rois.push_back(p.box);
  const auto pred = pass.roi_forward(rois);
  return postprocess_detections(pred, image.width, image.height, s);
}

// ---------------------------------------------------------------------------
// Targets and losses

struct HeadLoss {
  double cls = 0.0;
  double reg = 0.0;
  std::vector<double> d_logits;  // d(cls + reg) / d logits
  std::vector<double> d_deltas;
};

/// Per-RoI classification label (background = c_total - 1) and regression target.
struct RoiTargets {
  std::vector<int> labels;
  std::vector<Box> boxes;
  std::vector<char> regress;
};

inline RoiTargets assign_roi_targets(const std::vector<Box>& rois, const std::vector<Box>& gt,
                                     const std::vector<int>& gt_labels, int background, double fg_iou) {
  RoiTargets t;
  for (const auto& r : rois) {
    double best = -1.0;
    int arg = -1;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(r, gt[g]);
      if (v > best) {
        best = v;
        arg = static_cast<int>(g);
      }
    }
    if (arg >= 0 && best >= fg_iou) {
      t.labels.push_back(gt_labels[arg]);
      t.boxes.push_back(gt[arg]);
      t.regress.push_back(1);
    } else {
      t.labels.push_back(background);
      t.boxes.push_back(r);
      t.regress.push_back(0);
    }
  }
  return t;
}

struct RoiSample {
  std::vector<Box> rois;
  RoiTargets targets;
};

/// Balanced fg/bg RoI sampling over proposals (plus ground truth boxes).
inline RoiSample sample_rois(const std::vector<Box>& proposals, const std::vector<Box>& gt,
                             const std::vector<int>& gt_labels, int background, const RoiTrainSettings& s, Rng& rng) {
  std::vector<Box> cand = proposals;
  if (s.add_gt_as_proposals) cand.insert(cand.end(), gt.begin(), gt.end());
  const auto t = assign_roi_targets(cand, gt, gt_labels, background, s.fg_iou);
  std::vector<std::size_t> fg;
  std::vector<std::size_t> bg;
  for (std::size_t i = 0; i < cand.size(); ++i) (t.labels[i] != background ? fg : bg).push_back(i);
  std::shuffle(fg.begin(), fg.end(), rng);
  std::shuffle(bg.begin(), bg.end(), rng);
  const auto n_fg = std::min(fg.size(), static_cast<std::size_t>(std::lround(s.num_samples * s.fg_fraction)));
  const auto n_bg = std::min(bg.size(), static_cast<std::size_t>(s.num_samples) - n_fg);
  RoiSample out;
  auto take = [&](std::size_t i) {
    out.rois.push_back(cand[i]);
    out.targets.labels.push_back(t.labels[i]);
    out.targets.boxes.push_back(t.boxes[i]);
    out.targets.regress.push_back(t.regress[i]);
  };
  for (std::size_t k = 0; k < n_fg; ++k) take(fg[k]);
  for (std::size_t k = 0; k < n_bg; ++k) take(bg[k]);
  return out;
}

/// Cross-entropy over c_total plus L1 on the box parametrization of
/// foreground RoIs, both normalized by the number of RoIs. Optional
/// per-RoI classification weights normalize by their sum instead.
inline HeadLoss roi_head_loss(const RoIPrediction& pred, const RoiTargets& t, const std::vector<double>* cls_weights,
                              const BoxCoder& coder = roi_coder()) {
  HeadLoss out;
  const std::size_t n = pred.size();
  const int c = pred.c_total;
  out.d_logits.assign(n * c, 0.0);
  out.d_deltas.assign(n * 4, 0.0);
  if (n == 0) return out;
  double norm = static_cast<double>(n);
  if (cls_weights) {
    norm = 0.0;
    for (double w : *cls_weights) norm += w;
    norm = std::max(norm, 1.0);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double w = cls_weights ? (*cls_weights)[i] : 1.0;
    const auto logp = nn::log_softmax_row(pred.logits_row(i), c);
    out.cls += -w * logp[t.labels[i]] / norm;
    for (int k = 0; k < c; ++k) {
      out.d_logits[i * c + k] = w * (std::exp(logp[k]) - (k == t.labels[i] ? 1.0 : 0.0)) / norm;
    }
    if (!t.regress[i]) continue;
    const auto target = coder.encode(pred.rois[i], t.boxes[i]);
    for (int k = 0; k < 4; ++k) {
      const double diff = pred.deltas[4 * i + k] - target[k];
      out.reg += std::abs(diff) / static_cast<double>(n);
      out.d_deltas[4 * i + k] = (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0)) / static_cast<double>(n);
    }
  }
  return out;
}

/// Supervised RoI loss for one labeled image.
inline HeadLoss supervised_loss(const RoIPrediction& pred, const RoiTargets& targets) {
  return roi_head_loss(pred, targets, nullptr);
}

struct RpnLoss {
  double cls = 0.0;
  double reg = 0.0;
  std::vector<double> d_logits;
  std::vector<double> d_deltas;
};

/// Standard anchor assignment, balanced sampling, BCE objectness + L1 deltas.
inline RpnLoss rpn_loss(const RpnOutput& out, const std::vector<Box>& gt, const RpnTrainSettings& s, Rng& rng) {
  const std::size_t n = out.anchors.size();
  std::vector<int> label(n, -1);
  std::vector<int> match(n, -1);
  std::vector<double> best_for_gt(gt.size(), 0.0);
  std::vector<double> max_iou(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(out.anchors[i], gt[g]);
      if (v > max_iou[i]) {
        max_iou[i] = v;
        match[i] = static_cast<int>(g);
      }
      best_for_gt[g] = std::max(best_for_gt[g], v);
    }
    if (max_iou[i] < s.neg_iou) label[i] = 0;
    if (max_iou[i] >= s.pos_iou) label[i] = 1;
  }
  for (std::size_t g = 0; g < gt.size(); ++g) {
    if (best_for_gt[g] < s.min_pos_iou) continue;
    for (std::size_t i = 0; i < n; ++i) {
      if (iou(out.anchors[i], gt[g]) == best_for_gt[g]) {
        label[i] = 1;
        match[i] = static_cast<int>(g);
      }
    }
  }
  std::vector<std::size_t> pos;
  std::vector<std::size_t> neg;
  for (std::size_t i = 0; i < n; ++i) {
    if (label[i] == 1) pos.push_back(i);
    if (label[i] == 0) neg.push_back(i);
  }
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  const auto n_pos = std::min(pos.size(), static_cast<std::size_t>(s.num_samples * s.pos_fraction));
  const auto n_neg = std::min(neg.size(), static_cast<std::size_t>(s.num_samples) - n_pos);
  RpnLoss loss;
  loss.d_logits.assign(n, 0.0);
  loss.d_deltas.assign(4 * n, 0.0);
  const double norm = static_cast<double>(std::max<std::size_t>(n_pos + n_neg, 1));
  const BoxCoder coder = rpn_coder();
  auto bce = [&](std::size_t i, double y) {
    const double z = out.logits[i];
    // log(1 + exp(-|z|)) + max(z, 0) - z*y
    loss.cls += (std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0) - z * y) / norm;
    loss.d_logits[i] = (nn::sigmoid(z) - y) / norm;
  };
  for (std::size_t k = 0; k < n_pos; ++k) {
    const std::size_t i = pos[k];
    bce(i, 1.0);
    const auto t = coder.encode(out.anchors[i], gt[match[i]]);
    for (int j = 0; j < 4; ++j) {
      const double diff = out.deltas[4 * i + j] - t[j];
      loss.reg += std::abs(diff) / norm;
      loss.d_deltas[4 * i + j] = (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0)) / norm;
    }
  }
  for (std::size_t k = 0; k < n_neg; ++k) bce(neg[k], 0.0);
  return loss;
}

}  // namespace ledet
