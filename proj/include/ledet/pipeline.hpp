#pragma once

// Training orchestration: the per-step semi-supervised objective, SGD with
// freeze policies, EMA teacher upkeep and the base / few-shot stages.

#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ledet/augment.hpp"
#include "ledet/checkpoint.hpp"
#include "ledet/data.hpp"
#include "ledet/detector.hpp"
#include "ledet/entreg.hpp"
#include "ledet/semisup.hpp"

namespace ledet {

enum class Stage { base_pretrain, novel_head, balanced_finetune };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::base_pretrain: return "base_pretrain";
    case Stage::novel_head: return "novel_head";
    case Stage::balanced_finetune: return "balanced_finetune";
  }
  return "?";
}

struct ScheduleConfig {
  int labeled_batch = 2;
  int unlabeled_batch = 4;
  double lr = 0.01;
  std::vector<int> milestones;
  double gamma = 0.1;
  int iterations = 100;
  int warmup_iters = 0;
  double warmup_ratio = 0.001;
  double momentum = 0.9;
  double weight_decay = 1e-4;

  void validate() const {
    if (labeled_batch < 1) throw std::invalid_argument("schedule: labeled_batch must be >= 1");
    if (unlabeled_batch < 0) throw std::invalid_argument("schedule: unlabeled_batch must be >= 0");
    if (iterations < 0) throw std::invalid_argument("schedule: iterations must be >= 0");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if ((i > 0 && milestones[i] <= milestones[i - 1]) || milestones[i] >= std::max(iterations, 1)) {
        throw std::invalid_argument("schedule: milestones must be strictly increasing and below iterations");
      }
    }
  }

  double lr_at(int step) const {
    double f = 1.0;
    for (int m : milestones) {
      if (step >= m) f *= gamma;
    }
    if (step < warmup_iters) {
      const double t = static_cast<double>(step) / warmup_iters;
      f *= warmup_ratio + (1.0 - warmup_ratio) * t;
    }
    return lr * f;
  }
};

struct TrainingConfig {
  Stage stage = Stage::base_pretrain;
  ScheduleConfig schedule;
  bool semi_supervised = true;
  bool entreg = true;
  double beta_multiplier = 2.0;
  SimilarityMeasure measure = SimilarityMeasure::cross_entropy;
  OverlapKind overlap = OverlapKind::iou;
  int entreg_proposals = 64;
  PseudoLabelSettings pseudo;
  double ema_momentum = 0.999;
  int unsup_warmup = 0;  // steps before unsupervised terms switch on
  DetectorSettings detector;
  AugmentationRecipe labeled_aug = AugmentationRecipe::for_branch(Branch::labeled, {56, 72});
  AugmentationRecipe strong_aug = AugmentationRecipe::for_branch(Branch::strong, {56, 72});
  AugmentationRecipe weak_aug = AugmentationRecipe::for_branch(Branch::weak, {56, 72});
  GroupMask trainable = all_groups();
  std::uint64_t seed = 0;

  LossWeights weights() const {
    if (!semi_supervised) return {0.0, 0.0};
    auto w = LossWeights::from_batch(schedule.labeled_batch, schedule.unlabeled_batch, beta_multiplier);
    if (!entreg) w.beta = 0.0;
    return w;
  }
};

struct LabeledSample {
  int image_id = 0;
  Image image;
  std::vector<Box> boxes;
  std::vector<int> labels;  // logit index, never background
};

struct TrainingData {
  std::vector<LabeledSample> labeled;
  std::vector<Image> unlabeled;
};

/// Per-step loss components. L_sup and L_soft include their RPN parts.
struct StepLog {
  long long step = 0;
  double l_sup = 0.0;
  double l_cls_soft = 0.0;
  double l_reg_soft = 0.0;
  double l_ent = 0.0;
  double l_iou = 0.0;
  double total = 0.0;
  double lr = 0.0;
  double l_rpn_sup = 0.0;
  double l_rpn_unsup = 0.0;
  int num_pseudo = 0;

  double l_soft() const { return l_cls_soft + l_reg_soft + l_rpn_unsup; }
};

inline const char* kMetricsHeader = "step,L_sup,L_cls_soft,L_reg_soft,L_ent,L_iou,total,lr,L_rpn_sup,L_rpn_unsup";

inline std::string metrics_row(const StepLog& s) {
  std::ostringstream os;
  os << std::setprecision(17) << s.step << ',' << s.l_sup << ',' << s.l_cls_soft << ',' << s.l_reg_soft << ','
     << s.l_ent << ',' << s.l_iou << ',' << s.total << ',' << s.lr << ',' << s.l_rpn_sup << ',' << s.l_rpn_unsup;
  return os.str();
}

/// Append-only CSV; the header is written when the file is new or empty.
class MetricsLog {
 public:
  explicit MetricsLog(const std::string& path) : out_(path, std::ios::app) {
    if (!out_) throw std::runtime_error("cannot open metrics log " + path);
    out_.seekp(0, std::ios::end);
    if (out_.tellp() == 0) out_ << kMetricsHeader << '\n';
  }
  void append(const StepLog& s) { out_ << metrics_row(s) << '\n' << std::flush; }

 private:
  std::ofstream out_;
};

/// The parameters an optimizer may touch under a freeze policy.
struct OptimizerView {
  GroupMask trainable{};
  std::vector<Param*> params;
};

inline OptimizerView apply_freeze_policy(ParamSet& params, const GroupMask& trainable) {
  OptimizerView v;
  v.trainable = trainable;
  bool any = false;
  for (bool b : trainable) any = any || b;
  if (!any) throw std::invalid_argument("freeze policy leaves no trainable group");
  for (ParamGroup g : kParamGroups) {
    if (!has(trainable, g)) continue;
    bool found = false;
    for (auto& p : params.entries()) {
      if (p.group == g) {
        v.params.push_back(&p);
        found = true;
      }
    }
    if (!found) throw std::invalid_argument(std::string("freeze policy names missing group ") + group_name(g));
  }
  return v;
}

/// SGD with momentum and L2 weight decay on the optimizer view only.
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(OptimizerView& view, const ParamSet& grads, double lr) {
    for (Param* p : view.params) {
      auto& buf = buffers_[p->name];
      if (buf.empty()) buf.assign(p->value.size(), 0.0);
      const auto& g = grads.value(p->name);
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double d = g[i] + weight_decay_ * p->value[i];
        buf[i] = momentum_ * buf[i] + d;
        p->value[i] -= lr * buf[i];
      }
    }
  }

 private:
  double momentum_;
  double weight_decay_;
  std::map<std::string, std::vector<double>> buffers_;
};

/// Boxes and labels carried through an augmentation; degenerate boxes dropped.
inline void map_targets(const AffineTransform& t, const std::vector<Box>& boxes, const std::vector<int>& labels,
                        int width, int height, std::vector<Box>& out_boxes, std::vector<int>& out_labels) {
  std::vector<std::size_t> keep;
  out_boxes = map_boxes(t, boxes, width, height, 2.0, &keep);
  out_labels.clear();
  for (std::size_t k : keep) out_labels.push_back(labels[k]);
}

class Trainer {
 public:
  Trainer(DetectorParams student, DetectorParams teacher, TrainingConfig cfg, const TrainingData& data)
      : cfg_(std::move(cfg)),
        data_(&data),
        student_(std::move(student)),
        ema_{std::move(teacher), cfg_.ema_momentum},
        sgd_(cfg_.schedule.momentum, cfg_.schedule.weight_decay),
        rng_labeled_(make_rng(cfg_.seed, 0x1ab)),
        rng_unlabeled_(make_rng(cfg_.seed, 0xe1)) {
    cfg_.schedule.validate();
    if (!(student_.arch == ema_.teacher.arch) || !student_.params.same_layout(ema_.teacher.params)) {
      throw std::invalid_argument("trainer: student and teacher layouts differ");
    }
    if (data.labeled.empty()) throw std::invalid_argument("trainer: no labeled samples");
    if (cfg_.semi_supervised && cfg_.schedule.unlabeled_batch > 0 && data.unlabeled.empty()) {
      throw std::invalid_argument("trainer: unlabeled batch requested but the unlabeled pool is empty");
    }
    view_ = apply_freeze_policy(student_.params, cfg_.trainable);
    grads_ = student_.params.zeros_like();
  }

  const DetectorParams& student() const { return student_; }
  const DetectorParams& teacher() const { return ema_.teacher; }
  const ParamSet& last_gradients() const { return grads_; }
  const TrainingConfig& config() const { return cfg_; }
  long long steps_done() const { return step_; }

  /// Gradients and losses of one step without touching parameters.
  StepLog compute_gradients() {
    grads_.set_zero();
    StepLog log;
    log.step = step_;
    log.lr = cfg_.schedule.lr_at(static_cast<int>(step_));
    const int bl = cfg_.schedule.labeled_batch;
    const auto w = cfg_.weights();
    for (int i = 0; i < bl; ++i) {
      const auto& sample = data_->labeled[uniform_int(rng_labeled_, 0, static_cast<int>(data_->labeled.size()) - 1)];
      labeled_image(sample, 1.0 / bl, log);
    }
    const bool unsup_on = cfg_.semi_supervised && step_ >= cfg_.unsup_warmup;
    const int bu = unsup_on ? cfg_.schedule.unlabeled_batch : 0;
    for (int i = 0; i < bu; ++i) {
      const auto& image = data_->unlabeled[uniform_int(rng_unlabeled_, 0, static_cast<int>(data_->unlabeled.size()) - 1)];
      unlabeled_image(image, w, 1.0 / bu, log);
    }
    log.total = total_loss(log.l_sup, log.l_soft(), log.l_ent, log.l_iou, w);
    if (!grads_.all_finite()) throw std::runtime_error("non-finite gradient at step " + std::to_string(step_));
    return log;
  }

  StepLog step() {
    StepLog log = compute_gradients();
    sgd_.step(view_, grads_, log.lr);
    ema_update(ema_, student_);
    ++step_;
    return log;
  }

  std::vector<StepLog> run(int steps, const std::function<void(const StepLog&)>& on_step = {}) {
    std::vector<StepLog> logs;
    for (int i = 0; i < steps; ++i) {
      logs.push_back(step());
      if (on_step) on_step(logs.back());
    }
    return logs;
  }

 private:
  bool features_trainable() const {
    return has(cfg_.trainable, ParamGroup::backbone) || has(cfg_.trainable, ParamGroup::neck);
  }
  bool rpn_trainable() const { return has(cfg_.trainable, ParamGroup::rpn) || features_trainable(); }

  static std::vector<double> scaled(const std::vector<double>& v, double s) {
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * s;
    return out;
  }

  std::vector<Box> train_proposals(ImagePass& pass) {
    std::vector<Box> out;
    for (const auto& p : pass.proposals(cfg_.detector.train_proposals)) out.push_back(p.box);
    return out;
  }

  void labeled_image(const LabeledSample& s, double scale, StepLog& log) {
    const auto view = augment(s.image, cfg_.labeled_aug, rng_labeled_);
    std::vector<Box> gt;
    std::vector<int> labels;
    map_targets(view.transform, s.boxes, s.labels, view.image.width, view.image.height, gt, labels);
    ImagePass pass(student_, view.image, true);
    if (rpn_trainable()) {
      const auto rl = rpn_loss(pass.rpn(), gt, cfg_.detector.rpn, rng_labeled_);
      log.l_rpn_sup += scale * (rl.cls + rl.reg);
      log.l_sup += scale * (rl.cls + rl.reg);
      pass.add_rpn_grad(scaled(rl.d_logits, scale), scaled(rl.d_deltas, scale));
    }
    const auto sample = sample_rois(train_proposals(pass), gt, labels, student_.background(), cfg_.detector.roi, rng_labeled_);
    const auto pred = pass.roi_forward(sample.rois);
    const auto hl = supervised_loss(pred, sample.targets);
    log.l_sup += scale * (hl.cls + hl.reg);
    pass.add_roi_grad(pred.batch, scaled(hl.d_logits, scale), scaled(hl.d_deltas, scale));
    pass.backward(grads_, cfg_.trainable);
  }

  void unlabeled_image(const Image& image, const LossWeights& w, double scale, StepLog& log) {
    const auto weak = augment(image, cfg_.weak_aug, rng_unlabeled_);
    const auto strong = augment(image, cfg_.strong_aug, rng_unlabeled_);
    const AffineTransform m = relate_views(strong, weak);
    ImagePass tpass(ema_.teacher, weak.image, false);
    const auto pseudo = generate_pseudo_labels(tpass, cfg_.pseudo, rng_unlabeled_);
    log.num_pseudo += static_cast<int>(pseudo.size());
    std::vector<Box> pboxes;
    std::vector<PseudoLabel> plabels;
    for (const auto& p : pseudo) {
      const Box b = clip_box(apply_affine(m, p.box), strong.image.width, strong.image.height);
      if (b.width() < 2.0 || b.height() < 2.0) continue;
      pboxes.push_back(b);
      plabels.push_back(p);
    }
    std::vector<int> pcls;
    for (const auto& p : plabels) pcls.push_back(p.class_id);

    ImagePass spass(student_, strong.image, true);
    const double soft_scale = w.alpha * scale;
    if (rpn_trainable()) {
      const auto rl = rpn_loss(spass.rpn(), pboxes, cfg_.detector.rpn, rng_unlabeled_);
      log.l_rpn_unsup += scale * (rl.cls + rl.reg);
      if (soft_scale != 0.0) spass.add_rpn_grad(scaled(rl.d_logits, soft_scale), scaled(rl.d_deltas, soft_scale));
    }
    const auto sample = sample_rois(train_proposals(spass), pboxes, pcls, student_.background(), cfg_.detector.roi,
                                    rng_unlabeled_);
    const auto targets = assign_pseudo_targets(sample.rois, pboxes, plabels, student_.background(), cfg_.detector.roi.fg_iou);
    const AffineTransform to_teacher = m.inverse();
    std::vector<Box> teacher_rois;
    for (const auto& r : sample.rois) teacher_rois.push_back(apply_affine(to_teacher, r));
    const auto tpred = tpass.roi_forward(teacher_rois);
    const auto tprob = nn::softmax_rows(tpred.logits, tpred.c_total);
    std::vector<double> bg(sample.rois.size());
    for (std::size_t i = 0; i < bg.size(); ++i) bg[i] = tprob[i * tpred.c_total + tpred.c_total - 1];
    const auto spred = spass.roi_forward(sample.rois);
    const auto soft = unsup_soft_loss(spred, targets, bg);
    log.l_cls_soft += scale * soft.cls;
    log.l_reg_soft += scale * soft.reg;
    if (soft_scale != 0.0) spass.add_roi_grad(spred.batch, scaled(soft.d_logits, soft_scale), scaled(soft.d_deltas, soft_scale));

    if (cfg_.entreg) entropy_regression(image, weak, strong, tpass, spass, w.beta * scale, scale, log);
    spass.backward(grads_, cfg_.trainable);
  }

  void entropy_regression(const Image& image, const AugmentedView& weak, const AugmentedView& strong, ImagePass& tpass,
                          ImagePass& spass, double grad_scale, double scale, StepLog& log) {
    ProposalSettings ps = cfg_.detector.detect.proposals;
    ps.max_proposals = cfg_.entreg_proposals;
    std::vector<Box> source;
    {
      ImagePass opass(student_, image, false);
      for (const auto& p : opass.proposals(ps)) source.push_back(p.box);
    }
    const auto pairs = pair_proposals(source, strong, weak);
    if (pairs.empty()) return;
    std::vector<Box> ps_boxes;
    std::vector<Box> pt_boxes;
    for (const auto& p : pairs) {
      ps_boxes.push_back(p.p_s);
      pt_boxes.push_back(p.p_t);
    }
    const auto tpred = tpass.roi_forward(pt_boxes);
    const auto spred = spass.roi_forward(ps_boxes);
    const auto fg = foreground_weights(tpred.logits, tpred.c_total);
    const auto ent = entropy_similarity_loss(spred.logits, tpred.logits, fg, spred.c_total, cfg_.measure);
    const auto ovl = iou_consistency_loss(pairs, spred.boxes, tpred.boxes, fg, cfg_.overlap);
    log.l_ent += scale * ent.value;
    log.l_iou += scale * ovl.value;
    if (grad_scale == 0.0) return;
    const BoxCoder coder = roi_coder();
    std::vector<double> d_deltas(spred.deltas.size(), 0.0);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const std::array<double, 4> db{ovl.grad[4 * i], ovl.grad[4 * i + 1], ovl.grad[4 * i + 2], ovl.grad[4 * i + 3]};
      const auto dd = coder.decode_backward(spred.rois[i], &spred.deltas[4 * i], db);
      for (int k = 0; k < 4; ++k) d_deltas[4 * i + k] = grad_scale * dd[k];
    }
    spass.add_roi_grad(spred.batch, scaled(ent.grad, grad_scale), d_deltas);
  }

  TrainingConfig cfg_;
  const TrainingData* data_;
  DetectorParams student_;
  EmaState ema_;
  Sgd sgd_;
  OptimizerView view_;
  ParamSet grads_;
  Rng rng_labeled_;
  Rng rng_unlabeled_;
  long long step_ = 0;
};

struct StageResult {
  DetectorParams student;
  DetectorParams teacher;
  std::vector<StepLog> logs;
};

inline StageResult run_stage(const DetectorParams& student, const DetectorParams& teacher, const TrainingConfig& cfg,
                             const TrainingData& data, const std::function<void(const StepLog&)>& on_step = {}) {
  Trainer t(student, teacher, cfg, data);
  auto logs = t.run(cfg.schedule.iterations, on_step);
  return {t.student(), t.teacher(), std::move(logs)};
}

/// Base-class training from a fresh initialization; the checkpoint holds
/// both branches.
inline Checkpoint pretrain_base(const DetectorArch& arch, const std::vector<int>& class_ids, const TrainingConfig& cfg,
                                const TrainingData& data, const std::string& config_hash,
                                const std::function<void(const StepLog&)>& on_step = {}) {
  if (static_cast<int>(class_ids.size()) != arch.num_classes) throw std::invalid_argument("pretrain: class list / head size mismatch");
  Rng init = make_rng(cfg.seed, 0x1417);
  const DetectorParams model = init_detector(arch, init);
  auto r = run_stage(model, model, cfg, data, on_step);
  Checkpoint ck;
  ck.stage = stage_name(Stage::base_pretrain);
  ck.class_ids = class_ids;
  ck.config_hash = config_hash;
  ck.step = cfg.schedule.iterations;
  ck.student = std::move(r.student);
  ck.teacher = std::move(r.teacher);
  return ck;
}

struct FewShotModel {
  DetectorParams params;
  std::vector<int> class_ids;
};

/// Copies the TEACHER branch and widens the classifier output layer to the
/// base + novel classes: existing rows keep their values, the background
/// row moves to the new last index, novel rows are drawn N(0, init_std).
inline FewShotModel init_few_shot_from_teacher(const Checkpoint& ck, const std::vector<int>& novel_class_ids,
                                               double init_std, Rng& rng) {
  const DetectorParams& src = ck.teacher_or_throw();
  for (int c : novel_class_ids) {
    if (std::find(ck.class_ids.begin(), ck.class_ids.end(), c) != ck.class_ids.end()) {
      throw std::invalid_argument("novel class " + std::to_string(c) + " already in the checkpoint head");
    }
  }
  FewShotModel out;
  out.class_ids = ck.class_ids;
  out.class_ids.insert(out.class_ids.end(), novel_class_ids.begin(), novel_class_ids.end());
  DetectorArch arch = src.arch;
  arch.num_classes = static_cast<int>(out.class_ids.size());
  out.params.arch = arch;
  const int old_c = src.c_total();
  const int new_c = arch.num_classes + 1;
  const int hidden = arch.cls_hidden;
  std::normal_distribution<double> dist(0.0, init_std);
  for (const auto& p : src.params.entries()) {
    if (p.name == "roi_classifier.fc2.weight") {
      auto& q = out.params.params.add(p.name, p.group, {new_c, hidden});
      for (int r = 0; r < new_c; ++r) {
        const int from = r < old_c - 1 ? r : (r == new_c - 1 ? old_c - 1 : -1);
        for (int k = 0; k < hidden; ++k) q.value[r * hidden + k] = from >= 0 ? p.value[from * hidden + k] : dist(rng);
      }
    } else if (p.name == "roi_classifier.fc2.bias") {
      auto& q = out.params.params.add(p.name, p.group, {new_c});
      for (int r = 0; r < new_c; ++r) {
        const int from = r < old_c - 1 ? r : (r == new_c - 1 ? old_c - 1 : -1);
        q.value[r] = from >= 0 ? p.value[from] : 0.0;
      }
    } else {
      out.params.params.add(p.name, p.group, p.shape).value = p.value;
    }
  }
  return out;
}

inline void require_frozen_features(const TrainingConfig& cfg, const char* what) {
  for (ParamGroup g : {ParamGroup::backbone, ParamGroup::neck, ParamGroup::rpn}) {
    if (has(cfg.trainable, g)) throw std::invalid_argument(std::string(what) + ": group " + group_name(g) + " must stay frozen");
  }
}

/// RoI-head training on novel shots (plus unlabeled images when the config
/// enables the semi-supervised terms). Backbone, neck and RPN stay frozen.
inline StageResult train_novel_head(const DetectorParams& params, const TrainingData& data, const TrainingConfig& cfg,
                                    const std::function<void(const StepLog&)>& on_step = {}) {
  require_frozen_features(cfg, "train_novel_head");
  return run_stage(params, params, cfg, data, on_step);
}

/// Instance count per logit index over a labeled set.
inline std::map<int, int> shots_per_class(const TrainingData& data) {
  std::map<int, int> n;
  for (const auto& s : data.labeled) {
    for (int l : s.labels) ++n[l];
  }
  return n;
}

/// Classifier-only fine-tune on a k-shot-per-class set (classifier + regressor
/// in the ablation policy).
inline StageResult finetune_balanced(const DetectorParams& params, const TrainingData& data, int k,
                                     const TrainingConfig& cfg, const std::function<void(const StepLog&)>& on_step = {}) {
  require_frozen_features(cfg, "finetune_balanced");
  if (!has(cfg.trainable, ParamGroup::roi_classifier)) throw std::invalid_argument("finetune_balanced: classifier must be trainable");
  const auto counts = shots_per_class(data);
  for (int c = 0; c < params.num_classes(); ++c) {
    const auto it = counts.find(c);
    const int n = it == counts.end() ? 0 : it->second;
    if (n != k) {
      throw std::invalid_argument("finetune_balanced: class index " + std::to_string(c) + " has " + std::to_string(n) +
                                  " shots, expected " + std::to_string(k));
    }
  }
  return run_stage(params, params, cfg, data, on_step);
}

/// Labeled samples for the given images, keeping only annotations whose
/// category is in `class_ids` (mapped to their logit index).
inline TrainingData labeled_from_index(const DatasetIndex& index, const std::vector<Image>& images,
                                       const std::vector<int>& image_ids, const std::vector<int>& class_ids) {
  std::map<int, int> logit;
  for (std::size_t i = 0; i < class_ids.size(); ++i) logit[class_ids[i]] = static_cast<int>(i);
  std::map<int, std::size_t> pos;
  for (std::size_t i = 0; i < index.images().size(); ++i) pos[index.images()[i].id] = i;
  TrainingData d;
  for (int id : image_ids) {
    LabeledSample s;
    s.image_id = id;
    s.image = images.at(pos.at(id));
    for (const auto& a : index.annotations_for(id)) {
      const auto it = logit.find(a.category_id);
      if (it == logit.end()) continue;
      s.boxes.push_back(a.box);
      s.labels.push_back(it->second);
    }
    d.labeled.push_back(std::move(s));
  }
  return d;
}

/// Labeled samples holding exactly the chosen shot instances.
inline TrainingData labeled_from_shots(const DatasetIndex& index, const std::vector<Image>& images,
                                       const FewShotSplit& split, const std::vector<int>& class_ids) {
  std::map<int, int> logit;
  for (std::size_t i = 0; i < class_ids.size(); ++i) logit[class_ids[i]] = static_cast<int>(i);
  std::map<int, std::size_t> pos;
  for (std::size_t i = 0; i < index.images().size(); ++i) pos[index.images()[i].id] = i;
  std::map<int, LabeledSample> by_image;
  for (const auto& [cls, shots] : split.shot_instances) {
    const auto it = logit.find(cls);
    if (it == logit.end()) continue;
    for (const auto& sh : shots) {
      auto& s = by_image[sh.image_id];
      s.image_id = sh.image_id;
      s.boxes.push_back(index.annotation(sh.annotation_id).box);
      s.labels.push_back(it->second);
    }
  }
  TrainingData d;
  for (auto& [id, s] : by_image) {
    s.image = images.at(pos.at(id));
    d.labeled.push_back(std::move(s));
  }
  return d;
}

}  // namespace ledet
