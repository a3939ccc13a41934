#pragma once

// Binds a resolved Config to datasets, stage configs, inference and reports.
// Shared by the command-line tool and the end-to-end tests.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ledet/config.hpp"
#include "ledet/data.hpp"
#include "ledet/eval.hpp"
#include "ledet/pipeline.hpp"

namespace ledet {

struct Benchmark {
  DatasetIndex train_index;
  std::vector<Image> train_images;  // parallel to train_index.images()
  DatasetIndex test_index;
  std::vector<Image> test_images;
  std::vector<int> base_classes;
  std::vector<int> novel_classes;
  LabeledPartition partition;
  FewShotSplit split;

  std::vector<int> all_classes() const {
    std::vector<int> c = base_classes;
    c.insert(c.end(), novel_classes.begin(), novel_classes.end());
    return c;
  }
};

inline SyntheticSceneSpec scene_spec(const Config& cfg) {
  SyntheticSceneSpec s;
  s.canvas_width = s.canvas_height = get<int>(cfg, "dataset.canvas");
  s.min_objects = get<int>(cfg, "dataset.min_objects");
  s.max_objects = get<int>(cfg, "dataset.max_objects");
  s.min_size = get<int>(cfg, "dataset.min_size");
  s.max_size = get<int>(cfg, "dataset.max_size");
  s.noise = get<double>(cfg, "dataset.noise");
  s.seed = get<std::uint64_t>(cfg, "dataset.seed");
  return s;
}

inline std::vector<Image> load_images(const DatasetIndex& index, const std::string& root) {
  std::vector<Image> out;
  for (const auto& im : index.images()) {
    out.push_back(read_png((std::filesystem::path(root) / im.file_name).string()));
    if (out.back().width != im.width || out.back().height != im.height) {
      throw DataError("image " + im.file_name + " size differs from its annotation record");
    }
  }
  return out;
}

/// Datasets plus the labeled partition and the k-shot split for `seed`.
inline Benchmark load_benchmark(const Config& cfg, std::uint64_t seed) {
  Benchmark b;
  const auto kind = get<std::string>(cfg, "dataset.kind");
  if (kind == "synthetic") {
    const auto spec = scene_spec(cfg);
    auto train = generate_synthetic_dataset(spec, get<int>(cfg, "dataset.train_images"), 0, 1);
    auto test = generate_synthetic_dataset(spec, get<int>(cfg, "dataset.test_images"), 1, 1000001);
    b.train_index = std::move(train.index);
    b.train_images = std::move(train.images);
    b.test_index = std::move(test.index);
    b.test_images = std::move(test.images);
  } else if (kind == "coco") {
    const auto root = get<std::string>(cfg, "dataset.image_root");
    b.train_index = load_coco_json(get<std::string>(cfg, "dataset.train_json"));
    b.test_index = load_coco_json(get<std::string>(cfg, "dataset.test_json"));
    b.train_images = load_images(b.train_index, root);
    b.test_images = load_images(b.test_index, root);
  } else {
    throw ConfigError("config key 'dataset.kind' must be synthetic or coco, got '" + kind + "'");
  }
  b.base_classes = get<std::vector<int>>(cfg, "split.base_classes");
  b.novel_classes = get<std::vector<int>>(cfg, "split.novel_classes");
  b.partition = sample_labeled_fraction(b.train_index, get<double>(cfg, "split.labeled_percent"), seed);
  b.split = build_few_shot_split(b.train_index, b.base_classes, b.novel_classes, get<int>(cfg, "split.k"), seed);
  return b;
}

inline DetectorArch arch_from_config(const Config& cfg, int num_classes) {
  DetectorArch a;
  a.stage_channels = get<std::array<int, 4>>(cfg, "detector.stage_channels");
  a.neck_channels = get<int>(cfg, "detector.neck_channels");
  a.fine_anchor_sizes = get<std::vector<double>>(cfg, "detector.fine_anchor_sizes");
  a.coarse_anchor_sizes = get<std::vector<double>>(cfg, "detector.coarse_anchor_sizes");
  a.anchor_ratios = get<std::vector<double>>(cfg, "detector.anchor_ratios");
  a.roi_size = get<int>(cfg, "detector.roi_size");
  a.roi_sampling = get<int>(cfg, "detector.roi_sampling");
  a.level_split = get<double>(cfg, "detector.level_split");
  a.cls_hidden = get<int>(cfg, "detector.cls_hidden");
  a.reg_hidden = get<int>(cfg, "detector.reg_hidden");
  a.num_classes = num_classes;
  a.validate();
  return a;
}

inline DetectorSettings detector_settings(const Config& cfg) {
  DetectorSettings s;
  s.rpn.num_samples = get<int>(cfg, "detector.rpn_batch");
  s.roi.num_samples = get<int>(cfg, "detector.roi_batch");
  s.roi.fg_fraction = get<double>(cfg, "detector.roi_fg_fraction");
  s.train_proposals.max_proposals = get<int>(cfg, "detector.train_proposals");
  s.detect.proposals.max_proposals = get<int>(cfg, "detector.test_proposals");
  s.detect.score_threshold = get<double>(cfg, "detector.score_threshold");
  s.detect.nms_iou = get<double>(cfg, "detector.nms_iou");
  s.detect.max_detections = get<int>(cfg, "detector.max_detections");
  return s;
}

inline AugmentationRecipe recipe_from_config(const Config& cfg, Branch branch) {
  const auto edge = get<std::vector<double>>(cfg, "augment.train_short_edge");
  if (edge.size() != 2) throw ConfigError("config key 'augment.train_short_edge' expects [lo, hi]");
  auto r = AugmentationRecipe::for_branch(branch, {edge[0], edge[1]});
  r.flip_prob = get<double>(cfg, "augment.flip_prob");
  if (branch != Branch::weak) r.color_prob = get<double>(cfg, "augment.color_prob");
  if (branch == Branch::strong) {
    r.geometric_prob = get<double>(cfg, "augment.geometric_prob");
    const double t = get<double>(cfg, "augment.translate");
    const double sh = get<double>(cfg, "augment.shear_deg");
    const double ro = get<double>(cfg, "augment.rotate_deg");
    r.translate = {-t, t};
    r.shear_deg = {-sh, sh};
    r.rotate_deg = {-ro, ro};
    r.cutout_min = get<int>(cfg, "augment.cutout_min");
    r.cutout_max = get<int>(cfg, "augment.cutout_max");
    r.cutout_size = {0.0, get<double>(cfg, "augment.cutout_size")};
  }
  r.validate();
  return r;
}

inline ScheduleConfig schedule_from_config(const Config& cfg, const std::string& stage) {
  ScheduleConfig s;
  const std::string p = "schedule." + stage + ".";
  s.labeled_batch = get<int>(cfg, p + "labeled_batch");
  s.unlabeled_batch = get<int>(cfg, p + "unlabeled_batch");
  s.lr = get<double>(cfg, p + "lr");
  s.milestones = get<std::vector<int>>(cfg, p + "milestones");
  s.iterations = get<int>(cfg, p + "iterations");
  s.warmup_iters = get<int>(cfg, p + "warmup_iters");
  s.momentum = get<double>(cfg, "schedule.momentum");
  s.weight_decay = get<double>(cfg, "schedule.weight_decay");
  s.validate();
  return s;
}

inline GroupMask parse_groups(const std::vector<std::string>& names) {
  GroupMask m{};
  for (const auto& n : names) m[static_cast<int>(parse_param_group(n))] = true;
  return m;
}

/// Stage config. Semi-supervised and cross-view terms follow the section
/// switches and their per-stage flags.
inline TrainingConfig training_config(const Config& cfg, Stage stage, std::uint64_t seed) {
  TrainingConfig t;
  t.stage = stage;
  t.seed = seed;
  const char* sched = stage == Stage::base_pretrain ? "pretrain" : stage == Stage::novel_head ? "novel_head" : "balanced";
  t.schedule = schedule_from_config(cfg, sched);
  bool semi = get<bool>(cfg, "semisup.enabled");
  bool ent = get<bool>(cfg, "entreg.enabled");
  if (stage == Stage::novel_head) {
    semi = semi && get<bool>(cfg, "semisup.in_novel_head");
    ent = ent && get<bool>(cfg, "entreg.in_novel_head");
  } else if (stage == Stage::balanced_finetune) {
    semi = semi && get<bool>(cfg, "semisup.in_balanced_finetune");
    ent = ent && get<bool>(cfg, "entreg.in_balanced_finetune");
  }
  t.semi_supervised = semi;
  t.entreg = semi && ent;
  if (!semi) t.schedule.unlabeled_batch = 0;
  t.beta_multiplier = get<double>(cfg, "entreg.beta_multiplier");
  t.measure = parse_similarity(get<std::string>(cfg, "entreg.measure"));
  t.overlap = parse_overlap(get<std::string>(cfg, "entreg.overlap"));
  t.entreg_proposals = get<int>(cfg, "entreg.num_proposals");
  t.pseudo.score_threshold = get<double>(cfg, "semisup.score_threshold");
  t.pseudo.n_jitter = get<int>(cfg, "semisup.n_jitter");
  t.pseudo.jitter_scale = get<double>(cfg, "semisup.jitter_scale");
  t.pseudo.variance_threshold = get<double>(cfg, "semisup.variance_threshold");
  t.ema_momentum = get<double>(cfg, "semisup.ema_momentum");
  t.unsup_warmup = get<int>(cfg, "semisup.unsup_warmup");
  t.detector = detector_settings(cfg);
  t.pseudo.detect = t.detector.detect;
  t.labeled_aug = recipe_from_config(cfg, Branch::labeled);
  t.strong_aug = recipe_from_config(cfg, Branch::strong);
  t.weak_aug = recipe_from_config(cfg, Branch::weak);
  if (stage == Stage::base_pretrain) {
    t.trainable = all_groups();
  } else if (stage == Stage::novel_head) {
    t.trainable = groups_mask({ParamGroup::roi_classifier, ParamGroup::roi_regressor});
  } else {
    t.trainable = parse_groups(get<std::vector<std::string>>(cfg, "schedule.finetune_trainable"));
  }
  return t;
}

inline std::vector<Image> images_for(const DatasetIndex& index, const std::vector<Image>& images, const std::vector<int>& ids) {
  std::map<int, std::size_t> pos;
  for (std::size_t i = 0; i < index.images().size(); ++i) pos[index.images()[i].id] = i;
  std::vector<Image> out;
  for (int id : ids) out.push_back(images.at(pos.at(id)));
  return out;
}

inline TrainingData pretrain_data(const Benchmark& b) {
  TrainingData d = labeled_from_index(b.train_index, b.train_images, b.partition.labeled, b.base_classes);
  d.unlabeled = images_for(b.train_index, b.train_images, b.partition.unlabeled);
  return d;
}

/// Novel shots (base shots too when configured) plus the unlabeled pool.
inline TrainingData novel_head_data(const Benchmark& b, const std::vector<int>& class_ids, bool include_base) {
  FewShotSplit s = b.split;
  if (!include_base) {
    for (int c : b.base_classes) s.shot_instances.erase(c);
  }
  TrainingData d = labeled_from_shots(b.train_index, b.train_images, s, class_ids);
  d.unlabeled = images_for(b.train_index, b.train_images, b.partition.unlabeled);
  return d;
}

inline TrainingData balanced_data(const Benchmark& b, const std::vector<int>& class_ids) {
  TrainingData d = labeled_from_shots(b.train_index, b.train_images, b.split, class_ids);
  d.unlabeled = images_for(b.train_index, b.train_images, b.partition.unlabeled);
  return d;
}

struct InferenceOutput {
  std::vector<Detection> detections;  // dataset category ids
  std::vector<ScoredProposal> proposals;
};

/// Test-time resize to the configured short edge, detection, and mapping
/// back to original image coordinates.
inline InferenceOutput run_inference(const DetectorParams& params, const std::vector<int>& class_ids,
                                     const DatasetIndex& index, const std::vector<Image>& images, const Config& cfg) {
  if (static_cast<int>(class_ids.size()) != params.num_classes()) throw std::invalid_argument("inference: class list / head size mismatch");
  const auto settings = detector_settings(cfg).detect;
  ProposalSettings ps = settings.proposals;
  ps.max_proposals = std::max(ps.max_proposals, get<int>(cfg, "eval.max_proposals"));
  const double short_edge = get<double>(cfg, "augment.test_short_edge");
  InferenceOutput out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const int id = index.images()[i].id;
    const Image& src = images[i];
    const double scale = short_edge / std::min(src.width, src.height);
    Image view = src;
    AffineTransform back = AffineTransform::identity();
    if (scale != 1.0) {
      const int w = std::max(1, static_cast<int>(std::lround(src.width * scale)));
      const int h = std::max(1, static_cast<int>(std::lround(src.height * scale)));
      const auto fwd = AffineTransform::scaling(static_cast<double>(w) / src.width, static_cast<double>(h) / src.height);
      view = warp_affine(src, fwd, w, h, {0.0f, 0.0f, 0.0f});
      back = fwd.inverse();
    }
    ImagePass pass(params, view, false);
    const auto props = pass.proposals(ps);
    for (const auto& p : props) out.proposals.push_back({id, clip_box(apply_affine(back, p.box), src.width, src.height), p.score});
    std::vector<Box> rois;
    for (std::size_t k = 0; k < props.size() && static_cast<int>(k) < settings.proposals.max_proposals; ++k) rois.push_back(props[k].box);
    const auto pred = pass.roi_forward(rois);
    for (const auto& d : postprocess_detections(pred, view.width, view.height, settings)) {
      out.detections.push_back({id, class_ids[d.class_id], clip_box(apply_affine(back, d.box), src.width, src.height), d.score});
    }
  }
  return out;
}

inline std::vector<GroundTruth> ground_truth(const DatasetIndex& index) {
  std::vector<GroundTruth> gt;
  for (const auto& a : index.annotations()) gt.push_back({a.image_id, a.category_id, a.box});
  return gt;
}

/// Report over `base`/`novel`; proposal AR is measured against the GT of
/// those classes only.
inline EvalReport evaluate_model(const DetectorParams& params, const std::vector<int>& class_ids,
                                 const std::vector<int>& base, const std::vector<int>& novel, const DatasetIndex& index,
                                 const std::vector<Image>& images, const Config& cfg,
                                 std::optional<double> base_ap_pretrain = std::nullopt) {
  std::set<int> known(base.begin(), base.end());
  known.insert(novel.begin(), novel.end());
  for (int c : class_ids) {
    if (!known.count(c)) throw std::invalid_argument("model class " + std::to_string(c) + " is not part of the split");
  }
  const auto inf = run_inference(params, class_ids, index, images, cfg);
  std::vector<GroundTruth> gt;
  for (const auto& g : ground_truth(index)) {
    if (known.count(g.class_id)) gt.push_back(g);
  }
  EvalReport r = generalized_report(inf.detections, gt, base, novel, base_ap_pretrain);
  for (int p : get<std::vector<int>>(cfg, "eval.ar_limits")) {
    const auto ar = proposal_recall_at(inf.proposals, gt, static_cast<std::size_t>(p));
    r.proposal_ar[p] = ar ? *ar : std::nan("");
  }
  return r;
}

}  // namespace ledet
