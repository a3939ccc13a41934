#pragma once

#include <cstring>
#include <vector>

#include "ledet/pipeline.hpp"

namespace fixture {

/// ~600 parameters: small enough for coordinate-wise finite differences.
inline ledet::DetectorArch tiny_arch(int num_classes = 2) {
  ledet::DetectorArch a;
  a.stage_channels = {2, 2, 2, 2};
  a.neck_channels = 2;
  a.cls_hidden = 4;
  a.reg_hidden = 4;
  a.num_classes = num_classes;
  return a;
}

/// Narrow but trainable network for pipeline-level tests.
inline ledet::DetectorArch small_arch(int num_classes = 3) {
  ledet::DetectorArch a;
  a.stage_channels = {4, 6, 8, 8};
  a.neck_channels = 6;
  a.cls_hidden = 12;
  a.reg_hidden = 8;
  a.num_classes = num_classes;
  return a;
}

inline ledet::DetectorParams make_detector(const ledet::DetectorArch& arch, std::uint64_t seed) {
  ledet::Rng rng = ledet::make_rng(seed, 77);
  return ledet::init_detector(arch, rng);
}

inline ledet::SyntheticSceneSpec scene_spec(int shapes = 3, int canvas = 48) {
  ledet::SyntheticSceneSpec s;
  s.canvas_width = canvas;
  s.canvas_height = canvas;
  s.num_shapes = shapes;
  s.min_size = 8;
  s.max_size = 16;
  return s;
}

/// Labeled samples with logit index = category id - 1.
inline ledet::TrainingData synthetic_data(int labeled, int unlabeled, int shapes = 3, std::uint64_t seed = 5) {
  auto spec = scene_spec(shapes);
  spec.seed = seed;
  const auto ds = ledet::generate_synthetic_dataset(spec, labeled + unlabeled, 0);
  ledet::TrainingData data;
  for (int i = 0; i < labeled; ++i) {
    ledet::LabeledSample s;
    s.image_id = ds.index.images()[i].id;
    s.image = ds.images[i];
    for (const auto& a : ds.index.annotations_for(s.image_id)) {
      s.boxes.push_back(a.box);
      s.labels.push_back(a.category_id - 1);
    }
    data.labeled.push_back(std::move(s));
  }
  for (int i = labeled; i < labeled + unlabeled; ++i) data.unlabeled.push_back(ds.images[i]);
  return data;
}

/// Short-run training config on 48 px scenes.
inline ledet::TrainingConfig small_config(int iterations, bool semi, bool entreg, int bu = 2) {
  ledet::TrainingConfig c;
  c.schedule.labeled_batch = 1;
  c.schedule.unlabeled_batch = bu;
  c.schedule.lr = 0.01;
  c.schedule.iterations = iterations;
  c.semi_supervised = semi;
  c.entreg = entreg;
  c.ema_momentum = 0.99;
  c.entreg_proposals = 16;
  c.pseudo.score_threshold = 0.3;  // untrained teachers rarely reach 0.9
  c.pseudo.n_jitter = 3;
  c.detector.rpn.num_samples = 32;
  c.detector.roi.num_samples = 16;
  c.detector.train_proposals.max_proposals = 32;
  c.detector.detect.proposals.max_proposals = 32;
  const ledet::Range edge{40, 56};
  c.labeled_aug = ledet::AugmentationRecipe::for_branch(ledet::Branch::labeled, edge);
  c.strong_aug = ledet::AugmentationRecipe::for_branch(ledet::Branch::strong, edge);
  c.weak_aug = ledet::AugmentationRecipe::for_branch(ledet::Branch::weak, edge);
  c.seed = 11;
  return c;
}

inline bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

}  // namespace fixture
