#include <gtest/gtest.h>

#include <cmath>

#include "ledet/entreg.hpp"
#include "oracles.hpp"

using namespace ledet;

namespace {

std::array<double, 6> rows(const AffineTransform& m) { return {m(0, 0), m(0, 1), m(0, 2), m(1, 0), m(1, 1), m(1, 2)}; }

Box random_box(Rng& rng) {
  const double x = uniform(rng, 0, 40), y = uniform(rng, 0, 40);
  return {x, y, x + uniform(rng, 2, 20), y + uniform(rng, 2, 20)};
}

AffineTransform random_transform(Rng& rng) {
  auto t = AffineTransform::translation(uniform(rng, -8, 8), uniform(rng, -8, 8)) *
           AffineTransform::scaling(uniform(rng, 0.7, 1.4), uniform(rng, 0.7, 1.4));
  if (bernoulli(rng, 0.5)) t = AffineTransform::hflip(64) * t;
  if (bernoulli(rng, 0.5)) t = AffineTransform::rotation(uniform(rng, -0.3, 0.3), 32, 32) * t;
  return t;
}

std::vector<double> logit_rows(const std::vector<std::array<double, 2>>& probs) {
  std::vector<double> z;
  for (const auto& p : probs) {
    z.push_back(std::log(p[0]));
    z.push_back(std::log(p[1]));
  }
  return z;
}

AugmentedView view_with(const AffineTransform& t, int w = 64, int h = 64) {
  AugmentedView v;
  v.image = Image(3, h, w);
  v.transform = t;
  return v;
}

}  // namespace

TEST(EntropyLoss, MatchesOracleOnRandomInstances) {
  Rng rng = make_rng(21);
  int active_instances = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const int c = uniform_int(rng, 2, 5);
    const int n = uniform_int(rng, 1, 8);
    std::vector<double> zs, zt, w;
    for (int i = 0; i < n * c; ++i) {
      zs.push_back(uniform(rng, -3, 3));
      zt.push_back(uniform(rng, -3, 3));
    }
    for (int i = 0; i < n; ++i) w.push_back(trial % 4 == 0 ? uniform(rng, 0, 1) : (bernoulli(rng, 0.7) ? 1.0 : 0.0));
    for (auto measure : {SimilarityMeasure::cross_entropy, SimilarityMeasure::kl}) {
      const auto got = entropy_similarity_loss(zs, zt, w, c, measure);
      EXPECT_NEAR(got.value, oracle::entropy_loss(zs, zt, w, c, measure == SimilarityMeasure::kl), 1e-9);
    }
    double ws = 0.0;
    for (double v : w) ws += v;
    active_instances += ws > 0.0;
  }
  EXPECT_GE(active_instances, 20);
}

TEST(EntropyLoss, HandValues) {
  // uniform student, any teacher: ln 2 / 2
  const auto a = entropy_similarity_loss({0.0, 0.0}, logit_rows({{{0.3, 0.7}}}), {1.0}, 2);
  EXPECT_NEAR(a.value, 0.34657359027997264, 1e-12);
  // identical (0.9, 0.1) rows: the teacher's own entropy halved
  const auto z = logit_rows({{{0.9, 0.1}}});
  EXPECT_NEAR(entropy_similarity_loss(z, z, {1.0}, 2).value, 0.1625414866957241, 1e-12);
  EXPECT_NEAR(entropy_similarity_loss(z, z, {1.0}, 2, SimilarityMeasure::kl).value, 0.0, 1e-15);
}

TEST(EntropyLoss, MaskedRowsDropOut) {
  Rng rng = make_rng(3);
  std::vector<double> zs, zt;
  for (int i = 0; i < 5 * 3; ++i) {
    zs.push_back(uniform(rng, -2, 2));
    zt.push_back(uniform(rng, -2, 2));
  }
  const std::vector<double> w{1, 0, 1, 0, 1};
  std::vector<double> zs_active, zt_active;
  for (int i : {0, 2, 4}) {
    for (int k = 0; k < 3; ++k) {
      zs_active.push_back(zs[i * 3 + k]);
      zt_active.push_back(zt[i * 3 + k]);
    }
  }
  const auto full = entropy_similarity_loss(zs, zt, w, 3);
  EXPECT_NEAR(full.value, entropy_similarity_loss(zs_active, zt_active, {1, 1, 1}, 3).value, 1e-15);
  for (int k = 0; k < 3; ++k) {
    EXPECT_EQ(full.grad[3 + k], 0.0);
    EXPECT_EQ(full.grad[9 + k], 0.0);
  }
}

TEST(EntropyLoss, GuardCases) {
  const auto none = entropy_similarity_loss({1, 2, 3, 4}, {4, 3, 2, 1}, {0, 0}, 2);
  EXPECT_EQ(none.value, 0.0);
  for (double g : none.grad) EXPECT_EQ(g, 0.0);
  EXPECT_THROW(entropy_similarity_loss({1, 2, 3}, {1, 2, 3}, {1}, 2), std::invalid_argument);
  EXPECT_EQ(entropy_similarity_loss({}, {}, {}, 3).value, 0.0);
  // KL never negative, cross-entropy never below the KL value
  Rng rng = make_rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> zs, zt;
    for (int i = 0; i < 8; ++i) {
      zs.push_back(uniform(rng, -4, 4));
      zt.push_back(uniform(rng, -4, 4));
    }
    const double kl = entropy_similarity_loss(zs, zt, {1, 1}, 4, SimilarityMeasure::kl).value;
    EXPECT_GE(kl, -1e-15);
    EXPECT_GE(entropy_similarity_loss(zs, zt, {1, 1}, 4).value, kl - 1e-15);
  }
}

TEST(ForegroundWeights, ArgmaxAgainstBackgroundAndTies) {
  const std::vector<double> z{2, 0, 1,    // class 0
                              0, 0, 5,    // background
                              3, 0, 3,    // tie with background: lower index wins
                              0, 1, 1};   // tie between fg 1 and background
  EXPECT_EQ(foreground_weights(z, 3), (std::vector<double>{1, 0, 1, 1}));
}

TEST(IouLoss, MatchesOracleOnRandomInstances) {
  Rng rng = make_rng(22);
  int active_instances = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const int n = uniform_int(rng, 1, 8);
    std::vector<ProposalPair> pairs;
    std::vector<Box> rs, rt;
    std::vector<double> w;
    std::vector<std::array<double, 6>> m;
    for (int i = 0; i < n; ++i) {
      const auto t = random_transform(rng);
      rt.push_back(random_box(rng));
      // student boxes near the mapped teacher box so overlaps are spread out
      const Box mapped = apply_affine(t, rt.back());
      rs.push_back({mapped.x1 + uniform(rng, -4, 4), mapped.y1 + uniform(rng, -4, 4), mapped.x2 + uniform(rng, -4, 4),
                    mapped.y2 + uniform(rng, -4, 4)});
      if (!rs.back().valid()) rs.back() = mapped;
      pairs.push_back({rs.back(), rt.back(), t});
      m.push_back(rows(t));
      w.push_back(bernoulli(rng, 0.7) ? 1.0 : 0.0);
    }
    for (auto kind : {OverlapKind::iou, OverlapKind::giou}) {
      const auto got = iou_consistency_loss(pairs, rs, rt, w, kind);
      EXPECT_NEAR(got.value, oracle::iou_loss(rs, rt, m, w, kind == OverlapKind::giou), 1e-9);
      EXPECT_GE(got.value, 0.0);
      EXPECT_LE(got.value, kind == OverlapKind::iou ? 1.0 : 2.0);
    }
    double ws = 0.0;
    for (double v : w) ws += v;
    active_instances += ws > 0.0;
  }
  EXPECT_GE(active_instances, 20);
}

TEST(IouLoss, HandValues) {
  const std::vector<ProposalPair> pairs(2, ProposalPair{{}, {}, AffineTransform::identity()});
  const std::vector<Box> rs{{0, 0, 10, 10}, {0, 0, 10, 10}};
  const std::vector<Box> rt{{0, 0, 10, 10}, {0, 0, 10, 5}};  // overlaps 1.0 and 0.5
  EXPECT_NEAR(iou_consistency_loss(pairs, rs, rt, {1, 1}).value, 0.25, 1e-15);
  EXPECT_NEAR(iou_consistency_loss(pairs, rs, rt, {1, 0}).value, 0.5, 1e-15);
  const auto none = iou_consistency_loss(pairs, rs, rt, {0, 0});
  EXPECT_EQ(none.value, 0.0);
  for (double g : none.grad) EXPECT_EQ(g, 0.0);
  EXPECT_THROW(iou_consistency_loss(pairs, rs, {rt[0]}, {1, 1}), std::invalid_argument);
}

TEST(PairProposals, IdenticalViewsGiveIdenticalBoxes) {
  const auto v = view_with(AffineTransform::scaling(1.25, 1.25), 80, 80);
  const auto pairs = pair_proposals({{1, 2, 10, 20}, {30, 30, 50, 60}}, v, v);
  ASSERT_EQ(pairs.size(), 2u);
  for (const auto& p : pairs) {
    EXPECT_EQ(p.p_s, p.p_t);
    EXPECT_TRUE(p.m.approx_equal(AffineTransform::identity(), 1e-12));
  }
}

TEST(PairProposals, FlippedStudentView) {
  const auto s = view_with(AffineTransform::hflip(64));
  const auto t = view_with(AffineTransform::identity());
  const auto pairs = pair_proposals({{4, 4, 20, 30}}, s, t);
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_EQ(pairs[0].p_s, (Box{44, 4, 60, 30}));
  EXPECT_EQ(pairs[0].p_t, (Box{4, 4, 20, 30}));
  EXPECT_EQ(apply_affine(pairs[0].m, pairs[0].p_t), pairs[0].p_s);
}

TEST(PairProposals, RigidPairsRoundTripThroughTheRelativeTransform) {
  Rng rng = make_rng(30);
  int checked = 0;
  for (int i = 0; i < 1000; ++i) {
    auto rigid = [&] {
      const double s = uniform(rng, 0.8, 1.5);
      auto t = AffineTransform::translation(uniform(rng, -10, 10), uniform(rng, -10, 10)) * AffineTransform::scaling(s, s);
      return bernoulli(rng, 0.5) ? AffineTransform::hflip(96) * t : t;
    };
    const auto s = view_with(rigid(), 96, 96);
    const auto t = view_with(rigid(), 96, 96);
    const Box src = random_box(rng);
    const auto pairs = pair_proposals({src}, s, t);
    if (pairs.empty()) continue;
    EXPECT_GE(oracle::box_iou(apply_affine(pairs[0].m, pairs[0].p_t), pairs[0].p_s), 1.0 - 1e-6);
    ++checked;
  }
  EXPECT_GT(checked, 900);
}

TEST(PairProposals, DropsBoxesOutsideTheStudentViewAndRejectsSingularViews) {
  const auto s = view_with(AffineTransform::translation(-40, 0));
  const auto t = view_with(AffineTransform::identity());
  std::vector<std::size_t> kept;
  const auto pairs = pair_proposals({{0, 0, 20, 20}, {45, 10, 60, 30}}, s, t, 1.0, &kept);
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_EQ(kept, (std::vector<std::size_t>{1}));
  EXPECT_THROW(pair_proposals({{0, 0, 1, 1}}, view_with(AffineTransform::scaling(0, 1)), t), std::domain_error);
}

TEST(LossWeights, BatchRatioAndTotal) {
  const auto w = LossWeights::from_batch(8, 32);
  EXPECT_EQ(w.alpha, 4.0);
  EXPECT_EQ(w.beta, 8.0);
  EXPECT_EQ(LossWeights::from_batch(2, 0).beta, 0.0);
  EXPECT_THROW(LossWeights::from_batch(0, 4), std::invalid_argument);
  EXPECT_NEAR(total_loss(0.5, 0.4, 0.2, 0.1, {1.0, 2.0}), 1.5, 1e-15);
  EXPECT_NEAR(total_loss(1.0, 0.25, 0.05, 0.05, w), 2.8, 1e-15);
  try {
    total_loss(1.0, std::nan(""), 0.0, 0.0, w);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
  }
}

TEST(Parsing, NamesAndErrors) {
  EXPECT_EQ(parse_similarity("kl"), SimilarityMeasure::kl);
  EXPECT_EQ(parse_overlap("giou"), OverlapKind::giou);
  EXPECT_THROW(parse_similarity("l2"), std::invalid_argument);
  EXPECT_THROW(parse_overlap("dice"), std::invalid_argument);
}
