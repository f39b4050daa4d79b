#include <gtest/gtest.h>

#include "lesionseg/metrics.hpp"
#include "lesionseg/phantom.hpp"

using namespace lesionseg;

namespace {

PhantomSpec small_spec() {
  PhantomSpec s;
  s.shape = {32, 32, 32};
  s.spacing = {2.5f, 2.5f, 2.5f};
  s.brain_semiaxes = {11.f, 10.f, 9.5f};
  s.ventricle_semiaxes = {3.f, 2.5f, 2.f};
  s.lesion_count_min = 2;
  s.lesion_count_max = 6;
  s.lesion_radius_min = 1.4f;
  s.lesion_radius_max = 2.6f;
  s.lesion_volume_min_ml = 0.8f;
  s.lesion_volume_max_ml = 3.0f;
  return s;
}

/// Best-threshold DSC of the noiseless-domain FLAIR against ground truth:
/// the difficulty anchor for all phantom-based acceptance thresholds.
double threshold_oracle_dsc(const PhantomSpec& spec, const DomainSpec& domain,
                            std::uint64_t seed) {
  DomainSpec clean = domain;
  clean.noise_std = 0.f;
  auto g = generate_case_raw(spec, clean, seed, "oracle");
  float lo = 1e9f, hi = -1e9f;
  for (std::size_t i = 0; i < g.raw_flair.size(); ++i) {
    if (g.brain_mask.data[i] == 0.f) continue;
    lo = std::min(lo, g.raw_flair.data[i]);
    hi = std::max(hi, g.raw_flair.data[i]);
  }
  double best = 0.0;
  for (int t = 1; t < 200; ++t) {
    const float thr = lo + (hi - lo) * static_cast<float>(t) / 200.f;
    Volume seg(g.raw_flair.data.shape());
    for (std::size_t i = 0; i < seg.size(); ++i) {
      seg.data[i] = (g.brain_mask.data[i] != 0.f && g.raw_flair.data[i] >= thr) ? 1.f : 0.f;
    }
    best = std::max(best, dsc(g.lesion_mask, seg));
  }
  return best;
}

}  // namespace

TEST(Phantom, DeterministicAndSeedSensitive) {
  auto spec = small_spec();
  DomainSpec dom;
  auto a = generate_case_raw(spec, dom, 42, "a");
  auto b = generate_case_raw(spec, dom, 42, "a");
  auto c = generate_case_raw(spec, dom, 43, "a");
  EXPECT_EQ(a.raw_flair.data.storage(), b.raw_flair.data.storage());
  EXPECT_EQ(a.lesion_mask.data.storage(), b.lesion_mask.data.storage());
  EXPECT_NE(a.raw_flair.data.storage(), c.raw_flair.data.storage());
}

TEST(Phantom, ZeroLesionCountGivesEmptyGroundTruth) {
  auto spec = small_spec();
  spec.lesion_count_min = 0;
  spec.lesion_count_max = 0;
  DomainSpec dom;
  auto g = generate_case_raw(spec, dom, 7, "empty");
  for (std::size_t i = 0; i < g.lesion_mask.size(); ++i) {
    EXPECT_EQ(g.lesion_mask.data[i], 0.f);
  }
}

TEST(Phantom, GroundTruthInsideBrainAndContrastSigns) {
  auto spec = small_spec();
  DomainSpec dom;
  auto g = generate_case_raw(spec, dom, 11, "x");
  std::size_t lesion_n = 0;
  double flair_lesion = 0, flair_tissue = 0, t1_lesion = 0, t1_tissue = 0;
  std::size_t tissue_n = 0;
  for (std::size_t i = 0; i < g.lesion_mask.size(); ++i) {
    if (g.lesion_mask.data[i] != 0.f) {
      EXPECT_NE(g.brain_mask.data[i], 0.f);
      flair_lesion += g.raw_flair.data[i];
      t1_lesion += g.raw_t1.data[i];
      ++lesion_n;
    } else if (g.brain_mask.data[i] != 0.f) {
      flair_tissue += g.raw_flair.data[i];
      t1_tissue += g.raw_t1.data[i];
      ++tissue_n;
    } else {
      EXPECT_EQ(g.raw_flair.data[i], 0.f);  // background exactly zero
      EXPECT_EQ(g.raw_t1.data[i], 0.f);
    }
  }
  ASSERT_GT(lesion_n, std::size_t{0});
  EXPECT_GT(flair_lesion / lesion_n, flair_tissue / tissue_n);  // FLAIR hyper
  EXPECT_LT(t1_lesion / lesion_n, t1_tissue / tissue_n);        // T1 hypo
}

TEST(Phantom, LesionLoadWithinConfiguredRange) {
  auto spec = small_spec();
  DomainSpec dom;
  const float voxels_per_ml = 1000.f / spec.voxel_volume_mm3();
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL, 5ULL}) {
    auto g = generate_case_raw(spec, dom, seed, "load");
    std::size_t n = 0;
    for (std::size_t i = 0; i < g.lesion_mask.size(); ++i) {
      n += g.lesion_mask.data[i] != 0.f;
    }
    const float ml = static_cast<float>(n) / voxels_per_ml;
    // the generator stops after crossing the sampled target; one lesion of
    // slack on top, never an order of magnitude
    EXPECT_GE(ml, spec.lesion_volume_min_ml * 0.5f) << "seed " << seed;
    EXPECT_LE(ml, spec.lesion_volume_max_ml * 1.5f) << "seed " << seed;
    auto regions = connected_components(g.lesion_mask, 26);
    EXPECT_GE(regions.count(), spec.lesion_count_min);
    EXPECT_LE(regions.count(), spec.lesion_count_max);
  }
}

TEST(Phantom, PairedDomainsShareGroundTruth) {
  auto spec = small_spec();
  DomainSpec source;
  DomainSpec target;
  target.id = "target";
  target.flair_lesion = {0.78f, 0.06f};
  target.gain_flair = 1.7f;
  target.offset_flair = 0.4f;
  target.noise_std = 0.06f;
  auto a = generate_case_raw(spec, source, 99, "s");
  auto b = generate_case_raw(spec, target, 99, "t");
  EXPECT_EQ(a.lesion_mask.data.storage(), b.lesion_mask.data.storage());
  EXPECT_EQ(a.brain_mask.data.storage(), b.brain_mask.data.storage());
  EXPECT_NE(a.raw_flair.data.storage(), b.raw_flair.data.storage());
}

TEST(Phantom, DomainSetHasUniqueIdsAndCases) {
  auto spec = small_spec();
  DomainSpec dom;
  auto cases = generate_domain_set(spec, dom, 4, 17);
  ASSERT_EQ(cases.size(), std::size_t{4});
  for (std::size_t i = 0; i < cases.size(); ++i) {
    for (std::size_t j = i + 1; j < cases.size(); ++j) {
      EXPECT_NE(cases[i].id, cases[j].id);
      EXPECT_NE(cases[i].flair.data.storage(), cases[j].flair.data.storage());
    }
  }
  EXPECT_TRUE(generate_domain_set(spec, dom, 0, 1).empty());
}

TEST(Phantom, ThresholdOracleAnchorsDifficulty) {
  auto spec = small_spec();
  DomainSpec source;
  for (std::uint64_t seed : {5ULL, 6ULL, 7ULL}) {
    EXPECT_GE(threshold_oracle_dsc(spec, source, seed), 0.9) << "seed " << seed;
  }
}

TEST(Phantom, InfeasiblePlacementRejected) {
  auto spec = small_spec();
  spec.lesion_count_min = 50;  // cannot fit 50 large lesions in a tiny brain
  spec.lesion_count_max = 60;
  spec.lesion_radius_min = 3.5f;
  spec.lesion_radius_max = 4.f;
  spec.brain_semiaxes = {6.f, 6.f, 6.f};
  spec.placement_retries = 30;
  DomainSpec dom;
  EXPECT_THROW(generate_case_raw(spec, dom, 1, "bad"), std::runtime_error);
}

TEST(Phantom, InvalidSpecsRejected) {
  DomainSpec bad;
  bad.flair_lesion.mean = 0.3f;  // not hyperintense
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  DomainSpec bad2;
  bad2.gain_t1 = 0.f;
  EXPECT_THROW(bad2.validate(), std::invalid_argument);
  PhantomSpec p;
  p.lesion_radius_min = -1.f;
  EXPECT_THROW(p.validate(), std::invalid_argument);
}
