#include <gtest/gtest.h>

#include <set>

#include "lesionseg/patches.hpp"
#include "lesionseg/phantom.hpp"

using namespace lesionseg;

namespace {

PhantomSpec tiny_spec() {
  PhantomSpec s;
  s.shape = {24, 24, 24};
  s.spacing = {2.5f, 2.5f, 2.5f};
  s.brain_semiaxes = {7.f, 6.5f, 6.f};
  s.ventricle_semiaxes = {2.f, 1.8f, 1.6f};
  s.lesion_count_min = 2;
  s.lesion_count_max = 4;
  s.lesion_radius_min = 1.2f;
  s.lesion_radius_max = 2.0f;
  s.lesion_volume_min_ml = 0.3f;
  s.lesion_volume_max_ml = 1.0f;
  return s;
}

std::vector<Case> tiny_cases(std::size_t n, std::uint64_t seed) {
  return generate_domain_set(tiny_spec(), DomainSpec{}, n, seed);
}

/// Classifier whose head is rigged to a constant lesion probability.
Model rigged_model(bool always_lesion) {
  auto model = build_model<float>(1);
  auto* head = dynamic_cast<DenseLayer<float>*>(model.layers[model.layers.size() - 2].get());
  head->weights().fill(0.f);
  head->bias()[0] = always_lesion ? -10.f : 10.f;
  head->bias()[1] = always_lesion ? 10.f : -10.f;
  return model;
}

std::multiset<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>> center_set(
    const PatchDataset& ds, int label, bool train_only = false) {
  std::multiset<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.labels[i] != label) continue;
    if (train_only && ds.is_validation[i]) continue;
    out.insert({ds.provenance[i].case_index, ds.provenance[i].center.z,
                ds.provenance[i].center.y, ds.provenance[i].center.x});
  }
  return out;
}

}  // namespace

TEST(ExtractPatch, DeepCenterCopiesVerbatim) {
  auto cases = tiny_cases(1, 5);
  const Case& c = cases[0];
  Index3 center{12, 12, 12};
  auto patch = extract_patch(c, center);
  ASSERT_EQ(patch.shape(), (Shape{2, 11, 11, 11}));
  for (std::size_t dz = 0; dz < 11; ++dz)
    for (std::size_t dy = 0; dy < 11; ++dy)
      for (std::size_t dx = 0; dx < 11; ++dx) {
        EXPECT_EQ(patch(std::size_t{0}, dz, dy, dx),
                  c.flair.at(center.z + dz - 5, center.y + dy - 5, center.x + dx - 5));
        EXPECT_EQ(patch(std::size_t{1}, dz, dy, dx),
                  c.t1.at(center.z + dz - 5, center.y + dy - 5, center.x + dx - 5));
      }
}

TEST(ExtractPatch, CornerPaddingCount) {
  auto cases = tiny_cases(1, 6);
  auto patch = extract_patch(cases[0], {0, 0, 0});
  // the in-volume sub-block is 6x6x6; everything else is zero padding
  for (std::size_t ch = 0; ch < 2; ++ch) {
    std::size_t zeros = 0;
    for (std::size_t dz = 0; dz < 11; ++dz)
      for (std::size_t dy = 0; dy < 11; ++dy)
        for (std::size_t dx = 0; dx < 11; ++dx) {
          const bool outside = dz < 5 || dy < 5 || dx < 5;
          const float v = patch(ch, dz, dy, dx);
          if (outside) {
            EXPECT_EQ(v, 0.f);
            ++zeros;
          }
        }
    EXPECT_EQ(zeros, std::size_t{11 * 11 * 11 - 6 * 6 * 6});  // 1115
  }
}

TEST(ExtractPatch, ConstantVolumeGivesIdenticalPatches) {
  Case c;
  c.id = "const";
  Volume v({20, 20, 20});
  v.data.fill(3.25f);
  c.flair = v;
  c.t1 = v;
  c.brain_mask = v;
  auto a = extract_patch(c, {10, 10, 10});
  auto b = extract_patch(c, {9, 11, 10});
  EXPECT_EQ(a.storage(), b.storage());
}

TEST(ExtractPatch, CenterOutsideVolumeRejected) {
  auto cases = tiny_cases(1, 7);
  EXPECT_THROW(extract_patch(cases[0], {24, 0, 0}), std::out_of_range);
}

TEST(Stage1, BalancedAndCoversEveryLesionVoxel) {
  auto cases = tiny_cases(2, 8);
  auto ds = build_stage1_dataset(cases, 123);
  std::size_t lesion_total = 0;
  for (const auto& c : cases) lesion_total += c.count_lesion_voxels();
  EXPECT_EQ(ds.size(), 2 * lesion_total);
  EXPECT_EQ(ds.count_label(1), lesion_total);
  EXPECT_EQ(ds.count_label(0), lesion_total);

  // every lesion voxel appears exactly once as a positive center
  auto positives = center_set(ds, 1);
  EXPECT_EQ(positives.size(), lesion_total);
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    const Case& c = cases[ci];
    for (std::size_t z = 0; z < c.flair.d(); ++z)
      for (std::size_t y = 0; y < c.flair.h(); ++y)
        for (std::size_t x = 0; x < c.flair.w(); ++x) {
          if (c.lesion_mask->at(z, y, x) != 0.f) {
            EXPECT_EQ(positives.count({ci, z, y, x}), std::size_t{1});
          }
        }
  }

  // negatives: inside brain, outside lesion, no duplicates
  auto negatives = center_set(ds, 0);
  EXPECT_EQ(negatives.size(), lesion_total);
  std::set<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>> distinct(
      negatives.begin(), negatives.end());
  EXPECT_EQ(distinct.size(), negatives.size());
  for (const auto& [ci, z, y, x] : negatives) {
    EXPECT_NE(cases[ci].brain_mask.at(z, y, x), 0.f);
    EXPECT_EQ(cases[ci].lesion_mask->at(z, y, x), 0.f);
  }
  for (const auto& p : ds.provenance) {
    if (p.source != PatchSource::lesion) EXPECT_EQ(p.source, PatchSource::random_negative);
  }
}

TEST(Stage1, DeterministicForEqualSeeds) {
  auto cases = tiny_cases(2, 9);
  auto a = build_stage1_dataset(cases, 55);
  auto b = build_stage1_dataset(cases, 55);
  auto c = build_stage1_dataset(cases, 56);
  EXPECT_EQ(center_set(a, 0), center_set(b, 0));
  EXPECT_NE(center_set(a, 0), center_set(c, 0));
  EXPECT_EQ(a.patches.storage(), b.patches.storage());
}

TEST(Stage1, ErrorsOnMissingLesions) {
  auto spec = tiny_spec();
  spec.lesion_count_min = 0;
  spec.lesion_count_max = 0;
  auto cases = generate_domain_set(spec, DomainSpec{}, 1, 10);
  EXPECT_THROW(build_stage1_dataset(cases, 1), std::invalid_argument);

  auto ok = tiny_cases(1, 11);
  ok[0].lesion_mask.reset();
  EXPECT_THROW(build_stage1_dataset(ok, 1), std::invalid_argument);
}

TEST(Stage2, PerfectStageOneFallsBackToRandomNegatives) {
  auto cases = tiny_cases(1, 12);
  auto model = rigged_model(/*always_lesion=*/false);  // no false positives
  auto ds = build_stage2_dataset(cases, model, 77);
  EXPECT_EQ(ds.count_label(0), ds.count_label(1));
  for (const auto& p : ds.provenance) {
    if (p.source == PatchSource::lesion) continue;
    EXPECT_EQ(p.source, PatchSource::random_negative);
  }
  EXPECT_TRUE(ds.primary_negative_pool.empty());
  EXPECT_FALSE(ds.fallback_negative_pool.empty());
}

TEST(Stage2, AllLesionStageOneMinesFalsePositives) {
  auto cases = tiny_cases(1, 13);
  auto model = rigged_model(/*always_lesion=*/true);  // everything above 0.5
  auto ds = build_stage2_dataset(cases, model, 78);
  // enough false positives: every negative is an fp-negative
  for (const auto& p : ds.provenance) {
    if (p.source == PatchSource::lesion) continue;
    EXPECT_EQ(p.source, PatchSource::fp_negative);
  }
  // the fp pool is exactly the non-lesion brain voxels
  const Case& c = cases[0];
  EXPECT_EQ(ds.primary_negative_pool.size(),
            c.count_brain_voxels() - c.count_lesion_voxels());
}

TEST(Resample, OnlyAtPeriodAndDeterministic) {
  auto cases = tiny_cases(2, 14);
  auto ds = build_stage1_dataset(cases, 200);
  split_validation(ds, 0.25, 200);
  auto pos_before = center_set(ds, 1);
  auto neg_before = center_set(ds, 0, /*train_only=*/true);

  auto copy = ds;
  resample_negatives(copy, cases, 5, 10);  // not a multiple: unchanged
  EXPECT_EQ(center_set(copy, 0, true), neg_before);
  EXPECT_EQ(copy.patches.storage(), ds.patches.storage());

  resample_negatives(copy, cases, 10, 10);
  EXPECT_NE(center_set(copy, 0, true), neg_before);    // negatives redrawn
  EXPECT_EQ(center_set(copy, 1), pos_before);          // positives untouched
  EXPECT_EQ(copy.count_label(0), copy.count_label(1));  // still balanced

  // validation patches excluded from the redraw
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.is_validation[i]) {
      EXPECT_EQ(copy.provenance[i].center, ds.provenance[i].center);
    }
  }

  auto again = ds;
  resample_negatives(again, cases, 10, 10);
  EXPECT_EQ(again.patches.storage(), copy.patches.storage());  // same seed+epoch
}

TEST(SplitValidation, StratifiedAndDeterministic) {
  auto cases = tiny_cases(2, 15);
  auto ds = build_stage1_dataset(cases, 300);
  const std::size_t per_class = ds.count_label(1);
  split_validation(ds, 0.25, 1);
  std::size_t val0 = 0, val1 = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!ds.is_validation[i]) continue;
    (ds.labels[i] ? val1 : val0) += 1;
  }
  const auto expect = static_cast<std::size_t>(
      std::llround(0.25 * static_cast<double>(per_class)));
  EXPECT_EQ(val0, expect);
  EXPECT_EQ(val1, expect);

  auto ds2 = build_stage1_dataset(cases, 300);
  split_validation(ds2, 0.25, 1);
  EXPECT_EQ(ds.is_validation, ds2.is_validation);

  EXPECT_THROW(split_validation(ds, 0.0, 1), std::invalid_argument);
  EXPECT_THROW(split_validation(ds, 1.0, 1), std::invalid_argument);
}

TEST(SplitValidation, TooSmallDatasetRejected) {
  PatchDataset ds;
  ds.patches = Tensor<float>({4, 2, 11, 11, 11});
  ds.labels = {0, 1, 0, 1};
  ds.provenance.resize(4);
  ds.is_validation.assign(4, 0);
  EXPECT_THROW(split_validation(ds, 0.25, 1), std::invalid_argument);
}

TEST(PredictAtVoxels, IndependentOfBatchSize) {
  auto cases = tiny_cases(1, 16);
  auto model = build_model<float>(3);
  std::vector<Index3> centers;
  for (std::size_t i = 0; i < 40; ++i) centers.push_back({12, 12, i % 20});
  auto a = predict_at_voxels(model, cases[0], centers, 7);
  auto b = predict_at_voxels(model, cases[0], centers, 64);
  EXPECT_EQ(a, b);
}
