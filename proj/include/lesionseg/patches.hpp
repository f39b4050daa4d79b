#pragma once

#include <algorithm>
#include <cstdint>
#include <unordered_set>
#include <vector>

#include "lesionseg/model.hpp"
#include "lesionseg/rng.hpp"
#include "lesionseg/volume.hpp"

namespace lesionseg {

enum class PatchSource { lesion, random_negative, fp_negative };

inline const char* patch_source_name(PatchSource s) {
  switch (s) {
    case PatchSource::lesion: return "lesion";
    case PatchSource::random_negative: return "random-negative";
    case PatchSource::fp_negative: return "fp-negative";
  }
  return "?";
}

struct PatchProvenance {
  std::size_t case_index;
  std::string case_id;
  Index3 center;
  PatchSource source;
};

struct NegativePoolEntry {
  std::size_t case_index;
  Index3 center;
};

/// Balanced set of 2-channel 11x11x11 patches. Positives cover every lesion
/// voxel of the source cases exactly once; negatives are redrawable from the
/// stored pools.
struct PatchDataset {
  Tensor<float> patches;  // [n,2,11,11,11]
  std::vector<int> labels;
  std::vector<PatchProvenance> provenance;
  std::vector<char> is_validation;
  std::vector<NegativePoolEntry> primary_negative_pool;   // stage 1: brain\lesion; stage 2: false positives
  std::vector<NegativePoolEntry> fallback_negative_pool;  // stage 2 shortfall source
  std::vector<std::string> case_ids;
  std::uint64_t seed = 0;
  bool has_split = false;

  std::size_t size() const { return labels.size(); }

  std::size_t count_label(int label) const {
    std::size_t n = 0;
    for (int l : labels)
      if (l == label) ++n;
    return n;
  }
};

/// Copies the 11^3 neighborhood of `center` for both modalities into `dst`
/// (FLAIR then T1-w), zero-padding where the window leaves the volume.
inline void extract_patch_into(const Case& c, Index3 center, float* dst) {
  const std::size_t e = kPatchEdge;
  const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(e / 2);
  const std::ptrdiff_t d = static_cast<std::ptrdiff_t>(c.flair.d());
  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(c.flair.h());
  const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(c.flair.w());
  if (center.z >= c.flair.d() || center.y >= c.flair.h() || center.x >= c.flair.w()) {
    throw std::out_of_range("patch center outside volume");
  }
  const float* chans[2] = {c.flair.data.data(), c.t1.data.data()};
  for (std::size_t ch = 0; ch < 2; ++ch) {
    const float* src = chans[ch];
    float* out = dst + ch * e * e * e;
    std::size_t o = 0;
    for (std::ptrdiff_t dz = -r; dz <= r; ++dz) {
      const std::ptrdiff_t z = static_cast<std::ptrdiff_t>(center.z) + dz;
      for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
        const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(center.y) + dy;
        for (std::ptrdiff_t dx = -r; dx <= r; ++dx, ++o) {
          const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(center.x) + dx;
          out[o] = (z < 0 || z >= d || y < 0 || y >= h || x < 0 || x >= w)
                       ? 0.f
                       : src[(z * h + y) * w + x];
        }
      }
    }
  }
}

inline Tensor<float> extract_patch(const Case& c, Index3 center) {
  Tensor<float> patch({2, kPatchEdge, kPatchEdge, kPatchEdge});
  extract_patch_into(c, center, patch.data());
  return patch;
}

/// Lesion probabilities of a model at the given voxel centers, evaluated in
/// fixed-size extraction batches. The result is independent of batch_size.
inline std::vector<float> predict_at_voxels(const Model& model, const Case& c,
                                            const std::vector<Index3>& centers,
                                            std::size_t batch_size = 8192) {
  std::vector<float> probs(centers.size());
  const std::size_t patch_elems = 2 * kPatchEdge * kPatchEdge * kPatchEdge;
  for (std::size_t begin = 0; begin < centers.size(); begin += batch_size) {
    const std::size_t n = std::min(batch_size, centers.size() - begin);
    Tensor<float> batch({n, 2, kPatchEdge, kPatchEdge, kPatchEdge});
    for (std::size_t i = 0; i < n; ++i) {
      extract_patch_into(c, centers[begin + i], batch.data() + i * patch_elems);
    }
    auto p = predict(model, batch);
    std::copy(p.data(), p.data() + n, probs.begin() + begin);
  }
  return probs;
}

inline std::vector<Index3> brain_voxel_list(const Case& c) {
  std::vector<Index3> out;
  const std::size_t d = c.brain_mask.d(), h = c.brain_mask.h(), w = c.brain_mask.w();
  out.reserve(c.count_brain_voxels());
  std::size_t i = 0;
  for (std::size_t z = 0; z < d; ++z)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x, ++i)
        if (c.brain_mask.data.data()[i] != 0.f) out.push_back({z, y, x});
  return out;
}

namespace detail {

inline std::uint64_t pool_key(const NegativePoolEntry& e, std::size_t h, std::size_t w) {
  const std::uint64_t flat = (e.center.z * h + e.center.y) * w + e.center.x;
  return (static_cast<std::uint64_t>(e.case_index) << 42) ^ flat;
}

/// Uniform sample of k distinct entries of `pool` (excluding `excluded`
/// keys), via partial Fisher-Yates on the filtered index list.
inline std::vector<NegativePoolEntry> sample_pool(
    const std::vector<NegativePoolEntry>& pool,
    const std::unordered_set<std::uint64_t>& excluded, std::size_t mask_h,
    std::size_t mask_w, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx;
  idx.reserve(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (excluded.empty() || !excluded.count(pool_key(pool[i], mask_h, mask_w)))
      idx.push_back(i);
  }
  k = std::min(k, idx.size());
  std::vector<NegativePoolEntry> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
    out.push_back(pool[idx[i]]);
  }
  return out;
}

inline void append_patch(PatchDataset& ds, const std::vector<Case>& cases,
                         std::size_t case_index, Index3 center, int label,
                         PatchSource source, std::size_t slot) {
  const std::size_t patch_elems = 2 * kPatchEdge * kPatchEdge * kPatchEdge;
  extract_patch_into(cases[case_index], center, ds.patches.data() + slot * patch_elems);
  ds.labels[slot] = label;
  ds.provenance[slot] = {case_index, cases[case_index].id, center, source};
}

inline PatchDataset build_dataset(const std::vector<Case>& cases,
                                  std::vector<NegativePoolEntry> primary_pool,
                                  std::vector<NegativePoolEntry> fallback_pool,
                                  PatchSource primary_source, std::uint64_t seed) {
  std::vector<std::pair<std::size_t, Index3>> positives;
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    const Case& c = cases[ci];
    if (!c.lesion_mask) {
      throw std::invalid_argument("case " + c.id + " has no lesion annotation");
    }
    const std::size_t d = c.flair.d(), h = c.flair.h(), w = c.flair.w();
    std::size_t i = 0;
    for (std::size_t z = 0; z < d; ++z)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x, ++i)
          if (c.lesion_mask->data.data()[i] != 0.f) positives.push_back({ci, {z, y, x}});
  }
  if (positives.empty()) {
    throw std::invalid_argument("no lesion voxels in any training case");
  }
  const std::size_t n_pos = positives.size();
  if (primary_pool.size() + fallback_pool.size() < n_pos) {
    throw std::invalid_argument(
        "fewer candidate negatives (" +
        std::to_string(primary_pool.size() + fallback_pool.size()) + ") than positives (" +
        std::to_string(n_pos) + ")");
  }

  PatchDataset ds;
  ds.seed = seed;
  ds.primary_negative_pool = std::move(primary_pool);
  ds.fallback_negative_pool = std::move(fallback_pool);
  for (const Case& c : cases) ds.case_ids.push_back(c.id);
  const std::size_t n = 2 * n_pos;
  ds.patches = Tensor<float>({n, 2, kPatchEdge, kPatchEdge, kPatchEdge});
  ds.labels.assign(n, 0);
  ds.provenance.resize(n);
  ds.is_validation.assign(n, 0);

  for (std::size_t i = 0; i < n_pos; ++i) {
    append_patch(ds, cases, positives[i].first, positives[i].second, 1,
                 PatchSource::lesion, i);
  }
  Rng rng = make_rng(derive_seed(seed, 0));
  const std::size_t mh = cases.front().flair.h(), mw = cases.front().flair.w();
  auto primary = sample_pool(ds.primary_negative_pool, {}, mh, mw, n_pos, rng);
  std::size_t slot = n_pos;
  for (const auto& e : primary) {
    append_patch(ds, cases, e.case_index, e.center, 0, primary_source, slot++);
  }
  if (primary.size() < n_pos) {
    auto extra =
        sample_pool(ds.fallback_negative_pool, {}, mh, mw, n_pos - primary.size(), rng);
    for (const auto& e : extra) {
      append_patch(ds, cases, e.case_index, e.center, 0, PatchSource::random_negative,
                   slot++);
    }
    if (slot != n) {
      throw std::invalid_argument("fewer candidate negatives than positives");
    }
  }
  return ds;
}

}  // namespace detail

/// Positives = every lesion voxel of every case; negatives drawn uniformly
/// without replacement from brain-mask voxels outside the lesions.
inline PatchDataset build_stage1_dataset(const std::vector<Case>& cases,
                                         std::uint64_t seed) {
  if (cases.empty()) throw std::invalid_argument("no training cases");
  std::vector<NegativePoolEntry> pool;
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    const Case& c = cases[ci];
    if (!c.lesion_mask) {
      throw std::invalid_argument("case " + c.id + " has no lesion annotation");
    }
    const std::size_t d = c.flair.d(), h = c.flair.h(), w = c.flair.w();
    std::size_t i = 0;
    for (std::size_t z = 0; z < d; ++z)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x, ++i) {
          if (c.brain_mask.data.data()[i] != 0.f && c.lesion_mask->data.data()[i] == 0.f)
            pool.push_back({ci, {z, y, x}});
        }
  }
  return detail::build_dataset(cases, std::move(pool), {}, PatchSource::random_negative,
                               seed);
}

/// Positives as in stage 1; negatives drawn from the stage-1 model's false
/// positives (non-lesion brain voxels with probability >= fp_threshold on the
/// training cases). If those run short, the shortfall is filled with random
/// brain negatives.
inline PatchDataset build_stage2_dataset(const std::vector<Case>& cases,
                                         const Model& stage1_model, std::uint64_t seed,
                                         float fp_threshold = 0.5f,
                                         std::size_t batch_size = 8192) {
  if (cases.empty()) throw std::invalid_argument("no training cases");
  std::vector<NegativePoolEntry> fp_pool, random_pool;
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    const Case& c = cases[ci];
    if (!c.lesion_mask) {
      throw std::invalid_argument("case " + c.id + " has no lesion annotation");
    }
    auto centers = brain_voxel_list(c);
    auto probs = predict_at_voxels(stage1_model, c, centers, batch_size);
    const std::size_t h = c.flair.h(), w = c.flair.w();
    for (std::size_t i = 0; i < centers.size(); ++i) {
      const Index3& v = centers[i];
      const bool is_lesion =
          c.lesion_mask->data.data()[(v.z * h + v.y) * w + v.x] != 0.f;
      if (is_lesion) continue;
      random_pool.push_back({ci, v});
      if (probs[i] >= fp_threshold) fp_pool.push_back({ci, v});
    }
  }
  return detail::build_dataset(cases, std::move(fp_pool), std::move(random_pool),
                               PatchSource::fp_negative, seed);
}

/// At epochs divisible by `period`, redraws the training-split negatives from
/// the stored pools with a substream derived from (seed, epoch). Positives
/// and validation patches never change.
inline void resample_negatives(PatchDataset& ds, const std::vector<Case>& cases,
                               int epoch, int period = 10) {
  if (period <= 0 || epoch <= 0 || epoch % period != 0) return;
  if (cases.size() != ds.case_ids.size()) {
    throw std::invalid_argument("resample_negatives: case list does not match dataset");
  }
  for (std::size_t i = 0; i < cases.size(); ++i) {
    if (cases[i].id != ds.case_ids[i]) {
      throw std::invalid_argument("resample_negatives: case list does not match dataset");
    }
  }
  std::vector<std::size_t> slots;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.labels[i] == 0 && !ds.is_validation[i]) slots.push_back(i);
  }
  if (slots.empty()) return;

  const std::size_t mh = cases.front().flair.h(), mw = cases.front().flair.w();
  // keep validation negatives out of the redraw to avoid train/val duplicates
  std::unordered_set<std::uint64_t> excluded;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.labels[i] == 0 && ds.is_validation[i]) {
      excluded.insert(detail::pool_key(
          {ds.provenance[i].case_index, ds.provenance[i].center}, mh, mw));
    }
  }
  Rng rng = make_rng(derive_seed(ds.seed, 0x5e5a + static_cast<std::uint64_t>(epoch)));
  auto primary = detail::sample_pool(ds.primary_negative_pool, excluded, mh, mw,
                                     slots.size(), rng);
  const bool stage2 = !ds.fallback_negative_pool.empty();
  std::size_t k = 0;
  for (const auto& e : primary) {
    detail::append_patch(
        ds, cases, e.case_index, e.center, 0,
        stage2 ? PatchSource::fp_negative : PatchSource::random_negative, slots[k++]);
  }
  if (k < slots.size()) {
    auto extra = detail::sample_pool(ds.fallback_negative_pool, excluded, mh, mw,
                                     slots.size() - k, rng);
    for (const auto& e : extra) {
      detail::append_patch(ds, cases, e.case_index, e.center, 0,
                           PatchSource::random_negative, slots[k++]);
    }
  }
  if (k != slots.size()) {
    throw std::invalid_argument("resample_negatives: negative pools exhausted");
  }
}

/// Deterministic stratified train/validation split. Validation patches are
/// excluded from negative resampling.
inline void split_validation(PatchDataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw std::invalid_argument("validation fraction must lie in (0,1), got " +
                                std::to_string(fraction));
  }
  if (ds.size() < 8) {
    throw std::invalid_argument("dataset too small to split (need >= 8 patches, have " +
                                std::to_string(ds.size()) + ")");
  }
  ds.is_validation.assign(ds.size(), 0);
  Rng rng = make_rng(derive_seed(seed, 0x5b117));
  for (int label : {0, 1}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.labels[i] == label) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto k = static_cast<std::size_t>(
        std::llround(fraction * static_cast<double>(idx.size())));
    for (std::size_t i = 0; i < k && i < idx.size(); ++i) ds.is_validation[idx[i]] = 1;
  }
  ds.has_split = true;
}

}  // namespace lesionseg
