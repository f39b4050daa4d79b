#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>

#include "lesionseg/tensor.hpp"

namespace lesionseg {

/// A 3D scalar image with voxel spacing in millimeters and an origin offset.
struct Volume {
  Tensor<float> data;                        // [d,h,w]
  std::array<float, 3> spacing{1.f, 1.f, 1.f};
  std::array<float, 3> origin{0.f, 0.f, 0.f};

  Volume() = default;
  explicit Volume(Shape shape) : data(std::move(shape)) { check(); }
  Volume(Tensor<float> t, std::array<float, 3> sp) : data(std::move(t)), spacing(sp) {
    check();
  }

  void check() const {
    if (data.rank() != 3) {
      throw ShapeError("volume must be 3-dimensional, got " + shape_str(data.shape()));
    }
    for (float s : spacing) {
      if (!(s > 0.f)) throw std::invalid_argument("voxel spacing must be > 0");
    }
  }

  std::size_t d() const { return data.extent(0); }
  std::size_t h() const { return data.extent(1); }
  std::size_t w() const { return data.extent(2); }
  std::size_t size() const { return data.size(); }
  float voxel_volume_mm3() const { return spacing[0] * spacing[1] * spacing[2]; }

  float& at(std::size_t z, std::size_t y, std::size_t x) { return data(z, y, x); }
  float at(std::size_t z, std::size_t y, std::size_t x) const { return data(z, y, x); }
};

/// Voxel index in (z,y,x) order matching Volume storage.
struct Index3 {
  std::size_t z, y, x;
  bool operator==(const Index3&) const = default;
};

/// One subject: co-registered FLAIR and T1-w volumes, a brain mask, and an
/// optional binary lesion annotation. Intensities are z-scored over the brain
/// mask at construction time.
struct Case {
  std::string id;
  Volume flair;
  Volume t1;
  Volume brain_mask;                  // binary {0,1}
  std::optional<Volume> lesion_mask;  // binary {0,1}, subset of brain_mask

  std::size_t count_brain_voxels() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < brain_mask.size(); ++i)
      if (brain_mask.data[i] != 0.f) ++n;
    return n;
  }

  std::size_t count_lesion_voxels() const {
    if (!lesion_mask) return 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < lesion_mask->size(); ++i)
      if (lesion_mask->data[i] != 0.f) ++n;
    return n;
  }
};

/// Z-scores the volume over in-mask voxels; out-of-mask voxels become 0.
/// Rejects an empty mask and constant in-mask intensities.
inline Volume zscore_normalize(const Volume& volume, const Volume& brain_mask) {
  require_same_shape(volume.data.shape(), brain_mask.data.shape(), "zscore_normalize");
  double sum = 0, sumsq = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < volume.size(); ++i) {
    if (brain_mask.data[i] == 0.f) continue;
    const double v = volume.data[i];
    sum += v;
    sumsq += v * v;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("zscore_normalize: empty brain mask");
  const double mean = sum / static_cast<double>(n);
  const double var = sumsq / static_cast<double>(n) - mean * mean;
  if (!(var > 0.0)) {
    throw std::invalid_argument(
        "zscore_normalize: constant in-mask intensities (zero variance)");
  }
  const double inv_std = 1.0 / std::sqrt(var);
  Volume out = volume;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data[i] = brain_mask.data[i] != 0.f
                      ? static_cast<float>((volume.data[i] - mean) * inv_std)
                      : 0.f;
  }
  return out;
}

/// Binarizes at > 0.5 (annotation files may hold arbitrary label values).
inline Volume binarize_mask(const Volume& v) {
  Volume out = v;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = v.data[i] > 0.5f ? 1.f : 0.f;
  return out;
}

/// Brain mask fallback when no mask file is given: the nonzero support of the
/// raw FLAIR image (inputs are assumed skull-stripped, so background is 0).
inline Volume default_brain_mask(const Volume& raw_flair) {
  Volume out = raw_flair;
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data[i] = raw_flair.data[i] != 0.f ? 1.f : 0.f;
  return out;
}

/// Assembles a case from raw (unnormalized) volumes: derives/validates the
/// brain mask, binarizes the lesion mask and clips it to the brain, and
/// z-scores both modalities over the brain mask.
inline Case make_case(std::string id, const Volume& raw_flair, const Volume& raw_t1,
                      const std::optional<Volume>& lesion,
                      const std::optional<Volume>& brain) {
  if (raw_flair.data.shape() != raw_t1.data.shape()) {
    throw ShapeError("case " + id + ": t1 shape " + shape_str(raw_t1.data.shape()) +
                     " does not match flair " + shape_str(raw_flair.data.shape()));
  }
  Case c;
  c.id = std::move(id);
  c.brain_mask = brain ? binarize_mask(*brain) : default_brain_mask(raw_flair);
  if (brain && brain->data.shape() != raw_flair.data.shape()) {
    throw ShapeError("case " + c.id + ": brain mask shape " +
                     shape_str(brain->data.shape()) + " does not match flair " +
                     shape_str(raw_flair.data.shape()));
  }
  c.flair = zscore_normalize(raw_flair, c.brain_mask);
  c.t1 = zscore_normalize(raw_t1, c.brain_mask);
  c.flair.spacing = raw_flair.spacing;
  c.t1.spacing = raw_t1.spacing;
  c.flair.origin = raw_flair.origin;
  c.t1.origin = raw_t1.origin;
  if (lesion) {
    if (lesion->data.shape() != raw_flair.data.shape()) {
      throw ShapeError("case " + c.id + ": lesion mask shape " +
                       shape_str(lesion->data.shape()) + " does not match flair " +
                       shape_str(raw_flair.data.shape()));
    }
    Volume lm = binarize_mask(*lesion);
    // the lesion annotation must lie inside the brain mask
    for (std::size_t i = 0; i < lm.size(); ++i) {
      if (c.brain_mask.data[i] == 0.f) lm.data[i] = 0.f;
    }
    lm.spacing = raw_flair.spacing;
    c.lesion_mask = std::move(lm);
  }
  c.brain_mask.spacing = raw_flair.spacing;
  return c;
}

}  // namespace lesionseg
