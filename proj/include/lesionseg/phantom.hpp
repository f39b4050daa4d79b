#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "lesionseg/rng.hpp"
#include "lesionseg/volume.hpp"

namespace lesionseg {

struct TissueIntensity {
  float mean;
  float stddev;
};

/// Scanner/protocol stand-in: per-tissue intensity distributions per
/// modality, a global affine intensity transform, and a noise level. Domain
/// shift = different intensity maps; the affine part is removed again by
/// z-scoring and mainly exercises normalization.
struct DomainSpec {
  std::string id = "source";
  TissueIntensity flair_tissue{0.55f, 0.05f};
  TissueIntensity flair_ventricle{0.20f, 0.04f};
  TissueIntensity flair_lesion{0.95f, 0.05f};
  TissueIntensity t1_tissue{0.65f, 0.05f};
  TissueIntensity t1_ventricle{0.25f, 0.04f};
  TissueIntensity t1_lesion{0.35f, 0.05f};
  float gain_flair = 1.f, offset_flair = 0.f;
  float gain_t1 = 1.f, offset_t1 = 0.f;
  float noise_std = 0.03f;
  int smoothing_radius = 0;

  void validate() const {
    if (!(gain_flair > 0.f && gain_t1 > 0.f)) {
      throw std::invalid_argument("domain gains must be > 0");
    }
    if (noise_std < 0.f) throw std::invalid_argument("noise std must be >= 0");
    if (smoothing_radius < 0) throw std::invalid_argument("smoothing radius must be >= 0");
    // white-matter lesion contrast: hyperintense on FLAIR, hypointense on T1
    if (!(flair_lesion.mean > flair_tissue.mean)) {
      throw std::invalid_argument("lesions must be hyperintense on FLAIR");
    }
    if (!(t1_lesion.mean < t1_tissue.mean)) {
      throw std::invalid_argument("lesions must be hypointense on T1");
    }
  }
};

/// Geometry of the synthetic subject: brain/ventricle ellipsoids and
/// ellipsoidal lesions, with a per-case target lesion load sampled in
/// milliliter equivalents (1 ml = 1000 mm^3 / voxel volume).
struct PhantomSpec {
  std::array<std::size_t, 3> shape{64, 64, 64};  // (d,h,w)
  std::array<float, 3> spacing{2.f, 2.f, 2.f};   // mm per axis
  std::array<float, 3> brain_semiaxes{26.f, 24.f, 22.f};     // voxels
  std::array<float, 3> ventricle_semiaxes{6.f, 5.f, 4.f};    // voxels
  std::array<float, 3> ventricle_offset{0.f, 0.f, 0.f};      // from brain center
  std::size_t lesion_count_min = 1;
  std::size_t lesion_count_max = 60;
  float lesion_radius_min = 1.5f;  // ellipsoid semiaxis range, voxels
  float lesion_radius_max = 4.f;
  float lesion_volume_min_ml = 0.5f;
  float lesion_volume_max_ml = 18.f;
  int placement_retries = 400;

  void validate() const {
    for (std::size_t e : shape) {
      if (e < 8) throw std::invalid_argument("phantom volume too small");
    }
    for (float s : spacing) {
      if (!(s > 0.f)) throw std::invalid_argument("phantom spacing must be > 0");
    }
    if (lesion_count_min > lesion_count_max) {
      throw std::invalid_argument("lesion count range is empty");
    }
    if (!(lesion_radius_min > 0.f && lesion_radius_max >= lesion_radius_min)) {
      throw std::invalid_argument("lesion radius range is invalid");
    }
    if (!(lesion_volume_min_ml >= 0.f && lesion_volume_max_ml >= lesion_volume_min_ml)) {
      throw std::invalid_argument("lesion volume range is invalid");
    }
  }

  float voxel_volume_mm3() const { return spacing[0] * spacing[1] * spacing[2]; }
};

struct GeneratedCase {
  Case normalized;   // z-scored, ready for training and inference
  Volume raw_flair;  // pre-normalization intensities (background exactly 0)
  Volume raw_t1;
  Volume lesion_mask;
  Volume brain_mask;
};

namespace detail {

inline std::uint64_t hash_string(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

struct Ellipsoid {
  std::array<float, 3> center;    // (z,y,x) voxel coordinates
  std::array<float, 3> semiaxes;  // voxels

  bool contains(float z, float y, float x) const {
    const float az = (z - center[0]) / semiaxes[0];
    const float ay = (y - center[1]) / semiaxes[1];
    const float ax = (x - center[2]) / semiaxes[2];
    return az * az + ay * ay + ax * ax <= 1.f;
  }
};

/// In-brain renormalized box smoothing; the background stays exactly zero.
inline void smooth_in_brain(Volume& v, const Volume& brain, int radius) {
  if (radius <= 0) return;
  const std::ptrdiff_t d = static_cast<std::ptrdiff_t>(v.d());
  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(v.h());
  const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(v.w());
  Volume out = v;
  for (std::ptrdiff_t z = 0; z < d; ++z)
    for (std::ptrdiff_t y = 0; y < h; ++y)
      for (std::ptrdiff_t x = 0; x < w; ++x) {
        const std::size_t i = static_cast<std::size_t>((z * h + y) * w + x);
        if (brain.data[i] == 0.f) continue;
        float acc = 0.f;
        int n = 0;
        for (std::ptrdiff_t dz = -radius; dz <= radius; ++dz)
          for (std::ptrdiff_t dy = -radius; dy <= radius; ++dy)
            for (std::ptrdiff_t dx = -radius; dx <= radius; ++dx) {
              const std::ptrdiff_t nz = z + dz, ny = y + dy, nx = x + dx;
              if (nz < 0 || nz >= d || ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
              const std::size_t ni = static_cast<std::size_t>((nz * h + ny) * w + nx);
              if (brain.data[ni] == 0.f) continue;
              acc += v.data[ni];
              ++n;
            }
        out.data[i] = acc / static_cast<float>(n);
      }
  v = std::move(out);
}

}  // namespace detail

/// Synthesizes one two-modality case with exact ground truth (voxel centers
/// inside the lesion ellipsoids). Geometry depends only on `seed`, so two
/// domains generated from the same seed share identical ground truth.
inline GeneratedCase generate_case_raw(const PhantomSpec& spec, const DomainSpec& domain,
                                       std::uint64_t seed, const std::string& id) {
  spec.validate();
  domain.validate();
  const std::size_t d = spec.shape[0], h = spec.shape[1], w = spec.shape[2];
  Rng geom_rng = make_rng(derive_seed(seed, 0x6e0));
  Rng intensity_rng =
      make_rng(derive_seed(seed ^ detail::hash_string(domain.id), 0x17));

  GeneratedCase out;
  const Shape vol_shape{d, h, w};
  out.brain_mask = Volume(vol_shape);
  out.lesion_mask = Volume(vol_shape);
  out.raw_flair = Volume(vol_shape);
  out.raw_t1 = Volume(vol_shape);
  for (Volume* v : {&out.brain_mask, &out.lesion_mask, &out.raw_flair, &out.raw_t1}) {
    v->spacing = spec.spacing;
  }

  const detail::Ellipsoid brain{{d / 2.f, h / 2.f, w / 2.f}, spec.brain_semiaxes};
  const detail::Ellipsoid ventricle{{d / 2.f + spec.ventricle_offset[0],
                                     h / 2.f + spec.ventricle_offset[1],
                                     w / 2.f + spec.ventricle_offset[2]},
                                    spec.ventricle_semiaxes};

  // class map: 0 background, 1 tissue, 2 ventricle, 3 lesion
  std::vector<std::uint8_t> tissue_class(d * h * w, 0);
  std::size_t i = 0;
  for (std::size_t z = 0; z < d; ++z)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x, ++i) {
        const float fz = static_cast<float>(z), fy = static_cast<float>(y),
                    fx = static_cast<float>(x);
        if (!brain.contains(fz, fy, fx)) continue;
        out.brain_mask.data[i] = 1.f;
        tissue_class[i] = ventricle.contains(fz, fy, fx) ? 2 : 1;
      }

  // lesion placement: non-overlapping, one voxel of separation, inside the
  // brain and outside the ventricle
  const float voxels_per_ml = 1000.f / spec.voxel_volume_mm3();
  std::uniform_real_distribution<float> load_dist(spec.lesion_volume_min_ml,
                                                  spec.lesion_volume_max_ml);
  std::uniform_real_distribution<float> radius_dist(spec.lesion_radius_min,
                                                    spec.lesion_radius_max);
  const float target_voxels =
      spec.lesion_count_max == 0 ? 0.f : load_dist(geom_rng) * voxels_per_ml;
  std::size_t placed = 0, lesion_voxels = 0;
  int failures = 0;
  while (placed < spec.lesion_count_max &&
         (static_cast<float>(lesion_voxels) < target_voxels ||
          placed < spec.lesion_count_min)) {
    if (failures > spec.placement_retries) {
      if (placed >= spec.lesion_count_min) break;
      throw std::runtime_error("phantom: infeasible lesion placement for case " + id);
    }
    detail::Ellipsoid lesion;
    for (int a = 0; a < 3; ++a) lesion.semiaxes[a] = radius_dist(geom_rng);
    std::uniform_real_distribution<float> cz(0.f, static_cast<float>(d));
    std::uniform_real_distribution<float> cy(0.f, static_cast<float>(h));
    std::uniform_real_distribution<float> cx(0.f, static_cast<float>(w));
    lesion.center = {cz(geom_rng), cy(geom_rng), cx(geom_rng)};

    // collect the support and validate placement
    std::vector<std::size_t> support;
    bool ok = true;
    const std::ptrdiff_t z0 = static_cast<std::ptrdiff_t>(
        std::floor(lesion.center[0] - lesion.semiaxes[0] - 1));
    const std::ptrdiff_t z1 = static_cast<std::ptrdiff_t>(
        std::ceil(lesion.center[0] + lesion.semiaxes[0] + 1));
    for (std::ptrdiff_t z = z0; z <= z1 && ok; ++z) {
      for (std::ptrdiff_t y = static_cast<std::ptrdiff_t>(
               std::floor(lesion.center[1] - lesion.semiaxes[1] - 1));
           y <= static_cast<std::ptrdiff_t>(
                    std::ceil(lesion.center[1] + lesion.semiaxes[1] + 1)) && ok;
           ++y) {
        for (std::ptrdiff_t x = static_cast<std::ptrdiff_t>(
                 std::floor(lesion.center[2] - lesion.semiaxes[2] - 1));
             x <= static_cast<std::ptrdiff_t>(
                      std::ceil(lesion.center[2] + lesion.semiaxes[2] + 1)) && ok;
             ++x) {
          if (z < 0 || y < 0 || x < 0 || z >= static_cast<std::ptrdiff_t>(d) ||
              y >= static_cast<std::ptrdiff_t>(h) || x >= static_cast<std::ptrdiff_t>(w)) {
            continue;
          }
          const bool inside = lesion.contains(static_cast<float>(z), static_cast<float>(y),
                                              static_cast<float>(x));
          const std::size_t vi = (static_cast<std::size_t>(z) * h +
                                  static_cast<std::size_t>(y)) * w +
                                 static_cast<std::size_t>(x);
          if (!inside) {
            // one-voxel separation ring must stay lesion-free
            if (out.lesion_mask.data[vi] != 0.f) ok = false;
            continue;
          }
          if (tissue_class[vi] != 1) ok = false;  // outside brain or in ventricle
          else if (out.lesion_mask.data[vi] != 0.f) ok = false;
          else support.push_back(vi);
        }
      }
    }
    if (!ok || support.empty()) {
      ++failures;
      continue;
    }
    for (std::size_t vi : support) {
      out.lesion_mask.data[vi] = 1.f;
      tissue_class[vi] = 3;
    }
    lesion_voxels += support.size();
    ++placed;
    failures = 0;
  }

  // intensities: class means + class variability + scanner noise, then the
  // domain's affine transform; all in-brain only so background stays 0
  std::normal_distribution<float> gauss(0.f, 1.f);
  const TissueIntensity* flair_map[4] = {nullptr, &domain.flair_tissue,
                                         &domain.flair_ventricle, &domain.flair_lesion};
  const TissueIntensity* t1_map[4] = {nullptr, &domain.t1_tissue, &domain.t1_ventricle,
                                      &domain.t1_lesion};
  for (std::size_t vi = 0; vi < tissue_class.size(); ++vi) {
    if (tissue_class[vi] == 0) continue;
    const auto* fm = flair_map[tissue_class[vi]];
    const auto* tm = t1_map[tissue_class[vi]];
    out.raw_flair.data[vi] = fm->mean + fm->stddev * gauss(intensity_rng);
    out.raw_t1.data[vi] = tm->mean + tm->stddev * gauss(intensity_rng);
  }
  detail::smooth_in_brain(out.raw_flair, out.brain_mask, domain.smoothing_radius);
  detail::smooth_in_brain(out.raw_t1, out.brain_mask, domain.smoothing_radius);
  if (domain.noise_std > 0.f) {
    for (std::size_t vi = 0; vi < tissue_class.size(); ++vi) {
      if (tissue_class[vi] == 0) continue;
      out.raw_flair.data[vi] += domain.noise_std * gauss(intensity_rng);
      out.raw_t1.data[vi] += domain.noise_std * gauss(intensity_rng);
    }
  }
  for (std::size_t vi = 0; vi < tissue_class.size(); ++vi) {
    if (tissue_class[vi] == 0) continue;
    out.raw_flair.data[vi] = domain.gain_flair * out.raw_flair.data[vi] + domain.offset_flair;
    out.raw_t1.data[vi] = domain.gain_t1 * out.raw_t1.data[vi] + domain.offset_t1;
  }

  out.normalized = make_case(id, out.raw_flair, out.raw_t1, out.lesion_mask, out.brain_mask);
  return out;
}

inline Case generate_case(const PhantomSpec& spec, const DomainSpec& domain,
                          std::uint64_t seed, const std::string& id = "") {
  return generate_case_raw(spec, domain, seed,
                           id.empty() ? domain.id + "_" + std::to_string(seed) : id)
      .normalized;
}

/// n cases with per-case seeds derived from the master seed; lesion loads
/// sample the configured volume range case by case.
inline std::vector<Case> generate_domain_set(const PhantomSpec& spec,
                                             const DomainSpec& domain, std::size_t n,
                                             std::uint64_t master_seed) {
  std::vector<Case> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::string id = domain.id + "_" + std::to_string(i);
    out.push_back(generate_case(spec, domain, derive_seed(master_seed, i), id));
  }
  return out;
}

}  // namespace lesionseg
