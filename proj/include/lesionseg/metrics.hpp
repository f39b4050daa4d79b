#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "lesionseg/volume.hpp"

namespace lesionseg {

/// Connected-component labeling of a binary volume. Labels are 1..k in
/// first-encountered raster order; 0 is background.
struct RegionLabeling {
  Tensor<std::int32_t> labels;  // [d,h,w]
  std::vector<std::size_t> sizes;
  int connectivity = 26;
  std::size_t count() const { return sizes.size(); }
};

namespace detail {

inline std::vector<std::array<int, 3>> neighbor_offsets(int connectivity) {
  if (connectivity != 6 && connectivity != 18 && connectivity != 26) {
    throw std::invalid_argument("connectivity must be 6, 18 or 26");
  }
  const int max_l1 = connectivity == 6 ? 1 : connectivity == 18 ? 2 : 3;
  std::vector<std::array<int, 3>> out;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int l1 = std::abs(dz) + std::abs(dy) + std::abs(dx);
        if (l1 == 0 || l1 > max_l1) continue;
        out.push_back({dz, dy, dx});
      }
  return out;
}

}  // namespace detail

inline RegionLabeling connected_components(const Volume& mask, int connectivity = 26) {
  const auto offsets = detail::neighbor_offsets(connectivity);
  const std::ptrdiff_t d = static_cast<std::ptrdiff_t>(mask.d());
  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(mask.h());
  const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(mask.w());
  RegionLabeling out;
  out.connectivity = connectivity;
  out.labels = Tensor<std::int32_t>(mask.data.shape());
  std::vector<std::size_t> stack;
  std::int32_t next = 0;
  for (std::ptrdiff_t z = 0; z < d; ++z)
    for (std::ptrdiff_t y = 0; y < h; ++y)
      for (std::ptrdiff_t x = 0; x < w; ++x) {
        const std::size_t i = static_cast<std::size_t>((z * h + y) * w + x);
        if (mask.data[i] == 0.f || out.labels[i] != 0) continue;
        ++next;
        std::size_t size = 0;
        stack.assign(1, i);
        out.labels[i] = next;
        while (!stack.empty()) {
          const std::size_t cur = stack.back();
          stack.pop_back();
          ++size;
          const std::ptrdiff_t cz = static_cast<std::ptrdiff_t>(cur / (h * w));
          const std::ptrdiff_t cy = static_cast<std::ptrdiff_t>((cur / w) % h);
          const std::ptrdiff_t cx = static_cast<std::ptrdiff_t>(cur % w);
          for (const auto& o : offsets) {
            const std::ptrdiff_t nz = cz + o[0], ny = cy + o[1], nx = cx + o[2];
            if (nz < 0 || nz >= d || ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            const std::size_t ni = static_cast<std::size_t>((nz * h + ny) * w + nx);
            if (mask.data[ni] == 0.f || out.labels[ni] != 0) continue;
            out.labels[ni] = next;
            stack.push_back(ni);
          }
        }
        out.sizes.push_back(size);
      }
  return out;
}

struct VoxelTallies {
  std::uint64_t tp = 0, fp = 0, fn = 0;
};

inline VoxelTallies voxel_tallies(const Volume& gt, const Volume& seg) {
  require_same_shape(gt.data.shape(), seg.data.shape(), "voxel_tallies");
  VoxelTallies t;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool g = gt.data[i] != 0.f, s = seg.data[i] != 0.f;
    t.tp += g && s;
    t.fp += !g && s;
    t.fn += g && !s;
  }
  return t;
}

/// Dice similarity coefficient 2*TP_s / (FN_s + FP_s + 2*TP_s), reported as a
/// fraction in [0,1]; two empty masks score 1.
inline double dsc(const Volume& gt, const Volume& seg) {
  const auto t = voxel_tallies(gt, seg);
  if (t.tp + t.fp + t.fn == 0) return 1.0;
  return 2.0 * static_cast<double>(t.tp) /
         static_cast<double>(t.fn + t.fp + 2 * t.tp);
}

struct RegionTallies {
  std::uint64_t detected = 0;  // reference regions overlapped by the other mask
  std::uint64_t missed = 0;
};

/// Counts reference-mask regions that overlap `other` in at least
/// max(1, ceil(min_overlap_fraction * region_size)) voxels.
inline RegionTallies region_detection_tallies(const Volume& reference,
                                              const Volume& other, int connectivity,
                                              double min_overlap_fraction = 0.0) {
  require_same_shape(reference.data.shape(), other.data.shape(),
                     "region_detection_tallies");
  auto labels = connected_components(reference, connectivity);
  std::vector<std::uint64_t> overlap(labels.count(), 0);
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const std::int32_t l = labels.labels[i];
    if (l != 0 && other.data[i] != 0.f) ++overlap[static_cast<std::size_t>(l - 1)];
  }
  RegionTallies t;
  for (std::size_t r = 0; r < labels.count(); ++r) {
    const auto need = std::max<std::uint64_t>(
        1, static_cast<std::uint64_t>(
               std::ceil(min_overlap_fraction * static_cast<double>(labels.sizes[r]))));
    if (overlap[r] >= need) ++t.detected;
    else ++t.missed;
  }
  return t;
}

/// TP_d / (TP_d + FN_d): fraction of ground-truth lesion regions detected.
/// Empty ground truth scores 1.
inline double lesion_sensitivity(const Volume& gt, const Volume& seg,
                                 int connectivity = 26,
                                 double min_overlap_fraction = 0.0) {
  const auto t = region_detection_tallies(gt, seg, connectivity, min_overlap_fraction);
  if (t.detected + t.missed == 0) return 1.0;
  return static_cast<double>(t.detected) / static_cast<double>(t.detected + t.missed);
}

/// TP_d / (TP_d + FP_d): fraction of segmented regions that touch the ground
/// truth. Empty segmentation scores 1. Dual to lesion_sensitivity with the
/// masks swapped.
inline double lesion_precision(const Volume& gt, const Volume& seg,
                               int connectivity = 26,
                               double min_overlap_fraction = 0.0) {
  return lesion_sensitivity(seg, gt, connectivity, min_overlap_fraction);
}

struct CaseMetrics {
  std::string id;
  double dsc = 0, sensitivity = 0, precision = 0;
  std::uint64_t tp_s = 0, fp_s = 0, fn_s = 0;
  std::uint64_t tp_d = 0, fp_d = 0, fn_d = 0;
};

struct MetricStat {
  double mean = 0, stddev = 0;
};

/// Per-case metrics plus aggregate mean and (population) standard deviation;
/// a single-case report has stddev 0.
struct MetricsReport {
  std::vector<CaseMetrics> cases;
  MetricStat dsc, sensitivity, precision;

  void aggregate() {
    auto stat = [&](auto field) {
      MetricStat s;
      if (cases.empty()) return s;
      double sum = 0;
      for (const auto& c : cases) sum += field(c);
      s.mean = sum / static_cast<double>(cases.size());
      double var = 0;
      for (const auto& c : cases) {
        const double d = field(c) - s.mean;
        var += d * d;
      }
      s.stddev = std::sqrt(var / static_cast<double>(cases.size()));
      return s;
    };
    dsc = stat([](const CaseMetrics& c) { return c.dsc; });
    sensitivity = stat([](const CaseMetrics& c) { return c.sensitivity; });
    precision = stat([](const CaseMetrics& c) { return c.precision; });
  }

  std::string to_dsv(char delim = ',') const {
    std::ostringstream os;
    os << std::setprecision(6) << std::fixed;
    os << "case" << delim << "dsc" << delim << "sensitivity" << delim << "precision"
       << delim << "tp_s" << delim << "fp_s" << delim << "fn_s" << delim << "tp_d"
       << delim << "fp_d" << delim << "fn_d" << "\n";
    for (const auto& c : cases) {
      os << c.id << delim << c.dsc << delim << c.sensitivity << delim << c.precision
         << delim << c.tp_s << delim << c.fp_s << delim << c.fn_s << delim << c.tp_d
         << delim << c.fp_d << delim << c.fn_d << "\n";
    }
    os << "mean" << delim << dsc.mean << delim << sensitivity.mean << delim
       << precision.mean << delim << delim << delim << delim << delim << delim << "\n";
    os << "std" << delim << dsc.stddev << delim << sensitivity.stddev << delim
       << precision.stddev << delim << delim << delim << delim << delim << delim << "\n";
    return os.str();
  }

  /// Human-readable table in the "mean (standard deviation)" convention.
  std::string to_table() const {
    std::ostringstream os;
    os << std::setprecision(2) << std::fixed;
    os << std::left << std::setw(24) << "case" << std::setw(14) << "DSC"
       << std::setw(14) << "sensitivity" << std::setw(14) << "precision" << "\n";
    for (const auto& c : cases) {
      os << std::left << std::setw(24) << c.id << std::setw(14) << c.dsc
         << std::setw(14) << c.sensitivity << std::setw(14) << c.precision << "\n";
    }
    auto cell = [](const MetricStat& s) {
      std::ostringstream c;
      c << std::setprecision(2) << std::fixed << s.mean << " (" << s.stddev << ")";
      return c.str();
    };
    os << std::left << std::setw(24) << "aggregate" << std::setw(14) << cell(dsc)
       << std::setw(14) << cell(sensitivity) << std::setw(14) << cell(precision)
       << "\n";
    return os.str();
  }
};

/// Full per-case tally row against a reference mask.
inline CaseMetrics case_metrics(const std::string& id, const Volume& reference,
                                const Volume& segmented, int connectivity = 26,
                                double min_overlap_fraction = 0.0) {
  CaseMetrics m;
  m.id = id;
  const auto vt = voxel_tallies(reference, segmented);
  m.tp_s = vt.tp;
  m.fp_s = vt.fp;
  m.fn_s = vt.fn;
  m.dsc = dsc(reference, segmented);
  const auto sens =
      region_detection_tallies(reference, segmented, connectivity, min_overlap_fraction);
  m.tp_d = sens.detected;
  m.fn_d = sens.missed;
  m.sensitivity = sens.detected + sens.missed == 0
                      ? 1.0
                      : static_cast<double>(sens.detected) /
                            static_cast<double>(sens.detected + sens.missed);
  const auto prec =
      region_detection_tallies(segmented, reference, connectivity, min_overlap_fraction);
  m.fp_d = prec.missed;  // segmented regions not touching the reference
  m.precision = prec.detected + prec.missed == 0
                    ? 1.0
                    : static_cast<double>(prec.detected) /
                          static_cast<double>(prec.detected + prec.missed);
  return m;
}

}  // namespace lesionseg
