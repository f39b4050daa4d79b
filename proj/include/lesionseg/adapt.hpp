#pragma once

#include <algorithm>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lesionseg/cascade.hpp"
#include "lesionseg/evaluate.hpp"

namespace lesionseg {

struct AdaptationConfig {
  FreezeConfig freeze;  // mode must not be `none`; full retraining is train_cascade's job
  TrainConfig train;
  float fp_threshold = 0.5f;
  std::size_t inference_batch = 8192;
  std::uint64_t seed = 0;
};

/// Supervised domain adaptation: re-trains the selected FC groups of both
/// cascade networks on the target cases. The source cascade is never
/// mutated; convolutional weights of the result are bitwise identical to the
/// source. The stage-2 false-positive pool is recomputed with the adapted
/// stage-1 network.
inline CascadeModel adapt(const CascadeModel& source,
                          const std::vector<Case>& target_cases,
                          const AdaptationConfig& cfg) {
  if (cfg.freeze.mode == FreezeConfig::Mode::none) {
    throw std::invalid_argument(
        "adapt: freeze mode 'none' is full training, not adaptation");
  }
  cfg.train.validate();
  if (target_cases.empty()) {
    throw std::invalid_argument("adapt: no target cases");
  }
  for (const Case& c : target_cases) {
    if (!c.lesion_mask || c.count_lesion_voxels() == 0) {
      throw std::invalid_argument("adapt: target case " + c.id +
                                  " has no annotated lesions");
    }
  }

  CascadeModel adapted = source;  // copy-on-adapt
  set_trainable(adapted.net1, cfg.freeze);
  set_trainable(adapted.net2, cfg.freeze);

  auto retrain = [&](Model& net, PatchDataset& ds, std::uint64_t train_seed) {
    TrainConfig tc = cfg.train;
    tc.seed = train_seed;
    ResampleHook hook = [&](int epoch) {
      const int period = tc.negative_resample_period;
      if (period <= 0 || epoch <= 0 || epoch % period != 0) return false;
      resample_negatives(ds, target_cases, epoch, period);
      return true;
    };
    return train(net, ds, tc, hook);
  };

  auto ds1 = build_stage1_dataset(target_cases, derive_seed(cfg.seed, 201));
  auto hist1 = retrain(adapted.net1, ds1, derive_seed(cfg.seed, 202));
  auto ds2 = build_stage2_dataset(target_cases, adapted.net1, derive_seed(cfg.seed, 203),
                                  cfg.fp_threshold, cfg.inference_batch);
  auto hist2 = retrain(adapted.net2, ds2, derive_seed(cfg.seed, 204));

  FreezeConfig freeze = cfg.freeze;
  const auto counts = count_params(adapted.net1, &freeze);
  std::string ids;
  for (const auto& c : target_cases) ids += (ids.empty() ? "" : ",") + c.id;
  adapted.provenance = {
      {"seed", std::to_string(cfg.seed)},
      {"freeze", freeze_mode_name(cfg.freeze.mode)},
      {"trainable_params_per_network", std::to_string(counts.trainable)},
      {"n_target_cases", std::to_string(target_cases.size())},
      {"stage1_epochs", std::to_string(hist1.epochs.size())},
      {"stage2_epochs", std::to_string(hist2.epochs.size())},
      {"cases", ids},
  };
  return adapted;
}

/// Freeze-depth rule of thumb: with at least 3 ml of annotated lesion
/// (3000 mm^3) re-train all FC layers; below that, only the last one.
inline FreezeConfig recommend_freeze(std::size_t total_lesion_voxels,
                                     double voxel_volume_mm3) {
  if (voxel_volume_mm3 <= 0.0) {
    throw std::invalid_argument("recommend_freeze: voxel volume must be > 0");
  }
  FreezeConfig f;
  const double volume_mm3 = static_cast<double>(total_lesion_voxels) * voxel_volume_mm3;
  f.mode = volume_mm3 >= 3000.0 ? FreezeConfig::Mode::fc1_fc2_fc3
                                : FreezeConfig::Mode::fc3;
  return f;
}

struct GridCell {
  FreezeConfig::Mode mode;
  std::size_t n_images;
  double lesion_volume_ml;  // total annotated lesion load of the training subset
  MetricsReport report;
};

struct GridReport {
  std::vector<GridCell> cells;

  std::string to_dsv(char delim = ',') const {
    std::ostringstream os;
    os.precision(6);
    os << std::fixed;
    os << "freeze_mode" << delim << "n_images" << delim << "lesion_volume_ml" << delim
       << "dsc_mean" << delim << "dsc_std" << delim << "sensitivity_mean" << delim
       << "sensitivity_std" << delim << "precision_mean" << delim << "precision_std"
       << "\n";
    for (const auto& c : cells) {
      os << freeze_mode_name(c.mode) << delim << c.n_images << delim
         << c.lesion_volume_ml << delim << c.report.dsc.mean << delim
         << c.report.dsc.stddev << delim << c.report.sensitivity.mean << delim
         << c.report.sensitivity.stddev << delim << c.report.precision.mean << delim
         << c.report.precision.stddev << "\n";
    }
    return os.str();
  }
};

/// Adapts a fresh copy of the source for every (freeze mode, subset size)
/// cell and evaluates it on the held-out test cases. Subsets are nested
/// prefixes of one master-seeded shuffle; each cell re-seeds from
/// (master seed, cell index).
inline GridReport run_adaptation_grid(const CascadeModel& source,
                                      const std::vector<Case>& target_train,
                                      const std::vector<Case>& target_test,
                                      const std::vector<FreezeConfig::Mode>& modes,
                                      const std::vector<std::size_t>& subset_sizes,
                                      const AdaptationConfig& base_cfg,
                                      std::uint64_t master_seed) {
  std::set<std::string> train_ids, test_ids;
  for (const auto& c : target_train) train_ids.insert(c.id);
  for (const auto& c : target_test) {
    test_ids.insert(c.id);
    if (train_ids.count(c.id)) {
      throw std::invalid_argument("adaptation grid: train/test sets are not disjoint ('" +
                                  c.id + "' appears in both)");
    }
  }
  for (std::size_t n : subset_sizes) {
    if (n == 0 || n > target_train.size()) {
      throw std::invalid_argument("adaptation grid: subset size " + std::to_string(n) +
                                  " exceeds available training cases (" +
                                  std::to_string(target_train.size()) + ")");
    }
  }

  std::vector<std::size_t> order(target_train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng shuffle_rng = make_rng(derive_seed(master_seed, 0x9d1d));
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  GridReport grid;
  std::size_t cell_index = 0;
  for (const auto mode : modes) {
    for (const std::size_t n : subset_sizes) {
      std::vector<Case> subset;
      subset.reserve(n);
      double lesion_voxels = 0;
      double voxel_volume = 0;
      for (std::size_t i = 0; i < n; ++i) {
        subset.push_back(target_train[order[i]]);
        lesion_voxels += static_cast<double>(subset.back().count_lesion_voxels());
        voxel_volume = subset.back().flair.voxel_volume_mm3();
      }
      AdaptationConfig cfg = base_cfg;
      cfg.freeze.mode = mode;
      cfg.seed = derive_seed(master_seed, cell_index);
      auto adapted = adapt(source, subset, cfg);
      GridCell cell;
      cell.mode = mode;
      cell.n_images = n;
      cell.lesion_volume_ml = lesion_voxels * voxel_volume / 1000.0;
      cell.report = evaluate(adapted, target_test, ReferenceKind::expert, nullptr,
                             base_cfg.inference_batch);
      grid.cells.push_back(std::move(cell));
      ++cell_index;
    }
  }
  return grid;
}

}  // namespace lesionseg
