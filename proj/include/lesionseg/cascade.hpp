#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lesionseg/metrics.hpp"
#include "lesionseg/patches.hpp"
#include "lesionseg/serialize.hpp"
#include "lesionseg/train.hpp"

namespace lesionseg {

struct PostprocessConfig {
  float t_bin = 0.5f;      // output probability threshold (inclusive)
  std::size_t l_min = 10;  // minimum surviving component size in voxels
  int connectivity = 26;

  void validate() const {
    if (!(t_bin > 0.f && t_bin < 1.f)) {
      throw std::invalid_argument("t_bin must lie in (0,1)");
    }
    if (l_min < 1) throw std::invalid_argument("l_min must be >= 1");
    if (connectivity != 6 && connectivity != 18 && connectivity != 26) {
      throw std::invalid_argument("connectivity must be 6, 18 or 26");
    }
  }
};

/// Two identical networks: net1 proposes candidate voxels with high
/// sensitivity, net2 re-scores them to suppress false positives.
struct CascadeModel {
  Model net1;
  Model net2;
  PostprocessConfig post;
  float stage1_gate = 0.5f;  // net1 probability below which voxels are discarded
  std::vector<std::pair<std::string, std::string>> provenance;
};

struct CascadeTrainConfig {
  TrainConfig train;
  PostprocessConfig post;
  float stage1_gate = 0.5f;
  float fp_threshold = 0.5f;  // stage-2 false-positive mining cutoff
  std::size_t inference_batch = 8192;
  double dropout = 0.5;
  std::uint64_t seed = 0;
};

/// Stage 1 trains on random negatives; its false positives on the training
/// cases become stage 2's negatives. Both stages share the training
/// configuration.
inline CascadeModel train_cascade(const std::vector<Case>& cases,
                                  const CascadeTrainConfig& cfg) {
  cfg.post.validate();
  cfg.train.validate();
  if (cases.empty()) throw std::invalid_argument("train_cascade: no training cases");

  CascadeModel cascade;
  cascade.post = cfg.post;
  cascade.stage1_gate = cfg.stage1_gate;

  auto run_stage = [&](PatchDataset& ds, std::uint64_t model_seed,
                       std::uint64_t train_seed) {
    Model net = build_model<float>(model_seed, cfg.dropout);
    TrainConfig tc = cfg.train;
    tc.seed = train_seed;
    ResampleHook hook = [&](int epoch) {
      const int period = tc.negative_resample_period;
      if (period <= 0 || epoch <= 0 || epoch % period != 0) return false;
      resample_negatives(ds, cases, epoch, period);
      return true;
    };
    auto hist = train(net, ds, tc, hook);
    return std::make_pair(std::move(net), hist);
  };

  auto ds1 = build_stage1_dataset(cases, derive_seed(cfg.seed, 101));
  auto [net1, hist1] = run_stage(ds1, derive_seed(cfg.seed, 102), derive_seed(cfg.seed, 103));
  cascade.net1 = std::move(net1);

  auto ds2 = build_stage2_dataset(cases, cascade.net1, derive_seed(cfg.seed, 104),
                                  cfg.fp_threshold, cfg.inference_batch);
  auto [net2, hist2] = run_stage(ds2, derive_seed(cfg.seed, 105), derive_seed(cfg.seed, 106));
  cascade.net2 = std::move(net2);

  cascade.provenance = {
      {"seed", std::to_string(cfg.seed)},
      {"n_cases", std::to_string(cases.size())},
      {"stage1_epochs", std::to_string(hist1.epochs.size())},
      {"stage2_epochs", std::to_string(hist2.epochs.size())},
      {"freeze", "none"},
  };
  std::string ids;
  for (const auto& c : cases) ids += (ids.empty() ? "" : ",") + c.id;
  cascade.provenance.emplace_back("cases", ids);
  return cascade;
}

/// Probabilistic lesion mask: every brain voxel is scored by net1; voxels
/// below the gate get probability 0, survivors receive net2's probability.
/// Out-of-mask voxels are 0. The result is independent of the batch size.
inline Volume infer(const CascadeModel& cascade, const Case& c,
                    std::size_t batch_size = 8192) {
  Volume out(c.flair.data.shape());
  out.spacing = c.flair.spacing;
  const auto centers = brain_voxel_list(c);
  if (centers.empty()) return out;
  const auto p1 = predict_at_voxels(cascade.net1, c, centers, batch_size);
  std::vector<Index3> survivors;
  for (std::size_t i = 0; i < centers.size(); ++i) {
    if (p1[i] >= cascade.stage1_gate) survivors.push_back(centers[i]);
  }
  if (survivors.empty()) return out;
  const auto p2 = predict_at_voxels(cascade.net2, c, survivors, batch_size);
  const std::size_t h = c.flair.h(), w = c.flair.w();
  for (std::size_t s = 0; s < survivors.size(); ++s) {
    const Index3& v = survivors[s];
    out.data[(v.z * h + v.y) * w + v.x] = p2[s];
  }
  return out;
}

/// Binarizes at probability >= t_bin and removes connected components
/// smaller than l_min voxels.
inline Volume postprocess(const Volume& prob, const PostprocessConfig& cfg) {
  cfg.validate();
  for (std::size_t i = 0; i < prob.size(); ++i) {
    if (!(prob.data[i] >= 0.f && prob.data[i] <= 1.f)) {
      throw std::invalid_argument("postprocess: probabilities must lie in [0,1]");
    }
  }
  Volume binary(prob.data.shape());
  binary.spacing = prob.spacing;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    binary.data[i] = prob.data[i] >= cfg.t_bin ? 1.f : 0.f;
  }
  auto labeling = connected_components(binary, cfg.connectivity);
  for (std::size_t i = 0; i < binary.size(); ++i) {
    const auto l = labeling.labels[i];
    if (l != 0 && labeling.sizes[static_cast<std::size_t>(l - 1)] < cfg.l_min) {
      binary.data[i] = 0.f;
    }
  }
  return binary;
}

inline constexpr const char* kCascadeMagic = "lesionseg-cascade v1";

/// One file: a plain-text manifest (postprocess parameters, gate, provenance,
/// embedded container sizes) followed by the two model containers.
inline void save_cascade(CascadeModel& cascade, const std::string& path) {
  const std::string net1 = serialize_model(cascade.net1);
  const std::string net2 = serialize_model(cascade.net2);
  std::ostringstream manifest;
  manifest.precision(9);
  manifest << kCascadeMagic << "\n";
  manifest << "t_bin " << cascade.post.t_bin << "\n";
  manifest << "l_min " << cascade.post.l_min << "\n";
  manifest << "connectivity " << cascade.post.connectivity << "\n";
  manifest << "stage1_gate " << cascade.stage1_gate << "\n";
  for (const auto& [k, v] : cascade.provenance) manifest << "meta " << k << " " << v << "\n";
  manifest << "net1_bytes " << net1.size() << "\n";
  manifest << "net2_bytes " << net2.size() << "\n";
  manifest << "end-manifest\n";
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write cascade file: " + path);
  f << manifest.str();
  f.write(net1.data(), static_cast<std::streamsize>(net1.size()));
  f.write(net2.data(), static_cast<std::streamsize>(net2.size()));
  if (!f) throw std::runtime_error("failed writing cascade file: " + path);
}

inline CascadeModel load_cascade(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open cascade file: " + path);
  std::string line;
  if (!std::getline(in, line) || line != kCascadeMagic) {
    throw std::runtime_error("incompatible cascade container version (expected '" +
                             std::string(kCascadeMagic) + "')");
  }
  CascadeModel cascade;
  std::size_t n1 = 0, n2 = 0;
  while (std::getline(in, line)) {
    if (line == "end-manifest") break;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "t_bin") ls >> cascade.post.t_bin;
    else if (key == "l_min") ls >> cascade.post.l_min;
    else if (key == "connectivity") ls >> cascade.post.connectivity;
    else if (key == "stage1_gate") ls >> cascade.stage1_gate;
    else if (key == "meta") {
      std::string k;
      ls >> k;
      std::string v;
      std::getline(ls, v);
      if (!v.empty() && v.front() == ' ') v.erase(0, 1);
      cascade.provenance.emplace_back(k, v);
    } else if (key == "net1_bytes") ls >> n1;
    else if (key == "net2_bytes") ls >> n2;
    else throw std::runtime_error("cascade container: unexpected manifest line '" + line + "'");
  }
  cascade.post.validate();
  auto read_block = [&](std::size_t n) {
    std::string block(n, '\0');
    in.read(block.data(), static_cast<std::streamsize>(n));
    if (in.gcount() != static_cast<std::streamsize>(n)) {
      throw std::runtime_error("cascade container: truncated model block");
    }
    std::istringstream bs(block);
    return parse_model(bs);
  };
  cascade.net1 = read_block(n1);
  cascade.net2 = read_block(n2);
  return cascade;
}

}  // namespace lesionseg
