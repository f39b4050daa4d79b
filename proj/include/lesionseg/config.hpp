#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lesionseg/cascade.hpp"
#include "lesionseg/phantom.hpp"

namespace lesionseg {

/// One static configuration document per run. Every default equals the
/// published training setup (t_bin=0.5, l_min=10, dropout 0.5, batch 128,
/// 400 epochs, patience 50, validation 0.25, resample period 10); unknown
/// keys are rejected.
struct RunConfig {
  std::uint64_t seed = 0;
  int threads = 0;  // 0 = hardware concurrency
  bool deterministic = false;
  TrainConfig train;
  double dropout = 0.5;
  PostprocessConfig post;
  float stage1_gate = 0.5f;
  float fp_threshold = 0.5f;
  std::size_t inference_batch = 8192;
  PhantomSpec phantom;
  std::size_t phantom_cases = 10;
  DomainSpec domain;
  std::vector<std::string> grid_modes{"fc3", "fc2_fc3", "fc1_fc2_fc3"};
  std::vector<std::size_t> grid_sizes{1, 2, 5};

  CascadeTrainConfig cascade_config() const {
    CascadeTrainConfig cfg;
    cfg.train = train;
    cfg.train.seed = seed;
    cfg.post = post;
    cfg.stage1_gate = stage1_gate;
    cfg.fp_threshold = fp_threshold;
    cfg.inference_batch = inference_batch;
    cfg.dropout = dropout;
    cfg.seed = seed;
    return cfg;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["threads"] = threads;
    j["deterministic"] = deterministic;
    j["train"] = {{"max_epochs", train.max_epochs},
                  {"patience", train.patience},
                  {"batch_size", train.batch_size},
                  {"validation_fraction", train.validation_fraction},
                  {"negative_resample_period", train.negative_resample_period},
                  {"rho", train.adadelta.rho},
                  {"epsilon", train.adadelta.epsilon},
                  {"dropout", dropout}};
    j["postprocess"] = {{"t_bin", post.t_bin},
                        {"l_min", post.l_min},
                        {"connectivity", post.connectivity}};
    j["cascade"] = {{"stage1_gate", stage1_gate},
                    {"fp_threshold", fp_threshold},
                    {"inference_batch", inference_batch}};
    j["phantom"] = {{"shape", phantom.shape},
                    {"spacing", phantom.spacing},
                    {"brain_semiaxes", phantom.brain_semiaxes},
                    {"ventricle_semiaxes", phantom.ventricle_semiaxes},
                    {"ventricle_offset", phantom.ventricle_offset},
                    {"lesion_count", {phantom.lesion_count_min, phantom.lesion_count_max}},
                    {"lesion_radius", {phantom.lesion_radius_min, phantom.lesion_radius_max}},
                    {"lesion_volume_ml",
                     {phantom.lesion_volume_min_ml, phantom.lesion_volume_max_ml}},
                    {"placement_retries", phantom.placement_retries},
                    {"n_cases", phantom_cases}};
    j["domain"] = {{"id", domain.id},
                   {"flair_tissue", {domain.flair_tissue.mean, domain.flair_tissue.stddev}},
                   {"flair_ventricle",
                    {domain.flair_ventricle.mean, domain.flair_ventricle.stddev}},
                   {"flair_lesion", {domain.flair_lesion.mean, domain.flair_lesion.stddev}},
                   {"t1_tissue", {domain.t1_tissue.mean, domain.t1_tissue.stddev}},
                   {"t1_ventricle", {domain.t1_ventricle.mean, domain.t1_ventricle.stddev}},
                   {"t1_lesion", {domain.t1_lesion.mean, domain.t1_lesion.stddev}},
                   {"gain_flair", domain.gain_flair},
                   {"offset_flair", domain.offset_flair},
                   {"gain_t1", domain.gain_t1},
                   {"offset_t1", domain.offset_t1},
                   {"noise_std", domain.noise_std},
                   {"smoothing_radius", domain.smoothing_radius}};
    j["grid"] = {{"modes", grid_modes}, {"sizes", grid_sizes}};
    return j;
  }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, const std::string& section,
                                const std::set<std::string>& allowed) {
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) {
      throw std::invalid_argument("unknown config key '" +
                                  (section.empty() ? key : section + "." + key) + "'");
    }
  }
}

template <typename T, std::size_t N>
void read_array(const nlohmann::json& j, const char* key, std::array<T, N>& out) {
  if (!j.contains(key)) return;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != N) {
    throw std::invalid_argument(std::string("config key '") + key + "' must be an array of " +
                                std::to_string(N) + " numbers");
  }
  for (std::size_t i = 0; i < N; ++i) out[i] = a[i].get<T>();
}

inline void read_intensity(const nlohmann::json& j, const char* key, TissueIntensity& out) {
  if (!j.contains(key)) return;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 2) {
    throw std::invalid_argument(std::string("config key '") + key +
                                "' must be [mean, std]");
  }
  out.mean = a[0].get<float>();
  out.stddev = a[1].get<float>();
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  using nlohmann::json;
  RunConfig cfg;
  detail::reject_unknown_keys(j, "",
                              {"seed", "threads", "deterministic", "train", "postprocess",
                               "cascade", "phantom", "domain", "grid"});
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("threads")) cfg.threads = j.at("threads").get<int>();
  if (j.contains("deterministic")) cfg.deterministic = j.at("deterministic").get<bool>();

  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::reject_unknown_keys(t, "train",
                                {"max_epochs", "patience", "batch_size",
                                 "validation_fraction", "negative_resample_period", "rho",
                                 "epsilon", "dropout"});
    if (t.contains("max_epochs")) cfg.train.max_epochs = t.at("max_epochs").get<int>();
    if (t.contains("patience")) cfg.train.patience = t.at("patience").get<int>();
    if (t.contains("batch_size")) cfg.train.batch_size = t.at("batch_size").get<int>();
    if (t.contains("validation_fraction")) {
      cfg.train.validation_fraction = t.at("validation_fraction").get<double>();
    }
    if (t.contains("negative_resample_period")) {
      cfg.train.negative_resample_period = t.at("negative_resample_period").get<int>();
    }
    if (t.contains("rho")) cfg.train.adadelta.rho = t.at("rho").get<double>();
    if (t.contains("epsilon")) cfg.train.adadelta.epsilon = t.at("epsilon").get<double>();
    if (t.contains("dropout")) cfg.dropout = t.at("dropout").get<double>();
  }
  if (j.contains("postprocess")) {
    const auto& p = j.at("postprocess");
    detail::reject_unknown_keys(p, "postprocess", {"t_bin", "l_min", "connectivity"});
    if (p.contains("t_bin")) cfg.post.t_bin = p.at("t_bin").get<float>();
    if (p.contains("l_min")) cfg.post.l_min = p.at("l_min").get<std::size_t>();
    if (p.contains("connectivity")) cfg.post.connectivity = p.at("connectivity").get<int>();
  }
  if (j.contains("cascade")) {
    const auto& c = j.at("cascade");
    detail::reject_unknown_keys(c, "cascade",
                                {"stage1_gate", "fp_threshold", "inference_batch"});
    if (c.contains("stage1_gate")) cfg.stage1_gate = c.at("stage1_gate").get<float>();
    if (c.contains("fp_threshold")) cfg.fp_threshold = c.at("fp_threshold").get<float>();
    if (c.contains("inference_batch")) {
      cfg.inference_batch = c.at("inference_batch").get<std::size_t>();
    }
  }
  if (j.contains("phantom")) {
    const auto& p = j.at("phantom");
    detail::reject_unknown_keys(
        p, "phantom",
        {"shape", "spacing", "brain_semiaxes", "ventricle_semiaxes", "ventricle_offset",
         "lesion_count", "lesion_radius", "lesion_volume_ml", "placement_retries",
         "n_cases"});
    detail::read_array(p, "shape", cfg.phantom.shape);
    detail::read_array(p, "spacing", cfg.phantom.spacing);
    detail::read_array(p, "brain_semiaxes", cfg.phantom.brain_semiaxes);
    detail::read_array(p, "ventricle_semiaxes", cfg.phantom.ventricle_semiaxes);
    detail::read_array(p, "ventricle_offset", cfg.phantom.ventricle_offset);
    if (p.contains("lesion_count")) {
      std::array<std::size_t, 2> r{};
      detail::read_array(p, "lesion_count", r);
      cfg.phantom.lesion_count_min = r[0];
      cfg.phantom.lesion_count_max = r[1];
    }
    if (p.contains("lesion_radius")) {
      std::array<float, 2> r{};
      detail::read_array(p, "lesion_radius", r);
      cfg.phantom.lesion_radius_min = r[0];
      cfg.phantom.lesion_radius_max = r[1];
    }
    if (p.contains("lesion_volume_ml")) {
      std::array<float, 2> r{};
      detail::read_array(p, "lesion_volume_ml", r);
      cfg.phantom.lesion_volume_min_ml = r[0];
      cfg.phantom.lesion_volume_max_ml = r[1];
    }
    if (p.contains("placement_retries")) {
      cfg.phantom.placement_retries = p.at("placement_retries").get<int>();
    }
    if (p.contains("n_cases")) cfg.phantom_cases = p.at("n_cases").get<std::size_t>();
  }
  if (j.contains("domain")) {
    const auto& d = j.at("domain");
    detail::reject_unknown_keys(
        d, "domain",
        {"id", "flair_tissue", "flair_ventricle", "flair_lesion", "t1_tissue",
         "t1_ventricle", "t1_lesion", "gain_flair", "offset_flair", "gain_t1", "offset_t1",
         "noise_std", "smoothing_radius"});
    if (d.contains("id")) cfg.domain.id = d.at("id").get<std::string>();
    detail::read_intensity(d, "flair_tissue", cfg.domain.flair_tissue);
    detail::read_intensity(d, "flair_ventricle", cfg.domain.flair_ventricle);
    detail::read_intensity(d, "flair_lesion", cfg.domain.flair_lesion);
    detail::read_intensity(d, "t1_tissue", cfg.domain.t1_tissue);
    detail::read_intensity(d, "t1_ventricle", cfg.domain.t1_ventricle);
    detail::read_intensity(d, "t1_lesion", cfg.domain.t1_lesion);
    if (d.contains("gain_flair")) cfg.domain.gain_flair = d.at("gain_flair").get<float>();
    if (d.contains("offset_flair")) {
      cfg.domain.offset_flair = d.at("offset_flair").get<float>();
    }
    if (d.contains("gain_t1")) cfg.domain.gain_t1 = d.at("gain_t1").get<float>();
    if (d.contains("offset_t1")) cfg.domain.offset_t1 = d.at("offset_t1").get<float>();
    if (d.contains("noise_std")) cfg.domain.noise_std = d.at("noise_std").get<float>();
    if (d.contains("smoothing_radius")) {
      cfg.domain.smoothing_radius = d.at("smoothing_radius").get<int>();
    }
  }
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    detail::reject_unknown_keys(g, "grid", {"modes", "sizes"});
    if (g.contains("modes")) cfg.grid_modes = g.at("modes").get<std::vector<std::string>>();
    if (g.contains("sizes")) {
      cfg.grid_sizes = g.at("sizes").get<std::vector<std::size_t>>();
    }
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config file " + path + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace lesionseg
