// Command-line front end: phantom generation, source training, domain
// adaptation, inference, evaluation, grid experiments, and model inspection.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "lesionseg/adapt.hpp"
#include "lesionseg/config.hpp"
#include "lesionseg/dataset_io.hpp"
#include "lesionseg/evaluate.hpp"
#include "lesionseg/phantom.hpp"
#include "lesionseg/threads.hpp"

namespace ls = lesionseg;
namespace fs = std::filesystem;

namespace {

struct GlobalOptions {
  std::string config_path;
  std::int64_t seed_override = -1;
  int threads = 0;
  bool deterministic = false;
};

ls::RunConfig effective_config(const GlobalOptions& g) {
  ls::RunConfig cfg;
  if (!g.config_path.empty()) cfg = ls::load_run_config(g.config_path);
  if (g.seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(g.seed_override);
  if (g.threads > 0) cfg.threads = g.threads;
  if (g.deterministic) cfg.deterministic = true;

  int threads = cfg.threads;
  if (threads <= 0) {
    if (const char* env = std::getenv("LESIONSEG_THREADS")) threads = std::atoi(env);
  }
  if (cfg.deterministic) threads = 1;  // single-threaded bit-reproducible mode
  if (threads > 0) ls::set_max_threads(threads);
  cfg.threads = ls::max_threads();

  // every run logs the effective configuration and seed
  std::cerr << "lesionseg: config " << cfg.to_json().dump() << "\n";
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write: " + path);
  f << text;
}

int cmd_phantom(const GlobalOptions& g, const std::string& out_dir) {
  auto cfg = effective_config(g);
  fs::create_directories(out_dir);
  for (std::size_t i = 0; i < cfg.phantom_cases; ++i) {
    const std::string id = cfg.domain.id + "_" + std::to_string(i);
    auto gc = ls::generate_case_raw(cfg.phantom, cfg.domain,
                                    ls::derive_seed(cfg.seed, i), id);
    ls::dataset_io::write_case_dir(gc, out_dir, id);
  }
  std::cout << "wrote " << cfg.phantom_cases << " cases to " << out_dir << "\n";
  return 0;
}

int cmd_train_source(const GlobalOptions& g, const std::string& data_dir,
                     const std::string& out_file) {
  auto cfg = effective_config(g);
  auto cases = ls::dataset_io::load_cases(data_dir);
  auto cascade = ls::train_cascade(cases, cfg.cascade_config());
  ls::save_cascade(cascade, out_file);
  std::cout << "trained cascade on " << cases.size() << " cases -> " << out_file << "\n";
  return 0;
}

int cmd_adapt(const GlobalOptions& g, const std::string& source_file,
              const std::string& data_dir, const std::string& freeze_name,
              const std::string& out_file) {
  auto cfg = effective_config(g);
  auto source = ls::load_cascade(source_file);
  auto cases = ls::dataset_io::load_cases(data_dir);

  ls::AdaptationConfig ac;
  ac.train = cfg.train;
  ac.fp_threshold = cfg.fp_threshold;
  ac.inference_batch = cfg.inference_batch;
  ac.seed = cfg.seed;
  if (freeze_name == "auto") {
    std::size_t lesion_voxels = 0;
    for (const auto& c : cases) lesion_voxels += c.count_lesion_voxels();
    const double voxel_mm3 =
        cases.empty() ? 1.0 : static_cast<double>(cases.front().flair.voxel_volume_mm3());
    ac.freeze = ls::recommend_freeze(lesion_voxels, voxel_mm3);
    std::cerr << "lesionseg: auto freeze -> " << ls::freeze_mode_name(ac.freeze.mode)
              << " (" << lesion_voxels * voxel_mm3 / 1000.0 << " ml annotated)\n";
  } else {
    ac.freeze.mode = ls::freeze_mode_from_name(freeze_name);
  }
  auto adapted = ls::adapt(source, cases, ac);
  ls::save_cascade(adapted, out_file);
  std::cout << "adapted (" << ls::freeze_mode_name(ac.freeze.mode) << ", "
            << cases.size() << " target cases) -> " << out_file << "\n";
  return 0;
}

int cmd_infer(const GlobalOptions& g, const std::string& model_file,
              const std::string& flair, const std::string& t1, const std::string& brain,
              const std::string& out_prob, const std::string& out_mask) {
  auto cfg = effective_config(g);
  auto cascade = ls::load_cascade(model_file);
  auto c = ls::load_case(flair, t1, "", brain, "case");
  auto prob = ls::infer(cascade, c, cfg.inference_batch);
  auto mask = ls::postprocess(prob, cascade.post);
  ls::save_nifti(prob, out_prob);
  ls::save_nifti(mask, out_mask, ls::NiftiDatatype::uint8);
  std::cout << "wrote " << out_prob << " and " << out_mask << "\n";
  return 0;
}

int cmd_evaluate(const GlobalOptions& g, const std::string& model_file,
                 const std::string& data_dir, const std::string& reference,
                 const std::string& silver_dir, const std::string& out_prefix) {
  auto cfg = effective_config(g);
  auto cascade = ls::load_cascade(model_file);
  auto cases = ls::dataset_io::load_cases(data_dir);
  const auto kind = ls::reference_from_name(reference);
  std::vector<ls::Volume> silver;
  if (kind == ls::ReferenceKind::silver) {
    if (silver_dir.empty()) {
      throw std::invalid_argument("--silver-dir is required with --reference silver");
    }
    for (const auto& c : cases) {
      const auto path =
          ls::dataset_io::find_volume_file(fs::path(silver_dir) / c.id, "mask", true);
      silver.push_back(ls::binarize_mask(ls::load_nifti(path)));
    }
  }
  auto report = ls::evaluate(cascade, cases, kind,
                             silver.empty() ? nullptr : &silver, cfg.inference_batch);
  write_text(out_prefix + ".csv", report.to_dsv());
  write_text(out_prefix + ".txt", report.to_table());
  std::cout << report.to_table();
  return 0;
}

int cmd_grid(const GlobalOptions& g, const std::string& source_file,
             const std::string& train_dir, const std::string& test_dir,
             const std::string& out_file) {
  auto cfg = effective_config(g);
  auto source = ls::load_cascade(source_file);
  auto train_cases = ls::dataset_io::load_cases(train_dir);
  auto test_cases = ls::dataset_io::load_cases(test_dir);
  std::vector<ls::FreezeConfig::Mode> modes;
  for (const auto& m : cfg.grid_modes) modes.push_back(ls::freeze_mode_from_name(m));
  ls::AdaptationConfig base;
  base.train = cfg.train;
  base.fp_threshold = cfg.fp_threshold;
  base.inference_batch = cfg.inference_batch;
  auto grid = ls::run_adaptation_grid(source, train_cases, test_cases, modes,
                                      cfg.grid_sizes, base, cfg.seed);
  write_text(out_file, grid.to_dsv());
  std::cout << grid.to_dsv();
  return 0;
}

int cmd_inspect(const GlobalOptions& g, const std::string& model_file) {
  effective_config(g);
  ls::Model model;
  if (model_file.empty()) {
    model = ls::build_model<float>(0);
    std::cout << "canonical architecture (untrained)\n";
  } else {
    auto cascade = ls::load_cascade(model_file);
    std::cout << "cascade: " << model_file << "\n";
    for (const auto& [k, v] : cascade.provenance) std::cout << "  " << k << ": " << v << "\n";
    std::cout << "postprocess: t_bin=" << cascade.post.t_bin
              << " l_min=" << cascade.post.l_min
              << " connectivity=" << cascade.post.connectivity
              << " stage1_gate=" << cascade.stage1_gate << "\n";
    model = std::move(cascade.net1);
  }
  std::cout << "\nlayers:\n";
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = *model.layers[i];
    std::cout << "  " << i << "  " << ls::group_name(l.group()) << "\t"
              << (l.trainable() ? "trainable" : "frozen   ") << "\t" << l.spec_line()
              << "\n";
  }
  std::cout << "\nparameter counts (per network):\n";
  std::cout << "  total (incl. batch-norm statistics): "
            << ls::count_params(model).total << "\n";
  ls::FreezeConfig f;
  f.mode = ls::FreezeConfig::Mode::fc1_fc2_fc3;
  std::cout << "  retrain FC1+FC2+FC3: " << ls::count_params(model, &f).trainable << "\n";
  f.mode = ls::FreezeConfig::Mode::fc2_fc3;
  std::cout << "  retrain FC2+FC3:     " << ls::count_params(model, &f).trainable << "\n";
  f.mode = ls::FreezeConfig::Mode::fc3;
  std::cout << "  retrain FC3:         " << ls::count_params(model, &f).trainable << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cascaded 3D CNN white-matter lesion segmentation with one-shot domain adaptation"};
  app.require_subcommand(1);

  GlobalOptions g;
  app.add_option("--config", g.config_path, "JSON run configuration")->capture_default_str();
  app.add_option("--seed", g.seed_override, "override the config seed");
  app.add_option("--threads", g.threads, "worker thread count (env LESIONSEG_THREADS)");
  app.add_flag("--deterministic", g.deterministic,
               "single-threaded bit-reproducible mode");

  std::string out_dir, data_dir, out_file, source_file, freeze = "auto";
  std::string flair, t1, brain, out_prob, out_mask, reference = "expert", silver_dir;
  std::string train_dir, test_dir, model_file, out_prefix;

  auto* phantom = app.add_subcommand("phantom", "generate a synthetic phantom dataset");
  phantom->add_option("--out", out_dir, "output dataset directory")->required();

  auto* train_source = app.add_subcommand("train-source", "train a source cascade");
  train_source->add_option("--data", data_dir, "training case directory")->required();
  train_source->add_option("--out", out_file, "output cascade file")->required();

  auto* adapt = app.add_subcommand("adapt", "adapt a source cascade to a target domain");
  adapt->add_option("--source", source_file, "source cascade file")->required();
  adapt->add_option("--data", data_dir, "target case directory")->required();
  adapt->add_option("--freeze", freeze, "fc3|fc2_fc3|fc1_fc2_fc3|auto")
      ->capture_default_str();
  adapt->add_option("--out", out_file, "output cascade file")->required();

  auto* infer = app.add_subcommand("infer", "segment one case");
  infer->add_option("--model", model_file, "cascade file")->required();
  infer->add_option("--flair", flair, "FLAIR NIfTI")->required();
  infer->add_option("--t1", t1, "T1-w NIfTI")->required();
  infer->add_option("--brain-mask", brain, "brain mask NIfTI (default: nonzero FLAIR)");
  infer->add_option("--out-prob", out_prob, "output probability NIfTI")->required();
  infer->add_option("--out-mask", out_mask, "output binary mask NIfTI")->required();

  auto* evaluate = app.add_subcommand("evaluate", "score a cascade against references");
  evaluate->add_option("--model", model_file, "cascade file")->required();
  evaluate->add_option("--data", data_dir, "case directory")->required();
  evaluate->add_option("--reference", reference, "expert|silver")->capture_default_str();
  evaluate->add_option("--silver-dir", silver_dir,
                       "silver masks (<dir>/<case_id>/mask.nii)");
  evaluate->add_option("--out-report", out_prefix, "report path prefix")->required();

  auto* grid = app.add_subcommand("grid", "freeze-mode x training-set-size experiment");
  grid->add_option("--source", source_file, "source cascade file")->required();
  grid->add_option("--train-data", train_dir, "target training cases")->required();
  grid->add_option("--test-data", test_dir, "target test cases")->required();
  grid->add_option("--out", out_file, "output DSV report")->required();

  auto* inspect = app.add_subcommand("inspect", "print architecture and parameter counts");
  inspect->add_option("--model", model_file, "cascade file (omit for the canonical net)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (phantom->parsed()) return cmd_phantom(g, out_dir);
    if (train_source->parsed()) return cmd_train_source(g, data_dir, out_file);
    if (adapt->parsed()) return cmd_adapt(g, source_file, data_dir, freeze, out_file);
    if (infer->parsed()) {
      return cmd_infer(g, model_file, flair, t1, brain, out_prob, out_mask);
    }
    if (evaluate->parsed()) {
      return cmd_evaluate(g, model_file, data_dir, reference, silver_dir, out_prefix);
    }
    if (grid->parsed()) return cmd_grid(g, source_file, train_dir, test_dir, out_file);
    if (inspect->parsed()) return cmd_inspect(g, model_file);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
