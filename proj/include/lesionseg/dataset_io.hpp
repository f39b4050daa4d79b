#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "lesionseg/nifti.hpp"
#include "lesionseg/phantom.hpp"

namespace lesionseg {

/// Case directory layout: <root>/<case_id>/{flair,t1[,lesion][,brain]}.nii
/// (each optionally gzipped).
namespace dataset_io {

inline std::string find_volume_file(const std::filesystem::path& dir,
                                    const std::string& stem, bool required) {
  for (const char* ext : {".nii", ".nii.gz"}) {
    const auto p = dir / (stem + ext);
    if (std::filesystem::exists(p)) return p.string();
  }
  if (required) {
    throw std::runtime_error("missing " + stem + ".nii[.gz] in " + dir.string());
  }
  return "";
}

inline Case load_case_dir(const std::filesystem::path& dir) {
  const std::string flair = find_volume_file(dir, "flair", true);
  const std::string t1 = find_volume_file(dir, "t1", true);
  const std::string lesion = find_volume_file(dir, "lesion", false);
  const std::string brain = find_volume_file(dir, "brain", false);
  return load_case(flair, t1, lesion, brain, dir.filename().string());
}

/// Loads every case subdirectory under root, sorted by name for
/// reproducible ordering.
inline std::vector<Case> load_cases(const std::string& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) {
    throw std::runtime_error("dataset directory does not exist: " + root);
  }
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory() && !find_volume_file(e.path(), "flair", false).empty()) {
      dirs.push_back(e.path());
    }
  }
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) {
    throw std::runtime_error("no case directories (with flair.nii) under " + root);
  }
  std::vector<Case> cases;
  cases.reserve(dirs.size());
  for (const auto& d : dirs) cases.push_back(load_case_dir(d));
  return cases;
}

/// Writes one generated case in the documented layout (raw intensities; the
/// lesion mask as uint8).
inline void write_case_dir(const GeneratedCase& g, const std::filesystem::path& root,
                           const std::string& case_id) {
  const auto dir = root / case_id;
  std::filesystem::create_directories(dir);
  save_nifti(g.raw_flair, (dir / "flair.nii").string());
  save_nifti(g.raw_t1, (dir / "t1.nii").string());
  save_nifti(g.lesion_mask, (dir / "lesion.nii").string(), NiftiDatatype::uint8);
}

}  // namespace dataset_io
}  // namespace lesionseg
