#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "longseg/phantom.hpp"

namespace testutil {

inline longseg::VoxelGrid cube_grid(int d) {
  longseg::VoxelGrid grid;
  grid.dims = {d, d, d};
  return grid;
}

/// Nested-ellipsoid subject: background plus k_classes - 1 concentric
/// ellipsoids with well-separated means. Contrast c of class k has mean
/// 3 + separation * (k - 1) + 0.15 * c * (k - 1).
inline longseg::PhantomSpec nested_spec(int dim, int k_classes, int n_contrasts,
                                        std::uint64_t seed, double noise_sd = 0.05,
                                        double separation = 0.5) {
  longseg::PhantomSpec spec;
  spec.grid = cube_grid(dim);
  spec.n_classes = k_classes;
  spec.n_contrasts = n_contrasts;
  spec.seed = seed;
  const double c = (dim - 1) / 2.0;
  double fraction = 0.40;
  for (int k = 2; k <= k_classes; ++k) {
    longseg::PhantomStructure s;
    s.name = "shell" + std::to_string(k);
    s.label = k;
    s.center = {c, c, c};
    s.radii = {fraction * dim, 0.92 * fraction * dim, 0.85 * fraction * dim};
    spec.structures.push_back(s);
    fraction *= 0.68;
  }
  for (int k = 1; k <= k_classes; ++k) {
    Eigen::VectorXd mean(n_contrasts);
    for (int cc = 0; cc < n_contrasts; ++cc) {
      mean[cc] = 3.0 + separation * (k - 1) + 0.15 * cc * (k - 1);
    }
    spec.class_means.push_back(mean);
    spec.class_covs.push_back(noise_sd * noise_sd *
                              Eigen::MatrixXd::Identity(n_contrasts, n_contrasts));
  }
  return spec;
}

/// Fraction of voxels in `mask` (all voxels when empty) with equal labels.
inline double label_agreement(const longseg::LabelVolume& a, const longseg::LabelVolume& b,
                              const std::vector<std::uint8_t>& mask = {}) {
  std::size_t same = 0;
  std::size_t total = 0;
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    ++total;
    same += (a.labels[i] == b.labels[i]);
  }
  return total == 0 ? 1.0 : static_cast<double>(same) / static_cast<double>(total);
}

/// Unique scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;

  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path = std::filesystem::temp_directory_path() /
           ("longseg_" + tag + "_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter.fetch_add(1)));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }

  std::string file(const std::string& name) const { return (path / name).string(); }
};

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

}  // namespace testutil
