#pragma once

#include <array>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "longseg/volume.hpp"

namespace longseg {

/// One multivariate Gaussian per class, in log-intensity space.
struct GaussianParams {
  std::vector<Eigen::VectorXd> means;        // K entries of length N
  std::vector<Eigen::MatrixXd> covariances;  // K entries of size N x N

  int n_classes() const { return static_cast<int>(means.size()); }
  int n_contrasts() const { return means.empty() ? 0 : static_cast<int>(means[0].size()); }

  /// Checks shape agreement and that every covariance is symmetric positive
  /// definite (smallest eigenvalue > 1e-12 x trace/N).
  void validate() const;
};

/// Smooth multiplicative artifact, additive in log space: contrast c of voxel
/// i is shifted by (C phi_i)_c where phi_i stacks separable cosine functions.
struct BiasField {
  Eigen::MatrixXd coefficients;   // N x P
  std::array<int, 3> order{0, 0, 0};
  bool regularized = false;       // the last coefficient solve needed a ridge

  int n_basis() const { return (order[0] + 1) * (order[1] + 1) * (order[2] + 1); }
  void validate() const;
};

GaussianParams read_params(const std::string& path, BiasField& bias,
                           const std::array<int, 3>& order);
void write_params(const GaussianParams& gauss, const BiasField& bias, const std::string& path);

/// Evaluates the separable cosine basis on a subset of voxels. Per axis the
/// functions are f_0 = 1 and f_j(i) = cos(pi j (i + 1/2) / D); the P = prod
/// (order+1) products are ordered x-fastest.
Eigen::MatrixXd eval_basis_subset(const VoxelGrid& grid, const std::array<int, 3>& order,
                                  const std::vector<std::size_t>& voxels);
Eigen::MatrixXd eval_basis(const VoxelGrid& grid, const std::array<int, 3>& order);

/// Masked view of a volume with the basis evaluated once: `data` row r holds
/// the log intensities of voxel `voxels[r]`, `basis` row r the P basis values.
struct AppearanceWorkspace {
  std::vector<std::size_t> voxels;
  Eigen::MatrixXd data;
  Eigen::MatrixXd basis;

  std::size_t n_voxels() const { return voxels.size(); }

  static AppearanceWorkspace build(const MultiContrastVolume& vol,
                                   const std::array<int, 3>& order);
};

/// Log Gaussian densities log N(d_i - C phi_i | mu_k, Sigma_k), one row per
/// workspace voxel, one column per class.
Eigen::MatrixXd voxel_log_likelihoods(const AppearanceWorkspace& ws, const GaussianParams& gauss,
                                      const BiasField& bias, int threads = 1);

/// E-step weights: row i is prior_i(k) exp(loglik_ik) normalized, computed in
/// log space. A voxel whose every class has zero posterior mass raises an
/// error naming the voxel.
Eigen::MatrixXd responsibilities(const Eigen::MatrixXd& log_lik, const Eigen::MatrixXd& prior,
                                 const std::vector<std::size_t>& voxels, int threads = 1);

/// Responsibility-weighted ML estimate with the covariance floor
/// eps = 1e-6 x mean per-contrast data variance added to every diagonal.
GaussianParams update_gaussians_ml(const AppearanceWorkspace& ws, const Eigen::MatrixXd& resp,
                                   const BiasField& bias, int threads = 1);

/// Exact coordinate maximization over the bias coefficients: solves the
/// precision-weighted least-squares normal equations over all contrasts
/// jointly. Falls back to a small ridge when the normal matrix is singular
/// and flags the result.
BiasField update_bias_field(const AppearanceWorkspace& ws, const Eigen::MatrixXd& resp,
                            const GaussianParams& gauss, const std::array<int, 3>& order,
                            int threads = 1);

/// Mean per-contrast variance of the workspace data, the scale behind the
/// covariance floor.
double mean_contrast_variance(const AppearanceWorkspace& ws);

}  // namespace longseg
