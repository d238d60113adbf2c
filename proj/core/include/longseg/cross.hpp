#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "longseg/appearance.hpp"
#include "longseg/lbfgs.hpp"
#include "longseg/mesh.hpp"
#include "longseg/volume.hpp"

namespace longseg {

struct FitConfig {
  int max_outer_sweeps = 30;
  LbfgsConfig mesh_lbfgs;         // defaults: memory 10, 100 iterations, tol 1e-6
  double em_tolerance = 1e-6;     // relative objective change across outer sweeps
  double kappa = 10.0;            // mesh deformation stiffness
  std::array<int, 3> bias_order{2, 2, 2};
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const;
};

struct CrossFitResult {
  PointMatrix x_hat;
  GaussianParams gauss;
  BiasField bias;
  std::vector<double> objective_trace;  // one entry per outer sweep
  bool converged = false;
  bool mesh_warning = false;            // some mesh line search gave up early
};

struct MeshOptResult {
  PointMatrix x;
  bool line_search_failed = false;
};

/// Data term of the fit objective at mesh configuration x:
/// sum_i log sum_k pi_ik(x) exp(log_lik_ik), with the prior rasterized at x.
/// When `with_gradient` is set, `gradient` holds the derivative with respect
/// to every node position.
///
/// `prior_scale` rescales every mesh-derived prior and `extra_log_mass`, when
/// given, adds one voxelwise log mass term outside the mesh prior (the
/// uniform-prior lesion class); the scale and extra term leave the gradient
/// chain through the mesh intact.
struct DataTermResult {
  double value = 0.0;
  PointMatrix gradient;
};
DataTermResult mesh_data_term(const std::vector<std::size_t>& voxels,
                              const Eigen::MatrixXd& log_lik, const PointMatrix& x,
                              const TetrahedralMesh& mesh, const VoxelGrid& grid,
                              bool with_gradient, int threads = 1, double prior_scale = 1.0,
                              const Eigen::VectorXd* extra_log_mass = nullptr);

/// Full fit objective: data term minus kappa times the deformation energy
/// relative to the atlas reference.
double cross_objective(const AppearanceWorkspace& ws, const TetrahedralMesh& mesh,
                       const VoxelGrid& grid, const PointMatrix& x, const GaussianParams& gauss,
                       const BiasField& bias, double kappa, int threads = 1);

/// Maximizes the fit objective over node positions with L-BFGS, rejecting any
/// step that drives a tetrahedron's determinant below 1e-9 of its reference.
/// The returned objective value never falls below the starting one.
/// `log_lik` must have one column per mesh class; `prior_scale` and
/// `extra_log_mass` behave as in mesh_data_term.
MeshOptResult optimize_mesh(const std::vector<std::size_t>& voxels,
                            const Eigen::MatrixXd& log_lik, const TetrahedralMesh& mesh,
                            const VoxelGrid& grid, const PointMatrix& x_init, double kappa,
                            const PointMatrix& ref, const LbfgsConfig& cfg, int threads = 1,
                            double prior_scale = 1.0,
                            const Eigen::VectorXd* extra_log_mass = nullptr);

/// Moment-matched Gaussians under the prior weights, bias identically zero.
std::pair<GaussianParams, BiasField> initialize_appearance(const AppearanceWorkspace& ws,
                                                           const Eigen::MatrixXd& prior,
                                                           const std::array<int, 3>& order);

/// Returns the volume unchanged when already in log space, otherwise a
/// log-transformed copy using the default intensity floor.
MultiContrastVolume ensure_log_transformed(const MultiContrastVolume& vol);

/// Alternates appearance sweeps and mesh optimization until the relative
/// objective change drops below tolerance or the sweep budget runs out.
CrossFitResult fit_cross(const MultiContrastVolume& vol, const TetrahedralMesh& mesh,
                         const FitConfig& cfg);

/// Per-voxel maximum-posterior labeling at fitted parameters; class
/// posteriors are stored alongside the labels.
LabelVolume segment(const MultiContrastVolume& vol, const TetrahedralMesh& mesh,
                    const PointMatrix& x_hat, const GaussianParams& gauss, const BiasField& bias,
                    int threads = 1);

}  // namespace longseg
