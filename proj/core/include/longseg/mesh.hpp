#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "longseg/grid.hpp"

namespace longseg {

/// Node positions of a mesh, one row per node, in voxel coordinates.
using PointMatrix = Eigen::Matrix<double, Eigen::Dynamic, 3>;

/// Deformable probabilistic atlas: a tetrahedral mesh whose nodes carry a
/// class-probability simplex. Deforming the node positions away from
/// `reference_positions` moves the interpolated label prior across the grid.
struct TetrahedralMesh {
  PointMatrix reference_positions;                // n_nodes x 3
  Eigen::Matrix<std::int32_t, Eigen::Dynamic, 4> tetrahedra;  // m x 4
  Eigen::MatrixXd node_alphas;                    // n_nodes x K, rows are simplexes

  Eigen::Index n_nodes() const { return reference_positions.rows(); }
  Eigen::Index n_tetrahedra() const { return tetrahedra.rows(); }
  int n_classes() const { return static_cast<int>(node_alphas.cols()); }

  /// Signed volume of tetrahedron m at positions `pos` (reference when omitted).
  double tet_volume(Eigen::Index m, const PointMatrix& pos) const;

  /// Checks simplex rows, index ranges and positive reference volumes.
  void validate() const;
};

/// Mesh stiffness constants: `kappa` scales per-time-point deformation cost,
/// `kappa0` the subject-atlas-to-reference cost.
struct StiffnessConfig {
  double kappa = 10.0;
  double kappa0 = 200.0;
};

// ---- Deformation energy ----------------------------------------------------
//
// Per tetrahedron with Jacobian J of the affine map from reference to deformed
// shape and reference volume V:
//
//   U = V * [ ||J||_F^2 det(J)^(-2/3) - 3 + det(J) + det(J)^(-1) - 2 ]   if det(J) > 0
//   U = +inf                                                             otherwise
//
// The first bracket term penalizes shape distortion (zero exactly for
// rotations), the second volume change; the cost diverges as a tetrahedron
// collapses, which keeps the deformation topology-preserving under line
// searches that reject infinite steps.

/// Total deformation energy sum over tetrahedra; +inf if any det(J) <= 0.
double deformation_energy(const PointMatrix& x, const PointMatrix& ref,
                          const TetrahedralMesh& mesh);

/// Exact gradient of deformation_energy with respect to the deformed positions x.
/// Throws numeric_error if the energy is infinite at x.
PointMatrix deformation_energy_gradient(const PointMatrix& x, const PointMatrix& ref,
                                        const TetrahedralMesh& mesh);

/// Exact gradient of deformation_energy with respect to the reference positions.
/// Needed when optimizing a configuration that acts as the reference of other
/// deformations (the subject-specific atlas update).
PointMatrix deformation_energy_ref_gradient(const PointMatrix& x, const PointMatrix& ref,
                                            const TetrahedralMesh& mesh);

/// True if every tetrahedron keeps det(J) > min_det_ratio at positions x.
bool deformation_feasible(const PointMatrix& x, const PointMatrix& ref,
                          const TetrahedralMesh& mesh, double min_det_ratio = 1e-9);

// ---- Rasterization ---------------------------------------------------------

/// Per-voxel prior produced by barycentric interpolation of node alphas.
/// Rows of `prior` follow the order of the rasterized voxel subset. `tet` is
/// the index of the containing tetrahedron (-1 when the voxel center lies
/// outside the mesh and received the background simplex), and `bary` the
/// barycentric coordinates within it.
struct PriorRaster {
  Eigen::MatrixXd prior;                         // n x K
  std::vector<std::int32_t> tet;                 // n
  Eigen::Matrix<double, Eigen::Dynamic, 4> bary; // n x 4
};

/// Barycentric tolerance: coordinates >= -kBaryTol count as inside; the
/// lowest-index containing tetrahedron wins, independent of thread count.
inline constexpr double kBaryTol = 1e-9;

/// Rasterizes the prior on an arbitrary subset of voxels (given by linear
/// indices). Voxels outside every tetrahedron get all mass on class 1.
PriorRaster rasterize_prior_subset(const PointMatrix& x, const TetrahedralMesh& mesh,
                                   const VoxelGrid& grid, const std::vector<std::size_t>& voxels,
                                   int threads = 1);

/// Rasterizes the prior over the full grid; rows in x-fastest voxel order.
Eigen::MatrixXd rasterize_prior(const PointMatrix& x, const TetrahedralMesh& mesh,
                                const VoxelGrid& grid, int threads = 1);

// ---- Atlas construction and I/O --------------------------------------------

/// Builds a regular lattice atlas over the grid: nodes `spacing` voxels apart,
/// each lattice cube split into 5 positively oriented tetrahedra (diagonal
/// pattern alternated so neighboring cubes share faces), uniform node alphas.
TetrahedralMesh build_grid_atlas(const VoxelGrid& grid, int spacing,
                                 const Eigen::VectorXd& alpha_init);

// ASCII atlas format:
//   TETATLAS 1
//   NODES n K
//   n lines: px py pz a1 ... aK
//   TETS M
//   M lines of 4 zero-based node indices
//   END

TetrahedralMesh read_atlas(const std::string& path);
void write_atlas(const TetrahedralMesh& mesh, const std::string& path);

// Mesh positions format:
//   POS 1
//   n lines: x y z
//   END

PointMatrix read_positions(const std::string& path);
void write_positions(const PointMatrix& pos, const std::string& path);

}  // namespace longseg
