#include "longseg/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "longseg/error.hpp"
#include "longseg/parallel.hpp"

namespace longseg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

/// Edge matrix with columns p1-p0, p2-p0, p3-p0 for tetrahedron m.
Eigen::Matrix3d edge_matrix(const TetrahedralMesh& mesh, Eigen::Index m, const PointMatrix& pos) {
  const auto& t = mesh.tetrahedra;
  Eigen::Matrix3d e;
  const Eigen::Vector3d p0 = pos.row(t(m, 0));
  e.col(0) = pos.row(t(m, 1)).transpose() - p0;
  e.col(1) = pos.row(t(m, 2)).transpose() - p0;
  e.col(2) = pos.row(t(m, 3)).transpose() - p0;
  return e;
}

/// Distortion-plus-volume penalty of a single Jacobian, without the volume factor.
double penalty(const Eigen::Matrix3d& jac, double det) {
  const double shape = jac.squaredNorm() * std::pow(det, -2.0 / 3.0) - 3.0;
  const double volume = det + 1.0 / det - 2.0;
  return shape + volume;
}

/// d penalty / d J.
Eigen::Matrix3d penalty_grad(const Eigen::Matrix3d& jac, double det) {
  const Eigen::Matrix3d jac_inv_t = jac.inverse().transpose();
  const double det_m23 = std::pow(det, -2.0 / 3.0);
  return 2.0 * det_m23 * jac -
         (2.0 / 3.0) * jac.squaredNorm() * det_m23 * jac_inv_t +
         (det - 1.0 / det) * jac_inv_t;
}

void check_shapes(const PointMatrix& x, const PointMatrix& ref, const TetrahedralMesh& mesh) {
  if (x.rows() != mesh.n_nodes() || ref.rows() != mesh.n_nodes()) {
    throw validation_error("deformation energy: node count mismatch");
  }
}

}  // namespace

double TetrahedralMesh::tet_volume(Eigen::Index m, const PointMatrix& pos) const {
  return edge_matrix(*this, m, pos).determinant() / 6.0;
}

void TetrahedralMesh::validate() const {
  const Eigen::Index n = n_nodes();
  if (node_alphas.rows() != n) throw validation_error("atlas: node_alphas row count mismatch");
  if (node_alphas.cols() < 1) throw validation_error("atlas: needs at least one class");
  for (Eigen::Index i = 0; i < n; ++i) {
    double sum = 0.0;
    for (Eigen::Index k = 0; k < node_alphas.cols(); ++k) {
      const double a = node_alphas(i, k);
      if (a < 0.0) {
        throw validation_error("atlas: negative alpha at node " + std::to_string(i));
      }
      sum += a;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw validation_error("atlas: alphas of node " + std::to_string(i) + " do not sum to 1");
    }
  }
  for (Eigen::Index m = 0; m < n_tetrahedra(); ++m) {
    for (int v = 0; v < 4; ++v) {
      const auto idx = tetrahedra(m, v);
      if (idx < 0 || idx >= n) {
        throw validation_error("atlas: tetrahedron " + std::to_string(m) + " index out of range");
      }
    }
    if (!(tet_volume(m, reference_positions) > 0.0)) {
      throw validation_error("atlas: tetrahedron " + std::to_string(m) +
                             " has non-positive reference volume");
    }
  }
}

double deformation_energy(const PointMatrix& x, const PointMatrix& ref,
                          const TetrahedralMesh& mesh) {
  check_shapes(x, ref, mesh);
  const Eigen::Index m_count = mesh.n_tetrahedra();
  double total = 0.0;
  for (Eigen::Index m = 0; m < m_count; ++m) {
    const Eigen::Matrix3d e_ref = edge_matrix(mesh, m, ref);
    const double det_ref = e_ref.determinant();
    const Eigen::Matrix3d jac = edge_matrix(mesh, m, x) * e_ref.inverse();
    const double det = jac.determinant();
    if (!(det > 0.0)) return kInf;
    total += (det_ref / 6.0) * penalty(jac, det);
  }
  return total;
}

PointMatrix deformation_energy_gradient(const PointMatrix& x, const PointMatrix& ref,
                                        const TetrahedralMesh& mesh) {
  check_shapes(x, ref, mesh);
  PointMatrix grad = PointMatrix::Zero(mesh.n_nodes(), 3);
  for (Eigen::Index m = 0; m < mesh.n_tetrahedra(); ++m) {
    const Eigen::Matrix3d e_ref = edge_matrix(mesh, m, ref);
    const Eigen::Matrix3d e_ref_inv = e_ref.inverse();
    const Eigen::Matrix3d jac = edge_matrix(mesh, m, x) * e_ref_inv;
    const double det = jac.determinant();
    if (!(det > 0.0)) {
      throw numeric_error("deformation gradient undefined: tetrahedron " + std::to_string(m) +
                          " has non-positive Jacobian determinant");
    }
    const double volume = e_ref.determinant() / 6.0;
    // dU/dE = V * (dW/dJ) * E_ref^-T, columns are the gradients of nodes 1..3.
    const Eigen::Matrix3d g_e = volume * penalty_grad(jac, det) * e_ref_inv.transpose();
    const auto& t = mesh.tetrahedra;
    grad.row(t(m, 1)) += g_e.col(0).transpose();
    grad.row(t(m, 2)) += g_e.col(1).transpose();
    grad.row(t(m, 3)) += g_e.col(2).transpose();
    grad.row(t(m, 0)) -= (g_e.col(0) + g_e.col(1) + g_e.col(2)).transpose();
  }
  return grad;
}

PointMatrix deformation_energy_ref_gradient(const PointMatrix& x, const PointMatrix& ref,
                                            const TetrahedralMesh& mesh) {
  check_shapes(x, ref, mesh);
  PointMatrix grad = PointMatrix::Zero(mesh.n_nodes(), 3);
  for (Eigen::Index m = 0; m < mesh.n_tetrahedra(); ++m) {
    const Eigen::Matrix3d e_ref = edge_matrix(mesh, m, ref);
    const double det_ref = e_ref.determinant();
    if (!(det_ref > 0.0)) {
      throw numeric_error("deformation gradient undefined: tetrahedron " + std::to_string(m) +
                          " has non-positive reference volume");
    }
    const Eigen::Matrix3d e_ref_inv = e_ref.inverse();
    const Eigen::Matrix3d jac = edge_matrix(mesh, m, x) * e_ref_inv;
    const double det = jac.determinant();
    if (!(det > 0.0)) {
      throw numeric_error("deformation gradient undefined: tetrahedron " + std::to_string(m) +
                          " has non-positive Jacobian determinant");
    }
    const double volume = det_ref / 6.0;
    // U = V(E_ref) * W(E E_ref^-1); both factors depend on the reference:
    // dU/dE_ref = V * (W I - J^T dW/dJ) * E_ref^-T.
    const Eigen::Matrix3d g_e =
        volume *
        (penalty(jac, det) * Eigen::Matrix3d::Identity() - jac.transpose() * penalty_grad(jac, det)) *
        e_ref_inv.transpose();
    const auto& t = mesh.tetrahedra;
    grad.row(t(m, 1)) += g_e.col(0).transpose();
    grad.row(t(m, 2)) += g_e.col(1).transpose();
    grad.row(t(m, 3)) += g_e.col(2).transpose();
    grad.row(t(m, 0)) -= (g_e.col(0) + g_e.col(1) + g_e.col(2)).transpose();
  }
  return grad;
}

bool deformation_feasible(const PointMatrix& x, const PointMatrix& ref,
                          const TetrahedralMesh& mesh, double min_det_ratio) {
  if (x.rows() != mesh.n_nodes() || ref.rows() != mesh.n_nodes()) return false;
  for (Eigen::Index m = 0; m < mesh.n_tetrahedra(); ++m) {
    const Eigen::Matrix3d e_ref = edge_matrix(mesh, m, ref);
    const double det_ref = e_ref.determinant();
    if (!(det_ref > 0.0)) return false;
    const double det = edge_matrix(mesh, m, x).determinant() / det_ref;
    if (!(det > min_det_ratio)) return false;
  }
  return true;
}

// ---- Rasterization ---------------------------------------------------------

namespace {

/// Coarse spatial index: tetrahedron ids binned by bounding box, in id order.
class TetBins {
 public:
  TetBins(const PointMatrix& x, const TetrahedralMesh& mesh, const VoxelGrid& grid)
      : grid_(grid) {
    for (int a = 0; a < 3; ++a) {
      n_bins_[a] = (grid.dims[a] + kBinSize - 1) / kBinSize;
    }
    bins_.resize(static_cast<std::size_t>(n_bins_[0]) * n_bins_[1] * n_bins_[2]);
    for (Eigen::Index m = 0; m < mesh.n_tetrahedra(); ++m) {
      Eigen::Vector3d lo = x.row(mesh.tetrahedra(m, 0));
      Eigen::Vector3d hi = lo;
      for (int v = 1; v < 4; ++v) {
        const Eigen::Vector3d p = x.row(mesh.tetrahedra(m, v));
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
      }
      int b_lo[3], b_hi[3];
      for (int a = 0; a < 3; ++a) {
        b_lo[a] = std::clamp(static_cast<int>(std::floor(lo[a])) / kBinSize, 0, n_bins_[a] - 1);
        b_hi[a] = std::clamp(static_cast<int>(std::ceil(hi[a])) / kBinSize, 0, n_bins_[a] - 1);
      }
      for (int bz = b_lo[2]; bz <= b_hi[2]; ++bz)
        for (int by = b_lo[1]; by <= b_hi[1]; ++by)
          for (int bx = b_lo[0]; bx <= b_hi[0]; ++bx)
            bins_[bin_index(bx, by, bz)].push_back(static_cast<std::int32_t>(m));
    }
  }

  const std::vector<std::int32_t>& candidates(int vx, int vy, int vz) const {
    return bins_[bin_index(vx / kBinSize, vy / kBinSize, vz / kBinSize)];
  }

 private:
  static constexpr int kBinSize = 4;

  std::size_t bin_index(int bx, int by, int bz) const {
    return static_cast<std::size_t>(bx) +
           static_cast<std::size_t>(n_bins_[0]) *
               (static_cast<std::size_t>(by) + static_cast<std::size_t>(n_bins_[1]) * bz);
  }

  VoxelGrid grid_;
  int n_bins_[3];
  std::vector<std::vector<std::int32_t>> bins_;
};

struct TetGeometry {
  Eigen::Matrix3d inv_edges;  // E^-1 at deformed positions
  Eigen::Vector3d p0;
};

}  // namespace

PriorRaster rasterize_prior_subset(const PointMatrix& x, const TetrahedralMesh& mesh,
                                   const VoxelGrid& grid, const std::vector<std::size_t>& voxels,
                                   int threads) {
  const int k_classes = mesh.n_classes();
  const Eigen::Index m_count = mesh.n_tetrahedra();

  std::vector<TetGeometry> geom(static_cast<std::size_t>(m_count));
  for (Eigen::Index m = 0; m < m_count; ++m) {
    const Eigen::Matrix3d e = edge_matrix(mesh, m, x);
    geom[static_cast<std::size_t>(m)].inv_edges = e.inverse();
    geom[static_cast<std::size_t>(m)].p0 = x.row(mesh.tetrahedra(m, 0));
  }
  const TetBins bins(x, mesh, grid);

  PriorRaster out;
  const std::size_t n = voxels.size();
  out.prior.setZero(static_cast<Eigen::Index>(n), k_classes);
  out.tet.assign(n, -1);
  out.bary.setZero(static_cast<Eigen::Index>(n), 4);

  parallel_chunks(n, threads, [&](int, std::size_t begin, std::size_t end) {
    for (std::size_t row = begin; row < end; ++row) {
      const auto c = grid.coords(voxels[row]);
      const Eigen::Vector3d p(static_cast<double>(c[0]), static_cast<double>(c[1]),
                              static_cast<double>(c[2]));
      for (std::int32_t m : bins.candidates(c[0], c[1], c[2])) {
        const auto& g = geom[static_cast<std::size_t>(m)];
        const Eigen::Vector3d lam123 = g.inv_edges * (p - g.p0);
        const double lam0 = 1.0 - lam123.sum();
        if (lam123.minCoeff() >= -kBaryTol && lam0 >= -kBaryTol) {
          out.tet[row] = m;
          out.bary(static_cast<Eigen::Index>(row), 0) = lam0;
          out.bary(static_cast<Eigen::Index>(row), 1) = lam123[0];
          out.bary(static_cast<Eigen::Index>(row), 2) = lam123[1];
          out.bary(static_cast<Eigen::Index>(row), 3) = lam123[2];
          break;
        }
      }
      if (out.tet[row] >= 0) {
        const std::int32_t m = out.tet[row];
        Eigen::RowVectorXd alpha = Eigen::RowVectorXd::Zero(k_classes);
        for (int v = 0; v < 4; ++v) {
          alpha += out.bary(static_cast<Eigen::Index>(row), v) *
                   mesh.node_alphas.row(mesh.tetrahedra(m, v));
        }
        // Clip the barycentric tolerance and renormalize to an exact simplex.
        for (int k = 0; k < k_classes; ++k) alpha[k] = std::max(alpha[k], 0.0);
        out.prior.row(static_cast<Eigen::Index>(row)) = alpha / alpha.sum();
      } else {
        out.prior(static_cast<Eigen::Index>(row), 0) = 1.0;  // background simplex
      }
    }
  });
  return out;
}

Eigen::MatrixXd rasterize_prior(const PointMatrix& x, const TetrahedralMesh& mesh,
                                const VoxelGrid& grid, int threads) {
  std::vector<std::size_t> all(grid.num_voxels());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return rasterize_prior_subset(x, mesh, grid, all, threads).prior;
}

// ---- Atlas construction ----------------------------------------------------

TetrahedralMesh build_grid_atlas(const VoxelGrid& grid, int spacing,
                                 const Eigen::VectorXd& alpha_init) {
  grid.validate();
  if (spacing < 1) throw validation_error("build_grid_atlas: spacing must be >= 1");
  const int k_classes = static_cast<int>(alpha_init.size());
  if (k_classes < 1) throw validation_error("build_grid_atlas: empty alpha_init");
  if (std::abs(alpha_init.sum() - 1.0) > 1e-9 || alpha_init.minCoeff() < 0.0) {
    throw validation_error("build_grid_atlas: alpha_init is not a simplex");
  }

  // One pad node row beyond each side of the volume keeps every voxel center on
  // interior faces of the lattice, so the interpolated prior stays continuous
  // under small node motions instead of snapping to the outside fallback.
  int n_axis[3];
  for (int a = 0; a < 3; ++a) {
    if (spacing > grid.dims[a]) {
      throw validation_error("build_grid_atlas: spacing exceeds grid extent");
    }
    n_axis[a] = (grid.dims[a] - 2 + spacing) / spacing + 3;  // ceil((dim-1)/spacing) + 1 + pad
  }

  TetrahedralMesh mesh;
  const Eigen::Index n_nodes =
      static_cast<Eigen::Index>(n_axis[0]) * n_axis[1] * n_axis[2];
  mesh.reference_positions.resize(n_nodes, 3);
  mesh.node_alphas.resize(n_nodes, k_classes);
  auto node_id = [&](int i, int j, int k) {
    return static_cast<Eigen::Index>(i) +
           static_cast<Eigen::Index>(n_axis[0]) * (j + static_cast<Eigen::Index>(n_axis[1]) * k);
  };
  for (int k = 0; k < n_axis[2]; ++k)
    for (int j = 0; j < n_axis[1]; ++j)
      for (int i = 0; i < n_axis[0]; ++i) {
        const Eigen::Index id = node_id(i, j, k);
        mesh.reference_positions.row(id) << static_cast<double>(i - 1) * spacing,
            static_cast<double>(j - 1) * spacing, static_cast<double>(k - 1) * spacing;
        mesh.node_alphas.row(id) = alpha_init.transpose();
      }

  // 5-tetrahedra split per cube; the diagonal pattern is mirrored on cubes of
  // odd parity so neighboring cubes share their face diagonals.
  static const int kEven[5][4][3] = {
      {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}},
      {{1, 1, 0}, {0, 1, 0}, {1, 0, 0}, {1, 1, 1}},
      {{1, 0, 1}, {0, 0, 1}, {1, 1, 1}, {1, 0, 0}},
      {{0, 1, 1}, {0, 0, 1}, {0, 1, 0}, {1, 1, 1}},
      {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 1}},
  };
  const Eigen::Index n_cubes = static_cast<Eigen::Index>(n_axis[0] - 1) * (n_axis[1] - 1) *
                               (n_axis[2] - 1);
  mesh.tetrahedra.resize(n_cubes * 5, 4);
  Eigen::Index row = 0;
  for (int k = 0; k + 1 < n_axis[2]; ++k)
    for (int j = 0; j + 1 < n_axis[1]; ++j)
      for (int i = 0; i + 1 < n_axis[0]; ++i) {
        const bool odd = ((i + j + k) % 2) != 0;
        for (int t = 0; t < 5; ++t) {
          for (int v = 0; v < 4; ++v) {
            int di = kEven[t][v][0];
            if (odd) di = 1 - di;  // mirror along x
            mesh.tetrahedra(row, v) = static_cast<std::int32_t>(
                node_id(i + di, j + kEven[t][v][1], k + kEven[t][v][2]));
          }
          if (mesh.tet_volume(row, mesh.reference_positions) < 0.0) {
            std::swap(mesh.tetrahedra(row, 2), mesh.tetrahedra(row, 3));
          }
          ++row;
        }
      }

  mesh.validate();
  return mesh;
}

// ---- Atlas I/O --------------------------------------------------------------

TetrahedralMesh read_atlas(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw format_error(path + ": cannot open file");
  std::string tag;
  int version = 0;
  in >> tag >> version;
  if (!in || tag != "TETATLAS" || version != 1) throw format_error(path + ": bad TETATLAS header");

  Eigen::Index n = 0;
  int k_classes = 0;
  in >> tag >> n >> k_classes;
  if (!in || tag != "NODES" || n < 1 || k_classes < 1) throw format_error(path + ": bad NODES line");

  TetrahedralMesh mesh;
  mesh.reference_positions.resize(n, 3);
  mesh.node_alphas.resize(n, k_classes);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) in >> mesh.reference_positions(i, a);
    for (int k = 0; k < k_classes; ++k) in >> mesh.node_alphas(i, k);
    if (!in) throw format_error(path + ": bad node line " + std::to_string(i));
  }

  Eigen::Index m_count = 0;
  in >> tag >> m_count;
  if (!in || tag != "TETS" || m_count < 1) throw format_error(path + ": bad TETS line");
  mesh.tetrahedra.resize(m_count, 4);
  for (Eigen::Index m = 0; m < m_count; ++m) {
    for (int v = 0; v < 4; ++v) in >> mesh.tetrahedra(m, v);
    if (!in) throw format_error(path + ": bad tetrahedron line " + std::to_string(m));
  }
  in >> tag;
  if (!in || tag != "END") throw format_error(path + ": missing END");

  mesh.validate();
  return mesh;
}

void write_atlas(const TetrahedralMesh& mesh, const std::string& path) {
  mesh.validate();
  std::ofstream out(path);
  if (!out) throw error(path + ": cannot open file for writing");
  out.precision(17);
  out << "TETATLAS 1\n";
  out << "NODES " << mesh.n_nodes() << ' ' << mesh.n_classes() << '\n';
  for (Eigen::Index i = 0; i < mesh.n_nodes(); ++i) {
    out << mesh.reference_positions(i, 0) << ' ' << mesh.reference_positions(i, 1) << ' '
        << mesh.reference_positions(i, 2);
    for (int k = 0; k < mesh.n_classes(); ++k) out << ' ' << mesh.node_alphas(i, k);
    out << '\n';
  }
  out << "TETS " << mesh.n_tetrahedra() << '\n';
  for (Eigen::Index m = 0; m < mesh.n_tetrahedra(); ++m) {
    out << mesh.tetrahedra(m, 0) << ' ' << mesh.tetrahedra(m, 1) << ' ' << mesh.tetrahedra(m, 2)
        << ' ' << mesh.tetrahedra(m, 3) << '\n';
  }
  out << "END\n";
  if (!out) throw error(path + ": write failed");
}

PointMatrix read_positions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw format_error(path + ": cannot open file");
  std::string line;
  if (!std::getline(in, line)) throw format_error(path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "POS 1") throw format_error(path + ": bad POS header");
  std::vector<Eigen::Vector3d> rows;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line == "END") {
      PointMatrix out(static_cast<Eigen::Index>(rows.size()), 3);
      for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = rows[i];
      return out;
    }
    std::istringstream ls(line);
    Eigen::Vector3d p;
    ls >> p[0] >> p[1] >> p[2];
    if (!ls) throw format_error(path + ": bad position line " + std::to_string(rows.size()));
    rows.push_back(p);
  }
  throw format_error(path + ": missing END");
}

void write_positions(const PointMatrix& pos, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw error(path + ": cannot open file for writing");
  out.precision(17);
  out << "POS 1\n";
  for (Eigen::Index i = 0; i < pos.rows(); ++i) {
    out << pos(i, 0) << ' ' << pos(i, 1) << ' ' << pos(i, 2) << '\n';
  }
  out << "END\n";
  if (!out) throw error(path + ": write failed");
}

}  // namespace longseg
