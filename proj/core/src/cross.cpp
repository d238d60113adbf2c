#include "longseg/cross.hpp"

#include <cmath>
#include <limits>

#include "longseg/error.hpp"
#include "longseg/parallel.hpp"

namespace longseg {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Eigen::VectorXd flatten(const PointMatrix& p) {
  return Eigen::Map<const Eigen::VectorXd>(p.data(), p.size());
}

PointMatrix unflatten(const Eigen::VectorXd& v) {
  return Eigen::Map<const PointMatrix>(v.data(), v.size() / 3, 3);
}

}  // namespace

MultiContrastVolume ensure_log_transformed(const MultiContrastVolume& vol) {
  if (vol.log_transformed) return vol;
  double floor = std::numeric_limits<double>::infinity();
  for (int c = 0; c < vol.n_contrasts; ++c) {
    floor = std::min(floor, default_log_floor(vol, c));
  }
  return log_transform(vol, floor);
}

void FitConfig::validate() const {
  if (max_outer_sweeps < 1) throw validation_error("fit config: max_outer_sweeps must be >= 1");
  if (!(em_tolerance > 0.0)) throw validation_error("fit config: em_tolerance must be > 0");
  if (!(kappa >= 0.0)) throw validation_error("fit config: kappa must be >= 0");
  if (threads < 1) throw validation_error("fit config: threads must be >= 1");
  for (int a = 0; a < 3; ++a) {
    if (bias_order[a] < 0) throw validation_error("fit config: negative bias order");
  }
  if (mesh_lbfgs.memory < 1 || mesh_lbfgs.max_iters < 0 || !(mesh_lbfgs.grad_tol > 0.0)) {
    throw validation_error("fit config: bad mesh optimizer settings");
  }
}

DataTermResult mesh_data_term(const std::vector<std::size_t>& voxels,
                              const Eigen::MatrixXd& log_lik, const PointMatrix& x,
                              const TetrahedralMesh& mesh, const VoxelGrid& grid,
                              bool with_gradient, int threads, double prior_scale,
                              const Eigen::VectorXd* extra_log_mass) {
  if (static_cast<std::size_t>(log_lik.rows()) != voxels.size()) {
    throw validation_error("mesh_data_term: likelihood row count mismatch");
  }
  if (log_lik.cols() != mesh.n_classes()) {
    throw validation_error("mesh_data_term: class count mismatch");
  }
  if (!(prior_scale > 0.0 && prior_scale <= 1.0)) {
    throw validation_error("mesh_data_term: prior_scale must be in (0, 1]");
  }
  if (extra_log_mass &&
      static_cast<std::size_t>(extra_log_mass->size()) != voxels.size()) {
    throw validation_error("mesh_data_term: extra_log_mass size mismatch");
  }
  const double log_scale = std::log(prior_scale);
  const PriorRaster raster = rasterize_prior_subset(x, mesh, grid, voxels, threads);
  const int k_classes = mesh.n_classes();

  // Inverse edge matrices of the tetrahedra actually hit, for the gradient
  // chain through the barycentric coordinates.
  std::vector<Eigen::Matrix3d> inv_edges;
  if (with_gradient) {
    inv_edges.resize(static_cast<std::size_t>(mesh.n_tetrahedra()));
    for (Eigen::Index m = 0; m < mesh.n_tetrahedra(); ++m) {
      Eigen::Matrix3d e;
      const Eigen::Vector3d p0 = x.row(mesh.tetrahedra(m, 0));
      e.col(0) = x.row(mesh.tetrahedra(m, 1)).transpose() - p0;
      e.col(1) = x.row(mesh.tetrahedra(m, 2)).transpose() - p0;
      e.col(2) = x.row(mesh.tetrahedra(m, 3)).transpose() - p0;
      inv_edges[static_cast<std::size_t>(m)] = e.inverse();
    }
  }

  struct Acc {
    double value = 0.0;
    PointMatrix grad;
  };
  Acc init;
  if (with_gradient) init.grad = PointMatrix::Zero(mesh.n_nodes(), 3);

  Acc total = parallel_reduce(
      voxels.size(), threads, init,
      [&](Acc& acc, std::size_t row) {
        const Eigen::Index r = static_cast<Eigen::Index>(row);
        double max_lp = kNegInf;
        Eigen::VectorXd lp(k_classes + 1);
        for (int k = 0; k < k_classes; ++k) {
          const double pi_k = raster.prior(r, k);
          lp[k] = pi_k > 0.0 ? log_scale + std::log(pi_k) + log_lik(r, k) : kNegInf;
          max_lp = std::max(max_lp, lp[k]);
        }
        lp[k_classes] = extra_log_mass ? (*extra_log_mass)[static_cast<Eigen::Index>(row)]
                                       : kNegInf;
        max_lp = std::max(max_lp, lp[k_classes]);
        double sum = 0.0;
        for (int k = 0; k <= k_classes; ++k) {
          if (lp[k] > kNegInf) sum += std::exp(lp[k] - max_lp);
        }
        const double log_s = max_lp + std::log(sum);
        acc.value += log_s;

        const std::int32_t m = raster.tet[row];
        if (!with_gradient || m < 0) return;
        // d log S / d y_v = -lambda_v * sum_j s_j b_j with
        // s_j = sum_k alpha_jk * scale * exp(loglik_k - log S) and
        // b_0 = -(b_1+b_2+b_3).
        const Eigen::Matrix3d& b = inv_edges[static_cast<std::size_t>(m)];
        Eigen::Vector4d s;
        for (int j = 0; j < 4; ++j) {
          double s_j = 0.0;
          const auto alpha = mesh.node_alphas.row(mesh.tetrahedra(m, j));
          for (int k = 0; k < k_classes; ++k) {
            s_j += alpha[k] * std::exp(std::min(log_scale + log_lik(r, k) - log_s, 700.0));
          }
          s[j] = s_j;
        }
        Eigen::Vector3d v = Eigen::Vector3d::Zero();
        for (int j = 1; j < 4; ++j) v += (s[j] - s[0]) * b.row(j - 1).transpose();
        for (int j = 0; j < 4; ++j) {
          acc.grad.row(mesh.tetrahedra(m, j)) -= raster.bary(r, j) * v.transpose();
        }
      },
      [](Acc& total_acc, const Acc& part) {
        total_acc.value += part.value;
        if (part.grad.size() > 0) total_acc.grad += part.grad;
      });

  DataTermResult out;
  out.value = total.value;
  if (with_gradient) out.gradient = std::move(total.grad);
  return out;
}

double cross_objective(const AppearanceWorkspace& ws, const TetrahedralMesh& mesh,
                       const VoxelGrid& grid, const PointMatrix& x, const GaussianParams& gauss,
                       const BiasField& bias, double kappa, int threads) {
  const double energy = deformation_energy(x, mesh.reference_positions, mesh);
  if (!std::isfinite(energy)) {
    throw numeric_error("cross_objective: deformation energy is infinite");
  }
  const Eigen::MatrixXd log_lik = voxel_log_likelihoods(ws, gauss, bias, threads);
  const DataTermResult data = mesh_data_term(ws.voxels, log_lik, x, mesh, grid, false, threads);
  return data.value - kappa * energy;
}

MeshOptResult optimize_mesh(const std::vector<std::size_t>& voxels,
                            const Eigen::MatrixXd& log_lik, const TetrahedralMesh& mesh,
                            const VoxelGrid& grid, const PointMatrix& x_init, double kappa,
                            const PointMatrix& ref, const LbfgsConfig& cfg, int threads,
                            double prior_scale, const Eigen::VectorXd* extra_log_mass) {
  auto objective = [&](const Eigen::VectorXd& v, Eigen::VectorXd& grad) {
    const PointMatrix x = unflatten(v);
    const DataTermResult data = mesh_data_term(voxels, log_lik, x, mesh, grid, true, threads,
                                               prior_scale, extra_log_mass);
    const double energy = deformation_energy(x, ref, mesh);
    const PointMatrix energy_grad = deformation_energy_gradient(x, ref, mesh);
    grad = flatten(PointMatrix(-data.gradient + kappa * energy_grad));
    return -data.value + kappa * energy;
  };
  auto feasible = [&](const Eigen::VectorXd& v) {
    return deformation_feasible(unflatten(v), ref, mesh);
  };

  const LbfgsResult res = lbfgs_minimize(objective, flatten(x_init), cfg, feasible);
  MeshOptResult out;
  out.x = unflatten(res.x);
  out.line_search_failed = res.line_search_failed && res.iterations == 0;
  return out;
}

std::pair<GaussianParams, BiasField> initialize_appearance(const AppearanceWorkspace& ws,
                                                           const Eigen::MatrixXd& prior,
                                                           const std::array<int, 3>& order) {
  if (prior.rows() != ws.data.rows()) {
    throw validation_error("initialize_appearance: prior row count mismatch");
  }
  const int k_classes = static_cast<int>(prior.cols());
  const int n_contrasts = static_cast<int>(ws.data.cols());
  const double eps = 1e-6 * mean_contrast_variance(ws);

  GaussianParams gauss;
  gauss.means.resize(k_classes);
  gauss.covariances.resize(k_classes);
  for (int k = 0; k < k_classes; ++k) {
    const double n_k = prior.col(k).sum();
    if (!(n_k > 0.0)) {
      throw numeric_error("initialize_appearance: class " + std::to_string(k + 1) +
                          " has zero prior mass");
    }
    const Eigen::VectorXd mean = ws.data.transpose() * prior.col(k) / n_k;
    const Eigen::MatrixXd centered = ws.data.rowwise() - mean.transpose();
    gauss.means[k] = mean;
    gauss.covariances[k] =
        centered.transpose() * prior.col(k).asDiagonal() * centered / n_k +
        eps * Eigen::MatrixXd::Identity(n_contrasts, n_contrasts);
  }

  BiasField bias;
  bias.order = order;
  bias.coefficients = Eigen::MatrixXd::Zero(n_contrasts, bias.n_basis());
  return {gauss, bias};
}

CrossFitResult fit_cross(const MultiContrastVolume& vol, const TetrahedralMesh& mesh,
                         const FitConfig& cfg) {
  cfg.validate();
  mesh.validate();
  const AppearanceWorkspace ws =
      AppearanceWorkspace::build(ensure_log_transformed(vol), cfg.bias_order);

  CrossFitResult result;
  result.x_hat = mesh.reference_positions;
  PriorRaster raster =
      rasterize_prior_subset(result.x_hat, mesh, vol.grid, ws.voxels, cfg.threads);
  std::tie(result.gauss, result.bias) = initialize_appearance(ws, raster.prior, cfg.bias_order);

  double previous = kNegInf;
  for (int sweep = 0; sweep < cfg.max_outer_sweeps; ++sweep) {
    Eigen::MatrixXd log_lik =
        voxel_log_likelihoods(ws, result.gauss, result.bias, cfg.threads);
    const Eigen::MatrixXd resp = responsibilities(log_lik, raster.prior, ws.voxels, cfg.threads);
    result.gauss = update_gaussians_ml(ws, resp, result.bias, cfg.threads);
    result.bias = update_bias_field(ws, resp, result.gauss, cfg.bias_order, cfg.threads);

    log_lik = voxel_log_likelihoods(ws, result.gauss, result.bias, cfg.threads);
    const MeshOptResult mesh_opt =
        optimize_mesh(ws.voxels, log_lik, mesh, vol.grid, result.x_hat, cfg.kappa,
                      mesh.reference_positions, cfg.mesh_lbfgs, cfg.threads);
    result.x_hat = mesh_opt.x;
    result.mesh_warning = result.mesh_warning || mesh_opt.line_search_failed;
    raster = rasterize_prior_subset(result.x_hat, mesh, vol.grid, ws.voxels, cfg.threads);

    const double objective =
        mesh_data_term(ws.voxels, log_lik, result.x_hat, mesh, vol.grid, false, cfg.threads)
            .value -
        cfg.kappa * deformation_energy(result.x_hat, mesh.reference_positions, mesh);
    result.objective_trace.push_back(objective);
    if (sweep > 0 &&
        std::abs(objective - previous) < cfg.em_tolerance * std::max(1.0, std::abs(previous))) {
      result.converged = true;
      break;
    }
    previous = objective;
  }
  return result;
}

LabelVolume segment(const MultiContrastVolume& vol, const TetrahedralMesh& mesh,
                    const PointMatrix& x_hat, const GaussianParams& gauss, const BiasField& bias,
                    int threads) {
  const AppearanceWorkspace ws =
      AppearanceWorkspace::build(ensure_log_transformed(vol), bias.order);
  const PriorRaster raster = rasterize_prior_subset(x_hat, mesh, vol.grid, ws.voxels, threads);
  const Eigen::MatrixXd log_lik = voxel_log_likelihoods(ws, gauss, bias, threads);
  const Eigen::MatrixXd resp = responsibilities(log_lik, raster.prior, ws.voxels, threads);

  LabelVolume seg;
  seg.grid = vol.grid;
  seg.n_classes = static_cast<int>(resp.cols());
  seg.labels.assign(vol.grid.num_voxels(), 0);
  seg.posteriors.assign(vol.grid.num_voxels() * static_cast<std::size_t>(seg.n_classes), 0.0);
  for (std::size_t row = 0; row < ws.voxels.size(); ++row) {
    const std::size_t voxel = ws.voxels[row];
    Eigen::Index best = 0;
    resp.row(static_cast<Eigen::Index>(row)).maxCoeff(&best);
    seg.labels[voxel] = static_cast<std::int32_t>(best) + 1;
    for (int k = 0; k < seg.n_classes; ++k) {
      seg.posteriors[voxel * static_cast<std::size_t>(seg.n_classes) + static_cast<std::size_t>(k)] =
          resp(static_cast<Eigen::Index>(row), k);
    }
  }
  return seg;
}

}  // namespace longseg
