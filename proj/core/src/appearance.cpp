#include "longseg/appearance.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "longseg/error.hpp"
#include "longseg/parallel.hpp"

namespace longseg {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

}  // namespace

void GaussianParams::validate() const {
  if (means.empty()) throw validation_error("gaussian params: no classes");
  if (covariances.size() != means.size()) {
    throw validation_error("gaussian params: mean/covariance count mismatch");
  }
  const Eigen::Index n = means[0].size();
  for (std::size_t k = 0; k < means.size(); ++k) {
    if (means[k].size() != n) throw validation_error("gaussian params: ragged means");
    if (covariances[k].rows() != n || covariances[k].cols() != n) {
      throw validation_error("gaussian params: covariance shape mismatch");
    }
    if (!means[k].allFinite() || !covariances[k].allFinite()) {
      throw validation_error("gaussian params: non-finite entries in class " + std::to_string(k + 1));
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(covariances[k]);
    const double floor = 1e-12 * covariances[k].trace() / static_cast<double>(n);
    if (eig.eigenvalues().minCoeff() <= floor) {
      throw validation_error("gaussian params: covariance of class " + std::to_string(k + 1) +
                             " is not positive definite");
    }
  }
}

void BiasField::validate() const {
  if (order[0] < 0 || order[1] < 0 || order[2] < 0) {
    throw validation_error("bias field: negative basis order");
  }
  if (coefficients.cols() != n_basis()) {
    throw validation_error("bias field: coefficient count does not match basis order");
  }
  if (!coefficients.allFinite()) throw validation_error("bias field: non-finite coefficients");
}

Eigen::MatrixXd eval_basis_subset(const VoxelGrid& grid, const std::array<int, 3>& order,
                                  const std::vector<std::size_t>& voxels) {
  for (int a = 0; a < 3; ++a) {
    if (order[a] < 0) throw validation_error("eval_basis: negative order");
  }
  // Per-axis function tables: axis_fn[a] is (order+1) x dim.
  std::array<Eigen::MatrixXd, 3> axis_fn;
  for (int a = 0; a < 3; ++a) {
    const int dim = grid.dims[a];
    axis_fn[a].resize(order[a] + 1, dim);
    for (int j = 0; j <= order[a]; ++j) {
      for (int i = 0; i < dim; ++i) {
        axis_fn[a](j, i) =
            j == 0 ? 1.0
                   : std::cos(std::numbers::pi * j * (i + 0.5) / static_cast<double>(dim));
      }
    }
  }

  const int p_count = (order[0] + 1) * (order[1] + 1) * (order[2] + 1);
  Eigen::MatrixXd basis(static_cast<Eigen::Index>(voxels.size()), p_count);
  for (std::size_t r = 0; r < voxels.size(); ++r) {
    const auto c = grid.coords(voxels[r]);
    int p = 0;
    for (int pz = 0; pz <= order[2]; ++pz)
      for (int py = 0; py <= order[1]; ++py)
        for (int px = 0; px <= order[0]; ++px) {
          basis(static_cast<Eigen::Index>(r), p++) =
              axis_fn[0](px, c[0]) * axis_fn[1](py, c[1]) * axis_fn[2](pz, c[2]);
        }
  }
  return basis;
}

Eigen::MatrixXd eval_basis(const VoxelGrid& grid, const std::array<int, 3>& order) {
  std::vector<std::size_t> all(grid.num_voxels());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return eval_basis_subset(grid, order, all);
}

AppearanceWorkspace AppearanceWorkspace::build(const MultiContrastVolume& vol,
                                               const std::array<int, 3>& order) {
  vol.validate();
  if (!vol.log_transformed) {
    throw state_error("appearance workspace: volume must be log-transformed first");
  }
  AppearanceWorkspace ws;
  ws.voxels = vol.masked_indices();
  if (ws.voxels.empty()) throw validation_error("appearance workspace: empty mask");
  ws.data.resize(static_cast<Eigen::Index>(ws.voxels.size()), vol.n_contrasts);
  for (std::size_t r = 0; r < ws.voxels.size(); ++r) {
    for (int c = 0; c < vol.n_contrasts; ++c) {
      ws.data(static_cast<Eigen::Index>(r), c) = vol.value(ws.voxels[r], c);
    }
  }
  ws.basis = eval_basis_subset(vol.grid, order, ws.voxels);
  return ws;
}

double mean_contrast_variance(const AppearanceWorkspace& ws) {
  const Eigen::Index n = ws.data.rows();
  if (n < 1) throw validation_error("mean_contrast_variance: empty workspace");
  const Eigen::RowVectorXd mean = ws.data.colwise().mean();
  const double total = (ws.data.rowwise() - mean).squaredNorm();
  return total / static_cast<double>(n) / static_cast<double>(ws.data.cols());
}

Eigen::MatrixXd voxel_log_likelihoods(const AppearanceWorkspace& ws, const GaussianParams& gauss,
                                      const BiasField& bias, int threads) {
  gauss.validate();
  bias.validate();
  const int n_contrasts = gauss.n_contrasts();
  const int k_classes = gauss.n_classes();
  if (ws.data.cols() != n_contrasts) {
    throw validation_error("voxel_log_likelihoods: contrast count mismatch");
  }
  if (bias.coefficients.rows() != n_contrasts || bias.coefficients.cols() != ws.basis.cols()) {
    throw validation_error("voxel_log_likelihoods: bias shape mismatch");
  }

  std::vector<Eigen::LLT<Eigen::MatrixXd>> chol(k_classes);
  Eigen::VectorXd log_norm(k_classes);
  for (int k = 0; k < k_classes; ++k) {
    chol[k].compute(gauss.covariances[k]);
    if (chol[k].info() != Eigen::Success) {
      throw numeric_error("voxel_log_likelihoods: covariance of class " + std::to_string(k + 1) +
                          " is not positive definite");
    }
    double log_det = 0.0;
    for (int c = 0; c < n_contrasts; ++c) log_det += 2.0 * std::log(chol[k].matrixL()(c, c));
    log_norm[k] = -0.5 * (n_contrasts * std::log(2.0 * std::numbers::pi) + log_det);
  }

  const Eigen::MatrixXd residual = ws.data - ws.basis * bias.coefficients.transpose();
  Eigen::MatrixXd out(ws.data.rows(), k_classes);
  parallel_chunks(static_cast<std::size_t>(ws.data.rows()), threads,
                  [&](int, std::size_t begin, std::size_t end) {
                    Eigen::VectorXd r(n_contrasts);
                    for (std::size_t i = begin; i < end; ++i) {
                      const Eigen::Index row = static_cast<Eigen::Index>(i);
                      for (int k = 0; k < k_classes; ++k) {
                        r = residual.row(row).transpose() - gauss.means[k];
                        const double maha = chol[k].matrixL().solve(r).squaredNorm();
                        out(row, k) = log_norm[k] - 0.5 * maha;
                      }
                    }
                  });
  return out;
}

Eigen::MatrixXd responsibilities(const Eigen::MatrixXd& log_lik, const Eigen::MatrixXd& prior,
                                 const std::vector<std::size_t>& voxels, int threads) {
  if (log_lik.rows() != prior.rows() || log_lik.cols() != prior.cols()) {
    throw validation_error("responsibilities: shape mismatch between likelihoods and prior");
  }
  const Eigen::Index k_classes = log_lik.cols();
  Eigen::MatrixXd resp(log_lik.rows(), k_classes);
  std::atomic<std::int64_t> degenerate{-1};
  parallel_chunks(static_cast<std::size_t>(log_lik.rows()), threads,
                  [&](int, std::size_t begin, std::size_t end) {
                    Eigen::VectorXd logp(k_classes);
                    for (std::size_t i = begin; i < end; ++i) {
                      const Eigen::Index row = static_cast<Eigen::Index>(i);
                      double max_lp = kNegInf;
                      for (Eigen::Index k = 0; k < k_classes; ++k) {
                        const double pi_k = prior(row, k);
                        logp[k] = pi_k > 0.0 ? std::log(pi_k) + log_lik(row, k) : kNegInf;
                        max_lp = std::max(max_lp, logp[k]);
                      }
                      if (!(max_lp > kNegInf)) {
                        degenerate.store(static_cast<std::int64_t>(i));
                        return;
                      }
                      double sum = 0.0;
                      for (Eigen::Index k = 0; k < k_classes; ++k) {
                        const double w = std::exp(logp[k] - max_lp);
                        resp(row, k) = w;
                        sum += w;
                      }
                      resp.row(row) /= sum;
                    }
                  });
  const std::int64_t bad = degenerate.load();
  if (bad >= 0) {
    const std::size_t row = static_cast<std::size_t>(bad);
    const std::size_t voxel = row < voxels.size() ? voxels[row] : row;
    throw numeric_error("responsibilities: voxel " + std::to_string(voxel) +
                        " has zero posterior mass in every class");
  }
  return resp;
}

GaussianParams update_gaussians_ml(const AppearanceWorkspace& ws, const Eigen::MatrixXd& resp,
                                   const BiasField& bias, int threads) {
  (void)threads;  // dense reductions below are deterministic without chunking
  bias.validate();
  if (resp.rows() != ws.data.rows()) {
    throw validation_error("update_gaussians_ml: responsibility row count mismatch");
  }
  const int k_classes = static_cast<int>(resp.cols());
  const int n_contrasts = static_cast<int>(ws.data.cols());
  const Eigen::MatrixXd residual = ws.data - ws.basis * bias.coefficients.transpose();
  const double eps = 1e-6 * mean_contrast_variance(ws);

  GaussianParams out;
  out.means.resize(k_classes);
  out.covariances.resize(k_classes);
  for (int k = 0; k < k_classes; ++k) {
    const double n_k = resp.col(k).sum();
    if (!(n_k > 0.0)) {
      throw numeric_error("update_gaussians_ml: class " + std::to_string(k + 1) +
                          " has zero total responsibility");
    }
    const Eigen::VectorXd mean = residual.transpose() * resp.col(k) / n_k;
    const Eigen::MatrixXd centered = residual.rowwise() - mean.transpose();
    const Eigen::MatrixXd scatter =
        centered.transpose() * resp.col(k).asDiagonal() * centered;
    out.means[k] = mean;
    out.covariances[k] =
        scatter / n_k + eps * Eigen::MatrixXd::Identity(n_contrasts, n_contrasts);
  }
  return out;
}

BiasField update_bias_field(const AppearanceWorkspace& ws, const Eigen::MatrixXd& resp,
                            const GaussianParams& gauss, const std::array<int, 3>& order,
                            int threads) {
  (void)threads;  // dense reductions below are deterministic without chunking
  gauss.validate();
  const int n_contrasts = gauss.n_contrasts();
  const int k_classes = gauss.n_classes();
  const int p_count = (order[0] + 1) * (order[1] + 1) * (order[2] + 1);
  if (ws.basis.cols() != p_count) {
    throw validation_error("update_bias_field: workspace basis does not match requested order");
  }
  if (resp.rows() != ws.data.rows() || resp.cols() != k_classes) {
    throw validation_error("update_bias_field: responsibility shape mismatch");
  }

  // Normal equations for vec(C) over all contrasts jointly:
  //   sum_i (phi_i phi_i^T kron A_i) vec(C) = vec(sum_i b_i phi_i^T)
  // with A_i = sum_k w_ik Sigma_k^-1 and b_i = sum_k w_ik Sigma_k^-1 (d_i - mu_k).
  // Grouping by class turns the voxel sums into dense products.
  const int dim = n_contrasts * p_count;
  Eigen::MatrixXd normal = Eigen::MatrixXd::Zero(dim, dim);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(dim);
  for (int k = 0; k < k_classes; ++k) {
    const Eigen::MatrixXd precision = gauss.covariances[k].inverse();
    const Eigen::MatrixXd weighted = resp.col(k).asDiagonal() * ws.basis;   // n x P
    const Eigen::MatrixXd gram = ws.basis.transpose() * weighted;           // P x P
    const Eigen::MatrixXd moment = weighted.transpose() * ws.data;          // P x N
    const Eigen::VectorXd mass = weighted.colwise().sum();                  // P
    for (int p = 0; p < p_count; ++p) {
      for (int q = 0; q < p_count; ++q) {
        normal.block(p * n_contrasts, q * n_contrasts, n_contrasts, n_contrasts) +=
            gram(p, q) * precision;
      }
      rhs.segment(p * n_contrasts, n_contrasts) +=
          precision * (moment.row(p).transpose() - mass[p] * gauss.means[k]);
    }
  }

  BiasField out;
  out.order = order;
  const double rhs_scale = std::max(rhs.norm(), 1e-300);
  Eigen::VectorXd solution = normal.ldlt().solve(rhs);
  if (!solution.allFinite() || (normal * solution - rhs).norm() > 1e-12 * rhs_scale) {
    const double ridge = 1e-10 * normal.trace() / dim;
    Eigen::MatrixXd regular = normal + ridge * Eigen::MatrixXd::Identity(dim, dim);
    solution = regular.ldlt().solve(rhs);
    out.regularized = true;
    if (!solution.allFinite()) {
      throw numeric_error("update_bias_field: normal equations unsolvable even with ridge");
    }
  }
  out.coefficients.resize(n_contrasts, p_count);
  for (int p = 0; p < p_count; ++p) {
    out.coefficients.col(p) = solution.segment(p * n_contrasts, n_contrasts);
  }
  return out;
}

// ---- PARAMS I/O -------------------------------------------------------------

void write_params(const GaussianParams& gauss, const BiasField& bias, const std::string& path) {
  gauss.validate();
  bias.validate();
  if (bias.coefficients.rows() != gauss.n_contrasts()) {
    throw validation_error("write_params: bias/gaussian contrast mismatch");
  }
  std::ofstream out(path);
  if (!out) throw error(path + ": cannot open file for writing");
  out.precision(17);
  out << "PARAMS 1\n";
  for (int k = 0; k < gauss.n_classes(); ++k) {
    out << "MU " << (k + 1);
    for (int c = 0; c < gauss.n_contrasts(); ++c) out << ' ' << gauss.means[k][c];
    out << '\n';
    out << "SIGMA " << (k + 1);
    for (int r = 0; r < gauss.n_contrasts(); ++r)
      for (int c = 0; c < gauss.n_contrasts(); ++c) out << ' ' << gauss.covariances[k](r, c);
    out << '\n';
  }
  out << "BIAS " << bias.coefficients.rows() << ' ' << bias.coefficients.cols();
  for (int r = 0; r < bias.coefficients.rows(); ++r)
    for (int c = 0; c < bias.coefficients.cols(); ++c) out << ' ' << bias.coefficients(r, c);
  out << '\n';
  if (!out) throw error(path + ": write failed");
}

GaussianParams read_params(const std::string& path, BiasField& bias,
                           const std::array<int, 3>& order) {
  std::ifstream in(path);
  if (!in) throw format_error(path + ": cannot open file");
  std::string tag;
  int version = 0;
  in >> tag >> version;
  if (!in || tag != "PARAMS" || version != 1) throw format_error(path + ": bad PARAMS header");

  GaussianParams gauss;
  int n_contrasts = -1;
  while (in >> tag) {
    if (tag == "MU") {
      int k = 0;
      in >> k;
      if (!in || k != gauss.n_classes() + 1) throw format_error(path + ": MU lines out of order");
      if (n_contrasts < 0) {
        std::string rest;
        std::getline(in, rest);
        std::istringstream ls(rest);
        std::vector<double> vals;
        double v;
        while (ls >> v) vals.push_back(v);
        if (vals.empty()) throw format_error(path + ": empty MU line");
        n_contrasts = static_cast<int>(vals.size());
        gauss.means.push_back(Eigen::Map<Eigen::VectorXd>(vals.data(), n_contrasts));
      } else {
        Eigen::VectorXd mu(n_contrasts);
        for (int c = 0; c < n_contrasts; ++c) in >> mu[c];
        if (!in) throw format_error(path + ": truncated MU line for class " + std::to_string(k));
        gauss.means.push_back(mu);
      }
    } else if (tag == "SIGMA") {
      int k = 0;
      in >> k;
      if (!in || k != static_cast<int>(gauss.covariances.size()) + 1 || k > gauss.n_classes()) {
        throw format_error(path + ": SIGMA lines out of order");
      }
      Eigen::MatrixXd sigma(n_contrasts, n_contrasts);
      for (int r = 0; r < n_contrasts; ++r)
        for (int c = 0; c < n_contrasts; ++c) in >> sigma(r, c);
      if (!in) throw format_error(path + ": truncated SIGMA line for class " + std::to_string(k));
      gauss.covariances.push_back(sigma);
    } else if (tag == "BIAS") {
      int n = 0, p = 0;
      in >> n >> p;
      if (!in || n != n_contrasts) throw format_error(path + ": BIAS contrast count mismatch");
      bias.order = order;
      if (p != bias.n_basis()) {
        throw format_error(path + ": BIAS basis count does not match requested order");
      }
      bias.coefficients.resize(n, p);
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < p; ++c) in >> bias.coefficients(r, c);
      if (!in) throw format_error(path + ": truncated BIAS block");
      if (gauss.covariances.size() != gauss.means.size()) {
        throw format_error(path + ": class " + std::to_string(gauss.n_classes()) + " lacks SIGMA");
      }
      gauss.validate();
      bias.validate();
      return gauss;
    } else {
      throw format_error(path + ": unknown record '" + tag + "'");
    }
  }
  throw format_error(path + ": missing BIAS block");
}

}  // namespace longseg
