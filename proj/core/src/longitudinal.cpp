#include "longseg/longitudinal.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "longseg/error.hpp"

namespace longseg {

namespace {

Eigen::VectorXd flatten(const PointMatrix& p) {
  return Eigen::Map<const Eigen::VectorXd>(p.data(), p.size());
}

PointMatrix unflatten(const Eigen::VectorXd& v) {
  return Eigen::Map<const PointMatrix>(v.data(), v.size() / 3, 3);
}

/// Canonical processing order for cross-time-point sums: indices sorted by
/// the content of the summands, so results are bitwise independent of the
/// order in which time points were supplied.
template <typename Key>
std::vector<std::size_t> canonical_order(const std::vector<Key>& keys) {
  std::vector<std::size_t> idx(keys.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return std::lexicographical_compare(keys[a].data(), keys[a].data() + keys[a].size(),
                                        keys[b].data(), keys[b].data() + keys[b].size());
  });
  return idx;
}

double log_multivariate_gamma(double a, int n) {
  double out = 0.25 * n * (n - 1) * std::log(std::numbers::pi);
  for (int j = 1; j <= n; ++j) out += std::lgamma(a + 0.5 * (1 - j));
  return out;
}

/// log N(mu_t | mu0, Sigma_t / p0) + log IW(Sigma_t | p0 Sigma0, p0 - N - 2),
/// all normalization terms included.
double coupling_log_density(const Eigen::VectorXd& mu_t, const Eigen::MatrixXd& sigma_t,
                            const Eigen::VectorXd& mu0, const Eigen::MatrixXd& sigma0,
                            double p0) {
  const int n = static_cast<int>(mu_t.size());
  const Eigen::LLT<Eigen::MatrixXd> llt_t(sigma_t);
  if (llt_t.info() != Eigen::Success) {
    throw numeric_error("coupling density: time-point covariance not positive definite");
  }
  double log_det_t = 0.0;
  for (int c = 0; c < n; ++c) log_det_t += 2.0 * std::log(llt_t.matrixL()(c, c));
  const Eigen::LLT<Eigen::MatrixXd> llt_0(sigma0);
  if (llt_0.info() != Eigen::Success) {
    throw numeric_error("coupling density: prototype covariance not positive definite");
  }
  double log_det_0 = 0.0;
  for (int c = 0; c < n; ++c) log_det_0 += 2.0 * std::log(llt_0.matrixL()(c, c));

  const Eigen::VectorXd diff = mu_t - mu0;
  const double maha = llt_t.matrixL().solve(diff).squaredNorm();
  const double log_normal = -0.5 * n * std::log(2.0 * std::numbers::pi) +
                            0.5 * n * std::log(p0) - 0.5 * log_det_t - 0.5 * p0 * maha;

  const double nu = p0 - n - 2;
  const double trace_term = llt_t.solve(sigma0).trace();
  const double log_iw = 0.5 * nu * (n * std::log(p0) + log_det_0) -
                        0.5 * nu * n * std::log(2.0) - log_multivariate_gamma(0.5 * nu, n) -
                        0.5 * (nu + n + 1) * log_det_t - 0.5 * p0 * trace_term;
  return log_normal + log_iw;
}

/// Data log likelihood of one time point at its current state, including the
/// lesion blending when active.
double timepoint_data_term(const AppearanceWorkspace& ws, const TimepointState& state,
                           const TetrahedralMesh& mesh, const VoxelGrid& grid,
                           const LesionModel& lesion, int threads) {
  const Eigen::MatrixXd log_lik = voxel_log_likelihoods(ws, state.gauss, state.bias, threads);
  if (lesion.uniform_mode) {
    const Eigen::VectorXd extra =
        log_lik.col(lesion.lesion_class).array() + std::log(lesion.q);
    const Eigen::MatrixXd mesh_lik = log_lik.leftCols(mesh.n_classes());
    return mesh_data_term(ws.voxels, mesh_lik, state.x, mesh, grid, false, threads,
                          1.0 - lesion.q, &extra)
        .value;
  }
  return mesh_data_term(ws.voxels, log_lik, state.x, mesh, grid, false, threads).value;
}

/// Prior rows over the fitted classes at configuration x: the rasterized mesh
/// prior, rescaled and extended by the uniform lesion column when active.
Eigen::MatrixXd fitted_prior(const PointMatrix& x, const TetrahedralMesh& mesh,
                             const VoxelGrid& grid, const std::vector<std::size_t>& voxels,
                             const LesionModel& lesion, int threads) {
  const Eigen::MatrixXd mesh_prior =
      rasterize_prior_subset(x, mesh, grid, voxels, threads).prior;
  if (!lesion.uniform_mode) return mesh_prior;
  Eigen::MatrixXd prior(mesh_prior.rows(), mesh_prior.cols() + 1);
  prior.leftCols(mesh_prior.cols()) = (1.0 - lesion.q) * mesh_prior;
  prior.col(mesh_prior.cols()).setConstant(lesion.q);
  return prior;
}

}  // namespace

void NIWHyper::validate(int n_contrasts) const {
  if (p0.size() != n_k.size()) throw validation_error("coupling strengths: size mismatch");
  for (Eigen::Index k = 0; k < p0.size(); ++k) {
    if (p0[k] < 0.0 || n_k[k] < 0.0) {
      throw validation_error("coupling strengths: negative entry for class " +
                             std::to_string(k + 1));
    }
    if (p0[k] != 0.0 && p0[k] <= n_contrasts + 2) {
      throw validation_error("coupling strength of class " + std::to_string(k + 1) +
                             " must be 0 or exceed n_contrasts + 2");
    }
  }
}

void LesionConfig::validate(int n_atlas_classes) const {
  if (!enabled) return;
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw validation_error("lesion config: threshold must be in (0, 1)");
  }
  if (atlas_class < 0 || atlas_class > n_atlas_classes) {
    throw validation_error("lesion config: atlas_class out of range");
  }
  if (atlas_class == 0 && !(uniform_prior > 0.0 && uniform_prior < 1.0)) {
    throw validation_error("lesion config: uniform_prior must be in (0, 1)");
  }
  if (wm_class < 1 || wm_class > n_atlas_classes) {
    throw validation_error("lesion config: wm_class out of range");
  }
}

LesionModel make_lesion_model(const LesionConfig& cfg, int n_atlas_classes) {
  LesionModel model;
  if (!cfg.enabled) return model;
  cfg.validate(n_atlas_classes);
  if (cfg.atlas_class > 0) {
    model.uniform_mode = false;
    model.lesion_class = cfg.atlas_class - 1;
  } else {
    model.uniform_mode = true;
    model.q = cfg.uniform_prior;
    model.lesion_class = n_atlas_classes;
  }
  return model;
}

void LongConfig::validate() const {
  cross.validate();
  if (!(kappa0_ratio > 0.0)) throw validation_error("long config: kappa0_ratio must be > 0");
  if (p0_ratio < 0.0) throw validation_error("long config: p0_ratio must be >= 0");
  if (outer_iterations < 1) throw validation_error("long config: outer_iterations must be >= 1");
  if (inner_sweeps < 1) throw validation_error("long config: inner_sweeps must be >= 1");
}

MultiContrastVolume build_median_template(const std::vector<MultiContrastVolume>& volumes) {
  if (volumes.empty()) throw validation_error("median template: no volumes");
  const MultiContrastVolume& first = volumes.front();
  for (const auto& v : volumes) {
    v.validate();
    if (!(v.grid == first.grid) || v.n_contrasts != first.n_contrasts ||
        v.log_transformed != first.log_transformed) {
      throw validation_error("median template: volumes disagree on grid, contrasts or log state");
    }
  }

  MultiContrastVolume out = first;
  const std::size_t nv = first.grid.num_voxels();
  for (std::size_t i = 0; i < nv; ++i) {
    std::uint8_t m = 1;
    for (const auto& v : volumes) m = static_cast<std::uint8_t>(m & (v.mask[i] ? 1 : 0));
    out.mask[i] = m;
  }

  std::vector<double> values(volumes.size());
  for (int c = 0; c < first.n_contrasts; ++c) {
    for (std::size_t i = 0; i < nv; ++i) {
      if (!out.mask[i]) continue;
      for (std::size_t t = 0; t < volumes.size(); ++t) values[t] = volumes[t].value(i, c);
      std::sort(values.begin(), values.end());
      const std::size_t mid = values.size() / 2;
      out.value(i, c) = values.size() % 2 == 1 ? values[mid]
                                               : 0.5 * (values[mid - 1] + values[mid]);
    }
  }
  return out;
}

void init_longitudinal(const CrossFitResult& template_fit, const LabelVolume& template_seg,
                       std::size_t n_timepoints, const LongConfig& cfg, SubjectLatents& latents,
                       std::vector<TimepointState>& states, NIWHyper& hyper) {
  if (n_timepoints == 0) throw validation_error("init: need at least one time point");
  const int k_atlas = template_fit.gauss.n_classes();
  const int n_contrasts = template_fit.gauss.n_contrasts();
  const LesionModel lesion = make_lesion_model(cfg.lesion, k_atlas);

  hyper.n_k = Eigen::VectorXd::Zero(k_atlas);
  for (std::int32_t label : template_seg.labels) {
    if (label >= 1 && label <= k_atlas) hyper.n_k[label - 1] += 1.0;
  }
  hyper.p0 = cfg.p0_ratio * hyper.n_k;
  for (int k = 0; k < k_atlas; ++k) {
    // A strength too weak for a proper inverse-Wishart turns coupling off.
    if (hyper.p0[k] != 0.0 && hyper.p0[k] <= n_contrasts + 2) hyper.p0[k] = 0.0;
  }
  if (!lesion.uniform_mode && lesion.lesion_class >= 0) {
    hyper.p0[lesion.lesion_class] = 0.0;
  }
  hyper.validate(n_contrasts);

  latents.x0 = template_fit.x_hat;
  latents.mu0 = template_fit.gauss.means;
  latents.sigma0 = template_fit.gauss.covariances;

  TimepointState prototype;
  prototype.x = template_fit.x_hat;
  prototype.gauss = template_fit.gauss;
  prototype.bias = template_fit.bias;
  if (cfg.lesion.enabled) {
    const Eigen::VectorXd offset = cfg.lesion.intensity_offset.size() == 0
                                       ? Eigen::VectorXd::Zero(n_contrasts)
                                       : cfg.lesion.intensity_offset;
    if (offset.size() != n_contrasts) {
      throw validation_error("lesion config: intensity_offset length mismatch");
    }
    const int seed_class = cfg.lesion.wm_class - 1;
    const Eigen::VectorXd seed_mean = prototype.gauss.means[seed_class] + offset;
    const Eigen::MatrixXd seed_cov = prototype.gauss.covariances[seed_class];
    if (lesion.uniform_mode) {
      prototype.gauss.means.push_back(seed_mean);
      prototype.gauss.covariances.push_back(seed_cov);
    } else {
      prototype.gauss.means[lesion.lesion_class] = seed_mean;
      prototype.gauss.covariances[lesion.lesion_class] = seed_cov;
    }
  }
  states.assign(n_timepoints, prototype);
}

void update_theta0(const std::vector<GaussianParams>& per_timepoint, const NIWHyper& hyper,
                   SubjectLatents& latents) {
  if (per_timepoint.empty()) throw validation_error("update_theta0: no time points");
  const int k_coupled = static_cast<int>(latents.mu0.size());
  const int n = static_cast<int>(latents.mu0.empty() ? 0 : latents.mu0[0].size());
  hyper.validate(n);
  const double t_count = static_cast<double>(per_timepoint.size());

  for (int k = 0; k < k_coupled; ++k) {
    if (hyper.p0[k] == 0.0) continue;
    std::vector<Eigen::MatrixXd> precisions(per_timepoint.size());
    std::vector<Eigen::VectorXd> weighted_means(per_timepoint.size());
    for (std::size_t t = 0; t < per_timepoint.size(); ++t) {
      const Eigen::MatrixXd& sigma = per_timepoint[t].covariances[k];
      const Eigen::LLT<Eigen::MatrixXd> llt(sigma);
      if (llt.info() != Eigen::Success) {
        throw numeric_error("update_theta0: covariance of class " + std::to_string(k + 1) +
                            " at time point " + std::to_string(t) + " is not positive definite");
      }
      precisions[t] = llt.solve(Eigen::MatrixXd::Identity(n, n));
      weighted_means[t] = precisions[t] * per_timepoint[t].means[k];
    }
    Eigen::MatrixXd precision_sum = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd mean_sum = Eigen::VectorXd::Zero(n);
    for (std::size_t t : canonical_order(precisions)) {
      precision_sum += precisions[t];
      mean_sum += weighted_means[t];
    }
    const Eigen::LLT<Eigen::MatrixXd> sum_llt(precision_sum);
    if (sum_llt.info() != Eigen::Success) {
      throw numeric_error("update_theta0: singular precision sum for class " +
                          std::to_string(k + 1));
    }
    latents.mu0[k] = sum_llt.solve(mean_sum);
    const double scale = hyper.p0[k] / (hyper.p0[k] - n - 2);
    const Eigen::MatrixXd sigma0_inv = (precision_sum / t_count) * scale;
    latents.sigma0[k] = sigma0_inv.llt().solve(Eigen::MatrixXd::Identity(n, n));
  }
}

void niw_map_update(const Eigen::VectorXd& s, const Eigen::MatrixXd& m2, double n, double p0,
                    const Eigen::VectorXd& mu0, const Eigen::MatrixXd& sigma0,
                    Eigen::VectorXd& mu_out, Eigen::MatrixXd& sigma_out) {
  if (!(p0 > 0.0)) throw validation_error("niw_map_update: p0 must be > 0");
  if (n == 0.0) {
    mu_out = mu0;
    sigma_out = sigma0;
    return;
  }
  mu_out = (s + p0 * mu0) / (n + p0);
  const Eigen::MatrixXd scatter =
      m2 - mu_out * s.transpose() - s * mu_out.transpose() + n * mu_out * mu_out.transpose();
  const Eigen::VectorXd diff = mu_out - mu0;
  sigma_out = (scatter + p0 * diff * diff.transpose() + p0 * sigma0) / (n + p0);
}

GaussianParams update_gaussians_niw(const AppearanceWorkspace& ws, const Eigen::MatrixXd& resp,
                                    const BiasField& bias, const SubjectLatents& latents,
                                    const NIWHyper& hyper) {
  bias.validate();
  if (resp.rows() != ws.data.rows()) {
    throw validation_error("update_gaussians_niw: responsibility row count mismatch");
  }
  const int k_total = static_cast<int>(resp.cols());
  const int k_coupled = static_cast<int>(latents.mu0.size());
  const int n_contrasts = static_cast<int>(ws.data.cols());
  const Eigen::MatrixXd residual = ws.data - ws.basis * bias.coefficients.transpose();
  const double eps = 1e-6 * mean_contrast_variance(ws);

  GaussianParams out;
  out.means.resize(k_total);
  out.covariances.resize(k_total);
  for (int k = 0; k < k_total; ++k) {
    const double n_k = resp.col(k).sum();
    const bool coupled = k < k_coupled && hyper.p0[k] > 0.0;
    if (coupled) {
      const Eigen::VectorXd s = residual.transpose() * resp.col(k);
      const Eigen::MatrixXd m2 =
          residual.transpose() * resp.col(k).asDiagonal() * residual;
      niw_map_update(s, m2, n_k, hyper.p0[k], latents.mu0[k], latents.sigma0[k], out.means[k],
                     out.covariances[k]);
    } else {
      if (!(n_k > 0.0)) {
        throw numeric_error("update_gaussians_niw: uncoupled class " + std::to_string(k + 1) +
                            " has zero total responsibility");
      }
      const Eigen::VectorXd mean = residual.transpose() * resp.col(k) / n_k;
      const Eigen::MatrixXd centered = residual.rowwise() - mean.transpose();
      out.means[k] = mean;
      out.covariances[k] =
          centered.transpose() * resp.col(k).asDiagonal() * centered / n_k +
          eps * Eigen::MatrixXd::Identity(n_contrasts, n_contrasts);
    }
  }
  return out;
}

MeshOptResult update_x0(const std::vector<PointMatrix>& x_t, const PointMatrix& x0_init,
                        const TetrahedralMesh& mesh, double kappa, double kappa0,
                        const LbfgsConfig& cfg) {
  if (x_t.empty()) throw validation_error("update_x0: no time points");
  const PointMatrix& ref = mesh.reference_positions;

  std::vector<Eigen::VectorXd> keys(x_t.size());
  for (std::size_t t = 0; t < x_t.size(); ++t) keys[t] = flatten(x_t[t]);
  const std::vector<std::size_t> order = canonical_order(keys);

  auto objective = [&](const Eigen::VectorXd& v, Eigen::VectorXd& grad) {
    const PointMatrix x0 = unflatten(v);
    double value = kappa0 * deformation_energy(x0, ref, mesh);
    PointMatrix g = kappa0 * deformation_energy_gradient(x0, ref, mesh);
    for (std::size_t t : order) {
      value += kappa * deformation_energy(x_t[t], x0, mesh);
      g += kappa * deformation_energy_ref_gradient(x_t[t], x0, mesh);
    }
    grad = flatten(g);
    return value;
  };
  auto feasible = [&](const Eigen::VectorXd& v) {
    const PointMatrix x0 = unflatten(v);
    if (!deformation_feasible(x0, ref, mesh)) return false;
    for (const PointMatrix& xt : x_t) {
      if (!deformation_feasible(xt, x0, mesh)) return false;
    }
    return true;
  };

  const LbfgsResult res = lbfgs_minimize(objective, flatten(x0_init), cfg, feasible);
  MeshOptResult out;
  out.x = unflatten(res.x);
  out.line_search_failed = res.line_search_failed && res.iterations == 0;
  return out;
}

void fit_timepoint_niw(const AppearanceWorkspace& ws, const TetrahedralMesh& mesh,
                       const VoxelGrid& grid, const SubjectLatents& latents,
                       const NIWHyper& hyper, const LesionModel& lesion, TimepointState& state,
                       const LongConfig& cfg) {
  const int threads = cfg.cross.threads;
  Eigen::MatrixXd prior = fitted_prior(state.x, mesh, grid, ws.voxels, lesion, threads);
  for (int sweep = 0; sweep < cfg.inner_sweeps; ++sweep) {
    Eigen::MatrixXd log_lik = voxel_log_likelihoods(ws, state.gauss, state.bias, threads);
    const Eigen::MatrixXd resp = responsibilities(log_lik, prior, ws.voxels, threads);
    state.gauss = update_gaussians_niw(ws, resp, state.bias, latents, hyper);
    state.bias = update_bias_field(ws, resp, state.gauss, state.bias.order, threads);

    log_lik = voxel_log_likelihoods(ws, state.gauss, state.bias, threads);
    MeshOptResult mesh_opt;
    if (lesion.uniform_mode) {
      const Eigen::VectorXd extra =
          log_lik.col(lesion.lesion_class).array() + std::log(lesion.q);
      const Eigen::MatrixXd mesh_lik = log_lik.leftCols(mesh.n_classes());
      mesh_opt = optimize_mesh(ws.voxels, mesh_lik, mesh, grid, state.x, cfg.cross.kappa,
                               latents.x0, cfg.cross.mesh_lbfgs, threads, 1.0 - lesion.q, &extra);
    } else {
      mesh_opt = optimize_mesh(ws.voxels, log_lik, mesh, grid, state.x, cfg.cross.kappa,
                               latents.x0, cfg.cross.mesh_lbfgs, threads);
    }
    state.x = mesh_opt.x;
    state.mesh_warning = state.mesh_warning || mesh_opt.line_search_failed;
    prior = fitted_prior(state.x, mesh, grid, ws.voxels, lesion, threads);
  }
}

double joint_objective(const std::vector<AppearanceWorkspace>& ws,
                       const std::vector<TimepointState>& states, const TetrahedralMesh& mesh,
                       const VoxelGrid& grid, const SubjectLatents& latents,
                       const NIWHyper& hyper, const LesionModel& lesion, double kappa,
                       double kappa0, int threads) {
  if (ws.size() != states.size()) throw validation_error("joint objective: size mismatch");
  const std::size_t t_count = states.size();
  std::vector<double> terms(t_count);
  for (std::size_t t = 0; t < t_count; ++t) {
    terms[t] = timepoint_data_term(ws[t], states[t], mesh, grid, lesion, threads) -
               kappa * deformation_energy(states[t].x, latents.x0, mesh);
    for (std::size_t k = 0; k < latents.mu0.size(); ++k) {
      if (hyper.p0[static_cast<Eigen::Index>(k)] == 0.0) continue;
      terms[t] += coupling_log_density(states[t].gauss.means[k], states[t].gauss.covariances[k],
                                       latents.mu0[k], latents.sigma0[k],
                                       hyper.p0[static_cast<Eigen::Index>(k)]);
    }
  }
  std::vector<double> sorted = terms;
  std::sort(sorted.begin(), sorted.end());
  double total = -kappa0 * deformation_energy(latents.x0, mesh.reference_positions, mesh);
  for (double v : sorted) total += v;
  return total;
}

LongFitResult fit_longitudinal(const std::vector<MultiContrastVolume>& volumes,
                               const TetrahedralMesh& mesh, const LongConfig& cfg) {
  cfg.validate();
  mesh.validate();
  if (volumes.empty()) throw validation_error("fit_longitudinal: no volumes");
  const LesionModel lesion = make_lesion_model(cfg.lesion, mesh.n_classes());
  const int threads = cfg.cross.threads;

  std::vector<MultiContrastVolume> logged;
  logged.reserve(volumes.size());
  for (const auto& v : volumes) {
    if (!(v.grid == volumes.front().grid) || v.n_contrasts != volumes.front().n_contrasts) {
      throw validation_error("fit_longitudinal: volumes disagree on grid or contrasts");
    }
    logged.push_back(ensure_log_transformed(v));
  }

  LongFitResult result;
  const MultiContrastVolume tmpl = build_median_template(logged);
  result.template_fit = fit_cross(tmpl, mesh, cfg.cross);
  result.template_seg = segment(tmpl, mesh, result.template_fit.x_hat, result.template_fit.gauss,
                                result.template_fit.bias, threads);

  std::vector<TimepointState> states;
  init_longitudinal(result.template_fit, result.template_seg, logged.size(), cfg,
                    result.latents, states, result.hyper);

  std::vector<AppearanceWorkspace> ws;
  ws.reserve(logged.size());
  for (const auto& v : logged) ws.push_back(AppearanceWorkspace::build(v, cfg.cross.bias_order));

  auto trace_objective = [&]() {
    result.objective_trace.push_back(joint_objective(ws, states, mesh, tmpl.grid, result.latents,
                                                     result.hyper, lesion, cfg.cross.kappa,
                                                     cfg.kappa0(), threads));
  };
  trace_objective();

  for (int outer = 0; outer < cfg.outer_iterations; ++outer) {
    for (std::size_t t = 0; t < states.size(); ++t) {
      fit_timepoint_niw(ws[t], mesh, tmpl.grid, result.latents, result.hyper, lesion, states[t],
                        cfg);
    }
    trace_objective();

    std::vector<GaussianParams> per_t;
    per_t.reserve(states.size());
    for (const auto& s : states) per_t.push_back(s.gauss);
    update_theta0(per_t, result.hyper, result.latents);
    trace_objective();

    std::vector<PointMatrix> x_t;
    x_t.reserve(states.size());
    for (const auto& s : states) x_t.push_back(s.x);
    const MeshOptResult x0_opt = update_x0(x_t, result.latents.x0, mesh, cfg.cross.kappa,
                                           cfg.kappa0(), cfg.cross.mesh_lbfgs);
    result.latents.x0 = x0_opt.x;
    result.mesh_warning = result.mesh_warning || x0_opt.line_search_failed;
    trace_objective();
  }

  result.timepoints.resize(states.size());
  for (std::size_t t = 0; t < states.size(); ++t) {
    TimepointResult& tp = result.timepoints[t];
    tp.state = states[t];
    result.mesh_warning = result.mesh_warning || states[t].mesh_warning;

    const Eigen::MatrixXd prior =
        fitted_prior(states[t].x, mesh, tmpl.grid, ws[t].voxels, lesion, threads);
    const Eigen::MatrixXd log_lik =
        voxel_log_likelihoods(ws[t], states[t].gauss, states[t].bias, threads);
    const Eigen::MatrixXd resp = responsibilities(log_lik, prior, ws[t].voxels, threads);

    LabelVolume& seg = tp.seg;
    seg.grid = tmpl.grid;
    seg.n_classes = static_cast<int>(resp.cols());
    seg.labels.assign(tmpl.grid.num_voxels(), 0);
    seg.posteriors.assign(tmpl.grid.num_voxels() * static_cast<std::size_t>(seg.n_classes), 0.0);
    if (cfg.lesion.enabled) tp.lesion_mask.assign(tmpl.grid.num_voxels(), 0);
    for (std::size_t row = 0; row < ws[t].voxels.size(); ++row) {
      const std::size_t voxel = ws[t].voxels[row];
      Eigen::Index best = 0;
      resp.row(static_cast<Eigen::Index>(row)).maxCoeff(&best);
      seg.labels[voxel] = static_cast<std::int32_t>(best) + 1;
      for (int k = 0; k < seg.n_classes; ++k) {
        seg.posteriors[voxel * static_cast<std::size_t>(seg.n_classes) +
                       static_cast<std::size_t>(k)] = resp(static_cast<Eigen::Index>(row), k);
      }
      if (cfg.lesion.enabled &&
          resp(static_cast<Eigen::Index>(row), lesion.lesion_class) > cfg.lesion.threshold) {
        tp.lesion_mask[voxel] = 1;
      }
    }
  }
  return result;
}

std::vector<std::vector<std::uint8_t>> segment_lesions(const LongFitResult& result,
                                                       const LesionConfig& cfg) {
  if (!cfg.enabled) throw state_error("segment_lesions: lesion class was not enabled");
  std::vector<std::vector<std::uint8_t>> masks;
  masks.reserve(result.timepoints.size());
  for (const auto& tp : result.timepoints) {
    const LabelVolume& seg = tp.seg;
    if (!seg.has_posteriors()) throw state_error("segment_lesions: posteriors missing");
    const int lesion_class =
        cfg.atlas_class > 0 ? cfg.atlas_class - 1 : seg.n_classes - 1;
    std::vector<std::uint8_t> mask(seg.labels.size(), 0);
    for (std::size_t i = 0; i < seg.labels.size(); ++i) {
      if (seg.labels[i] == 0) continue;
      if (seg.posterior(i, lesion_class) > cfg.threshold) mask[i] = 1;
    }
    masks.push_back(std::move(mask));
  }
  return masks;
}

}  // namespace longseg
