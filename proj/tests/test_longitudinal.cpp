#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "helpers.hpp"
#include "longseg/longitudinal.hpp"
#include "longseg/metrics.hpp"
#include "longseg/phantom.hpp"
#include "longseg/rng.hpp"

using namespace longseg;

namespace {

MultiContrastVolume flat_volume(int dim, double value) {
  MultiContrastVolume vol;
  vol.grid = testutil::cube_grid(dim);
  vol.n_contrasts = 1;
  vol.data.assign(vol.grid.num_voxels(), value);
  vol.mask.assign(vol.grid.num_voxels(), 1);
  vol.log_transformed = true;
  return vol;
}

Eigen::MatrixXd random_spd(int n, CounterRng& rng) {
  Eigen::MatrixXd a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a(i, j) = rng.next_gaussian();
  return a * a.transpose() + 0.3 * Eigen::MatrixXd::Identity(n, n);
}

LongConfig light_long_config(int outer = 2) {
  LongConfig cfg;
  cfg.cross.max_outer_sweeps = 5;
  cfg.cross.mesh_lbfgs.max_iters = 25;
  cfg.cross.bias_order = {1, 1, 1};
  cfg.cross.kappa = 5.0;
  cfg.outer_iterations = outer;
  cfg.inner_sweeps = 2;
  cfg.kappa0_ratio = 14.0;
  cfg.p0_ratio = 0.5;
  return cfg;
}

struct LongScene {
  std::vector<MultiContrastVolume> volumes;
  std::vector<LabelVolume> truth;
  TetrahedralMesh atlas;
  PhantomSpec spec;
};

LongScene nested_long_scene(int dim, int k_classes, std::uint64_t seed,
                            std::vector<double> offsets, double rate = 0.0) {
  LongScene s;
  s.spec = testutil::nested_spec(dim, k_classes, 1, seed);
  s.spec.time_offsets = std::move(offsets);
  for (auto& st : s.spec.structures) st.rate = rate;
  PhantomOutput out = generate(s.spec);
  for (auto& vol : out.volumes) s.volumes.push_back(ensure_log_transformed(vol));
  s.truth = out.labels;
  s.atlas = build_atlas_from_labels(out.labels[0], 4);
  return s;
}

}  // namespace

TEST_SUITE("longitudinal") {

TEST_CASE("median template takes the voxel median and intersects masks") {
  MultiContrastVolume a = flat_volume(3, 1.0);
  MultiContrastVolume b = flat_volume(3, 5.0);
  MultiContrastVolume c = flat_volume(3, 2.0);
  a.data[4] = 10.0;
  b.mask[7] = 0;

  const MultiContrastVolume med3 = build_median_template({a, b, c});
  CHECK(med3.data[0] == 2.0);
  CHECK(med3.data[4] == 5.0);
  CHECK(med3.mask[7] == 0);
  CHECK(med3.mask[0] == 1);

  const MultiContrastVolume med2 = build_median_template({a, b});
  CHECK(med2.data[0] == 3.0);
  CHECK(med2.data[4] == 7.5);

  const MultiContrastVolume med1 = build_median_template({a});
  CHECK(med1.data == a.data);

  MultiContrastVolume raw = flat_volume(3, 1.0);
  raw.log_transformed = false;
  CHECK_THROWS_AS(build_median_template({a, raw}), validation_error);
  MultiContrastVolume small = flat_volume(2, 1.0);
  CHECK_THROWS_AS(build_median_template({a, small}), validation_error);
  CHECK_THROWS_AS(build_median_template({}), validation_error);
}

TEST_CASE("prototype update matches the closed form solved independently") {
  CounterRng rng(101);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + static_cast<int>(rng.next_below(3));
    const int t_count = 1 + static_cast<int>(rng.next_below(5));
    const double p0 = n + 2 + 0.5 + 4.0 * rng.next_double();

    std::vector<GaussianParams> per_t(static_cast<std::size_t>(t_count));
    for (auto& g : per_t) {
      Eigen::VectorXd mu(n);
      for (int i = 0; i < n; ++i) mu[i] = 3.0 + rng.next_gaussian();
      g.means = {mu};
      g.covariances = {random_spd(n, rng)};
    }

    NIWHyper hyper;
    hyper.p0 = Eigen::VectorXd::Constant(1, p0);
    hyper.n_k = Eigen::VectorXd::Constant(1, p0 * 2.0);
    SubjectLatents latents;
    latents.mu0 = {Eigen::VectorXd::Zero(n)};
    latents.sigma0 = {Eigen::MatrixXd::Identity(n, n)};

    update_theta0(per_t, hyper, latents);

    Eigen::MatrixXd precision_sum = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd weighted = Eigen::VectorXd::Zero(n);
    for (const auto& g : per_t) {
      const Eigen::MatrixXd inv = g.covariances[0].inverse();
      precision_sum += inv;
      weighted += inv * g.means[0];
    }
    const Eigen::VectorXd mu0 = precision_sum.inverse() * weighted;
    const Eigen::MatrixXd sigma0 =
        ((precision_sum / t_count) * (p0 / (p0 - n - 2))).inverse();

    CHECK((latents.mu0[0] - mu0).norm() <= 1e-10 * std::max(1.0, mu0.norm()));
    CHECK((latents.sigma0[0] - sigma0).norm() <= 1e-10 * std::max(1.0, sigma0.norm()));
  }
}

TEST_CASE("prototype update skips classes with coupling off") {
  CounterRng rng(103);
  std::vector<GaussianParams> per_t(2);
  for (auto& g : per_t) {
    g.means = {Eigen::VectorXd::Constant(1, rng.next_gaussian()),
               Eigen::VectorXd::Constant(1, rng.next_gaussian())};
    g.covariances = {Eigen::MatrixXd::Constant(1, 1, 1.0 + rng.next_double()),
                     Eigen::MatrixXd::Constant(1, 1, 1.0 + rng.next_double())};
  }
  NIWHyper hyper;
  hyper.p0 = Eigen::VectorXd::Zero(2);
  hyper.p0[1] = 4.0;
  hyper.n_k = Eigen::VectorXd::Constant(2, 8.0);
  SubjectLatents latents;
  latents.mu0 = {Eigen::VectorXd::Constant(1, 7.25), Eigen::VectorXd::Constant(1, 1.0)};
  latents.sigma0 = {Eigen::MatrixXd::Constant(1, 1, 3.5), Eigen::MatrixXd::Identity(1, 1)};

  update_theta0(per_t, hyper, latents);
  CHECK(latents.mu0[0][0] == 7.25);
  CHECK(latents.sigma0[0](0, 0) == 3.5);
  CHECK(latents.mu0[1][0] != 1.0);
}

TEST_CASE("posterior mode update matches the scalar closed form") {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
  niw_map_update(Eigen::VectorXd::Constant(1, 6.0), Eigen::MatrixXd::Constant(1, 1, 18.0), 2.0,
                 2.0, Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1), mu, sigma);
  CHECK(mu[0] == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(sigma(0, 0) == doctest::Approx(2.75).epsilon(1e-12));
}

TEST_CASE("posterior mode update with no data returns the prototypes bitwise") {
  const Eigen::VectorXd mu0 = Eigen::VectorXd::Constant(2, 0.1 + 0.2);
  Eigen::MatrixXd sigma0(2, 2);
  sigma0 << 1.7, 0.3, 0.3, 2.2;
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
  niw_map_update(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Zero(2, 2), 0.0, 5.0, mu0, sigma0,
                 mu, sigma);
  CHECK((mu.array() == mu0.array()).all());
  CHECK((sigma.array() == sigma0.array()).all());
  CHECK_THROWS_AS(niw_map_update(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Zero(2, 2), 0.0, 0.0,
                                 mu0, sigma0, mu, sigma),
                  validation_error);
}

TEST_CASE("m step couples only the flagged classes") {
  MultiContrastVolume vol = flat_volume(4, 0.0);
  CounterRng rng(107);
  for (auto& d : vol.data) d = 3.0 + rng.next_gaussian();
  const AppearanceWorkspace ws = AppearanceWorkspace::build(vol, {0, 0, 0});
  const Eigen::Index rows = ws.data.rows();

  Eigen::MatrixXd resp(rows, 3);
  for (Eigen::Index i = 0; i < rows; ++i) {
    Eigen::Vector3d w;
    for (int k = 0; k < 3; ++k) w[k] = 0.1 + rng.next_double();
    resp.row(i) = w.transpose() / w.sum();
  }
  BiasField bias;
  bias.order = {0, 0, 0};
  bias.coefficients = Eigen::MatrixXd::Zero(1, 1);

  SubjectLatents latents;
  latents.mu0 = {Eigen::VectorXd::Constant(1, 2.0), Eigen::VectorXd::Constant(1, 4.0)};
  latents.sigma0 = {Eigen::MatrixXd::Constant(1, 1, 0.5), Eigen::MatrixXd::Constant(1, 1, 0.5)};
  NIWHyper hyper;
  hyper.p0 = Eigen::VectorXd::Zero(2);
  hyper.p0[0] = 9.0;
  hyper.n_k = Eigen::VectorXd::Constant(2, 18.0);

  const GaussianParams out = update_gaussians_niw(ws, resp, bias, latents, hyper);
  const GaussianParams flat = update_gaussians_ml(ws, resp, bias);

  // Coupled class 1 against a direct evaluation of the closed form.
  const double n0 = resp.col(0).sum();
  const Eigen::VectorXd s = ws.data.transpose() * resp.col(0);
  const Eigen::MatrixXd m2 = ws.data.transpose() * resp.col(0).asDiagonal() * ws.data;
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
  niw_map_update(s, m2, n0, 9.0, latents.mu0[0], latents.sigma0[0], mu, sigma);
  CHECK(out.means[0][0] == doctest::Approx(mu[0]).epsilon(1e-12));
  CHECK(out.covariances[0](0, 0) == doctest::Approx(sigma(0, 0)).epsilon(1e-12));
  CHECK(out.means[0][0] != doctest::Approx(flat.means[0][0]).epsilon(1e-6));

  // Class 2 has coupling off and class 3 sits beyond the coupled range; both
  // take the floored flat estimate.
  for (int k : {1, 2}) {
    CHECK(out.means[static_cast<std::size_t>(k)][0] ==
          doctest::Approx(flat.means[static_cast<std::size_t>(k)][0]).epsilon(1e-12));
    CHECK(out.covariances[static_cast<std::size_t>(k)](0, 0) ==
          doctest::Approx(flat.covariances[static_cast<std::size_t>(k)](0, 0)).epsilon(1e-12));
  }
}

TEST_CASE("subject mesh update is stationary at the shared reference") {
  const VoxelGrid grid = testutil::cube_grid(6);
  const TetrahedralMesh mesh = build_grid_atlas(grid, 2, Eigen::VectorXd::Constant(2, 0.5));
  const PointMatrix& ref = mesh.reference_positions;
  LbfgsConfig cfg;
  const MeshOptResult still = update_x0({ref, ref, ref}, ref, mesh, 10.0, 100.0, cfg);
  CHECK((still.x - ref).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("subject mesh update never increases the coupling energy") {
  const VoxelGrid grid = testutil::cube_grid(6);
  const TetrahedralMesh mesh = build_grid_atlas(grid, 2, Eigen::VectorXd::Constant(2, 0.5));
  const PointMatrix& ref = mesh.reference_positions;
  CounterRng rng(109);
  std::vector<PointMatrix> x_t(3, ref);
  for (auto& x : x_t) {
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (int d = 0; d < 3; ++d) x(i, d) += 0.25 * (2.0 * rng.next_double() - 1.0);
    REQUIRE(deformation_feasible(x, ref, mesh));
  }
  const double kappa = 10.0;
  const double kappa0 = 40.0;
  auto energy = [&](const PointMatrix& x0) {
    double total = kappa0 * deformation_energy(x0, ref, mesh);
    for (const auto& x : x_t) total += kappa * deformation_energy(x, x0, mesh);
    return total;
  };
  LbfgsConfig cfg;
  cfg.max_iters = 60;
  const MeshOptResult opt = update_x0(x_t, ref, mesh, kappa, kappa0, cfg);
  CHECK(energy(opt.x) <= energy(ref) + 1e-10 * std::abs(energy(ref)));
  CHECK(energy(opt.x) < energy(ref));
}

TEST_CASE("lesion model resolution") {
  LesionConfig cfg;
  cfg.enabled = true;
  cfg.atlas_class = 2;
  LesionModel m = make_lesion_model(cfg, 3);
  CHECK(!m.uniform_mode);
  CHECK(m.lesion_class == 1);

  cfg.atlas_class = 0;
  cfg.uniform_prior = 0.02;
  m = make_lesion_model(cfg, 3);
  CHECK(m.uniform_mode);
  CHECK(m.lesion_class == 3);
  CHECK(m.q == 0.02);

  cfg.enabled = false;
  m = make_lesion_model(cfg, 3);
  CHECK(m.lesion_class == -1);
}

TEST_CASE("config validation rejects out-of-range settings") {
  LesionConfig lesion;
  lesion.enabled = true;
  lesion.threshold = 0.0;
  CHECK_THROWS_AS(lesion.validate(3), validation_error);
  lesion = LesionConfig{};
  lesion.enabled = true;
  lesion.atlas_class = 4;
  CHECK_THROWS_AS(lesion.validate(3), validation_error);
  lesion = LesionConfig{};
  lesion.enabled = true;
  lesion.uniform_prior = 1.0;
  CHECK_THROWS_AS(lesion.validate(3), validation_error);
  lesion = LesionConfig{};
  lesion.enabled = true;
  lesion.wm_class = 0;
  CHECK_THROWS_AS(lesion.validate(3), validation_error);

  NIWHyper hyper;
  hyper.p0 = Eigen::VectorXd::Constant(1, 2.5);
  hyper.n_k = Eigen::VectorXd::Constant(1, 5.0);
  CHECK_THROWS_AS(hyper.validate(1), validation_error);
  hyper.p0[0] = 0.0;
  CHECK_NOTHROW(hyper.validate(1));
  hyper.p0[0] = 3.5;
  CHECK_NOTHROW(hyper.validate(1));

  LongConfig cfg;
  cfg.outer_iterations = 0;
  CHECK_THROWS_AS(cfg.validate(), validation_error);
  cfg = LongConfig{};
  cfg.kappa0_ratio = 0.0;
  CHECK_THROWS_AS(cfg.validate(), validation_error);
  cfg = LongConfig{};
  cfg.p0_ratio = -0.1;
  CHECK_THROWS_AS(cfg.validate(), validation_error);
}

TEST_CASE("initialization clamps weak coupling strengths to zero") {
  LongScene s = nested_long_scene(12, 3, 111, {0.0});
  FitConfig cross;
  cross.max_outer_sweeps = 3;
  cross.mesh_lbfgs.max_iters = 15;
  cross.bias_order = {0, 0, 0};
  const CrossFitResult tmpl = fit_cross(s.volumes[0], s.atlas, cross);
  const LabelVolume seg = segment(s.volumes[0], s.atlas, tmpl.x_hat, tmpl.gauss, tmpl.bias);

  LongConfig cfg = light_long_config();
  cfg.cross = cross;
  cfg.p0_ratio = 1e-5;  // p0 lands in (0, N + 2] for every class
  SubjectLatents latents;
  std::vector<TimepointState> states;
  NIWHyper hyper;
  init_longitudinal(tmpl, seg, 2, cfg, latents, states, hyper);
  CHECK(hyper.p0.maxCoeff() == 0.0);
  CHECK(states.size() == 2);
  CHECK((latents.x0 - tmpl.x_hat).cwiseAbs().maxCoeff() == 0.0);

  cfg.p0_ratio = 0.5;
  init_longitudinal(tmpl, seg, 2, cfg, latents, states, hyper);
  CHECK(hyper.p0.minCoeff() > 3.0);
  CHECK((hyper.p0 - 0.5 * hyper.n_k).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("identical inputs give bitwise identical time points") {
  LongScene s = nested_long_scene(12, 3, 113, {0.0});
  const std::vector<MultiContrastVolume> volumes{s.volumes[0], s.volumes[0]};
  LongConfig cfg = light_long_config(2);
  cfg.cross.max_outer_sweeps = 3;
  cfg.cross.mesh_lbfgs.max_iters = 15;
  const LongFitResult fit = fit_longitudinal(volumes, s.atlas, cfg);
  REQUIRE(fit.timepoints.size() == 2);
  const TimepointResult& t0 = fit.timepoints[0];
  const TimepointResult& t1 = fit.timepoints[1];
  CHECK((t0.state.x - t1.state.x).cwiseAbs().maxCoeff() == 0.0);
  CHECK(t0.seg.labels == t1.seg.labels);
  CHECK(t0.seg.posteriors == t1.seg.posteriors);
  for (int k = 0; k < 3; ++k) {
    CHECK((t0.state.gauss.means[static_cast<std::size_t>(k)] -
           t1.state.gauss.means[static_cast<std::size_t>(k)])
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }
}

TEST_CASE("permuting the input order permutes the outputs bitwise") {
  LongScene s = nested_long_scene(12, 3, 127, {0.0, 1.0, 2.0}, -3.0);
  LongConfig cfg = light_long_config(2);
  cfg.cross.max_outer_sweeps = 3;
  cfg.cross.mesh_lbfgs.max_iters = 15;

  const LongFitResult ordered = fit_longitudinal(s.volumes, s.atlas, cfg);
  const std::vector<MultiContrastVolume> shuffled{s.volumes[2], s.volumes[0], s.volumes[1]};
  const LongFitResult permuted = fit_longitudinal(shuffled, s.atlas, cfg);

  const std::array<std::size_t, 3> source{2, 0, 1};
  for (std::size_t t = 0; t < 3; ++t) {
    const TimepointResult& a = ordered.timepoints[source[t]];
    const TimepointResult& b = permuted.timepoints[t];
    CHECK(a.seg.labels == b.seg.labels);
    CHECK((a.state.x - b.state.x).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.state.gauss.means[1] - b.state.gauss.means[1]).cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK((ordered.latents.x0 - permuted.latents.x0).cwiseAbs().maxCoeff() == 0.0);
  CHECK((ordered.latents.mu0[1] - permuted.latents.mu0[1]).cwiseAbs().maxCoeff() == 0.0);
  CHECK(ordered.objective_trace == permuted.objective_trace);
}

TEST_CASE("joint objective is invariant to the time point order") {
  LongScene s = nested_long_scene(10, 3, 131, {0.0, 1.0, 2.0}, -3.0);
  LongConfig cfg = light_long_config(1);
  cfg.cross.max_outer_sweeps = 3;
  cfg.cross.mesh_lbfgs.max_iters = 15;
  const LongFitResult fit = fit_longitudinal(s.volumes, s.atlas, cfg);

  std::vector<AppearanceWorkspace> ws;
  std::vector<TimepointState> states;
  for (std::size_t t = 0; t < 3; ++t) {
    ws.push_back(AppearanceWorkspace::build(s.volumes[t], cfg.cross.bias_order));
    states.push_back(fit.timepoints[t].state);
  }
  const LesionModel lesion = make_lesion_model(cfg.lesion, 3);
  const double base = joint_objective(ws, states, s.atlas, s.volumes[0].grid, fit.latents,
                                      fit.hyper, lesion, cfg.cross.kappa, cfg.kappa0());

  const std::vector<AppearanceWorkspace> ws_perm{ws[2], ws[0], ws[1]};
  const std::vector<TimepointState> states_perm{states[2], states[0], states[1]};
  const double permuted = joint_objective(ws_perm, states_perm, s.atlas, s.volumes[0].grid,
                                          fit.latents, fit.hyper, lesion, cfg.cross.kappa,
                                          cfg.kappa0());
  CHECK(base == permuted);
}

TEST_CASE("objective trace never decreases across coordinate blocks") {
  LongScene s = nested_long_scene(12, 3, 137, {0.0, 1.0}, -2.0);
  LongConfig cfg = light_long_config(3);
  const LongFitResult fit = fit_longitudinal(s.volumes, s.atlas, cfg);
  REQUIRE(fit.objective_trace.size() >= 2);
  for (std::size_t i = 1; i < fit.objective_trace.size(); ++i) {
    CHECK(fit.objective_trace[i] >=
          fit.objective_trace[i - 1] - 1e-8 * std::abs(fit.objective_trace[i - 1]));
  }
}

TEST_CASE("degenerate settings reproduce independent cross-sectional fits") {
  LongScene s = nested_long_scene(20, 3, 139, {0.0, 1.0}, -2.0);
  LongConfig cfg = light_long_config(2);
  cfg.cross.max_outer_sweeps = 6;
  cfg.p0_ratio = 0.0;
  cfg.kappa0_ratio = 1e6;

  const LongFitResult fit = fit_longitudinal(s.volumes, s.atlas, cfg);
  CHECK(fit.hyper.p0.maxCoeff() == 0.0);
  for (std::size_t t = 0; t < 2; ++t) {
    const CrossFitResult cross = fit_cross(s.volumes[t], s.atlas, cfg.cross);
    const LabelVolume seg =
        segment(s.volumes[t], s.atlas, cross.x_hat, cross.gauss, cross.bias);
    CHECK(testutil::label_agreement(fit.timepoints[t].seg, seg) > 0.99);
  }
}

TEST_CASE("uniform lesion mode appends a class and finds planted blobs") {
  LongScene s = nested_long_scene(20, 3, 149, {0.0, 1.0});
  s.spec.lesions.count = 2;
  s.spec.lesions.radius_min = 2.0;
  s.spec.lesions.radius_max = 2.8;
  s.spec.lesions.host_label = 3;
  s.spec.lesions.intensity_offset = Eigen::VectorXd::Constant(1, 0.9);
  PhantomOutput out = generate(s.spec);
  std::vector<MultiContrastVolume> volumes;
  for (auto& vol : out.volumes) volumes.push_back(ensure_log_transformed(vol));

  LongConfig cfg = light_long_config(2);
  cfg.lesion.enabled = true;
  cfg.lesion.atlas_class = 0;
  cfg.lesion.uniform_prior = 0.03;
  cfg.lesion.threshold = 0.5;
  cfg.lesion.wm_class = 3;
  cfg.lesion.intensity_offset = Eigen::VectorXd::Constant(1, 0.9);

  const LongFitResult fit = fit_longitudinal(volumes, s.atlas, cfg);
  CHECK(fit.hyper.p0.size() == 3);
  CHECK(static_cast<int>(fit.latents.mu0.size()) == 3);
  for (std::size_t t = 0; t < 2; ++t) {
    const TimepointResult& tp = fit.timepoints[t];
    CHECK(tp.state.gauss.n_classes() == 4);
    CHECK(tp.seg.n_classes == 4);
    REQUIRE(tp.lesion_mask.size() == out.lesion_masks[t].size());
    CHECK(dice(tp.lesion_mask, out.lesion_masks[t]) > 0.5);
  }
}

TEST_CASE("atlas class lesion mode keeps the class count and decouples the class") {
  LongScene s = nested_long_scene(12, 3, 151, {0.0});
  LongConfig cfg = light_long_config(1);
  cfg.lesion.enabled = true;
  cfg.lesion.atlas_class = 3;
  cfg.lesion.wm_class = 2;
  const LongFitResult fit = fit_longitudinal({s.volumes[0]}, s.atlas, cfg);
  CHECK(fit.hyper.p0[2] == 0.0);
  CHECK(fit.timepoints[0].state.gauss.n_classes() == 3);
  CHECK(fit.timepoints[0].seg.n_classes == 3);
  CHECK(!fit.timepoints[0].lesion_mask.empty());
}

}  // TEST_SUITE
