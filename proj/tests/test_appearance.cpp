#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

#include "helpers.hpp"
#include "longseg/appearance.hpp"
#include "longseg/rng.hpp"

using namespace longseg;

namespace {

MultiContrastVolume log_volume(int dim, int n_contrasts, std::uint64_t seed) {
  MultiContrastVolume vol;
  vol.grid = testutil::cube_grid(dim);
  vol.n_contrasts = n_contrasts;
  const std::size_t nv = vol.grid.num_voxels();
  vol.data.resize(nv * static_cast<std::size_t>(n_contrasts));
  vol.mask.assign(nv, 1);
  vol.log_transformed = true;
  CounterRng rng(seed);
  for (auto& v : vol.data) v = 4.0 + 0.5 * rng.next_gaussian();
  return vol;
}

double log_normal_1d(double x, double mu, double var) {
  return -0.5 * std::log(2.0 * std::numbers::pi * var) - (x - mu) * (x - mu) / (2.0 * var);
}

}  // namespace

TEST_SUITE("appearance") {

TEST_CASE("basis functions are separable cosines with orthogonal columns") {
  const VoxelGrid grid = testutil::cube_grid(6);
  const std::array<int, 3> order{2, 1, 0};
  const Eigen::MatrixXd basis = eval_basis(grid, order);
  REQUIRE(basis.cols() == 3 * 2 * 1);
  REQUIRE(basis.rows() == 216);

  // Column 0 is the constant; column 1 is the first x cosine.
  CHECK((basis.col(0).array() - 1.0).abs().maxCoeff() == 0.0);
  const std::size_t voxel = grid.index(4, 2, 3);
  const double fx = std::cos(std::numbers::pi * 1 * (4 + 0.5) / 6.0);
  CHECK(basis(static_cast<Eigen::Index>(voxel), 1) == doctest::Approx(fx).epsilon(1e-14));
  const double fx2 = std::cos(std::numbers::pi * 2 * (4 + 0.5) / 6.0);
  const double fy1 = std::cos(std::numbers::pi * 1 * (2 + 0.5) / 6.0);
  CHECK(basis(static_cast<Eigen::Index>(voxel), 5) ==
        doctest::Approx(fx2 * fy1).epsilon(1e-14));

  const Eigen::MatrixXd gram = basis.transpose() * basis;
  for (Eigen::Index i = 0; i < gram.rows(); ++i)
    for (Eigen::Index j = 0; j < gram.cols(); ++j) {
      if (i != j) CHECK(std::abs(gram(i, j)) < 1e-9 * gram(i, i));
    }
}

TEST_CASE("basis on a voxel subset matches the full evaluation") {
  const VoxelGrid grid = testutil::cube_grid(5);
  const std::array<int, 3> order{1, 1, 1};
  const Eigen::MatrixXd full = eval_basis(grid, order);
  const std::vector<std::size_t> subset{0, 7, 31, 99};
  const Eigen::MatrixXd part = eval_basis_subset(grid, order, subset);
  for (std::size_t r = 0; r < subset.size(); ++r) {
    CHECK((part.row(static_cast<Eigen::Index>(r)) -
           full.row(static_cast<Eigen::Index>(subset[r])))
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }
}

TEST_CASE("workspace requires log-transformed input and honors the mask") {
  MultiContrastVolume raw = log_volume(4, 1, 3);
  raw.log_transformed = false;
  CHECK_THROWS_AS(AppearanceWorkspace::build(raw, {0, 0, 0}), state_error);
  raw.log_transformed = true;
  raw.mask[10] = 0;
  const AppearanceWorkspace ws = AppearanceWorkspace::build(raw, {1, 0, 0});
  CHECK(ws.n_voxels() == raw.grid.num_voxels() - 1);
  CHECK(ws.data.rows() == static_cast<Eigen::Index>(ws.n_voxels()));
  CHECK(ws.basis.cols() == 2);
}

TEST_CASE("log likelihoods match the scalar normal density") {
  MultiContrastVolume vol = log_volume(3, 1, 5);
  const AppearanceWorkspace ws = AppearanceWorkspace::build(vol, {0, 0, 0});
  GaussianParams gauss;
  gauss.means.push_back(Eigen::VectorXd::Constant(1, 4.2));
  gauss.covariances.push_back(Eigen::MatrixXd::Constant(1, 1, 0.09));
  gauss.means.push_back(Eigen::VectorXd::Constant(1, 3.1));
  gauss.covariances.push_back(Eigen::MatrixXd::Constant(1, 1, 0.25));
  BiasField bias;
  bias.order = {0, 0, 0};
  bias.coefficients = Eigen::MatrixXd::Zero(1, 1);
  const Eigen::MatrixXd ll = voxel_log_likelihoods(ws, gauss, bias);
  for (Eigen::Index i = 0; i < ll.rows(); ++i) {
    CHECK(ll(i, 0) == doctest::Approx(log_normal_1d(ws.data(i, 0), 4.2, 0.09)).epsilon(1e-12));
    CHECK(ll(i, 1) == doctest::Approx(log_normal_1d(ws.data(i, 0), 3.1, 0.25)).epsilon(1e-12));
  }
}

TEST_CASE("log likelihoods match a bivariate density with correlation and bias") {
  MultiContrastVolume vol = log_volume(3, 2, 6);
  const std::array<int, 3> order{1, 1, 0};
  const AppearanceWorkspace ws = AppearanceWorkspace::build(vol, order);
  GaussianParams gauss;
  Eigen::VectorXd mu(2);
  mu << 4.0, 4.5;
  Eigen::MatrixXd sigma(2, 2);
  sigma << 0.20, 0.06, 0.06, 0.10;
  gauss.means.push_back(mu);
  gauss.covariances.push_back(sigma);
  BiasField bias;
  bias.order = order;
  bias.coefficients = Eigen::MatrixXd::Zero(2, 4);
  bias.coefficients(0, 1) = 0.05;
  bias.coefficients(1, 3) = -0.08;

  const Eigen::MatrixXd ll = voxel_log_likelihoods(ws, gauss, bias);
  const Eigen::MatrixXd inv = sigma.inverse();
  const double logdet = std::log(sigma.determinant());
  for (Eigen::Index i = 0; i < ll.rows(); ++i) {
    const Eigen::VectorXd r = ws.data.row(i).transpose() -
                              bias.coefficients * ws.basis.row(i).transpose() - mu;
    const double expected =
        -std::log(2.0 * std::numbers::pi) - 0.5 * logdet - 0.5 * r.dot(inv * r);
    CHECK(ll(i, 0) == doctest::Approx(expected).epsilon(1e-11));
  }
}

TEST_CASE("responsibilities match direct bayes weights") {
  const int n = 60;
  const int k = 4;
  CounterRng rng(17);
  Eigen::MatrixXd ll(n, k);
  Eigen::MatrixXd prior(n, k);
  std::vector<std::size_t> voxels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    voxels[static_cast<std::size_t>(i)] = static_cast<std::size_t>(i);
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
      ll(i, j) = -20.0 * rng.next_double();
      prior(i, j) = 0.05 + rng.next_double();
      sum += prior(i, j);
    }
    prior.row(i) /= sum;
  }
  prior.col(2).setZero();
  for (int i = 0; i < n; ++i) prior.row(i) /= prior.row(i).sum();

  const Eigen::MatrixXd resp = responsibilities(ll, prior, voxels);
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd direct(k);
    for (int j = 0; j < k; ++j) direct[j] = prior(i, j) * std::exp(ll(i, j));
    direct /= direct.sum();
    CHECK((resp.row(i).transpose() - direct).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(resp(i, 2) == 0.0);
    CHECK(resp.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("a voxel with zero posterior mass is reported by index") {
  Eigen::MatrixXd ll(2, 2);
  ll << -1.0, -2.0, -std::numeric_limits<double>::infinity(),
      -std::numeric_limits<double>::infinity();
  Eigen::MatrixXd prior(2, 2);
  prior << 0.5, 0.5, 0.5, 0.5;
  const std::vector<std::size_t> voxels{40, 41};
  CHECK_THROWS_WITH_AS(responsibilities(ll, prior, voxels), doctest::Contains("41"),
                       numeric_error);
}

TEST_CASE("ml update recovers cluster moments plus the covariance floor") {
  MultiContrastVolume vol;
  vol.grid = testutil::cube_grid(4);
  vol.n_contrasts = 1;
  const std::size_t nv = vol.grid.num_voxels();
  vol.data.resize(nv);
  vol.mask.assign(nv, 1);
  vol.log_transformed = true;
  CounterRng rng(23);
  for (std::size_t i = 0; i < nv; ++i) {
    vol.data[i] = (i < nv / 2) ? 2.0 + 0.1 * rng.next_gaussian()
                               : 5.0 + 0.2 * rng.next_gaussian();
  }
  const AppearanceWorkspace ws = AppearanceWorkspace::build(vol, {0, 0, 0});
  Eigen::MatrixXd resp = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nv), 2);
  for (std::size_t i = 0; i < nv; ++i) resp(static_cast<Eigen::Index>(i), i < nv / 2 ? 0 : 1) = 1.0;
  BiasField bias;
  bias.order = {0, 0, 0};
  bias.coefficients = Eigen::MatrixXd::Zero(1, 1);

  const GaussianParams gauss = update_gaussians_ml(ws, resp, bias);
  for (int k = 0; k < 2; ++k) {
    double sum = 0.0;
    double count = 0.0;
    for (std::size_t i = 0; i < nv; ++i) {
      if (resp(static_cast<Eigen::Index>(i), k) > 0.0) {
        sum += vol.data[i];
        count += 1.0;
      }
    }
    const double mean = sum / count;
    double scatter = 0.0;
    for (std::size_t i = 0; i < nv; ++i) {
      if (resp(static_cast<Eigen::Index>(i), k) > 0.0) {
        scatter += (vol.data[i] - mean) * (vol.data[i] - mean);
      }
    }
    const double eps = 1e-6 * mean_contrast_variance(ws);
    CHECK(gauss.means[static_cast<std::size_t>(k)][0] == doctest::Approx(mean).epsilon(1e-12));
    CHECK(gauss.covariances[static_cast<std::size_t>(k)](0, 0) ==
          doctest::Approx(scatter / count + eps).epsilon(1e-10));
  }
}

TEST_CASE("bias solve recovers planted coefficients exactly without noise") {
  const VoxelGrid grid = testutil::cube_grid(6);
  const std::array<int, 3> order{2, 2, 2};
  MultiContrastVolume vol;
  vol.grid = grid;
  vol.n_contrasts = 2;
  const std::size_t nv = grid.num_voxels();
  vol.data.resize(nv * 2);
  vol.mask.assign(nv, 1);
  vol.log_transformed = true;

  Eigen::MatrixXd planted = Eigen::MatrixXd::Zero(2, 27);
  planted(0, 1) = 0.20;
  planted(0, 4) = -0.10;
  planted(1, 2) = 0.15;
  planted(1, 9) = 0.05;
  const Eigen::MatrixXd basis = eval_basis(grid, order);
  Eigen::VectorXd mu(2);
  mu << 4.0, 5.0;
  for (std::size_t i = 0; i < nv; ++i) {
    const Eigen::VectorXd value =
        mu + planted * basis.row(static_cast<Eigen::Index>(i)).transpose();
    vol.data[i] = value[0];
    vol.data[nv + i] = value[1];
  }
  const AppearanceWorkspace ws = AppearanceWorkspace::build(vol, order);
  const Eigen::MatrixXd resp = Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(nv), 1);
  GaussianParams gauss;
  gauss.means.push_back(mu);
  Eigen::MatrixXd sigma(2, 2);
  sigma << 0.3, 0.05, 0.05, 0.2;
  gauss.covariances.push_back(sigma);

  const BiasField fitted = update_bias_field(ws, resp, gauss, order);
  CHECK(!fitted.regularized);
  CHECK((fitted.coefficients - planted).cwiseAbs().maxCoeff() < 1e-9);

  // Shifting the data and the means by one constant leaves the solve unchanged.
  MultiContrastVolume shifted = vol;
  for (std::size_t i = 0; i < nv; ++i) {
    shifted.data[i] += 0.7;
    shifted.data[nv + i] += 0.7;
  }
  const AppearanceWorkspace ws2 = AppearanceWorkspace::build(shifted, order);
  GaussianParams gauss2 = gauss;
  gauss2.means[0] = mu.array() + 0.7;
  const BiasField fitted2 = update_bias_field(ws2, resp, gauss2, order);
  CHECK((fitted2.coefficients - fitted.coefficients).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("zero planted bias yields zero coefficients") {
  MultiContrastVolume vol = log_volume(5, 1, 31);
  const std::array<int, 3> order{1, 1, 1};
  for (std::size_t i = 0; i < vol.grid.num_voxels(); ++i) vol.data[i] = 4.0;
  const AppearanceWorkspace ws = AppearanceWorkspace::build(vol, order);
  const Eigen::MatrixXd resp =
      Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(ws.n_voxels()), 1);
  GaussianParams gauss;
  gauss.means.push_back(Eigen::VectorXd::Constant(1, 4.0));
  gauss.covariances.push_back(Eigen::MatrixXd::Constant(1, 1, 0.04));
  const BiasField fitted = update_bias_field(ws, resp, gauss, order);
  CHECK(fitted.coefficients.cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("one em sweep does not decrease the mixture objective") {
  MultiContrastVolume vol = log_volume(6, 1, 41);
  const std::size_t nv = vol.grid.num_voxels();
  CounterRng rng(42);
  for (std::size_t i = 0; i < nv; ++i) {
    vol.data[i] = (rng.next_double() < 0.4) ? 3.0 + 0.2 * rng.next_gaussian()
                                            : 4.5 + 0.3 * rng.next_gaussian();
  }
  const std::array<int, 3> order{1, 1, 1};
  const AppearanceWorkspace ws = AppearanceWorkspace::build(vol, order);
  const Eigen::MatrixXd prior =
      Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(nv), 2, 0.5);

  GaussianParams gauss;
  gauss.means.push_back(Eigen::VectorXd::Constant(1, 3.2));
  gauss.means.push_back(Eigen::VectorXd::Constant(1, 4.2));
  gauss.covariances.push_back(Eigen::MatrixXd::Constant(1, 1, 0.3));
  gauss.covariances.push_back(Eigen::MatrixXd::Constant(1, 1, 0.3));
  BiasField bias;
  bias.order = order;
  bias.coefficients = Eigen::MatrixXd::Zero(1, bias.n_basis());

  auto objective = [&](const GaussianParams& g, const BiasField& b) {
    const Eigen::MatrixXd ll = voxel_log_likelihoods(ws, g, b);
    double total = 0.0;
    for (Eigen::Index i = 0; i < ll.rows(); ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < 2; ++k) m = std::max(m, ll(i, k));
      double s = 0.0;
      for (int k = 0; k < 2; ++k) s += prior(i, k) * std::exp(ll(i, k) - m);
      total += m + std::log(s);
    }
    return total;
  };

  double previous = objective(gauss, bias);
  for (int sweep = 0; sweep < 5; ++sweep) {
    const Eigen::MatrixXd ll = voxel_log_likelihoods(ws, gauss, bias);
    const Eigen::MatrixXd resp = responsibilities(ll, prior, ws.voxels);
    gauss = update_gaussians_ml(ws, resp, bias);
    bias = update_bias_field(ws, resp, gauss, order);
    const double current = objective(gauss, bias);
    CHECK(current >= previous - 1e-8 * std::abs(previous));
    previous = current;
  }
}

TEST_CASE("parameter files round trip") {
  testutil::TempDir tmp("params");
  GaussianParams gauss;
  Eigen::VectorXd mu(2);
  mu << 3.25, 4.75;
  Eigen::MatrixXd sigma(2, 2);
  sigma << 0.25, 0.03, 0.03, 0.16;
  gauss.means = {mu, (mu.array() + 1.0).matrix()};
  gauss.covariances = {sigma, sigma * 2.0};
  BiasField bias;
  bias.order = {1, 0, 1};
  bias.coefficients = Eigen::MatrixXd::Random(2, 4);

  write_params(gauss, bias, tmp.file("p.params"));
  BiasField bias_back;
  const GaussianParams back = read_params(tmp.file("p.params"), bias_back, bias.order);
  REQUIRE(back.n_classes() == 2);
  for (int k = 0; k < 2; ++k) {
    CHECK((back.means[static_cast<std::size_t>(k)] - gauss.means[static_cast<std::size_t>(k)])
              .cwiseAbs()
              .maxCoeff() == 0.0);
    CHECK((back.covariances[static_cast<std::size_t>(k)] -
           gauss.covariances[static_cast<std::size_t>(k)])
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }
  CHECK((bias_back.coefficients - bias.coefficients).cwiseAbs().maxCoeff() == 0.0);

  testutil::write_text(tmp.file("bad.params"), "PARAMS 2\n");
  CHECK_THROWS_AS(read_params(tmp.file("bad.params"), bias_back, bias.order), format_error);
}

TEST_CASE("gaussian validation rejects non positive definite covariance") {
  GaussianParams gauss;
  gauss.means.push_back(Eigen::VectorXd::Zero(2));
  Eigen::MatrixXd bad(2, 2);
  bad << 1.0, 2.0, 2.0, 1.0;
  gauss.covariances.push_back(bad);
  CHECK_THROWS_AS(gauss.validate(), validation_error);
}

}  // TEST_SUITE
