#include <benchmark/benchmark.h>

#include <Eigen/Dense>

#include "longseg/appearance.hpp"
#include "longseg/cross.hpp"
#include "longseg/mesh.hpp"
#include "longseg/rng.hpp"

namespace {

using namespace longseg;

VoxelGrid bench_grid() {
  VoxelGrid grid;
  grid.dims = {32, 32, 32};
  return grid;
}

TetrahedralMesh bench_mesh(int k_classes) {
  const Eigen::VectorXd alpha =
      Eigen::VectorXd::Constant(k_classes, 1.0 / static_cast<double>(k_classes));
  return build_grid_atlas(bench_grid(), 4, alpha);
}

PointMatrix perturbed(const TetrahedralMesh& mesh, double amplitude) {
  CounterRng rng(42);
  PointMatrix x = mesh.reference_positions;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (int a = 0; a < 3; ++a) x(i, a) += amplitude * (2.0 * rng.next_double() - 1.0);
  return x;
}

MultiContrastVolume bench_volume() {
  MultiContrastVolume vol;
  vol.grid = bench_grid();
  vol.n_contrasts = 1;
  const std::size_t nv = vol.grid.num_voxels();
  vol.data.resize(nv);
  vol.mask.assign(nv, 1);
  vol.log_transformed = true;
  CounterRng rng(7);
  for (std::size_t i = 0; i < nv; ++i) vol.data[i] = 4.0 + 0.3 * rng.next_gaussian();
  return vol;
}

void BM_DeformationEnergy(benchmark::State& state) {
  const TetrahedralMesh mesh = bench_mesh(3);
  const PointMatrix x = perturbed(mesh, 0.4);
  for (auto _ : state) {
    benchmark::DoNotOptimize(deformation_energy(x, mesh.reference_positions, mesh));
  }
}
BENCHMARK(BM_DeformationEnergy);

void BM_DeformationGradient(benchmark::State& state) {
  const TetrahedralMesh mesh = bench_mesh(3);
  const PointMatrix x = perturbed(mesh, 0.4);
  for (auto _ : state) {
    benchmark::DoNotOptimize(deformation_energy_gradient(x, mesh.reference_positions, mesh));
  }
}
BENCHMARK(BM_DeformationGradient);

void BM_RasterizePrior(benchmark::State& state) {
  const TetrahedralMesh mesh = bench_mesh(3);
  const PointMatrix x = perturbed(mesh, 0.4);
  const VoxelGrid grid = bench_grid();
  for (auto _ : state) {
    benchmark::DoNotOptimize(rasterize_prior(x, mesh, grid));
  }
}
BENCHMARK(BM_RasterizePrior);

void BM_MeshDataTermGradient(benchmark::State& state) {
  const TetrahedralMesh mesh = bench_mesh(3);
  const PointMatrix x = perturbed(mesh, 0.4);
  const MultiContrastVolume vol = bench_volume();
  const AppearanceWorkspace ws = AppearanceWorkspace::build(vol, {1, 1, 1});
  GaussianParams gauss;
  for (int k = 0; k < 3; ++k) {
    gauss.means.push_back(Eigen::VectorXd::Constant(1, 3.6 + 0.4 * k));
    gauss.covariances.push_back(Eigen::MatrixXd::Constant(1, 1, 0.09));
  }
  BiasField bias;
  bias.order = {1, 1, 1};
  bias.coefficients = Eigen::MatrixXd::Zero(1, bias.n_basis());
  const Eigen::MatrixXd log_lik = voxel_log_likelihoods(ws, gauss, bias);
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        mesh_data_term(ws.voxels, log_lik, x, mesh, bench_grid(), true));
  }
}
BENCHMARK(BM_MeshDataTermGradient);

void BM_EmSweep(benchmark::State& state) {
  const TetrahedralMesh mesh = bench_mesh(3);
  const MultiContrastVolume vol = bench_volume();
  const AppearanceWorkspace ws = AppearanceWorkspace::build(vol, {1, 1, 1});
  const Eigen::MatrixXd prior =
      rasterize_prior_subset(mesh.reference_positions, mesh, bench_grid(), ws.voxels).prior;
  GaussianParams gauss;
  for (int k = 0; k < 3; ++k) {
    gauss.means.push_back(Eigen::VectorXd::Constant(1, 3.6 + 0.4 * k));
    gauss.covariances.push_back(Eigen::MatrixXd::Constant(1, 1, 0.09));
  }
  BiasField bias;
  bias.order = {1, 1, 1};
  bias.coefficients = Eigen::MatrixXd::Zero(1, bias.n_basis());
  for (auto _ : state) {
    const Eigen::MatrixXd log_lik = voxel_log_likelihoods(ws, gauss, bias);
    const Eigen::MatrixXd resp = responsibilities(log_lik, prior, ws.voxels);
    benchmark::DoNotOptimize(update_gaussians_ml(ws, resp, bias));
    benchmark::DoNotOptimize(update_bias_field(ws, resp, gauss, bias.order));
  }
}
BENCHMARK(BM_EmSweep);

}  // namespace

BENCHMARK_MAIN();
