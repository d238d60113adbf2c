#pragma once

#include <optional>
#include <vector>

#include "longseg/cross.hpp"

namespace longseg {

/// Per-class coupling strengths tying each time point's Gaussian to the
/// subject prototype. `n_k` is the voxel count of class k in the segmented
/// within-subject template; `p0` the resulting coupling strength.
struct NIWHyper {
  Eigen::VectorXd p0;   // per atlas class, >= 0
  Eigen::VectorXd n_k;  // per atlas class

  /// Every strength must be 0 (coupling off) or exceed n_contrasts + 2 so the
  /// inverse-Wishart stays proper.
  void validate(int n_contrasts) const;
};

/// Subject-specific latent variables: the subject atlas configuration and the
/// Gaussian prototypes per atlas class.
struct SubjectLatents {
  PointMatrix x0;
  std::vector<Eigen::VectorXd> mu0;
  std::vector<Eigen::MatrixXd> sigma0;
};

struct LesionConfig {
  bool enabled = false;
  /// When > 0 (1-based), that atlas class acts as the lesion class and keeps
  /// its mesh prior; otherwise an extra class with a uniform scalar prior is
  /// appended.
  int atlas_class = 0;
  double uniform_prior = 0.01;     // q, mass of the appended lesion class
  double threshold = 0.5;          // posterior cutoff for the lesion mask
  int wm_class = 1;                // 1-based class seeding the lesion Gaussian
  Eigen::VectorXd intensity_offset;  // per contrast, added to the seed mean

  void validate(int n_atlas_classes) const;
};

/// Resolved view of the lesion options against a concrete class layout.
struct LesionModel {
  bool uniform_mode = false;  // appended class with scalar prior
  double q = 0.0;
  int lesion_class = -1;      // 0-based column among the fitted classes
};
LesionModel make_lesion_model(const LesionConfig& cfg, int n_atlas_classes);

struct LongConfig {
  FitConfig cross;             // template fit settings, shared kappa/orders/threads
  double kappa0_ratio = 20.0;  // kappa0 = ratio * kappa
  double p0_ratio = 0.5;       // p0_k = ratio * n_k
  int outer_iterations = 5;
  int inner_sweeps = 3;        // per-time-point sweeps inside one outer iteration
  LesionConfig lesion;

  double kappa0() const { return kappa0_ratio * cross.kappa; }
  void validate() const;
};

struct TimepointState {
  PointMatrix x;
  GaussianParams gauss;
  BiasField bias;
  bool mesh_warning = false;
};

struct TimepointResult {
  TimepointState state;
  LabelVolume seg;
  std::vector<std::uint8_t> lesion_mask;  // empty unless lesions enabled
};

struct LongFitResult {
  SubjectLatents latents;
  NIWHyper hyper;
  std::vector<TimepointResult> timepoints;
  std::vector<double> objective_trace;  // after every coordinate block
  CrossFitResult template_fit;
  LabelVolume template_seg;
  bool mesh_warning = false;
};

/// Voxelwise median across time points (mean of the middle pair for even
/// counts). All volumes must share one grid, contrast count and log state;
/// the mask of the result is the intersection of the input masks.
MultiContrastVolume build_median_template(const std::vector<MultiContrastVolume>& volumes);

/// Copies the template fit into every time point and the subject latents,
/// derives n_k from the template segmentation and sets p0 = p0_ratio * n_k.
/// Strengths that would land in (0, n_contrasts + 2] switch coupling off.
void init_longitudinal(const CrossFitResult& template_fit, const LabelVolume& template_seg,
                       std::size_t n_timepoints, const LongConfig& cfg, SubjectLatents& latents,
                       std::vector<TimepointState>& states, NIWHyper& hyper);

/// Closed-form prototype update for every coupled class:
///   mu0_k     = (sum_t S_tk^-1)^-1 sum_t S_tk^-1 mu_tk
///   Sigma0_k^-1 = (1/T sum_t S_tk^-1) * p0_k / (p0_k - N - 2)
/// Classes with p0 = 0 keep their previous prototypes.
void update_theta0(const std::vector<GaussianParams>& per_timepoint, const NIWHyper& hyper,
                   SubjectLatents& latents);

/// Posterior-mode Gaussian update under the prototype coupling. With
/// n_k = sum_i w_ik, s_k = sum_i w_ik r_i, m2_k = sum_i w_ik r_i r_i^T:
///   mu    = (s + p0 mu0) / (n + p0)
///   Sigma = (scatter_at_mu + p0 (mu - mu0)(mu - mu0)^T + p0 Sigma0) / (n + p0)
/// and n = 0 returns the prototypes exactly.
void niw_map_update(const Eigen::VectorXd& s, const Eigen::MatrixXd& m2, double n, double p0,
                    const Eigen::VectorXd& mu0, const Eigen::MatrixXd& sigma0,
                    Eigen::VectorXd& mu_out, Eigen::MatrixXd& sigma_out);

/// M-step over all classes: coupled classes take the posterior mode, the rest
/// (including any lesion class) the floored flat estimate.
GaussianParams update_gaussians_niw(const AppearanceWorkspace& ws, const Eigen::MatrixXd& resp,
                                    const BiasField& bias, const SubjectLatents& latents,
                                    const NIWHyper& hyper);

/// Minimizes kappa0 E(x0, x_ref) + kappa sum_t E(x_t, x0) over x0 with L-BFGS,
/// keeping every tetrahedron valid both under x0 as a deformation of the
/// reference and as the reference of every x_t. Returns the previous x0 when
/// no feasible descent step exists.
MeshOptResult update_x0(const std::vector<PointMatrix>& x_t, const PointMatrix& x0_init,
                        const TetrahedralMesh& mesh, double kappa, double kappa0,
                        const LbfgsConfig& cfg);

/// One coordinate-ascent pass over a single time point: `inner_sweeps` rounds
/// of responsibilities, coupled Gaussian update, bias update and mesh
/// optimization against x0.
void fit_timepoint_niw(const AppearanceWorkspace& ws, const TetrahedralMesh& mesh,
                       const VoxelGrid& grid, const SubjectLatents& latents,
                       const NIWHyper& hyper, const LesionModel& lesion, TimepointState& state,
                       const LongConfig& cfg);

/// Joint log posterior across all blocks: per-time-point data terms, the
/// deformation energies of x_t against x0 and x0 against the reference, and
/// the full prototype coupling densities of every coupled class.
double joint_objective(const std::vector<AppearanceWorkspace>& ws,
                       const std::vector<TimepointState>& states, const TetrahedralMesh& mesh,
                       const VoxelGrid& grid, const SubjectLatents& latents,
                       const NIWHyper& hyper, const LesionModel& lesion, double kappa,
                       double kappa0, int threads = 1);

/// Full pipeline: median template, cross-sectional template fit,
/// initialization, `outer_iterations` rounds of per-time-point fits plus the
/// closed-form latent updates, and final per-time-point segmentations.
LongFitResult fit_longitudinal(const std::vector<MultiContrastVolume>& volumes,
                               const TetrahedralMesh& mesh, const LongConfig& cfg);

/// Lesion masks from fitted per-time-point results.
std::vector<std::vector<std::uint8_t>> segment_lesions(const LongFitResult& result,
                                                       const LesionConfig& cfg);

}  // namespace longseg
