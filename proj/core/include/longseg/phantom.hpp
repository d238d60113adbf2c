#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "longseg/config.hpp"
#include "longseg/mesh.hpp"
#include "longseg/volume.hpp"

namespace longseg {

/// One geometric primitive painted into the label volume. Structures are
/// painted in order, so later entries carve nested anatomy out of earlier
/// ones. Label 1 is the background filling everything not painted.
struct PhantomStructure {
  std::string name;
  int label = 2;            // class this structure paints, 1-based
  bool box = false;         // axis-aligned box instead of an ellipsoid
  Eigen::Vector3d center{0, 0, 0};  // voxel coordinates
  Eigen::Vector3d radii{1, 1, 1};   // semi-axes, or half extents for boxes
  double rate = 0.0;        // annual volume change, percent per year
};

/// Spherical hyperintense blobs planted inside a host structure. Blob radii
/// are drawn uniformly from [radius_min, radius_max] and grow so blob volume
/// follows v(t) = v0 (1 + growth_rate/100 t).
struct PhantomLesions {
  int count = 0;
  double radius_min = 2.0;
  double radius_max = 4.0;
  Eigen::VectorXd intensity_offset;  // per contrast, log-intensity scale
  double growth_rate = 0.0;          // percent volume per year
  int host_label = 0;                // label of the hosting structure
};

/// Full description of a synthetic longitudinal subject: geometry with known
/// atrophy trajectories, per-class Gaussians in log-intensity space, an
/// optional planted bias field, and seeded noise.
struct PhantomSpec {
  VoxelGrid grid;
  int n_classes = 0;   // including the background class 1
  int n_contrasts = 1;
  std::vector<PhantomStructure> structures;
  std::vector<Eigen::VectorXd> class_means;  // per class, log-intensity scale
  std::vector<Eigen::MatrixXd> class_covs;   // per class, N x N
  std::array<int, 3> bias_order{0, 0, 0};
  /// Fixed planted bias coefficients (N x P); empty means all zero.
  Eigen::MatrixXd bias_coefficients;
  /// When > 0, adds seeded coefficients drawn uniformly from [-a, a] to every
  /// non-constant basis function, so replicates with different seeds carry
  /// different bias fields.
  double bias_amplitude = 0.0;
  std::vector<double> time_offsets{0.0};  // years from baseline, first must be 0
  std::uint64_t seed = 0;
  PhantomLesions lesions;

  void validate() const;

  /// Reads a spec from the flat key = value format. Repeated keys describe
  /// per-structure and per-class entries:
  ///   dims = 48 48 48            voxel_size = 1 1 1
  ///   classes = 3                contrasts = 1
  ///   time_offsets = 0 1 2       seed = 7
  ///   structure = <name> <label> <ellipsoid|box> cx cy cz rx ry rz rate
  ///   class_mean = <label> m1 ... mN
  ///   class_cov = <label> (single variance, or N*N row-major values)
  ///   bias_order = 2 2 2         bias_amplitude = 0.02
  ///   bias_coeff = <contrast> <basis index> <value>
  ///   lesion_count, lesion_radius = rmin rmax, lesion_offset = o1 ... oN,
  ///   lesion_growth, lesion_host
  static PhantomSpec from_config(const Config& cfg);
};

/// Everything the generator knows about one subject: raw-scale volumes per
/// time point, ground-truth labels and lesion masks, and the volume table
/// computed from the label maps.
struct PhantomOutput {
  std::vector<MultiContrastVolume> volumes;
  std::vector<LabelVolume> labels;
  std::vector<std::vector<std::uint8_t>> lesion_masks;  // empty when no lesions
  VolumeTimeSeries ground_truth;
  std::vector<std::string> class_names;  // per class 1..K
};

/// Generates one subject. Anatomy depends only on the geometry, so specs
/// differing only in seed produce identical label volumes with independent
/// noise and (when bias_amplitude > 0) independent bias fields.
PhantomOutput generate(const PhantomSpec& spec);

struct CohortGroup {
  std::string name;
  int n_subjects = 0;
  PhantomSpec base;
  double rate_spread = 0.0;  // s.d. of the per-subject rate jitter, percent per year
};

struct CohortSubject {
  std::string id;
  std::string group;
  PhantomOutput output;
};

/// Independent subjects with per-subject jittered structure rates. Subject
/// seeds and jitters derive from `seed`, so the cohort reproduces exactly.
std::vector<CohortSubject> generate_cohort(const std::vector<CohortGroup>& groups,
                                           std::uint64_t seed);

/// Lattice atlas whose node simplexes are smoothed label histograms: each
/// node counts the labels within a cube of half width `spacing` around it and
/// normalizes with `smoothing` pseudo-counts per class.
TetrahedralMesh build_atlas_from_labels(const LabelVolume& labels, int spacing,
                                        double smoothing = 1.0);

/// Writes vol_t<i>.mgv, truth_t<i>.mgv, lesion_t<i>.mgv (when present) and
/// truth_volumes.csv under `dir`, creating it if needed.
void write_phantom(const PhantomOutput& out, const std::string& dir);

}  // namespace longseg
