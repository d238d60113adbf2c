#include "longseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>

#include "longseg/appearance.hpp"
#include "longseg/error.hpp"
#include "longseg/rng.hpp"

namespace longseg {

namespace {

constexpr std::uint64_t kBiasStream = 0x62696173;   // "bias"
constexpr std::uint64_t kLesionStream = 0x6c65736e; // "lesn"
constexpr std::uint64_t kNoiseStream = 0x6e6f6973;  // "nois"
constexpr std::uint64_t kCohortStream = 0x636f686f; // "coho"
constexpr std::uint64_t kRateStream = 0x72617465;   // "rate"

double volume_scale(double rate, double years) {
  const double factor = 1.0 + rate / 100.0 * years;
  if (!(factor > 0.0)) {
    throw validation_error("phantom: rate " + std::to_string(rate) +
                           " %/yr empties the structure by year " + std::to_string(years));
  }
  return std::cbrt(factor);
}

/// Paints every voxel whose center lies inside the scaled primitive.
void paint_structure(std::vector<std::int32_t>& labels, const VoxelGrid& grid,
                     const PhantomStructure& s, double scale) {
  const Eigen::Vector3d r = s.radii * scale;
  int lo[3];
  int hi[3];
  for (int a = 0; a < 3; ++a) {
    lo[a] = std::max(0, static_cast<int>(std::ceil(s.center[a] - r[a])));
    hi[a] = std::min(grid.dims[a] - 1, static_cast<int>(std::floor(s.center[a] + r[a])));
  }
  for (int z = lo[2]; z <= hi[2]; ++z)
    for (int y = lo[1]; y <= hi[1]; ++y)
      for (int x = lo[0]; x <= hi[0]; ++x) {
        if (!s.box) {
          const double dx = (x - s.center[0]) / r[0];
          const double dy = (y - s.center[1]) / r[1];
          const double dz = (z - s.center[2]) / r[2];
          if (dx * dx + dy * dy + dz * dz > 1.0) continue;
        }
        labels[grid.index(x, y, z)] = s.label;
      }
}

void paint_sphere(std::vector<std::uint8_t>& mask, const VoxelGrid& grid,
                  const Eigen::Vector3d& center, double radius) {
  int lo[3];
  int hi[3];
  for (int a = 0; a < 3; ++a) {
    lo[a] = std::max(0, static_cast<int>(std::ceil(center[a] - radius)));
    hi[a] = std::min(grid.dims[a] - 1, static_cast<int>(std::floor(center[a] + radius)));
  }
  const double r2 = radius * radius;
  for (int z = lo[2]; z <= hi[2]; ++z)
    for (int y = lo[1]; y <= hi[1]; ++y)
      for (int x = lo[0]; x <= hi[0]; ++x) {
        const double dx = x - center[0];
        const double dy = y - center[1];
        const double dz = z - center[2];
        if (dx * dx + dy * dy + dz * dz <= r2) mask[grid.index(x, y, z)] = 1;
      }
}

double token_double(const std::string& token, const std::string& context) {
  try {
    std::size_t used = 0;
    const double v = std::stod(token, &used);
    if (used == token.size()) return v;
  } catch (const std::exception&) {
  }
  throw format_error("phantom config: " + context + ": bad number '" + token + "'");
}

int require_int(double v, const std::string& context) {
  const int i = static_cast<int>(std::lround(v));
  if (static_cast<double>(i) != v) {
    throw format_error("phantom config: " + context + ": expected an integer, got " +
                       std::to_string(v));
  }
  return i;
}

int token_int(const std::string& token, const std::string& context) {
  return require_int(token_double(token, context), context);
}

}  // namespace

void PhantomSpec::validate() const {
  grid.validate();
  if (n_classes < 1) throw validation_error("phantom: need at least one class");
  if (n_contrasts < 1) throw validation_error("phantom: need at least one contrast");
  if (class_means.size() != static_cast<std::size_t>(n_classes) ||
      class_covs.size() != static_cast<std::size_t>(n_classes)) {
    throw validation_error("phantom: class_means/class_covs must have one entry per class");
  }
  for (int k = 0; k < n_classes; ++k) {
    if (class_means[k].size() != n_contrasts) {
      throw validation_error("phantom: class " + std::to_string(k + 1) +
                             " mean has wrong length");
    }
    if (class_covs[k].rows() != n_contrasts || class_covs[k].cols() != n_contrasts) {
      throw validation_error("phantom: class " + std::to_string(k + 1) +
                             " covariance has wrong shape");
    }
  }
  for (const auto& s : structures) {
    if (s.label < 1 || s.label > n_classes) {
      throw validation_error("phantom: structure '" + s.name + "' paints unknown class " +
                             std::to_string(s.label));
    }
    if (!(s.radii.minCoeff() > 0.0)) {
      throw validation_error("phantom: structure '" + s.name + "' has non-positive radii");
    }
    if (!(s.rate > -100.0)) {
      throw validation_error("phantom: structure '" + s.name + "' rate must exceed -100 %/yr");
    }
  }
  if (time_offsets.empty() || time_offsets.front() != 0.0) {
    throw validation_error("phantom: first time offset must be 0");
  }
  for (std::size_t t = 1; t < time_offsets.size(); ++t) {
    if (!(time_offsets[t] > time_offsets[t - 1])) {
      throw validation_error("phantom: time offsets must strictly increase");
    }
  }
  for (int a = 0; a < 3; ++a) {
    if (bias_order[a] < 0) throw validation_error("phantom: negative bias order");
  }
  const int p = (bias_order[0] + 1) * (bias_order[1] + 1) * (bias_order[2] + 1);
  if (bias_coefficients.size() != 0 &&
      (bias_coefficients.rows() != n_contrasts || bias_coefficients.cols() != p)) {
    throw validation_error("phantom: bias coefficients must be contrasts x basis count");
  }
  if (lesions.count < 0) throw validation_error("phantom: negative lesion count");
  if (lesions.count > 0) {
    if (!(lesions.radius_min > 0.0) || lesions.radius_max < lesions.radius_min) {
      throw validation_error("phantom: lesion radius range is empty");
    }
    if (lesions.intensity_offset.size() != n_contrasts) {
      throw validation_error("phantom: lesion intensity offset has wrong length");
    }
    if (!(lesions.growth_rate > -100.0)) {
      throw validation_error("phantom: lesion growth rate must exceed -100 %/yr");
    }
    const bool host_exists = std::any_of(structures.begin(), structures.end(),
                                         [&](const auto& s) { return s.label == lesions.host_label; });
    if (!host_exists) {
      throw validation_error("phantom: lesion host label " + std::to_string(lesions.host_label) +
                             " matches no structure");
    }
  }
}

PhantomOutput generate(const PhantomSpec& spec) {
  spec.validate();
  const VoxelGrid& grid = spec.grid;
  const std::size_t nv = grid.num_voxels();
  const int k_classes = spec.n_classes;
  const int n = spec.n_contrasts;
  const std::size_t n_times = spec.time_offsets.size();

  for (const auto& s : spec.structures) {
    double max_scale = 0.0;
    for (double t : spec.time_offsets) max_scale = std::max(max_scale, volume_scale(s.rate, t));
    for (int a = 0; a < 3; ++a) {
      if (s.center[a] - s.radii[a] * max_scale < 0.0 ||
          s.center[a] + s.radii[a] * max_scale > grid.dims[a] - 1) {
        throw validation_error("phantom: structure '" + s.name + "' leaves the grid");
      }
    }
  }

  std::vector<std::string> names(static_cast<std::size_t>(k_classes));
  names[0] = "background";
  for (int k = 2; k <= k_classes; ++k) names[k - 1] = "class" + std::to_string(k);
  for (const auto& s : spec.structures) {
    if (!s.name.empty()) names[static_cast<std::size_t>(s.label - 1)] = s.name;
  }

  std::vector<Eigen::MatrixXd> chol(static_cast<std::size_t>(k_classes));
  for (int k = 0; k < k_classes; ++k) {
    Eigen::LLT<Eigen::MatrixXd> llt(spec.class_covs[static_cast<std::size_t>(k)]);
    if (llt.info() != Eigen::Success) {
      throw validation_error("phantom: class " + std::to_string(k + 1) +
                             " covariance is not positive definite");
    }
    chol[static_cast<std::size_t>(k)] = llt.matrixL();
  }

  const int p = (spec.bias_order[0] + 1) * (spec.bias_order[1] + 1) * (spec.bias_order[2] + 1);
  Eigen::MatrixXd coeff = Eigen::MatrixXd::Zero(n, p);
  if (spec.bias_coefficients.size() != 0) coeff = spec.bias_coefficients;
  if (spec.bias_amplitude > 0.0) {
    for (int c = 0; c < n; ++c) {
      CounterRng rng = CounterRng::derive(spec.seed, {kBiasStream, static_cast<std::uint64_t>(c)});
      for (int j = 1; j < p; ++j) {
        coeff(c, j) += spec.bias_amplitude * (2.0 * rng.next_double() - 1.0);
      }
    }
  }
  const bool has_bias = coeff.cwiseAbs().maxCoeff() > 0.0;
  Eigen::MatrixXd bias_values;  // nv x n
  if (has_bias) bias_values = eval_basis(grid, spec.bias_order) * coeff.transpose();

  struct Blob {
    Eigen::Vector3d center;
    double r0 = 0.0;
  };
  std::vector<Blob> blobs;
  if (spec.lesions.count > 0) {
    const PhantomStructure* host = nullptr;
    for (const auto& s : spec.structures) {
      if (s.label == spec.lesions.host_label) host = &s;
    }
    double host_min_scale = 1.0;
    double blob_max_scale = 0.0;
    for (double t : spec.time_offsets) {
      host_min_scale = std::min(host_min_scale, volume_scale(host->rate, t));
      blob_max_scale = std::max(blob_max_scale, volume_scale(spec.lesions.growth_rate, t));
    }
    CounterRng rng = CounterRng::derive(spec.seed, {kLesionStream});
    for (int i = 0; i < spec.lesions.count; ++i) {
      Blob blob;
      blob.r0 = spec.lesions.radius_min +
                (spec.lesions.radius_max - spec.lesions.radius_min) * rng.next_double();
      const Eigen::Vector3d margin =
          host->radii * host_min_scale -
          Eigen::Vector3d::Constant(blob.r0 * blob_max_scale);
      if (!(margin.minCoeff() > 0.0)) {
        throw validation_error("phantom: lesion blobs do not fit inside structure '" +
                               host->name + "'");
      }
      Eigen::Vector3d u;
      do {
        for (int a = 0; a < 3; ++a) u[a] = 2.0 * rng.next_double() - 1.0;
      } while (!host->box && u.squaredNorm() > 1.0);
      blob.center = host->center + margin.cwiseProduct(u);
      blobs.push_back(blob);
    }
  }

  PhantomOutput out;
  out.class_names = names;
  out.ground_truth.subject_id = "phantom";

  for (std::size_t ti = 0; ti < n_times; ++ti) {
    const double t = spec.time_offsets[ti];

    LabelVolume lab;
    lab.grid = grid;
    lab.n_classes = k_classes;
    lab.labels.assign(nv, 1);
    for (const auto& s : spec.structures) {
      paint_structure(lab.labels, grid, s, volume_scale(s.rate, t));
    }

    std::vector<std::uint8_t> lesion_mask;
    if (!blobs.empty()) {
      lesion_mask.assign(nv, 0);
      const double scale = volume_scale(spec.lesions.growth_rate, t);
      for (const auto& blob : blobs) {
        paint_sphere(lesion_mask, grid, blob.center, blob.r0 * scale);
      }
    }

    MultiContrastVolume vol;
    vol.grid = grid;
    vol.n_contrasts = n;
    vol.data.resize(nv * static_cast<std::size_t>(n));
    vol.mask.assign(nv, 1);
    vol.log_transformed = false;

    CounterRng noise = CounterRng::derive(spec.seed, {kNoiseStream, ti});
    Eigen::VectorXd z(n);
    Eigen::VectorXd value(n);
    for (std::size_t v = 0; v < nv; ++v) {
      for (int c = 0; c < n; ++c) z[c] = noise.next_gaussian();
      const auto k = static_cast<std::size_t>(lab.labels[v] - 1);
      value = spec.class_means[k] + chol[k] * z;
      if (!lesion_mask.empty() && lesion_mask[v]) value += spec.lesions.intensity_offset;
      if (has_bias) value += bias_values.row(static_cast<Eigen::Index>(v)).transpose();
      for (int c = 0; c < n; ++c) {
        vol.data[static_cast<std::size_t>(c) * nv + v] = std::exp(value[c]);
      }
    }

    out.volumes.push_back(std::move(vol));
    out.labels.push_back(std::move(lab));
    if (!blobs.empty()) out.lesion_masks.push_back(std::move(lesion_mask));
    VolumeTimeSeries::Entry entry;
    entry.time_years = t;
    entry.volumes_mm3 = structure_volumes(out.labels.back(), names);
    out.ground_truth.entries.push_back(std::move(entry));
  }
  out.ground_truth.validate();
  return out;
}

std::vector<CohortSubject> generate_cohort(const std::vector<CohortGroup>& groups,
                                           std::uint64_t seed) {
  std::vector<CohortSubject> out;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const CohortGroup& group = groups[gi];
    if (group.n_subjects < 0) throw validation_error("cohort: negative subject count");
    for (int si = 0; si < group.n_subjects; ++si) {
      PhantomSpec spec = group.base;
      spec.seed = CounterRng::derive(seed, {kCohortStream, gi, static_cast<std::uint64_t>(si)})
                      .next_u64();
      if (group.rate_spread > 0.0) {
        CounterRng jitter =
            CounterRng::derive(seed, {kRateStream, gi, static_cast<std::uint64_t>(si)});
        for (auto& s : spec.structures) {
          s.rate += group.rate_spread * jitter.next_gaussian();
        }
      }
      std::string id = group.name + "_" + std::to_string(si);
      CohortSubject subject;
      subject.id = id;
      subject.group = group.name;
      subject.output = generate(spec);
      subject.output.ground_truth.subject_id = id;
      out.push_back(std::move(subject));
    }
  }
  return out;
}

TetrahedralMesh build_atlas_from_labels(const LabelVolume& labels, int spacing,
                                        double smoothing) {
  labels.validate();
  if (labels.n_classes < 1) throw validation_error("atlas from labels: no classes");
  if (!(smoothing > 0.0)) throw validation_error("atlas from labels: smoothing must be > 0");
  const int k_classes = labels.n_classes;
  const Eigen::VectorXd uniform =
      Eigen::VectorXd::Constant(k_classes, 1.0 / static_cast<double>(k_classes));
  TetrahedralMesh mesh = build_grid_atlas(labels.grid, spacing, uniform);

  const VoxelGrid& grid = labels.grid;
  for (Eigen::Index node = 0; node < mesh.n_nodes(); ++node) {
    const Eigen::Vector3d c = mesh.reference_positions.row(node);
    int lo[3];
    int hi[3];
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::max(0, static_cast<int>(std::ceil(c[a] - spacing)));
      hi[a] = std::min(grid.dims[a] - 1, static_cast<int>(std::floor(c[a] + spacing)));
    }
    Eigen::VectorXd hist = Eigen::VectorXd::Constant(k_classes, smoothing);
    for (int z = lo[2]; z <= hi[2]; ++z)
      for (int y = lo[1]; y <= hi[1]; ++y)
        for (int x = lo[0]; x <= hi[0]; ++x) {
          const std::int32_t l = labels.labels[grid.index(x, y, z)];
          if (l > 0) hist[l - 1] += 1.0;
        }
    mesh.node_alphas.row(node) = (hist / hist.sum()).transpose();
  }
  mesh.validate();
  return mesh;
}

void write_phantom(const PhantomOutput& out, const std::string& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t t = 0; t < out.volumes.size(); ++t) {
    const std::string suffix = "_t" + std::to_string(t) + ".mgv";
    write_volume(out.volumes[t], dir + "/vol" + suffix);
    write_label_volume(out.labels[t], dir + "/truth" + suffix);
    if (!out.lesion_masks.empty()) {
      write_mask_volume(out.volumes[t].grid, out.lesion_masks[t], dir + "/lesion" + suffix);
    }
  }
  write_volume_table({out.ground_truth}, dir + "/truth_volumes.csv");
}

PhantomSpec PhantomSpec::from_config(const Config& cfg) {
  PhantomSpec spec;

  std::vector<double> dims = cfg.get_doubles("dims");
  if (dims.size() == 1) dims = {dims[0], dims[0], dims[0]};
  if (dims.size() != 3) throw format_error("phantom config: dims needs 1 or 3 values");
  std::vector<double> vsize = cfg.get_doubles("voxel_size", {1.0});
  if (vsize.size() == 1) vsize = {vsize[0], vsize[0], vsize[0]};
  if (vsize.size() != 3) throw format_error("phantom config: voxel_size needs 1 or 3 values");
  for (int a = 0; a < 3; ++a) {
    spec.grid.dims[a] = require_int(dims[static_cast<std::size_t>(a)], "dims");
    spec.grid.voxel_size[a] = vsize[static_cast<std::size_t>(a)];
  }

  spec.n_classes = static_cast<int>(cfg.get_int("classes"));
  spec.n_contrasts = static_cast<int>(cfg.get_int("contrasts", 1));
  spec.time_offsets = cfg.get_doubles("time_offsets", {0.0});
  spec.seed = static_cast<std::uint64_t>(cfg.get_int("seed", 0));

  for (const std::string& line : cfg.get_all("structure")) {
    const std::vector<std::string> tok = split_tokens(line);
    if (tok.size() != 10) {
      throw format_error(
          "phantom config: structure needs 'name label shape cx cy cz rx ry rz rate', got '" +
          line + "'");
    }
    PhantomStructure s;
    s.name = tok[0];
    s.label = token_int(tok[1], "structure label");
    if (tok[2] == "box") {
      s.box = true;
    } else if (tok[2] == "ellipsoid") {
      s.box = false;
    } else {
      throw format_error("phantom config: unknown shape '" + tok[2] + "'");
    }
    for (int a = 0; a < 3; ++a) {
      s.center[a] = token_double(tok[static_cast<std::size_t>(3 + a)], "structure center");
      s.radii[a] = token_double(tok[static_cast<std::size_t>(6 + a)], "structure radii");
    }
    s.rate = token_double(tok[9], "structure rate");
    spec.structures.push_back(std::move(s));
  }

  const int n = spec.n_contrasts;
  spec.class_means.assign(static_cast<std::size_t>(spec.n_classes), Eigen::VectorXd());
  spec.class_covs.assign(static_cast<std::size_t>(spec.n_classes), Eigen::MatrixXd());
  for (const std::string& line : cfg.get_all("class_mean")) {
    const std::vector<std::string> tok = split_tokens(line);
    if (tok.size() != static_cast<std::size_t>(n) + 1) {
      throw format_error("phantom config: class_mean needs 'label m1 ... mN', got '" + line + "'");
    }
    const int label = token_int(tok[0], "class_mean label");
    if (label < 1 || label > spec.n_classes) {
      throw format_error("phantom config: class_mean label out of range in '" + line + "'");
    }
    Eigen::VectorXd mean(n);
    for (int c = 0; c < n; ++c) {
      mean[c] = token_double(tok[static_cast<std::size_t>(c) + 1], "class_mean");
    }
    spec.class_means[static_cast<std::size_t>(label - 1)] = mean;
  }
  for (const std::string& line : cfg.get_all("class_cov")) {
    const std::vector<std::string> tok = split_tokens(line);
    if (tok.size() != 2 && tok.size() != static_cast<std::size_t>(n) * n + 1) {
      throw format_error(
          "phantom config: class_cov needs 'label v' or 'label' plus N*N values, got '" + line +
          "'");
    }
    const int label = token_int(tok[0], "class_cov label");
    if (label < 1 || label > spec.n_classes) {
      throw format_error("phantom config: class_cov label out of range in '" + line + "'");
    }
    Eigen::MatrixXd cov(n, n);
    if (tok.size() == 2) {
      cov = token_double(tok[1], "class_cov") * Eigen::MatrixXd::Identity(n, n);
    } else {
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
          cov(r, c) = token_double(tok[static_cast<std::size_t>(r * n + c) + 1], "class_cov");
        }
    }
    spec.class_covs[static_cast<std::size_t>(label - 1)] = cov;
  }
  for (int k = 0; k < spec.n_classes; ++k) {
    if (spec.class_means[static_cast<std::size_t>(k)].size() == 0) {
      throw format_error("phantom config: missing class_mean for class " + std::to_string(k + 1));
    }
    if (spec.class_covs[static_cast<std::size_t>(k)].size() == 0) {
      throw format_error("phantom config: missing class_cov for class " + std::to_string(k + 1));
    }
  }

  std::vector<double> order = cfg.get_doubles("bias_order", {0.0});
  if (order.size() == 1) order = {order[0], order[0], order[0]};
  if (order.size() != 3) throw format_error("phantom config: bias_order needs 1 or 3 values");
  for (int a = 0; a < 3; ++a) {
    spec.bias_order[a] = require_int(order[static_cast<std::size_t>(a)], "bias_order");
  }
  spec.bias_amplitude = cfg.get_double("bias_amplitude", 0.0);
  const auto coeff_lines = cfg.get_all("bias_coeff");
  if (!coeff_lines.empty()) {
    const int p = (spec.bias_order[0] + 1) * (spec.bias_order[1] + 1) * (spec.bias_order[2] + 1);
    spec.bias_coefficients = Eigen::MatrixXd::Zero(n, p);
    for (const std::string& line : coeff_lines) {
      const std::vector<std::string> tok = split_tokens(line);
      if (tok.size() != 3) {
        throw format_error("phantom config: bias_coeff needs 'contrast index value', got '" +
                           line + "'");
      }
      const int c = token_int(tok[0], "bias_coeff contrast");
      const int j = token_int(tok[1], "bias_coeff index");
      if (c < 1 || c > n || j < 0 || j >= p) {
        throw format_error("phantom config: bias_coeff position out of range in '" + line + "'");
      }
      spec.bias_coefficients(c - 1, j) = token_double(tok[2], "bias_coeff value");
    }
  }

  spec.lesions.count = static_cast<int>(cfg.get_int("lesion_count", 0));
  if (spec.lesions.count > 0) {
    const std::vector<double> radius = cfg.get_doubles("lesion_radius");
    if (radius.size() != 2) {
      throw format_error("phantom config: lesion_radius needs 'rmin rmax'");
    }
    spec.lesions.radius_min = radius[0];
    spec.lesions.radius_max = radius[1];
    const std::vector<double> offset = cfg.get_doubles("lesion_offset");
    if (offset.size() != static_cast<std::size_t>(n)) {
      throw format_error("phantom config: lesion_offset needs one value per contrast");
    }
    spec.lesions.intensity_offset =
        Eigen::Map<const Eigen::VectorXd>(offset.data(), static_cast<Eigen::Index>(n));
    spec.lesions.growth_rate = cfg.get_double("lesion_growth", 0.0);
    spec.lesions.host_label = static_cast<int>(cfg.get_int("lesion_host"));
  }

  spec.validate();
  return spec;
}

}  // namespace longseg
