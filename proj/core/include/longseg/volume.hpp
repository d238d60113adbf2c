#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "longseg/grid.hpp"

namespace longseg {

/// Multi-contrast voxel volume. `data` is stored contrast-major (all voxels of
/// contrast 0 first), voxels x-fastest, matching the on-disk MGV layout.
struct MultiContrastVolume {
  VoxelGrid grid;
  int n_contrasts = 1;
  std::vector<double> data;    // size num_voxels() * n_contrasts
  std::vector<std::uint8_t> mask;  // size num_voxels(); nonzero = in mask
  bool log_transformed = false;

  double value(std::size_t voxel, int contrast) const {
    return data[static_cast<std::size_t>(contrast) * grid.num_voxels() + voxel];
  }
  double& value(std::size_t voxel, int contrast) {
    return data[static_cast<std::size_t>(contrast) * grid.num_voxels() + voxel];
  }

  std::size_t num_masked() const;
  /// Linear indices of masked voxels, ascending.
  std::vector<std::size_t> masked_indices() const;

  /// Checks shape consistency and finiteness of masked values.
  void validate() const;
};

/// Hard segmentation labels on a grid. Labels are 1..K on masked voxels and 0
/// elsewhere. Posteriors, when present, are voxel-major rows of length K.
struct LabelVolume {
  VoxelGrid grid;
  int n_classes = 0;
  std::vector<std::int32_t> labels;  // size num_voxels()
  std::vector<double> posteriors;    // empty, or size num_voxels() * n_classes

  bool has_posteriors() const { return !posteriors.empty(); }
  double posterior(std::size_t voxel, int k) const {
    return posteriors[voxel * static_cast<std::size_t>(n_classes) + static_cast<std::size_t>(k)];
  }
  void validate() const;
};

/// Per-subject trajectory of per-structure volumes. Offsets are years from the
/// first scan; the first offset must be 0 and offsets strictly increase.
struct VolumeTimeSeries {
  struct Entry {
    double time_years = 0.0;
    std::map<std::string, double> volumes_mm3;
  };
  std::string subject_id;
  std::vector<Entry> entries;

  void validate() const;
};

// ---- MGV file format -------------------------------------------------------
//
// ASCII header of `key value` lines terminated by `END`:
//   MGV 1
//   DIMS dx dy dz
//   NCONTRASTS n
//   VOXSIZE sx sy sz
//   LOG 0|1
// followed by dx*dy*dz*n IEEE-754 float32 little-endian values, contrast-major,
// voxels x-fastest. Label volumes are single-contrast files with integral values.

MultiContrastVolume read_volume(const std::string& path);
void write_volume(const MultiContrastVolume& vol, const std::string& path);

/// Encodes labels of a segmentation as a single-contrast MGV volume.
void write_label_volume(const LabelVolume& seg, const std::string& path);
LabelVolume read_label_volume(const std::string& path);

/// Encodes a mask as a single-contrast 0/1 MGV volume.
void write_mask_volume(const VoxelGrid& grid, const std::vector<std::uint8_t>& mask,
                       const std::string& path);
std::vector<std::uint8_t> read_mask_volume(const std::string& path, const VoxelGrid& expected_grid);

// ---- Operations ------------------------------------------------------------

/// Replaces every masked intensity v by ln(max(v, floor)) and sets the flag.
/// Throws state_error if the volume is already log-transformed.
MultiContrastVolume log_transform(const MultiContrastVolume& vol, double floor);

/// Default floor used by the pipeline: `ratio` times the per-contrast maximum.
double default_log_floor(const MultiContrastVolume& vol, int contrast, double ratio = 1e-4);

/// Per-label physical volume: voxel count times voxel volume. Structures are
/// named by `names[k-1]` when provided, else "class<k>".
std::map<std::string, double> structure_volumes(const LabelVolume& seg,
                                                const std::vector<std::string>& names = {});

// ---- Volume tables ---------------------------------------------------------
//
// CSV with header `subject,time_years,structure,volume_mm3`.

void write_volume_table(const std::vector<VolumeTimeSeries>& table, const std::string& path);
std::vector<VolumeTimeSeries> read_volume_table(const std::string& path);

}  // namespace longseg
