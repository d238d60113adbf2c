#pragma once

#include <array>
#include <cstddef>

#include "longseg/error.hpp"

namespace longseg {

/// A regular voxel grid. Voxel (x, y, z) has its center at position
/// (x, y, z) in voxel coordinates; linear indices run x-fastest, then y, then z.
struct VoxelGrid {
  std::array<int, 3> dims{0, 0, 0};
  std::array<double, 3> voxel_size{1.0, 1.0, 1.0};  // mm
  std::array<double, 3> origin{0.0, 0.0, 0.0};      // mm

  std::size_t num_voxels() const {
    return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
           static_cast<std::size_t>(dims[2]);
  }

  double voxel_volume_mm3() const { return voxel_size[0] * voxel_size[1] * voxel_size[2]; }

  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(z));
  }

  std::array<int, 3> coords(std::size_t index) const {
    const int x = static_cast<int>(index % static_cast<std::size_t>(dims[0]));
    const std::size_t rest = index / static_cast<std::size_t>(dims[0]);
    const int y = static_cast<int>(rest % static_cast<std::size_t>(dims[1]));
    const int z = static_cast<int>(rest / static_cast<std::size_t>(dims[1]));
    return {x, y, z};
  }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 1) throw validation_error("VoxelGrid: dims must be >= 1");
      if (!(voxel_size[a] > 0.0)) throw validation_error("VoxelGrid: voxel sizes must be > 0");
    }
  }

  bool operator==(const VoxelGrid& other) const {
    return dims == other.dims && voxel_size == other.voxel_size && origin == other.origin;
  }
};

}  // namespace longseg
