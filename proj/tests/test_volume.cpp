#include <doctest.h>

#include <cmath>
#include <cstdint>

#include "helpers.hpp"
#include "longseg/rng.hpp"
#include "longseg/volume.hpp"

using namespace longseg;

namespace {

MultiContrastVolume small_volume() {
  MultiContrastVolume vol;
  vol.grid = testutil::cube_grid(4);
  vol.grid.voxel_size = {1.0, 1.5, 2.0};
  vol.n_contrasts = 2;
  const std::size_t nv = vol.grid.num_voxels();
  vol.data.resize(nv * 2);
  vol.mask.assign(nv, 1);
  CounterRng rng(11);
  for (auto& v : vol.data) v = 1.0 + 4.0 * rng.next_double();
  vol.mask[3] = 0;
  vol.mask[40] = 0;
  return vol;
}

}  // namespace

TEST_SUITE("volume") {

TEST_CASE("grid index and coords invert each other") {
  const VoxelGrid grid = testutil::cube_grid(5);
  for (std::size_t i = 0; i < grid.num_voxels(); ++i) {
    const auto c = grid.coords(i);
    CHECK(grid.index(c[0], c[1], c[2]) == i);
  }
}

TEST_CASE("mgv round trip preserves grid and float32 data, reader masks nothing") {
  testutil::TempDir tmp("volio");
  MultiContrastVolume vol = small_volume();
  vol.mask.assign(vol.grid.num_voxels(), 1);
  vol.log_transformed = true;
  write_volume(vol, tmp.file("a.mgv"));
  const MultiContrastVolume back = read_volume(tmp.file("a.mgv"));
  CHECK(back.grid == vol.grid);
  CHECK(back.n_contrasts == vol.n_contrasts);
  CHECK(back.log_transformed == vol.log_transformed);
  REQUIRE(back.data.size() == vol.data.size());
  for (std::size_t i = 0; i < vol.data.size(); ++i) {
    CHECK(back.data[i] == static_cast<double>(static_cast<float>(vol.data[i])));
  }
  CHECK(back.mask == std::vector<std::uint8_t>(vol.grid.num_voxels(), 1));
}

TEST_CASE("label volume round trip is exact") {
  testutil::TempDir tmp("labio");
  LabelVolume seg;
  seg.grid = testutil::cube_grid(3);
  seg.n_classes = 4;
  seg.labels.assign(seg.grid.num_voxels(), 0);
  for (std::size_t i = 0; i < seg.labels.size(); ++i) {
    seg.labels[i] = static_cast<std::int32_t>(i % 5);
  }
  write_label_volume(seg, tmp.file("l.mgv"));
  const LabelVolume back = read_label_volume(tmp.file("l.mgv"));
  CHECK(back.labels == seg.labels);
  CHECK(back.grid == seg.grid);
}

TEST_CASE("mask volume round trip is exact") {
  testutil::TempDir tmp("maskio");
  const VoxelGrid grid = testutil::cube_grid(3);
  std::vector<std::uint8_t> mask(grid.num_voxels(), 0);
  mask[5] = 1;
  mask[20] = 1;
  write_mask_volume(grid, mask, tmp.file("m.mgv"));
  CHECK(read_mask_volume(tmp.file("m.mgv"), grid) == mask);
  VoxelGrid other = grid;
  other.dims[0] = 4;
  CHECK_THROWS_AS(read_mask_volume(tmp.file("m.mgv"), other), format_error);
}

TEST_CASE("malformed headers and truncated payloads are rejected") {
  testutil::TempDir tmp("badio");
  testutil::write_text(tmp.file("bad1.mgv"), "NOTMGV 1\n");
  CHECK_THROWS_AS(read_volume(tmp.file("bad1.mgv")), format_error);
  testutil::write_text(tmp.file("bad2.mgv"),
                       "MGV 1\nDIMS 2 2 2\nNCONTRASTS 1\nVOXSIZE 1 1 1\nLOG 0\nEND\nxx");
  CHECK_THROWS_AS(read_volume(tmp.file("bad2.mgv")), format_error);
  testutil::write_text(tmp.file("bad3.mgv"), "MGV 1\nDIMS 2 2\n");
  CHECK_THROWS_AS(read_volume(tmp.file("bad3.mgv")), format_error);
  CHECK_THROWS_AS(read_volume(tmp.file("missing.mgv")), format_error);
}

TEST_CASE("validate rejects shape mismatches and non-finite masked values") {
  MultiContrastVolume vol = small_volume();
  CHECK_NOTHROW(vol.validate());
  vol.data[7] = std::nan("");
  CHECK_THROWS_AS(vol.validate(), numeric_error);
  vol.data[7] = 1.0;
  vol.data[3] = std::nan("");  // voxel 3 is outside the mask
  CHECK_NOTHROW(vol.validate());
  vol.data.pop_back();
  CHECK_THROWS_AS(vol.validate(), validation_error);
}

TEST_CASE("log transform applies ln(max(v, floor)) once") {
  MultiContrastVolume vol = small_volume();
  vol.data[0] = 1e-12;
  const double floor0 = default_log_floor(vol, 0);
  const MultiContrastVolume logged = log_transform(vol, floor0);
  CHECK(logged.log_transformed);
  CHECK(logged.data[0] == doctest::Approx(std::log(floor0)).epsilon(1e-12));
  CHECK(logged.data[1] == doctest::Approx(std::log(vol.data[1])).epsilon(1e-12));
  CHECK_THROWS_AS(log_transform(logged, floor0), state_error);

  double max0 = 0.0;
  for (std::size_t i = 0; i < vol.grid.num_voxels(); ++i) {
    if (vol.mask[i]) max0 = std::max(max0, vol.value(i, 0));
  }
  CHECK(floor0 == doctest::Approx(1e-4 * max0).epsilon(1e-12));
}

TEST_CASE("structure volumes count labels times voxel volume") {
  LabelVolume seg;
  seg.grid = testutil::cube_grid(3);
  seg.grid.voxel_size = {2.0, 1.0, 0.5};
  seg.n_classes = 2;
  seg.labels.assign(27, 1);
  seg.labels[0] = 2;
  seg.labels[1] = 2;
  seg.labels[2] = 0;
  const auto vols = structure_volumes(seg, {"bg", "thing"});
  CHECK(vols.at("bg") == 24.0);
  CHECK(vols.at("thing") == 2.0);
  const auto unnamed = structure_volumes(seg);
  CHECK(unnamed.count("class1") == 1);
  CHECK(unnamed.count("class2") == 1);
}

TEST_CASE("volume table round trips through csv") {
  testutil::TempDir tmp("table");
  VolumeTimeSeries a;
  a.subject_id = "s1";
  a.entries = {{0.0, {{"hippo", 123.456}, {"thal", 88.25}}},
               {1.5, {{"hippo", 120.0}, {"thal", 88.0}}}};
  VolumeTimeSeries b;
  b.subject_id = "s2";
  b.entries = {{0.0, {{"hippo", 130.0}}}};
  write_volume_table({a, b}, tmp.file("t.csv"));
  const auto back = read_volume_table(tmp.file("t.csv"));
  REQUIRE(back.size() == 2);
  CHECK(back[0].subject_id == "s1");
  CHECK(back[0].entries[1].time_years == 1.5);
  CHECK(back[0].entries[1].volumes_mm3.at("hippo") == 120.0);
  CHECK(back[1].entries[0].volumes_mm3.at("hippo") == 130.0);
}

TEST_CASE("time series validation enforces baseline zero and increasing offsets") {
  VolumeTimeSeries s;
  s.subject_id = "x";
  s.entries = {{0.5, {{"a", 1.0}}}};
  CHECK_THROWS_AS(s.validate(), validation_error);
  s.entries = {{0.0, {{"a", 1.0}}}, {0.0, {{"a", 1.0}}}};
  CHECK_THROWS_AS(s.validate(), validation_error);
  s.entries = {{0.0, {{"a", 1.0}}}, {1.0, {{"a", 2.0}}}};
  CHECK_NOTHROW(s.validate());
}

}  // TEST_SUITE
