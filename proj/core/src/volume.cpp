#include "longseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "longseg/error.hpp"

namespace longseg {

std::size_t MultiContrastVolume::num_masked() const {
  std::size_t n = 0;
  for (auto m : mask) n += (m != 0);
  return n;
}

std::vector<std::size_t> MultiContrastVolume::masked_indices() const {
  std::vector<std::size_t> out;
  out.reserve(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) out.push_back(i);
  }
  return out;
}

void MultiContrastVolume::validate() const {
  grid.validate();
  if (n_contrasts < 1) throw validation_error("volume: n_contrasts must be >= 1");
  const std::size_t nv = grid.num_voxels();
  if (data.size() != nv * static_cast<std::size_t>(n_contrasts)) {
    throw validation_error("volume: data size does not match dims * n_contrasts");
  }
  if (mask.size() != nv) throw validation_error("volume: mask size does not match dims");
  for (std::size_t i = 0; i < nv; ++i) {
    if (!mask[i]) continue;
    for (int c = 0; c < n_contrasts; ++c) {
      if (!std::isfinite(value(i, c))) {
        throw numeric_error("volume: non-finite value at masked voxel " + std::to_string(i) +
                            ", contrast " + std::to_string(c));
      }
    }
  }
}

void LabelVolume::validate() const {
  grid.validate();
  const std::size_t nv = grid.num_voxels();
  if (labels.size() != nv) throw validation_error("labels: size does not match dims");
  for (std::size_t i = 0; i < nv; ++i) {
    if (labels[i] < 0 || labels[i] > n_classes) {
      throw validation_error("labels: value out of range at voxel " + std::to_string(i));
    }
  }
  if (!posteriors.empty()) {
    if (posteriors.size() != nv * static_cast<std::size_t>(n_classes)) {
      throw validation_error("labels: posterior array size mismatch");
    }
    for (std::size_t i = 0; i < nv; ++i) {
      if (labels[i] == 0) continue;
      double sum = 0.0;
      int argmax = 0;
      double best = -1.0;
      for (int k = 0; k < n_classes; ++k) {
        const double p = posterior(i, k);
        if (p < -1e-12 || p > 1.0 + 1e-12) {
          throw validation_error("labels: posterior out of [0,1] at voxel " + std::to_string(i));
        }
        sum += p;
        if (p > best) {
          best = p;
          argmax = k + 1;
        }
      }
      if (std::abs(sum - 1.0) > 1e-6) {
        throw validation_error("labels: posterior row does not sum to 1 at voxel " + std::to_string(i));
      }
      if (argmax != labels[i] && posterior(i, labels[i] - 1) < best - 1e-12) {
        throw validation_error("labels: label is not the posterior argmax at voxel " + std::to_string(i));
      }
    }
  }
}

void VolumeTimeSeries::validate() const {
  if (entries.empty()) throw validation_error("time series: no entries");
  if (entries.front().time_years != 0.0) {
    throw validation_error("time series: first offset must be 0");
  }
  for (std::size_t t = 1; t < entries.size(); ++t) {
    if (!(entries[t].time_years > entries[t - 1].time_years)) {
      throw validation_error("time series: offsets must strictly increase");
    }
  }
  for (const auto& e : entries) {
    for (const auto& [name, v] : e.volumes_mm3) {
      if (!(v >= 0.0)) throw validation_error("time series: negative volume for " + name);
    }
  }
}

// ---- MGV -------------------------------------------------------------------

namespace {

std::string read_header_line(std::ifstream& in, const std::string& path) {
  std::string line;
  if (!std::getline(in, line)) {
    throw format_error(path + ": unexpected end of header");
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

}  // namespace

MultiContrastVolume read_volume(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw format_error(path + ": cannot open file");

  MultiContrastVolume vol;
  bool saw_magic = false, saw_dims = false, saw_nc = false, saw_vox = false, saw_log = false;
  for (;;) {
    const std::string line = read_header_line(in, path);
    if (line == "END") break;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "MGV") {
      int version = 0;
      ls >> version;
      if (!ls || version != 1) throw format_error(path + ": bad MGV version line");
      saw_magic = true;
    } else if (key == "DIMS") {
      ls >> vol.grid.dims[0] >> vol.grid.dims[1] >> vol.grid.dims[2];
      if (!ls) throw format_error(path + ": bad DIMS line");
      for (int a = 0; a < 3; ++a) {
        if (vol.grid.dims[a] < 1) throw format_error(path + ": DIMS must be positive");
      }
      saw_dims = true;
    } else if (key == "NCONTRASTS") {
      ls >> vol.n_contrasts;
      if (!ls || vol.n_contrasts < 1) throw format_error(path + ": bad NCONTRASTS line");
      saw_nc = true;
    } else if (key == "VOXSIZE") {
      ls >> vol.grid.voxel_size[0] >> vol.grid.voxel_size[1] >> vol.grid.voxel_size[2];
      if (!ls) throw format_error(path + ": bad VOXSIZE line");
      for (int a = 0; a < 3; ++a) {
        if (!(vol.grid.voxel_size[a] > 0.0)) throw format_error(path + ": VOXSIZE must be positive");
      }
      saw_vox = true;
    } else if (key == "LOG") {
      int flag = -1;
      ls >> flag;
      if (!ls || (flag != 0 && flag != 1)) throw format_error(path + ": bad LOG line");
      vol.log_transformed = (flag == 1);
      saw_log = true;
    } else {
      throw format_error(path + ": unknown header key '" + key + "'");
    }
  }
  if (!saw_magic) throw format_error(path + ": missing MGV line");
  if (!saw_dims) throw format_error(path + ": missing DIMS line");
  if (!saw_nc) throw format_error(path + ": missing NCONTRASTS line");
  if (!saw_vox) throw format_error(path + ": missing VOXSIZE line");
  if (!saw_log) throw format_error(path + ": missing LOG line");

  const std::size_t count = vol.grid.num_voxels() * static_cast<std::size_t>(vol.n_contrasts);
  std::vector<float> raw(count);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != count * sizeof(float)) {
    throw format_error(path + ": truncated payload, expected " + std::to_string(count) + " values");
  }
  char extra;
  if (in.read(&extra, 1)) throw format_error(path + ": trailing bytes after payload");

  vol.data.assign(raw.begin(), raw.end());
  vol.mask.assign(vol.grid.num_voxels(), 1);
  return vol;
}

void write_volume(const MultiContrastVolume& vol, const std::string& path) {
  vol.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw error(path + ": cannot open file for writing");
  out << "MGV 1\n";
  out << "DIMS " << vol.grid.dims[0] << ' ' << vol.grid.dims[1] << ' ' << vol.grid.dims[2] << '\n';
  out << "NCONTRASTS " << vol.n_contrasts << '\n';
  std::ostringstream vox;
  vox.precision(17);
  vox << "VOXSIZE " << vol.grid.voxel_size[0] << ' ' << vol.grid.voxel_size[1] << ' '
      << vol.grid.voxel_size[2];
  out << vox.str() << '\n';
  out << "LOG " << (vol.log_transformed ? 1 : 0) << '\n';
  out << "END\n";
  std::vector<float> raw(vol.data.size());
  for (std::size_t i = 0; i < vol.data.size(); ++i) raw[i] = static_cast<float>(vol.data[i]);
  out.write(reinterpret_cast<const char*>(raw.data()),
            static_cast<std::streamsize>(raw.size() * sizeof(float)));
  if (!out) throw error(path + ": write failed");
}

void write_label_volume(const LabelVolume& seg, const std::string& path) {
  seg.validate();
  MultiContrastVolume vol;
  vol.grid = seg.grid;
  vol.n_contrasts = 1;
  vol.data.assign(seg.labels.begin(), seg.labels.end());
  vol.mask.assign(seg.grid.num_voxels(), 1);
  write_volume(vol, path);
}

LabelVolume read_label_volume(const std::string& path) {
  const MultiContrastVolume vol = read_volume(path);
  if (vol.n_contrasts != 1) throw format_error(path + ": label volume must have NCONTRASTS 1");
  LabelVolume seg;
  seg.grid = vol.grid;
  seg.labels.resize(vol.data.size());
  std::int32_t max_label = 0;
  for (std::size_t i = 0; i < vol.data.size(); ++i) {
    const double v = vol.data[i];
    if (v != std::floor(v) || v < 0.0) {
      throw format_error(path + ": non-integral label value at voxel " + std::to_string(i));
    }
    seg.labels[i] = static_cast<std::int32_t>(v);
    max_label = std::max(max_label, seg.labels[i]);
  }
  seg.n_classes = max_label;
  return seg;
}

void write_mask_volume(const VoxelGrid& grid, const std::vector<std::uint8_t>& mask,
                       const std::string& path) {
  MultiContrastVolume vol;
  vol.grid = grid;
  vol.n_contrasts = 1;
  vol.data.reserve(mask.size());
  for (auto m : mask) vol.data.push_back(m ? 1.0 : 0.0);
  vol.mask.assign(grid.num_voxels(), 1);
  write_volume(vol, path);
}

std::vector<std::uint8_t> read_mask_volume(const std::string& path, const VoxelGrid& expected_grid) {
  const MultiContrastVolume vol = read_volume(path);
  if (vol.grid.dims != expected_grid.dims) throw format_error(path + ": mask grid dims mismatch");
  std::vector<std::uint8_t> mask(vol.data.size());
  for (std::size_t i = 0; i < vol.data.size(); ++i) {
    if (vol.data[i] != 0.0 && vol.data[i] != 1.0) {
      throw format_error(path + ": mask value not 0/1 at voxel " + std::to_string(i));
    }
    mask[i] = vol.data[i] != 0.0 ? 1 : 0;
  }
  return mask;
}

// ---- Operations ------------------------------------------------------------

MultiContrastVolume log_transform(const MultiContrastVolume& vol, double floor) {
  if (vol.log_transformed) throw state_error("log_transform: volume is already log-transformed");
  if (!(floor > 0.0)) throw validation_error("log_transform: floor must be positive");
  MultiContrastVolume out = vol;
  const std::size_t nv = vol.grid.num_voxels();
  for (std::size_t i = 0; i < nv; ++i) {
    if (!vol.mask[i]) continue;
    for (int c = 0; c < vol.n_contrasts; ++c) {
      out.value(i, c) = std::log(std::max(vol.value(i, c), floor));
    }
  }
  out.log_transformed = true;
  return out;
}

double default_log_floor(const MultiContrastVolume& vol, int contrast, double ratio) {
  double vmax = 0.0;
  const std::size_t nv = vol.grid.num_voxels();
  for (std::size_t i = 0; i < nv; ++i) {
    if (vol.mask[i]) vmax = std::max(vmax, vol.value(i, contrast));
  }
  return std::max(vmax * ratio, 1e-300);
}

std::map<std::string, double> structure_volumes(const LabelVolume& seg,
                                                const std::vector<std::string>& names) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(seg.n_classes) + 1, 0);
  for (auto l : seg.labels) {
    if (l > 0) counts[static_cast<std::size_t>(l)]++;
  }
  const double vv = seg.grid.voxel_volume_mm3();
  std::map<std::string, double> out;
  for (int k = 1; k <= seg.n_classes; ++k) {
    std::string name = (static_cast<std::size_t>(k - 1) < names.size())
                           ? names[static_cast<std::size_t>(k - 1)]
                           : "class" + std::to_string(k);
    out[name] = static_cast<double>(counts[static_cast<std::size_t>(k)]) * vv;
  }
  return out;
}

// ---- Volume tables ---------------------------------------------------------

void write_volume_table(const std::vector<VolumeTimeSeries>& table, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw error(path + ": cannot open file for writing");
  out << "subject,time_years,structure,volume_mm3\n";
  out.precision(17);
  for (const auto& series : table) {
    series.validate();
    for (const auto& e : series.entries) {
      for (const auto& [name, v] : e.volumes_mm3) {
        out << series.subject_id << ',' << e.time_years << ',' << name << ',' << v << '\n';
      }
    }
  }
  if (!out) throw error(path + ": write failed");
}

std::vector<VolumeTimeSeries> read_volume_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw format_error(path + ": cannot open file");
  std::string line;
  if (!std::getline(in, line)) throw format_error(path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "subject,time_years,structure,volume_mm3") {
    throw format_error(path + ": bad volume table header");
  }

  // Preserve subject order of first appearance; entries sorted by time.
  std::vector<VolumeTimeSeries> table;
  std::map<std::string, std::size_t> subject_pos;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string subject, time_s, structure, volume_s;
    if (!std::getline(ls, subject, ',') || !std::getline(ls, time_s, ',') ||
        !std::getline(ls, structure, ',') || !std::getline(ls, volume_s)) {
      throw format_error(path + ": malformed row at line " + std::to_string(lineno));
    }
    double time = 0.0, volume = 0.0;
    try {
      time = std::stod(time_s);
      volume = std::stod(volume_s);
    } catch (const std::exception&) {
      throw format_error(path + ": non-numeric field at line " + std::to_string(lineno));
    }
    auto it = subject_pos.find(subject);
    if (it == subject_pos.end()) {
      it = subject_pos.emplace(subject, table.size()).first;
      table.push_back(VolumeTimeSeries{subject, {}});
    }
    auto& series = table[it->second];
    auto entry = std::find_if(series.entries.begin(), series.entries.end(),
                              [&](const auto& e) { return e.time_years == time; });
    if (entry == series.entries.end()) {
      series.entries.push_back({time, {}});
      entry = std::prev(series.entries.end());
    }
    (*entry).volumes_mm3[structure] = volume;
  }
  for (auto& series : table) {
    std::sort(series.entries.begin(), series.entries.end(),
              [](const auto& a, const auto& b) { return a.time_years < b.time_years; });
    series.validate();
  }
  return table;
}

}  // namespace longseg
