#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "miseg/common.hpp"

namespace miseg {

// Spacing-aware 3D fields. dims are voxel counts in (nz, ny, nx) order and
// data is stored z-slowest / x-fastest; spacing is millimeters per voxel in
// (sx, sy, sz) order.

struct Volume {
  std::array<int64_t, 3> dims{0, 0, 0};       // nz, ny, nx
  std::array<double, 3> spacing{1, 1, 1};     // sx, sy, sz
  std::vector<float> data;
  std::string provenance;

  int64_t voxels() const { return dims[0] * dims[1] * dims[2]; }
  float& at(int64_t z, int64_t y, int64_t x) { return data[size_t((z * dims[1] + y) * dims[2] + x)]; }
  float at(int64_t z, int64_t y, int64_t x) const { return data[size_t((z * dims[1] + y) * dims[2] + x)]; }
  void validate() const;
};

struct LabelVolume {
  std::array<int64_t, 3> dims{0, 0, 0};
  std::array<double, 3> spacing{1, 1, 1};
  std::vector<uint8_t> labels;
  int num_classes = 0;  // background is class 0
  std::string provenance;

  int64_t voxels() const { return dims[0] * dims[1] * dims[2]; }
  uint8_t& at(int64_t z, int64_t y, int64_t x) { return labels[size_t((z * dims[1] + y) * dims[2] + x)]; }
  uint8_t at(int64_t z, int64_t y, int64_t x) const { return labels[size_t((z * dims[1] + y) * dims[2] + x)]; }
  void validate() const;
};

struct IntensityRange {
  double global_min = 0.0;
  double global_max = 0.0;
  void validate() const {
    if (!(global_min < global_max)) throw ValidationError("intensity range: min must be < max");
  }
};

using AnyVolume = std::variant<Volume, LabelVolume>;

// File format: bytes 0-7 magic "MIVOL001"; bytes 8-11 u32 little-endian JSON
// header length H; bytes 12..12+H UTF-8 JSON header; remainder little-endian
// payload in z-slowest / x-fastest order.
inline constexpr char kVolumeMagic[9] = "MIVOL001";

void write_volume(const Volume& v, const std::filesystem::path& path);
void write_volume(const LabelVolume& v, const std::filesystem::path& path);
AnyVolume read_volume(const std::filesystem::path& path);
Volume read_image(const std::filesystem::path& path);
LabelVolume read_labels(const std::filesystem::path& path);

// Output dims = round(dims * spacing / target), at least 1 per axis.
// Trilinear interpolation with clamp-to-border sampling for images,
// nearest-neighbor for labels. Equal spacing is an exact identity.
Volume resample(const Volume& v, const std::array<double, 3>& target_spacing);
LabelVolume resample(const LabelVolume& v, const std::array<double, 3>& target_spacing);

// v' = 2*(v - min)/(max - min) - 1, clamped to [-1, 1].
Volume normalize_intensity(const Volume& v, const IntensityRange& r);

// Min/max over every voxel of every listed volume.
IntensityRange dataset_intensity_range(const std::vector<std::filesystem::path>& paths);

}  // namespace miseg
