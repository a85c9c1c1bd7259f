#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "miseg/volume.hpp"

namespace miseg {

// Deterministic synthetic dataset: ellipsoidal "organs" with per-instance
// base intensities and voxel-level texture noise, placed without overlap by
// a seeded counter-based stream, so every sample is a pure function of
// (config, sample index).

struct OrganSpec {
  int label = 1;
  std::array<double, 2> intensity{0.0, 0.1};    // base intensity interval, normalized units
  std::array<double, 2> semi_axes{3.0, 6.0};    // per-axis semi-axis range, voxels
  int count = 1;
};

struct PhantomConfig {
  std::array<int64_t, 3> dims{24, 48, 48};      // nz, ny, nx
  std::array<double, 3> spacing_mm{2.0, 2.0, 3.0};  // sx, sy, sz
  std::vector<OrganSpec> organs;
  std::array<double, 2> background_intensity{-0.85, -0.75};
  double texture_noise_std = 0.01;
  uint64_t seed = 42;

  int num_classes() const;
  void validate() const;
  static PhantomConfig defaults();
};

struct PlacedOrgan {
  int label = 0;
  std::array<double, 3> center{};     // z, y, x voxel coordinates
  std::array<double, 3> semi_axes{};  // z, y, x in voxels
  double base_intensity = 0.0;
};

struct PhantomSample {
  Volume image;
  LabelVolume labels;
  std::vector<PlacedOrgan> placed;
};

PhantomSample generate_phantom(const PhantomConfig& cfg, int64_t sample_index);

struct SampleRef {
  std::string image;   // path relative to the manifest directory
  std::string labels;
};

struct DatasetManifest {
  std::vector<SampleRef> train;  // first floor(0.8*n) samples
  std::vector<SampleRef> test;   // the rest
  IntensityRange range;          // over training images only
  std::array<double, 3> spacing_mm{2.0, 2.0, 3.0};
  int num_classes = 0;
  std::filesystem::path base_dir;  // set on load/save; not serialized

  std::filesystem::path image_path(const SampleRef& s) const { return base_dir / s.image; }
  std::filesystem::path labels_path(const SampleRef& s) const { return base_dir / s.labels; }
};

DatasetManifest generate_dataset(const PhantomConfig& cfg, int64_t n,
                                 const std::filesystem::path& out_dir);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

// v + N(mean, std) i.i.d. per voxel from the seeded stream; no clamping.
Volume add_gaussian_noise(const Volume& v, double mean, double std, uint64_t seed);

}  // namespace miseg
