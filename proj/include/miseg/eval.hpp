#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "miseg/metrics.hpp"
#include "miseg/phantom.hpp"
#include "miseg/segnet.hpp"

namespace miseg {

struct SweepConfig {
  std::vector<double> noise_stds{0.0, 0.0005, 0.001, 0.005, 0.01};
  double noise_mean = 0.0;
  int seeds_per_std = 1;
  std::array<int64_t, 3> window{16, 32, 32};  // z, y, x
  double overlap = 0.8;

  void validate() const {
    for (double s : noise_stds)
      if (!(s >= 0.0)) throw ValidationError("sweep.noise_stds must be >= 0");
    if (seeds_per_std < 1) throw ValidationError("sweep.seeds_per_std must be >= 1");
    if (!(overlap >= 0.0 && overlap < 1.0)) throw ValidationError("sweep.overlap must be in [0,1)");
    for (int64_t w : window)
      if (w < 1) throw ValidationError("sweep.window entries must be >= 1");
  }
};

// Per-class probabilities on a voxel grid, channel-major storage (C,Z,Y,X).
struct ProbVolume {
  std::array<int64_t, 3> dims{0, 0, 0};
  std::array<double, 3> spacing{1, 1, 1};
  int num_classes = 0;
  std::vector<float> data;

  int64_t voxels() const { return dims[0] * dims[1] * dims[2]; }
  float& at(int c, int64_t z, int64_t y, int64_t x) {
    return data[size_t(((c * dims[0] + z) * dims[1] + y) * dims[2] + x)];
  }
  float at(int c, int64_t z, int64_t y, int64_t x) const {
    return data[size_t(((c * dims[0] + z) * dims[1] + y) * dims[2] + x)];
  }
};

// Window start offsets along one axis: stride max(1, round((1-overlap)*window)),
// last window snapped to the far edge.
std::vector<int64_t> window_starts(int64_t dim, int64_t window, double overlap);

// Overlapping windows, softmax probabilities averaged uniformly over the
// windows covering each voxel. Volumes smaller than the window are padded
// with edge replication and cropped back.
ProbVolume sliding_window_predict(const SegNet& net, const Volume& v,
                                  const std::array<int64_t, 3>& window, double overlap);

// Per-voxel argmax; ties break toward the lower class index.
LabelVolume predict_labels(const ProbVolume& probs);

struct EvalOptions {
  double noise_std = 0.0;
  double noise_mean = 0.0;
  uint64_t seed = 0;
  std::array<int64_t, 3> window{16, 32, 32};
  double overlap = 0.8;
  bool test_split = true;
  int replicate = 0;  // distinguishes repeat noise draws at the same std
};

// For each sample of the split: normalize with the manifest's training
// statistics, resample to the manifest grid, corrupt, predict, resample the
// prediction back to the sample's native grid, and score every foreground
// organ. Noise streams are fixed per (sample, std, replicate) so two models
// evaluated with the same options see byte-identical inputs.
std::vector<MetricsRecord> evaluate_dataset(const SegNet& net, const DatasetManifest& manifest,
                                            const EvalOptions& opt);

// Record rows keyed by (sample, organ, noise std); the harness CSV carries
// the noise std column in addition to the metric fields.
struct SweepRecord {
  double noise_std = 0.0;
  MetricsRecord rec;
};

void write_sweep_csv(const std::vector<SweepRecord>& rows, const std::filesystem::path& path);
std::vector<SweepRecord> read_sweep_csv(const std::filesystem::path& path);

struct TableRow {
  double noise_std = 0.0;
  std::string organ;  // label id, or "average"
  double dsc_mean_a = 0.0, dsc_std_a = 0.0;
  double dsc_mean_b = 0.0, dsc_std_b = 0.0;
  double improvement = 0.0;  // mean DSC (a) - mean DSC (b)
  std::optional<double> hd_mean_a, hd_std_a, hd_mean_b, hd_std_b, hd_improvement;
  double p_value = 1.0;  // two-sided Mann-Whitney on the paired DSC samples
};

struct MetricsTable {
  std::string model_a, model_b;
  std::vector<TableRow> rows;
};

// Requires both record sets to cover identical (sample, organ, std) keys.
MetricsTable compare_models(const std::vector<SweepRecord>& a, const std::vector<SweepRecord>& b,
                            const std::string& name_a, const std::string& name_b);

void write_table_csv(const MetricsTable& t, const std::filesystem::path& path);
void write_table_json(const MetricsTable& t, const std::filesystem::path& path);

}  // namespace miseg
