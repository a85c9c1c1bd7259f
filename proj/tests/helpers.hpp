#pragma once

#include <unistd.h>

#include <array>
#include <filesystem>
#include <string>

#include "miseg/rng.hpp"
#include "miseg/tensor.hpp"
#include "miseg/volume.hpp"

namespace miseg::test {

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    auto base = std::filesystem::temp_directory_path();
    for (int i = 0;; ++i) {
      path_ = base / ("miseg_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(i));
      std::error_code ec;
      if (std::filesystem::create_directory(path_, ec)) break;
    }
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Volume random_volume(RngStream& rng, std::array<int64_t, 3> dims,
                            std::array<double, 3> spacing = {1, 1, 1}) {
  Volume v;
  v.dims = dims;
  v.spacing = spacing;
  v.data.resize(size_t(v.voxels()));
  for (auto& f : v.data) f = float(rng.uniform(-1.0, 1.0));
  return v;
}

inline LabelVolume random_labels(RngStream& rng, std::array<int64_t, 3> dims, int num_classes,
                                 std::array<double, 3> spacing = {1, 1, 1}) {
  LabelVolume v;
  v.dims = dims;
  v.spacing = spacing;
  v.num_classes = num_classes;
  v.labels.resize(size_t(v.voxels()));
  for (auto& l : v.labels) l = uint8_t(rng.uniform_int(0, num_classes - 1));
  return v;
}

// FNV-1a over raw bytes, for golden-file pinning.
inline uint64_t fnv1a(const void* data, size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = 1469598103934665603ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace miseg::test
