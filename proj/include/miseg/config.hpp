#pragma once

#include <filesystem>

#include "miseg/eval.hpp"
#include "miseg/phantom.hpp"
#include "miseg/train.hpp"

namespace miseg {

// Whole-pipeline configuration: one JSON file, strict schema (unknown keys
// are rejected by name), one seed from which every stream derives.
struct RunConfig {
  uint64_t seed = 42;
  PhantomConfig phantom = PhantomConfig::defaults();
  int64_t dataset_n = 20;
  std::filesystem::path dataset_dir = "data";
  TrainConfig train;       // includes net and optional afa section
  SweepConfig sweep;

  static RunConfig defaults();
  static RunConfig from_file(const std::filesystem::path& path);
  static RunConfig from_json_text(const std::string& text);

  void validate() const;
};

}  // namespace miseg
