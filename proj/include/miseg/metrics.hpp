#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "miseg/volume.hpp"

namespace miseg {

struct MetricsRecord {
  std::string sample_id;
  int organ = 0;
  double dsc = 0.0;
  std::optional<double> hd_mm;  // empty when either mask is empty
};

// 2|P n G| / (|P| + |G|); 1.0 when both masks are empty.
double dsc_metric(const LabelVolume& pred, const LabelVolume& gt, int organ);

// Max of the two directed Hausdorff distances between the organ masks'
// surface voxels (mask voxels with a face neighbor outside the mask), in
// physical millimeters. Empty when either mask is empty.
std::optional<double> hausdorff_mm(const LabelVolume& pred, const LabelVolume& gt, int organ);

enum class Alternative { kTwoSided, kGreater };

struct MwuResult {
  double u = 0.0;  // U statistic of the first sample
  double p = 1.0;
};

// Rank-sum U with midranks for ties. Exact p by enumeration over rank
// assignments when n1+n2 <= 16 and the pooled sample is tie-free; otherwise
// normal approximation with tie and continuity corrections.
MwuResult mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b,
                         Alternative alt = Alternative::kTwoSided);

// CSV rows: sample_id,organ,dsc,hd_mm with an empty hd field when undefined.
void write_records_csv(const std::vector<MetricsRecord>& records,
                       const std::filesystem::path& path);

}  // namespace miseg
