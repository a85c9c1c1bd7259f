#pragma once

// Independent reference implementations used to check the production paths.
// Everything here is deliberately direct: explicit point lists, pairwise
// scans, and exhaustive enumeration.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "miseg/metrics.hpp"
#include "miseg/volume.hpp"

namespace miseg::test {

// Directed Hausdorff over explicit surface-voxel lists, O(n^2) pairwise.
inline std::optional<double> brute_hausdorff(const LabelVolume& a, const LabelVolume& b,
                                             int organ) {
  auto surface = [organ](const LabelVolume& v) {
    std::vector<std::array<int64_t, 3>> pts;
    for (int64_t z = 0; z < v.dims[0]; ++z)
      for (int64_t y = 0; y < v.dims[1]; ++y)
        for (int64_t x = 0; x < v.dims[2]; ++x) {
          if (v.at(z, y, x) != organ) continue;
          bool srf = z == 0 || y == 0 || x == 0 || z == v.dims[0] - 1 || y == v.dims[1] - 1 ||
                     x == v.dims[2] - 1;
          if (!srf)
            srf = v.at(z - 1, y, x) != organ || v.at(z + 1, y, x) != organ ||
                  v.at(z, y - 1, x) != organ || v.at(z, y + 1, x) != organ ||
                  v.at(z, y, x - 1) != organ || v.at(z, y, x + 1) != organ;
          if (srf) pts.push_back({z, y, x});
        }
    return pts;
  };
  const auto pa = surface(a);
  const auto pb = surface(b);
  if (pa.empty() || pb.empty()) return std::nullopt;
  const double sx = a.spacing[0], sy = a.spacing[1], sz = a.spacing[2];
  auto directed = [&](const auto& from, const auto& to) {
    double worst = 0.0;
    for (const auto& p : from) {
      double best = 1e300;
      for (const auto& q : to) {
        const double dx = double(p[2] - q[2]) * sx;
        const double dy = double(p[1] - q[1]) * sy;
        const double dz = double(p[0] - q[0]) * sz;
        best = std::min(best, dx * dx + dy * dy + dz * dz);
      }
      worst = std::max(worst, best);
    }
    return std::sqrt(worst);
  };
  return std::max(directed(pa, pb), directed(pb, pa));
}

// Pairwise-count Dice from the definition.
inline double brute_dsc(const LabelVolume& a, const LabelVolume& b, int organ) {
  int64_t na = 0, nb = 0, inter = 0;
  for (size_t i = 0; i < a.labels.size(); ++i) {
    const bool ia = a.labels[i] == organ;
    const bool ib = b.labels[i] == organ;
    na += ia;
    nb += ib;
    inter += ia && ib;
  }
  return na + nb == 0 ? 1.0 : 2.0 * double(inter) / double(na + nb);
}

// Exact Mann-Whitney p by enumerating every assignment of group labels to
// the pooled tie-free values via next_permutation over a selector mask.
inline double enum_mwu_p(const std::vector<double>& a, const std::vector<double>& b,
                         Alternative alt) {
  std::vector<double> pool = a;
  pool.insert(pool.end(), b.begin(), b.end());
  const size_t n1 = a.size(), n = pool.size();
  std::vector<int> mask(n, 0);
  std::fill(mask.begin(), mask.begin() + n1, 1);
  std::sort(mask.begin(), mask.end());
  auto u_of = [&](const std::vector<int>& m) {
    double u = 0.0;
    for (size_t i = 0; i < n; ++i)
      if (m[i])
        for (size_t j = 0; j < n; ++j)
          if (!m[j]) u += pool[i] > pool[j] ? 1.0 : (pool[i] == pool[j] ? 0.5 : 0.0);
    return u;
  };
  std::vector<int> obs(n, 0);
  std::fill(obs.begin(), obs.begin() + n1, 1);
  const double u_obs = u_of(obs);
  const double n1n2 = double(n1) * double(n - n1);
  int64_t total = 0, hits = 0;
  do {
    const double u = u_of(mask);
    ++total;
    if (alt == Alternative::kGreater) {
      hits += u >= u_obs - 1e-12;
    } else {
      const double lo = std::min(u_obs, n1n2 - u_obs);
      hits += (u <= lo + 1e-12) || (u >= n1n2 - lo - 1e-12);
    }
  } while (std::next_permutation(mask.begin(), mask.end()));
  return double(hits) / double(total);
}

}  // namespace miseg::test
