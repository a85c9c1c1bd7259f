#include "miseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace miseg {

namespace {

void check_compatible(const LabelVolume& a, const LabelVolume& b, bool spacing_too) {
  if (a.dims != b.dims) throw ValidationError("metric: volume dims differ");
  if (spacing_too && a.spacing != b.spacing) throw ValidationError("metric: volume spacing differs");
}

}  // namespace

double dsc_metric(const LabelVolume& pred, const LabelVolume& gt, int organ) {
  check_compatible(pred, gt, false);
  int64_t p = 0, g = 0, both = 0;
  for (size_t i = 0; i < pred.labels.size(); ++i) {
    const bool ip = pred.labels[i] == organ;
    const bool ig = gt.labels[i] == organ;
    p += ip;
    g += ig;
    both += ip && ig;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * double(both) / double(p + g);
}

namespace {

constexpr double kFar = 1e20;

std::vector<char> surface_mask(const LabelVolume& v, int organ, int64_t* count) {
  const int64_t nz = v.dims[0], ny = v.dims[1], nx = v.dims[2];
  std::vector<char> surf(size_t(v.voxels()), 0);
  int64_t c = 0;
  for (int64_t z = 0; z < nz; ++z)
    for (int64_t y = 0; y < ny; ++y)
      for (int64_t x = 0; x < nx; ++x) {
        if (v.at(z, y, x) != organ) continue;
        const bool boundary =
            z == 0 || v.at(z - 1, y, x) != organ || z == nz - 1 || v.at(z + 1, y, x) != organ ||
            y == 0 || v.at(z, y - 1, x) != organ || y == ny - 1 || v.at(z, y + 1, x) != organ ||
            x == 0 || v.at(z, y, x - 1) != organ || x == nx - 1 || v.at(z, y, x + 1) != organ;
        if (boundary) {
          surf[size_t((z * ny + y) * nx + x)] = 1;
          ++c;
        }
      }
  if (count) *count = c;
  return surf;
}

// 1-D squared-distance transform over parabolas, grid step s (Felzenszwalb &
// Huttenlocher). f and d may not alias; n <= buffers' capacity.
void dt1d(const double* f, double* d, int n, double s, int* v, double* z) {
  int k = 0;
  v[0] = 0;
  z[0] = -kFar;
  z[1] = kFar;
  for (int q = 1; q < n; ++q) {
    const double xq = double(q) * s;
    double inter;
    for (;;) {
      const double xv = double(v[k]) * s;
      inter = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * (xq - xv));
      if (inter <= z[k] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = inter;
    z[k + 1] = kFar;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    const double xq = double(q) * s;
    while (z[k + 1] < xq) ++k;
    const double dx = xq - double(v[k]) * s;
    d[q] = dx * dx + f[v[k]];
  }
}

// Exact squared Euclidean distance (mm^2) to the nearest seed voxel, with
// anisotropic spacing folded into the per-axis grid steps.
std::vector<double> edt_sq(const std::vector<char>& seed, const std::array<int64_t, 3>& dims,
                           const std::array<double, 3>& spacing) {
  const int64_t nz = dims[0], ny = dims[1], nx = dims[2];
  const double sx = spacing[0], sy = spacing[1], sz = spacing[2];
  std::vector<double> dist(seed.size());
  for (size_t i = 0; i < seed.size(); ++i) dist[i] = seed[i] ? 0.0 : kFar;

  const size_t nmax = size_t(std::max({nz, ny, nx}));
  std::vector<double> f(nmax), d(nmax), z(nmax + 1);
  std::vector<int> v(nmax);

  for (int64_t zz = 0; zz < nz; ++zz)  // x axis
    for (int64_t y = 0; y < ny; ++y) {
      double* row = dist.data() + (zz * ny + y) * nx;
      std::copy(row, row + nx, f.data());
      dt1d(f.data(), row, int(nx), sx, v.data(), z.data());
    }
  for (int64_t zz = 0; zz < nz; ++zz)  // y axis
    for (int64_t x = 0; x < nx; ++x) {
      for (int64_t y = 0; y < ny; ++y) f[size_t(y)] = dist[size_t((zz * ny + y) * nx + x)];
      dt1d(f.data(), d.data(), int(ny), sy, v.data(), z.data());
      for (int64_t y = 0; y < ny; ++y) dist[size_t((zz * ny + y) * nx + x)] = d[size_t(y)];
    }
  for (int64_t y = 0; y < ny; ++y)  // z axis
    for (int64_t x = 0; x < nx; ++x) {
      for (int64_t zz = 0; zz < nz; ++zz) f[size_t(zz)] = dist[size_t((zz * ny + y) * nx + x)];
      dt1d(f.data(), d.data(), int(nz), sz, v.data(), z.data());
      for (int64_t zz = 0; zz < nz; ++zz) dist[size_t((zz * ny + y) * nx + x)] = d[size_t(zz)];
    }
  return dist;
}

double directed_max(const std::vector<char>& from_surface, const std::vector<double>& dist_sq) {
  double mx = 0.0;
  for (size_t i = 0; i < from_surface.size(); ++i)
    if (from_surface[i]) mx = std::max(mx, dist_sq[i]);
  return std::sqrt(mx);
}

}  // namespace

std::optional<double> hausdorff_mm(const LabelVolume& pred, const LabelVolume& gt, int organ) {
  check_compatible(pred, gt, true);
  int64_t np = 0, ng = 0;
  const std::vector<char> sp = surface_mask(pred, organ, &np);
  const std::vector<char> sg = surface_mask(gt, organ, &ng);
  if (np == 0 || ng == 0) return std::nullopt;
  const std::vector<double> dist_to_g = edt_sq(sg, pred.dims, pred.spacing);
  const std::vector<double> dist_to_p = edt_sq(sp, pred.dims, pred.spacing);
  return std::max(directed_max(sp, dist_to_g), directed_max(sg, dist_to_p));
}

namespace {

struct Ranked {
  double tie_sum = 0.0;  // sum of t^3 - t over tie groups
  bool has_ties = false;
  double r1 = 0.0;  // rank sum of the first sample
};

Ranked midranks(const std::vector<double>& a, const std::vector<double>& b) {
  struct Item {
    double v;
    int group;
  };
  std::vector<Item> pool;
  pool.reserve(a.size() + b.size());
  for (double v : a) pool.push_back({v, 0});
  for (double v : b) pool.push_back({v, 1});
  std::stable_sort(pool.begin(), pool.end(), [](const Item& x, const Item& y) { return x.v < y.v; });
  Ranked r;
  size_t i = 0;
  while (i < pool.size()) {
    size_t j = i;
    while (j < pool.size() && pool[j].v == pool[i].v) ++j;
    const double t = double(j - i);
    const double rank = (double(i + 1) + double(j)) / 2.0;  // midrank of the tied block
    if (t > 1.0) {
      r.has_ties = true;
      r.tie_sum += t * t * t - t;
    }
    for (size_t k = i; k < j; ++k)
      if (pool[k].group == 0) r.r1 += rank;
    i = j;
  }
  return r;
}

double normal_sf(double zv) { return 0.5 * std::erfc(zv / std::sqrt(2.0)); }

// Number of n1-subsets of ranks {1..N} with each possible rank sum.
std::vector<double> rank_sum_counts(int N, int n1) {
  const int smax = N * (N + 1) / 2;
  std::vector<std::vector<double>> dp(size_t(n1) + 1, std::vector<double>(size_t(smax) + 1, 0.0));
  dp[0][0] = 1.0;
  for (int rank = 1; rank <= N; ++rank)
    for (int k = std::min(rank, n1); k >= 1; --k)
      for (int s = smax; s >= rank; --s)
        if (dp[size_t(k - 1)][size_t(s - rank)] > 0.0)
          dp[size_t(k)][size_t(s)] += dp[size_t(k - 1)][size_t(s - rank)];
  return dp[size_t(n1)];
}

}  // namespace

MwuResult mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b,
                         Alternative alt) {
  if (a.empty() || b.empty()) throw ValidationError("mann_whitney_u: samples must be non-empty");
  const double n1 = double(a.size());
  const double n2 = double(b.size());
  const Ranked r = midranks(a, b);
  MwuResult out;
  out.u = r.r1 - n1 * (n1 + 1.0) / 2.0;

  const int N = int(a.size() + b.size());
  if (N <= 16 && !r.has_ties) {
    // exact: count rank assignments
    const std::vector<double> counts = rank_sum_counts(N, int(a.size()));
    double total = 0.0;
    for (double c : counts) total += c;
    const int base = int(a.size()) * (int(a.size()) + 1) / 2;
    auto cdf_below = [&](double u_max) {  // P(U <= u_max)
      double acc = 0.0;
      for (int s = base; s < int(counts.size()); ++s)
        if (double(s - base) <= u_max + 1e-12) acc += counts[size_t(s)];
      return acc / total;
    };
    if (alt == Alternative::kGreater) {
      // P(U >= u) = 1 - P(U <= u - 1)
      out.p = 1.0 - cdf_below(out.u - 1.0);
    } else {
      const double u_low = std::min(out.u, n1 * n2 - out.u);
      out.p = std::min(1.0, 2.0 * cdf_below(u_low));  // null distribution is symmetric
    }
    return out;
  }

  const double mu = n1 * n2 / 2.0;
  const double nn = n1 + n2;
  double var = n1 * n2 / 12.0 * ((nn + 1.0) - r.tie_sum / (nn * (nn - 1.0)));
  if (var <= 0.0) {  // every observation tied
    out.p = 1.0;
    return out;
  }
  const double sd = std::sqrt(var);
  if (alt == Alternative::kGreater) {
    out.p = normal_sf((out.u - mu - 0.5) / sd);
  } else {
    const double zv = std::max(0.0, std::abs(out.u - mu) - 0.5) / sd;
    out.p = std::min(1.0, 2.0 * normal_sf(zv));
  }
  return out;
}

void write_records_csv(const std::vector<MetricsRecord>& records,
                       const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write csv: " + path.string());
  out << "sample_id,organ,dsc,hd_mm\n";
  char buf[160];
  for (const auto& rec : records) {
    if (rec.hd_mm) {
      std::snprintf(buf, sizeof buf, "%s,%d,%.17g,%.17g\n", rec.sample_id.c_str(), rec.organ,
                    rec.dsc, *rec.hd_mm);
    } else {
      std::snprintf(buf, sizeof buf, "%s,%d,%.17g,\n", rec.sample_id.c_str(), rec.organ, rec.dsc);
    }
    out << buf;
  }
}

}  // namespace miseg
