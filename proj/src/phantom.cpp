#include "miseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"
#include "miseg/rng.hpp"

namespace miseg {

using nlohmann::json;

int PhantomConfig::num_classes() const {
  int mx = 0;
  for (const auto& o : organs) mx = std::max(mx, o.label);
  return mx + 1;
}

void PhantomConfig::validate() const {
  for (int64_t d : dims)
    if (d < 1) throw ValidationError("phantom.dims must all be >= 1");
  for (double s : spacing_mm)
    if (!(s > 0.0)) throw ValidationError("phantom.spacing_mm must all be > 0");
  if (!(texture_noise_std >= 0.0)) throw ValidationError("phantom.texture_noise_std must be >= 0");
  const auto check_interval = [](const std::array<double, 2>& iv, const char* what) {
    if (iv[0] > iv[1] || iv[0] < -1.0 || iv[1] > 1.0)
      throw ValidationError(std::string(what) + " must be an interval within [-1, 1]");
  };
  check_interval(background_intensity, "phantom.background_intensity");
  std::set<int> labels;
  const int64_t min_dim = std::min({dims[0], dims[1], dims[2]});
  for (const auto& o : organs) {
    if (o.label < 1) throw ValidationError("organ labels must be >= 1");
    if (!labels.insert(o.label).second) throw ValidationError("organ labels must be distinct");
    check_interval(o.intensity, "organ intensity");
    if (o.semi_axes[0] < 1.0 || o.semi_axes[0] > o.semi_axes[1])
      throw ValidationError("organ semi_axes must satisfy 1 <= min <= max");
    if (2.0 * o.semi_axes[1] >= double(min_dim))
      throw ValidationError("organ semi_axes do not fit inside dims");
    if (o.count < 1) throw ValidationError("organ count must be >= 1");
  }
}

PhantomConfig PhantomConfig::defaults() {
  PhantomConfig cfg;
  cfg.dims = {24, 48, 48};
  cfg.spacing_mm = {2.0, 2.0, 3.0};
  cfg.background_intensity = {-0.85, -0.75};
  cfg.texture_noise_std = 0.01;
  cfg.seed = 42;
  cfg.organs = {
      {1, {0.00, 0.05}, {6.0, 10.0}, 1},
      {2, {0.07, 0.12}, {4.0, 7.0}, 1},
      {3, {0.14, 0.19}, {3.0, 5.0}, 1},
  };
  return cfg;
}

namespace {

struct Ellipsoid {
  std::array<double, 3> center;  // z, y, x
  std::array<double, 3> radii;   // z, y, x
  bool contains(double z, double y, double x) const {
    const double dz = (z - center[0]) / radii[0];
    const double dy = (y - center[1]) / radii[1];
    const double dx = (x - center[2]) / radii[2];
    return dz * dz + dy * dy + dx * dx <= 1.0;
  }
};

// Paints the ellipsoid and reports whether any covered voxel already had a
// different label; when dry_run is set nothing is written.
bool paint(LabelVolume& lab, const Ellipsoid& e, uint8_t label, bool dry_run) {
  const int64_t z0 = std::max<int64_t>(0, int64_t(std::floor(e.center[0] - e.radii[0])));
  const int64_t z1 = std::min(lab.dims[0] - 1, int64_t(std::ceil(e.center[0] + e.radii[0])));
  const int64_t y0 = std::max<int64_t>(0, int64_t(std::floor(e.center[1] - e.radii[1])));
  const int64_t y1 = std::min(lab.dims[1] - 1, int64_t(std::ceil(e.center[1] + e.radii[1])));
  const int64_t x0 = std::max<int64_t>(0, int64_t(std::floor(e.center[2] - e.radii[2])));
  const int64_t x1 = std::min(lab.dims[2] - 1, int64_t(std::ceil(e.center[2] + e.radii[2])));
  bool clash = false;
  for (int64_t z = z0; z <= z1; ++z)
    for (int64_t y = y0; y <= y1; ++y)
      for (int64_t x = x0; x <= x1; ++x) {
        if (!e.contains(double(z), double(y), double(x))) continue;
        if (lab.at(z, y, x) != 0) {
          clash = true;
          if (dry_run) return true;
        } else if (!dry_run) {
          lab.at(z, y, x) = label;
        }
      }
  return clash;
}

}  // namespace

PhantomSample generate_phantom(const PhantomConfig& cfg, int64_t sample_index) {
  cfg.validate();
  RngStream rng(cfg.seed, streams::kPhantom, uint64_t(sample_index));

  PhantomSample s;
  s.labels.dims = cfg.dims;
  s.labels.spacing = cfg.spacing_mm;
  s.labels.num_classes = cfg.num_classes();
  s.labels.labels.assign(size_t(s.labels.voxels()), 0);
  s.labels.provenance = "phantom seed=" + std::to_string(cfg.seed) +
                        " index=" + std::to_string(sample_index);

  // Place organs largest-label-first in declaration order; shrink after
  // repeated collisions, give up below the minimum size.
  constexpr int kRetries = 24;
  for (const auto& spec : cfg.organs) {
    for (int inst = 0; inst < spec.count; ++inst) {
      Ellipsoid e;
      bool placed = false;
      double shrink = 1.0;
      for (int attempt = 0; attempt < kRetries && !placed; ++attempt) {
        for (int a = 0; a < 3; ++a) {
          const double r =
              std::max(1.0, shrink * rng.uniform(spec.semi_axes[0], spec.semi_axes[1]));
          e.radii[size_t(a)] = r;
        }
        for (int a = 0; a < 3; ++a) {
          const double lo = e.radii[size_t(a)];
          const double hi = double(cfg.dims[size_t(a)] - 1) - e.radii[size_t(a)];
          if (lo > hi) {
            e.center[size_t(a)] = double(cfg.dims[size_t(a)] - 1) / 2.0;
          } else {
            e.center[size_t(a)] = rng.uniform(lo, hi);
          }
        }
        if (!paint(s.labels, e, uint8_t(spec.label), /*dry_run=*/true)) {
          paint(s.labels, e, uint8_t(spec.label), /*dry_run=*/false);
          placed = true;
        } else if ((attempt + 1) % 8 == 0 && shrink * spec.semi_axes[0] > 1.5) {
          shrink *= 0.8;
        }
      }
      if (!placed)
        throw ValidationError("phantom: could not place organ label " +
                              std::to_string(spec.label) + " after retries");
      PlacedOrgan po;
      po.label = spec.label;
      po.center = e.center;
      po.semi_axes = e.radii;
      po.base_intensity = rng.uniform(spec.intensity[0], spec.intensity[1]);
      s.placed.push_back(po);
    }
  }

  s.image.dims = cfg.dims;
  s.image.spacing = cfg.spacing_mm;
  s.image.provenance = s.labels.provenance;
  s.image.data.assign(size_t(s.image.voxels()), 0.0f);

  const double background = rng.uniform(cfg.background_intensity[0], cfg.background_intensity[1]);
  std::vector<double> base_by_label(size_t(s.labels.num_classes), background);
  for (const auto& po : s.placed) base_by_label[size_t(po.label)] = po.base_intensity;

  for (int64_t i = 0; i < s.image.voxels(); ++i) {
    const double base = base_by_label[s.labels.labels[size_t(i)]];
    s.image.data[size_t(i)] = float(base + rng.normal(0.0, cfg.texture_noise_std));
  }
  return s;
}

Volume add_gaussian_noise(const Volume& v, double mean, double std, uint64_t seed) {
  v.validate();
  if (!(std >= 0.0)) throw ValidationError("add_gaussian_noise: std must be >= 0");
  Volume out = v;
  if (std == 0.0 && mean == 0.0) return out;
  RngStream rng(seed);
  for (float& f : out.data) f = float(double(f) + rng.normal(mean, std));
  return out;
}

namespace {

std::string sample_name(const char* prefix, int64_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04lld.mivol", prefix, (long long)i);
  return buf;
}

}  // namespace

DatasetManifest generate_dataset(const PhantomConfig& cfg, int64_t n,
                                 const std::filesystem::path& out_dir) {
  cfg.validate();
  if (n < 2) throw ValidationError("generate_dataset: need at least 2 samples");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create dataset directory: " + out_dir.string());

  DatasetManifest m;
  m.base_dir = out_dir;
  m.spacing_mm = cfg.spacing_mm;
  m.num_classes = cfg.num_classes();
  const int64_t n_train = int64_t(std::floor(0.8 * double(n)));
  std::vector<std::filesystem::path> train_images;
  for (int64_t i = 0; i < n; ++i) {
    const PhantomSample s = generate_phantom(cfg, i);
    SampleRef ref{sample_name("img", i), sample_name("lab", i)};
    write_volume(s.image, out_dir / ref.image);
    write_volume(s.labels, out_dir / ref.labels);
    if (i < n_train) {
      train_images.push_back(out_dir / ref.image);
      m.train.push_back(ref);
    } else {
      m.test.push_back(ref);
    }
  }
  m.range = dataset_intensity_range(train_images);
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  json j;
  auto refs = [](const std::vector<SampleRef>& v) {
    json arr = json::array();
    for (const auto& s : v) arr.push_back({{"image", s.image}, {"labels", s.labels}});
    return arr;
  };
  j["train"] = refs(m.train);
  j["test"] = refs(m.test);
  j["global_min"] = m.range.global_min;
  j["global_max"] = m.range.global_max;
  j["spacing_mm"] = {m.spacing_mm[0], m.spacing_mm[1], m.spacing_mm[2]};
  j["num_classes"] = m.num_classes;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest: " + path.string());
  out << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ValidationError("invalid manifest JSON: " + path.string());
  DatasetManifest m;
  m.base_dir = path.parent_path();
  auto parse_refs = [&](const char* key, std::vector<SampleRef>& out) {
    for (const auto& e : j.at(key)) out.push_back({e.at("image"), e.at("labels")});
  };
  parse_refs("train", m.train);
  parse_refs("test", m.test);
  m.range.global_min = j.at("global_min").get<double>();
  m.range.global_max = j.at("global_max").get<double>();
  m.range.validate();
  const auto sp = j.at("spacing_mm");
  for (int i = 0; i < 3; ++i) m.spacing_mm[size_t(i)] = sp[size_t(i)].get<double>();
  m.num_classes = j.at("num_classes").get<int>();
  if (m.train.empty() && m.test.empty()) throw ValidationError("manifest lists no samples");
  return m;
}

}  // namespace miseg
