#include "miseg/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "json.hpp"

namespace miseg {

using nlohmann::json;

void Volume::validate() const {
  for (int64_t d : dims)
    if (d < 1) throw ValidationError("volume dims must all be >= 1");
  for (double s : spacing)
    if (!(s > 0.0)) throw ValidationError("volume spacing must all be > 0");
  if (int64_t(data.size()) != voxels())
    throw ValidationError("volume data length does not match dims");
}

void LabelVolume::validate() const {
  for (int64_t d : dims)
    if (d < 1) throw ValidationError("label volume dims must all be >= 1");
  for (double s : spacing)
    if (!(s > 0.0)) throw ValidationError("label volume spacing must all be > 0");
  if (int64_t(labels.size()) != voxels())
    throw ValidationError("label volume data length does not match dims");
  if (num_classes < 1) throw ValidationError("label volume num_classes must be >= 1");
  for (uint8_t l : labels)
    if (int(l) >= num_classes)
      throw ValidationError("label value " + std::to_string(int(l)) + " >= num_classes " +
                            std::to_string(num_classes));
}

namespace {

void write_file(const std::filesystem::path& path, const json& header, const void* payload,
                size_t payload_bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  const std::string hdr = header.dump();
  const uint32_t hlen = uint32_t(hdr.size());
  out.write(kVolumeMagic, 8);
  char lenbuf[4] = {char(hlen & 0xff), char((hlen >> 8) & 0xff), char((hlen >> 16) & 0xff),
                    char((hlen >> 24) & 0xff)};
  out.write(lenbuf, 4);
  out.write(hdr.data(), std::streamsize(hdr.size()));
  out.write(static_cast<const char*>(payload), std::streamsize(payload_bytes));
  if (!out) throw IoError("write failed: " + path.string());
}

json read_header(std::ifstream& in, const std::filesystem::path& path) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kVolumeMagic, 8) != 0)
    throw ValidationError("bad magic in " + path.string());
  unsigned char lenbuf[4];
  if (!in.read(reinterpret_cast<char*>(lenbuf), 4))
    throw ValidationError("truncated header in " + path.string());
  const uint32_t hlen = uint32_t(lenbuf[0]) | uint32_t(lenbuf[1]) << 8 | uint32_t(lenbuf[2]) << 16 |
                        uint32_t(lenbuf[3]) << 24;
  std::string hdr(hlen, '\0');
  if (!in.read(hdr.data(), hlen)) throw ValidationError("truncated header in " + path.string());
  json j = json::parse(hdr, nullptr, false);
  if (j.is_discarded()) throw ValidationError("invalid header JSON in " + path.string());
  return j;
}

template <class V>
json common_header(const V& v, const char* kind, const char* dtype) {
  json j;
  j["kind"] = kind;
  j["dims"] = {v.dims[0], v.dims[1], v.dims[2]};
  j["spacing_mm"] = {v.spacing[0], v.spacing[1], v.spacing[2]};
  j["dtype"] = dtype;
  if (!v.provenance.empty()) j["provenance"] = v.provenance;
  return j;
}

template <class V>
void parse_common(const json& j, V& v) {
  const auto dims = j.at("dims");
  const auto sp = j.at("spacing_mm");
  if (dims.size() != 3 || sp.size() != 3) throw ValidationError("header dims/spacing must have 3 entries");
  for (int i = 0; i < 3; ++i) {
    v.dims[size_t(i)] = dims[size_t(i)].template get<int64_t>();
    v.spacing[size_t(i)] = sp[size_t(i)].template get<double>();
  }
  v.provenance = j.value("provenance", std::string());
}

}  // namespace

void write_volume(const Volume& v, const std::filesystem::path& path) {
  v.validate();
  json j = common_header(v, "image", "f32");
  // payload is little-endian; this writer targets little-endian hosts
  static_assert(std::endian::native == std::endian::little);
  write_file(path, j, v.data.data(), v.data.size() * sizeof(float));
}

void write_volume(const LabelVolume& v, const std::filesystem::path& path) {
  v.validate();
  json j = common_header(v, "labels", "u8");
  j["num_classes"] = v.num_classes;
  write_file(path, j, v.labels.data(), v.labels.size());
}

AnyVolume read_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  const json j = read_header(in, path);
  const std::string kind = j.at("kind").get<std::string>();
  const std::string dtype = j.at("dtype").get<std::string>();
  if (kind == "image") {
    if (dtype != "f32") throw ValidationError("image payload must be f32 in " + path.string());
    Volume v;
    parse_common(j, v);
    if (v.voxels() < 1) throw ValidationError("header dims invalid in " + path.string());
    v.data.resize(size_t(v.voxels()));
    if (!in.read(reinterpret_cast<char*>(v.data.data()),
                 std::streamsize(v.data.size() * sizeof(float))) ||
        in.peek() != std::ifstream::traits_type::eof())
      throw ValidationError("payload length does not match header in " + path.string());
    v.validate();
    return v;
  }
  if (kind == "labels") {
    if (dtype != "u8") throw ValidationError("label payload must be u8 in " + path.string());
    LabelVolume v;
    parse_common(j, v);
    v.num_classes = j.at("num_classes").get<int>();
    if (v.voxels() < 1) throw ValidationError("header dims invalid in " + path.string());
    v.labels.resize(size_t(v.voxels()));
    if (!in.read(reinterpret_cast<char*>(v.labels.data()), std::streamsize(v.labels.size())) ||
        in.peek() != std::ifstream::traits_type::eof())
      throw ValidationError("payload length does not match header in " + path.string());
    v.validate();
    return v;
  }
  throw ValidationError("unknown volume kind '" + kind + "' in " + path.string());
}

Volume read_image(const std::filesystem::path& path) {
  AnyVolume v = read_volume(path);
  if (!std::holds_alternative<Volume>(v))
    throw ValidationError("expected an image volume: " + path.string());
  return std::get<Volume>(std::move(v));
}

LabelVolume read_labels(const std::filesystem::path& path) {
  AnyVolume v = read_volume(path);
  if (!std::holds_alternative<LabelVolume>(v))
    throw ValidationError("expected a label volume: " + path.string());
  return std::get<LabelVolume>(std::move(v));
}

namespace {

struct ResampleGrid {
  std::array<int64_t, 3> out_dims;   // nz, ny, nx
  std::array<double, 3> src_of_out;  // per-axis scale factor target/source, axis order z,y,x
  bool identity;
};

// Voxel centers sit at (i + 0.5) * spacing from the volume corner. The output
// grid keeps the physical extent; a source coordinate within 1e-9 of an
// integer snaps to it so equal-spacing resampling is exact.
ResampleGrid make_grid(const std::array<int64_t, 3>& dims, const std::array<double, 3>& spacing,
                       const std::array<double, 3>& target) {
  for (double s : target)
    if (!(s > 0.0)) throw ValidationError("resample: target spacing must be > 0");
  ResampleGrid g;
  g.identity = spacing == target;
  // dims are (nz,ny,nx) while spacing is (sx,sy,sz); flip to axis order z,y,x
  const std::array<double, 3> sp_zyx{spacing[2], spacing[1], spacing[0]};
  const std::array<double, 3> tg_zyx{target[2], target[1], target[0]};
  for (int a = 0; a < 3; ++a) {
    const double extent = double(dims[size_t(a)]) * sp_zyx[size_t(a)];
    g.out_dims[size_t(a)] = std::max<int64_t>(1, int64_t(std::llround(extent / tg_zyx[size_t(a)])));
    g.src_of_out[size_t(a)] = tg_zyx[size_t(a)] / sp_zyx[size_t(a)];
  }
  return g;
}

double source_coord(int64_t j, double scale) {
  double s = (double(j) + 0.5) * scale - 0.5;
  const double r = std::round(s);
  if (std::abs(s - r) < 1e-9) s = r;
  return s;
}

}  // namespace

Volume resample(const Volume& v, const std::array<double, 3>& target_spacing) {
  v.validate();
  const ResampleGrid g = make_grid(v.dims, v.spacing, target_spacing);
  if (g.identity) return v;
  Volume out;
  out.dims = g.out_dims;
  out.spacing = target_spacing;
  out.provenance = v.provenance;
  out.data.resize(size_t(out.voxels()));
  const auto clampi = [](int64_t i, int64_t n) { return std::min(std::max<int64_t>(i, 0), n - 1); };
  int64_t w = 0;
  for (int64_t z = 0; z < out.dims[0]; ++z) {
    const double sz = source_coord(z, g.src_of_out[0]);
    const double zf = std::floor(sz);
    // clamp both interpolation partners to the border so coordinates outside
    // the grid read the nearest border voxel
    const int64_t z0 = clampi(int64_t(zf), v.dims[0]);
    const int64_t z1 = clampi(int64_t(zf) + 1, v.dims[0]);
    const double fz = sz - zf;
    for (int64_t y = 0; y < out.dims[1]; ++y) {
      const double sy = source_coord(y, g.src_of_out[1]);
      const double yf = std::floor(sy);
      const int64_t y0 = clampi(int64_t(yf), v.dims[1]);
      const int64_t y1 = clampi(int64_t(yf) + 1, v.dims[1]);
      const double fy = sy - yf;
      for (int64_t x = 0; x < out.dims[2]; ++x, ++w) {
        const double sx = source_coord(x, g.src_of_out[2]);
        const double xf = std::floor(sx);
        const int64_t x0 = clampi(int64_t(xf), v.dims[2]);
        const int64_t x1 = clampi(int64_t(xf) + 1, v.dims[2]);
        const double fx = sx - xf;
        const double c00 = double(v.at(z0, y0, x0)) * (1 - fx) + double(v.at(z0, y0, x1)) * fx;
        const double c01 = double(v.at(z0, y1, x0)) * (1 - fx) + double(v.at(z0, y1, x1)) * fx;
        const double c10 = double(v.at(z1, y0, x0)) * (1 - fx) + double(v.at(z1, y0, x1)) * fx;
        const double c11 = double(v.at(z1, y1, x0)) * (1 - fx) + double(v.at(z1, y1, x1)) * fx;
        const double c0 = c00 * (1 - fy) + c01 * fy;
        const double c1 = c10 * (1 - fy) + c11 * fy;
        out.data[size_t(w)] = float(c0 * (1 - fz) + c1 * fz);
      }
    }
  }
  return out;
}

LabelVolume resample(const LabelVolume& v, const std::array<double, 3>& target_spacing) {
  v.validate();
  const ResampleGrid g = make_grid(v.dims, v.spacing, target_spacing);
  if (g.identity) return v;
  LabelVolume out;
  out.dims = g.out_dims;
  out.spacing = target_spacing;
  out.num_classes = v.num_classes;
  out.provenance = v.provenance;
  out.labels.resize(size_t(out.voxels()));
  const auto clampi = [](int64_t i, int64_t n) { return std::min(std::max<int64_t>(i, 0), n - 1); };
  int64_t w = 0;
  for (int64_t z = 0; z < out.dims[0]; ++z) {
    const int64_t zs = clampi(int64_t(std::llround(source_coord(z, g.src_of_out[0]))), v.dims[0]);
    for (int64_t y = 0; y < out.dims[1]; ++y) {
      const int64_t ys = clampi(int64_t(std::llround(source_coord(y, g.src_of_out[1]))), v.dims[1]);
      for (int64_t x = 0; x < out.dims[2]; ++x, ++w) {
        const int64_t xs = clampi(int64_t(std::llround(source_coord(x, g.src_of_out[2]))), v.dims[2]);
        out.labels[size_t(w)] = v.at(zs, ys, xs);
      }
    }
  }
  return out;
}

Volume normalize_intensity(const Volume& v, const IntensityRange& r) {
  v.validate();
  r.validate();
  Volume out = v;
  const double scale = 2.0 / (r.global_max - r.global_min);
  for (float& f : out.data) {
    const double n = (double(f) - r.global_min) * scale - 1.0;
    f = float(std::min(1.0, std::max(-1.0, n)));
  }
  return out;
}

IntensityRange dataset_intensity_range(const std::vector<std::filesystem::path>& paths) {
  if (paths.empty()) throw ValidationError("dataset_intensity_range: need at least one volume");
  IntensityRange r{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const auto& p : paths) {
    const Volume v = read_image(p);
    for (float f : v.data) {
      r.global_min = std::min(r.global_min, double(f));
      r.global_max = std::max(r.global_max, double(f));
    }
  }
  r.validate();
  return r;
}

}  // namespace miseg
