#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "miseg/segnet.hpp"

namespace miseg {

using nlohmann::json;

namespace {
constexpr char kMagic[9] = "MICKPT01";
}

void save_checkpoint(const SegNet& net, int64_t step, const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little);
  json j;
  j["net"] = {{"depth", net.cfg.depth},
              {"base_channels", net.cfg.base_channels},
              {"in_channels", net.cfg.in_channels},
              {"num_classes", net.cfg.num_classes},
              {"kernel", net.cfg.kernel},
              {"init_seed", net.cfg.init_seed}};
  j["step"] = step;
  j["dtype"] = "f32";
  json shapes = json::array();
  for (const auto& p : net.params) shapes.push_back({{"name", p.name}, {"shape", p.value.shape}});
  j["params"] = shapes;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  const std::string hdr = j.dump();
  const uint32_t hlen = uint32_t(hdr.size());
  char lenbuf[4] = {char(hlen & 0xff), char((hlen >> 8) & 0xff), char((hlen >> 16) & 0xff),
                    char((hlen >> 24) & 0xff)};
  out.write(kMagic, 8);
  out.write(lenbuf, 4);
  out.write(hdr.data(), std::streamsize(hdr.size()));
  for (const auto& p : net.params)
    out.write(reinterpret_cast<const char*>(p.value.data.data()),
              std::streamsize(p.value.data.size() * sizeof(float)));
  if (!out) throw IoError("checkpoint write failed: " + path.string());
}

SegNet load_checkpoint(const std::filesystem::path& path, int64_t* step_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw ValidationError("bad checkpoint magic in " + path.string());
  unsigned char lenbuf[4];
  if (!in.read(reinterpret_cast<char*>(lenbuf), 4))
    throw ValidationError("truncated checkpoint header in " + path.string());
  const uint32_t hlen = uint32_t(lenbuf[0]) | uint32_t(lenbuf[1]) << 8 |
                        uint32_t(lenbuf[2]) << 16 | uint32_t(lenbuf[3]) << 24;
  std::string hdr(hlen, '\0');
  if (!in.read(hdr.data(), hlen)) throw ValidationError("truncated checkpoint header in " + path.string());
  json j = json::parse(hdr, nullptr, false);
  if (j.is_discarded()) throw ValidationError("invalid checkpoint JSON in " + path.string());

  NetConfig cfg;
  const auto& jn = j.at("net");
  cfg.depth = jn.at("depth").get<int>();
  cfg.base_channels = jn.at("base_channels").get<int>();
  cfg.in_channels = jn.at("in_channels").get<int>();
  cfg.num_classes = jn.at("num_classes").get<int>();
  cfg.kernel = jn.at("kernel").get<int>();
  cfg.init_seed = jn.at("init_seed").get<uint64_t>();
  if (step_out) *step_out = j.at("step").get<int64_t>();

  SegNet net = build_segnet<float>(cfg);  // establishes shapes and order
  const auto& shapes = j.at("params");
  if (shapes.size() != net.params.size())
    throw ValidationError("checkpoint parameter list does not match config in " + path.string());
  for (size_t i = 0; i < net.params.size(); ++i) {
    auto& p = net.params[i];
    if (shapes[i].at("name").get<std::string>() != p.name ||
        shapes[i].at("shape").get<std::vector<int64_t>>() != p.value.shape)
      throw ValidationError("checkpoint parameter " + p.name + " mismatches config in " +
                            path.string());
    if (!in.read(reinterpret_cast<char*>(p.value.data.data()),
                 std::streamsize(p.value.data.size() * sizeof(float))))
      throw ValidationError("checkpoint payload too short in " + path.string());
  }
  if (in.peek() != std::ifstream::traits_type::eof())
    throw ValidationError("checkpoint payload longer than declared in " + path.string());
  return net;
}

}  // namespace miseg
