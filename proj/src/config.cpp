#include "miseg/config.hpp"

#include <fstream>
#include <set>

#include "json.hpp"

namespace miseg {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::string& section,
                    const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ValidationError("config: section '" + section + "' must be an object");
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key))
      throw ValidationError("config: unknown key \"" + key + "\" in section '" + section + "'");
}

template <class T, size_t N>
std::array<T, N> get_array(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != N)
    throw ValidationError("config: '" + what + "' must be an array of " + std::to_string(N));
  std::array<T, N> out;
  for (size_t i = 0; i < N; ++i) out[i] = j[i].get<T>();
  return out;
}

void parse_phantom(const json& j, PhantomConfig& cfg) {
  reject_unknown(j, "phantom",
                 {"dims", "spacing_mm", "organs", "background_intensity", "texture_noise_std"});
  if (j.contains("dims")) cfg.dims = get_array<int64_t, 3>(j["dims"], "phantom.dims");
  if (j.contains("spacing_mm"))
    cfg.spacing_mm = get_array<double, 3>(j["spacing_mm"], "phantom.spacing_mm");
  if (j.contains("background_intensity"))
    cfg.background_intensity =
        get_array<double, 2>(j["background_intensity"], "phantom.background_intensity");
  if (j.contains("texture_noise_std")) cfg.texture_noise_std = j["texture_noise_std"].get<double>();
  if (j.contains("organs")) {
    cfg.organs.clear();
    for (const auto& o : j["organs"]) {
      reject_unknown(o, "phantom.organs[]", {"label", "intensity", "semi_axes", "count"});
      OrganSpec spec;
      spec.label = o.at("label").get<int>();
      spec.intensity = get_array<double, 2>(o.at("intensity"), "organ.intensity");
      spec.semi_axes = get_array<double, 2>(o.at("semi_axes"), "organ.semi_axes");
      if (o.contains("count")) spec.count = o["count"].get<int>();
      cfg.organs.push_back(spec);
    }
  }
}

void parse_net(const json& j, NetConfig& cfg) {
  reject_unknown(j, "net", {"depth", "base_channels", "in_channels", "num_classes", "kernel"});
  if (j.contains("depth")) cfg.depth = j["depth"].get<int>();
  if (j.contains("base_channels")) cfg.base_channels = j["base_channels"].get<int>();
  if (j.contains("in_channels")) cfg.in_channels = j["in_channels"].get<int>();
  if (j.contains("num_classes")) cfg.num_classes = j["num_classes"].get<int>();
  if (j.contains("kernel")) cfg.kernel = j["kernel"].get<int>();
}

void parse_loss(const json& j, LossConfig& cfg) {
  reject_unknown(j, "loss", {"gamma", "smooth_eps"});
  if (j.contains("gamma")) cfg.gamma = j["gamma"].get<double>();
  if (j.contains("smooth_eps")) cfg.smooth_eps = j["smooth_eps"].get<double>();
}

void parse_afa(const json& j, AfaConfig& cfg) {
  reject_unknown(j, "afa",
                 {"attack_layer", "epsilon", "ratios", "sigma_eps", "lambda_std",
                  "lambda_per_ratio", "clean_weight", "adv_weight"});
  if (j.contains("attack_layer")) cfg.attack_layer = j["attack_layer"].get<int>();
  if (j.contains("epsilon")) cfg.epsilon = j["epsilon"].get<double>();
  if (j.contains("ratios")) cfg.ratios = j["ratios"].get<std::vector<double>>();
  if (j.contains("sigma_eps")) cfg.sigma_eps = j["sigma_eps"].get<double>();
  if (j.contains("lambda_std")) cfg.lambda_std = j["lambda_std"].get<double>();
  if (j.contains("lambda_per_ratio")) cfg.lambda_per_ratio = j["lambda_per_ratio"].get<bool>();
  if (j.contains("clean_weight")) cfg.clean_weight = j["clean_weight"].get<double>();
  if (j.contains("adv_weight")) cfg.adv_weight = j["adv_weight"].get<double>();
}

void parse_train(const json& j, TrainConfig& cfg) {
  reject_unknown(j, "train",
                 {"manifest", "patch_size", "patches_per_scan", "scans_per_batch", "iterations",
                  "learning_rate", "beta1", "beta2", "adam_eps", "mixup_alpha",
                  "checkpoint_interval", "out_dir"});
  if (j.contains("manifest")) cfg.manifest = j["manifest"].get<std::string>();
  if (j.contains("patch_size")) cfg.patch_size = get_array<int64_t, 3>(j["patch_size"], "train.patch_size");
  if (j.contains("patches_per_scan")) cfg.patches_per_scan = j["patches_per_scan"].get<int>();
  if (j.contains("scans_per_batch")) cfg.scans_per_batch = j["scans_per_batch"].get<int>();
  if (j.contains("iterations")) cfg.iterations = j["iterations"].get<int64_t>();
  if (j.contains("learning_rate")) cfg.learning_rate = j["learning_rate"].get<double>();
  if (j.contains("beta1")) cfg.beta1 = j["beta1"].get<double>();
  if (j.contains("beta2")) cfg.beta2 = j["beta2"].get<double>();
  if (j.contains("adam_eps")) cfg.adam_eps = j["adam_eps"].get<double>();
  if (j.contains("mixup_alpha")) cfg.mixup_alpha = j["mixup_alpha"].get<double>();
  if (j.contains("checkpoint_interval")) cfg.checkpoint_interval = j["checkpoint_interval"].get<int64_t>();
  if (j.contains("out_dir")) cfg.out_dir = j["out_dir"].get<std::string>();
}

void parse_sweep(const json& j, SweepConfig& cfg) {
  reject_unknown(j, "sweep", {"noise_stds", "noise_mean", "seeds_per_std", "window", "overlap"});
  if (j.contains("noise_stds")) cfg.noise_stds = j["noise_stds"].get<std::vector<double>>();
  if (j.contains("noise_mean")) cfg.noise_mean = j["noise_mean"].get<double>();
  if (j.contains("seeds_per_std")) cfg.seeds_per_std = j["seeds_per_std"].get<int>();
  if (j.contains("window")) cfg.window = get_array<int64_t, 3>(j["window"], "sweep.window");
  if (j.contains("overlap")) cfg.overlap = j["overlap"].get<double>();
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig cfg;
  cfg.train.manifest = cfg.dataset_dir / "manifest.json";
  cfg.sweep.window = cfg.train.patch_size;
  return cfg;
}

RunConfig RunConfig::from_json_text(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ValidationError("config: invalid JSON");
  reject_unknown(j, "(top level)",
                 {"seed", "phantom", "dataset", "net", "train", "afa", "loss", "sweep"});

  RunConfig cfg = defaults();
  if (j.contains("seed")) cfg.seed = j["seed"].get<uint64_t>();
  if (j.contains("phantom")) parse_phantom(j["phantom"], cfg.phantom);
  if (j.contains("dataset")) {
    reject_unknown(j["dataset"], "dataset", {"n", "dir"});
    if (j["dataset"].contains("n")) cfg.dataset_n = j["dataset"]["n"].get<int64_t>();
    if (j["dataset"].contains("dir")) {
      cfg.dataset_dir = j["dataset"]["dir"].get<std::string>();
      cfg.train.manifest = cfg.dataset_dir / "manifest.json";
    }
  }
  if (j.contains("net")) parse_net(j["net"], cfg.train.net);
  if (j.contains("train")) parse_train(j["train"], cfg.train);
  if (j.contains("loss")) parse_loss(j["loss"], cfg.train.loss);
  if (j.contains("afa")) {
    AfaConfig afa;
    parse_afa(j["afa"], afa);
    afa.loss = cfg.train.loss;
    cfg.train.afa = afa;
  }
  if (j.contains("sweep")) parse_sweep(j["sweep"], cfg.sweep);
  cfg.phantom.seed = cfg.seed;
  cfg.train.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json_text(text);
}

void RunConfig::validate() const {
  phantom.validate();
  if (dataset_n < 2) throw ValidationError("dataset.n must be >= 2");
  train.validate();
  sweep.validate();
}

}  // namespace miseg
