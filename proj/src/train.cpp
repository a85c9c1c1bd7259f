#include "miseg/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace miseg {

void TrainConfig::validate() const {
  net.validate();
  loss.validate();
  if (afa) afa->validate(net.depth);
  if (iterations < 1) throw ValidationError("train.iterations must be >= 1");
  if (patches_per_scan < 1) throw ValidationError("train.patches_per_scan must be >= 1");
  if (scans_per_batch < 1) throw ValidationError("train.scans_per_batch must be >= 1");
  if (!(learning_rate > 0.0)) throw ValidationError("train.learning_rate must be > 0");
  if (!(mixup_alpha >= 0.0)) throw ValidationError("train.mixup_alpha must be >= 0");
  if (checkpoint_interval < 0) throw ValidationError("train.checkpoint_interval must be >= 0");
  const int div = net.spatial_divisor();
  for (int64_t d : patch_size) {
    if (d < 1) throw ValidationError("train.patch_size entries must be >= 1");
    if (d % div != 0)
      throw ValidationError("train.patch_size must be divisible by " + std::to_string(div));
  }
}

std::vector<Batch> sample_patches(const Volume& v, const LabelVolume& l, int n,
                                  const std::array<int64_t, 3>& patch_size, int num_classes,
                                  RngStream& rng) {
  v.validate();
  l.validate();
  if (v.dims != l.dims) throw ValidationError("sample_patches: image/label dims differ");
  for (int a = 0; a < 3; ++a)
    if (patch_size[size_t(a)] > v.dims[size_t(a)])
      throw ValidationError("sample_patches: volume smaller than patch along axis " +
                            std::to_string(a));
  const int64_t pz = patch_size[0], py = patch_size[1], px = patch_size[2];
  std::vector<Batch> out;
  out.reserve(size_t(n));
  for (int i = 0; i < n; ++i) {
    const int64_t cz = rng.uniform_int(0, v.dims[0] - pz);
    const int64_t cy = rng.uniform_int(0, v.dims[1] - py);
    const int64_t cx = rng.uniform_int(0, v.dims[2] - px);
    Batch b;
    b.images = TensorF({1, 1, pz, py, px});
    b.targets = TensorF({1, int64_t(num_classes), pz, py, px});
    for (int64_t z = 0; z < pz; ++z)
      for (int64_t y = 0; y < py; ++y)
        for (int64_t x = 0; x < px; ++x) {
          b.images.at5(0, 0, z, y, x) = v.at(cz + z, cy + y, cx + x);
          const uint8_t lab = l.at(cz + z, cy + y, cx + x);
          b.targets.at5(0, lab, z, y, x) = 1.0f;
        }
    out.push_back(std::move(b));
  }
  return out;
}

Batch concat_batch(const std::vector<Batch>& items) {
  if (items.empty()) throw ValidationError("concat_batch: empty");
  const auto& s0 = items[0].images.shape;
  const auto& t0 = items[0].targets.shape;
  Batch out;
  out.images = TensorF({int64_t(items.size()), s0[1], s0[2], s0[3], s0[4]});
  out.targets = TensorF({int64_t(items.size()), t0[1], t0[2], t0[3], t0[4]});
  const int64_t isz = s0[1] * s0[2] * s0[3] * s0[4];
  const int64_t tsz = t0[1] * t0[2] * t0[3] * t0[4];
  for (size_t i = 0; i < items.size(); ++i) {
    if (items[i].images.shape != s0 || items[i].targets.shape != t0)
      throw ValidationError("concat_batch: item shapes differ");
    std::copy(items[i].images.data.begin(), items[i].images.data.end(),
              out.images.data.begin() + int64_t(i) * isz);
    std::copy(items[i].targets.data.begin(), items[i].targets.data.end(),
              out.targets.data.begin() + int64_t(i) * tsz);
  }
  return out;
}

Batch mixup_with(const Batch& a, const Batch& b, double beta_mix) {
  if (!a.images.same_shape(b.images) || !a.targets.same_shape(b.targets))
    throw ValidationError("mixup: batch shapes differ");
  Batch out;
  out.images = TensorF(a.images.shape);
  out.targets = TensorF(a.targets.shape);
  const float w = float(beta_mix), u = float(1.0 - beta_mix);
  for (size_t i = 0; i < out.images.data.size(); ++i)
    out.images.data[i] = w * a.images.data[i] + u * b.images.data[i];
  for (size_t i = 0; i < out.targets.data.size(); ++i)
    out.targets.data[i] = w * a.targets.data[i] + u * b.targets.data[i];
  return out;
}

Batch mixup(const Batch& a, const Batch& b, double alpha, RngStream& rng) {
  return mixup_with(a, b, rng.beta(alpha, alpha));
}

namespace {

struct LoadedSample {
  Volume image;  // normalized
  LabelVolume labels;
};

std::vector<LoadedSample> load_split(const DatasetManifest& m, bool train_split) {
  const auto& refs = train_split ? m.train : m.test;
  if (refs.empty()) throw ValidationError("manifest split is empty");
  std::vector<LoadedSample> out;
  out.reserve(refs.size());
  for (const auto& r : refs) {
    LoadedSample s;
    s.image = normalize_intensity(read_image(m.image_path(r)), m.range);
    s.labels = read_labels(m.labels_path(r));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TrainResult train(const TrainConfig& cfg) {
  cfg.validate();
  const DatasetManifest manifest = load_manifest(cfg.manifest);
  if (manifest.num_classes != cfg.net.num_classes)
    throw ValidationError("train: net.num_classes " + std::to_string(cfg.net.num_classes) +
                          " != dataset num_classes " + std::to_string(manifest.num_classes));
  const std::vector<LoadedSample> scans = load_split(manifest, true);

  std::error_code ec;
  std::filesystem::create_directories(cfg.out_dir, ec);
  if (ec) throw IoError("cannot create out_dir: " + cfg.out_dir.string());

  NetConfig net_cfg = cfg.net;
  net_cfg.init_seed = rng_detail::mix2(cfg.seed, streams::kNetInit);
  SegNet net = build_segnet<float>(net_cfg);
  AdamState adam;

  TrainResult result;
  result.log = cfg.out_dir / "train_log.jsonl";
  std::ofstream log(result.log, std::ios::trunc);
  if (!log) throw IoError("cannot write training log: " + result.log.string());

  const int batch_size = cfg.scans_per_batch * cfg.patches_per_scan;
  for (int64_t step = 1; step <= cfg.iterations; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    RngStream pick_rng(cfg.seed, streams::kScanPick, uint64_t(step));
    RngStream patch_rng(cfg.seed, streams::kPatch, uint64_t(step));
    RngStream mix_rng(cfg.seed, streams::kMixup, uint64_t(step));

    std::vector<Batch> patches;
    patches.reserve(size_t(batch_size));
    for (int s = 0; s < cfg.scans_per_batch; ++s) {
      const auto& scan = scans[size_t(pick_rng.uniform_int(0, int64_t(scans.size()) - 1))];
      auto ps = sample_patches(scan.image, scan.labels, cfg.patches_per_scan, cfg.patch_size,
                               cfg.net.num_classes, patch_rng);
      for (auto& p : ps) patches.push_back(std::move(p));
    }
    Batch batch = concat_batch(patches);
    if (cfg.mixup_alpha > 0.0 && batch_size > 1) {
      // mix with a shuffled copy of the same batch
      std::vector<Batch> shuffled(patches.size());
      std::vector<int64_t> perm(patches.size());
      std::iota(perm.begin(), perm.end(), 0);
      for (int64_t i = int64_t(perm.size()) - 1; i > 0; --i)
        std::swap(perm[size_t(i)], perm[size_t(mix_rng.uniform_int(0, i))]);
      for (size_t i = 0; i < patches.size(); ++i) shuffled[i] = patches[size_t(perm[i])];
      batch = mixup(batch, concat_batch(shuffled), cfg.mixup_alpha, mix_rng);
    }

    Tape<float> tape;
    NetGraph<float> graph(tape, net);
    double total_loss = 0.0;
    nlohmann::json line;
    line["step"] = step;
    if (cfg.afa) {
      RngStream attack_rng(cfg.seed, streams::kAttackNoise, uint64_t(step));
      auto out = afa_training_loss(tape, graph, batch.images, batch.targets, *cfg.afa, attack_rng);
      tape.backward(out.total);
      total_loss = double(tape.value(out.total).data[0]);
      line["L_clean"] = out.clean_loss;
      line["L_adv"] = out.adv_losses;
      line["grad_l1"] = out.grad_l1;
    } else {
      auto fwd = graph.forward(graph.input(batch.images));
      auto probs = tape.softmax_channels(fwd.logits);
      auto loss = seg_loss(tape, probs, tape.constant(batch.targets), cfg.loss);
      tape.backward(loss);
      total_loss = double(tape.value(loss).data[0]);
    }
    line["total_loss"] = total_loss;  // nlohmann serializes round-trip exact
    result.loss_trace.push_back(total_loss);

    std::vector<const TensorF*> grads;
    grads.reserve(net.params.size());
    for (auto id : graph.param_ids()) grads.push_back(&tape.grad(id));
    adam_step<float>(net.params, grads, adam, cfg.learning_rate, cfg.beta1, cfg.beta2,
                     cfg.adam_eps);

    const auto t1 = std::chrono::steady_clock::now();
    line["wall_ms"] = std::chrono::duration<double, std::milli>(t1 - t0).count();
    log << line.dump() << "\n";
    log.flush();

    if (cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 &&
        step != cfg.iterations) {
      char name[48];
      std::snprintf(name, sizeof name, "checkpoint_%06lld.mickpt", (long long)step);
      save_checkpoint(net, step, cfg.out_dir / name);
    }
  }

  result.checkpoint = cfg.out_dir / "checkpoint_final.mickpt";
  save_checkpoint(net, cfg.iterations, result.checkpoint);
  return result;
}

}  // namespace miseg
