#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"
#include "miseg/train.hpp"

using namespace miseg;
using namespace miseg::test;

namespace {

// Small dataset + config shared by the loop tests.
struct Fixture {
  TempDir tmp{"train"};
  TrainConfig cfg;

  Fixture() {
    PhantomConfig ph = PhantomConfig::defaults();
    ph.dims = {8, 16, 16};
    ph.organs = {{1, {0.0, 0.1}, {2.0, 3.5}, 1}, {2, {0.15, 0.25}, {2.0, 3.0}, 1}};
    generate_dataset(ph, 5, tmp / "data");
    cfg.manifest = tmp / "data" / "manifest.json";
    cfg.net.depth = 2;
    cfg.net.base_channels = 4;
    cfg.net.num_classes = 3;
    cfg.patch_size = {8, 16, 16};
    cfg.patches_per_scan = 2;
    cfg.scans_per_batch = 1;
    cfg.iterations = 3;
    cfg.seed = 11;
    cfg.out_dir = tmp / "run";
  }
};

}  // namespace

TEST_CASE("a volume equal to the patch yields the whole volume as the only patch") {
  RngStream data_rng(1, 2, 3);
  const Volume v = random_volume(data_rng, {4, 6, 6});
  LabelVolume l = random_labels(data_rng, {4, 6, 6}, 3);
  RngStream rng(4, 5, 6);
  const auto patches = sample_patches(v, l, 2, {4, 6, 6}, 3, rng);
  REQUIRE(patches.size() == 2);
  for (const auto& p : patches) {
    for (int64_t z = 0; z < 4; ++z)
      for (int64_t y = 0; y < 6; ++y)
        for (int64_t x = 0; x < 6; ++x) {
          CHECK(p.images.at5(0, 0, z, y, x) == v.at(z, y, x));
          CHECK(p.targets.at5(0, l.at(z, y, x), z, y, x) == 1.0f);
        }
  }
}

TEST_CASE("one-hot targets sum to one per voxel") {
  RngStream data_rng(7, 8, 9);
  const Volume v = random_volume(data_rng, {6, 8, 8});
  const LabelVolume l = random_labels(data_rng, {6, 8, 8}, 4);
  RngStream rng(10, 11, 12);
  const auto patches = sample_patches(v, l, 3, {4, 4, 4}, 4, rng);
  for (const auto& p : patches)
    for (int64_t z = 0; z < 4; ++z)
      for (int64_t y = 0; y < 4; ++y)
        for (int64_t x = 0; x < 4; ++x) {
          float s = 0;
          for (int64_t c = 0; c < 4; ++c) s += p.targets.at5(0, c, z, y, x);
          CHECK(s == 1.0f);
        }
}

TEST_CASE("patch sampling is deterministic per stream and respects bounds") {
  RngStream data_rng(13, 14, 15);
  const Volume v = random_volume(data_rng, {6, 9, 7});
  const LabelVolume l = random_labels(data_rng, {6, 9, 7}, 2);
  RngStream r1(1, 2, 3), r2(1, 2, 3);
  const auto a = sample_patches(v, l, 4, {4, 4, 4}, 2, r1);
  const auto b = sample_patches(v, l, 4, {4, 4, 4}, 2, r2);
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].images.data == b[i].images.data);
}

TEST_CASE("a patch larger than the volume is rejected") {
  RngStream data_rng(16, 17, 18);
  const Volume v = random_volume(data_rng, {4, 4, 4});
  const LabelVolume l = random_labels(data_rng, {4, 4, 4}, 2);
  RngStream rng(1, 1, 1);
  CHECK_THROWS_AS(sample_patches(v, l, 1, {8, 4, 4}, 2, rng), ValidationError);
}

TEST_CASE("mixup endpoints and midpoint behave analytically") {
  RngStream rng(19, 20, 21);
  Batch a, b;
  a.images = TensorF({2, 1, 2, 2, 2});
  a.targets = TensorF({2, 2, 2, 2, 2});
  b = a;
  a.images.fill_uniform(rng, -1, 0);
  b.images.fill_uniform(rng, 0, 1);
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t z = 0; z < 2; ++z)
      for (int64_t y = 0; y < 2; ++y)
        for (int64_t x = 0; x < 2; ++x) {
          a.targets.at5(i, 0, z, y, x) = 1.0f;
          b.targets.at5(i, 1, z, y, x) = 1.0f;
        }
  const Batch full = mixup_with(a, b, 1.0);
  CHECK(full.images.data == a.images.data);
  CHECK(full.targets.data == a.targets.data);
  const Batch mid = mixup_with(a, b, 0.5);
  for (size_t i = 0; i < mid.images.data.size(); ++i)
    CHECK(mid.images.data[i] == doctest::Approx(0.5f * (a.images.data[i] + b.images.data[i])));
  for (size_t i = 0; i < mid.targets.data.size(); ++i)
    CHECK(mid.targets.data[i] == doctest::Approx(0.5f));
}

TEST_CASE("mixup keeps images in range and targets on the simplex") {
  RngStream rng(22, 23, 24);
  for (int trial = 0; trial < 10; ++trial) {
    Batch a, b;
    a.images = TensorF({1, 1, 2, 2, 2});
    a.targets = TensorF({1, 3, 2, 2, 2});
    b = a;
    a.images.fill_uniform(rng, -1, 1);
    b.images.fill_uniform(rng, -1, 1);
    for (int64_t z = 0; z < 2; ++z)
      for (int64_t y = 0; y < 2; ++y)
        for (int64_t x = 0; x < 2; ++x) {
          a.targets.at5(0, rng.uniform_int(0, 2), z, y, x) = 1.0f;
          b.targets.at5(0, rng.uniform_int(0, 2), z, y, x) = 1.0f;
        }
    const Batch m = mixup(a, b, 0.2, rng);
    for (float v : m.images.data) {
      CHECK(v >= -1.0f);
      CHECK(v <= 1.0f);
    }
    for (int64_t z = 0; z < 2; ++z)
      for (int64_t y = 0; y < 2; ++y)
        for (int64_t x = 0; x < 2; ++x) {
          float s = 0;
          for (int64_t c = 0; c < 3; ++c) s += m.targets.at5(0, c, z, y, x);
          CHECK(s == doctest::Approx(1.0f));
        }
  }
}

TEST_CASE("adam first step moves by ~lr*sign and zero grads leave parameters alone") {
  std::vector<SegNetT<float>::Param> params;
  TensorF p({2});
  p.data = {1.0f, -2.0f};
  params.push_back({"p", p});
  TensorF g({2});
  g.data = {0.5f, 0.0f};
  AdamStateT<float> state;
  adam_step<float>(params, {&g}, state, 1e-3, 0.9, 0.999, 1e-8);
  CHECK(params[0].value.data[0] ==
        doctest::Approx(1.0f - 1e-3f * 0.5f / (std::sqrt(0.25f) + 1e-8f)));
  CHECK(params[0].value.data[1] == -2.0f);  // untouched by a zero gradient
}

TEST_CASE("adam trajectories are reproducible") {
  auto run = [] {
    std::vector<SegNetT<float>::Param> params;
    params.push_back({"p", TensorF({3}, 0.5f)});
    AdamStateT<float> state;
    RngStream rng(1, 2, 3);
    for (int i = 0; i < 20; ++i) {
      TensorF g({3});
      g.fill_uniform(rng, -1, 1);
      adam_step<float>(params, {&g}, state, 1e-2, 0.9, 0.999, 1e-8);
    }
    return params[0].value.data;
  };
  CHECK(run() == run());
}

TEST_CASE("one iteration produces one log line and a final checkpoint") {
  Fixture f;
  f.cfg.iterations = 1;
  const TrainResult r = train(f.cfg);
  CHECK(std::filesystem::exists(r.checkpoint));
  std::ifstream log(r.log);
  std::string line;
  int lines = 0;
  while (std::getline(log, line))
    if (!line.empty()) ++lines;
  CHECK(lines == 1);
  CHECK(r.loss_trace.size() == 1);
}

TEST_CASE("two identical runs produce identical loss traces and checkpoints") {
  Fixture f;
  f.cfg.iterations = 5;
  f.cfg.out_dir = f.tmp / "run_a";
  const TrainResult a = train(f.cfg);
  f.cfg.out_dir = f.tmp / "run_b";
  const TrainResult b = train(f.cfg);
  CHECK(a.loss_trace == b.loss_trace);  // bitwise
  std::ifstream fa(a.checkpoint, std::ios::binary), fb(b.checkpoint, std::ios::binary);
  const std::string ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  const std::string bb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  CHECK(ba == bb);
}

TEST_CASE("afa-enabled training emits per-ratio diagnostics in the log") {
  Fixture f;
  f.cfg.iterations = 2;
  AfaConfig afa;
  afa.attack_layer = 1;
  f.cfg.afa = afa;
  f.cfg.out_dir = f.tmp / "run_afa";
  const TrainResult r = train(f.cfg);
  std::ifstream log(r.log);
  std::string line;
  REQUIRE(std::getline(log, line));
  const auto j = nlohmann::json::parse(line);
  CHECK(j.contains("L_clean"));
  CHECK(j.at("L_adv").size() == 4);
  CHECK(j.contains("grad_l1"));
  CHECK(j.contains("total_loss"));
  CHECK(j.contains("wall_ms"));
}

TEST_CASE("checkpoint interval writes intermediate checkpoints") {
  Fixture f;
  f.cfg.iterations = 4;
  f.cfg.checkpoint_interval = 2;
  f.cfg.out_dir = f.tmp / "run_ckpt";
  train(f.cfg);
  CHECK(std::filesystem::exists(f.cfg.out_dir / "checkpoint_000002.mickpt"));
  CHECK(std::filesystem::exists(f.cfg.out_dir / "checkpoint_final.mickpt"));
}

TEST_CASE("config validation rejects indivisible patches and bad counts") {
  Fixture f;
  f.cfg.patch_size = {7, 16, 16};
  CHECK_THROWS_AS(f.cfg.validate(), ValidationError);
  f.cfg.patch_size = {8, 16, 16};
  f.cfg.iterations = 0;
  CHECK_THROWS_AS(f.cfg.validate(), ValidationError);
}
