#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "miseg/eval.hpp"

using namespace miseg;
using namespace miseg::test;

namespace {

SegNet tiny_net(uint64_t seed) {
  NetConfig cfg;
  cfg.depth = 2;
  cfg.base_channels = 4;
  cfg.num_classes = 3;
  cfg.init_seed = seed;
  return build_segnet<float>(cfg);
}

}  // namespace

TEST_CASE("window starts stride by (1-overlap)*window and snap to the far edge") {
  const auto s = window_starts(24, 16, 0.8);  // stride round(0.2*16) = 3
  REQUIRE(!s.empty());
  CHECK(s.front() == 0);
  CHECK(s.back() == 8);  // 24 - 16
  for (size_t i = 1; i < s.size(); ++i) CHECK(s[i] - s[i - 1] <= 16);
  // against a direct enumeration of the contract
  std::vector<int64_t> expect;
  for (int64_t p = 0; p + 16 <= 24; p += 3) expect.push_back(p);
  if (expect.back() + 16 < 24) expect.push_back(24 - 16);
  CHECK(s == expect);
}

TEST_CASE("every voxel is covered for random geometry at 0.8 overlap") {
  RngStream rng(1, 2, 3);
  for (int trial = 0; trial < 20; ++trial) {
    const int64_t dim = rng.uniform_int(8, 64);
    const int64_t window = rng.uniform_int(4, dim);
    const auto starts = window_starts(dim, window, 0.8);
    std::vector<int> cover(size_t(dim), 0);
    for (int64_t s : starts)
      for (int64_t i = 0; i < window; ++i) cover[size_t(s + i)]++;
    for (int64_t i = 0; i < dim; ++i) CHECK(cover[size_t(i)] >= 1);
  }
}

TEST_CASE("a window equal to the volume reproduces the direct forward exactly") {
  const SegNet net = tiny_net(1);
  RngStream rng(4, 5, 6);
  const Volume v = random_volume(rng, {4, 8, 8});
  const ProbVolume probs = sliding_window_predict(net, v, {4, 8, 8}, 0.8);

  TensorF x({1, 1, 4, 8, 8});
  for (int64_t i = 0; i < v.voxels(); ++i) x.data[size_t(i)] = v.data[size_t(i)];
  Tape<float> t;
  NetGraph<float> g(t, net);
  auto fwd = g.forward(t.leaf(x, false));
  const TensorF& direct = t.value(t.softmax_channels(fwd.logits));
  for (int c = 0; c < 3; ++c)
    for (int64_t z = 0; z < 4; ++z)
      for (int64_t y = 0; y < 8; ++y)
        for (int64_t xx = 0; xx < 8; ++xx)
          CHECK(probs.at(c, z, y, xx) == direct.at5(0, c, z, y, xx));
}

TEST_CASE("constant input volumes give constant probabilities at any overlap") {
  const SegNet net = tiny_net(2);
  Volume v;
  v.dims = {8, 16, 16};
  v.spacing = {1, 1, 1};
  v.data.assign(size_t(v.voxels()), 0.37f);
  const ProbVolume probs = sliding_window_predict(net, v, {4, 8, 8}, 0.8);
  for (int c = 0; c < 3; ++c) {
    const float ref = probs.at(c, 0, 0, 0);
    for (int64_t i = 0; i < probs.voxels(); ++i)
      CHECK(probs.data[size_t(c) * size_t(probs.voxels()) + size_t(i)] ==
            doctest::Approx(ref).epsilon(1e-5));
  }
}

TEST_CASE("aggregated probabilities stay on the simplex") {
  const SegNet net = tiny_net(3);
  RngStream rng(7, 8, 9);
  const Volume v = random_volume(rng, {8, 12, 20});
  const ProbVolume probs = sliding_window_predict(net, v, {4, 8, 8}, 0.8);
  for (int64_t i = 0; i < probs.voxels(); ++i) {
    float s = 0;
    for (int c = 0; c < 3; ++c) s += probs.data[size_t(c) * size_t(probs.voxels()) + size_t(i)];
    CHECK(s == doctest::Approx(1.0f).epsilon(1e-5));
  }
}

TEST_CASE("volumes smaller than the window are padded and cropped back") {
  const SegNet net = tiny_net(4);
  RngStream rng(10, 11, 12);
  const Volume v = random_volume(rng, {3, 5, 8});
  const ProbVolume probs = sliding_window_predict(net, v, {4, 8, 8}, 0.8);
  CHECK(probs.dims == v.dims);
}

TEST_CASE("argmax labels with ties toward the lower class") {
  ProbVolume p;
  p.dims = {1, 1, 3};
  p.spacing = {1, 1, 1};
  p.num_classes = 3;
  p.data = {
      // voxel 0: one-hot class 2; voxel 1: uniform; voxel 2: class 1 wins
      0.0f, 1.0f / 3, 0.2f,  // class 0 plane
      0.0f, 1.0f / 3, 0.5f,  // class 1 plane
      1.0f, 1.0f / 3, 0.3f,  // class 2 plane
  };
  const LabelVolume l = predict_labels(p);
  CHECK(l.labels[0] == 2);
  CHECK(l.labels[1] == 0);  // declared tie rule
  CHECK(l.labels[2] == 1);
}

TEST_CASE("argmax matches a per-voxel scan on random probabilities") {
  RngStream rng(13, 14, 15);
  ProbVolume p;
  p.dims = {4, 5, 6};
  p.spacing = {1, 1, 1};
  p.num_classes = 4;
  p.data.resize(size_t(4 * p.voxels()));
  for (auto& v : p.data) v = float(rng.uniform(0, 1));
  const LabelVolume l = predict_labels(p);
  for (int64_t i = 0; i < p.voxels(); ++i) {
    int best = 0;
    float bv = p.data[size_t(i)];
    for (int c = 1; c < 4; ++c) {
      const float v = p.data[size_t(c) * size_t(p.voxels()) + size_t(i)];
      if (v > bv) {
        bv = v;
        best = c;
      }
    }
    CHECK(int(l.labels[size_t(i)]) == best);
  }
}

TEST_CASE("evaluating the ground truth against itself gives perfect records") {
  // exercised through the metric path used by evaluate_dataset
  RngStream rng(16, 17, 18);
  LabelVolume gt = random_labels(rng, {6, 8, 8}, 3, {2, 2, 3});
  gt.labels[0] = 1;
  gt.labels[1] = 2;
  for (int organ = 1; organ < 3; ++organ) {
    CHECK(dsc_metric(gt, gt, organ) == doctest::Approx(1.0));
    const auto h = hausdorff_mm(gt, gt, organ);
    REQUIRE(h.has_value());
    CHECK(*h == doctest::Approx(0.0));
  }
}

TEST_CASE("dataset evaluation is deterministic and keyed by sample and organ") {
  TempDir tmp("eval");
  PhantomConfig ph = PhantomConfig::defaults();
  ph.dims = {8, 16, 16};
  ph.organs = {{1, {0.0, 0.1}, {2.0, 3.0}, 1}, {2, {0.15, 0.25}, {2.0, 3.0}, 1}};
  const DatasetManifest manifest = generate_dataset(ph, 5, tmp / "d");

  NetConfig nc;
  nc.depth = 2;
  nc.base_channels = 4;
  nc.num_classes = 3;
  nc.init_seed = 5;
  const SegNet net = build_segnet<float>(nc);

  EvalOptions opt;
  opt.noise_std = 0.005;
  opt.seed = 42;
  opt.window = {8, 16, 16};
  opt.overlap = 0.8;
  const auto a = evaluate_dataset(net, manifest, opt);
  const auto b = evaluate_dataset(net, manifest, opt);
  REQUIRE(a.size() == b.size());
  REQUIRE(a.size() == manifest.test.size() * 2);
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].sample_id == b[i].sample_id);
    CHECK(a[i].organ == b[i].organ);
    CHECK(a[i].dsc == b[i].dsc);
    CHECK(a[i].hd_mm.has_value() == b[i].hd_mm.has_value());
  }
}

TEST_CASE("sweep csv round-trips") {
  TempDir tmp("csv");
  std::vector<SweepRecord> rows;
  rows.push_back({0.01, {"img_0001", 1, 0.75, 4.25}});
  rows.push_back({0.01, {"img_0001", 2, 0.5, std::nullopt}});
  rows.push_back({0.0, {"img_0002", 1, 1.0, 0.0}});
  write_sweep_csv(rows, tmp / "s.csv");
  const auto back = read_sweep_csv(tmp / "s.csv");
  REQUIRE(back.size() == 3);
  CHECK(back[0].noise_std == 0.01);
  CHECK(back[0].rec.sample_id == "img_0001");
  CHECK(back[0].rec.dsc == 0.75);
  CHECK(back[1].rec.hd_mm.has_value() == false);
  CHECK(back[2].rec.hd_mm.value() == 0.0);
}

namespace {

std::vector<SweepRecord> fake_records(double base, double shift) {
  std::vector<SweepRecord> rows;
  RngStream rng(99, 98, 97);
  for (double sd : {0.0, 0.01})
    for (int sample = 0; sample < 6; ++sample)
      for (int organ = 1; organ <= 2; ++organ) {
        SweepRecord r;
        r.noise_std = sd;
        r.rec.sample_id = "img_" + std::to_string(sample);
        r.rec.organ = organ;
        r.rec.dsc = std::min(1.0, std::max(0.0, base + shift + 0.02 * rng.normal()));
        r.rec.hd_mm = 4.0 - 10.0 * shift;
        rows.push_back(r);
      }
  return rows;
}

}  // namespace

TEST_CASE("comparing identical record sets gives zero improvements and p = 1") {
  const auto rows = fake_records(0.8, 0.0);
  const MetricsTable t = compare_models(rows, rows, "a", "b");
  REQUIRE(!t.rows.empty());
  for (const auto& row : t.rows) {
    CHECK(row.improvement == doctest::Approx(0.0));
    CHECK(row.p_value == doctest::Approx(1.0));
  }
}

TEST_CASE("a constant shift appears as the improvement and compare is antisymmetric") {
  const auto a = fake_records(0.7, 0.1);
  auto b = a;
  for (auto& r : b) r.rec.dsc -= 0.1;
  const MetricsTable ab = compare_models(a, b, "a", "b");
  const MetricsTable ba = compare_models(b, a, "b", "a");
  REQUIRE(ab.rows.size() == ba.rows.size());
  for (size_t i = 0; i < ab.rows.size(); ++i) {
    CHECK(ab.rows[i].improvement == doctest::Approx(0.1));
    CHECK(ba.rows[i].improvement == doctest::Approx(-ab.rows[i].improvement));
    CHECK(ba.rows[i].p_value == doctest::Approx(ab.rows[i].p_value));
  }
}

TEST_CASE("comparison p-values match the exact test on the underlying samples") {
  const auto a = fake_records(0.75, 0.05);
  auto b = fake_records(0.75, 0.0);
  const MetricsTable t = compare_models(a, b, "a", "b");
  for (const auto& row : t.rows) {
    if (row.organ == "average") continue;
    std::vector<double> da, db;
    for (const auto& r : a)
      if (r.noise_std == row.noise_std && std::to_string(r.rec.organ) == row.organ)
        da.push_back(r.rec.dsc);
    for (const auto& r : b)
      if (r.noise_std == row.noise_std && std::to_string(r.rec.organ) == row.organ)
        db.push_back(r.rec.dsc);
    CHECK(row.p_value == doctest::Approx(mann_whitney_u(da, db).p));
  }
}

TEST_CASE("mismatched record keys are rejected") {
  const auto a = fake_records(0.8, 0.0);
  auto b = a;
  b.pop_back();
  CHECK_THROWS_AS(compare_models(a, b, "a", "b"), ValidationError);
  b = a;
  b.back().rec.organ = 7;
  CHECK_THROWS_AS(compare_models(a, b, "a", "b"), ValidationError);
}

TEST_CASE("table outputs are written") {
  TempDir tmp("table");
  const auto a = fake_records(0.8, 0.05);
  auto b = fake_records(0.8, 0.0);
  const MetricsTable t = compare_models(a, b, "model_a", "model_b");
  write_table_csv(t, tmp / "t.csv");
  write_table_json(t, tmp / "t.json");
  CHECK(std::filesystem::file_size(tmp / "t.csv") > 0);
  CHECK(std::filesystem::file_size(tmp / "t.json") > 0);
}
