#include "miseg/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include "json.hpp"
#include "miseg/rng.hpp"

namespace miseg {

std::vector<int64_t> window_starts(int64_t dim, int64_t window, double overlap) {
  if (window > dim) throw ValidationError("window_starts: window larger than volume");
  const int64_t stride = std::max<int64_t>(1, int64_t(std::llround((1.0 - overlap) * double(window))));
  std::vector<int64_t> starts;
  for (int64_t s = 0; s + window <= dim; s += stride) starts.push_back(s);
  if (starts.back() + window < dim) starts.push_back(dim - window);  // snap to the far edge
  return starts;
}

namespace {

Volume pad_to_window(const Volume& v, const std::array<int64_t, 3>& window, bool* padded) {
  *padded = false;
  std::array<int64_t, 3> dims = v.dims;
  for (int a = 0; a < 3; ++a)
    if (dims[size_t(a)] < window[size_t(a)]) {
      dims[size_t(a)] = window[size_t(a)];
      *padded = true;
    }
  if (!*padded) return v;
  Volume out;
  out.dims = dims;
  out.spacing = v.spacing;
  out.provenance = v.provenance;
  out.data.resize(size_t(out.voxels()));
  for (int64_t z = 0; z < dims[0]; ++z)
    for (int64_t y = 0; y < dims[1]; ++y)
      for (int64_t x = 0; x < dims[2]; ++x)
        out.at(z, y, x) = v.at(std::min(z, v.dims[0] - 1), std::min(y, v.dims[1] - 1),
                               std::min(x, v.dims[2] - 1));
  return out;
}

}  // namespace

ProbVolume sliding_window_predict(const SegNet& net, const Volume& v,
                                  const std::array<int64_t, 3>& window, double overlap) {
  v.validate();
  if (!(overlap >= 0.0 && overlap < 1.0)) throw ValidationError("sliding window: overlap must be in [0,1)");
  const int div = net.cfg.spatial_divisor();
  for (int64_t w : window)
    if (w < div || w % div != 0)
      throw ValidationError("sliding window: window dims must be multiples of " + std::to_string(div));

  bool padded = false;
  const Volume work = pad_to_window(v, window, &padded);

  const int C = net.cfg.num_classes;
  ProbVolume acc;
  acc.dims = work.dims;
  acc.spacing = work.spacing;
  acc.num_classes = C;
  acc.data.assign(size_t(acc.voxels()) * size_t(C), 0.0f);
  std::vector<float> cover(size_t(acc.voxels()), 0.0f);

  const auto zs = window_starts(work.dims[0], window[0], overlap);
  const auto ys = window_starts(work.dims[1], window[1], overlap);
  const auto xs = window_starts(work.dims[2], window[2], overlap);

  TensorF patch({1, 1, window[0], window[1], window[2]});
  for (int64_t z0 : zs)
    for (int64_t y0 : ys)
      for (int64_t x0 : xs) {
        for (int64_t z = 0; z < window[0]; ++z)
          for (int64_t y = 0; y < window[1]; ++y)
            for (int64_t x = 0; x < window[2]; ++x)
              patch.at5(0, 0, z, y, x) = work.at(z0 + z, y0 + y, x0 + x);
        Tape<float> tape;
        NetGraph<float> g(tape, net);
        auto fwd = g.forward(tape.leaf(patch, false));
        auto probs_id = tape.softmax_channels(fwd.logits);
        const TensorF& probs = tape.value(probs_id);
        for (int c = 0; c < C; ++c)
          for (int64_t z = 0; z < window[0]; ++z)
            for (int64_t y = 0; y < window[1]; ++y)
              for (int64_t x = 0; x < window[2]; ++x)
                acc.at(c, z0 + z, y0 + y, x0 + x) += probs.at5(0, c, z, y, x);
        for (int64_t z = 0; z < window[0]; ++z)
          for (int64_t y = 0; y < window[1]; ++y)
            for (int64_t x = 0; x < window[2]; ++x)
              cover[size_t(((z0 + z) * work.dims[1] + y0 + y) * work.dims[2] + x0 + x)] += 1.0f;
      }

  for (int64_t i = 0; i < acc.voxels(); ++i) {
    const float n = cover[size_t(i)];
    for (int c = 0; c < C; ++c) acc.data[size_t(c) * size_t(acc.voxels()) + size_t(i)] /= n;
  }

  if (!padded) return acc;
  ProbVolume crop;
  crop.dims = v.dims;
  crop.spacing = v.spacing;
  crop.num_classes = C;
  crop.data.resize(size_t(crop.voxels()) * size_t(C));
  for (int c = 0; c < C; ++c)
    for (int64_t z = 0; z < v.dims[0]; ++z)
      for (int64_t y = 0; y < v.dims[1]; ++y)
        for (int64_t x = 0; x < v.dims[2]; ++x) crop.at(c, z, y, x) = acc.at(c, z, y, x);
  return crop;
}

LabelVolume predict_labels(const ProbVolume& probs) {
  LabelVolume out;
  out.dims = probs.dims;
  out.spacing = probs.spacing;
  out.num_classes = probs.num_classes;
  out.labels.resize(size_t(out.voxels()));
  const int64_t n = probs.voxels();
  for (int64_t i = 0; i < n; ++i) {
    int best = 0;
    float bv = probs.data[size_t(i)];
    for (int c = 1; c < probs.num_classes; ++c) {
      const float v = probs.data[size_t(c) * size_t(n) + size_t(i)];
      if (v > bv) {
        bv = v;
        best = c;
      }
    }
    out.labels[size_t(i)] = uint8_t(best);
  }
  return out;
}

namespace {

std::vector<MetricsRecord> evaluate_one(const SegNet& net, const DatasetManifest& manifest,
                                        const EvalOptions& opt, const SampleRef& ref, size_t si) {
  const Volume raw = read_image(manifest.image_path(ref));
  const LabelVolume gt = read_labels(manifest.labels_path(ref));
  Volume input = normalize_intensity(raw, manifest.range);
  input = resample(input, manifest.spacing_mm);
  if (opt.noise_std > 0.0 || opt.noise_mean != 0.0) {
    RngStream stream(opt.seed, streams::kEvalNoise, uint64_t(si));
    // one sub-stream per (std, replicate) pair, keyed on the std bits
    uint64_t std_bits;
    static_assert(sizeof(double) == sizeof(uint64_t));
    std::memcpy(&std_bits, &opt.noise_std, sizeof std_bits);
    RngStream sub = stream.substream(std_bits + uint64_t(opt.replicate) * 0x9e37ull);
    input = add_gaussian_noise(input, opt.noise_mean, opt.noise_std, sub.next_u64());
  }
  const ProbVolume probs = sliding_window_predict(net, input, opt.window, opt.overlap);
  LabelVolume pred = predict_labels(probs);
  pred = resample(pred, {raw.spacing[0], raw.spacing[1], raw.spacing[2]});
  if (pred.dims != gt.dims)
    throw ValidationError("evaluate_dataset: prediction grid does not match ground truth");

  std::string sample_id = std::filesystem::path(ref.image).stem().string();
  if (opt.replicate > 0) sample_id += "/r" + std::to_string(opt.replicate);
  std::vector<MetricsRecord> records;
  for (int organ = 1; organ < manifest.num_classes; ++organ) {
    MetricsRecord rec;
    rec.sample_id = sample_id;
    rec.organ = organ;
    rec.dsc = dsc_metric(pred, gt, organ);
    rec.hd_mm = hausdorff_mm(pred, gt, organ);
    records.push_back(std::move(rec));
  }
  return records;
}

int worker_count() {
  const char* env = std::getenv("MISEG_THREADS");
  if (!env) return 1;
  const int n = std::atoi(env);
  if (n < 1) throw ValidationError("MISEG_THREADS must be a positive integer");
  return n;
}

}  // namespace

std::vector<MetricsRecord> evaluate_dataset(const SegNet& net, const DatasetManifest& manifest,
                                            const EvalOptions& opt) {
  const auto& refs = opt.test_split ? manifest.test : manifest.train;
  if (refs.empty()) throw ValidationError("evaluate_dataset: split is empty");

  // Samples are independent; per-sample results land in their slot and are
  // concatenated in order, so the record list does not depend on the worker
  // count.
  std::vector<std::vector<MetricsRecord>> per_sample(refs.size());
  const int workers = std::min<int>(worker_count(), int(refs.size()));
  if (workers <= 1) {
    for (size_t si = 0; si < refs.size(); ++si)
      per_sample[si] = evaluate_one(net, manifest, opt, refs[si], si);
  } else {
    std::vector<std::thread> pool;
    std::atomic<size_t> next{0};
    std::vector<std::exception_ptr> errors;
    errors.resize(size_t(workers));
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (size_t si = next.fetch_add(1); si < refs.size(); si = next.fetch_add(1))
            per_sample[si] = evaluate_one(net, manifest, opt, refs[si], si);
        } catch (...) {
          errors[size_t(w)] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  std::vector<MetricsRecord> records;
  for (auto& part : per_sample)
    for (auto& rec : part) records.push_back(std::move(rec));
  return records;
}

void write_sweep_csv(const std::vector<SweepRecord>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write csv: " + path.string());
  out << "sample_id,organ,noise_std,dsc,hd_mm\n";
  char buf[200];
  for (const auto& r : rows) {
    if (r.rec.hd_mm) {
      std::snprintf(buf, sizeof buf, "%s,%d,%.17g,%.17g,%.17g\n", r.rec.sample_id.c_str(),
                    r.rec.organ, r.noise_std, r.rec.dsc, *r.rec.hd_mm);
    } else {
      std::snprintf(buf, sizeof buf, "%s,%d,%.17g,%.17g,\n", r.rec.sample_id.c_str(), r.rec.organ,
                    r.noise_std, r.rec.dsc);
    }
    out << buf;
  }
}

std::vector<SweepRecord> read_sweep_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open csv: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("empty csv: " + path.string());
  bool with_std;
  if (line == "sample_id,organ,noise_std,dsc,hd_mm") {
    with_std = true;
  } else if (line == "sample_id,organ,dsc,hd_mm") {
    with_std = false;  // single-evaluation format; noise std is 0
  } else {
    throw ValidationError("unrecognized csv header in " + path.string());
  }
  std::vector<SweepRecord> rows;
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (line.back() == ',') fields.push_back("");
    const size_t expect = with_std ? 5 : 4;
    if (fields.size() != expect)
      throw ValidationError("bad csv row at line " + std::to_string(lineno) + " in " + path.string());
    SweepRecord r;
    r.rec.sample_id = fields[0];
    r.rec.organ = std::stoi(fields[1]);
    size_t k = 2;
    if (with_std) r.noise_std = std::stod(fields[k++]);
    r.rec.dsc = std::stod(fields[k++]);
    if (!fields[k].empty()) r.rec.hd_mm = std::stod(fields[k]);
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace {

struct MeanStd {
  double mean = 0.0, sd = 0.0;
  int64_t n = 0;
};

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  m.n = int64_t(v.size());
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= double(v.size());
  for (double x : v) m.sd += (x - m.mean) * (x - m.mean);
  m.sd = std::sqrt(m.sd / double(v.size()));
  return m;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

MetricsTable compare_models(const std::vector<SweepRecord>& a, const std::vector<SweepRecord>& b,
                            const std::string& name_a, const std::string& name_b) {
  using Key = std::tuple<double, std::string, int>;  // (std, sample, organ)
  auto index = [](const std::vector<SweepRecord>& rows) {
    std::map<Key, const SweepRecord*> m;
    for (const auto& r : rows) {
      if (!m.emplace(Key{r.noise_std, r.rec.sample_id, r.rec.organ}, &r).second)
        throw ValidationError("compare_models: duplicate record key");
    }
    return m;
  };
  const auto ia = index(a);
  const auto ib = index(b);
  if (ia.size() != ib.size()) throw ValidationError("compare_models: record sets differ in size");
  for (const auto& [k, v] : ia)
    if (!ib.count(k)) throw ValidationError("compare_models: record keys do not match");

  std::set<double> stds;
  std::set<int> organs;
  for (const auto& r : a) {
    stds.insert(r.noise_std);
    organs.insert(r.rec.organ);
  }

  MetricsTable table;
  table.model_a = name_a;
  table.model_b = name_b;
  for (double sd : stds) {
    std::vector<double> pooled_a, pooled_b;
    std::vector<double> organ_means_a, organ_means_b, organ_improvements;
    for (int organ : organs) {
      std::vector<double> da, db, ha, hb;
      for (const auto& [k, ra] : ia) {
        if (std::get<0>(k) != sd || std::get<2>(k) != organ) continue;
        const SweepRecord* rb = ib.at(k);
        da.push_back(ra->rec.dsc);
        db.push_back(rb->rec.dsc);
        if (ra->rec.hd_mm) ha.push_back(*ra->rec.hd_mm);
        if (rb->rec.hd_mm) hb.push_back(*rb->rec.hd_mm);
      }
      if (da.empty()) continue;
      TableRow row;
      row.noise_std = sd;
      row.organ = std::to_string(organ);
      const MeanStd ma = mean_std(da), mb = mean_std(db);
      row.dsc_mean_a = ma.mean;
      row.dsc_std_a = ma.sd;
      row.dsc_mean_b = mb.mean;
      row.dsc_std_b = mb.sd;
      row.improvement = ma.mean - mb.mean;
      if (!ha.empty()) {
        const MeanStd mha = mean_std(ha);
        row.hd_mean_a = mha.mean;
        row.hd_std_a = mha.sd;
      }
      if (!hb.empty()) {
        const MeanStd mhb = mean_std(hb);
        row.hd_mean_b = mhb.mean;
        row.hd_std_b = mhb.sd;
      }
      if (row.hd_mean_a && row.hd_mean_b) row.hd_improvement = *row.hd_mean_a - *row.hd_mean_b;
      row.p_value = mann_whitney_u(da, db, Alternative::kTwoSided).p;
      table.rows.push_back(row);
      pooled_a.insert(pooled_a.end(), da.begin(), da.end());
      pooled_b.insert(pooled_b.end(), db.begin(), db.end());
      organ_means_a.push_back(ma.mean);
      organ_means_b.push_back(mb.mean);
      organ_improvements.push_back(row.improvement);
    }
    TableRow avg;
    avg.noise_std = sd;
    avg.organ = "average";
    avg.dsc_mean_a = mean_std(organ_means_a).mean;
    avg.dsc_mean_b = mean_std(organ_means_b).mean;
    avg.improvement = avg.dsc_mean_a - avg.dsc_mean_b;
    avg.p_value = mann_whitney_u(pooled_a, pooled_b, Alternative::kTwoSided).p;
    table.rows.push_back(avg);
  }
  return table;
}

void write_table_csv(const MetricsTable& t, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write csv: " + path.string());
  out << "noise_std,organ,dsc_mean_a,dsc_std_a,dsc_mean_b,dsc_std_b,improvement,"
         "hd_mean_a,hd_std_a,hd_mean_b,hd_std_b,hd_improvement,p_value\n";
  auto opt_fmt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
  for (const auto& r : t.rows) {
    out << fmt(r.noise_std) << ',' << r.organ << ',' << fmt(r.dsc_mean_a) << ','
        << fmt(r.dsc_std_a) << ',' << fmt(r.dsc_mean_b) << ',' << fmt(r.dsc_std_b) << ','
        << fmt(r.improvement) << ',' << opt_fmt(r.hd_mean_a) << ',' << opt_fmt(r.hd_std_a) << ','
        << opt_fmt(r.hd_mean_b) << ',' << opt_fmt(r.hd_std_b) << ',' << opt_fmt(r.hd_improvement)
        << ',' << fmt(r.p_value) << "\n";
  }
}

void write_table_json(const MetricsTable& t, const std::filesystem::path& path) {
  nlohmann::json j;
  j["model_a"] = t.model_a;
  j["model_b"] = t.model_b;
  std::map<double, nlohmann::json> per_std;
  for (const auto& r : t.rows) {
    nlohmann::json row;
    row["dsc_mean_a"] = r.dsc_mean_a;
    row["dsc_mean_b"] = r.dsc_mean_b;
    row["improvement"] = r.improvement;
    row["p_value"] = r.p_value;
    if (r.organ == "average") {
      per_std[r.noise_std]["average"] = row;
      per_std[r.noise_std]["noise_std"] = r.noise_std;
    } else {
      row["dsc_std_a"] = r.dsc_std_a;
      row["dsc_std_b"] = r.dsc_std_b;
      if (r.hd_mean_a) row["hd_mean_a"] = *r.hd_mean_a;
      if (r.hd_mean_b) row["hd_mean_b"] = *r.hd_mean_b;
      per_std[r.noise_std]["organs"][r.organ] = row;
    }
  }
  j["per_std"] = nlohmann::json::array();
  for (auto& [sd, entry] : per_std) j["per_std"].push_back(entry);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write json: " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace miseg
