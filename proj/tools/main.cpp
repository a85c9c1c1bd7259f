#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "miseg/config.hpp"
#include "miseg/gradcheck.hpp"

namespace {

using namespace miseg;

int cmd_gen_data(const RunConfig& cfg) {
  const DatasetManifest m = generate_dataset(cfg.phantom, cfg.dataset_n, cfg.dataset_dir);
  std::printf("wrote %zu train + %zu test samples under %s\n", m.train.size(), m.test.size(),
              cfg.dataset_dir.string().c_str());
  std::printf("intensity range [%g, %g]\n", m.range.global_min, m.range.global_max);
  return 0;
}

int cmd_train(const RunConfig& cfg, bool baseline) {
  RunConfig run = cfg;
  if (baseline) run.train.afa.reset();
  const TrainResult r = train(run.train);
  std::printf("checkpoint: %s\nlog: %s\n", r.checkpoint.string().c_str(), r.log.string().c_str());
  return 0;
}

int cmd_predict(const RunConfig& cfg, const std::string& checkpoint, const std::string& input,
                const std::string& output, double noise_std, int replicate) {
  const SegNet net = load_checkpoint(checkpoint);
  const DatasetManifest manifest = load_manifest(cfg.train.manifest);
  Volume v = normalize_intensity(read_image(input), manifest.range);
  const std::array<double, 3> native = v.spacing;
  v = resample(v, manifest.spacing_mm);
  if (noise_std > 0.0) {
    RngStream stream(cfg.seed, streams::kEvalNoise, 0);
    v = add_gaussian_noise(v, cfg.sweep.noise_mean, noise_std,
                           stream.substream(uint64_t(replicate)).next_u64());
  }
  const ProbVolume probs = sliding_window_predict(net, v, cfg.sweep.window, cfg.sweep.overlap);
  LabelVolume pred = predict_labels(probs);
  pred = resample(pred, native);
  write_volume(pred, output);
  std::printf("wrote %s\n", output.c_str());
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& out,
             double noise_std, const std::string& split, int replicate) {
  const SegNet net = load_checkpoint(checkpoint);
  const DatasetManifest manifest = load_manifest(cfg.train.manifest);
  EvalOptions opt;
  opt.noise_std = noise_std;
  opt.noise_mean = cfg.sweep.noise_mean;
  opt.seed = cfg.seed;
  opt.window = cfg.sweep.window;
  opt.overlap = cfg.sweep.overlap;
  opt.test_split = split == "test";
  opt.replicate = replicate;
  const auto records = evaluate_dataset(net, manifest, opt);
  std::vector<SweepRecord> rows;
  rows.reserve(records.size());
  for (const auto& r : records) rows.push_back({noise_std, r});
  write_sweep_csv(rows, out);
  std::printf("wrote %zu records to %s\n", rows.size(), out.c_str());
  return 0;
}

int cmd_sweep(const RunConfig& cfg, const std::string& checkpoint, const std::string& out) {
  const SegNet net = load_checkpoint(checkpoint);
  const DatasetManifest manifest = load_manifest(cfg.train.manifest);
  std::vector<SweepRecord> rows;
  for (double sd : cfg.sweep.noise_stds) {
    for (int rep = 0; rep < cfg.sweep.seeds_per_std; ++rep) {
      EvalOptions opt;
      opt.noise_std = sd;
      opt.noise_mean = cfg.sweep.noise_mean;
      opt.seed = cfg.seed;
      opt.window = cfg.sweep.window;
      opt.overlap = cfg.sweep.overlap;
      opt.replicate = rep;
      for (const auto& r : evaluate_dataset(net, manifest, opt)) rows.push_back({sd, r});
      if (sd == 0.0) break;  // repeats of a noiseless evaluation are identical
    }
  }
  write_sweep_csv(rows, out);
  std::printf("wrote %zu records to %s\n", rows.size(), out.c_str());
  return 0;
}

int cmd_compare(const std::string& a, const std::string& b, const std::string& prefix,
                std::string name_a, std::string name_b) {
  if (name_a.empty()) name_a = std::filesystem::path(a).stem().string();
  if (name_b.empty()) name_b = std::filesystem::path(b).stem().string();
  const MetricsTable table = compare_models(read_sweep_csv(a), read_sweep_csv(b), name_a, name_b);
  write_table_csv(table, prefix + ".csv");
  write_table_json(table, prefix + ".json");
  std::printf("wrote %s.csv and %s.json\n", prefix.c_str(), prefix.c_str());
  return 0;
}

int cmd_grad_check(int seeds) {
  GradCheckOptions opt;
  opt.seeds = seeds;
  const auto reports = run_gradient_checks(opt);
  for (const auto& r : reports)
    std::printf("%-18s max rel err %.3e  %s\n", r.op.c_str(), r.max_rel_err,
                r.pass ? "ok" : "FAIL");
  return gradient_checks_pass(reports) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"volumetric segmentation trainer with adversarial feature augmentation"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, input, output, out, split = "test";
  std::string csv_a, csv_b, prefix = "report", name_a, name_b;
  double noise_std = 0.0;
  int replicate = 0;
  int seeds = 10;
  bool baseline = false;

  auto* gen = app.add_subcommand("gen-data", "generate a phantom dataset and manifest");
  gen->add_option("--config", config_path, "run config JSON")->required();

  auto* tr = app.add_subcommand("train", "train a segmentation network");
  tr->add_option("--config", config_path, "run config JSON")->required();
  tr->add_flag("--baseline", baseline, "ignore the afa section and train the plain objective");

  auto* pr = app.add_subcommand("predict", "segment one volume with a trained checkpoint");
  pr->add_option("--config", config_path)->required();
  pr->add_option("--checkpoint", checkpoint)->required();
  pr->add_option("--input", input)->required();
  pr->add_option("--output", output)->required();
  pr->add_option("--noise-std", noise_std, "additive Gaussian noise std on the normalized scale");
  pr->add_option("--replicate", replicate, "noise replicate index");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on one split at one noise level");
  ev->add_option("--config", config_path)->required();
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--out", out)->required();
  ev->add_option("--noise-std", noise_std);
  ev->add_option("--split", split)->check(CLI::IsMember({"test", "train"}));
  ev->add_option("--replicate", replicate);

  auto* sw = app.add_subcommand("sweep", "evaluate a checkpoint over the configured noise ladder");
  sw->add_option("--config", config_path)->required();
  sw->add_option("--checkpoint", checkpoint)->required();
  sw->add_option("--out", out)->required();

  auto* cm = app.add_subcommand("compare", "paired model comparison from two record CSVs");
  cm->add_option("csv_a", csv_a)->required();
  cm->add_option("csv_b", csv_b)->required();
  cm->add_option("--out-prefix", prefix);
  cm->add_option("--name-a", name_a);
  cm->add_option("--name-b", name_b);

  auto* gc = app.add_subcommand("grad-check", "finite-difference audit of every differentiable op");
  gc->add_option("--seeds", seeds, "random seeds per op");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // config/usage problems exit 2
  }

  try {
    if (*gen) return cmd_gen_data(RunConfig::from_file(config_path));
    if (*tr) return cmd_train(RunConfig::from_file(config_path), baseline);
    if (*pr)
      return cmd_predict(RunConfig::from_file(config_path), checkpoint, input, output, noise_std,
                         replicate);
    if (*ev)
      return cmd_eval(RunConfig::from_file(config_path), checkpoint, out, noise_std, split,
                      replicate);
    if (*sw) return cmd_sweep(RunConfig::from_file(config_path), checkpoint, out);
    if (*cm) return cmd_compare(csv_a, csv_b, prefix, name_a, name_b);
    if (*gc) return cmd_grad_check(seeds);
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
