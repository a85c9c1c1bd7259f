#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <vector>

#include "miseg/afa.hpp"
#include "miseg/phantom.hpp"
#include "miseg/segnet.hpp"

namespace miseg {

struct TrainConfig {
  std::filesystem::path manifest;
  std::array<int64_t, 3> patch_size{16, 32, 32};  // z, y, x voxels
  int patches_per_scan = 4;
  int scans_per_batch = 1;
  int64_t iterations = 1500;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double mixup_alpha = 0.2;
  std::optional<AfaConfig> afa;  // absent = plain baseline objective
  LossConfig loss;
  uint64_t seed = 42;
  int64_t checkpoint_interval = 0;  // 0 = final checkpoint only
  std::filesystem::path out_dir = "run";
  NetConfig net;

  void validate() const;
};

struct Batch {
  TensorF images;   // (B,1,Z,Y,X) in [-1,1]
  TensorF targets;  // (B,C,Z,Y,X) one-hot or mixup-soft
};

// n patches at uniform-random corner offsets; labels one-hot encoded into
// `num_classes` channels.
std::vector<Batch> sample_patches(const Volume& v, const LabelVolume& l, int n,
                                  const std::array<int64_t, 3>& patch_size, int num_classes,
                                  RngStream& rng);

Batch concat_batch(const std::vector<Batch>& items);

// beta_mix * a + (1 - beta_mix) * b for images and targets alike.
Batch mixup_with(const Batch& a, const Batch& b, double beta_mix);
Batch mixup(const Batch& a, const Batch& b, double alpha, RngStream& rng);

// Adaptive-moment update with bias correction; params updated in place.
template <class T>
struct AdamStateT {
  std::vector<TensorT<T>> m, v;
  int64_t t = 0;
};

using AdamState = AdamStateT<float>;

template <class T>
void adam_step(std::vector<typename SegNetT<T>::Param>& params,
               const std::vector<const TensorT<T>*>& grads, AdamStateT<T>& state, double lr,
               double beta1, double beta2, double eps) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(TensorT<T>(p.value.shape));
      state.v.push_back(TensorT<T>(p.value.shape));
    }
  }
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ValidationError("adam_step: parameter/gradient count mismatch");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(beta1, double(state.t));
  const double bc2 = 1.0 - std::pow(beta2, double(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].value;
    const auto& g = *grads[i];
    if (!p.same_shape(g)) throw ValidationError("adam_step: gradient shape mismatch");
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (size_t k = 0; k < p.data.size(); ++k) {
      const double gk = double(g.data[k]);
      const double mk = beta1 * double(m.data[k]) + (1.0 - beta1) * gk;
      const double vk = beta2 * double(v.data[k]) + (1.0 - beta2) * gk * gk;
      m.data[k] = T(mk);
      v.data[k] = T(vk);
      p.data[k] = T(double(p.data[k]) - lr * (mk / bc1) / (std::sqrt(vk / bc2) + eps));
    }
  }
}

struct TrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path log;
  std::vector<double> loss_trace;
};

// Full loop: draw scans, sample patches, mixup, compute the objective
// (adversarial-augmentation objective when cfg.afa is set), backward, Adam.
// Appends one JSON line per step to <out_dir>/train_log.jsonl and writes
// checkpoints under out_dir.
TrainResult train(const TrainConfig& cfg);

}  // namespace miseg
