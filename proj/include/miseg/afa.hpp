#pragma once

#include <cmath>
#include <vector>

#include "miseg/losses.hpp"
#include "miseg/rng.hpp"
#include "miseg/segnet.hpp"

namespace miseg {

// Adversarial feature augmentation: a single-step gradient-sign attack on the
// output of one encoder level, constrained to a range expanded around the
// clean feature's min/max, whose first/second moments are then transplanted
// onto the clean feature before the volume is segmented again. Training adds
// the clean objective and the mean of the per-ratio adversarial objectives.

struct AfaConfig {
  int attack_layer = 0;  // encoder level to attack; 0 = ceil(depth/2)
  double epsilon = 0.003;
  std::vector<double> ratios = {0.1, 0.05, 0.025, 0.0125};
  LossConfig loss;
  double sigma_eps = 1e-6;   // divisor guard in the moment transfer
  double lambda_std = 1.0;   // Gaussian init scale of the attack noise
  bool lambda_per_ratio = false;
  double clean_weight = 1.0;
  double adv_weight = 1.0;  // weight of the mean over ratios

  void validate(int depth) const {
    if (epsilon < 0.0) throw ValidationError("afa.epsilon must be >= 0");
    for (double r : ratios)
      if (r <= 0.0) throw ValidationError("afa.ratios must be positive");
    if (sigma_eps <= 0.0) throw ValidationError("afa.sigma_eps must be positive");
    if (lambda_std < 0.0) throw ValidationError("afa.lambda_std must be >= 0");
    if (attack_layer < 0 || attack_layer > depth)
      throw ValidationError("afa.attack_layer out of range for depth " + std::to_string(depth));
    loss.validate();
  }

  int resolved_layer(int depth) const {
    return attack_layer > 0 ? attack_layer : (depth + 1) / 2;
  }
};

template <class T>
struct MomentsT {
  std::vector<T> mu;     // per-channel mean over batch and spatial axes
  std::vector<T> sigma;  // per-channel population standard deviation
};

using Moments = MomentsT<float>;

template <class T>
MomentsT<T> compute_moments(const TensorT<T>& f) {
  if (f.rank() != 5) throw ValidationError("compute_moments: expects a 5-D tensor");
  const int64_t C = f.shape[1];
  const int64_t plane = f.shape[2] * f.shape[3] * f.shape[4];
  const int64_t per_channel = f.shape[0] * plane;
  MomentsT<T> m;
  m.mu.assign(size_t(C), T(0));
  m.sigma.assign(size_t(C), T(0));
  for (int64_t c = 0; c < C; ++c) {
    double sum = 0.0;
    for (int64_t b = 0; b < f.shape[0]; ++b) {
      const T* src = f.data.data() + (b * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) sum += double(src[i]);
    }
    const double mu = sum / double(per_channel);
    double var = 0.0;
    for (int64_t b = 0; b < f.shape[0]; ++b) {
      const T* src = f.data.data() + (b * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        const double d = double(src[i]) - mu;
        var += d * d;
      }
    }
    m.mu[size_t(c)] = T(mu);
    m.sigma[size_t(c)] = T(std::sqrt(var / double(per_channel)));
  }
  return m;
}

// Elementwise clamp of f to [(1-r)*min(f_clean), (1+r)*max(f_clean)], with
// the min/max taken over the whole clean tensor.
template <class T>
TensorT<T> clamp_sr(const TensorT<T>& f, const TensorT<T>& f_clean, double r) {
  if (!f.same_shape(f_clean)) throw ValidationError("clamp_sr: shape mismatch");
  if (r <= 0.0) throw ValidationError("clamp_sr: ratio must be positive");
  T m = f_clean.data[0], M = f_clean.data[0];
  for (T v : f_clean.data) {
    m = std::min(m, v);
    M = std::max(M, v);
  }
  const T lo = T((1.0 - r) * double(m));
  const T hi = T((1.0 + r) * double(M));
  TensorT<T> out = f;
  for (T& v : out.data) v = std::min(std::max(v, lo), hi);
  return out;
}

// f_clean + lambda + epsilon * sign(grad), clamped; sign(0) = 0.
template <class T>
TensorT<T> fgsm_feature(const TensorT<T>& f_clean, const TensorT<T>& grad,
                        const TensorT<T>& lambda, double epsilon, double r) {
  if (!f_clean.same_shape(grad) || !f_clean.same_shape(lambda))
    throw ValidationError("fgsm_feature: shape mismatch");
  TensorT<T> out(f_clean.shape);
  const T eps = T(epsilon);
  for (size_t i = 0; i < out.data.size(); ++i) {
    const T gi = grad.data[i];
    const T s = gi > T(0) ? T(1) : (gi < T(0) ? T(-1) : T(0));
    out.data[i] = f_clean.data[i] + lambda.data[i] + eps * s;
  }
  return clamp_sr(out, f_clean, r);
}

// Re-normalizes f_clean per channel so its moments equal those of f_adv.
// Data path: plain tensors, no graph.
template <class T>
TensorT<T> inject_moments(const TensorT<T>& f_clean, const TensorT<T>& f_adv, double sigma_eps) {
  if (!f_clean.same_shape(f_adv)) throw ValidationError("inject_moments: shape mismatch");
  const MomentsT<T> mc = compute_moments(f_clean);
  const MomentsT<T> ma = compute_moments(f_adv);
  const int64_t C = f_clean.shape[1];
  const int64_t plane = f_clean.shape[2] * f_clean.shape[3] * f_clean.shape[4];
  TensorT<T> out(f_clean.shape);
  for (int64_t b = 0; b < f_clean.shape[0]; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const T* src = f_clean.data.data() + (b * C + c) * plane;
      T* dst = out.data.data() + (b * C + c) * plane;
      const T scale = ma.sigma[size_t(c)] / (mc.sigma[size_t(c)] + T(sigma_eps));
      const T mu_c = mc.mu[size_t(c)];
      const T mu_a = ma.mu[size_t(c)];
      for (int64_t i = 0; i < plane; ++i) dst[i] = scale * (src[i] - mu_c) + mu_a;
    }
  return out;
}

// Differentiable variant: the clean feature (and hence its moments) stays in
// the graph; the adversarial moments enter as constants.
template <class T>
typename Tape<T>::Id inject_moments_node(Tape<T>& t, typename Tape<T>::Id f_clean,
                                         const TensorT<T>& f_adv, double sigma_eps) {
  const TensorT<T>& fc = t.value(f_clean);
  if (!fc.same_shape(f_adv)) throw ValidationError("inject_moments: shape mismatch");
  const MomentsT<T> ma = compute_moments(f_adv);
  const int64_t C = fc.shape[1];
  const double per_channel = double(fc.shape[0]) * double(fc.shape[2]) * double(fc.shape[3]) *
                             double(fc.shape[4]);
  TensorT<T> mu_adv({C}), sigma_adv({C});
  mu_adv.data.assign(ma.mu.begin(), ma.mu.end());
  sigma_adv.data.assign(ma.sigma.begin(), ma.sigma.end());

  auto mu_c = t.scale(t.sum_per_channel(f_clean), 1.0 / per_channel);
  auto centered = t.sub(f_clean, t.broadcast_channel(mu_c, fc.shape));
  auto var = t.scale(t.sum_per_channel(t.mul(centered, centered)), 1.0 / per_channel);
  auto denom = t.add_scalar(t.sqrt(var), sigma_eps);
  auto ratio = t.div(t.constant(std::move(sigma_adv)), denom);
  return t.add(t.mul(centered, t.broadcast_channel(ratio, fc.shape)),
               t.broadcast_channel(t.constant(std::move(mu_adv)), fc.shape));
}

// One attack's transient state, kept around for diagnostics and tests.
template <class T>
struct AttackDrawT {
  TensorT<T> lambda;
  TensorT<T> grad;
  std::vector<TensorT<T>> adv_features;  // one per ratio
  MomentsT<T> clean_moments;
  std::vector<MomentsT<T>> adv_moments;
};

using AttackDraw = AttackDrawT<float>;

// Clean forward pass with a feature tap: returns the tap value, the gradient
// of the segmentation loss at the tap, and the loss value.
template <class T>
struct FeatureGradient {
  TensorT<T> f_clean;
  TensorT<T> grad;
  double clean_loss = 0.0;
};

template <class T>
FeatureGradient<T> feature_gradient(const SegNetT<T>& net, const TensorT<T>& x,
                                    const TensorT<T>& target_onehot, int attack_layer,
                                    const LossConfig& loss_cfg = {}) {
  Tape<T> tape;
  NetGraph<T> g(tape, net);
  auto fwd = g.forward(g.input(x), attack_layer);
  auto probs = tape.softmax_channels(fwd.logits);
  auto loss = seg_loss(tape, probs, tape.constant(target_onehot), loss_cfg);
  tape.backward(loss);
  FeatureGradient<T> out;
  out.f_clean = tape.value(fwd.tap);
  out.grad = tape.grad(fwd.tap);
  out.clean_loss = double(tape.value(loss).data[0]);
  return out;
}

template <class T>
struct AfaStepOutput {
  typename Tape<T>::Id total = Tape<T>::kNone;
  double clean_loss = 0.0;
  std::vector<double> adv_losses;  // one per ratio
  double grad_l1 = 0.0;
};

// Builds the combined objective on the caller's tape:
//   total = clean_weight * L_clean + adv_weight * mean_k L_k
// where L_k segments with the moment-injected feature substituted at the
// attack layer. The clean pass runs backward once to obtain the attack
// gradient; the caller runs backward on `total` for the parameter update.
// The adversarial branches see the clean feature as data, so their gradients
// reach the encoder below the attack layer only through the skip connections
// that do not pass the substituted feature.
template <class T>
AfaStepOutput<T> afa_training_loss(Tape<T>& tape, NetGraph<T>& net, const TensorT<T>& x,
                                   const TensorT<T>& target_onehot, const AfaConfig& cfg,
                                   RngStream& rng) {
  const int depth = net.config().depth;
  cfg.validate(depth);
  const int layer = cfg.resolved_layer(depth);

  auto xid = net.input(x);
  auto gid = tape.constant(target_onehot);
  auto fwd = net.forward(xid, layer);
  auto clean_loss_id = seg_loss(tape, tape.softmax_channels(fwd.logits), gid, cfg.loss);
  tape.backward(clean_loss_id);

  AfaStepOutput<T> out;
  out.clean_loss = double(tape.value(clean_loss_id).data[0]);
  const TensorT<T> f_clean = tape.value(fwd.tap);
  const TensorT<T> grad = tape.grad(fwd.tap);
  for (T v : grad.data) out.grad_l1 += std::abs(double(v));

  if (cfg.ratios.empty()) {
    out.total = cfg.clean_weight == 1.0 ? clean_loss_id : tape.scale(clean_loss_id, cfg.clean_weight);
    return out;
  }

  TensorT<T> lambda(f_clean.shape);
  lambda.fill_normal(rng, 0.0, cfg.lambda_std);

  typename Tape<T>::Id adv_sum = Tape<T>::kNone;
  for (double r : cfg.ratios) {
    if (cfg.lambda_per_ratio) lambda.fill_normal(rng, 0.0, cfg.lambda_std);
    TensorT<T> f_adv = fgsm_feature(f_clean, grad, lambda, cfg.epsilon, r);
    TensorT<T> f_noisy = inject_moments(f_clean, f_adv, cfg.sigma_eps);
    auto rep = tape.leaf(std::move(f_noisy), true);
    auto fwd_k = net.forward(xid, 0, layer, rep);
    auto lk = seg_loss(tape, tape.softmax_channels(fwd_k.logits), gid, cfg.loss);
    out.adv_losses.push_back(double(tape.value(lk).data[0]));
    adv_sum = adv_sum == Tape<T>::kNone ? lk : tape.add(adv_sum, lk);
  }
  auto adv_mean = tape.scale(adv_sum, cfg.adv_weight / double(cfg.ratios.size()));
  out.total = tape.add(tape.scale(clean_loss_id, cfg.clean_weight), adv_mean);
  return out;
}

}  // namespace miseg
