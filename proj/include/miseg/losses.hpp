#pragma once

#include "miseg/tape.hpp"

namespace miseg {

struct LossConfig {
  double gamma = 0.5;        // dice weight; cross-entropy gets 1 - gamma
  double smooth_eps = 1e-5;  // dice denominator guard

  void validate() const {
    if (gamma < 0.0 || gamma > 1.0) throw ValidationError("loss.gamma must be in [0,1]");
    if (smooth_eps <= 0.0) throw ValidationError("loss.smooth_eps must be positive");
  }
};

namespace loss_detail {

template <class T>
void check_pair(const Tape<T>& t, typename Tape<T>::Id probs, typename Tape<T>::Id target) {
  const auto& p = t.value(probs);
  const auto& g = t.value(target);
  if (p.rank() != 5 || !p.same_shape(g))
    throw ValidationError("loss: probs/target must be matching 5-D tensors, got " +
                          shape_str(p.shape) + " vs " + shape_str(g.shape));
  if (p.shape[1] < 2) throw ValidationError("loss: need at least 2 classes");
}

}  // namespace loss_detail

// Soft Dice over foreground channels (class 0 is background): mean over
// c >= 1 of 1 - (2*sum(p_c*g_c) + eps) / (sum(p_c) + sum(g_c) + eps).
template <class T>
typename Tape<T>::Id dice_loss(Tape<T>& t, typename Tape<T>::Id probs,
                               typename Tape<T>::Id target, const LossConfig& cfg = {}) {
  loss_detail::check_pair(t, probs, target);
  const int64_t C = t.value(probs).shape[1];
  auto inter = t.sum_per_channel(t.mul(probs, target));
  auto psum = t.sum_per_channel(probs);
  auto gsum = t.sum_per_channel(target);
  auto num = t.add_scalar(t.scale(inter, 2.0), cfg.smooth_eps);
  auto den = t.add_scalar(t.add(psum, gsum), cfg.smooth_eps);
  auto overlap = t.slice_channels(t.div(num, den), 1, C);
  return t.add_scalar(t.scale(t.reduce_mean(overlap), -1.0), 1.0);
}

// Mean over voxels of -log p at the target class; probabilities are clamped
// to 1e-12 before the log. Soft targets are supported (mixup produces them).
template <class T>
typename Tape<T>::Id cross_entropy_loss(Tape<T>& t, typename Tape<T>::Id probs,
                                        typename Tape<T>::Id target) {
  loss_detail::check_pair(t, probs, target);
  const auto& s = t.value(probs).shape;
  const double voxels = double(s[0]) * double(s[2]) * double(s[3]) * double(s[4]);
  auto logp = t.log(t.clamp_min(probs, 1e-12));
  return t.scale(t.reduce_sum(t.mul(target, logp)), -1.0 / voxels);
}

// gamma * dice + (1 - gamma) * cross-entropy.
template <class T>
typename Tape<T>::Id seg_loss(Tape<T>& t, typename Tape<T>::Id probs,
                              typename Tape<T>::Id target, const LossConfig& cfg = {}) {
  cfg.validate();
  auto d = dice_loss(t, probs, target, cfg);
  auto ce = cross_entropy_loss(t, probs, target);
  return t.add(t.scale(d, cfg.gamma), t.scale(ce, 1.0 - cfg.gamma));
}

}  // namespace miseg
