#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "miseg/rng.hpp"
#include "miseg/tape.hpp"

namespace miseg {

// Miniature U-shaped encoder-decoder built from 3x3x3 conv + rectifier
// blocks. Encoder level i (1-based) produces base*2^(i-1) channels at spatial
// resolution /2^(i-1); the transition between levels is a stride-2 conv.
// Decoder stages upsample, concatenate the skip feature of the same level,
// and convolve back down; a 1x1x1 head emits per-class logits.

struct NetConfig {
  int depth = 3;          // number of encoder levels, >= 2
  int base_channels = 8;  // channels at the first level
  int in_channels = 1;
  int num_classes = 4;
  int kernel = 3;
  uint64_t init_seed = 0;

  void validate() const {
    if (depth < 2) throw ValidationError("net.depth must be >= 2");
    if (base_channels < 1) throw ValidationError("net.base_channels must be >= 1");
    if (in_channels != 1) throw ValidationError("net.in_channels must be 1");
    if (num_classes < 2) throw ValidationError("net.num_classes must be >= 2");
    if (kernel != 3) throw ValidationError("net.kernel must be 3");
  }

  int level_channels(int level) const {  // level is 1-based
    return base_channels << (level - 1);
  }
  // Input patch dims (z,y,x) must all be divisible by this.
  int spatial_divisor() const { return 1 << (depth - 1); }
};

template <class T>
struct SegNetT {
  struct Param {
    std::string name;
    TensorT<T> value;
  };

  NetConfig cfg;
  std::vector<Param> params;  // declared order; also the checkpoint order

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& p : params) n += p.value.numel();
    return n;
  }

  template <class U>
  SegNetT<U> cast() const {
    SegNetT<U> out;
    out.cfg = cfg;
    out.params.reserve(params.size());
    for (const auto& p : params) out.params.push_back({p.name, p.value.template cast<U>()});
    return out;
  }
};

using SegNet = SegNetT<float>;

namespace segnet_detail {

template <class T>
void add_conv(SegNetT<T>& net, RngStream& rng, const std::string& name, int cin, int cout,
              int k) {
  // He-style fan-in scaled uniform for weights, smaller uniform for biases.
  const int64_t fan_in = int64_t(cin) * k * k * k;
  const double wb = std::sqrt(6.0 / double(fan_in));
  const double bb = 1.0 / std::sqrt(double(fan_in));
  TensorT<T> w({cout, cin, k, k, k});
  w.fill_uniform(rng, -wb, wb);
  TensorT<T> b({cout});
  b.fill_uniform(rng, -bb, bb);
  net.params.push_back({name + ".w", std::move(w)});
  net.params.push_back({name + ".b", std::move(b)});
}

}  // namespace segnet_detail

// Parameter tensors in declared order:
//   e1, down1, e2, down2, ..., eL, d(L-1), ..., d1, head
template <class T>
SegNetT<T> build_segnet(const NetConfig& cfg) {
  cfg.validate();
  SegNetT<T> net;
  net.cfg = cfg;
  RngStream rng(cfg.init_seed, streams::kNetInit, 0);
  const int k = cfg.kernel;
  for (int i = 1; i <= cfg.depth; ++i) {
    const int ch = cfg.level_channels(i);
    const int cin = i == 1 ? cfg.in_channels : ch;
    segnet_detail::add_conv(net, rng, "e" + std::to_string(i), cin, ch, k);
    if (i < cfg.depth)
      segnet_detail::add_conv(net, rng, "down" + std::to_string(i), ch, cfg.level_channels(i + 1), k);
  }
  for (int j = cfg.depth - 1; j >= 1; --j) {
    const int ch = cfg.level_channels(j);
    segnet_detail::add_conv(net, rng, "d" + std::to_string(j), 3 * ch, ch, k);
  }
  segnet_detail::add_conv(net, rng, "head", cfg.base_channels, cfg.num_classes, 1);
  return net;
}

// Binds one network's parameters to a tape as trainable leaves and builds
// forward graphs on it. Several forward passes on the same binder share the
// parameter leaves, so one backward accumulates their gradients jointly.
template <class T>
class NetGraph {
 public:
  using Id = typename Tape<T>::Id;

  NetGraph(Tape<T>& tape, const SegNetT<T>& net) : tape_(&tape), net_(&net) {
    param_ids_.reserve(net.params.size());
    for (const auto& p : net.params) param_ids_.push_back(tape.leaf(p.value, true));
  }

  struct Forward {
    Id logits = Tape<T>::kNone;
    Id tap = Tape<T>::kNone;
  };

  Id input(const TensorT<T>& x) {
    check_input(x);
    return tape_->leaf(x, false);
  }

  // tap_level: capture the post-activation output of that encoder level
  // (0 = none). inject_level: substitute `replacement` for that level's
  // output; every consumer (downsample chain and skip) sees the replacement.
  Forward forward(Id x, int tap_level = 0, int inject_level = 0,
                  Id replacement = Tape<T>::kNone) {
    const NetConfig& cfg = net_->cfg;
    if (tap_level < 0 || tap_level > cfg.depth)
      throw ValidationError("forward: tap level out of range");
    if (inject_level < 0 || inject_level > cfg.depth)
      throw ValidationError("forward: inject level out of range");
    if ((inject_level > 0) != (replacement != Tape<T>::kNone))
      throw ValidationError("forward: inject level and replacement go together");

    Tape<T>& t = *tape_;
    Forward out;
    std::vector<Id> skip(size_t(cfg.depth) + 1, Tape<T>::kNone);
    Id cur = x;
    for (int i = 1; i <= cfg.depth; ++i) {
      if (i == inject_level) {
        const auto& expect = expected_tap_shape(t.value(x).shape, i);
        if (t.value(replacement).shape != expect)
          throw ValidationError("forward: replacement shape " +
                                shape_str(t.value(replacement).shape) + " != tap shape " +
                                shape_str(expect));
        skip[size_t(i)] = replacement;
      } else {
        Id inp = i == 1 ? x : t.conv3d(skip[size_t(i - 1)], param_ids_[idx(2 * (i - 1) - 1, 0)],
                                       param_ids_[idx(2 * (i - 1) - 1, 1)], {2, 2, 2}, {1, 1, 1});
        if (i > 1) inp = t.relu(inp);
        Id c = t.conv3d(inp, param_ids_[idx(2 * (i - 1), 0)], param_ids_[idx(2 * (i - 1), 1)],
                        {1, 1, 1}, {1, 1, 1});
        skip[size_t(i)] = t.relu(c);
      }
      if (i == tap_level) {
        out.tap = skip[size_t(i)];
        t.mark_tap(out.tap, "e" + std::to_string(i));
      }
    }
    cur = skip[size_t(cfg.depth)];
    // decoder params follow the encoder pairs: index 2*depth-1 + (depth-1-j)
    for (int j = cfg.depth - 1; j >= 1; --j) {
      const int p = 2 * cfg.depth - 1 + (cfg.depth - 1 - j);
      Id up = t.upsample_nearest2(cur);
      Id cat = t.concat_channels(up, skip[size_t(j)]);
      cur = t.relu(t.conv3d(cat, param_ids_[idx(p, 0)], param_ids_[idx(p, 1)], {1, 1, 1}, {1, 1, 1}));
    }
    const int head = 3 * cfg.depth - 2;
    out.logits = t.conv3d(cur, param_ids_[idx(head, 0)], param_ids_[idx(head, 1)], {1, 1, 1}, {0, 0, 0});
    return out;
  }

  const std::vector<Id>& param_ids() const { return param_ids_; }
  const NetConfig& config() const { return net_->cfg; }

  std::vector<int64_t> expected_tap_shape(const std::vector<int64_t>& in_shape, int level) const {
    const int d = 1 << (level - 1);
    return {in_shape[0], int64_t(net_->cfg.level_channels(level)), in_shape[2] / d,
            in_shape[3] / d, in_shape[4] / d};
  }

 private:
  Tape<T>* tape_;
  const SegNetT<T>* net_;
  std::vector<Id> param_ids_;

  void check_input(const TensorT<T>& x) const {
    const NetConfig& cfg = net_->cfg;
    if (x.rank() != 5 || x.shape[1] != cfg.in_channels)
      throw ValidationError("forward: input must be (B," + std::to_string(cfg.in_channels) +
                            ",Z,Y,X), got " + shape_str(x.shape));
    const int div = cfg.spatial_divisor();
    for (int a = 2; a < 5; ++a)
      if (x.shape[size_t(a)] % div != 0)
        throw ValidationError("forward: spatial dims must be divisible by " + std::to_string(div) +
                              ", got " + shape_str(x.shape));
  }

  size_t idx(int conv_index, int which) const {  // which: 0 weight, 1 bias
    return size_t(2 * conv_index + which);
  }
};

// Convenience wrappers over a throwaway tape.

template <class T>
TensorT<T> forward_clean(const SegNetT<T>& net, const TensorT<T>& x) {
  Tape<T> tape;
  NetGraph<T> g(tape, net);
  auto f = g.forward(g.input(x));
  return tape.value(f.logits);
}

// Checkpoint file: magic "MICKPT01", u32 little-endian JSON header length,
// JSON header, then float32 parameter payload in declared order.
void save_checkpoint(const SegNet& net, int64_t step, const std::filesystem::path& path);
SegNet load_checkpoint(const std::filesystem::path& path, int64_t* step_out = nullptr);

}  // namespace miseg
