#pragma once

#include <array>
#include <cmath>
#include <deque>
#include <string>
#include <vector>

#include "miseg/conv3d.hpp"
#include "miseg/tensor.hpp"

namespace miseg {

// Reverse-mode automatic differentiation over a flat tape of nodes. Nodes are
// appended in construction order, which is a topological order, so backward
// is a single reverse sweep. backward() may be called more than once on the
// same tape; each call reseeds and clears previous gradients.

enum class Op {
  kLeaf,
  kConv3d,
  kRelu,
  kUpsample2,
  kConcatC,
  kSoftmaxC,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kScale,
  kAddScalar,
  kLog,
  kSqrt,
  kClampMin,
  kReduceMean,
  kReduceSum,
  kSumC,
  kBroadcastC,
  kSliceC,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConv3d: return "conv3d";
    case Op::kRelu: return "relu";
    case Op::kUpsample2: return "upsample_nearest";
    case Op::kConcatC: return "concat_channels";
    case Op::kSoftmaxC: return "softmax_channels";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kScale: return "scale";
    case Op::kAddScalar: return "add_scalar";
    case Op::kLog: return "log";
    case Op::kSqrt: return "sqrt";
    case Op::kClampMin: return "clamp_min";
    case Op::kReduceMean: return "reduce_mean";
    case Op::kReduceSum: return "reduce_sum";
    case Op::kSumC: return "sum_per_channel";
    case Op::kBroadcastC: return "broadcast_channel";
    case Op::kSliceC: return "slice_channels";
  }
  return "?";
}

template <class T>
class Tape {
 public:
  using Id = int32_t;
  static constexpr Id kNone = -1;

  struct Node {
    Op op = Op::kLeaf;
    std::array<Id, 3> in{kNone, kNone, kNone};
    TensorT<T> value;
    TensorT<T> grad;  // empty until backward touches the node
    bool requires_grad = false;
    std::array<int, 3> stride{1, 1, 1};
    std::array<int, 3> pad{0, 0, 0};
    double scalar = 0.0;
    int64_t s0 = 0, s1 = 0;  // slice bounds
    std::string tap_tag;
  };

  Id leaf(TensorT<T> v, bool requires_grad = false) {
    Node n;
    n.op = Op::kLeaf;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  Id constant(TensorT<T> v) { return leaf(std::move(v), false); }

  void mark_tap(Id id, std::string tag) { at(id).tap_tag = std::move(tag); }

  Id conv3d(Id x, Id w, Id b, std::array<int, 3> stride, std::array<int, 3> pad) {
    Node n;
    n.op = Op::kConv3d;
    n.in = {x, w, b};
    n.stride = stride;
    n.pad = pad;
    n.value = conv3d_forward(value(x), value(w), value(b), stride, pad);
    return push_derived(std::move(n));
  }

  Id relu(Id x) {
    Node n;
    n.op = Op::kRelu;
    n.in = {x, kNone, kNone};
    n.value = value(x);
    for (auto& v : n.value.data) v = v > T(0) ? v : T(0);
    return push_derived(std::move(n));
  }

  Id upsample_nearest2(Id x) {
    const TensorT<T>& in = value(x);
    if (in.rank() != 5) throw ValidationError("upsample_nearest: expects a 5-D tensor");
    Node n;
    n.op = Op::kUpsample2;
    n.in = {x, kNone, kNone};
    n.value = TensorT<T>({in.shape[0], in.shape[1], in.shape[2] * 2, in.shape[3] * 2, in.shape[4] * 2});
    const int64_t oz = in.shape[2] * 2, oy = in.shape[3] * 2, ox = in.shape[4] * 2;
    for (int64_t b = 0; b < in.shape[0]; ++b)
      for (int64_t c = 0; c < in.shape[1]; ++c)
        for (int64_t z = 0; z < oz; ++z)
          for (int64_t y = 0; y < oy; ++y)
            for (int64_t xx = 0; xx < ox; ++xx)
              n.value.at5(b, c, z, y, xx) = in.at5(b, c, z / 2, y / 2, xx / 2);
    return push_derived(std::move(n));
  }

  Id concat_channels(Id a, Id b) {
    const TensorT<T>& ta = value(a);
    const TensorT<T>& tb = value(b);
    if (ta.rank() != 5 || tb.rank() != 5)
      throw ValidationError("concat_channels: expects 5-D tensors");
    for (int i : {0, 2, 3, 4})
      if (ta.shape[size_t(i)] != tb.shape[size_t(i)])
        throw ValidationError("concat_channels: non-channel dims differ: " + shape_str(ta.shape) +
                              " vs " + shape_str(tb.shape));
    Node n;
    n.op = Op::kConcatC;
    n.in = {a, b, kNone};
    n.value = TensorT<T>({ta.shape[0], ta.shape[1] + tb.shape[1], ta.shape[2], ta.shape[3], ta.shape[4]});
    const int64_t plane = ta.shape[2] * ta.shape[3] * ta.shape[4];
    for (int64_t bi = 0; bi < ta.shape[0]; ++bi) {
      T* dst = n.value.data.data() + bi * (ta.shape[1] + tb.shape[1]) * plane;
      const T* pa = ta.data.data() + bi * ta.shape[1] * plane;
      const T* pb = tb.data.data() + bi * tb.shape[1] * plane;
      std::copy(pa, pa + ta.shape[1] * plane, dst);
      std::copy(pb, pb + tb.shape[1] * plane, dst + ta.shape[1] * plane);
    }
    return push_derived(std::move(n));
  }

  // Softmax over the channel axis, per voxel, numerically stabilized.
  Id softmax_channels(Id x) {
    const TensorT<T>& in = value(x);
    if (in.rank() != 5) throw ValidationError("softmax_channels: expects a 5-D tensor");
    Node n;
    n.op = Op::kSoftmaxC;
    n.in = {x, kNone, kNone};
    n.value = TensorT<T>(in.shape);
    const int64_t C = in.shape[1];
    const int64_t plane = in.shape[2] * in.shape[3] * in.shape[4];
    for (int64_t b = 0; b < in.shape[0]; ++b) {
      const T* src = in.data.data() + b * C * plane;
      T* dst = n.value.data.data() + b * C * plane;
      for (int64_t v = 0; v < plane; ++v) {
        T mx = src[v];
        for (int64_t c = 1; c < C; ++c) mx = std::max(mx, src[c * plane + v]);
        T sum = T(0);
        for (int64_t c = 0; c < C; ++c) {
          const T e = std::exp(src[c * plane + v] - mx);
          dst[c * plane + v] = e;
          sum += e;
        }
        const T inv = T(1) / sum;
        for (int64_t c = 0; c < C; ++c) dst[c * plane + v] *= inv;
      }
    }
    return push_derived(std::move(n));
  }

  Id add(Id a, Id b) { return binary(Op::kAdd, a, b); }
  Id sub(Id a, Id b) { return binary(Op::kSub, a, b); }
  Id mul(Id a, Id b) { return binary(Op::kMul, a, b); }
  Id div(Id a, Id b) { return binary(Op::kDiv, a, b); }

  Id scale(Id a, double s) {
    Node n = unary(Op::kScale, a);
    n.scalar = s;
    for (auto& v : n.value.data) v = T(double(v) * s);
    return push_derived(std::move(n));
  }

  Id add_scalar(Id a, double s) {
    Node n = unary(Op::kAddScalar, a);
    n.scalar = s;
    for (auto& v : n.value.data) v = T(double(v) + s);
    return push_derived(std::move(n));
  }

  Id log(Id a) {
    Node n = unary(Op::kLog, a);
    for (auto& v : n.value.data) v = std::log(v);
    return push_derived(std::move(n));
  }

  Id sqrt(Id a) {
    Node n = unary(Op::kSqrt, a);
    for (auto& v : n.value.data) v = std::sqrt(v);
    return push_derived(std::move(n));
  }

  Id clamp_min(Id a, double lo) {
    Node n = unary(Op::kClampMin, a);
    n.scalar = lo;
    for (auto& v : n.value.data) v = v < T(lo) ? T(lo) : v;
    return push_derived(std::move(n));
  }

  Id reduce_mean(Id a) {
    Node n = unary(Op::kReduceMean, a);
    T sum = T(0);
    for (auto v : n.value.data) sum += v;
    TensorT<T> out({1});
    out.data[0] = sum / T(double(n.value.numel()));
    n.value = std::move(out);
    return push_derived(std::move(n));
  }

  Id reduce_sum(Id a) {
    Node n = unary(Op::kReduceSum, a);
    T sum = T(0);
    for (auto v : n.value.data) sum += v;
    TensorT<T> out({1});
    out.data[0] = sum;
    n.value = std::move(out);
    return push_derived(std::move(n));
  }

  // (B,C,Z,Y,X) -> (C), summing over batch and spatial axes.
  Id sum_per_channel(Id a) {
    const TensorT<T>& in = value(a);
    if (in.rank() != 5) throw ValidationError("sum_per_channel: expects a 5-D tensor");
    Node n;
    n.op = Op::kSumC;
    n.in = {a, kNone, kNone};
    const int64_t C = in.shape[1];
    const int64_t plane = in.shape[2] * in.shape[3] * in.shape[4];
    n.value = TensorT<T>({C});
    for (int64_t b = 0; b < in.shape[0]; ++b)
      for (int64_t c = 0; c < C; ++c) {
        const T* src = in.data.data() + (b * C + c) * plane;
        T s = T(0);
        for (int64_t v = 0; v < plane; ++v) s += src[v];
        n.value.data[size_t(c)] += s;
      }
    return push_derived(std::move(n));
  }

  // (C) -> (B,C,Z,Y,X), replicating each channel value.
  Id broadcast_channel(Id a, const std::vector<int64_t>& target_shape) {
    const TensorT<T>& in = value(a);
    if (in.rank() != 1 || target_shape.size() != 5 || target_shape[1] != in.shape[0])
      throw ValidationError("broadcast_channel: need a (C) tensor and 5-D target with matching C");
    Node n;
    n.op = Op::kBroadcastC;
    n.in = {a, kNone, kNone};
    n.value = TensorT<T>(target_shape);
    const int64_t C = target_shape[1];
    const int64_t plane = target_shape[2] * target_shape[3] * target_shape[4];
    for (int64_t b = 0; b < target_shape[0]; ++b)
      for (int64_t c = 0; c < C; ++c) {
        T* dst = n.value.data.data() + (b * C + c) * plane;
        const T v = in.data[size_t(c)];
        for (int64_t i = 0; i < plane; ++i) dst[i] = v;
      }
    return push_derived(std::move(n));
  }

  // [from, to) of a 1-D tensor.
  Id slice_channels(Id a, int64_t from, int64_t to) {
    const TensorT<T>& in = value(a);
    if (in.rank() != 1) throw ValidationError("slice_channels: expects a 1-D tensor");
    if (from < 0 || to > in.shape[0] || from >= to)
      throw ValidationError("slice_channels: bad range");
    Node n;
    n.op = Op::kSliceC;
    n.in = {a, kNone, kNone};
    n.s0 = from;
    n.s1 = to;
    n.value = TensorT<T>({to - from});
    std::copy(in.data.begin() + from, in.data.begin() + to, n.value.data.begin());
    return push_derived(std::move(n));
  }

  // Reverse accumulation from a scalar node. Clears all gradients first and
  // seeds the loss gradient with 1.
  void backward(Id loss) {
    if (value(loss).numel() != 1) throw ValidationError("backward: loss must be a scalar");
    for (auto& n : nodes_) n.grad = TensorT<T>();
    std::vector<char> needed(nodes_.size(), 0);
    needed[size_t(loss)] = 1;
    for (Id i = loss; i >= 0; --i) {
      if (!needed[size_t(i)]) continue;
      for (Id j : nodes_[size_t(i)].in)
        if (j != kNone) needed[size_t(j)] = 1;
    }
    ensure_grad(loss);
    at(loss).grad.data[0] = T(1);
    // requires_grad is monotone along edges, so subgraphs without it cannot
    // reach a trainable leaf and are skipped whole.
    for (Id i = loss; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (!needed[size_t(i)] || !n.requires_grad || n.grad.data.empty()) continue;
      propagate(i);
    }
  }

  const TensorT<T>& value(Id id) const { return nodes_.at(size_t(id)).value; }
  const TensorT<T>& grad(Id id) const {
    const Node& n = nodes_.at(size_t(id));
    if (n.grad.data.empty()) throw ValidationError("grad: node has no gradient; run backward first");
    return n.grad;
  }
  bool has_grad(Id id) const { return !nodes_.at(size_t(id)).grad.data.empty(); }
  const Node& node(Id id) const { return nodes_.at(size_t(id)); }
  size_t size() const { return nodes_.size(); }

 private:
  // deque keeps value()/grad() references stable while the graph grows
  std::deque<Node> nodes_;

  Node& at(Id id) { return nodes_.at(size_t(id)); }

  Id push(Node n) {
    nodes_.push_back(std::move(n));
    return Id(nodes_.size() - 1);
  }

  Id push_derived(Node n) {
    for (Id j : n.in)
      if (j != kNone && nodes_[size_t(j)].requires_grad) n.requires_grad = true;
    return push(std::move(n));
  }

  Node unary(Op op, Id a) {
    Node n;
    n.op = op;
    n.in = {a, kNone, kNone};
    n.value = value(a);
    return n;
  }

  Id binary(Op op, Id a, Id b) {
    const TensorT<T>& ta = value(a);
    const TensorT<T>& tb = value(b);
    if (!ta.same_shape(tb))
      throw ValidationError(std::string(op_name(op)) + ": shape mismatch " + shape_str(ta.shape) +
                            " vs " + shape_str(tb.shape));
    Node n;
    n.op = op;
    n.in = {a, b, kNone};
    n.value = TensorT<T>(ta.shape);
    const size_t m = ta.data.size();
    switch (op) {
      case Op::kAdd:
        for (size_t i = 0; i < m; ++i) n.value.data[i] = ta.data[i] + tb.data[i];
        break;
      case Op::kSub:
        for (size_t i = 0; i < m; ++i) n.value.data[i] = ta.data[i] - tb.data[i];
        break;
      case Op::kMul:
        for (size_t i = 0; i < m; ++i) n.value.data[i] = ta.data[i] * tb.data[i];
        break;
      case Op::kDiv:
        for (size_t i = 0; i < m; ++i) n.value.data[i] = ta.data[i] / tb.data[i];
        break;
      default:
        throw ValidationError("binary: bad op");
    }
    return push_derived(std::move(n));
  }

  void ensure_grad(Id id) {
    Node& n = at(id);
    if (n.grad.data.empty()) n.grad = TensorT<T>(n.value.shape);
  }

  TensorT<T>& grad_buf(Id id) {
    ensure_grad(id);
    return at(id).grad;
  }

  // Adds node i's adjoint contributions to its inputs.
  void propagate(Id i) {
    Node& n = at(i);
    const TensorT<T>& g = n.grad;
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kConv3d: {
        conv3d_backward(value(n.in[0]), value(n.in[1]), g, n.stride, n.pad, grad_buf(n.in[0]),
                        grad_buf(n.in[1]), grad_buf(n.in[2]));
        break;
      }
      case Op::kRelu: {
        const TensorT<T>& x = value(n.in[0]);
        TensorT<T>& gx = grad_buf(n.in[0]);
        for (size_t k = 0; k < x.data.size(); ++k)
          if (x.data[k] > T(0)) gx.data[k] += g.data[k];
        break;
      }
      case Op::kUpsample2: {
        const TensorT<T>& x = value(n.in[0]);
        TensorT<T>& gx = grad_buf(n.in[0]);
        const int64_t oz = n.value.shape[2], oy = n.value.shape[3], ox = n.value.shape[4];
        for (int64_t b = 0; b < x.shape[0]; ++b)
          for (int64_t c = 0; c < x.shape[1]; ++c)
            for (int64_t z = 0; z < oz; ++z)
              for (int64_t y = 0; y < oy; ++y)
                for (int64_t xx = 0; xx < ox; ++xx)
                  gx.at5(b, c, z / 2, y / 2, xx / 2) += g.at5(b, c, z, y, xx);
        break;
      }
      case Op::kConcatC: {
        const TensorT<T>& a = value(n.in[0]);
        const TensorT<T>& b = value(n.in[1]);
        TensorT<T>& ga = grad_buf(n.in[0]);
        TensorT<T>& gb = grad_buf(n.in[1]);
        const int64_t plane = a.shape[2] * a.shape[3] * a.shape[4];
        const int64_t ca = a.shape[1], cb = b.shape[1];
        for (int64_t bi = 0; bi < a.shape[0]; ++bi) {
          const T* src = g.data.data() + bi * (ca + cb) * plane;
          T* da = ga.data.data() + bi * ca * plane;
          T* db = gb.data.data() + bi * cb * plane;
          for (int64_t k = 0; k < ca * plane; ++k) da[k] += src[k];
          for (int64_t k = 0; k < cb * plane; ++k) db[k] += src[ca * plane + k];
        }
        break;
      }
      case Op::kSoftmaxC: {
        TensorT<T>& gx = grad_buf(n.in[0]);
        const TensorT<T>& p = n.value;
        const int64_t C = p.shape[1];
        const int64_t plane = p.shape[2] * p.shape[3] * p.shape[4];
        for (int64_t b = 0; b < p.shape[0]; ++b) {
          const T* pv = p.data.data() + b * C * plane;
          const T* gv = g.data.data() + b * C * plane;
          T* dx = gx.data.data() + b * C * plane;
          for (int64_t v = 0; v < plane; ++v) {
            T dot = T(0);
            for (int64_t c = 0; c < C; ++c) dot += pv[c * plane + v] * gv[c * plane + v];
            for (int64_t c = 0; c < C; ++c)
              dx[c * plane + v] += pv[c * plane + v] * (gv[c * plane + v] - dot);
          }
        }
        break;
      }
      case Op::kAdd: {
        accumulate(n.in[0], g, T(1));
        accumulate(n.in[1], g, T(1));
        break;
      }
      case Op::kSub: {
        accumulate(n.in[0], g, T(1));
        accumulate(n.in[1], g, T(-1));
        break;
      }
      case Op::kMul: {
        const TensorT<T>& a = value(n.in[0]);
        const TensorT<T>& b = value(n.in[1]);
        TensorT<T>& ga = grad_buf(n.in[0]);
        TensorT<T>& gb = grad_buf(n.in[1]);
        for (size_t k = 0; k < g.data.size(); ++k) {
          ga.data[k] += g.data[k] * b.data[k];
          gb.data[k] += g.data[k] * a.data[k];
        }
        break;
      }
      case Op::kDiv: {
        const TensorT<T>& a = value(n.in[0]);
        const TensorT<T>& b = value(n.in[1]);
        TensorT<T>& ga = grad_buf(n.in[0]);
        TensorT<T>& gb = grad_buf(n.in[1]);
        for (size_t k = 0; k < g.data.size(); ++k) {
          const T inv = T(1) / b.data[k];
          ga.data[k] += g.data[k] * inv;
          gb.data[k] -= g.data[k] * a.data[k] * inv * inv;
        }
        break;
      }
      case Op::kScale: {
        accumulate(n.in[0], g, T(n.scalar));
        break;
      }
      case Op::kAddScalar: {
        accumulate(n.in[0], g, T(1));
        break;
      }
      case Op::kLog: {
        const TensorT<T>& x = value(n.in[0]);
        TensorT<T>& gx = grad_buf(n.in[0]);
        for (size_t k = 0; k < g.data.size(); ++k) gx.data[k] += g.data[k] / x.data[k];
        break;
      }
      case Op::kSqrt: {
        TensorT<T>& gx = grad_buf(n.in[0]);
        for (size_t k = 0; k < g.data.size(); ++k)
          gx.data[k] += g.data[k] / (T(2) * n.value.data[k]);
        break;
      }
      case Op::kClampMin: {
        const TensorT<T>& x = value(n.in[0]);
        TensorT<T>& gx = grad_buf(n.in[0]);
        for (size_t k = 0; k < g.data.size(); ++k)
          if (x.data[k] > T(n.scalar)) gx.data[k] += g.data[k];
        break;
      }
      case Op::kReduceMean: {
        TensorT<T>& gx = grad_buf(n.in[0]);
        const T s = g.data[0] / T(double(gx.numel()));
        for (auto& v : gx.data) v += s;
        break;
      }
      case Op::kReduceSum: {
        TensorT<T>& gx = grad_buf(n.in[0]);
        const T s = g.data[0];
        for (auto& v : gx.data) v += s;
        break;
      }
      case Op::kSumC: {
        const TensorT<T>& x = value(n.in[0]);
        TensorT<T>& gx = grad_buf(n.in[0]);
        const int64_t C = x.shape[1];
        const int64_t plane = x.shape[2] * x.shape[3] * x.shape[4];
        for (int64_t b = 0; b < x.shape[0]; ++b)
          for (int64_t c = 0; c < C; ++c) {
            T* dst = gx.data.data() + (b * C + c) * plane;
            const T s = g.data[size_t(c)];
            for (int64_t k = 0; k < plane; ++k) dst[k] += s;
          }
        break;
      }
      case Op::kBroadcastC: {
        TensorT<T>& gx = grad_buf(n.in[0]);
        const int64_t C = n.value.shape[1];
        const int64_t plane = n.value.shape[2] * n.value.shape[3] * n.value.shape[4];
        for (int64_t b = 0; b < n.value.shape[0]; ++b)
          for (int64_t c = 0; c < C; ++c) {
            const T* src = g.data.data() + (b * C + c) * plane;
            T s = T(0);
            for (int64_t k = 0; k < plane; ++k) s += src[k];
            gx.data[size_t(c)] += s;
          }
        break;
      }
      case Op::kSliceC: {
        TensorT<T>& gx = grad_buf(n.in[0]);
        for (int64_t k = n.s0; k < n.s1; ++k) gx.data[size_t(k)] += g.data[size_t(k - n.s0)];
        break;
      }
    }
  }

  void accumulate(Id target, const TensorT<T>& g, T factor) {
    TensorT<T>& dst = grad_buf(target);
    for (size_t k = 0; k < g.data.size(); ++k) dst.data[k] += factor * g.data[k];
  }
};

using TapeF = Tape<float>;
using TapeD = Tape<double>;

}  // namespace miseg
