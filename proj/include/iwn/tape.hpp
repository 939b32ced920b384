#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "iwn/dct.hpp"
#include "iwn/tensor.hpp"

namespace iwn {

// Trainable parameter: a named flat value/gradient pair with logical dims
// (4-D {k,k,cin,cout} for conv kernels, 1-D {cout} for biases).
template <typename T>
struct Param {
  std::string name;
  std::vector<int> dims;
  std::vector<T> value;
  std::vector<T> grad;

  Param() = default;
  Param(std::string n, std::vector<int> d) : name(std::move(n)), dims(std::move(d)) {
    std::size_t n_elems = 1;
    for (int e : dims) n_elems *= static_cast<std::size_t>(e);
    value.assign(n_elems, T(0));
    grad.assign(n_elems, T(0));
  }

  std::size_t numel() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
using MatMap = Eigen::Map<
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<
    const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Reverse-mode tape over H x W x C tensors. The op set is fixed to what the
// coupling stack, losses and noise layer need; nodes replay strictly in
// reverse recording order. A tape owns its per-parameter gradient
// accumulators so concurrent tapes over shared parameters never race;
// callers merge accumulators in a deterministic order.
template <typename T>
class Tape {
 public:
  using NodeId = int;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  const Tensor<T>& value(NodeId id) const { return nodes_[check(id)]->value; }
  const Tensor<T>& grad(NodeId id) const { return nodes_[check(id)]->grad; }

  // Gradient accumulated for a parameter; exactly zero if unused on this tape.
  std::vector<T> param_grad(const Param<T>& p) const {
    auto it = param_grads_.find(&p);
    if (it == param_grads_.end()) return std::vector<T>(p.numel(), T(0));
    return it->second;
  }

  // Adds this tape's accumulators into the params' own grad buffers,
  // scaled (e.g. 1/batch). Call once per tape, in a fixed tape order.
  void accumulate_param_grads(T scale = T(1)) {
    for (auto* p : param_order_) {
      const auto& g = param_grads_.at(p);
      auto* pp = const_cast<Param<T>*>(p);
      for (std::size_t i = 0; i < g.size(); ++i) pp->grad[i] += scale * g[i];
    }
  }

  // ---- graph inputs ----

  NodeId constant(Tensor<T> v) { return push(std::move(v), nullptr); }

  // Parameter viewed as a flat 1 x 1 x numel node.
  NodeId leaf(Param<T>& p) {
    Tensor<T> v(1, 1, static_cast<int>(p.numel()));
    v.data = p.value;
    NodeId out = push(std::move(v), nullptr);
    if (record_) {
      std::vector<T>* acc = grad_slot(p);
      Node* on = nodes_[out].get();
      nodes_[out]->back = [on, acc] {
        for (std::size_t i = 0; i < acc->size(); ++i)
          (*acc)[i] += on->grad.data[i];
      };
    }
    return out;
  }

  // ---- convolution ----

  // 'same' zero-padded 2-D convolution, odd kernel, kernel dims
  // {k,k,cin,cout}, bias dims {cout}.
  NodeId conv2d(NodeId x, Param<T>& kernel, Param<T>& bias) {
    const Tensor<T>& in = value(x);
    if (kernel.dims.size() != 4 || kernel.dims[0] != kernel.dims[1])
      throw std::invalid_argument("conv2d: kernel dims must be {k,k,cin,cout}");
    const int k = kernel.dims[0], cin = kernel.dims[2], cout = kernel.dims[3];
    if (k % 2 == 0) throw std::invalid_argument("conv2d: kernel size must be odd");
    if (in.shape.c != cin)
      throw std::invalid_argument("conv2d: input channels " +
                                  std::to_string(in.shape.c) +
                                  " != kernel cin " + std::to_string(cin));
    if (bias.dims.size() != 1 || bias.dims[0] != cout)
      throw std::invalid_argument("conv2d: bias length != cout");

    const int h = in.shape.h, w = in.shape.w;
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    const std::int64_t kk = static_cast<std::int64_t>(k) * k * cin;

    std::vector<T> col(static_cast<std::size_t>(hw * kk));
    im2col(in, k, col.data());

    Tensor<T> out(h, w, cout);
    {
      ConstMatMap<T> a(col.data(), hw, kk);
      ConstMatMap<T> km(kernel.value.data(), kk, cout);
      MatMap<T> o(out.data.data(), hw, cout);
      o.noalias() = a * km;
      for (std::int64_t p = 0; p < hw; ++p)
        for (int co = 0; co < cout; ++co) out.data[p * cout + co] += bias.value[co];
    }

    NodeId id = push(std::move(out), nullptr);
    if (record_) {
      std::vector<T>* gk = grad_slot(kernel);
      std::vector<T>* gb = grad_slot(bias);
      Node* on = nodes_[id].get();
      Node* xn = nodes_[x].get();
      const T* kval = kernel.value.data();
      nodes_[id]->back = [on, xn, gk, gb, kval, k, cin, cout, h, w] {
        const std::int64_t hw = static_cast<std::int64_t>(h) * w;
        const std::int64_t kk = static_cast<std::int64_t>(k) * k * cin;
        ConstMatMap<T> gout(on->grad.data.data(), hw, cout);
        // bias: column sums
        for (int co = 0; co < cout; ++co) {
          T acc = 0;
          for (std::int64_t p = 0; p < hw; ++p) acc += on->grad.data[p * cout + co];
          (*gb)[co] += acc;
        }
        // kernel: col^T * gout
        std::vector<T> col(static_cast<std::size_t>(hw * kk));
        im2col(xn->value, k, col.data());
        {
          ConstMatMap<T> a(col.data(), hw, kk);
          MatMap<T> gkm(gk->data(), kk, cout);
          gkm.noalias() += a.transpose() * gout;
        }
        // input: col2im(gout * kernel^T)
        std::vector<T> gcol(static_cast<std::size_t>(hw * kk));
        {
          ConstMatMap<T> km(kval, kk, cout);
          MatMap<T> gc(gcol.data(), hw, kk);
          gc.noalias() = gout * km.transpose();
        }
        col2im_add(gcol.data(), k, xn->grad);
      };
    }
    return id;
  }

  // ---- elementwise ----

  NodeId add(NodeId a, NodeId b) {
    return binary(a, b, "add", [](T x, T y) { return x + y; },
                  [](T, T, T g, T& ga, T& gb) { ga += g; gb += g; });
  }
  NodeId sub(NodeId a, NodeId b) {
    return binary(a, b, "sub", [](T x, T y) { return x - y; },
                  [](T, T, T g, T& ga, T& gb) { ga += g; gb -= g; });
  }
  NodeId mul(NodeId a, NodeId b) {
    return binary(a, b, "mul", [](T x, T y) { return x * y; },
                  [](T x, T y, T g, T& ga, T& gb) { ga += g * y; gb += g * x; });
  }
  NodeId exp_(NodeId a) {
    return unary(a, [](T x) { return std::exp(x); },
                 [](T x, T y, T g) { (void)x; return g * y; });
  }
  NodeId tanh_(NodeId a) {
    return unary(a, [](T x) { return std::tanh(x); },
                 [](T, T y, T g) { return g * (T(1) - y * y); });
  }
  // a*x + b
  NodeId affine(NodeId x, T a, T b) {
    return unary(x, [a, b](T v) { return a * v + b; },
                 [a](T, T, T g) { return a * g; });
  }
  NodeId leaky_relu(NodeId x, T slope) {
    return unary(x, [slope](T v) { return v >= T(0) ? v : slope * v; },
                 [slope](T v, T, T g) { return v >= T(0) ? g : slope * g; });
  }
  // forward: round(clamp(x*255,0,255))/255 (half away from zero);
  // backward: straight-through, gradient 1 where 0 <= x <= 1.
  NodeId quantize_ste(NodeId x) {
    return unary(x,
                 [](T v) {
                   T s = v * T(255);
                   s = std::min(std::max(s, T(0)), T(255));
                   return std::round(s) / T(255);
                 },
                 [](T v, T, T g) { return (v >= T(0) && v <= T(1)) ? g : T(0); });
  }
  // round(x) + (x - round(x))^3, derivative 3(x-round(x))^2.
  NodeId approx_round(NodeId x) {
    return unary(x,
                 [](T v) {
                   const T r = std::round(v);
                   const T f = v - r;
                   return r + f * f * f;
                 },
                 [](T v, T, T g) {
                   const T f = v - std::round(v);
                   return g * T(3) * f * f;
                 });
  }
  // Exact rounding; used when the JPEG simulator runs in reference mode.
  // True derivative is zero almost everywhere.
  NodeId round_exact(NodeId x) {
    return unary(x, [](T v) { return std::round(v); },
                 [](T, T, T) { return T(0); });
  }
  NodeId clamp01(NodeId x) {
    return unary(x, [](T v) { return std::min(std::max(v, T(0)), T(1)); },
                 [](T v, T, T g) { return (v >= T(0) && v <= T(1)) ? g : T(0); });
  }

  // ---- pixel-space structure ops ----

  // out[p] = M * in[p] + off, fixed 3x3 matrix (row-major) on 3-channel input.
  NodeId color_matrix(NodeId x, const std::array<T, 9>& m,
                      const std::array<T, 3>& off) {
    const Tensor<T>& in = value(x);
    require(in.shape.c == 3, "color_matrix: needs 3 channels");
    Tensor<T> out(in.shape.h, in.shape.w, 3);
    const std::int64_t hw = static_cast<std::int64_t>(in.shape.h) * in.shape.w;
    for (std::int64_t p = 0; p < hw; ++p) {
      const T* v = &in.data[p * 3];
      T* o = &out.data[p * 3];
      for (int r = 0; r < 3; ++r)
        o[r] = m[r * 3] * v[0] + m[r * 3 + 1] * v[1] + m[r * 3 + 2] * v[2] + off[r];
    }
    NodeId id = push(std::move(out), nullptr);
    if (record_) {
      Node* on = nodes_[id].get();
      Node* xn = nodes_[x].get();
      nodes_[id]->back = [on, xn, m, hw] {
        for (std::int64_t p = 0; p < hw; ++p) {
          const T* g = &on->grad.data[p * 3];
          T* gi = &xn->grad.data[p * 3];
          for (int cidx = 0; cidx < 3; ++cidx)
            gi[cidx] += m[cidx] * g[0] + m[3 + cidx] * g[1] + m[6 + cidx] * g[2];
        }
      };
    }
    return id;
  }

  // Pad bottom/right by edge replication so both spatial dims become
  // multiples of 8.
  NodeId pad_edge_mult8(NodeId x) {
    const Tensor<T>& in = value(x);
    const int h = in.shape.h, w = in.shape.w, c = in.shape.c;
    const int h2 = (h + 7) / 8 * 8, w2 = (w + 7) / 8 * 8;
    Tensor<T> out(h2, w2, c);
    for (int y = 0; y < h2; ++y) {
      const int sy = std::min(y, h - 1);
      for (int xx = 0; xx < w2; ++xx) {
        const int sx = std::min(xx, w - 1);
        for (int ch = 0; ch < c; ++ch) out.at(y, xx, ch) = in.at(sy, sx, ch);
      }
    }
    NodeId id = push(std::move(out), nullptr);
    if (record_) {
      Node* on = nodes_[id].get();
      Node* xn = nodes_[x].get();
      nodes_[id]->back = [on, xn, h, w, h2, w2, c] {
        for (int y = 0; y < h2; ++y) {
          const int sy = std::min(y, h - 1);
          for (int xx = 0; xx < w2; ++xx) {
            const int sx = std::min(xx, w - 1);
            for (int ch = 0; ch < c; ++ch)
              xn->grad.at(sy, sx, ch) += on->grad.at(y, xx, ch);
          }
        }
      };
    }
    return id;
  }

  NodeId crop_rect(NodeId x, const Rect& r) {
    const Tensor<T>& in = value(x);
    require(r.top >= 0 && r.left >= 0 && r.h >= 1 && r.w >= 1 &&
                r.top + r.h <= in.shape.h && r.left + r.w <= in.shape.w,
            "crop_rect: rectangle out of bounds");
    Tensor<T> out(r.h, r.w, in.shape.c);
    for (int y = 0; y < r.h; ++y)
      for (int xx = 0; xx < r.w; ++xx)
        for (int ch = 0; ch < in.shape.c; ++ch)
          out.at(y, xx, ch) = in.at(r.top + y, r.left + xx, ch);
    NodeId id = push(std::move(out), nullptr);
    if (record_) {
      Node* on = nodes_[id].get();
      Node* xn = nodes_[x].get();
      const int c = in.shape.c;
      nodes_[id]->back = [on, xn, r, c] {
        for (int y = 0; y < r.h; ++y)
          for (int xx = 0; xx < r.w; ++xx)
            for (int ch = 0; ch < c; ++ch)
              xn->grad.at(r.top + y, r.left + xx, ch) += on->grad.at(y, xx, ch);
      };
    }
    return id;
  }

  // Per-channel 8x8 block DCT (spatial dims must be multiples of 8).
  // The transform is orthonormal, so the adjoint is the opposite transform.
  NodeId block_dct8(NodeId x, bool inverse) {
    const Tensor<T>& in = value(x);
    require(in.shape.h % 8 == 0 && in.shape.w % 8 == 0,
            "block_dct8: dims must be multiples of 8");
    Tensor<T> out(in.shape.h, in.shape.w, in.shape.c);
    apply_block_dct(in, out, inverse);
    NodeId id = push(std::move(out), nullptr);
    if (record_) {
      Node* on = nodes_[id].get();
      Node* xn = nodes_[x].get();
      nodes_[id]->back = [on, xn, inverse] {
        Tensor<T> g(on->grad.shape.h, on->grad.shape.w, on->grad.shape.c);
        apply_block_dct(on->grad, g, !inverse);
        for (std::size_t i = 0; i < g.data.size(); ++i)
          xn->grad.data[i] += g.data[i];
      };
    }
    return id;
  }

  // Multiply or divide every element by its channel's 8x8 table entry,
  // tiled over the blocks.
  NodeId coeff_scale(NodeId x, std::shared_ptr<const std::vector<std::array<T, 64>>> tables,
                     bool divide) {
    const Tensor<T>& in = value(x);
    require(static_cast<int>(tables->size()) == in.shape.c,
            "coeff_scale: one table per channel required");
    Tensor<T> out(in.shape.h, in.shape.w, in.shape.c);
    for (int y = 0; y < in.shape.h; ++y)
      for (int xx = 0; xx < in.shape.w; ++xx)
        for (int ch = 0; ch < in.shape.c; ++ch) {
          const T t = (*tables)[ch][(y % 8) * 8 + (xx % 8)];
          out.at(y, xx, ch) = divide ? in.at(y, xx, ch) / t : in.at(y, xx, ch) * t;
        }
    NodeId id = push(std::move(out), nullptr);
    if (record_) {
      Node* on = nodes_[id].get();
      Node* xn = nodes_[x].get();
      const Shape s = in.shape;
      nodes_[id]->back = [on, xn, tables, divide, s] {
        for (int y = 0; y < s.h; ++y)
          for (int xx = 0; xx < s.w; ++xx)
            for (int ch = 0; ch < s.c; ++ch) {
              const T t = (*tables)[ch][(y % 8) * 8 + (xx % 8)];
              xn->grad.at(y, xx, ch) +=
                  divide ? on->grad.at(y, xx, ch) / t : on->grad.at(y, xx, ch) * t;
            }
      };
    }
    return id;
  }

  // 1-D convolution along an axis with a fixed symmetric kernel and
  // reflect padding, written in the DC-exact form
  //   out[p] = x[p] + sum_d k[d] * (x[p+d] - x[p])
  // so constant inputs are reproduced bit-exactly.
  NodeId blur1d(NodeId x, std::shared_ptr<const std::vector<T>> kernel, int axis) {
    const Tensor<T>& in = value(x);
    require(axis == 0 || axis == 1, "blur1d: axis must be 0 (rows) or 1 (cols)");
    require(kernel->size() % 2 == 1, "blur1d: kernel length must be odd");
    Tensor<T> out(in.shape.h, in.shape.w, in.shape.c);
    blur_pass(in, out, *kernel, axis);
    NodeId id = push(std::move(out), nullptr);
    if (record_) {
      Node* on = nodes_[id].get();
      Node* xn = nodes_[x].get();
      nodes_[id]->back = [on, xn, kernel, axis] {
        blur_pass_adjoint(on->grad, xn->grad, *kernel, axis);
      };
    }
    return id;
  }

  // Per-pixel selection: out = mask ? a : b (mask broadcast over channels).
  NodeId blend(NodeId a, NodeId b, std::shared_ptr<const std::vector<std::uint8_t>> mask) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vb = value(b);
    require_same_shape(va, vb, "blend");
    require(mask->size() == static_cast<std::size_t>(va.shape.h) * va.shape.w,
            "blend: mask must have one entry per pixel");
    Tensor<T> out(va.shape.h, va.shape.w, va.shape.c);
    const int c = va.shape.c;
    const std::int64_t hw = static_cast<std::int64_t>(va.shape.h) * va.shape.w;
    for (std::int64_t p = 0; p < hw; ++p) {
      const bool keep = (*mask)[p] != 0;
      for (int ch = 0; ch < c; ++ch)
        out.data[p * c + ch] = keep ? va.data[p * c + ch] : vb.data[p * c + ch];
    }
    NodeId id = push(std::move(out), nullptr);
    if (record_) {
      Node* on = nodes_[id].get();
      Node* an = nodes_[a].get();
      Node* bn = nodes_[b].get();
      nodes_[id]->back = [on, an, bn, mask, hw, c] {
        for (std::int64_t p = 0; p < hw; ++p) {
          const bool keep = (*mask)[p] != 0;
          for (int ch = 0; ch < c; ++ch) {
            if (keep)
              an->grad.data[p * c + ch] += on->grad.data[p * c + ch];
            else
              bn->grad.data[p * c + ch] += on->grad.data[p * c + ch];
          }
        }
      };
    }
    return id;
  }

  // ---- reductions (scalar-valued nodes are shaped 1x1x1) ----

  NodeId sum(NodeId x) {
    const Tensor<T>& in = value(x);
    T acc = 0;
    for (const T v : in.data) acc += v;
    Tensor<T> out(1, 1, 1);
    out.data[0] = acc;
    NodeId id = push(std::move(out), nullptr);
    if (record_) {
      Node* on = nodes_[id].get();
      Node* xn = nodes_[x].get();
      nodes_[id]->back = [on, xn] {
        const T g = on->grad.data[0];
        for (T& v : xn->grad.data) v += g;
      };
    }
    return id;
  }

  // mean(|x|) over an optional sub-rectangle (all channels).
  NodeId mean_abs(NodeId x, std::optional<Rect> rect = std::nullopt) {
    return reduce(x, rect, [](T v) { return std::abs(v); },
                  [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
  }
  // mean(x^2) over an optional sub-rectangle.
  NodeId mean_sq(NodeId x, std::optional<Rect> rect = std::nullopt) {
    return reduce(x, rect, [](T v) { return v * v; },
                  [](T v) { return T(2) * v; });
  }

  // Weighted sum of scalar nodes.
  NodeId wsum(const std::vector<NodeId>& xs, const std::vector<T>& weights) {
    require(xs.size() == weights.size() && !xs.empty(), "wsum: size mismatch");
    T acc = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      require(value(xs[i]).numel() == 1, "wsum: operands must be scalars");
      acc += weights[i] * value(xs[i]).data[0];
    }
    Tensor<T> out(1, 1, 1);
    out.data[0] = acc;
    NodeId id = push(std::move(out), nullptr);
    if (record_) {
      Node* on = nodes_[id].get();
      std::vector<Node*> ins;
      for (NodeId n : xs) ins.push_back(nodes_[n].get());
      std::vector<T> w = weights;
      nodes_[id]->back = [on, ins, w] {
        for (std::size_t i = 0; i < ins.size(); ++i)
          ins[i]->grad.data[0] += w[i] * on->grad.data[0];
      };
    }
    return id;
  }

  // ---- backward ----

  // Seeds the (scalar) loss gradient with 1 and replays every recorded node
  // in exact reverse recording order.
  void backward(NodeId loss) {
    if (!record_) throw std::logic_error("backward: tape is not recording");
    if (value(loss).numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar");
    for (auto& n : nodes_) {
      n->grad.shape = n->value.shape;
      n->grad.data.assign(n->value.data.size(), T(0));
    }
    nodes_[loss]->grad.data[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
      if ((*it)->back) (*it)->back();
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::function<void()> back;
  };

  int check(NodeId id) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size()))
      throw std::out_of_range("tape: bad node id");
    return id;
  }

  NodeId push(Tensor<T> v, std::function<void()> back) {
    auto n = std::make_unique<Node>();
    n->value = std::move(v);
    n->back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  std::vector<T>* grad_slot(const Param<T>& p) {
    auto it = param_grads_.find(&p);
    if (it == param_grads_.end()) {
      it = param_grads_.emplace(&p, std::vector<T>(p.numel(), T(0))).first;
      param_order_.push_back(&p);
    }
    return &it->second;
  }

  template <typename FwdFn, typename BwdFn>
  NodeId unary(NodeId x, FwdFn fwd, BwdFn bwd) {
    const Tensor<T>& in = value(x);
    Tensor<T> out(in.shape.h, in.shape.w, in.shape.c);
    for (std::size_t i = 0; i < in.data.size(); ++i) out.data[i] = fwd(in.data[i]);
    NodeId id = push(std::move(out), nullptr);
    if (record_) {
      Node* on = nodes_[id].get();
      Node* xn = nodes_[x].get();
      nodes_[id]->back = [on, xn, bwd] {
        for (std::size_t i = 0; i < on->grad.data.size(); ++i)
          xn->grad.data[i] +=
              bwd(xn->value.data[i], on->value.data[i], on->grad.data[i]);
      };
    }
    return id;
  }

  template <typename FwdFn, typename BwdFn>
  NodeId binary(NodeId a, NodeId b, const char* name, FwdFn fwd, BwdFn bwd) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vb = value(b);
    require_same_shape(va, vb, name);
    Tensor<T> out(va.shape.h, va.shape.w, va.shape.c);
    for (std::size_t i = 0; i < va.data.size(); ++i)
      out.data[i] = fwd(va.data[i], vb.data[i]);
    NodeId id = push(std::move(out), nullptr);
    if (record_) {
      Node* on = nodes_[id].get();
      Node* an = nodes_[a].get();
      Node* bn = nodes_[b].get();
      nodes_[id]->back = [on, an, bn, bwd] {
        for (std::size_t i = 0; i < on->grad.data.size(); ++i)
          bwd(an->value.data[i], bn->value.data[i], on->grad.data[i],
              an->grad.data[i], bn->grad.data[i]);
      };
    }
    return id;
  }

  template <typename MapFn, typename DerivFn>
  NodeId reduce(NodeId x, std::optional<Rect> rect, MapFn mapf, DerivFn derivf) {
    const Tensor<T>& in = value(x);
    Rect r = rect.value_or(Rect{0, 0, in.shape.h, in.shape.w});
    require(r.area() > 0, "reduce: empty region");
    require(r.top >= 0 && r.left >= 0 && r.top + r.h <= in.shape.h &&
                r.left + r.w <= in.shape.w,
            "reduce: region out of bounds");
    const T n = static_cast<T>(r.area() * in.shape.c);
    T acc = 0;
    for (int y = r.top; y < r.top + r.h; ++y)
      for (int xx = r.left; xx < r.left + r.w; ++xx)
        for (int ch = 0; ch < in.shape.c; ++ch) acc += mapf(in.at(y, xx, ch));
    Tensor<T> out(1, 1, 1);
    out.data[0] = acc / n;
    NodeId id = push(std::move(out), nullptr);
    if (record_) {
      Node* on = nodes_[id].get();
      Node* xn = nodes_[x].get();
      const int c = in.shape.c;
      nodes_[id]->back = [on, xn, r, c, n, derivf] {
        const T g = on->grad.data[0] / n;
        for (int y = r.top; y < r.top + r.h; ++y)
          for (int xx = r.left; xx < r.left + r.w; ++xx)
            for (int ch = 0; ch < c; ++ch)
              xn->grad.at(y, xx, ch) += g * derivf(xn->value.at(y, xx, ch));
      };
    }
    return id;
  }

  // col index = ((ky*k + kx)*cin + ci), row index = pixel (y*w + x).
  static void im2col(const Tensor<T>& in, int k, T* col) {
    const int h = in.shape.h, w = in.shape.w, cin = in.shape.c, r = k / 2;
    const std::int64_t kk = static_cast<std::int64_t>(k) * k * cin;
    std::int64_t row = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x, ++row) {
        T* dst = col + row * kk;
        for (int ky = 0; ky < k; ++ky) {
          const int sy = y + ky - r;
          for (int kx = 0; kx < k; ++kx) {
            const int sx = x + kx - r;
            if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
              for (int ci = 0; ci < cin; ++ci) *dst++ = T(0);
            } else {
              const T* src = &in.data[(static_cast<std::size_t>(sy) * w + sx) * cin];
              for (int ci = 0; ci < cin; ++ci) *dst++ = src[ci];
            }
          }
        }
      }
  }

  static void col2im_add(const T* gcol, int k, Tensor<T>& gin) {
    const int h = gin.shape.h, w = gin.shape.w, cin = gin.shape.c, r = k / 2;
    const std::int64_t kk = static_cast<std::int64_t>(k) * k * cin;
    std::int64_t row = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x, ++row) {
        const T* src = gcol + row * kk;
        for (int ky = 0; ky < k; ++ky) {
          const int sy = y + ky - r;
          for (int kx = 0; kx < k; ++kx) {
            const int sx = x + kx - r;
            if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
              src += cin;
            } else {
              T* dst = &gin.data[(static_cast<std::size_t>(sy) * w + sx) * cin];
              for (int ci = 0; ci < cin; ++ci) dst[ci] += *src++;
            }
          }
        }
      }
  }

  static int reflect_index(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
      if (i < 0) i = -i;
      if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
  }

  static void blur_pass(const Tensor<T>& in, Tensor<T>& out,
                        const std::vector<T>& kernel, int axis) {
    const int h = in.shape.h, w = in.shape.w, c = in.shape.c;
    const int rad = static_cast<int>(kernel.size()) / 2;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < c; ++ch) {
          const T center = in.at(y, x, ch);
          T acc = center;
          for (int d = -rad; d <= rad; ++d) {
            const int sy = axis == 0 ? reflect_index(y + d, h) : y;
            const int sx = axis == 1 ? reflect_index(x + d, w) : x;
            acc += kernel[d + rad] * (in.at(sy, sx, ch) - center);
          }
          out.at(y, x, ch) = acc;
        }
  }

  static void blur_pass_adjoint(const Tensor<T>& gout, Tensor<T>& gin,
                                const std::vector<T>& kernel, int axis) {
    const int h = gout.shape.h, w = gout.shape.w, c = gout.shape.c;
    const int rad = static_cast<int>(kernel.size()) / 2;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < c; ++ch) {
          const T g = gout.at(y, x, ch);
          gin.at(y, x, ch) += g;
          for (int d = -rad; d <= rad; ++d) {
            const int sy = axis == 0 ? reflect_index(y + d, h) : y;
            const int sx = axis == 1 ? reflect_index(x + d, w) : x;
            gin.at(sy, sx, ch) += kernel[d + rad] * g;
            gin.at(y, x, ch) -= kernel[d + rad] * g;
          }
        }
  }

  static void apply_block_dct(const Tensor<T>& in, Tensor<T>& out, bool inverse) {
    std::array<T, 64> block{};
    for (int ch = 0; ch < in.shape.c; ++ch)
      for (int by = 0; by < in.shape.h; by += 8)
        for (int bx = 0; bx < in.shape.w; bx += 8) {
          for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 8; ++j)
              block[i * 8 + j] = in.at(by + i, bx + j, ch);
          const auto res = inverse ? dct8_inverse(block) : dct8_forward(block);
          for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 8; ++j)
              out.at(by + i, bx + j, ch) = res[i * 8 + j];
        }
  }

  bool record_;
  std::vector<std::unique_ptr<Node>> nodes_;
  std::unordered_map<const Param<T>*, std::vector<T>> param_grads_;
  std::vector<const Param<T>*> param_order_;
};

// Value-only 'same' zero-padded convolution against raw kernel/bias arrays
// (kernel laid out {k,k,cin,cout}).
template <typename T>
Tensor<T> conv2d_value(const Tensor<T>& in, const std::vector<T>& kernel, int k,
                       int cin, int cout, const std::vector<T>& bias) {
  Param<T> kp("k", {k, k, cin, cout});
  Param<T> bp("b", {cout});
  require(kernel.size() == kp.numel(), "conv2d: kernel element count mismatch");
  require(bias.size() == bp.numel(), "conv2d: bias element count mismatch");
  kp.value = kernel;
  bp.value = bias;
  Tape<T> tape(false);
  auto x = tape.constant(in);
  return tape.value(tape.conv2d(x, kp, bp));
}

}  // namespace iwn
