#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "iwn/rng.hpp"
#include "iwn/tape.hpp"
#include "iwn/tensor.hpp"

namespace iwn {

// Indices of one 3-layer conv sub-network's parameters inside the stack's
// flat parameter list (weight/bias per layer).
struct SubnetIdx {
  int w0, b0, w1, b1, w2, b2;
};

struct BlockIdx {
  SubnetIdx phi, rho, eta;  // phi: c->3, rho/eta: 3->c
};

// Stack of invertible coupling blocks over a message branch b1 (c channels)
// and an image branch b2 (3 channels). Per block:
//   forward: b2' = b2 + phi(b1);  b1' = b1 * exp(s) + eta(b2'),
//   inverse: b1 = (b1' - eta(b2')) * exp(-s);  b2 = b2' - phi(b1),
// with s = lambda * tanh(rho(b2') / lambda) keeping the exponent bounded.
// Embedding runs the blocks forward, extraction runs them in reverse with
// the identical parameter set.
template <typename T>
class CouplingStack {
 public:
  CouplingStack(int blocks, int msg_channels, int hidden = 32,
                T clamp_lambda = T(2))
      : blocks_(blocks),
        msg_channels_(msg_channels),
        hidden_(hidden),
        lambda_(clamp_lambda) {
    require(blocks >= 1 && blocks <= 64, "coupling: block count must be in 1..64");
    require(msg_channels >= 1, "coupling: message channels must be >= 1");
    require(hidden >= 1, "coupling: hidden width must be >= 1");
    require(clamp_lambda > T(0), "coupling: clamp must be positive");
    params_.reserve(static_cast<std::size_t>(blocks) * 18);
    for (int b = 0; b < blocks; ++b) {
      BlockIdx idx;
      idx.phi = make_subnet(b, "phi", msg_channels_, 3);
      idx.rho = make_subnet(b, "rho", 3, msg_channels_);
      idx.eta = make_subnet(b, "eta", 3, msg_channels_);
      blocks_idx_.push_back(idx);
    }
  }

  CouplingStack(const CouplingStack&) = default;
  CouplingStack& operator=(const CouplingStack&) = default;

  int blocks() const { return blocks_; }
  int msg_channels() const { return msg_channels_; }
  int hidden() const { return hidden_; }
  T clamp_lambda() const { return lambda_; }

  std::vector<Param<T>>& params() { return params_; }
  const std::vector<Param<T>>& params() const { return params_; }

  void zero_grads() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }

  // Training init: He-scaled hidden layers, zero final layers so every
  // block starts as the exact identity map.
  void init_train(std::uint64_t seed) { init(seed, T(0)); }

  // Fully random init for bijectivity / chance-level experiments; the
  // final layers get small uniform weights so exponents stay tame.
  void init_random(std::uint64_t seed, T final_scale = T(0.02)) {
    init(seed, final_scale);
  }

  // ---- taped pipeline ----

  struct TapedPair {
    typename Tape<T>::NodeId msg;    // b1 branch
    typename Tape<T>::NodeId image;  // b2 branch
  };

  // [m_in, cover] -> [z_hat, watermarked]; no clamping or quantization here.
  TapedPair embed(Tape<T>& tape, typename Tape<T>::NodeId m_in,
                  typename Tape<T>::NodeId cover) {
    check_pair(tape.value(m_in), tape.value(cover), "embed");
    auto b1 = m_in;
    auto b2 = cover;
    for (int b = 0; b < blocks_; ++b) {
      b2 = tape.add(b2, subnet(tape, blocks_idx_[b].phi, b1));
      auto s = clamped_exponent(tape, subnet(tape, blocks_idx_[b].rho, b2));
      b1 = tape.add(tape.mul(b1, tape.exp_(s)),
                    subnet(tape, blocks_idx_[b].eta, b2));
    }
    return {b1, b2};
  }

  // [z, noised] -> [m_out, cover_rec]; blocks applied in reverse order via
  // the algebraic block inverse.
  TapedPair extract(Tape<T>& tape, typename Tape<T>::NodeId z,
                    typename Tape<T>::NodeId noised) {
    check_pair(tape.value(z), tape.value(noised), "extract");
    const Shape s = tape.value(noised).shape;
    if (s.h < 8 || s.w < 8)
      throw std::invalid_argument("extract: spatial extent below 8x8");
    auto b1 = z;
    auto b2 = noised;
    for (int b = blocks_ - 1; b >= 0; --b) {
      auto sc = clamped_exponent(tape, subnet(tape, blocks_idx_[b].rho, b2));
      b1 = tape.mul(tape.sub(b1, subnet(tape, blocks_idx_[b].eta, b2)),
                    tape.exp_(tape.affine(sc, T(-1), T(0))));
      b2 = tape.sub(b2, subnet(tape, blocks_idx_[b].phi, b1));
    }
    return {b1, b2};
  }

  // ---- value-only convenience ----

  std::pair<Tensor<T>, Tensor<T>> embed(const Tensor<T>& m_in,
                                        const Tensor<T>& cover) {
    Tape<T> tape(false);
    auto r = embed(tape, tape.constant(m_in), tape.constant(cover));
    return {tape.value(r.msg), tape.value(r.image)};
  }

  std::pair<Tensor<T>, Tensor<T>> extract(const Tensor<T>& z,
                                          const Tensor<T>& noised) {
    Tape<T> tape(false);
    auto r = extract(tape, tape.constant(z), tape.constant(noised));
    return {tape.value(r.msg), tape.value(r.image)};
  }

  // Single-block entry points (shared parameters with the stack).
  std::pair<Tensor<T>, Tensor<T>> block_forward(const Tensor<T>& b1,
                                                const Tensor<T>& b2, int block) {
    require(block >= 0 && block < blocks_, "block_forward: block out of range");
    check_pair(b1, b2, "block_forward");
    Tape<T> tape(false);
    auto n1 = tape.constant(b1);
    auto n2 = tape.constant(b2);
    n2 = tape.add(n2, subnet(tape, blocks_idx_[block].phi, n1));
    auto s = clamped_exponent(tape, subnet(tape, blocks_idx_[block].rho, n2));
    n1 = tape.add(tape.mul(n1, tape.exp_(s)),
                  subnet(tape, blocks_idx_[block].eta, n2));
    return {tape.value(n1), tape.value(n2)};
  }

  std::pair<Tensor<T>, Tensor<T>> block_inverse(const Tensor<T>& b1p,
                                                const Tensor<T>& b2p, int block) {
    require(block >= 0 && block < blocks_, "block_inverse: block out of range");
    check_pair(b1p, b2p, "block_inverse");
    Tape<T> tape(false);
    auto n1 = tape.constant(b1p);
    auto n2 = tape.constant(b2p);
    auto s = clamped_exponent(tape, subnet(tape, blocks_idx_[block].rho, n2));
    n1 = tape.mul(tape.sub(n1, subnet(tape, blocks_idx_[block].eta, n2)),
                  tape.exp_(tape.affine(s, T(-1), T(0))));
    n2 = tape.sub(n2, subnet(tape, blocks_idx_[block].phi, n1));
    return {tape.value(n1), tape.value(n2)};
  }

  template <typename U>
  CouplingStack<U> cast() const {
    CouplingStack<U> out(blocks_, msg_channels_, hidden_, static_cast<U>(lambda_));
    auto& dst = out.params();
    for (std::size_t i = 0; i < params_.size(); ++i)
      for (std::size_t j = 0; j < params_[i].value.size(); ++j)
        dst[i].value[j] = static_cast<U>(params_[i].value[j]);
    return out;
  }

 private:
  SubnetIdx make_subnet(int block, const char* name, int cin, int cout) {
    const std::string base = "block" + std::to_string(block) + "." + name;
    SubnetIdx idx;
    idx.w0 = add_param(base + ".conv0.weight", {3, 3, cin, hidden_});
    idx.b0 = add_param(base + ".conv0.bias", {hidden_});
    idx.w1 = add_param(base + ".conv1.weight", {3, 3, hidden_, hidden_});
    idx.b1 = add_param(base + ".conv1.bias", {hidden_});
    idx.w2 = add_param(base + ".conv2.weight", {3, 3, hidden_, cout});
    idx.b2 = add_param(base + ".conv2.bias", {cout});
    return idx;
  }

  int add_param(std::string name, std::vector<int> dims) {
    params_.emplace_back(std::move(name), std::move(dims));
    return static_cast<int>(params_.size()) - 1;
  }

  typename Tape<T>::NodeId subnet(Tape<T>& tape, const SubnetIdx& idx,
                                  typename Tape<T>::NodeId x) {
    auto h0 = tape.leaky_relu(tape.conv2d(x, params_[idx.w0], params_[idx.b0]),
                              T(0.2));
    auto h1 = tape.leaky_relu(tape.conv2d(h0, params_[idx.w1], params_[idx.b1]),
                              T(0.2));
    return tape.conv2d(h1, params_[idx.w2], params_[idx.b2]);
  }

  // s = lambda * tanh(raw / lambda)
  typename Tape<T>::NodeId clamped_exponent(Tape<T>& tape,
                                            typename Tape<T>::NodeId raw) {
    return tape.affine(tape.tanh_(tape.affine(raw, T(1) / lambda_, T(0))),
                       lambda_, T(0));
  }

  void check_pair(const Tensor<T>& b1, const Tensor<T>& b2, const char* where) const {
    if (b1.shape.c != msg_channels_)
      throw std::invalid_argument(std::string(where) + ": message branch has " +
                                  std::to_string(b1.shape.c) + " channels, stack needs " +
                                  std::to_string(msg_channels_));
    if (b2.shape.c != 3)
      throw std::invalid_argument(std::string(where) + ": image branch must have 3 channels");
    if (b1.shape.h != b2.shape.h || b1.shape.w != b2.shape.w)
      throw std::invalid_argument(std::string(where) + ": branch spatial dims differ: " +
                                  b1.shape.str() + " vs " + b2.shape.str());
  }

  void init(std::uint64_t seed, T final_scale) {
    Rng rng(seed);
    for (auto& p : params_) {
      const bool is_final = p.name.find("conv2.") != std::string::npos;
      const bool is_bias = p.name.find(".bias") != std::string::npos;
      if (is_bias) {
        std::fill(p.value.begin(), p.value.end(), T(0));
      } else if (is_final) {
        for (auto& v : p.value)
          v = final_scale == T(0)
                  ? T(0)
                  : static_cast<T>(rng.next_real(-1.0, 1.0)) * final_scale;
      } else {
        // He init over fan-in = k*k*cin
        const double fan_in = static_cast<double>(p.dims[0]) * p.dims[1] * p.dims[2];
        const double stddev = std::sqrt(2.0 / fan_in);
        for (auto& v : p.value) v = static_cast<T>(rng.next_normal() * stddev);
      }
      p.zero_grad();
    }
  }

  int blocks_;
  int msg_channels_;
  int hidden_;
  T lambda_;
  std::vector<Param<T>> params_;
  std::vector<BlockIdx> blocks_idx_;
};

}  // namespace iwn
