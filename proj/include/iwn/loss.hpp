#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include "iwn/distort.hpp"
#include "iwn/tape.hpp"
#include "iwn/tensor.hpp"

namespace iwn {

enum class TrainStage { Robustness, Imperceptibility };

inline const char* stage_name(TrainStage s) {
  return s == TrainStage::Robustness ? "robustness" : "imperceptibility";
}

// Loss weights; w_w is stage-dependent (see omega_w_schedule), the rest
// default to the fixed values used throughout.
template <typename T>
struct LossWeights {
  T w_w = T(32);
  T w_m = T(1);
  T w_z = T(1);
  T w_c = T(0.1);
};

struct LossReport {
  double l_w = 0, l_m = 0, l_z = 0, l_c = 0, l_total = 0;
  std::int64_t step = 0;
  NoiseKind noise = NoiseKind::Identity;
  double omega_w = 0;
  TrainStage stage = TrainStage::Robustness;
};

// Identity-only training pins the image weight at 32; otherwise it is 0.1
// while robustness is being trained and 48 once the imperceptibility stage
// begins.
inline double omega_w_schedule(TrainStage stage, bool identity_only) {
  if (identity_only) return 32.0;
  return stage == TrainStage::Robustness ? 0.1 : 48.0;
}

// mean(|a-b|) + mean((a-b)^2), the l1+l2 combination used by every loss term.
template <typename T>
typename Tape<T>::NodeId norm_l1l2(Tape<T>& tape, typename Tape<T>::NodeId a,
                                   typename Tape<T>::NodeId b,
                                   std::optional<Rect> rect = std::nullopt) {
  auto diff = tape.sub(a, b);
  return tape.wsum({tape.mean_abs(diff, rect), tape.mean_sq(diff, rect)},
                   {T(1), T(1)});
}

// Value-only variant (used for reports and independent checks).
template <typename T>
double norm_l1l2_value(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "norm_l1l2");
  double l1 = 0, l2 = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    l1 += std::abs(d);
    l2 += d * d;
  }
  const double n = static_cast<double>(a.data.size());
  return l1 / n + l2 / n;
}

// Region recorded by a Crop/Cropout attack, in the coordinates of the
// original (uncropped) frame.
struct RegionMask {
  Rect rect;
  int orig_h = 0;
  int orig_w = 0;

  double ratio() const {
    return static_cast<double>(orig_h) * orig_w / static_cast<double>(rect.area());
  }
};

// Message loss: plain norm without a region; with a region the norm is
// restricted to the region's pixels and multiplied by original/cropped area.
// For Crop the operands are already region-sized; for Cropout they are
// full-sized and the reduction itself is restricted.
template <typename T>
typename Tape<T>::NodeId message_loss(Tape<T>& tape, typename Tape<T>::NodeId m_out,
                                      typename Tape<T>::NodeId m_in,
                                      const std::optional<RegionMask>& region) {
  if (!region) return norm_l1l2<T>(tape, m_out, m_in);
  const Shape s = tape.value(m_out).shape;
  require(region->rect.area() > 0, "message_loss: empty region");
  const T ratio = static_cast<T>(region->ratio());
  std::optional<Rect> rect;
  if (s.h == region->rect.h && s.w == region->rect.w) {
    rect = std::nullopt;  // operands already cropped to the region
  } else {
    require(s.h == region->orig_h && s.w == region->orig_w,
            "message_loss: operand shape matches neither region nor original");
    rect = region->rect;
  }
  auto diff = tape.sub(m_out, m_in);
  return tape.wsum({tape.mean_abs(diff, rect), tape.mean_sq(diff, rect)},
                   {ratio, ratio});
}

template <typename T>
struct PipelineNodes {
  typename Tape<T>::NodeId watermarked;  // I_w
  typename Tape<T>::NodeId z_hat;
  typename Tape<T>::NodeId m_out;
  typename Tape<T>::NodeId cover_rec;  // I_c hat
};

template <typename T>
struct PipelineTargets {
  typename Tape<T>::NodeId cover;          // for L_w (always full frame)
  typename Tape<T>::NodeId z_const;        // constant 0.5, spatial size of z_hat
  typename Tape<T>::NodeId m_in;           // reference message tensor
  typename Tape<T>::NodeId cover_for_rec;  // cover (cropped for Crop attacks)
};

template <typename T>
struct LossNodes {
  typename Tape<T>::NodeId l_w, l_m, l_z, l_c, total;
};

// L_total = w_w*|I_w - I_c| + w_m*|M_out - M_in| + w_z*|Z_hat - Z| +
// w_c*|I_c_hat - I_c| with the l1+l2 norm and crop-region masking on the
// message term.
template <typename T>
LossNodes<T> total_loss(Tape<T>& tape, const PipelineNodes<T>& outputs,
                        const PipelineTargets<T>& targets,
                        const LossWeights<T>& weights,
                        const std::optional<RegionMask>& region) {
  LossNodes<T> nodes;
  nodes.l_w = norm_l1l2<T>(tape, outputs.watermarked, targets.cover);
  nodes.l_m = message_loss<T>(tape, outputs.m_out, targets.m_in, region);
  nodes.l_z = norm_l1l2<T>(tape, outputs.z_hat, targets.z_const);
  nodes.l_c = norm_l1l2<T>(tape, outputs.cover_rec, targets.cover_for_rec);
  nodes.total = tape.wsum({nodes.l_w, nodes.l_m, nodes.l_z, nodes.l_c},
                          {weights.w_w, weights.w_m, weights.w_z, weights.w_c});
  return nodes;
}

template <typename T>
LossReport make_report(const Tape<T>& tape, const LossNodes<T>& nodes,
                       std::int64_t step, NoiseKind noise, double omega_w,
                       TrainStage stage) {
  LossReport r;
  r.l_w = tape.value(nodes.l_w).data[0];
  r.l_m = tape.value(nodes.l_m).data[0];
  r.l_z = tape.value(nodes.l_z).data[0];
  r.l_c = tape.value(nodes.l_c).data[0];
  r.l_total = tape.value(nodes.total).data[0];
  r.step = step;
  r.noise = noise;
  r.omega_w = omega_w;
  r.stage = stage;
  return r;
}

}  // namespace iwn
