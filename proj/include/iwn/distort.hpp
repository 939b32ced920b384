#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "iwn/rng.hpp"
#include "iwn/tape.hpp"
#include "iwn/tensor.hpp"

namespace iwn {

enum class NoiseKind {
  Identity,
  Crop,
  Cropout,
  Dropout,
  Gaussian,
  JpegSim,
  JpegReal,
};

inline const char* noise_kind_name(NoiseKind k) {
  switch (k) {
    case NoiseKind::Identity: return "identity";
    case NoiseKind::Crop: return "crop";
    case NoiseKind::Cropout: return "cropout";
    case NoiseKind::Dropout: return "dropout";
    case NoiseKind::Gaussian: return "gaussian";
    case NoiseKind::JpegSim: return "jpeg_sim";
    case NoiseKind::JpegReal: return "jpeg_real";
  }
  return "?";
}

inline NoiseKind noise_kind_from_name(const std::string& s) {
  if (s == "identity") return NoiseKind::Identity;
  if (s == "crop") return NoiseKind::Crop;
  if (s == "cropout") return NoiseKind::Cropout;
  if (s == "dropout") return NoiseKind::Dropout;
  if (s == "gaussian") return NoiseKind::Gaussian;
  if (s == "jpeg_sim") return NoiseKind::JpegSim;
  if (s == "jpeg" || s == "jpeg_real") return NoiseKind::JpegReal;
  throw std::invalid_argument("unknown noise kind '" + s + "'");
}

// Tagged distortion descriptor; only the fields relevant to `kind` are set.
struct NoiseSpec {
  NoiseKind kind = NoiseKind::Identity;
  std::optional<double> p;      // remaining ratio, Crop/Cropout/Dropout
  std::optional<double> sigma;  // Gaussian kernel width
  std::optional<int> q;         // JPEG quality factor
  std::uint64_t seed = 0;

  static NoiseSpec identity() { return {}; }
  static NoiseSpec crop(double p, std::uint64_t seed) {
    NoiseSpec s;
    s.kind = NoiseKind::Crop;
    s.p = p;
    s.seed = seed;
    return s;
  }
  static NoiseSpec cropout(double p, std::uint64_t seed) {
    NoiseSpec s;
    s.kind = NoiseKind::Cropout;
    s.p = p;
    s.seed = seed;
    return s;
  }
  static NoiseSpec dropout(double p, std::uint64_t seed) {
    NoiseSpec s;
    s.kind = NoiseKind::Dropout;
    s.p = p;
    s.seed = seed;
    return s;
  }
  static NoiseSpec gaussian(double sigma) {
    NoiseSpec s;
    s.kind = NoiseKind::Gaussian;
    s.sigma = sigma;
    return s;
  }
  static NoiseSpec jpeg_sim(int q) {
    NoiseSpec s;
    s.kind = NoiseKind::JpegSim;
    s.q = q;
    return s;
  }
  static NoiseSpec jpeg_real(int q) {
    NoiseSpec s;
    s.kind = NoiseKind::JpegReal;
    s.q = q;
    return s;
  }
};

// Result of applying one attack on a tape: the noised node plus the region
// (Crop/Cropout) or keep-mask (Dropout) the attack produced.
template <typename T>
struct AttackOutcome {
  typename Tape<T>::NodeId noised;
  std::optional<Rect> region;
  std::shared_ptr<const std::vector<std::uint8_t>> mask;
};

// ---- low-level pieces ----

// round(x)+(x-round(x))^3 on plain scalars; matches the tape op.
template <typename T>
T approx_round_value(T x) {
  const T r = std::round(x);
  const T f = x - r;
  return r + f * f * f;
}

namespace jpegtab {

// Annex-K base quantization tables (row-major 8x8).
inline const std::array<int, 64>& luma_base() {
  static const std::array<int, 64> t = {
      16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
      14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
      18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
      49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
  return t;
}

inline const std::array<int, 64>& chroma_base() {
  static const std::array<int, 64> t = {
      17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
      24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
      99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
      99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};
  return t;
}

}  // namespace jpegtab

// Quality-scaled luma/chroma tables using the conventional scaling:
// scale = 5000/q (q<50) else 200-2q; entry' = clamp(floor((e*scale+50)/100), 1, 255).
inline std::pair<std::array<int, 64>, std::array<int, 64>> quality_scale(int q) {
  if (q < 1 || q > 100)
    throw std::invalid_argument("quality_scale: q must be in 1..100");
  const int scale = q < 50 ? 5000 / q : 200 - 2 * q;
  auto scale_table = [scale](const std::array<int, 64>& base) {
    std::array<int, 64> out{};
    for (int i = 0; i < 64; ++i) {
      int v = (base[i] * scale + 50) / 100;
      out[i] = std::min(std::max(v, 1), 255);
    }
    return out;
  };
  return {scale_table(jpegtab::luma_base()), scale_table(jpegtab::chroma_base())};
}

// Rounded-rectangle sizing shared by Crop and Cropout: the remaining ratio p
// splits evenly across both axes.
inline std::pair<int, int> crop_extent(int h, int w, double p) {
  if (!(p > 0.0 && p <= 1.0))
    throw std::invalid_argument("crop: remaining ratio must be in (0,1]");
  const int h2 = static_cast<int>(std::round(std::sqrt(p) * h));
  const int w2 = static_cast<int>(std::round(std::sqrt(p) * w));
  if (h2 < 8 || w2 < 8)
    throw std::invalid_argument("crop: remaining ratio " + std::to_string(p) +
                                " leaves a rectangle below 8x8");
  return {std::min(h2, h), std::min(w2, w)};
}

inline Rect draw_crop_rect(int h, int w, double p, std::uint64_t seed) {
  auto [h2, w2] = crop_extent(h, w, p);
  Rng rng(seed);
  const int top = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(h - h2 + 1)));
  const int left = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(w - w2 + 1)));
  return {top, left, h2, w2};
}

template <typename T>
std::vector<T> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian: sigma must be > 0");
  const int rad = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * rad + 1);
  double total = 0.0;
  for (int d = -rad; d <= rad; ++d) {
    k[d + rad] = std::exp(-(static_cast<double>(d) * d) / (2.0 * sigma * sigma));
    total += k[d + rad];
  }
  std::vector<T> out(k.size());
  for (std::size_t i = 0; i < k.size(); ++i)
    out[i] = static_cast<T>(k[i] / total);
  return out;
}

// ---- taped attacks ----

template <typename T>
typename Tape<T>::NodeId gaussian_blur(Tape<T>& tape, typename Tape<T>::NodeId x,
                                       double sigma) {
  auto kernel = std::make_shared<const std::vector<T>>(gaussian_kernel<T>(sigma));
  return tape.blur1d(tape.blur1d(x, kernel, 0), kernel, 1);
}

// Differentiable JPEG pipeline: BT.601 full-range YCbCr, 4:4:4, edge-padded
// 8x8 blocks, quality-scaled Annex-K tables, cubic rounding approximation
// (or exact rounding in reference mode).
template <typename T>
typename Tape<T>::NodeId jpeg_simulate(Tape<T>& tape, typename Tape<T>::NodeId x,
                                       int q, bool exact_round = false) {
  const Shape in_shape = tape.value(x).shape;
  require(in_shape.c == 3, "jpeg_simulate: needs an RGB image");
  auto [luma, chroma] = quality_scale(q);
  auto tables = std::make_shared<std::vector<std::array<T, 64>>>(3);
  for (int i = 0; i < 64; ++i) {
    (*tables)[0][i] = static_cast<T>(luma[i]);
    (*tables)[1][i] = static_cast<T>(chroma[i]);
    (*tables)[2][i] = static_cast<T>(chroma[i]);
  }

  static const std::array<T, 9> rgb2ycc = {
      T(0.299),     T(0.587),     T(0.114),
      T(-0.168736), T(-0.331264), T(0.5),
      T(0.5),       T(-0.418688), T(-0.081312)};
  static const std::array<T, 3> ycc_off = {T(0), T(128), T(128)};
  static const std::array<T, 9> ycc2rgb = {
      T(1), T(0),         T(1.402),
      T(1), T(-0.344136), T(-0.714136),
      T(1), T(1.772),     T(0)};
  static const std::array<T, 3> rgb_off = {
      T(-1.402 * 128), T((0.344136 + 0.714136) * 128), T(-1.772 * 128)};

  auto scaled = tape.affine(x, T(255), T(0));
  auto ycc = tape.color_matrix(scaled, rgb2ycc, ycc_off);
  auto padded = tape.pad_edge_mult8(ycc);
  auto level = tape.affine(padded, T(1), T(-128));
  auto coeffs = tape.block_dct8(level, false);
  auto divided = tape.coeff_scale(
      coeffs, std::shared_ptr<const std::vector<std::array<T, 64>>>(tables), true);
  auto rounded = exact_round ? tape.round_exact(divided) : tape.approx_round(divided);
  auto restored = tape.coeff_scale(
      rounded, std::shared_ptr<const std::vector<std::array<T, 64>>>(tables), false);
  auto spatial = tape.block_dct8(restored, true);
  auto unshifted = tape.affine(spatial, T(1), T(128));
  auto rgb = tape.color_matrix(unshifted, ycc2rgb, rgb_off);
  auto unpadded = tape.crop_rect(rgb, Rect{0, 0, in_shape.h, in_shape.w});
  return tape.clamp01(tape.affine(unpadded, T(1) / T(255), T(0)));
}

// Applies `spec` to the watermarked node. Cropout/Dropout read replacement
// pixels from `cover`; Crop returns a smaller image. JpegReal is test-time
// only and rejected here.
template <typename T>
AttackOutcome<T> apply_attack(Tape<T>& tape, typename Tape<T>::NodeId wm,
                              const Tensor<T>& cover, const NoiseSpec& spec) {
  const Shape s = tape.value(wm).shape;
  AttackOutcome<T> out;
  switch (spec.kind) {
    case NoiseKind::Identity: {
      out.noised = wm;
      return out;
    }
    case NoiseKind::Crop: {
      const Rect r = draw_crop_rect(s.h, s.w, spec.p.value(), spec.seed);
      out.noised = tape.crop_rect(wm, r);
      out.region = r;
      return out;
    }
    case NoiseKind::Cropout: {
      require_same_shape(tape.value(wm), cover, "cropout");
      const Rect r = draw_crop_rect(s.h, s.w, spec.p.value(), spec.seed);
      auto mask = std::make_shared<std::vector<std::uint8_t>>(
          static_cast<std::size_t>(s.h) * s.w, std::uint8_t(0));
      for (int y = r.top; y < r.top + r.h; ++y)
        for (int x = r.left; x < r.left + r.w; ++x)
          (*mask)[static_cast<std::size_t>(y) * s.w + x] = 1;
      out.mask = mask;
      out.noised = tape.blend(wm, tape.constant(cover), out.mask);
      out.region = r;
      out.mask.reset();  // region implies the mask; only Dropout records one
      return out;
    }
    case NoiseKind::Dropout: {
      require_same_shape(tape.value(wm), cover, "dropout");
      const double p = spec.p.value();
      if (!(p > 0.0 && p <= 1.0))
        throw std::invalid_argument("dropout: remaining ratio must be in (0,1]");
      Rng rng(spec.seed);
      auto mask = std::make_shared<std::vector<std::uint8_t>>(
          static_cast<std::size_t>(s.h) * s.w);
      for (auto& m : *mask) m = rng.next_bernoulli(p) ? 1 : 0;
      out.mask = mask;
      out.noised = tape.blend(wm, tape.constant(cover), out.mask);
      return out;
    }
    case NoiseKind::Gaussian: {
      out.noised = gaussian_blur(tape, wm, spec.sigma.value());
      return out;
    }
    case NoiseKind::JpegSim: {
      out.noised = jpeg_simulate(tape, wm, spec.q.value());
      return out;
    }
    case NoiseKind::JpegReal:
      throw std::invalid_argument("jpeg_real is not part of the training path");
  }
  throw std::logic_error("unreachable");
}

// Value-only attack application for evaluation paths.
template <typename T>
Tensor<T> apply_attack_value(const Tensor<T>& wm, const Tensor<T>& cover,
                             const NoiseSpec& spec) {
  Tape<T> tape(false);
  auto outcome = apply_attack(tape, tape.constant(wm), cover, spec);
  return tape.value(outcome.noised);
}

// ---- combined-noise sampling ----

// Distribution over attack kinds plus the per-kind intensity scalars used
// when that kind is drawn.
struct NoiseModel {
  std::map<NoiseKind, double> probs = {{NoiseKind::Identity, 1.0}};
  double crop_p = 0.035;
  double cropout_p = 0.3;
  double dropout_p = 0.3;
  double gaussian_sigma = 2.0;
  std::vector<int> jpeg_qs = {50, 60, 70, 80, 90};

  // The paper's combined-noise emphasis on JPEG with all six kinds kept in
  // the pool.
  static NoiseModel combined() {
    NoiseModel m;
    m.probs = {{NoiseKind::Identity, 0.05}, {NoiseKind::Crop, 0.05},
               {NoiseKind::Cropout, 0.10},  {NoiseKind::Dropout, 0.15},
               {NoiseKind::Gaussian, 0.05}, {NoiseKind::JpegSim, 0.60}};
    return m;
  }

  static NoiseModel identity_only() { return NoiseModel{}; }

  bool is_identity_only() const {
    for (const auto& [kind, prob] : probs)
      if (kind != NoiseKind::Identity && prob > 0.0) return false;
    return true;
  }

  void validate() const {
    double total = 0.0;
    for (const auto& [kind, prob] : probs) {
      if (prob < 0.0) throw std::invalid_argument("noise probabilities must be nonnegative");
      if (kind == NoiseKind::JpegReal)
        throw std::invalid_argument("jpeg_real cannot appear in the training pool");
      total += prob;
    }
    if (std::abs(total - 1.0) > 1e-9)
      throw std::invalid_argument("noise probabilities must sum to 1");
    if (jpeg_qs.empty()) throw std::invalid_argument("jpeg quality set is empty");
  }
};

// Per-mini-batch categorical draw of the attack kind plus its intensity.
inline NoiseSpec sample_noise(const NoiseModel& model, std::uint64_t seed) {
  model.validate();
  Rng rng(seed);
  const double u = rng.next_real();
  double cum = 0.0;
  NoiseKind chosen = NoiseKind::Identity;
  bool found = false;
  for (const auto& [kind, prob] : model.probs) {
    cum += prob;
    if (u < cum) {
      chosen = kind;
      found = true;
      break;
    }
  }
  if (!found) {
    // u landed on the floating-point edge of the cumulative sum; take the
    // last kind with positive mass.
    for (const auto& [kind, prob] : model.probs)
      if (prob > 0.0) chosen = kind;
  }
  NoiseSpec spec;
  spec.kind = chosen;
  spec.seed = rng.next_u64();
  switch (chosen) {
    case NoiseKind::Crop: spec.p = model.crop_p; break;
    case NoiseKind::Cropout: spec.p = model.cropout_p; break;
    case NoiseKind::Dropout: spec.p = model.dropout_p; break;
    case NoiseKind::Gaussian: spec.sigma = model.gaussian_sigma; break;
    case NoiseKind::JpegSim:
      spec.q = model.jpeg_qs[rng.next_below(model.jpeg_qs.size())];
      break;
    default: break;
  }
  return spec;
}

}  // namespace iwn
