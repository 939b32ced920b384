#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "iwn/coupling.hpp"
#include "iwn/distort.hpp"
#include "iwn/image_io.hpp"
#include "iwn/msgcodec.hpp"
#include "iwn/rng.hpp"

namespace iwn {

// PSNR over 8-bit quantized values; identical images yield +infinity, which
// reports render as "identical".
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "psnr");
  auto to_level = [](T v) {
    double s = static_cast<double>(v) * 255.0;
    s = std::min(std::max(s, 0.0), 255.0);
    return std::lround(s);
  };
  double sse = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(to_level(a.data[i]) - to_level(b.data[i]));
    sse += d * d;
  }
  if (sse == 0.0) return std::numeric_limits<double>::infinity();
  const double mse = sse / static_cast<double>(a.data.size());
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

inline std::string psnr_str(double db) {
  if (std::isinf(db)) return "identical";
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << db;
  return os.str();
}

// Fraction of identical bits.
inline double bit_accuracy(const BitMessage& a, const BitMessage& b) {
  if (a.bits.size() != b.bits.size())
    throw std::invalid_argument("bit_accuracy: length mismatch");
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i)
    if (a.bits[i] == b.bits[i]) ++same;
  return static_cast<double>(same) / static_cast<double>(a.bits.size());
}

// ---- distortion-intensity sweep ----

struct SweepGrid {
  struct Entry {
    NoiseKind kind = NoiseKind::Identity;
    std::vector<double> intensities;  // empty for identity
  };
  std::vector<Entry> entries;

  static SweepGrid from_json(const nlohmann::json& j) {
    SweepGrid g;
    for (const auto& cell : j.at("cells")) {
      Entry e;
      e.kind = noise_kind_from_name(cell.at("kind").get<std::string>());
      if (cell.contains("intensities"))
        e.intensities = cell.at("intensities").get<std::vector<double>>();
      if (e.intensities.empty() && e.kind != NoiseKind::Identity)
        throw std::invalid_argument("sweep grid: kind '" +
                                    std::string(noise_kind_name(e.kind)) +
                                    "' needs intensities");
      g.entries.push_back(std::move(e));
    }
    if (g.entries.empty()) throw std::invalid_argument("sweep grid is empty");
    return g;
  }
};

struct EvalCell {
  NoiseKind kind = NoiseKind::Identity;
  double intensity = 0.0;
  double bit_acc = 0.0;
  int images = 0;
  bool failed = false;
  std::string error;
};

struct EvalReport {
  std::string model_id;
  std::uint64_t seed = 0;
  int image_count = 0;
  int msg_bits = 0;
  int msg_groups = 0;
  std::vector<double> psnr_per_image;
  double psnr_mean = 0.0;
  std::vector<EvalCell> cells;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["model"] = model_id;
    j["seed"] = seed;
    j["images"] = image_count;
    j["msg_bits"] = msg_bits;
    j["msg_groups"] = msg_groups;
    nlohmann::json psnrs = nlohmann::json::array();
    for (double p : psnr_per_image)
      psnrs.push_back(std::isinf(p) ? nlohmann::json("identical") : nlohmann::json(p));
    j["psnr_per_image"] = psnrs;
    j["psnr_mean"] = std::isinf(psnr_mean) ? nlohmann::json("identical")
                                           : nlohmann::json(psnr_mean);
    j["cells"] = nlohmann::json::array();
    for (const auto& c : cells) {
      nlohmann::json cj;
      cj["kind"] = noise_kind_name(c.kind);
      cj["intensity"] = c.intensity;
      cj["images"] = c.images;
      if (c.failed) {
        cj["failed"] = true;
        cj["error"] = c.error;
      } else {
        cj["bit_acc"] = c.bit_acc;
      }
      j["cells"].push_back(cj);
    }
    return j;
  }

  std::string table() const {
    std::ostringstream os;
    os << "clean PSNR (cover vs watermarked): " << psnr_str(psnr_mean) << " dB over "
       << image_count << " images\n";
    os << std::left << std::setw(12) << "attack" << std::setw(12) << "intensity"
       << std::setw(10) << "bit_acc" << "\n";
    for (const auto& c : cells) {
      os << std::left << std::setw(12) << noise_kind_name(c.kind);
      std::ostringstream iv;
      if (c.kind == NoiseKind::Identity) iv << "-";
      else iv << c.intensity;
      os << std::setw(12) << iv.str();
      if (c.failed)
        os << "FAILED (" << c.error << ")";
      else
        os << std::fixed << std::setprecision(4) << c.bit_acc;
      os << "\n";
    }
    return os.str();
  }
};

namespace detail {

inline NoiseSpec cell_spec(NoiseKind kind, double intensity, std::uint64_t seed) {
  switch (kind) {
    case NoiseKind::Identity: return NoiseSpec::identity();
    case NoiseKind::Crop: {
      auto s = NoiseSpec::crop(intensity, seed);
      return s;
    }
    case NoiseKind::Cropout: return NoiseSpec::cropout(intensity, seed);
    case NoiseKind::Dropout: return NoiseSpec::dropout(intensity, seed);
    case NoiseKind::Gaussian: return NoiseSpec::gaussian(intensity);
    case NoiseKind::JpegSim: return NoiseSpec::jpeg_sim(static_cast<int>(intensity));
    case NoiseKind::JpegReal: return NoiseSpec::jpeg_real(static_cast<int>(intensity));
  }
  throw std::logic_error("unreachable");
}

}  // namespace detail

// Embeds a fresh random message per image, quantizes, then measures bit
// accuracy for every (kind, intensity) grid cell. JPEG cells use the real
// codec; everything else shares the training attack implementations.
inline EvalReport sweep(CouplingStack<float>& stack,
                        const std::vector<std::string>& image_files,
                        const SweepGrid& grid, int msg_bits, std::uint64_t seed,
                        const std::string& model_id, int resize_to = 0) {
  if (image_files.empty()) throw std::invalid_argument("sweep: no images");
  const int c = stack.msg_channels();
  require(msg_bits % c == 0 && msg_bits / c >= 1 && msg_bits / c <= 8,
          "sweep: message bits must give 1..8 bits per group");

  EvalReport report;
  report.model_id = model_id;
  report.seed = seed;
  report.image_count = static_cast<int>(image_files.size());
  report.msg_bits = msg_bits;
  report.msg_groups = c;

  struct Prepared {
    Tensor<float> cover;
    Tensor<float> wm_q;
    BitMessage msg;
  };
  std::vector<Prepared> prepped;
  prepped.reserve(image_files.size());
  for (std::size_t i = 0; i < image_files.size(); ++i) {
    Prepared p;
    p.cover = load_image<float>(image_files[i]);
    if (resize_to > 0) p.cover = resize_bilinear(p.cover, resize_to, resize_to);
    if (p.cover.shape.h < 8 || p.cover.shape.w < 8)
      throw std::runtime_error("sweep: image '" + image_files[i] + "' is below 8x8");
    Rng rng(Rng::mix(seed, 0x5EED, i));
    std::vector<std::uint8_t> bits(msg_bits);
    for (auto& b : bits) b = rng.next_below(2) ? 1 : 0;
    p.msg = BitMessage(bits, c);
    const auto m_in = broadcast<float>(encode_groups(p.msg), p.cover.shape.h,
                                       p.cover.shape.w);
    auto [z_hat, wm] = stack.embed(m_in, p.cover);
    (void)z_hat;
    Tape<float> t(false);
    p.wm_q = t.value(t.quantize_ste(t.constant(wm)));
    report.psnr_per_image.push_back(psnr(p.cover, p.wm_q));
    prepped.push_back(std::move(p));
  }
  double psnr_sum = 0.0;
  bool any_inf = false;
  for (double p : report.psnr_per_image) {
    if (std::isinf(p)) any_inf = true;
    else psnr_sum += p;
  }
  report.psnr_mean = any_inf ? std::numeric_limits<double>::infinity()
                             : psnr_sum / static_cast<double>(report.psnr_per_image.size());

  std::size_t cell_index = 0;
  for (const auto& entry : grid.entries) {
    std::vector<double> intensities = entry.intensities;
    if (entry.kind == NoiseKind::Identity && intensities.empty())
      intensities.push_back(0.0);
    for (double intensity : intensities) {
      EvalCell cell;
      cell.kind = entry.kind;
      cell.intensity = intensity;
      try {
        double acc_sum = 0.0;
        for (std::size_t i = 0; i < prepped.size(); ++i) {
          const auto& p = prepped[i];
          const std::uint64_t cseed = Rng::mix(seed, cell_index, i);
          Tensor<float> noised;
          if (entry.kind == NoiseKind::JpegReal)
            noised = jpeg_real(p.wm_q, static_cast<int>(intensity));
          else
            noised = apply_attack_value(
                p.wm_q, p.cover, detail::cell_spec(entry.kind, intensity, cseed));
          const auto z = Tensor<float>::constant(noised.shape.h, noised.shape.w,
                                                 c, 0.5f);
          auto [m_out, cover_rec] = stack.extract(z, noised);
          (void)cover_rec;
          const BitMessage decoded = decode_message(m_out, msg_bits, c);
          acc_sum += bit_accuracy(p.msg, decoded);
          ++cell.images;
        }
        cell.bit_acc = acc_sum / static_cast<double>(prepped.size());
      } catch (const std::exception& e) {
        cell.failed = true;
        cell.error = e.what();
      }
      report.cells.push_back(std::move(cell));
      ++cell_index;
    }
  }
  return report;
}

}  // namespace iwn
