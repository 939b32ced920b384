#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "iwn/image_io.hpp"
#include "iwn/rng.hpp"
#include "iwn/tensor.hpp"

namespace iwn {

// Bilinear resize (half-pixel centers), channels preserved.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& in, int out_h, int out_w) {
  require(out_h >= 1 && out_w >= 1, "resize: output dims must be >= 1");
  Tensor<T> out(out_h, out_w, in.shape.c);
  const double sy = static_cast<double>(in.shape.h) / out_h;
  const double sx = static_cast<double>(in.shape.w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    fy = std::min(std::max(fy, 0.0), static_cast<double>(in.shape.h - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, in.shape.h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      fx = std::min(std::max(fx, 0.0), static_cast<double>(in.shape.w - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, in.shape.w - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < in.shape.c; ++ch) {
        const double top = (1 - wx) * in.at(y0, x0, ch) + wx * in.at(y0, x1, ch);
        const double bot = (1 - wx) * in.at(y1, x0, ch) + wx * in.at(y1, x1, ch);
        out.at(y, x, ch) = static_cast<T>((1 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

// One of the 8 flip/rotation symmetries: low two bits = quarter turns,
// bit 2 = horizontal flip applied first.
template <typename T>
Tensor<T> apply_dihedral(const Tensor<T>& in, int element) {
  require(element >= 0 && element < 8, "dihedral element must be in 0..7");
  Tensor<T> cur = in;
  if (element & 4) {  // horizontal flip
    Tensor<T> f(cur.shape.h, cur.shape.w, cur.shape.c);
    for (int y = 0; y < cur.shape.h; ++y)
      for (int x = 0; x < cur.shape.w; ++x)
        for (int ch = 0; ch < cur.shape.c; ++ch)
          f.at(y, x, ch) = cur.at(y, cur.shape.w - 1 - x, ch);
    cur = std::move(f);
  }
  const int turns = element & 3;
  for (int t = 0; t < turns; ++t) {  // 90 degrees clockwise per turn
    Tensor<T> r(cur.shape.w, cur.shape.h, cur.shape.c);
    for (int y = 0; y < cur.shape.h; ++y)
      for (int x = 0; x < cur.shape.w; ++x)
        for (int ch = 0; ch < cur.shape.c; ++ch)
          r.at(x, cur.shape.h - 1 - y, ch) = cur.at(y, x, ch);
    cur = std::move(r);
  }
  return cur;
}

struct DatasetSpec {
  std::string dir;
  double holdout_frac = 0.05;
  int patch = 480;       // crop size before the training resize
  int train_size = 128;  // final training resolution
  bool augment = true;
};

// Image folder with a deterministic lexicographic train/held-out split.
class Dataset {
 public:
  explicit Dataset(DatasetSpec spec) : spec_(std::move(spec)) {
    namespace fs = std::filesystem;
    std::vector<std::string> files;
    if (!fs::is_directory(spec_.dir))
      throw std::runtime_error("dataset directory '" + spec_.dir + "' does not exist");
    for (const auto& e : fs::directory_iterator(spec_.dir)) {
      if (!e.is_regular_file()) continue;
      const std::string p = e.path().string();
      if (detail::ends_with_ci(p, ".png") || detail::ends_with_ci(p, ".jpg") ||
          detail::ends_with_ci(p, ".jpeg"))
        files.push_back(p);
    }
    std::sort(files.begin(), files.end());
    if (files.empty())
      throw std::runtime_error("dataset directory '" + spec_.dir + "' has no images");
    // Held-out split: the lexicographically last fraction, at least one file
    // when there is more than one.
    std::size_t holdout = static_cast<std::size_t>(files.size() * spec_.holdout_frac);
    if (holdout == 0 && files.size() > 1 && spec_.holdout_frac > 0) holdout = 1;
    const std::size_t train_n = files.size() - holdout;
    train_files_.assign(files.begin(), files.begin() + train_n);
    holdout_files_.assign(files.begin() + train_n, files.end());
    if (train_files_.empty()) train_files_ = holdout_files_;
  }

  const DatasetSpec& spec() const { return spec_; }
  const std::vector<std::string>& train_files() const { return train_files_; }
  const std::vector<std::string>& holdout_files() const { return holdout_files_; }

  // Random image -> random patch crop (upscaled first when too small) ->
  // bilinear resize to train_size -> random flip/rotation symmetry.
  Tensor<float> sample_training_item(std::uint64_t seed) const {
    Rng rng(seed);
    for (std::size_t attempt = 0; attempt < train_files_.size(); ++attempt) {
      const std::size_t idx =
          (rng.next_below(train_files_.size()) + attempt) % train_files_.size();
      Tensor<float> img;
      try {
        img = load_image<float>(train_files_[idx]);
      } catch (const std::exception& e) {
        std::cerr << "warning: skipping unreadable image " << train_files_[idx]
                  << ": " << e.what() << "\n";
        continue;
      }
      Tensor<float> patch = random_patch(img, rng);
      Tensor<float> resized =
          resize_bilinear(patch, spec_.train_size, spec_.train_size);
      if (!spec_.augment) return resized;
      return apply_dihedral(resized, rng.next_int(0, 7));
    }
    throw std::runtime_error("dataset: no readable images in '" + spec_.dir + "'");
  }

  // Deterministic held-out image at the training resolution (center patch,
  // no augmentation).
  Tensor<float> load_holdout(std::size_t i) const {
    if (holdout_files_.empty()) throw std::runtime_error("dataset: no held-out images");
    Tensor<float> img = load_image<float>(holdout_files_[i % holdout_files_.size()]);
    img = upscale_to_patch(img);
    const int top = (img.shape.h - effective_patch(img)) / 2;
    const int left = (img.shape.w - effective_patch(img)) / 2;
    const int side = effective_patch(img);
    Tensor<float> patch(side, side, 3);
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x)
        for (int ch = 0; ch < 3; ++ch)
          patch.at(y, x, ch) = img.at(top + y, left + x, ch);
    return resize_bilinear(patch, spec_.train_size, spec_.train_size);
  }

 private:
  int effective_patch(const Tensor<float>& img) const {
    return std::min({spec_.patch, img.shape.h, img.shape.w});
  }

  Tensor<float> upscale_to_patch(const Tensor<float>& img) const {
    const int min_dim = std::min(img.shape.h, img.shape.w);
    if (min_dim >= spec_.patch) return img;
    const double scale = static_cast<double>(spec_.patch) / min_dim;
    return resize_bilinear(img,
                           std::max(spec_.patch, static_cast<int>(std::lround(img.shape.h * scale))),
                           std::max(spec_.patch, static_cast<int>(std::lround(img.shape.w * scale))));
  }

  Tensor<float> random_patch(const Tensor<float>& img_in, Rng& rng) const {
    Tensor<float> img = upscale_to_patch(img_in);
    const int side = effective_patch(img);
    const int top = static_cast<int>(rng.next_below(
        static_cast<std::uint64_t>(img.shape.h - side + 1)));
    const int left = static_cast<int>(rng.next_below(
        static_cast<std::uint64_t>(img.shape.w - side + 1)));
    Tensor<float> patch(side, side, 3);
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x)
        for (int ch = 0; ch < 3; ++ch)
          patch.at(y, x, ch) = img.at(top + y, left + x, ch);
    return patch;
  }

  DatasetSpec spec_;
  std::vector<std::string> train_files_;
  std::vector<std::string> holdout_files_;
};

}  // namespace iwn
