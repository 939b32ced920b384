#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace iwn {

// Spatial extent plus channel count of a dense H x W x C tensor.
struct Shape {
  int h = 0;
  int w = 0;
  int c = 0;

  std::int64_t numel() const {
    return static_cast<std::int64_t>(h) * w * c;
  }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    return std::to_string(h) + "x" + std::to_string(w) + "x" +
           std::to_string(c);
  }
};

// Rectangle in image coordinates (top/left offset plus extent).
struct Rect {
  int top = 0;
  int left = 0;
  int h = 0;
  int w = 0;

  std::int64_t area() const { return static_cast<std::int64_t>(h) * w; }
  bool operator==(const Rect&) const = default;
};

// Dense row-major H x W x C tensor; the channel index varies fastest.
// Values are immutable by convention once an operation has produced them.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int h, int w, int c, T fill = T(0))
      : shape{h, w, c},
        data(static_cast<std::size_t>(shape.numel()), fill) {
    if (h < 0 || w < 0 || c < 0)
      throw std::invalid_argument("tensor dims must be nonnegative");
  }

  static Tensor constant(int h, int w, int c, T value) {
    return Tensor(h, w, c, value);
  }

  T& at(int y, int x, int ch) {
    return data[(static_cast<std::size_t>(y) * shape.w + x) * shape.c + ch];
  }
  const T& at(int y, int x, int ch) const {
    return data[(static_cast<std::size_t>(y) * shape.w + x) * shape.c + ch];
  }

  std::int64_t numel() const { return shape.numel(); }

  bool all_finite() const {
    for (const T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i)
      out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                        const char* where) {
  if (!(a.shape == b.shape))
    throw std::invalid_argument(std::string(where) + ": shape mismatch " +
                                a.shape.str() + " vs " + b.shape.str());
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace iwn
