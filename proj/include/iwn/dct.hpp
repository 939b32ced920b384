#pragma once

#include <array>
#include <cmath>
#include <stdexcept>

namespace iwn {

// Orthonormal type-II DCT basis for 8x8 blocks. With this scaling the 2-D
// transform coincides coefficient-for-coefficient with the DCT used by
// baseline JPEG, so quantization tables apply directly.
template <typename T>
const std::array<T, 64>& dct8_basis() {
  static const std::array<T, 64> basis = [] {
    std::array<T, 64> m{};
    const double pi = 3.14159265358979323846;
    for (int u = 0; u < 8; ++u) {
      const double alpha = (u == 0) ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int i = 0; i < 8; ++i)
        m[u * 8 + i] =
            static_cast<T>(alpha * std::cos((2 * i + 1) * u * pi / 16.0));
    }
    return m;
  }();
  return basis;
}

// y = C x C^T
template <typename T>
std::array<T, 64> dct8_forward(const std::array<T, 64>& block) {
  const auto& c = dct8_basis<T>();
  std::array<T, 64> tmp{}, out{};
  for (int u = 0; u < 8; ++u)
    for (int j = 0; j < 8; ++j) {
      T acc = 0;
      for (int i = 0; i < 8; ++i) acc += c[u * 8 + i] * block[i * 8 + j];
      tmp[u * 8 + j] = acc;
    }
  for (int u = 0; u < 8; ++u)
    for (int v = 0; v < 8; ++v) {
      T acc = 0;
      for (int j = 0; j < 8; ++j) acc += tmp[u * 8 + j] * c[v * 8 + j];
      out[u * 8 + v] = acc;
    }
  return out;
}

// x = C^T y C
template <typename T>
std::array<T, 64> dct8_inverse(const std::array<T, 64>& coeffs) {
  const auto& c = dct8_basis<T>();
  std::array<T, 64> tmp{}, out{};
  for (int i = 0; i < 8; ++i)
    for (int v = 0; v < 8; ++v) {
      T acc = 0;
      for (int u = 0; u < 8; ++u) acc += c[u * 8 + i] * coeffs[u * 8 + v];
      tmp[i * 8 + v] = acc;
    }
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) {
      T acc = 0;
      for (int v = 0; v < 8; ++v) acc += tmp[i * 8 + v] * c[v * 8 + j];
      out[i * 8 + j] = acc;
    }
  return out;
}

}  // namespace iwn
