#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "iwn/tensor.hpp"

namespace iwn {

// Bit message of length l split into c groups of r = l/c bits each.
// r must be a whole number of bits in 1..8.
struct BitMessage {
  std::vector<std::uint8_t> bits;  // each 0 or 1
  int groups = 0;

  BitMessage() = default;
  BitMessage(std::vector<std::uint8_t> b, int c) : bits(std::move(b)), groups(c) {
    validate();
  }

  int length() const { return static_cast<int>(bits.size()); }
  int bits_per_group() const { return length() / groups; }

  void validate() const {
    const int l = length();
    if (groups <= 0) throw std::invalid_argument("message: group count must be positive");
    if (l <= 0) throw std::invalid_argument("message: empty bit sequence");
    if (l % groups != 0)
      throw std::invalid_argument("message: group count " + std::to_string(groups) +
                                  " does not divide bit length " + std::to_string(l));
    const int r = l / groups;
    if (r < 1 || r > 8)
      throw std::invalid_argument("message: bits per group must be in 1..8, got " +
                                  std::to_string(r));
    for (std::uint8_t b : bits)
      if (b > 1) throw std::invalid_argument("message: bits must be 0 or 1");
  }

  bool operator==(const BitMessage& o) const {
    return bits == o.bits && groups == o.groups;
  }
};

// One 8-bit integer per group, always a member of candidates(r).
struct GroupCode {
  std::vector<int> values;
};

// The 2^r legal encoded integers k*2^(8-r) + 2^(7-r), strictly increasing.
// Their arithmetic mean is 128 for every r.
inline std::vector<int> candidates(int r) {
  if (r < 1 || r > 8)
    throw std::invalid_argument("candidates: r must be in 1..8");
  std::vector<int> out;
  out.reserve(1 << r);
  const int step = 1 << (8 - r);
  const int offset = 1 << (7 - r);
  for (int k = 0; k < (1 << r); ++k) out.push_back(k * step + offset);
  return out;
}

// Each group read most-significant-bit first as integer k, then left-shifted
// by 8-r bits plus the 2^(7-r) offset.
inline GroupCode encode_groups(const BitMessage& msg) {
  msg.validate();
  const int r = msg.bits_per_group();
  GroupCode code;
  code.values.reserve(msg.groups);
  for (int g = 0; g < msg.groups; ++g) {
    int k = 0;
    for (int i = 0; i < r; ++i) k = (k << 1) | msg.bits[g * r + i];
    code.values.push_back(k * (1 << (8 - r)) + (1 << (7 - r)));
  }
  return code;
}

// Spatially constant H x W x c tensor, channel g holding code[g]/255.
template <typename T>
Tensor<T> broadcast(const GroupCode& code, int h, int w) {
  require(h >= 1 && w >= 1, "broadcast: spatial dims must be >= 1");
  const int c = static_cast<int>(code.values.size());
  Tensor<T> m(h, w, c);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int g = 0; g < c; ++g)
        m.at(y, x, g) = static_cast<T>(code.values[g]) / T(255);
  return m;
}

// Per-channel decode detail: the winning candidate and its mode share.
struct ChannelDecode {
  int value = 0;
  double confidence = 0.0;  // fraction of pixels whose snapped value is the mode
};

namespace detail {

inline int snap_to_candidate(double v255, const std::vector<int>& cands) {
  // Ties break toward the smaller candidate: strict improvement only.
  int best = 0;
  double best_d = std::abs(v255 - cands[0]);
  for (std::size_t i = 1; i < cands.size(); ++i) {
    const double d = std::abs(v255 - cands[i]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

}  // namespace detail

// Snap every element to the nearest candidate, then take the spatial mode.
// Both tie-breaks go toward the smaller candidate.
template <typename T>
std::vector<ChannelDecode> decode_groups_detail(const Tensor<T>& m, int r) {
  const auto cands = candidates(r);
  require(m.shape.h >= 1 && m.shape.w >= 1, "decode_groups: empty spatial extent");
  require(m.shape.c >= 1, "decode_groups: no channels");
  const std::int64_t hw = static_cast<std::int64_t>(m.shape.h) * m.shape.w;
  std::vector<ChannelDecode> out(m.shape.c);
  std::vector<std::int64_t> counts(cands.size());
  for (int ch = 0; ch < m.shape.c; ++ch) {
    std::fill(counts.begin(), counts.end(), 0);
    for (int y = 0; y < m.shape.h; ++y)
      for (int x = 0; x < m.shape.w; ++x)
        ++counts[detail::snap_to_candidate(
            static_cast<double>(m.at(y, x, ch)) * 255.0, cands)];
    int mode = 0;
    for (std::size_t i = 1; i < counts.size(); ++i)
      if (counts[i] > counts[mode]) mode = static_cast<int>(i);
    out[ch].value = cands[mode];
    out[ch].confidence = static_cast<double>(counts[mode]) / static_cast<double>(hw);
  }
  return out;
}

template <typename T>
GroupCode decode_groups(const Tensor<T>& m, int r) {
  GroupCode code;
  for (const auto& d : decode_groups_detail(m, r)) code.values.push_back(d.value);
  return code;
}

// Offset subtraction, right shift, binary conversion: exact inverse of
// encode_groups on noiseless input.
template <typename T>
BitMessage decode_message(const Tensor<T>& m, int l, int c) {
  require(c >= 1 && l >= 1 && l % c == 0, "decode_message: c must divide l");
  const int r = l / c;
  require(r >= 1 && r <= 8, "decode_message: bits per group must be in 1..8");
  require(m.shape.c == c, "decode_message: channel count != group count");
  const GroupCode code = decode_groups(m, r);
  BitMessage msg;
  msg.groups = c;
  msg.bits.reserve(l);
  for (int g = 0; g < c; ++g) {
    const int k = (code.values[g] - (1 << (7 - r))) >> (8 - r);
    for (int i = r - 1; i >= 0; --i)
      msg.bits.push_back(static_cast<std::uint8_t>((k >> i) & 1));
  }
  return msg;
}

// ---- CLI message input ----

// Accepts a raw bitstring ("0101...") or a hex string. Hex requires an
// explicit bit length; the digit count must be ceil(l/4) and any pad bits
// beyond l in the last nibble must be zero.
inline std::vector<std::uint8_t> parse_message_bits(const std::string& text,
                                                    int explicit_bits) {
  std::string s = text;
  bool hex = false;
  if (s.rfind("0x", 0) == 0 || s.rfind("0X", 0) == 0) {
    hex = true;
    s = s.substr(2);
  }
  if (s.empty()) throw std::invalid_argument("message string is empty");
  if (!hex) {
    bool binary_only = true;
    for (char ch : s)
      if (ch != '0' && ch != '1') binary_only = false;
    // A pure 0/1 string whose length matches --bits (or with no --bits at
    // all) is a bitstring; otherwise fall through to the hex reading.
    if (binary_only &&
        (explicit_bits <= 0 || explicit_bits == static_cast<int>(s.size()))) {
      std::vector<std::uint8_t> bits;
      for (char ch : s) bits.push_back(static_cast<std::uint8_t>(ch - '0'));
      return bits;
    }
  }
  if (explicit_bits <= 0)
    throw std::invalid_argument("hex messages require an explicit --bits length");
  std::vector<std::uint8_t> nibble_bits;
  for (char ch : s) {
    int v;
    if (ch >= '0' && ch <= '9') v = ch - '0';
    else if (ch >= 'a' && ch <= 'f') v = ch - 'a' + 10;
    else if (ch >= 'A' && ch <= 'F') v = ch - 'A' + 10;
    else throw std::invalid_argument(std::string("invalid message character '") + ch + "'");
    for (int i = 3; i >= 0; --i)
      nibble_bits.push_back(static_cast<std::uint8_t>((v >> i) & 1));
  }
  const int want_digits = (explicit_bits + 3) / 4;
  if (static_cast<int>(s.size()) != want_digits)
    throw std::invalid_argument("hex message has " + std::to_string(s.size()) +
                                " digits but --bits " + std::to_string(explicit_bits) +
                                " needs " + std::to_string(want_digits));
  for (std::size_t i = static_cast<std::size_t>(explicit_bits);
       i < nibble_bits.size(); ++i)
    if (nibble_bits[i] != 0)
      throw std::invalid_argument("hex message has nonzero pad bits beyond --bits");
  nibble_bits.resize(explicit_bits);
  return nibble_bits;
}

inline std::string bits_to_string(const std::vector<std::uint8_t>& bits) {
  std::string s;
  s.reserve(bits.size());
  for (std::uint8_t b : bits) s.push_back(b ? '1' : '0');
  return s;
}

}  // namespace iwn
