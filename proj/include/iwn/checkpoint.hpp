#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "iwn/coupling.hpp"

namespace iwn {

// On-disk model format: magic "IWN1", a fixed-width architecture descriptor
// sufficient to rebuild the stack, length-prefixed named parameter arrays as
// little-endian 32-bit floats, and the training-config snapshot verbatim.
// Canonical parameter order makes save -> load -> save byte-identical.
struct Checkpoint {
  std::uint32_t version = 1;
  std::uint32_t blocks = 0;
  std::uint32_t msg_channels = 0;
  std::uint32_t hidden = 0;
  float clamp_lambda = 2.0f;
  std::uint64_t step = 0;
  std::string config_json;  // stored verbatim
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string path)
      : bytes_(bytes), path_(std::move(path)) {}

  void expect(std::size_t n, const char* section) {
    if (pos_ + n > bytes_.size())
      throw std::runtime_error("checkpoint '" + path_ +
                               "' is truncated while reading " + section);
  }
  std::uint32_t u32(const char* section) {
    expect(4, section);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* section) {
    expect(8, section);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32(const char* section) {
    const std::uint32_t bits = u32(section);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string str(std::size_t n, const char* section) {
    expect(n, section);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
std::string serialize_checkpoint(const CouplingStack<T>& stack, const Checkpoint& meta) {
  std::string out;
  out += "IWN1";
  detail::put_u32(out, meta.version);
  detail::put_u32(out, static_cast<std::uint32_t>(stack.blocks()));
  detail::put_u32(out, static_cast<std::uint32_t>(stack.msg_channels()));
  detail::put_u32(out, static_cast<std::uint32_t>(stack.hidden()));
  detail::put_f32(out, static_cast<float>(stack.clamp_lambda()));
  detail::put_u64(out, meta.step);
  detail::put_u32(out, static_cast<std::uint32_t>(stack.params().size()));
  for (const auto& p : stack.params()) {
    detail::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    detail::put_u32(out, static_cast<std::uint32_t>(p.dims.size()));
    for (int d : p.dims) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (const T v : p.value) detail::put_f32(out, static_cast<float>(v));
  }
  detail::put_u32(out, static_cast<std::uint32_t>(meta.config_json.size()));
  out += meta.config_json;
  return out;
}

// Atomic write: temp file in the same directory, then rename.
template <typename T>
void save_checkpoint(const std::string& path, const CouplingStack<T>& stack,
                     const Checkpoint& meta) {
  const std::string bytes = serialize_checkpoint(stack, meta);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write '" + tmp + "'");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("short write to '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cannot rename '" + tmp + "' to '" + path + "'");
}

struct LoadedCheckpoint {
  Checkpoint meta;
  CouplingStack<float> stack{1, 1, 1};
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  detail::Reader r(bytes, path);

  if (r.str(4, "magic") != "IWN1")
    throw std::runtime_error("'" + path + "' is not an IWN1 checkpoint");
  LoadedCheckpoint out;
  out.meta.version = r.u32("version");
  if (out.meta.version != 1)
    throw std::runtime_error("checkpoint '" + path + "' has unsupported version " +
                             std::to_string(out.meta.version));
  out.meta.blocks = r.u32("architecture");
  out.meta.msg_channels = r.u32("architecture");
  out.meta.hidden = r.u32("architecture");
  out.meta.clamp_lambda = r.f32("architecture");
  out.meta.step = r.u64("training step");

  out.stack = CouplingStack<float>(static_cast<int>(out.meta.blocks),
                                   static_cast<int>(out.meta.msg_channels),
                                   static_cast<int>(out.meta.hidden),
                                   out.meta.clamp_lambda);
  const std::uint32_t nparams = r.u32("parameter count");
  if (nparams != out.stack.params().size())
    throw std::runtime_error("checkpoint '" + path + "' has " +
                             std::to_string(nparams) + " parameters, architecture needs " +
                             std::to_string(out.stack.params().size()));
  for (auto& p : out.stack.params()) {
    const std::uint32_t name_len = r.u32("parameter name");
    const std::string name = r.str(name_len, "parameter name");
    if (name != p.name)
      throw std::runtime_error("checkpoint '" + path + "' parameter '" + name +
                               "' does not match expected '" + p.name + "'");
    const std::uint32_t ndims = r.u32("parameter dims");
    if (ndims != p.dims.size())
      throw std::runtime_error("checkpoint '" + path + "' parameter '" + name +
                               "' has wrong rank");
    for (std::size_t i = 0; i < p.dims.size(); ++i)
      if (r.u32("parameter dims") != static_cast<std::uint32_t>(p.dims[i]))
        throw std::runtime_error("checkpoint '" + path + "' parameter '" + name +
                                 "' has wrong dims");
    for (auto& v : p.value) v = r.f32("parameter data");
  }
  const std::uint32_t cfg_len = r.u32("config snapshot");
  out.meta.config_json = r.str(cfg_len, "config snapshot");
  if (!r.at_end())
    throw std::runtime_error("checkpoint '" + path + "' has trailing bytes");
  return out;
}

}  // namespace iwn
