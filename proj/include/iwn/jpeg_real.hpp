#pragma once

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include <jpeglib.h>

#include "iwn/tensor.hpp"

namespace iwn {

namespace detail {

[[noreturn]] inline void jpeg_error_throw(j_common_ptr cinfo) {
  char msg[JMSG_LENGTH_MAX];
  (*cinfo->err->format_message)(cinfo, msg);
  throw std::runtime_error(std::string("jpeg codec: ") + msg);
}

template <typename T>
std::vector<std::uint8_t> to_bytes_rgb8(const Tensor<T>& img) {
  require(img.shape.c == 3, "jpeg: needs an RGB image");
  std::vector<std::uint8_t> bytes(img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    double v = static_cast<double>(img.data[i]) * 255.0;
    v = std::min(std::max(v, 0.0), 255.0);
    bytes[i] = static_cast<std::uint8_t>(std::lround(v));
  }
  return bytes;
}

}  // namespace detail

// Baseline JFIF encoding of an RGB image at quality q.
template <typename T>
std::vector<std::uint8_t> jpeg_encode(const Tensor<T>& img, int q) {
  if (q < 1 || q > 100)
    throw std::invalid_argument("jpeg_encode: q must be in 1..100");
  const auto bytes = detail::to_bytes_rgb8(img);

  jpeg_compress_struct cinfo{};
  jpeg_error_mgr jerr{};
  cinfo.err = jpeg_std_error(&jerr);
  jerr.error_exit = detail::jpeg_error_throw;
  jpeg_create_compress(&cinfo);

  unsigned char* out_buf = nullptr;
  unsigned long out_size = 0;
  try {
    jpeg_mem_dest(&cinfo, &out_buf, &out_size);
    cinfo.image_width = static_cast<JDIMENSION>(img.shape.w);
    cinfo.image_height = static_cast<JDIMENSION>(img.shape.h);
    cinfo.input_components = 3;
    cinfo.in_color_space = JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, q, TRUE /* force baseline */);
    jpeg_start_compress(&cinfo, TRUE);
    const std::size_t stride = static_cast<std::size_t>(img.shape.w) * 3;
    while (cinfo.next_scanline < cinfo.image_height) {
      JSAMPROW row = const_cast<JSAMPROW>(&bytes[cinfo.next_scanline * stride]);
      jpeg_write_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_compress(&cinfo);
  } catch (...) {
    jpeg_destroy_compress(&cinfo);
    if (out_buf) free(out_buf);
    throw;
  }
  std::vector<std::uint8_t> result(out_buf, out_buf + out_size);
  jpeg_destroy_compress(&cinfo);
  free(out_buf);
  return result;
}

template <typename T>
Tensor<T> jpeg_decode(const std::vector<std::uint8_t>& bytes) {
  jpeg_decompress_struct cinfo{};
  jpeg_error_mgr jerr{};
  cinfo.err = jpeg_std_error(&jerr);
  jerr.error_exit = detail::jpeg_error_throw;
  jpeg_create_decompress(&cinfo);
  try {
    jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    Tensor<T> img(static_cast<int>(cinfo.output_height),
                  static_cast<int>(cinfo.output_width), 3);
    std::vector<std::uint8_t> row(static_cast<std::size_t>(cinfo.output_width) * 3);
    std::size_t offset = 0;
    while (cinfo.output_scanline < cinfo.output_height) {
      JSAMPROW rp = row.data();
      jpeg_read_scanlines(&cinfo, &rp, 1);
      for (std::size_t i = 0; i < row.size(); ++i)
        img.data[offset + i] = static_cast<T>(row[i]) / T(255);
      offset += row.size();
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return img;
  } catch (...) {
    jpeg_destroy_decompress(&cinfo);
    throw;
  }
}

// Test-time real JPEG attack: encode to a baseline byte stream at quality q
// and decode back. Not differentiable.
template <typename T>
Tensor<T> jpeg_real(const Tensor<T>& wm, int q) {
  return jpeg_decode<T>(jpeg_encode(wm, q));
}

}  // namespace iwn
