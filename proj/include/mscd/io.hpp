#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "mscd/errors.hpp"
#include "mscd/tensor.hpp"

namespace mscd {

// ---------------------------------------------------------------------------
// MMCT binary tensor format
//   magic "MMCT", u16 version=1 LE, dtype u8 (0=f32, 1=f64, 2=u8), rank u8,
//   rank x u32 dims LE, row-major LE payload.
// ---------------------------------------------------------------------------

enum class MmctDtype : uint8_t { f32 = 0, f64 = 1, u8 = 2 };

struct RawTensor {
  MmctDtype dtype = MmctDtype::f32;
  Shape shape;
  std::vector<uint8_t> bytes;

  int64_t numel() const { return shape_numel(shape); }
};

namespace detail {

inline void put_u16(std::ostream& os, uint16_t v) {
  uint8_t b[2] = {uint8_t(v & 0xff), uint8_t(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}
inline void put_u32(std::ostream& os, uint32_t v) {
  uint8_t b[4] = {uint8_t(v), uint8_t(v >> 8), uint8_t(v >> 16), uint8_t(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline uint16_t get_u16(std::istream& is) {
  uint8_t b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  return uint16_t(b[0] | (b[1] << 8));
}
inline uint32_t get_u32(std::istream& is) {
  uint8_t b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
         (uint32_t(b[3]) << 24);
}

inline size_t dtype_size(MmctDtype d) {
  switch (d) {
    case MmctDtype::f32: return 4;
    case MmctDtype::f64: return 8;
    case MmctDtype::u8: return 1;
  }
  return 0;
}

}  // namespace detail

inline void write_mmct(std::ostream& os, const RawTensor& t) {
  os.write("MMCT", 4);
  detail::put_u16(os, 1);
  os.put(char(uint8_t(t.dtype)));
  os.put(char(uint8_t(t.shape.size())));
  for (int64_t d : t.shape) detail::put_u32(os, uint32_t(d));
  os.write(reinterpret_cast<const char*>(t.bytes.data()), std::streamsize(t.bytes.size()));
  if (!os) throw DataError("MMCT write failed");
}

inline RawTensor read_mmct(std::istream& is, const std::string& what = "stream") {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MMCT", 4) != 0)
    throw DataError("not an MMCT tensor: " + what);
  const uint16_t version = detail::get_u16(is);
  if (version != 1) throw DataError("unsupported MMCT version in " + what);
  RawTensor t;
  const int dt = is.get();
  const int rank = is.get();
  if (dt < 0 || dt > 2 || rank < 0) throw DataError("malformed MMCT header in " + what);
  t.dtype = MmctDtype(uint8_t(dt));
  t.shape.resize(size_t(rank));
  for (auto& d : t.shape) d = int64_t(detail::get_u32(is));
  if (!is) throw DataError("truncated MMCT header in " + what);
  const size_t n = size_t(t.numel()) * detail::dtype_size(t.dtype);
  t.bytes.resize(n);
  is.read(reinterpret_cast<char*>(t.bytes.data()), std::streamsize(n));
  if (size_t(is.gcount()) != n) throw DataError("truncated MMCT payload in " + what);
  return t;
}

template <typename T>
RawTensor to_raw(const Tensor<T>& t) {
  RawTensor r;
  r.dtype = sizeof(T) == 4 ? MmctDtype::f32 : MmctDtype::f64;
  r.shape = t.shape();
  r.bytes.resize(size_t(t.numel()) * sizeof(T));
  std::memcpy(r.bytes.data(), t.data().data(), r.bytes.size());
  return r;
}

template <typename T>
Tensor<T> from_raw(const RawTensor& r, const std::string& what = "tensor") {
  std::vector<T> data(size_t(r.numel()));
  if (r.dtype == MmctDtype::f32) {
    const float* p = reinterpret_cast<const float*>(r.bytes.data());
    for (size_t i = 0; i < data.size(); ++i) data[i] = T(p[i]);
  } else if (r.dtype == MmctDtype::f64) {
    const double* p = reinterpret_cast<const double*>(r.bytes.data());
    for (size_t i = 0; i < data.size(); ++i) data[i] = T(p[i]);
  } else {
    for (size_t i = 0; i < data.size(); ++i) data[i] = T(r.bytes[i]) / T(255);
  }
  Shape s = r.shape;
  if (s.empty()) throw DataError("rank-0 MMCT tensor in " + what);
  return Tensor<T>::from_data(std::move(s), std::move(data));
}

// ---------------------------------------------------------------------------
// MSCK checkpoint: magic "MSCK", u32 count, then per entry
//   (u16 name length, UTF-8 name, MMCT tensor).
// ---------------------------------------------------------------------------

using NamedRawTensors = std::vector<std::pair<std::string, RawTensor>>;

inline void write_checkpoint(const std::string& path, const NamedRawTensors& entries) {
  // atomic: write-temp-then-rename
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw DataError("cannot open checkpoint for writing: " + path);
    os.write("MSCK", 4);
    detail::put_u32(os, uint32_t(entries.size()));
    for (const auto& [name, t] : entries) {
      detail::put_u16(os, uint16_t(name.size()));
      os.write(name.data(), std::streamsize(name.size()));
      write_mmct(os, t);
    }
    if (!os) throw DataError("checkpoint write failed: " + path);
  }
  std::filesystem::rename(tmp, path);
}

inline NamedRawTensors read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MSCK", 4) != 0)
    throw DataError("not an MSCK checkpoint: " + path);
  const uint32_t count = detail::get_u32(is);
  NamedRawTensors entries;
  entries.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t len = detail::get_u16(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw DataError("truncated checkpoint entry in " + path);
    entries.emplace_back(std::move(name), read_mmct(is, path));
  }
  return entries;
}

// ---------------------------------------------------------------------------
// Binary PGM (P5) / PPM (P6), 8-bit
// ---------------------------------------------------------------------------

struct GrayImage {
  int64_t width = 0, height = 0;
  std::vector<uint8_t> pixels;  // row-major
};

struct RgbImage {
  int64_t width = 0, height = 0;
  std::vector<uint8_t> pixels;  // row-major, interleaved RGB
};

namespace detail {

inline int pnm_token(std::istream& is, const std::string& path) {
  // skips whitespace and '#' comments
  int c = is.get();
  while (is) {
    if (c == '#') {
      while (is && c != '\n') c = is.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = is.get();
  }
  if (!is) throw DataError("malformed PNM header: " + path);
  int v = 0;
  while (is && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    c = is.get();
  }
  return v;
}

}  // namespace detail

inline void write_pgm(const std::string& path, const GrayImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  os << "P5\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()),
           std::streamsize(img.pixels.size()));
  if (!os) throw DataError("PGM write failed: " + path);
}

inline void write_ppm(const std::string& path, const RgbImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()),
           std::streamsize(img.pixels.size()));
  if (!os) throw DataError("PPM write failed: " + path);
}

inline GrayImage read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  char m0 = char(is.get()), m1 = char(is.get());
  if (!is || m0 != 'P' || m1 != '5') throw DataError("not a binary PGM (P5): " + path);
  GrayImage img;
  img.width = detail::pnm_token(is, path);
  img.height = detail::pnm_token(is, path);
  const int maxval = detail::pnm_token(is, path);
  if (maxval != 255) throw DataError("unsupported PGM maxval in " + path);
  const size_t n = size_t(img.width * img.height);
  img.pixels.resize(n);
  is.read(reinterpret_cast<char*>(img.pixels.data()), std::streamsize(n));
  if (size_t(is.gcount()) != n) throw DataError("truncated PGM payload: " + path);
  return img;
}

inline RgbImage read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  char m0 = char(is.get()), m1 = char(is.get());
  if (!is || m0 != 'P' || m1 != '6') throw DataError("not a binary PPM (P6): " + path);
  RgbImage img;
  img.width = detail::pnm_token(is, path);
  img.height = detail::pnm_token(is, path);
  const int maxval = detail::pnm_token(is, path);
  if (maxval != 255) throw DataError("unsupported PPM maxval in " + path);
  const size_t n = size_t(img.width * img.height * 3);
  img.pixels.resize(n);
  is.read(reinterpret_cast<char*>(img.pixels.data()), std::streamsize(n));
  if (size_t(is.gcount()) != n) throw DataError("truncated PPM payload: " + path);
  return img;
}

}  // namespace mscd
