/* Copyright 2026 The fxmamba Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

// FMW tensor container. Layout, all little-endian:
//
//   "FMW1" | u16 version | u32 count
//   per tensor: u16 name_len | name | u8 dtype | i8 frac | u8 ndim | u32 dims[ndim] | payload
//   u32 CRC32 of every preceding byte
//
// Integer payloads carry fixed-point codes whose value is code * 2^-frac.

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fxmamba/error.hpp"
#include "fxmamba/fixpoint.hpp"

namespace fxm {

inline constexpr char kFmwMagic[4] = {'F', 'M', 'W', '1'};
inline constexpr std::uint16_t kFmwVersion = 1;
inline constexpr std::size_t kFmwEmptySize = 14;

enum class DType : std::uint8_t { f32 = 0, f16 = 1, i8 = 2, i16 = 3 };

inline std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f16: return 2;
    case DType::i8: return 1;
    case DType::i16: return 2;
  }
  fail(Errc::bad_dtype, "unknown dtype");
}

inline const char* dtype_name(DType t) {
  switch (t) {
    case DType::f32: return "f32";
    case DType::f16: return "f16";
    case DType::i8: return "i8";
    case DType::i16: return "i16";
  }
  return "?";
}

// IEEE binary16 conversion, round-half-even, overflow to infinity.
inline std::uint16_t float_to_half(float f) {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
  const std::uint32_t exp = (x >> 23) & 0xffu;
  std::uint32_t man = x & 0x7fffffu;
  if (exp == 0xff) return static_cast<std::uint16_t>(sign | 0x7c00u | (man ? 0x200u : 0u));
  const int e = static_cast<int>(exp) - 127 + 15;
  if (e >= 31) return static_cast<std::uint16_t>(sign | 0x7c00u);
  if (e <= 0) {
    if (e < -10) return sign;
    man |= 0x800000u;
    const int shift = 14 - e;
    std::uint32_t h = man >> shift;
    const std::uint32_t rem = man & ((1u << shift) - 1u);
    const std::uint32_t half = 1u << (shift - 1);
    if (rem > half || (rem == half && (h & 1u))) ++h;
    return static_cast<std::uint16_t>(sign | h);
  }
  std::uint32_t h = (static_cast<std::uint32_t>(e) << 10) | (man >> 13);
  const std::uint32_t rem = man & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;  // may carry into the exponent, which is correct
  return static_cast<std::uint16_t>(sign | h);
}

inline float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1fu;
  const std::uint32_t man = h & 0x3ffu;
  if (exp == 0) {
    const float v = std::ldexp(static_cast<float>(man), -24);
    return sign ? -v : v;
  }
  if (exp == 31) return std::bit_cast<float>(sign | 0x7f800000u | (man << 13));
  return std::bit_cast<float>(sign | ((exp + 112u) << 23) | (man << 13));
}

struct FmwTensor {
  std::string name;
  DType dtype = DType::f32;
  std::int8_t frac = 0;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> bytes;

  std::size_t numel() const {
    std::size_t n = 1;
    for (std::uint32_t d : dims) n *= d;
    return n;
  }
  bool is_integer() const { return dtype == DType::i8 || dtype == DType::i16; }

  // Integer codes; float tensors are rejected.
  std::vector<std::int32_t> codes() const {
    require(is_integer(), Errc::bad_dtype, "tensor " + name + " is not an integer tensor");
    std::vector<std::int32_t> out(numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (dtype == DType::i8) {
        out[i] = static_cast<std::int8_t>(bytes[i]);
      } else {
        out[i] = static_cast<std::int16_t>(static_cast<std::uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8)));
      }
    }
    return out;
  }

  std::vector<double> values() const {
    std::vector<double> out(numel());
    if (is_integer()) {
      const auto c = codes();
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::ldexp(static_cast<double>(c[i]), -frac);
      return out;
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (dtype == DType::f32) {
        std::uint32_t u = 0;
        for (int k = 3; k >= 0; --k) u = (u << 8) | bytes[4 * i + static_cast<std::size_t>(k)];
        out[i] = std::bit_cast<float>(u);
      } else {
        out[i] = half_to_float(static_cast<std::uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8)));
      }
    }
    return out;
  }

  FixTensor to_fix() const {
    FixTensor t;
    t.shape.assign(dims.begin(), dims.end());
    t.codes = codes();
    t.fmt = {dtype == DType::i8 ? 8 : 16, frac};
    return t;
  }

  friend bool operator==(const FmwTensor&, const FmwTensor&) = default;
};

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) b.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
}

inline std::vector<std::uint32_t> checked_dims(const std::vector<std::size_t>& dims, std::size_t n) {
  std::vector<std::uint32_t> out;
  std::size_t prod = 1;
  for (std::size_t d : dims) {
    require(d <= UINT32_MAX, Errc::invalid_argument, "tensor dimension exceeds u32");
    out.push_back(static_cast<std::uint32_t>(d));
    prod *= d;
  }
  require(prod == n, Errc::shape_mismatch, "tensor dims do not match element count");
  require(out.size() <= 255, Errc::invalid_argument, "too many tensor dims");
  return out;
}

}  // namespace detail

inline FmwTensor make_f32(std::string name, const std::vector<std::size_t>& dims, std::span<const double> v) {
  FmwTensor t{std::move(name), DType::f32, 0, detail::checked_dims(dims, v.size()), {}};
  t.bytes.reserve(4 * v.size());
  for (double x : v) detail::put_u32(t.bytes, std::bit_cast<std::uint32_t>(static_cast<float>(x)));
  return t;
}

inline FmwTensor make_f16(std::string name, const std::vector<std::size_t>& dims, std::span<const double> v) {
  FmwTensor t{std::move(name), DType::f16, 0, detail::checked_dims(dims, v.size()), {}};
  t.bytes.reserve(2 * v.size());
  for (double x : v) detail::put_u16(t.bytes, float_to_half(static_cast<float>(x)));
  return t;
}

inline FmwTensor make_int(std::string name, DType dtype, int frac, const std::vector<std::size_t>& dims,
                          std::span<const std::int32_t> codes) {
  require(dtype == DType::i8 || dtype == DType::i16, Errc::bad_dtype, "make_int needs an integer dtype");
  require(frac >= -128 && frac <= 127, Errc::invalid_argument, "frac does not fit the i8 header field");
  const std::int32_t hi = dtype == DType::i8 ? 127 : 32767;
  FmwTensor t{std::move(name), dtype, static_cast<std::int8_t>(frac), detail::checked_dims(dims, codes.size()), {}};
  for (std::int32_t c : codes) {
    require(c >= -hi - 1 && c <= hi, Errc::invalid_argument, "code out of range for " + t.name);
    if (dtype == DType::i8) {
      t.bytes.push_back(static_cast<std::uint8_t>(c));
    } else {
      detail::put_u16(t.bytes, static_cast<std::uint16_t>(c));
    }
  }
  return t;
}

inline FmwTensor make_scalar_i16(std::string name, std::int32_t v) {
  return make_int(std::move(name), DType::i16, 0, {1}, std::span<const std::int32_t>(&v, 1));
}

inline FmwTensor make_fix_tensor(std::string name, const FixTensor& t) {
  require(t.fmt.width == 8 || t.fmt.width == 16, Errc::bad_dtype, "only 8- and 16-bit tensors can be stored");
  const std::vector<std::size_t> dims = t.shape.empty() ? std::vector<std::size_t>{t.codes.size()} : t.shape;
  return make_int(std::move(name), t.fmt.width == 8 ? DType::i8 : DType::i16, t.fmt.frac, dims, t.codes);
}

// Ordered tensor set with unique names.
class FmwFile {
 public:
  void add(FmwTensor t) {
    require(!t.name.empty() && t.name.size() <= UINT16_MAX, Errc::invalid_argument, "bad tensor name length");
    require(!index_.contains(t.name), Errc::invalid_argument, "duplicate tensor " + t.name);
    require(t.bytes.size() == t.numel() * dtype_size(t.dtype), Errc::shape_mismatch,
            "payload size mismatch for " + t.name);
    index_.emplace(t.name, tensors_.size());
    tensors_.push_back(std::move(t));
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  const FmwTensor& get(const std::string& name) const {
    const auto it = index_.find(name);
    require(it != index_.end(), Errc::missing_tensor, "missing tensor: " + name);
    return tensors_[it->second];
  }

  const std::vector<FmwTensor>& tensors() const { return tensors_; }
  std::size_t size() const { return tensors_.size(); }

  friend bool operator==(const FmwFile& a, const FmwFile& b) { return a.tensors_ == b.tensors_; }

 private:
  std::vector<FmwTensor> tensors_;
  std::map<std::string, std::size_t> index_;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in pieces.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    crc = crc32(crc, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::vector<std::uint8_t> encode_fmw(const FmwFile& f) {
  std::vector<std::uint8_t> b(std::begin(kFmwMagic), std::end(kFmwMagic));
  detail::put_u16(b, kFmwVersion);
  detail::put_u32(b, static_cast<std::uint32_t>(f.size()));
  for (const FmwTensor& t : f.tensors()) {
    detail::put_u16(b, static_cast<std::uint16_t>(t.name.size()));
    b.insert(b.end(), t.name.begin(), t.name.end());
    b.push_back(static_cast<std::uint8_t>(t.dtype));
    b.push_back(static_cast<std::uint8_t>(t.frac));
    b.push_back(static_cast<std::uint8_t>(t.dims.size()));
    for (std::uint32_t d : t.dims) detail::put_u32(b, d);
    b.insert(b.end(), t.bytes.begin(), t.bytes.end());
  }
  detail::put_u32(b, crc32_of(b));
  return b;
}

namespace detail {

class Reader {
 public:
  Reader(std::span<const std::uint8_t> b, std::size_t end) : b_(b), end_(end) {}

  std::span<const std::uint8_t> take(std::size_t n) {
    require(n <= end_ - pos_, Errc::truncated, "truncated file");
    const auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8() { return take(1)[0]; }
  std::uint16_t u16() {
    const auto s = take(2);
    return static_cast<std::uint16_t>(s[0] | (s[1] << 8));
  }
  std::uint32_t u32() {
    const auto s = take(4);
    return static_cast<std::uint32_t>(s[0]) | (static_cast<std::uint32_t>(s[1]) << 8) |
           (static_cast<std::uint32_t>(s[2]) << 16) | (static_cast<std::uint32_t>(s[3]) << 24);
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline FmwFile decode_fmw(std::span<const std::uint8_t> b) {
  require(b.size() >= 4 && std::equal(b.begin(), b.begin() + 4, std::begin(kFmwMagic)), Errc::bad_magic,
          "bad magic");
  require(b.size() >= kFmwEmptySize, Errc::truncated, "truncated file");
  detail::Reader r(b, b.size() - 4);
  r.take(4);
  const std::uint16_t version = r.u16();
  require(version == kFmwVersion, Errc::bad_version, "unsupported FMW version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  FmwFile f;
  for (std::uint32_t i = 0; i < count; ++i) {
    FmwTensor t;
    const auto name = r.take(r.u16());
    t.name.assign(name.begin(), name.end());
    const std::uint8_t dt = r.u8();
    require(dt <= 3, Errc::bad_dtype, "unknown dtype " + std::to_string(dt) + " for " + t.name);
    t.dtype = static_cast<DType>(dt);
    t.frac = static_cast<std::int8_t>(r.u8());
    const std::uint8_t ndim = r.u8();
    std::size_t n = 1;
    for (std::uint8_t k = 0; k < ndim; ++k) {
      t.dims.push_back(r.u32());
      require(t.dims.back() == 0 || n <= SIZE_MAX / t.dims.back(), Errc::truncated, "truncated file");
      n *= t.dims.back();
    }
    require(n <= SIZE_MAX / dtype_size(t.dtype), Errc::truncated, "truncated file");
    const auto payload = r.take(n * dtype_size(t.dtype));
    t.bytes.assign(payload.begin(), payload.end());
    f.add(std::move(t));
  }
  require(r.pos() == b.size() - 4, Errc::truncated, "trailing bytes before checksum");
  const std::size_t crc_at = b.size() - 4;
  const std::uint32_t stored = static_cast<std::uint32_t>(b[crc_at]) | (static_cast<std::uint32_t>(b[crc_at + 1]) << 8) |
                               (static_cast<std::uint32_t>(b[crc_at + 2]) << 16) |
                               (static_cast<std::uint32_t>(b[crc_at + 3]) << 24);
  require(stored == crc32_of(b.first(crc_at)), Errc::checksum_mismatch, "checksum mismatch");
  return f;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), Errc::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), Errc::io, "write failed for " + path.string());
}

inline void save_fmw(const FmwFile& f, const std::filesystem::path& path) { write_file_bytes(path, encode_fmw(f)); }

inline FmwFile load_fmw(const std::filesystem::path& path) { return decode_fmw(read_file_bytes(path)); }

}  // namespace fxm
