#pragma once

// Little-endian binary helpers, PNG output and the small tensor file formats
// shared by the pipeline stages.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include "geoworld/errors.hpp"
#include "geoworld/numerics.hpp"

namespace geoworld::io {

class ByteWriter {
 public:
  void magic(std::string_view m) { buf_.append(m); }
  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void f64s(std::span<const double> vs) {
    for (double v : vs) f64(v);
  }
  /// Length-prefixed (u64) array of f64.
  void array(std::span<const double> vs) {
    u64(vs.size());
    f64s(vs);
  }
  const std::string& bytes() const { return buf_; }

 private:
  template <class T>
  void put(T v) {
    if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
    char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    buf_.append(raw, sizeof(T));
  }
  template <class T>
  static T byteswap(T v) {
    T out = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) out = (out << 8) | ((v >> (8 * i)) & 0xFF);
    return out;
  }
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string data, std::string source = "<memory>")
      : data_(std::move(data)), source_(std::move(source)) {}

  void expect_magic(std::string_view m) {
    need(m.size());
    if (std::string_view(data_).substr(pos_, m.size()) != m) {
      throw FormatError(source_ + ": bad magic, expected '" + std::string(m) + "'");
    }
    pos_ += m.size();
  }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  std::vector<double> f64s(std::size_t n) {
    std::vector<double> out(n);
    for (auto& v : out) v = f64();
    return out;
  }
  std::vector<double> array() {
    const std::uint64_t n = u64();
    if (n > (data_.size() - pos_) / 8) throw FormatError(source_ + ": array length exceeds file size");
    return f64s(static_cast<std::size_t>(n));
  }
  bool at_end() const { return pos_ == data_.size(); }
  const std::string& source() const { return source_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw FormatError(source_ + ": truncated file");
  }
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    if constexpr (std::endian::native == std::endian::big) {
      T out = 0;
      for (std::size_t i = 0; i < sizeof(T); ++i) out = (out << 8) | ((v >> (8 * i)) & 0xFF);
      v = out;
    }
    return v;
  }
  std::string data_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::uint64_t hash_bytes(std::string_view bytes) {
  return fnv1a64(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()));
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// PNG (8-bit RGB, zlib-compressed, no filtering)
// ---------------------------------------------------------------------------

/// Encodes a [3, H, W] image with values in [0, 1] as an 8-bit RGB PNG.
inline std::string encode_png(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw InvalidShape("encode_png expects [3,H,W]");
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::string raw;
  raw.reserve(h * (1 + 3 * w));
  for (std::size_t y = 0; y < h; ++y) {
    raw.push_back(0);  // filter: none
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(image[(c * h + y) * w + x], 0.0, 1.0);
        raw.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::string z(zlen, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &zlen, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 6) != Z_OK) {
    throw IoError("PNG compression failed");
  }
  z.resize(zlen);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  auto be32 = [](std::string& s, std::uint32_t v) {
    for (int i = 3; i >= 0; --i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  };
  auto chunk = [&](const char* type, const std::string& payload) {
    be32(out, static_cast<std::uint32_t>(payload.size()));
    std::string body(type, 4);
    body += payload;
    out += body;
    be32(out, static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
  };
  std::string ihdr;
  be32(ihdr, static_cast<std::uint32_t>(w));
  be32(ihdr, static_cast<std::uint32_t>(h));
  ihdr += std::string("\x08\x02\x00\x00\x00", 5);  // 8-bit, RGB, deflate, no filter, no interlace
  chunk("IHDR", ihdr);
  chunk("IDAT", z);
  chunk("IEND", "");
  return out;
}

// ---------------------------------------------------------------------------
// Depth sidecar: "GWD1", u32 H, u32 W, H*W f64
// ---------------------------------------------------------------------------

inline std::string encode_depth(const Tensor& depth) {
  if (depth.rank() != 2) throw InvalidShape("depth map must be [H,W]");
  ByteWriter w;
  w.magic("GWD1");
  w.u32(static_cast<std::uint32_t>(depth.dim(0)));
  w.u32(static_cast<std::uint32_t>(depth.dim(1)));
  w.f64s(depth.data());
  return w.bytes();
}

inline Tensor decode_depth(std::string bytes, const std::string& source = "<depth>") {
  ByteReader r(std::move(bytes), source);
  r.expect_magic("GWD1");
  const std::size_t h = r.u32(), w = r.u32();
  Tensor d({h, w}, r.f64s(h * w));
  if (!r.at_end()) throw FormatError(source + ": trailing bytes");
  return d;
}

// ---------------------------------------------------------------------------
// Generic tensor file: "GWTN", u32 rank, rank x u64 dims, f64 data
// ---------------------------------------------------------------------------

inline std::string encode_tensor(const Tensor& t) {
  ByteWriter w;
  w.magic("GWTN");
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u64(d);
  w.f64s(t.data());
  return w.bytes();
}

inline Tensor decode_tensor(std::string bytes, const std::string& source = "<tensor>") {
  ByteReader r(std::move(bytes), source);
  r.expect_magic("GWTN");
  const std::uint32_t rank = r.u32();
  if (rank > 8) throw FormatError(source + ": implausible tensor rank");
  Shape s(rank);
  for (auto& d : s) d = r.u64();
  Tensor t(s, r.f64s(shape_size(s)));
  if (!r.at_end()) throw FormatError(source + ": trailing bytes");
  return t;
}

inline void save_tensor(const std::filesystem::path& p, const Tensor& t) { write_file(p, encode_tensor(t)); }
inline Tensor load_tensor(const std::filesystem::path& p) { return decode_tensor(read_file(p), p.string()); }

/// Formats a double for CSV output so re-runs are byte-identical.
inline std::string csv_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace geoworld::io
