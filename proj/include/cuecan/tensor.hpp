#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cuecan/error.hpp"

namespace cuecan {

// (batch, height, width, channels); data is row-major in that order.
struct Shape {
  std::size_t b = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t c = 0;

  std::size_t size() const { return b * h * w * c; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '(' << b << ',' << h << ',' << w << ',' << c << ')';
    return os.str();
  }
};

class Tensor4 {
 public:
  Tensor4() = default;
  explicit Tensor4(Shape shape, double fill = 0.0) : shape_(shape), data_(shape.size(), fill) {}
  Tensor4(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(std::size_t b, std::size_t y, std::size_t x, std::size_t ch) const {
    return ((b * shape_.h + y) * shape_.w + x) * shape_.c + ch;
  }
  double& at(std::size_t b, std::size_t y, std::size_t x, std::size_t ch) {
    return data_[offset(b, y, x, ch)];
  }
  double at(std::size_t b, std::size_t y, std::size_t x, std::size_t ch) const {
    return data_[offset(b, y, x, ch)];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  bool operator==(const Tensor4&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
}

// ---------------------------------------------------------------------------
// Portable tensor file.
//
//   "CUET0001"                      8-byte magic
//   u32 little-endian n             header length in bytes
//   n bytes UTF-8                   "dtype=f64;dims=B,H,W,C\n"
//   raw little-endian payload       B*H*W*C values, (B,H,W,C) row-major
// ---------------------------------------------------------------------------

enum class Dtype { F64, F32 };

inline constexpr char kTensorMagic[8] = {'C', 'U', 'E', 'T', '0', '0', '0', '1'};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b, 8);
}

inline std::uint64_t get_le(const unsigned char* b, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor4& t, Dtype dtype = Dtype::F64) {
  const Shape& s = t.shape();
  std::ostringstream hdr;
  hdr << "dtype=" << (dtype == Dtype::F64 ? "f64" : "f32") << ";dims=" << s.b << ',' << s.h << ','
      << s.w << ',' << s.c << '\n';
  const std::string header = hdr.str();
  os.write(kTensorMagic, 8);
  detail::put_u32(os, static_cast<std::uint32_t>(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (double v : t.data()) {
    if (dtype == Dtype::F64) {
      detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
    } else {
      detail::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  if (!os) throw DataError("tensor write failed");
}

// Reads one tensor record. `origin` names the source in error messages and
// `base` is the byte offset of the record within that source.
inline Tensor4 read_tensor(std::istream& is, const std::string& origin = "<stream>",
                           std::uint64_t base = 0) {
  auto fail = [&](std::uint64_t off, const std::string& msg) -> DataError {
    return DataError(origin + ": byte offset " + std::to_string(base + off) + ": " + msg);
  };
  char magic[8];
  if (!is.read(magic, 8)) throw fail(0, "truncated magic");
  for (int i = 0; i < 8; ++i) {
    if (magic[i] != kTensorMagic[i]) throw fail(static_cast<std::uint64_t>(i), "bad magic");
  }
  unsigned char lb[4];
  if (!is.read(reinterpret_cast<char*>(lb), 4)) throw fail(8, "truncated header length");
  const auto hlen = static_cast<std::size_t>(detail::get_le(lb, 4));
  if (hlen == 0 || hlen > 4096) throw fail(8, "implausible header length");
  std::string header(hlen, '\0');
  if (!is.read(header.data(), static_cast<std::streamsize>(hlen))) throw fail(12, "truncated header");
  if (!header.empty() && header.back() == '\n') header.pop_back();

  Dtype dtype;
  if (header.rfind("dtype=f64;dims=", 0) == 0) {
    dtype = Dtype::F64;
  } else if (header.rfind("dtype=f32;dims=", 0) == 0) {
    dtype = Dtype::F32;
  } else {
    throw fail(12, "unrecognized header '" + header + "'");
  }
  Shape s;
  {
    std::istringstream ds(header.substr(15));
    char c1 = 0, c2 = 0, c3 = 0;
    if (!(ds >> s.b >> c1 >> s.h >> c2 >> s.w >> c3 >> s.c) || c1 != ',' || c2 != ',' || c3 != ',') {
      throw fail(12, "bad dims in header '" + header + "'");
    }
  }
  const std::uint64_t payload = 12 + hlen;
  const int width = dtype == Dtype::F64 ? 8 : 4;
  std::vector<double> data(s.size());
  std::vector<unsigned char> buf(s.size() * static_cast<std::size_t>(width));
  if (!buf.empty() && !is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
    throw fail(payload, "truncated payload");
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::uint64_t bits = detail::get_le(buf.data() + i * static_cast<std::size_t>(width), width);
    data[i] = dtype == Dtype::F64 ? std::bit_cast<double>(bits)
                                  : static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(bits)));
  }
  return Tensor4(s, std::move(data));
}

inline void save_tensor(const std::string& path, const Tensor4& t, Dtype dtype = Dtype::F64) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError(path + ": cannot open for writing");
  write_tensor(os, t, dtype);
}

inline Tensor4 load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError(path + ": cannot open");
  return read_tensor(is, path);
}

}  // namespace cuecan
