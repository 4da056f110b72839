// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "omniscan/errors.hpp"

namespace omniscan {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

inline std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;)
    strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// Dense row-major array. Rank 0 is a scalar holding one element.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : data_(1, T(0)) {}

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(checked_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_numel(shape_) != data_.size())
      throw ShapeError("tensor: shape " + shape_str(shape_) + " needs " +
                       std::to_string(shape_numel(shape_)) +
                       " elements, got " + std::to_string(data_.size()));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }
  static Tensor vector(std::initializer_list<T> v) {
    return Tensor(Shape{v.size()}, std::vector<T>(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size())
      throw ShapeError("tensor: axis " + std::to_string(axis) +
                       " out of range for shape " + shape_str(shape_));
    return shape_[axis];
  }
  std::size_t size() const { return data_.size(); }
  std::vector<std::size_t> strides() const { return row_major_strides(shape_); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  template <std::integral... I>
  T& operator()(I... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <std::integral... I>
  T operator()(I... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size())
      throw ShapeError("tensor: index rank mismatch for " + shape_str(shape_));
    std::size_t off = 0, axis = 0;
    for (std::size_t i : idx) {
      if (i >= shape_[axis])
        throw ShapeError("tensor: index out of range for " + shape_str(shape_));
      off = off * shape_[axis++] + i;
    }
    return off;
  }

  Tensor reshaped(Shape shape) const& {
    Tensor out(*this);
    out.reshape(std::move(shape));
    return out;
  }
  Tensor reshaped(Shape shape) && {
    reshape(std::move(shape));
    return std::move(*this);
  }
  void reshape(Shape shape) {
    if (checked_numel(shape) != data_.size())
      throw ShapeError("reshape: " + shape_str(shape_) + " -> " +
                       shape_str(shape));
    shape_ = std::move(shape);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  template <std::floating_point U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static std::size_t checked_numel(const Shape& shape) {
    for (std::size_t d : shape)
      if (d == 0)
        throw ShapeError("tensor: zero-length axis in " + shape_str(shape));
    return shape_numel(shape);
  }

  Shape shape_;
  std::vector<T> data_;
};

template <std::floating_point T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Little-endian binary primitives shared by the tensor and checkpoint formats.
namespace io {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

inline void put_f64(std::ostream& os, double v) {
  put_u64(os, std::bit_cast<std::uint64_t>(v));
}

inline void put_bytes(std::ostream& os, const std::string& s) {
  put_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void read_exact(std::istream& is, char* dst, std::size_t n,
                       const char* what) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw FormatError(std::string("truncated input while reading ") + what);
}

inline std::uint32_t get_u32(std::istream& is, const char* what = "u32") {
  unsigned char b[4];
  read_exact(is, reinterpret_cast<char*>(b), 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{b[i]} << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& is, const char* what = "u64") {
  unsigned char b[8];
  read_exact(is, reinterpret_cast<char*>(b), 8, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{b[i]} << (8 * i);
  return v;
}

inline double get_f64(std::istream& is) {
  return std::bit_cast<double>(get_u64(is, "f64"));
}

inline std::string get_bytes(std::istream& is, std::size_t limit,
                             const char* what) {
  const std::uint64_t n = get_u64(is, what);
  if (n > limit) throw FormatError(std::string("oversized block: ") + what);
  std::string s(n, '\0');
  read_exact(is, s.data(), n, what);
  return s;
}

}  // namespace io

inline constexpr char kTensorMagic[4] = {'O', 'A', 'T', 'N'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;

// "OATN", version u32, rank u32, shape u64 x rank, data f64 (row-major).
template <std::floating_point T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write(kTensorMagic, 4);
  io::put_u32(os, kTensorFormatVersion);
  io::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) io::put_u64(os, d);
  for (T v : t.data()) io::put_f64(os, static_cast<double>(v));
}

template <std::floating_point T = double>
Tensor<T> read_tensor(std::istream& is) {
  char magic[4];
  io::read_exact(is, magic, 4, "tensor magic");
  if (!std::equal(magic, magic + 4, kTensorMagic))
    throw FormatError("tensor: bad magic");
  const std::uint32_t version = io::get_u32(is, "tensor version");
  if (version != kTensorFormatVersion)
    throw FormatError("tensor: unsupported format version " +
                      std::to_string(version));
  const std::uint32_t rank = io::get_u32(is, "tensor rank");
  if (rank > 16) throw FormatError("tensor: implausible rank");
  Shape shape(rank);
  std::size_t n = 1;
  for (auto& d : shape) {
    d = io::get_u64(is, "tensor shape");
    if (d == 0 || d > (std::size_t{1} << 32))
      throw FormatError("tensor: invalid axis length");
    n *= d;
    if (n > (std::size_t{1} << 32)) throw FormatError("tensor: too large");
  }
  std::vector<T> data(n);
  for (auto& v : data) v = static_cast<T>(io::get_f64(is));
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace omniscan
