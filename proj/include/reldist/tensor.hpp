#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "reldist/errors.hpp"

namespace reldist {

/// Dense row-major tensor. Rank is dynamic; most code uses rank 1-4.
template <typename T>
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(count(shape)), T(0));
  }
  Tensor(std::vector<int64_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != count(shape))
      throw DimensionError("tensor data size " + std::to_string(data.size()) +
                           " does not match shape " + shape_str());
  }

  static int64_t count(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int64_t> s, T v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

  T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // Flat offsets for the common ranks.
  int64_t idx2(int64_t i, int64_t j) const { return i * shape[1] + j; }
  int64_t idx3(int64_t a, int64_t b, int64_t c) const { return (a * shape[1] + b) * shape[2] + c; }
  int64_t idx4(int64_t a, int64_t b, int64_t c, int64_t d) const {
    return ((a * shape[1] + b) * shape[2] + c) * shape[3] + d;
  }

  T& at2(int64_t i, int64_t j) { return data[static_cast<size_t>(idx2(i, j))]; }
  const T& at2(int64_t i, int64_t j) const { return data[static_cast<size_t>(idx2(i, j))]; }
  T& at3(int64_t a, int64_t b, int64_t c) { return data[static_cast<size_t>(idx3(a, b, c))]; }
  const T& at3(int64_t a, int64_t b, int64_t c) const { return data[static_cast<size_t>(idx3(a, b, c))]; }
  T& at4(int64_t a, int64_t b, int64_t c, int64_t d) { return data[static_cast<size_t>(idx4(a, b, c, d))]; }
  const T& at4(int64_t a, int64_t b, int64_t c, int64_t d) const {
    return data[static_cast<size_t>(idx4(a, b, c, d))];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (const T& v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* where) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(where) + ": shape " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace reldist
