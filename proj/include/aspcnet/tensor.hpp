#ifndef ASPCNET_TENSOR_HPP
#define ASPCNET_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace aspcnet {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) {
    if (e <= 0) throw std::invalid_argument("tensor extent must be positive");
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

/// Row-major strides, innermost axis contiguous.
inline std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * static_cast<std::size_t>(s[i + 1]);
  return st;
}

/// Dense row-major tensor. Rank 0 with one element represents a scalar.
template <typename Scalar>
struct Tensor {
  Shape shape;
  std::vector<Scalar> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), Scalar(0)) {}
  Tensor(Shape s, Scalar fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, std::vector<Scalar> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape_numel(shape))
      throw std::invalid_argument("tensor data length does not match shape " + shape_str(shape));
  }

  static Tensor scalar(Scalar v) { return Tensor(Shape{}, std::vector<Scalar>{v}); }
  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor ones(Shape s) { return Tensor(std::move(s), Scalar(1)); }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int extent(int axis) const { return shape.at(static_cast<std::size_t>(axis)); }

  Scalar* ptr() { return data.data(); }
  const Scalar* ptr() const { return data.data(); }
  Scalar& operator[](std::size_t i) { return data[i]; }
  const Scalar& operator[](std::size_t i) const { return data[i]; }

  Scalar& at(std::initializer_list<int> idx) { return data[flat_index(idx)]; }
  const Scalar& at(std::initializer_list<int> idx) const { return data[flat_index(idx)]; }

  std::size_t flat_index(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != rank())
      throw std::invalid_argument("index rank mismatch for shape " + shape_str(shape));
    std::size_t flat = 0;
    int axis = 0;
    for (int i : idx) {
      if (i < 0 || i >= shape[static_cast<std::size_t>(axis)])
        throw std::out_of_range("tensor index out of range");
      flat = flat * static_cast<std::size_t>(shape[static_cast<std::size_t>(axis)]) +
             static_cast<std::size_t>(i);
      ++axis;
    }
    return flat;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (Scalar v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  void fill(Scalar v) { std::fill(data.begin(), data.end(), v); }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<Other>(data[i]);
    return out;
  }
};

template <typename Scalar>
void accumulate(Tensor<Scalar>& dst, const Tensor<Scalar>& src) {
  if (!dst.same_shape(src)) throw std::invalid_argument("accumulate: shape mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

template <typename Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  Scalar m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

/// Debug-mode numeric checks (NaN/Inf after primitives, zero denominators).
inline bool& debug_checks() {
  static bool enabled = false;
  return enabled;
}

}  // namespace aspcnet

#endif  // ASPCNET_TENSOR_HPP
