// Dense float32 tensor with an optional gradient buffer.
//
// Shapes are ordered lists of positive extents; data is flat row-major.
// The gradient buffer is absent until ensure_grad() allocates it; gradient
// accumulation is additive and zero_grad() is the only reset.
#pragma once

#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fvlab {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
template <class... A>
std::string cat(A&&... a) {
  std::ostringstream os;
  (os << ... << std::forward<A>(a));
  return os.str();
}
}  // namespace detail

template <class... A>
[[noreturn]] void fail(A&&... a) {
  throw Error(detail::cat(std::forward<A>(a)...));
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty means "no gradient buffer"

  Tensor() = default;

  static std::int64_t numel_of(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int e : shape) {
      if (e <= 0) fail("tensor: non-positive extent ", e, " in shape ", shape_str(shape));
      n *= e;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> shape) {
    Tensor t;
    const auto n = numel_of(shape);
    t.shape = std::move(shape);
    t.data.assign(static_cast<std::size_t>(n), 0.0f);
    return t;
  }

  static Tensor full(std::vector<int> shape, float v) {
    Tensor t = zeros(std::move(shape));
    for (auto& x : t.data) x = v;
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<float> values) {
    const auto n = numel_of(shape);
    if (n != static_cast<std::int64_t>(values.size()))
      fail("tensor: shape ", shape_str(shape), " implies ", n, " values, got ", values.size());
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::move(values);
    return t;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

  int dim(std::size_t i) const {
    if (i >= shape.size()) fail("tensor: dim ", i, " out of range for shape ", shape_str(shape));
    return shape[i];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  // Row-major element access for tests and small code paths.
  float& at(std::initializer_list<int> idx) {
    return data[static_cast<std::size_t>(offset(idx))];
  }
  float at(std::initializer_list<int> idx) const {
    return data[static_cast<std::size_t>(offset(idx))];
  }

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
  }
  void zero_grad() {
    for (auto& g : grad) g = 0.0f;
  }

 private:
  std::int64_t offset(std::initializer_list<int> idx) const {
    if (idx.size() != shape.size())
      fail("tensor: index rank ", idx.size(), " != shape rank ", shape.size());
    std::int64_t off = 0;
    std::size_t d = 0;
    for (int i : idx) {
      off = off * shape[d] + i;
      ++d;
    }
    return off;
  }
};

}  // namespace fvlab
