#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"

namespace oodb {

using Shape = std::vector<int>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

// Dense row-major tensor. Activations are (N, C, H, W) or (N, F).
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T{}) : shape(std::move(s)), data(shape_size(shape), fill) {}

  std::size_t size() const { return data.size(); }
  int dim(std::size_t i) const { return shape.at(i); }
  int rank() const { return static_cast<int>(shape.size()); }
  bool empty() const { return data.empty(); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }
  std::span<T> span() { return data; }
  std::span<const T> span() const { return data; }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  void fill(T value) { std::fill(data.begin(), data.end(), value); }

  // Size of one batch item (product of all dims but the first).
  std::size_t item_size() const { return shape.empty() ? 0 : data.size() / static_cast<std::size_t>(shape[0]); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& in) {
  Tensor<To> out;
  out.shape = in.shape;
  out.data.assign(in.data.begin(), in.data.end());
  return out;
}

}  // namespace oodb
