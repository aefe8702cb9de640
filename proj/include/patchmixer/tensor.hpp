#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchmixer/rng.hpp"

namespace pm {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense n-dimensional array of floats, row-major, with shape metadata.
// The scalar type is the dtype: Tensor<float> for training, Tensor<double>
// for the finite-difference suites.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;

  explicit Tensor(Shape s) : shape(std::move(s)) {
    check_dims();
    data.assign(static_cast<std::size_t>(numel()), T(0));
  }

  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    check_dims();
    if (static_cast<Index>(data.size()) != numel()) {
      throw std::invalid_argument("tensor: " + std::to_string(data.size()) +
                                  " values do not fill shape " + shape_str(shape));
    }
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

  static Tensor full(Shape s, T value) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), value);
    return t;
  }

  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  // Uniform in [-bound, bound]; used for fan-in weight init.
  static Tensor uniform(Shape s, T bound, Rng& rng) {
    Tensor t(std::move(s));
    for (T& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
  }

  Index numel() const { return shape_numel(shape); }
  int rank() const { return static_cast<int>(shape.size()); }
  Index dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  T& operator[](Index i) { return data[static_cast<std::size_t>(i)]; }
  const T& operator[](Index i) const { return data[static_cast<std::size_t>(i)]; }

  T& at2(Index i, Index j) { return data[static_cast<std::size_t>(i * shape[1] + j)]; }
  const T& at2(Index i, Index j) const {
    return data[static_cast<std::size_t>(i * shape[1] + j)];
  }
  T& at3(Index i, Index j, Index k) {
    return data[static_cast<std::size_t>((i * shape[1] + j) * shape[2] + k)];
  }
  const T& at3(Index i, Index j, Index k) const {
    return data[static_cast<std::size_t>((i * shape[1] + j) * shape[2] + k)];
  }

  void fill(T value) { std::fill(data.begin(), data.end(), value); }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  using MatrixType =
      Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapType = Eigen::Map<MatrixType>;
  using ConstMapType = Eigen::Map<const MatrixType>;

  // View the buffer as a rows x cols row-major matrix (no copy).
  MapType matrix(Index rows, Index cols) {
    return MapType(data.data(), rows, cols);
  }
  ConstMapType matrix(Index rows, Index cols) const {
    return ConstMapType(data.data(), rows, cols);
  }

  Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> array() {
    return {data.data(), static_cast<Eigen::Index>(data.size())};
  }
  Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> array() const {
    return {data.data(), static_cast<Eigen::Index>(data.size())};
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

 private:
  void check_dims() const {
    for (Index d : shape) {
      if (d <= 0) {
        throw std::invalid_argument("tensor: non-positive dimension in " +
                                    shape_str(shape));
      }
    }
  }
};

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
}

}  // namespace pm
