#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "realign/errors.hpp"

namespace realign {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

/// Dense row-major tensor of rank 0, 1 or 2.
///
/// Storage is always a row-major matrix: a scalar is 1x1 and a vector of
/// length n is 1xn. The logical shape is kept separately so that rank is
/// preserved through serialization and error messages.
template <typename Scalar>
class Tensor {
 public:
  using Matrix = RowMatrix<Scalar>;

  Tensor() : shape_{0}, data_(1, 0) {}

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    const auto [r, c] = storage_dims(shape_);
    data_ = Matrix::Zero(r, c);
  }

  Tensor(Shape shape, std::span<const Scalar> values) : Tensor(std::move(shape)) {
    if (static_cast<Index>(values.size()) != data_.size()) {
      throw DimensionError("tensor: " + std::to_string(values.size()) + " values for shape " +
                           shape_string(shape_));
    }
    std::copy(values.begin(), values.end(), data_.data());
  }

  /// Wraps a matrix as a rank-2 tensor.
  static Tensor from_matrix(Matrix m) {
    Tensor t;
    t.shape_ = {m.rows(), m.cols()};
    t.data_ = std::move(m);
    return t;
  }

  static Tensor scalar(Scalar v) {
    Tensor t(Shape{});
    t.data_(0, 0) = v;
    return t;
  }

  static Tensor vector(std::span<const Scalar> values) {
    return Tensor(Shape{static_cast<Index>(values.size())}, values);
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index numel() const { return data_.size(); }

  const Matrix& matrix() const { return data_; }
  Matrix& matrix() { return data_; }

  std::span<const Scalar> values() const { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<Scalar> values() { return {data_.data(), static_cast<std::size_t>(data_.size())}; }

  Scalar operator[](Index i) const { return data_.data()[i]; }
  Scalar& operator[](Index i) { return data_.data()[i]; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool flag) { requires_grad_ = flag; }

  const std::optional<Matrix>& grad() const { return grad_; }
  void set_grad(Matrix g) {
    if (g.rows() != data_.rows() || g.cols() != data_.cols()) {
      throw DimensionError("tensor: gradient shape differs from data shape " + shape_string(shape_));
    }
    grad_ = std::move(g);
  }
  void clear_grad() { grad_.reset(); }

  bool all_finite() const { return data_.allFinite(); }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    out.matrix() = data_.template cast<Other>();
    return out;
  }

 private:
  static std::pair<Index, Index> storage_dims(const Shape& shape) {
    for (Index d : shape) {
      if (d < 0) throw DimensionError("tensor: negative dimension in " + shape_string(shape));
    }
    switch (shape.size()) {
      case 0: return {1, 1};
      case 1: return {1, shape[0]};
      case 2: return {shape[0], shape[1]};
      default: throw DimensionError("tensor: rank > 2 is not supported, got " + shape_string(shape));
    }
  }

  Shape shape_;
  Matrix data_;
  bool requires_grad_ = false;
  std::optional<Matrix> grad_;
};

using Tensorf = Tensor<float>;

}  // namespace realign
