#pragma once

#include <Eigen/Dense>

#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ognet/error.hpp"

namespace ognet {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// Row-major dense matrix; every tensor is stored as one of these.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using IndexMatrix = Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense n-dimensional value with an optional gradient accumulator.
///
/// Storage is a row-major matrix whose column count is the last dimension and
/// whose row count is the product of the leading dimensions, so an `[n,m,c]`
/// tensor is laid out exactly like an `[n*m, c]` one. A scalar has shape `{}`
/// and is stored 1x1.
template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : shape_(std::move(shape)), requires_grad_(requires_grad) {
    validate_shape();
    data_ = Matrix<Scalar>::Zero(leading(shape_), trailing(shape_));
  }

  Tensor(Shape shape, Matrix<Scalar> data, bool requires_grad = false)
      : shape_(std::move(shape)), data_(std::move(data)), requires_grad_(requires_grad) {
    validate_shape();
    if (data_.size() != shape_size(shape_)) {
      throw DimensionError("tensor data has " + std::to_string(data_.size()) +
                           " entries but shape " + to_string(shape_) + " needs " +
                           std::to_string(shape_size(shape_)));
    }
    data_.resize(leading(shape_), trailing(shape_));
  }

  static Tensor from_matrix(Matrix<Scalar> m, bool requires_grad = false) {
    Shape shape{m.rows(), m.cols()};
    return Tensor(std::move(shape), std::move(m), requires_grad);
  }

  const Shape& shape() const { return shape_; }
  Index size() const { return data_.size(); }
  Index rows() const { return data_.rows(); }
  Index cols() const { return data_.cols(); }

  const Matrix<Scalar>& data() const { return data_; }
  Matrix<Scalar>& data() { return data_; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  bool has_grad() const { return grad_.size() == data_.size() && grad_.size() > 0; }
  const Matrix<Scalar>& grad() const { return grad_; }
  Matrix<Scalar>& grad() { return grad_; }

  void zero_grad() { grad_ = Matrix<Scalar>::Zero(data_.rows(), data_.cols()); }

  /// Backward passes add into the accumulator; they never overwrite it.
  void accumulate_grad(const Eigen::Ref<const Matrix<Scalar>>& g) {
    if (g.rows() != data_.rows() || g.cols() != data_.cols()) {
      throw DimensionError("gradient shape " + std::to_string(g.rows()) + "x" +
                           std::to_string(g.cols()) + " does not match tensor " +
                           to_string(shape_));
    }
    if (!has_grad()) zero_grad();
    grad_ += g;
  }

 private:
  static Index leading(const Shape& s) {
    Index n = 1;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) n *= s[i];
    return n;
  }
  static Index trailing(const Shape& s) { return s.empty() ? 1 : s.back(); }

  void validate_shape() const {
    for (Index d : shape_) {
      if (d <= 0) throw DimensionError("tensor shape " + to_string(shape_) + " has a non-positive size");
    }
  }

  Shape shape_;
  Matrix<Scalar> data_;
  Matrix<Scalar> grad_;
  bool requires_grad_ = false;
};

/// A tensor owned by a layer, addressed by a dotted name.
template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar>* tensor;
};

template <typename Scalar>
using TensorList = std::vector<NamedTensor<Scalar>>;

}  // namespace ognet
