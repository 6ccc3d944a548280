#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "ognet/tensor.hpp"

namespace ognet {

enum class Mode { kTrain, kEval };

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a tape.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<Scalar>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Matrix<Scalar>& value() const;
  const Shape& shape() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool requires_grad() const;

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode computation tape.
///
/// Records are appended in execution order; `backward` walks them in exact
/// reverse order. Parameter leaves reference the caller's tensor and deposit
/// their gradient into it once the sweep is complete.
template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(Tape&, const Mat& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Mat value, Shape shape = {});
  /// Leaf bound to a tensor; gradients flow into it when it requires grad.
  Var<Scalar> parameter(Tensor<Scalar>& tensor);
  Var<Scalar> record(Mat value, Shape shape, std::initializer_list<Var<Scalar>> inputs,
                     BackwardFn backward);
  Var<Scalar> record(Mat value, Shape shape, std::span<const Var<Scalar>> inputs,
                     BackwardFn backward);

  /// Seeds a 1x1 root with 1 and propagates.
  void backward(const Var<Scalar>& root);
  void backward(const Var<Scalar>& root, const Mat& seed);

  const Mat& value(std::size_t id) const;
  const Shape& shape(std::size_t id) const { return nodes_[id].shape; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  /// Gradient reaching a record after `backward`; zeros if none arrived.
  Mat grad(const Var<Scalar>& v) const;
  void accumulate(std::size_t id, const Eigen::Ref<const Mat>& g);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    const Mat* external = nullptr;
    Tensor<Scalar>* bound = nullptr;
    Shape shape;
    Mat grad;
    bool needs_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
};

template <typename Scalar>
const Matrix<Scalar>& Var<Scalar>::value() const {
  return tape_->value(id_);
}
template <typename Scalar>
const Shape& Var<Scalar>::shape() const {
  return tape_->shape(id_);
}
template <typename Scalar>
bool Var<Scalar>::requires_grad() const {
  return tape_->needs_grad(id_);
}

/// Running statistics and hyper-parameters of a batch-normalization layer.
template <typename Scalar>
struct BatchNormState {
  Tensor<Scalar> running_mean;
  Tensor<Scalar> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(Index channels = 1)
      : running_mean(Shape{channels}), running_var(Shape{channels}) {
    running_var.data().setOnes();
  }
};

// ---------------------------------------------------------------------------
// Differentiable operations. Every op works on the 2-D storage view of its
// inputs: rows are points (or samples), columns are channels.
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b);

/// y = xW + b. `bias` may be omitted.
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight,
                   const std::optional<Var<Scalar>>& bias);

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar factor);

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x);

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x);

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x);

/// Inverted dropout; identity in eval mode.
template <typename Scalar>
Var<Scalar> dropout(const Var<Scalar>& x, double p, Mode mode, std::mt19937_64* rng);

template <typename Scalar>
Var<Scalar> concat(std::span<const Var<Scalar>> parts, int axis);

/// Columns [begin, begin+count).
template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& x, Index begin, Index count);

template <typename Scalar>
Var<Scalar> mean_reduce(const Var<Scalar>& x, int axis);

/// Max along `axis`; backward routes to the lowest-index maximum.
template <typename Scalar>
Var<Scalar> max_reduce(const Var<Scalar>& x, int axis);

/// Normalizes columns with batch statistics (train) or running statistics
/// (eval). With `row_weights`, row i counts `row_weights[i]` times in the batch
/// statistics, which equals normalizing the multiset where row i is repeated.
template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       BatchNormState<Scalar>& state, Mode mode,
                       const Eigen::VectorXd* row_weights = nullptr);

/// Mean over the batch of -log softmax(logits)[label].
template <typename Scalar>
Var<Scalar> softmax_cross_entropy(const Var<Scalar>& logits, std::span<const int> labels);

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& logits);

/// out.row(i) = x.row(indices[i]).
template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& x, std::span<const Index> indices);

/// out.row(i) = sum_j x.row(neighbors(i, j)).
template <typename Scalar>
Var<Scalar> neighbor_sum(const Var<Scalar>& x, const IndexMatrix& neighbors);

/// out(i, c) = max_j x(groups(i, j), c); ties go to the first member.
template <typename Scalar>
Var<Scalar> gather_max(const Var<Scalar>& x, const IndexMatrix& groups);

/// Mean over consecutive blocks of `segment` rows; optional per-row weights
/// turn it into sum(w*x)/sum(w) per block.
template <typename Scalar>
Var<Scalar> segment_mean(const Var<Scalar>& x, Index segment,
                         const Eigen::VectorXd* row_weights = nullptr);

template <typename Scalar>
Var<Scalar> segment_max(const Var<Scalar>& x, Index segment);

/// Multiplies every row of block s by gate.row(s).
template <typename Scalar>
Var<Scalar> scale_segments(const Var<Scalar>& x, const Var<Scalar>& gate, Index segment);

template <typename Scalar>
Var<Scalar> l2_normalize_rows(const Var<Scalar>& x);

/// x * x^T.
template <typename Scalar>
Var<Scalar> gram(const Var<Scalar>& x);

}  // namespace ognet
