#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ognet/autodiff.hpp"
#include "ognet/geometry.hpp"

namespace ognet {

/// Fully connected layer, y = xW + b, with PyTorch's default uniform init.
template <typename Scalar>
class Linear {
 public:
  Linear() = default;
  Linear(Index in, Index out, bool bias, std::mt19937_64& rng);

  Var<Scalar> operator()(const Var<Scalar>& x);

  Index in_features() const { return weight_.shape()[0]; }
  Index out_features() const { return weight_.shape()[1]; }
  Tensor<Scalar>& weight() { return weight_; }
  std::optional<Tensor<Scalar>>& bias() { return bias_; }

  void collect(TensorList<Scalar>& params, const std::string& prefix);

 private:
  Tensor<Scalar> weight_;
  std::optional<Tensor<Scalar>> bias_;
};

template <typename Scalar>
class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(Index channels);

  Var<Scalar> operator()(const Var<Scalar>& x, Mode mode, const Eigen::VectorXd* row_weights = nullptr);

  Tensor<Scalar>& gamma() { return gamma_; }
  Tensor<Scalar>& beta() { return beta_; }
  BatchNormState<Scalar>& state() { return state_; }

  void collect(TensorList<Scalar>& params, const std::string& prefix);
  void collect_buffers(TensorList<Scalar>& buffers, const std::string& prefix);

 private:
  Tensor<Scalar> gamma_;
  Tensor<Scalar> beta_;
  BatchNormState<Scalar> state_;
};

/// How the graph convolution combines neighbor messages.
enum class Aggregator { kSum, kMax };

/// Which vectors the KNN graph of a module is built on.
enum class GraphKeys { kPosition, kAppearancePosition };

/// Graph convolution over a precomputed neighbor table, without BN/ReLU.
///
/// kSum:  x'_i = sum_{j in N(i)} (x_i W_self + x_j W_nbr) = k x_i W_self + (sum_j x_j) W_nbr
/// kMax:  x'_i = x_i W_self + max_{j in N(i)} x_j W_nbr
template <typename Scalar>
Var<Scalar> dynamic_graph_conv(const Var<Scalar>& x, const IndexMatrix& neighbors, const Var<Scalar>& theta_self,
                               const Var<Scalar>& theta_neighbor, Aggregator aggregator = Aggregator::kSum);

/// Dynamic graph convolution followed by BN and ReLU. With the graph disabled
/// it degenerates to a single linear map (the k=1 ablation).
template <typename Scalar>
class GraphConv {
 public:
  GraphConv() = default;
  GraphConv(Index in, Index out, bool use_graph, Aggregator aggregator, std::mt19937_64& rng);

  /// `neighbors` holds global row indices; it is ignored when the graph is off.
  Var<Scalar> operator()(const Var<Scalar>& x, const IndexMatrix& neighbors, Mode mode);

  bool uses_graph() const { return use_graph_; }
  Tensor<Scalar>& theta_self() { return theta_self_; }
  Tensor<Scalar>& theta_neighbor() { return theta_neighbor_; }
  BatchNorm<Scalar>& bn() { return bn_; }

  void collect(TensorList<Scalar>& params, const std::string& prefix);
  void collect_buffers(TensorList<Scalar>& buffers, const std::string& prefix);

 private:
  Tensor<Scalar> theta_self_;
  Tensor<Scalar> theta_neighbor_;
  BatchNorm<Scalar> bn_;
  bool use_graph_ = true;
  Aggregator aggregator_ = Aggregator::kSum;
};

/// Squeeze-excitation: per-sample channel gate sigmoid(W2 relu(W1 mean(x))).
template <typename Scalar>
class SeBlock {
 public:
  SeBlock() = default;
  SeBlock(Index channels, Index reduction, std::mt19937_64& rng);

  /// Rows come in consecutive blocks of `segment`, one block per sample.
  /// With `row_weights` the squeeze is the weighted mean of each block.
  Var<Scalar> operator()(const Var<Scalar>& x, Index segment, const Eigen::VectorXd* row_weights = nullptr);
  Var<Scalar> gate(const Var<Scalar>& x, Index segment, const Eigen::VectorXd* row_weights = nullptr);

  Linear<Scalar>& squeeze() { return fc1_; }
  Linear<Scalar>& excite() { return fc2_; }

  void collect(TensorList<Scalar>& params, const std::string& prefix);

 private:
  Linear<Scalar> fc1_;
  Linear<Scalar> fc2_;
};

/// Multiplicity of every row in a gather table, as BN/SE row weights.
Eigen::VectorXd gather_counts(const IndexMatrix& groups, Index rows);

/// One grouping-r branch: group, per-member MLP (linear-BN-ReLU, linear-BN),
/// SE, then max over the group members.
///
/// The member MLP is evaluated once per source point and the statistics of
/// BN/SE are weighted by how often each point is gathered, which equals
/// running the MLP over the duplicated m x r members.
template <typename Scalar>
class GroupingBranch {
 public:
  GroupingBranch() = default;
  GroupingBranch(Index channels, Index hidden, bool use_se, Index se_reduction, std::mt19937_64& rng);

  /// `groups` is an N x r table of global row indices; `segment` is the number
  /// of points per sample.
  Var<Scalar> operator()(const Var<Scalar>& x, const IndexMatrix& groups, Index segment, Mode mode);

  Linear<Scalar>& first() { return lin1_; }
  Linear<Scalar>& second() { return lin2_; }
  BatchNorm<Scalar>& first_bn() { return bn1_; }
  BatchNorm<Scalar>& second_bn() { return bn2_; }
  std::optional<SeBlock<Scalar>>& se() { return se_; }

  void collect(TensorList<Scalar>& params, const std::string& prefix);
  void collect_buffers(TensorList<Scalar>& buffers, const std::string& prefix);

 private:
  Linear<Scalar> lin1_;
  BatchNorm<Scalar> bn1_;
  Linear<Scalar> lin2_;
  BatchNorm<Scalar> bn2_;
  std::optional<SeBlock<Scalar>> se_;
};

struct OmniScaleConfig {
  Index in_channels = 3;
  Index out_channels = 64;
  /// Points kept per sample after farthest point sampling; 0 keeps all.
  Index downsample_to = 0;
  Index k = 20;
  std::vector<Index> rates{8, 16, 32};
  bool shortcut = false;
  bool use_se = true;
  bool use_graph_conv = true;
  GraphKeys graph_keys = GraphKeys::kPosition;
  Aggregator aggregator = Aggregator::kSum;
  Index se_reduction = 4;
  /// Hidden width of the branch MLP is out_channels / bottleneck_divisor.
  Index bottleneck_divisor = 4;

  void validate() const;
};

/// A batch of equally-sized point sets: features and positions of `batch`
/// samples stacked as consecutive blocks of `points` rows.
template <typename Scalar>
struct PointBatch {
  Var<Scalar> features;
  Matrix<double> positions;
  Index batch = 1;
  Index points = 0;
};

/// Graph topology and sampling decisions of one module forward, for tests and
/// instrumentation.
struct ModuleTrace {
  Index points_in = 0;
  Index points_out = 0;
  Index channels_in = 0;
  Index channels_out = 0;
  IndexMatrix graph;                  // global neighbor table (empty when the graph is off)
  std::vector<Index> selected;        // global rows kept by FPS (empty without downsampling)
  std::vector<IndexMatrix> groups;    // one global table per rate
};

/// Graph convolution, optional FPS downsampling, three grouping branches
/// summed, optional identity shortcut.
template <typename Scalar>
class OmniScaleModule {
 public:
  OmniScaleModule() = default;
  OmniScaleModule(OmniScaleConfig config, std::mt19937_64& rng);

  PointBatch<Scalar> operator()(const PointBatch<Scalar>& in, Mode mode, ModuleTrace* trace = nullptr);

  const OmniScaleConfig& config() const { return config_; }
  GraphConv<Scalar>& graph_conv() { return conv_; }
  std::vector<GroupingBranch<Scalar>>& branches() { return branches_; }
  bool shortcut_active() const;

  void collect(TensorList<Scalar>& params, const std::string& prefix);
  void collect_buffers(TensorList<Scalar>& buffers, const std::string& prefix);

 private:
  OmniScaleConfig config_;
  GraphConv<Scalar> conv_;
  std::vector<GroupingBranch<Scalar>> branches_;
};

/// Keys of a module graph for one sample: positions, or features ++ positions.
template <typename Scalar>
Matrix<double> graph_keys(const Matrix<Scalar>& features, const Matrix<double>& positions, GraphKeys mode);

/// Per-sample KNN graphs over consecutive blocks, as one global table.
IndexMatrix batched_knn(const Matrix<double>& keys, Index batch, Index points, Index k);
/// Per-sample r-neighborhoods over consecutive blocks, as one global table.
IndexMatrix batched_groups(const Matrix<double>& positions, Index batch, Index points, Index r);

}  // namespace ognet
