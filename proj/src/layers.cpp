#include "ognet/layers.hpp"

#include <algorithm>
#include <cmath>

namespace ognet {

namespace {

template <typename Scalar>
Tensor<Scalar> uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  Tensor<Scalar> t(std::move(shape), true);
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index i = 0; i < t.size(); ++i) t.data().data()[i] = static_cast<Scalar>(dist(rng));
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename Scalar>
Linear<Scalar>::Linear(Index in, Index out, bool bias, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight_ = uniform_tensor<Scalar>({in, out}, bound, rng);
  if (bias) bias_ = uniform_tensor<Scalar>({out}, bound, rng);
}

template <typename Scalar>
Var<Scalar> Linear<Scalar>::operator()(const Var<Scalar>& x) {
  auto& tape = x.tape();
  std::optional<Var<Scalar>> b;
  if (bias_) b = tape.parameter(*bias_);
  return linear(x, tape.parameter(weight_), b);
}

template <typename Scalar>
void Linear<Scalar>::collect(TensorList<Scalar>& params, const std::string& prefix) {
  params.push_back({prefix + ".weight", &weight_});
  if (bias_) params.push_back({prefix + ".bias", &*bias_});
}

// ---------------------------------------------------------------------------

template <typename Scalar>
BatchNorm<Scalar>::BatchNorm(Index channels)
    : gamma_(Shape{channels}, true), beta_(Shape{channels}, true), state_(channels) {
  gamma_.data().setOnes();
}

template <typename Scalar>
Var<Scalar> BatchNorm<Scalar>::operator()(const Var<Scalar>& x, Mode mode, const Eigen::VectorXd* row_weights) {
  auto& tape = x.tape();
  return batch_norm(x, tape.parameter(gamma_), tape.parameter(beta_), state_, mode, row_weights);
}

template <typename Scalar>
void BatchNorm<Scalar>::collect(TensorList<Scalar>& params, const std::string& prefix) {
  params.push_back({prefix + ".gamma", &gamma_});
  params.push_back({prefix + ".beta", &beta_});
}

template <typename Scalar>
void BatchNorm<Scalar>::collect_buffers(TensorList<Scalar>& buffers, const std::string& prefix) {
  buffers.push_back({prefix + ".running_mean", &state_.running_mean});
  buffers.push_back({prefix + ".running_var", &state_.running_var});
}

// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> dynamic_graph_conv(const Var<Scalar>& x, const IndexMatrix& neighbors, const Var<Scalar>& theta_self,
                               const Var<Scalar>& theta_neighbor, Aggregator aggregator) {
  if (neighbors.rows() != x.rows()) {
    throw DimensionError("dynamic_graph_conv: graph over " + std::to_string(neighbors.rows()) + " points, features have " +
                         std::to_string(x.rows()) + " rows");
  }
  const Index k = neighbors.cols();
  if (aggregator == Aggregator::kSum) {
    auto self_term = scale(matmul(x, theta_self), static_cast<Scalar>(k));
    return add(self_term, matmul(neighbor_sum(x, neighbors), theta_neighbor));
  }
  return add(matmul(x, theta_self), gather_max(matmul(x, theta_neighbor), neighbors));
}

template <typename Scalar>
GraphConv<Scalar>::GraphConv(Index in, Index out, bool use_graph, Aggregator aggregator, std::mt19937_64& rng)
    : bn_(out), use_graph_(use_graph), aggregator_(aggregator) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  theta_self_ = uniform_tensor<Scalar>({in, out}, bound, rng);
  if (use_graph_) theta_neighbor_ = uniform_tensor<Scalar>({in, out}, bound, rng);
}

template <typename Scalar>
Var<Scalar> GraphConv<Scalar>::operator()(const Var<Scalar>& x, const IndexMatrix& neighbors, Mode mode) {
  auto& tape = x.tape();
  Var<Scalar> y;
  if (use_graph_) {
    y = dynamic_graph_conv(x, neighbors, tape.parameter(theta_self_), tape.parameter(theta_neighbor_), aggregator_);
  } else {
    y = matmul(x, tape.parameter(theta_self_));
  }
  return relu(bn_(y, mode));
}

template <typename Scalar>
void GraphConv<Scalar>::collect(TensorList<Scalar>& params, const std::string& prefix) {
  params.push_back({prefix + ".theta_self", &theta_self_});
  if (use_graph_) params.push_back({prefix + ".theta_neighbor", &theta_neighbor_});
  bn_.collect(params, prefix + ".bn");
}

template <typename Scalar>
void GraphConv<Scalar>::collect_buffers(TensorList<Scalar>& buffers, const std::string& prefix) {
  bn_.collect_buffers(buffers, prefix + ".bn");
}

// ---------------------------------------------------------------------------

template <typename Scalar>
SeBlock<Scalar>::SeBlock(Index channels, Index reduction, std::mt19937_64& rng) {
  if (reduction < 1 || channels % reduction != 0) {
    throw ConfigError("se_block: " + std::to_string(channels) + " channels not divisible by reduction " +
                      std::to_string(reduction));
  }
  fc1_ = Linear<Scalar>(channels, channels / reduction, true, rng);
  fc2_ = Linear<Scalar>(channels / reduction, channels, true, rng);
}

template <typename Scalar>
Var<Scalar> SeBlock<Scalar>::gate(const Var<Scalar>& x, Index segment, const Eigen::VectorXd* row_weights) {
  return sigmoid(fc2_(relu(fc1_(segment_mean(x, segment, row_weights)))));
}

template <typename Scalar>
Var<Scalar> SeBlock<Scalar>::operator()(const Var<Scalar>& x, Index segment, const Eigen::VectorXd* row_weights) {
  return scale_segments(x, gate(x, segment, row_weights), segment);
}

template <typename Scalar>
void SeBlock<Scalar>::collect(TensorList<Scalar>& params, const std::string& prefix) {
  fc1_.collect(params, prefix + ".fc1");
  fc2_.collect(params, prefix + ".fc2");
}

// ---------------------------------------------------------------------------

Eigen::VectorXd gather_counts(const IndexMatrix& groups, Index rows) {
  Eigen::VectorXd w = Eigen::VectorXd::Zero(rows);
  for (Index i = 0; i < groups.size(); ++i) w(groups.data()[i]) += 1.0;
  return w;
}

template <typename Scalar>
GroupingBranch<Scalar>::GroupingBranch(Index channels, Index hidden, bool use_se, Index se_reduction,
                                       std::mt19937_64& rng)
    : lin1_(channels, hidden, true, rng), bn1_(hidden), lin2_(hidden, channels, true, rng), bn2_(channels) {
  if (use_se) se_.emplace(channels, se_reduction, rng);
}

template <typename Scalar>
Var<Scalar> GroupingBranch<Scalar>::operator()(const Var<Scalar>& x, const IndexMatrix& groups, Index segment,
                                               Mode mode) {
  if (groups.rows() != x.rows()) {
    throw DimensionError("grouping_branch: " + std::to_string(groups.rows()) + " groups for " +
                         std::to_string(x.rows()) + " points");
  }
  const Eigen::VectorXd weights = gather_counts(groups, x.rows());
  auto h = relu(bn1_(lin1_(x), mode, &weights));
  h = bn2_(lin2_(h), mode, &weights);
  if (se_) h = (*se_)(h, segment, &weights);
  return gather_max(h, groups);
}

template <typename Scalar>
void GroupingBranch<Scalar>::collect(TensorList<Scalar>& params, const std::string& prefix) {
  lin1_.collect(params, prefix + ".lin1");
  bn1_.collect(params, prefix + ".bn1");
  lin2_.collect(params, prefix + ".lin2");
  bn2_.collect(params, prefix + ".bn2");
  if (se_) se_->collect(params, prefix + ".se");
}

template <typename Scalar>
void GroupingBranch<Scalar>::collect_buffers(TensorList<Scalar>& buffers, const std::string& prefix) {
  bn1_.collect_buffers(buffers, prefix + ".bn1");
  bn2_.collect_buffers(buffers, prefix + ".bn2");
}

// ---------------------------------------------------------------------------

void OmniScaleConfig::validate() const {
  if (in_channels < 1 || out_channels < 1) throw ConfigError("omni_scale_module: channel counts must be positive");
  if (downsample_to == 0 && in_channels != out_channels) {
    throw ConfigError("omni_scale_module: a module without downsampling keeps its width (" +
                      std::to_string(in_channels) + " != " + std::to_string(out_channels) + ")");
  }
  if (downsample_to < 0) throw ConfigError("omni_scale_module: negative downsample target");
  if (k < 1) throw ConfigError("omni_scale_module: k must be positive");
  if (rates.empty()) throw ConfigError("omni_scale_module: no grouping rates");
  for (Index r : rates) {
    if (r < 1) throw ConfigError("omni_scale_module: grouping rate must be positive");
  }
  if (bottleneck_divisor < 1 || out_channels % bottleneck_divisor != 0) {
    throw ConfigError("omni_scale_module: width " + std::to_string(out_channels) + " not divisible by bottleneck " +
                      std::to_string(bottleneck_divisor));
  }
  if (use_se && (se_reduction < 1 || out_channels % se_reduction != 0)) {
    throw ConfigError("omni_scale_module: width " + std::to_string(out_channels) +
                      " not divisible by SE reduction " + std::to_string(se_reduction));
  }
}

template <typename Scalar>
Matrix<double> graph_keys(const Matrix<Scalar>& features, const Matrix<double>& positions, GraphKeys mode) {
  if (mode == GraphKeys::kPosition) return positions;
  Matrix<double> keys(positions.rows(), features.cols() + 3);
  keys.leftCols(features.cols()) = features.template cast<double>();
  keys.rightCols(3) = positions;
  return keys;
}

IndexMatrix batched_knn(const Matrix<double>& keys, Index batch, Index points, Index k) {
  IndexMatrix table(batch * points, k);
  for (Index s = 0; s < batch; ++s) {
    const Matrix<double> block = keys.middleRows(s * points, points);
    const KnnGraph g = knn_graph(block, k);
    table.middleRows(s * points, points) = g.neighbors.array() + s * points;
  }
  return table;
}

IndexMatrix batched_groups(const Matrix<double>& positions, Index batch, Index points, Index r) {
  IndexMatrix table(batch * points, r);
  for (Index s = 0; s < batch; ++s) {
    const Matrix<double> block = positions.middleRows(s * points, points);
    table.middleRows(s * points, points) = neighbor_groups(block, r).array() + s * points;
  }
  return table;
}

template <typename Scalar>
OmniScaleModule<Scalar>::OmniScaleModule(OmniScaleConfig config, std::mt19937_64& rng) : config_(std::move(config)) {
  config_.validate();
  conv_ = GraphConv<Scalar>(config_.in_channels, config_.out_channels, config_.use_graph_conv, config_.aggregator, rng);
  const Index hidden = config_.out_channels / config_.bottleneck_divisor;
  for (std::size_t b = 0; b < config_.rates.size(); ++b) {
    branches_.emplace_back(config_.out_channels, hidden, config_.use_se, config_.se_reduction, rng);
  }
}

template <typename Scalar>
bool OmniScaleModule<Scalar>::shortcut_active() const {
  return config_.shortcut && config_.in_channels == config_.out_channels;
}

template <typename Scalar>
PointBatch<Scalar> OmniScaleModule<Scalar>::operator()(const PointBatch<Scalar>& in, Mode mode, ModuleTrace* trace) {
  const Index n = in.batch, m = in.points;
  if (in.features.rows() != n * m || in.positions.rows() != n * m || in.positions.cols() != 3) {
    throw DimensionError("omni_scale_module: batch of " + std::to_string(n) + "x" + std::to_string(m) +
                         " points does not match feature/position rows");
  }
  if (in.features.cols() != config_.in_channels) {
    throw DimensionError("omni_scale_module: expected " + std::to_string(config_.in_channels) +
                         " input channels, got " + std::to_string(in.features.cols()));
  }
  if (config_.downsample_to > m) {
    throw ConfigError("omni_scale_module: downsample target " + std::to_string(config_.downsample_to) +
                      " exceeds " + std::to_string(m) + " points");
  }

  IndexMatrix graph;
  if (config_.use_graph_conv) {
    if (m < 2) throw ConfigError("omni_scale_module: a graph needs at least 2 points");
    const Index k = std::min(config_.k, m - 1);
    graph = batched_knn(graph_keys(in.features.value(), in.positions, config_.graph_keys), n, m, k);
  }
  Var<Scalar> y = conv_(in.features, graph, mode);

  PointBatch<Scalar> out;
  out.batch = n;
  Var<Scalar> identity = in.features;
  std::vector<Index> selected;
  if (config_.downsample_to > 0) {
    const Index target = config_.downsample_to;
    selected.reserve(static_cast<std::size_t>(n * target));
    for (Index s = 0; s < n; ++s) {
      const Matrix<double> block = in.positions.middleRows(s * m, m);
      for (Index i : farthest_point_sample(block, target)) selected.push_back(s * m + i);
    }
    y = gather_rows(y, std::span<const Index>(selected));
    if (shortcut_active()) identity = gather_rows(in.features, std::span<const Index>(selected));
    out.positions.resize(n * target, 3);
    for (std::size_t i = 0; i < selected.size(); ++i) out.positions.row(Index(i)) = in.positions.row(selected[i]);
    out.points = target;
  } else {
    out.positions = in.positions;
    out.points = m;
  }

  // Canonical neighbor order is total, so smaller groups are prefixes of the largest.
  const Index widest = *std::max_element(config_.rates.begin(), config_.rates.end());
  const IndexMatrix all_groups = batched_groups(out.positions, n, out.points, widest);
  std::vector<IndexMatrix> groups;
  Var<Scalar> acc;
  for (std::size_t b = 0; b < branches_.size(); ++b) {
    groups.push_back(all_groups.leftCols(config_.rates[b]));
    Var<Scalar> branch = branches_[b](y, groups.back(), out.points, mode);
    acc = acc.valid() ? add(acc, branch) : branch;
  }
  if (shortcut_active()) acc = add(acc, identity);
  out.features = acc;

  if (trace) {
    trace->points_in = m;
    trace->points_out = out.points;
    trace->channels_in = config_.in_channels;
    trace->channels_out = config_.out_channels;
    trace->graph = std::move(graph);
    trace->selected = std::move(selected);
    trace->groups = std::move(groups);
  }
  return out;
}

template <typename Scalar>
void OmniScaleModule<Scalar>::collect(TensorList<Scalar>& params, const std::string& prefix) {
  conv_.collect(params, prefix + ".conv");
  for (std::size_t b = 0; b < branches_.size(); ++b) {
    branches_[b].collect(params, prefix + ".branch" + std::to_string(config_.rates[b]));
  }
}

template <typename Scalar>
void OmniScaleModule<Scalar>::collect_buffers(TensorList<Scalar>& buffers, const std::string& prefix) {
  conv_.collect_buffers(buffers, prefix + ".conv");
  for (std::size_t b = 0; b < branches_.size(); ++b) {
    branches_[b].collect_buffers(buffers, prefix + ".branch" + std::to_string(config_.rates[b]));
  }
}

#define OGNET_INSTANTIATE(S)                                                                             \
  template class Linear<S>;                                                                              \
  template class BatchNorm<S>;                                                                           \
  template class GraphConv<S>;                                                                           \
  template class SeBlock<S>;                                                                             \
  template class GroupingBranch<S>;                                                                      \
  template class OmniScaleModule<S>;                                                                     \
  template Var<S> dynamic_graph_conv(const Var<S>&, const IndexMatrix&, const Var<S>&, const Var<S>&,    \
                                     Aggregator);                                                        \
  template Matrix<double> graph_keys(const Matrix<S>&, const Matrix<double>&, GraphKeys);

OGNET_INSTANTIATE(float)
OGNET_INSTANTIATE(double)

#undef OGNET_INSTANTIATE

}  // namespace ognet
