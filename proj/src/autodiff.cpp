#include "ognet/autodiff.hpp"

#include <cstdint>

#include <cmath>
#include <string>

namespace ognet {

namespace {

std::string dims(Index r, Index c) { return "[" + std::to_string(r) + "," + std::to_string(c) + "]"; }

template <typename Scalar>
std::string dims(const Var<Scalar>& v) {
  return dims(v.rows(), v.cols());
}

template <typename Scalar>
void require_same_shape(const char* op, const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shapes " + dims(a) + " and " + dims(b) + " differ");
  }
}

template <typename Scalar>
Shape row_shape(Index rows, Index cols) {
  return rows == 1 ? Shape{cols} : Shape{rows, cols};
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> Tape<Scalar>::constant(Mat value, Shape shape) {
  Node node;
  if (shape.empty()) shape = {value.rows(), value.cols()};
  node.value = std::move(value);
  node.shape = std::move(shape);
  nodes_.push_back(std::move(node));
  return Var<Scalar>(this, nodes_.size() - 1);
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::parameter(Tensor<Scalar>& tensor) {
  Node node;
  node.external = &tensor.data();
  node.bound = &tensor;
  node.shape = tensor.shape();
  node.needs_grad = tensor.requires_grad();
  nodes_.push_back(std::move(node));
  return Var<Scalar>(this, nodes_.size() - 1);
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::record(Mat value, Shape shape, std::initializer_list<Var<Scalar>> inputs,
                                 BackwardFn backward) {
  return record(std::move(value), std::move(shape),
                std::span<const Var<Scalar>>(inputs.begin(), inputs.size()), std::move(backward));
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::record(Mat value, Shape shape, std::span<const Var<Scalar>> inputs,
                                 BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.shape = std::move(shape);
  for (const auto& in : inputs) {
    if (&in.tape() != this) throw ParameterError("operation mixes values from different tapes");
    node.needs_grad = node.needs_grad || nodes_[in.id()].needs_grad;
  }
  if (node.needs_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var<Scalar>(this, nodes_.size() - 1);
}

template <typename Scalar>
const Matrix<Scalar>& Tape<Scalar>::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.value;
}

template <typename Scalar>
Matrix<Scalar> Tape<Scalar>::grad(const Var<Scalar>& v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.size() == 0) return Mat::Zero(value(v.id()).rows(), value(v.id()).cols());
  return n.grad;
}

template <typename Scalar>
void Tape<Scalar>::accumulate(std::size_t id, const Eigen::Ref<const Mat>& g) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

template <typename Scalar>
void Tape<Scalar>::backward(const Var<Scalar>& root) {
  if (root.rows() != 1 || root.cols() != 1) {
    throw DimensionError("backward without a seed needs a scalar root, got " + dims(root));
  }
  backward(root, Mat::Ones(1, 1));
}

template <typename Scalar>
void Tape<Scalar>::backward(const Var<Scalar>& root, const Mat& seed) {
  for (auto& n : nodes_) n.grad.resize(0, 0);
  if (!nodes_[root.id()].needs_grad) return;
  nodes_[root.id()].grad = seed;
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, n.grad);
  }
  for (auto& n : nodes_) {
    if (n.bound && n.grad.size() > 0) n.bound->accumulate_grad(n.grad);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: shapes " + dims(a) + " and " + dims(b) + " are incompatible");
  }
  const std::size_t ia = a.id(), ib = b.id();
  Matrix<Scalar> out = a.value() * b.value();
  Shape shape{out.rows(), out.cols()};
  return a.tape().record(std::move(out), std::move(shape), {a, b},
                         [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
                           if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
                         });
}

template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight,
                   const std::optional<Var<Scalar>>& bias) {
  if (x.cols() != weight.rows()) {
    throw DimensionError("linear: input shape " + dims(x) + " incompatible with weight shape " +
                         dims(weight));
  }
  if (bias && (bias->rows() != 1 || bias->cols() != weight.cols())) {
    throw DimensionError("linear: bias shape " + dims(*bias) + " incompatible with weight shape " +
                         dims(weight));
  }
  Matrix<Scalar> out = x.value() * weight.value();
  if (bias) out.rowwise() += bias->value().row(0);
  Shape shape{out.rows(), out.cols()};
  const std::size_t ix = x.id(), iw = weight.id();
  const std::optional<std::size_t> ib = bias ? std::optional<std::size_t>(bias->id()) : std::nullopt;
  std::vector<Var<Scalar>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return x.tape().record(std::move(out), std::move(shape), std::span<const Var<Scalar>>(inputs),
                         [ix, iw, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           if (t.needs_grad(ix)) t.accumulate(ix, g * t.value(iw).transpose());
                           if (t.needs_grad(iw)) t.accumulate(iw, t.value(ix).transpose() * g);
                           if (ib && t.needs_grad(*ib)) t.accumulate(*ib, g.colwise().sum());
                         });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape("add", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(a.value() + b.value(), a.shape(), {a, b},
                         [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           t.accumulate(ia, g);
                           t.accumulate(ib, g);
                         });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape("mul", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(a.value().cwiseProduct(b.value()), a.shape(), {a, b},
                         [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           if (t.needs_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                           if (t.needs_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                         });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar factor) {
  const std::size_t ix = x.id();
  return x.tape().record(x.value() * factor, x.shape(), {x},
                         [ix, factor](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           t.accumulate(ix, g * factor);
                         });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  const std::size_t ix = x.id();
  const Index r = x.rows(), c = x.cols();
  Matrix<Scalar> out(1, 1);
  out(0, 0) = x.value().sum();
  return x.tape().record(std::move(out), Shape{}, {x},
                         [ix, r, c](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           t.accumulate(ix, Matrix<Scalar>::Constant(r, c, g(0, 0)));
                         });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  const std::size_t ix = x.id();
  Matrix<Scalar> out = x.value().cwiseMax(Scalar(0));
  return x.tape().record(std::move(out), x.shape(), {x},
                         [ix](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           const auto& v = t.value(ix);
                           t.accumulate(ix, Matrix<Scalar>((v.array() > Scalar(0)).select(g.array(), Scalar(0)).matrix()));
                         });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  Matrix<Scalar> out = (Scalar(1) + (-x.value().array()).exp()).inverse().matrix();
  const std::size_t ix = x.id();
  Matrix<Scalar> saved = out;
  return x.tape().record(std::move(out), x.shape(), {x},
                         [ix, s = std::move(saved)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           t.accumulate(ix, (g.array() * s.array() * (Scalar(1) - s.array())).matrix());
                         });
}

template <typename Scalar>
Var<Scalar> dropout(const Var<Scalar>& x, double p, Mode mode, std::mt19937_64* rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ParameterError("dropout probability " + std::to_string(p) + " outside [0,1)");
  }
  if (mode == Mode::kEval || p == 0.0) return x;
  if (!rng) throw ParameterError("dropout in train mode needs a random generator");
  std::bernoulli_distribution keep(1.0 - p);
  const Scalar survivor = Scalar(1.0 / (1.0 - p));
  Matrix<Scalar> mask(x.rows(), x.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*rng) ? survivor : Scalar(0);
  Matrix<Scalar> out = x.value().cwiseProduct(mask);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), x.shape(), {x},
                         [ix, m = std::move(mask)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           t.accumulate(ix, g.cwiseProduct(m));
                         });
}

// ---------------------------------------------------------------------------
// Structural
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> concat(std::span<const Var<Scalar>> parts, int axis) {
  if (parts.empty()) throw ParameterError("concat of zero tensors");
  if (axis != 0 && axis != 1) throw ParameterError("concat axis must be 0 or 1");
  Index rows = 0, cols = 0;
  for (const auto& p : parts) {
    if (axis == 0) {
      if (p.cols() != parts[0].cols()) {
        throw DimensionError("concat axis 0: shapes " + dims(parts[0]) + " and " + dims(p) + " differ in columns");
      }
      rows += p.rows();
      cols = p.cols();
    } else {
      if (p.rows() != parts[0].rows()) {
        throw DimensionError("concat axis 1: shapes " + dims(parts[0]) + " and " + dims(p) + " differ in rows");
      }
      cols += p.cols();
      rows = p.rows();
    }
  }
  Matrix<Scalar> out(rows, cols);
  std::vector<std::size_t> ids;
  std::vector<Index> offsets;
  Index offset = 0;
  for (const auto& p : parts) {
    ids.push_back(p.id());
    offsets.push_back(offset);
    if (axis == 0) {
      out.middleRows(offset, p.rows()) = p.value();
      offset += p.rows();
    } else {
      out.middleCols(offset, p.cols()) = p.value();
      offset += p.cols();
    }
  }
  return parts[0].tape().record(
      std::move(out), Shape{rows, cols}, parts,
      [ids, offsets, axis](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.needs_grad(ids[k])) continue;
          const auto& v = t.value(ids[k]);
          if (axis == 0) {
            t.accumulate(ids[k], g.middleRows(offsets[k], v.rows()));
          } else {
            t.accumulate(ids[k], g.middleCols(offsets[k], v.cols()));
          }
        }
      });
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& x, Index begin, Index count) {
  if (begin < 0 || count <= 0 || begin + count > x.cols()) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," +
                         std::to_string(begin + count) + ") outside " + dims(x));
  }
  const std::size_t ix = x.id();
  const Index r = x.rows(), c = x.cols();
  Matrix<Scalar> out = x.value().middleCols(begin, count);
  return x.tape().record(std::move(out), Shape{r, count}, {x},
                         [ix, r, c, begin, count](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           Matrix<Scalar> full = Matrix<Scalar>::Zero(r, c);
                           full.middleCols(begin, count) = g;
                           t.accumulate(ix, full);
                         });
}

template <typename Scalar>
Var<Scalar> mean_reduce(const Var<Scalar>& x, int axis) {
  if (axis != 0 && axis != 1) throw ParameterError("mean_reduce axis must be 0 or 1");
  const std::size_t ix = x.id();
  const Index r = x.rows(), c = x.cols();
  Matrix<Scalar> out;
  if (axis == 0) {
    out = x.value().colwise().mean();
  } else {
    out = x.value().rowwise().mean().transpose();
  }
  Shape shape{out.cols()};
  return x.tape().record(std::move(out), std::move(shape), {x},
                         [ix, r, c, axis](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           Matrix<Scalar> d(r, c);
                           if (axis == 0) {
                             d.rowwise() = g.row(0) / Scalar(r);
                           } else {
                             d.colwise() = g.row(0).transpose() / Scalar(c);
                           }
                           t.accumulate(ix, d);
                         });
}

template <typename Scalar>
Var<Scalar> max_reduce(const Var<Scalar>& x, int axis) {
  if (axis != 0 && axis != 1) throw ParameterError("max_reduce axis must be 0 or 1");
  const auto& v = x.value();
  const Index r = v.rows(), c = v.cols();
  const Index outer = axis == 0 ? c : r;
  Matrix<Scalar> out(1, outer);
  std::vector<Index> arg(outer);
  for (Index o = 0; o < outer; ++o) {
    Index best = 0;
    Scalar bv = axis == 0 ? v(0, o) : v(o, 0);
    const Index len = axis == 0 ? r : c;
    for (Index i = 1; i < len; ++i) {
      const Scalar cur = axis == 0 ? v(i, o) : v(o, i);
      if (cur > bv) {
        bv = cur;
        best = i;
      }
    }
    out(0, o) = bv;
    arg[o] = best;
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), Shape{outer}, {x},
                         [ix, r, c, axis, arg = std::move(arg)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           Matrix<Scalar> d = Matrix<Scalar>::Zero(r, c);
                           for (std::size_t o = 0; o < arg.size(); ++o) {
                             if (axis == 0) {
                               d(arg[o], Index(o)) += g(0, Index(o));
                             } else {
                               d(Index(o), arg[o]) += g(0, Index(o));
                             }
                           }
                           t.accumulate(ix, d);
                         });
}

// ---------------------------------------------------------------------------
// Normalization and losses
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       BatchNormState<Scalar>& state, Mode mode, const Eigen::VectorXd* row_weights) {
  const Index n = x.rows(), c = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != c || beta.rows() != 1 || beta.cols() != c) {
    throw DimensionError("batch_norm: input shape " + dims(x) + " incompatible with gamma " +
                         dims(gamma) + " / beta " + dims(beta));
  }
  if (row_weights && row_weights->size() != n) {
    throw DimensionError("batch_norm: " + std::to_string(row_weights->size()) +
                         " row weights for " + std::to_string(n) + " rows");
  }
  const auto& xv = x.value();
  const std::size_t ix = x.id(), ig = gamma.id(), ibeta = beta.id();

  if (mode == Mode::kEval) {
    Eigen::Matrix<Scalar, 1, Eigen::Dynamic> invstd =
        (state.running_var.data().row(0).array() + Scalar(state.eps)).rsqrt().matrix();
    Matrix<Scalar> xhat = (xv.rowwise() - state.running_mean.data().row(0));
    xhat = xhat.array().rowwise() * invstd.array();
    Matrix<Scalar> out = xhat.array().rowwise() * gamma.value().row(0).array();
    out.rowwise() += beta.value().row(0);
    return x.tape().record(
        std::move(out), x.shape(), {x, gamma, beta},
        [ix, ig, ibeta, xhat = std::move(xhat), invstd](Tape<Scalar>& t, const Matrix<Scalar>& g) {
          const auto& gm = t.value(ig);
          if (t.needs_grad(ix)) {
            t.accumulate(ix, (g.array().rowwise() * (gm.row(0).array() * invstd.array())).matrix());
          }
          if (t.needs_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
          if (t.needs_grad(ibeta)) t.accumulate(ibeta, g.colwise().sum());
        });
  }

  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> w;
  if (row_weights) {
    w = row_weights->template cast<Scalar>();
  } else {
    w = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Ones(n);
  }
  const Scalar total = w.sum();
  if (total < Scalar(2)) {
    throw BatchSizeError("batch_norm in train mode needs at least 2 samples, got " +
                         std::to_string(static_cast<double>(total)));
  }
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> mean = (w.transpose() * xv) / total;
  Matrix<Scalar> centered = xv.rowwise() - mean;
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> var =
      (w.transpose() * centered.cwiseProduct(centered)) / total;
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> invstd = (var.array() + Scalar(state.eps)).rsqrt().matrix();
  Matrix<Scalar> xhat = centered.array().rowwise() * invstd.array();
  Matrix<Scalar> out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);

  const Scalar mom = Scalar(state.momentum);
  state.running_mean.data().row(0) = (Scalar(1) - mom) * state.running_mean.data().row(0) + mom * mean;
  state.running_var.data().row(0) =
      (Scalar(1) - mom) * state.running_var.data().row(0) + mom * var * (total / (total - Scalar(1)));

  return x.tape().record(
      std::move(out), x.shape(), {x, gamma, beta},
      [ix, ig, ibeta, xhat = std::move(xhat), invstd, w = std::move(w), total](Tape<Scalar>& t,
                                                                            const Matrix<Scalar>& g) {
        if (t.needs_grad(ix)) {
          const auto& gm = t.value(ig);
          Matrix<Scalar> gh = g.array().rowwise() * gm.row(0).array();
          Eigen::Matrix<Scalar, 1, Eigen::Dynamic> s1 = gh.colwise().sum() / total;
          Eigen::Matrix<Scalar, 1, Eigen::Dynamic> s2 = gh.cwiseProduct(xhat).colwise().sum() / total;
          Matrix<Scalar> d = gh;
          d -= w * s1;
          d -= ((xhat.array().colwise() * w.array()).rowwise() * s2.array()).matrix();
          d = d.array().rowwise() * invstd.array();
          t.accumulate(ix, d);
        }
        if (t.needs_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
        if (t.needs_grad(ibeta)) t.accumulate(ibeta, g.colwise().sum());
      });
}

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& logits) {
  Matrix<Scalar> p = logits.colwise() - logits.rowwise().maxCoeff();
  p = p.array().exp();
  p = p.array().colwise() / p.rowwise().sum().array();
  return p;
}

template <typename Scalar>
Var<Scalar> softmax_cross_entropy(const Var<Scalar>& logits, std::span<const int> labels) {
  const Index n = logits.rows(), k = logits.cols();
  if (Index(labels.size()) != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for logits " + dims(logits));
  }
  for (int y : labels) {
    if (y < 0 || y >= k) {
      throw LabelError("label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
    }
  }
  const auto& z = logits.value();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> zmax = z.rowwise().maxCoeff();
  Matrix<Scalar> shifted = z.colwise() - zmax;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> lse = shifted.array().exp().rowwise().sum().log();
  Scalar loss = 0;
  for (Index i = 0; i < n; ++i) loss += lse(i) - shifted(i, labels[i]);
  Matrix<Scalar> out(1, 1);
  out(0, 0) = loss / Scalar(n);
  Matrix<Scalar> grad_base = (shifted.colwise() - lse).array().exp().matrix();
  for (Index i = 0; i < n; ++i) grad_base(i, labels[i]) -= Scalar(1);
  grad_base /= Scalar(n);
  const std::size_t iz = logits.id();
  return logits.tape().record(std::move(out), Shape{}, {logits},
                              [iz, gb = std::move(grad_base)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                                t.accumulate(iz, gb * g(0, 0));
                              });
}

// ---------------------------------------------------------------------------
// Point-set gathers and segment reductions
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& x, std::span<const Index> indices) {
  const Index n = x.rows(), c = x.cols();
  Matrix<Scalar> out(Index(indices.size()), c);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= n) {
      throw DimensionError("gather_rows: index " + std::to_string(indices[i]) + " outside " + dims(x));
    }
    out.row(Index(i)) = x.value().row(indices[i]);
  }
  const std::size_t ix = x.id();
  std::vector<Index> idx(indices.begin(), indices.end());
  return x.tape().record(std::move(out), Shape{Index(indices.size()), c}, {x},
                         [ix, n, c, idx = std::move(idx)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           Matrix<Scalar> d = Matrix<Scalar>::Zero(n, c);
                           for (std::size_t i = 0; i < idx.size(); ++i) d.row(idx[i]) += g.row(Index(i));
                           t.accumulate(ix, d);
                         });
}

template <typename Scalar>
Var<Scalar> neighbor_sum(const Var<Scalar>& x, const IndexMatrix& neighbors) {
  const Index n = x.rows(), c = x.cols();
  if (neighbors.rows() != n) {
    throw DimensionError("neighbor_sum: graph over " + std::to_string(neighbors.rows()) +
                         " points applied to features " + dims(x));
  }
  if (neighbors.size() > 0 && (neighbors.minCoeff() < 0 || neighbors.maxCoeff() >= n)) {
    throw DimensionError("neighbor_sum: neighbor index outside " + dims(x));
  }
  const auto& v = x.value();
  Matrix<Scalar> out = Matrix<Scalar>::Zero(n, c);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < neighbors.cols(); ++j) out.row(i) += v.row(neighbors(i, j));
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), Shape{n, c}, {x},
                         [ix, n, c, neighbors](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           Matrix<Scalar> d = Matrix<Scalar>::Zero(n, c);
                           for (Index i = 0; i < n; ++i) {
                             for (Index j = 0; j < neighbors.cols(); ++j) d.row(neighbors(i, j)) += g.row(i);
                           }
                           t.accumulate(ix, d);
                         });
}

template <typename Scalar>
Var<Scalar> gather_max(const Var<Scalar>& x, const IndexMatrix& groups) {
  const Index n = x.rows(), c = x.cols(), rows = groups.rows(), r = groups.cols();
  if (r < 1) throw DimensionError("gather_max: empty groups");
  if (groups.minCoeff() < 0 || groups.maxCoeff() >= n) {
    throw DimensionError("gather_max: group index outside " + dims(x));
  }
  const auto& v = x.value();
  Matrix<Scalar> out(rows, c);
  Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> arg(rows, c);
  const Scalar* vp = v.data();
  for (Index i = 0; i < rows; ++i) {
    Scalar* o = out.data() + i * c;
    std::int32_t* a = arg.data() + i * c;
    const auto first = static_cast<std::int32_t>(groups(i, 0));
    std::copy_n(vp + first * c, c, o);
    std::fill_n(a, c, first);
    for (Index j = 1; j < r; ++j) {
      const auto src = static_cast<std::int32_t>(groups(i, j));
      const Scalar* sv = vp + Index(src) * c;
      for (Index k = 0; k < c; ++k) {
        const bool gt = sv[k] > o[k];
        o[k] = gt ? sv[k] : o[k];
        a[k] = gt ? src : a[k];
      }
    }
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), Shape{rows, c}, {x},
                         [ix, n, c, arg = std::move(arg)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           Matrix<Scalar> d = Matrix<Scalar>::Zero(n, c);
                           for (Index i = 0; i < arg.rows(); ++i) {
                             const Scalar* gi = g.data() + i * c;
                             const std::int32_t* ai = arg.data() + i * c;
                             for (Index k = 0; k < c; ++k) d.data()[Index(ai[k]) * c + k] += gi[k];
                           }
                           t.accumulate(ix, d);
                         });
}

template <typename Scalar>
Var<Scalar> segment_mean(const Var<Scalar>& x, Index segment, const Eigen::VectorXd* row_weights) {
  const Index n = x.rows(), c = x.cols();
  if (segment < 1 || n % segment != 0) {
    throw DimensionError("segment_mean: " + std::to_string(n) + " rows do not split into blocks of " +
                         std::to_string(segment));
  }
  if (row_weights && row_weights->size() != n) {
    throw DimensionError("segment_mean: weight count does not match rows of " + dims(x));
  }
  const Index blocks = n / segment;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> w =
      row_weights ? Eigen::Matrix<Scalar, Eigen::Dynamic, 1>(row_weights->template cast<Scalar>())
                  : Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Ones(n);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> totals(blocks);
  Matrix<Scalar> out(blocks, c);
  for (Index s = 0; s < blocks; ++s) {
    auto ws = w.segment(s * segment, segment);
    totals(s) = ws.sum();
    if (totals(s) <= Scalar(0)) throw NumericError("segment_mean: block with zero total weight");
    out.row(s) = (ws.transpose() * x.value().middleRows(s * segment, segment)) / totals(s);
  }
  const std::size_t ix = x.id();
  return x.tape().record(
      std::move(out), row_shape<Scalar>(blocks, c), {x},
      [ix, n, c, segment, blocks, w = std::move(w), totals](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        Matrix<Scalar> d(n, c);
        for (Index s = 0; s < blocks; ++s) {
          d.middleRows(s * segment, segment) =
              (w.segment(s * segment, segment) / totals(s)) * g.row(s);
        }
        t.accumulate(ix, d);
      });
}

template <typename Scalar>
Var<Scalar> segment_max(const Var<Scalar>& x, Index segment) {
  const Index n = x.rows(), c = x.cols();
  if (segment < 1 || n % segment != 0) {
    throw DimensionError("segment_max: " + std::to_string(n) + " rows do not split into blocks of " +
                         std::to_string(segment));
  }
  const Index blocks = n / segment;
  const auto& v = x.value();
  Matrix<Scalar> out(blocks, c);
  IndexMatrix arg(blocks, c);
  for (Index s = 0; s < blocks; ++s) {
    const Index base = s * segment;
    out.row(s) = v.row(base);
    arg.row(s).setConstant(base);
    for (Index i = base + 1; i < base + segment; ++i) {
      for (Index k = 0; k < c; ++k) {
        if (v(i, k) > out(s, k)) {
          out(s, k) = v(i, k);
          arg(s, k) = i;
        }
      }
    }
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), row_shape<Scalar>(blocks, c), {x},
                         [ix, n, c, arg = std::move(arg)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           Matrix<Scalar> d = Matrix<Scalar>::Zero(n, c);
                           for (Index s = 0; s < arg.rows(); ++s) {
                             for (Index k = 0; k < c; ++k) d(arg(s, k), k) += g(s, k);
                           }
                           t.accumulate(ix, d);
                         });
}

template <typename Scalar>
Var<Scalar> scale_segments(const Var<Scalar>& x, const Var<Scalar>& gate, Index segment) {
  const Index n = x.rows(), c = x.cols();
  if (segment < 1 || n % segment != 0 || gate.rows() != n / segment || gate.cols() != c) {
    throw DimensionError("scale_segments: features " + dims(x) + " incompatible with gate " +
                         dims(gate) + " at block size " + std::to_string(segment));
  }
  Matrix<Scalar> out(n, c);
  for (Index s = 0; s < gate.rows(); ++s) {
    out.middleRows(s * segment, segment) =
        x.value().middleRows(s * segment, segment).array().rowwise() * gate.value().row(s).array();
  }
  const std::size_t ix = x.id(), ig = gate.id();
  return x.tape().record(std::move(out), x.shape(), {x, gate},
                         [ix, ig, n, c, segment](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           const auto& gv = t.value(ig);
                           const auto& xv = t.value(ix);
                           const Index blocks = gv.rows();
                           if (t.needs_grad(ix)) {
                             Matrix<Scalar> d(n, c);
                             for (Index s = 0; s < blocks; ++s) {
                               d.middleRows(s * segment, segment) =
                                   g.middleRows(s * segment, segment).array().rowwise() * gv.row(s).array();
                             }
                             t.accumulate(ix, d);
                           }
                           if (t.needs_grad(ig)) {
                             Matrix<Scalar> d(blocks, c);
                             for (Index s = 0; s < blocks; ++s) {
                               d.row(s) = g.middleRows(s * segment, segment)
                                              .cwiseProduct(xv.middleRows(s * segment, segment))
                                              .colwise()
                                              .sum();
                             }
                             t.accumulate(ig, d);
                           }
                         });
}

template <typename Scalar>
Var<Scalar> l2_normalize_rows(const Var<Scalar>& x) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> norms = x.value().rowwise().norm();
  for (Index i = 0; i < norms.size(); ++i) {
    if (!(norms(i) > Scalar(0))) throw NumericError("l2_normalize_rows: row " + std::to_string(i) + " has zero norm");
  }
  Matrix<Scalar> out = x.value().array().colwise() / norms.array();
  Matrix<Scalar> y = out;
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), x.shape(), {x},
                         [ix, y = std::move(y), norms = std::move(norms)](Tape<Scalar>& t,
                                                                         const Matrix<Scalar>& g) {
                           Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = y.cwiseProduct(g).rowwise().sum();
                           Matrix<Scalar> d = g - (y.array().colwise() * dots.array()).matrix();
                           d = d.array().colwise() / norms.array();
                           t.accumulate(ix, d);
                         });
}

template <typename Scalar>
Var<Scalar> gram(const Var<Scalar>& x) {
  Matrix<Scalar> out = x.value() * x.value().transpose();
  const std::size_t ix = x.id();
  Shape shape{out.rows(), out.cols()};
  return x.tape().record(std::move(out), std::move(shape), {x},
                         [ix](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                           t.accumulate(ix, (g + g.transpose()) * t.value(ix));
                         });
}

#define OGNET_INSTANTIATE(S)                                                                            \
  template class Tape<S>;                                                                               \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                                 \
  template Var<S> linear(const Var<S>&, const Var<S>&, const std::optional<Var<S>>&);                   \
  template Var<S> add(const Var<S>&, const Var<S>&);                                                    \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                                    \
  template Var<S> scale(const Var<S>&, S);                                                              \
  template Var<S> sum(const Var<S>&);                                                                   \
  template Var<S> relu(const Var<S>&);                                                                  \
  template Var<S> sigmoid(const Var<S>&);                                                               \
  template Var<S> dropout(const Var<S>&, double, Mode, std::mt19937_64*);                               \
  template Var<S> concat(std::span<const Var<S>>, int);                                                 \
  template Var<S> slice_cols(const Var<S>&, Index, Index);                                              \
  template Var<S> mean_reduce(const Var<S>&, int);                                                      \
  template Var<S> max_reduce(const Var<S>&, int);                                                       \
  template Var<S> batch_norm(const Var<S>&, const Var<S>&, const Var<S>&, BatchNormState<S>&, Mode,     \
                             const Eigen::VectorXd*);                                                   \
  template Var<S> softmax_cross_entropy(const Var<S>&, std::span<const int>);                           \
  template Matrix<S> softmax_rows(const Matrix<S>&);                                                    \
  template Var<S> gather_rows(const Var<S>&, std::span<const Index>);                                   \
  template Var<S> neighbor_sum(const Var<S>&, const IndexMatrix&);                                      \
  template Var<S> gather_max(const Var<S>&, const IndexMatrix&);                                        \
  template Var<S> segment_mean(const Var<S>&, Index, const Eigen::VectorXd*);                           \
  template Var<S> segment_max(const Var<S>&, Index);                                                    \
  template Var<S> scale_segments(const Var<S>&, const Var<S>&, Index);                                  \
  template Var<S> l2_normalize_rows(const Var<S>&);                                                     \
  template Var<S> gram(const Var<S>&);

OGNET_INSTANTIATE(float)
OGNET_INSTANTIATE(double)

#undef OGNET_INSTANTIATE

}  // namespace ognet
