#include "ognet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace ognet {

namespace {


bool lexicographic_less(const Matrix<double>& keys, Index a, Index b) {
  for (Index d = 0; d < keys.cols(); ++d) {
    if (keys(a, d) != keys(b, d)) return keys(a, d) < keys(b, d);
  }
  return a < b;
}

/// Squared distances from every key to a block of query rows, computed with
/// the keys stored column-wise so the inner loop runs over points.
class DistanceBlocks {
 public:
  static constexpr Index kBlock = 128;

  explicit DistanceBlocks(const Matrix<double>& keys) : keys_(keys), columns_(keys) {}

  /// Fills rows [begin, begin + block) of the distance matrix.
  void compute(Index begin) {
    const Index m = keys_.rows(), d = keys_.cols();
    begin_ = begin;
    count_ = std::min(kBlock, m - begin);
    block_.setZero(count_, m);
    for (Index q = 0; q < count_; ++q) {
      double* out = block_.data() + q * m;
      for (Index c = 0; c < d; ++c) {
        const double v = keys_(begin + q, c);
        const double* col = columns_.data() + c * m;
        for (Index j = 0; j < m; ++j) {
          const double diff = v - col[j];
          out[j] += diff * diff;
        }
      }
    }
  }

  Index begin() const { return begin_; }
  Index count() const { return count_; }
  const double* row(Index i) const { return block_.data() + (i - begin_) * keys_.rows(); }

 private:
  const Matrix<double>& keys_;
  Eigen::MatrixXd columns_;  // m x d, column-major: one contiguous run per coordinate
  Matrix<double> block_;
  Index begin_ = 0;
  Index count_ = 0;
};

/// Strict weak order on (distance, key coordinates, index).
bool canonical_less(const Matrix<double>& keys, const double* dist, Index a, Index b) {
  if (dist[a] != dist[b]) return dist[a] < dist[b];
  return lexicographic_less(keys, a, b);
}

// The `count` canonically-nearest points to i other than i, nearest first.
void nearest_others(const Matrix<double>& keys, Index i, Index count, const double* dist, std::vector<Index>& order,
                    std::vector<double>& scratch) {
  const Index m = keys.rows();
  order.clear();
  count = std::min<Index>(count, m - 1);
  if (count <= 0) return;
  // Distance of the count-th nearest other point; everything at or below it
  // (exact ties included) competes under the canonical order.
  scratch.assign(dist, dist + m);
  scratch[i] = std::numeric_limits<double>::infinity();
  std::nth_element(scratch.begin(), scratch.begin() + (count - 1), scratch.end());
  const double cut = scratch[count - 1];
  for (Index j = 0; j < m; ++j) {
    if (j != i && dist[j] <= cut) order.push_back(j);
  }
  auto less = [&](Index a, Index b) { return canonical_less(keys, dist, a, b); };
  if (Index(order.size()) > count) {
    std::nth_element(order.begin(), order.begin() + count, order.end(), less);
    order.resize(static_cast<std::size_t>(count));
  }
  std::sort(order.begin(), order.end(), less);
}

/// Calls visit(i, dist_row) for every key row in order.
template <typename Visit>
void for_each_distance_row(const Matrix<double>& keys, Visit&& visit) {
  DistanceBlocks blocks(keys);
  for (Index b = 0; b < keys.rows(); b += DistanceBlocks::kBlock) {
    blocks.compute(b);
    for (Index i = b; i < b + blocks.count(); ++i) visit(i, blocks.row(i));
  }
}

/// Exact KNN over 3-D keys with a uniform grid: cells are visited in shells of
/// growing Chebyshev radius until no unseen point can beat the current
/// candidates, then the candidates are ranked canonically.
class UniformGrid {
 public:
  /// Cells are sized so that the 3x3x3 block around a query usually holds
  /// about `count` points, whether the keys fill a volume or a surface.
  UniformGrid(const Matrix<double>& keys, Index count) : keys_(keys) {
    const Index m = keys.rows();
    lo_ = keys.colwise().minCoeff();
    const Eigen::RowVector3d extent = keys.colwise().maxCoeff() - lo_;
    const double longest = extent.maxCoeff();
    const double target = std::max(2.0, double(count) / 4.0);
    double per_axis = std::clamp(std::cbrt(double(m) / target), 1.0, 64.0);
    for (int attempt = 0; attempt < 4; ++attempt) {
      layout(extent, longest, std::round(per_axis));
      const double mean = double(m) / double(occupied());
      if (attempt == 3 || (mean > 0.5 * target && mean < 2.0 * target)) break;
      // Occupied-cell density scales at least like a surface (per_axis^2).
      per_axis = std::clamp(per_axis * std::sqrt(mean / target), 1.0, 64.0);
    }
    const Index cells = n_[0] * n_[1] * n_[2];
    for (Index c = 0; c < cells; ++c) start_[c + 1] += start_[c];
    members_.resize(static_cast<std::size_t>(m));
    std::vector<Index> fill(start_.begin(), start_.end() - 1);
    for (Index i = 0; i < m; ++i) members_[fill[cell_of_[i]]++] = i;
  }

  /// The `count` canonically-nearest points to i other than i, nearest first.
  void nearest_others(Index i, Index count, std::vector<Index>& order) {
    const Index m = keys_.rows();
    order.clear();
    count = std::min<Index>(count, m - 1);
    if (count <= 0) return;
    const Index c[3] = {coord(i, 0), coord(i, 1), coord(i, 2)};
    const double q[3] = {keys_(i, 0), keys_(i, 1), keys_(i, 2)};
    cand_.clear();
    Index seen = 0;
    for (Index s = 0;; ++s) {
      bool covers_all = true;
      Index lo[3], hi[3];
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::max<Index>(0, c[a] - s);
        hi[a] = std::min<Index>(n_[a] - 1, c[a] + s);
        covers_all = covers_all && lo[a] == 0 && hi[a] == n_[a] - 1;
      }
      for (Index x = lo[0]; x <= hi[0]; ++x) {
        for (Index y = lo[1]; y <= hi[1]; ++y) {
          const bool inner_xy = std::abs(x - c[0]) < s && std::abs(y - c[1]) < s;
          for (Index z = lo[2]; z <= hi[2]; ++z) {
            if (inner_xy && std::abs(z - c[2]) < s) {
              z = std::min(hi[2], c[2] + s - 1);  // skip the already-visited interior
              continue;
            }
            const Index cell = flat(x, y, z);
            for (Index t = start_[cell]; t < start_[cell + 1]; ++t) {
              const Index j = members_[t];
              ++seen;
              if (j == i) continue;
              double d = 0.0;
              for (int a = 0; a < 3; ++a) {
                const double diff = q[a] - keys_(j, a);
                d += diff * diff;
              }
              cand_.push_back({d, j});
            }
          }
        }
      }
      if (covers_all || seen == m) break;
      if (Index(cand_.size()) < count) continue;
      // Any unseen point lies outside the visited cube of cells.
      double gap = std::numeric_limits<double>::infinity();
      for (int a = 0; a < 3; ++a) {
        if (lo[a] > 0) gap = std::min(gap, q[a] - (lo_(a) + double(lo[a]) * h_));
        if (hi[a] < n_[a] - 1) gap = std::min(gap, lo_(a) + double(hi[a] + 1) * h_ - q[a]);
      }
      gap = std::max(0.0, gap * (1.0 - 1e-9) - 1e-12);
      std::nth_element(cand_.begin(), cand_.begin() + (count - 1), cand_.end(),
                       [](const Candidate& a, const Candidate& b) { return a.d < b.d; });
      if (cand_[count - 1].d < gap * gap) break;
    }
    std::nth_element(cand_.begin(), cand_.begin() + (count - 1), cand_.end(),
                     [](const Candidate& a, const Candidate& b) { return a.d < b.d; });
    const double cut = cand_[count - 1].d;
    auto less = [&](const Candidate& a, const Candidate& b) {
      if (a.d != b.d) return a.d < b.d;
      return lexicographic_less(keys_, a.j, b.j);
    };
    auto end = std::partition(cand_.begin(), cand_.end(), [cut](const Candidate& a) { return a.d <= cut; });
    std::sort(cand_.begin(), end, less);
    for (auto it = cand_.begin(); it != cand_.begin() + count; ++it) order.push_back(it->j);
  }

 private:
  struct Candidate {
    double d;
    Index j;
  };

  // Assigns cells and per-cell counts (into start_[c + 1]) for a grid with
  // `per_axis` cells along the longest extent.
  void layout(const Eigen::RowVector3d& extent, double longest, double per_axis) {
    const Index m = keys_.rows();
    h_ = longest > 0 ? longest / per_axis : 1.0;
    for (int a = 0; a < 3; ++a) {
      n_[a] = std::max<Index>(1, std::min<Index>(64, Index(std::floor(extent(a) / h_)) + 1));
    }
    start_.assign(static_cast<std::size_t>(n_[0] * n_[1] * n_[2] + 1), 0);
    cell_of_.resize(static_cast<std::size_t>(m));
    for (Index i = 0; i < m; ++i) {
      cell_of_[i] = flat(coord(i, 0), coord(i, 1), coord(i, 2));
      ++start_[cell_of_[i] + 1];
    }
  }

  Index occupied() const {
    return Index(std::count_if(start_.begin() + 1, start_.end(), [](Index c) { return c > 0; }));
  }

  Index coord(Index i, int a) const {
    const double t = std::floor((keys_(i, a) - lo_(a)) / h_);
    return std::clamp<Index>(Index(t), 0, n_[a] - 1);
  }
  Index flat(Index x, Index y, Index z) const { return (x * n_[1] + y) * n_[2] + z; }

  const Matrix<double>& keys_;
  Eigen::RowVector3d lo_;
  double h_ = 1.0;
  Index n_[3] = {1, 1, 1};
  std::vector<Index> start_;
  std::vector<Index> members_;
  std::vector<Index> cell_of_;
  std::vector<Candidate> cand_;
};

constexpr Index kGridMinPoints = 256;

/// Calls visit(i, order) with the `count` canonically-nearest others of every
/// key row, in row order.
template <typename Visit>
void for_each_nearest(const Matrix<double>& keys, Index count, NeighborSearch search, Visit&& visit) {
  if (!keys.allFinite()) throw NumericError("neighbor search: keys contain non-finite values");
  if (search == NeighborSearch::kGrid && keys.cols() != 3) {
    throw ParameterError("grid neighbor search needs 3-D keys, got " + std::to_string(keys.cols()));
  }
  const bool grid = search == NeighborSearch::kGrid ||
                    (search == NeighborSearch::kAuto && keys.cols() == 3 && keys.rows() >= kGridMinPoints);
  std::vector<Index> order;
  if (grid) {
    UniformGrid g(keys, count);
    for (Index i = 0; i < keys.rows(); ++i) {
      g.nearest_others(i, count, order);
      visit(i, order);
    }
    return;
  }
  std::vector<double> scratch;
  for_each_distance_row(keys, [&](Index i, const double* dist) {
    nearest_others(keys, i, count, dist, order, scratch);
    visit(i, order);
  });
}

}  // namespace

void PointCloud::validate() const {
  if (positions.rows() < 1) throw ParameterError("point cloud has no points");
  if (colors.rows() != positions.rows()) {
    throw ParameterError("point cloud has " + std::to_string(positions.rows()) + " positions but " +
                         std::to_string(colors.rows()) + " colors");
  }
  if ((colors.array() < 0.0f).any() || (colors.array() > 1.0f).any()) {
    throw ParameterError("point cloud colors outside [0,1]");
  }
}

KnnGraph knn_graph(const Matrix<double>& keys, Index k, NeighborSearch search) {
  const Index m = keys.rows();
  if (keys.cols() < 1) throw ParameterError("knn_graph: keys need at least one dimension");
  if (k < 1 || k > m - 1) {
    throw ParameterError("knn_graph: k=" + std::to_string(k) + " must lie in [1, m-1] for m=" + std::to_string(m));
  }
  KnnGraph g;
  g.k = k;
  g.neighbors.resize(m, k);
  for_each_nearest(keys, k, search, [&](Index i, const std::vector<Index>& order) {
    for (Index j = 0; j < k; ++j) g.neighbors(i, j) = order[j];
  });
  return g;
}

std::vector<Index> farthest_point_sample(const Matrix<double>& positions, Index target) {
  const Index m = positions.rows();
  if (target < 1 || target > m) {
    throw ParameterError("farthest_point_sample: target " + std::to_string(target) + " outside [1," +
                         std::to_string(m) + "]");
  }
  if (positions.cols() != 3) {
    throw DimensionError("farthest_point_sample: positions need 3 columns, got " + std::to_string(positions.cols()));
  }
  if (!positions.allFinite()) throw NumericError("farthest_point_sample: positions contain non-finite values");
  const Eigen::RowVectorXd centroid = positions.colwise().mean();
  auto better = [&](double da, Index a, double db, Index b) {
    if (da != db) return da > db;
    return lexicographic_less(positions, a, b);
  };

  Index seed = 0;
  double seed_d = (positions.row(0) - centroid).squaredNorm();
  for (Index i = 1; i < m; ++i) {
    const double d = (positions.row(i) - centroid).squaredNorm();
    if (better(d, i, seed_d, seed)) {
      seed = i;
      seed_d = d;
    }
  }

  // Taken points hold -1 so they never win the max-min choice again.
  const Eigen::MatrixXd cols = positions;  // column-major copy
  const double* px = cols.data();
  const double* py = px + m;
  const double* pz = py + m;
  std::vector<double> min_d(static_cast<std::size_t>(m));
  auto relax = [&](Index from) {
    const double fx = px[from], fy = py[from], fz = pz[from];
    double* md = min_d.data();
    for (Index i = 0; i < m; ++i) {
      const double dx = px[i] - fx, dy = py[i] - fy, dz = pz[i] - fz;
      const double d = dx * dx + dy * dy + dz * dz;
      md[i] = d < md[i] ? d : md[i];
    }
  };
  std::vector<Index> picked{seed};
  picked.reserve(static_cast<std::size_t>(target));
  std::fill(min_d.begin(), min_d.end(), std::numeric_limits<double>::infinity());
  relax(seed);
  min_d[seed] = -1.0;
  while (Index(picked.size()) < target) {
    const double top = *std::max_element(min_d.begin(), min_d.end());
    Index best = -1;
    for (Index i = 0; i < m; ++i) {
      if (min_d[i] == top && (best < 0 || lexicographic_less(positions, i, best))) best = i;
    }
    picked.push_back(best);
    relax(best);
    min_d[best] = -1.0;
  }
  return picked;
}

IndexMatrix neighbor_groups(const Matrix<double>& keys, Index r, NeighborSearch search) {
  const Index m = keys.rows();
  if (r < 1) throw ParameterError("neighbor_groups: r must be positive");
  IndexMatrix groups(m, r);
  for_each_nearest(keys, r - 1, search, [&](Index i, const std::vector<Index>& order) {
    groups(i, 0) = i;
    Index j = 1;
    for (Index o : order) groups(i, j++) = o;
    for (; j < r; ++j) groups(i, j) = i;
  });
  return groups;
}

template <typename Scalar>
Tensor<Scalar> group_neighbors(const Matrix<Scalar>& features, const Matrix<double>& keys, Index r) {
  const Index m = features.rows(), c = features.cols();
  if (keys.rows() != m) {
    throw DimensionError("group_neighbors: " + std::to_string(m) + " feature rows but " +
                         std::to_string(keys.rows()) + " keys");
  }
  const IndexMatrix groups = neighbor_groups(keys, r);
  Matrix<Scalar> out(m * r, c);
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j < r; ++j) out.row(i * r + j) = features.row(groups(i, j));
  }
  return Tensor<Scalar>(Shape{m, r, c}, std::move(out));
}

std::vector<Index> uniform_subsample_indices(Index m, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ParameterError("uniform_subsample: fraction " + std::to_string(fraction) + " outside (0,1]");
  }
  const auto keep = static_cast<Index>(std::llround(fraction * static_cast<double>(m)));
  if (keep < 1) throw ParameterError("uniform_subsample: fraction " + std::to_string(fraction) + " keeps no points");
  std::vector<Index> idx(static_cast<std::size_t>(m));
  std::iota(idx.begin(), idx.end(), Index{0});
  if (keep == m) return idx;
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first `keep` slots become a uniform sample.
  for (Index i = 0; i < keep; ++i) {
    std::uniform_int_distribution<Index> pick(i, m - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(static_cast<std::size_t>(keep));
  std::sort(idx.begin(), idx.end());
  return idx;
}

PointCloud select_points(const PointCloud& cloud, std::span<const Index> indices) {
  PointCloud out;
  out.positions.resize(Index(indices.size()), 3);
  out.colors.resize(Index(indices.size()), 3);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out.positions.row(Index(i)) = cloud.positions.row(indices[i]);
    out.colors.row(Index(i)) = cloud.colors.row(indices[i]);
  }
  return out;
}

PointCloud uniform_subsample(const PointCloud& cloud, double fraction, std::uint64_t seed) {
  const auto idx = uniform_subsample_indices(cloud.size(), fraction, seed);
  return select_points(cloud, idx);
}

PointCloud augment(const PointCloud& cloud, const AugmentParams& params, std::mt19937_64& rng) {
  if (params.scale_min > params.scale_max || params.scale_min <= 0.0) {
    throw ParameterError("augment: invalid scale range");
  }
  if (params.jitter_sigma < 0.0 || params.jitter_clip < 0.0) throw ParameterError("augment: negative jitter");
  PointCloud out = cloud;
  double s = params.scale_min;
  if (params.scale_max > params.scale_min) s = std::uniform_real_distribution<double>(params.scale_min, params.scale_max)(rng);
  std::normal_distribution<double> noise(0.0, params.jitter_sigma > 0.0 ? params.jitter_sigma : 1.0);
  for (Index i = 0; i < out.size(); ++i) {
    for (Index d = 0; d < 3; ++d) {
      double v = static_cast<double>(cloud.positions(i, d)) * s;
      if (params.jitter_sigma > 0.0) v += std::clamp(noise(rng), -params.jitter_clip, params.jitter_clip);
      out.positions(i, d) = static_cast<float>(v);
    }
  }
  return out;
}

Matrix<double> positions_as_keys(const PointCloud& cloud) { return cloud.positions.cast<double>(); }

template Tensor<float> group_neighbors(const Matrix<float>&, const Matrix<double>&, Index);
template Tensor<double> group_neighbors(const Matrix<double>&, const Matrix<double>&, Index);

}  // namespace ognet
