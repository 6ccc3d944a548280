#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "ognet/tensor.hpp"

namespace ognet {

using PointMatrix = Eigen::Matrix<float, Eigen::Dynamic, 3, Eigen::RowMajor>;

/// m points with XYZ positions and RGB colors in [0,1].
struct PointCloud {
  PointMatrix positions;
  PointMatrix colors;

  Index size() const { return positions.rows(); }
  /// Throws ParameterError when the invariants do not hold.
  void validate() const;
};

/// Directed k-nearest-neighbor graph. Row i lists the k nearest keys to key i
/// other than i itself, nearest first; the self-loop (i,i) is implicit.
struct KnnGraph {
  Index k = 0;
  IndexMatrix neighbors;

  Index size() const { return neighbors.rows(); }
};

/// Exact neighbor search strategy. The grid applies to 3-D keys only; kAuto
/// picks it for larger 3-D inputs and falls back to brute force otherwise.
/// Every strategy returns identical results.
enum class NeighborSearch { kAuto, kBruteForce, kGrid };

/// Exact KNN over the rows of `keys` (m x d).
///
/// Ties are broken by the canonical order (distance, key coordinates
/// lexicographically, index), which makes the edge set independent of input
/// order. Requires 1 <= k <= m-1.
KnnGraph knn_graph(const Matrix<double>& keys, Index k, NeighborSearch search = NeighborSearch::kAuto);

/// Greedy farthest point sampling in selection order.
///
/// The seed is the point farthest from the centroid; every later pick
/// maximizes the distance to the already-selected set. Ties go to the
/// lexicographically smallest coordinates, then the lower index.
std::vector<Index> farthest_point_sample(const Matrix<double>& positions, Index target);

/// m x r table of the r nearest keys to each key, self first. When r exceeds m
/// the row is padded with the point itself.
IndexMatrix neighbor_groups(const Matrix<double>& keys, Index r, NeighborSearch search = NeighborSearch::kAuto);

/// Features of each point's r-neighborhood as an [m, r, c] tensor.
template <typename Scalar>
Tensor<Scalar> group_neighbors(const Matrix<Scalar>& features, const Matrix<double>& keys, Index r);

/// round(fraction * m) distinct indices in ascending order, chosen uniformly.
std::vector<Index> uniform_subsample_indices(Index m, double fraction, std::uint64_t seed);
PointCloud uniform_subsample(const PointCloud& cloud, double fraction, std::uint64_t seed);

struct AugmentParams {
  double scale_min = 0.9;
  double scale_max = 1.1;
  double jitter_sigma = 0.01;
  double jitter_clip = 0.05;
};

/// One random global scale of the positions, then clipped Gaussian jitter per
/// coordinate. Colors are left alone.
PointCloud augment(const PointCloud& cloud, const AugmentParams& params, std::mt19937_64& rng);

PointCloud select_points(const PointCloud& cloud, std::span<const Index> indices);

Matrix<double> positions_as_keys(const PointCloud& cloud);

}  // namespace ognet
