#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <limits>
#include <numeric>
#include <set>

#include "ognet/geometry.hpp"
#include "test_support.hpp"

using namespace ognet;
using ognet::testing::random_index;
using ognet::testing::random_matrix;

namespace {

double sqdist(const Matrix<double>& k, Index a, Index b) { return (k.row(a) - k.row(b)).squaredNorm(); }

// Full sort of every other point by distance; ties cannot occur on generic data.
std::vector<Index> brute_nearest(const Matrix<double>& keys, Index i, Index count) {
  std::vector<Index> others;
  for (Index j = 0; j < keys.rows(); ++j) {
    if (j != i) others.push_back(j);
  }
  std::stable_sort(others.begin(), others.end(),
                   [&](Index a, Index b) { return sqdist(keys, i, a) < sqdist(keys, i, b); });
  others.resize(static_cast<std::size_t>(count));
  return others;
}

Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  Eigen::Matrix3d a = random_matrix(3, 3, rng);
  Eigen::HouseholderQR<Eigen::Matrix3d> qr(a);
  Eigen::Matrix3d q = qr.householderQ();
  if (q.determinant() < 0) q.col(0) *= -1.0;
  return q;
}

std::vector<Index> random_permutation(Index m, std::mt19937_64& rng) {
  std::vector<Index> p(static_cast<std::size_t>(m));
  std::iota(p.begin(), p.end(), Index{0});
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

Matrix<double> permute_rows(const Matrix<double>& x, const std::vector<Index>& perm) {
  Matrix<double> out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) out.row(i) = x.row(perm[i]);
  return out;
}

PointCloud random_cloud(Index m, std::mt19937_64& rng) {
  PointCloud c;
  c.positions = random_matrix(m, 3, rng).cast<float>();
  c.colors = random_matrix(m, 3, rng, 0.0, 1.0).cast<float>();
  return c;
}

}  // namespace

TEST_CASE("knn_graph") {
  SUBCASE("two points are each other's neighbor") {
    Matrix<double> keys(2, 3);
    keys << 0, 0, 0, 1, 2, 3;
    auto g = knn_graph(keys, 1);
    CHECK(g.neighbors(0, 0) == 1);
    CHECK(g.neighbors(1, 0) == 0);
  }
  SUBCASE("matches a brute-force sort on random instances") {
    std::mt19937_64 rng(1);
    for (int c = 0; c < 200; ++c) {
      const Index m = random_index(rng, 2, 24), d = random_index(rng, 1, 6);
      const Index k = random_index(rng, 1, m - 1);
      Matrix<double> keys = random_matrix(m, d, rng);
      auto g = knn_graph(keys, k);
      for (Index i = 0; i < m; ++i) {
        auto expect = brute_nearest(keys, i, k);
        for (Index j = 0; j < k; ++j) REQUIRE(g.neighbors(i, j) == expect[j]);
      }
    }
  }
  SUBCASE("rows are distinct, exclude self and are sorted by distance") {
    std::mt19937_64 rng(2);
    Matrix<double> keys = random_matrix(50, 3, rng);
    auto g = knn_graph(keys, 20);
    for (Index i = 0; i < 50; ++i) {
      std::set<Index> seen;
      for (Index j = 0; j < 20; ++j) {
        CHECK(g.neighbors(i, j) != i);
        seen.insert(g.neighbors(i, j));
        if (j > 0) CHECK(sqdist(keys, i, g.neighbors(i, j - 1)) <= sqdist(keys, i, g.neighbors(i, j)));
      }
      CHECK(seen.size() == 20);
    }
  }
  SUBCASE("exact ties resolve by coordinates then index") {
    Matrix<double> keys(4, 1);
    keys << 0, 1, -1, 1;  // points 1 and 3 coincide
    auto g = knn_graph(keys, 3);
    CHECK(g.neighbors(0, 0) == 2);  // -1 sorts before +1
    CHECK(g.neighbors(0, 1) == 1);
    CHECK(g.neighbors(0, 2) == 3);
  }
  SUBCASE("k out of range") {
    Matrix<double> keys = Matrix<double>::Zero(5, 3);
    CHECK_THROWS_AS(knn_graph(keys, 5), ParameterError);
    CHECK_THROWS_AS(knn_graph(keys, 0), ParameterError);
  }
  SUBCASE("non-finite keys") {
    Matrix<double> keys = Matrix<double>::Zero(5, 3);
    keys(2, 1) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(knn_graph(keys, 2), NumericError);
    CHECK_THROWS_AS(neighbor_groups(keys, 2), NumericError);
    CHECK_THROWS_AS(farthest_point_sample(keys, 2), NumericError);
  }
  SUBCASE("edge sets survive translation, rotation and permutation") {
    std::mt19937_64 rng(3);
    for (int c = 0; c < 30; ++c) {
      Matrix<double> keys = random_matrix(40, 3, rng);
      auto g = knn_graph(keys, 8);
      Eigen::RowVector3d shift = random_matrix(1, 3, rng, -50, 50);
      Matrix<double> moved = (keys * random_rotation(rng).transpose()).rowwise() + shift;
      CHECK(knn_graph(moved, 8).neighbors == g.neighbors);

      auto perm = random_permutation(40, rng);
      std::vector<Index> inverse(40);
      for (Index i = 0; i < 40; ++i) inverse[perm[i]] = i;
      auto gp = knn_graph(permute_rows(keys, perm), 8);
      for (Index i = 0; i < 40; ++i) {
        for (Index j = 0; j < 8; ++j) CHECK(perm[gp.neighbors(i, j)] == g.neighbors(perm[i], j));
      }
    }
  }
}

TEST_CASE("grid search equals brute force") {
  std::mt19937_64 rng(10);
  auto cloud = [&](int kind, Index m) {
    Matrix<double> p = random_matrix(m, 3, rng);
    switch (kind) {
      case 0:  // uniform cube
        break;
      case 1:  // flat image-like cloud, z = 0
        p.col(2).setZero();
        break;
      case 2:  // integer lattice: many exactly equal distances
        for (Index i = 0; i < p.size(); ++i) p.data()[i] = std::floor(p.data()[i] * 4.0);
        break;
      case 3:  // tall thin body with duplicated points
        p.col(1) *= 5.0;
        p.col(0) *= 0.2;
        for (Index i = 1; i < m; i += 7) p.row(i) = p.row(i - 1);
        break;
      default:  // tight clusters far apart
        for (Index i = 0; i < m; ++i) p.row(i) = p.row(i) * 1e-3 + Eigen::RowVector3d::Constant(double(i % 3) * 10.0);
    }
    return p;
  };
  for (int c = 0; c < 250; ++c) {
    const int kind = c % 5;
    const Index m = random_index(rng, 2, c < 200 ? 400 : 1500);
    Matrix<double> p = cloud(kind, m);
    const Index k = random_index(rng, 1, std::min<Index>(m - 1, 40));
    auto grid = knn_graph(p, k, NeighborSearch::kGrid);
    auto brute = knn_graph(p, k, NeighborSearch::kBruteForce);
    REQUIRE(grid.neighbors == brute.neighbors);
    const Index r = random_index(rng, 1, 40);
    REQUIRE(neighbor_groups(p, r, NeighborSearch::kGrid) == neighbor_groups(p, r, NeighborSearch::kBruteForce));
  }
  Matrix<double> flat = random_matrix(10, 5, rng);
  CHECK_THROWS_AS(knn_graph(flat, 2, NeighborSearch::kGrid), ParameterError);
}

TEST_CASE("farthest_point_sample") {
  SUBCASE("target m selects everything") {
    std::mt19937_64 rng(4);
    Matrix<double> p = random_matrix(17, 3, rng);
    auto idx = farthest_point_sample(p, 17);
    std::set<Index> s(idx.begin(), idx.end());
    CHECK(s.size() == 17);
  }
  SUBCASE("seed is the point farthest from the centroid") {
    Matrix<double> p(3, 3);
    p << 0, 0, 0, 10, 0, 0, 0, 0, 1;
    auto idx = farthest_point_sample(p, 1);
    REQUIRE(idx.size() == 1);
    CHECK(idx[0] == 1);
  }
  SUBCASE("every pick is the brute-force max-min choice") {
    std::mt19937_64 rng(5);
    for (int c = 0; c < 200; ++c) {
      const Index m = random_index(rng, 2, 64);
      const Index target = random_index(rng, 1, m);
      Matrix<double> p = random_matrix(m, 3, rng);
      auto idx = farthest_point_sample(p, target);
      const Eigen::RowVector3d centroid = p.colwise().mean();
      Index seed = 0;
      for (Index i = 1; i < m; ++i) {
        if ((p.row(i) - centroid).squaredNorm() > (p.row(seed) - centroid).squaredNorm()) seed = i;
      }
      REQUIRE(idx[0] == seed);
      for (std::size_t s = 1; s < idx.size(); ++s) {
        Index best = -1;
        double best_d = -1;
        for (Index i = 0; i < m; ++i) {
          double d = std::numeric_limits<double>::infinity();
          for (std::size_t t = 0; t < s; ++t) d = std::min(d, sqdist(p, i, idx[t]));
          if (d > best_d) {
            best_d = d;
            best = i;
          }
        }
        REQUIRE(idx[s] == best);
      }
    }
  }
  SUBCASE("selected point set is permutation and rigid-motion invariant") {
    std::mt19937_64 rng(6);
    for (int c = 0; c < 30; ++c) {
      Matrix<double> p = random_matrix(60, 3, rng);
      auto base = farthest_point_sample(p, 15);
      auto perm = random_permutation(60, rng);
      auto other = farthest_point_sample(permute_rows(p, perm), 15);
      std::set<Index> a(base.begin(), base.end()), b;
      for (Index i : other) b.insert(perm[i]);
      CHECK(a == b);

      Eigen::RowVector3d shift = random_matrix(1, 3, rng, -10, 10);
      Matrix<double> moved = (p * random_rotation(rng).transpose()).rowwise() + shift;
      CHECK(farthest_point_sample(moved, 15) == base);
    }
  }
  SUBCASE("target out of range") {
    Matrix<double> p = Matrix<double>::Zero(4, 3);
    CHECK_THROWS_AS(farthest_point_sample(p, 5), ParameterError);
    CHECK_THROWS_AS(farthest_point_sample(p, 0), ParameterError);
  }
}

TEST_CASE("group_neighbors") {
  std::mt19937_64 rng(7);
  SUBCASE("r=1 returns the input features") {
    Matrix<double> keys = random_matrix(9, 3, rng);
    Matrix<double> f = random_matrix(9, 4, rng);
    auto g = group_neighbors(f, keys, 1);
    CHECK(g.shape() == Shape{9, 1, 4});
    CHECK(g.data() == f);
  }
  SUBCASE("matches a brute-force nearest-r gather") {
    for (int c = 0; c < 200; ++c) {
      const Index m = random_index(rng, 2, 12), r = random_index(rng, 1, m);
      Matrix<double> keys = random_matrix(m, 3, rng);
      Matrix<double> f = random_matrix(m, 2, rng);
      auto g = group_neighbors(f, keys, r);
      for (Index i = 0; i < m; ++i) {
        std::vector<Index> expect{i};
        for (Index j : brute_nearest(keys, i, r - 1)) expect.push_back(j);
        for (Index j = 0; j < r; ++j) REQUIRE(g.data().row(i * r + j) == f.row(expect[j]));
      }
    }
  }
  SUBCASE("r beyond m pads with the point itself") {
    Matrix<double> keys = random_matrix(3, 3, rng);
    auto groups = neighbor_groups(keys, 5);
    for (Index i = 0; i < 3; ++i) {
      CHECK(groups(i, 0) == i);
      CHECK(groups(i, 3) == i);
      CHECK(groups(i, 4) == i);
    }
  }
  SUBCASE("rows are permutation covariant") {
    Matrix<double> keys = random_matrix(20, 3, rng);
    Matrix<double> f = random_matrix(20, 3, rng);
    auto perm = random_permutation(20, rng);
    auto g = group_neighbors(f, keys, 6);
    auto gp = group_neighbors(permute_rows(f, perm), permute_rows(keys, perm), 6);
    for (Index i = 0; i < 20; ++i) {
      CHECK(gp.data().middleRows(i * 6, 6) == g.data().middleRows(perm[i] * 6, 6));
    }
  }
}

TEST_CASE("uniform_subsample") {
  std::mt19937_64 rng(8);
  auto cloud = random_cloud(8192, rng);
  CHECK(uniform_subsample(cloud, 1.0, 3).positions == cloud.positions);
  auto half = uniform_subsample(cloud, 0.5, 3);
  CHECK(half.size() == 4096);
  CHECK(uniform_subsample(cloud, 0.5, 3).positions == half.positions);
  CHECK(uniform_subsample(cloud, 0.5, 4).positions != half.positions);
  auto idx = uniform_subsample_indices(100, 0.3, 1);
  CHECK(std::set<Index>(idx.begin(), idx.end()).size() == 30);
  CHECK_THROWS_AS(uniform_subsample(cloud, 0.0, 1), ParameterError);
  CHECK_THROWS_AS(uniform_subsample(cloud, 1.5, 1), ParameterError);
  CHECK_THROWS_AS(uniform_subsample_indices(3, 0.1, 1), ParameterError);
}

TEST_CASE("augment") {
  std::mt19937_64 rng(9);
  auto cloud = random_cloud(200, rng);
  SUBCASE("no scale and no jitter is the identity") {
    AugmentParams p{1.0, 1.0, 0.0, 0.05};
    auto out = augment(cloud, p, rng);
    CHECK(out.positions == cloud.positions);
    CHECK(out.colors == cloud.colors);
  }
  SUBCASE("scale 2 doubles all pairwise distances") {
    AugmentParams p{2.0, 2.0, 0.0, 0.05};
    auto out = augment(cloud, p, rng);
    for (Index i = 0; i + 1 < 200; i += 7) {
      const double a = (cloud.positions.row(i) - cloud.positions.row(i + 1)).cast<double>().norm();
      const double b = (out.positions.row(i) - out.positions.row(i + 1)).cast<double>().norm();
      CHECK(b == doctest::Approx(2.0 * a).epsilon(1e-6));
    }
  }
  SUBCASE("clipped jitter never exceeds the clip") {
    auto big = random_cloud(10000, rng);
    AugmentParams p{1.0, 1.0, 0.01, 0.05};
    auto out = augment(big, p, rng);
    const double worst = (out.positions - big.positions).cast<double>().cwiseAbs().maxCoeff();
    // Float storage adds at most one ulp of the coordinate.
    CHECK(worst <= 0.05 + 1e-6);
    CHECK(worst > 0.02);
    CHECK(out.colors == big.colors);
  }
}

TEST_CASE("point cloud validation") {
  PointCloud c;
  c.positions = PointMatrix::Zero(3, 3);
  c.colors = PointMatrix::Constant(3, 3, 0.5f);
  CHECK_NOTHROW(c.validate());
  c.colors(1, 2) = 1.5f;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c.colors = PointMatrix::Zero(2, 3);
  CHECK_THROWS_AS(c.validate(), ParameterError);
}
