#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <ostream>
#include <span>
#include <vector>

#include "ognet/model.hpp"

namespace ognet {

/// Rows scaled to unit Euclidean norm. Throws NumericError on a zero or
/// non-finite row.
Matrix<double> l2_normalize(const Matrix<double>& features);

/// Gallery indices by descending dot product with `query`; ties keep the
/// lower index first.
std::vector<Index> rank_gallery(const Eigen::RowVectorXd& query, const Matrix<double>& gallery);

/// Mean of the precision at each hit of a ranked relevance list; 0 without hits.
double average_precision(std::span<const bool> hits);

/// Features with identity (-1 for a distractor) and camera per row.
struct EmbeddingSet {
  Matrix<double> features;
  std::vector<int> identities;
  std::vector<int> cameras;

  Index size() const { return features.rows(); }
  void validate() const;
};

struct RetrievalMetrics {
  double rank1 = 0.0;
  double rank5 = 0.0;
  double rank10 = 0.0;
  double map = 0.0;
  Index queries = 0;
  /// Queries without any valid match, left out of every average.
  Index excluded = 0;
};

/// Cosine retrieval of every query against the gallery. Gallery entries with
/// the query's identity and camera are dropped from its ranking; distractors
/// stay in the ranking but never count as matches.
RetrievalMetrics evaluate(const EmbeddingSet& query, const EmbeddingSet& gallery);

/// OGEB file: "OGEB", u32 n, u32 dim, then per record dim f32, i32 identity,
/// i32 camera. Little-endian.
void write_embeddings(const EmbeddingSet& set, const std::filesystem::path& path);
EmbeddingSet read_embeddings(const std::filesystem::path& path);

/// TSV lines `metric<TAB>value`.
void write_report(std::ostream& out, const RetrievalMetrics& metrics);
void write_report(const std::filesystem::path& path, const RetrievalMetrics& metrics);

/// Eval-mode embeddings of `clouds`, optionally subsampled to `fraction` of
/// their points, in batches of `batch`.
EmbeddingSet extract_embeddings(OgNet<float>& net, std::span<const PointCloud> clouds, std::span<const int> identities,
                                std::span<const int> cameras, double fraction = 1.0, std::uint64_t seed = 0,
                                Index batch = 16);

inline constexpr std::array<double, 4> kDefaultFractions{0.25, 0.5, 0.75, 1.0};

struct DensityRow {
  double fraction = 0.0;
  RetrievalMetrics metrics;
};

struct EvalClouds {
  std::span<const PointCloud> clouds;
  std::span<const int> identities;
  std::span<const int> cameras;
};

/// Retrieval metrics with query and gallery clouds subsampled to each fraction.
std::vector<DensityRow> density_sweep(OgNet<float>& net, const EvalClouds& query, const EvalClouds& gallery,
                                      std::span<const double> fractions = kDefaultFractions, std::uint64_t seed = 0);

}  // namespace ognet
