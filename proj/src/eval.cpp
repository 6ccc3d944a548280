#include "ognet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>

#include "ognet/binary_io.hpp"
#include "ognet/error.hpp"

namespace ognet {

Matrix<double> l2_normalize(const Matrix<double>& features) {
  Matrix<double> out = features;
  for (Index i = 0; i < out.rows(); ++i) {
    const double norm = out.row(i).norm();
    if (!std::isfinite(norm)) throw NumericError("l2_normalize: row " + std::to_string(i) + " is not finite");
    if (norm == 0.0) throw NumericError("l2_normalize: row " + std::to_string(i) + " has zero norm");
    out.row(i) /= norm;
  }
  return out;
}

std::vector<Index> rank_gallery(const Eigen::RowVectorXd& query, const Matrix<double>& gallery) {
  if (query.size() != gallery.cols()) {
    throw DimensionError("rank_gallery: query width " + std::to_string(query.size()) + " vs gallery width " +
                         std::to_string(gallery.cols()));
  }
  const Eigen::VectorXd sim = gallery * query.transpose();
  std::vector<Index> order(static_cast<std::size_t>(gallery.rows()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return sim(a) > sim(b); });
  return order;
}

double average_precision(std::span<const bool> hits) {
  double sum = 0.0;
  Index found = 0;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    if (!hits[i]) continue;
    ++found;
    sum += static_cast<double>(found) / static_cast<double>(i + 1);
  }
  return found == 0 ? 0.0 : sum / static_cast<double>(found);
}

void EmbeddingSet::validate() const {
  if (static_cast<Index>(identities.size()) != features.rows() || static_cast<Index>(cameras.size()) != features.rows()) {
    throw DimensionError("embeddings: " + std::to_string(features.rows()) + " rows but " +
                         std::to_string(identities.size()) + " identities and " + std::to_string(cameras.size()) +
                         " cameras");
  }
}

RetrievalMetrics evaluate(const EmbeddingSet& query, const EmbeddingSet& gallery) {
  query.validate();
  gallery.validate();
  if (query.size() > 0 && gallery.size() > 0 && query.features.cols() != gallery.features.cols()) {
    throw DimensionError("evaluate: query width " + std::to_string(query.features.cols()) + " vs gallery width " +
                         std::to_string(gallery.features.cols()));
  }
  const Matrix<double> q = l2_normalize(query.features);
  const Matrix<double> g = l2_normalize(gallery.features);

  RetrievalMetrics m;
  m.queries = query.size();
  const auto hits = std::make_unique<bool[]>(static_cast<std::size_t>(g.rows()));
  Index valid = 0;
  double r1 = 0, r5 = 0, r10 = 0, ap = 0;
  for (Index i = 0; i < q.rows(); ++i) {
    const int id = query.identities[static_cast<std::size_t>(i)];
    const int cam = query.cameras[static_cast<std::size_t>(i)];
    std::size_t count = 0;
    for (Index j : rank_gallery(q.row(i), g)) {
      const int gid = gallery.identities[static_cast<std::size_t>(j)];
      const int gcam = gallery.cameras[static_cast<std::size_t>(j)];
      const bool same = id >= 0 && gid == id;
      if (same && gcam == cam) continue;
      hits[count++] = same;
    }
    const std::span<const bool> ranked(hits.get(), count);
    const auto first = std::find(ranked.begin(), ranked.end(), true);
    if (first == ranked.end()) {
      ++m.excluded;
      continue;
    }
    ++valid;
    const auto pos = first - ranked.begin();
    r1 += pos < 1;
    r5 += pos < 5;
    r10 += pos < 10;
    ap += average_precision(ranked);
  }
  if (valid > 0) {
    const auto n = static_cast<double>(valid);
    m.rank1 = r1 / n;
    m.rank5 = r5 / n;
    m.rank10 = r10 / n;
    m.map = ap / n;
  }
  return m;
}

void write_embeddings(const EmbeddingSet& set, const std::filesystem::path& path) {
  set.validate();
  io::ByteWriter w;
  w.put_magic("OGEB");
  w.put(static_cast<std::uint32_t>(set.size()));
  w.put(static_cast<std::uint32_t>(set.features.cols()));
  for (Index i = 0; i < set.size(); ++i) {
    for (Index c = 0; c < set.features.cols(); ++c) w.put(static_cast<float>(set.features(i, c)));
    w.put(static_cast<std::int32_t>(set.identities[static_cast<std::size_t>(i)]));
    w.put(static_cast<std::int32_t>(set.cameras[static_cast<std::size_t>(i)]));
  }
  io::write_file(path, w.bytes());
}

EmbeddingSet read_embeddings(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes, path.string());
  r.expect_magic("OGEB");
  const auto n = r.get<std::uint32_t>();
  const std::size_t dim_at = r.offset();
  const auto dim = r.get<std::uint32_t>();
  if (n > 0 && dim == 0) r.fail("dim must be positive", dim_at);
  const std::size_t record = 4u * (static_cast<std::size_t>(dim) + 2u);
  if (r.remaining() / record < n) r.fail("truncated input (" + std::to_string(n) + " records declared)");
  EmbeddingSet set;
  set.features.resize(n, dim);
  set.identities.resize(n);
  set.cameras.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::uint32_t c = 0; c < dim; ++c) set.features(i, c) = r.get<float>();
    set.identities[i] = r.get<std::int32_t>();
    set.cameras[i] = r.get<std::int32_t>();
  }
  if (r.remaining() != 0) r.fail(std::to_string(r.remaining()) + " trailing bytes");
  return set;
}

void write_report(std::ostream& out, const RetrievalMetrics& m) {
  char buf[64];
  const auto line = [&](const char* key, double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    out << key << '\t' << buf << '\n';
  };
  out << "metric\tvalue\n";
  line("rank1", m.rank1);
  line("rank5", m.rank5);
  line("rank10", m.rank10);
  line("mAP", m.map);
  out << "queries\t" << m.queries << '\n';
  out << "excluded\t" << m.excluded << '\n';
}

void write_report(const std::filesystem::path& path, const RetrievalMetrics& metrics) {
  std::ofstream out(path);
  if (!out) throw LoadError("report: cannot open " + path.string() + " for writing");
  write_report(out, metrics);
}

EmbeddingSet extract_embeddings(OgNet<float>& net, std::span<const PointCloud> clouds, std::span<const int> identities,
                                std::span<const int> cameras, double fraction, std::uint64_t seed, Index batch) {
  if (identities.size() != clouds.size() || cameras.size() != clouds.size()) {
    throw DimensionError("extract_embeddings: " + std::to_string(clouds.size()) + " clouds but " +
                         std::to_string(identities.size()) + " identities and " + std::to_string(cameras.size()) +
                         " cameras");
  }
  if (batch < 1) throw ParameterError("extract_embeddings: batch must be positive");
  const auto n = static_cast<Index>(clouds.size());
  EmbeddingSet set;
  set.identities.assign(identities.begin(), identities.end());
  set.cameras.assign(cameras.begin(), cameras.end());
  set.features.resize(n, net.config().embedding_dim);

  std::vector<PointCloud> sub;
  std::vector<const PointCloud*> ptrs;
  for (Index begin = 0; begin < n; begin += batch) {
    const Index end = std::min(n, begin + batch);
    sub.clear();
    ptrs.clear();
    for (Index i = begin; i < end; ++i) {
      const auto& c = clouds[static_cast<std::size_t>(i)];
      if (fraction < 1.0) {
        sub.push_back(uniform_subsample(c, fraction, seed + static_cast<std::uint64_t>(i)));
      } else {
        sub.push_back(c);
      }
    }
    // clouds of different sizes go through one at a time
    const bool uniform = std::all_of(sub.begin(), sub.end(), [&](const PointCloud& c) { return c.size() == sub[0].size(); });
    if (uniform) {
      for (const auto& c : sub) ptrs.push_back(&c);
      const Matrix<float> e = net.extract_embedding(make_cloud_batch<float>(ptrs));
      set.features.middleRows(begin, end - begin) = e.cast<double>();
    } else {
      for (Index i = begin; i < end; ++i) {
        const PointCloud* p = &sub[static_cast<std::size_t>(i - begin)];
        const Matrix<float> e = net.extract_embedding(make_cloud_batch<float>(std::span<const PointCloud* const>(&p, 1)));
        set.features.row(i) = e.row(0).cast<double>();
      }
    }
  }
  return set;
}

std::vector<DensityRow> density_sweep(OgNet<float>& net, const EvalClouds& query, const EvalClouds& gallery,
                                      std::span<const double> fractions, std::uint64_t seed) {
  std::vector<DensityRow> rows;
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ParameterError("density_sweep: fraction must lie in (0, 1]");
    const auto q = extract_embeddings(net, query.clouds, query.identities, query.cameras, f, seed);
    const auto g = extract_embeddings(net, gallery.clouds, gallery.identities, gallery.cameras, f, seed + 1000003);
    rows.push_back({f, evaluate(q, g)});
  }
  return rows;
}

}  // namespace ognet
