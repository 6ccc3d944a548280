#include "ognet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "ognet/binary_io.hpp"
#include "ognet/error.hpp"

namespace ognet {

namespace {

constexpr std::uint16_t kCloudVersion = 1;
constexpr std::uint32_t kCloudChannels = 6;

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, '\t')) out.push_back(field);
  if (!line.empty() && line.back() == '\t') out.emplace_back();
  return out;
}

int parse_int(const std::string& text, const std::string& what) {
  std::size_t used = 0;
  int value = 0;
  try {
    value = std::stoi(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw LoadError(what + ": '" + text + "' is not an integer");
  return value;
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? ", " : "") + items[i];
  return out;
}

struct Part {
  int region;
  Eigen::Vector3f center;
  Eigen::Vector3f radii;
  float weight;
};

// Head, torso, two arms, two legs; y is up.
const std::vector<Part>& body_parts() {
  static const std::vector<Part> parts{
      {0, {0.0f, 1.65f, 0.0f}, {0.10f, 0.12f, 0.10f}, 0.10f},
      {1, {0.0f, 1.20f, 0.0f}, {0.18f, 0.30f, 0.11f}, 0.34f},
      {2, {-0.26f, 1.20f, 0.0f}, {0.05f, 0.30f, 0.05f}, 0.08f},
      {2, {0.26f, 1.20f, 0.0f}, {0.05f, 0.30f, 0.05f}, 0.08f},
      {3, {-0.09f, 0.45f, 0.0f}, {0.075f, 0.45f, 0.075f}, 0.20f},
      {3, {0.09f, 0.45f, 0.0f}, {0.075f, 0.45f, 0.075f}, 0.20f},
  };
  return parts;
}

}  // namespace

std::vector<std::uint8_t> encode_cloud(const PointCloud& cloud) {
  cloud.validate();
  io::ByteWriter w;
  w.put_magic("OGPC");
  w.put(kCloudVersion);
  w.put(static_cast<std::uint32_t>(cloud.size()));
  w.put(kCloudChannels);
  for (Index i = 0; i < cloud.size(); ++i) {
    for (int d = 0; d < 3; ++d) w.put(cloud.positions(i, d));
    for (int d = 0; d < 3; ++d) w.put(cloud.colors(i, d));
  }
  return w.take();
}

PointCloud decode_cloud(std::span<const std::uint8_t> bytes, const std::string& what) {
  io::ByteReader r(bytes, what);
  r.expect_magic("OGPC");
  const std::size_t version_at = r.offset();
  const auto version = r.get<std::uint16_t>();
  if (version != kCloudVersion) r.fail("unsupported version " + std::to_string(version), version_at);
  const std::size_t m_at = r.offset();
  const auto m = r.get<std::uint32_t>();
  if (m == 0) r.fail("cloud has no points", m_at);
  const std::size_t channels_at = r.offset();
  const auto channels = r.get<std::uint32_t>();
  if (channels != kCloudChannels) r.fail("expected 6 channels, got " + std::to_string(channels), channels_at);
  const std::size_t need = static_cast<std::size_t>(m) * kCloudChannels * sizeof(float);
  if (r.remaining() < need) {
    r.fail("truncated point data (" + std::to_string(need) + " bytes expected, " + std::to_string(r.remaining()) +
           " present)");
  }
  PointCloud c;
  c.positions.resize(m, 3);
  c.colors.resize(m, 3);
  for (Index i = 0; i < static_cast<Index>(m); ++i) {
    for (int d = 0; d < 3; ++d) c.positions(i, d) = r.get<float>();
    for (int d = 0; d < 3; ++d) c.colors(i, d) = r.get<float>();
  }
  if (r.remaining() != 0) r.fail(std::to_string(r.remaining()) + " trailing bytes");
  return c;
}

void write_cloud(const PointCloud& cloud, const std::filesystem::path& path) {
  io::write_file(path, encode_cloud(cloud));
}

PointCloud read_cloud(const std::filesystem::path& path) {
  return decode_cloud(io::read_file(path), path.string());
}

std::vector<SampleRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("manifest: cannot open " + path.string());
  std::vector<SampleRecord> out;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    const std::string where = "manifest " + path.string() + " line " + std::to_string(number);
    if (f.size() != 4) throw LoadError(where + ": expected 4 tab-separated fields, got " + std::to_string(f.size()));
    if (out.empty() && f[0] == "path" && f[1] == "identity") continue;
    SampleRecord r{f[0], parse_int(f[1], where), parse_int(f[2], where), f[3]};
    if (r.identity < -1) throw LoadError(where + ": identity must be >= 0 (or -1 for a distractor)");
    if (r.camera < 0) throw LoadError(where + ": camera must be >= 0");
    out.push_back(std::move(r));
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, std::span<const SampleRecord> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("manifest: cannot write " + path.string());
  for (const auto& r : records) out << r.path << '\t' << r.identity << '\t' << r.camera << '\t' << r.split << '\n';
}

LabelMap LabelMap::fit(std::span<const int> identities) {
  LabelMap map;
  const std::set<int> unique(identities.begin(), identities.end());
  for (int id : unique) {
    map.labels_[id] = static_cast<int>(map.identities_.size());
    map.identities_.push_back(id);
  }
  return map;
}

int LabelMap::label(int identity) const {
  auto it = labels_.find(identity);
  if (it == labels_.end()) throw LabelError("label map has no identity " + std::to_string(identity));
  return it->second;
}

int LabelMap::identity(int label) const {
  if (label < 0 || label >= static_cast<int>(identities_.size())) {
    throw LabelError("label " + std::to_string(label) + " outside [0," + std::to_string(identities_.size()) + ")");
  }
  return identities_[label];
}

void LabelMap::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw LoadError("label map: cannot write " + path.string());
  for (std::size_t l = 0; l < identities_.size(); ++l) out << identities_[l] << '\t' << l << '\n';
}

LabelMap LabelMap::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("label map: cannot open " + path.string());
  LabelMap map;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    const std::string where = "label map " + path.string() + " line " + std::to_string(number);
    if (f.size() != 2) throw LoadError(where + ": expected identity<TAB>label");
    const int id = parse_int(f[0], where), label = parse_int(f[1], where);
    if (label != static_cast<int>(map.identities_.size()) || map.labels_.count(id)) {
      throw LoadError(where + ": labels must be contiguous and identities unique");
    }
    map.labels_[id] = label;
    map.identities_.push_back(id);
  }
  return map;
}

Split load_split(const std::filesystem::path& manifest, const std::string& split, const LabelMap* labels,
                 const std::filesystem::path& label_map_out) {
  if (split != "train" && split != "query" && split != "gallery") {
    throw LoadError("unknown split '" + split + "' (expected train, query or gallery)");
  }
  const auto records = read_manifest(manifest);
  const auto base = manifest.parent_path();
  Split out;
  std::vector<std::string> offenders;
  for (const auto& r : records) {
    if (r.split != "train" && r.split != "query" && r.split != "gallery") {
      offenders.push_back(r.path + " (unknown split '" + r.split + "')");
      continue;
    }
    if (r.split != split) continue;
    const std::filesystem::path p = std::filesystem::path(r.path).is_absolute() ? std::filesystem::path(r.path) : base / r.path;
    Sample s;
    s.identity = r.identity;
    s.camera = r.camera;
    s.path = p.string();
    try {
      s.cloud = read_cloud(p);
      s.cloud.validate();
    } catch (const Error& e) {
      offenders.push_back(std::filesystem::exists(p) ? p.string() + " (" + e.what() + ")" : p.string() + " (missing)");
      continue;
    }
    out.samples.push_back(std::move(s));
  }
  if (!offenders.empty()) {
    throw LoadError("load_split: " + std::to_string(offenders.size()) + " bad entries: " + join(offenders));
  }
  if (split == "train") {
    if (labels) {
      out.labels = *labels;
    } else {
      std::vector<int> ids;
      for (const auto& s : out.samples) ids.push_back(s.identity);
      out.labels = LabelMap::fit(ids);
    }
    for (auto& s : out.samples) s.label = out.labels.label(s.identity);
    if (!label_map_out.empty()) out.labels.save(label_map_out);
  }
  return out;
}

void SyntheticSpec::validate() const {
  if (num_identities < 1) throw ConfigError("synthetic: num_identities must be at least 1");
  if (samples_per_identity < 1) throw ConfigError("synthetic: samples_per_identity must be at least 1");
  if (test_identities < 0) throw ConfigError("synthetic: test_identities must be non-negative");
  if (test_identities > 0 && (query_per_identity < 1 || gallery_per_identity < 1)) {
    throw ConfigError("synthetic: held-out identities need at least one query and one gallery sample");
  }
  if (points_per_cloud < 1) throw ConfigError("synthetic: points_per_cloud must be at least 1");
  if (color_signature_dim < 1) throw ConfigError("synthetic: color_signature_dim must be at least 1");
  if (!(pose_noise >= 0.0)) throw ConfigError("synthetic: pose_noise must be non-negative");
  if (!(camera_cast >= 0.0 && camera_cast < 1.0)) throw ConfigError("synthetic: camera_cast must be in [0, 1)");
}

BodyTemplate random_body(const SyntheticSpec& spec, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> color(0.1f, 0.9f), height(0.9f, 1.1f), width(0.85f, 1.15f);
  BodyTemplate b;
  for (Index r = 0; r < spec.color_signature_dim; ++r) {
    const float red = color(rng), green = color(rng), blue = color(rng);
    b.region_colors.emplace_back(red, green, blue);
  }
  b.height = height(rng);
  b.width = width(rng);
  return b;
}

void normalize_positions(PointCloud& cloud) {
  const Eigen::RowVector3f mean = cloud.positions.colwise().mean();
  cloud.positions.rowwise() -= mean;
  const float radius = cloud.positions.rowwise().norm().maxCoeff();
  if (radius > 0.0f) cloud.positions /= radius;
}

std::vector<Eigen::Vector3f> camera_gains(const SyntheticSpec& spec, Index count) {
  std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ull);
  const auto a = static_cast<float>(spec.camera_cast);
  std::uniform_real_distribution<float> gain(1.0f - a, 1.0f + a);
  std::vector<Eigen::Vector3f> out;
  for (Index c = 0; c < count; ++c) {
    const float r = gain(rng), g = gain(rng), b = gain(rng);
    out.emplace_back(r, g, b);
  }
  return out;
}

PointCloud sample_body(const BodyTemplate& body, const SyntheticSpec& spec, std::mt19937_64& rng,
                       const Eigen::Vector3f& gain) {
  const auto& parts = body_parts();
  const Index m = spec.points_per_cloud;
  std::vector<Index> counts;
  Index assigned = 0;
  for (const auto& p : parts) {
    counts.push_back(static_cast<Index>(std::floor(p.weight * static_cast<float>(m))));
    assigned += counts.back();
  }
  counts[1] += m - assigned;

  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::uniform_real_distribution<float> unit(-1.0f, 1.0f), light(0.75f, 1.25f);
  const float angle = static_cast<float>(std::numbers::pi * spec.pose_noise) * unit(rng);
  const Eigen::Vector3f shift(0.3f * static_cast<float>(spec.pose_noise) * unit(rng), 0.0f,
                              0.3f * static_cast<float>(spec.pose_noise) * unit(rng));
  const float illumination = light(rng);
  const float c = std::cos(angle), s = std::sin(angle);

  PointCloud cloud;
  cloud.positions.resize(m, 3);
  cloud.colors.resize(m, 3);
  const Eigen::Vector3f scale(body.width, body.height, body.width);
  Index row = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Part& part = parts[k];
    const Eigen::Vector3f& base = body.region_colors[part.region % body.region_colors.size()];
    for (Index i = 0; i < counts[k]; ++i, ++row) {
      Eigen::Vector3f dir(normal(rng), normal(rng), normal(rng));
      const float len = dir.norm();
      dir = len > 0.0f ? Eigen::Vector3f(dir / len) : Eigen::Vector3f::UnitY();
      const Eigen::Vector3f local = (part.center + part.radii.cwiseProduct(dir)).cwiseProduct(scale);
      const Eigen::Vector3f rotated(c * local.x() + s * local.z(), local.y(), -s * local.x() + c * local.z());
      for (int d = 0; d < 3; ++d) {
        cloud.positions(row, d) = rotated[d] + shift[d] + 0.01f * normal(rng);
        cloud.colors(row, d) = std::clamp(base[d] * gain[d] * illumination + 0.02f * normal(rng), 0.0f, 1.0f);
      }
    }
  }
  normalize_positions(cloud);
  return cloud;
}

std::vector<SampleRecord> generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& root) {
  spec.validate();
  std::filesystem::create_directories(root / "clouds");
  std::mt19937_64 rng(spec.seed);
  std::vector<SampleRecord> records;
  const auto gains = camera_gains(spec, std::max<Index>(6, spec.query_per_identity + spec.gallery_per_identity));
  auto emit = [&](const BodyTemplate& body, int id, int camera, const std::string& split, Index j) {
    char name[64];
    std::snprintf(name, sizeof name, "clouds/id%04d_%s_%03lld.ogpc", id, split.c_str(), static_cast<long long>(j));
    write_cloud(sample_body(body, spec, rng, gains[camera]), root / name);
    records.push_back({name, id, camera, split});
  };
  const Index total = spec.num_identities + spec.test_identities;
  for (Index id = 0; id < total; ++id) {
    const BodyTemplate body = random_body(spec, rng);
    if (id < spec.num_identities) {
      for (Index j = 0; j < spec.samples_per_identity; ++j) emit(body, static_cast<int>(id), static_cast<int>(j % 6), "train", j);
    } else {
      for (Index j = 0; j < spec.query_per_identity; ++j) emit(body, static_cast<int>(id), static_cast<int>(j), "query", j);
      for (Index j = 0; j < spec.gallery_per_identity; ++j) {
        emit(body, static_cast<int>(id), static_cast<int>(spec.query_per_identity + j), "gallery", j);
      }
    }
  }
  write_manifest(root / "manifest.tsv", records);
  return records;
}

}  // namespace ognet
