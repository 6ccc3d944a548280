#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ognet/geometry.hpp"

namespace ognet {

/// OGPC cloud file: "OGPC", u16 version, u32 m, u32 channels (6), then m rows
/// of f32 x, y, z, r, g, b. Little-endian.
std::vector<std::uint8_t> encode_cloud(const PointCloud& cloud);
PointCloud decode_cloud(std::span<const std::uint8_t> bytes, const std::string& what = "cloud");
void write_cloud(const PointCloud& cloud, const std::filesystem::path& path);
PointCloud read_cloud(const std::filesystem::path& path);

struct SampleRecord {
  std::string path;  // relative paths resolve against the manifest's directory
  int identity = 0;  // -1 marks a distractor
  int camera = 0;
  std::string split;  // train, query or gallery
};

/// TSV lines `path<TAB>identity<TAB>camera<TAB>split`; blank lines and a
/// leading header line are skipped.
std::vector<SampleRecord> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, std::span<const SampleRecord> records);

/// Bijection between identities and contiguous labels [0, K), ordered by identity.
class LabelMap {
 public:
  static LabelMap fit(std::span<const int> identities);

  int label(int identity) const;
  int identity(int label) const;
  Index size() const { return static_cast<Index>(labels_.size()); }

  /// TSV lines `identity<TAB>label`.
  void save(const std::filesystem::path& path) const;
  static LabelMap load(const std::filesystem::path& path);

  bool operator==(const LabelMap&) const = default;

 private:
  std::map<int, int> labels_;
  std::vector<int> identities_;
};

struct Sample {
  PointCloud cloud;
  int identity = 0;
  int camera = 0;
  int label = -1;  // contiguous label; -1 outside the training split
  std::string path;
};

struct Split {
  std::vector<Sample> samples;
  LabelMap labels;
};

/// Samples of one split in manifest order. The training split gets contiguous
/// labels, from `labels` when given and fitted otherwise; with `label_map_out`
/// set, the map used is written there.
///
/// Throws LoadError naming every offending file when files are missing or
/// unreadable, and for an unknown split name.
Split load_split(const std::filesystem::path& manifest, const std::string& split, const LabelMap* labels = nullptr,
                 const std::filesystem::path& label_map_out = {});

struct SyntheticSpec {
  /// Training identities, each with samples_per_identity clouds.
  Index num_identities = 32;
  Index samples_per_identity = 12;
  /// Held-out identities, numbered after the training ones, each with
  /// query_per_identity + gallery_per_identity clouds on distinct cameras.
  Index test_identities = 0;
  Index query_per_identity = 2;
  Index gallery_per_identity = 4;
  Index points_per_cloud = 8192;
  /// Body regions (head, torso, arms, legs) with their own color; extra
  /// regions reuse earlier colors.
  Index color_signature_dim = 4;
  /// Scales the rotation range (full turn at 1) and the translation.
  double pose_noise = 1.0;
  /// Each camera scales r, g and b by its own gain drawn from
  /// U(1 - camera_cast, 1 + camera_cast).
  double camera_cast = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// One identity's body: region colors and shape scales.
struct BodyTemplate {
  std::vector<Eigen::Vector3f> region_colors;
  float height = 1.0f;
  float width = 1.0f;
};

BodyTemplate random_body(const SyntheticSpec& spec, std::mt19937_64& rng);

/// Per-camera color gains for cameras [0, count), fixed by spec.seed.
std::vector<Eigen::Vector3f> camera_gains(const SyntheticSpec& spec, Index count);

/// One posed, lit, jittered sample, normalized to zero mean and unit max radius.
PointCloud sample_body(const BodyTemplate& body, const SyntheticSpec& spec, std::mt19937_64& rng,
                       const Eigen::Vector3f& gain = Eigen::Vector3f::Ones());

/// Writes clouds under `root/clouds/` and `root/manifest.tsv`; returns the records.
std::vector<SampleRecord> generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& root);

/// Shifts positions to zero mean and scales them to unit max radius.
void normalize_positions(PointCloud& cloud);

}  // namespace ognet
