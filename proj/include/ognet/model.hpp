#pragma once

#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "ognet/autodiff.hpp"
#include "ognet/checkpoint.hpp"
#include "ognet/config.hpp"
#include "ognet/layers.hpp"

namespace ognet {

struct OgNetConfig {
  std::string variant = "ogn";
  std::vector<Index> channel_schedule{64, 128, 256, 512};
  std::vector<Index> point_schedule{768, 384, 192, 96};
  Index k = 20;
  std::vector<Index> rates{8, 16, 32};
  bool shortcut = false;
  double dropout_p = 0.7;
  Index embedding_dim = 512;
  Index num_classes = 751;
  /// Last module builds its graph on appearance features ++ positions.
  bool last_graph_appearance = true;
  /// Feed xyz into the appearance slot instead of rgb.
  bool no_rgb = false;
  bool use_se = true;
  bool use_graph_conv = true;
  Aggregator aggregator = Aggregator::kSum;
  Index se_reduction = 4;
  Index bottleneck_divisor = 4;
  std::uint64_t seed = 0;

  void validate() const;
  KeyValues to_key_values() const;
  static OgNetConfig from_key_values(const KeyValues& kv);
};

/// Published variants: "ogn", "ogn_small", "ogn_deep".
OgNetConfig variant_config(const std::string& variant, Index num_classes);

/// Per-module settings. A module downsamples when its width differs from the
/// previous one (the first always does), consuming the next point target.
std::vector<OmniScaleConfig> module_layout(const OgNetConfig& config);

struct ForwardTrace {
  std::vector<ModuleTrace> modules;
  Index pooled_width = 0;
  Index embedding_width = 0;
};

template <typename Scalar>
struct ForwardOutput {
  Var<Scalar> embedding;  // post-BN head output
  Var<Scalar> logits;
};

/// Input batch: `batch` clouds of `points` rows each, stacked; columns are
/// x, y, z, r, g, b.
template <typename Scalar>
struct CloudBatch {
  Matrix<Scalar> data;
  Index batch = 1;
  Index points = 0;
};

template <typename Scalar>
CloudBatch<Scalar> make_cloud_batch(std::span<const PointCloud* const> clouds);

template <typename Scalar>
class OgNet {
 public:
  explicit OgNet(OgNetConfig config);

  ForwardOutput<Scalar> forward(Tape<Scalar>& tape, const CloudBatch<Scalar>& input, Mode mode,
                                std::mt19937_64* dropout_rng = nullptr, ForwardTrace* trace = nullptr);

  /// Eval-mode embeddings, n x embedding_dim.
  Matrix<Scalar> extract_embedding(const CloudBatch<Scalar>& input);

  const OgNetConfig& config() const { return config_; }
  std::vector<OmniScaleModule<Scalar>>& modules() { return modules_; }
  Linear<Scalar>& head() { return head_; }
  BatchNorm<Scalar>& head_bn() { return head_bn_; }
  Linear<Scalar>& classifier() { return classifier_; }

  TensorList<Scalar> parameters();
  TensorList<Scalar> buffers();
  /// All trainable entries.
  Index count_parameters();
  /// Trainable entries on the embedding path (classifier excluded).
  Index count_embedding_parameters();

  Checkpoint to_checkpoint();
  void load_state(const Checkpoint& checkpoint);
  void save(const std::filesystem::path& path) { to_checkpoint().save(path); }
  static OgNet load(const std::filesystem::path& path);

 private:
  OgNetConfig config_;
  std::vector<OmniScaleModule<Scalar>> modules_;
  Linear<Scalar> head_;
  BatchNorm<Scalar> head_bn_;
  Linear<Scalar> classifier_;
};

Index count_entries(const TensorList<float>& list);
Index count_entries(const TensorList<double>& list);

}  // namespace ognet
