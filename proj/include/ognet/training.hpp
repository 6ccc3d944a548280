#pragma once

#include <filesystem>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ognet/autodiff.hpp"
#include "ognet/config.hpp"
#include "ognet/geometry.hpp"
#include "ognet/model.hpp"

namespace ognet {

/// Identity classification loss.
template <typename Scalar>
Var<Scalar> identity_loss(const Var<Scalar>& logits, std::span<const int> labels) {
  return softmax_cross_entropy(logits, labels);
}

struct CircleLossOptions {
  double gamma = 32.0;
  double margin = 0.25;
};

template <typename Scalar>
struct CircleLossResult {
  Var<Scalar> loss;
  /// Anchors with at least one positive and one negative in the batch.
  Index anchors = 0;
  /// Set when no anchor qualified; the loss is then zero.
  bool warning = false;
};

/// Circle loss over a square similarity matrix, averaged over valid anchors.
///
/// L_i = log(1 + sum_n exp(g a_n (s_n - m)) * sum_p exp(-g a_p (s_p - 1 + m)))
/// with a_p = max(0, 1 + m - s_p) and a_n = max(0, s_n + m). The weights
/// a_p, a_n take part in differentiation.
template <typename Scalar>
CircleLossResult<Scalar> circle_loss_from_similarity(const Var<Scalar>& similarity, std::span<const int> labels,
                                                     const CircleLossOptions& options = {});

/// Circle loss on cosine similarities of the rows of `embeddings`.
template <typename Scalar>
CircleLossResult<Scalar> circle_loss(const Var<Scalar>& embeddings, std::span<const int> labels,
                                     const CircleLossOptions& options = {});

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool amsgrad = true;
};

/// Adam with bias correction; with amsgrad the running maximum of the second
/// moment replaces it in the denominator.
template <typename Scalar>
class Adam {
 public:
  Adam(TensorList<Scalar> params, AdamOptions options = {});

  /// Applies one update from the parameters' accumulated gradients. Throws
  /// NumericError, leaving everything untouched, if any gradient is not finite.
  void step(double lr);
  void zero_grad();

  Index steps() const { return steps_; }
  const TensorList<Scalar>& params() const { return params_; }
  const std::vector<Matrix<Scalar>>& first_moment() const { return m_; }
  const std::vector<Matrix<Scalar>>& second_moment() const { return v_; }
  const std::vector<Matrix<Scalar>>& max_second_moment() const { return vmax_; }

 private:
  TensorList<Scalar> params_;
  AdamOptions options_;
  std::vector<Matrix<Scalar>> m_, v_, vmax_;
  Index steps_ = 0;
};

/// 0.5 * base_lr * (1 + cos(pi * step / total_steps)).
double cosine_lr(Index step, Index total_steps, double base_lr = 8e-4);

struct TrainConfig {
  Index batch = 36;
  Index epochs = 1000;
  double lr = 8e-4;
  std::string loss = "ce";  // "ce" or "ce+circle"
  CircleLossOptions circle;
  double circle_weight = 1.0;
  AugmentParams augment;
  /// When positive, batches are built from runs of this many samples of one
  /// identity, so every anchor has positives.
  Index instances_per_identity = 0;
  /// Share of each cloud's points kept per training sample.
  double fraction = 0.5;
  std::uint64_t seed = 0;
  /// Stop after the first epoch whose training accuracy reaches this; 0 runs all epochs.
  double target_accuracy = 0.0;
  /// Where checkpoints and the metrics log go; empty keeps everything in memory.
  std::filesystem::path out_dir;

  void validate() const;
  KeyValues to_key_values() const;
  static TrainConfig from_key_values(const KeyValues& kv);
};

struct EpochStats {
  Index epoch = 0;
  double lr = 0.0;  // rate of the epoch's first step
  double loss = 0.0;
  double accuracy = 0.0;
  double ce = 0.0;
  double circle = 0.0;
  Index circle_warnings = 0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  Index best_epoch = -1;
  double best_accuracy = 0.0;
  bool reached_target = false;
};

struct LabeledCloud {
  const PointCloud* cloud = nullptr;
  int label = 0;
};

/// Seeded shuffled mini-batches; per sample a uniform subsample and an
/// augmentation, then forward, loss, backward and an Adam step with a cosine
/// schedule over all iterations. Writes `train_log.tsv`, `best.ogck`,
/// `last.ogck` and `train_config.txt` when an output directory is set.
///
/// Throws NumericError when the loss or a gradient stops being finite.
TrainResult train(OgNet<float>& net, std::span<const LabeledCloud> data, const TrainConfig& config,
                  const std::function<void(const EpochStats&)>& on_epoch = {});

}  // namespace ognet
