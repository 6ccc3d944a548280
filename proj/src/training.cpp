#include "ognet/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <random>

#include "ognet/error.hpp"

namespace ognet {

namespace {

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid_of(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// Log-sum-exp of `v`, leaving softmax weights in `w`.
double log_sum_exp(const std::vector<double>& v, std::vector<double>& w) {
  const double mx = *std::max_element(v.begin(), v.end());
  w.resize(v.size());
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) s += (w[i] = std::exp(v[i] - mx));
  for (double& x : w) x /= s;
  return mx + std::log(s);
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

template <typename Scalar>
CircleLossResult<Scalar> circle_loss_from_similarity(const Var<Scalar>& similarity, std::span<const int> labels,
                                                     const CircleLossOptions& options) {
  const Matrix<Scalar>& s = similarity.value();
  const Index n = s.rows();
  if (s.cols() != n) throw DimensionError("circle_loss: similarity must be square");
  if (static_cast<Index>(labels.size()) != n) {
    throw LabelError("circle_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  }
  if (!(options.gamma > 0.0)) throw ParameterError("circle_loss: gamma must be positive");
  const double g = options.gamma, m = options.margin;

  // d loss_i / d s_ij, before averaging.
  Matrix<double> ds = Matrix<double>::Zero(n, n);
  double total = 0.0;
  Index anchors = 0;
  std::vector<double> a, b, wa, wb;
  std::vector<Index> neg, pos;
  for (Index i = 0; i < n; ++i) {
    neg.clear();
    pos.clear();
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      (labels[j] == labels[i] ? pos : neg).push_back(j);
    }
    if (pos.empty() || neg.empty()) continue;
    ++anchors;
    a.clear();
    b.clear();
    for (Index j : neg) {
      const double sn = s(i, j);
      a.push_back(g * std::max(0.0, sn + m) * (sn - m));
    }
    for (Index j : pos) {
      const double sp = s(i, j);
      b.push_back(-g * std::max(0.0, 1.0 + m - sp) * (sp - (1.0 - m)));
    }
    const double z = log_sum_exp(a, wa) + log_sum_exp(b, wb);
    total += softplus(z);
    const double dz = sigmoid_of(z);
    for (std::size_t t = 0; t < neg.size(); ++t) {
      const double sn = s(i, neg[t]);
      const double alpha = std::max(0.0, sn + m);
      const double dalpha = sn + m > 0 ? 1.0 : 0.0;
      ds(i, neg[t]) = dz * wa[t] * g * (dalpha * (sn - m) + alpha);
    }
    for (std::size_t t = 0; t < pos.size(); ++t) {
      const double sp = s(i, pos[t]);
      const double alpha = std::max(0.0, 1.0 + m - sp);
      const double dalpha = 1.0 + m - sp > 0 ? -1.0 : 0.0;
      ds(i, pos[t]) = -dz * wb[t] * g * (dalpha * (sp - (1.0 - m)) + alpha);
    }
  }

  CircleLossResult<Scalar> result;
  result.anchors = anchors;
  result.warning = anchors == 0;
  const double inv = anchors ? 1.0 / static_cast<double>(anchors) : 0.0;
  Matrix<Scalar> out(1, 1);
  out(0, 0) = static_cast<Scalar>(total * inv);
  Matrix<Scalar> grad = (ds * inv).template cast<Scalar>();
  const std::size_t id = similarity.id();
  result.loss = similarity.tape().record(std::move(out), Shape{}, {similarity},
                                         [id, grad = std::move(grad)](Tape<Scalar>& t, const Matrix<Scalar>& go) {
                                           t.accumulate(id, grad * go(0, 0));
                                         });
  return result;
}

template <typename Scalar>
CircleLossResult<Scalar> circle_loss(const Var<Scalar>& embeddings, std::span<const int> labels,
                                     const CircleLossOptions& options) {
  return circle_loss_from_similarity(gram(l2_normalize_rows(embeddings)), labels, options);
}

template <typename Scalar>
Adam<Scalar>::Adam(TensorList<Scalar> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  if (!(options_.beta1 >= 0.0 && options_.beta1 < 1.0) || !(options_.beta2 >= 0.0 && options_.beta2 < 1.0)) {
    throw ParameterError("adam: betas must lie in [0,1)");
  }
  if (!(options_.eps > 0.0)) throw ParameterError("adam: eps must be positive");
  for (const auto& p : params_) {
    const Matrix<Scalar> zero = Matrix<Scalar>::Zero(p.tensor->rows(), p.tensor->cols());
    m_.push_back(zero);
    v_.push_back(zero);
    vmax_.push_back(zero);
  }
}

template <typename Scalar>
void Adam<Scalar>::zero_grad() {
  for (auto& p : params_) p.tensor->zero_grad();
}

template <typename Scalar>
void Adam<Scalar>::step(double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ParameterError("adam: learning rate must be finite and non-negative");
  for (const auto& p : params_) {
    if (p.tensor->has_grad() && !p.tensor->grad().allFinite()) {
      throw NumericError("adam: non-finite gradient in " + p.name + " at step " + std::to_string(steps_ + 1));
    }
  }
  ++steps_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const double step_size = lr / c1;
  const double root_c2 = std::sqrt(c2);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<Scalar>& t = *params_[i].tensor;
    if (!t.has_grad()) t.zero_grad();
    const auto& grad = t.grad();
    m_[i] = Scalar(b1) * m_[i] + Scalar(1.0 - b1) * grad;
    v_[i] = Scalar(b2) * v_[i] + Scalar(1.0 - b2) * grad.cwiseProduct(grad);
    const Matrix<Scalar>* second = &v_[i];
    if (options_.amsgrad) {
      vmax_[i] = vmax_[i].cwiseMax(v_[i]);
      second = &vmax_[i];
    }
    const auto denom = (second->array().sqrt() / Scalar(root_c2)) + Scalar(options_.eps);
    t.data().array() -= Scalar(step_size) * m_[i].array() / denom;
  }
}

double cosine_lr(Index step, Index total_steps, double base_lr) {
  if (total_steps <= 0) throw ParameterError("cosine_lr: total_steps must be positive");
  if (step < 0 || step > total_steps) {
    throw ParameterError("cosine_lr: step " + std::to_string(step) + " outside [0," + std::to_string(total_steps) + "]");
  }
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

void TrainConfig::validate() const {
  if (batch < 2) throw ConfigError("train: batch must be at least 2");
  if (epochs < 1) throw ConfigError("train: epochs must be positive");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be positive");
  if (loss != "ce" && loss != "ce+circle") throw ConfigError("train: loss must be 'ce' or 'ce+circle', got '" + loss + "'");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("train: fraction must lie in (0,1]");
  if (!(circle.gamma > 0.0)) throw ConfigError("train: circle gamma must be positive");
  if (!(circle_weight >= 0.0)) throw ConfigError("train: circle weight must be non-negative");
  if (instances_per_identity < 0 || instances_per_identity == 1) {
    throw ConfigError("train: instances_per_identity must be 0 or at least 2");
  }
  if (instances_per_identity > 0 && batch % instances_per_identity != 0) {
    throw ConfigError("train: batch must be a multiple of instances_per_identity");
  }
  if (!(target_accuracy >= 0.0 && target_accuracy <= 1.0)) throw ConfigError("train: target_accuracy must lie in [0,1]");
  if (!(augment.scale_min > 0.0 && augment.scale_min <= augment.scale_max)) {
    throw ConfigError("train: augmentation scale range is invalid");
  }
  if (!(augment.jitter_sigma >= 0.0 && augment.jitter_clip >= 0.0)) throw ConfigError("train: jitter must be non-negative");
}

KeyValues TrainConfig::to_key_values() const {
  KeyValues kv;
  kv.set("batch", std::to_string(batch));
  kv.set("epochs", std::to_string(epochs));
  kv.set("lr", format_double(lr));
  kv.set("loss", loss);
  kv.set("circle_gamma", format_double(circle.gamma));
  kv.set("circle_margin", format_double(circle.margin));
  kv.set("circle_weight", format_double(circle_weight));
  kv.set("instances_per_identity", std::to_string(instances_per_identity));
  kv.set("fraction", format_double(fraction));
  kv.set("seed", std::to_string(seed));
  kv.set("target_accuracy", format_double(target_accuracy));
  kv.set("scale_min", format_double(augment.scale_min));
  kv.set("scale_max", format_double(augment.scale_max));
  kv.set("jitter_sigma", format_double(augment.jitter_sigma));
  kv.set("jitter_clip", format_double(augment.jitter_clip));
  return kv;
}

TrainConfig TrainConfig::from_key_values(const KeyValues& kv) {
  TrainConfig c;
  c.batch = kv.get_int("batch", c.batch);
  c.epochs = kv.get_int("epochs", c.epochs);
  c.lr = kv.get_double("lr", c.lr);
  c.loss = kv.get("loss", c.loss);
  c.circle.gamma = kv.get_double("circle_gamma", c.circle.gamma);
  c.circle.margin = kv.get_double("circle_margin", c.circle.margin);
  c.circle_weight = kv.get_double("circle_weight", c.circle_weight);
  c.instances_per_identity = kv.get_int("instances_per_identity", c.instances_per_identity);
  c.fraction = kv.get_double("fraction", c.fraction);
  const long long seed = kv.get_int("seed", static_cast<long long>(c.seed));
  if (seed < 0) throw ConfigError("config: key 'seed' must be non-negative");
  c.seed = static_cast<std::uint64_t>(seed);
  c.target_accuracy = kv.get_double("target_accuracy", c.target_accuracy);
  c.augment.scale_min = kv.get_double("scale_min", c.augment.scale_min);
  c.augment.scale_max = kv.get_double("scale_max", c.augment.scale_max);
  c.augment.jitter_sigma = kv.get_double("jitter_sigma", c.augment.jitter_sigma);
  c.augment.jitter_clip = kv.get_double("jitter_clip", c.augment.jitter_clip);
  c.validate();
  return c;
}

namespace {

std::vector<std::vector<Index>> make_batches(std::span<const LabeledCloud> data, const TrainConfig& config,
                                             std::mt19937_64& rng) {
  const Index n = static_cast<Index>(data.size());
  std::vector<std::vector<Index>> batches;
  std::vector<Index> order;
  if (config.instances_per_identity == 0) {
    order.resize(n);
    for (Index i = 0; i < n; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
  } else {
    std::map<int, std::vector<Index>> by_label;
    for (Index i = 0; i < n; ++i) by_label[data[i].label].push_back(i);
    std::vector<std::vector<Index>> runs;
    for (auto& [label, members] : by_label) {
      std::shuffle(members.begin(), members.end(), rng);
      for (std::size_t s = 0; s + 2 <= members.size(); s += config.instances_per_identity) {
        const std::size_t e = std::min(members.size(), s + static_cast<std::size_t>(config.instances_per_identity));
        if (e - s >= 2) runs.emplace_back(members.begin() + s, members.begin() + e);
      }
    }
    std::shuffle(runs.begin(), runs.end(), rng);
    for (const auto& r : runs) order.insert(order.end(), r.begin(), r.end());
  }
  for (std::size_t s = 0; s < order.size(); s += config.batch) {
    const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(config.batch));
    // Batch normalization needs two samples.
    if (e - s >= 2) batches.emplace_back(order.begin() + s, order.begin() + e);
  }
  return batches;
}

}  // namespace

TrainResult train(OgNet<float>& net, std::span<const LabeledCloud> data, const TrainConfig& config,
                  const std::function<void(const EpochStats&)>& on_epoch) {
  config.validate();
  if (data.size() < 2) throw BatchSizeError("train: need at least two samples");
  const Index classes = net.config().num_classes;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!data[i].cloud) throw ParameterError("train: sample " + std::to_string(i) + " has no cloud");
    if (data[i].label < 0 || data[i].label >= classes) {
      throw LabelError("train: sample " + std::to_string(i) + " has label " + std::to_string(data[i].label) +
                       " outside [0," + std::to_string(classes) + ")");
    }
  }
  const bool use_circle = config.loss == "ce+circle";

  std::ofstream log;
  if (!config.out_dir.empty()) {
    std::filesystem::create_directories(config.out_dir);
    KeyValues kv = net.config().to_key_values();
    kv.merge(config.to_key_values());
    kv.save(config.out_dir / "train_config.txt");
    log.open(config.out_dir / "train_log.tsv");
    if (!log) throw LoadError("train: cannot write " + (config.out_dir / "train_log.tsv").string());
    log << "epoch\tlr\tloss\tacc\n";
  }

  std::mt19937_64 rng(config.seed);
  std::mt19937_64 dropout_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  Adam<float> adam(net.parameters());

  std::mt19937_64 probe = rng;
  const Index per_epoch = static_cast<Index>(make_batches(data, config, probe).size());
  if (per_epoch == 0) throw BatchSizeError("train: no batch with at least two samples");
  const Index total_steps = per_epoch * config.epochs;

  TrainResult result;
  Index step = 0;
  for (Index epoch = 0; epoch < config.epochs; ++epoch) {
    EpochStats stats;
    stats.epoch = epoch;
    stats.lr = cosine_lr(step, total_steps, config.lr);
    double loss_sum = 0.0, ce_sum = 0.0, circle_sum = 0.0;
    Index correct = 0, seen = 0, circle_batches = 0;
    for (const auto& batch : make_batches(data, config, rng)) {
      std::vector<PointCloud> clouds;
      std::vector<int> labels;
      clouds.reserve(batch.size());
      for (Index i : batch) {
        clouds.push_back(augment(uniform_subsample(*data[i].cloud, config.fraction, rng()), config.augment, rng));
        labels.push_back(data[i].label);
      }
      std::vector<const PointCloud*> ptrs;
      for (const auto& c : clouds) ptrs.push_back(&c);
      const auto input = make_cloud_batch<float>(ptrs);

      const std::string where = " at epoch " + std::to_string(epoch) + " step " + std::to_string(step);
      Tape<float> tape;
      ForwardOutput<float> out;
      try {
        out = net.forward(tape, input, Mode::kTrain, &dropout_rng);
      } catch (const NumericError& e) {
        throw NumericError(std::string("train: ") + e.what() + where);
      }
      auto ce = identity_loss(out.logits, labels);
      auto loss = ce;
      const double ce_value = ce.value()(0, 0);
      double circle_value = 0.0;
      if (use_circle) {
        auto circle = circle_loss(out.embedding, labels, config.circle);
        if (circle.warning) {
          ++stats.circle_warnings;
        } else {
          circle_value = circle.loss.value()(0, 0);
          ++circle_batches;
          loss = add(loss, scale(circle.loss, static_cast<float>(config.circle_weight)));
        }
      }
      const double loss_value = loss.value()(0, 0);
      if (!std::isfinite(loss_value)) {
        throw NumericError("train: loss diverged to " + format_double(loss_value) + where);
      }
      adam.zero_grad();
      tape.backward(loss);
      try {
        adam.step(cosine_lr(step, total_steps, config.lr));
      } catch (const NumericError& e) {
        throw NumericError(std::string("train: ") + e.what() + where);
      }
      ++step;

      const Index bn = static_cast<Index>(batch.size());
      const auto& logits = out.logits.value();
      for (Index r = 0; r < bn; ++r) {
        Index arg;
        logits.row(r).maxCoeff(&arg);
        correct += arg == labels[r];
      }
      seen += bn;
      loss_sum += loss_value * bn;
      ce_sum += ce_value * bn;
      circle_sum += circle_value;
    }
    stats.loss = loss_sum / seen;
    stats.ce = ce_sum / seen;
    stats.circle = circle_batches ? circle_sum / circle_batches : 0.0;
    stats.accuracy = static_cast<double>(correct) / seen;
    result.history.push_back(stats);

    const bool best = result.best_epoch < 0 || stats.accuracy > result.best_accuracy;
    if (best) {
      result.best_epoch = epoch;
      result.best_accuracy = stats.accuracy;
    }
    if (!config.out_dir.empty()) {
      log << epoch << '\t' << format_double(stats.lr) << '\t' << format_double(stats.loss) << '\t'
          << format_double(stats.accuracy) << '\n'
          << std::flush;
      if (best) net.save(config.out_dir / "best.ogck");
      net.save(config.out_dir / "last.ogck");
    }
    if (on_epoch) on_epoch(stats);
    if (config.target_accuracy > 0.0 && stats.accuracy >= config.target_accuracy) {
      result.reached_target = true;
      break;
    }
  }
  return result;
}

#define OGNET_INSTANTIATE(S)                                                                                  \
  template CircleLossResult<S> circle_loss_from_similarity(const Var<S>&, std::span<const int>,               \
                                                           const CircleLossOptions&);                         \
  template CircleLossResult<S> circle_loss(const Var<S>&, std::span<const int>, const CircleLossOptions&);    \
  template class Adam<S>;

OGNET_INSTANTIATE(float)
OGNET_INSTANTIATE(double)

#undef OGNET_INSTANTIATE

}  // namespace ognet
