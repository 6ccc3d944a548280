#include "ognet/model.hpp"

#include <algorithm>

namespace ognet {

namespace {

std::string aggregator_name(Aggregator a) { return a == Aggregator::kSum ? "sum" : "max"; }

Aggregator parse_aggregator(const std::string& s) {
  if (s == "sum") return Aggregator::kSum;
  if (s == "max") return Aggregator::kMax;
  throw ConfigError("model: unknown aggregator '" + s + "' (expected sum or max)");
}

}  // namespace

void OgNetConfig::validate() const {
  if (channel_schedule.empty()) throw ConfigError("model: empty channel schedule");
  if (point_schedule.empty()) throw ConfigError("model: empty point schedule");
  for (std::size_t i = 1; i < point_schedule.size(); ++i) {
    if (point_schedule[i] >= point_schedule[i - 1]) {
      throw ConfigError("model: point schedule must be strictly decreasing");
    }
  }
  if (point_schedule.back() < 1) throw ConfigError("model: point targets must be positive");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("model: dropout_p must lie in [0,1)");
  if (num_classes < 2) throw ConfigError("model: need at least 2 classes, got " + std::to_string(num_classes));
  if (embedding_dim < 1) throw ConfigError("model: embedding_dim must be positive");
  if (k < 1) throw ConfigError("model: k must be positive");
  for (const auto& m : module_layout(*this)) m.validate();
}

KeyValues OgNetConfig::to_key_values() const {
  KeyValues kv;
  kv.set("variant", variant);
  kv.set("channels", format_list(channel_schedule));
  kv.set("points", format_list(point_schedule));
  kv.set("k", std::to_string(k));
  kv.set("rates", format_list(rates));
  kv.set("shortcut", shortcut ? "true" : "false");
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", dropout_p);
  kv.set("dropout", buf);
  kv.set("embedding_dim", std::to_string(embedding_dim));
  kv.set("num_classes", std::to_string(num_classes));
  kv.set("last_graph_appearance", last_graph_appearance ? "true" : "false");
  kv.set("no_rgb", no_rgb ? "true" : "false");
  kv.set("se", use_se ? "true" : "false");
  kv.set("graph_conv", use_graph_conv ? "true" : "false");
  kv.set("aggregator", aggregator_name(aggregator));
  kv.set("se_reduction", std::to_string(se_reduction));
  kv.set("bottleneck_divisor", std::to_string(bottleneck_divisor));
  kv.set("seed", std::to_string(seed));
  return kv;
}

OgNetConfig OgNetConfig::from_key_values(const KeyValues& kv) {
  OgNetConfig c;
  if (kv.has("variant") && kv.get("variant") != "custom") {
    c = variant_config(kv.get("variant"), kv.get_int("num_classes", c.num_classes));
  }
  c.channel_schedule = kv.get_list("channels", c.channel_schedule);
  c.point_schedule = kv.get_list("points", c.point_schedule);
  c.k = kv.get_int("k", c.k);
  c.rates = kv.get_list("rates", c.rates);
  c.shortcut = kv.get_bool("shortcut", c.shortcut);
  c.dropout_p = kv.get_double("dropout", c.dropout_p);
  c.embedding_dim = kv.get_int("embedding_dim", c.embedding_dim);
  c.num_classes = kv.get_int("num_classes", c.num_classes);
  c.last_graph_appearance = kv.get_bool("last_graph_appearance", c.last_graph_appearance);
  c.no_rgb = kv.get_bool("no_rgb", c.no_rgb);
  c.use_se = kv.get_bool("se", c.use_se);
  c.use_graph_conv = kv.get_bool("graph_conv", c.use_graph_conv);
  c.aggregator = parse_aggregator(kv.get("aggregator", aggregator_name(c.aggregator)));
  c.se_reduction = kv.get_int("se_reduction", c.se_reduction);
  c.bottleneck_divisor = kv.get_int("bottleneck_divisor", c.bottleneck_divisor);
  const long long seed = kv.get_int("seed", static_cast<long long>(c.seed));
  if (seed < 0) throw ConfigError("config: key 'seed' must be non-negative");
  c.seed = static_cast<std::uint64_t>(seed);
  c.validate();
  return c;
}

OgNetConfig variant_config(const std::string& variant, Index num_classes) {
  if (num_classes < 2) throw ConfigError("model: need at least 2 classes, got " + std::to_string(num_classes));
  OgNetConfig c;
  c.variant = variant;
  c.num_classes = num_classes;
  if (variant == "ogn") {
    c.channel_schedule = {64, 128, 256, 512};
  } else if (variant == "ogn_small") {
    c.channel_schedule = {48, 96, 192, 384};
  } else if (variant == "ogn_deep") {
    c.channel_schedule = {48, 96, 96, 192, 192, 384, 384};
    c.shortcut = true;
  } else {
    throw ConfigError("model: unknown variant '" + variant + "' (expected ogn, ogn_small or ogn_deep)");
  }
  return c;
}

std::vector<OmniScaleConfig> module_layout(const OgNetConfig& config) {
  std::vector<OmniScaleConfig> out;
  Index width = 3;
  std::size_t next_target = 0;
  for (std::size_t i = 0; i < config.channel_schedule.size(); ++i) {
    OmniScaleConfig m;
    m.in_channels = width;
    m.out_channels = config.channel_schedule[i];
    const bool down = i == 0 || m.out_channels != width;
    if (down) {
      if (next_target >= config.point_schedule.size()) {
        throw ConfigError("model: channel schedule has more downsampling stages than point targets");
      }
      m.downsample_to = config.point_schedule[next_target++];
    }
    m.k = config.k;
    m.rates = config.rates;
    m.shortcut = config.shortcut;
    m.use_se = config.use_se;
    m.use_graph_conv = config.use_graph_conv;
    m.aggregator = config.aggregator;
    m.se_reduction = config.se_reduction;
    m.bottleneck_divisor = config.bottleneck_divisor;
    m.graph_keys = GraphKeys::kPosition;
    out.push_back(m);
    width = m.out_channels;
  }
  if (next_target != config.point_schedule.size()) {
    throw ConfigError("model: " + std::to_string(config.point_schedule.size()) + " point targets but " +
                      std::to_string(next_target) + " downsampling stages");
  }
  if (config.last_graph_appearance) out.back().graph_keys = GraphKeys::kAppearancePosition;
  return out;
}

template <typename Scalar>
CloudBatch<Scalar> make_cloud_batch(std::span<const PointCloud* const> clouds) {
  if (clouds.empty()) throw BatchSizeError("make_cloud_batch: no clouds");
  CloudBatch<Scalar> b;
  b.batch = static_cast<Index>(clouds.size());
  b.points = clouds[0]->size();
  b.data.resize(b.batch * b.points, 6);
  for (Index s = 0; s < b.batch; ++s) {
    const PointCloud& c = *clouds[s];
    if (c.size() != b.points) {
      throw DimensionError("make_cloud_batch: cloud " + std::to_string(s) + " has " + std::to_string(c.size()) +
                           " points, expected " + std::to_string(b.points));
    }
    b.data.block(s * b.points, 0, b.points, 3) = c.positions.template cast<Scalar>();
    b.data.block(s * b.points, 3, b.points, 3) = c.colors.template cast<Scalar>();
  }
  return b;
}

template <typename Scalar>
OgNet<Scalar>::OgNet(OgNetConfig config) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  for (const auto& m : module_layout(config_)) modules_.emplace_back(m, rng);
  const Index width = config_.channel_schedule.back();
  head_ = Linear<Scalar>(2 * width, config_.embedding_dim, true, rng);
  head_bn_ = BatchNorm<Scalar>(config_.embedding_dim);
  classifier_ = Linear<Scalar>(config_.embedding_dim, config_.num_classes, true, rng);
}

template <typename Scalar>
ForwardOutput<Scalar> OgNet<Scalar>::forward(Tape<Scalar>& tape, const CloudBatch<Scalar>& input, Mode mode,
                                             std::mt19937_64* dropout_rng, ForwardTrace* trace) {
  const Index n = input.batch, m = input.points;
  if (input.data.rows() != n * m || input.data.cols() != 6) {
    throw DimensionError("forward: expected " + std::to_string(n * m) + "x6 input, got " +
                         std::to_string(input.data.rows()) + "x" + std::to_string(input.data.cols()));
  }
  if (m < config_.point_schedule.front()) {
    throw DimensionError("forward: " + std::to_string(m) + " points is below the first target " +
                         std::to_string(config_.point_schedule.front()));
  }
  if (!input.data.allFinite()) throw NumericError("forward: input contains non-finite values");
  PointBatch<Scalar> x;
  x.batch = n;
  x.points = m;
  x.positions = input.data.leftCols(3).template cast<double>();
  const Index appearance = config_.no_rgb ? 0 : 3;
  x.features = tape.constant(input.data.middleCols(appearance, 3));

  if (trace) *trace = ForwardTrace{};
  for (auto& mod : modules_) {
    ModuleTrace mt;
    x = mod(x, mode, trace ? &mt : nullptr);
    if (trace) trace->modules.push_back(std::move(mt));
  }

  const std::vector<Var<Scalar>> pools{segment_max(x.features, x.points), segment_mean(x.features, x.points)};
  auto pooled = concat(std::span<const Var<Scalar>>(pools), 1);
  auto embedding = head_bn_(head_(pooled), mode);
  auto logits = classifier_(dropout(embedding, config_.dropout_p, mode, dropout_rng));
  if (trace) {
    trace->pooled_width = pooled.cols();
    trace->embedding_width = embedding.cols();
  }
  return {embedding, logits};
}

template <typename Scalar>
Matrix<Scalar> OgNet<Scalar>::extract_embedding(const CloudBatch<Scalar>& input) {
  Tape<Scalar> tape;
  return forward(tape, input, Mode::kEval).embedding.value();
}

template <typename Scalar>
TensorList<Scalar> OgNet<Scalar>::parameters() {
  TensorList<Scalar> out;
  for (std::size_t i = 0; i < modules_.size(); ++i) modules_[i].collect(out, "module" + std::to_string(i));
  head_.collect(out, "head.fc");
  head_bn_.collect(out, "head.bn");
  classifier_.collect(out, "classifier");
  return out;
}

template <typename Scalar>
TensorList<Scalar> OgNet<Scalar>::buffers() {
  TensorList<Scalar> out;
  for (std::size_t i = 0; i < modules_.size(); ++i) modules_[i].collect_buffers(out, "module" + std::to_string(i));
  head_bn_.collect_buffers(out, "head.bn");
  return out;
}

Index count_entries(const TensorList<float>& list) {
  Index total = 0;
  for (const auto& p : list) total += p.tensor->size();
  return total;
}

Index count_entries(const TensorList<double>& list) {
  Index total = 0;
  for (const auto& p : list) total += p.tensor->size();
  return total;
}

template <typename Scalar>
Index OgNet<Scalar>::count_parameters() {
  return count_entries(parameters());
}

template <typename Scalar>
Index OgNet<Scalar>::count_embedding_parameters() {
  TensorList<Scalar> cls;
  classifier_.collect(cls, "classifier");
  return count_parameters() - count_entries(cls);
}

template <typename Scalar>
Checkpoint OgNet<Scalar>::to_checkpoint() {
  Checkpoint ck;
  ck.add_text("__config__", config_.to_key_values().format());
  const DType storage = std::is_same_v<Scalar, float> ? DType::kFloat32 : DType::kFloat64;
  for (const auto& p : parameters()) ck.add(p.name, *p.tensor, storage);
  for (const auto& p : buffers()) ck.add(p.name, *p.tensor, storage);
  return ck;
}

template <typename Scalar>
void OgNet<Scalar>::load_state(const Checkpoint& checkpoint) {
  auto assign = [&](const NamedTensor<Scalar>& p) {
    if (!checkpoint.find(p.name)) throw LoadError("checkpoint is missing tensor " + p.name);
    Tensor<Scalar> t = checkpoint.template tensor<Scalar>(p.name);
    if (t.shape() != p.tensor->shape()) {
      throw LoadError("checkpoint tensor " + p.name + " has shape " + to_string(t.shape()) + ", model expects " +
                      to_string(p.tensor->shape()));
    }
    p.tensor->data() = t.data();
  };
  for (const auto& p : parameters()) assign(p);
  for (const auto& p : buffers()) assign(p);
}

template <typename Scalar>
OgNet<Scalar> OgNet<Scalar>::load(const std::filesystem::path& path) {
  Checkpoint ck = Checkpoint::load(path);
  if (!ck.find("__config__")) throw LoadError("checkpoint " + path.string() + " carries no model config");
  OgNet net(OgNetConfig::from_key_values(KeyValues::parse(ck.text("__config__"))));
  net.load_state(ck);
  return net;
}

template class OgNet<float>;
template class OgNet<double>;
template CloudBatch<float> make_cloud_batch(std::span<const PointCloud* const>);
template CloudBatch<double> make_cloud_batch(std::span<const PointCloud* const>);

}  // namespace ognet
