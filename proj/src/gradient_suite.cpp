#include "ognet/gradient_suite.hpp"

#include <algorithm>
#include <functional>
#include <random>

#include "ognet/error.hpp"
#include "ognet/gradcheck.hpp"
#include "ognet/layers.hpp"
#include "ognet/model.hpp"
#include "ognet/training.hpp"

namespace ognet {
namespace {

using Rng = std::mt19937_64;

Index uniform_index(Rng& rng, Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); }

Matrix<double> uniform_matrix(Index rows, Index cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix<double> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

Tensor<double> uniform_tensor(Index rows, Index cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor<double>::from_matrix(uniform_matrix(rows, cols, rng, lo, hi), true);
}

// sum(y * R) with fixed random R, so every output entry has its own weight.
Var<double> readout(const Var<double>& y, std::uint64_t seed) {
  if (y.rows() == 1 && y.cols() == 1) return y;
  Rng rng(seed);
  return sum(mul(y, y.tape().constant(uniform_matrix(y.rows(), y.cols(), rng))));
}

struct Instance {
  std::vector<Tensor<double>> inputs;
  // layer parameters; the layer binds them itself
  std::vector<Tensor<double>*> owned;
  std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)> body;
  std::shared_ptr<void> keep;
};

using Maker = std::function<Instance(Rng&)>;

struct Spec {
  std::string name;
  std::string group;
  Maker make;
};

template <typename T>
std::vector<Tensor<double>*> owned_params(T& layer) {
  TensorList<double> list;
  layer.collect(list, "p");
  std::vector<Tensor<double>*> out;
  for (auto& p : list) out.push_back(p.tensor);
  return out;
}

Instance unary(Tensor<double> x, std::function<Var<double>(const Var<double>&)> f) {
  Instance in;
  in.inputs.push_back(std::move(x));
  in.body = [f](Tape<double>&, std::vector<Var<double>>& v) { return f(v[0]); };
  return in;
}

std::vector<Spec> specs() {
  std::vector<Spec> s;
  const auto shape = [](Rng& rng) { return std::pair{uniform_index(rng, 1, 6), uniform_index(rng, 1, 6)}; };

  s.push_back({"matmul", "ops", [](Rng& rng) {
                 const Index n = uniform_index(rng, 1, 5), k = uniform_index(rng, 1, 5), m = uniform_index(rng, 1, 5);
                 Instance in;
                 in.inputs = {uniform_tensor(n, k, rng), uniform_tensor(k, m, rng)};
                 in.body = [](Tape<double>&, auto& v) { return matmul(v[0], v[1]); };
                 return in;
               }});
  s.push_back({"linear", "ops", [](Rng& rng) {
                 const Index n = uniform_index(rng, 1, 5), k = uniform_index(rng, 1, 5), m = uniform_index(rng, 1, 5);
                 Instance in;
                 in.inputs = {uniform_tensor(n, k, rng), uniform_tensor(k, m, rng), uniform_tensor(1, m, rng)};
                 in.body = [](Tape<double>&, auto& v) { return linear(v[0], v[1], std::optional(v[2])); };
                 return in;
               }});
  s.push_back({"add_mul_scale_sum", "ops", [shape](Rng& rng) {
                 auto [r, c] = shape(rng);
                 Instance in;
                 in.inputs = {uniform_tensor(r, c, rng), uniform_tensor(r, c, rng)};
                 in.body = [](Tape<double>&, auto& v) { return sum(scale(add(mul(v[0], v[1]), v[0]), 1.7)); };
                 return in;
               }});
  s.push_back({"relu", "ops", [shape](Rng& rng) {
                 auto [r, c] = shape(rng);
                 return unary(uniform_tensor(r, c, rng), [](const Var<double>& x) { return relu(x); });
               }});
  s.push_back({"sigmoid", "ops", [shape](Rng& rng) {
                 auto [r, c] = shape(rng);
                 return unary(uniform_tensor(r, c, rng, -4, 4), [](const Var<double>& x) { return sigmoid(x); });
               }});
  s.push_back({"dropout", "ops", [shape](Rng& rng) {
                 auto [r, c] = shape(rng);
                 return unary(uniform_tensor(r, c, rng), [](const Var<double>& x) {
                   Rng mask(99);
                   return add(dropout(x, 0.7, Mode::kEval, nullptr), dropout(x, 0.3, Mode::kTrain, &mask));
                 });
               }});
  s.push_back({"concat_slice", "ops", [](Rng& rng) {
                 const Index r = uniform_index(rng, 1, 5), a = uniform_index(rng, 1, 4), b = uniform_index(rng, 1, 4);
                 const int axis = static_cast<int>(uniform_index(rng, 0, 1));
                 Instance in;
                 in.inputs = {uniform_tensor(axis == 1 ? r : a, axis == 1 ? a : r, rng),
                              uniform_tensor(axis == 1 ? r : b, axis == 1 ? b : r, rng)};
                 in.body = [axis](Tape<double>&, auto& v) {
                   std::vector<Var<double>> parts{v[0], v[1]};
                   auto cat = concat<double>(parts, axis);
                   return cat.cols() > 1 ? slice_cols(cat, 1, cat.cols() - 1) : cat;
                 };
                 return in;
               }});
  s.push_back({"mean_max_reduce", "ops", [shape](Rng& rng) {
                 auto [r, c] = shape(rng);
                 const int axis = static_cast<int>(uniform_index(rng, 0, 1));
                 return unary(uniform_tensor(r, c, rng),
                              [axis](const Var<double>& x) { return add(mean_reduce(x, axis), max_reduce(x, axis)); });
               }});
  s.push_back({"batch_norm", "ops", [](Rng& rng) {
                 const Index r = uniform_index(rng, 2, 7), c = uniform_index(rng, 1, 4);
                 Instance in;
                 in.inputs = {uniform_tensor(r, c, rng, -2, 2), uniform_tensor(1, c, rng, 0.5, 1.5), uniform_tensor(1, c, rng)};
                 Eigen::VectorXd w(r);
                 for (Index i = 0; i < r; ++i) w(i) = static_cast<double>(uniform_index(rng, 1, 4));
                 const int mode = static_cast<int>(uniform_index(rng, 0, 2));
                 in.body = [w, mode](Tape<double>&, auto& v) {
                   BatchNormState<double> st(v[0].cols());
                   st.running_mean.data().setConstant(0.3);
                   st.running_var.data().setConstant(1.7);
                   if (mode == 0) return batch_norm(v[0], v[1], v[2], st, Mode::kTrain);
                   if (mode == 1) return batch_norm(v[0], v[1], v[2], st, Mode::kTrain, &w);
                   return batch_norm(v[0], v[1], v[2], st, Mode::kEval);
                 };
                 return in;
               }});
  s.push_back({"softmax_cross_entropy", "ops", [](Rng& rng) {
                 const Index n = uniform_index(rng, 1, 5), k = uniform_index(rng, 2, 8);
                 std::vector<int> labels;
                 for (Index i = 0; i < n; ++i) labels.push_back(static_cast<int>(uniform_index(rng, 0, k - 1)));
                 Instance in;
                 in.inputs = {uniform_tensor(n, k, rng, -3, 3)};
                 in.body = [labels](Tape<double>&, auto& v) { return softmax_cross_entropy(v[0], std::span<const int>(labels)); };
                 return in;
               }});
  s.push_back({"gather_rows_neighbor_sum_gather_max", "ops", [](Rng& rng) {
                 const Index n = uniform_index(rng, 2, 8), c = uniform_index(rng, 1, 4), k = uniform_index(rng, 1, 5);
                 IndexMatrix table(n, k);
                 for (Index i = 0; i < table.size(); ++i) table.data()[i] = uniform_index(rng, 0, n - 1);
                 std::vector<Index> rows;
                 for (Index i = 0; i < n + 2; ++i) rows.push_back(uniform_index(rng, 0, n - 1));
                 Instance in;
                 in.inputs = {uniform_tensor(n, c, rng)};
                 in.body = [table, rows](Tape<double>&, auto& v) {
                   auto g = gather_rows(v[0], std::span<const Index>(rows));
                   return add(sum(add(neighbor_sum(v[0], table), gather_max(v[0], table))), sum(mul(g, g)));
                 };
                 return in;
               }});
  s.push_back({"segment_mean_max_scale", "ops", [](Rng& rng) {
                 const Index blocks = uniform_index(rng, 1, 3), seg = uniform_index(rng, 1, 4), c = uniform_index(rng, 1, 4);
                 Eigen::VectorXd w(blocks * seg);
                 for (Index i = 0; i < w.size(); ++i) w(i) = static_cast<double>(uniform_index(rng, 1, 3));
                 Instance in;
                 in.inputs = {uniform_tensor(blocks * seg, c, rng), uniform_tensor(blocks, c, rng)};
                 in.body = [w, seg](Tape<double>&, auto& v) {
                   auto s2 = scale_segments(v[0], v[1], seg);
                   return add(sum(mul(segment_mean(v[0], seg, &w), segment_max(v[0], seg))), sum(mul(s2, s2)));
                 };
                 return in;
               }});
  s.push_back({"l2_normalize_rows_gram", "ops", [shape](Rng& rng) {
                 auto [r, c] = shape(rng);
                 return unary(uniform_tensor(r, c, rng, 0.2, 1.0), [](const Var<double>& x) { return gram(l2_normalize_rows(x)); });
               }});
  s.push_back({"circle_loss", "ops", [](Rng& rng) {
                 const Index n = uniform_index(rng, 3, 8), d = uniform_index(rng, 2, 6);
                 std::vector<int> labels;
                 for (Index i = 0; i < n; ++i) labels.push_back(static_cast<int>(i % 2 == 0 ? i / 2 % 2 : uniform_index(rng, 0, 2)));
                 Instance in;
                 in.inputs = {uniform_tensor(n, d, rng)};
                 in.body = [labels](Tape<double>&, auto& v) { return circle_loss(v[0], std::span<const int>(labels), {8.0, 0.25}).loss; };
                 return in;
               }});
  s.push_back({"dynamic_graph_conv", "ops", [](Rng& rng) {
                 const Index m = uniform_index(rng, 3, 10), c = uniform_index(rng, 1, 4), o = uniform_index(rng, 1, 4);
                 Instance in;
                 in.inputs = {uniform_tensor(m, c, rng), uniform_tensor(c, o, rng), uniform_tensor(c, o, rng)};
                 const auto graph = knn_graph(in.inputs[0].data(), uniform_index(rng, 1, m - 1)).neighbors;
                 const auto agg = uniform_index(rng, 0, 1) == 0 ? Aggregator::kSum : Aggregator::kMax;
                 in.body = [graph, agg](Tape<double>&, auto& v) { return dynamic_graph_conv(v[0], graph, v[1], v[2], agg); };
                 return in;
               }});

  s.push_back({"graph_conv", "layers", [](Rng& rng) {
                 const Index m = uniform_index(rng, 4, 12), c = uniform_index(rng, 1, 4), o = uniform_index(rng, 2, 6);
                 auto conv = std::make_shared<GraphConv<double>>(c, o, true, Aggregator::kSum, rng);
                 Instance in;
                 in.inputs = {uniform_tensor(m, c, rng)};
                 in.owned = owned_params(*conv);
                 const auto graph = knn_graph(in.inputs[0].data(), std::min<Index>(4, m - 1)).neighbors;
                 in.body = [conv, graph](Tape<double>&, auto& v) { return (*conv)(v[0], graph, Mode::kTrain); };
                 in.keep = conv;
                 return in;
               }});
  s.push_back({"se_block", "layers", [](Rng& rng) {
                 const Index ch = 4 * uniform_index(rng, 1, 3), seg = uniform_index(rng, 1, 6), n = uniform_index(rng, 1, 3);
                 auto se = std::make_shared<SeBlock<double>>(ch, 4, rng);
                 Instance in;
                 in.inputs = {uniform_tensor(n * seg, ch, rng, -2, 2)};
                 in.owned = owned_params(*se);
                 in.body = [se, seg](Tape<double>&, auto& v) { return (*se)(v[0], seg); };
                 in.keep = se;
                 return in;
               }});
  s.push_back({"grouping_branch", "layers", [](Rng& rng) {
                 const Index n = uniform_index(rng, 1, 3), m = uniform_index(rng, 2, 9), r = uniform_index(rng, 1, 12);
                 const Index ch = 4 * uniform_index(rng, 1, 2);
                 auto b = std::make_shared<GroupingBranch<double>>(ch, uniform_index(rng, 1, 5), true, 4, rng);
                 Instance in;
                 in.inputs = {uniform_tensor(n * m, ch, rng)};
                 in.owned = owned_params(*b);
                 const auto groups = batched_groups(uniform_matrix(n * m, 3, rng), n, m, r);
                 in.body = [b, groups, m](Tape<double>&, auto& v) { return (*b)(v[0], groups, m, Mode::kTrain); };
                 in.keep = b;
                 return in;
               }});
  s.push_back({"omni_scale_module", "layers", [](Rng& rng) {
                 const bool shortcut = uniform_index(rng, 0, 1) == 1;
                 OmniScaleConfig cfg;
                 cfg.in_channels = 4;
                 cfg.out_channels = shortcut ? 4 : 8;
                 cfg.downsample_to = shortcut ? 0 : 8;
                 cfg.shortcut = shortcut;
                 auto mod = std::make_shared<OmniScaleModule<double>>(cfg, rng);
                 Instance in;
                 in.inputs = {uniform_tensor(16, 4, rng)};
                 in.owned = owned_params(*mod);
                 const Matrix<double> pos = uniform_matrix(16, 3, rng);
                 in.body = [mod, pos](Tape<double>&, auto& v) {
                   PointBatch<double> pb{v[0], pos, 1, 16};
                   return (*mod)(pb, Mode::kTrain).features;
                 };
                 in.keep = mod;
                 return in;
               }});
  return s;
}

GradientSuiteEntry run_spec(const Spec& spec, std::uint64_t seed, int cases) {
  GradientSuiteEntry e{spec.name, spec.group, 0.0, 1e-4, cases, 0};
  Rng rng(seed);
  for (int c = 0; c < cases; ++c) {
    Instance in = spec.make(rng);
    const std::uint64_t readout_seed = rng();
    ScalarClosure fn = [&](Tape<double>& tape) {
      std::vector<Var<double>> vars;
      for (auto& t : in.inputs) vars.push_back(tape.parameter(t));
      return readout(in.body(tape, vars), readout_seed);
    };
    std::vector<Tensor<double>*> ptrs;
    for (auto& t : in.inputs) ptrs.push_back(&t);
    for (auto* t : in.owned) ptrs.push_back(t);
    GradCheckOptions opt;
    opt.seed = readout_seed;
    const auto r = gradient_check(fn, ptrs, opt);
    e.max_error = std::max(e.max_error, r.max_error);
    e.entries += r.entries_checked;
  }
  return e;
}

PointCloud random_cloud(Index m, Rng& rng) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  PointCloud c;
  c.positions.resize(m, 3);
  c.colors.resize(m, 3);
  for (Index i = 0; i < m; ++i) {
    for (int d = 0; d < 3; ++d) {
      c.positions(i, d) = n(rng);
      c.colors(i, d) = u(rng);
    }
  }
  return c;
}

GradientSuiteEntry run_model(std::uint64_t seed) {
  auto config = variant_config("ogn_small", 4);
  config.point_schedule = {32, 16, 8, 4};
  config.seed = seed;
  OgNet<double> net(config);
  Rng rng(seed + 21);
  std::vector<PointCloud> clouds;
  for (int i = 0; i < 4; ++i) clouds.push_back(random_cloud(64, rng));
  std::vector<const PointCloud*> ptrs;
  for (const auto& c : clouds) ptrs.push_back(&c);
  const auto input = make_cloud_batch<double>(ptrs);
  const std::vector<int> labels{1, 3, 0, 2};
  ScalarClosure fn = [&](Tape<double>& tape) {
    Rng drop(5);
    return softmax_cross_entropy(net.forward(tape, input, Mode::kTrain, &drop).logits, std::span<const int>(labels));
  };
  std::vector<Tensor<double>*> inputs;
  for (auto& p : net.parameters()) inputs.push_back(p.tensor);
  GradCheckOptions opt;
  opt.max_entries_per_input = 3;
  opt.seed = seed + 2;
  // small enough not to cross ReLU and max switch points
  opt.step = 1e-7;
  const auto r = gradient_check(fn, inputs, opt);
  return {"ogn_small_forward_ce", "model", r.max_error, 1e-3, 1, r.entries_checked};
}

}  // namespace

std::vector<std::string> gradient_suite_names() {
  std::vector<std::string> names;
  for (const auto& s : specs()) names.push_back(s.name);
  names.push_back("ogn_small_forward_ce");
  return names;
}

std::vector<GradientSuiteEntry> run_gradient_suite(const std::string& scope, std::uint64_t seed, int cases) {
  if (cases < 1) throw ParameterError("gradient suite: cases must be positive");
  std::vector<GradientSuiteEntry> out;
  std::uint64_t offset = 0;
  for (const auto& s : specs()) {
    ++offset;
    if (scope == "all" || scope == s.group || scope == s.name) out.push_back(run_spec(s, seed * 1000 + offset, cases));
  }
  if (scope == "all" || scope == "model" || scope == "ogn_small_forward_ce") out.push_back(run_model(seed));
  if (out.empty()) throw ParameterError("gradient suite: unknown scope '" + scope + "'");
  return out;
}

}  // namespace ognet
