// ognet: dataset generation, training, extraction, evaluation, gradient
// checks and kernel timing from the command line.

#include <CLI11.hpp>
#include <Eigen/Core>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>

#include "ognet/config.hpp"
#include "ognet/data.hpp"
#include "ognet/error.hpp"
#include "ognet/eval.hpp"
#include "ognet/gradient_suite.hpp"
#include "ognet/model.hpp"
#include "ognet/training.hpp"

using namespace ognet;
namespace fs = std::filesystem;

namespace {

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\t', ' ');
  return s;
}

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string join(const std::vector<Index>& v) { return format_list(v); }

struct RunFlags {
  std::string config;
  std::optional<std::string> variant, loss, points;
  std::optional<Index> k, batch, epochs, instances;
  std::optional<double> lr, fraction, target;
  std::optional<std::uint64_t> seed;
  bool no_rgb = false;
  int threads = 0;
  std::string out;

  KeyValues merged() const {
    KeyValues kv = config.empty() ? KeyValues{} : KeyValues::load(config);
    if (variant) kv.set("variant", *variant);
    if (loss) kv.set("loss", *loss);
    if (points) kv.set("points", *points);
    if (k) kv.set("k", std::to_string(*k));
    if (batch) kv.set("batch", std::to_string(*batch));
    if (epochs) kv.set("epochs", std::to_string(*epochs));
    if (instances) kv.set("instances_per_identity", std::to_string(*instances));
    if (lr) kv.set("lr", fmt(*lr, "%.17g"));
    if (fraction) kv.set("fraction", fmt(*fraction, "%.17g"));
    if (target) kv.set("target_accuracy", fmt(*target, "%.17g"));
    if (seed) kv.set("seed", std::to_string(*seed));
    if (no_rgb) kv.set("no_rgb", "true");
    return kv;
  }
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--config", f.config, "key=value config file; flags override it")->check(CLI::ExistingFile);
  cmd->add_option("--variant", f.variant, "ogn, ogn_small or ogn_deep");
  cmd->add_option("--loss", f.loss, "ce or ce+circle");
  cmd->add_option("--points", f.points, "point schedule, comma separated");
  cmd->add_option("--k", f.k, "graph neighbors");
  cmd->add_option("--batch", f.batch, "batch size");
  cmd->add_option("--lr", f.lr, "base learning rate");
  cmd->add_option("--epochs", f.epochs, "epochs");
  cmd->add_option("--fraction", f.fraction, "share of points kept per training sample");
  cmd->add_option("--instances-per-identity", f.instances, "build batches from runs of one identity");
  cmd->add_option("--target-accuracy", f.target, "stop once training accuracy reaches this");
  cmd->add_flag("--no-rgb", f.no_rgb, "feed xyz in place of rgb");
  cmd->add_option("--seed", f.seed, "random seed");
  cmd->add_option("--threads", f.threads, "worker cap (0 = library default)");
  cmd->add_option("--out", f.out, "output directory")->required();
}

void apply_threads(int threads) {
  if (threads > 0) Eigen::setNbThreads(threads);
}

struct LoadedSplit {
  std::vector<PointCloud> clouds;
  std::vector<int> identities, cameras;
};

LoadedSplit flatten(Split&& split) {
  LoadedSplit out;
  for (auto& s : split.samples) {
    out.clouds.push_back(std::move(s.cloud));
    out.identities.push_back(s.identity);
    out.cameras.push_back(s.camera);
  }
  return out;
}

int cmd_generate(const SyntheticSpec& spec, const std::string& out) {
  spec.validate();
  const auto records = generate_synthetic(spec, out);
  std::cout << "wrote\t" << records.size() << "\tclouds to\t" << out << '\n';
  return 0;
}

int cmd_train(const RunFlags& f, const std::string& data) {
  apply_threads(f.threads);
  KeyValues kv = f.merged();
  const fs::path out(f.out);
  fs::create_directories(out);
  Split split = load_split(data, "train", nullptr, out / "labels.tsv");
  kv.set("num_classes", std::to_string(split.labels.size()));
  OgNetConfig model = OgNetConfig::from_key_values(kv);
  TrainConfig train_cfg = TrainConfig::from_key_values(kv);
  train_cfg.out_dir = out;

  KeyValues effective = model.to_key_values();
  effective.merge(train_cfg.to_key_values());
  effective.set("data", fs::absolute(data).string());
  effective.save(out / "config.txt");
  std::cout << "# effective config\n" << effective.format();

  std::vector<LabeledCloud> items;
  for (const auto& s : split.samples) items.push_back({&s.cloud, s.label});
  OgNet<float> net(model);
  std::cout << "epoch\tlr\tloss\tacc\n";
  const auto result = train(net, items, train_cfg, [](const EpochStats& e) {
    std::cout << e.epoch << '\t' << fmt(e.lr, "%.6g") << '\t' << fmt(e.loss, "%.17g") << '\t' << fmt(e.accuracy) << '\n';
    std::cout.flush();
  });
  std::cout << "final_loss\t" << fmt(result.history.back().loss, "%.17g") << '\n';
  std::cout << "best_epoch\t" << result.best_epoch << "\tbest_accuracy\t" << fmt(result.best_accuracy) << '\n';
  return 0;
}

int cmd_extract(const std::string& checkpoint, const std::string& data, const std::string& split_name,
                const std::string& out, double fraction, std::uint64_t seed, Index batch, int threads) {
  apply_threads(threads);
  auto net = OgNet<float>::load(checkpoint);
  const auto s = flatten(load_split(data, split_name));
  const auto set = extract_embeddings(net, s.clouds, s.identities, s.cameras, fraction, seed, batch);
  write_embeddings(set, out);
  std::cout << "wrote\t" << set.size() << "\tembeddings of width\t" << set.features.cols() << "\tto\t" << out << '\n';
  return 0;
}

int cmd_eval(const std::string& query, const std::string& gallery, const std::string& out) {
  const auto m = evaluate(read_embeddings(query), read_embeddings(gallery));
  write_report(std::cout, m);
  if (!out.empty()) write_report(fs::path(out), m);
  return 0;
}

int cmd_sweep(const std::string& checkpoint, const std::string& data, std::vector<double> fractions, std::uint64_t seed,
              int threads) {
  apply_threads(threads);
  auto net = OgNet<float>::load(checkpoint);
  const auto q = flatten(load_split(data, "query"));
  const auto g = flatten(load_split(data, "gallery"));
  if (fractions.empty()) fractions.assign(kDefaultFractions.begin(), kDefaultFractions.end());
  const auto rows = density_sweep(net, {q.clouds, q.identities, q.cameras}, {g.clouds, g.identities, g.cameras},
                                  fractions, seed);
  std::cout << "fraction\trank1\tmAP\n";
  for (const auto& r : rows) std::cout << fmt(r.fraction, "%g") << '\t' << fmt(r.metrics.rank1) << '\t' << fmt(r.metrics.map) << '\n';
  return 0;
}

int cmd_gradcheck(const std::string& scope, std::uint64_t seed, int cases) {
  const auto entries = run_gradient_suite(scope, seed, cases);
  bool ok = true;
  std::cout << "op\tgroup\tmax_error\ttolerance\tentries\tresult\n";
  for (const auto& e : entries) {
    ok = ok && e.passed();
    std::cout << e.name << '\t' << e.group << '\t' << fmt(e.max_error, "%.3e") << '\t' << fmt(e.tolerance, "%g") << '\t'
              << e.entries << '\t' << (e.passed() ? "PASS" : "FAIL") << '\n';
  }
  return ok ? 0 : 1;
}

template <typename F>
double time_ms(int repeat, F&& f) {
  double best = 1e300;
  for (int r = 0; r < repeat; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    best = std::min(best, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  return best;
}

PointCloud random_cloud(Index m, std::mt19937_64& rng) {
  std::normal_distribution<float> n;
  std::uniform_real_distribution<float> u;
  PointCloud c;
  c.positions.resize(m, 3);
  c.colors.resize(m, 3);
  for (Index i = 0; i < m; ++i)
    for (int d = 0; d < 3; ++d) {
      c.positions(i, d) = n(rng);
      c.colors(i, d) = u(rng);
    }
  return c;
}

int cmd_bench(const std::string& kernel, const std::vector<Index>& sizes, int repeat, std::uint64_t seed, int threads) {
  apply_threads(threads);
  if (kernel != "all" && kernel != "knn" && kernel != "fps" && kernel != "forward") {
    throw ParameterError("bench: unknown kernel '" + kernel + "' (expected knn, fps, forward or all)");
  }
  std::mt19937_64 rng(seed);
  std::cout << "kernel\tsize\tdetail\tms\n";
  for (Index m : sizes) {
    if (m < 64) throw ParameterError("bench: sizes must be at least 64");
    const PointCloud cloud = random_cloud(m, rng);
    const Matrix<double> keys = positions_as_keys(cloud);
    if (kernel == "all" || kernel == "knn") {
      const double ms = time_ms(repeat, [&] { knn_graph(keys, 20); });
      std::cout << "knn\t" << m << "\tk=20\t" << fmt(ms, "%.3f") << '\n';
    }
    if (kernel == "all" || kernel == "fps") {
      const Index target = m * 3 / 16;
      const double ms = time_ms(repeat, [&] { farthest_point_sample(keys, target); });
      std::cout << "fps\t" << m << "\ttarget=" << target << '\t' << fmt(ms, "%.3f") << '\n';
    }
    if (kernel == "all" || kernel == "forward") {
      // the default schedule is tuned for 4096 points; scale it with m
      auto cfg = variant_config("ogn", 751);
      for (auto& p : cfg.point_schedule) p = std::max<Index>(8, p * m / 4096);
      cfg.seed = seed;
      OgNet<float> net(cfg);
      const PointCloud* ptr = &cloud;
      const auto batch = make_cloud_batch<float>(std::span<const PointCloud* const>(&ptr, 1));
      const double ms = time_ms(repeat, [&] { net.extract_embedding(batch); });
      std::cout << "forward\t" << m << "\togn points=" << join(cfg.point_schedule) << '\t' << fmt(ms, "%.3f") << '\n';
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"OG-Net point-cloud re-identification toolkit"};
  app.require_subcommand(1);

  SyntheticSpec spec;
  std::string gen_out;
  auto* gen = app.add_subcommand("generate", "write a synthetic pedestrian dataset");
  gen->add_option("--out", gen_out, "dataset directory")->required();
  gen->add_option("--identities", spec.num_identities, "training identities");
  gen->add_option("--samples", spec.samples_per_identity, "clouds per training identity");
  gen->add_option("--test-identities", spec.test_identities, "held-out identities");
  gen->add_option("--query", spec.query_per_identity, "query clouds per held-out identity");
  gen->add_option("--gallery", spec.gallery_per_identity, "gallery clouds per held-out identity");
  gen->add_option("--points", spec.points_per_cloud, "points per cloud");
  gen->add_option("--signature", spec.color_signature_dim, "distinct body-region colors");
  gen->add_option("--pose-noise", spec.pose_noise, "pose variation scale");
  gen->add_option("--camera-cast", spec.camera_cast, "per-camera color gain spread");
  gen->add_option("--seed", spec.seed, "random seed");

  RunFlags run;
  std::string train_data;
  auto* tr = app.add_subcommand("train", "train a network on the train split of a manifest");
  tr->add_option("--data", train_data, "manifest.tsv")->required()->check(CLI::ExistingFile);
  add_run_flags(tr, run);

  std::string ex_ck, ex_data, ex_split = "query", ex_out;
  double ex_fraction = 1.0;
  std::uint64_t ex_seed = 0;
  Index ex_batch = 16;
  int ex_threads = 0;
  auto* ex = app.add_subcommand("extract", "write OGEB embeddings of one split");
  ex->add_option("checkpoint", ex_ck, "model checkpoint")->required()->check(CLI::ExistingFile);
  ex->add_option("manifest", ex_data, "manifest.tsv")->required()->check(CLI::ExistingFile);
  ex->add_option("split", ex_split, "train, query or gallery")->required();
  ex->add_option("--out", ex_out, "embedding file")->required();
  ex->add_option("--fraction", ex_fraction, "share of points kept per cloud");
  ex->add_option("--seed", ex_seed, "subsampling seed");
  ex->add_option("--batch", ex_batch, "clouds per forward pass");
  ex->add_option("--threads", ex_threads, "worker cap");

  std::string ev_q, ev_g, ev_out;
  auto* ev = app.add_subcommand("eval", "rank-k and mAP of query embeddings against a gallery");
  ev->add_option("query", ev_q, "query OGEB file")->required()->check(CLI::ExistingFile);
  ev->add_option("gallery", ev_g, "gallery OGEB file")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", ev_out, "also write the report here");

  std::string sw_ck, sw_data;
  std::vector<double> sw_fractions;
  std::uint64_t sw_seed = 0;
  int sw_threads = 0;
  auto* sw = app.add_subcommand("sweep", "retrieval metrics across point densities");
  sw->add_option("checkpoint", sw_ck, "model checkpoint")->required()->check(CLI::ExistingFile);
  sw->add_option("manifest", sw_data, "manifest.tsv with query and gallery splits")->required()->check(CLI::ExistingFile);
  sw->add_option("--fractions", sw_fractions, "point fractions")->delimiter(',');
  sw->add_option("--seed", sw_seed, "subsampling seed");
  sw->add_option("--threads", sw_threads, "worker cap");

  std::string gc_scope = "all";
  std::uint64_t gc_seed = 0;
  int gc_cases = 20;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gc->add_option("scope", gc_scope, "all, ops, layers, model or one op name");
  gc->add_option("--seed", gc_seed, "random seed");
  gc->add_option("--cases", gc_cases, "random instances per op");

  std::string bn_kernel = "all";
  std::vector<Index> bn_sizes{1024, 4096};
  int bn_repeat = 3, bn_threads = 0;
  std::uint64_t bn_seed = 0;
  auto* bn = app.add_subcommand("bench", "time KNN, FPS and forward");
  bn->add_option("kernel", bn_kernel, "knn, fps, forward or all");
  bn->add_option("--sizes", bn_sizes, "point counts")->delimiter(',');
  bn->add_option("--repeat", bn_repeat, "runs per measurement (best is reported)");
  bn->add_option("--seed", bn_seed, "random seed");
  bn->add_option("--threads", bn_threads, "worker cap");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error\tusage\t" << one_line(e.what()) << '\n';
    return 2;
  }

  try {
    if (*gen) return cmd_generate(spec, gen_out);
    if (*tr) return cmd_train(run, train_data);
    if (*ex) return cmd_extract(ex_ck, ex_data, ex_split, ex_out, ex_fraction, ex_seed, ex_batch, ex_threads);
    if (*ev) return cmd_eval(ev_q, ev_g, ev_out);
    if (*sw) return cmd_sweep(sw_ck, sw_data, sw_fractions, sw_seed, sw_threads);
    if (*gc) return cmd_gradcheck(gc_scope, gc_seed, gc_cases);
    if (*bn) return cmd_bench(bn_kernel, bn_sizes, bn_repeat, bn_seed, bn_threads);
  } catch (const Error& e) {
    std::cerr << "error\t" << e.kind() << '\t' << one_line(e.what()) << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error\tinternal\t" << one_line(e.what()) << '\n';
    return 1;
  }
  return 0;
}
