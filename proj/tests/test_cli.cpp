#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "ognet/config.hpp"
#include "ognet/eval.hpp"

using namespace ognet;
namespace fs = std::filesystem;

namespace {

const fs::path kDir = fs::temp_directory_path() / "ognet_cli_test";

struct Run {
  int code = 0;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Run run(const std::string& args) {
  const auto out = kDir / "stdout.txt", err = kDir / "stderr.txt";
  const std::string cmd = std::string(OGNET_CLI) + " " + args + " > " + out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::string value_of(const std::string& text, const std::string& key) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind(key + "\t", 0) == 0) return line.substr(key.size() + 1);
  }
  return {};
}

struct Fixture {
  Fixture() {
    fs::remove_all(kDir);
    fs::create_directories(kDir);
  }
};

}  // namespace

TEST_CASE_FIXTURE(Fixture, "eval on the T F T fixture") {
  EmbeddingSet q, g;
  q.features.resize(1, 2);
  q.features << 1, 0;
  q.identities = {1};
  q.cameras = {0};
  g.features.resize(3, 2);
  g.features << 1, 0, 0.8, 0.6, 0.6, 0.8;
  g.identities = {1, 2, 1};
  g.cameras = {1, 1, 2};
  write_embeddings(q, kDir / "q.ogeb");
  write_embeddings(g, kDir / "g.ogeb");
  const auto r = run("eval " + (kDir / "q.ogeb").string() + " " + (kDir / "g.ogeb").string() + " --out " +
                     (kDir / "report.tsv").string());
  REQUIRE(r.code == 0);
  CHECK(value_of(r.out, "mAP") == "0.833333");
  CHECK(value_of(r.out, "rank1") == "1.000000");
  CHECK(slurp(kDir / "report.tsv") == r.out);
}

TEST_CASE_FIXTURE(Fixture, "errors are one line on stderr with a nonzero exit") {
  std::ofstream(kDir / "junk.ogeb") << "nope";
  for (const std::string args : {"eval " + (kDir / "junk.ogeb").string() + " " + (kDir / "junk.ogeb").string(),
                                 std::string("eval missing_a missing_b"), std::string("gradcheck no_such_op"),
                                 std::string("frobnicate"), std::string("bench warp")}) {
    const auto r = run(args);
    CHECK(r.code != 0);
    CHECK(r.err.rfind("error\t", 0) == 0);
    CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
  }
  CHECK(run("eval " + (kDir / "junk.ogeb").string() + " " + (kDir / "junk.ogeb").string()).err.find("\tformat\t") !=
        std::string::npos);
}

TEST_CASE_FIXTURE(Fixture, "gradcheck on ops") {
  const auto r = run("gradcheck ops --cases 3");
  CHECK(r.code == 0);
  CHECK(r.out.find("FAIL") == std::string::npos);
  CHECK(r.out.find("circle_loss\tops\t") != std::string::npos);
}

TEST_CASE_FIXTURE(Fixture, "generate, train twice, extract, eval, sweep") {
  const auto data = kDir / "ds";
  REQUIRE(run("generate --out " + data.string() +
              " --identities 4 --samples 4 --test-identities 2 --points 256 --seed 3")
              .code == 0);
  const auto manifest = (data / "manifest.tsv").string();
  std::ofstream(kDir / "run.cfg") << "# base settings\nvariant=ogn\nepochs=9\nbatch=8\npoints=64,32,16,8\nk=8\n";
  const std::string common = "train --data " + manifest + " --config " + (kDir / "run.cfg").string() +
                             " --variant ogn_small --epochs 2 --seed 7";
  const auto a = run(common + " --out " + (kDir / "a").string());
  REQUIRE(a.code == 0);
  const auto b = run(common + " --out " + (kDir / "b").string());
  REQUIRE(b.code == 0);
  CHECK(!value_of(a.out, "final_loss").empty());
  CHECK(value_of(a.out, "final_loss") == value_of(b.out, "final_loss"));

  // flags beat the file, untouched file keys survive
  const auto cfg = KeyValues::load(kDir / "a" / "config.txt");
  CHECK(cfg.get("variant") == "ogn_small");
  CHECK(cfg.get("epochs") == "2");
  CHECK(cfg.get("k") == "8");
  CHECK(cfg.get("batch") == "8");
  CHECK(cfg.get("seed") == "7");
  CHECK(a.out.find("# effective config") == 0);
  for (const char* f : {"best.ogck", "last.ogck", "train_log.tsv", "labels.tsv"}) CHECK(fs::exists(kDir / "a" / f));

  const auto ck = (kDir / "a" / "last.ogck").string();
  REQUIRE(run("extract " + ck + " " + manifest + " query --out " + (kDir / "q.ogeb").string()).code == 0);
  REQUIRE(run("extract " + ck + " " + manifest + " gallery --out " + (kDir / "g.ogeb").string()).code == 0);
  const auto q = read_embeddings(kDir / "q.ogeb");
  CHECK(q.size() == 4);
  CHECK(q.features.cols() == 512);
  const auto e = run("eval " + (kDir / "q.ogeb").string() + " " + (kDir / "g.ogeb").string());
  CHECK(e.code == 0);
  CHECK(value_of(e.out, "queries") == "4");

  const auto s = run("sweep " + ck + " " + manifest + " --fractions 0.5,1");
  CHECK(s.code == 0);
  CHECK(std::count(s.out.begin(), s.out.end(), '\n') == 3);

  const auto bad = run("extract " + ck + " " + manifest + " holdout --out " + (kDir / "x.ogeb").string());
  CHECK(bad.code != 0);
  CHECK(bad.err.find("\tload\t") != std::string::npos);
}
