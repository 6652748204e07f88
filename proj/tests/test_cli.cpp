#include "celestial/checkpoint.hpp"
#include "celestial/dataset.hpp"
#include "celestial/index.hpp"
#include "celestial/service.hpp"

#include "support.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>
#include <doctest.h>

#include <csignal>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <fcntl.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

using namespace celestial;
using celestial::testing::TempDir;
namespace fs = std::filesystem;

extern char** environ;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

// Runs the CLI with args, capturing both streams through files in dir.
Result run(const fs::path& dir, const std::vector<std::string>& args) {
  std::string cmd = "'" CELESTIAL_CLI "'";
  for (const auto& a : args) cmd += " '" + a + "'";
  const fs::path out = dir / "stdout.txt", err = dir / "stderr.txt";
  cmd += " >'" + out.string() + "' 2>'" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

// Small model flags shared by every training command.
std::vector<std::string> tiny_model() {
  return {"--set", "data.image_height=16", "--set", "data.image_width=16", "--conv-blocks", "4:3:1:2,8:3:1:2",
          "--set", "model.embedding_dim=8", "--set", "model.projection_hidden=16", "--set", "model.projection_dim=4",
          "--batch-size", "8"};
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// One synthetic dataset and one short pretraining run shared by the cases.
struct Fixture {
  TempDir dir{"cli"};
  fs::path manifest;
  fs::path checkpoint;

  Fixture() {
    const auto synth = run(dir.path(), {"synth", "--classes", "3", "--per-class", "8", "--size", "16", "--seed", "4",
                                        "--test-fraction", "0.25", "--out", (dir / "data").string()});
    REQUIRE(synth.code == 0);
    manifest = dir / "data" / "manifest.tsv";
    const auto pre = run(dir.path(), concat({"pretrain", "--manifest", manifest.string(), "--epochs", "2", "--seed", "3",
                                             "--out", (dir / "pre").string()},
                                            tiny_model()));
    REQUIRE_MESSAGE(pre.code == 0, pre.err);
    checkpoint = dir / "pre" / "featurizer.ckpt";
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

FeaturizerConfig tiny_config() {
  FeaturizerConfig c;
  c.height = c.width = 16;
  c.conv_blocks = {{4, 3, 1, 2}, {8, 3, 1, 2}};
  c.embedding_dim = 8;
  c.projection_hidden = 16;
  c.projection_dim = 4;
  return c;
}

}  // namespace

TEST_CASE("synth writes a tagged manifest") {
  auto& f = fixture();
  const auto m = load_manifest(f.manifest, {16, 16});
  CHECK(m.size() == 24);
  int test = 0;
  for (const auto& e : m.entries) test += e.split == Split::Test;
  CHECK(test == 6);
  CHECK(fs::exists(m.resolve(m.entries[0])));
}

TEST_CASE("pretrain writes checkpoints, metrics and the resolved config") {
  auto& f = fixture();
  CHECK(fs::exists(f.dir / "pre" / "featurizer_full.ckpt"));
  CHECK(fs::exists(f.dir / "pre" / "config.ini"));
  const auto full = load_featurizer(f.dir / "pre" / "featurizer_full.ckpt");
  const auto stripped = load_featurizer(f.checkpoint);
  CHECK(full.has_projection());
  CHECK_FALSE(stripped.has_projection());
  CHECK(same_weights(strip_projection(full), stripped));
  std::ifstream metrics(f.dir / "pre" / "metrics.jsonl");
  std::string line;
  int epochs = 0;
  while (std::getline(metrics, line)) epochs += nlohmann::json::parse(line).contains("loss");
  CHECK(epochs == 2);
  CHECK(slurp(f.dir / "pre" / "config.ini").find("epochs=2") != std::string::npos);
}

TEST_CASE("zero epochs checkpoints the seeded initialization") {
  auto& f = fixture();
  TempDir dir("cli0");
  const auto r = run(dir.path(), concat({"pretrain", "--manifest", f.manifest.string(), "--epochs", "0", "--seed", "7",
                                         "--out", (dir / "run").string()},
                                        tiny_model()));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(same_weights(load_featurizer(dir / "run" / "featurizer_full.ckpt"), build_featurizer(tiny_config(), 7)));
}

TEST_CASE("identical invocations write identical checkpoints") {
  auto& f = fixture();
  TempDir dir("clidet");
  const auto args = [&](const std::string& out) {
    return concat({"pretrain", "--manifest", f.manifest.string(), "--epochs", "2", "--seed", "3", "--out", out},
                  tiny_model());
  };
  REQUIRE(run(dir.path(), args((dir / "a").string())).code == 0);
  REQUIRE(run(dir.path(), args((dir / "b").string())).code == 0);
  CHECK(read_file_bytes(dir / "a" / "featurizer_full.ckpt") == read_file_bytes(dir / "b" / "featurizer_full.ckpt"));
  CHECK(read_file_bytes(dir / "a" / "featurizer.ckpt") == read_file_bytes(f.checkpoint));
}

TEST_CASE("usage errors exit with status 2") {
  TempDir dir("cliusage");
  auto r = run(dir.path(), {"pretrain", "--epochs", "1", "--out", (dir / "x").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("--manifest") != std::string::npos);
  CHECK(r.err.find("Usage") != std::string::npos);
  CHECK(r.out.empty());

  CHECK(run(dir.path(), {}).code == 2);
  CHECK(run(dir.path(), {"no-such-command"}).code == 2);
  CHECK(run(dir.path(), {"pretrain", "--epochs", "many"}).code == 2);
  r = run(dir.path(), {"pretrain", "--manifest", (dir / "missing.tsv").string(), "--out", (dir / "y").string()});
  CHECK(r.code == 2);
  r = run(dir.path(), {"knn-eval", "--set", "nope.key=1", "--out", (dir / "z").string()});
  CHECK(r.code != 0);
}

TEST_CASE("knn-eval reports one row per k") {
  auto& f = fixture();
  TempDir dir("cliknn");
  const auto r = run(dir.path(), {"knn-eval", "--manifest", f.manifest.string(), "--checkpoint", f.checkpoint.string(),
                                  "--k-max", "5", "--out", (dir / "knn").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  std::istringstream csv(slurp(dir / "knn" / "knn.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "k,accuracy");
  int rows = 0;
  while (std::getline(csv, line)) {
    ++rows;
    const double acc = std::stod(line.substr(line.find(',') + 1));
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
  }
  CHECK(rows == 5);

  const auto too_big = run(dir.path(), {"knn-eval", "--manifest", f.manifest.string(), "--checkpoint",
                                        f.checkpoint.string(), "--k-max", "24", "--out", (dir / "big").string()});
  CHECK(too_big.code == 2);
}

TEST_CASE("knn-eval on a dump of one-hot label embeddings is perfect") {
  TempDir dir("clionehot");
  std::vector<std::string> ids;
  std::vector<std::optional<int>> labels;
  Eigen::MatrixXf emb = Eigen::MatrixXf::Zero(3, 15);
  for (int i = 0; i < 15; ++i) {
    ids.push_back("x" + std::to_string(i));
    labels.push_back(i % 3);
    emb(i % 3, i) = 1.0f;
  }
  write_embedding_dump(build_index(ids, emb, labels), dir / "onehot.bin");
  const auto r = run(dir.path(), {"knn-eval", "--embeddings", (dir / "onehot.bin").string(), "--k-max", "4", "--out",
                                  (dir / "knn").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(slurp(dir / "knn" / "knn.csv") == "k,accuracy\n1,1.000000\n2,1.000000\n3,1.000000\n4,1.000000\n");
}

TEST_CASE("finetune and a one-cell benchmark") {
  auto& f = fixture();
  TempDir dir("clibench");
  auto r = run(dir.path(), {"finetune", "--manifest", f.manifest.string(), "--checkpoint", f.checkpoint.string(),
                            "--fraction", "0.5", "--epochs", "3", "--out", (dir / "ft").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto result = nlohmann::json::parse(slurp(dir / "ft" / "result.json"));
  CHECK(result["labeled"] == 9);
  CHECK(result["test_accuracy"].get<double>() >= 0.0);
  CHECK(fs::exists(dir / "ft" / "classifier.ckpt"));

  const std::vector<std::string> args{"benchmark", "--manifest", f.manifest.string(), "--checkpoint",
                                      f.checkpoint.string(), "--fractions", "0.5", "--seeds", "1",
                                      "--set", "finetune.epochs=2", "--set", "baseline.epochs=1",
                                      "--out", (dir / "bench").string()};
  r = run(dir.path(), args);
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const std::string csv = slurp(dir / "bench" / "efficiency.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
  CHECK(fs::exists(dir / "bench" / "cells" / "cell_p0.500000_s1.json"));
  const auto first_cell = slurp(dir / "bench" / "cells" / "cell_p0.500000_s1.json");

  r = run(dir.path(), args);
  REQUIRE(r.code == 0);
  CHECK(r.err.find("(resumed)") != std::string::npos);
  CHECK(slurp(dir / "bench" / "efficiency.csv") == csv);
  CHECK(slurp(dir / "bench" / "cells" / "cell_p0.500000_s1.json") == first_cell);
}

TEST_CASE("embed-dump covers the whole manifest") {
  auto& f = fixture();
  TempDir dir("clidump");
  const auto r = run(dir.path(), {"embed-dump", "--manifest", f.manifest.string(), "--checkpoint",
                                  f.checkpoint.string(), "--out", (dir / "dump").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto index = read_embedding_dump(dir / "dump" / "embeddings.bin");
  const auto m = load_manifest(f.manifest);
  CHECK(index.size() == m.size());
  CHECK(index.dim() == 8);
  CHECK(index.ids[5] == m.entries[5].id);
  CHECK(index.labels[5] == m.entries[5].label);
  CHECK(index.vectors == index_corpus(load_featurizer(f.checkpoint), load_manifest(f.manifest, {16, 16})).vectors);
}

TEST_CASE("serve binds a free port and stops on SIGTERM") {
  auto& f = fixture();
  TempDir dir("cliserve");
  int pipe_fds[2];
  REQUIRE(pipe(pipe_fds) == 0);
  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_adddup2(&actions, pipe_fds[1], STDOUT_FILENO);
  posix_spawn_file_actions_addclose(&actions, pipe_fds[0]);
  posix_spawn_file_actions_addopen(&actions, STDERR_FILENO, (dir / "stderr.txt").c_str(), O_WRONLY | O_CREAT, 0644);
  std::vector<std::string> args{CELESTIAL_CLI, "serve", "--manifest", f.manifest.string(), "--checkpoint",
                                f.checkpoint.string(), "--port", "0", "--out", (dir / "serve").string()};
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);
  pid_t pid = 0;
  REQUIRE(posix_spawn(&pid, CELESTIAL_CLI, &actions, nullptr, argv.data(), environ) == 0);
  posix_spawn_file_actions_destroy(&actions);
  close(pipe_fds[1]);

  std::string line;
  char c = 0;
  while (read(pipe_fds[0], &c, 1) == 1 && c != '\n') line += c;
  close(pipe_fds[0]);
  const std::string prefix = "listening on http://127.0.0.1:";
  REQUIRE_MESSAGE(line.rfind(prefix, 0) == 0, line);
  const int port = std::stoi(line.substr(prefix.size()));
  CHECK(port > 0);

  httplib::Client cli("127.0.0.1", port);
  const auto res = cli.Get("/api/status");
  REQUIRE(res);
  CHECK(res->status == 200);
  const auto status = nlohmann::json::parse(res->body);
  CHECK(status["n"] == 24);
  CHECK(status["checkpoint_digest"] == content_digest(read_file_bytes(f.checkpoint)));

  kill(pid, SIGTERM);
  int wstatus = 0;
  REQUIRE(waitpid(pid, &wstatus, 0) == pid);
  CHECK(WIFEXITED(wstatus));
  CHECK(WEXITSTATUS(wstatus) == 0);
  CHECK(fs::exists(dir / "serve" / "state"));
}
