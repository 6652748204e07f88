#include "celestial/benchmark.hpp"
#include "celestial/errors.hpp"

#include "support.hpp"

#include <nlohmann/json.hpp>
#include <doctest.h>

#include <fstream>
#include <sstream>

using namespace celestial;
using celestial::testing::TempDir;

namespace {

FeaturizerConfig tiny_config() {
  FeaturizerConfig c;
  c.height = c.width = 16;
  c.conv_blocks = {{4, 3, 1, 2}, {8, 3, 1, 2}};
  c.embedding_dim = 8;
  c.projection_hidden = 16;
  c.projection_dim = 4;
  return c;
}

BenchmarkConfig quick(std::vector<double> fractions, std::vector<std::uint64_t> seeds) {
  BenchmarkConfig c;
  c.fractions = std::move(fractions);
  c.seeds = std::move(seeds);
  c.head.hidden_dim = 8;
  c.finetune.epochs = 3;
  c.finetune.batch_size = 8;
  c.baseline.epochs = 1;
  c.baseline.batch_size = 8;
  return c;
}

const ImageSet& data() {
  static const ImageSet set = make_synthetic_dataset(3, 10, {16, 16}, 5);
  return set;
}

const FeaturizerModel& phi() {
  static const FeaturizerModel m = strip_projection(build_featurizer(tiny_config(), 2));
  return m;
}

}  // namespace

TEST_CASE("benchmark rows are sorted and bounded") {
  const auto report = label_efficiency_benchmark(data(), phi(), quick({1.0, 0.1, 0.5}, {0, 1}));
  REQUIRE(report.rows.size() == 3);
  CHECK(report.rows[0].fraction == 0.1);
  CHECK(report.rows[1].fraction == 0.5);
  CHECK(report.rows[2].fraction == 1.0);
  for (const auto& row : report.rows) {
    CHECK(row.cells.size() == 2);
    for (const auto& c : row.cells) {
      CHECK(c.ssl_accuracy >= 0.0);
      CHECK(c.ssl_accuracy <= 1.0);
      CHECK(c.baseline_accuracy >= 0.0);
      CHECK(c.baseline_accuracy <= 1.0);
    }
    CHECK(row.ssl_sd >= 0.0);
  }
  // 8 train samples per class after the 80/20 split.
  CHECK(report.rows[0].labeled_count == 3.0);
  CHECK(report.rows[2].labeled_count == 24.0);
  CHECK(report.train_count == 24);
  CHECK(report.test_count == 6);
  CHECK(report.num_classes == 3);
  CHECK(report.featurizer_digest.size() == 64);

  std::ostringstream csv;
  report.write_csv(csv);
  std::istringstream lines(csv.str());
  std::string line;
  int count = 0;
  while (std::getline(lines, line)) ++count;
  CHECK(count == 4);
  std::ostringstream meta;
  report.write_metadata(meta);
  const auto j = nlohmann::json::parse(meta.str());
  CHECK(j["cells"].size() == 6);
}

TEST_CASE("a single fraction and seed gives one row with zero spread") {
  const auto report = label_efficiency_benchmark(data(), phi(), quick({0.5}, {3}));
  REQUIRE(report.rows.size() == 1);
  CHECK(report.rows[0].cells.size() == 1);
  CHECK(report.rows[0].ssl_sd == 0.0);
  CHECK(report.rows[0].ssl_mean == report.rows[0].cells[0].ssl_accuracy);
}

TEST_CASE("benchmark cells are deterministic and pair finetune with baseline on one split") {
  const auto config = quick({0.5}, {4});
  const ImageSet split_data = with_benchmark_split(data(), config.split_seed);
  const auto a = run_benchmark_cell(split_data, phi(), config, 0.5, 4);
  const auto b = run_benchmark_cell(split_data, phi(), config, 0.5, 4);
  CHECK(a.ssl_accuracy == b.ssl_accuracy);
  CHECK(a.baseline_accuracy == b.baseline_accuracy);
  CHECK(a.labeled_count == label_fraction_split(split_data.manifest, 0.5, 4).labeled_count());
}

TEST_CASE("existing test tags are kept") {
  ImageSet tagged = data();
  tagged.manifest = stratified_train_test(tagged.manifest, 0.6, 1);
  CHECK(with_benchmark_split(tagged, 99).manifest == tagged.manifest);
  const auto fresh = with_benchmark_split(data(), 7);
  CHECK(fresh.manifest == with_benchmark_split(data(), 7).manifest);
}

TEST_CASE("finished cells are reused on the next run") {
  TempDir dir("cells");
  auto config = quick({0.5, 1.0}, {0});
  config.cell_dir = dir / "cells";
  int computed = 0;
  const auto first = label_efficiency_benchmark(data(), phi(), config,
                                                [&](const BenchmarkCell&, bool resumed) { computed += !resumed; });
  CHECK(computed == 2);

  // Plant a recognizable value in one cell file; the rerun must read it back.
  const auto file = dir / "cells" / cell_file_name(0.5, 0);
  REQUIRE(std::filesystem::exists(file));
  nlohmann::json j;
  std::ifstream(file) >> j;
  j["ssl_accuracy"] = 0.125;
  std::ofstream(file) << j.dump();

  int resumed = 0;
  const auto second = label_efficiency_benchmark(data(), phi(), config,
                                                 [&](const BenchmarkCell&, bool r) { resumed += r; });
  CHECK(resumed == 2);
  CHECK(second.rows[0].cells[0].ssl_accuracy == 0.125);
  CHECK(second.rows[1].cells[0].ssl_accuracy == first.rows[1].cells[0].ssl_accuracy);

  // A different configuration does not pick up stale cells.
  config.finetune.epochs = 4;
  int recomputed = 0;
  label_efficiency_benchmark(data(), phi(), config, [&](const BenchmarkCell&, bool r) { recomputed += !r; });
  CHECK(recomputed == 2);
}

TEST_CASE("benchmark input validation") {
  CHECK_THROWS_AS(label_efficiency_benchmark(data(), phi(), quick({0.0}, {0})), ValidationError);
  CHECK_THROWS_AS(label_efficiency_benchmark(data(), phi(), quick({1.5}, {0})), ValidationError);
  CHECK_THROWS_AS(label_efficiency_benchmark(data(), phi(), quick({0.5, 0.5}, {0})), ValidationError);
  CHECK_THROWS_AS(label_efficiency_benchmark(data(), phi(), quick({}, {0})), ValidationError);
  CHECK_THROWS_AS(label_efficiency_benchmark(data(), build_featurizer(tiny_config(), 2), quick({0.5}, {0})),
                  ValidationError);
  CHECK(cell_file_name(0.04, 2) == "cell_p0.040000_s2.json");
}
