#pragma once

#include "celestial/dataset.hpp"
#include "celestial/model.hpp"
#include "celestial/train.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace celestial {

struct BenchmarkConfig {
  std::vector<double> fractions{0.04, 0.1, 0.2, 0.33, 1.0};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  HeadConfig head;
  TrainConfig finetune = TrainConfig::head_defaults();
  TrainConfig baseline = TrainConfig::baseline_defaults();
  /// Seed of the stratified 80/20 train/test split applied when the data has
  /// no test-tagged entries.
  std::uint64_t split_seed = 0;
  /// When set, each finished (fraction, seed) cell is written here and reused
  /// on the next run.
  std::optional<std::filesystem::path> cell_dir;
};

struct BenchmarkCell {
  double fraction = 0.0;
  std::uint64_t seed = 0;
  double ssl_accuracy = 0.0;
  double baseline_accuracy = 0.0;
  std::size_t labeled_count = 0;
};

struct EfficiencyRow {
  double fraction = 0.0;
  double ssl_mean = 0.0;
  double ssl_sd = 0.0;
  double baseline_mean = 0.0;
  double baseline_sd = 0.0;
  double labeled_count = 0.0;  // mean over seeds
  std::vector<BenchmarkCell> cells;
};

struct EfficiencyReport {
  std::vector<EfficiencyRow> rows;  // fraction ascending
  std::vector<std::uint64_t> seeds;
  std::uint64_t split_seed = 0;
  std::string featurizer_digest;
  std::string config_digest;
  std::size_t train_count = 0;
  std::size_t test_count = 0;
  int num_classes = 0;

  void write_csv(std::ostream& out) const;
  /// JSON sidecar with metadata and per-cell results.
  void write_metadata(std::ostream& out) const;
};

using CellCallback = std::function<void(const BenchmarkCell&, bool resumed)>;

/// For each (fraction, seed): one shared label split, a frozen-featurizer
/// finetune and an end-to-end supervised baseline on the same labeled ids,
/// both scored on the test split. Failures are rethrown with (p, seed).
EfficiencyReport label_efficiency_benchmark(const ImageSet& data, const FeaturizerModel& featurizer,
                                            const BenchmarkConfig& config,
                                            const CellCallback& on_cell = {});

/// Runs a single cell; exposed for tests and resumable drivers.
BenchmarkCell run_benchmark_cell(const ImageSet& data, const FeaturizerModel& featurizer,
                                 const BenchmarkConfig& config, double fraction, std::uint64_t seed);

/// Tags an 80/20 stratified split when data has no test entries.
ImageSet with_benchmark_split(const ImageSet& data, std::uint64_t split_seed);

std::string cell_file_name(double fraction, std::uint64_t seed);

}  // namespace celestial
