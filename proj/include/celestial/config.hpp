#pragma once

#include "celestial/augment.hpp"
#include "celestial/benchmark.hpp"
#include "celestial/model.hpp"
#include "celestial/train.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace celestial {

/// Every setting of a run, loadable from an INI file with sections
/// ([data], [augment], [model], [pretrain], [finetune], [baseline],
/// [benchmark], [knn], [serve]) and overridable key by key.
struct RunConfig {
  std::string manifest;
  std::string checkpoint;
  std::string embeddings;  // embedding dump, an alternative input for knn-eval
  ImageSize image_size{64, 64};

  AugmentationPolicy augment;
  FeaturizerConfig model;
  TrainConfig pretrain = TrainConfig::pretrain_defaults();
  double pretrain_subset = 1.0;  // fraction of the unlabeled train split used
  TrainConfig finetune = TrainConfig::head_defaults();
  TrainConfig baseline = TrainConfig::baseline_defaults();
  HeadConfig head;
  double label_fraction = 1.0;
  std::uint64_t split_seed = 0;

  std::vector<double> fractions{0.04, 0.1, 0.2, 0.33, 1.0};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  int k_max = 10;

  std::string host = "127.0.0.1";
  int port = 8080;
  double blend_alpha = 0.5;
  std::string state_dir;

  /// Sets "section.key" from text; throws ValidationError on an unknown key
  /// or unparsable value.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  /// Reads INI text; keys not present keep their current values.
  void merge_ini(std::istream& in);
  void merge_ini_file(const std::filesystem::path& path);
  void write_ini(std::ostream& out) const;

  BenchmarkConfig benchmark() const;
  void validate() const;
};

std::string format_conv_blocks(const std::vector<ConvBlockSpec>& blocks);
std::vector<ConvBlockSpec> parse_conv_blocks(const std::string& text);

}  // namespace celestial
