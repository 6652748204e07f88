#pragma once

#include "celestial/augment.hpp"
#include "celestial/dataset.hpp"
#include "celestial/model.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace celestial {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 0.001;
  double temperature = 0.5;
  std::string optimizer = "momentum_sgd";
  double momentum = 0.9;
  std::uint64_t seed = 0;

  /// Pretraining needs temperature > 0 and at least 2 pairs per batch.
  void validate(bool contrastive) const;

  static TrainConfig pretrain_defaults() {
    TrainConfig c;
    c.learning_rate = 0.01;
    return c;
  }
  static TrainConfig head_defaults() {
    TrainConfig c;
    c.epochs = 100;
    c.learning_rate = 0.01;
    return c;
  }
  /// End-to-end supervised training; gradients reach the whole backbone, so
  /// it takes a smaller step than the heads.
  static TrainConfig baseline_defaults() { return {}; }
};

struct HeadConfig {
  int hidden_dim = 64;
};

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  double seconds = 0.0;
  std::map<std::string, double> metrics;
};

struct RunHistory {
  std::vector<EpochRecord> epochs;

  void append(EpochRecord record);
  /// One JSON object per line: {"epoch":..,"loss":..,"seconds":..,"metrics":{..}}.
  void write(std::ostream& out) const;
  static RunHistory read(std::istream& in);
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Train-split view that serves ids and pixels but refuses label reads.
class UnlabeledView {
 public:
  explicit UnlabeledView(const ImageSet& set);

  std::size_t size() const { return indices_.size(); }
  const std::string& id(std::size_t i) const;
  const Image& image(std::size_t i) const;
  /// Always throws LabelAccessError.
  [[noreturn]] int label(std::size_t i) const;

 private:
  const ImageSet* set_;
  std::vector<std::size_t> indices_;
};

struct PretrainResult {
  FeaturizerModel model;
  RunHistory history;
};

/// Contrastive pretraining on the Train split. Each step: a view pair per
/// sample, embed, project, NT-Xent, momentum SGD. Reads no labels.
PretrainResult pretrain(const ImageSet& data, FeaturizerModel model, const AugmentationPolicy& policy,
                        const TrainConfig& config, const EpochCallback& on_epoch = {});

/// Which train samples expose their labels. Per class, the labeled ids are a
/// prefix of a seeded shuffle, so splits at increasing fractions are nested.
struct LabelFractionSplit {
  double fraction = 1.0;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::string>> labeled_by_class;
  std::vector<std::string> unlabeled;

  std::vector<std::string> labeled_ids() const;
  std::size_t labeled_count() const;
  int num_classes() const { return static_cast<int>(labeled_by_class.size()); }
};

/// |labeled_c| = max(1, round(p * n_c)) for every class c.
LabelFractionSplit label_fraction_split(const DatasetManifest& manifest, double fraction,
                                        std::uint64_t seed);

struct ClassifierResult {
  ClassifierModel model;
  RunHistory history;
};

/// Trains a fresh head on the labeled ids over a frozen featurizer; the
/// featurizer weights are returned bit-for-bit unchanged.
ClassifierResult finetune(const FeaturizerModel& featurizer, const ImageSet& data,
                          const LabelFractionSplit& split, const HeadConfig& head,
                          const TrainConfig& config, const EpochCallback& on_epoch = {});

/// Head training on precomputed embeddings (embedding_dim x n), labels per column.
RunHistory train_head(ClassifierHead& head, const nn::Matrix& embeddings,
                      const std::vector<int>& labels, const TrainConfig& config,
                      const EpochCallback& on_epoch = {});

/// Same architecture as finetune's output, trained end-to-end from random
/// init on the labeled ids only.
ClassifierResult train_supervised_baseline(const ImageSet& data, const LabelFractionSplit& split,
                                           const FeaturizerConfig& model_config,
                                           const HeadConfig& head, const TrainConfig& config,
                                           const EpochCallback& on_epoch = {});

/// Fraction of correct predictions over the entries tagged split.
double evaluate_accuracy(const ClassifierModel& model, const ImageSet& data, Split split);

}  // namespace celestial
