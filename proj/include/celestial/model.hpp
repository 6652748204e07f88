#pragma once

#include "celestial/image.hpp"
#include "celestial/nn.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace celestial {

struct ConvBlockSpec {
  int filters = 32;
  int kernel = 3;
  int stride = 1;
  int pool = 2;  // 1 disables pooling
  friend bool operator==(const ConvBlockSpec&, const ConvBlockSpec&) = default;
};

/// Backbone topology and head sizes. The default is four 3x3 conv blocks
/// (32/64/128/128 filters, 2x2 max-pool each) + global average pooling + a
/// dense embedding layer; with a 1280-wide projection hidden layer the total
/// is 504,448 trainable scalars.
struct FeaturizerConfig {
  int height = 64;
  int width = 64;
  int channels = 3;
  std::vector<ConvBlockSpec> conv_blocks{{32, 3, 1, 2}, {64, 3, 1, 2}, {128, 3, 1, 2}, {128, 3, 1, 2}};
  int embedding_dim = 128;
  int projection_hidden = 1280;
  int projection_dim = 64;
  std::int64_t param_budget = 500000;
  double param_tolerance = 0.10;

  /// Same parameter count as the default but a stride-2 stem, for runs on
  /// small machines (about a quarter of the arithmetic).
  static FeaturizerConfig desk();

  /// Throws ValidationError if any layer would have non-positive spatial size.
  void validate() const;

  /// Closed-form backbone + projection parameter count.
  std::int64_t parameter_count() const;
  bool within_budget() const;

  friend bool operator==(const FeaturizerConfig&, const FeaturizerConfig&) = default;
};

struct ProjectionHead {
  nn::Dense hidden;
  nn::Dense out;
};

struct ClassifierHead {
  nn::Dense hidden;
  nn::Dense out;
};

/// The featurizer: conv backbone + embedding layer, plus the projection head
/// while it is being pretrained.
struct FeaturizerModel {
  FeaturizerConfig config;
  std::vector<nn::Conv2d> convs;
  nn::Dense embedding;
  std::optional<ProjectionHead> projection;
  bool frozen = false;

  bool has_projection() const { return projection.has_value(); }

  /// Backbone tensors first (conv{i}.weight, conv{i}.bias, embedding.*),
  /// then projection.* when present.
  std::vector<nn::ParamRef> parameters();
  std::vector<nn::ConstParamRef> parameters() const;
  std::size_t backbone_tensor_count() const { return 2 * convs.size() + 2; }
};

/// f = head o featurizer. The head sees embeddings rescaled to norm sqrt(d),
/// the same cosine geometry the retrieval index uses.
struct ClassifierModel {
  FeaturizerModel featurizer;
  ClassifierHead head;

  int num_classes() const { return head.out.out(); }
  int hidden_dim() const { return head.hidden.out(); }

  /// Featurizer tensors (unless frozen and trainable_only) followed by head.*.
  std::vector<nn::ParamRef> parameters(bool trainable_only = false);
  std::vector<nn::ConstParamRef> parameters() const;
};

FeaturizerModel build_featurizer(const FeaturizerConfig& config, std::uint64_t seed);

/// Per-sample activations kept for backpropagation.
struct BackboneTrace {
  struct Sample {
    std::vector<nn::Matrix> inputs;       // input to conv block i
    std::vector<nn::Matrix> activations;  // ReLU output of block i, before pooling
    std::vector<std::vector<int>> argmax;
  };
  std::vector<Sample> samples;
  nn::Matrix pooled;           // standardized pooled features, channels x batch
  Eigen::VectorXf pooled_scale;  // 1 / std of each sample's pooled features
};

/// Backbone output for each image (embedding_dim x batch). No projection.
nn::Matrix embed(const FeaturizerModel& model, std::span<const Image> images,
                 BackboneTrace* trace = nullptr);

/// Backpropagates d_embedding into grads[0 .. backbone_tensor_count()).
void embed_backward(const FeaturizerModel& model, const BackboneTrace& trace,
                    const nn::Matrix& d_embedding, std::span<nn::Matrix> grads);

struct ProjectionTrace {
  nn::Matrix input;
  nn::Matrix hidden;  // after ReLU
  nn::Matrix raw;     // before normalization
};

struct ProjectDiagnostics {
  std::vector<Eigen::Index> zero_vectors;  // columns replaced by the first basis vector
};

/// L2-normalized projections (projection_dim x batch). Throws MissingHeadError
/// on a stripped model.
nn::Matrix project(const FeaturizerModel& model, const nn::Matrix& embeddings,
                   ProjectionTrace* trace = nullptr, ProjectDiagnostics* diagnostics = nullptr);

/// Backpropagates through normalization and the projection layers; writes the
/// four projection gradients to grads and returns d_embeddings.
nn::Matrix project_backward(const FeaturizerModel& model, const ProjectionTrace& trace,
                            const nn::Matrix& d_projected, std::span<nn::Matrix> grads);

/// Drops the projection head; the backbone is copied bit-for-bit. Warns and
/// returns the model unchanged when it is already stripped.
FeaturizerModel strip_projection(FeaturizerModel model);

ClassifierHead make_classifier_head(int embedding_dim, int hidden_dim, int num_classes,
                                    std::uint64_t seed);

/// Requires a stripped featurizer and num_classes >= 2.
ClassifierModel attach_head(FeaturizerModel featurizer, int num_classes, int hidden_dim,
                            std::uint64_t seed, bool freeze);

struct HeadTrace {
  nn::Matrix input;       // normalized embeddings
  Eigen::VectorXf norms;  // embedding norms before normalization
  nn::Matrix hidden;      // after ReLU
};

/// sqrt(d) * e / |e| per column, the head's input scaling (zero columns stay zero).
nn::Matrix normalize_embeddings(const nn::Matrix& embeddings, Eigen::VectorXf* norms = nullptr);

nn::Matrix head_logits(const ClassifierHead& head, const nn::Matrix& embeddings,
                       HeadTrace* trace = nullptr);

/// Writes the four head gradients to grads, returns d_embeddings.
nn::Matrix head_backward(const ClassifierHead& head, const HeadTrace& trace,
                         const nn::Matrix& d_logits, std::span<nn::Matrix> grads);

/// Class scores (num_classes x batch).
nn::Matrix classify(const ClassifierModel& model, std::span<const Image> images);
std::vector<int> predict(const ClassifierModel& model, std::span<const Image> images);
std::vector<int> argmax_columns(const nn::Matrix& scores);

std::int64_t count_parameters(const nn::Dense& layer);
std::int64_t count_parameters(const FeaturizerModel& model, bool trainable_only = false);
std::int64_t count_parameters(const ClassifierHead& head);
std::int64_t count_parameters(const ClassifierModel& model, bool trainable_only = false);

/// Bit-level equality of every tensor (and the config and flags).
bool same_weights(const FeaturizerModel& a, const FeaturizerModel& b);
bool same_weights(const ClassifierModel& a, const ClassifierModel& b);

}  // namespace celestial
