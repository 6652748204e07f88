#include "celestial/model.hpp"

#include "celestial/errors.hpp"
#include "celestial/log.hpp"

#include <cmath>
#include <cstring>
#include <random>

namespace celestial {

using nn::Matrix;

constexpr float kPoolEpsilon = 1e-5f;

FeaturizerConfig FeaturizerConfig::desk() {
  FeaturizerConfig c;
  c.conv_blocks.front().stride = 2;
  return c;
}

void FeaturizerConfig::validate() const {
  if (channels != 1 && channels != 3) throw ValidationError("input channels must be 1 or 3");
  if (height <= 0 || width <= 0) throw ValidationError("input size must be positive");
  if (conv_blocks.empty()) throw ValidationError("at least one conv block is required");
  if (embedding_dim <= 0 || projection_dim <= 0 || projection_hidden <= 0)
    throw ValidationError("embedding, projection and projection hidden sizes must be positive");
  int h = height, w = width;
  for (std::size_t i = 0; i < conv_blocks.size(); ++i) {
    const auto& b = conv_blocks[i];
    if (b.filters <= 0 || b.kernel <= 0 || b.stride <= 0 || b.pool <= 0)
      throw ValidationError("conv block " + std::to_string(i) + " has a non-positive setting");
    const int pad = b.kernel / 2;
    h = (h + 2 * pad - b.kernel) / b.stride + 1;
    w = (w + 2 * pad - b.kernel) / b.stride + 1;
    h /= b.pool;
    w /= b.pool;
    if (h <= 0 || w <= 0)
      throw ValidationError("conv block " + std::to_string(i) + " produces a non-positive spatial size");
  }
}

std::int64_t FeaturizerConfig::parameter_count() const {
  std::int64_t n = 0;
  std::int64_t in = channels;
  for (const auto& b : conv_blocks) {
    n += in * b.kernel * b.kernel * b.filters + b.filters;
    in = b.filters;
  }
  n += (in + 1) * embedding_dim;
  n += (static_cast<std::int64_t>(embedding_dim) + 1) * projection_hidden;
  n += (static_cast<std::int64_t>(projection_hidden) + 1) * projection_dim;
  return n;
}

bool FeaturizerConfig::within_budget() const {
  const double n = static_cast<double>(parameter_count());
  const double b = static_cast<double>(param_budget);
  return n >= b * (1.0 - param_tolerance) && n <= b * (1.0 + param_tolerance);
}

std::vector<nn::ParamRef> FeaturizerModel::parameters() {
  std::vector<nn::ParamRef> p;
  for (std::size_t i = 0; i < convs.size(); ++i) {
    p.push_back({"conv" + std::to_string(i) + ".weight", &convs[i].weight});
    p.push_back({"conv" + std::to_string(i) + ".bias", &convs[i].bias});
  }
  p.push_back({"embedding.weight", &embedding.weight});
  p.push_back({"embedding.bias", &embedding.bias});
  if (projection) {
    p.push_back({"projection.hidden.weight", &projection->hidden.weight});
    p.push_back({"projection.hidden.bias", &projection->hidden.bias});
    p.push_back({"projection.out.weight", &projection->out.weight});
    p.push_back({"projection.out.bias", &projection->out.bias});
  }
  return p;
}

std::vector<nn::ConstParamRef> FeaturizerModel::parameters() const {
  std::vector<nn::ConstParamRef> out;
  for (auto& p : const_cast<FeaturizerModel*>(this)->parameters()) out.push_back({p.name, p.value});
  return out;
}

std::vector<nn::ParamRef> ClassifierModel::parameters(bool trainable_only) {
  std::vector<nn::ParamRef> p;
  if (!(trainable_only && featurizer.frozen)) p = featurizer.parameters();
  p.push_back({"head.hidden.weight", &head.hidden.weight});
  p.push_back({"head.hidden.bias", &head.hidden.bias});
  p.push_back({"head.out.weight", &head.out.weight});
  p.push_back({"head.out.bias", &head.out.bias});
  return p;
}

std::vector<nn::ConstParamRef> ClassifierModel::parameters() const {
  std::vector<nn::ConstParamRef> out;
  for (auto& p : const_cast<ClassifierModel*>(this)->parameters(false)) out.push_back({p.name, p.value});
  return out;
}

FeaturizerModel build_featurizer(const FeaturizerConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 gen(seed);
  FeaturizerModel m;
  m.config = config;
  int in = config.channels;
  for (const auto& b : config.conv_blocks) {
    m.convs.push_back(nn::make_conv(in, b.filters, b.kernel, b.stride, gen));
    in = b.filters;
  }
  m.embedding = nn::make_dense(in, config.embedding_dim, 1.0, gen);
  ProjectionHead head;
  head.hidden = nn::make_dense(config.embedding_dim, config.projection_hidden, std::sqrt(2.0), gen);
  head.out = nn::make_dense(config.projection_hidden, config.projection_dim, 1.0, gen);
  m.projection = std::move(head);
  return m;
}

namespace {

Matrix relu(const Matrix& x) { return x.cwiseMax(0.0f); }

Matrix relu_backward(const Matrix& dy, const Matrix& activation) {
  return (activation.array() > 0.0f).select(dy, 0.0f);
}

}  // namespace

Matrix embed(const FeaturizerModel& model, std::span<const Image> images, BackboneTrace* trace) {
  const auto& cfg = model.config;
  const Eigen::Index batch = static_cast<Eigen::Index>(images.size());
  const int last_channels = model.convs.empty() ? cfg.channels : model.convs.back().out_channels;
  Matrix pooled(last_channels, batch);
  if (trace) {
    trace->samples.clear();
    trace->samples.resize(images.size());
  }
  for (Eigen::Index b = 0; b < batch; ++b) {
    const Image& img = images[static_cast<std::size_t>(b)];
    if (img.height != cfg.height || img.width != cfg.width || img.channels != cfg.channels)
      throw ValidationError("image shape " + std::to_string(img.height) + "x" +
                            std::to_string(img.width) + "x" + std::to_string(img.channels) +
                            " does not match featurizer input " + std::to_string(cfg.height) +
                            "x" + std::to_string(cfg.width) + "x" + std::to_string(cfg.channels));
    Matrix x = img.pixels.array() - 0.5f;  // centered input
    int h = img.height, w = img.width;
    BackboneTrace::Sample* s = trace ? &trace->samples[static_cast<std::size_t>(b)] : nullptr;
    for (std::size_t i = 0; i < model.convs.size(); ++i) {
      const auto& conv = model.convs[i];
      Matrix y = relu(nn::forward(conv, x, h, w));
      const int oh = conv.out_size(h), ow = conv.out_size(w);
      const int pool = cfg.conv_blocks[i].pool;
      if (s) s->inputs.push_back(std::move(x));
      if (pool > 1) {
        auto r = nn::max_pool(y, oh, ow, pool);
        x = std::move(r.out);
        if (s) {
          s->activations.push_back(std::move(y));
          s->argmax.push_back(std::move(r.argmax));
        }
        h = oh / pool;
        w = ow / pool;
      } else {
        if (s) {
          s->activations.push_back(y);
          s->argmax.emplace_back();
        }
        x = std::move(y);
        h = oh;
        w = ow;
      }
    }
    pooled.col(b) = x.rowwise().mean();
  }
  // Per-sample standardization across channels, so every embedding is
  // computed from a zero-mean, unit-variance feature vector.
  Eigen::VectorXf scale(batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    auto col = pooled.col(b);
    col.array() -= col.mean();
    scale(b) = 1.0f / std::sqrt(col.squaredNorm() / static_cast<float>(col.size()) + kPoolEpsilon);
    col *= scale(b);
  }
  if (trace) {
    trace->pooled = pooled;
    trace->pooled_scale = std::move(scale);
  }
  Matrix out(model.embedding.out(), batch);
  // Column-at-a-time keeps each embedding independent of batch composition.
  for (Eigen::Index b = 0; b < batch; ++b)
    out.col(b).noalias() = model.embedding.weight * pooled.col(b) + model.embedding.bias.col(0);
  return out;
}

void embed_backward(const FeaturizerModel& model, const BackboneTrace& trace,
                    const Matrix& d_embedding, std::span<Matrix> grads) {
  const std::size_t n_conv = model.convs.size();
  Matrix d_pooled;
  nn::backward(model.embedding, trace.pooled, d_embedding, grads[2 * n_conv], grads[2 * n_conv + 1],
               &d_pooled);
  for (Eigen::Index b = 0; b < d_pooled.cols(); ++b) {
    const auto xhat = trace.pooled.col(b);
    auto d = d_pooled.col(b);
    const float n = static_cast<float>(d.size());
    const float mean_d = d.sum() / n;
    const float mean_dx = d.dot(xhat) / n;
    d = (trace.pooled_scale(b) * (d.array() - mean_d - xhat.array() * mean_dx)).matrix();
  }
  const auto& cfg = model.config;

  for (std::size_t b = 0; b < trace.samples.size(); ++b) {
    const auto& s = trace.samples[b];
    // Spatial sizes at each block input.
    std::vector<std::pair<int, int>> sizes;
    int h = cfg.height, w = cfg.width;
    for (std::size_t i = 0; i < n_conv; ++i) {
      sizes.emplace_back(h, w);
      h = model.convs[i].out_size(h) / cfg.conv_blocks[i].pool;
      w = model.convs[i].out_size(w) / cfg.conv_blocks[i].pool;
    }
    const Eigen::Index final_spatial = static_cast<Eigen::Index>(h) * w;
    Matrix dx = d_pooled.col(static_cast<Eigen::Index>(b)).replicate(1, final_spatial) /
                static_cast<float>(final_spatial);
    for (std::size_t ii = n_conv; ii-- > 0;) {
      const auto& conv = model.convs[ii];
      const auto [ih, iw] = sizes[ii];
      const int oh = conv.out_size(ih), ow = conv.out_size(iw);
      Matrix dy = cfg.conv_blocks[ii].pool > 1
                      ? nn::max_pool_backward(dx, s.argmax[ii], oh * ow)
                      : dx;
      dy = relu_backward(dy, s.activations[ii]);
      nn::backward(conv, s.inputs[ii], ih, iw, dy, grads[2 * ii], grads[2 * ii + 1],
                   ii > 0 ? &dx : nullptr);
    }
  }
}

Matrix project(const FeaturizerModel& model, const Matrix& embeddings, ProjectionTrace* trace,
               ProjectDiagnostics* diagnostics) {
  if (!model.projection) throw MissingHeadError("model has no projection head (already stripped)");
  if (embeddings.rows() != model.config.embedding_dim)
    throw ValidationError("embedding dimension mismatch in project()");
  Matrix hidden = relu(nn::forward(model.projection->hidden, embeddings));
  Matrix raw = nn::forward(model.projection->out, hidden);
  Matrix out(raw.rows(), raw.cols());
  for (Eigen::Index j = 0; j < raw.cols(); ++j) {
    const double norm = raw.col(j).cast<double>().norm();
    if (norm == 0.0 || !std::isfinite(norm)) {
      out.col(j).setZero();
      out(0, j) = 1.0f;
      if (diagnostics) diagnostics->zero_vectors.push_back(j);
    } else {
      out.col(j) = (raw.col(j).cast<double>() / norm).cast<float>();
    }
  }
  if (trace) {
    trace->input = embeddings;
    trace->hidden = std::move(hidden);
    trace->raw = std::move(raw);
  }
  return out;
}

Matrix project_backward(const FeaturizerModel& model, const ProjectionTrace& trace,
                        const Matrix& d_projected, std::span<Matrix> grads) {
  if (!model.projection) throw MissingHeadError("model has no projection head (already stripped)");
  Matrix d_raw(trace.raw.rows(), trace.raw.cols());
  for (Eigen::Index j = 0; j < trace.raw.cols(); ++j) {
    const double norm = trace.raw.col(j).cast<double>().norm();
    if (norm == 0.0 || !std::isfinite(norm)) {
      d_raw.col(j).setZero();
      continue;
    }
    Eigen::VectorXd u = trace.raw.col(j).cast<double>() / norm;
    Eigen::VectorXd g = d_projected.col(j).cast<double>();
    d_raw.col(j) = ((g - u * u.dot(g)) / norm).cast<float>();
  }
  Matrix d_hidden;
  nn::backward(model.projection->out, trace.hidden, d_raw, grads[2], grads[3], &d_hidden);
  d_hidden = relu_backward(d_hidden, trace.hidden);
  Matrix d_input;
  nn::backward(model.projection->hidden, trace.input, d_hidden, grads[0], grads[1], &d_input);
  return d_input;
}

FeaturizerModel strip_projection(FeaturizerModel model) {
  if (!model.projection) {
    log_warning("strip_projection: model is already stripped");
    return model;
  }
  model.projection.reset();
  return model;
}

ClassifierHead make_classifier_head(int embedding_dim, int hidden_dim, int num_classes,
                                    std::uint64_t seed) {
  if (num_classes < 2) throw ValidationError("classifier needs at least 2 classes");
  if (hidden_dim <= 0 || embedding_dim <= 0) throw ValidationError("head sizes must be positive");
  std::mt19937_64 gen(seed);
  ClassifierHead head;
  head.hidden = nn::make_dense(embedding_dim, hidden_dim, std::sqrt(2.0), gen);
  // Small output weights so the untrained head predicts close to uniform.
  head.out = nn::make_dense(hidden_dim, num_classes, 0.1, gen);
  return head;
}

ClassifierModel attach_head(FeaturizerModel featurizer, int num_classes, int hidden_dim,
                            std::uint64_t seed, bool freeze) {
  if (featurizer.has_projection())
    throw ValidationError("attach_head requires a featurizer stripped of its projection head");
  ClassifierModel m;
  m.head = make_classifier_head(featurizer.config.embedding_dim, hidden_dim, num_classes, seed);
  featurizer.frozen = freeze;
  m.featurizer = std::move(featurizer);
  return m;
}

Matrix normalize_embeddings(const Matrix& embeddings, Eigen::VectorXf* norms) {
  const float scale = std::sqrt(static_cast<float>(embeddings.rows()));
  Matrix out(embeddings.rows(), embeddings.cols());
  if (norms) norms->resize(embeddings.cols());
  for (Eigen::Index j = 0; j < embeddings.cols(); ++j) {
    const float n = embeddings.col(j).norm();
    if (norms) (*norms)(j) = n;
    if (n > 0.0f)
      out.col(j) = embeddings.col(j) * (scale / n);
    else
      out.col(j).setZero();
  }
  return out;
}

Matrix head_logits(const ClassifierHead& head, const Matrix& embeddings, HeadTrace* trace) {
  Eigen::VectorXf norms;
  Matrix input = normalize_embeddings(embeddings, &norms);
  Matrix hidden = relu(nn::forward(head.hidden, input));
  Matrix logits = nn::forward(head.out, hidden);
  if (trace) {
    trace->input = std::move(input);
    trace->norms = std::move(norms);
    trace->hidden = std::move(hidden);
  }
  return logits;
}

Matrix head_backward(const ClassifierHead& head, const HeadTrace& trace, const Matrix& d_logits,
                     std::span<Matrix> grads) {
  Matrix d_hidden;
  nn::backward(head.out, trace.hidden, d_logits, grads[2], grads[3], &d_hidden);
  d_hidden = relu_backward(d_hidden, trace.hidden);
  Matrix d_input;
  nn::backward(head.hidden, trace.input, d_hidden, grads[0], grads[1], &d_input);
  // Through x = sqrt(d) * e / |e|: de = (sqrt(d) / |e|) (dx - u (u . dx)), u = e / |e|.
  const float scale = std::sqrt(static_cast<float>(trace.input.rows()));
  Matrix d_embed(d_input.rows(), d_input.cols());
  for (Eigen::Index j = 0; j < d_input.cols(); ++j) {
    const float n = trace.norms(j);
    if (n == 0.0f) {
      d_embed.col(j).setZero();
      continue;
    }
    const Eigen::VectorXf u = trace.input.col(j) / scale;
    d_embed.col(j) = (d_input.col(j) - u * u.dot(d_input.col(j))) * (scale / n);
  }
  return d_embed;
}

Matrix classify(const ClassifierModel& model, std::span<const Image> images) {
  return head_logits(model.head, embed(model.featurizer, images));
}

std::vector<int> argmax_columns(const Matrix& scores) {
  std::vector<int> out(static_cast<std::size_t>(scores.cols()));
  for (Eigen::Index j = 0; j < scores.cols(); ++j) {
    Eigen::Index best = 0;
    scores.col(j).maxCoeff(&best);
    out[static_cast<std::size_t>(j)] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> predict(const ClassifierModel& model, std::span<const Image> images) {
  return argmax_columns(classify(model, images));
}

std::int64_t count_parameters(const nn::Dense& layer) { return layer.parameter_count(); }

std::int64_t count_parameters(const FeaturizerModel& model, bool trainable_only) {
  if (trainable_only && model.frozen) return 0;
  std::int64_t n = 0;
  for (const auto& p : model.parameters()) n += p.value->size();
  return n;
}

std::int64_t count_parameters(const ClassifierHead& head) {
  return count_parameters(head.hidden) + count_parameters(head.out);
}

std::int64_t count_parameters(const ClassifierModel& model, bool trainable_only) {
  return count_parameters(model.featurizer, trainable_only) + count_parameters(model.head);
}

namespace {

bool bit_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
}

template <typename Params>
bool same_params(const Params& pa, const Params& pb) {
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i].name != pb[i].name || !bit_equal(*pa[i].value, *pb[i].value)) return false;
  return true;
}

}  // namespace

bool same_weights(const FeaturizerModel& a, const FeaturizerModel& b) {
  return a.config == b.config && a.frozen == b.frozen && same_params(a.parameters(), b.parameters());
}

bool same_weights(const ClassifierModel& a, const ClassifierModel& b) {
  return a.featurizer.config == b.featurizer.config && a.featurizer.frozen == b.featurizer.frozen &&
         same_params(a.parameters(), b.parameters());
}

}  // namespace celestial
