#include "celestial/train.hpp"

#include "celestial/errors.hpp"
#include "celestial/log.hpp"
#include "celestial/loss.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <unordered_map>

namespace celestial {

using nn::Matrix;

void TrainConfig::validate(bool contrastive) const {
  if (epochs < 0) throw ValidationError("epochs must be non-negative");
  if (batch_size < 1) throw ValidationError("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("momentum must be in [0,1)");
  if (optimizer != "momentum_sgd" && optimizer != "sgd")
    throw ValidationError("unknown optimizer '" + optimizer + "'");
  if (contrastive) {
    if (!(temperature > 0.0)) throw ValidationError("temperature must be positive");
    if (batch_size < 2) throw ValidationError("contrastive batch_size must be at least 2 pairs");
  }
}

void RunHistory::append(EpochRecord record) {
  if (!std::isfinite(record.mean_loss)) throw TrainingError("non-finite epoch loss");
  if (!epochs.empty() && record.epoch <= epochs.back().epoch)
    throw Error("epoch indices must be strictly increasing");
  epochs.push_back(std::move(record));
}

void RunHistory::write(std::ostream& out) const {
  for (const auto& r : epochs) {
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["loss"] = r.mean_loss;
    j["seconds"] = r.seconds;
    j["metrics"] = r.metrics;
    out << j.dump() << '\n';
  }
}

RunHistory RunHistory::read(std::istream& in) {
  RunHistory h;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      EpochRecord r;
      r.epoch = j.at("epoch").get<int>();
      r.mean_loss = j.at("loss").get<double>();
      r.seconds = j.at("seconds").get<double>();
      if (j.contains("metrics")) r.metrics = j["metrics"].get<std::map<std::string, double>>();
      h.append(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, e.what());
    }
  }
  return h;
}

UnlabeledView::UnlabeledView(const ImageSet& set) : set_(&set) {
  for (std::size_t i = 0; i < set.size(); ++i)
    if (set.manifest.entries[i].split == Split::Train) indices_.push_back(i);
}

const std::string& UnlabeledView::id(std::size_t i) const {
  return set_->manifest.entries[indices_.at(i)].id;
}

const Image& UnlabeledView::image(std::size_t i) const { return set_->images[indices_.at(i)]; }

int UnlabeledView::label(std::size_t i) const {
  throw LabelAccessError("label access during label-free pretraining (sample " + id(i) + ")");
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

double effective_momentum(const TrainConfig& c) { return c.optimizer == "sgd" ? 0.0 : c.momentum; }

}  // namespace

PretrainResult pretrain(const ImageSet& data, FeaturizerModel model, const AugmentationPolicy& policy,
                        const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate(true);
  policy.validate();
  if (!model.has_projection()) throw ValidationError("pretrain requires a projection head");
  if (model.frozen) throw ValidationError("pretrain cannot update a frozen featurizer");
  const UnlabeledView view(data);
  if (view.size() == 0) throw ValidationError("pretrain needs a non-empty train split");

  PretrainResult result{std::move(model), {}};
  FeaturizerModel& m = result.model;
  auto params = m.parameters();
  nn::MomentumSgd opt(config.learning_rate, effective_momentum(config));
  std::mt19937_64 gen(config.seed);
  std::vector<std::size_t> order(view.size());
  const std::size_t min_pairs = 2;  // pairs needed in the last partial batch

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = Clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), gen);
    double loss_sum = 0.0;
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const std::size_t pairs = end - start;
      if (pairs < min_pairs) break;

      std::vector<Image> views(2 * pairs);
      for (std::size_t b = 0; b < pairs; ++b) {
        const std::size_t idx = order[start + b];
        const std::uint64_t draw = static_cast<std::uint64_t>(epoch) * view.size() + idx;
        views[b] = augment(view.image(idx), policy, 2 * draw);
        views[pairs + b] = augment(view.image(idx), policy, 2 * draw + 1);
      }

      BackboneTrace btrace;
      ProjectionTrace ptrace;
      const Matrix embeddings = embed(m, views, &btrace);
      const Matrix projected = project(m, embeddings, &ptrace);
      const auto pairing = interleaved_pairing(static_cast<int>(pairs));
      const auto loss = contrastive_loss<double>(projected.cast<double>(), pairing, config.temperature);
      if (!std::isfinite(loss.loss)) {
        std::ostringstream ids;
        for (std::size_t b = 0; b < pairs; ++b) ids << (b ? "," : "") << view.id(order[start + b]);
        throw TrainingError("non-finite contrastive loss at epoch " + std::to_string(epoch) +
                            "; batch ids: " + ids.str());
      }

      auto grads = nn::zeros_like(params);
      std::span<Matrix> all(grads);
      const std::size_t nb = m.backbone_tensor_count();
      const Matrix d_embed = project_backward(m, ptrace, loss.gradient.cast<float>(), all.subspan(nb, 4));
      embed_backward(m, btrace, d_embed, all.first(nb));
      opt.step(params, grads);
      loss_sum += loss.loss;
      ++steps;
    }
    EpochRecord rec{epoch, steps ? loss_sum / steps : 0.0, seconds_since(t0), {}};
    if (on_epoch) on_epoch(rec);
    result.history.append(std::move(rec));
  }
  return result;
}

std::vector<std::string> LabelFractionSplit::labeled_ids() const {
  std::vector<std::string> out;
  for (const auto& c : labeled_by_class) out.insert(out.end(), c.begin(), c.end());
  return out;
}

std::size_t LabelFractionSplit::labeled_count() const {
  std::size_t n = 0;
  for (const auto& c : labeled_by_class) n += c.size();
  return n;
}

LabelFractionSplit label_fraction_split(const DatasetManifest& manifest, double fraction,
                                        std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("label fraction must be in (0,1]");
  const int k = manifest.num_classes();
  if (k < 1) throw ValidationError("manifest has no classes");
  std::vector<std::vector<std::string>> by_class(static_cast<std::size_t>(k));
  for (const auto& e : manifest.entries) {
    if (e.split != Split::Train) continue;
    if (!e.label) throw ValidationError("train entry '" + e.id + "' has no label to mask");
    by_class[static_cast<std::size_t>(*e.label)].push_back(e.id);
  }
  LabelFractionSplit split;
  split.fraction = fraction;
  split.seed = seed;
  std::unordered_map<std::string, bool> labeled;
  for (int c = 0; c < k; ++c) {
    auto& ids = by_class[static_cast<std::size_t>(c)];
    if (ids.empty())
      throw ValidationError("class '" + manifest.class_names[static_cast<std::size_t>(c)] + "' has no train samples");
    std::mt19937_64 gen(seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(c + 1)));
    std::shuffle(ids.begin(), ids.end(), gen);
    const auto want = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ids.size()))));
    ids.resize(std::min(want, ids.size()));
    for (const auto& id : ids) labeled[id] = true;
    split.labeled_by_class.push_back(ids);
  }
  for (const auto& e : manifest.entries)
    if (e.split == Split::Train && !labeled.count(e.id)) split.unlabeled.push_back(e.id);
  return split;
}

namespace {

struct LabeledSet {
  std::vector<std::size_t> indices;  // into data
  std::vector<int> labels;
};

LabeledSet resolve_labeled(const ImageSet& data, const LabelFractionSplit& split) {
  std::unordered_map<std::string_view, std::size_t> where;
  for (std::size_t i = 0; i < data.size(); ++i) where[data.manifest.entries[i].id] = i;
  LabeledSet out;
  for (std::size_t c = 0; c < split.labeled_by_class.size(); ++c) {
    for (const auto& id : split.labeled_by_class[c]) {
      auto it = where.find(id);
      if (it == where.end()) throw NotFoundError("labeled id '" + id + "' not in dataset");
      out.indices.push_back(it->second);
      out.labels.push_back(static_cast<int>(c));
    }
  }
  if (out.indices.empty()) throw ValidationError("split has no labeled samples");
  if (out.indices.size() < split.labeled_by_class.size())
    log_warning("fewer labeled samples than classes; proceeding");
  return out;
}

Matrix embed_in_chunks(const FeaturizerModel& model, const std::vector<Image>& images,
                       std::size_t chunk = 64) {
  Matrix out(model.config.embedding_dim, static_cast<Eigen::Index>(images.size()));
  for (std::size_t s = 0; s < images.size(); s += chunk) {
    const std::size_t e = std::min(images.size(), s + chunk);
    out.middleCols(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(e - s)) =
        embed(model, std::span<const Image>(images).subspan(s, e - s));
  }
  return out;
}

}  // namespace

RunHistory train_head(ClassifierHead& head, const Matrix& embeddings, const std::vector<int>& labels,
                      const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate(false);
  if (static_cast<std::size_t>(embeddings.cols()) != labels.size())
    throw ValidationError("embedding count does not match label count");
  std::vector<nn::ParamRef> params{{"head.hidden.weight", &head.hidden.weight},
                                   {"head.hidden.bias", &head.hidden.bias},
                                   {"head.out.weight", &head.out.weight},
                                   {"head.out.bias", &head.out.bias}};
  nn::MomentumSgd opt(config.learning_rate, effective_momentum(config));
  std::mt19937_64 gen(config.seed);
  std::vector<std::size_t> order(labels.size());
  RunHistory history;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = Clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), gen);
    double loss_sum = 0.0;
    int steps = 0;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(config.batch_size));
      Matrix x(embeddings.rows(), static_cast<Eigen::Index>(e - s));
      std::vector<int> y;
      for (std::size_t b = s; b < e; ++b) {
        x.col(static_cast<Eigen::Index>(b - s)) = embeddings.col(static_cast<Eigen::Index>(order[b]));
        y.push_back(labels[order[b]]);
      }
      HeadTrace trace;
      const Matrix logits = head_logits(head, x, &trace);
      const auto ce = softmax_cross_entropy<float>(logits, y);
      if (!std::isfinite(ce.loss)) throw TrainingError("non-finite head loss at epoch " + std::to_string(epoch));
      auto grads = nn::zeros_like(params);
      head_backward(head, trace, ce.d_logits, grads);
      opt.step(params, grads);
      loss_sum += ce.loss;
      ++steps;
    }
    EpochRecord rec{epoch, steps ? loss_sum / steps : 0.0, seconds_since(t0), {}};
    if (on_epoch) on_epoch(rec);
    history.append(std::move(rec));
  }
  return history;
}

ClassifierResult finetune(const FeaturizerModel& featurizer, const ImageSet& data,
                          const LabelFractionSplit& split, const HeadConfig& head,
                          const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate(false);
  if (featurizer.has_projection())
    throw ValidationError("finetune requires a featurizer stripped of its projection head");
  const auto labeled = resolve_labeled(data, split);
  std::vector<Image> images;
  for (auto i : labeled.indices) images.push_back(data.images[i]);

  ClassifierResult result{attach_head(featurizer, split.num_classes(), head.hidden_dim, config.seed, true), {}};
  // The featurizer is frozen, so embeddings are computed once.
  const Matrix embeddings = embed_in_chunks(result.model.featurizer, images);
  result.history = train_head(result.model.head, embeddings, labeled.labels, config, on_epoch);
  return result;
}

ClassifierResult train_supervised_baseline(const ImageSet& data, const LabelFractionSplit& split,
                                           const FeaturizerConfig& model_config,
                                           const HeadConfig& head, const TrainConfig& config,
                                           const EpochCallback& on_epoch) {
  config.validate(false);
  const auto labeled = resolve_labeled(data, split);
  ClassifierResult result{
      attach_head(strip_projection(build_featurizer(model_config, config.seed)), split.num_classes(),
                  head.hidden_dim, config.seed, false),
      {}};
  ClassifierModel& m = result.model;
  auto params = m.parameters(true);
  const std::size_t nb = m.featurizer.backbone_tensor_count();
  nn::MomentumSgd opt(config.learning_rate, effective_momentum(config));
  std::mt19937_64 gen(config.seed);
  std::vector<std::size_t> order(labeled.indices.size());

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = Clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), gen);
    double loss_sum = 0.0;
    int steps = 0;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(config.batch_size));
      std::vector<Image> batch;
      std::vector<int> y;
      for (std::size_t b = s; b < e; ++b) {
        batch.push_back(data.images[labeled.indices[order[b]]]);
        y.push_back(labeled.labels[order[b]]);
      }
      BackboneTrace btrace;
      HeadTrace htrace;
      const Matrix emb = embed(m.featurizer, batch, &btrace);
      const Matrix logits = head_logits(m.head, emb, &htrace);
      const auto ce = softmax_cross_entropy<float>(logits, y);
      if (!std::isfinite(ce.loss))
        throw TrainingError("non-finite baseline loss at epoch " + std::to_string(epoch));
      auto grads = nn::zeros_like(params);
      std::span<Matrix> all(grads);
      const Matrix d_emb = head_backward(m.head, htrace, ce.d_logits, all.subspan(nb, 4));
      embed_backward(m.featurizer, btrace, d_emb, all.first(nb));
      opt.step(params, grads);
      loss_sum += ce.loss;
      ++steps;
    }
    EpochRecord rec{epoch, steps ? loss_sum / steps : 0.0, seconds_since(t0), {}};
    if (on_epoch) on_epoch(rec);
    result.history.append(std::move(rec));
  }
  return result;
}

double evaluate_accuracy(const ClassifierModel& model, const ImageSet& data, Split split) {
  std::vector<Image> images;
  std::vector<int> labels;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& e = data.manifest.entries[i];
    if (e.split != split) continue;
    if (!e.label) throw ValidationError("evaluation entry '" + e.id + "' has no label");
    images.push_back(data.images[i]);
    labels.push_back(*e.label);
  }
  if (images.empty()) throw ValidationError("no entries to evaluate");
  const auto pred = argmax_columns(head_logits(model.head, embed_in_chunks(model.featurizer, images)));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

}  // namespace celestial
