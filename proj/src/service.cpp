#include "celestial/service.hpp"

#include "celestial/checkpoint.hpp"
#include "celestial/errors.hpp"
#include "celestial/log.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace celestial {

using nlohmann::json;

std::string_view to_string(Verdict v) { return v == Verdict::Approve ? "approve" : "decline"; }

Verdict parse_verdict(std::string_view text) {
  if (text == "approve") return Verdict::Approve;
  if (text == "decline") return Verdict::Decline;
  throw ValidationError("verdict must be approve or decline, got '" + std::string(text) + "'");
}

std::string_view to_string(JobStatus s) {
  switch (s) {
    case JobStatus::Queued: return "queued";
    case JobStatus::Running: return "running";
    case JobStatus::Done: return "done";
    case JobStatus::Failed: return "failed";
  }
  return "failed";
}

JobStatus parse_job_status(std::string_view text) {
  for (auto s : {JobStatus::Queued, JobStatus::Running, JobStatus::Done, JobStatus::Failed})
    if (to_string(s) == text) return s;
  throw ValidationError("unknown job status '" + std::string(text) + "'");
}

int SearchSession::count(Verdict v) const {
  return static_cast<int>(
      std::count_if(feedback.begin(), feedback.end(), [v](const auto& kv) { return kv.second.verdict == v; }));
}

TrainConfig ServiceConfig::refine_defaults() {
  TrainConfig c = TrainConfig::head_defaults();
  c.epochs = 100;
  c.batch_size = 16;
  return c;
}

struct SearchService::Overlay {
  ClassifierHead head;
  std::vector<double> relevance;  // P(relevant) per index position
};

namespace {

std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

std::string numbered(char prefix, std::uint64_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%c-%06llu", prefix, static_cast<unsigned long long>(n));
  return buf;
}

std::uint64_t number_of(const std::string& id) {
  return id.size() > 2 ? std::strtoull(id.c_str() + 2, nullptr, 10) : 0;
}

}  // namespace

SearchService::SearchService(FeaturizerModel featurizer, DatasetManifest corpus, EmbeddingIndex index,
                             ServiceConfig config, std::string checkpoint_digest)
    : featurizer_(std::move(featurizer)),
      corpus_(std::move(corpus)),
      index_(std::move(index)),
      config_(std::move(config)),
      checkpoint_digest_(std::move(checkpoint_digest)) {
  if (featurizer_.has_projection()) throw ValidationError("the service needs a stripped featurizer");
  if (!(config_.blend_alpha >= 0.0 && config_.blend_alpha <= 1.0))
    throw ValidationError("blend_alpha must be in [0,1]");
  config_.refine.validate(false);
  if (index_.size() == 0) throw ValidationError("the corpus index is empty");
  for (const auto& id : index_.ids)
    if (!corpus_.find(id)) throw ValidationError("index id '" + id + "' is not in the corpus manifest");
  if (!config_.state_dir.empty()) {
    std::filesystem::create_directories(config_.state_dir / "snapshots");
    replay();
  }
  worker_ = std::thread([this] { worker_loop(); });
}

SearchService::~SearchService() {
  {
    std::lock_guard lock(mutex_);
    stopping_ = true;
  }
  cv_.notify_all();
  if (worker_.joinable()) worker_.join();
}

std::filesystem::path SearchService::log_path() const { return config_.state_dir / "events.jsonl"; }

std::filesystem::path SearchService::snapshot_path(const std::string& id) const {
  return config_.state_dir / "snapshots" / (id + ".ckpt");
}

void SearchService::record(const std::string& event_json) {
  if (!config_.state_dir.empty()) {
    std::ofstream out(log_path(), std::ios::app | std::ios::binary);
    out << event_json << '\n';
    out.flush();
    if (!out) throw Error("cannot append to " + log_path().string());
  }
  apply(event_json);
}

void SearchService::apply(const std::string& event_json) {
  const json e = json::parse(event_json);
  const std::string type = e.at("type");
  if (type == "session") {
    const std::string id = e.at("session");
    sessions_[id].id = id;
    next_session_ = std::max(next_session_, number_of(id) + 1);
    return;
  }
  SearchSession& s = sessions_.at(e.at("session").get<std::string>());
  if (type == "query") {
    s.queries.push_back(e.at("query"));
  } else if (type == "feedback") {
    s.feedback[e.at("item")] = {e.at("item"), parse_verdict(e.at("verdict").get<std::string>()), e.at("t")};
  } else if (type == "job") {
    const std::string id = e.at("job");
    const auto status = parse_job_status(e.at("status").get<std::string>());
    RefinementJob& j = jobs_[id];
    if (status == JobStatus::Queued) {
      j = {id, s.id, status, std::nullopt, {}};
      s.active_job = id;
      next_job_ = std::max(next_job_, number_of(id) + 1);
      return;
    }
    if (static_cast<int>(status) <= static_cast<int>(j.status))
      throw Error("job " + id + " cannot move from " + std::string(to_string(j.status)) + " to " +
                  std::string(to_string(status)));
    j.status = status;
    if (status == JobStatus::Done) {
      j.snapshot = e.at("snapshot").get<std::string>();
      s.snapshot = j.snapshot;
      ++s.generation;
    }
    if (status == JobStatus::Failed) j.error = e.value("error", "");
    if (status == JobStatus::Done || status == JobStatus::Failed) s.active_job.reset();
  } else {
    throw Error("unknown event type '" + type + "'");
  }
}

void SearchService::replay() {
  std::ifstream in(log_path(), std::ios::binary);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      apply(line);
    } catch (const std::exception& e) {
      // A torn final line from a crash mid-append is dropped.
      if (in.peek() == std::char_traits<char>::eof()) {
        log_warning("dropping unreadable last event log line " + std::to_string(n));
        break;
      }
      throw Error("event log line " + std::to_string(n) + ": " + e.what());
    }
  }
  for (auto& [id, job] : jobs_) {
    if (job.status == JobStatus::Done || job.status == JobStatus::Failed) continue;
    record(json{{"type", "job"},
                {"session", job.session},
                {"job", id},
                {"status", "failed"},
                {"error", "interrupted by service restart"},
                {"t", now_ms()}}
               .dump());
  }
  for (const auto& [id, s] : sessions_)
    if (s.snapshot) overlays_[id] = load_overlay(*s.snapshot);
}

std::shared_ptr<const SearchService::Overlay> SearchService::make_overlay(const ClassifierHead& head) const {
  auto overlay = std::make_shared<Overlay>();
  overlay->head = head;
  const nn::Matrix probs = nn::softmax_columns(head_logits(head, index_.vectors));
  overlay->relevance.resize(index_.size());
  for (std::size_t i = 0; i < index_.size(); ++i) overlay->relevance[i] = probs(1, static_cast<Eigen::Index>(i));
  return overlay;
}

std::shared_ptr<const SearchService::Overlay> SearchService::load_overlay(const std::string& snapshot_id) const {
  const auto bytes = read_file_bytes(snapshot_path(snapshot_id));
  if (content_digest(bytes) != snapshot_id) throw IntegrityError("snapshot " + snapshot_id + " does not match its digest");
  auto model = deserialize_checkpoint(bytes);
  auto* head = std::get_if<ClassifierHead>(&model);
  if (!head) throw IntegrityError("snapshot " + snapshot_id + " is not a relevance head");
  return make_overlay(*head);
}

SearchSession& SearchService::existing_session(const std::string& id) {
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw NotFoundError("unknown session '" + id + "'");
  return it->second;
}

const SearchSession& SearchService::existing_session(const std::string& id) const {
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw NotFoundError("unknown session '" + id + "'");
  return it->second;
}

SearchSession& SearchService::ensure_session(const std::optional<std::string>& id) {
  if (id && !id->empty()) return existing_session(*id);
  const std::string fresh = numbered('s', next_session_);
  record(json{{"type", "session"}, {"session", fresh}, {"t", now_ms()}}.dump());
  return sessions_.at(fresh);
}

SearchResponse SearchService::search_by_id(const std::optional<std::string>& session, const std::string& image_id,
                                           int k, bool exclude_self) {
  const auto pos = index_.find(image_id);
  if (!pos) throw NotFoundError("unknown image '" + image_id + "'");
  const Eigen::VectorXf query = index_.vectors.col(static_cast<Eigen::Index>(*pos));
  return rank(session, image_id, query, k, exclude_self ? std::optional<std::string_view>(image_id) : std::nullopt);
}

SearchResponse SearchService::search_by_image(const std::optional<std::string>& session, const Image& image, int k) {
  const ImageSize target{featurizer_.config.height, featurizer_.config.width};
  const Image input = image.size() == target ? image : resize_bilinear(image, target);
  const nn::Matrix e = embed(featurizer_, std::span<const Image>(&input, 1));
  const std::string ref = "upload:" + content_digest(encode_png(input)).substr(0, 16);
  return rank(session, ref, e.col(0), k, std::nullopt);
}

SearchResponse SearchService::rank(const std::optional<std::string>& session, const std::string& query_ref,
                                   const Eigen::VectorXf& query, int k, std::optional<std::string_view> exclude) {
  if (k < 1) throw ValidationError("k must be at least 1");
  SearchResponse response;
  std::shared_ptr<const Overlay> overlay;
  {
    std::lock_guard lock(mutex_);
    SearchSession& s = ensure_session(session);
    record(json{{"type", "query"}, {"session", s.id}, {"query", query_ref}, {"t", now_ms()}}.dump());
    response.session = s.id;
    response.generation = s.generation;
    if (auto it = overlays_.find(s.id); it != overlays_.end()) overlay = it->second;
  }

  if (!overlay) {
    for (auto& n : knn_query(index_, query, k, exclude))
      response.hits.push_back({std::move(n.id), n.similarity, n.similarity});
    return response;
  }

  const auto sims = similarities(index_, query);
  const double a = config_.blend_alpha;
  std::vector<SearchHit> all;
  all.reserve(index_.size());
  for (std::size_t i = 0; i < index_.size(); ++i) {
    if (exclude && index_.ids[i] == *exclude) continue;
    all.push_back({index_.ids[i], sims[i], (1.0 - a) * sims[i] + a * overlay->relevance[i]});
  }
  const auto by_score = [](const SearchHit& x, const SearchHit& y) {
    return x.score != y.score ? x.score > y.score : x.id < y.id;
  };
  const std::size_t top = std::min(all.size(), static_cast<std::size_t>(k));
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(top), all.end(), by_score);
  all.resize(top);
  response.hits = std::move(all);
  return response;
}

void SearchService::feedback(const std::string& session, const std::string& item, Verdict verdict) {
  std::lock_guard lock(mutex_);
  SearchSession& s = existing_session(session);
  if (!index_.find(item)) throw NotFoundError("unknown item '" + item + "'");
  if (auto it = s.feedback.find(item); it != s.feedback.end() && it->second.verdict == verdict) return;
  record(json{{"type", "feedback"},
              {"session", session},
              {"item", item},
              {"verdict", std::string(to_string(verdict))},
              {"t", now_ms()}}
             .dump());
}

std::string SearchService::refine(const std::string& session) {
  std::string id;
  {
    std::lock_guard lock(mutex_);
    SearchSession& s = existing_session(session);
    if (s.active_job) throw ConflictError("session " + session + " already has refinement " + *s.active_job + " in flight");
    const int approved = s.count(Verdict::Approve);
    const int declined = s.count(Verdict::Decline);
    if (approved < 1 || declined < 1)
      throw ConflictError("refinement needs at least one approved and one declined item (have " +
                          std::to_string(approved) + " approved, " + std::to_string(declined) + " declined)");
    id = numbered('j', next_job_);
    record(json{{"type", "job"}, {"session", session}, {"job", id}, {"status", "queued"}, {"t", now_ms()}}.dump());
    queue_.push_back(id);
  }
  cv_.notify_all();
  return id;
}

void SearchService::worker_loop() {
  std::unique_lock lock(mutex_);
  for (;;) {
    cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
    if (stopping_) return;
    const std::string id = queue_.front();
    lock.unlock();
    run_job(id);
    lock.lock();
    queue_.pop_front();
    cv_.notify_all();
  }
}

void SearchService::run_job(const std::string& job_id) {
  std::vector<std::pair<std::size_t, int>> examples;
  std::string session;
  {
    std::lock_guard lock(mutex_);
    const RefinementJob& j = jobs_.at(job_id);
    session = j.session;
    for (const auto& [item, ev] : sessions_.at(session).feedback)
      examples.emplace_back(*index_.find(item), ev.verdict == Verdict::Approve ? 1 : 0);
    record(json{{"type", "job"}, {"session", session}, {"job", job_id}, {"status", "running"}, {"t", now_ms()}}.dump());
  }
  try {
    nn::Matrix x(index_.dim(), static_cast<Eigen::Index>(examples.size()));
    std::vector<int> labels;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      x.col(static_cast<Eigen::Index>(i)) = index_.vectors.col(static_cast<Eigen::Index>(examples[i].first));
      labels.push_back(examples[i].second);
    }
    ClassifierHead head = make_classifier_head(index_.dim(), config_.relevance_hidden, 2, config_.refine.seed);
    train_head(head, x, labels, config_.refine);
    const auto bytes = serialize_checkpoint(head);
    const std::string snapshot = content_digest(bytes);
    if (!config_.state_dir.empty() && !std::filesystem::exists(snapshot_path(snapshot)))
      write_file_bytes(snapshot_path(snapshot), bytes);
    auto overlay = make_overlay(head);

    std::lock_guard lock(mutex_);
    record(json{{"type", "job"},
                {"session", session},
                {"job", job_id},
                {"status", "done"},
                {"snapshot", snapshot},
                {"t", now_ms()}}
               .dump());
    overlays_[session] = std::move(overlay);
  } catch (const std::exception& e) {
    std::lock_guard lock(mutex_);
    log_warning("refinement " + job_id + " failed: " + e.what());
    record(json{{"type", "job"},
                {"session", session},
                {"job", job_id},
                {"status", "failed"},
                {"error", e.what()},
                {"t", now_ms()}}
               .dump());
  }
}

void SearchService::wait_idle() {
  std::unique_lock lock(mutex_);
  cv_.wait(lock, [this] { return queue_.empty(); });
}

RefinementJob SearchService::job(const std::string& id) const {
  std::lock_guard lock(mutex_);
  auto it = jobs_.find(id);
  if (it == jobs_.end()) throw NotFoundError("unknown job '" + id + "'");
  return it->second;
}

SearchSession SearchService::session(const std::string& id) const {
  std::lock_guard lock(mutex_);
  return existing_session(id);
}

DatasetManifest SearchService::export_session(const std::string& id) const {
  const SearchSession s = session(id);
  DatasetManifest out;
  out.class_names = corpus_.class_names;
  out.image_size = corpus_.image_size;
  out.base_dir = corpus_.base_dir;
  out.source = corpus_.source + "-" + id;
  for (const auto& e : corpus_.entries)
    if (auto it = s.feedback.find(e.id); it != s.feedback.end() && it->second.verdict == Verdict::Approve)
      out.entries.push_back(e);
  return out;
}

ServiceStatus SearchService::status() const {
  std::lock_guard lock(mutex_);
  return {checkpoint_digest_, index_.size(), index_.dim(), sessions_.size(), config_.blend_alpha};
}

EmbeddingIndex index_corpus(const FeaturizerModel& featurizer, const DatasetManifest& corpus, std::size_t batch) {
  const ImageSize target{featurizer.config.height, featurizer.config.width};
  std::vector<std::string> ids;
  std::vector<std::optional<int>> labels;
  nn::Matrix all(featurizer.config.embedding_dim, static_cast<Eigen::Index>(corpus.size()));
  for (std::size_t s = 0; s < corpus.size(); s += batch) {
    const std::size_t e = std::min(corpus.size(), s + batch);
    std::vector<Image> images;
    for (std::size_t i = s; i < e; ++i) {
      const auto& entry = corpus.entries[i];
      images.push_back(decode_sample(corpus, entry.id, target).pixels);
      ids.push_back(entry.id);
      labels.push_back(entry.label);
    }
    all.middleCols(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(e - s)) = embed(featurizer, images);
  }
  return build_index(std::move(ids), all, std::move(labels));
}

}  // namespace celestial
