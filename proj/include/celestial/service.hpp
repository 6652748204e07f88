#pragma once

#include "celestial/dataset.hpp"
#include "celestial/index.hpp"
#include "celestial/model.hpp"
#include "celestial/train.hpp"

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace celestial {

enum class Verdict { Approve, Decline };
std::string_view to_string(Verdict v);
Verdict parse_verdict(std::string_view text);

enum class JobStatus { Queued, Running, Done, Failed };
std::string_view to_string(JobStatus s);
JobStatus parse_job_status(std::string_view text);

struct FeedbackEvent {
  std::string item;
  Verdict verdict = Verdict::Approve;
  std::int64_t timestamp_ms = 0;
};

struct SearchSession {
  std::string id;
  std::vector<std::string> queries;
  std::map<std::string, FeedbackEvent> feedback;  // one verdict per item
  int generation = 0;
  std::optional<std::string> snapshot;  // relevance head of the latest done job
  std::optional<std::string> active_job;

  int count(Verdict v) const;
};

struct RefinementJob {
  std::string id;
  std::string session;
  JobStatus status = JobStatus::Queued;
  std::optional<std::string> snapshot;
  std::string error;
};

struct SearchHit {
  std::string id;
  double similarity = 0.0;
  double score = 0.0;  // blended when the session has a refined head
};

struct SearchResponse {
  std::string session;
  int generation = 0;
  std::vector<SearchHit> hits;
};

struct ServiceConfig {
  double blend_alpha = 0.5;
  int relevance_hidden = 16;
  TrainConfig refine = refine_defaults();
  std::filesystem::path state_dir;  // empty keeps everything in memory

  static TrainConfig refine_defaults();
};

struct ServiceStatus {
  std::string checkpoint_digest;
  std::size_t n = 0;
  int dim = 0;
  std::size_t sessions = 0;
  double blend_alpha = 0.0;
};

/// Search, feedback and refinement over a fixed corpus. The featurizer and the
/// base index are immutable; a refinement produces a per-session relevance
/// head that is swapped in when its job completes.
class SearchService {
 public:
  /// featurizer must be stripped. index holds the corpus embeddings keyed by
  /// manifest id.
  SearchService(FeaturizerModel featurizer, DatasetManifest corpus, EmbeddingIndex index,
                ServiceConfig config, std::string checkpoint_digest = {});
  ~SearchService();
  SearchService(const SearchService&) = delete;
  SearchService& operator=(const SearchService&) = delete;

  /// A missing or empty session id opens a new session.
  SearchResponse search_by_id(const std::optional<std::string>& session, const std::string& image_id,
                              int k, bool exclude_self);
  SearchResponse search_by_image(const std::optional<std::string>& session, const Image& image, int k);

  void feedback(const std::string& session, const std::string& item, Verdict verdict);

  /// Returns the job id. Throws ConflictError without at least one approve and
  /// one decline, or while the session already has a job in flight.
  std::string refine(const std::string& session);

  RefinementJob job(const std::string& id) const;
  SearchSession session(const std::string& id) const;
  /// Manifest of the session's approved items.
  DatasetManifest export_session(const std::string& id) const;
  ServiceStatus status() const;

  const FeaturizerModel& featurizer() const { return featurizer_; }
  const DatasetManifest& corpus() const { return corpus_; }
  const EmbeddingIndex& index() const { return index_; }

  /// Blocks until no refinement job is queued or running.
  void wait_idle();

 private:
  struct Overlay;

  SearchResponse rank(const std::optional<std::string>& session, const std::string& query_ref,
                      const Eigen::VectorXf& query, int k, std::optional<std::string_view> exclude);
  SearchSession& ensure_session(const std::optional<std::string>& id);
  SearchSession& existing_session(const std::string& id);
  const SearchSession& existing_session(const std::string& id) const;
  // Event sourcing: every state change is one JSON line, applied in memory
  // and appended to the log under mutex_.
  void record(const std::string& event_json);
  void apply(const std::string& event_json);
  void worker_loop();
  void run_job(const std::string& job_id);
  void replay();
  std::shared_ptr<const Overlay> make_overlay(const ClassifierHead& head) const;
  std::shared_ptr<const Overlay> load_overlay(const std::string& snapshot_id) const;
  std::filesystem::path log_path() const;
  std::filesystem::path snapshot_path(const std::string& id) const;

  const FeaturizerModel featurizer_;
  const DatasetManifest corpus_;
  const EmbeddingIndex index_;
  const ServiceConfig config_;
  const std::string checkpoint_digest_;

  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::map<std::string, SearchSession> sessions_;
  std::map<std::string, RefinementJob> jobs_;
  std::map<std::string, std::shared_ptr<const Overlay>> overlays_;
  std::deque<std::string> queue_;
  std::uint64_t next_session_ = 1;
  std::uint64_t next_job_ = 1;
  bool stopping_ = false;

  std::thread worker_;
};

/// Embeds every corpus image with featurizer and indexes it under its id.
EmbeddingIndex index_corpus(const FeaturizerModel& featurizer, const DatasetManifest& corpus,
                            std::size_t batch = 64);

}  // namespace celestial
