#include "celestial/checkpoint.hpp"
#include "celestial/errors.hpp"
#include "celestial/http.hpp"
#include "celestial/service.hpp"

#include "support.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>
#include <doctest.h>

#include <fstream>
#include <random>
#include <sstream>

using namespace celestial;
using celestial::testing::TempDir;
using nlohmann::json;

namespace {

FeaturizerConfig tiny_config() {
  FeaturizerConfig c;
  c.height = c.width = 16;
  c.conv_blocks = {{8, 3, 1, 2}, {16, 3, 1, 2}};
  c.embedding_dim = 16;
  c.projection_hidden = 16;
  c.projection_dim = 8;
  return c;
}

// A corpus on disk, its featurizer and index, shared by every case.
struct Corpus {
  TempDir dir{"service"};
  DatasetManifest manifest;
  FeaturizerModel featurizer;
  EmbeddingIndex index;

  Corpus() {
    const auto set = make_synthetic_dataset(4, 12, {16, 16}, 31);
    manifest = load_manifest(write_image_set(set, dir / "corpus"), {16, 16});
    featurizer = strip_projection(build_featurizer(tiny_config(), 5));
    index = index_corpus(featurizer, manifest, 16);
  }
};

const Corpus& corpus() {
  static const Corpus c;
  return c;
}

ServiceConfig config_in(const std::filesystem::path& state_dir = {}) {
  ServiceConfig c;
  c.state_dir = state_dir;
  c.refine.epochs = 60;
  return c;
}

std::unique_ptr<SearchService> make_service(const std::filesystem::path& state_dir = {}) {
  const auto& c = corpus();
  return std::make_unique<SearchService>(c.featurizer, c.manifest, c.index, config_in(state_dir), "abc123");
}

// Runs an HttpServer on a free port for the lifetime of the object.
struct LiveServer {
  HttpServer server;
  int port = 0;
  std::thread thread;

  explicit LiveServer(SearchService& service) : server(service) {
    port = server.bind("127.0.0.1", 0);
    thread = std::thread([this] { server.serve(); });
  }
  ~LiveServer() {
    server.stop();
    thread.join();
  }
  httplib::Client client() const {
    httplib::Client cli("127.0.0.1", port);
    cli.set_read_timeout(30, 0);
    return cli;
  }
};

json post_json(httplib::Client& cli, const std::string& path, const json& body, int expect) {
  const auto res = cli.Post(path, body.dump(), "application/json");
  REQUIRE(res);
  CHECK_MESSAGE(res->status == expect, res->body);
  return res->body.empty() ? json() : json::parse(res->body);
}

json get_json(httplib::Client& cli, const std::string& path, int expect = 200) {
  const auto res = cli.Get(path);
  REQUIRE(res);
  CHECK_MESSAGE(res->status == expect, res->body);
  return json::parse(res->body);
}

std::vector<std::string> ids_with_label(int label) {
  std::vector<std::string> out;
  for (const auto& e : corpus().manifest.entries)
    if (e.label == label) out.push_back(e.id);
  return out;
}

// Mean rank of the given ids in a full-corpus ranking.
double mean_rank(const SearchResponse& r, const std::vector<std::string>& ids) {
  double sum = 0;
  for (const auto& id : ids)
    for (std::size_t i = 0; i < r.hits.size(); ++i)
      if (r.hits[i].id == id) sum += static_cast<double>(i);
  return sum / static_cast<double>(ids.size());
}

}  // namespace

TEST_CASE("search by id over HTTP") {
  auto service = make_service();
  LiveServer live(*service);
  auto cli = live.client();
  const std::string first = corpus().manifest.entries[3].id;

  auto r = post_json(cli, "/api/search", {{"image_id", first}, {"k", 1}}, 200);
  REQUIRE(r["results"].size() == 1);
  CHECK(r["results"][0]["id"] == first);
  CHECK(r["results"][0]["similarity"].get<double>() == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(r["results"][0]["thumbnail"] == "/api/images/" + first + "?size=128");
  CHECK(r["generation"] == 0);
  const std::string session = r["session"];
  CHECK_FALSE(session.empty());

  r = post_json(cli, "/api/search", {{"image_id", first}, {"k", 10}, {"session", session}, {"exclude_self", true}}, 200);
  CHECK(r["session"] == session);
  REQUIRE(r["results"].size() == 10);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(r["results"][i]["id"] != first);
    if (i) CHECK(r["results"][i - 1]["similarity"].get<double>() >= r["results"][i]["similarity"].get<double>());
  }

  r = post_json(cli, "/api/search", {{"image_id", first}, {"k", 1000}}, 200);
  CHECK(r["results"].size() == corpus().manifest.size());

  const auto s = get_json(cli, "/api/sessions/" + session);
  CHECK(s["queries"].size() == 2);
  CHECK(service->session(session).queries[0] == first);
}

TEST_CASE("search by uploaded image") {
  auto service = make_service();
  LiveServer live(*service);
  auto cli = live.client();
  const auto& entry = corpus().manifest.entries[7];
  const auto bytes = read_file_bytes(corpus().manifest.resolve(entry));

  httplib::MultipartFormDataItems items{{"image", std::string(bytes.begin(), bytes.end()), "q.png", "image/png"},
                                        {"k", "3", "", ""}};
  auto res = cli.Post("/api/search", items);
  REQUIRE(res);
  REQUIRE(res->status == 200);
  const auto r = json::parse(res->body);
  REQUIRE(r["results"].size() == 3);
  CHECK(r["results"][0]["id"] == entry.id);
  CHECK(r["results"][0]["similarity"].get<double>() == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(service->session(r["session"]).queries[0].rfind("upload:", 0) == 0);

  httplib::MultipartFormDataItems junk{{"image", "definitely not an image", "q.png", "image/png"}};
  res = cli.Post("/api/search", junk);
  REQUIRE(res);
  CHECK(res->status == 400);
  CHECK(json::parse(res->body).contains("error"));
}

TEST_CASE("request errors map to status codes") {
  auto service = make_service();
  LiveServer live(*service);
  auto cli = live.client();
  post_json(cli, "/api/search", {{"image_id", "no-such-image"}}, 404);
  post_json(cli, "/api/search", {{"image_id", corpus().manifest.entries[0].id}, {"session", "s-999999"}}, 404);
  post_json(cli, "/api/search", {{"k", 3}}, 400);
  post_json(cli, "/api/search", {{"image_id", corpus().manifest.entries[0].id}, {"k", 0}}, 400);
  auto res = cli.Post("/api/search", "{not json", "application/json");
  REQUIRE(res);
  CHECK(res->status == 400);
  post_json(cli, "/api/feedback", {{"session", "s-999999"}, {"item", "x"}, {"verdict", "approve"}}, 404);
  get_json(cli, "/api/jobs/j-424242", 404);
  get_json(cli, "/api/sessions/s-424242", 404);
  get_json(cli, "/api/images/nothing-here", 404);

  const auto opt = cli.Options("/api/search");
  REQUIRE(opt);
  CHECK(opt->status == 204);
  CHECK(opt->get_header_value("Access-Control-Allow-Origin") == "*");
}

TEST_CASE("feedback is idempotent and last write wins") {
  TempDir state("state");
  auto service = make_service(state.path());
  LiveServer live(*service);
  auto cli = live.client();
  const auto& entries = corpus().manifest.entries;
  const std::string session = post_json(cli, "/api/search", {{"image_id", entries[0].id}}, 200)["session"];

  auto count_feedback_lines = [&] {
    std::ifstream in(state / "events.jsonl");
    std::string line;
    int n = 0;
    while (std::getline(in, line)) n += json::parse(line)["type"] == "feedback";
    return n;
  };
  post_json(cli, "/api/feedback", {{"session", session}, {"item", entries[1].id}, {"verdict", "approve"}}, 204);
  post_json(cli, "/api/feedback", {{"session", session}, {"item", entries[1].id}, {"verdict", "approve"}}, 204);
  CHECK(service->session(session).feedback.size() == 1);
  CHECK(count_feedback_lines() == 1);

  post_json(cli, "/api/feedback", {{"session", session}, {"item", entries[1].id}, {"verdict", "decline"}}, 204);
  CHECK(service->session(session).feedback.at(entries[1].id).verdict == Verdict::Decline);
  CHECK(service->session(session).feedback.size() == 1);
  CHECK(count_feedback_lines() == 2);

  post_json(cli, "/api/feedback", {{"session", session}, {"item", "no-such-item"}, {"verdict", "approve"}}, 404);
  post_json(cli, "/api/feedback", {{"session", session}, {"item", entries[1].id}, {"verdict", "maybe"}}, 400);
  const auto s = get_json(cli, "/api/sessions/" + session);
  CHECK(s["declined"] == 1);
  CHECK(s["approved"] == 0);
}

TEST_CASE("refinement needs both kinds of feedback") {
  auto service = make_service();
  LiveServer live(*service);
  auto cli = live.client();
  const auto& entries = corpus().manifest.entries;
  const std::string session = post_json(cli, "/api/search", {{"image_id", entries[0].id}}, 200)["session"];
  const auto empty = post_json(cli, "/api/refine", {{"session", session}}, 409);
  CHECK(empty["error"].get<std::string>().find("0 approved, 0 declined") != std::string::npos);
  post_json(cli, "/api/feedback", {{"session", session}, {"item", entries[1].id}, {"verdict", "approve"}}, 204);
  post_json(cli, "/api/feedback", {{"session", session}, {"item", entries[2].id}, {"verdict", "approve"}}, 204);
  const auto no_decline = post_json(cli, "/api/refine", {{"session", session}}, 409);
  CHECK(no_decline["error"].get<std::string>().find("0 declined") != std::string::npos);
  post_json(cli, "/api/refine", {{"session", "s-777777"}}, 404);
  CHECK(service->session(session).generation == 0);
}

TEST_CASE("a refinement job moves forward to done and leaves the featurizer alone") {
  TempDir state("state");
  auto service = make_service(state.path());
  LiveServer live(*service);
  auto cli = live.client();
  const auto approve = ids_with_label(0);
  const auto decline = ids_with_label(2);
  const std::string session = post_json(cli, "/api/search", {{"image_id", approve[0]}}, 200)["session"];
  for (int i = 0; i < 3; ++i) {
    post_json(cli, "/api/feedback", {{"session", session}, {"item", approve[static_cast<std::size_t>(i)]}, {"verdict", "approve"}}, 204);
    post_json(cli, "/api/feedback", {{"session", session}, {"item", decline[static_cast<std::size_t>(i)]}, {"verdict", "decline"}}, 204);
  }
  const auto before = serialize_checkpoint(service->featurizer());
  const auto index_before = service->index().vectors;

  const auto accepted = post_json(cli, "/api/refine", {{"session", session}}, 202);
  const std::string job = accepted["job"];
  const std::vector<std::string> order{"queued", "running", "done", "failed"};
  auto rank_of = [&](const std::string& s) { return std::find(order.begin(), order.end(), s) - order.begin(); };
  std::ptrdiff_t last = rank_of(accepted["status"]);
  for (int i = 0; i < 2000; ++i) {
    const auto j = get_json(cli, "/api/jobs/" + job);
    const auto r = rank_of(j["status"]);
    CHECK(r >= last);
    last = r;
    if (j["status"] == "done" || j["status"] == "failed") break;
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  service->wait_idle();
  const auto done = get_json(cli, "/api/jobs/" + job);
  REQUIRE(done["status"] == "done");
  CHECK(done["snapshot"].is_string());
  CHECK(std::filesystem::exists(state / "snapshots" / (done["snapshot"].get<std::string>() + ".ckpt")));

  // Every job transition is in the log, in order.
  std::vector<std::string> transitions;
  std::ifstream in(state / "events.jsonl");
  std::string line;
  while (std::getline(in, line)) {
    const auto e = json::parse(line);
    if (e["type"] == "job" && e["job"] == job) transitions.push_back(e["status"]);
  }
  CHECK(transitions == std::vector<std::string>{"queued", "running", "done"});

  CHECK(serialize_checkpoint(service->featurizer()) == before);
  CHECK(service->index().vectors == index_before);
  const auto s = get_json(cli, "/api/sessions/" + session);
  CHECK(s["generation"] == 1);
  CHECK(s["active_job"].is_null());

  // Scores now blend similarity with relevance; other sessions are unaffected.
  const auto refined = service->search_by_id(session, approve[0], 5, false);
  CHECK(refined.generation == 1);
  bool blended = false;
  for (const auto& h : refined.hits) blended |= h.score != h.similarity;
  CHECK(blended);
  const auto fresh = service->search_by_id(std::nullopt, approve[0], 5, false);
  for (const auto& h : fresh.hits) CHECK(h.score == h.similarity);
}

TEST_CASE("refinement ranks the approved class higher") {
  // The random featurizer barely separates the classes, so give the index a
  // weak class direction buried in noise. Similarity alone ranks poorly.
  const auto& c = corpus();
  std::mt19937 gen(17);
  std::normal_distribution<float> noise(0.0f, 0.5f);
  Eigen::MatrixXf vectors(16, static_cast<Eigen::Index>(c.manifest.entries.size()));
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < c.manifest.entries.size(); ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    for (Eigen::Index r = 0; r < vectors.rows(); ++r) vectors(r, col) = noise(gen);
    vectors(*c.manifest.entries[i].label, col) += 1.0f;
    ids.push_back(c.manifest.entries[i].id);
  }
  auto service = std::make_unique<SearchService>(c.featurizer, c.manifest, build_index(ids, vectors), config_in(),
                                                 "abc123");
  const auto target = ids_with_label(1);
  std::vector<std::string> others;
  for (int label : {0, 2, 3})
    for (const auto& id : ids_with_label(label)) others.push_back(id);

  const auto before = service->search_by_id(std::nullopt, target[0], 1000, false);
  const std::string session = before.session;
  for (std::size_t i = 0; i < 4; ++i) service->feedback(session, target[i], Verdict::Approve);
  for (std::size_t i = 0; i < 6; ++i) service->feedback(session, others[i * 5], Verdict::Decline);
  service->refine(session);
  service->wait_idle();
  REQUIRE(service->session(session).generation == 1);
  const auto after = service->search_by_id(session, target[0], 1000, false);

  const double rank_before = mean_rank(before, target);
  const double rank_after = mean_rank(after, target);
  MESSAGE("mean rank of the approved class: " << rank_before << " -> " << rank_after);
  CHECK(rank_after < rank_before);
}

TEST_CASE("searches during refinement see a consistent generation") {
  auto service = make_service();
  const auto approve = ids_with_label(3);
  const auto decline = ids_with_label(0);
  const std::string session = service->search_by_id(std::nullopt, approve[0], 1, false).session;
  for (std::size_t i = 0; i < 3; ++i) {
    service->feedback(session, approve[i], Verdict::Approve);
    service->feedback(session, decline[i], Verdict::Decline);
  }
  service->refine(session);
  CHECK_THROWS_AS(service->refine(session), ConflictError);

  std::vector<SearchResponse> seen;
  for (int i = 0; i < 200; ++i) {
    seen.push_back(service->search_by_id(session, approve[1], 8, false));
    if (seen.back().generation == 1) break;
  }
  service->wait_idle();
  seen.push_back(service->search_by_id(session, approve[1], 8, false));
  for (const auto& r : seen) {
    bool all_plain = true;
    for (const auto& h : r.hits) all_plain &= h.score == h.similarity;
    CHECK(all_plain == (r.generation == 0));
  }
  CHECK(seen.back().generation == 1);
}

TEST_CASE("sessions, feedback and snapshots survive a restart") {
  TempDir state("state");
  const auto approve = ids_with_label(2);
  const auto decline = ids_with_label(3);
  std::string session;
  SearchResponse refined;
  {
    auto service = make_service(state.path());
    session = service->search_by_id(std::nullopt, approve[0], 3, false).session;
    service->feedback(session, approve[1], Verdict::Approve);
    service->feedback(session, decline[0], Verdict::Decline);
    service->feedback(session, decline[1], Verdict::Approve);
    service->feedback(session, decline[1], Verdict::Decline);
    service->refine(session);
    service->wait_idle();
    refined = service->search_by_id(session, approve[0], 6, false);
  }
  auto service = make_service(state.path());
  const auto s = service->session(session);
  CHECK(s.generation == 1);
  CHECK(s.feedback.size() == 3);
  CHECK(s.feedback.at(decline[1]).verdict == Verdict::Decline);
  CHECK(s.count(Verdict::Approve) == 1);
  const auto again = service->search_by_id(session, approve[0], 6, false);
  REQUIRE(again.hits.size() == refined.hits.size());
  for (std::size_t i = 0; i < again.hits.size(); ++i) {
    CHECK(again.hits[i].id == refined.hits[i].id);
    CHECK(again.hits[i].score == refined.hits[i].score);
  }
  // New ids continue after the replayed ones.
  CHECK(service->search_by_id(std::nullopt, approve[0], 1, false).session != session);
  CHECK(service->status().sessions == 2);
}

TEST_CASE("an interrupted job is marked failed on replay and a torn last line is dropped") {
  TempDir state("state");
  std::filesystem::create_directories(state.path());
  {
    std::ofstream log(state / "events.jsonl");
    log << json{{"type", "session"}, {"session", "s-000001"}, {"t", 1}}.dump() << '\n';
    log << json{{"type", "job"}, {"session", "s-000001"}, {"job", "j-000001"}, {"status", "queued"}, {"t", 2}}.dump()
        << '\n';
    log << R"({"type":"feedback","sess)";
  }
  auto service = make_service(state.path());
  const auto job = service->job("j-000001");
  CHECK(job.status == JobStatus::Failed);
  CHECK(job.error.find("restart") != std::string::npos);
  CHECK_FALSE(service->session("s-000001").active_job.has_value());
  CHECK(service->session("s-000001").feedback.empty());
}

TEST_CASE("images, status and export") {
  auto service = make_service();
  LiveServer live(*service);
  auto cli = live.client();
  const auto& entries = corpus().manifest.entries;

  const auto raw = cli.Get("/api/images/" + entries[4].id);
  REQUIRE(raw);
  CHECK(raw->status == 200);
  CHECK(raw->get_header_value("Content-Type") == "image/png");
  const auto file = read_file_bytes(corpus().manifest.resolve(entries[4]));
  CHECK(raw->body == std::string(file.begin(), file.end()));

  const auto thumb = cli.Get("/api/images/" + entries[4].id + "?size=8");
  REQUIRE(thumb);
  CHECK(thumb->status == 200);
  const Image small = decode_image_bytes(
      std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(thumb->body.data()), thumb->body.size()));
  CHECK(small.height == 8);
  CHECK(small.width == 8);
  const auto bad_size = cli.Get("/api/images/" + entries[4].id + "?size=0");
  REQUIRE(bad_size);
  CHECK(bad_size->status == 400);

  const auto st = get_json(cli, "/api/status");
  CHECK(st["checkpoint_digest"] == "abc123");
  CHECK(st["n"] == corpus().manifest.size());
  CHECK(st["dim"] == 16);
  CHECK(st["blend_alpha"] == 0.5);

  const std::string session = post_json(cli, "/api/search", {{"image_id", entries[0].id}}, 200)["session"];
  post_json(cli, "/api/feedback", {{"session", session}, {"item", entries[9].id}, {"verdict", "approve"}}, 204);
  post_json(cli, "/api/feedback", {{"session", session}, {"item", entries[2].id}, {"verdict", "approve"}}, 204);
  post_json(cli, "/api/feedback", {{"session", session}, {"item", entries[5].id}, {"verdict", "decline"}}, 204);
  const auto exported = cli.Get("/api/sessions/" + session + "/export");
  REQUIRE(exported);
  CHECK(exported->status == 200);
  std::istringstream text(exported->body);
  const auto m = parse_manifest(text);
  REQUIRE(m.size() == 2);
  CHECK(m.entries[0].id == entries[2].id);
  CHECK(m.entries[1].id == entries[9].id);
  CHECK(m.class_names == corpus().manifest.class_names);
}
