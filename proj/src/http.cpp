#include "celestial/http.hpp"

#include "celestial/checkpoint.hpp"
#include "celestial/errors.hpp"
#include "celestial/log.hpp"

#include <httplib.h>
#include <json.hpp>

#include <cmath>
#include <sstream>

namespace celestial {

using nlohmann::json;

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", message}});
}

int status_for(const std::exception& e) {
  if (dynamic_cast<const NotFoundError*>(&e)) return 404;
  if (dynamic_cast<const ConflictError*>(&e)) return 409;
  if (dynamic_cast<const DecodeError*>(&e) || dynamic_cast<const ValidationError*>(&e) ||
      dynamic_cast<const json::exception*>(&e))
    return 400;
  return 500;
}

// Wraps a handler so library errors become JSON error responses.
template <typename F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const std::exception& e) {
      const int status = status_for(e);
      if (status == 500) log_warning(std::string("request failed: ") + e.what());
      send_error(res, status, e.what());
    }
  };
}

json body_of(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  json j = json::parse(req.body);
  if (!j.is_object()) throw ValidationError("request body must be a JSON object");
  return j;
}

std::string thumbnail_url(const std::string& id) { return "/api/images/" + id + "?size=128"; }

json to_json(const SearchResponse& r) {
  json hits = json::array();
  for (const auto& h : r.hits)
    hits.push_back({{"id", h.id}, {"similarity", h.similarity}, {"score", h.score}, {"thumbnail", thumbnail_url(h.id)}});
  return {{"session", r.session}, {"generation", r.generation}, {"results", hits}};
}

json to_json(const RefinementJob& j) {
  json out{{"job", j.id}, {"session", j.session}, {"status", std::string(to_string(j.status))}};
  out["snapshot"] = j.snapshot ? json(*j.snapshot) : json(nullptr);
  if (!j.error.empty()) out["error"] = j.error;
  return out;
}

json to_json(const SearchSession& s) {
  json feedback = json::array();
  for (const auto& [item, ev] : s.feedback)
    feedback.push_back({{"item", item}, {"verdict", std::string(to_string(ev.verdict))}, {"timestamp", ev.timestamp_ms}});
  return {{"session", s.id},
          {"generation", s.generation},
          {"queries", s.queries},
          {"feedback", feedback},
          {"approved", s.count(Verdict::Approve)},
          {"declined", s.count(Verdict::Decline)},
          {"active_job", s.active_job ? json(*s.active_job) : json(nullptr)},
          {"snapshot", s.snapshot ? json(*s.snapshot) : json(nullptr)}};
}

int parse_int(const std::string& text, const char* what) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(text, &used);
    if (used == text.size()) return v;
  } catch (const std::exception&) {
  }
  throw ValidationError(std::string(what) + " must be an integer");
}

std::string content_type_for(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".tif" || ext == ".tiff") return "image/tiff";
  if (ext == ".bmp") return "image/bmp";
  return "application/octet-stream";
}

}  // namespace

HttpServer::HttpServer(SearchService& service) : service_(service), server_(std::make_unique<httplib::Server>()) {
  auto& s = *server_;
  s.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
  s.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });

  s.Post("/api/search", guarded([this](const httplib::Request& req, httplib::Response& res) {
    std::optional<std::string> session;
    int k = 10;
    if (req.is_multipart_form_data()) {
      if (req.has_file("session")) session = req.get_file_value("session").content;
      if (req.has_file("k")) k = parse_int(req.get_file_value("k").content, "k");
      if (!req.has_file("image")) throw ValidationError("multipart search needs an 'image' part");
      const auto& content = req.get_file_value("image").content;
      Image image;
      try {
        image = decode_image_bytes(
            std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(content.data()), content.size()));
      } catch (const Error& e) {
        throw DecodeError(std::string("uploaded image could not be decoded: ") + e.what());
      }
      send_json(res, 200, to_json(service_.search_by_image(session, image, k)));
      return;
    }
    const json body = body_of(req);
    if (body.contains("session") && !body["session"].is_null()) session = body["session"].get<std::string>();
    k = body.value("k", 10);
    if (!body.contains("image_id")) throw ValidationError("search needs image_id or a multipart image upload");
    const std::string id = body.at("image_id");
    send_json(res, 200, to_json(service_.search_by_id(session, id, k, body.value("exclude_self", false))));
  }));

  s.Post("/api/feedback", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const json body = body_of(req);
    service_.feedback(body.at("session"), body.at("item"), parse_verdict(body.at("verdict").get<std::string>()));
    res.status = 204;
  }));

  s.Post("/api/refine", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const json body = body_of(req);
    const std::string id = service_.refine(body.at("session"));
    send_json(res, 202, to_json(service_.job(id)));
  }));

  s.Get(R"(/api/jobs/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
    send_json(res, 200, to_json(service_.job(req.matches[1])));
  }));

  s.Get(R"(/api/sessions/([^/]+)/export)", guarded([this](const httplib::Request& req, httplib::Response& res) {
    std::ostringstream out;
    write_manifest(service_.export_session(req.matches[1]), out);
    res.status = 200;
    res.set_content(out.str(), "text/tab-separated-values");
  }));

  s.Get(R"(/api/sessions/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
    send_json(res, 200, to_json(service_.session(req.matches[1])));
  }));

  s.Get(R"(/api/images/(.+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    const auto& corpus = service_.corpus();
    const auto pos = corpus.find(id);
    if (!pos) throw NotFoundError("unknown image '" + id + "'");
    const auto path = corpus.resolve(corpus.entries[*pos]);
    const auto bytes = read_file_bytes(path);
    if (!req.has_param("size")) {
      res.status = 200;
      res.set_content(std::string(bytes.begin(), bytes.end()), content_type_for(path));
      return;
    }
    const int size = parse_int(req.get_param_value("size"), "size");
    if (size < 1 || size > 4096) throw ValidationError("size must be in [1, 4096]");
    const Image full = decode_image_bytes(bytes);
    const double scale = static_cast<double>(size) / std::max(full.height, full.width);
    const ImageSize target{std::max(1, static_cast<int>(std::lround(full.height * scale))),
                           std::max(1, static_cast<int>(std::lround(full.width * scale)))};
    const auto png = encode_png(resize_bilinear(full, target));
    res.status = 200;
    res.set_content(std::string(png.begin(), png.end()), "image/png");
  }));

  s.Get("/api/status", guarded([this](const httplib::Request&, httplib::Response& res) {
    const auto st = service_.status();
    send_json(res, 200,
              {{"checkpoint_digest", st.checkpoint_digest},
               {"n", st.n},
               {"dim", st.dim},
               {"sessions", st.sessions},
               {"blend_alpha", st.blend_alpha}});
  }));
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = server_->bind_to_any_port(host);
    if (bound < 0) throw Error("cannot bind " + host);
    return bound;
  }
  if (!server_->bind_to_port(host, port)) throw Error("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void HttpServer::serve() { server_->listen_after_bind(); }

void HttpServer::stop() {
  if (server_) server_->stop();
}

}  // namespace celestial
