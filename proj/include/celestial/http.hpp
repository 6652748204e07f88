#pragma once

#include "celestial/service.hpp"

#include <memory>
#include <string>

namespace httplib {
class Server;
}

namespace celestial {

/// JSON API over a SearchService:
///   POST /api/search         {image_id, k, session, exclude_self} or multipart
///                            with an "image" file part (+ k, session fields)
///   POST /api/feedback       {session, item, verdict} -> 204
///   POST /api/refine         {session} -> 202 {job, status}
///   GET  /api/jobs/{id}
///   GET  /api/sessions/{id}
///   GET  /api/sessions/{id}/export   approved items as a manifest
///   GET  /api/images/{id}[?size=N]   corpus file bytes, or a PNG thumbnail
///   GET  /api/status
class HttpServer {
 public:
  explicit HttpServer(SearchService& service);
  ~HttpServer();

  /// Binds without serving; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop(); call after bind.
  void serve();
  void stop();

 private:
  SearchService& service_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace celestial
