#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

// Before httplib: <resolv.h> defines a `_res` macro that breaks Eigen headers.
#include "emogen/service.hpp"

#include <httplib.h>

namespace emogen {

namespace detail {

inline void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, const ServiceError& e) {
  nlohmann::json body = e.extra();
  body["error"] = e.what();
  send_json(res, e.status(), body);
}

template <typename F>
void guarded(httplib::Response& res, F&& handler) {
  try {
    handler();
  } catch (const ServiceError& e) {
    send_error(res, e);
  } catch (const std::exception& e) {
    send_error(res, ServiceError(500, e.what()));
  }
}

}  // namespace detail

// Routes:
//   POST /api/sessions                 -> {session_id}
//   POST /api/sessions/{id}/messages   {text, emotion, overrides?}
//                                      -> {response, emotion, confidence, expresses_target, strength?, candidates?}
//   GET  /api/emotions                 -> {emotions}
//   GET  /api/health                   -> {status, model_hash}
// plus static files under `/` when static_dir is given.
inline void install_routes(httplib::Server& server, ChatService& service,
                           const std::optional<std::filesystem::path>& static_dir = std::nullopt) {
  server.Post("/api/sessions", [&service](const httplib::Request&, httplib::Response& res) {
    detail::guarded(res, [&] { detail::send_json(res, 201, {{"session_id", service.create_session()}}); });
  });

  server.Post(R"(/api/sessions/([^/]+)/messages)", [&service](const httplib::Request& req, httplib::Response& res) {
    detail::guarded(res, [&] {
      nlohmann::json body;
      try {
        body = nlohmann::json::parse(req.body);
      } catch (const nlohmann::json::parse_error&) {
        throw ServiceError(400, "request body is not valid JSON");
      }
      if (!body.is_object()) throw ServiceError(400, "request body must be an object");
      auto field = [&](const char* key) {
        auto it = body.find(key);
        if (it == body.end() || !it->is_string()) {
          throw ServiceError(400, std::string("field '") + key + "' must be a string");
        }
        return it->get<std::string>();
      };
      const auto text = field("text");
      const auto emotion = field("emotion");
      const nlohmann::json overrides = body.contains("overrides") ? body.at("overrides") : nlohmann::json();
      const bool with_candidates = overrides.is_object() && overrides.value("include_candidates", false);
      auto reply = service.post_message(req.matches[1].str(), text, emotion, overrides);
      detail::send_json(res, 200, reply_json(reply, with_candidates));
    });
  });

  server.Get("/api/emotions", [](const httplib::Request&, httplib::Response& res) {
    detail::send_json(res, 200, {{"emotions", emotion_list_json()}});
  });

  server.Get("/api/health", [&service](const httplib::Request&, httplib::Response& res) {
    if (service.ready()) {
      detail::send_json(res, 200, {{"status", "ok"}, {"model_hash", service.model_hash()}});
    } else {
      detail::send_json(res, 503, {{"status", "unavailable"}, {"model_hash", nullptr}});
    }
  });

  if (static_dir) {
    if (!server.set_mount_point("/", static_dir->string())) {
      throw DataError("static directory '" + static_dir->string() + "' does not exist");
    }
  }
}

}  // namespace emogen
