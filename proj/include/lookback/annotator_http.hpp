#pragma once

// Chat-completion annotator over HTTP(S). Build with
// CPPHTTPLIB_OPENSSL_SUPPORT defined (and OpenSSL linked) for https endpoints.

#include <cstdlib>
#include <string>

#include <httplib.h>

#include "lookback/curation.hpp"

namespace lookback {

struct AnnotatorSettings {
  std::string endpoint = "http://127.0.0.1:8000/v1/chat/completions";
  std::string model = "annotator";
  double temperature = 0.0;
  int timeout_seconds = 60;
  std::string api_key_env = "LOOKBACK_ANNOTATOR_KEY";
  int max_in_flight = 4;
  int retries = 2;
};

struct Endpoint {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

inline Endpoint split_endpoint(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw std::invalid_argument("endpoint lacks a scheme: " + url);
  const auto scheme = url.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") throw std::invalid_argument("unsupported scheme: " + scheme);
  const auto path_begin = url.find('/', scheme_end + 3);
  if (path_begin == std::string::npos) return {url, "/"};
  return {url.substr(0, path_begin), url.substr(path_begin)};
}

/// Sends {model, temperature, messages:[system, user(prompt)], image_ref}
/// and reads choices[0].message.content. The bearer token, if any, comes
/// from the environment variable named in the settings.
class HttpAnnotator : public Annotator {
 public:
  explicit HttpAnnotator(AnnotatorSettings settings) : settings_(std::move(settings)), ep_(split_endpoint(settings_.endpoint)) {}

  json request_body(const AnnotationRequest& req) const {
    return json{{"model", settings_.model},
                {"temperature", settings_.temperature},
                {"messages", json::array({json{{"role", "system"}, {"content", templates::kSystemPrompt}},
                                          json{{"role", "user"}, {"content", req.prompt_text}}})},
                {"image_ref", req.image_ref}};
  }

  std::string complete(const AnnotationRequest& req) override {
    httplib::Client cli(ep_.origin);
    cli.set_connection_timeout(settings_.timeout_seconds, 0);
    cli.set_read_timeout(settings_.timeout_seconds, 0);
    httplib::Headers headers;
    if (const char* key = std::getenv(settings_.api_key_env.c_str()); key && *key) {
      headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    auto res = cli.Post(ep_.path, headers, request_body(req).dump(), "application/json");
    if (!res) throw AnnotatorError("annotator request failed: " + httplib::to_string(res.error()));
    if (res->status != 200) {
      throw AnnotatorError("annotator returned HTTP " + std::to_string(res->status));
    }
    try {
      const auto body = json::parse(res->body);
      return body.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const std::exception& e) {
      throw AnnotatorError(std::string("malformed annotator response: ") + e.what());
    }
  }

 private:
  AnnotatorSettings settings_;
  Endpoint ep_;
};

}  // namespace lookback
