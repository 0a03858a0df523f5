#include <cstdlib>
#include <thread>

#include <gtest/gtest.h>

#include "lookback/annotator_http.hpp"

using namespace lookback;

namespace {

class LocalServer {
 public:
  explicit LocalServer(httplib::Server::Handler handler) {
    server_.Post("/v1/chat/completions", std::move(handler));
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~LocalServer() {
    server_.stop();
    thread_.join();
  }
  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

AnnotationRequest request() {
  AnnotationRequest r;
  r.question_id = "q1";
  r.image_ref = "img/q1.png";
  r.prompt_text = "fill me in";
  return r;
}

}  // namespace

TEST(SplitEndpoint, Parses) {
  const auto e = split_endpoint("http://host:8000/v1/chat/completions");
  EXPECT_EQ(e.origin, "http://host:8000");
  EXPECT_EQ(e.path, "/v1/chat/completions");
  EXPECT_EQ(split_endpoint("https://x").path, "/");
  EXPECT_THROW(split_endpoint("host:8000/v1"), std::invalid_argument);
  EXPECT_THROW(split_endpoint("ftp://host/x"), std::invalid_argument);
}

TEST(HttpAnnotator, ReturnsChatCompletion) {
  json seen;
  std::string auth;
  LocalServer server([&](const httplib::Request& req, httplib::Response& res) {
    seen = json::parse(req.body);
    auth = req.get_header_value("Authorization");
    res.set_content(R"({"choices": [{"message": {"role": "assistant", "content": "<think> ok </think> \\boxed{A}"}}]})",
                    "application/json");
  });
  AnnotatorSettings s;
  s.endpoint = server.endpoint();
  s.model = "m";
  s.api_key_env = "LOOKBACK_TEST_KEY";
  ::setenv("LOOKBACK_TEST_KEY", "secret", 1);
  HttpAnnotator a(s);
  EXPECT_EQ(a.complete(request()), "<think> ok </think> \\boxed{A}");
  EXPECT_EQ(seen["model"], "m");
  EXPECT_EQ(seen["temperature"], 0.0);
  EXPECT_EQ(seen["image_ref"], "img/q1.png");
  ASSERT_EQ(seen["messages"].size(), 2u);
  EXPECT_EQ(seen["messages"][0]["role"], "system");
  EXPECT_EQ(seen["messages"][1]["content"], "fill me in");
  EXPECT_EQ(auth, "Bearer secret");
  ::unsetenv("LOOKBACK_TEST_KEY");
}

TEST(HttpAnnotator, HttpErrorStatus) {
  LocalServer server([](const httplib::Request&, httplib::Response& res) { res.status = 503; });
  AnnotatorSettings s;
  s.endpoint = server.endpoint();
  HttpAnnotator a(s);
  EXPECT_THROW(a.complete(request()), AnnotatorError);
}

TEST(HttpAnnotator, MalformedBody) {
  LocalServer server([](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"choices": []})", "application/json");
  });
  AnnotatorSettings s;
  s.endpoint = server.endpoint();
  HttpAnnotator a(s);
  EXPECT_THROW(a.complete(request()), AnnotatorError);
}

TEST(HttpAnnotator, ConnectionRefused) {
  AnnotatorSettings s;
  s.endpoint = "http://127.0.0.1:1/v1/chat/completions";
  s.timeout_seconds = 2;
  HttpAnnotator a(s);
  EXPECT_THROW(a.complete(request()), AnnotatorError);
}
