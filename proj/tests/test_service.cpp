#include <gtest/gtest.h>

#include <atomic>
#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <set>
#include <thread>

#include "emogen/http.hpp"
#include "emogen/service.hpp"

using namespace emogen;

namespace {

std::shared_ptr<const ClassifierModel> tiny_oracle() {
  std::vector<DialogPair> pairs;
  int i = 0;
  for (auto e : kAllEmotions) {
    for (int k = 0; k < 2; ++k) {
      pairs.push_back({"p" + std::to_string(i++), {"hi", std::nullopt},
                       {std::string(label(e)) + " word" + std::to_string(k), e}});
    }
  }
  return std::make_shared<ClassifierModel>(train_oracle(make_corpus(pairs)));
}

// Replies with the target label followed by the prompt it saw.
class StubGenerator final : public Generator {
 public:
  mutable std::mutex mutex;
  mutable std::vector<GenerationRequest> requests;
  std::function<void()> hook;

  GenerationResult respond(const GenerationRequest& r) const override {
    if (hook) hook();
    {
      std::lock_guard lock(mutex);
      requests.push_back(r);
    }
    GenerationResult out;
    for (int i = 0; i < r.num_candidates; ++i) {
      Candidate c;
      c.response_text = std::string(label(r.target_emotion)) + " reply " + std::to_string(i) + " to [" +
                        r.prompt_text.substr(0, 40) + "]";
      c.forward_logprob = -1.0 - i;
      c.score = c.forward_logprob;
      out.candidates.push_back(c);
    }
    return out;
  }
  std::string model_hash() const override { return "stubhash"; }
};

// Checks required keys, their JSON types and that nothing else is present.
void expect_schema(const nlohmann::json& j, const std::map<std::string, nlohmann::json::value_t>& required,
                   const std::map<std::string, nlohmann::json::value_t>& optional = {}) {
  ASSERT_TRUE(j.is_object()) << j.dump();
  for (const auto& [key, type] : required) {
    ASSERT_TRUE(j.contains(key)) << key << " missing in " << j.dump();
    const auto t = j.at(key).type();
    const bool numeric = type == nlohmann::json::value_t::number_float &&
                         (t == nlohmann::json::value_t::number_integer || t == nlohmann::json::value_t::number_unsigned);
    EXPECT_TRUE(t == type || numeric) << key << " in " << j.dump();
  }
  for (const auto& [key, value] : j.items()) {
    EXPECT_TRUE(required.count(key) || optional.count(key)) << "unexpected key " << key;
    if (optional.count(key)) {
      const auto t = value.type();
      const bool integral = t == nlohmann::json::value_t::number_integer || t == nlohmann::json::value_t::number_unsigned;
      EXPECT_TRUE(t == optional.at(key) || (integral && optional.at(key) == nlohmann::json::value_t::number_integer))
          << key;
    }
  }
}

using vt = nlohmann::json::value_t;

void expect_reply_schema(const nlohmann::json& j) {
  expect_schema(j, {{"response", vt::string}, {"emotion", vt::string}, {"confidence", vt::number_float},
                    {"expresses_target", vt::boolean}},
                {{"strength", vt::number_integer}, {"candidates", vt::array}});
  EXPECT_EQ(j.contains("strength"), j.at("expresses_target").get<bool>());
  if (j.contains("strength")) {
    EXPECT_GE(j["strength"].get<int>(), 0);
    EXPECT_LE(j["strength"].get<int>(), 4);
  }
  const double c = j.at("confidence");
  EXPECT_GE(c, 0.0);
  EXPECT_LE(c, 1.0);
  if (j.contains("candidates")) {
    for (const auto& cand : j["candidates"]) {
      expect_schema(cand, {{"text", vt::string}, {"forward_logprob", vt::number_float},
                           {"terminated_by_eos", vt::boolean}},
                    {{"backward_logprob", vt::number_float}, {"score", vt::number_float}});
    }
  }
}

struct LiveServer {
  httplib::Server server;
  int port = 0;
  std::thread thread;

  LiveServer(ChatService& service, std::optional<std::filesystem::path> static_dir = std::nullopt) {
    install_routes(server, service, static_dir);
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~LiveServer() {
    server.stop();
    thread.join();
  }
  httplib::Client client() const { return httplib::Client("127.0.0.1", port); }
};

std::string post_json(httplib::Client& c, const std::string& path, const nlohmann::json& body, int* status) {
  auto res = c.Post(path, body.dump(), "application/json");
  if (!res) {
    *status = -1;
    return {};
  }
  *status = res->status;
  return res->body;
}

}  // namespace

TEST(ChatService, SessionsAreDistinctAndEmpty) {
  auto gen = std::make_shared<StubGenerator>();
  ChatService svc(gen, tiny_oracle());
  auto a = svc.create_session();
  auto b = svc.create_session();
  EXPECT_NE(a, b);
  EXPECT_FALSE(svc.last_turn(a));
  EXPECT_THROW(svc.last_turn("nope"), ServiceError);
}

TEST(ChatService, ConcurrentCreationGivesUniqueIds) {
  ChatService svc(std::make_shared<StubGenerator>(), tiny_oracle());
  std::vector<std::string> ids(1000);
  std::vector<std::thread> threads;
  for (int t = 0; t < 10; ++t) {
    threads.emplace_back([&, t] {
      for (int i = 0; i < 100; ++i) ids[static_cast<std::size_t>(t * 100 + i)] = svc.create_session();
    });
  }
  for (auto& th : threads) th.join();
  EXPECT_EQ(std::set<std::string>(ids.begin(), ids.end()).size(), 1000u);
  EXPECT_EQ(svc.session_count(), 1000u);
}

TEST(ChatService, ContextHoldsOnlyTheLatestExchange) {
  auto gen = std::make_shared<StubGenerator>();
  ChatService svc(gen, tiny_oracle());
  auto id = svc.create_session();
  auto first = svc.post_message(id, "Doesn't look like the talkative type.", "anger");
  EXPECT_EQ(first.prompt_context, "Doesn't look like the talkative type.");
  EXPECT_FALSE(first.response.empty());
  EXPECT_EQ(svc.last_turn(id), (Turn{first.response, Emotion::anger}));

  auto second = svc.post_message(id, "Why so angry?", "SAD");
  EXPECT_EQ(second.prompt_context, first.response + " Why so angry?");
  auto third = svc.post_message(id, "Cheer up.", "happy");
  EXPECT_EQ(third.prompt_context, second.response + " Cheer up.");
  EXPECT_EQ(third.prompt_context.find(first.response), std::string::npos);

  ASSERT_EQ(gen->requests.size(), 3u);
  for (const auto& r : gen->requests) EXPECT_FALSE(r.prompt_emotion);
  EXPECT_EQ(gen->requests[1].target_emotion, Emotion::sad);
}

TEST(ChatService, SessionsAreIsolated) {
  auto gen = std::make_shared<StubGenerator>();
  ChatService svc(gen, tiny_oracle());
  auto a = svc.create_session();
  auto b = svc.create_session();
  svc.post_message(a, "hello from a", "fear");
  EXPECT_FALSE(svc.last_turn(b));
  auto rb = svc.post_message(b, "hello from b", "fear");
  EXPECT_EQ(rb.prompt_context, "hello from b");
  EXPECT_NE(svc.last_turn(a)->text, svc.last_turn(b)->text);
}

TEST(ChatService, ErrorClasses) {
  ChatService svc(std::make_shared<StubGenerator>(), tiny_oracle());
  auto id = svc.create_session();
  try {
    svc.post_message(id, "hi", "joy");
    FAIL();
  } catch (const ServiceError& e) {
    EXPECT_EQ(e.status(), 400);
    for (auto l : kEmotionLabels) EXPECT_NE(std::string(e.what()).find(l), std::string::npos);
    EXPECT_EQ(e.extra().at("valid_emotions").size(), 8u);
  }
  auto status_of = [&](auto&& f) {
    try {
      f();
    } catch (const ServiceError& e) {
      return e.status();
    }
    return 200;
  };
  EXPECT_EQ(status_of([&] { svc.post_message("missing", "hi", "anger"); }), 404);
  EXPECT_EQ(status_of([&] { svc.post_message(id, "   ", "anger"); }), 400);
  EXPECT_EQ(status_of([&] { svc.post_message(id, "say ANGER: now", "anger"); }), 400);
  EXPECT_EQ(status_of([&] { svc.post_message(id, "hi", "anger", {{"temperature", -1}}); }), 400);
  EXPECT_EQ(status_of([&] { svc.post_message(id, "hi", "anger", {{"bogus", 1}}); }), 400);

  ChatService empty(nullptr, tiny_oracle());
  auto eid = empty.create_session();
  EXPECT_EQ(status_of([&] { empty.post_message(eid, "hi", "anger"); }), 503);
}

TEST(ChatService, OverridesReachTheGenerator) {
  auto gen = std::make_shared<StubGenerator>();
  ChatService svc(gen, tiny_oracle());
  auto id = svc.create_session();
  auto r = svc.post_message(id, "hi", "neutral",
                            {{"strategy", "greedy"}, {"num_candidates", 3}, {"lambda", 1.0}, {"seed", 5}});
  EXPECT_EQ(r.candidates.size(), 3u);
  ASSERT_EQ(gen->requests.size(), 1u);
  EXPECT_EQ(gen->requests[0].strategy, Strategy::greedy);
  EXPECT_EQ(gen->requests[0].seed, 5u);
  EXPECT_EQ(gen->requests[0].mmi_weight, 1.0);
}

TEST(ChatService, IdleSessionsExpire) {
  auto t = ChatService::Clock::now();
  ServiceConfig cfg;
  cfg.ttl = std::chrono::seconds(60);
  ChatService svc(std::make_shared<StubGenerator>(), tiny_oracle(), cfg, [&] { return t; });
  auto id = svc.create_session();
  t += std::chrono::seconds(30);
  svc.post_message(id, "hi", "sad");
  t += std::chrono::seconds(50);
  EXPECT_NO_THROW(svc.last_turn(id));
  t += std::chrono::seconds(20);
  EXPECT_THROW(svc.last_turn(id), ServiceError);
  svc.create_session();
  EXPECT_EQ(svc.session_count(), 1u);
}

TEST(ChatService, PersistenceSurvivesRestart) {
  const auto path = std::filesystem::temp_directory_path() / "emogen_test_sessions.json";
  std::filesystem::remove(path);
  ServiceConfig cfg;
  cfg.persist_path = path;
  std::string id;
  Turn before;
  {
    ChatService svc(std::make_shared<StubGenerator>(), tiny_oracle(), cfg);
    id = svc.create_session();
    svc.post_message(id, "remember me", "pained");
    before = *svc.last_turn(id);
  }
  ChatService again(std::make_shared<StubGenerator>(), tiny_oracle(), cfg);
  EXPECT_EQ(again.last_turn(id), before);
  auto r = again.post_message(id, "still there?", "happy");
  EXPECT_EQ(r.prompt_context, before.text + " still there?");
  std::filesystem::remove(path);
}

TEST(ChatService, BusySessionRejectedWhenConfigured) {
  auto gen = std::make_shared<StubGenerator>();
  std::mutex m;
  std::condition_variable cv;
  bool entered = false, release = false;
  gen->hook = [&] {
    std::unique_lock lock(m);
    entered = true;
    cv.notify_all();
    cv.wait(lock, [&] { return release; });
  };
  ServiceConfig cfg;
  cfg.busy = BusyPolicy::reject;
  ChatService svc(gen, tiny_oracle(), cfg);
  auto id = svc.create_session();
  std::thread first([&] { svc.post_message(id, "one", "anger"); });
  {
    std::unique_lock lock(m);
    cv.wait(lock, [&] { return entered; });
  }
  int status = 0;
  try {
    svc.post_message(id, "two", "anger");
  } catch (const ServiceError& e) {
    status = e.status();
  }
  EXPECT_EQ(status, 409);
  {
    std::lock_guard lock(m);
    release = true;
  }
  cv.notify_all();
  first.join();
}

TEST(ChatService, SameSessionRequestsAreSerialized) {
  auto gen = std::make_shared<StubGenerator>();
  std::atomic<int> inside{0}, overlap{0};
  gen->hook = [&] {
    if (++inside > 1) ++overlap;
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
    --inside;
  };
  ChatService svc(gen, tiny_oracle());
  auto id = svc.create_session();
  std::vector<std::thread> threads;
  for (int i = 0; i < 8; ++i) threads.emplace_back([&, i] { svc.post_message(id, "msg " + std::to_string(i), "sad"); });
  for (auto& t : threads) t.join();
  EXPECT_EQ(overlap.load(), 0);
  // Every prompt after the first carries exactly the previous reply.
  std::set<std::string> replies_seen;
  std::size_t with_context = 0;
  for (const auto& r : gen->requests) with_context += r.prompt_text.find("sad reply 0 to [") == 0;
  EXPECT_EQ(with_context, 7u);
}

TEST(Http, EndpointsAndSchemas) {
  auto gen = std::make_shared<StubGenerator>();
  ChatService svc(gen, tiny_oracle());
  LiveServer live(svc);
  auto c = live.client();

  auto health = c.Get("/api/health");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);
  auto hj = nlohmann::json::parse(health->body);
  expect_schema(hj, {{"status", vt::string}, {"model_hash", vt::string}});
  EXPECT_EQ(hj["model_hash"], "stubhash");

  auto emotions = c.Get("/api/emotions");
  ASSERT_TRUE(emotions);
  auto ej = nlohmann::json::parse(emotions->body);
  expect_schema(ej, {{"emotions", vt::array}});
  ASSERT_EQ(ej["emotions"].size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(ej["emotions"][i], kEmotionLabels[i]);
    EXPECT_EQ(parse_emotion(ej["emotions"][i].get<std::string>()), kAllEmotions[i]);
  }
  EXPECT_EQ(c.Get("/api/emotions")->body, emotions->body);

  int status = 0;
  auto created = nlohmann::json::parse(post_json(c, "/api/sessions", nlohmann::json::object(), &status));
  EXPECT_EQ(status, 201);
  expect_schema(created, {{"session_id", vt::string}});
  const std::string id = created["session_id"];

  auto reply = nlohmann::json::parse(post_json(
      c, "/api/sessions/" + id + "/messages", {{"text", "Doesn't look like the talkative type."}, {"emotion", "anger"}},
      &status));
  EXPECT_EQ(status, 200);
  expect_reply_schema(reply);
  EXPECT_EQ(reply["emotion"], "anger");
  EXPECT_FALSE(reply["response"].get<std::string>().empty());
  EXPECT_FALSE(reply.contains("candidates"));

  auto verbose = nlohmann::json::parse(post_json(
      c, "/api/sessions/" + id + "/messages",
      {{"text", "And?"}, {"emotion", "anger"}, {"overrides", {{"include_candidates", true}, {"num_candidates", 2}}}},
      &status));
  EXPECT_EQ(status, 200);
  expect_reply_schema(verbose);
  ASSERT_EQ(verbose["candidates"].size(), 2u);
  EXPECT_EQ(verbose["candidates"][0]["text"], verbose["response"]);
  EXPECT_NE(gen->requests.back().prompt_text.find(reply["response"].get<std::string>()), std::string::npos);
}

TEST(Http, ErrorResponses) {
  ChatService svc(std::make_shared<StubGenerator>(), tiny_oracle());
  LiveServer live(svc);
  auto c = live.client();
  int status = 0;
  const std::string id = nlohmann::json::parse(post_json(c, "/api/sessions", {}, &status))["session_id"];

  auto joy = nlohmann::json::parse(post_json(c, "/api/sessions/" + id + "/messages", {{"text", "hi"}, {"emotion", "joy"}}, &status));
  EXPECT_EQ(status, 400);
  expect_schema(joy, {{"error", vt::string}, {"valid_emotions", vt::array}});
  EXPECT_EQ(joy["valid_emotions"], emotion_list_json());

  auto missing = nlohmann::json::parse(post_json(c, "/api/sessions/nope/messages", {{"text", "hi"}, {"emotion", "sad"}}, &status));
  EXPECT_EQ(status, 404);
  expect_schema(missing, {{"error", vt::string}});

  auto res = c.Post("/api/sessions/" + id + "/messages", "{not json", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  post_json(c, "/api/sessions/" + id + "/messages", {{"emotion", "sad"}}, &status);
  EXPECT_EQ(status, 400);
  post_json(c, "/api/sessions/" + id + "/messages", {{"text", 3}, {"emotion", "sad"}}, &status);
  EXPECT_EQ(status, 400);
}

TEST(Http, UnavailableWithoutModel) {
  ChatService svc(nullptr, nullptr);
  LiveServer live(svc);
  auto c = live.client();
  auto health = c.Get("/api/health");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 503);
  expect_schema(nlohmann::json::parse(health->body), {{"status", vt::string}, {"model_hash", vt::null}});
  int status = 0;
  const std::string id = nlohmann::json::parse(post_json(c, "/api/sessions", {}, &status))["session_id"];
  post_json(c, "/api/sessions/" + id + "/messages", {{"text", "hi"}, {"emotion", "sad"}}, &status);
  EXPECT_EQ(status, 503);
}

TEST(Http, ServesStaticFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "emogen_test_static";
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "index.html") << "<html>chat</html>";
  ChatService svc(std::make_shared<StubGenerator>(), tiny_oracle());
  {
    LiveServer live(svc, dir);
    auto c = live.client();
    auto res = c.Get("/index.html");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    EXPECT_EQ(res->body, "<html>chat</html>");
    auto root = c.Get("/");
    ASSERT_TRUE(root);
    EXPECT_EQ(root->body, "<html>chat</html>");
  }
  std::filesystem::remove_all(dir);
  httplib::Server s;
  EXPECT_THROW(install_routes(s, svc, dir), DataError);
}
