#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "emogen/decoding.hpp"
#include "emogen/emotion.hpp"
#include "emogen/evaluation.hpp"
#include "emogen/random.hpp"

namespace emogen {

// Carries the HTTP status the error maps to.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, const std::string& message, nlohmann::json extra = nlohmann::json::object())
      : std::runtime_error(message), status_(status), extra_(std::move(extra)) {}
  int status() const { return status_; }
  const nlohmann::json& extra() const { return extra_; }

 private:
  int status_;
  nlohmann::json extra_;
};

enum class BusyPolicy { serialize, reject };

struct ServiceConfig {
  std::chrono::seconds ttl{3600};
  BusyPolicy busy = BusyPolicy::serialize;
  std::optional<std::filesystem::path> persist_path;
  GenerationRequest defaults;  // decoding settings for every message
};

struct Turn {
  std::string text;
  std::optional<Emotion> emotion;
  bool operator==(const Turn&) const = default;
};

struct MessageReply {
  std::string response;
  Emotion emotion = Emotion::neutral;
  Judgment judgment;
  std::string prompt_context;  // what the generator saw as the prompt
  std::vector<Candidate> candidates;
};

inline nlohmann::json candidate_json(const Candidate& c) {
  nlohmann::json j{{"text", c.response_text},
                   {"forward_logprob", c.forward_logprob},
                   {"terminated_by_eos", c.terminated_by_eos}};
  if (c.backward_logprob) j["backward_logprob"] = *c.backward_logprob;
  if (c.score) j["score"] = *c.score;
  return j;
}

inline nlohmann::json reply_json(const MessageReply& r, bool with_candidates) {
  nlohmann::json j{{"response", r.response},
                   {"emotion", std::string(label(r.emotion))},
                   {"confidence", r.judgment.confidence},
                   {"expresses_target", r.judgment.expresses_target}};
  if (r.judgment.strength) j["strength"] = *r.judgment.strength;
  if (with_candidates) {
    j["candidates"] = nlohmann::json::array();
    for (const auto& c : r.candidates) j["candidates"].push_back(candidate_json(c));
  }
  return j;
}

// Applies the optional "overrides" object of a message body.
inline void apply_overrides(GenerationRequest& req, const nlohmann::json& o) {
  if (o.is_null()) return;
  if (!o.is_object()) throw ServiceError(400, "overrides must be an object");
  try {
    for (const auto& [key, value] : o.items()) {
      if (key == "strategy") {
        req.strategy = parse_strategy(value.get<std::string>());
      } else if (key == "temperature") {
        req.temperature = value.get<double>();
      } else if (key == "k") {
        req.k = value.get<int>();
      } else if (key == "max_new_tokens") {
        req.max_new_tokens = value.get<int>();
      } else if (key == "num_candidates") {
        req.num_candidates = value.get<int>();
      } else if (key == "lambda") {
        req.mmi_weight = value.get<double>();
      } else if (key == "seed") {
        req.seed = value.get<std::uint64_t>();
      } else if (key != "include_candidates") {
        throw ServiceError(400, "unknown override '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ServiceError(400, std::string("bad override value: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ServiceError(400, e.what());
  }
}

inline nlohmann::json emotion_list_json() {
  nlohmann::json labels = nlohmann::json::array();
  for (auto l : kEmotionLabels) labels.push_back(std::string(l));
  return labels;
}

// In-memory sessions, each holding at most the latest exchange.
class ChatService {
 public:
  using Clock = std::chrono::system_clock;

  ChatService(std::shared_ptr<const Generator> generator, std::shared_ptr<const ClassifierModel> oracle,
              ServiceConfig config = {}, std::function<Clock::time_point()> now = [] { return Clock::now(); })
      : generator_(std::move(generator)),
        oracle_(std::move(oracle)),
        config_(std::move(config)),
        now_(std::move(now)),
        id_rng_(std::random_device{}()) {
    if (config_.persist_path && std::filesystem::exists(*config_.persist_path)) load(*config_.persist_path);
  }

  bool ready() const { return generator_ && oracle_; }
  std::string model_hash() const { return generator_ ? generator_->model_hash() : std::string(); }

  std::string create_session() {
    std::lock_guard lock(map_mutex_);
    expire_locked();
    std::string id;
    do {
      id = hex64(id_rng_()) + hex64(id_rng_());
    } while (sessions_.count(id));
    auto s = std::make_shared<Session>();
    s->id = id;
    s->created_at = s->last_active = now_();
    sessions_.emplace(id, std::move(s));
    persist_locked();
    return id;
  }

  std::optional<Turn> last_turn(const std::string& id) const {
    auto s = find(id);
    std::lock_guard lock(s->state_mutex);
    return s->last_turn;
  }

  std::size_t session_count() const {
    std::lock_guard lock(map_mutex_);
    return sessions_.size();
  }

  MessageReply post_message(const std::string& id, const std::string& text, const std::string& emotion_label,
                            const nlohmann::json& overrides = nullptr) {
    auto session = find(id);
    auto target = try_parse_emotion(emotion_label);
    if (!target) {
      throw ServiceError(400, "unknown emotion '" + emotion_label + "'; valid emotions: " + valid_labels_text(),
                         {{"valid_emotions", emotion_list_json()}});
    }
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) throw ServiceError(400, "message text is empty");
    if (auto problem = turn_text_problem(text)) throw ServiceError(400, "message text rejected: " + *problem);
    if (!ready()) throw ServiceError(503, "model not loaded");

    GenerationRequest req = config_.defaults;
    apply_overrides(req, overrides);

    std::unique_lock busy(session->busy, std::defer_lock);
    if (config_.busy == BusyPolicy::reject) {
      if (!busy.try_lock()) throw ServiceError(409, "session is busy with another message");
    } else {
      busy.lock();
    }

    std::optional<Turn> previous;
    std::uint64_t turn_index = 0;
    {
      std::lock_guard lock(session->state_mutex);
      previous = session->last_turn;
      turn_index = session->turns;
    }
    MessageReply reply;
    reply.emotion = *target;
    reply.prompt_context = previous ? previous->text + " " + text : text;
    req.prompt_text = reply.prompt_context;
    req.prompt_emotion.reset();
    req.target_emotion = *target;
    if (!overrides.is_object() || !overrides.contains("seed")) req.seed = mix_seed(fnv1a64(id), turn_index);
    try {
      req.validate();
    } catch (const std::invalid_argument& e) {
      throw ServiceError(400, e.what());
    }

    GenerationResult result;
    try {
      result = generator_->respond(req);
    } catch (const std::invalid_argument& e) {
      throw ServiceError(400, e.what());
    } catch (const std::exception& e) {
      throw ServiceError(500, std::string("generation failed: ") + e.what());
    }
    if (result.candidates.empty()) throw ServiceError(500, "generation produced no candidates");
    reply.response = result.candidates.front().response_text;
    reply.candidates = std::move(result.candidates);
    reply.judgment = judge(*oracle_, reply.response, *target);

    {
      std::lock_guard lock(session->state_mutex);
      session->last_turn = Turn{reply.response, *target};
      session->last_active = now_();
      ++session->turns;
    }
    {
      std::lock_guard lock(map_mutex_);
      persist_locked();
    }
    return reply;
  }

  nlohmann::json to_json() const {
    std::lock_guard lock(map_mutex_);
    return to_json_locked();
  }

 private:
  struct Session {
    std::string id;
    mutable std::mutex state_mutex;
    std::mutex busy;
    std::optional<Turn> last_turn;
    Clock::time_point created_at;
    Clock::time_point last_active;
    std::uint64_t turns = 0;
  };

  std::shared_ptr<Session> find(const std::string& id) const {
    std::lock_guard lock(map_mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end() || expired(*it->second)) throw ServiceError(404, "unknown session '" + id + "'");
    return it->second;
  }

  bool expired(const Session& s) const {
    std::lock_guard lock(s.state_mutex);
    return now_() - s.last_active > config_.ttl;
  }

  void expire_locked() {
    for (auto it = sessions_.begin(); it != sessions_.end();) {
      it = expired(*it->second) ? sessions_.erase(it) : std::next(it);
    }
  }

  static std::int64_t epoch_ms(Clock::time_point t) {
    return std::chrono::duration_cast<std::chrono::milliseconds>(t.time_since_epoch()).count();
  }

  nlohmann::json to_json_locked() const {
    nlohmann::json list = nlohmann::json::array();
    std::vector<std::string> ids;
    for (const auto& [id, s] : sessions_) ids.push_back(id);
    std::sort(ids.begin(), ids.end());
    for (const auto& id : ids) {
      const auto& s = *sessions_.at(id);
      std::lock_guard lock(s.state_mutex);
      nlohmann::json j{{"session_id", s.id},
                       {"created_at_ms", epoch_ms(s.created_at)},
                       {"last_active_ms", epoch_ms(s.last_active)},
                       {"turns", s.turns},
                       {"last_turn", nullptr}};
      if (s.last_turn) {
        j["last_turn"] = {{"text", s.last_turn->text},
                          {"emotion", s.last_turn->emotion ? nlohmann::json(std::string(label(*s.last_turn->emotion)))
                                                           : nlohmann::json()}};
      }
      list.push_back(std::move(j));
    }
    return {{"format", "emogen-sessions"}, {"version", 1}, {"sessions", list}};
  }

  void persist_locked() const {
    if (!config_.persist_path) return;
    const auto tmp = config_.persist_path->string() + ".tmp";
    {
      std::ofstream out(tmp);
      if (!out) throw ServiceError(500, "cannot write session store '" + tmp + "'");
      out << to_json_locked().dump() << '\n';
    }
    std::filesystem::rename(tmp, *config_.persist_path);
  }

  void load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open session store '" + path.string() + "'");
    try {
      const auto j = nlohmann::json::parse(in);
      if (j.at("format") != "emogen-sessions" || j.at("version") != 1) throw DataError("unsupported session store");
      for (const auto& rec : j.at("sessions")) {
        auto s = std::make_shared<Session>();
        s->id = rec.at("session_id").get<std::string>();
        s->created_at = Clock::time_point(std::chrono::milliseconds(rec.at("created_at_ms").get<std::int64_t>()));
        s->last_active = Clock::time_point(std::chrono::milliseconds(rec.at("last_active_ms").get<std::int64_t>()));
        s->turns = rec.at("turns").get<std::uint64_t>();
        if (const auto& t = rec.at("last_turn"); !t.is_null()) {
          Turn turn{t.at("text").get<std::string>(), std::nullopt};
          if (!t.at("emotion").is_null()) turn.emotion = parse_emotion(t.at("emotion").get<std::string>());
          s->last_turn = std::move(turn);
        }
        sessions_.emplace(s->id, std::move(s));
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed session store '" + path.string() + "': " + e.what());
    }
  }

  std::shared_ptr<const Generator> generator_;
  std::shared_ptr<const ClassifierModel> oracle_;
  ServiceConfig config_;
  std::function<Clock::time_point()> now_;
  mutable std::mutex map_mutex_;
  std::unordered_map<std::string, std::shared_ptr<Session>> sessions_;
  std::mt19937_64 id_rng_;
};

}  // namespace emogen
