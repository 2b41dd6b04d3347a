#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "emogen/emotion.hpp"
#include "emogen/errors.hpp"
#include "emogen/random.hpp"

namespace emogen {

inline constexpr std::string_view kEosToken = "[EOS]";
inline constexpr std::string_view kPadToken = "[PAD]";

struct DialogTurn {
  std::string text;
  std::optional<Emotion> emotion;

  bool operator==(const DialogTurn&) const = default;
};

struct DialogPair {
  std::string id;
  DialogTurn prompt;
  DialogTurn response;  // response.emotion is always set
  // Set when a missing prompt emotion was filled with neutral for training.
  bool prompt_emotion_imputed = false;

  bool operator==(const DialogPair&) const = default;
};

struct Corpus {
  std::vector<DialogPair> pairs;
  std::string source_tag;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

// Returns a reason when the text may not appear inside a dialog turn.
inline std::optional<std::string> turn_text_problem(std::string_view text) {
  if (text.empty()) return "empty utterance";
  for (auto tok : kControlTokens) {
    if (text.find(tok) != std::string_view::npos) {
      return "utterance contains control token '" + std::string(tok) + "'";
    }
  }
  if (text.find(kEosToken) != std::string_view::npos) return "utterance contains [EOS]";
  if (text.find(kPadToken) != std::string_view::npos) return "utterance contains [PAD]";
  return std::nullopt;
}

inline void check_pair(const DialogPair& pair) {
  if (auto p = turn_text_problem(pair.prompt.text)) throw DataError("prompt: " + *p);
  if (auto p = turn_text_problem(pair.response.text)) throw DataError("response: " + *p);
  if (!pair.response.emotion) throw DataError("response emotion missing");
}

// Builds a corpus, enforcing turn invariants and id uniqueness.
inline Corpus make_corpus(std::vector<DialogPair> pairs, std::string source_tag = {}) {
  std::unordered_set<std::string> seen;
  for (const auto& p : pairs) {
    check_pair(p);
    if (!seen.insert(p.id).second) throw DataError("duplicate id '" + p.id + "'");
  }
  return Corpus{std::move(pairs), std::move(source_tag)};
}

// ---------------------------------------------------------------------------
// Record file (one JSON object per line)

struct Rejection {
  std::size_t line = 0;  // 1-based
  std::string reason;
};

struct LoadResult {
  Corpus corpus;
  std::vector<Rejection> rejections;
};

inline DialogPair pair_from_record(const nlohmann::json& rec) {
  if (!rec.is_object()) throw DataError("record is not an object");
  auto required_string = [&](const char* key) -> std::string {
    auto it = rec.find(key);
    if (it == rec.end() || !it->is_string()) {
      throw DataError(std::string("missing or non-string field '") + key + "'");
    }
    return it->get<std::string>();
  };

  DialogPair pair;
  pair.id = required_string("id");
  pair.prompt.text = required_string("prompt_text");
  pair.response.text = required_string("response_text");
  pair.response.emotion = parse_emotion(required_string("response_emotion"));
  if (auto it = rec.find("prompt_emotion"); it != rec.end() && !it->is_null()) {
    if (!it->is_string()) throw DataError("non-string field 'prompt_emotion'");
    pair.prompt.emotion = parse_emotion(it->get<std::string>());
  }
  check_pair(pair);
  return pair;
}

inline nlohmann::json record_from_pair(const DialogPair& pair) {
  nlohmann::json rec;
  rec["id"] = pair.id;
  rec["prompt_text"] = pair.prompt.text;
  if (pair.prompt.emotion) rec["prompt_emotion"] = std::string(label(*pair.prompt.emotion));
  rec["response_text"] = pair.response.text;
  rec["response_emotion"] = std::string(label(*pair.response.emotion));
  return rec;
}

// Bad records are skipped and reported; they never abort the load.
inline LoadResult read_corpus(std::istream& in, std::string source_tag = {}) {
  LoadResult result;
  result.corpus.source_tag = std::move(source_tag);
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      auto rec = nlohmann::json::parse(line);
      auto pair = pair_from_record(rec);
      if (!seen.insert(pair.id).second) throw DataError("duplicate id '" + pair.id + "'");
      result.corpus.pairs.push_back(std::move(pair));
    } catch (const nlohmann::json::exception& e) {
      result.rejections.push_back({line_no, std::string("malformed record: ") + e.what()});
    } catch (const DataError& e) {
      result.rejections.push_back({line_no, e.what()});
    }
  }
  return result;
}

inline LoadResult load_corpus(const std::string& path, std::string_view format = "jsonl") {
  if (format != "jsonl") throw std::invalid_argument("unsupported corpus format '" + std::string(format) + "'");
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file '" + path + "'");
  return read_corpus(in, path);
}

inline void write_corpus(std::ostream& out, const Corpus& corpus) {
  for (const auto& p : corpus.pairs) out << record_from_pair(p).dump() << '\n';
}

inline void save_corpus(const std::string& path, const Corpus& corpus) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write corpus file '" + path + "'");
  write_corpus(out, corpus);
}

// ---------------------------------------------------------------------------
// Statistics

struct EmotionHistogram {
  std::array<std::size_t, kNumEmotions> counts{};
  std::size_t total = 0;

  std::size_t operator[](Emotion e) const { return counts[index_of(e)]; }
  void add(Emotion e, std::size_t n = 1) {
    counts[index_of(e)] += n;
    total += n;
  }
  bool operator==(const EmotionHistogram&) const = default;
};

// Response emotions only.
inline EmotionHistogram stats(const Corpus& corpus) {
  EmotionHistogram h;
  for (const auto& p : corpus.pairs) h.add(*p.response.emotion);
  return h;
}

// Sentence counts of the original game-dialog dataset.
inline EmotionHistogram reference_histogram() {
  EmotionHistogram h;
  h.add(Emotion::anger, 3335);
  h.add(Emotion::disgust, 932);
  h.add(Emotion::fear, 1620);
  h.add(Emotion::happy, 4029);
  h.add(Emotion::neutral, 8802);
  h.add(Emotion::pained, 994);
  h.add(Emotion::sad, 1055);
  h.add(Emotion::surprised, 1649);
  return h;
}

// Scales a histogram to `total` items by largest remainder; ties go to the
// earlier emotion.
inline EmotionHistogram scale_histogram(const EmotionHistogram& shape, std::size_t total) {
  EmotionHistogram out;
  if (shape.total == 0 || total == 0) return out;
  std::array<double, kNumEmotions> remainder{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < kNumEmotions; ++i) {
    const double exact = static_cast<double>(shape.counts[i]) * static_cast<double>(total) /
                         static_cast<double>(shape.total);
    out.counts[i] = static_cast<std::size_t>(std::floor(exact));
    remainder[i] = exact - std::floor(exact);
    assigned += out.counts[i];
  }
  while (assigned < total) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < kNumEmotions; ++i) {
      if (remainder[i] > remainder[best]) best = i;
    }
    ++out.counts[best];
    remainder[best] = -1.0;
    ++assigned;
  }
  out.total = total;
  return out;
}

// ---------------------------------------------------------------------------
// Control-token serialization. Segments are joined by single spaces and no
// punctuation is ever injected.

// "E1: S1 E2: S2 [EOS]"; requires both emotions.
inline std::string serialize_training(const DialogPair& pair) {
  if (!pair.prompt.emotion) {
    throw std::invalid_argument("training serialization needs a prompt emotion (pair '" +
                                pair.id + "')");
  }
  if (!pair.response.emotion) throw std::invalid_argument("response emotion missing");
  std::string out;
  out.reserve(pair.prompt.text.size() + pair.response.text.size() + 32);
  out += control_token(*pair.prompt.emotion);
  out += ' ';
  out += pair.prompt.text;
  out += ' ';
  out += control_token(*pair.response.emotion);
  out += ' ';
  out += pair.response.text;
  out += ' ';
  out += kEosToken;
  return out;
}

// "S1 E2: S2 [EOS]": the training string with the leading prompt label omitted.
inline std::string serialize_unlabeled_prompt(const DialogPair& pair) {
  if (!pair.response.emotion) throw std::invalid_argument("response emotion missing");
  std::string out = pair.prompt.text;
  out += ' ';
  out += control_token(*pair.response.emotion);
  out += ' ';
  out += pair.response.text;
  out += ' ';
  out += kEosToken;
  return out;
}

// Response first, used to train the backward (response -> prompt) model.
inline std::string serialize_reversed(const DialogPair& pair) {
  if (!pair.prompt.emotion || !pair.response.emotion) {
    throw std::invalid_argument("reversed serialization needs both emotions (pair '" +
                                pair.id + "')");
  }
  DialogPair swapped;
  swapped.prompt = pair.response;
  swapped.response = pair.prompt;
  return serialize_training(swapped);
}

// "S1 E2:" generation prefix for prompts without an emotion label.
inline std::string serialize_inference(std::string_view prompt_text, Emotion target) {
  if (prompt_text.empty()) throw std::invalid_argument("empty prompt");
  std::string out(prompt_text);
  out += ' ';
  out += control_token(target);
  return out;
}

// "E1: S1 E2:" generation prefix when the prompt emotion is known.
inline std::string serialize_inference(std::string_view prompt_text, Emotion prompt_emotion,
                                       Emotion target) {
  std::string out(control_token(prompt_emotion));
  out += ' ';
  out += serialize_inference(prompt_text, target);
  return out;
}

// Missing prompt emotions become neutral, flagged on the record.
inline DialogPair with_imputed_prompt_emotion(DialogPair pair) {
  if (!pair.prompt.emotion) {
    pair.prompt.emotion = Emotion::neutral;
    pair.prompt_emotion_imputed = true;
  }
  return pair;
}

// Inverse of serialize_training. The returned pair has an empty id.
inline DialogPair parse_training(std::string_view text) {
  auto fail = [&](const char* why) {
    return DataError(std::string("not a serialized training example (") + why + "): " +
                     std::string(text));
  };
  auto leading_control = [](std::string_view s) -> std::optional<Emotion> {
    for (std::size_t i = 0; i < kNumEmotions; ++i) {
      if (s.starts_with(kControlTokens[i])) return kAllEmotions[i];
    }
    return std::nullopt;
  };

  const std::string eos_suffix = " " + std::string(kEosToken);
  if (!text.ends_with(eos_suffix)) throw fail("missing trailing [EOS]");
  text.remove_suffix(eos_suffix.size());

  auto e1 = leading_control(text);
  if (!e1) throw fail("missing leading control token");
  text.remove_prefix(control_token(*e1).size());
  if (!text.starts_with(' ')) throw fail("no space after first control token");
  text.remove_prefix(1);

  // Utterances never contain control tokens, so the first " TOKEN: " after
  // the prompt start is the response boundary.
  std::size_t best = std::string_view::npos;
  Emotion e2 = Emotion::neutral;
  for (std::size_t i = 0; i < kNumEmotions; ++i) {
    const std::string needle = " " + std::string(kControlTokens[i]) + " ";
    const auto pos = text.find(needle);
    if (pos != std::string_view::npos && pos < best) {
      best = pos;
      e2 = kAllEmotions[i];
    }
  }
  if (best == std::string_view::npos) throw fail("missing response control token");

  DialogPair pair;
  pair.prompt = {std::string(text.substr(0, best)), *e1};
  pair.response = {std::string(text.substr(best + control_token(e2).size() + 2)), e2};
  if (pair.prompt.text.empty() || pair.response.text.empty()) throw fail("empty utterance");
  return pair;
}

// ---------------------------------------------------------------------------
// Train/validation split

inline std::pair<Corpus, Corpus> split(const Corpus& corpus, double train_fraction,
                                       std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("train fraction must lie strictly between 0 and 1");
  }
  if (corpus.size() < 2) throw DataError("corpus needs at least 2 pairs to split");

  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0x5B117));
  rng.shuffle(std::span<std::size_t>(order));

  const auto n_train = static_cast<std::size_t>(
      std::floor(train_fraction * static_cast<double>(corpus.size())));
  Corpus train{{}, corpus.source_tag + "#train"};
  Corpus valid{{}, corpus.source_tag + "#valid"};
  train.pairs.reserve(n_train);
  valid.pairs.reserve(corpus.size() - n_train);
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_train ? train : valid).pairs.push_back(corpus.pairs[order[i]]);
  }
  return {std::move(train), std::move(valid)};
}

}  // namespace emogen
