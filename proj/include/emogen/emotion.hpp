#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "emogen/errors.hpp"

namespace emogen {

// Closed label set. Declaration order is the canonical reporting order.
enum class Emotion : std::uint8_t {
  anger,
  disgust,
  fear,
  happy,
  neutral,
  pained,
  sad,
  surprised,
};

inline constexpr std::size_t kNumEmotions = 8;

inline constexpr std::array<Emotion, kNumEmotions> kAllEmotions = {
    Emotion::anger, Emotion::disgust, Emotion::fear, Emotion::happy,
    Emotion::neutral, Emotion::pained, Emotion::sad, Emotion::surprised,
};

inline constexpr std::array<std::string_view, kNumEmotions> kEmotionLabels = {
    "anger", "disgust", "fear", "happy", "neutral", "pained", "sad", "surprised",
};

inline constexpr std::array<std::string_view, kNumEmotions> kControlTokens = {
    "ANGER:", "DISGUST:", "FEAR:", "HAPPY:", "NEUTRAL:", "PAINED:", "SAD:", "SURPRISED:",
};

constexpr std::size_t index_of(Emotion e) { return static_cast<std::size_t>(e); }

constexpr std::string_view label(Emotion e) { return kEmotionLabels[index_of(e)]; }

constexpr std::string_view control_token(Emotion e) { return kControlTokens[index_of(e)]; }

inline std::string valid_labels_text() {
  std::string out;
  for (auto l : kEmotionLabels) {
    if (!out.empty()) out += ", ";
    out += l;
  }
  return out;
}

inline std::optional<Emotion> try_parse_emotion(std::string_view text) {
  std::string lowered(text);
  std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  for (std::size_t i = 0; i < kNumEmotions; ++i) {
    if (kEmotionLabels[i] == lowered) return kAllEmotions[i];
  }
  return std::nullopt;
}

// Case-insensitive; anything outside the label set is rejected.
inline Emotion parse_emotion(std::string_view text) {
  if (auto e = try_parse_emotion(text)) return *e;
  throw DataError("unknown emotion label '" + std::string(text) +
                  "' (valid: " + valid_labels_text() + ")");
}

// Exact match of a control-token string such as "ANGER:".
inline std::optional<Emotion> emotion_from_control_token(std::string_view token) {
  for (std::size_t i = 0; i < kNumEmotions; ++i) {
    if (kControlTokens[i] == token) return kAllEmotions[i];
  }
  return std::nullopt;
}

}  // namespace emogen
