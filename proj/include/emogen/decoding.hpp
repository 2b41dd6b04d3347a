#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "emogen/corpus.hpp"
#include "emogen/emotion.hpp"
#include "emogen/model.hpp"
#include "emogen/random.hpp"
#include "emogen/tokenizer.hpp"

namespace emogen {

enum class Strategy { greedy, temperature, top_k };

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::greedy: return "greedy";
    case Strategy::temperature: return "temperature";
    case Strategy::top_k: return "top_k";
  }
  return "top_k";
}

inline Strategy parse_strategy(std::string_view s) {
  if (s == "greedy") return Strategy::greedy;
  if (s == "temperature") return Strategy::temperature;
  if (s == "top_k") return Strategy::top_k;
  throw std::invalid_argument("unknown decoding strategy '" + std::string(s) + "'");
}

struct GenerationRequest {
  std::string prompt_text;
  std::optional<Emotion> prompt_emotion;
  Emotion target_emotion = Emotion::neutral;
  Strategy strategy = Strategy::top_k;
  double temperature = 0.9;
  int k = 40;
  int max_new_tokens = 64;
  int num_candidates = 8;
  double mmi_weight = 0.5;  // forward-score weight when reranking
  std::uint64_t seed = 0;

  void validate() const {
    if (prompt_text.empty()) throw std::invalid_argument("empty prompt");
    if (num_candidates < 1) throw std::invalid_argument("num_candidates must be at least 1");
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    if (k < 1) throw std::invalid_argument("k must be at least 1");
    if (max_new_tokens < 1) throw std::invalid_argument("max_new_tokens must be at least 1");
    if (!(mmi_weight >= 0.0 && mmi_weight <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
  }
};

struct Candidate {
  std::string response_text;
  TokenSequence tokens;  // generated ids, [EOS] excluded
  double forward_logprob = 0;
  std::optional<double> backward_logprob;
  std::optional<double> score;
  bool terminated_by_eos = false;
};

struct GenerationResult {
  std::vector<Candidate> candidates;  // best first
  TokenSequence prefix;               // ids fed to the model before sampling
  bool prompt_truncated = false;
};

// Picks the next token; -inf entries are never chosen. Greedy and top-k
// break ties toward the lower id.
template <typename T>
TokenId sample_next(std::span<const T> logits, Strategy strategy, double temperature, int k, Rng& rng) {
  const auto n = logits.size();
  if (n == 0) throw std::invalid_argument("empty logits");
  auto argmax = [&] {
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i) {
      if (logits[i] > logits[best]) best = i;
    }
    return static_cast<TokenId>(best);
  };
  if (strategy == Strategy::greedy) return argmax();

  std::vector<std::size_t> support;
  if (strategy == Strategy::top_k && static_cast<std::size_t>(k) < n) {
    support.resize(n);
    std::iota(support.begin(), support.end(), std::size_t{0});
    std::partial_sort(support.begin(), support.begin() + k, support.end(), [&](std::size_t a, std::size_t b) {
      return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
    });
    support.resize(static_cast<std::size_t>(k));
    std::sort(support.begin(), support.end());
  } else {
    support.resize(n);
    std::iota(support.begin(), support.end(), std::size_t{0});
  }

  double mx = -std::numeric_limits<double>::infinity();
  for (auto i : support) mx = std::max(mx, static_cast<double>(logits[i]));
  if (!std::isfinite(mx)) throw std::invalid_argument("no finite logits to sample from");
  std::vector<double> weights(support.size());
  double total = 0;
  for (std::size_t j = 0; j < support.size(); ++j) {
    weights[j] = std::exp((static_cast<double>(logits[support[j]]) - mx) / temperature);
    total += weights[j];
  }
  const double u = rng.uniform() * total;
  double cum = 0;
  std::size_t last_positive = 0;
  for (std::size_t j = 0; j < support.size(); ++j) {
    if (weights[j] <= 0) continue;
    cum += weights[j];
    last_positive = j;
    if (cum > u) return static_cast<TokenId>(support[j]);
  }
  return static_cast<TokenId>(support[last_positive]);
}

namespace detail {

template <typename T>
double log_softmax_row(const Matrix<T>& row, TokenId id) {
  return log_softmax_at<T>(row, id);
}

inline std::string trim_spaces(std::string s) {
  const auto b = s.find_first_not_of(" \t\n\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\n\r");
  return s.substr(b, e - b + 1);
}

// True when appending `piece` to `text` would spell a reserved token.
inline bool spells_reserved(const std::string& text, const std::string& piece) {
  constexpr std::size_t kTail = 12;
  const std::string tail = text.size() > kTail ? text.substr(text.size() - kTail) : text;
  const std::string joined = tail + piece;
  for (std::size_t i = 0; i < kNumReserved; ++i) {
    if (joined.find(reserved_string(i)) != std::string::npos) return true;
  }
  return false;
}

}  // namespace detail

inline std::string generation_prefix(const GenerationRequest& r) {
  return r.prompt_emotion ? serialize_inference(r.prompt_text, *r.prompt_emotion, r.target_emotion)
                          : serialize_inference(r.prompt_text, r.target_emotion);
}

// Samples num_candidates continuations after the target control token.
// Output is a pure function of (params, vocab, request).
template <typename T>
GenerationResult generate(const ParameterSet<T>& params, const Vocabulary& vocab,
                          const GenerationRequest& request) {
  request.validate();
  const auto& cfg = params.config;
  if (request.max_new_tokens >= cfg.context_length) {
    throw std::invalid_argument("max_new_tokens must be below the context length");
  }
  GenerationResult result;
  result.prefix = vocab.encode(generation_prefix(request));
  const auto budget = static_cast<std::size_t>(cfg.context_length - request.max_new_tokens);
  if (result.prefix.size() > budget) {
    result.prefix.erase(result.prefix.begin(),
                        result.prefix.end() - static_cast<std::ptrdiff_t>(budget));
    result.prompt_truncated = true;
  }

  IncrementalDecoder<T> primed(params);
  Matrix<T> last;
  for (auto id : result.prefix) last = primed.push(id);

  Rng rng(mix_seed(request.seed, 0xDEC0));
  const auto V = static_cast<std::size_t>(cfg.vocab_size);
  for (int c = 0; c < request.num_candidates; ++c) {
    IncrementalDecoder<T> dec = primed;
    Matrix<T> logits = last;
    Candidate cand;
    std::string text;
    for (int step = 0; step < request.max_new_tokens; ++step) {
      std::vector<T> masked(logits.data(), logits.data() + V);
      for (std::size_t i = 0; i < kNumEmotions; ++i) masked[i] = -std::numeric_limits<T>::infinity();
      masked[static_cast<std::size_t>(kPadId)] = -std::numeric_limits<T>::infinity();
      TokenId next = kEosId;
      for (std::size_t attempt = 0; attempt < V; ++attempt) {
        next = sample_next(std::span<const T>(masked), request.strategy, request.temperature, request.k, rng);
        if (next == kEosId || !detail::spells_reserved(text, vocab.token_string(next))) break;
        masked[static_cast<std::size_t>(next)] = -std::numeric_limits<T>::infinity();
      }
      cand.forward_logprob += detail::log_softmax_row(logits, next);
      if (next == kEosId) {
        cand.terminated_by_eos = true;
        break;
      }
      cand.tokens.push_back(next);
      text += vocab.token_string(next);
      if (step + 1 < request.max_new_tokens) logits = dec.push(next);
    }
    cand.response_text = detail::trim_spaces(repair_utf8(text));
    result.candidates.push_back(std::move(cand));
  }
  std::stable_sort(result.candidates.begin(), result.candidates.end(),
                   [](const Candidate& a, const Candidate& b) { return a.forward_logprob > b.forward_logprob; });
  return result;
}

// log P(tail | head) under `params`, summing over the tail tokens; the head is
// left-truncated to fit the context.
template <typename T>
double conditional_logprob(const ParameterSet<T>& params, TokenSequence head, const TokenSequence& tail) {
  if (head.empty() || tail.empty()) throw std::invalid_argument("conditional_logprob needs head and tail");
  const auto ctx = static_cast<std::size_t>(params.config.context_length);
  if (tail.size() >= ctx) throw std::invalid_argument("tail longer than the context");
  const std::size_t keep = std::min(head.size(), ctx + 1 - tail.size());
  head.erase(head.begin(), head.end() - static_cast<std::ptrdiff_t>(keep));
  TokenSequence all = head;
  all.insert(all.end(), tail.begin(), tail.end());
  all.pop_back();  // the last token is only a target
  auto logits = forward(params, std::span<const TokenId>(all));
  double total = 0;
  for (std::size_t i = 0; i < tail.size(); ++i) {
    total += log_softmax_at<T>(logits.row(static_cast<Eigen::Index>(head.size() - 1 + i)), tail[i]);
  }
  return total;
}

// log P(prompt | response) under a backward model trained on
// "E2: S2 E1: S1 [EOS]". Without a prompt emotion the prompt label is
// marginalized over all eight emotions.
template <typename T>
double backward_logprob(const ParameterSet<T>& backward, const Vocabulary& vocab,
                        const std::string& response_text, Emotion response_emotion,
                        const std::string& prompt_text, std::optional<Emotion> prompt_emotion) {
  const auto head = vocab.encode(std::string(control_token(response_emotion)) + " " + response_text + " ");
  const auto tail = vocab.encode(" " + prompt_text + " " + std::string(kEosToken));
  auto given_label = [&](Emotion e) {
    auto h = head;
    h.push_back(control_token_id(e));
    return conditional_logprob(backward, std::move(h), tail);
  };
  if (prompt_emotion) return given_label(*prompt_emotion);

  // log sum_e P(e | E2 S2) P(S1 | E2 S2 e), with P(e | .) renormalized over
  // the eight labels.
  auto head_fit = head;
  const auto ctx = static_cast<std::size_t>(backward.config.context_length);
  if (head_fit.size() > ctx) head_fit.erase(head_fit.begin(), head_fit.end() - static_cast<std::ptrdiff_t>(ctx));
  const auto logits = forward(backward, std::span<const TokenId>(head_fit));
  std::array<double, kNumEmotions> label_lp{};
  std::array<double, kNumEmotions> joint{};
  for (std::size_t i = 0; i < kNumEmotions; ++i) {
    label_lp[i] = log_softmax_at<T>(logits.row(logits.rows() - 1), control_token_id(kAllEmotions[i]));
    joint[i] = label_lp[i] + given_label(kAllEmotions[i]);
  }
  auto logsumexp = [](const std::array<double, kNumEmotions>& v) {
    const double mx = *std::max_element(v.begin(), v.end());
    double s = 0;
    for (double x : v) s += std::exp(x - mx);
    return mx + std::log(s);
  };
  return std::min(0.0, logsumexp(joint) - logsumexp(label_lp));
}

// Combined score lambda * forward + (1 - lambda) * backward, sorted
// descending with ties kept in input order.
inline std::vector<Candidate> rerank_scored(std::vector<Candidate> candidates, double lambda) {
  for (auto& c : candidates) {
    double s = 0;
    if (lambda > 0) s += lambda * c.forward_logprob;
    if (lambda < 1) s += (1 - lambda) * c.backward_logprob.value_or(0.0);
    c.score = s;
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Candidate& a, const Candidate& b) { return *a.score > *b.score; });
  return candidates;
}

template <typename T>
std::vector<Candidate> mmi_rerank(std::vector<Candidate> candidates, const ParameterSet<T>& backward,
                                  const Vocabulary& vocab, const std::string& prompt_text,
                                  std::optional<Emotion> prompt_emotion, Emotion target, double lambda) {
  if (candidates.empty()) throw std::invalid_argument("mmi_rerank needs at least one candidate");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
  if (lambda < 1.0) {
    for (auto& c : candidates) {
      c.backward_logprob =
          backward_logprob(backward, vocab, c.response_text, target, prompt_text, prompt_emotion);
    }
  }
  return rerank_scored(std::move(candidates), lambda);
}

// Forward model plus optional backward scorer.
template <typename T>
struct ResponseModel {
  const ParameterSet<T>* forward = nullptr;
  const ParameterSet<T>* backward = nullptr;
  const Vocabulary* vocab = nullptr;

  GenerationResult respond(const GenerationRequest& request) const {
    auto result = generate(*forward, *vocab, request);
    if (backward) {
      result.candidates = mmi_rerank(std::move(result.candidates), *backward, *vocab, request.prompt_text,
                                     request.prompt_emotion, request.target_emotion, request.mmi_weight);
    } else {
      result.candidates = rerank_scored(std::move(result.candidates), 1.0);
    }
    return result;
  }
};

}  // namespace emogen
