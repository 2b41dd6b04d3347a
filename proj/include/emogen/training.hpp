#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "emogen/checkpoint.hpp"
#include "emogen/corpus.hpp"
#include "emogen/errors.hpp"
#include "emogen/model.hpp"
#include "emogen/optimizer.hpp"
#include "emogen/tokenizer.hpp"

namespace emogen {

enum class LossScope { full_sequence, response_only };

inline std::string_view to_string(LossScope s) {
  return s == LossScope::full_sequence ? "full_sequence" : "response_only";
}

inline LossScope parse_loss_scope(std::string_view s) {
  if (s == "full_sequence") return LossScope::full_sequence;
  if (s == "response_only") return LossScope::response_only;
  throw std::invalid_argument("unknown loss scope '" + std::string(s) + "'");
}

// Which utterance comes first in the serialized example.
enum class Direction { forward, backward };

struct TrainingConfig {
  int epochs = 5;
  double train_fraction = 0.9;
  int batch_size = 8;
  double learning_rate = 3e-4;
  std::uint64_t seed = 0;
  LossScope loss_scope = LossScope::response_only;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
      throw std::invalid_argument("train fraction must lie strictly between 0 and 1");
    }
    if (batch_size < 1) throw std::invalid_argument("batch size must be at least 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  }
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_perplexity = 0;
  double seconds = 0;
};

struct TrainingMetrics {
  int epochs = 0;
  double train_fraction = 0;
  std::size_t train_examples = 0;
  std::size_t val_examples = 0;
  std::size_t truncated = 0;
  std::vector<EpochMetrics> per_epoch;
};

inline nlohmann::json to_json(const EpochMetrics& m, const TrainingMetrics& run) {
  return {{"epoch", m.epoch},
          {"epochs", run.epochs},
          {"train_fraction", run.train_fraction},
          {"train_loss", m.train_loss},
          {"val_loss", m.val_loss},
          {"val_perplexity", m.val_perplexity},
          {"truncated", run.truncated},
          {"train_examples", run.train_examples},
          {"val_examples", run.val_examples},
          {"seconds", m.seconds}};
}

// Encodes one pair. Sequences longer than context_length + 1 tokens are cut
// at the end and flagged. Under response_only only the positions that
// predict tokens after the second control token are scored.
inline std::optional<Example> build_example(const Vocabulary& vocab, const DialogPair& pair,
                                            Direction direction, LossScope scope,
                                            int context_length, bool* truncated = nullptr) {
  const auto p = with_imputed_prompt_emotion(pair);
  const auto text = direction == Direction::forward ? serialize_training(p) : serialize_reversed(p);
  auto ids = vocab.encode(text);
  const auto limit = static_cast<std::size_t>(context_length) + 1;
  const bool cut = ids.size() > limit;
  if (cut) ids.resize(limit);
  if (truncated) *truncated = cut;
  if (ids.size() < 2) return std::nullopt;

  std::size_t second_control = ids.size();
  int seen = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (is_control_id(ids[i]) && ++seen == 2) {
      second_control = i;
      break;
    }
  }

  Example ex;
  ex.inputs.assign(ids.begin(), ids.end() - 1);
  ex.targets.assign(ids.begin() + 1, ids.end());
  ex.mask.resize(ex.inputs.size());
  bool any = false;
  for (std::size_t i = 0; i < ex.inputs.size(); ++i) {
    ex.mask[i] = scope == LossScope::full_sequence || i >= second_control;
    any = any || ex.mask[i];
  }
  if (!any) return std::nullopt;
  return ex;
}

struct ExampleSet {
  std::vector<Example> examples;
  std::size_t truncated = 0;
};

inline ExampleSet build_examples(const Vocabulary& vocab, const Corpus& corpus, Direction direction,
                                 LossScope scope, int context_length) {
  ExampleSet out;
  out.examples.reserve(corpus.size());
  for (const auto& p : corpus.pairs) {
    bool cut = false;
    if (auto ex = build_example(vocab, p, direction, scope, context_length, &cut)) {
      out.examples.push_back(std::move(*ex));
    }
    if (cut) ++out.truncated;
  }
  return out;
}

template <typename T>
LossSum dataset_nll(const ParameterSet<T>& params, const std::vector<Example>& examples,
                    std::size_t chunk = 32) {
  LossSum total;
  for (std::size_t i = 0; i < examples.size(); i += chunk) {
    const auto n = std::min(chunk, examples.size() - i);
    const auto part = batch_nll(params, std::span<const Example>(examples.data() + i, n));
    total.total_nll += part.total_nll;
    total.count += part.count;
  }
  return total;
}

// exp(mean token NLL) over the examples.
template <typename T>
double evaluate_perplexity(const ParameterSet<T>& params, const std::vector<Example>& examples) {
  if (examples.empty()) throw DataError("cannot evaluate perplexity on an empty split");
  const auto sum = dataset_nll(params, examples);
  if (sum.count == 0) throw DataError("split has no scored tokens");
  return std::exp(sum.mean());
}

template <typename T>
double evaluate_perplexity(const ParameterSet<T>& params, const Vocabulary& vocab, const Corpus& split,
                           LossScope scope, Direction direction = Direction::forward) {
  if (split.empty()) throw DataError("cannot evaluate perplexity on an empty split");
  const auto set = build_examples(vocab, split, direction, scope, params.config.context_length);
  return evaluate_perplexity(params, set.examples);
}

struct TrainOptions {
  Direction direction = Direction::forward;
  // When set, checkpoints and metrics.jsonl are written here.
  std::optional<std::filesystem::path> out_dir;
  std::string checkpoint_prefix;  // e.g. "backward_"
  std::function<void(const EpochMetrics&, const TrainingMetrics&)> on_epoch;
};

struct TrainResult {
  ParameterSet<float> final_params;
  ParameterSet<float> best_params;
  TrainingMetrics metrics;
};

inline TrainResult train(const Corpus& corpus, const Vocabulary& vocab, const ModelConfig& model_config,
                         const TrainingConfig& train_config, const TrainOptions& options = {}) {
  train_config.validate();
  model_config.validate();
  if (static_cast<std::size_t>(model_config.vocab_size) != vocab.size()) {
    throw std::invalid_argument("model vocab_size " + std::to_string(model_config.vocab_size) +
                                " does not match vocabulary size " + std::to_string(vocab.size()));
  }
  auto [train_split, val_split] = split(corpus, train_config.train_fraction, train_config.seed);
  if (train_split.empty() || val_split.empty()) throw DataError("empty train or validation split");

  auto train_set = build_examples(vocab, train_split, options.direction, train_config.loss_scope,
                                  model_config.context_length);
  auto val_set = build_examples(vocab, val_split, options.direction, train_config.loss_scope,
                                model_config.context_length);
  if (train_set.examples.empty() || val_set.examples.empty()) {
    throw DataError("no usable examples in the train or validation split");
  }

  TrainResult result;
  auto& metrics = result.metrics;
  metrics.epochs = train_config.epochs;
  metrics.train_fraction = train_config.train_fraction;
  metrics.train_examples = train_set.examples.size();
  metrics.val_examples = val_set.examples.size();
  metrics.truncated = train_set.truncated + val_set.truncated;

  auto params = init_params<float>(model_config);
  OptimizerState<float> opt(params, AdamHyper{train_config.learning_rate});
  auto grads = zeros_like(params);
  double best_val = INFINITY;
  result.best_params = params;

  std::ofstream metrics_out;
  auto ckpt_path = [&](const char* name) {
    return (*options.out_dir / (options.checkpoint_prefix + name)).string();
  };
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    metrics_out.open(*options.out_dir / (options.checkpoint_prefix + "metrics.jsonl"));
  }
  const auto vocab_hash = vocab.hash();

  std::vector<std::size_t> order(train_set.examples.size());
  std::vector<Example> batch;
  for (int epoch = 1; epoch <= train_config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix_seed(train_config.seed, 0xE90C + static_cast<std::uint64_t>(epoch)));
    rng.shuffle(std::span<std::size_t>(order));

    double loss_sum = 0;
    std::size_t token_sum = 0;
    const auto bs = static_cast<std::size_t>(train_config.batch_size);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      batch.clear();
      std::size_t tokens = 0;
      for (std::size_t i = start; i < std::min(start + bs, order.size()); ++i) {
        batch.push_back(train_set.examples[order[i]]);
        for (auto m : batch.back().mask) tokens += m;
      }
      const double l = loss_and_gradients(params, std::span<const Example>(batch), grads);
      if (!std::isfinite(l)) {
        throw RuntimeFailure("non-finite training loss at epoch " + std::to_string(epoch) +
                             "; last good checkpoint retained");
      }
      adam_step(params, grads, opt);
      loss_sum += l * static_cast<double>(tokens);
      token_sum += tokens;
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = loss_sum / static_cast<double>(token_sum);
    em.val_loss = dataset_nll(params, val_set.examples).mean();
    em.val_perplexity = std::exp(em.val_loss);
    em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!std::isfinite(em.val_loss)) {
      throw RuntimeFailure("non-finite validation loss at epoch " + std::to_string(epoch) +
                           "; last good checkpoint retained");
    }
    metrics.per_epoch.push_back(em);

    if (em.val_loss < best_val) {
      best_val = em.val_loss;
      result.best_params = params;
      if (options.out_dir) save_checkpoint(ckpt_path("best.ckpt"), params, vocab_hash);
    }
    if (options.out_dir) {
      save_checkpoint(ckpt_path("final.ckpt"), params, vocab_hash);
      metrics_out << to_json(em, metrics).dump() << '\n' << std::flush;
    }
    if (options.on_epoch) options.on_epoch(em, metrics);
  }
  result.final_params = std::move(params);
  return result;
}

// Second model over "E2: S2 E1: S1 [EOS]"; scores prompts given responses.
inline TrainResult train_backward_model(const Corpus& corpus, const Vocabulary& vocab,
                                        const ModelConfig& model_config,
                                        const TrainingConfig& train_config, TrainOptions options = {}) {
  options.direction = Direction::backward;
  if (options.checkpoint_prefix.empty()) options.checkpoint_prefix = "backward_";
  return train(corpus, vocab, model_config, train_config, options);
}

// Repeated steps on one fixed batch; returns the loss before each step.
template <typename T>
std::vector<double> overfit_batch(ParameterSet<T>& params, const std::vector<Example>& batch,
                                  int steps, double learning_rate) {
  OptimizerState<T> opt(params, AdamHyper{learning_rate});
  auto grads = zeros_like(params);
  std::vector<double> history;
  history.reserve(static_cast<std::size_t>(steps) + 1);
  for (int s = 0; s < steps; ++s) {
    history.push_back(loss_and_gradients(params, std::span<const Example>(batch), grads));
    adam_step(params, grads, opt);
  }
  history.push_back(batch_nll(params, std::span<const Example>(batch)).mean());
  return history;
}

}  // namespace emogen
