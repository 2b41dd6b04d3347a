#pragma once

// Layout of a model directory written by `emogen train`:
//   vocab.txt, best.ckpt, final.ckpt, metrics.jsonl, oracle.txt, config.ini
//   and optionally backward_best.ckpt, backward_final.ckpt, backward_metrics.jsonl

#include <filesystem>
#include <optional>
#include <string>

#include "emogen/checkpoint.hpp"
#include "emogen/errors.hpp"
#include "emogen/tokenizer.hpp"

namespace emogen {

inline constexpr const char* kVocabFile = "vocab.txt";
inline constexpr const char* kOracleFile = "oracle.txt";
inline constexpr const char* kConfigFile = "config.ini";

struct ModelArtifacts {
  Vocabulary vocab;
  ParameterSet<float> forward;
  std::optional<ParameterSet<float>> backward;
};

// `which` is "best" or "final".
inline ModelArtifacts load_model_dir(const std::filesystem::path& dir, const std::string& which = "best",
                                     bool with_backward = true) {
  if (which != "best" && which != "final") throw std::invalid_argument("checkpoint must be 'best' or 'final'");
  if (!std::filesystem::is_directory(dir)) throw DataError("model directory '" + dir.string() + "' not found");
  ModelArtifacts a;
  a.vocab = Vocabulary::load((dir / kVocabFile).string());
  const auto vh = a.vocab.hash();
  a.forward = load_checkpoint<float>((dir / (which + ".ckpt")).string(), vh);
  const auto bw = dir / ("backward_" + which + ".ckpt");
  if (with_backward && std::filesystem::exists(bw)) a.backward = load_checkpoint<float>(bw.string(), vh);
  return a;
}

}  // namespace emogen
