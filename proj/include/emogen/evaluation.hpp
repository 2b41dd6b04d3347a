#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "emogen/checkpoint.hpp"
#include "emogen/corpus.hpp"
#include "emogen/decoding.hpp"
#include "emogen/emotion.hpp"
#include "emogen/errors.hpp"
#include "emogen/random.hpp"
#include "emogen/tokenizer.hpp"

namespace emogen {

inline constexpr std::string_view kOracleFormatTag = "emogen-oracle";
inline constexpr int kOracleFormatVersion = 1;
inline constexpr std::string_view kReportFormatTag = "emogen-report";
inline constexpr int kReportFormatVersion = 1;

// Lowercased runs of letters, digits and inner apostrophes.
inline std::vector<std::string> tokenize_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    while (!cur.empty() && cur.back() == '\'') cur.pop_back();
    if (!cur.empty()) out.push_back(cur);
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (c == '\'' && !cur.empty()) {
      cur.push_back('\'');
    } else {
      flush();
    }
  }
  flush();
  return out;
}

using Posterior = std::array<double, kNumEmotions>;

// Multinomial naive Bayes over response words with additive smoothing.
// Words never seen in training carry no evidence and are skipped.
class ClassifierModel {
 public:
  double alpha = 1.0;
  std::array<std::int64_t, kNumEmotions> doc_counts{};
  std::map<std::string, std::array<std::int64_t, kNumEmotions>, std::less<>> word_counts;

  void finalize() {
    std::int64_t docs = 0;
    for (auto d : doc_counts) docs += d;
    token_totals_.fill(0);
    for (const auto& [w, c] : word_counts) {
      for (std::size_t e = 0; e < kNumEmotions; ++e) token_totals_[e] += c[e];
    }
    const double V = static_cast<double>(word_counts.size());
    for (std::size_t e = 0; e < kNumEmotions; ++e) {
      log_prior_[e] = std::log(static_cast<double>(doc_counts[e]) / static_cast<double>(docs));
      log_denominator_[e] = std::log(static_cast<double>(token_totals_[e]) + alpha * V);
    }
  }

  std::size_t feature_count() const { return word_counts.size(); }
  double log_prior(Emotion e) const { return log_prior_[index_of(e)]; }

  // log P(w | e); nullopt for words outside the feature vocabulary.
  std::optional<double> log_likelihood(std::string_view word, Emotion e) const {
    auto it = word_counts.find(word);
    if (it == word_counts.end()) return std::nullopt;
    const auto i = index_of(e);
    return std::log(static_cast<double>(it->second[i]) + alpha) - log_denominator_[i];
  }

  Posterior posterior(std::string_view text) const {
    Posterior lp = log_prior_;
    for (const auto& w : tokenize_words(text)) {
      auto it = word_counts.find(w);
      if (it == word_counts.end()) continue;
      for (std::size_t e = 0; e < kNumEmotions; ++e) {
        lp[e] += std::log(static_cast<double>(it->second[e]) + alpha) - log_denominator_[e];
      }
    }
    const double mx = *std::max_element(lp.begin(), lp.end());
    double z = 0;
    for (auto& x : lp) z += (x = std::exp(x - mx));
    for (auto& x : lp) x /= z;
    return lp;
  }

  void write(std::ostream& out) const {
    out << kOracleFormatTag << ' ' << kOracleFormatVersion << '\n';
    out << "alpha " << std::setprecision(17) << alpha << '\n' << "docs";
    for (auto d : doc_counts) out << ' ' << d;
    out << '\n' << "features " << word_counts.size() << '\n';
    for (const auto& [w, c] : word_counts) {
      out << w;
      for (auto n : c) out << ' ' << n;
      out << '\n';
    }
  }

  static ClassifierModel read(std::istream& in) {
    std::string tag, key;
    int version = 0;
    if (!(in >> tag >> version) || tag != kOracleFormatTag) throw DataError("not an oracle file");
    if (version != kOracleFormatVersion) {
      throw DataError("oracle format version " + std::to_string(version) + " is not supported");
    }
    ClassifierModel m;
    if (!(in >> key >> m.alpha) || key != "alpha" || !(m.alpha > 0)) throw DataError("oracle: bad alpha");
    if (!(in >> key) || key != "docs") throw DataError("oracle: missing docs line");
    for (auto& d : m.doc_counts) {
      if (!(in >> d) || d <= 0) throw DataError("oracle: bad document count");
    }
    std::size_t n = 0;
    if (!(in >> key >> n) || key != "features") throw DataError("oracle: missing features line");
    for (std::size_t i = 0; i < n; ++i) {
      std::string w;
      std::array<std::int64_t, kNumEmotions> c{};
      if (!(in >> w)) throw DataError("oracle truncated");
      for (auto& x : c) {
        if (!(in >> x) || x < 0) throw DataError("oracle: bad count for '" + w + "'");
      }
      m.word_counts.emplace(std::move(w), c);
    }
    m.finalize();
    return m;
  }

  std::string serialized() const {
    std::ostringstream os;
    write(os);
    return os.str();
  }
  std::uint64_t hash() const { return fnv1a64(serialized()); }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot write oracle '" + path + "'");
    write(out);
  }
  static ClassifierModel load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open oracle '" + path + "'");
    return read(in);
  }

 private:
  Posterior log_prior_{};
  std::array<std::int64_t, kNumEmotions> token_totals_{};
  std::array<double, kNumEmotions> log_denominator_{};
};

inline ClassifierModel train_oracle(const Corpus& corpus, double alpha = 1.0) {
  ClassifierModel m;
  m.alpha = alpha;
  for (const auto& p : corpus.pairs) {
    const auto e = index_of(*p.response.emotion);
    ++m.doc_counts[e];
    for (const auto& w : tokenize_words(p.response.text)) ++m.word_counts[w][e];
  }
  for (auto e : kAllEmotions) {
    if (m.doc_counts[index_of(e)] == 0) {
      throw DataError("cannot train oracle: no responses labelled '" + std::string(label(e)) + "'");
    }
  }
  m.finalize();
  return m;
}

struct Classification {
  Emotion emotion = Emotion::neutral;
  Posterior distribution{};
};

// Ties go to the emotion listed first.
inline Classification classify(const ClassifierModel& oracle, std::string_view text) {
  Classification c;
  c.distribution = oracle.posterior(text);
  std::size_t best = 0;
  for (std::size_t i = 1; i < kNumEmotions; ++i) {
    if (c.distribution[i] > c.distribution[best]) best = i;
  }
  c.emotion = kAllEmotions[best];
  return c;
}

struct Judgment {
  bool expresses_target = false;
  std::optional<int> strength;  // 0..4, only when expresses_target
  double confidence = 0;        // posterior of the target
  Emotion predicted = Emotion::neutral;
};

inline int strength_from_confidence(double c) {
  return std::clamp(static_cast<int>(std::floor(c * 5.0)), 0, 4);
}

inline Judgment judgment_from(const Classification& c, Emotion target) {
  Judgment j;
  j.predicted = c.emotion;
  j.confidence = c.distribution[index_of(target)];
  j.expresses_target = c.emotion == target;
  if (j.expresses_target) j.strength = strength_from_confidence(j.confidence);
  return j;
}

inline Judgment judge(const ClassifierModel& oracle, std::string_view response_text, Emotion target) {
  return judgment_from(classify(oracle, response_text), target);
}

// Fraction of responses whose label the oracle recovers.
inline double oracle_accuracy(const ClassifierModel& oracle, const Corpus& corpus) {
  if (corpus.empty()) throw DataError("cannot measure accuracy on an empty corpus");
  std::size_t hit = 0;
  for (const auto& p : corpus.pairs) hit += classify(oracle, p.response.text).emotion == *p.response.emotion;
  return static_cast<double>(hit) / static_cast<double>(corpus.size());
}

// Anything that turns a request into ranked candidates.
class Generator {
 public:
  virtual ~Generator() = default;
  virtual GenerationResult respond(const GenerationRequest& request) const = 0;
  virtual std::string model_hash() const = 0;
};

class ModelGenerator final : public Generator {
 public:
  ModelGenerator(ParameterSet<float> forward, std::optional<ParameterSet<float>> backward, Vocabulary vocab)
      : forward_(std::move(forward)), backward_(std::move(backward)), vocab_(std::move(vocab)) {
    hash_ = checkpoint_hash(forward_, vocab_.hash());
  }

  GenerationResult respond(const GenerationRequest& request) const override {
    ResponseModel<float> m{&forward_, backward_ ? &*backward_ : nullptr, &vocab_};
    return m.respond(request);
  }
  std::string model_hash() const override { return hash_; }

  const Vocabulary& vocab() const { return vocab_; }
  const ParameterSet<float>& forward_params() const { return forward_; }
  bool has_backward() const { return backward_.has_value(); }

 private:
  ParameterSet<float> forward_;
  std::optional<ParameterSet<float>> backward_;
  Vocabulary vocab_;
  std::string hash_;
};

// Control: concatenates token strings drawn uniformly from the vocabulary,
// ignoring the request apart from its seed.
class RandomTokenGenerator final : public Generator {
 public:
  explicit RandomTokenGenerator(Vocabulary vocab, int length = 12) : vocab_(std::move(vocab)), length_(length) {}

  GenerationResult respond(const GenerationRequest& request) const override {
    Rng rng(mix_seed(request.seed, 0x7A2D));
    Candidate c;
    for (int i = 0; i < length_; ++i) {
      const auto span = vocab_.size() - static_cast<std::size_t>(kFirstByteId);
      c.tokens.push_back(kFirstByteId + static_cast<TokenId>(rng.below(span)));
    }
    c.response_text = repair_utf8(vocab_.decode(c.tokens));
    GenerationResult r;
    r.candidates.push_back(std::move(c));
    return r;
  }
  std::string model_hash() const override { return "random-" + hex64(vocab_.hash()); }

 private:
  Vocabulary vocab_;
  int length_;
};

struct EvalItem {
  Emotion target = Emotion::neutral;
  std::string prompt;
  std::string response;
  std::optional<Judgment> judgment;  // absent when generation failed
  std::string failure;
};

struct EmotionRow {
  Emotion emotion = Emotion::neutral;
  std::size_t samples = 0;  // judged items
  std::size_t failures = 0;
  std::size_t yes = 0;
  double yes_rate = 0;
  std::optional<double> mean_strength;  // over yes-judged items
};

struct EvalReport {
  std::array<EmotionRow, kNumEmotions> rows{};
  double overall_yes_rate = 0;
  std::uint64_t seed = 0;
  std::string model_hash;
  std::size_t n_per_emotion = 0;
  std::vector<EvalItem> items;

  std::size_t judged() const {
    std::size_t n = 0;
    for (const auto& r : rows) n += r.samples;
    return n;
  }
};

struct ProtocolOptions {
  std::size_t n_per_emotion = 15;
  std::uint64_t seed = 0;
  GenerationRequest base;  // decoding settings; prompt and emotions are filled per item
};

inline void aggregate(EvalReport& report) {
  for (auto& r : report.rows) r = EmotionRow{r.emotion};
  std::array<double, kNumEmotions> strength_sum{};
  for (const auto& item : report.items) {
    auto& row = report.rows[index_of(item.target)];
    if (!item.judgment) {
      ++row.failures;
      continue;
    }
    ++row.samples;
    if (item.judgment->expresses_target) {
      ++row.yes;
      strength_sum[index_of(item.target)] += *item.judgment->strength;
    }
  }
  std::size_t yes = 0, judged = 0;
  for (std::size_t i = 0; i < kNumEmotions; ++i) {
    auto& row = report.rows[i];
    row.yes_rate = row.samples ? static_cast<double>(row.yes) / static_cast<double>(row.samples) : 0.0;
    if (row.yes) row.mean_strength = strength_sum[i] / static_cast<double>(row.yes);
    yes += row.yes;
    judged += row.samples;
  }
  report.overall_yes_rate = judged ? static_cast<double>(yes) / static_cast<double>(judged) : 0.0;
}

// For each emotion, samples n prompts without replacement, generates a reply
// with no prompt emotion in the prefix and judges it.
inline EvalReport run_protocol(const Generator& generator, const std::vector<std::string>& prompt_pool,
                               const ClassifierModel& oracle, const ProtocolOptions& options) {
  if (options.n_per_emotion < 1) throw std::invalid_argument("n_per_emotion must be at least 1");
  if (prompt_pool.size() < options.n_per_emotion) {
    throw DataError("prompt pool has " + std::to_string(prompt_pool.size()) + " prompts, need at least " +
                    std::to_string(options.n_per_emotion));
  }
  EvalReport report;
  report.seed = options.seed;
  report.model_hash = generator.model_hash();
  report.n_per_emotion = options.n_per_emotion;
  for (std::size_t i = 0; i < kNumEmotions; ++i) report.rows[i].emotion = kAllEmotions[i];

  for (std::size_t e = 0; e < kNumEmotions; ++e) {
    std::vector<std::size_t> order(prompt_pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix_seed(options.seed, 0xE7A1 + e));
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t j = 0; j < options.n_per_emotion; ++j) {
      EvalItem item;
      item.target = kAllEmotions[e];
      item.prompt = prompt_pool[order[j]];
      auto req = options.base;
      req.prompt_text = item.prompt;
      req.prompt_emotion.reset();
      req.target_emotion = item.target;
      req.seed = mix_seed(mix_seed(options.seed, e), j);
      try {
        auto result = generator.respond(req);
        if (result.candidates.empty()) throw RuntimeFailure("no candidates");
        item.response = result.candidates.front().response_text;
        item.judgment = judge(oracle, item.response, item.target);
      } catch (const std::exception& ex) {
        item.failure = ex.what();
      }
      report.items.push_back(std::move(item));
    }
  }
  aggregate(report);
  return report;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"emotion", std::string(label(row.emotion))},
                    {"samples", row.samples},
                    {"failures", row.failures},
                    {"yes", row.yes},
                    {"yes_rate", row.yes_rate},
                    {"mean_strength", row.mean_strength ? nlohmann::json(*row.mean_strength) : nlohmann::json()}});
  }
  nlohmann::json items = nlohmann::json::array();
  for (const auto& it : r.items) {
    nlohmann::json j{{"target", std::string(label(it.target))}, {"prompt", it.prompt}, {"response", it.response}};
    if (it.judgment) {
      j["expresses_target"] = it.judgment->expresses_target;
      j["confidence"] = it.judgment->confidence;
      j["predicted"] = std::string(label(it.judgment->predicted));
      j["strength"] = it.judgment->strength ? nlohmann::json(*it.judgment->strength) : nlohmann::json();
    } else {
      j["failure"] = it.failure;
    }
    items.push_back(std::move(j));
  }
  return {{"format", kReportFormatTag},
          {"version", kReportFormatVersion},
          {"seed", r.seed},
          {"model_hash", r.model_hash},
          {"n_per_emotion", r.n_per_emotion},
          {"overall_yes_rate", r.overall_yes_rate},
          {"rows", rows},
          {"items", items}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != kReportFormatTag || j.at("version").get<int>() != kReportFormatVersion) {
      throw DataError("unsupported report format");
    }
    EvalReport r;
    r.seed = j.at("seed").get<std::uint64_t>();
    r.model_hash = j.at("model_hash").get<std::string>();
    r.n_per_emotion = j.at("n_per_emotion").get<std::size_t>();
    for (const auto& it : j.at("items")) {
      EvalItem item;
      item.target = parse_emotion(it.at("target").get<std::string>());
      item.prompt = it.at("prompt").get<std::string>();
      item.response = it.at("response").get<std::string>();
      if (it.contains("failure")) {
        item.failure = it.at("failure").get<std::string>();
      } else {
        Judgment jd;
        jd.expresses_target = it.at("expresses_target").get<bool>();
        jd.confidence = it.at("confidence").get<double>();
        jd.predicted = parse_emotion(it.at("predicted").get<std::string>());
        if (!it.at("strength").is_null()) jd.strength = it.at("strength").get<int>();
        item.judgment = jd;
      }
      r.items.push_back(std::move(item));
    }
    for (std::size_t i = 0; i < kNumEmotions; ++i) r.rows[i].emotion = kAllEmotions[i];
    aggregate(r);
    if (r.overall_yes_rate != j.at("overall_yes_rate").get<double>()) {
      throw DataError("report rows are inconsistent with its items");
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed report: ") + e.what());
  }
}

// Writes report.json plus yes_rate.tsv and strength.tsv, one row per emotion.
inline void emit_report(const EvalReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw RuntimeFailure("cannot create report directory '" + dir.string() + "': " + ec.message());
  auto open = [&](const char* name) {
    std::ofstream out(dir / name);
    if (!out) throw RuntimeFailure("cannot write '" + (dir / name).string() + "'");
    return out;
  };
  {
    auto out = open("report.json");
    out << to_json(report).dump(2) << '\n';
  }
  {
    auto out = open("yes_rate.tsv");
    out << "emotion\tyes_rate\tsamples\tfailures\n";
    for (const auto& r : report.rows) {
      out << label(r.emotion) << '\t' << r.yes_rate << '\t' << r.samples << '\t' << r.failures << '\n';
    }
  }
  {
    auto out = open("strength.tsv");
    out << "emotion\tmean_strength\tyes\n";
    for (const auto& r : report.rows) {
      out << label(r.emotion) << '\t';
      if (r.mean_strength) {
        out << *r.mean_strength;
      } else {
        out << "NA";
      }
      out << '\t' << r.yes << '\n';
    }
  }
}

inline EvalReport load_report(const std::filesystem::path& path) {
  const auto file = std::filesystem::is_directory(path) ? path / "report.json" : path;
  std::ifstream in(file);
  if (!in) throw DataError("cannot open report '" + file.string() + "'");
  try {
    return report_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("malformed report: ") + e.what());
  }
}

}  // namespace emogen
