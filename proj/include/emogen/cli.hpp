#pragma once

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "emogen/emogen.hpp"
#include "emogen/http.hpp"

namespace emogen {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitRuntime = 3 };

inline std::string version_text() {
  std::ostringstream os;
  os << "emogen " << kVersion << " (checkpoint format " << kCheckpointVersion << ", " << kVocabFormatTag << ' '
     << kVocabFormatVersion << ", " << kOracleFormatTag << ' ' << kOracleFormatVersion << ", " << kReportFormatTag
     << ' ' << kReportFormatVersion << ")";
  return os.str();
}

// Flat "key = value" lines; '#' starts a comment line.
inline std::vector<std::pair<std::string, std::string>> read_flat_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file '" + path.string() + "'");
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  std::vector<std::pair<std::string, std::string>> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected key=value");
    }
    entries.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return entries;
}

namespace cli_detail {

inline bool skipped_key(const std::string& name) { return name == "help" || name == "config"; }

inline std::string key_of(const CLI::Option* opt) {
  const auto& names = opt->get_lnames();
  return names.empty() ? std::string() : names.front();
}

// Fills options not given on the command line from the config file.
inline void apply_config(CLI::App& sub, const std::filesystem::path& path) {
  for (const auto& [key, value] : read_flat_config(path)) {
    auto* opt = sub.get_option_no_throw("--" + key);
    if (!opt || skipped_key(key) || key_of(opt) != key) {
      throw std::invalid_argument("config key '" + key + "' is not an option of " + sub.get_name());
    }
    if (opt->count() > 0) continue;
    opt->add_result(value);
    opt->run_callback();
  }
}

inline std::string resolved_config(const CLI::App& sub) {
  std::ostringstream os;
  os << "# emogen " << kVersion << ' ' << sub.get_name() << '\n';
  for (const auto* opt : sub.get_options()) {
    const auto key = key_of(opt);
    if (key.empty() || skipped_key(key)) continue;
    os << key << '=' << opt->as<std::string>() << '\n';
  }
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
}

inline std::vector<std::string> read_prompt_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open prompt file '" + path + "'");
  std::vector<std::string> prompts;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.find_first_not_of(" \t") != std::string::npos) prompts.push_back(line);
  }
  return prompts;
}

inline void report_rejections(const LoadResult& r, std::ostream& err) {
  for (const auto& rej : r.rejections) err << "skipped line " << rej.line << ": " << rej.reason << '\n';
  if (!r.rejections.empty()) err << r.rejections.size() << " record(s) rejected\n";
}

struct DecodeFlags {
  std::string strategy = "top_k";
  int k = 40;
  double temperature = 0.9;
  int candidates = 8;
  double lambda = 0.5;
  int max_new_tokens = 64;

  void add(CLI::App& sub) {
    sub.add_option("--strategy", strategy, "greedy, ancestral or top_k");
    sub.add_option("--k", k, "top-k cutoff");
    sub.add_option("--temp", temperature, "sampling temperature");
    sub.add_option("--candidates", candidates, "sampled candidates per response");
    sub.add_option("--lambda", lambda, "forward-score weight in MMI reranking");
    sub.add_option("--max-new-tokens", max_new_tokens, "response length cap in tokens");
  }

  GenerationRequest request() const {
    GenerationRequest r;
    r.strategy = parse_strategy(strategy);
    r.k = k;
    r.temperature = temperature;
    r.num_candidates = candidates;
    r.mmi_weight = lambda;
    r.max_new_tokens = max_new_tokens;
    return r;
  }
};

inline void print_report_table(const EvalReport& report, std::ostream& out) {
  out << std::left << std::setw(10) << "emotion" << std::right << std::setw(9) << "yes_rate" << std::setw(9)
      << "samples" << std::setw(10) << "failures" << std::setw(10) << "strength" << '\n';
  out << std::fixed << std::setprecision(3);
  for (const auto& row : report.rows) {
    out << std::left << std::setw(10) << label(row.emotion) << std::right << std::setw(9) << row.yes_rate
        << std::setw(9) << row.samples << std::setw(10) << row.failures << std::setw(10);
    if (row.mean_strength) {
      out << *row.mean_strength;
    } else {
      out << "NA";
    }
    out << '\n';
  }
  out << std::left << std::setw(10) << "overall" << std::right << std::setw(9) << report.overall_yes_rate << '\n';
  out << std::defaultfloat;
}

// A label given on the command line; a bad one is a usage error.
inline Emotion flag_emotion(const std::string& s, const char* flag) {
  if (auto e = try_parse_emotion(s)) return *e;
  throw std::invalid_argument(std::string(flag) + ": unknown emotion '" + s + "' (valid: " + valid_labels_text() + ")");
}

inline httplib::Server* g_server = nullptr;

}  // namespace cli_detail

// Runs one subcommand. Output goes to `out`, diagnostics to `err`.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"Emotion-conditioned dialog generation", "emogen"};
  app.set_version_flag("--version", version_text());
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  std::string config_path;
  auto with_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "flat key=value file; flags take precedence");
  };

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "generate a labeled synthetic corpus");
  std::string spec_path, synth_out, prompts_out, prompt_bank = "fantasy";
  std::uint64_t synth_seed = 0;
  std::size_t prompts_n = 200;
  synth->add_option("--spec", spec_path, "JSON spec: counts or scale_to, optional templates");
  synth->add_option("--seed", synth_seed);
  synth->add_option("--out", synth_out, "corpus file (jsonl)");
  synth->add_option("--prompts-out", prompts_out, "also write an evaluation prompt pool, one per line");
  synth->add_option("--prompts-n", prompts_n, "prompt pool size");
  synth->add_option("--prompt-bank", prompt_bank, "fantasy or wasteland");
  with_config(synth);

  // stats
  auto* stats_cmd = app.add_subcommand("stats", "print the response-emotion histogram");
  std::string stats_in;
  stats_cmd->add_option("--in", stats_in, "corpus file (jsonl)");
  with_config(stats_cmd);

  // train
  auto* train_cmd = app.add_subcommand("train", "train vocabulary, forward and backward models, and the oracle");
  std::string data_path, train_out, loss_scope = "response_only";
  TrainingConfig tc;
  ModelConfig mc;
  int vocab_size = mc.vocab_size;
  bool with_backward = true;
  train_cmd->add_option("--data", data_path, "corpus file (jsonl)");
  train_cmd->add_option("--out", train_out, "output directory");
  train_cmd->add_option("--epochs", tc.epochs);
  train_cmd->add_option("--split", tc.train_fraction, "training fraction");
  train_cmd->add_option("--seed", tc.seed);
  train_cmd->add_option("--loss-scope", loss_scope, "response_only or full_sequence");
  train_cmd->add_option("--batch-size", tc.batch_size);
  train_cmd->add_option("--lr", tc.learning_rate);
  train_cmd->add_option("--vocab-size", vocab_size);
  train_cmd->add_option("--context", mc.context_length);
  train_cmd->add_option("--layers", mc.num_layers);
  train_cmd->add_option("--heads", mc.num_heads);
  train_cmd->add_option("--dim", mc.model_dim);
  train_cmd->add_option("--mlp", mc.mlp_dim);
  train_cmd->add_flag("--backward,!--no-backward", with_backward, "also train the backward model for MMI")
      ->default_str("true");
  with_config(train_cmd);

  // generate
  auto* gen_cmd = app.add_subcommand("generate", "respond to one prompt with a target emotion");
  std::string model_dir, prompt, emotion, prompt_emotion, which = "best";
  std::uint64_t gen_seed = 0;
  bool verbose = false;
  DecodeFlags gen_flags;
  gen_cmd->add_option("--model", model_dir, "directory written by train");
  gen_cmd->add_option("--prompt", prompt);
  gen_cmd->add_option("--emotion", emotion, "target emotion of the response");
  gen_cmd->add_option("--prompt-emotion", prompt_emotion, "emotion of the prompt, if known");
  gen_flags.add(*gen_cmd);
  gen_cmd->add_option("--seed", gen_seed);
  gen_cmd->add_option("--checkpoint", which, "best or final");
  gen_cmd->add_flag("--verbose", verbose, "print the scored candidate list")->default_str("false");
  with_config(gen_cmd);

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "run the judged evaluation protocol");
  std::string eval_model, oracle_path, prompts_path, eval_out, eval_which = "best", generator_kind = "model";
  std::size_t n_per_emotion = 15;
  std::uint64_t eval_seed = 0;
  DecodeFlags eval_flags;
  eval_cmd->add_option("--model", eval_model, "directory written by train");
  eval_cmd->add_option("--oracle", oracle_path, "oracle file");
  eval_cmd->add_option("--prompts", prompts_path, "prompt pool, one per line");
  eval_cmd->add_option("--n", n_per_emotion, "prompts per emotion");
  eval_cmd->add_option("--seed", eval_seed);
  eval_cmd->add_option("--out", eval_out, "report directory");
  eval_cmd->add_option("--checkpoint", eval_which, "best or final");
  eval_cmd->add_option("--generator", generator_kind, "model or random");
  eval_flags.add(*eval_cmd);
  with_config(eval_cmd);

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "serve the chat API");
  std::string serve_model, serve_oracle, persist, static_dir, host = "127.0.0.1", busy = "serialize",
                                                               serve_which = "best";
  int port = 8080;
  long long ttl = 3600;
  DecodeFlags serve_flags;
  serve_cmd->add_option("--model", serve_model, "directory written by train");
  serve_cmd->add_option("--oracle", serve_oracle, "oracle file");
  serve_cmd->add_option("--port", port);
  serve_cmd->add_option("--host", host);
  serve_cmd->add_option("--persist", persist, "session store file");
  serve_cmd->add_option("--static", static_dir, "web UI directory served at /");
  serve_cmd->add_option("--busy", busy, "serialize or reject concurrent messages in one session");
  serve_cmd->add_option("--ttl", ttl, "idle session lifetime in seconds");
  serve_cmd->add_option("--checkpoint", serve_which, "best or final");
  serve_flags.add(*serve_cmd);
  with_config(serve_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kExitOk;
    }
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  auto require = [](const std::string& value, const char* flag) {
    if (value.empty()) throw std::invalid_argument(std::string("missing required option ") + flag);
  };

  try {
    CLI::App* sub = app.get_subcommands().front();
    if (!config_path.empty()) apply_config(*sub, config_path);

    if (sub == synth) {
      require(spec_path, "--spec");
      require(synth_out, "--out");
      std::ifstream in(spec_path);
      if (!in) throw DataError("cannot open spec file '" + spec_path + "'");
      SyntheticSpec spec;
      try {
        spec = synthetic_spec_from_json(nlohmann::json::parse(in));
      } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed spec '" + spec_path + "': " + e.what());
      }
      const auto corpus = generate_synthetic(spec, synth_seed);
      save_corpus(synth_out, corpus);
      out << "wrote " << corpus.size() << " pairs to " << synth_out << '\n';
      if (!prompts_out.empty()) {
        TemplateBank bank;
        if (prompt_bank == "fantasy") {
          bank = fantasy_prompt_bank();
        } else if (prompt_bank == "wasteland") {
          bank = wasteland_bank();
        } else {
          throw std::invalid_argument("unknown prompt bank '" + prompt_bank + "'");
        }
        const auto pool = generate_prompt_pool(bank, prompts_n, mix_seed(synth_seed, 0x9A11));
        std::ofstream p(prompts_out);
        if (!p) throw DataError("cannot write '" + prompts_out + "'");
        for (const auto& s : pool) p << s << '\n';
        out << "wrote " << pool.size() << " prompts to " << prompts_out << '\n';
      }
      return kExitOk;
    }

    if (sub == stats_cmd) {
      require(stats_in, "--in");
      const auto loaded = load_corpus(stats_in);
      report_rejections(loaded, err);
      const auto h = stats(loaded.corpus);
      out << std::left << std::setw(10) << "emotion" << std::right << std::setw(8) << "count" << std::setw(10)
          << "fraction" << '\n'
          << std::fixed << std::setprecision(4);
      for (auto e : kAllEmotions) {
        const double f = h.total ? static_cast<double>(h[e]) / static_cast<double>(h.total) : 0.0;
        out << std::left << std::setw(10) << label(e) << std::right << std::setw(8) << h[e] << std::setw(10) << f
            << '\n';
      }
      out << std::left << std::setw(10) << "total" << std::right << std::setw(8) << h.total << '\n'
          << std::defaultfloat;
      return kExitOk;
    }

    if (sub == train_cmd) {
      require(data_path, "--data");
      require(train_out, "--out");
      tc.loss_scope = parse_loss_scope(loss_scope);
      tc.validate();
      if (vocab_size < static_cast<int>(kFirstMergeId)) {
        throw std::invalid_argument("vocab size must be at least " + std::to_string(kFirstMergeId));
      }
      const auto loaded = load_corpus(data_path);
      report_rejections(loaded, err);
      const auto& corpus = loaded.corpus;
      const auto [train_split, val_split] = split(corpus, tc.train_fraction, tc.seed);

      const std::filesystem::path dir(train_out);
      std::filesystem::create_directories(dir);
      write_text(dir / kConfigFile, resolved_config(*sub));

      const auto vocab = train_vocab(training_texts(train_split), static_cast<std::size_t>(vocab_size));
      vocab.save((dir / kVocabFile).string());
      mc.vocab_size = static_cast<int>(vocab.size());
      mc.seed = tc.seed;
      mc.validate();
      out << "vocabulary: " << vocab.size() << " tokens; " << train_split.size() << " train / " << val_split.size()
          << " validation pairs\n";

      auto log_epoch = [&out](const char* which_model) {
        return [&out, which_model](const EpochMetrics& m, const TrainingMetrics& run) {
          out << which_model << " epoch " << m.epoch << '/' << run.epochs << "  train_loss " << std::fixed
              << std::setprecision(4) << m.train_loss << "  val_loss " << m.val_loss << "  val_ppl "
              << m.val_perplexity << "  (" << std::setprecision(1) << m.seconds << "s)\n"
              << std::defaultfloat << std::flush;
        };
      };
      TrainOptions fwd_opts;
      fwd_opts.out_dir = dir;
      fwd_opts.on_epoch = log_epoch("forward");
      const auto fwd = train(corpus, vocab, mc, tc, fwd_opts);
      if (fwd.metrics.truncated) err << fwd.metrics.truncated << " example(s) truncated to the context length\n";
      if (with_backward) {
        TrainOptions bwd_opts;
        bwd_opts.out_dir = dir;
        bwd_opts.on_epoch = log_epoch("backward");
        train_backward_model(corpus, vocab, mc, tc, bwd_opts);
      }

      const auto oracle = train_oracle(train_split);
      oracle.save((dir / kOracleFile).string());
      const double acc = oracle_accuracy(oracle, val_split);
      write_text(dir / "oracle_metrics.json",
                 nlohmann::json{{"heldout_accuracy", acc}, {"heldout_pairs", val_split.size()}}.dump() + "\n");
      out << "oracle held-out accuracy " << std::fixed << std::setprecision(4) << acc << std::defaultfloat << '\n';
      if (acc < 0.9) err << "warning: oracle held-out accuracy below 0.9; judgments are unreliable\n";
      out << "wrote model to " << dir.string() << '\n';
      return kExitOk;
    }

    if (sub == gen_cmd) {
      require(model_dir, "--model");
      require(prompt, "--prompt");
      require(emotion, "--emotion");
      auto req = gen_flags.request();
      req.prompt_text = prompt;
      req.target_emotion = flag_emotion(emotion, "--emotion");
      if (!prompt_emotion.empty()) req.prompt_emotion = flag_emotion(prompt_emotion, "--prompt-emotion");
      req.seed = gen_seed;
      req.validate();
      auto a = load_model_dir(model_dir, which, req.mmi_weight < 1.0);
      if (req.mmi_weight < 1.0 && !a.backward) err << "no backward model in " << model_dir << "; ranking by forward score\n";
      ModelGenerator g(std::move(a.forward), std::move(a.backward), std::move(a.vocab));
      const auto result = g.respond(req);
      if (result.prompt_truncated) err << "prompt truncated to fit the context window\n";
      out << result.candidates.front().response_text << '\n';
      if (verbose) {
        out << "\nrank  score       forward     backward    eos  text\n" << std::fixed << std::setprecision(4);
        for (std::size_t i = 0; i < result.candidates.size(); ++i) {
          const auto& c = result.candidates[i];
          out << std::left << std::setw(6) << i + 1 << std::setw(12) << c.score.value_or(c.forward_logprob)
              << std::setw(12) << c.forward_logprob << std::setw(12);
          if (c.backward_logprob) {
            out << *c.backward_logprob;
          } else {
            out << "-";
          }
          out << std::setw(5) << (c.terminated_by_eos ? "yes" : "no") << c.response_text << '\n';
        }
        out << std::defaultfloat << std::right;
      }
      return kExitOk;
    }

    if (sub == eval_cmd) {
      require(eval_model, "--model");
      require(oracle_path, "--oracle");
      require(prompts_path, "--prompts");
      require(eval_out, "--out");
      ProtocolOptions po;
      po.n_per_emotion = n_per_emotion;
      po.seed = eval_seed;
      po.base = eval_flags.request();
      const auto oracle = ClassifierModel::load(oracle_path);
      const auto prompts = read_prompt_lines(prompts_path);
      std::unique_ptr<Generator> g;
      if (generator_kind == "model") {
        auto a = load_model_dir(eval_model, eval_which, po.base.mmi_weight < 1.0);
        g = std::make_unique<ModelGenerator>(std::move(a.forward), std::move(a.backward), std::move(a.vocab));
      } else if (generator_kind == "random") {
        g = std::make_unique<RandomTokenGenerator>(Vocabulary::load((std::filesystem::path(eval_model) / kVocabFile).string()));
      } else {
        throw std::invalid_argument("unknown generator '" + generator_kind + "'");
      }
      const auto report = run_protocol(*g, prompts, oracle, po);
      const std::filesystem::path dir(eval_out);
      std::filesystem::create_directories(dir);
      write_text(dir / kConfigFile, resolved_config(*sub));
      emit_report(report, dir);
      print_report_table(report, out);
      out << "wrote report to " << dir.string() << '\n';
      return kExitOk;
    }

    if (sub == serve_cmd) {
      require(serve_model, "--model");
      require(serve_oracle, "--oracle");
      ServiceConfig sc;
      sc.defaults = serve_flags.request();
      sc.ttl = std::chrono::seconds(ttl);
      if (busy == "serialize") {
        sc.busy = BusyPolicy::serialize;
      } else if (busy == "reject") {
        sc.busy = BusyPolicy::reject;
      } else {
        throw std::invalid_argument("busy policy must be 'serialize' or 'reject'");
      }
      if (!persist.empty()) sc.persist_path = persist;
      auto a = load_model_dir(serve_model, serve_which, sc.defaults.mmi_weight < 1.0);
      auto g = std::make_shared<ModelGenerator>(std::move(a.forward), std::move(a.backward), std::move(a.vocab));
      auto oracle = std::make_shared<ClassifierModel>(ClassifierModel::load(serve_oracle));
      ChatService service(g, oracle, sc);
      httplib::Server server;
      std::optional<std::filesystem::path> static_path;
      if (!static_dir.empty()) static_path = static_dir;
      install_routes(server, service, static_path);
      g_server = &server;
      std::signal(SIGINT, [](int) {
        if (g_server) g_server->stop();
      });
      out << "serving model " << g->model_hash() << " on http://" << host << ':' << port << '\n' << std::flush;
      const bool ok = server.listen(host, port);
      g_server = nullptr;
      if (!ok) throw RuntimeFailure("cannot listen on " + host + ":" + std::to_string(port));
      return kExitOk;
    }
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "runtime failure: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace emogen
