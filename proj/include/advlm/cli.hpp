// SPDX-License-Identifier: Apache-2.0
//
// `advlm` subcommands: train, eval, analyze, verify.
// Exit codes: 0 ok, 1 verify found a failing suite, 2 config, 3 numeric,
// 4 I/O or format.

#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "advlm/analysis.hpp"
#include "advlm/config.hpp"
#include "advlm/corpus.hpp"
#include "advlm/io.hpp"
#include "advlm/model.hpp"
#include "advlm/train.hpp"
#include "advlm/verify.hpp"

namespace advlm::cli {

enum ExitCode : int { kOk = 0, kVerifyFailed = 1, kConfig = 2, kNumeric = 3, kIo = 4 };

namespace detail {

inline std::string required_path(const Settings& s, const std::string& key) {
  const auto& p = s.get(key);
  if (p.empty()) throw ConfigError("'" + key + "' is required");
  return p;
}

/// Splits a token stream (one <eos> per line) so the last `fraction` of the
/// lines become the second part.
inline std::pair<std::vector<std::string>, std::vector<std::string>> split_tail(const std::vector<std::string>& tokens,
                                                                                double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("valid_fraction must be in (0, 1)");
  std::size_t lines = 0;
  for (const auto& t : tokens) lines += t == kEosToken;
  const auto held = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(lines)));
  if (held == 0 || held >= lines) throw ConfigError("corpus too short to hold out a validation split");
  const std::size_t keep = lines - held;
  std::size_t seen = 0, cut = 0;
  while (cut < tokens.size() && seen < keep) seen += tokens[cut++] == kEosToken;
  return {std::vector<std::string>(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(cut)),
          std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(cut), tokens.end())};
}

inline Checkpoint load_model(const Settings& s, Vocab& vocab) {
  auto ck = load_checkpoint(s.get("checkpoint"));
  vocab = Vocab::load(s.get("vocab"));
  if (vocab.size() != ck.config.vocab_size) {
    throw FormatError("vocab " + s.get("vocab") + " has " + std::to_string(vocab.size()) + " entries but checkpoint expects " +
                      std::to_string(ck.config.vocab_size));
  }
  return ck;
}

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace detail

inline int cmd_train(const Settings& s, std::ostream& out) {
  auto tokens = read_corpus(detail::required_path(s, "corpus"));
  std::vector<std::string> train_tokens, valid_tokens;
  if (s.get("valid_corpus").empty()) {
    std::tie(train_tokens, valid_tokens) = detail::split_tail(tokens, s.get_double("valid_fraction"));
  } else {
    train_tokens = std::move(tokens);
    valid_tokens = read_corpus(s.get("valid_corpus"));
  }
  const auto vocab = build_vocab(train_tokens, s.get_uint("min_count"));
  const auto model = lm_config_from(s, vocab.size());
  const auto config = train_config_from(s);
  const std::filesystem::path dir = s.get("out_dir");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw FormatError("cannot create " + dir.string() + ": " + ec.message());

  out << "vocab " << vocab.size() << ", train tokens " << train_tokens.size() << ", valid tokens "
      << valid_tokens.size() << "\n";
  auto result = run_training(model, config, vocab.encode(train_tokens), vocab.encode(valid_tokens),
                             [&](const EpochRecord& r) {
                               out << "epoch " << r.epoch << " train_ppl=" << detail::fmt("%.4f", r.train_ppl)
                                   << " valid_ppl=" << detail::fmt("%.4f", r.valid_ppl)
                                   << " noise=" << detail::fmt("%.4g", r.noise_std)
                                   << " mean_eps=" << detail::fmt("%.4g", r.mean_eps)
                                   << " wall_s=" << detail::fmt("%.2f", r.wall_s) << std::endl;
                             });
  save_checkpoint(dir / "model.ckpt", model, result.params);
  vocab.save(dir / "vocab.tsv");
  atomic_write(dir / "train_log.csv", result.log.to_csv());
  atomic_write(dir / "config.txt", s.serialize());
  out << "wrote " << (dir / "model.ckpt").string() << ", vocab.tsv, train_log.csv, config.txt\n";
  return kOk;
}

inline int cmd_eval(const Settings& s, std::ostream& out) {
  Vocab vocab;
  auto ck = detail::load_model(s, vocab);
  auto ids = vocab.encode(read_corpus(detail::required_path(s, "corpus")));
  auto stream = batchify(ids, s.get_uint("batch_size"), s.get_uint("bptt_len"));
  out << "perplexity=" << detail::fmt("%.6g", evaluate(ck.config, ck.params, stream)) << "\n";
  return kOk;
}

inline int cmd_analyze(const Settings& s, std::ostream& out) {
  Vocab vocab;
  auto ck = detail::load_model(s, vocab);
  std::vector<std::vector<double>> contexts;
  if (!s.get("corpus").empty()) {
    auto ids = vocab.encode(read_corpus(s.get("corpus")));
    auto stream = batchify(ids, s.get_uint("batch_size"), s.get_uint("bptt_len"));
    evaluate_nll(ck.config, ck.params, stream, &contexts, s.get_uint("max_contexts"));
  }
  ProbeOptions opt;
  const auto radius = s.get_adv("radius");
  if (radius.mode == AdvMode::kAdaptive) opt.alpha = radius.value;
  if (radius.mode == AdvMode::kFixed) opt.epsilon = radius.value;
  opt.random_probes = s.get_uint("random_probes");
  opt.seed = s.get_uint("seed");
  const auto report = analyze_embeddings(ck.params.embedding, contexts, opt);

  const std::filesystem::path dir = s.get("out_dir");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw FormatError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<std::string> words;
  for (TokenId i = 0; i < vocab.size(); ++i) words.push_back(vocab.token(i));
  atomic_write(dir / "report.json", report.to_json().dump(2) + "\n");
  atomic_write(dir / "nn_distances.csv", nn_distance_csv(words, report.nn_distances));
  out << "median_nn_distance=" << detail::fmt("%.6g", report.median_nn())
      << " sv_entropy=" << detail::fmt("%.6g", report.sv_entropy)
      << " recognized=" << report.recognized_words.size() << " probes=" << contexts.size() + opt.random_probes
      << " violations=" << report.separation_violations << "\n";
  out << "wrote " << (dir / "report.json").string() << ", nn_distances.csv\n";
  return kOk;
}

inline int cmd_verify(const Settings& s, std::ostream& out) {
  const std::uint64_t seed = s.get_uint("seed");
  const std::size_t div = s.get_bool("quick") ? 10 : 1;
  std::vector<verify::CheckResult> results;
  results.push_back(verify::gradient_correctness(100 / div, seed));
  results.push_back(verify::closed_form_oracle(1000 / div, 10000 / div, seed + 1));
  results.push_back(verify::reductions_and_monotonicity(2000 / div, seed + 2));
  results.push_back(verify::separation_suite(10000 / div, seed + 3));
  results.push_back(verify::energy_bound_suite(10000 / div, seed + 4));
  {
    std::mt19937_64 rng(seed);
    std::vector<TokenId> ids(5000);
    for (auto& x : ids) x = std::uniform_int_distribution<TokenId>(0, 49)(rng);
    results.push_back(verify::uniform_model_identity(50, ids));
  }
  bool ok = true;
  for (const auto& r : results) {
    ok = ok && r.passed;
    out << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << detail::fmt(" (%.2fs)", r.seconds) << "\n";
  }
  return ok ? kOk : kVerifyFailed;
}

/// Parses argv, layers defaults < ADVLM_SEED < --config file < flags, and
/// dispatches. Errors are reported on `err` and mapped to exit codes.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"advlm: word-level LSTM language models with adversarial softmax training"};
  app.require_subcommand(1);

  struct Command {
    CLI::App* app;
    std::vector<KeySpec> keys;
    int (*run)(const Settings&, std::ostream&);
    std::map<std::string, std::string> flags;
    std::string config_path;
    bool print_config = false;
  };
  std::vector<Command> commands;
  commands.push_back({app.add_subcommand("train", "train a model; writes model.ckpt, vocab.tsv, train_log.csv"),
                      train_keys(), cmd_train, {}, {}, false});
  commands.push_back({app.add_subcommand("eval", "print perplexity=<value> of a checkpoint on a corpus"), eval_keys(),
                      cmd_eval, {}, {}, false});
  commands.push_back({app.add_subcommand("analyze", "write an embedding diversity report"), analyze_keys(),
                      cmd_analyze, {}, {}, false});
  commands.push_back({app.add_subcommand("verify", "run the gradient and adversarial-softmax property suites"),
                      verify_keys(), cmd_verify, {}, {}, false});
  for (auto& c : commands) {
    c.app->add_option("--config", c.config_path, "flat 'key = value' file; flags override it");
    c.app->add_flag("--print-config", c.print_config, "print the resolved configuration and exit");
    for (const auto& k : c.keys) {
      c.app->add_option("--" + k.name, c.flags[k.name], k.help + " [default: " +
                                                            (k.default_value.empty() ? "none" : k.default_value) + "]");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      // subcommand --help
      for (auto& c : commands) {
        if (c.app->parsed()) {
          out << c.app->help();
          return kOk;
        }
      }
      out << app.help();
      return kOk;
    }
    err << "error: " << e.what() << "\n";
    return kConfig;
  }

  for (auto& c : commands) {
    if (!c.app->parsed()) continue;
    try {
      Settings s(c.keys);
      if (const char* env = std::getenv("ADVLM_SEED"); env && s.has_key("seed")) s.set("seed", env);
      if (!c.config_path.empty()) s.merge_text(read_file(c.config_path), c.config_path);
      for (const auto& k : c.keys) {
        if (c.app->get_option("--" + k.name)->count() > 0) s.set(k.name, c.flags[k.name]);
      }
      if (c.print_config) {
        out << s.serialize();
        return kOk;
      }
      return c.run(s, out);
    } catch (const ConfigError& e) {
      err << "config error: " << e.what() << "\n";
      return kConfig;
    } catch (const NumericError& e) {
      err << "numeric error: " << e.what() << "\n";
      return kNumeric;
    } catch (const FormatError& e) {
      err << "format error: " << e.what() << "\n";
      return kIo;
    } catch (const IngestionError& e) {
      err << "input error: " << e.what() << "\n";
      return kIo;
    } catch (const EvaluationError& e) {
      err << "evaluation error: " << e.what() << "\n";
      return kIo;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << "\n";
      return kIo;
    }
  }
  return kConfig;
}

}  // namespace advlm::cli
