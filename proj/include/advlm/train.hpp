// SPDX-License-Identifier: Apache-2.0
//
// Adversarial MLE training loop: per window, run the LSTM, lower each target
// logit by the closed-form worst case, and take a clipped SGD step.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "advlm/advsoft.hpp"
#include "advlm/corpus.hpp"
#include "advlm/error.hpp"
#include "advlm/model.hpp"
#include "advlm/tensor.hpp"

namespace advlm {

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 20;
  std::size_t bptt_len = 35;
  double learning_rate = 4.0;
  double grad_clip = 0.25;
  std::uint64_t seed = 1;
  AdvConfig adv = AdvConfig::adaptive(0.005);
  double input_noise_start = 0.2;
  double input_noise_end = 0.0;
  std::size_t eval_interval = 1;
  std::size_t eval_batch_size = 10;

  void validate() const {
    if (batch_size == 0 || bptt_len == 0 || eval_batch_size == 0) {
      throw ConfigError("train: batch_size, bptt_len and eval_batch_size must be positive");
    }
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("train: learning_rate must be >= 0");
    if (!(grad_clip > 0.0)) throw ConfigError("train: grad_clip must be positive");
    if (!(input_noise_start >= input_noise_end && input_noise_end >= 0.0) || !std::isfinite(input_noise_start)) {
      throw ConfigError("train: need input_noise_start >= input_noise_end >= 0");
    }
    if (eval_interval == 0) throw ConfigError("train: eval_interval must be positive");
    adv.validate();
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_ppl = 0.0;
  double valid_ppl = std::numeric_limits<double>::quiet_NaN();
  double wall_s = 0.0;
  double noise_std = 0.0;
  double mean_eps = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;

  std::string to_csv() const {
    std::string out = "epoch,train_ppl,valid_ppl,wall_s,noise_std,mean_eps\n";
    char buf[256];
    for (const auto& r : epochs) {
      std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.train_ppl, r.valid_ppl, r.wall_s,
                    r.noise_std, r.mean_eps);
      out += buf;
    }
    return out;
  }
};

/// Linear anneal from `start` at epoch 0 to `end` at the last epoch.
inline double noise_schedule(std::size_t epoch, std::size_t total_epochs, double start, double end) {
  if (total_epochs <= 1) return start;
  const double frac = static_cast<double>(epoch) / static_cast<double>(total_epochs - 1);
  return start + (end - start) * frac;
}

/// Global-norm clipping to `grad_clip`, then p -= lr * g for every tensor;
/// gradients are cleared afterwards. Returns the pre-clip gradient norm. A
/// non-finite gradient aborts the step with parameters untouched.
inline double sgd_step(std::span<Tensor> params, double learning_rate, double grad_clip) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("sgd_step: non-finite gradient norm");
  const double scale = norm > grad_clip ? grad_clip / norm : 1.0;
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    auto v = p.mutable_values();
    auto g = p.grad();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= learning_rate * scale * g[i];
    p.zero_grad();
  }
  return norm;
}

inline double sgd_step(LMParams& params, double learning_rate, double grad_clip) {
  auto ts = params.tensors();
  return sgd_step(std::span<Tensor>(ts), learning_rate, grad_clip);
}

struct EpochStats {
  double nll_sum = 0.0;
  std::size_t token_count = 0;
  double eps_sum = 0.0;

  double perplexity() const { return std::exp(nll_sum / static_cast<double>(token_count)); }
  double mean_eps() const { return token_count ? eps_sum / static_cast<double>(token_count) : 0.0; }
};

/// One pass over every window of `stream`, starting from a zero state.
/// `epoch` is 0-based and selects the input-noise level.
inline EpochStats train_epoch(const LMConfig& model, LMParams& params, BatchStream& stream, const TrainConfig& config,
                              std::size_t epoch, std::mt19937_64& rng) {
  const double noise =
      noise_schedule(epoch, config.epochs, config.input_noise_start, config.input_noise_end);
  stream.rewind();
  HiddenState state = zero_state(model, stream.batch_size());
  EpochStats stats;
  Window w;
  std::size_t k = 0;
  while (stream.next(w)) {
    try {
      Tape tape;
      auto fwd = forward(tape, model, params, w.inputs, w.len, w.batch, state, noise, rng);
      auto loss = adv_nll_loss(tape, params.embedding, fwd.contexts, w.targets, config.adv);
      auto mean = tape.scale(loss.total_nll, 1.0 / static_cast<double>(loss.token_count));
      tape.backward(mean);
      sgd_step(params, config.learning_rate, config.grad_clip);
      stats.nll_sum += loss.total_nll.item();
      stats.token_count += loss.token_count;
      for (double e : loss.epsilons) stats.eps_sum += e;
      state = detach_state(fwd.state);
    } catch (const NumericError& e) {
      params.zero_grad();
      throw NumericError("epoch " + std::to_string(epoch + 1) + ", window " + std::to_string(k) + ": " + e.what());
    }
    ++k;
  }
  return stats;
}

/// Plain-softmax evaluation (no adversarial offset, no input noise, nothing
/// recorded), carrying the hidden state across windows.
inline EpochStats evaluate_nll(const LMConfig& model, const LMParams& params, BatchStream& stream,
                               std::vector<std::vector<double>>* contexts = nullptr,
                               std::size_t max_contexts = 0) {
  if (stream.window_count() == 0) throw EvaluationError("evaluate: stream has no complete window");
  stream.rewind();
  HiddenState state = zero_state(model, stream.batch_size());
  std::mt19937_64 unused(0);
  EpochStats stats;
  Window w;
  while (stream.next(w)) {
    Tape tape(false);
    auto fwd = forward(tape, model, params, w.inputs, w.len, w.batch, state, 0.0, unused);
    auto loss = adv_nll_loss(tape, params.embedding, fwd.contexts, w.targets, AdvConfig::off());
    stats.nll_sum += loss.total_nll.item();
    stats.token_count += loss.token_count;
    state = fwd.state;
    if (contexts) {
      const std::size_t d = fwd.contexts.dim(1);
      for (std::size_t r = 0; r < fwd.contexts.dim(0) && contexts->size() < max_contexts; ++r) {
        auto row = fwd.contexts.values().subspan(r * d, d);
        contexts->emplace_back(row.begin(), row.end());
      }
    }
  }
  return stats;
}

inline double evaluate(const LMConfig& model, const LMParams& params, BatchStream& stream) {
  return evaluate_nll(model, params, stream).perplexity();
}

struct TrainResult {
  LMParams params;
  TrainLog log;
};

/// Full run: init from `config.seed`, then `config.epochs` epochs, logging
/// validation perplexity every `eval_interval` epochs and at the last one.
/// `on_epoch` (optional) sees each record as it is produced.
inline TrainResult run_training(const LMConfig& model, const TrainConfig& config, const std::vector<TokenId>& train_ids,
                                const std::vector<TokenId>& valid_ids,
                                const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  model.validate();
  config.validate();
  std::mt19937_64 rng(config.seed);
  TrainResult out{init_params(model, config.seed), {}};
  BatchStream train = batchify(train_ids, config.batch_size, config.bptt_len);
  BatchStream valid = batchify(valid_ids, config.eval_batch_size, config.bptt_len);
  for (std::size_t e = 0; e < config.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    auto stats = train_epoch(model, out.params, train, config, e, rng);
    EpochRecord rec;
    rec.epoch = e + 1;
    rec.train_ppl = stats.perplexity();
    rec.noise_std = noise_schedule(e, config.epochs, config.input_noise_start, config.input_noise_end);
    rec.mean_eps = stats.mean_eps();
    if ((e + 1) % config.eval_interval == 0 || e + 1 == config.epochs) rec.valid_ppl = evaluate(model, out.params, valid);
    rec.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!std::isfinite(rec.train_ppl)) throw NumericError("epoch " + std::to_string(e + 1) + ": training perplexity overflowed");
    out.log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return out;
}

}  // namespace advlm
