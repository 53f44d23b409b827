// SPDX-License-Identifier: Apache-2.0
//
// Adversarial softmax over output embeddings.
//
// The worst-case perturbation of the target embedding w_i inside an
// eps-ball is -eps * h / |h|, which lowers the target logit by eps * |h| and
// leaves every competitor logit unchanged. Training uses that closed form
// with |h| (and, in adaptive mode, |w_i|) treated as constants.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "advlm/error.hpp"
#include "advlm/model.hpp"
#include "advlm/tensor.hpp"

namespace advlm {

enum class AdvMode { kOff, kFixed, kAdaptive };

struct AdvConfig {
  AdvMode mode = AdvMode::kOff;
  double value = 0.0;  // eps for kFixed, alpha for kAdaptive

  static AdvConfig off() { return {}; }
  static AdvConfig fixed(double eps) { return {AdvMode::kFixed, eps}; }
  static AdvConfig adaptive(double alpha) { return {AdvMode::kAdaptive, alpha}; }

  void validate() const {
    if (mode != AdvMode::kOff && !(value >= 0.0 && std::isfinite(value))) {
      throw ConfigError("adv: magnitude must be a finite non-negative number");
    }
  }

  /// "off", "fixed:<eps>" or "adaptive:<alpha>".
  static AdvConfig parse(const std::string& text) {
    if (text == "off") return off();
    const auto colon = text.find(':');
    if (colon == std::string::npos) throw ConfigError("adv: expected off, fixed:<eps> or adaptive:<alpha>, got '" + text + "'");
    const std::string kind = text.substr(0, colon);
    const std::string num = text.substr(colon + 1);
    double v = 0.0;
    try {
      std::size_t used = 0;
      v = std::stod(num, &used);
      if (used != num.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ConfigError("adv: bad number '" + num + "'");
    }
    AdvConfig c;
    if (kind == "fixed") {
      c = fixed(v);
    } else if (kind == "adaptive") {
      c = adaptive(v);
    } else {
      throw ConfigError("adv: unknown mode '" + kind + "'");
    }
    c.validate();
    return c;
  }

  std::string to_string() const {
    std::ostringstream os;
    os.precision(17);
    switch (mode) {
      case AdvMode::kOff: return "off";
      case AdvMode::kFixed: os << "fixed:" << value; break;
      case AdvMode::kAdaptive: os << "adaptive:" << value; break;
    }
    return os.str();
  }

  bool operator==(const AdvConfig&) const = default;
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline std::span<const double> row(const Tensor& m, std::size_t i) {
  return m.values().subspan(i * m.dim(1), m.dim(1));
}

inline void check_instance(std::size_t i, const Tensor& w, std::span<const double> h, const char* op) {
  if (w.rank() != 2) throw DimensionError(std::string(op) + ": embedding must be a matrix, got " + to_string(w.shape()));
  if (h.size() != w.dim(1)) {
    throw DimensionError(std::string(op) + ": context of size " + std::to_string(h.size()) + " vs embedding " +
                         to_string(w.shape()));
  }
  if (i >= w.dim(0)) {
    throw IndexError(std::string(op) + ": word " + std::to_string(i) + " out of range [0, " +
                     std::to_string(w.dim(0)) + ")");
  }
}

}  // namespace detail

/// argmin over |delta| <= eps of (w + delta)^T h, i.e. -eps * h / |h|. Zero
/// when h == 0 (every delta is a minimizer there).
inline std::vector<double> optimal_perturbation(std::span<const double> h, double eps) {
  std::vector<double> out(h.size(), 0.0);
  const double n = detail::norm(h);
  if (n == 0.0 || eps == 0.0) return out;
  for (std::size_t k = 0; k < h.size(); ++k) out[k] = -eps * h[k] / n;
  return out;
}

/// log softmax of entry i after lowering logit i by `offset`, evaluated with a
/// max-shifted log-sum-exp.
inline double advsoft_log_prob_from_logits(std::size_t i, std::span<const double> logits, double offset) {
  if (i >= logits.size()) {
    throw IndexError("advsoft_prob: word " + std::to_string(i) + " out of range [0, " +
                     std::to_string(logits.size()) + ")");
  }
  std::vector<double> z(logits.begin(), logits.end());
  z[i] -= offset;
  return z[i] - kernel::log_sum_exp(z);
}

/// log of the adversarial softmax probability of word i under context h:
/// (w_i.h - eps|h|) - log(exp(w_i.h - eps|h|) + sum_{j != i} exp(w_j.h)).
inline double advsoft_log_prob(std::size_t i, const Tensor& w, std::span<const double> h, double eps) {
  detail::check_instance(i, w, h, "advsoft_prob");
  const std::size_t v = w.dim(0);
  std::vector<double> logits(v);
  for (std::size_t j = 0; j < v; ++j) logits[j] = detail::dot(detail::row(w, j), h);
  return advsoft_log_prob_from_logits(i, logits, eps * detail::norm(h));
}

inline double advsoft_prob(std::size_t i, const Tensor& w, std::span<const double> h, double eps) {
  return std::exp(advsoft_log_prob(i, w, h, eps));
}

inline double softmax_prob(std::size_t i, const Tensor& w, std::span<const double> h) {
  return advsoft_prob(i, w, h, 0.0);
}

struct BruteForceResult {
  double minimum = 0.0;       // smallest probability found over every candidate
  double analytic = 0.0;      // value at the closed-form single-word candidate
  double best_all_words = 0.0;   // best sampled set with |delta_j| <= eps/2 for all j
  double best_single_word = 0.0; // best sampled delta_i with |delta_i| <= eps
};

namespace detail {

/// Plain softmax of word i with each row of `w` shifted by the matching row of
/// `delta` (a V x d array). Deliberately independent of advsoft_log_prob.
inline double perturbed_softmax(std::size_t i, const Tensor& w, const std::vector<double>& delta,
                                std::span<const double> h) {
  const std::size_t v = w.dim(0), d = w.dim(1);
  std::vector<double> z(v);
  for (std::size_t j = 0; j < v; ++j) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += (w[j * d + k] + delta[j * d + k]) * h[k];
    z[j] = s;
  }
  const double mx = *std::max_element(z.begin(), z.end());
  double denom = 0.0;
  for (double x : z) denom += std::exp(x - mx);
  return std::exp(z[i] - mx) / denom;
}

/// Uniform point in the d-ball of radius r; on the sphere when `surface`.
inline void sample_ball(std::span<double> out, double r, bool surface, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  double n = 0.0;
  do {
    n = 0.0;
    for (auto& x : out) {
      x = g(rng);
      n += x * x;
    }
  } while (n == 0.0);
  n = std::sqrt(n);
  double radius = r;
  if (!surface) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    radius *= std::pow(u(rng), 1.0 / static_cast<double>(out.size()));
  }
  for (auto& x : out) x *= radius / n;
}

}  // namespace detail

/// Minimizes the perturbed softmax of word i by enumeration: the closed-form
/// candidate, `num_samples` random perturbation sets on all words with radius
/// eps/2 each, and `num_samples` random single-word perturbations of radius
/// eps. Half of each batch of samples is drawn on the sphere surface.
inline BruteForceResult brute_force_advsoft(std::size_t i, const Tensor& w, std::span<const double> h, double eps,
                                            std::size_t num_samples, std::mt19937_64& rng) {
  detail::check_instance(i, w, h, "brute_force_advsoft");
  if (num_samples == 0) throw ContractError("brute_force_advsoft: num_samples must be at least 1");
  const std::size_t v = w.dim(0), d = w.dim(1);
  std::vector<double> delta(v * d, 0.0);

  BruteForceResult r;
  const auto star = optimal_perturbation(h, eps);
  std::copy(star.begin(), star.end(), delta.begin() + static_cast<std::ptrdiff_t>(i * d));
  r.analytic = detail::perturbed_softmax(i, w, delta, h);

  r.best_all_words = std::numeric_limits<double>::infinity();
  r.best_single_word = std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < num_samples; ++s) {
    const bool surface = s % 2 == 0;
    for (std::size_t j = 0; j < v; ++j)
      detail::sample_ball(std::span<double>(delta).subspan(j * d, d), eps / 2.0, surface, rng);
    r.best_all_words = std::min(r.best_all_words, detail::perturbed_softmax(i, w, delta, h));

    std::fill(delta.begin(), delta.end(), 0.0);
    detail::sample_ball(std::span<double>(delta).subspan(i * d, d), eps, surface, rng);
    r.best_single_word = std::min(r.best_single_word, detail::perturbed_softmax(i, w, delta, h));
  }
  r.minimum = std::min({r.analytic, r.best_all_words, r.best_single_word});
  return r;
}

/// off -> 0; fixed(eps) -> eps; adaptive(alpha) -> alpha * |w_target|.
inline double epsilon_for_target(const AdvConfig& config, std::span<const double> w_target) {
  switch (config.mode) {
    case AdvMode::kOff: return 0.0;
    case AdvMode::kFixed: return config.value;
    case AdvMode::kAdaptive: return config.value * detail::norm(w_target);
  }
  return 0.0;
}

struct AdvLossBatch {
  Tensor total_nll;  // scalar, sum over positions
  std::size_t token_count = 0;
  std::vector<double> epsilons;  // per position
};

/// Whether the eps*|h| offset participates in backprop. Training always uses
/// kStopped; kPropagated exists to compare against the full gradient.
enum class NormGradient { kStopped, kPropagated };

/// Sum over positions of -log AdvSoft. Row r of `contexts` is the context for
/// `targets[r]`; the target logit is lowered by eps_r * |h_r| and all
/// competitor logits are the plain w_j.h.
inline AdvLossBatch adv_nll_loss(Tape& tape, const Tensor& embedding, const Tensor& contexts,
                                 std::span<const TokenId> targets, const AdvConfig& config,
                                 NormGradient norm_gradient = NormGradient::kStopped) {
  config.validate();
  if (contexts.rank() != 2 || contexts.dim(1) != embedding.dim(1) || contexts.dim(0) != targets.size()) {
    throw DimensionError("adv_nll_loss: contexts " + to_string(contexts.shape()) + ", embedding " +
                         to_string(embedding.shape()) + ", " + std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = targets.size();
  AdvLossBatch out;
  out.token_count = n;
  out.epsilons.assign(n, 0.0);

  Tensor logits = tape.matmul_bt(contexts, embedding);
  if (config.mode != AdvMode::kOff) {
    for (std::size_t r = 0; r < n; ++r) {
      if (targets[r] >= embedding.dim(0)) {
        throw IndexError("adv_nll_loss: target " + std::to_string(targets[r]) + " out of range");
      }
      out.epsilons[r] = epsilon_for_target(config, detail::row(embedding, targets[r]));
    }
    Tensor norms = tape.l2_norm(contexts);
    if (norm_gradient == NormGradient::kStopped) norms = Tape::detach(norms);
    logits = tape.offset_at(logits, targets, tape.mul(Tensor::vector(out.epsilons), norms));
  }
  Tensor per_position = tape.sub(tape.log_sum_exp(logits), tape.pick(logits, targets));
  out.total_nll = tape.sum(per_position);
  if (!std::isfinite(out.total_nll.item())) {
    std::size_t bad = 0;
    while (bad < n && std::isfinite(per_position[bad])) ++bad;
    throw NumericError("adv_nll_loss: non-finite loss at batch position " + std::to_string(bad));
  }
  return out;
}

}  // namespace advlm
