// SPDX-License-Identifier: Apache-2.0
//
// Property suites shared by `advlm verify` and the acceptance binary. Each
// returns a single pass/fail with a short summary of what was measured.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "advlm/advsoft.hpp"
#include "advlm/analysis.hpp"
#include "advlm/gradcheck.hpp"
#include "advlm/model.hpp"
#include "advlm/train.hpp"

namespace advlm::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

namespace detail {

inline std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

inline CheckResult timed(std::string name, const std::function<CheckResult()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r;
  try {
    r = body();
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.name = std::move(name);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline std::vector<double> uniform_vec(std::size_t d, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(d);
  for (auto& x : v) x = u(rng);
  return v;
}

inline double vnorm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace detail

inline const std::vector<std::string>& op_names() {
  static const std::vector<std::string> names{
      "add",     "sub",         "mul",     "scale",     "tanh",       "sigmoid",     "exp",
      "log",     "matmul",      "matmul_bt", "add_bias", "sum",        "log_sum_exp", "log_sum_exp_vec",
      "l2_norm", "l2_norm_vec", "pick",    "offset_at", "gather_rows", "slice_rows", "slice_cols",
      "concat_rows"};
  return names;
}

/// Worst relative FD error of one op over `trials` random instances.
inline double op_gradient_error(const std::string& op, std::size_t trials, std::uint64_t seed) {
  using gradcheck::numeric_grad;
  using gradcheck::random_tensor;
  using gradcheck::rel_err;
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({3, 4}, rng);
    auto c = random_tensor({4, 2}, rng);
    auto bias = random_tensor({4}, rng);
    auto off = random_tensor({3}, rng);
    auto vec = random_tensor({5}, rng);
    std::vector<TokenId> ids{1, 3, 0};
    std::vector<TokenId> rows{2, 0, 2, 1};
    auto f = [&](Tape& t) -> Tensor {
      if (op == "add") return t.sum(t.tanh(t.add(a, b)));
      if (op == "sub") return t.sum(t.tanh(t.sub(a, b)));
      if (op == "mul") return t.sum(t.mul(a, b));
      if (op == "scale") return t.sum(t.tanh(t.scale(a, -1.7)));
      if (op == "tanh") return t.sum(t.mul(t.tanh(a), b));
      if (op == "sigmoid") return t.sum(t.mul(t.sigmoid(a), b));
      if (op == "exp") return t.sum(t.mul(t.exp(a), b));
      if (op == "log") return t.sum(t.mul(t.log(t.exp(a)), b));
      if (op == "matmul") return t.sum(t.tanh(t.matmul(a, c)));
      if (op == "matmul_bt") return t.sum(t.tanh(t.matmul_bt(a, b)));
      if (op == "add_bias") return t.sum(t.tanh(t.add_bias(a, bias)));
      if (op == "sum") return t.sum(t.mul(t.tanh(a), a));
      if (op == "log_sum_exp") return t.sum(t.mul(t.log_sum_exp(a), off));
      if (op == "log_sum_exp_vec") return t.log_sum_exp(vec);
      if (op == "l2_norm") return t.sum(t.mul(t.l2_norm(a), off));
      if (op == "l2_norm_vec") return t.l2_norm(vec);
      if (op == "pick") return t.sum(t.mul(t.pick(a, ids), off));
      if (op == "offset_at") return t.sum(t.log_sum_exp(t.offset_at(a, ids, off)));
      if (op == "gather_rows") return t.sum(t.tanh(t.gather_rows(t.matmul(a, c), rows)));
      if (op == "slice_rows") return t.sum(t.tanh(t.slice_rows(t.mul(a, b), 1, 2)));
      if (op == "slice_cols") return t.sum(t.tanh(t.slice_cols(t.mul(a, b), 1, 2)));
      if (op == "concat_rows") {
        std::vector<Tensor> parts{t.tanh(a), t.mul(a, b), t.slice_rows(b, 0, 1)};
        return t.sum(t.tanh(t.concat_rows(parts)));
      }
      throw ContractError("op_gradient_error: unknown op " + op);
    };
    Tape tape;
    tape.backward(f(tape));
    for (Tensor* x : {&a, &b, &c, &bias, &off, &vec}) {
      auto g = numeric_grad(*x, [&] {
        Tape t(false);
        return f(t).item();
      });
      const auto analytic = x->has_grad() ? std::vector<double>(x->grad().begin(), x->grad().end())
                                          : std::vector<double>(x->size(), 0.0);
      worst = std::max(worst, rel_err(analytic, g));
      x->zero_grad();
    }
  }
  return worst;
}

/// Worst relative FD error of the full language-model loss over random small
/// models. Cycles through the plain objective and two fixed radii; the
/// adversarial ones propagate through |h| so the objective is a true function
/// of the parameters. (The adaptive radius is a constant per batch and has no
/// such objective to difference.)
inline double model_gradient_error(std::size_t instances, std::uint64_t seed) {
  using gradcheck::numeric_grad;
  using gradcheck::rel_err;
  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  double worst = 0.0;
  for (std::size_t n = 0; n < instances; ++n) {
    LMConfig c;
    c.vocab_size = pick(3, 8);
    c.embed_dim = pick(2, 4);
    c.num_layers = pick(1, 2);
    c.hidden_dim = c.num_layers == 1 ? c.embed_dim : pick(2, 5);
    c.init_range = 0.5;
    auto p = init_params(c, rng());
    const std::size_t len = pick(1, 3), batch = pick(1, 2);
    std::vector<TokenId> in(len * batch), tgt(len * batch);
    for (auto& x : in) x = pick(0, c.vocab_size - 1);
    for (auto& x : tgt) x = pick(0, c.vocab_size - 1);
    const AdvConfig adv = n % 3 == 0 ? AdvConfig::off() : n % 3 == 1 ? AdvConfig::fixed(0.3) : AdvConfig::fixed(0.05);
    auto loss = [&](bool record) {
      Tape tape(record);
      std::mt19937_64 unused(0);
      auto fwd = forward(tape, c, p, in, len, batch, zero_state(c, batch), 0.0, unused);
      auto l = adv_nll_loss(tape, p.embedding, fwd.contexts, tgt, adv, NormGradient::kPropagated);
      if (record) tape.backward(l.total_nll);
      return l.total_nll.item();
    };
    p.zero_grad();
    loss(true);
    for (auto& t : p.tensors()) {
      auto g = numeric_grad(t, [&] { return loss(false); });
      worst = std::max(worst, rel_err(t.grad(), g));
    }
  }
  return worst;
}

/// Op-level FD < 1e-4 and model-level FD < 1e-3 on 100
/// instances each.
inline CheckResult gradient_correctness(std::size_t trials = 100, std::uint64_t seed = 1) {
  return detail::timed("gradient correctness", [&] {
    double op_worst = 0.0;
    std::string worst_op;
    for (std::size_t k = 0; k < op_names().size(); ++k) {
      const double e = op_gradient_error(op_names()[k], trials, seed + k);
      if (e > op_worst) {
        op_worst = e;
        worst_op = op_names()[k];
      }
    }
    const double model_worst = model_gradient_error(trials, seed + 100);
    CheckResult r;
    r.passed = op_worst < 1e-4 && model_worst < 1e-3;
    r.detail = std::to_string(op_names().size()) + " ops x " + std::to_string(trials) +
               detail::fmt(" trials, worst op rel err %.2e", op_worst) + " (" + worst_op + ")" +
               detail::fmt(", model rel err %.2e over %g models", model_worst, static_cast<double>(trials));
    return r;
  });
}

/// Closed form equals the enumerated minimum within 1e-9 and no
/// sampled perturbation goes below it.
inline CheckResult closed_form_oracle(std::size_t instances = 1000, std::size_t samples = 10000, std::uint64_t seed = 2) {
  return detail::timed("closed form vs brute force", [&] {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> vd(2, 10), dd(1, 8);
    std::uniform_real_distribution<double> ed(0.0, 1.0);
    double worst_gap = 0.0, worst_undercut = 0.0;
    std::size_t undercuts = 0;
    for (std::size_t n = 0; n < instances; ++n) {
      const std::size_t v = vd(rng), d = dd(rng);
      auto w = gradcheck::random_tensor({v, d}, rng, -1.0, 1.0, false);
      auto h = detail::uniform_vec(d, rng, -2.0, 2.0);
      const double eps = ed(rng);
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, v - 1)(rng);
      auto bf = brute_force_advsoft(i, w, h, eps, samples, rng);
      const double closed = advsoft_prob(i, w, h, eps);
      worst_gap = std::max(worst_gap, std::abs(bf.minimum - closed));
      const double under = closed - std::min(bf.best_all_words, bf.best_single_word);
      if (under > 1e-12) ++undercuts;
      worst_undercut = std::max(worst_undercut, under);
    }
    CheckResult r;
    r.passed = worst_gap < 1e-9 && undercuts == 0;
    r.detail = std::to_string(instances) + " instances x " + std::to_string(samples) +
               detail::fmt(" samples, max |min - closed| %.2e, largest undercut %.2e", worst_gap, worst_undercut) +
               ", undercutting instances " + std::to_string(undercuts);
    return r;
  });
}

/// Eps = 0 matches a textbook softmax within 1e-12 and the
/// adversarial probability is strictly decreasing in eps for |h| > 0.
inline CheckResult reductions_and_monotonicity(std::size_t instances = 2000, std::uint64_t seed = 3) {
  return detail::timed("eps=0 reduction and monotonicity", [&] {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> vd(2, 20), dd(1, 16);
    double worst = 0.0;
    std::size_t non_monotone = 0;
    for (std::size_t n = 0; n < instances; ++n) {
      const std::size_t v = vd(rng), d = dd(rng);
      auto w = gradcheck::random_tensor({v, d}, rng, -1.0, 1.0, false);
      auto h = detail::uniform_vec(d, rng, -1.0, 1.0);
      const std::size_t i = n % v;
      std::vector<double> e(v);
      double denom = 0.0;
      for (std::size_t j = 0; j < v; ++j) {
        double z = 0.0;
        for (std::size_t k = 0; k < d; ++k) z += w.at(j, k) * h[k];
        e[j] = std::exp(z);
        denom += e[j];
      }
      worst = std::max(worst, std::abs(advsoft_prob(i, w, h, 0.0) - e[i] / denom));
      double prev = advsoft_log_prob(i, w, h, 0.0);
      for (int g = 1; g <= 20; ++g) {
        const double cur = advsoft_log_prob(i, w, h, 0.1 * g);
        if (!(cur < prev)) ++non_monotone;
        prev = cur;
      }
    }
    CheckResult r;
    r.passed = worst < 1e-12 && non_monotone == 0;
    r.detail = std::to_string(instances) + detail::fmt(" instances, max |eps=0 - softmax| %.2e", worst) +
               ", non-decreasing grid steps " + std::to_string(non_monotone) + " (20-point eps grid)";
    return r;
  });
}

/// Recognizable implies nearest-neighbour distance > eps, and
/// rows within eps of another row are never recognized.
inline CheckResult separation_suite(std::size_t instances = 10000, std::uint64_t seed = 4) {
  return detail::timed("separation of recognizable words", [&] {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> vd(2, 12), dd(1, 8);
    std::uniform_real_distribution<double> ed(0.0, 1.5);
    std::size_t violations = 0, recognized = 0;
    for (std::size_t n = 0; n < instances; ++n) {
      const std::size_t v = vd(rng), d = dd(rng);
      auto w = gradcheck::random_tensor({v, d}, rng, -1.0, 1.0, false);
      auto h = detail::uniform_vec(d, rng, -3.0, 3.0);
      const double eps = ed(rng);
      const auto nn = nearest_neighbor_distances(w);
      for (std::size_t i = 0; i < v; ++i) {
        if (!is_recognizable(i, w, h, eps)) continue;
        ++recognized;
        if (!(nn[i] > eps)) ++violations;
      }
    }
    // contrapositive: plant a pair of rows closer than eps
    std::size_t close_recognized = 0, close_pairs = 0;
    for (std::size_t n = 0; n < instances; ++n) {
      const std::size_t v = vd(rng), d = dd(rng);
      auto w = gradcheck::random_tensor({v, d}, rng, -1.0, 1.0, false);
      auto dir = detail::uniform_vec(d, rng, -1.0, 1.0);
      const double dn = detail::vnorm(dir);
      const double eps = ed(rng) + 0.05;
      const double gap = eps * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      auto vals = w.mutable_values();
      for (std::size_t k = 0; k < d; ++k) vals[d + k] = vals[k] + gap * dir[k] / dn;
      ++close_pairs;
      auto h = detail::uniform_vec(d, rng, -3.0, 3.0);
      if (is_recognizable(0, w, h, eps) || is_recognizable(1, w, h, eps)) ++close_recognized;
    }
    CheckResult r;
    r.passed = violations == 0 && close_recognized == 0 && recognized > 0;
    r.detail = std::to_string(instances) + " instances, " + std::to_string(recognized) + " recognitions, " +
               std::to_string(violations) + " violations; " + std::to_string(close_pairs) +
               " probes on rows within eps, " + std::to_string(close_recognized) + " recognized";
    return r;
  });
}

/// AdvSoft == sigmoid(Psi), Psi <= Phi, AdvSoft <= sigmoid(Phi),
/// plus the two tightness cases.
inline CheckResult energy_bound_suite(std::size_t instances = 10000, std::uint64_t seed = 5) {
  return detail::timed("energy bound chain", [&] {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> vd(2, 20), dd(1, 16);
    std::uniform_real_distribution<double> ed(0.0, 1.0);
    double worst_identity = 0.0;
    std::size_t psi_fail = 0, bound_fail = 0;
    for (std::size_t n = 0; n < instances; ++n) {
      const std::size_t v = vd(rng), d = dd(rng);
      auto w = gradcheck::random_tensor({v, d}, rng, -1.0, 1.0, false);
      auto h = detail::uniform_vec(d, rng, -2.0, 2.0);
      const double eps = ed(rng);
      const std::size_t i = n % v;
      const double psi = advsoft_psi(i, w, h, eps);
      const double p = advsoft_prob(i, w, h, eps);
      worst_identity = std::max(worst_identity, std::abs(p - kernel::sigmoid(psi)));
      if (!(psi <= energy_phi(i, w, detail::vnorm(h), eps).value + 1e-12)) ++psi_fail;
      if (!check_energy_bound(i, w, h, eps).holds) ++bound_fail;
    }
    auto line = Tensor::matrix({{0, 0}, {3, 0}});
    std::vector<double> h_line{-2, 0};
    auto tight = check_energy_bound(0, line, h_line, 1.0);
    const double tight_gap = std::abs(tight.advsoft - tight.bound) + std::abs(tight.advsoft - kernel::sigmoid(4.0));
    auto w5 = gradcheck::random_tensor({5, 3}, rng, -1.0, 1.0, false);
    std::vector<double> zero(3, 0.0);
    auto flat = check_energy_bound(2, w5, zero, 0.4);
    const double zero_gap = std::abs(flat.advsoft - 0.2) + std::abs(flat.bound - 0.2);
    CheckResult r;
    r.passed = worst_identity < 1e-12 && psi_fail == 0 && bound_fail == 0 && tight_gap < 1e-12 && zero_gap < 1e-12;
    r.detail = std::to_string(instances) + detail::fmt(" instances, max |AdvSoft - sigmoid(Psi)| %.2e", worst_identity) +
               ", Psi>Phi " + std::to_string(psi_fail) + ", bound failures " + std::to_string(bound_fail) +
               detail::fmt("; tightness gaps %.2e (anti-collinear), %.2e (h=0)", tight_gap, zero_gap);
    return r;
  });
}

/// An all-zero model predicts uniformly, so perplexity == |V|.
inline CheckResult uniform_model_identity(std::size_t vocab_size, const std::vector<TokenId>& ids,
                                          std::size_t batch = 10, std::size_t bptt = 35) {
  return detail::timed("uniform model perplexity", [&] {
    LMConfig c;
    c.vocab_size = vocab_size;
    c.init_range = 0.0;
    auto p = init_params(c, 0);
    auto s = batchify(ids, batch, bptt);
    const double ppl = evaluate(c, p, s);
    const double rel = std::abs(ppl - static_cast<double>(vocab_size)) / static_cast<double>(vocab_size);
    CheckResult r;
    r.passed = rel < 0.01;
    r.detail = detail::fmt("perplexity %.6f vs |V| = %g (rel diff %.2e)", ppl, static_cast<double>(vocab_size), rel);
    return r;
  });
}

}  // namespace advlm::verify
