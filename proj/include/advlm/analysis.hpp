// SPDX-License-Identifier: Apache-2.0
//
// Embedding diversity diagnostics: nearest-neighbour distances, the singular
// spectrum of W, recognizability probes and the energy bound on AdvSoft.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "advlm/advsoft.hpp"
#include "advlm/error.hpp"
#include "advlm/tensor.hpp"
#include "json.hpp"

namespace advlm {

namespace detail {

inline void require_matrix(const Tensor& w, std::size_t min_rows, const char* op) {
  if (w.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + to_string(w.shape()));
  if (w.dim(0) < min_rows) {
    throw DimensionError(std::string(op) + ": need at least " + std::to_string(min_rows) + " rows, got " +
                         std::to_string(w.dim(0)));
  }
}

inline double distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

}  // namespace detail

/// out[i] = min_{j != i} |w_i - w_j|.
inline std::vector<double> nearest_neighbor_distances(const Tensor& w) {
  detail::require_matrix(w, 2, "nearest_neighbor_distances");
  const std::size_t v = w.dim(0);
  std::vector<double> out(v, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < v; ++i) {
    for (std::size_t j = i + 1; j < v; ++j) {
      const double d = detail::distance(detail::row(w, i), detail::row(w, j));
      out[i] = std::min(out[i], d);
      out[j] = std::min(out[j], d);
    }
  }
  return out;
}

/// Eigenvalues of a symmetric n x n matrix (row-major) by cyclic Jacobi
/// sweeps, stopping once the off-diagonal norm drops below tol * |A|_F.
inline std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t n, double tol = 1e-12) {
  double fro = 0.0;
  for (double x : a) fro += x * x;
  fro = std::sqrt(fro);
  auto off = [&] {
    double s = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = 0; q < n; ++q)
        if (p != q) s += a[p * n + q] * a[p * n + q];
    return std::sqrt(s);
  };
  for (int sweep = 0; sweep < 100 && fro > 0.0 && off() > tol * fro; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev(n);
  for (std::size_t k = 0; k < n; ++k) ev[k] = a[k * n + k];
  return ev;
}

/// Singular values of W, descending, not normalized. Length min(V, d).
inline std::vector<double> singular_values_raw(const Tensor& w) {
  detail::require_matrix(w, 1, "singular_values");
  const std::size_t v = w.dim(0), d = w.dim(1);
  std::vector<double> gram(d * d, 0.0);
  kernel::gemm_tn(v, d, d, w.values().data(), w.values().data(), gram.data());
  auto ev = symmetric_eigenvalues(std::move(gram), d);
  std::sort(ev.begin(), ev.end(), std::greater<>());
  ev.resize(std::min(v, d));
  for (double& e : ev) e = std::sqrt(std::max(e, 0.0));
  return ev;
}

/// Singular values scaled so the largest is 1.
inline std::vector<double> singular_values(const Tensor& w) {
  auto s = singular_values_raw(w);
  if (s.empty() || !(s[0] > 0.0)) throw DomainError("singular_values: embedding matrix is all zero");
  const double top = s[0];
  for (double& x : s) x /= top;
  return s;
}

/// Shannon entropy of sigma / sum(sigma) divided by log k; 1 for a flat
/// spectrum, 0 when one direction carries everything.
inline double sv_entropy(std::span<const double> sigma) {
  const double total = std::accumulate(sigma.begin(), sigma.end(), 0.0);
  if (sigma.size() < 2 || !(total > 0.0)) return 0.0;
  double h = 0.0;
  for (double s : sigma) {
    const double p = s / total;
    if (p > 0.0) h -= p * std::log(p);
  }
  return h / std::log(static_cast<double>(sigma.size()));
}

/// w_i.h - eps|h| > w_j.h for every j != i.
inline bool is_recognizable(std::size_t i, const Tensor& w, std::span<const double> h, double eps) {
  detail::check_instance(i, w, h, "is_recognizable");
  detail::require_matrix(w, 2, "is_recognizable");
  const double lhs = detail::dot(detail::row(w, i), h) - eps * detail::norm(h);
  for (std::size_t j = 0; j < w.dim(0); ++j) {
    if (j != i && !(lhs > detail::dot(detail::row(w, j), h))) return false;
  }
  return true;
}

/// The only word that can be recognizable under h (with eps_i >= 0) is the
/// strict argmax of w.h; returns it if it clears the margin.
inline std::optional<std::size_t> recognized_word(const Tensor& w, std::span<const double> h,
                                                  const std::function<double(std::size_t)>& eps_of) {
  const std::size_t v = w.dim(0);
  std::size_t best = 0;
  double top = -std::numeric_limits<double>::infinity(), second = top;
  for (std::size_t j = 0; j < v; ++j) {
    const double z = detail::dot(detail::row(w, j), h);
    if (z > top) {
      second = top;
      top = z;
      best = j;
    } else if (z > second) {
      second = z;
    }
  }
  if (top - eps_of(best) * detail::norm(h) > second) return best;
  return std::nullopt;
}

struct Recognition {
  std::size_t word_id = 0;
  std::string probe_source;
  double epsilon = 0.0;
  double nn_distance = 0.0;
};

struct SeparationViolation {
  std::size_t word_id = 0;
  std::size_t probe_index = 0;
  double epsilon = 0.0;
  double nn_distance = 0.0;
};

struct SeparationReport {
  std::vector<Recognition> recognized;  // first probe recognizing each word
  std::vector<SeparationViolation> violations;
  std::size_t probes = 0;
};

/// Runs every probe, records recognized words and checks each against its
/// nearest-neighbour distance. `sources[k]` labels probe k (may be empty).
inline SeparationReport check_separation_theorem(const Tensor& w, const std::function<double(std::size_t)>& eps_of,
                                                 const std::vector<std::vector<double>>& probes,
                                                 const std::vector<std::string>& sources = {}) {
  detail::require_matrix(w, 2, "check_separation_theorem");
  const auto nn = nearest_neighbor_distances(w);
  SeparationReport rep;
  std::vector<bool> seen(w.dim(0), false);
  for (std::size_t k = 0; k < probes.size(); ++k) {
    if (probes[k].size() != w.dim(1)) throw DimensionError("check_separation_theorem: probe size mismatch");
    auto hit = recognized_word(w, probes[k], eps_of);
    ++rep.probes;
    if (!hit) continue;
    const std::size_t i = *hit;
    const double eps = eps_of(i);
    if (!(nn[i] > eps)) rep.violations.push_back({i, k, eps, nn[i]});
    if (!seen[i]) {
      seen[i] = true;
      rep.recognized.push_back({i, k < sources.size() ? sources[k] : std::string("probe"), eps, nn[i]});
    }
  }
  return rep;
}

inline SeparationReport check_separation_theorem(const Tensor& w, double eps,
                                                 const std::vector<std::vector<double>>& probes) {
  return check_separation_theorem(w, [eps](std::size_t) { return eps; }, probes);
}

struct EnergyPhi {
  double value = 0.0;  // Phi(i, W, a)
  double bound = 0.0;  // a * min_{j != i}(|w_i - w_j| - eps)
};

/// Phi(i, W, a) = -log sum_{j != i} exp(-a(|w_i - w_j| - eps)).
inline EnergyPhi energy_phi(std::size_t i, const Tensor& w, double a, double eps) {
  detail::require_matrix(w, 2, "energy_phi");
  if (i >= w.dim(0)) throw IndexError("energy_phi: word " + std::to_string(i) + " out of range");
  if (!(a >= 0.0)) throw DomainError("energy_phi: a must be >= 0");
  std::vector<double> z;
  double mind = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < w.dim(0); ++j) {
    if (j == i) continue;
    const double d = detail::distance(detail::row(w, i), detail::row(w, j));
    mind = std::min(mind, d);
    z.push_back(-a * (d - eps));
  }
  return {-kernel::log_sum_exp(z), a * (mind - eps)};
}

/// Psi(i, W, h) = -log sum_{j != i} exp((w_j - w_i).h + eps|h|); AdvSoft is
/// exactly sigmoid(Psi).
inline double advsoft_psi(std::size_t i, const Tensor& w, std::span<const double> h, double eps) {
  detail::check_instance(i, w, h, "advsoft_psi");
  detail::require_matrix(w, 2, "advsoft_psi");
  const double zi = detail::dot(detail::row(w, i), h);
  const double r = eps * detail::norm(h);
  std::vector<double> z;
  for (std::size_t j = 0; j < w.dim(0); ++j) {
    if (j != i) z.push_back(detail::dot(detail::row(w, j), h) - zi + r);
  }
  return -kernel::log_sum_exp(z);
}

struct EnergyBound {
  double advsoft = 0.0;
  double bound = 0.0;
  bool holds = false;
};

inline EnergyBound check_energy_bound(std::size_t i, const Tensor& w, std::span<const double> h, double eps) {
  const double p = advsoft_prob(i, w, h, eps);
  const double b = kernel::sigmoid(energy_phi(i, w, detail::norm(h), eps).value);
  return {p, b, p <= b + 1e-12};
}

struct DiversityReport {
  std::vector<double> nn_distances;
  std::vector<double> singular_values_normalized;
  double sv_entropy = 0.0;
  std::vector<Recognition> recognized_words;
  std::size_t separation_violations = 0;

  static double quantile(std::vector<double> xs, double q) {
    if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(xs.begin(), xs.end());
    const double pos = q * static_cast<double>(xs.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, xs.size() - 1);
    return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
  }

  double median_nn() const { return quantile(nn_distances, 0.5); }

  nlohmann::json to_json() const {
    nlohmann::json rec = nlohmann::json::array();
    for (const auto& r : recognized_words) {
      rec.push_back({{"word_id", r.word_id}, {"probe_source", r.probe_source}, {"epsilon", r.epsilon},
                     {"nn_distance", r.nn_distance}});
    }
    nlohmann::json q;
    for (double p : {0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0}) {
      char key[16];
      std::snprintf(key, sizeof key, "q%02d", static_cast<int>(std::lround(p * 100)));
      q[key] = quantile(nn_distances, p);
    }
    return {{"nn_distances", nn_distances},
            {"nn_distance_quantiles", q},
            {"singular_values_normalized", singular_values_normalized},
            {"sv_entropy", sv_entropy},
            {"recognized_words", rec},
            {"separation_violations", separation_violations}};
  }
};

struct ProbeOptions {
  double epsilon = 0.0;   // fixed radius, used when alpha < 0
  double alpha = -1.0;    // adaptive radius alpha * |w_i| when >= 0
  std::size_t random_probes = 1000;
  std::uint64_t seed = 1;
};

/// Full report. Probes are the given context vectors plus `random_probes`
/// random unit directions scaled to the median context norm (1 when no
/// contexts are given).
inline DiversityReport analyze_embeddings(const Tensor& w, const std::vector<std::vector<double>>& contexts,
                                          const ProbeOptions& opt) {
  DiversityReport rep;
  rep.nn_distances = nearest_neighbor_distances(w);
  rep.singular_values_normalized = singular_values(w);
  rep.sv_entropy = sv_entropy(rep.singular_values_normalized);

  std::vector<double> norms;
  for (const auto& h : contexts) norms.push_back(detail::norm(h));
  const double scale = norms.empty() ? 1.0 : DiversityReport::quantile(norms, 0.5);

  std::vector<std::vector<double>> probes = contexts;
  std::vector<std::string> sources(contexts.size(), "context");
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> g(0.0, 1.0);
  for (std::size_t k = 0; k < opt.random_probes; ++k) {
    std::vector<double> h(w.dim(1));
    for (double& x : h) x = g(rng);
    const double n = detail::norm(h);
    for (double& x : h) x *= scale / n;
    probes.push_back(std::move(h));
    sources.emplace_back("random");
  }
  std::function<double(std::size_t)> eps_of;
  if (opt.alpha >= 0.0) {
    eps_of = [&w, a = opt.alpha](std::size_t i) { return a * detail::norm(detail::row(w, i)); };
  } else {
    eps_of = [e = opt.epsilon](std::size_t) { return e; };
  }
  auto sep = check_separation_theorem(w, eps_of, probes, sources);
  rep.recognized_words = std::move(sep.recognized);
  rep.separation_violations = sep.violations.size();
  return rep;
}

/// "word,nn_distance" CSV, one row per vocabulary entry.
inline std::string nn_distance_csv(const std::vector<std::string>& words, std::span<const double> nn) {
  std::string out = "word,nn_distance\n";
  char buf[64];
  for (std::size_t i = 0; i < nn.size(); ++i) {
    std::string word = i < words.size() ? words[i] : std::to_string(i);
    if (word.find_first_of(",\"") != std::string::npos) {
      std::string q = "\"";
      for (char c : word) q += (c == '"') ? std::string("\"\"") : std::string(1, c);
      word = q + "\"";
    }
    std::snprintf(buf, sizeof buf, ",%.9g\n", nn[i]);
    out += word + buf;
  }
  return out;
}

}  // namespace advlm
