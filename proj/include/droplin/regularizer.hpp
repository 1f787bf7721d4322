#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <utility>
#include <vector>

#include "droplin/network.hpp"

namespace droplin {

/// nu = prod_{i in [k]} (1 + lambda / d_i) - 1, the product form of the
/// sum over pivot-layer subsets of lambda^l / prod d_{j_i}.
inline double effective_nu(const Architecture& arch, const DropoutConfig& cfg) {
  const double lambda = cfg.lambda();
  double prod = 1.0;
  for (int l = 1; l <= arch.depth(); ++l)
    prod *= 1.0 + lambda / arch.hidden_width(l);
  return prod - 1.0;
}

namespace detail {

// R as a polynomial in lambda, evaluated by the layer recursion
//   P_{k+1} = A_{k+1}^T A_{k+1},  P_i = A_i^T (P_{i+1} + lambda dg(P_{i+1})) A_i
// on the stack with C^{1/2} absorbed into the first layer.  The value is
// trace(P_1) minus the squared Frobenius norm of the whitened map.
inline double reg_poly_eval(const WeightStack& ws, double lambda,
                            const InputMoment& m) {
  const int k = ws.depth();
  std::vector<Matrix> a(ws.weights.begin(), ws.weights.end());
  if (a.front().cols() != m.c.rows())
    throw std::invalid_argument("regularizer: input moment dimension mismatch");
  a.front() = a.front() * m.sqrt_c;

  Matrix p = a.back().transpose() * a.back();
  for (int i = k; i >= 1; --i) {
    Matrix g = p;
    g.diagonal() += lambda * p.diagonal();
    p = a[static_cast<size_t>(i - 1)].transpose() * g * a[static_cast<size_t>(i - 1)];
  }

  Matrix whitened_map = a[0];
  for (size_t i = 1; i < a.size(); ++i) whitened_map = a[i] * whitened_map;

  return p.trace() - whitened_map.squaredNorm();
}

} // namespace detail

/// Closed-form explicit regularizer R({W_i}) in O(sum d_i^3) time.
inline double explicit_regularizer(const WeightStack& ws, const DropoutConfig& cfg,
                                   const InputMoment& m) {
  if (cfg.theta == 1.0) return 0.0;
  return detail::reg_poly_eval(ws, cfg.lambda(), m);
}

/// Lambda-free coefficients R_1..R_k with R = sum_l lambda^l R_l, recovered
/// by interpolating the degree-k polynomial at lambda in {1, ..., k+1}.
inline std::vector<double> sub_regularizers(const WeightStack& ws,
                                            const InputMoment& m) {
  const int k = ws.depth();
  const int n = k + 1;
  Matrix vand(n, n);
  Vector rhs(n);
  for (int j = 0; j < n; ++j) {
    const double node = static_cast<double>(j + 1);
    double pw = 1.0;
    for (int c = 0; c < n; ++c) {
      vand(j, c) = pw;
      pw *= node;
    }
    rhs[j] = detail::reg_poly_eval(ws, node, m);
  }
  Vector coef = vand.fullPivLu().solve(rhs);
  std::vector<double> r(static_cast<size_t>(k));
  for (int l = 1; l <= k; ++l) r[static_cast<size_t>(l - 1)] = coef[l];
  return r;
}

/// Elementary symmetric polynomials e_1..e_k of {1/d_1, ..., 1/d_k}.
inline std::vector<double> pivot_subset_sums(const Architecture& arch) {
  const int k = arch.depth();
  std::vector<double> e(static_cast<size_t>(k) + 1, 0.0);
  e[0] = 1.0;
  for (int i = 1; i <= k; ++i) {
    const double x = 1.0 / arch.hidden_width(i);
    for (int l = std::min(i, k); l >= 1; --l)
      e[static_cast<size_t>(l)] += e[static_cast<size_t>(l - 1)] * x;
  }
  e.erase(e.begin());
  return e;
}

/// LB_l = ||W_{k+1->1} C^{1/2}||_*^2 * sum_{pivot subsets of size l} 1/prod d_{j_i}.
inline std::vector<double> lower_bounds(const WeightStack& ws, const InputMoment& m) {
  const double nn = nuclear_norm(network_map(ws) * m.sqrt_c);
  std::vector<double> lb = pivot_subset_sums(ws.architecture());
  for (double& v : lb) v *= nn * nn;
  return lb;
}

/// One head/middle/tail summand of Proposition-style expansion of R_l.
struct EqualizationTerm {
  std::vector<int> pivot_layers; // j_1 < ... < j_l, 1-based hidden layer indices
  std::vector<int> pivot_nodes;  // i_1, ..., i_l, 0-based node indices
  double head = 0.0;
  double middle = 1.0;
  double tail = 0.0;
  double value = 0.0; // |head * middle * tail|
};

inline std::vector<EqualizationTerm> equalization_terms(const WeightStack& ws,
                                                        const InputMoment& m,
                                                        double budget = 1e6) {
  const int k = ws.depth();
  const Architecture arch = ws.architecture();

  double total = 0.0;
  {
    // term count = prod_i (1 + d_i) - 1 over hidden layers
    double prod = 1.0;
    for (int i = 1; i <= k; ++i) prod *= 1.0 + arch.hidden_width(i);
    total = prod - 1.0;
  }
  if (total > budget)
    throw CapacityError(
        "equalization term enumeration exceeds budget; use gap-based checks");

  // prefix[j] = W_{j->1} C^{1/2}, suffix[j] = W_{k+1->j+1},
  // segment[a][b] = W_{b->a+1} for hidden a < b.
  std::vector<Matrix> prefix(static_cast<size_t>(k) + 1);
  prefix[0] = m.sqrt_c; // unused row dimension d_0
  std::vector<Matrix> whole(static_cast<size_t>(k) + 1);
  whole[0] = ws.weights[0];
  for (int j = 1; j <= k; ++j)
    whole[static_cast<size_t>(j)] =
        (j == 1) ? ws.weights[0] : Matrix(ws.weights[static_cast<size_t>(j - 1)] *
                                          whole[static_cast<size_t>(j - 1)]);
  for (int j = 1; j <= k; ++j)
    prefix[static_cast<size_t>(j)] = whole[static_cast<size_t>(j)] * m.sqrt_c;

  std::vector<Matrix> suffix(static_cast<size_t>(k) + 1);
  suffix[static_cast<size_t>(k)] = ws.weights.back();
  for (int j = k - 1; j >= 1; --j)
    suffix[static_cast<size_t>(j)] =
        suffix[static_cast<size_t>(j + 1)] * ws.weights[static_cast<size_t>(j)];

  std::vector<std::vector<Matrix>> segment(static_cast<size_t>(k) + 1);
  for (int a = 1; a <= k; ++a) {
    segment[static_cast<size_t>(a)].resize(static_cast<size_t>(k) + 1);
    Matrix acc;
    for (int b = a + 1; b <= k; ++b) {
      acc = (b == a + 1) ? ws.weights[static_cast<size_t>(a)]
                         : Matrix(ws.weights[static_cast<size_t>(b - 1)] * acc);
      segment[static_cast<size_t>(a)][static_cast<size_t>(b)] = acc;
    }
  }

  std::vector<EqualizationTerm> terms;
  std::vector<int> layers;

  std::function<void(int)> recurse_layers = [&](int next) {
    if (!layers.empty()) {
      // enumerate pivot nodes for this layer tuple
      const int l = static_cast<int>(layers.size());
      std::vector<int> nodes(static_cast<size_t>(l), 0);
      while (true) {
        EqualizationTerm t;
        t.pivot_layers = layers;
        t.pivot_nodes = nodes;
        t.head = prefix[static_cast<size_t>(layers[0])].row(nodes[0]).norm();
        t.middle = 1.0;
        for (int p = 0; p + 1 < l; ++p)
          t.middle *= segment[static_cast<size_t>(layers[static_cast<size_t>(p)])]
                             [static_cast<size_t>(layers[static_cast<size_t>(p + 1)])](
                                 nodes[static_cast<size_t>(p + 1)],
                                 nodes[static_cast<size_t>(p)]);
        t.tail = suffix[static_cast<size_t>(layers[static_cast<size_t>(l - 1)])]
                     .col(nodes[static_cast<size_t>(l - 1)])
                     .norm();
        t.value = std::abs(t.head * t.middle * t.tail);
        terms.push_back(std::move(t));

        int pos = l - 1;
        while (pos >= 0) {
          if (++nodes[static_cast<size_t>(pos)] <
              arch.hidden_width(layers[static_cast<size_t>(pos)]))
            break;
          nodes[static_cast<size_t>(pos)] = 0;
          --pos;
        }
        if (pos < 0) break;
      }
    }
    for (int j = next; j <= k; ++j) {
      layers.push_back(j);
      recurse_layers(j + 1);
      layers.pop_back();
    }
  };
  recurse_layers(1);
  return terms;
}

struct EqualizationCheck {
  bool equalized = false;
  double max_rel_deviation = 0.0;
  bool used_term_enumeration = false;
};

/// Per-term equality check (Lemma-1 equality condition) when the enumeration
/// budget allows, normalized-gap criterion otherwise.
inline EqualizationCheck is_equalized(const WeightStack& ws, const InputMoment& m,
                                      double tol) {
  EqualizationCheck out;
  const double nn = nuclear_norm(network_map(ws) * m.sqrt_c);
  try {
    const std::vector<EqualizationTerm> terms = equalization_terms(ws, m);
    out.used_term_enumeration = true;
    for (const EqualizationTerm& t : terms) {
      double pd = 1.0;
      for (int j : t.pivot_layers) pd *= ws.architecture().hidden_width(j);
      const double target = nn / pd;
      const double dev = (target > 0.0) ? std::abs(t.value - target) / target
                                        : std::abs(t.value);
      out.max_rel_deviation = std::max(out.max_rel_deviation, dev);
    }
    out.equalized = out.max_rel_deviation <= tol;
    return out;
  } catch (const CapacityError&) {
    // fall through to the gap criterion
  }
  const std::vector<double> rl = sub_regularizers(ws, m);
  const std::vector<double> lb = lower_bounds(ws, m);
  for (size_t l = 0; l < rl.size(); ++l) {
    const double gap =
        (lb[l] > 0.0) ? rl[l] / lb[l] - 1.0
                      : (std::abs(rl[l]) > 0.0 ? std::numeric_limits<double>::infinity()
                                               : 0.0);
    out.max_rel_deviation = std::max(out.max_rel_deviation, gap);
  }
  out.equalized = out.max_rel_deviation <= tol;
  return out;
}

struct GapReport {
  std::vector<double> per_level; // r_l = R_l / LB_l - 1
  double overall = 0.0;          // r = R / (nu * nuclear^2) - 1
  bool defined = false;          // false for the zero network map
};

inline GapReport normalized_gaps(const WeightStack& ws, const DropoutConfig& cfg,
                                 const InputMoment& m) {
  GapReport g;
  const std::vector<double> rl = sub_regularizers(ws, m);
  const std::vector<double> lb = lower_bounds(ws, m);
  const double nn = nuclear_norm(network_map(ws) * m.sqrt_c);
  if (nn <= 0.0) return g;
  g.defined = true;
  for (size_t l = 0; l < rl.size(); ++l) g.per_level.push_back(rl[l] / lb[l] - 1.0);
  const double nu = effective_nu(ws.architecture(), cfg);
  const double r = explicit_regularizer(ws, cfg, m);
  g.overall = (nu > 0.0) ? r / (nu * nn * nn) - 1.0 : 0.0;
  return g;
}

struct LevelReport {
  double r_l = 0.0;
  double lb_l = 0.0;
  double gap = 0.0;
};

struct RegularizerReport {
  double total_r = 0.0;
  double nu = 0.0;
  double map_nuclear_c = 0.0;
  std::vector<LevelReport> levels;
  double overall_gap = 0.0;
  bool gaps_defined = false;
};

inline RegularizerReport regularizer_report(const WeightStack& ws,
                                            const DropoutConfig& cfg,
                                            const InputMoment& m) {
  RegularizerReport rep;
  rep.total_r = explicit_regularizer(ws, cfg, m);
  rep.nu = effective_nu(ws.architecture(), cfg);
  rep.map_nuclear_c = nuclear_norm(network_map(ws) * m.sqrt_c);
  const std::vector<double> rl = sub_regularizers(ws, m);
  const std::vector<double> lb = lower_bounds(ws, m);
  const GapReport g = normalized_gaps(ws, cfg, m);
  rep.gaps_defined = g.defined;
  rep.overall_gap = g.overall;
  for (size_t l = 0; l < rl.size(); ++l) {
    LevelReport lr;
    lr.r_l = rl[l];
    lr.lb_l = lb[l];
    lr.gap = g.defined ? g.per_level[l] : 0.0;
    rep.levels.push_back(lr);
  }
  return rep;
}

/// E ||U diag(b) V x||^2 for b ~ Bernoulli(theta)^r, in closed form.
inline double masked_second_moment(const Matrix& u, const Matrix& v,
                                   const InputMoment& m, double theta) {
  if (u.cols() != v.rows() || v.cols() != m.c.rows())
    throw std::invalid_argument("masked_second_moment: dimension mismatch");
  const Matrix uv = u * v;
  const double bulk = theta * theta * c_norm_sq(uv, m);
  double diag = 0.0;
  for (Eigen::Index j = 0; j < u.cols(); ++j)
    diag += u.col(j).squaredNorm() * (m.sqrt_c * v.row(j).transpose()).squaredNorm();
  return bulk + (theta - theta * theta) * diag;
}

/// Exact R by full dropout-pattern enumeration; the definitional oracle for
/// explicit_regularizer. Budget: at most 24 hidden units in total.
inline double exact_dropout_regularizer(const WeightStack& ws,
                                        const DropoutConfig& cfg,
                                        const InputMoment& m) {
  if (cfg.theta == 1.0) return 0.0;
  const int k = ws.depth();
  const Architecture arch = ws.architecture();
  int units = 0;
  for (int l = 1; l <= k; ++l) units += arch.hidden_width(l);
  if (units > 24)
    throw CapacityError("mask enumeration budget exceeded (" +
                        std::to_string(units) + " hidden units > 24)");

  const Matrix w_map = network_map(ws);
  const double theta = cfg.theta;
  const bool log_space = units > 16;
  const double log_on = std::log(theta);
  const double log_off = std::log1p(-theta);

  double r = 0.0;
  const std::uint64_t patterns = std::uint64_t{1} << units;
  for (std::uint64_t pat = 0; pat < patterns; ++pat) {
    const int on = __builtin_popcountll(pat);
    double prob;
    if (log_space)
      prob = std::exp(on * log_on + (units - on) * log_off);
    else
      prob = std::pow(theta, on) * std::pow(1.0 - theta, units - on);
    if (prob == 0.0) continue;

    // masked map: theta^{-k} W_{k+1} B_k W_k ... B_1 W_1
    Matrix masked = ws.weights[0];
    int bit = 0;
    for (int l = 1; l <= k; ++l) {
      for (int row = 0; row < arch.hidden_width(l); ++row, ++bit)
        if (((pat >> bit) & 1u) == 0) masked.row(row).setZero();
      masked = ws.weights[static_cast<size_t>(l)] * masked;
    }
    masked /= std::pow(theta, k);
    r += prob * c_norm_sq(masked - w_map, m);
  }
  return r;
}

/// Samples (x, y) pairs; fills the two vectors from the supplied generator.
using DataSampler = std::function<void(std::mt19937_64&, Vector&, Vector&)>;

struct MonteCarloEstimate {
  double mean = 0.0;
  double std_error = 0.0;
};

/// Unbiased Monte-Carlo estimate of the dropout objective L_theta.
inline MonteCarloEstimate mc_dropout_objective(const WeightStack& ws,
                                               const DropoutConfig& cfg,
                                               const DataSampler& sampler,
                                               std::int64_t n_samples,
                                               std::uint64_t seed) {
  if (n_samples < 1)
    throw std::invalid_argument("mc_dropout_objective: n_samples must be >= 1");
  const int k = ws.depth();
  const Architecture arch = ws.architecture();
  const double scale = std::pow(cfg.theta, -k);
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(cfg.theta);

  double sum = 0.0, sum_sq = 0.0;
  Vector x, y;
  for (std::int64_t s = 0; s < n_samples; ++s) {
    sampler(rng, x, y);
    Vector h = ws.weights[0] * x;
    for (int l = 1; l <= k; ++l) {
      for (int row = 0; row < arch.hidden_width(l); ++row)
        if (!keep(rng)) h[row] = 0.0;
      h = ws.weights[static_cast<size_t>(l)] * h;
    }
    const double loss = (y - scale * h).squaredNorm();
    sum += loss;
    sum_sq += loss * loss;
  }
  MonteCarloEstimate est;
  const double n = static_cast<double>(n_samples);
  est.mean = sum / n;
  if (n_samples > 1) {
    const double var = std::max(0.0, (sum_sq - sum * sum / n) / (n - 1.0));
    est.std_error = std::sqrt(var / n);
  }
  return est;
}

} // namespace droplin
