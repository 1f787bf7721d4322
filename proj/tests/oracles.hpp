// Independent test oracles: definition-level brute force, kept separate from
// (and deliberately dumber than) the library code paths they check.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "droplin/network.hpp"

namespace oracles {

using droplin::Matrix;
using droplin::Vector;

// entry-wise triple-loop matrix product
inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix c = Matrix::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j)
      for (Eigen::Index l = 0; l < a.cols(); ++l) c(i, j) += a(i, l) * b(l, j);
  return c;
}

inline Matrix naive_chain(const std::vector<Matrix>& w, int from, int to) {
  // product W_to ... W_from, 1-based layer indices
  Matrix acc = w[static_cast<size_t>(from - 1)];
  for (int i = from + 1; i <= to; ++i) acc = naive_matmul(w[static_cast<size_t>(i - 1)], acc);
  return acc;
}

// nu by explicit enumeration over pivot-layer subsets
inline double nu_enumeration(const std::vector<int>& hidden_widths, double lambda) {
  const int k = static_cast<int>(hidden_widths.size());
  double nu = 0.0;
  for (std::uint32_t mask = 1; mask < (1u << k); ++mask) {
    double denom = 1.0;
    int l = 0;
    for (int i = 0; i < k; ++i)
      if (mask & (1u << i)) {
        denom *= hidden_widths[static_cast<size_t>(i)];
        ++l;
      }
    nu += std::pow(lambda, l) / denom;
  }
  return nu;
}

// nu in exact rational arithmetic for rational lambda = p/q
struct Rational {
  long long num = 0, den = 1;
  static long long gcd(long long a, long long b) { return b == 0 ? a : gcd(b, a % b); }
  void reduce() {
    const long long g = gcd(std::abs(num), std::abs(den));
    if (g > 0) { num /= g; den /= g; }
    if (den < 0) { num = -num; den = -den; }
  }
  Rational operator+(const Rational& o) const {
    Rational r{num * o.den + o.num * den, den * o.den};
    r.reduce();
    return r;
  }
  Rational operator*(const Rational& o) const {
    Rational r{num * o.num, den * o.den};
    r.reduce();
    return r;
  }
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
};

inline Rational nu_rational(const std::vector<int>& hidden_widths, long long lp,
                            long long lq) {
  const int k = static_cast<int>(hidden_widths.size());
  Rational nu{0, 1};
  for (std::uint32_t mask = 1; mask < (1u << k); ++mask) {
    Rational term{1, 1};
    for (int i = 0; i < k; ++i)
      if (mask & (1u << i))
        term = term * Rational{lp, lq * hidden_widths[static_cast<size_t>(i)]};
    nu = nu + term;
  }
  return nu;
}

// R_l by direct enumeration of the head/middle/tail expansion
inline double sub_regularizer_enumeration(const droplin::WeightStack& ws,
                                          const droplin::InputMoment& m, int level) {
  const int k = ws.depth();
  const droplin::Architecture arch = ws.architecture();
  double total = 0.0;

  std::vector<int> layers(static_cast<size_t>(level));
  std::function<void(int, int)> pick = [&](int next, int pos) {
    if (pos == level) {
      // enumerate pivot nodes
      std::vector<int> nodes(static_cast<size_t>(level), 0);
      while (true) {
        const Matrix head_m = naive_matmul(naive_chain(ws.weights, 1, layers[0]), m.sqrt_c);
        double term = head_m.row(nodes[0]).squaredNorm();
        for (int p = 0; p + 1 < level; ++p) {
          const Matrix mid = naive_chain(ws.weights, layers[static_cast<size_t>(p)] + 1,
                                         layers[static_cast<size_t>(p + 1)]);
          const double b = mid(nodes[static_cast<size_t>(p + 1)], nodes[static_cast<size_t>(p)]);
          term *= b * b;
        }
        const Matrix tail =
            naive_chain(ws.weights, layers[static_cast<size_t>(level - 1)] + 1, k + 1);
        term *= tail.col(nodes[static_cast<size_t>(level - 1)]).squaredNorm();
        total += term;

        int i = level - 1;
        while (i >= 0) {
          if (++nodes[static_cast<size_t>(i)] < arch.hidden_width(layers[static_cast<size_t>(i)]))
            break;
          nodes[static_cast<size_t>(i)] = 0;
          --i;
        }
        if (i < 0) break;
      }
      return;
    }
    for (int j = next; j <= k; ++j) {
      layers[static_cast<size_t>(pos)] = j;
      pick(j + 1, pos + 1);
    }
  };
  pick(1, 0);
  return total;
}

// the summand of R_l for one fixed pivot-layer tuple (lambda-free)
inline double tuple_summand_enumeration(const droplin::WeightStack& ws,
                                        const droplin::InputMoment& m,
                                        const std::vector<int>& layers) {
  const int k = ws.depth();
  const droplin::Architecture arch = ws.architecture();
  const int level = static_cast<int>(layers.size());
  double total = 0.0;
  std::vector<int> nodes(static_cast<size_t>(level), 0);
  while (true) {
    const Matrix head_m = naive_matmul(naive_chain(ws.weights, 1, layers[0]), m.sqrt_c);
    double term = head_m.row(nodes[0]).squaredNorm();
    for (int p = 0; p + 1 < level; ++p) {
      const Matrix mid = naive_chain(ws.weights, layers[static_cast<size_t>(p)] + 1,
                                     layers[static_cast<size_t>(p + 1)]);
      const double b = mid(nodes[static_cast<size_t>(p + 1)], nodes[static_cast<size_t>(p)]);
      term *= b * b;
    }
    const Matrix tail = naive_chain(ws.weights, layers[static_cast<size_t>(level - 1)] + 1, k + 1);
    term *= tail.col(nodes[static_cast<size_t>(level - 1)]).squaredNorm();
    total += term;

    int i = level - 1;
    while (i >= 0) {
      if (++nodes[static_cast<size_t>(i)] < arch.hidden_width(layers[static_cast<size_t>(i)]))
        break;
      nodes[static_cast<size_t>(i)] = 0;
      --i;
    }
    if (i < 0) break;
  }
  return total;
}

// l2-path regularizer by explicit path enumeration
inline double path_regularizer_enumeration(const droplin::WeightStack& ws) {
  const droplin::Architecture arch = ws.architecture();
  const int layers = ws.depth() + 1;
  double total = 0.0;
  std::vector<int> idx(static_cast<size_t>(layers) + 1, 0);
  while (true) {
    double prod = 1.0;
    for (int l = 0; l < layers; ++l) {
      const double w = ws.weights[static_cast<size_t>(l)](idx[static_cast<size_t>(l + 1)],
                                                          idx[static_cast<size_t>(l)]);
      prod *= w * w;
    }
    total += prod;
    int i = layers;
    while (i >= 0) {
      if (++idx[static_cast<size_t>(i)] < arch.widths[static_cast<size_t>(i)]) break;
      idx[static_cast<size_t>(i)] = 0;
      --i;
    }
    if (i < 0) break;
  }
  return total;
}

// subset enumeration of sum over size-l pivot subsets of 1/prod d_j
inline double subset_sum_enumeration(const std::vector<int>& hidden_widths, int level) {
  const int k = static_cast<int>(hidden_widths.size());
  double total = 0.0;
  for (std::uint32_t mask = 0; mask < (1u << k); ++mask) {
    if (__builtin_popcount(mask) != level) continue;
    double denom = 1.0;
    for (int i = 0; i < k; ++i)
      if (mask & (1u << i)) denom *= hidden_widths[static_cast<size_t>(i)];
    total += 1.0 / denom;
  }
  return total;
}

// E||U diag(b) V x||^2 by enumerating all masks
inline double masked_moment_enumeration(const Matrix& u, const Matrix& v,
                                        const droplin::InputMoment& m, double theta) {
  const int r = static_cast<int>(u.cols());
  double total = 0.0;
  for (std::uint32_t mask = 0; mask < (1u << r); ++mask) {
    double prob = 1.0;
    Matrix uv = Matrix::Zero(u.rows(), v.cols());
    for (int j = 0; j < r; ++j) {
      if (mask & (1u << j)) {
        prob *= theta;
        uv += u.col(j) * v.row(j);
      } else {
        prob *= 1.0 - theta;
      }
    }
    total += prob * droplin::c_norm_sq(uv, m);
  }
  return total;
}

// projected gradient in the shrunk-spectrum space for the rank-constrained
// envelope problem min ||sigma - s||^2 + nu (sum s)^2, s >= 0, ||s||_0 <= r
inline double envelope_pg_oracle(const Vector& sigma, double nu, int r, int restarts,
                                 std::uint64_t seed) {
  const int n = static_cast<int>(sigma.size());
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double best = std::numeric_limits<double>::infinity();
  Vector s(n), g(n);
  for (int rs = 0; rs < restarts; ++rs) {
    for (int i = 0; i < n; ++i) s[i] = unif(rng) * (sigma[0] > 0 ? sigma[0] : 1.0);
    const double step = 1.0 / (2.0 * (1.0 + nu * n));
    for (int it = 0; it < 300; ++it) {
      const double tot = s.sum();
      for (int i = 0; i < n; ++i) g[i] = 2.0 * (s[i] - sigma[i]) + 2.0 * nu * tot;
      s -= step * g;
      for (int i = 0; i < n; ++i) s[i] = std::max(0.0, s[i]);
      if (r < n) {
        // keep the r largest entries
        Vector sorted = s;
        std::sort(sorted.data(), sorted.data() + n, std::greater<double>());
        const double cut = sorted[r - 1];
        int kept = 0;
        for (int i = 0; i < n; ++i) {
          if (s[i] >= cut && kept < r && s[i] > 0.0)
            ++kept;
          else
            s[i] = 0.0;
        }
      }
    }
    const double obj = (sigma - s).squaredNorm() + nu * s.sum() * s.sum();
    best = std::min(best, obj);
  }
  return best;
}

inline Matrix random_matrix(int rows, int cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> gauss(0.0, scale);
  Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = gauss(rng);
  return m;
}

inline Matrix random_pd(int d, std::mt19937_64& rng) {
  const Matrix a = random_matrix(d, d, rng);
  return a * a.transpose() + 0.5 * Matrix::Identity(d, d);
}

inline Matrix random_orthogonal(int d, std::mt19937_64& rng) {
  const Matrix a = random_matrix(d, d, rng);
  Eigen::HouseholderQR<Matrix> qr(a);
  return qr.householderQ() * Matrix::Identity(d, d);
}

inline droplin::WeightStack random_stack(const droplin::Architecture& arch,
                                         std::mt19937_64& rng, double scale = 1.0) {
  std::vector<Matrix> w;
  for (size_t i = 0; i + 1 < arch.widths.size(); ++i)
    w.push_back(random_matrix(arch.widths[i + 1], arch.widths[i], rng, scale));
  return droplin::WeightStack(std::move(w));
}

} // namespace oracles
