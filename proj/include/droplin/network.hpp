#pragma once

#include <Eigen/Eigenvalues>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "droplin/linalg.hpp"

namespace droplin {

/// Layer widths (d_0, d_1, ..., d_{k+1}) of a deep linear network with
/// k >= 1 hidden layers.
struct Architecture {
  std::vector<int> widths;

  explicit Architecture(std::vector<int> w) : widths(std::move(w)) {
    if (widths.size() < 3)
      throw std::invalid_argument("architecture needs at least one hidden layer");
    for (int d : widths)
      if (d < 1) throw std::invalid_argument("layer widths must be positive");
  }

  int depth() const { return static_cast<int>(widths.size()) - 2; }
  int input_dim() const { return widths.front(); }
  int output_dim() const { return widths.back(); }
  int hidden_width(int l) const { return widths[static_cast<size_t>(l)]; }

  /// min_{i in [k+1]} d_i: the maximum rank a map on this architecture can have.
  int max_map_rank() const {
    int r = widths[1];
    for (size_t i = 1; i + 1 < widths.size(); ++i) r = std::min(r, widths[i]);
    return std::min(r, std::min(widths.front(), widths.back()));
  }
};

struct DropoutConfig {
  double theta;

  explicit DropoutConfig(double theta_) : theta(theta_) {
    if (!(theta > 0.0) || theta > 1.0)
      throw std::domain_error("retain probability must be in (0, 1]");
  }

  double lambda() const { return (1.0 - theta) / theta; }
};

/// Second moment C of the input distribution together with its principal
/// square root and the inverse root. C must be symmetric positive definite.
struct InputMoment {
  Matrix c;
  Matrix sqrt_c;
  Matrix inv_sqrt_c;

  static InputMoment identity(int d) {
    InputMoment m;
    m.c = Matrix::Identity(d, d);
    m.sqrt_c = m.c;
    m.inv_sqrt_c = m.c;
    return m;
  }

  static InputMoment from_matrix(const Matrix& c) {
    if (c.rows() != c.cols()) throw std::invalid_argument("C must be square");
    if (!c.isApprox(c.transpose(), 1e-10))
      throw std::invalid_argument("C must be symmetric");
    Eigen::SelfAdjointEigenSolver<Matrix> es(c);
    const Vector& ev = es.eigenvalues();
    const double cutoff = 1e-12 * ev.maxCoeff();
    Vector root(ev.size()), inv_root(ev.size());
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
      if (ev[i] <= cutoff)
        throw std::invalid_argument("C must be positive definite");
      root[i] = std::sqrt(ev[i]);
      inv_root[i] = 1.0 / root[i];
    }
    InputMoment m;
    m.c = c;
    m.sqrt_c = es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
    m.inv_sqrt_c =
        es.eigenvectors() * inv_root.asDiagonal() * es.eigenvectors().transpose();
    return m;
  }

  int dim() const { return static_cast<int>(c.rows()); }
};

/// Ordered layer matrices W_1, ..., W_{k+1}; weights[i] maps layer i to i+1.
struct WeightStack {
  std::vector<Matrix> weights;

  explicit WeightStack(std::vector<Matrix> w) : weights(std::move(w)) {
    if (weights.size() < 2)
      throw std::invalid_argument("weight stack needs at least two layers");
    for (size_t i = 0; i < weights.size(); ++i) {
      if (!weights[i].allFinite())
        throw std::invalid_argument("weight stack has non-finite entries");
      if (i > 0 && weights[i].cols() != weights[i - 1].rows())
        throw std::invalid_argument("weight stack shapes do not chain at layer " +
                                    std::to_string(i + 1));
    }
  }

  int depth() const { return static_cast<int>(weights.size()) - 1; }

  Architecture architecture() const {
    std::vector<int> widths;
    widths.push_back(static_cast<int>(weights.front().cols()));
    for (const Matrix& w : weights) widths.push_back(static_cast<int>(w.rows()));
    return Architecture(widths);
  }
};

/// W_{k+1 -> 1} = W_{k+1} W_k ... W_1.
inline Matrix network_map(const WeightStack& ws) {
  Matrix m = ws.weights.front();
  for (size_t i = 1; i < ws.weights.size(); ++i) m = ws.weights[i] * m;
  return m;
}

/// ||X||_C^2 = trace(X C X^T).
inline double c_norm_sq(const Matrix& x, const InputMoment& m) {
  if (x.cols() != m.c.rows())
    throw std::invalid_argument("c_norm_sq: dimension mismatch");
  return (x * m.c).cwiseProduct(x).sum();
}

/// Scale layer i by alphas[i]; requires prod(alphas) = 1 so the map is kept.
inline WeightStack rescale(const WeightStack& ws, const std::vector<double>& alphas) {
  if (alphas.size() != ws.weights.size())
    throw std::invalid_argument("rescale: one scalar per layer required");
  double prod = 1.0;
  for (double a : alphas) prod *= a;
  if (std::abs(prod - 1.0) > 1e-12)
    throw std::invalid_argument("rescale: product of alphas must be 1");
  std::vector<Matrix> scaled;
  scaled.reserve(ws.weights.size());
  for (size_t i = 0; i < ws.weights.size(); ++i)
    scaled.push_back(alphas[i] * ws.weights[i]);
  return WeightStack(std::move(scaled));
}

/// Fan-in-scaled Gaussian init: entries N(0, (scale / sqrt(fan_in))^2).
inline WeightStack random_init(const Architecture& arch, double scale,
                               std::uint64_t seed) {
  if (!(scale > 0.0)) throw std::invalid_argument("random_init: scale must be > 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<Matrix> weights;
  for (size_t i = 0; i + 1 < arch.widths.size(); ++i) {
    const int rows = arch.widths[i + 1];
    const int cols = arch.widths[i];
    const double sd = scale / std::sqrt(static_cast<double>(cols));
    Matrix w(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) w(r, c) = sd * gauss(rng);
    weights.push_back(std::move(w));
  }
  return WeightStack(std::move(weights));
}

} // namespace droplin
