#pragma once

#include <atomic>
#include <cmath>
#include <random>
#include <thread>
#include <vector>

#include "droplin/optima.hpp"
#include "droplin/regularizer.hpp"

namespace droplin {

struct DivergenceError : std::runtime_error {
  long step;
  explicit DivergenceError(long step_)
      : std::runtime_error("training diverged at step " + std::to_string(step_)),
        step(step_) {}
};

/// Planted low-rank ground truth N = U V^T + noise; inputs are standard
/// Gaussian so the second moment is the identity.
struct DataModel {
  Matrix n_map;
  int planted_rank = 0;
  double noise_std = 0.0;
};

inline DataModel make_data_model(int d_out, int d_in, int planted_rank,
                                 double noise_std, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix u(d_out, planted_rank), v(d_in, planted_rank);
  for (int r = 0; r < d_out; ++r)
    for (int c = 0; c < planted_rank; ++c) u(r, c) = gauss(rng);
  for (int r = 0; r < d_in; ++r)
    for (int c = 0; c < planted_rank; ++c) v(r, c) = gauss(rng);
  DataModel model;
  model.n_map = u * v.transpose();
  for (int r = 0; r < d_out; ++r)
    for (int c = 0; c < d_in; ++c) model.n_map(r, c) += noise_std * gauss(rng);
  model.planted_rank = planted_rank;
  model.noise_std = noise_std;
  return model;
}

struct Batch {
  Matrix x; // d_0 x n
  Matrix y; // d_{k+1} x n
};

inline Batch sample_batch(const DataModel& model, int n, std::mt19937_64& rng) {
  if (n < 1) throw std::invalid_argument("sample_batch: n must be >= 1");
  std::normal_distribution<double> gauss(0.0, 1.0);
  Batch b;
  b.x.resize(model.n_map.cols(), n);
  for (Eigen::Index c = 0; c < b.x.cols(); ++c)
    for (Eigen::Index r = 0; r < b.x.rows(); ++r) b.x(r, c) = gauss(rng);
  b.y = model.n_map * b.x;
  return b;
}

inline Batch sample_batch(const DataModel& model, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_batch(model, n, rng);
}

struct SgdStepResult {
  WeightStack weights;
  double batch_loss = 0.0; // masked empirical loss at the pre-update weights
};

/// One dropout-SGD step: gradient of (1/n) sum ||y_i - Wbar x_i||^2 by reverse
/// accumulation through the masked chain. By default a single mask per hidden
/// layer is shared across the minibatch; with per_example=true each column of
/// the batch draws its own masks, which averages the mask noise over the batch.
inline SgdStepResult dropout_sgd_step(const WeightStack& ws, const DropoutConfig& cfg,
                                      const Batch& batch, double lr,
                                      std::mt19937_64& rng, long step = -1,
                                      bool per_example = false) {
  const int k = ws.depth();
  const Architecture arch = ws.architecture();
  const double scale = std::pow(cfg.theta, -k);
  const Eigen::Index cols = batch.x.cols();
  const double n = static_cast<double>(cols);
  std::bernoulli_distribution keep(cfg.theta);

  // forward, storing masked activations h[i] (input of layer i+1); masks[l]
  // is a 0/1 matrix matching the layer output (one column when shared)
  std::vector<Matrix> h(static_cast<size_t>(k) + 1);
  std::vector<Matrix> masks(static_cast<size_t>(k));
  h[0] = batch.x;
  Matrix z;
  for (int l = 1; l <= k + 1; ++l) {
    z = ws.weights[static_cast<size_t>(l - 1)] * (l == 1 ? batch.x : h[static_cast<size_t>(l - 1)]);
    if (l <= k) {
      Matrix& m = masks[static_cast<size_t>(l - 1)];
      m.resize(arch.hidden_width(l), per_example ? cols : 1);
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        for (Eigen::Index row = 0; row < m.rows(); ++row)
          m(row, c) = keep(rng) ? 1.0 : 0.0;
      if (per_example)
        z = z.cwiseProduct(m);
      else
        z = z.array().colwise() * m.col(0).array();
      h[static_cast<size_t>(l)] = z;
    }
  }
  const Matrix y_hat = scale * z;
  const double loss = (batch.y - y_hat).squaredNorm() / n;

  // backward
  std::vector<Matrix> grad(ws.weights.size());
  Matrix g = (2.0 * scale / n) * (y_hat - batch.y);
  for (int l = k + 1; l >= 1; --l) {
    grad[static_cast<size_t>(l - 1)] =
        g * (l == 1 ? batch.x : h[static_cast<size_t>(l - 1)]).transpose();
    if (l > 1) {
      g = ws.weights[static_cast<size_t>(l - 1)].transpose() * g;
      const Matrix& m = masks[static_cast<size_t>(l - 2)];
      if (per_example)
        g = g.cwiseProduct(m);
      else
        g = g.array().colwise() * m.col(0).array();
    }
  }

  std::vector<Matrix> updated;
  updated.reserve(ws.weights.size());
  for (size_t i = 0; i < ws.weights.size(); ++i) {
    if (!grad[i].allFinite()) throw DivergenceError(step);
    updated.push_back(ws.weights[i] - lr * grad[i]);
  }
  SgdStepResult out{WeightStack(std::move(updated)), loss};
  return out;
}

struct TrainConfig {
  double theta = 0.5;
  int minibatch = 200;
  double learning_rate = 0.0; // 0 = tune over {1, 0.1, 0.01} on a pilot run
  long steps = 5000;
  long log_stride = 100;
  std::uint64_t seed = 0;
  int repeats = 10;
  double init_scale = 1.0;
  bool per_example_masks = false; // fresh masks per batch column instead of one shared draw
};

struct TrajectoryRecord {
  long step = 0;
  double batch_loss = 0.0;     // stochastic minibatch loss at this step
  double l_theta_closed = 0.0; // L + R, recomputed in closed form
  double l = 0.0;              // population risk ||N - W_map||_F^2
  double r = 0.0;              // explicit regularizer
  Vector sigma;                // singular values of the network map
  std::vector<double> gaps;    // r_1 .. r_k
  double overall_gap = 0.0;
  bool gaps_defined = false;
};

struct TrainTrajectory {
  std::vector<TrajectoryRecord> records;
  bool diverged = false;
  long diverged_at = -1;
};

struct TrainResult {
  TrainTrajectory trajectory;
  WeightStack final_weights{std::vector<Matrix>{Matrix::Zero(1, 1), Matrix::Zero(1, 1)}};
  double learning_rate_used = 0.0;
};

namespace detail {

inline TrajectoryRecord log_record(long step, double batch_loss, const WeightStack& ws,
                                   const DataModel& model, const DropoutConfig& cfg,
                                   const InputMoment& m) {
  TrajectoryRecord rec;
  rec.step = step;
  rec.batch_loss = batch_loss;
  const Matrix map = network_map(ws);
  rec.l = (model.n_map - map).squaredNorm();
  rec.r = explicit_regularizer(ws, cfg, m);
  rec.l_theta_closed = rec.l + rec.r;
  rec.sigma = svd(map).sigma;
  const GapReport g = normalized_gaps(ws, cfg, m);
  rec.gaps_defined = g.defined;
  rec.gaps = g.per_level;
  rec.overall_gap = g.overall;
  return rec;
}

// One SGD run from a fixed init; logging every log_stride steps plus the last.
inline TrainResult run_sgd(const Architecture& arch, const DataModel& model,
                           const DropoutConfig& cfg, const TrainConfig& tc, double lr,
                           long steps, bool log) {
  const InputMoment m = InputMoment::identity(arch.input_dim());
  WeightStack ws = random_init(arch, tc.init_scale, tc.seed);
  std::mt19937_64 rng(tc.seed ^ 0x5851f42d4c957f2dull);

  TrainResult result;
  result.learning_rate_used = lr;
  double last_loss = 0.0;
  {
    Batch b0 = sample_batch(model, tc.minibatch, rng);
    last_loss = (b0.y - std::pow(cfg.theta, -(arch.depth())) * Matrix(network_map(ws) * b0.x))
                    .squaredNorm() /
                static_cast<double>(tc.minibatch);
  }
  if (log) result.trajectory.records.push_back(log_record(0, last_loss, ws, model, cfg, m));

  for (long step = 1; step <= steps; ++step) {
    Batch batch = sample_batch(model, tc.minibatch, rng);
    try {
      SgdStepResult sr = dropout_sgd_step(ws, cfg, batch, lr, rng, step, tc.per_example_masks);
      ws = std::move(sr.weights);
      last_loss = sr.batch_loss;
    } catch (const DivergenceError&) {
      result.trajectory.diverged = true;
      result.trajectory.diverged_at = step;
      break;
    }
    if (!network_map(ws).allFinite()) {
      result.trajectory.diverged = true;
      result.trajectory.diverged_at = step;
      break;
    }
    if (log && (step % tc.log_stride == 0 || step == steps))
      result.trajectory.records.push_back(log_record(step, last_loss, ws, model, cfg, m));
  }
  result.final_weights = ws;
  return result;
}

} // namespace detail

/// Full training run; when tc.learning_rate == 0 the rate is picked from
/// {1, 0.1, 0.01} by best final closed-form L_theta on a 10%-budget pilot.
inline TrainResult train(const Architecture& arch, const DataModel& model,
                         const DropoutConfig& cfg, const TrainConfig& tc) {
  double lr = tc.learning_rate;
  if (lr <= 0.0) {
    const long pilot_steps = std::max<long>(1, tc.steps / 10);
    double best = std::numeric_limits<double>::infinity();
    for (double cand : {1.0, 0.1, 0.01}) {
      TrainResult pilot = detail::run_sgd(arch, model, cfg, tc, cand, pilot_steps, false);
      if (pilot.trajectory.diverged) continue;
      const Matrix map = network_map(pilot.final_weights);
      const double l_theta =
          (model.n_map - map).squaredNorm() +
          explicit_regularizer(pilot.final_weights, cfg,
                               InputMoment::identity(arch.input_dim()));
      if (l_theta < best) {
        best = l_theta;
        lr = cand;
      }
    }
    if (lr <= 0.0) throw DivergenceError(0);
  }
  TrainResult result = detail::run_sgd(arch, model, cfg, tc, lr, tc.steps, true);
  if (result.trajectory.diverged && result.trajectory.records.empty())
    throw DivergenceError(result.trajectory.diverged_at);
  return result;
}

struct SweepRow {
  double theta = 0.0;
  int repeat = 0;
  Vector sigma;          // repeat's final map spectrum, sorted
  int effective_rank = 0; // count of sigma_i > 0.05 * sigma_1
  bool diverged = false;
};

inline int effective_rank(const Vector& sigma, double rel_cut = 0.05) {
  if (sigma.size() == 0 || sigma[0] <= 0.0) return 0;
  int r = 0;
  for (Eigen::Index i = 0; i < sigma.size(); ++i)
    if (sigma[i] > rel_cut * sigma[0]) ++r;
  return r;
}

/// Trains one network per (theta, repeat) cell; cells run in parallel with
/// per-cell seeds, results stored by index so output is thread-count invariant.
inline std::vector<SweepRow> spectrum_sweep(const Architecture& arch,
                                            const DataModel& model,
                                            const std::vector<double>& thetas,
                                            const TrainConfig& tc, int threads = 0) {
  const int cells = static_cast<int>(thetas.size()) * tc.repeats;
  std::vector<SweepRow> rows(static_cast<size_t>(cells));
  if (threads <= 0) threads = static_cast<int>(std::thread::hardware_concurrency());
  threads = std::max(1, std::min(threads, cells));

  std::atomic<int> next{0};
  auto worker = [&]() {
    for (int idx = next.fetch_add(1); idx < cells; idx = next.fetch_add(1)) {
      const int ti = idx / tc.repeats;
      const int rep = idx % tc.repeats;
      SweepRow& row = rows[static_cast<size_t>(idx)];
      row.theta = thetas[static_cast<size_t>(ti)];
      row.repeat = rep;
      TrainConfig cell_tc = tc;
      cell_tc.seed = tc.seed + 0x1000003ull * static_cast<std::uint64_t>(idx + 1);
      try {
        DropoutConfig cfg(row.theta);
        TrainResult res = train(arch, model, cfg, cell_tc);
        if (res.trajectory.diverged) {
          row.diverged = true;
          continue;
        }
        row.sigma = svd(network_map(res.final_weights)).sigma;
        row.effective_rank = effective_rank(row.sigma);
      } catch (const DivergenceError&) {
        row.diverged = true;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();
  return rows;
}

} // namespace droplin
