// droplin: dropout regularizer calculus for deep linear networks.
//
// Subcommands: nu, reg, verify, solve, train, spectrum, gap, make-equalized.
// stdout carries machine-readable JSON (or a one-line summary for the
// experiment drivers); progress and diagnostics go to stderr.
// Exit codes: 0 success, 1 verification failure, 2 input error, 3 capacity.

#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "droplin/io.hpp"

namespace {

using namespace droplin;
using nlohmann::json;

int resolve_threads(int flag_value) {
  if (flag_value > 0) return flag_value;
  if (const char* env = std::getenv("DROPLIN_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  return 0; // library default: machine parallelism
}

InputMoment moment_from_option(const std::string& path, int dim) {
  if (path.empty()) return InputMoment::identity(dim);
  const json j = load_json_file(path);
  return InputMoment::from_matrix(matrix_from_json(j.contains("C") ? j.at("C") : j));
}

TrainConfig train_config_from_json(const json& cfg) {
  TrainConfig tc;
  tc.theta = cfg.value("theta", 0.5);
  tc.minibatch = cfg.value("minibatch", 200);
  tc.learning_rate = cfg.value("lr", 0.0);
  tc.steps = cfg.value("steps", 5000L);
  tc.log_stride = cfg.value("log_stride", 100L);
  tc.seed = cfg.value("seed", 0ULL);
  tc.repeats = cfg.value("repeats", 10);
  tc.init_scale = cfg.value("init_scale", 1.0);
  tc.per_example_masks = cfg.value("per_example_masks", false);
  return tc;
}

DataModel model_from_json(const json& cfg, const Architecture& arch) {
  if (cfg.contains("N")) {
    DataModel m;
    m.n_map = matrix_from_json(cfg.at("N"));
    m.planted_rank = numerical_rank(m.n_map);
    m.noise_std = 0.0;
    return m;
  }
  return make_data_model(arch.output_dim(), arch.input_dim(),
                         cfg.value("planted_rank", 1), cfg.value("noise_std", 0.01),
                         cfg.value("model_seed", 12345ULL));
}

int cmd_nu(const std::string& arch_path, double theta) {
  const json j = load_json_file(arch_path);
  std::vector<int> widths = j.at("widths").get<std::vector<int>>();
  Architecture arch(widths);
  DropoutConfig cfg(theta);
  json out;
  out["nu"] = effective_nu(arch, cfg);
  std::cout << out.dump() << "\n";
  return 0;
}

int cmd_reg(const std::string& weights_path, double theta,
            const std::string& moment_path) {
  const WeightStack ws = weight_stack_from_json(load_json_file(weights_path));
  DropoutConfig cfg(theta);
  const InputMoment m = moment_from_option(moment_path, ws.architecture().input_dim());
  std::cout << report_to_json(regularizer_report(ws, cfg, m)).dump() << "\n";
  return 0;
}

int cmd_verify(const std::string& weights_path, double theta,
               const std::string& moment_path, int budget, bool corrupt) {
  const WeightStack ws = weight_stack_from_json(load_json_file(weights_path));
  DropoutConfig cfg(theta);
  const InputMoment m = moment_from_option(moment_path, ws.architecture().input_dim());

  int units = 0;
  for (int l = 1; l <= ws.depth(); ++l) units += ws.architecture().hidden_width(l);
  if (units > budget) {
    std::cerr << "verify: " << units << " hidden units exceed budget " << budget
              << "\n";
    return 3;
  }

  double closed = explicit_regularizer(ws, cfg, m);
  if (corrupt) closed *= 1.0 + 1e-3; // negative-control hook for tests
  const double enumerated = exact_dropout_regularizer(ws, cfg, m);
  const double abs_diff = std::abs(closed - enumerated);
  const double rel_diff = abs_diff / std::max(1.0, std::abs(enumerated));
  json out;
  out["closed"] = closed;
  out["enumerated"] = enumerated;
  out["abs_diff"] = abs_diff;
  out["rel_diff"] = rel_diff;
  std::cout << out.dump() << "\n";
  return rel_diff <= 1e-9 ? 0 : 1;
}

int cmd_solve(const std::string& problem_path) {
  const json j = load_json_file(problem_path);
  const Matrix c_yx = matrix_from_json(j.at("Cyx"));
  const InputMoment m = j.contains("C")
                            ? InputMoment::from_matrix(matrix_from_json(j.at("C")))
                            : InputMoment::identity(static_cast<int>(c_yx.cols()));
  Architecture arch(j.at("widths").get<std::vector<int>>());
  DropoutConfig cfg(j.at("theta").get<double>());
  const double nu = effective_nu(arch, cfg);
  SpectrumSolution sol = solve_convex_envelope(c_yx, m, nu, arch.max_map_rank());
  json out = solution_to_json(sol);
  out["nu"] = nu;
  std::cout << out.dump() << "\n";
  return 0;
}

int cmd_make_equalized(const std::string& u_json, const std::string& v_json,
                       const std::string& widths_json, const std::string& out_path) {
  const Vector u = vector_from_json(json::parse(u_json));
  const Vector v = vector_from_json(json::parse(v_json));
  Architecture arch(json::parse(widths_json).get<std::vector<int>>());
  const InputMoment m = InputMoment::identity(arch.input_dim());
  const WeightStack ws = equalized_rank1(arch, u, v, m);
  save_json_file(out_path, weight_stack_to_json(ws));
  json out;
  out["written"] = out_path;
  std::cout << out.dump() << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_path) {
  const json cfg = load_json_file(config_path);
  Architecture arch(cfg.at("widths").get<std::vector<int>>());
  const TrainConfig tc = train_config_from_json(cfg);
  const DataModel model = model_from_json(cfg, arch);
  DropoutConfig dcfg(tc.theta);

  TrainResult res = train(arch, model, dcfg, tc);
  std::ofstream out(out_path);
  if (!out) throw std::invalid_argument("cannot open output: " + out_path);
  const int spec_size = static_cast<int>(res.trajectory.records.front().sigma.size());
  out << trajectory_csv_header(spec_size, arch.depth()) << "\n";
  append_trajectory_csv(out, res.trajectory);

  const TrajectoryRecord& last = res.trajectory.records.back();
  json summary;
  summary["final_L_theta"] = last.l_theta_closed;
  summary["final_r_overall"] = last.gaps_defined ? json(last.overall_gap) : json();
  summary["lr"] = res.learning_rate_used;
  summary["diverged"] = res.trajectory.diverged;
  std::cout << summary.dump() << "\n";
  return res.trajectory.diverged ? 1 : 0;
}

int cmd_gap(const std::string& config_path, const std::string& out_path, int threads) {
  (void)threads;
  const json cfg = load_json_file(config_path);
  Architecture arch(cfg.at("widths").get<std::vector<int>>());
  TrainConfig tc = train_config_from_json(cfg);
  const DataModel model = model_from_json(cfg, arch);
  DropoutConfig dcfg(tc.theta);

  std::ofstream out(out_path);
  if (!out) throw std::invalid_argument("cannot open output: " + out_path);
  bool wrote_header = false;
  std::vector<double> finals;
  int diverged = 0;
  for (int rep = 0; rep < tc.repeats; ++rep) {
    TrainConfig rep_tc = tc;
    rep_tc.seed = tc.seed + 0x9e3779b9ull * static_cast<std::uint64_t>(rep + 1);
    TrainResult res = train(arch, model, dcfg, rep_tc);
    if (!wrote_header) {
      const int spec_size = static_cast<int>(res.trajectory.records.front().sigma.size());
      out << trajectory_csv_header(spec_size, arch.depth()) << "\n";
      wrote_header = true;
    }
    append_trajectory_csv(out, res.trajectory);
    if (res.trajectory.diverged) {
      ++diverged;
      continue;
    }
    const TrajectoryRecord& last = res.trajectory.records.back();
    if (last.gaps_defined) finals.push_back(last.overall_gap);
    std::cerr << "gap: repeat " << rep << " final r = "
              << (last.gaps_defined ? last.overall_gap : std::nan("")) << "\n";
  }
  if (finals.empty()) {
    std::cerr << "gap: all repeats diverged\n";
    return 1;
  }
  std::sort(finals.begin(), finals.end());
  json summary;
  summary["median_final_r_overall"] = finals[finals.size() / 2];
  summary["repeats"] = tc.repeats;
  summary["diverged"] = diverged;
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_spectrum(const std::string& config_path, const std::string& out_path,
                 int threads) {
  const json cfg = load_json_file(config_path);
  Architecture arch(cfg.at("widths").get<std::vector<int>>());
  TrainConfig tc = train_config_from_json(cfg);
  const DataModel model = model_from_json(cfg, arch);
  std::vector<double> thetas = cfg.value("thetas", std::vector<double>{0.9, 0.7, 0.5, 0.3});

  const std::vector<SweepRow> rows = spectrum_sweep(arch, model, thetas, tc, threads);
  std::ofstream out(out_path);
  if (!out) throw std::invalid_argument("cannot open output: " + out_path);
  const int spec_size = static_cast<int>(svd(model.n_map).sigma.size());
  write_sweep_csv(out, rows, spec_size);

  json summary = json::array();
  for (double theta : thetas) {
    double sum = 0.0;
    int n = 0;
    for (const SweepRow& row : rows)
      if (row.theta == theta && !row.diverged) {
        sum += row.effective_rank;
        ++n;
      }
    json cell;
    cell["theta"] = theta;
    cell["mean_effective_rank"] = n > 0 ? json(sum / n) : json();
    summary.push_back(std::move(cell));
  }
  std::cout << summary.dump() << "\n";
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"dropout regularizer calculus for deep linear networks"};
  app.require_subcommand(1);

  double theta = 0.5;
  int threads = 0;
  int budget = 24;
  std::uint64_t seed = 0;
  std::string in_path, moment_path, out_path, problem_path, config_path;
  std::string u_json, v_json, widths_json;
  bool corrupt = false;

  CLI::App* nu = app.add_subcommand("nu", "effective regularization parameter");
  nu->add_option("arch", in_path, "architecture JSON file ({\"widths\": [...]})")
      ->required();
  nu->add_option("--theta", theta, "retain probability")->required();

  CLI::App* reg = app.add_subcommand("reg", "regularizer report for a weight file");
  reg->add_option("weights", in_path, "weight stack JSON file")->required();
  reg->add_option("--theta", theta)->required();
  reg->add_option("--moment", moment_path, "input second-moment JSON (default I)");

  CLI::App* verify = app.add_subcommand("verify", "closed form vs mask enumeration");
  verify->add_option("weights", in_path)->required();
  verify->add_option("--theta", theta)->required();
  verify->add_option("--moment", moment_path);
  verify->add_option("--budget", budget, "max total hidden units to enumerate");
  verify->add_flag("--corrupt-closed-form", corrupt)->group(""); // test hook

  CLI::App* solve = app.add_subcommand("solve", "convex-envelope global optimum");
  solve->add_option("problem", problem_path, "problem JSON {Cyx, C, widths, theta}")
      ->required();

  CLI::App* train_cmd = app.add_subcommand("train", "dropout-SGD training run");
  train_cmd->add_option("config", config_path)->required();
  train_cmd->add_option("--out", out_path, "trajectory CSV path")->required();

  CLI::App* spectrum = app.add_subcommand("spectrum", "theta sweep of final spectra");
  spectrum->add_option("config", config_path)->required();
  spectrum->add_option("--out", out_path, "sweep CSV path")->required();
  spectrum->add_option("--threads", threads);

  CLI::App* gap = app.add_subcommand("gap", "equalization-gap trajectories");
  gap->add_option("config", config_path)->required();
  gap->add_option("--out", out_path, "trajectory CSV path")->required();
  gap->add_option("--threads", threads);

  CLI::App* make_eq = app.add_subcommand("make-equalized", "equalized rank-1 weights");
  make_eq->add_option("--u", u_json, "output-side vector as JSON array")->required();
  make_eq->add_option("--v", v_json, "input-side vector as JSON array")->required();
  make_eq->add_option("--widths", widths_json, "widths as JSON array")->required();
  make_eq->add_option("--out", out_path)->required();

  app.add_option("--seed", seed, "base RNG seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (nu->parsed()) return cmd_nu(in_path, theta);
    if (reg->parsed()) return cmd_reg(in_path, theta, moment_path);
    if (verify->parsed()) return cmd_verify(in_path, theta, moment_path, budget, corrupt);
    if (solve->parsed()) return cmd_solve(problem_path);
    if (train_cmd->parsed()) return cmd_train(config_path, out_path);
    if (spectrum->parsed())
      return cmd_spectrum(config_path, out_path, resolve_threads(threads));
    if (gap->parsed()) return cmd_gap(config_path, out_path, resolve_threads(threads));
    if (make_eq->parsed())
      return cmd_make_equalized(u_json, v_json, widths_json, out_path);
  } catch (const droplin::CapacityError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const droplin::DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::domain_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
