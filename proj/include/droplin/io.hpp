#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "droplin/optima.hpp"
#include "droplin/regularizer.hpp"
#include "droplin/training.hpp"

namespace droplin {

using nlohmann::json;

inline json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const json& j) {
  if (!j.is_array() || j.empty() || !j[0].is_array())
    throw std::invalid_argument("matrix JSON must be a non-empty array of rows");
  const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  const Eigen::Index cols = static_cast<Eigen::Index>(j[0].size());
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(j[static_cast<size_t>(r)].size()) != cols)
      throw std::invalid_argument("matrix JSON rows have inconsistent lengths");
    for (Eigen::Index c = 0; c < cols; ++c)
      m(r, c) = j[static_cast<size_t>(r)][static_cast<size_t>(c)].get<double>();
  }
  return m;
}

inline Vector vector_from_json(const json& j) {
  if (!j.is_array()) throw std::invalid_argument("vector JSON must be an array");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = j[static_cast<size_t>(i)].get<double>();
  return v;
}

inline json weight_stack_to_json(const WeightStack& ws) {
  json j;
  j["widths"] = ws.architecture().widths;
  json layers = json::array();
  for (const Matrix& w : ws.weights) layers.push_back(matrix_to_json(w));
  j["weights"] = std::move(layers);
  return j;
}

inline WeightStack weight_stack_from_json(const json& j) {
  if (!j.contains("weights"))
    throw std::invalid_argument("weight stack JSON needs a \"weights\" field");
  std::vector<Matrix> weights;
  for (const json& layer : j.at("weights")) weights.push_back(matrix_from_json(layer));
  WeightStack ws(std::move(weights));
  if (j.contains("widths")) {
    const std::vector<int> widths = j.at("widths").get<std::vector<int>>();
    if (widths != ws.architecture().widths)
      throw std::invalid_argument("widths field disagrees with weight shapes");
  }
  return ws;
}

inline json report_to_json(const RegularizerReport& rep) {
  json j;
  j["R"] = rep.total_r;
  j["nu"] = rep.nu;
  j["nuclear"] = rep.map_nuclear_c;
  json levels = json::array();
  for (size_t l = 0; l < rep.levels.size(); ++l) {
    json lv;
    lv["l"] = l + 1;
    lv["R_l"] = rep.levels[l].r_l;
    lv["LB_l"] = rep.levels[l].lb_l;
    if (rep.gaps_defined)
      lv["gap"] = rep.levels[l].gap;
    else
      lv["gap"] = nullptr;
    levels.push_back(std::move(lv));
  }
  j["levels"] = std::move(levels);
  if (rep.gaps_defined)
    j["overall_gap"] = rep.overall_gap;
  else
    j["overall_gap"] = nullptr;
  return j;
}

inline json solution_to_json(const SpectrumSolution& sol) {
  json j;
  j["rho"] = sol.rho;
  j["alpha_rho"] = sol.alpha_rho;
  j["kappa_rho"] = sol.kappa_rho;
  json sigma = json::array();
  for (Eigen::Index i = 0; i < sol.shrunk_sigma.size(); ++i)
    sigma.push_back(sol.shrunk_sigma[i]);
  j["shrunk_sigma"] = std::move(sigma);
  j["W_star"] = matrix_to_json(sol.w_star);
  j["gap_holds"] = sol.gap_holds;
  j["objective_value"] = sol.objective_value;
  return j;
}

inline json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open file: " + path);
  json j;
  in >> j;
  return j;
}

inline void save_json_file(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::invalid_argument("cannot open file for writing: " + path);
  out << j.dump(2) << "\n";
}

inline std::string trajectory_csv_header(int spectrum_size, int depth) {
  std::string h = "step,L_theta_closed,L,R";
  for (int i = 1; i <= spectrum_size; ++i) h += ",sigma_" + std::to_string(i);
  for (int l = 1; l <= depth; ++l) h += ",r_" + std::to_string(l);
  h += ",r_overall";
  return h;
}

inline void append_trajectory_csv(std::ostream& out, const TrainTrajectory& traj) {
  char buf[64];
  auto num = [&buf](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  for (const TrajectoryRecord& rec : traj.records) {
    out << rec.step << ',' << num(rec.l_theta_closed) << ',' << num(rec.l) << ','
        << num(rec.r);
    for (Eigen::Index i = 0; i < rec.sigma.size(); ++i) out << ',' << num(rec.sigma[i]);
    for (double g : rec.gaps) out << ',' << num(rec.gaps_defined ? g : std::nan(""));
    out << ',' << num(rec.gaps_defined ? rec.overall_gap : std::nan("")) << '\n';
  }
}

inline void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows,
                            int spectrum_size) {
  out << "theta,repeat";
  for (int i = 1; i <= spectrum_size; ++i) out << ",sigma_" << i;
  out << ",effective_rank\n";
  char buf[64];
  auto num = [&buf](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  for (const SweepRow& row : rows) {
    out << num(row.theta) << ',' << row.repeat;
    for (int i = 0; i < spectrum_size; ++i)
      out << ',' << num(row.diverged ? std::nan("") : row.sigma[i]);
    out << ',' << (row.diverged ? std::string("nan") : std::to_string(row.effective_rank))
        << '\n';
  }
}

} // namespace droplin
