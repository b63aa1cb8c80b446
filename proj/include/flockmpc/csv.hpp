// SPDX-License-Identifier: MIT
#pragma once

// CSV interchange for simulation artifacts. Doubles are printed with %.17g,
// which round-trips IEEE binary64 exactly, so write -> read -> write is
// bit-identical. Layouts (all agent-major, matching the flat state layout):
//   trajectory: t, x1_1..xN_d, v1_1..vN_d, u1_1..uN_d
//               (controls are step-aligned; the final row leaves them empty)
//   moments:    t, vbar_1..vbar_d, sigma2
//   bounds:     t, lower, upper, sigma2
//   dataset:    s_1..s_{2dN}, u_1..u_{dN}, V, gV_1..gV_{2dN}

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "flockmpc/ensemble.hpp"
#include "flockmpc/mdpc.hpp"
#include "flockmpc/surrogate.hpp"

namespace flockmpc {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

inline double parse_double(const std::string& s) {
  std::size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("bad numeric field: " + s);
  return v;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  return out;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  return in;
}

inline void append_block(std::string& line, const Eigen::MatrixXd& m) {
  for (int i = 0; i < m.rows(); ++i)
    for (int k = 0; k < m.cols(); ++k) {
      line += ',';
      line += format_double(m(i, k));
    }
}

}  // namespace detail

// ── Trajectory ──────────────────────────────────────────────────────────────

inline void write_trajectory_csv(const std::string& path,
                                 const Trajectory& traj) {
  if (traj.states.empty())
    throw std::invalid_argument("write_trajectory_csv: empty trajectory");
  const int n = traj.states.front().agents();
  const int d = traj.states.front().dim();
  std::ofstream out = detail::open_out(path);

  std::string header = "t";
  const auto block_header = [&](const char* tag) {
    for (int i = 1; i <= n; ++i)
      for (int k = 1; k <= d; ++k)
        header += "," + std::string(tag) + std::to_string(i) + "_" +
                  std::to_string(k);
  };
  block_header("x");
  block_header("v");
  block_header("u");
  out << header << "\n";

  for (std::size_t h = 0; h < traj.states.size(); ++h) {
    std::string line = format_double(traj.states[h].time);
    detail::append_block(line, traj.states[h].positions);
    detail::append_block(line, traj.states[h].velocities);
    if (h < traj.controls.size())
      detail::append_block(line, traj.controls[h]);
    else
      line.append(static_cast<std::size_t>(n) * d, ',');
    out << line << "\n";
  }
}

inline Trajectory read_trajectory_csv(const std::string& path) {
  std::ifstream in = detail::open_in(path);
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("trajectory csv: missing header");
  const std::vector<std::string> header = detail::split_csv_line(line);
  int xcount = 0;
  for (const std::string& h : header)
    if (!h.empty() && h[0] == 'x') ++xcount;
  if (xcount == 0 || header.size() != 1 + 3 * static_cast<std::size_t>(xcount))
    throw std::runtime_error("trajectory csv: unexpected header layout");
  // Last position column is "xN_d".
  const std::string& last = header[xcount];
  const std::size_t sep = last.rfind('_');
  const int n = std::stoi(last.substr(1, sep - 1));
  const int d = std::stoi(last.substr(sep + 1));
  if (n * d != xcount)
    throw std::runtime_error("trajectory csv: header dimension mismatch");

  Trajectory traj;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> f = detail::split_csv_line(line);
    if (f.size() != header.size())
      throw std::runtime_error("trajectory csv: ragged row");
    EnsembleState st;
    st.time = detail::parse_double(f[0]);
    st.positions.resize(n, d);
    st.velocities.resize(n, d);
    int at = 1;
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < d; ++k) st.positions(i, k) = detail::parse_double(f[at++]);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < d; ++k) st.velocities(i, k) = detail::parse_double(f[at++]);
    if (f[at].empty()) {
      traj.states.push_back(std::move(st));
      continue;  // terminal row: no control
    }
    Eigen::MatrixXd u(n, d);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < d; ++k) u(i, k) = detail::parse_double(f[at++]);
    traj.states.push_back(std::move(st));
    traj.controls.push_back(std::move(u));
  }
  return traj;
}

// ── Moment trace ────────────────────────────────────────────────────────────

inline void write_moments_csv(const std::string& path, const MomentTrace& trace) {
  if (trace.times.empty())
    throw std::invalid_argument("write_moments_csv: empty trace");
  const int d = static_cast<int>(trace.mean_velocity.front().size());
  std::ofstream out = detail::open_out(path);
  std::string header = "t";
  for (int k = 1; k <= d; ++k) header += ",vbar_" + std::to_string(k);
  header += ",sigma2";
  out << header << "\n";
  for (std::size_t i = 0; i < trace.times.size(); ++i) {
    std::string line = format_double(trace.times[i]);
    for (int k = 0; k < d; ++k)
      line += "," + format_double(trace.mean_velocity[i](k));
    line += "," + format_double(trace.variance[i]);
    out << line << "\n";
  }
}

inline MomentTrace read_moments_csv(const std::string& path) {
  std::ifstream in = detail::open_in(path);
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("moments csv: missing header");
  const std::size_t cols = detail::split_csv_line(line).size();
  if (cols < 3) throw std::runtime_error("moments csv: too few columns");
  const int d = static_cast<int>(cols) - 2;
  MomentTrace trace;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> f = detail::split_csv_line(line);
    if (f.size() != cols) throw std::runtime_error("moments csv: ragged row");
    trace.times.push_back(detail::parse_double(f[0]));
    Eigen::VectorXd vbar(d);
    for (int k = 0; k < d; ++k) vbar(k) = detail::parse_double(f[1 + k]);
    trace.mean_velocity.push_back(std::move(vbar));
    trace.variance.push_back(detail::parse_double(f[1 + d]));
  }
  return trace;
}

// ── Variance bounds ─────────────────────────────────────────────────────────

inline void write_bounds_csv(const std::string& path,
                             const std::vector<BoundRow>& rows) {
  std::ofstream out = detail::open_out(path);
  out << "t,lower,upper,sigma2\n";
  for (const BoundRow& r : rows)
    out << format_double(r.t) << ',' << format_double(r.lower) << ','
        << format_double(r.upper) << ',' << format_double(r.sigma2) << "\n";
}

inline std::vector<BoundRow> read_bounds_csv(const std::string& path) {
  std::ifstream in = detail::open_in(path);
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("bounds csv: missing header");
  std::vector<BoundRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> f = detail::split_csv_line(line);
    if (f.size() != 4) throw std::runtime_error("bounds csv: ragged row");
    rows.push_back({detail::parse_double(f[0]), detail::parse_double(f[1]),
                    detail::parse_double(f[2]), detail::parse_double(f[3])});
  }
  return rows;
}

// ── Training dataset ────────────────────────────────────────────────────────

inline void write_dataset_csv(const std::string& path, const Dataset& ds) {
  const int nd = ds.agents * ds.dim;
  std::ofstream out = detail::open_out(path);
  std::string header;
  for (int k = 1; k <= 2 * nd; ++k) header += "s_" + std::to_string(k) + ",";
  for (int k = 1; k <= nd; ++k) header += "u_" + std::to_string(k) + ",";
  header += "V";
  for (int k = 1; k <= 2 * nd; ++k) header += ",gV_" + std::to_string(k);
  out << header << "\n";
  for (const TrainingSample& s : ds.samples) {
    std::string line;
    for (int k = 0; k < 2 * nd; ++k) line += format_double(s.state(k)) + ",";
    for (int k = 0; k < nd; ++k) line += format_double(s.control(k)) + ",";
    line += format_double(s.value);
    for (int k = 0; k < 2 * nd; ++k) line += "," + format_double(s.value_gradient(k));
    out << line << "\n";
  }
}

inline Dataset read_dataset_csv(const std::string& path, int agents, int dim) {
  const int nd = agents * dim;
  std::ifstream in = detail::open_in(path);
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("dataset csv: missing header");
  const std::size_t expected = static_cast<std::size_t>(5 * nd + 1);
  if (detail::split_csv_line(line).size() != expected)
    throw std::runtime_error("dataset csv: header does not match agents/dim");
  Dataset ds;
  ds.agents = agents;
  ds.dim = dim;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> f = detail::split_csv_line(line);
    if (f.size() != expected) throw std::runtime_error("dataset csv: ragged row");
    TrainingSample s;
    s.state.resize(2 * nd);
    s.control.resize(nd);
    s.value_gradient.resize(2 * nd);
    int at = 0;
    for (int k = 0; k < 2 * nd; ++k) s.state(k) = detail::parse_double(f[at++]);
    for (int k = 0; k < nd; ++k) s.control(k) = detail::parse_double(f[at++]);
    s.value = detail::parse_double(f[at++]);
    for (int k = 0; k < 2 * nd; ++k)
      s.value_gradient(k) = detail::parse_double(f[at++]);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace flockmpc
