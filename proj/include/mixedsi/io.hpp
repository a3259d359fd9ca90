#pragma once

#include <Eigen/Dense>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mixedsi/analytic.hpp"
#include "mixedsi/errors.hpp"
#include "mixedsi/estimation.hpp"
#include "mixedsi/model.hpp"

namespace mixedsi {

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string> split_csv(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.emplace_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline double parse_number(const std::string& cell, std::size_t row, const std::string& column) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = first + cell.size();
  if (!cell.empty() && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (cell.empty() || ec != std::errc() || ptr != last || !std::isfinite(v)) {
    throw Error(ErrorCode::ParseError,
                "row " + std::to_string(row) + ", column '" + column + "': not a finite number: '" + cell + "'");
  }
  return v;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;  // data rows; row numbers are 1-based file lines
  std::vector<std::size_t> line_numbers;
};

inline CsvTable read_csv(std::istream& in) {
  CsvTable t;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto cells = split_csv(line);
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size()) {
      throw Error(ErrorCode::ParseError, "row " + std::to_string(lineno) + ": expected " +
                                             std::to_string(t.header.size()) + " fields, found " +
                                             std::to_string(cells.size()));
    }
    t.rows.push_back(std::move(cells));
    t.line_numbers.push_back(lineno);
  }
  if (t.header.empty()) throw Error(ErrorCode::EmptyFile, "no header row");
  return t;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::ParseError, "cannot open '" + path + "'");
  return in;
}

}  // namespace detail

/// Unit-level CSV `cluster,y,x1,...,xp`. Clusters keep first-appearance order
/// and an intercept column is prepended.
inline BlockLmmData read_unit_csv(std::istream& in) {
  const auto t = detail::read_csv(in);
  if (t.header.size() < 3 || t.header[0] != "cluster" || t.header[1] != "y") {
    throw Error(ErrorCode::ParseError, "row 1: header must be cluster,y,x1,...,xp");
  }
  if (t.rows.empty()) throw Error(ErrorCode::EmptyFile, "no data rows");
  const std::size_t p = t.header.size() - 2;
  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& id = t.rows[r][0];
    if (id.empty()) throw Error(ErrorCode::ParseError, "row " + std::to_string(t.line_numbers[r]) + ", column 'cluster': empty id");
    auto [it, fresh] = groups.try_emplace(id);
    if (fresh) order.push_back(id);
    it->second.push_back(r);
  }
  std::vector<ClusterBlock> clusters;
  for (const auto& id : order) {
    const auto& rows = groups[id];
    ClusterBlock c;
    c.id = id;
    c.y.resize(static_cast<Index>(rows.size()));
    c.X.resize(static_cast<Index>(rows.size()), static_cast<Index>(p + 1));
    for (std::size_t j = 0; j < rows.size(); ++j) {
      const auto& cells = t.rows[rows[j]];
      const auto line = t.line_numbers[rows[j]];
      const auto jj = static_cast<Index>(j);
      c.y(jj) = detail::parse_number(cells[1], line, "y");
      c.X(jj, 0) = 1.0;
      for (std::size_t k = 0; k < p; ++k) {
        c.X(jj, static_cast<Index>(k + 1)) = detail::parse_number(cells[k + 2], line, t.header[k + 2]);
      }
    }
    clusters.push_back(std::move(c));
  }
  return BlockLmmData(ModelTag::NERM, std::move(clusters));
}

/// Area-level CSV `area,y,x1,...,xp,error_var`, one row per area.
inline BlockLmmData read_area_csv(std::istream& in) {
  const auto t = detail::read_csv(in);
  if (t.header.size() < 4 || t.header[0] != "area" || t.header[1] != "y" || t.header.back() != "error_var") {
    throw Error(ErrorCode::ParseError, "row 1: header must be area,y,x1,...,xp,error_var");
  }
  if (t.rows.empty()) throw Error(ErrorCode::EmptyFile, "no data rows");
  const std::size_t p = t.header.size() - 3;
  std::vector<ClusterBlock> clusters;
  std::unordered_map<std::string, std::size_t> seen;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& cells = t.rows[r];
    const auto line = t.line_numbers[r];
    if (!seen.emplace(cells[0], r).second) {
      throw Error(ErrorCode::ParseError, "row " + std::to_string(line) + ", column 'area': duplicate area '" + cells[0] + "'");
    }
    ClusterBlock c;
    c.id = cells[0];
    c.y.resize(1);
    c.y(0) = detail::parse_number(cells[1], line, "y");
    c.X.resize(1, static_cast<Index>(p + 1));
    c.X(0, 0) = 1.0;
    for (std::size_t k = 0; k < p; ++k) c.X(0, static_cast<Index>(k + 1)) = detail::parse_number(cells[k + 2], line, t.header[k + 2]);
    const double v = detail::parse_number(cells.back(), line, "error_var");
    if (!(v > 0.0)) throw Error(ErrorCode::ParseError, "row " + std::to_string(line) + ", column 'error_var': must be positive");
    c.error_var = v;
    clusters.push_back(std::move(c));
  }
  return BlockLmmData(ModelTag::FHM, std::move(clusters));
}

inline BlockLmmData ingest_unit_csv(const std::string& path) {
  auto in = detail::open_input(path);
  return read_unit_csv(in);
}

inline BlockLmmData ingest_area_csv(const std::string& path) {
  auto in = detail::open_input(path);
  return read_area_csv(in);
}

/// Writes the data in the matching input format with round-trip precision.
inline void write_data_csv(std::ostream& os, const BlockLmmData& data) {
  const bool fhm = data.tag() == ModelTag::FHM;
  os << (fhm ? "area,y" : "cluster,y");
  for (Index k = 1; k <= data.p(); ++k) os << ",x" << k;
  if (fhm) os << ",error_var";
  os << '\n';
  char buf[32];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  };
  for (const auto& c : data.clusters()) {
    for (Index j = 0; j < c.size(); ++j) {
      os << c.id << ',' << num(c.y(j));
      for (Index k = 1; k < c.X.cols(); ++k) os << ',' << num(c.X(j, k));
      if (fhm) os << ',' << num(*c.error_var);
      os << '\n';
    }
  }
}

/// Plain numeric matrix CSV (optional header row of non-numeric labels).
inline MatrixXd read_matrix_csv(std::istream& in) {
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv(line);
    if (first) {
      first = false;
      double probe = 0.0;
      const auto& c0 = cells[0];
      const auto [ptr, ec] = std::from_chars(c0.data(), c0.data() + c0.size(), probe);
      if (c0.empty() || ec != std::errc() || ptr != c0.data() + c0.size()) continue;  // header
    }
    std::vector<double> r;
    for (std::size_t k = 0; k < cells.size(); ++k) r.push_back(detail::parse_number(cells[k], lineno, std::to_string(k + 1)));
    if (!rows.empty() && r.size() != rows.front().size()) {
      throw Error(ErrorCode::ParseError, "row " + std::to_string(lineno) + ": ragged matrix row");
    }
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw Error(ErrorCode::EmptyFile, "matrix file has no rows");
  MatrixXd M(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) M(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
  }
  return M;
}

/// Flat `key = value` tube-constant file; `#` starts a comment.
inline TubeConstants read_tube_constants(std::istream& in) {
  TubeConstants k;
  const std::map<std::string, double TubeConstants::*> keys{
      {"kappa0", &TubeConstants::kappa0}, {"zeta0", &TubeConstants::zeta0}, {"kappa2", &TubeConstants::kappa2},
      {"zeta1", &TubeConstants::zeta1},   {"m0", &TubeConstants::m0},       {"euler", &TubeConstants::euler},
      {"xi0", &TubeConstants::xi0},       {"eta0", &TubeConstants::eta0},   {"nu", &TubeConstants::nu}};
  std::string line;
  std::size_t lineno = 0;
  bool any = false;
  while (std::getline(in, line)) {
    ++lineno;
    auto view = std::string_view(line);
    view = view.substr(0, view.find('#'));
    view = detail::trim(view);
    if (view.empty()) continue;
    const auto eq = view.find('=');
    if (eq == std::string_view::npos) throw Error(ErrorCode::ParseError, "row " + std::to_string(lineno) + ": expected key=value");
    const std::string key(detail::trim(view.substr(0, eq)));
    const auto it = keys.find(key);
    if (it == keys.end()) throw Error(ErrorCode::ParseError, "row " + std::to_string(lineno) + ": unknown key '" + key + "'");
    k.*(it->second) = detail::parse_number(std::string(detail::trim(view.substr(eq + 1))), lineno, key);
    any = true;
  }
  if (!any) throw Error(ErrorCode::EmptyFile, "no tube constants");
  check_tube_constants(k);
  return k;
}

/// Fisher moment skewness m3 / m2^{3/2}.
inline double fisher_skewness(const VectorXd& r) {
  const double mean = r.mean();
  const VectorXd c = r.array() - mean;
  const double m2 = c.squaredNorm() / static_cast<double>(r.size());
  if (m2 <= 0.0) return 0.0;
  const double m3 = c.array().cube().sum() / static_cast<double>(r.size());
  return m3 / std::pow(m2, 1.5);
}

struct LogShiftResult {
  double c_star = 0.0;
  VectorXd y_log;
  std::vector<double> skewness;  // per grid point
};

/// Picks the shift c on `grid` minimizing |skewness| of the conditional
/// residuals y - X beta_hat - u_hat after fitting log(y + c).
inline LogShiftResult log_shift_transform(const BlockLmmData& data, const std::vector<double>& grid,
                                          const RemlOptions& opt = {}) {
  if (grid.empty()) throw Error(ErrorCode::EmptyGrid, "shift grid is empty");
  const VectorXd y = data.stacked_response();
  const double y_min = y.minCoeff();
  for (double c : grid) {
    if (!std::isfinite(c) || !(y_min + c > 0.0)) {
      throw Error(ErrorCode::NonPositiveShift, "y + c must be positive for every grid value");
    }
  }
  const MatrixXd X = data.stacked_design();
  LogShiftResult out;
  double best = std::numeric_limits<double>::infinity();
  for (double c : grid) {
    const VectorXd y_log = (y.array() + c).log();
    const auto shifted = data.with_response(y_log);
    const auto spec = cluster_mean_spec(shifted);
    const auto fit = eblup(shifted, spec, opt);
    VectorXd r = y_log - X * fit.beta_hat;
    Index row = 0;
    for (Index d = 0; d < shifted.num_clusters(); ++d) {
      const Index n = shifted.cluster(d).size();
      r.segment(row, n).array() -= fit.u_hat(d);
      row += n;
    }
    const double s = fisher_skewness(r);
    out.skewness.push_back(s);
    if (std::abs(s) < best) {
      best = std::abs(s);
      out.c_star = c;
      out.y_log = y_log;
    }
  }
  return out;
}

}  // namespace mixedsi
