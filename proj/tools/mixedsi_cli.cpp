// mixedsi command-line front end: fit, spi, test, simulate, transform, residuals.

#include <CLI11.hpp>
#include <json.hpp>

#include <boost/math/distributions/normal.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mixedsi/mixedsi.hpp"

namespace {

using json = nlohmann::json;
using namespace mixedsi;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string model = "nerm";
  std::string data;
  std::string out;
  double alpha = 0.05;
  std::uint64_t seed = 1;
  unsigned threads = default_threads();
};

BlockLmmData load(const Common& c) {
  if (c.data.empty()) throw UsageError("--data is required");
  BlockLmmData data = c.model == "fhm" ? ingest_area_csv(c.data) : ingest_unit_csv(c.data);
  validate(data);
  return data;
}

// Output is staged in memory and written in one go so that a failing command
// never leaves a half-written file behind.
void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorCode::InvalidValue, "cannot write '" + path + "'");
  os << text;
}

std::string g6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::vector<json> vec_json(const VectorXd& v) { return {v.data(), v.data() + v.size()}; }

Method parse_method(const std::string& s) {
  if (s == "bs") return Method::BS;
  if (s == "mc") return Method::MC;
  if (s == "bo") return Method::BO;
  if (s == "be") return Method::BE;
  if (s == "vt") return Method::VT;
  throw UsageError("unknown method '" + s + "'");
}

TubeConstants load_tube_constants(const std::string& path) {
  if (path.empty()) throw UsageError("--method vt requires --tube-constants");
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::ParseError, "cannot open '" + path + "'");
  return read_tube_constants(in);
}

MatrixXd load_matrix(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::ParseError, "cannot open '" + path + "'");
  return read_matrix_csv(in);
}

// ---- fit ------------------------------------------------------------------

std::string run_fit(const Common& c) {
  const auto data = load(c);
  const auto spec = cluster_mean_spec(data);
  const auto fit = eblup(data, spec);
  const VectorXd g1v = g1(data, fit.theta);
  const VectorXd g2v = g2(data, fit.theta, spec);
  json j;
  j["model"] = to_string(data.tag());
  j["beta"] = vec_json(fit.beta_hat);
  j["sigma2_u"] = fit.theta.sigma2_u;
  if (data.tag() == ModelTag::NERM) j["sigma2_e"] = fit.theta.sigma2_e;
  j["loglik_restricted"] = fit.loglik_restricted;
  json rows = json::array();
  for (Index d = 0; d < data.num_clusters(); ++d) {
    rows.push_back({{"cluster", data.cluster(d).id},
                    {"u_hat", fit.u_hat(d)},
                    {"mu_hat", fit.mu_hat(d)},
                    {"g1", g1v(d)},
                    {"g2", g2v(d)},
                    {"se", fit.scale(d)}});
  }
  j["clusters"] = rows;
  return j.dump(2) + "\n";
}

// ---- spi ------------------------------------------------------------------

struct SpiArgs {
  std::string method = "bs";
  Index B = 1000;
  Index K = 100000;
  std::string tube_constants;
};

std::string run_spi(const Common& c, const SpiArgs& a) {
  const Method method = parse_method(a.method);
  TubeConstants tube;
  if (method == Method::VT) tube = load_tube_constants(a.tube_constants);
  check_alpha(c.alpha);
  const auto data = load(c);
  const auto spec = cluster_mean_spec(data);
  const auto fit = eblup(data, spec);
  CriticalValue cv;
  SimultaneousIntervals spi;
  json j;
  switch (method) {
    case Method::BS:
    case Method::BE: {
      const auto draws = parametric_bootstrap(data, spec, fit, a.B, c.seed, {c.threads, {}});
      cv = method == Method::BS ? critical_value_bs(draws, c.alpha) : beran_critical_values(draws, c.alpha);
      j["refit_failures"] = draws.refit_failures;
      break;
    }
    case Method::MC:
      cv = critical_value_mc(build_joint_normal(data, fit.theta), spec, a.K, c.alpha, c.seed, {c.threads, {}});
      break;
    case Method::BO: cv = bonferroni_cv(data.num_clusters(), c.alpha); break;
    case Method::VT: cv = tube_cv(data.p(), c.alpha, tube); break;
  }
  spi = method == Method::VT ? tube_spi(data, fit, spec, cv) : build_spi(fit, cv);
  j["method"] = to_string(method);
  j["alpha"] = c.alpha;
  j["critical_value"] = cv.value;
  j["seed"] = c.seed;
  j["B"] = (method == Method::BS || method == Method::BE) ? json(a.B) : json(nullptr);
  if (method == Method::MC) j["K"] = a.K;
  json rows = json::array();
  for (Index d = 0; d < data.num_clusters(); ++d) {
    const auto& iv = spi.clusters[static_cast<std::size_t>(d)];
    json r{{"cluster", data.cluster(d).id}, {"center", iv.center}, {"lower", iv.lower}, {"upper", iv.upper}};
    if (cv.per_cluster) r["critical_value"] = (*cv.per_cluster)(d);
    rows.push_back(std::move(r));
  }
  j["intervals"] = rows;
  return j.dump(2) + "\n";
}

// ---- test -----------------------------------------------------------------

struct TestArgs {
  std::string method = "bs";
  std::string contrasts;
  std::string h;
  bool stepdown = false;
  Index B = 1000;
  Index K = 100000;
};

std::string run_test(const Common& c, const TestArgs& a) {
  const Method method = parse_method(a.method);
  if (method == Method::BE || method == Method::VT) throw UsageError("test supports --method bs, mc or bo");
  if (a.stepdown && method != Method::BS) throw UsageError("--stepdown needs --method bs");
  if (a.h.empty()) throw UsageError("--h is required");
  check_alpha(c.alpha);
  const auto data = load(c);
  const Index D = data.num_clusters();
  const MatrixXd A = a.contrasts.empty() ? MatrixXd(MatrixXd::Identity(D, D)) : load_matrix(a.contrasts);
  if (A.cols() != D) throw Error(ErrorCode::ShapeMismatch, "contrast matrix has " + std::to_string(A.cols()) + " columns, D = " + std::to_string(D));
  const MatrixXd hm = load_matrix(a.h);
  const VectorXd h = hm.cols() == 1 ? VectorXd(hm.col(0)) : VectorXd(hm.row(0).transpose());
  if (h.size() != A.rows()) throw Error(ErrorCode::ShapeMismatch, "h length does not match the contrast rows");

  const auto spec = cluster_mean_spec(data);
  const auto fit = eblup(data, spec);
  const VectorXd est = A * fit.mu_hat;
  const VectorXd scales = contrast_scales(A, fit.scale);
  CriticalValue cv;
  BootstrapDraws draws;
  if (method == Method::BS) {
    draws = parametric_bootstrap(data, spec, fit, a.B, c.seed, {c.threads, {}});
    cv = critical_value_contrast(draws, A, c.alpha);
  } else if (method == Method::MC) {
    McOptions mo{c.threads, scales};
    cv = critical_value_mc_contrast(build_joint_normal(data, fit.theta), spec, A, a.K, c.alpha, c.seed, mo);
  } else {
    cv = bonferroni_cv(A.rows(), c.alpha);
  }
  const auto test = single_step_test(est, scales, h, cv);
  json j;
  j["method"] = to_string(method);
  j["alpha"] = c.alpha;
  j["seed"] = c.seed;
  j["critical_value"] = cv.value;
  j["statistic"] = test.statistic;
  j["reject"] = test.reject;
  j["t_values"] = vec_json(test.t_values);
  std::vector<Index> single;
  for (std::size_t r = 0; r < test.decisions.size(); ++r) {
    if (test.decisions[r]) single.push_back(static_cast<Index>(r));
  }
  j["single_step_rejected"] = single;
  if (a.stepdown) {
    StepdownQuantiles q(contrast_statistics(draws, A), c.alpha);
    j["stepdown_rejected"] = step_down_test(test.t_values, [&](std::span<const Index> s) { return q(s); }, c.alpha);
  }
  return j.dump(2) + "\n";
}

// ---- simulate -------------------------------------------------------------

struct SimArgs {
  std::string preset = "table1-row";
  Index D = 30;
  Index n_d = 5;
  double sigma2_e = 0.5;
  double sigma2_u = 1.0;
  int scenario = 1;
  Index I = 500;
  Index B = 500;
  Index K = 10000;
  std::vector<std::string> methods;
  std::vector<double> delta_grid{-1.0, -0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0};
  double shift = 1.0;
  Index alternatives = -1;
  std::string meta_out;
};

std::string run_simulate(const Common& c, const SimArgs& a) {
  ScenarioConfig cfg;
  cfg.D = a.D;
  cfg.n_d = a.n_d;
  cfg.sigma2_e = a.sigma2_e;
  cfg.sigma2_u = a.sigma2_u;
  cfg.I = a.I;
  cfg.B = a.B;
  cfg.K = a.K;
  cfg.alpha = c.alpha;
  cfg.master_seed = c.seed;
  cfg.threads = c.threads;
  if (a.preset == "table2-row") {
    cfg.tag = ModelTag::FHM;
    if (a.scenario != 1 && a.scenario != 2) throw UsageError("--scenario must be 1 or 2");
    cfg.fhm_sigma_pattern = fhm_pattern(a.scenario);
  } else if (a.preset != "table1-row" && a.preset != "power" && a.preset != "fwer") {
    throw UsageError("unknown preset '" + a.preset + "'");
  }
  validate_config(cfg);

  std::ostringstream os;
  ExperimentResult res;
  if (a.preset == "table1-row" || a.preset == "table2-row") {
    std::vector<Method> methods;
    for (const auto& m : a.methods) methods.push_back(parse_method(m));
    if (methods.empty()) methods = {Method::BS, Method::MC, Method::BO, Method::BE};
    res = run_spi_experiment(cfg, methods);
    os << "scenario,method,criterion,value,mc_halfwidth\n";
    for (const auto& s : res.spi) {
      os << res.scenario << ',' << s.method << ",ECP," << g6(s.ecp) << ',' << g6(s.ecp_halfwidth) << '\n';
      os << res.scenario << ',' << s.method << ",WS," << g6(s.ws) << ",\n";
      os << res.scenario << ',' << s.method << ",VS," << g6(s.vs) << ",\n";
    }
  } else if (a.preset == "power") {
    std::vector<Method> methods;
    for (const auto& m : a.methods) methods.push_back(parse_method(m));
    if (methods.empty()) methods = {Method::BS, Method::MC};
    res = run_power_experiment(cfg, a.delta_grid, methods);
    os << "delta,method,power\n";
    for (const auto& p : res.power) os << g6(p.delta) << ',' << p.method << ',' << g6(p.power) << '\n';
  } else {
    res = run_fwer_experiment(cfg, {a.shift, a.alternatives});
    os << "scenario,method,criterion,value,mc_halfwidth\n";
    for (const auto& f : res.fwer) {
      os << res.scenario << ',' << f.method << ",FWER," << g6(f.fwer) << ',' << g6(f.halfwidth) << '\n';
    }
  }
  if (!a.meta_out.empty()) {
    json m{{"scenario", res.scenario},
           {"master_seed", res.meta.master_seed},
           {"replicates", res.meta.replicates},
           {"failed_replicates", res.meta.failed_replicates},
           {"bootstrap_refit_failures", res.meta.bootstrap_refit_failures},
           {"I", cfg.I},
           {"B", cfg.B},
           {"K", cfg.K},
           {"alpha", cfg.alpha}};
    emit(a.meta_out, m.dump(2) + "\n");
  }
  std::cerr << "runtime_seconds " << res.meta.runtime_seconds << '\n';
  return os.str();
}

// ---- transform ------------------------------------------------------------

struct TransformArgs {
  std::vector<double> grid;
  Index grid_points = 50;
};

std::string run_transform(const Common& c, const TransformArgs& a) {
  if (c.model != "nerm") throw UsageError("transform works on unit-level data");
  const auto data = load(c);
  std::vector<double> grid = a.grid;
  if (grid.empty()) {
    if (a.grid_points < 1) throw UsageError("--grid-points must be positive");
    const VectorXd y = data.stacked_response();
    const double lo = std::max(y.minCoeff(), 0.0);
    const double hi = y.maxCoeff();
    for (Index i = 0; i < a.grid_points; ++i) {
      const double t = a.grid_points == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(a.grid_points - 1);
      const double v = lo + t * (hi - lo);
      if (y.minCoeff() + v > 0.0) grid.push_back(v);
    }
  }
  const auto res = log_shift_transform(data, grid);
  std::cerr << "c_star " << res.c_star << '\n';
  std::ostringstream os;
  write_data_csv(os, data.with_response(res.y_log));
  return os.str();
}

// ---- residuals ------------------------------------------------------------

std::string run_residuals(const Common& c) {
  const auto data = load(c);
  const auto spec = cluster_mean_spec(data);
  const auto fit = eblup(data, spec);
  const VectorXd r = cholesky_residuals(data, fit);
  const VectorXd eb = eb_random_effects(data, fit);
  const boost::math::normal_distribution<double> normal;
  // Normal scores for QQ plots: Phi^{-1}((rank - 0.5) / n).
  auto scores = [&](const VectorXd& v) {
    std::vector<Index> idx(static_cast<std::size_t>(v.size()));
    std::iota(idx.begin(), idx.end(), Index{0});
    std::stable_sort(idx.begin(), idx.end(), [&](Index x, Index y) { return v(x) < v(y); });
    VectorXd q(v.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      q(idx[k]) = boost::math::quantile(normal, (static_cast<double>(k) + 0.5) / static_cast<double>(v.size()));
    }
    return q;
  };
  const VectorXd qr = scores(r);
  const VectorXd qe = scores(eb);
  std::ostringstream os;
  os << "kind,cluster,value,normal_score\n";
  Index row = 0;
  for (Index d = 0; d < data.num_clusters(); ++d) {
    for (Index j = 0; j < data.cluster(d).size(); ++j, ++row) {
      os << "unit," << data.cluster(d).id << ',' << g6(r(row)) << ',' << g6(qr(row)) << '\n';
    }
  }
  for (Index d = 0; d < data.num_clusters(); ++d) {
    os << "cluster," << data.cluster(d).id << ',' << g6(eb(d)) << ',' << g6(qe(d)) << '\n';
  }
  return os.str();
}

void add_common(CLI::App* sub, Common& c, bool with_data = true) {
  if (with_data) {
    sub->add_option("--model", c.model, "nerm (unit CSV) or fhm (area CSV)")->check(CLI::IsMember({"nerm", "fhm"}));
    sub->add_option("--data", c.data, "input CSV");
  }
  sub->add_option("--out", c.out, "output path (default stdout)");
  sub->add_option("--alpha", c.alpha, "significance level");
  sub->add_option("--seed", c.seed, "master seed");
  sub->add_option("--threads", c.threads, "worker threads")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simultaneous prediction intervals and multiple tests for mixed-model small-area estimates"};
  app.require_subcommand(1);
  bool error_json = false;
  app.add_flag("--error-json", error_json, "print errors as JSON on stderr");

  Common common;
  SpiArgs spi;
  TestArgs test;
  SimArgs sim;
  TransformArgs tr;

  auto* fit_cmd = app.add_subcommand("fit", "REML/EBLUP fit");
  add_common(fit_cmd, common);

  auto* spi_cmd = app.add_subcommand("spi", "simultaneous prediction intervals");
  add_common(spi_cmd, common);
  spi_cmd->add_option("--method", spi.method, "bs|mc|bo|be|vt");
  spi_cmd->add_option("--B", spi.B, "bootstrap replicates")->check(CLI::PositiveNumber);
  spi_cmd->add_option("--K", spi.K, "Monte Carlo draws")->check(CLI::PositiveNumber);
  spi_cmd->add_option("--tube-constants", spi.tube_constants, "key=value file for --method vt");

  auto* test_cmd = app.add_subcommand("test", "max-type test of H0: A mu = h");
  add_common(test_cmd, common);
  test_cmd->set_help_flag("--help", "print this help message and exit");
  test_cmd->add_option("--method", test.method, "bs|mc|bo");
  test_cmd->add_option("--contrasts", test.contrasts, "contrast matrix CSV (default identity)");
  test_cmd->add_option("--h", test.h, "hypothesised values CSV");
  test_cmd->add_flag("--stepdown", test.stepdown, "bootstrap step-down");
  test_cmd->add_option("--B", test.B, "bootstrap replicates")->check(CLI::PositiveNumber);
  test_cmd->add_option("--K", test.K, "Monte Carlo draws")->check(CLI::PositiveNumber);

  auto* sim_cmd = app.add_subcommand("simulate", "simulation experiments");
  add_common(sim_cmd, common, false);
  sim_cmd->add_option("--preset", sim.preset, "table1-row|table2-row|power|fwer");
  sim_cmd->add_option("--D", sim.D);
  sim_cmd->add_option("--n-d", sim.n_d);
  sim_cmd->add_option("--sigma-e2", sim.sigma2_e);
  sim_cmd->add_option("--sigma-u2", sim.sigma2_u);
  sim_cmd->add_option("--scenario", sim.scenario, "FHM sampling-variance pattern (1 or 2)");
  sim_cmd->add_option("--I", sim.I);
  sim_cmd->add_option("--B", sim.B);
  sim_cmd->add_option("--K", sim.K);
  sim_cmd->add_option("--methods", sim.methods, "subset of bs mc bo be")->delimiter(',');
  sim_cmd->add_option("--delta-grid", sim.delta_grid)->delimiter(',');
  sim_cmd->add_option("--shift", sim.shift, "FWER alternative shift");
  sim_cmd->add_option("--alternatives", sim.alternatives, "number of false nulls (default D/5)");
  sim_cmd->add_option("--meta-out", sim.meta_out, "JSON metadata path");

  auto* tr_cmd = app.add_subcommand("transform", "log-shift transform minimizing residual skewness");
  add_common(tr_cmd, common);
  tr_cmd->add_option("--grid", tr.grid, "candidate shifts")->delimiter(',');
  tr_cmd->add_option("--grid-points", tr.grid_points, "grid size when --grid is absent");

  auto* res_cmd = app.add_subcommand("residuals", "Cholesky residuals and EB effects with normal scores");
  add_common(res_cmd, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  auto fail = [&](const std::string& code, const std::string& msg, int status) {
    if (error_json) {
      std::cerr << json{{"error", code}, {"message", msg}, {"exit_code", status}}.dump() << '\n';
    } else {
      std::cerr << "error: " << msg << '\n';
    }
    return status;
  };

  try {
    std::string text;
    if (fit_cmd->parsed()) text = run_fit(common);
    else if (spi_cmd->parsed()) text = run_spi(common, spi);
    else if (test_cmd->parsed()) text = run_test(common, test);
    else if (sim_cmd->parsed()) text = run_simulate(common, sim);
    else if (tr_cmd->parsed()) text = run_transform(common, tr);
    else if (res_cmd->parsed()) text = run_residuals(common);
    emit(common.out, text);
  } catch (const UsageError& e) {
    return fail("UsageError", e.what(), 1);
  } catch (const Error& e) {
    return fail(std::string(to_string(e.code())), e.what(), 2);
  } catch (const std::exception& e) {
    return fail("Internal", e.what(), 2);
  }
  return 0;
}
