#pragma once

#include <Eigen/Dense>

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mixedsi/analytic.hpp"
#include "mixedsi/bootstrap.hpp"
#include "mixedsi/estimation.hpp"
#include "mixedsi/maxstat.hpp"
#include "mixedsi/model.hpp"
#include "mixedsi/monte_carlo.hpp"
#include "mixedsi/parallel.hpp"
#include "mixedsi/random.hpp"

namespace mixedsi {

struct ScenarioConfig {
  ModelTag tag = ModelTag::NERM;
  Index D = 30;
  Index n_d = 5;
  double sigma2_e = 0.5;
  double sigma2_u = 1.0;
  std::array<double, 5> fhm_sigma_pattern{0.7, 0.6, 0.5, 0.4, 0.3};
  VectorXd beta = VectorXd::Ones(2);
  Index I = 500;
  Index B = 500;
  Index K = 10000;
  double alpha = 0.05;
  std::uint64_t master_seed = 1;
  unsigned threads = 1;

  std::string label() const {
    char buf[160];
    if (tag == ModelTag::NERM) {
      std::snprintf(buf, sizeof buf, "NERM_D%ld_n%ld_se%g_su%g", static_cast<long>(D), static_cast<long>(n_d), sigma2_e,
                    sigma2_u);
    } else {
      std::snprintf(buf, sizeof buf, "FHM_D%ld_su%g_pattern%g-%g-%g-%g-%g", static_cast<long>(D), sigma2_u,
                    fhm_sigma_pattern[0], fhm_sigma_pattern[1], fhm_sigma_pattern[2], fhm_sigma_pattern[3],
                    fhm_sigma_pattern[4]);
    }
    return buf;
  }
};

/// Preset FHM sampling-variance patterns.
inline std::array<double, 5> fhm_pattern(int scenario) {
  if (scenario == 2) return {2.0, 0.6, 0.5, 0.4, 0.2};
  return {0.7, 0.6, 0.5, 0.4, 0.3};
}

inline void validate_config(const ScenarioConfig& cfg) {
  if (cfg.D < 1 || cfg.I < 1 || cfg.B < 1 || cfg.K < 1) throw Error(ErrorCode::InvalidValue, "D, I, B and K must be positive");
  if (cfg.tag == ModelTag::FHM && cfg.D % 5 != 0) throw Error(ErrorCode::InvalidValue, "FHM patterns need D divisible by 5");
  if (cfg.tag == ModelTag::NERM && (cfg.n_d < 1 || !(cfg.sigma2_e > 0.0))) {
    throw Error(ErrorCode::InvalidValue, "NERM needs n_d >= 1 and sigma2_e > 0");
  }
  if (!(cfg.sigma2_u > 0.0)) throw Error(ErrorCode::InvalidValue, "sigma2_u must be positive");
  if (cfg.beta.size() != 2) throw Error(ErrorCode::InvalidValue, "scenario beta has an intercept and one slope");
  for (double v : cfg.fhm_sigma_pattern) {
    if (!(v > 0.0)) throw Error(ErrorCode::InvalidValue, "FHM pattern variances must be positive");
  }
  check_alpha(cfg.alpha);
}

struct Scenario {
  BlockLmmData data;
  VectorXd truth;  // mu_d
  MixedParameterSpec spec;
  VectorXd u;
};

/// One simulation cell: x_2 ~ U(0,1), u_d ~ N(0, s2u), errors normal.
/// Covariates are regenerated for every replicate.
inline Scenario generate_scenario(const ScenarioConfig& cfg, std::uint64_t replicate) {
  validate_config(cfg);
  NormalStream rng(derive_seed(cfg.master_seed, StreamTag::Scenario, replicate));
  std::vector<ClusterBlock> clusters;
  clusters.reserve(static_cast<std::size_t>(cfg.D));
  VectorXd u(cfg.D);
  const double sd_u = std::sqrt(cfg.sigma2_u);
  for (Index d = 0; d < cfg.D; ++d) {
    ClusterBlock c;
    c.id = std::to_string(d + 1);
    const Index n = cfg.tag == ModelTag::NERM ? cfg.n_d : 1;
    c.X.resize(n, 2);
    for (Index j = 0; j < n; ++j) {
      c.X(j, 0) = 1.0;
      c.X(j, 1) = rng.uniform();
    }
    u(d) = sd_u * rng();
    double sd_e = std::sqrt(cfg.sigma2_e);
    if (cfg.tag == ModelTag::FHM) {
      const double v = cfg.fhm_sigma_pattern[static_cast<std::size_t>(d * 5 / cfg.D)];
      c.error_var = v;
      sd_e = std::sqrt(v);
    }
    c.y = c.X * cfg.beta;
    for (Index j = 0; j < n; ++j) c.y(j) += u(d) + sd_e * rng();
    clusters.push_back(std::move(c));
  }
  BlockLmmData data(cfg.tag, std::move(clusters));
  MixedParameterSpec spec = cluster_mean_spec(data);  // FHM: k_d = x_d
  VectorXd truth = eval_mixed_parameters(data, spec, cfg.beta, u);
  return {std::move(data), std::move(truth), std::move(spec), std::move(u)};
}

/// Extra critical-value source plugged into the SPI experiment.
struct CustomMethod {
  std::string name;
  std::function<CriticalValue(const Scenario&, const FitResult&, double alpha)> critical;
};

struct MethodSummary {
  std::string method;
  double ecp = 0.0;
  double ecp_halfwidth = 0.0;  // 1.96 sqrt(p(1-p)/I)
  double ws = 0.0;
  double vs = 0.0;
  double power = 0.0;  // unused for SPI runs
};

struct PowerPoint {
  double delta = 0.0;
  std::string method;
  double power = 0.0;
  double halfwidth = 0.0;
};

struct FwerSummary {
  std::string method;
  double fwer = 0.0;
  double halfwidth = 0.0;
  double alternatives_rejected = 0.0;  // mean fraction of false nulls rejected
};

struct ExperimentMetadata {
  std::uint64_t master_seed = 0;
  Index replicates = 0;
  Index failed_replicates = 0;
  std::size_t bootstrap_refit_failures = 0;
  double runtime_seconds = 0.0;
};

struct ExperimentResult {
  std::string scenario;
  std::vector<MethodSummary> spi;
  std::vector<PowerPoint> power;
  std::vector<FwerSummary> fwer;
  ExperimentMetadata meta;
  /// Per-replicate intervals by method, kept when requested.
  std::vector<std::vector<SimultaneousIntervals>> intervals;
};

inline double mc_halfwidth(double p, Index I) { return 1.96 * std::sqrt(p * (1.0 - p) / static_cast<double>(I)); }

struct SpiOptions {
  bool keep_intervals = false;
  std::vector<CustomMethod> custom;
};

namespace detail {

inline double elapsed(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace detail

/// ECP / WS / VS comparison of SPI methods over I simulated data sets.
inline ExperimentResult run_spi_experiment(const ScenarioConfig& cfg, const std::vector<Method>& methods,
                                           const SpiOptions& opt = {}) {
  validate_config(cfg);
  for (Method m : methods) {
    if (m == Method::VT) throw Error(ErrorCode::InvalidValue, "VT is not part of the simulation comparison");
  }
  const auto start = std::chrono::steady_clock::now();
  const std::size_t n_methods = methods.size() + opt.custom.size();
  const bool need_boot = std::any_of(methods.begin(), methods.end(), [](Method m) { return m == Method::BS || m == Method::BE; });

  struct Record {
    bool ok = false;
    std::vector<char> covered;
    std::vector<VectorXd> widths;
    std::vector<SimultaneousIntervals> intervals;
    std::size_t refit_failures = 0;
  };
  std::vector<Record> records(static_cast<std::size_t>(cfg.I));

  parallel_for(static_cast<std::size_t>(cfg.I), cfg.threads, [&](std::size_t k) {
    auto& rec = records[k];
    Scenario sc = generate_scenario(cfg, k);
    FitResult fit;
    try {
      fit = eblup(sc.data, sc.spec);
    } catch (const Error&) {
      return;
    }
    BootstrapDraws draws;
    if (need_boot) {
      draws = parametric_bootstrap(sc.data, sc.spec, fit, cfg.B, derive_seed(cfg.master_seed, StreamTag::Bootstrap, k));
      rec.refit_failures = draws.refit_failures;
    }
    rec.covered.resize(n_methods);
    rec.widths.resize(n_methods);
    if (opt.keep_intervals) rec.intervals.resize(n_methods);
    auto record = [&](std::size_t i, const CriticalValue& cv) {
      auto spi = build_spi(fit, cv);
      rec.covered[i] = covers_all(spi, sc.truth) ? 1 : 0;
      rec.widths[i] = spi.widths();
      if (opt.keep_intervals) rec.intervals[i] = std::move(spi);
    };
    for (std::size_t i = 0; i < methods.size(); ++i) {
      switch (methods[i]) {
        case Method::BS: record(i, critical_value_bs(draws, cfg.alpha)); break;
        case Method::BE: record(i, beran_critical_values(draws, cfg.alpha)); break;
        case Method::BO: record(i, bonferroni_cv(cfg.D, cfg.alpha)); break;
        case Method::MC: {
          const auto model = build_joint_normal(sc.data, fit.theta);
          record(i, critical_value_mc(model, sc.spec, cfg.K, cfg.alpha,
                                      derive_seed(cfg.master_seed, StreamTag::MonteCarlo, k)));
          break;
        }
        case Method::VT: break;
      }
    }
    for (std::size_t j = 0; j < opt.custom.size(); ++j) {
      record(methods.size() + j, opt.custom[j].critical(sc, fit, cfg.alpha));
    }
    rec.ok = true;
  });

  ExperimentResult out;
  out.scenario = cfg.label();
  out.meta.master_seed = cfg.master_seed;
  std::vector<const Record*> ok;
  for (const auto& r : records) {
    if (r.ok) {
      ok.push_back(&r);
    } else {
      ++out.meta.failed_replicates;
    }
    out.meta.bootstrap_refit_failures += r.refit_failures;
  }
  out.meta.replicates = static_cast<Index>(ok.size());
  const auto I = static_cast<double>(ok.size());
  for (std::size_t i = 0; i < n_methods; ++i) {
    MethodSummary s;
    s.method = i < methods.size() ? to_string(methods[i]) : opt.custom[i - methods.size()].name;
    if (ok.empty()) {
      out.spi.push_back(s);
      continue;
    }
    double hits = 0.0;
    VectorXd sum = VectorXd::Zero(cfg.D);
    for (const auto* r : ok) {
      hits += r->covered[i];
      sum += r->widths[i];
    }
    const VectorXd mean = sum / I;
    double ss = 0.0;
    for (const auto* r : ok) ss += (r->widths[i] - mean).squaredNorm();
    s.ecp = hits / I;
    s.ecp_halfwidth = mc_halfwidth(s.ecp, out.meta.replicates);
    s.ws = sum.sum() / (static_cast<double>(cfg.D) * I);
    s.vs = ok.size() > 1 ? ss / (static_cast<double>(cfg.D) * (I - 1.0)) : 0.0;
    out.spi.push_back(s);
  }
  if (opt.keep_intervals) {
    out.intervals.resize(n_methods);
    for (std::size_t i = 0; i < n_methods; ++i) {
      for (const auto* r : ok) out.intervals[i].push_back(r->intervals[i]);
    }
  }
  out.meta.runtime_seconds = detail::elapsed(start);
  return out;
}

/// Power of the global max-type test of H0: mu = h against h = mu + delta 1.
inline ExperimentResult run_power_experiment(const ScenarioConfig& cfg, const std::vector<double>& delta_grid,
                                             const std::vector<Method>& methods = {Method::BS, Method::MC}) {
  validate_config(cfg);
  for (Method m : methods) {
    if (m != Method::BS && m != Method::MC) throw Error(ErrorCode::InvalidValue, "power runs support BS and MC only");
  }
  const auto start = std::chrono::steady_clock::now();
  struct Record {
    bool ok = false;
    std::vector<std::vector<char>> reject;  // method x delta
    std::size_t refit_failures = 0;
  };
  std::vector<Record> records(static_cast<std::size_t>(cfg.I));
  parallel_for(static_cast<std::size_t>(cfg.I), cfg.threads, [&](std::size_t k) {
    auto& rec = records[k];
    Scenario sc = generate_scenario(cfg, k);
    FitResult fit;
    try {
      fit = eblup(sc.data, sc.spec);
    } catch (const Error&) {
      return;
    }
    rec.reject.assign(methods.size(), std::vector<char>(delta_grid.size(), 0));
    for (std::size_t i = 0; i < methods.size(); ++i) {
      CriticalValue cv;
      if (methods[i] == Method::BS) {
        const auto draws = parametric_bootstrap(sc.data, sc.spec, fit, cfg.B, derive_seed(cfg.master_seed, StreamTag::Bootstrap, k));
        rec.refit_failures = draws.refit_failures;
        cv = critical_value_bs(draws, cfg.alpha);
      } else {
        const auto model = build_joint_normal(sc.data, fit.theta);
        cv = critical_value_mc(model, sc.spec, cfg.K, cfg.alpha, derive_seed(cfg.master_seed, StreamTag::MonteCarlo, k));
      }
      for (std::size_t j = 0; j < delta_grid.size(); ++j) {
        const VectorXd h = sc.truth.array() + delta_grid[j];
        rec.reject[i][j] = single_step_test(fit.mu_hat, fit.scale, h, cv).reject ? 1 : 0;
      }
    }
    rec.ok = true;
  });
  ExperimentResult out;
  out.scenario = cfg.label();
  out.meta.master_seed = cfg.master_seed;
  Index n_ok = 0;
  for (const auto& r : records) {
    n_ok += r.ok ? 1 : 0;
    out.meta.bootstrap_refit_failures += r.refit_failures;
  }
  out.meta.replicates = n_ok;
  out.meta.failed_replicates = cfg.I - n_ok;
  for (std::size_t i = 0; i < methods.size(); ++i) {
    for (std::size_t j = 0; j < delta_grid.size(); ++j) {
      double hits = 0.0;
      for (const auto& r : records) {
        if (r.ok) hits += r.reject[i][j];
      }
      const double p = n_ok > 0 ? hits / static_cast<double>(n_ok) : 0.0;
      out.power.push_back({delta_grid[j], to_string(methods[i]), p, mc_halfwidth(p, std::max<Index>(n_ok, 1))});
    }
  }
  out.meta.runtime_seconds = detail::elapsed(start);
  return out;
}

struct FwerOptions {
  double shift = 1.0;
  /// Number of false nulls (the first clusters); negative means D/5.
  Index alternatives = -1;
};

/// Strong-FWER experiment: bootstrap step-down versus Bonferroni single-step.
inline ExperimentResult run_fwer_experiment(const ScenarioConfig& cfg, const FwerOptions& fopt = {}) {
  validate_config(cfg);
  if (cfg.D % 5 != 0) throw Error(ErrorCode::InvalidValue, "FWER experiment needs D divisible by 5");
  const Index n_alt = fopt.alternatives < 0 ? cfg.D / 5 : fopt.alternatives;
  if (n_alt > cfg.D) throw Error(ErrorCode::InvalidValue, "more alternatives than clusters");
  const auto start = std::chrono::steady_clock::now();
  struct Record {
    bool ok = false;
    std::array<char, 2> false_reject{0, 0};
    std::array<double, 2> alt_rejected{0.0, 0.0};
    std::size_t refit_failures = 0;
  };
  std::vector<Record> records(static_cast<std::size_t>(cfg.I));
  const double c_bo = bonferroni_cv(cfg.D, cfg.alpha).value;
  parallel_for(static_cast<std::size_t>(cfg.I), cfg.threads, [&](std::size_t k) {
    auto& rec = records[k];
    Scenario sc = generate_scenario(cfg, k);
    FitResult fit;
    try {
      fit = eblup(sc.data, sc.spec);
    } catch (const Error&) {
      return;
    }
    VectorXd h = sc.truth;
    h.head(n_alt).array() -= fopt.shift;  // mu_d = h_d + shift for the alternatives
    const VectorXd t = t_statistics(fit.mu_hat, fit.scale, h);
    const auto draws = parametric_bootstrap(sc.data, sc.spec, fit, cfg.B, derive_seed(cfg.master_seed, StreamTag::Bootstrap, k));
    rec.refit_failures = draws.refit_failures;
    const auto stepdown = step_down_test(t, stepdown_quantile_provider(draws, cfg.alpha), cfg.alpha);
    std::vector<Index> bonf;
    for (Index d = 0; d < cfg.D; ++d) {
      if (std::abs(t(d)) >= c_bo) bonf.push_back(d);
    }
    const std::array<const std::vector<Index>*, 2> sets{&stepdown, &bonf};
    for (std::size_t m = 0; m < 2; ++m) {
      Index alt_hits = 0;
      for (Index d : *sets[m]) {
        if (d >= n_alt) {
          rec.false_reject[m] = 1;
        } else {
          ++alt_hits;
        }
      }
      rec.alt_rejected[m] = n_alt > 0 ? static_cast<double>(alt_hits) / static_cast<double>(n_alt) : 0.0;
    }
    rec.ok = true;
  });
  ExperimentResult out;
  out.scenario = cfg.label();
  out.meta.master_seed = cfg.master_seed;
  Index n_ok = 0;
  std::array<double, 2> fr{0, 0}, alt{0, 0};
  for (const auto& r : records) {
    out.meta.bootstrap_refit_failures += r.refit_failures;
    if (!r.ok) continue;
    ++n_ok;
    for (std::size_t m = 0; m < 2; ++m) {
      fr[m] += r.false_reject[m];
      alt[m] += r.alt_rejected[m];
    }
  }
  out.meta.replicates = n_ok;
  out.meta.failed_replicates = cfg.I - n_ok;
  const std::array<const char*, 2> names{"BS", "BO"};
  for (std::size_t m = 0; m < 2; ++m) {
    const double p = n_ok > 0 ? fr[m] / static_cast<double>(n_ok) : 0.0;
    out.fwer.push_back({names[m], p, mc_halfwidth(p, std::max<Index>(n_ok, 1)), n_ok > 0 ? alt[m] / static_cast<double>(n_ok) : 0.0});
  }
  out.meta.runtime_seconds = detail::elapsed(start);
  return out;
}

}  // namespace mixedsi
