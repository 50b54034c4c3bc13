// bgw: validate models, simulate trajectories, estimate, run Monte Carlo plans.
//
// Exit codes: 0 success, 2 config or usage fault, 3 model assumption
// failure, 4 runtime fault.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"

#include "bgw/bgw.hpp"

namespace fs = std::filesystem;
using bgw::io::json;

namespace {

enum Exit : int { kOk = 0, kConfig = 2, kAssumption = 3, kRuntime = 4 };

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<unsigned> threads;
  std::optional<std::string> level;
};

fs::path output_dir(const Options& o) {
  fs::path dir = o.out;
  if (dir.empty()) {
    const char* env = std::getenv("BGW_OUT_DIR");
    dir = env && *env ? fs::path(env) : fs::path(".");
  }
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw bgw::Error("cannot write " + p.string());
  f << text;
  if (!f) throw bgw::Error("write failed for " + p.string());
}

std::string fmt(double x, int prec = 6) {
  std::ostringstream os;
  os << std::setprecision(prec) << x;
  return os.str();
}

void print_matrix(std::ostream& os, const std::string& label, const bgw::Matrix& m) {
  os << label << "\n";
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    os << "  ";
    for (Eigen::Index j = 0; j < m.cols(); ++j) os << std::setw(12) << fmt(m(i, j)) << (j + 1 < m.cols() ? " " : "");
    os << "\n";
  }
}

std::string vec_text(const bgw::Vector& v) {
  std::string s = "(";
  for (Eigen::Index i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt(v(i), 10);
  return s + ")";
}

// ---------------------------------------------------------------------------

int cmd_validate(const Options& o) {
  const auto model = bgw::io::load_model(o.config);
  const std::size_t d = model.dim();
  std::cout << "model " << model.name << " (d = " << d << ")\n";
  for (std::size_t j = 0; j < d; ++j) {
    std::cout << "type " << j + 1 << ": " << model.laws[j].atoms().size() << " atoms, mean "
              << vec_text(model.mean_matrix.col(static_cast<Eigen::Index>(j))) << "\n";
    print_matrix(std::cout, "  covariance K^" + std::to_string(j + 1), model.cov_blocks[j]);
  }
  print_matrix(std::cout, "mean matrix A", model.mean_matrix);
  std::cout << "spectral radius: " << fmt(model.spectral_radius(), 12) << "\n";
  std::cout << "primitive: " << (model.primitive ? "yes" : "no") << "\n";
  if (model.perron) {
    std::cout << "perron rho: " << fmt(model.perron->rho, 12) << "\n";
    std::cout << "right eigenvector u: " << vec_text(model.perron->u) << "\n";
    std::cout << "left eigenvector v: " << vec_text(model.perron->v) << "\n";
  }
  std::cout << "supercritical: " << (model.supercritical ? "yes" : "no") << "\n";
  std::cout << "regular supercritical: " << (model.regular_supercritical() ? "pass" : "FAIL") << "\n";
  std::cout << "invertible covariances: " << (model.covariances_invertible ? "pass" : "FAIL") << "\n";
  if (model.perron) {
    const auto la = bgw::lse_applicable(model.mean_matrix, *model.perron);
    std::cout << "least-squares conditions: " << (la.ok ? "pass" : "fail");
    for (const auto& r : la.reasons) std::cout << "; " << r;
    std::cout << "\n";
  } else {
    std::cout << "least-squares conditions: not evaluated (no Perron root)\n";
  }
  const auto q = bgw::extinction_probability(model);
  std::cout << "extinction probability q: " << vec_text(q) << "\n";
  const bool ok = model.regular_supercritical() && model.covariances_invertible;
  std::cout << "verdict: " << (ok ? "assumptions hold" : "assumptions violated") << "\n";
  return ok ? kOk : kAssumption;
}

int cmd_simulate(const Options& o) {
  json cfg = bgw::io::read_json_file(o.config);
  if (o.seed) cfg["seed"] = *o.seed;
  if (o.level) cfg["level"] = *o.level;
  const auto c = bgw::io::simulate_config_from_json(cfg, fs::path(o.config).parent_path());
  if (!c.seed) throw bgw::ConfigError("simulate: a seed is required (config field 'seed' or --seed)");
  const std::string hash = bgw::io::config_hash(cfg);
  bgw::Stream rng(*c.seed);
  const auto traj = bgw::simulate_trajectory(c.model, c.horizon, c.caps, rng, c.level);

  const auto dir = output_dir(o);
  std::ostringstream t;
  bgw::io::write_trajectory_csv(t, traj, hash);
  const auto tpath = dir / ("trajectory_" + hash + ".csv");
  write_file(tpath, t.str());
  std::cout << "trajectory: " << tpath.string() << "\n";
  if (c.level == bgw::ObservationLevel::Full) {
    std::ostringstream dd;
    bgw::io::write_detail_csv(dd, traj, hash);
    const auto dpath = dir / ("offspring_" + hash + ".csv");
    write_file(dpath, dd.str());
    std::cout << "offspring detail: " << dpath.string() << "\n";
  }
  std::cout << "config hash: " << hash << "\n";
  std::cout << "generations: " << traj.horizon() << ", status: " << traj.status_string()
            << ", final total: " << bgw::total(traj.generations.back().x) << "\n";
  return kOk;
}

int cmd_estimate(const Options& o) {
  json cfg = bgw::io::read_json_file(o.config);
  const auto c = bgw::io::estimate_config_from_json(cfg, fs::path(o.config).parent_path());
  auto traj = bgw::io::read_trajectory_csv(c.trajectory, c.detail);
  if (o.level) {
    const auto need = bgw::parse_level(*o.level);
    if (!bgw::covers(traj.level, need))
      throw bgw::ObservationLevelError("estimate: trajectory recorded at '" + std::string(to_string(traj.level)) +
                                       "' cannot be read at '" + *o.level + "'");
    traj.level = need;
  }
  const std::string hash = bgw::io::config_hash(cfg);
  const bool want_mle = c.estimators.contains("mle");
  const bool want_emp = c.estimators.contains("empirical");
  const bool want_lse = c.estimators.contains("lse");
  const bool want_law = c.estimators.contains("distribution");
  if (want_mle) traj.require_level(bgw::ObservationLevel::Totals, "mle");
  if (want_emp) traj.require_level(bgw::ObservationLevel::Totals, "empirical");
  if (want_law) traj.require_level(bgw::ObservationLevel::Full, "distribution");
  if (c.hypothesis) traj.require_level(bgw::ObservationLevel::Totals, "confidence region");
  if (traj.horizon() < 1) throw bgw::DomainError("estimate: trajectory has no generations after X0");

  bgw::io::EstimateRow row;
  row.seed = traj.seed;
  row.status = traj.status_string();
  row.horizon = traj.horizon();
  row.dim = traj.dim();
  std::optional<bgw::EstimateSet> est;
  if (want_mle || want_emp || c.hypothesis) {
    est = bgw::estimate(traj, false);
    if (want_mle) {
      row.mle = est->mle_means;
      row.mle_defined = est->mle_defined;
      row.khat = est->qsl_cov;
    }
    if (want_emp) {
      row.emp = est->emp_means;
      row.kcheck = est->emp_cov;
    }
    row.s_prev = est->s_prev;
    row.x_prev = est->x_prev;
  }
  if (want_lse) {
    auto lp = bgw::lse_path(traj);
    row.lse = lp.estimates.back();
    row.q_prev = lp.q_prev;
  }

  const auto dir = output_dir(o);
  std::ostringstream e;
  bgw::io::write_estimates_csv(e, {row}, hash);
  const auto epath = dir / ("estimates_" + hash + ".csv");
  write_file(epath, e.str());
  std::cout << "estimates: " << epath.string() << "\n";
  std::cout << "horizon " << row.horizon << ", status " << row.status << "\n";
  if (row.mle) print_matrix(std::cout, "MLE means", *row.mle);
  if (row.emp) print_matrix(std::cout, "empirical means", *row.emp);
  if (row.lse) print_matrix(std::cout, "least-squares means", *row.lse);
  for (std::size_t j = 0; j < row.khat.size(); ++j)
    print_matrix(std::cout, "QSL covariance, type " + std::to_string(j + 1), row.khat[j]);
  for (std::size_t j = 0; j < row.kcheck.size(); ++j)
    print_matrix(std::cout, "empirical covariance, type " + std::to_string(j + 1), row.kcheck[j]);

  if (want_law) {
    const auto law = bgw::mle_distribution(traj);
    json lj = json::array();
    for (std::size_t j = 0; j < law.dim(); ++j) {
      json atoms = json::array();
      for (const auto& [l, c] : law.counts[j]) atoms.push_back({l, law.probability(j, l), c});
      lj.push_back(atoms);
    }
    const auto lpath = dir / ("law_" + hash + ".json");
    write_file(lpath, json{{"config_hash", hash}, {"laws", lj}}.dump(2) + "\n");
    std::cout << "law estimate: " << lpath.string() << "\n";
  }

  if (c.hypothesis) {
    const auto report = bgw::confidence_region(traj, *est, *c.hypothesis, c.levels, c.covariance);
    const auto rpath = dir / ("region_" + hash + ".json");
    write_file(rpath, bgw::io::region_report_json(report, hash).dump(2) + "\n");
    std::cout << "region report: " << rpath.string() << "\n";
    std::cout << "trace statistic " << fmt(report.trace_stat) << " (|.| <= " << fmt(report.z_threshold) << ")"
              << ", chi statistic " << fmt(report.chi_stat) << " (<= " << fmt(report.chi_threshold) << ")"
              << ", verdict " << (report.inside ? "inside" : "outside") << "\n";
  }
  std::cout << "config hash: " << hash << "\n";
  return kOk;
}

int cmd_mc(const Options& o) {
  json cfg = bgw::io::read_json_file(o.config);
  if (o.seed) cfg["master_seed"] = *o.seed;
  if (o.level) cfg["level"] = *o.level;
  if (!cfg.contains("master_seed")) throw bgw::ConfigError("mc: a seed is required (plan field 'master_seed' or --seed)");
  // Worker count does not change results, so it stays out of the hash.
  const std::string hash = bgw::io::config_hash(cfg);
  auto plan = bgw::io::plan_from_json(cfg, fs::path(o.config).parent_path());
  if (o.threads) plan.threads = *o.threads;
  const auto s = bgw::run_ensemble(plan);

  const auto dir = output_dir(o);
  std::ostringstream r;
  bgw::io::write_replications_csv(r, s, hash);
  const auto rpath = dir / ("mc_" + hash + "_replications.csv");
  write_file(rpath, r.str());
  const auto digest = bgw::io::digest_json(plan, s, hash);
  const auto dpath = dir / ("mc_" + hash + "_digest.json");
  write_file(dpath, digest.dump(2) + "\n");

  std::cout << "plan " << hash << ": model " << plan.model.name << ", horizon " << plan.horizon << "\n";
  std::cout << "replications " << s.replications << ": surviving " << s.surviving << " (capped " << s.capped
            << "), extinct " << s.extinct << "\n";
  std::cout << "survival fraction " << fmt(s.survival_fraction) << "  95% CI [" << fmt(s.survival_ci.lo) << ", "
            << fmt(s.survival_ci.hi) << "]\n";
  for (const auto& [name, st] : s.errors)
    std::cout << "error " << std::left << std::setw(10) << name << std::right << " mean " << fmt(st.mean)
              << "  median " << fmt(st.median) << "  q95 " << fmt(st.q95) << "\n";
  if (s.replications == 1 && !s.runs.empty() && s.runs.front().estimated) {
    const auto& one = s.runs.front();
    if (one.mle.size()) print_matrix(std::cout, "MLE means", one.mle);
    if (one.emp.size()) print_matrix(std::cout, "empirical means", one.emp);
    if (one.lse.size()) print_matrix(std::cout, "least-squares means", one.lse);
  }
  if (s.chi_emp.count)
    std::cout << "chi pivot (empirical K)  mean " << fmt(s.chi_emp.mean) << "  q95 " << fmt(s.chi_emp.q95) << "  ks "
              << fmt(s.chi_emp.ks) << "\n";
  if (s.chi_qsl.count)
    std::cout << "chi pivot (QSL K)        mean " << fmt(s.chi_qsl.mean) << "  q95 " << fmt(s.chi_qsl.q95) << "  ks "
              << fmt(s.chi_qsl.ks) << "\n";
  if (s.ratio.count) std::cout << "ratio estimator mean " << fmt(s.ratio.mean) << "\n";
  if (std::isfinite(s.trace_variance_ratio) && std::isfinite(s.efficiency))
    std::cout << "trace variance ratio QSL/empirical " << fmt(s.trace_variance_ratio) << "  (limit "
              << fmt(s.efficiency) << ")\n";
  if (s.coverage)
    std::cout << "coverage " << fmt(s.coverage->rate) << " of " << s.coverage->total << "  95% CI ["
              << fmt(s.coverage->ci.lo) << ", " << fmt(s.coverage->ci.hi) << "]\n";
  if (std::isfinite(s.max_lse_closed_form_gap))
    std::cout << "least-squares recursion vs closed form: max gap " << fmt(s.max_lse_closed_form_gap) << "\n";
  std::cout << "replications: " << rpath.string() << "\ndigest: " << dpath.string() << "\n";
  return kOk;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multitype Galton-Watson simulation and estimation"};
  app.require_subcommand(1);
  Options o;

  auto* validate = app.add_subcommand("validate", "Check a model file against the structural assumptions");
  validate->add_option("--config,config", o.config, "Model JSON file")->required()->check(CLI::ExistingFile);

  auto add_common = [&](CLI::App* sub, bool seeded) {
    sub->add_option("--config", o.config, "Config JSON file")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "Output directory (default: $BGW_OUT_DIR or .)");
    if (seeded) sub->add_option("--seed", o.seed, "Seed, overrides the config");
    sub->add_option("--level", o.level, "Observation level")->check(CLI::IsMember({"counts", "totals", "full"}));
  };
  auto* simulate = app.add_subcommand("simulate", "Simulate one trajectory");
  add_common(simulate, true);
  auto* est = app.add_subcommand("estimate", "Estimate from a trajectory file");
  add_common(est, false);
  auto* mc = app.add_subcommand("mc", "Run a Monte Carlo plan");
  add_common(mc, true);
  mc->add_option("--threads", o.threads, "Worker threads (default 1)")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*validate) return cmd_validate(o);
    if (*simulate) return cmd_simulate(o);
    if (*est) return cmd_estimate(o);
    if (*mc) return cmd_mc(o);
  } catch (const bgw::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const bgw::ObservationLevelError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const bgw::AssumptionError& e) {
    std::cerr << "assumption failure: " << e.what() << "\n";
    return kAssumption;
  } catch (const bgw::SingularBlockError& e) {
    std::cerr << "assumption failure: " << e.what() << "\n";
    return kAssumption;
  } catch (const json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kRuntime;
}
