#pragma once

// JSON model/plan/config loading and CSV/JSON export. Column orders are
// documented in docs/csv_schema.md.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "bgw/error.hpp"
#include "bgw/estimators.hpp"
#include "bgw/inference.hpp"
#include "bgw/montecarlo.hpp"
#include "bgw/process.hpp"

namespace bgw::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Hashing and formatting

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

/// Hash of the canonical (sorted-key, compact) serialization of a config.
inline std::string config_hash(const json& config) { return hex64(fnv1a(config.dump())); }

/// Shortest text that round-trips the double; empty for NaN.
inline std::string num(double x) {
  if (std::isnan(x)) return "";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[32];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, x);
    if (std::strtod(buf, nullptr) == x) break;
  }
  return buf;
}

inline json jnum(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

inline json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json r = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(jnum(m(i, j)));
    rows.push_back(std::move(r));
  }
  return rows;
}

inline json vector_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(jnum(v(i)));
  return out;
}

// ---------------------------------------------------------------------------
// JSON field helpers

inline json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open file");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline const json& field(const json& obj, const std::string& key, const std::string& ctx) {
  if (!obj.is_object()) throw ConfigError(ctx + ": expected an object");
  const auto it = obj.find(key);
  if (it == obj.end()) throw ConfigError(ctx + ": missing field '" + key + "'");
  return *it;
}

inline void reject_unknown(const json& obj, std::initializer_list<std::string_view> allowed, const std::string& ctx) {
  for (const auto& [k, v] : obj.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || k == a;
    if (!ok) throw ConfigError(ctx + ": unknown field '" + k + "'");
  }
}

/// Number, decimal string ("0.25") or fraction string ("1/4").
inline double parse_real(const json& v, const std::string& ctx) {
  if (v.is_number()) return v.get<double>();
  if (!v.is_string()) throw ConfigError(ctx + ": expected a number or a numeric string");
  const std::string s = v.get<std::string>();
  auto whole = [&](const std::string& t) {
    std::size_t used = 0;
    double x = 0.0;
    try {
      x = std::stod(t, &used);
    } catch (const std::exception&) {
      throw ConfigError(ctx + ": cannot parse '" + s + "' as a number");
    }
    if (used != t.size()) throw ConfigError(ctx + ": cannot parse '" + s + "' as a number");
    return x;
  };
  const auto slash = s.find('/');
  if (slash == std::string::npos) return whole(s);
  const double den = whole(s.substr(slash + 1));
  if (den == 0.0) throw ConfigError(ctx + ": zero denominator in '" + s + "'");
  return whole(s.substr(0, slash)) / den;
}

inline std::uint64_t parse_u64(const json& v, const std::string& ctx) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
  if (v.is_string()) {
    const std::string s = v.get<std::string>();
    std::size_t used = 0;
    try {
      const auto x = std::stoull(s, &used, 0);
      if (used == s.size() && s.front() != '-') return x;
    } catch (const std::exception&) {
    }
  }
  throw ConfigError(ctx + ": expected a nonnegative integer");
}

inline Counts parse_counts(const json& v, std::size_t d, const std::string& ctx) {
  if (!v.is_array() || v.size() != d)
    throw ConfigError(ctx + ": expected an array of " + std::to_string(d) + " counts");
  Counts c;
  for (std::size_t i = 0; i < d; ++i) c.push_back(parse_u64(v[i], ctx + "[" + std::to_string(i) + "]"));
  return c;
}

inline Matrix parse_matrix(const json& v, std::size_t d, const std::string& ctx) {
  if (!v.is_array() || v.size() != d) throw ConfigError(ctx + ": expected " + std::to_string(d) + " rows");
  const auto di = static_cast<Eigen::Index>(d);
  Matrix m(di, di);
  for (std::size_t i = 0; i < d; ++i) {
    const auto& row = v[i];
    if (!row.is_array() || row.size() != d)
      throw ConfigError(ctx + "[" + std::to_string(i) + "]: expected " + std::to_string(d) + " entries");
    for (std::size_t j = 0; j < d; ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          parse_real(row[j], ctx + "[" + std::to_string(i) + "][" + std::to_string(j) + "]");
  }
  return m;
}

// ---------------------------------------------------------------------------
// Models

/// {"name", "dim", "x0"?, "laws": [[[counts], prob], ...] per parent type}
inline ProcessModel model_from_json(const json& j, const std::string& ctx = "model") {
  reject_unknown(j, {"name", "dim", "x0", "laws", "description"}, ctx);
  const std::string name = j.contains("name") ? j.at("name").get<std::string>() : std::string("unnamed");
  const auto dim = parse_u64(field(j, "dim", ctx), ctx + ".dim");
  if (dim < 1 || dim > 64) throw ConfigError(ctx + ".dim: must lie in [1, 64]");
  const std::size_t d = dim;
  const auto& laws = field(j, "laws", ctx);
  if (!laws.is_array() || laws.size() != d)
    throw ConfigError(ctx + ".laws: expected one law per type (" + std::to_string(d) + ")");
  std::vector<OffspringLaw> out;
  for (std::size_t t = 0; t < d; ++t) {
    const std::string lctx = ctx + ".laws[" + std::to_string(t) + "]";
    if (!laws[t].is_array() || laws[t].empty()) throw ConfigError(lctx + ": expected a nonempty list of atoms");
    std::vector<Atom> atoms;
    for (std::size_t a = 0; a < laws[t].size(); ++a) {
      const std::string actx = lctx + "[" + std::to_string(a) + "]";
      const auto& atom = laws[t][a];
      if (!atom.is_array() || atom.size() != 2) throw ConfigError(actx + ": expected [counts, probability]");
      atoms.push_back({parse_counts(atom[0], d, actx + "[0]"), parse_real(atom[1], actx + "[1]")});
    }
    try {
      out.emplace_back(d, std::move(atoms));
    } catch (const Error& e) {
      throw ConfigError(lctx + ": " + e.what());
    }
  }
  Counts x0;
  if (j.contains("x0")) x0 = parse_counts(j.at("x0"), d, ctx + ".x0");
  return ProcessModel::build(name, std::move(out), std::move(x0));
}

inline ProcessModel load_model(const fs::path& path) {
  return model_from_json(read_json_file(path), path.string());
}

/// A model given inline or as a path relative to `base`.
inline ProcessModel resolve_model(const json& v, const fs::path& base, const std::string& ctx) {
  if (v.is_string()) return load_model(base / v.get<std::string>());
  return model_from_json(v, ctx);
}

// ---------------------------------------------------------------------------
// Hypotheses and levels

/// "truth", {"truth": true, "mean_shift": c, "mean_scale": s} or
/// {"means": rows, "covs": [rows per type]}.
inline Hypothesis hypothesis_from_json(const json& v, const ProcessModel* model, const std::string& ctx) {
  auto truth = [&]() {
    if (!model) throw ConfigError(ctx + ": 'truth' needs a model");
    return truth_hypothesis(*model);
  };
  if (v.is_string()) {
    if (v.get<std::string>() != "truth") throw ConfigError(ctx + ": unknown hypothesis '" + v.get<std::string>() + "'");
    return truth();
  }
  if (!v.is_object()) throw ConfigError(ctx + ": expected \"truth\" or an object");
  reject_unknown(v, {"truth", "mean_shift", "mean_scale", "means", "covs"}, ctx);
  if (v.contains("truth")) {
    Hypothesis h = truth();
    if (v.contains("mean_scale")) h.means *= parse_real(v.at("mean_scale"), ctx + ".mean_scale");
    if (v.contains("mean_shift")) h.means.array() += parse_real(v.at("mean_shift"), ctx + ".mean_shift");
    return h;
  }
  const auto& means = field(v, "means", ctx);
  if (!means.is_array() || means.empty()) throw ConfigError(ctx + ".means: expected a square matrix");
  const std::size_t d = means.size();
  Hypothesis h;
  h.means = parse_matrix(means, d, ctx + ".means");
  const auto& covs = field(v, "covs", ctx);
  if (!covs.is_array() || covs.size() != d) throw ConfigError(ctx + ".covs: expected one block per type");
  for (std::size_t t = 0; t < d; ++t) h.covs.push_back(parse_matrix(covs[t], d, ctx + ".covs[" + std::to_string(t) + "]"));
  return h;
}

inline json hypothesis_to_json(const Hypothesis& h) {
  json covs = json::array();
  for (const auto& k : h.covs) covs.push_back(matrix_json(k));
  return {{"means", matrix_json(h.means)}, {"covs", covs}};
}

/// {"joint_confidence": c} or {"alpha_trace": a1, "alpha_chi": a2}.
inline RegionLevels levels_from_json(const json& v, const std::string& ctx) {
  reject_unknown(v, {"joint_confidence", "alpha_trace", "alpha_chi"}, ctx);
  if (v.contains("joint_confidence")) {
    if (v.contains("alpha_trace") || v.contains("alpha_chi"))
      throw ConfigError(ctx + ": give either joint_confidence or the two alphas");
    try {
      return split_joint_level(parse_real(v.at("joint_confidence"), ctx + ".joint_confidence"));
    } catch (const DomainError& e) {
      throw ConfigError(ctx + ": " + e.what());
    }
  }
  RegionLevels l;
  l.alpha_trace = parse_real(field(v, "alpha_trace", ctx), ctx + ".alpha_trace");
  l.alpha_chi = parse_real(field(v, "alpha_chi", ctx), ctx + ".alpha_chi");
  for (double a : {l.alpha_trace, l.alpha_chi})
    if (!(a > 0.0 && a < 1.0)) throw ConfigError(ctx + ": alphas must lie in (0, 1)");
  return l;
}

inline Caps caps_from_json(const json& v, const std::string& ctx) {
  reject_unknown(v, {"max_total_population", "max_generation"}, ctx);
  Caps c;
  if (v.contains("max_total_population"))
    c.max_total_population = parse_u64(v.at("max_total_population"), ctx + ".max_total_population");
  if (v.contains("max_generation")) c.max_generation = parse_u64(v.at("max_generation"), ctx + ".max_generation");
  return c;
}

inline ObservationLevel level_from_json(const json& v, const std::string& ctx) {
  if (!v.is_string()) throw ConfigError(ctx + ": expected a string");
  try {
    return parse_level(v.get<std::string>());
  } catch (const ConfigError& e) {
    throw ConfigError(ctx + ": " + e.what());
  }
}

inline CovarianceChoice covariance_from_json(const json& v, const std::string& ctx) {
  if (!v.is_string()) throw ConfigError(ctx + ": expected a string");
  try {
    return parse_covariance_choice(v.get<std::string>());
  } catch (const Error& e) {
    throw ConfigError(ctx + ": " + e.what());
  }
}

inline std::set<std::string> estimator_names(const json& v, std::initializer_list<std::string_view> allowed,
                                             const std::string& ctx) {
  if (!v.is_array()) throw ConfigError(ctx + ": expected an array of estimator names");
  std::set<std::string> out;
  for (const auto& e : v) {
    if (!e.is_string()) throw ConfigError(ctx + ": estimator names must be strings");
    const auto s = e.get<std::string>();
    bool ok = false;
    for (auto a : allowed) ok = ok || s == a;
    if (!ok) throw ConfigError(ctx + ": unknown estimator '" + s + "'");
    out.insert(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Command configs

struct SimulateConfig {
  ProcessModel model;
  std::size_t horizon = 0;
  std::optional<std::uint64_t> seed;
  ObservationLevel level = ObservationLevel::Totals;
  Caps caps;
};

inline SimulateConfig simulate_config_from_json(const json& j, const fs::path& base) {
  const std::string ctx = "simulate config";
  reject_unknown(j, {"model", "horizon", "seed", "level", "caps"}, ctx);
  SimulateConfig c;
  c.model = resolve_model(field(j, "model", ctx), base, ctx + ".model");
  c.horizon = parse_u64(field(j, "horizon", ctx), ctx + ".horizon");
  if (j.contains("seed")) c.seed = parse_u64(j.at("seed"), ctx + ".seed");
  if (j.contains("level")) c.level = level_from_json(j.at("level"), ctx + ".level");
  if (j.contains("caps")) c.caps = caps_from_json(j.at("caps"), ctx + ".caps");
  return c;
}

struct EstimateConfig {
  fs::path trajectory;
  std::optional<fs::path> detail;
  std::optional<ProcessModel> model;
  std::set<std::string> estimators{"mle", "empirical"};
  CovarianceChoice covariance = CovarianceChoice::Empirical;
  std::optional<Hypothesis> hypothesis;
  RegionLevels levels;
};

inline EstimateConfig estimate_config_from_json(const json& j, const fs::path& base) {
  const std::string ctx = "estimate config";
  reject_unknown(j, {"trajectory", "detail", "model", "estimators", "covariance", "hypothesis", "levels"}, ctx);
  EstimateConfig c;
  c.trajectory = base / field(j, "trajectory", ctx).get<std::string>();
  if (j.contains("detail")) c.detail = base / j.at("detail").get<std::string>();
  if (j.contains("model")) c.model = resolve_model(j.at("model"), base, ctx + ".model");
  if (j.contains("estimators"))
    c.estimators = estimator_names(j.at("estimators"), {"mle", "empirical", "lse", "distribution"}, ctx + ".estimators");
  if (j.contains("covariance")) c.covariance = covariance_from_json(j.at("covariance"), ctx + ".covariance");
  if (j.contains("hypothesis"))
    c.hypothesis = hypothesis_from_json(j.at("hypothesis"), c.model ? &*c.model : nullptr, ctx + ".hypothesis");
  if (j.contains("levels")) c.levels = levels_from_json(j.at("levels"), ctx + ".levels");
  return c;
}

/// Experiment plan file. "model" is inline or a path relative to `base`.
inline ExperimentPlan plan_from_json(const json& j, const fs::path& base) {
  const std::string ctx = "plan";
  reject_unknown(j,
                 {"name", "description", "model", "horizon", "replications", "master_seed", "level", "caps",
                  "estimators", "covariance", "hypothesis", "levels", "condition_on_survival", "survivor_target",
                  "threads"},
                 ctx);
  ExperimentPlan p;
  p.model = resolve_model(field(j, "model", ctx), base, ctx + ".model");
  p.horizon = parse_u64(field(j, "horizon", ctx), ctx + ".horizon");
  p.replications = parse_u64(field(j, "replications", ctx), ctx + ".replications");
  if (j.contains("master_seed")) p.master_seed = parse_u64(j.at("master_seed"), ctx + ".master_seed");
  if (j.contains("level")) p.level = level_from_json(j.at("level"), ctx + ".level");
  if (j.contains("caps")) p.caps = caps_from_json(j.at("caps"), ctx + ".caps");
  if (j.contains("estimators")) {
    const auto names = estimator_names(j.at("estimators"), {"mle", "empirical", "lse"}, ctx + ".estimators");
    p.estimators = {names.contains("mle"), names.contains("empirical"), names.contains("lse")};
  }
  if (j.contains("covariance")) p.covariance = covariance_from_json(j.at("covariance"), ctx + ".covariance");
  if (j.contains("hypothesis")) p.hypothesis = hypothesis_from_json(j.at("hypothesis"), &p.model, ctx + ".hypothesis");
  if (j.contains("levels")) p.levels = levels_from_json(j.at("levels"), ctx + ".levels");
  if (j.contains("condition_on_survival")) {
    if (!j.at("condition_on_survival").is_boolean()) throw ConfigError(ctx + ".condition_on_survival: expected a boolean");
    p.condition_on_survival = j.at("condition_on_survival").get<bool>();
  }
  if (j.contains("survivor_target")) p.survivor_target = parse_u64(j.at("survivor_target"), ctx + ".survivor_target");
  if (j.contains("threads")) p.threads = static_cast<unsigned>(parse_u64(j.at("threads"), ctx + ".threads"));
  if (p.replications < 1) throw ConfigError(ctx + ".replications: must be at least 1");
  if (p.horizon < 2) throw ConfigError(ctx + ".horizon: must be at least 2");
  return p;
}

inline ExperimentPlan load_plan(const fs::path& path) {
  return plan_from_json(read_json_file(path), path.parent_path());
}

// ---------------------------------------------------------------------------
// Trajectory CSV

namespace detail {

inline std::vector<std::string> split(const std::string& line, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

inline Count to_count(const std::string& s, const std::string& ctx) {
  std::size_t used = 0;
  try {
    const auto v = std::stoull(s, &used);
    if (used == s.size() && !s.empty() && s.front() != '-') return v;
  } catch (const std::exception&) {
  }
  throw ConfigError(ctx + ": expected a count, got '" + s + "'");
}

inline std::pair<TrajectoryStatus, std::size_t> parse_status(const std::string& s, const std::string& ctx) {
  if (s == "alive") return {TrajectoryStatus::Alive, 0};
  for (auto [prefix, st] : {std::pair{std::string("extinct-at-"), TrajectoryStatus::Extinct},
                            std::pair{std::string("capped-at-"), TrajectoryStatus::Capped}})
    if (s.rfind(prefix, 0) == 0) return {st, to_count(s.substr(prefix.size()), ctx)};
  throw ConfigError(ctx + ": unknown status '" + s + "'");
}

struct CsvFile {
  std::map<std::string, std::string> meta;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;
};

inline CsvFile read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open file");
  CsvFile f;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.rfind("# ", 0) == 0) {
      const auto eq = line.find('=');
      if (eq != std::string::npos) f.meta[line.substr(2, eq - 2)] = line.substr(eq + 1);
      continue;
    }
    auto cells = split(line);
    if (f.columns.empty()) {
      f.columns = std::move(cells);
      continue;
    }
    if (cells.size() != f.columns.size())
      throw ConfigError(path.string() + ":" + std::to_string(no) + ": expected " + std::to_string(f.columns.size()) +
                        " fields, found " + std::to_string(cells.size()));
    f.rows.push_back(std::move(cells));
    f.line_numbers.push_back(no);
  }
  if (f.columns.empty()) throw ConfigError(path.string() + ": no header row");
  return f;
}

} // namespace detail

inline std::vector<std::string> trajectory_columns(std::size_t d) {
  std::vector<std::string> c{"generation"};
  for (std::size_t i = 1; i <= d; ++i) c.push_back("x_" + std::to_string(i));
  for (std::size_t j = 1; j <= d; ++j)
    for (std::size_t i = 1; i <= d; ++i) c.push_back("y_" + std::to_string(j) + "_" + std::to_string(i));
  c.push_back("status");
  return c;
}

inline void write_header(std::ostream& os, std::string_view kind, const std::string& hash,
                         const std::vector<std::pair<std::string, std::string>>& meta) {
  os << "# bgw " << kind << "\n";
  os << "# config_hash=" << hash << "\n";
  for (const auto& [k, v] : meta) os << "# " << k << "=" << v << "\n";
}

inline void write_row(std::ostream& os, const std::vector<std::string>& cells) {
  for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
  os << "\n";
}

/// One row per recorded generation. y_j_i is the type-i offspring total of
/// type-j parents; blank at counts level and for generation 0. The status
/// column is "alive" except on the last row, which carries the final status.
inline void write_trajectory_csv(std::ostream& os, const Trajectory& t, const std::string& hash) {
  const std::size_t d = t.dim();
  write_header(os, "trajectory", hash,
               {{"model", t.model_name}, {"seed", std::to_string(t.seed)}, {"level", to_string(t.level)},
                {"dim", std::to_string(d)}});
  write_row(os, trajectory_columns(d));
  for (std::size_t g = 0; g < t.generations.size(); ++g) {
    const auto& rec = t.generations[g];
    std::vector<std::string> cells{std::to_string(g)};
    for (auto v : rec.x) cells.push_back(std::to_string(v));
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t i = 0; i < d; ++i) cells.push_back(rec.y.size() == d ? std::to_string(rec.y[j][i]) : "");
    cells.push_back(g + 1 == t.generations.size() ? t.status_string() : "alive");
    write_row(os, cells);
  }
}

inline std::vector<std::string> detail_columns(std::size_t d) {
  std::vector<std::string> c{"generation", "parent_type", "parent_index"};
  for (std::size_t i = 1; i <= d; ++i) c.push_back("c_" + std::to_string(i));
  return c;
}

/// Individual offspring vectors (full level): parent_type and parent_index are 1-based.
inline void write_detail_csv(std::ostream& os, const Trajectory& t, const std::string& hash) {
  const std::size_t d = t.dim();
  write_header(os, "offspring-detail", hash,
               {{"model", t.model_name}, {"seed", std::to_string(t.seed)}, {"dim", std::to_string(d)}});
  write_row(os, detail_columns(d));
  for (std::size_t g = 1; g < t.generations.size(); ++g) {
    const auto& rec = t.generations[g];
    for (std::size_t j = 0; j < rec.detail.size(); ++j)
      for (std::size_t k = 0; k < rec.detail[j].size(); ++k) {
        std::vector<std::string> cells{std::to_string(g), std::to_string(j + 1), std::to_string(k + 1)};
        for (auto v : rec.detail[j][k]) cells.push_back(std::to_string(v));
        write_row(os, cells);
      }
  }
}

inline Trajectory read_trajectory_csv(const fs::path& path, const std::optional<fs::path>& detail_path = {}) {
  const auto f = detail::read_csv(path);
  const std::string ctx = path.string();
  const auto dim_it = f.meta.find("dim");
  if (dim_it == f.meta.end()) throw ConfigError(ctx + ": missing '# dim=' header");
  const std::size_t d = detail::to_count(dim_it->second, ctx + ": dim");
  if (f.columns != trajectory_columns(d)) throw ConfigError(ctx + ": column layout does not match dim=" + dim_it->second);
  Trajectory t;
  t.model_name = f.meta.contains("model") ? f.meta.at("model") : "";
  if (f.meta.contains("seed")) t.seed = detail::to_count(f.meta.at("seed"), ctx + ": seed");
  t.level = f.meta.contains("level") ? parse_level(f.meta.at("level")) : ObservationLevel::Totals;
  if (f.rows.empty()) throw ConfigError(ctx + ": no generations");
  for (std::size_t r = 0; r < f.rows.size(); ++r) {
    const auto& row = f.rows[r];
    const std::string rctx = ctx + ":" + std::to_string(f.line_numbers[r]);
    if (detail::to_count(row[0], rctx) != r) throw ConfigError(rctx + ": generations must be consecutive from 0");
    GenerationRecord rec;
    for (std::size_t i = 0; i < d; ++i) rec.x.push_back(detail::to_count(row[1 + i], rctx));
    const bool has_y = r > 0 && t.level != ObservationLevel::Counts;
    if (has_y) {
      rec.y.assign(d, Counts(d, 0));
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t i = 0; i < d; ++i) rec.y[j][i] = detail::to_count(row[1 + d + j * d + i], rctx);
      for (std::size_t i = 0; i < d; ++i) {
        Count s = 0;
        for (std::size_t j = 0; j < d; ++j) s += rec.y[j][i];
        if (s != rec.x[i]) throw ConfigError(rctx + ": x is not the sum of the y columns");
      }
    }
    t.generations.push_back(std::move(rec));
  }
  std::tie(t.status, t.status_generation) = detail::parse_status(f.rows.back().back(), ctx + ": status");

  if (t.level == ObservationLevel::Full) {
    if (!detail_path) {
      t.level = ObservationLevel::Totals;
    } else {
      const auto df = detail::read_csv(*detail_path);
      if (df.columns != detail_columns(d)) throw ConfigError(detail_path->string() + ": column layout mismatch");
      for (std::size_t g = 1; g < t.generations.size(); ++g) t.generations[g].detail.assign(d, {});
      for (std::size_t r = 0; r < df.rows.size(); ++r) {
        const auto& row = df.rows[r];
        const std::string rctx = detail_path->string() + ":" + std::to_string(df.line_numbers[r]);
        const auto g = detail::to_count(row[0], rctx);
        const auto j = detail::to_count(row[1], rctx);
        if (g < 1 || g >= t.generations.size() || j < 1 || j > d) throw ConfigError(rctx + ": index out of range");
        Counts c;
        for (std::size_t i = 0; i < d; ++i) c.push_back(detail::to_count(row[3 + i], rctx));
        t.generations[g].detail[j - 1].push_back(std::move(c));
      }
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Estimates

inline std::vector<std::string> estimate_columns(std::size_t d) {
  std::vector<std::string> c{"seed", "horizon", "status"};
  const auto ij = [&](const std::string& p) {
    for (std::size_t i = 1; i <= d; ++i)
      for (std::size_t j = 1; j <= d; ++j) c.push_back(p + "_" + std::to_string(i) + "_" + std::to_string(j));
  };
  ij("mle");
  ij("emp");
  ij("lse");
  for (const std::string p : {"khat", "kcheck"})
    for (std::size_t t = 1; t <= d; ++t) ij(p + "_" + std::to_string(t));
  for (std::size_t j = 1; j <= d; ++j) c.push_back("s_prev_" + std::to_string(j));
  for (std::size_t j = 1; j <= d; ++j) c.push_back("x_prev_" + std::to_string(j));
  ij("q_prev");
  return c;
}

/// Estimates of one trajectory at its final horizon. Quantities that were
/// not computed are left blank; an MLE column of a type with no parents is blank.
struct EstimateRow {
  std::uint64_t seed = 0;
  std::string status;
  std::size_t horizon = 0;
  std::size_t dim = 0;
  std::optional<Matrix> mle;
  std::vector<bool> mle_defined;
  std::optional<Matrix> emp;
  std::optional<Matrix> lse;
  std::vector<Matrix> khat, kcheck;
  std::optional<Vector> s_prev, x_prev;
  std::optional<Matrix> q_prev;
};

inline void write_estimates_csv(std::ostream& os, const std::vector<EstimateRow>& rows, const std::string& hash) {
  const std::size_t d = rows.empty() ? 0 : rows.front().dim;
  write_header(os, "estimates", hash, {{"dim", std::to_string(d)}});
  write_row(os, estimate_columns(d));
  for (const auto& r : rows) {
    std::vector<std::string> cells{std::to_string(r.seed), std::to_string(r.horizon), r.status};
    const auto di = static_cast<Eigen::Index>(d);
    auto put = [&](const std::optional<Matrix>& m, const std::vector<bool>* defined = nullptr) {
      for (Eigen::Index i = 0; i < di; ++i)
        for (Eigen::Index j = 0; j < di; ++j) {
          const bool ok = m && (!defined || defined->empty() || (*defined)[static_cast<std::size_t>(j)]);
          cells.push_back(ok ? num((*m)(i, j)) : "");
        }
    };
    put(r.mle, &r.mle_defined);
    put(r.emp);
    put(r.lse);
    for (const auto* blocks : {&r.khat, &r.kcheck})
      for (std::size_t t = 0; t < d; ++t)
        put(blocks->size() == d ? std::optional<Matrix>((*blocks)[t]) : std::nullopt);
    for (const auto* v : {&r.s_prev, &r.x_prev})
      for (Eigen::Index j = 0; j < di; ++j) cells.push_back(*v ? num((**v)(j)) : "");
    put(r.q_prev);
    write_row(os, cells);
  }
}

inline json region_report_json(const RegionReport& r, const std::string& hash) {
  return {{"config_hash", hash},
          {"horizon", r.horizon},
          {"covariance", to_string(r.which_cov)},
          {"trace_stat", jnum(r.trace_stat)},
          {"chi_stat", jnum(r.chi_stat)},
          {"z_threshold", jnum(r.z_threshold)},
          {"chi_threshold", jnum(r.chi_threshold)},
          {"alpha_trace", r.levels.alpha_trace},
          {"alpha_chi", r.levels.alpha_chi},
          {"joint_confidence", r.levels.joint_confidence()},
          {"trace_inside", r.trace_inside},
          {"chi_inside", r.chi_inside},
          {"verdict", r.inside ? "inside" : "outside"},
          {"ratio_estimate", jnum(r.ratio_estimate)}};
}

// ---------------------------------------------------------------------------
// Monte Carlo exports

inline std::vector<std::string> replication_columns() {
  return {"index",     "seed",      "status",    "err_mle", "err_emp",    "err_lse",   "chi_qsl",
          "chi_emp",   "trace_qsl", "trace_emp", "ratio",   "region_trace", "region_chi", "verdict"};
}

inline void write_replications_csv(std::ostream& os, const EnsembleSummary& s, const std::string& hash) {
  write_header(os, "replications", hash, {});
  write_row(os, replication_columns());
  for (const auto& r : s.runs) {
    Trajectory tmp;
    tmp.status = r.status;
    tmp.status_generation = r.status_generation;
    write_row(os, {std::to_string(r.index), std::to_string(r.seed), tmp.status_string(), num(r.err_mle),
                   num(r.err_emp), num(r.err_lse), num(r.chi_qsl), num(r.chi_emp), num(r.trace_qsl),
                   num(r.trace_emp), num(r.ratio), r.region ? num(r.region->trace_stat) : "",
                   r.region ? num(r.region->chi_stat) : "", r.region ? (r.region->inside ? "inside" : "outside") : ""});
  }
}

inline json stats_json(const SampleStats& s) {
  return {{"count", s.count},         {"mean", jnum(s.mean)}, {"variance", jnum(s.variance)},
          {"skewness", jnum(s.skewness)}, {"median", jnum(s.median)}, {"q05", jnum(s.q05)},
          {"q95", jnum(s.q95)},       {"ks", jnum(s.ks)}};
}

inline json digest_json(const ExperimentPlan& plan, const EnsembleSummary& s, const std::string& hash) {
  const double d2 = static_cast<double>(plan.model.dim() * plan.model.dim());
  json j;
  j["plan_hash"] = hash;
  j["model"] = plan.model.name;
  j["horizon"] = plan.horizon;
  j["master_seed"] = plan.master_seed;
  j["level"] = to_string(plan.level);
  j["condition_on_survival"] = plan.condition_on_survival;
  j["replications"] = s.replications;
  j["surviving"] = s.surviving;
  j["extinct"] = s.extinct;
  j["capped"] = s.capped;
  j["survival"] = {{"fraction", jnum(s.survival_fraction)}, {"ci95", {s.survival_ci.lo, s.survival_ci.hi}}};
  json errs = json::object();
  for (const auto& [k, v] : s.errors) errs[k] = stats_json(v);
  j["errors"] = errs;
  j["lse_closed_form_max_gap"] = jnum(s.max_lse_closed_form_gap);
  j["pivots"] = {{"chi_qsl", stats_json(s.chi_qsl)},
                 {"chi_emp", stats_json(s.chi_emp)},
                 {"trace_qsl", stats_json(s.trace_qsl)},
                 {"trace_emp", stats_json(s.trace_emp)},
                 {"chi_target_q95", chi2_quantile(d2, 0.95)},
                 {"trace_deviation_variance_ratio", jnum(s.trace_variance_ratio)}};
  j["ratio"] = stats_json(s.ratio);
  json kq = json::array(), ke = json::array();
  for (const auto& m : s.median_qsl_cov) kq.push_back(matrix_json(m));
  for (const auto& m : s.median_emp_cov) ke.push_back(matrix_json(m));
  j["median_cov"] = {{"qsl", kq}, {"empirical", ke}};
  json truth_k = json::array();
  for (const auto& m : plan.model.cov_blocks) truth_k.push_back(matrix_json(m));
  j["truth"] = {{"means", matrix_json(plan.model.mean_matrix)}, {"covs", truth_k}};
  j["qsl"] = {{"series_mle", s.qsl_series_mle},
              {"series_emp", s.qsl_series_emp},
              {"terminal_mle", stats_json(s.qsl_terminal_mle)},
              {"terminal_emp", stats_json(s.qsl_terminal_emp)},
              {"variance_ratio", jnum(s.qsl_variance_ratio)},
              {"efficiency", jnum(s.efficiency)}};
  j["lil"] = {{"scaled_mle", stats_json(s.lil_mle)},
              {"scaled_emp", stats_json(s.lil_emp)},
              {"constant_mle", jnum(s.lil_constant_mle)},
              {"constant_emp", jnum(s.lil_constant_emp)}};
  if (s.coverage) {
    const auto& c = *s.coverage;
    j["coverage"] = {{"inside", c.inside},
                     {"total", c.total},
                     {"rate", jnum(c.rate)},
                     {"ci95", {c.ci.lo, c.ci.hi}},
                     {"covariance", to_string(plan.covariance)},
                     {"alpha_trace", plan.levels.alpha_trace},
                     {"alpha_chi", plan.levels.alpha_chi},
                     {"z_threshold", normal_quantile(1.0 - plan.levels.alpha_trace / 2.0)},
                     {"chi_threshold", chi2_quantile(d2, 1.0 - plan.levels.alpha_chi)}};
  }
  return j;
}

} // namespace bgw::io
