#pragma once

// Multitype Galton-Watson model: finite-support reproduction laws, exact
// moments, seeded simulation at three observation granularities and
// extinction probabilities from the generating-function fixed point.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bgw/blockmat.hpp"
#include "bgw/error.hpp"
#include "bgw/rng.hpp"

namespace bgw {

using Count = std::uint64_t;
using Counts = std::vector<Count>;

inline Count total(const Counts& c) {
  Count s = 0;
  for (Count v : c) {
    if (__builtin_add_overflow(s, v, &s)) throw PopulationOverflow("population total exceeds 64 bits");
  }
  return s;
}

inline Vector to_vector(const Counts& c) {
  Vector v(static_cast<Eigen::Index>(c.size()));
  for (std::size_t i = 0; i < c.size(); ++i) v(static_cast<Eigen::Index>(i)) = static_cast<double>(c[i]);
  return v;
}

struct Atom {
  Counts offspring;
  double probability = 0.0;
};

/// Reproduction law of one parent type: a finite list of offspring vectors
/// with their probabilities.
class OffspringLaw {
public:
  OffspringLaw(std::size_t dim, std::vector<Atom> atoms) : dim_(dim), atoms_(std::move(atoms)) {
    if (dim_ == 0) throw ConfigError("offspring law: dimension must be positive");
    if (atoms_.empty()) throw ConfigError("offspring law: no atoms");
    double sum = 0.0;
    for (const auto& a : atoms_) {
      if (a.offspring.size() != dim_) {
        std::ostringstream os;
        os << "offspring law: atom has " << a.offspring.size() << " counts, expected " << dim_;
        throw ConfigError(os.str());
      }
      if (!(a.probability > 0.0 && a.probability <= 1.0))
        throw ConfigError("offspring law: probabilities must lie in (0, 1]");
      sum += a.probability;
    }
    if (std::abs(sum - 1.0) > 1e-12) {
      std::ostringstream os;
      os.precision(17);
      os << "offspring law: probabilities sum to " << sum << ", not 1";
      throw ConfigError(os.str());
    }
    std::map<Counts, int> seen;
    for (const auto& a : atoms_)
      if (seen[a.offspring]++ > 0) throw ConfigError("offspring law: duplicate atom");
    for (auto& a : atoms_) a.probability /= sum;

    cumulative_.reserve(atoms_.size());
    double acc = 0.0;
    for (const auto& a : atoms_) {
      acc += a.probability;
      cumulative_.push_back(acc);
    }
    cumulative_.back() = 1.0;
  }

  std::size_t dim() const noexcept { return dim_; }
  const std::vector<Atom>& atoms() const noexcept { return atoms_; }

  /// Index of an atom drawn from the law (cumulative table, binary search).
  std::size_t sample_index(Stream& rng) const {
    const double u = rng.uniform();
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    return std::min(static_cast<std::size_t>(it - cumulative_.begin()), atoms_.size() - 1);
  }

  /// Point mass at `c`.
  static OffspringLaw point_mass(Counts c) {
    const std::size_t d = c.size();
    return OffspringLaw(d, {Atom{std::move(c), 1.0}});
  }

private:
  std::size_t dim_;
  std::vector<Atom> atoms_;
  std::vector<double> cumulative_;
};

struct LawMoments {
  Vector mean;
  Matrix cov;
};

inline LawMoments law_moments(const OffspringLaw& law) {
  const auto d = static_cast<Eigen::Index>(law.dim());
  LawMoments m{Vector::Zero(d), Matrix::Zero(d, d)};
  for (const auto& a : law.atoms()) m.mean += a.probability * to_vector(a.offspring);
  for (const auto& a : law.atoms()) {
    const Vector c = to_vector(a.offspring) - m.mean;
    m.cov += a.probability * c * c.transpose();
  }
  return m;
}

/// A d-type process: one law per parent type plus the moments and spectral
/// data derived from them.
struct ProcessModel {
  std::string name;
  std::vector<OffspringLaw> laws;
  Counts x0;
  Matrix mean_matrix;               ///< column j is the mean offspring vector of a type-j parent
  std::vector<Matrix> cov_blocks;   ///< offspring covariance of a type-j parent
  std::optional<PerronData> perron;
  bool primitive = false;
  bool supercritical = false;
  bool covariances_invertible = false;

  static ProcessModel build(std::string name, std::vector<OffspringLaw> laws, Counts x0 = {}) {
    if (laws.empty()) throw ConfigError("model: at least one type required");
    const std::size_t d = laws.size();
    for (const auto& l : laws)
      if (l.dim() != d) throw ConfigError("model: every law must have dimension equal to the number of types");
    if (x0.empty()) x0.assign(d, 1);
    if (x0.size() != d) throw ConfigError("model: x0 has the wrong length");

    ProcessModel m;
    m.name = std::move(name);
    m.laws = std::move(laws);
    m.x0 = std::move(x0);
    const auto di = static_cast<Eigen::Index>(d);
    m.mean_matrix = Matrix::Zero(di, di);
    m.covariances_invertible = true;
    for (std::size_t j = 0; j < d; ++j) {
      auto mom = law_moments(m.laws[j]);
      m.mean_matrix.col(static_cast<Eigen::Index>(j)) = mom.mean;
      const Vector ev = symmetric_eigenvalues(mom.cov);
      const double largest = ev.maxCoeff();
      if (!(largest > 0.0) || !(ev.minCoeff() > 1e-10 * largest)) m.covariances_invertible = false;
      m.cov_blocks.push_back(std::move(mom.cov));
    }
    m.primitive = is_primitive(m.mean_matrix);
    if (m.primitive) {
      m.perron = bgw::perron(m.mean_matrix);
      m.supercritical = m.perron->rho > 1.0;
    }
    return m;
  }

  std::size_t dim() const noexcept { return laws.size(); }

  bool regular_supercritical() const noexcept { return primitive && supercritical; }

  const PerronData& perron_data() const {
    if (!perron) throw NotPrimitiveError("model '" + name + "': mean matrix is not primitive");
    return *perron;
  }

  /// Block-diagonal covariance of all reproduction laws.
  Matrix stacked_covariance() const { return block_diag(std::span<const Matrix>(cov_blocks)); }

  double spectral_radius() const {
    if (perron) return perron->rho;
    double r = 0.0;
    for (const auto& l : eigenvalues(mean_matrix)) r = std::max(r, std::abs(l));
    return r;
  }
};

enum class ObservationLevel { Counts, Totals, Full };

inline const char* to_string(ObservationLevel l) {
  switch (l) {
    case ObservationLevel::Counts: return "counts";
    case ObservationLevel::Totals: return "totals";
    case ObservationLevel::Full: return "full";
  }
  return "?";
}

inline ObservationLevel parse_level(const std::string& s) {
  if (s == "counts") return ObservationLevel::Counts;
  if (s == "totals") return ObservationLevel::Totals;
  if (s == "full") return ObservationLevel::Full;
  throw ConfigError("unknown observation level '" + s + "' (expected counts, totals or full)");
}

inline bool covers(ObservationLevel have, ObservationLevel need) {
  return static_cast<int>(have) >= static_cast<int>(need);
}

struct GenerationRecord {
  Counts x;
  std::vector<Counts> y;                    ///< y[j]: offspring totals of type-j parents (TOTALS and FULL)
  std::vector<std::vector<Counts>> detail;  ///< detail[j][k]: offspring of the k-th type-j parent (FULL)
};

enum class TrajectoryStatus { Alive, Extinct, Capped };

struct Trajectory {
  std::string model_name;
  std::uint64_t seed = 0;
  ObservationLevel level = ObservationLevel::Totals;
  std::vector<GenerationRecord> generations;  ///< generations[0] carries X0
  TrajectoryStatus status = TrajectoryStatus::Alive;
  std::size_t status_generation = 0;

  std::size_t horizon() const noexcept { return generations.empty() ? 0 : generations.size() - 1; }
  std::size_t dim() const noexcept { return generations.empty() ? 0 : generations.front().x.size(); }
  bool surviving() const noexcept { return status != TrajectoryStatus::Extinct; }

  std::string status_string() const {
    switch (status) {
      case TrajectoryStatus::Alive: return "alive";
      case TrajectoryStatus::Extinct: return "extinct-at-" + std::to_string(status_generation);
      case TrajectoryStatus::Capped: return "capped-at-" + std::to_string(status_generation);
    }
    return "?";
  }

  void require_level(ObservationLevel need, const char* estimator) const {
    if (!covers(level, need)) {
      std::ostringstream os;
      os << estimator << " requires observation level '" << to_string(need) << "' but the trajectory was recorded at '"
         << to_string(level) << "'";
      throw ObservationLevelError(os.str());
    }
  }
};

struct Caps {
  Count max_total_population = 100'000'000;
  std::size_t max_generation = 1'000'000;
};

/// Parent counts above this are sampled as one multinomial draw of atom
/// counts at the counts and totals levels.
inline constexpr Count kPerParentLimit = 256;

/// Draws one generation from `x_prev`. Every type-j parent draws an
/// independent atom of law j; the atoms are summed into Y^j and X = sum_j Y^j.
inline GenerationRecord simulate_generation(const ProcessModel& model, const Counts& x_prev, Stream& rng,
                                            ObservationLevel level,
                                            Count population_cap = std::numeric_limits<Count>::max()) {
  const std::size_t d = model.dim();
  if (x_prev.size() != d) throw ShapeError("simulate_generation: state has the wrong length");
  if (total(x_prev) > population_cap) throw PopulationOverflow("simulate_generation: parent population exceeds the cap");

  GenerationRecord rec;
  rec.x.assign(d, 0);
  std::vector<Counts> y(d, Counts(d, 0));
  if (level == ObservationLevel::Full) rec.detail.resize(d);

  std::vector<Count> hits;
  for (std::size_t j = 0; j < d; ++j) {
    const auto& law = model.laws[j];
    const auto& atoms = law.atoms();
    hits.assign(atoms.size(), 0);
    if (level == ObservationLevel::Full) {
      rec.detail[j].reserve(x_prev[j]);
      for (Count k = 0; k < x_prev[j]; ++k) {
        const std::size_t idx = law.sample_index(rng);
        ++hits[idx];
        rec.detail[j].push_back(atoms[idx].offspring);
      }
    } else if (x_prev[j] <= kPerParentLimit) {
      for (Count k = 0; k < x_prev[j]; ++k) ++hits[law.sample_index(rng)];
    } else {
      // Multinomial atom counts by conditional binomials.
      Count left = x_prev[j];
      double mass = 1.0;
      for (std::size_t a = 0; a + 1 < atoms.size() && left > 0; ++a) {
        const double p = std::clamp(atoms[a].probability / mass, 0.0, 1.0);
        hits[a] = rng.binomial(left, p);
        left -= hits[a];
        mass -= atoms[a].probability;
      }
      hits.back() += left;
    }
    for (std::size_t a = 0; a < atoms.size(); ++a) {
      if (hits[a] == 0) continue;
      for (std::size_t i = 0; i < d; ++i) {
        Count add = 0;
        if (__builtin_mul_overflow(hits[a], atoms[a].offspring[i], &add) ||
            __builtin_add_overflow(y[j][i], add, &y[j][i]))
          throw PopulationOverflow("simulate_generation: offspring count exceeds 64 bits");
      }
    }
    for (std::size_t i = 0; i < d; ++i)
      if (__builtin_add_overflow(rec.x[i], y[j][i], &rec.x[i]))
        throw PopulationOverflow("simulate_generation: population exceeds 64 bits");
  }
  if (level != ObservationLevel::Counts) rec.y = std::move(y);
  return rec;
}

/// Iterates generations from X0 up to `horizon`, stopping on extinction or
/// when the parent population would exceed the cap.
inline Trajectory simulate_trajectory(const ProcessModel& model, std::size_t horizon, const Caps& caps, Stream& rng,
                                      ObservationLevel level) {
  if (horizon < 1) throw DomainError("simulate_trajectory: horizon must be at least 1");
  Trajectory t;
  t.model_name = model.name;
  t.seed = rng.seed();
  t.level = level;
  t.generations.push_back(GenerationRecord{model.x0, {}, {}});
  const std::size_t last = std::min(horizon, caps.max_generation);

  if (total(model.x0) == 0) {
    t.status = TrajectoryStatus::Extinct;
    return t;
  }
  for (std::size_t n = 1; n <= last; ++n) {
    const Counts& prev = t.generations.back().x;
    if (total(prev) > caps.max_total_population) {
      t.status = TrajectoryStatus::Capped;
      t.status_generation = n - 1;
      return t;
    }
    t.generations.push_back(simulate_generation(model, prev, rng, level));
    if (total(t.generations.back().x) == 0) {
      t.status = TrajectoryStatus::Extinct;
      t.status_generation = n;
      return t;
    }
  }
  if (last < horizon) {
    t.status = TrajectoryStatus::Capped;
    t.status_generation = last;
  }
  return t;
}

/// Smallest fixed point of q = f(q), f being the vector of offspring
/// generating functions, by iteration from zero. `observer` sees every iterate.
inline Vector extinction_probability(const ProcessModel& model, double tol = 1e-14,
                                     const std::function<void(const Vector&)>& observer = {},
                                     long max_iter = 10'000'000) {
  const auto d = static_cast<Eigen::Index>(model.dim());
  if (model.spectral_radius() <= 1.0) return Vector::Ones(d);

  Vector q = Vector::Zero(d);
  for (long it = 0; it < max_iter; ++it) {
    Vector next(d);
    for (Eigen::Index j = 0; j < d; ++j) {
      double f = 0.0;
      for (const auto& a : model.laws[static_cast<std::size_t>(j)].atoms()) {
        double term = a.probability;
        for (Eigen::Index i = 0; i < d; ++i) term *= std::pow(q(i), static_cast<double>(a.offspring[static_cast<std::size_t>(i)]));
        f += term;
      }
      next(j) = std::min(f, 1.0);
    }
    const double change = (next - q).cwiseAbs().maxCoeff();
    q = std::move(next);
    if (observer) observer(q);
    if (change < tol) return q;
  }
  throw ConvergenceError("extinction_probability: fixed-point iteration did not converge");
}

/// rho^-n <v, X_n> for every recorded generation.
inline std::vector<double> growth_diagnostics(const Trajectory& traj, const PerronData& pd) {
  std::vector<double> out;
  out.reserve(traj.generations.size());
  for (std::size_t n = 0; n < traj.generations.size(); ++n)
    out.push_back(pd.v.dot(to_vector(traj.generations[n].x)) / std::pow(pd.rho, static_cast<double>(n)));
  return out;
}

} // namespace bgw
