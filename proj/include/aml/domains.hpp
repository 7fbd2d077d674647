#pragma once

/**
 * @file domains.hpp
 * @brief Synthetic on-manifold data (hyperboloid/plane curve, block on an
 * incline) and off-manifold samplers.
 */

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <filesystem>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aml/error.hpp"
#include "aml/io.hpp"
#include "aml/matrix.hpp"
#include "aml/rng.hpp"

namespace aml {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  double width() const { return hi - lo; }
  friend bool operator==(const Range&, const Range&) = default;
};

inline void to_json(json& j, const Range& r) { j = json::array({r.lo, r.hi}); }
inline void from_json(const json& j, Range& r) {
  r.lo = j.at(0).get<double>();
  r.hi = j.at(1).get<double>();
}

/// A residual that is zero exactly on the true manifold.
using Residual = std::function<double(std::span<const double>)>;

// ---------------------------------------------------------------------------
// Analytic domain: one-sheet hyperboloid x^2 + y^2 - z^2 = 1 cut by z = p x.
// ---------------------------------------------------------------------------

struct AnalyticSpec {
  double slope = 0.5;
  double noise_sigma = 0.01;
  std::size_t count = 5000;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(std::abs(slope) < 1.0)) throw ContractError("analytic: |slope| must be < 1");
    if (!(noise_sigma >= 0.0)) throw ContractError("analytic: noise must be non-negative");
    if (count == 0) throw ContractError("analytic: count must be positive");
  }
};

inline void to_json(json& j, const AnalyticSpec& s) {
  j = json{{"slope", s.slope}, {"noise_sigma", s.noise_sigma}, {"count", s.count}, {"seed", s.seed}};
}
inline void from_json(const json& j, AnalyticSpec& s) {
  s.slope = j.at("slope").get<double>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  s.count = j.at("count").get<std::size_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
}

/// Noise-free point on the curve for parameter u.
inline std::array<double, 3> analytic_point(double slope, double u) {
  const double x = std::cos(u) / std::sqrt(1.0 - slope * slope);
  return {x, std::sin(u), slope * x};
}

/// Euclidean distance from `pt` to the noise-free curve: dense scan of the
/// curve parameter, then golden-section refinement around the best sample.
inline double analytic_curve_distance(double slope, std::span<const double> pt, std::size_t samples = 2048) {
  auto dist2 = [&](double u) {
    const auto c = analytic_point(slope, u);
    double s = 0.0;
    for (std::size_t i = 0; i < 3; ++i) s += (c[i] - pt[i]) * (c[i] - pt[i]);
    return s;
  };
  const double step = 2.0 * std::numbers::pi / static_cast<double>(samples);
  double best_u = 0.0, best = dist2(0.0);
  for (std::size_t k = 1; k < samples; ++k) {
    const double u = step * static_cast<double>(k), v = dist2(u);
    if (v < best) best = v, best_u = u;
  }
  const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
  double a = best_u - step, b = best_u + step;
  for (int it = 0; it < 60; ++it) {
    const double c = b - phi * (b - a), d = a + phi * (b - a);
    if (dist2(c) < dist2(d)) b = d;
    else a = c;
  }
  return std::sqrt(std::min(best, dist2(0.5 * (a + b))));
}

inline std::vector<Residual> analytic_ground_truth(double slope) {
  return {
      [](std::span<const double> t) { return t[0] * t[0] + t[1] * t[1] - t[2] * t[2] - 1.0; },
      [slope](std::span<const double> t) { return t[2] - slope * t[0]; },
  };
}

// ---------------------------------------------------------------------------
// Block on an incline
// ---------------------------------------------------------------------------

struct InclineSpec {
  std::string preset;
  double theta = std::numbers::pi / 4;  // radians
  double mu_k = 0.0;
  double mu_d = 0.0;
  double mass = 1.0;
  double gravity = 9.81;
  double horizon = 1.0;
  double dt = 1e-3;
  Range p0{0.0, 0.2};
  Range v0{0.0, 0.2};
  double noise_sigma = 0.01;
  bool include_theta = false;
  Range theta_range{std::numbers::pi / 4, std::numbers::pi / 4};
  bool include_action = false;
  Range action_range{-1.0, 1.0};

  void validate() const {
    auto angle_ok = [](double t) { return t > 0.0 && t < std::numbers::pi / 2; };
    if (!angle_ok(theta)) throw ContractError("incline: theta must lie in (0, pi/2)");
    if (include_theta && !(angle_ok(theta_range.lo) && angle_ok(theta_range.hi) && theta_range.lo <= theta_range.hi))
      throw ContractError("incline: theta range must lie in (0, pi/2)");
    if (mu_k < 0.0 || mu_d < 0.0) throw ContractError("incline: friction and drag must be non-negative");
    if (!(mass > 0.0)) throw ContractError("incline: mass must be positive");
    if (!(dt > 0.0) || !(dt < horizon)) throw ContractError("incline: need 0 < dt < horizon");
    if (p0.lo > p0.hi || v0.lo > v0.hi) throw ContractError("incline: empty start range");
    if (noise_sigma < 0.0) throw ContractError("incline: noise must be non-negative");
  }

  std::vector<std::string> columns() const {
    std::vector<std::string> c;
    if (include_theta) c.push_back("theta");
    for (const char* n : {"p0", "v0", "p1", "v1"}) c.emplace_back(n);
    if (include_action) c.push_back("action");
    return c;
  }
  std::size_t dim() const { return 4 + (include_theta ? 1 : 0) + (include_action ? 1 : 0); }
  /// Column of p0 within tau.
  std::size_t state_offset() const { return include_theta ? 1 : 0; }

  /// Experiment presets: fig6-top (45 deg, frictionless, starts in [0,0.2]),
  /// fig6-mid (35 deg, mu_k = 0.8), fig6-drag (theta in [pi/20, pi/2.5], mu_d = 2).
  static InclineSpec preset_named(std::string_view name) {
    InclineSpec s;
    s.preset = std::string(name);
    if (name == "fig6-top") {
      s.theta = std::numbers::pi / 4;
    } else if (name == "fig6-mid") {
      s.theta = 35.0 * std::numbers::pi / 180.0;
      s.mu_k = 0.8;
      s.p0 = {0.0, 1.0};
      s.v0 = {0.0, 2.0};
    } else if (name == "fig6-drag") {
      s.theta = 10.0 * std::numbers::pi / 180.0;
      s.mu_d = 2.0;
      s.include_theta = true;
      s.theta_range = {std::numbers::pi / 20, std::numbers::pi / 2.5};
      s.p0 = {0.0, 1.0};
      s.v0 = {0.0, 1.0};
    } else {
      throw ContractError("unknown incline preset '" + std::string(name) + "'");
    }
    return s;
  }
};

inline void to_json(json& j, const InclineSpec& s) {
  j = json{{"preset", s.preset},
           {"theta", s.theta},
           {"mu_k", s.mu_k},
           {"mu_d", s.mu_d},
           {"mass", s.mass},
           {"gravity", s.gravity},
           {"horizon", s.horizon},
           {"dt", s.dt},
           {"p0", s.p0},
           {"v0", s.v0},
           {"noise_sigma", s.noise_sigma},
           {"include_theta", s.include_theta},
           {"theta_range", s.theta_range},
           {"include_action", s.include_action},
           {"action_range", s.action_range}};
}
inline void from_json(const json& j, InclineSpec& s) {
  s.preset = j.value("preset", std::string{});
  s.theta = j.at("theta").get<double>();
  s.mu_k = j.at("mu_k").get<double>();
  s.mu_d = j.at("mu_d").get<double>();
  s.mass = j.at("mass").get<double>();
  s.gravity = j.at("gravity").get<double>();
  s.horizon = j.at("horizon").get<double>();
  s.dt = j.at("dt").get<double>();
  s.p0 = j.at("p0").get<Range>();
  s.v0 = j.at("v0").get<Range>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  s.include_theta = j.at("include_theta").get<bool>();
  s.theta_range = j.at("theta_range").get<Range>();
  s.include_action = j.at("include_action").get<bool>();
  s.action_range = j.at("action_range").get<Range>();
}

struct InclineState {
  double p = 0.0;
  double v = 0.0;
  bool resting = false;
};

/// Integrates the block over the spec's horizon.
///
/// a = g (sin theta - mu_k cos theta sign(v)) - mu_d v + F / m. Velocity takes
/// an explicit Euler step from the current acceleration; position uses the
/// average of old and new velocity, which is exact while the acceleration is
/// constant. When v reaches or crosses zero and static friction can hold the
/// block (tan theta <= mu_k and |F| <= mu_k m g cos theta) the block stops
/// where it decelerates to zero and stays there.
inline InclineState simulate_incline(const InclineSpec& spec, double p0, double v0, double action_force, double theta,
                                     double horizon) {
  const double s = std::sin(theta), c = std::cos(theta);
  const double g = spec.gravity;
  const bool can_rest =
      std::tan(theta) <= spec.mu_k && std::abs(action_force) <= spec.mu_k * spec.mass * g * c;
  const auto steps = static_cast<long>(std::llround(horizon / spec.dt));
  InclineState st{p0, v0, false};
  if (st.v == 0.0 && can_rest) {
    st.resting = true;
    return st;
  }
  for (long i = 0; i < steps; ++i) {
    const double sgn = st.v > 0.0 ? 1.0 : (st.v < 0.0 ? -1.0 : 0.0);
    const double a = g * (s - spec.mu_k * c * sgn) - spec.mu_d * st.v + action_force / spec.mass;
    const double v_next = st.v + a * spec.dt;
    const bool crosses = (st.v > 0.0 && v_next <= 0.0) || (st.v < 0.0 && v_next >= 0.0);
    if (crosses && can_rest) {
      const double t_stop = a != 0.0 ? std::min(spec.dt, std::abs(st.v / a)) : spec.dt;
      st.p += 0.5 * st.v * t_stop;
      st.v = 0.0;
      st.resting = true;
      break;
    }
    st.p += 0.5 * (st.v + v_next) * spec.dt;
    st.v = v_next;
  }
  return st;
}

inline InclineState simulate_incline(const InclineSpec& spec, double p0, double v0, double action_force = 0.0) {
  return simulate_incline(spec, p0, v0, action_force, spec.theta, spec.horizon);
}

/// Residuals p1 - sim(p0, v0).p and v1 - sim(p0, v0).v in the dataset's column layout.
inline std::vector<Residual> incline_ground_truth(const InclineSpec& spec) {
  const std::size_t off = spec.state_offset();
  auto sim = [spec, off](std::span<const double> t) {
    const double theta = spec.include_theta ? t[0] : spec.theta;
    const double action = spec.include_action ? t[off + 4] : 0.0;
    return simulate_incline(spec, t[off], t[off + 1], action, theta, spec.horizon);
  };
  return {
      [sim, off](std::span<const double> t) { return t[off + 2] - sim(t).p; },
      [sim, off](std::span<const double> t) { return t[off + 3] - sim(t).v; },
  };
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct ManifoldDataset {
  std::string kind;  // "analytic" or "incline"
  std::vector<std::string> columns;
  Matrix on_points;
  Matrix off_points;
  std::vector<double> box_lo;
  std::vector<double> box_hi;
  json spec;
  std::uint64_t seed = 0;
  std::string fingerprint;
  std::vector<Residual> ground_truth;  // rebuilt from spec; never serialized

  std::size_t dim() const { return on_points.cols(); }
};

inline std::string dataset_fingerprint(const std::string& kind, const json& spec, std::uint64_t seed) {
  const std::string canonical = kind + "|" + spec.dump() + "|" + std::to_string(seed);
  return hex64(fnv1a64(canonical));
}

inline std::vector<Residual> ground_truth_for(const std::string& kind, const json& spec) {
  if (kind == "analytic") return analytic_ground_truth(spec.at("slope").get<double>());
  if (kind == "incline") return incline_ground_truth(spec.get<InclineSpec>());
  return {};
}

inline void compute_bounds(ManifoldDataset& d) {
  const std::size_t n = d.on_points.cols();
  d.box_lo.assign(n, std::numeric_limits<double>::infinity());
  d.box_hi.assign(n, -std::numeric_limits<double>::infinity());
  for (std::size_t r = 0; r < d.on_points.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) {
      d.box_lo[c] = std::min(d.box_lo[c], d.on_points(r, c));
      d.box_hi[c] = std::max(d.box_hi[c], d.on_points(r, c));
    }
}

inline ManifoldDataset gen_analytic(const AnalyticSpec& spec) {
  spec.validate();
  SeedSplitter seeds(spec.seed);
  auto rng = seeds.stream("analytic.on");
  std::uniform_real_distribution<double> u(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> noise(0.0, 1.0);
  ManifoldDataset d;
  d.kind = "analytic";
  d.columns = {"x", "y", "z"};
  d.on_points = Matrix(spec.count, 3);
  for (std::size_t i = 0; i < spec.count; ++i) {
    auto pt = analytic_point(spec.slope, u(rng));
    for (std::size_t c = 0; c < 3; ++c) d.on_points(i, c) = pt[c] + spec.noise_sigma * noise(rng);
  }
  d.spec = spec;
  d.seed = spec.seed;
  d.fingerprint = dataset_fingerprint(d.kind, d.spec, d.seed);
  d.ground_truth = analytic_ground_truth(spec.slope);
  compute_bounds(d);
  return d;
}

inline ManifoldDataset gen_incline_dataset(const InclineSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  if (n == 0) throw ContractError("incline dataset: n must be >= 1");
  SeedSplitter seeds(seed);
  auto rng = seeds.stream("incline.on");
  auto uniform = [&rng](Range r) { return r.lo == r.hi ? r.lo : std::uniform_real_distribution<double>(r.lo, r.hi)(rng); };
  std::normal_distribution<double> noise(0.0, 1.0);
  ManifoldDataset d;
  d.kind = "incline";
  d.columns = spec.columns();
  d.on_points = Matrix(n, spec.dim());
  const std::size_t off = spec.state_offset();
  for (std::size_t i = 0; i < n; ++i) {
    const double theta = spec.include_theta ? uniform(spec.theta_range) : spec.theta;
    const double p0 = uniform(spec.p0);
    const double v0 = uniform(spec.v0);
    const double action = spec.include_action ? uniform(spec.action_range) : 0.0;
    const InclineState end = simulate_incline(spec, p0, v0, action, theta, spec.horizon);
    auto row = d.on_points.row(i);
    if (spec.include_theta) row[0] = theta;
    const double state[4] = {p0, v0, end.p, end.v};
    for (std::size_t c = 0; c < 4; ++c) row[off + c] = state[c] + spec.noise_sigma * noise(rng);
    if (spec.include_action) row[off + 4] = action;
  }
  d.spec = spec;
  d.spec["n"] = n;
  d.seed = seed;
  d.fingerprint = dataset_fingerprint(d.kind, d.spec, d.seed);
  d.ground_truth = incline_ground_truth(spec);
  compute_bounds(d);
  return d;
}

// ---------------------------------------------------------------------------
// Off-manifold sampling
// ---------------------------------------------------------------------------

enum class OffManifoldMode { BoxUniform, Thicken };

struct OffManifoldConfig {
  OffManifoldMode mode = OffManifoldMode::BoxUniform;
  double inflate = 0.1;                 // box_uniform: total growth of each side length
  std::optional<double> sigma_off;      // thicken: displacement in state units
  std::size_t count = 0;                // 0 = as many as on-manifold points
  std::size_t max_retries = 10;
};

inline std::string to_string(OffManifoldMode m) { return m == OffManifoldMode::BoxUniform ? "box_uniform" : "thicken"; }
inline OffManifoldMode off_mode_from_string(const std::string& s) {
  if (s == "box_uniform") return OffManifoldMode::BoxUniform;
  if (s == "thicken") return OffManifoldMode::Thicken;
  throw ContractError("unknown off-manifold mode '" + s + "'");
}

/// Samples points that do not satisfy the dataset's dynamics.
///
/// box_uniform draws from the on-point bounding box grown by `inflate`;
/// thicken displaces on-points by Gaussian noise (default per column:
/// max(10 * noise_sigma, 0.1 * column std)). A candidate that satisfies every
/// ground-truth residual to within the on-level tolerance is redrawn up to
/// max_retries times, then kept with a warning.
inline Matrix gen_offmanifold(const ManifoldDataset& d, const OffManifoldConfig& cfg, std::uint64_t seed) {
  if (d.on_points.rows() == 0) throw ContractError("gen_offmanifold: dataset has no on-manifold points");
  const std::size_t n = d.dim();
  const std::size_t count = cfg.count ? cfg.count : d.on_points.rows();
  auto rng = SeedSplitter(seed).stream(std::string("off.") + to_string(cfg.mode));

  std::vector<double> sigma(n, 0.0);
  bool degenerate = false;
  if (cfg.mode == OffManifoldMode::Thicken) {
    const double noise = d.spec.contains("noise_sigma") ? d.spec["noise_sigma"].get<double>() : 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (cfg.sigma_off) {
        sigma[c] = *cfg.sigma_off;
      } else {
        double m = 0.0, v = 0.0;
        for (std::size_t r = 0; r < d.on_points.rows(); ++r) m += d.on_points(r, c);
        m /= static_cast<double>(d.on_points.rows());
        for (std::size_t r = 0; r < d.on_points.rows(); ++r) v += std::pow(d.on_points(r, c) - m, 2);
        v /= static_cast<double>(d.on_points.rows());
        sigma[c] = std::max(10.0 * noise, 0.1 * std::sqrt(v));
      }
    }
    degenerate = std::all_of(sigma.begin(), sigma.end(), [](double s) { return s == 0.0; });
    if (degenerate) log_line("warning: thicken with zero displacement; off-manifold points equal on-manifold points");
  }

  std::uniform_int_distribution<std::size_t> pick(0, d.on_points.rows() - 1);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<std::uniform_real_distribution<double>> box;
  for (std::size_t c = 0; c < n; ++c) {
    const double grow = 0.5 * cfg.inflate * (d.box_hi[c] - d.box_lo[c]);
    box.emplace_back(d.box_lo[c] - grow, d.box_hi[c] + grow);
  }

  auto draw = [&](std::mt19937_64& g, std::span<double> row) {
    if (cfg.mode == OffManifoldMode::BoxUniform) {
      for (std::size_t c = 0; c < n; ++c) row[c] = box[c](g);
    } else {
      const std::size_t src = pick(g);
      for (std::size_t c = 0; c < n; ++c) row[c] = d.on_points(src, c) + sigma[c] * gauss(g);
    }
  };

  // "On" means within 5x the mean on-manifold residual, or within 5% of the
  // residual's typical size over the sampler itself (noise-free data).
  std::vector<double> tol;
  if (!d.ground_truth.empty()) {
    auto pilot_rng = SeedSplitter(seed).stream("off.pilot");
    const std::size_t pilot = 512;
    std::vector<double> row(n), typical(d.ground_truth.size(), 0.0);
    for (std::size_t i = 0; i < pilot; ++i) {
      draw(pilot_rng, row);
      for (std::size_t k = 0; k < typical.size(); ++k) typical[k] += std::abs(d.ground_truth[k](row)) / pilot;
    }
    for (std::size_t k = 0; k < d.ground_truth.size(); ++k) {
      double m = 0.0;
      for (std::size_t r = 0; r < d.on_points.rows(); ++r) m += std::abs(d.ground_truth[k](d.on_points.row(r)));
      tol.push_back(std::max(5.0 * m / static_cast<double>(d.on_points.rows()), 0.05 * typical[k]));
    }
  }
  auto looks_on = [&](std::span<const double> p) {
    if (tol.empty() || degenerate) return false;
    for (std::size_t k = 0; k < tol.size(); ++k)
      if (std::abs(d.ground_truth[k](p)) > tol[k]) return false;
    return true;
  };

  Matrix out(count, n);
  std::size_t kept_on = 0;
  for (std::size_t i = 0; i < count; ++i) {
    auto row = out.row(i);
    for (std::size_t attempt = 0;; ++attempt) {
      draw(rng, row);
      if (!looks_on(row)) break;
      if (attempt >= cfg.max_retries) {
        ++kept_on;
        break;
      }
    }
  }
  if (kept_on)
    log_line("warning: " + std::to_string(kept_on) + " off-manifold samples still satisfy the ground truth after " +
             std::to_string(cfg.max_retries) + " retries");
  return out;
}

// ---------------------------------------------------------------------------
// Persistence: data.csv (on-manifold), off.csv, meta.json
// ---------------------------------------------------------------------------

inline void save_dataset(const std::filesystem::path& dir, const ManifoldDataset& d) {
  write_csv(dir / "data.csv", d.columns, d.on_points);
  write_csv(dir / "off.csv", d.columns, d.off_points);
  json meta{{"kind", d.kind},         {"columns", d.columns},         {"n", d.on_points.rows()},
            {"n_off", d.off_points.rows()}, {"spec", d.spec},        {"seed", d.seed},
            {"fingerprint", d.fingerprint}, {"box_lo", d.box_lo},     {"box_hi", d.box_hi}};
  write_json(dir / "meta.json", meta);
}

inline ManifoldDataset load_dataset(const std::filesystem::path& dir) {
  ManifoldDataset d;
  const json meta = read_json(dir / "meta.json");
  try {
    d.kind = meta.at("kind").get<std::string>();
    d.columns = meta.at("columns").get<std::vector<std::string>>();
    d.spec = meta.at("spec");
    d.seed = meta.at("seed").get<std::uint64_t>();
    d.fingerprint = meta.at("fingerprint").get<std::string>();
  } catch (const json::exception& e) {
    throw IoError("bad dataset metadata in " + dir.string() + ": " + e.what());
  }
  Table on = read_csv(dir / "data.csv");
  if (on.columns != d.columns) throw IoError("data.csv header does not match meta.json columns");
  d.on_points = std::move(on.rows);
  if (std::filesystem::exists(dir / "off.csv")) {
    Table off = read_csv(dir / "off.csv");
    if (off.columns != d.columns) throw IoError("off.csv header does not match meta.json columns");
    d.off_points = std::move(off.rows);
  }
  d.ground_truth = ground_truth_for(d.kind, d.spec);
  compute_bounds(d);
  return d;
}

}  // namespace aml
