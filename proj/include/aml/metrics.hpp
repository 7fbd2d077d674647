#pragma once

/**
 * @file metrics.hpp
 * @brief Distortion coefficients, zero-level-set clouds, phase arrows and
 * latent-to-state alignment regression.
 */

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "aml/adam.hpp"
#include "aml/amltrain.hpp"
#include "aml/diffgraph.hpp"
#include "aml/domains.hpp"
#include "aml/error.hpp"
#include "aml/io.hpp"
#include "aml/matrix.hpp"
#include "aml/mlp.hpp"
#include "aml/rng.hpp"

namespace aml {

// ---------------------------------------------------------------------------
// Distortion
// ---------------------------------------------------------------------------

struct DistortionReport {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<double> rho;
  double mean = 0.0;
  double variance = 0.0;  // population variance
  std::size_t skipped = 0;
  std::uint64_t seed = 0;

  std::size_t pair_count() const { return rho.size(); }
};

inline double row_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

/// Seeded sample of distinct unordered index pairs, uniform without replacement.
inline std::vector<std::pair<std::size_t, std::size_t>> sample_pairs(std::size_t m, std::size_t count,
                                                                     std::uint64_t seed) {
  if (m < 2) throw ContractError("sample_pairs: need at least two points");
  const std::size_t total = m * (m - 1) / 2;
  count = std::min(count, total);
  auto rng = SeedSplitter(seed).stream("pairs");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  out.reserve(count);
  if (total <= 4 * count) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = i + 1; j < m; ++j) out.emplace_back(i, j);
    for (std::size_t k = 0; k < count; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, out.size() - 1);
      std::swap(out[k], out[pick(rng)]);
    }
    out.resize(count);
    return out;
  }
  std::unordered_set<std::size_t> seen;
  std::uniform_int_distribution<std::size_t> pick(0, m - 1);
  while (out.size() < count) {
    std::size_t i = pick(rng), j = pick(rng);
    if (i == j) continue;
    if (i > j) std::swap(i, j);
    if (!seen.insert(i * m + j).second) continue;
    out.emplace_back(i, j);
  }
  return out;
}

/// rho = log(|z_i - z_j| / |t_i - t_j|) over sampled pairs. Pairs with either
/// distance zero are skipped and counted.
inline DistortionReport distortion(const Matrix& latents, const Matrix& true_states, std::size_t num_pairs = 10000,
                                   std::uint64_t seed = 0) {
  if (latents.rows() != true_states.rows())
    throw ContractError("distortion: latents and states differ in sample count");
  if (latents.rows() < 2) throw ContractError("distortion: need at least two points");
  DistortionReport rep;
  rep.seed = seed;
  for (auto [i, j] : sample_pairs(latents.rows(), num_pairs, seed)) {
    const double dz = row_distance(latents.row(i), latents.row(j));
    const double dt = row_distance(true_states.row(i), true_states.row(j));
    if (dt == 0.0 || dz == 0.0) {
      ++rep.skipped;
      continue;
    }
    rep.pairs.emplace_back(i, j);
    rep.rho.push_back(std::log(dz / dt));
  }
  if (rep.rho.empty()) throw ContractError("distortion: every sampled pair is degenerate");
  const double n = static_cast<double>(rep.rho.size());
  rep.mean = std::accumulate(rep.rho.begin(), rep.rho.end(), 0.0) / n;
  for (double r : rep.rho) rep.variance += (r - rep.mean) * (r - rep.mean);
  rep.variance /= n;
  return rep;
}

using Encoder = std::function<Matrix(const Matrix&)>;

inline DistortionReport distortion(const Matrix& observations, const Matrix& true_states, const Encoder& encoder,
                                   std::size_t num_pairs = 10000, std::uint64_t seed = 0) {
  return distortion(encoder(observations), true_states, num_pairs, seed);
}

inline void write_distortion_csv(const std::filesystem::path& path, const DistortionReport& rep) {
  Matrix m(rep.rho.size(), 2);
  for (std::size_t k = 0; k < rep.rho.size(); ++k) {
    m(k, 0) = static_cast<double>(k);
    m(k, 1) = rep.rho[k];
  }
  write_csv(path, {"pair_id", "rho"}, m);
}

// ---------------------------------------------------------------------------
// Level sets
// ---------------------------------------------------------------------------

struct Box {
  std::vector<double> lo;
  std::vector<double> hi;

  std::size_t dim() const { return lo.size(); }
  void validate() const {
    if (lo.size() != hi.size() || lo.empty()) throw ContractError("box: lo and hi must have equal, nonzero size");
    for (std::size_t c = 0; c < lo.size(); ++c)
      if (!(std::isfinite(lo[c]) && std::isfinite(hi[c]) && lo[c] <= hi[c]))
        throw ContractError("box: bounds must be finite with lo <= hi");
  }
  /// Each side grown by `fraction` of its width in total.
  Box inflated(double fraction) const {
    Box b = *this;
    for (std::size_t c = 0; c < lo.size(); ++c) {
      const double g = 0.5 * fraction * (hi[c] - lo[c]);
      b.lo[c] -= g;
      b.hi[c] += g;
    }
    return b;
  }
};

inline Box dataset_box(const ManifoldDataset& d) { return {d.box_lo, d.box_hi}; }

struct LevelSetCloud {
  Box box;
  std::size_t resolution = 0;
  bool grid = true;  // false: rejection sampling
  std::vector<std::size_t> relations;
  std::vector<double> thresholds;
  std::size_t scanned = 0;
  Matrix points;
};

struct LevelSetOptions {
  std::vector<std::size_t> relations;  // 0-based; empty = all
  std::optional<std::vector<double>> thresholds;
  double threshold_factor = 2.0;  // eps_k = factor * on_mean_k
  std::uint64_t seed = 0;         // rejection sampling only
};

/// Points of `box` where every requested relation satisfies |g_k| <= eps_k.
/// Grid scan with `resolution` points per axis for N <= 4, otherwise
/// resolution^4 uniform samples.
inline LevelSetCloud level_set(const RelationSet& set, const Box& box, std::size_t resolution,
                               const LevelSetOptions& opt = {}) {
  box.validate();
  if (set.relations.empty()) throw ContractError("level_set: empty relation set");
  if (box.dim() != set.dim()) throw ContractError("level_set: box dimension differs from relation input dimension");
  if (resolution < 2) throw ContractError("level_set: resolution must be >= 2");
  const std::size_t n = box.dim();
  LevelSetCloud cloud;
  cloud.box = box;
  cloud.resolution = resolution;
  cloud.grid = n <= 4;
  cloud.relations = opt.relations;
  if (cloud.relations.empty()) {
    cloud.relations.resize(set.size());
    std::iota(cloud.relations.begin(), cloud.relations.end(), 0);
  }
  for (std::size_t k : cloud.relations)
    if (k >= set.size()) throw ContractError("level_set: relation index out of range");
  if (opt.thresholds) {
    if (opt.thresholds->size() != cloud.relations.size())
      throw ContractError("level_set: one threshold per requested relation");
    cloud.thresholds = *opt.thresholds;
  } else {
    for (std::size_t k : cloud.relations) cloud.thresholds.push_back(opt.threshold_factor * set.relations[k].on_mean);
  }

  std::size_t total = 1;
  for (std::size_t i = 0; i < std::min<std::size_t>(n, 4); ++i) total *= resolution;
  cloud.scanned = total;
  auto rng = SeedSplitter(opt.seed).stream("level_set");
  std::vector<std::uniform_real_distribution<double>> uni;
  for (std::size_t c = 0; c < n; ++c) uni.emplace_back(box.lo[c], box.hi[c]);

  std::vector<double> accepted;
  const std::size_t chunk = 4096;
  Matrix batch;
  std::vector<std::size_t> digits(n, 0);
  for (std::size_t start = 0; start < total; start += chunk) {
    const std::size_t rows = std::min(chunk, total - start);
    batch = Matrix(rows, n);
    for (std::size_t r = 0; r < rows; ++r) {
      if (cloud.grid) {
        std::size_t idx = start + r;
        for (std::size_t c = 0; c < n; ++c) {
          const std::size_t d = idx % resolution;
          idx /= resolution;
          batch(r, c) = box.lo[c] + (box.hi[c] - box.lo[c]) * static_cast<double>(d) / static_cast<double>(resolution - 1);
        }
      } else {
        for (std::size_t c = 0; c < n; ++c) batch(r, c) = uni[c](rng);
      }
    }
    std::vector<char> keep(rows, 1);
    for (std::size_t q = 0; q < cloud.relations.size(); ++q) {
      const Matrix out = set.relations[cloud.relations[q]].evaluate(batch);
      for (std::size_t r = 0; r < rows; ++r)
        if (std::abs(out[r]) > cloud.thresholds[q]) keep[r] = 0;
    }
    for (std::size_t r = 0; r < rows; ++r)
      if (keep[r]) accepted.insert(accepted.end(), batch.row(r).begin(), batch.row(r).end());
  }
  const std::size_t kept = accepted.size() / n;
  cloud.points = Matrix(kept, n, std::move(accepted));
  if (cloud.points.rows() == 0) log_line("warning: level set is empty; thresholds may be too tight for the grid");
  return cloud;
}

// ---------------------------------------------------------------------------
// Phase arrows
// ---------------------------------------------------------------------------

struct PhaseGrid {
  Range p{0.0, 0.2};
  Range v{0.0, 0.2};
  std::size_t np = 10;
  std::size_t nv = 10;
  std::optional<double> theta;  // slice for theta-bearing layouts; defaults to spec.theta
  double action = 0.0;

  void validate() const {
    if (np < 1 || nv < 1) throw ContractError("phase grid: need at least one point per axis");
    if (p.lo > p.hi || v.lo > v.hi) throw ContractError("phase grid: empty range");
  }
  double p_at(std::size_t i) const { return np == 1 ? p.lo : p.lo + p.width() * static_cast<double>(i) / (np - 1); }
  double v_at(std::size_t j) const { return nv == 1 ? v.lo : v.lo + v.width() * static_cast<double>(j) / (nv - 1); }
};

/// Simulator arrows: rows (p0, v0, dp, dv) after the spec's horizon.
inline Matrix phase_export_simulator(const InclineSpec& spec, const PhaseGrid& grid) {
  grid.validate();
  const double theta = grid.theta.value_or(spec.theta);
  Matrix out(grid.np * grid.nv, 4);
  std::size_t r = 0;
  for (std::size_t i = 0; i < grid.np; ++i)
    for (std::size_t j = 0; j < grid.nv; ++j, ++r) {
      const double p0 = grid.p_at(i), v0 = grid.v_at(j);
      const InclineState end = simulate_incline(spec, p0, v0, grid.action, theta, spec.horizon);
      out(r, 0) = p0;
      out(r, 1) = v0;
      out(r, 2) = end.p - p0;
      out(r, 3) = end.v - v0;
    }
  return out;
}

struct PhaseSearch {
  Range p1;
  Range v1;
  std::size_t resolution = 41;  // per axis, per stage
};

/// Search window for (p1, v1) from a dataset's bounds, grown by `inflate`.
inline PhaseSearch phase_search_from(const ManifoldDataset& d, const InclineSpec& layout, double inflate = 0.5) {
  const std::size_t off = layout.state_offset();
  PhaseSearch s;
  const double gp = 0.5 * inflate * (d.box_hi[off + 2] - d.box_lo[off + 2]);
  const double gv = 0.5 * inflate * (d.box_hi[off + 3] - d.box_lo[off + 3]);
  s.p1 = {d.box_lo[off + 2] - gp, d.box_hi[off + 2] + gp};
  s.v1 = {d.box_lo[off + 3] - gv, d.box_hi[off + 3] + gv};
  return s;
}

/// Relation arrows: rows (p0, v0, p1, v1), with (p1, v1) the grid cell that
/// minimizes sum_k |g_k| in a coarse scan of the search window followed by a
/// fine scan of the best coarse cell's neighbourhood.
inline Matrix phase_export_relations(const RelationSet& set, const InclineSpec& layout, const PhaseGrid& grid,
                                     const PhaseSearch& search) {
  grid.validate();
  if (set.relations.empty()) throw ContractError("phase_export: empty relation set");
  if (set.dim() != layout.dim()) throw ContractError("phase_export: relation dimension differs from the layout");
  if (search.resolution < 2) throw ContractError("phase_export: search resolution must be >= 2");
  const std::size_t off = layout.state_offset();
  const std::size_t res = search.resolution;
  const double theta = grid.theta.value_or(layout.theta);
  Matrix out(grid.np * grid.nv, 4);
  Matrix cand(res * res, layout.dim());

  auto scan = [&](double p0, double v0, Range pr, Range vr, double& best_p, double& best_v) {
    for (std::size_t a = 0; a < res; ++a)
      for (std::size_t b = 0; b < res; ++b) {
        auto row = cand.row(a * res + b);
        if (layout.include_theta) row[0] = theta;
        row[off] = p0;
        row[off + 1] = v0;
        row[off + 2] = pr.lo + pr.width() * static_cast<double>(a) / (res - 1);
        row[off + 3] = vr.lo + vr.width() * static_cast<double>(b) / (res - 1);
        if (layout.include_action) row[off + 4] = grid.action;
      }
    std::vector<double> score(cand.rows(), 0.0);
    for (const auto& g : set.relations) {
      const Matrix y = g.evaluate(cand);
      for (std::size_t q = 0; q < score.size(); ++q) score[q] += std::abs(y[q]);
    }
    const auto q = static_cast<std::size_t>(std::min_element(score.begin(), score.end()) - score.begin());
    best_p = cand(q, off + 2);
    best_v = cand(q, off + 3);
  };

  std::size_t r = 0;
  for (std::size_t i = 0; i < grid.np; ++i)
    for (std::size_t j = 0; j < grid.nv; ++j, ++r) {
      const double p0 = grid.p_at(i), v0 = grid.v_at(j);
      double p1 = 0.0, v1 = 0.0;
      scan(p0, v0, search.p1, search.v1, p1, v1);
      const double cp = search.p1.width() / (res - 1), cv = search.v1.width() / (res - 1);
      scan(p0, v0, {p1 - cp, p1 + cp}, {v1 - cv, v1 + cv}, p1, v1);
      out(r, 0) = p0;
      out(r, 1) = v0;
      out(r, 2) = p1;
      out(r, 3) = v1;
    }
  return out;
}

/// Mean Euclidean distance between relation endpoints (p1, v1) and simulator
/// endpoints (p0 + dp, v0 + dv) on the same grid.
inline double phase_endpoint_error(const Matrix& relation_rows, const Matrix& simulator_rows) {
  if (relation_rows.rows() != simulator_rows.rows() || relation_rows.rows() == 0)
    throw ContractError("phase_endpoint_error: grids differ");
  double total = 0.0;
  for (std::size_t r = 0; r < relation_rows.rows(); ++r) {
    const double ep = relation_rows(r, 2) - (simulator_rows(r, 0) + simulator_rows(r, 2));
    const double ev = relation_rows(r, 3) - (simulator_rows(r, 1) + simulator_rows(r, 3));
    total += std::sqrt(ep * ep + ev * ev);
  }
  return total / static_cast<double>(relation_rows.rows());
}

// ---------------------------------------------------------------------------
// Alignment regression
// ---------------------------------------------------------------------------

struct AlignmentConfig {
  std::size_t hidden = 64;
  std::size_t epochs = 200;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  double train_fraction = 0.8;
  double validation_fraction = 0.1;  // of the training split, for best-epoch selection
  std::uint64_t seed = 0;
};

struct AlignmentReport {
  std::vector<double> mse_per_dim;
  double mse = 0.0;  // mean over dimensions
  std::size_t train_count = 0;
  std::size_t test_count = 0;
  std::size_t best_epoch = 0;
};

namespace detail {

struct Standardizer {
  std::vector<double> mean, scale;

  static Standardizer fit(const Matrix& m) {
    Standardizer s{std::vector<double>(m.cols(), 0.0), std::vector<double>(m.cols(), 1.0)};
    auto norm = InputNormalization::fit(m);
    s.mean = norm.shift;
    s.scale = norm.scale;
    return s;
  }
  Matrix apply(const Matrix& m) const {
    Matrix out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r)
      for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = (m(r, c) - mean[c]) / scale[c];
    return out;
  }
};

inline double mse_all(const Mlp& net, const Matrix& x, const Matrix& y) {
  const Matrix p = net.forward(x);
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - y[i]) * (p[i] - y[i]);
  return s / static_cast<double>(p.size());
}

}  // namespace detail

/// Held-out MSE (in state units) of a (hidden, hidden) tanh regressor from
/// latents to true states. Inputs and targets are standardized on the
/// training split; the output layer starts at zero so the initial prediction
/// is the training mean, and the epoch with the best validation loss is kept.
inline AlignmentReport alignment_error(const Matrix& latents, const Matrix& states, const AlignmentConfig& cfg = {}) {
  if (latents.rows() != states.rows()) throw ContractError("alignment: latents and states differ in sample count");
  if (latents.rows() < 100) throw ContractError("alignment: need at least 100 samples");
  if (latents.rows() < cfg.batch_size) throw ContractError("alignment: fewer samples than the batch size");
  if (latents.cols() == 0 || states.cols() == 0) throw ContractError("alignment: empty feature or target dimension");
  SeedSplitter seeds(cfg.seed);
  const std::size_t m = latents.rows();
  std::vector<std::size_t> idx(m);
  std::iota(idx.begin(), idx.end(), 0);
  auto split_rng = seeds.stream("split");
  std::shuffle(idx.begin(), idx.end(), split_rng);
  const auto n_train_all = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(m)));
  const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(cfg.validation_fraction * n_train_all));
  std::span<const std::size_t> all(idx);
  auto val_idx = all.subspan(0, n_val);
  auto train_idx = all.subspan(n_val, n_train_all - n_val);
  auto test_idx = all.subspan(n_train_all);
  if (train_idx.size() < cfg.batch_size) throw ContractError("alignment: training split smaller than the batch size");

  const Matrix x_train_raw = latents.select_rows(train_idx), y_train_raw = states.select_rows(train_idx);
  const auto sx = detail::Standardizer::fit(x_train_raw), sy = detail::Standardizer::fit(y_train_raw);
  const Matrix x_train = sx.apply(x_train_raw), y_train = sy.apply(y_train_raw);
  const Matrix x_val = sx.apply(latents.select_rows(val_idx)), y_val = sy.apply(states.select_rows(val_idx));
  const Matrix x_test = sx.apply(latents.select_rows(test_idx)), y_test = sy.apply(states.select_rows(test_idx));

  auto init_rng = seeds.stream("init");
  Mlp net = Mlp::init({latents.cols(), cfg.hidden, cfg.hidden, states.cols()}, init_rng);
  net.weights.back().fill(0.0);
  net.biases.back().fill(0.0);

  dg::Graph g;
  dg::Var x = g.input({dg::kDynamic, latents.cols()}, "x");
  dg::Var y = g.input({dg::kDynamic, states.cols()}, "y");
  MlpNodes nodes = declare(g, net, "reg");
  dg::Var diff = g.sub(nodes.forward(x), y);
  dg::Var loss = g.mean(g.mul(diff, diff));
  auto grads = g.gradient(loss, nodes.all());

  Adam opt({.lr = cfg.lr});
  auto params = net.parameters();
  Mlp best = net;
  double best_val = detail::mse_all(net, x_val, y_val);
  AlignmentReport rep;
  auto batch_rng = seeds.stream("batches");
  std::vector<std::size_t> order(x_train.rows());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Matrix> gv(grads.size());
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), batch_rng);
    for (std::size_t s = 0; s + cfg.batch_size <= order.size(); s += cfg.batch_size) {
      std::span<const std::size_t> sel(order.data() + s, cfg.batch_size);
      bind(g, nodes, net);
      g.bind(x, x_train.select_rows(sel));
      g.bind(y, y_train.select_rows(sel));
      g.evaluate(grads);
      for (std::size_t i = 0; i < grads.size(); ++i) gv[i] = g.value(grads[i]);
      opt.step(params, gv);
    }
    const double val = detail::mse_all(net, x_val, y_val);
    if (val < best_val) {
      best_val = val;
      best = net;
      rep.best_epoch = e;
    }
  }

  const Matrix pred = best.forward(x_test);
  rep.mse_per_dim.assign(states.cols(), 0.0);
  for (std::size_t r = 0; r < pred.rows(); ++r)
    for (std::size_t c = 0; c < pred.cols(); ++c) {
      const double d = (pred(r, c) - y_test(r, c)) * sy.scale[c];
      rep.mse_per_dim[c] += d * d;
    }
  for (double& v : rep.mse_per_dim) v /= static_cast<double>(pred.rows());
  rep.mse = std::accumulate(rep.mse_per_dim.begin(), rep.mse_per_dim.end(), 0.0) / states.cols();
  rep.train_count = train_idx.size();
  rep.test_count = test_idx.size();
  return rep;
}

// ---------------------------------------------------------------------------
// Training curves
// ---------------------------------------------------------------------------

/// Rows (relation, epoch, metric, value); metric names are plain strings.
inline std::string curves_csv(const std::vector<CurvePoint>& curve) {
  std::string out = "relation,epoch,metric,value\n";
  for (const auto& c : curve)
    out += std::to_string(c.relation) + "," + std::to_string(c.epoch) + "," + c.metric + "," + format_double(c.value) +
           "\n";
  return out;
}

}  // namespace aml
