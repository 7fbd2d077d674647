#pragma once

/**
 * @file relnet.hpp
 * @brief Relation networks g_k, restricted-syzygy networks, and their losses.
 *
 * A relation is a scalar tanh network that should vanish on the data manifold.
 * Its loss works with d_g = |g| / ||grad_tau g||, a first-order estimate of the
 * distance to the zero set, plus a -log||grad_tau g|| term that keeps the
 * relation from collapsing to zero. Transversality to earlier relations is
 * scored by pairwise sin^2 between input gradients; restricted syzygies are
 * small networks producing coefficients f_j(tau) such that
 * sum_j f_j g_j - g_k vanishes off-manifold.
 */

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aml/diffgraph.hpp"
#include "aml/error.hpp"
#include "aml/matrix.hpp"
#include "aml/mlp.hpp"

namespace aml {

inline constexpr double kNormEps = 1e-12;
inline constexpr double kSin2Floor = 1e-12;

/// Fixed affine map applied before the first layer: (tau - shift) / scale.
struct InputNormalization {
  std::vector<double> shift;
  std::vector<double> scale;

  static InputNormalization identity(std::size_t n) {
    return {std::vector<double>(n, 0.0), std::vector<double>(n, 1.0)};
  }

  /// Per-column mean and standard deviation of the data (scale floored at 1e-6).
  static InputNormalization fit(const Matrix& data) {
    const std::size_t n = data.cols();
    InputNormalization norm{std::vector<double>(n, 0.0), std::vector<double>(n, 1.0)};
    if (data.rows() == 0) return norm;
    for (std::size_t c = 0; c < n; ++c) {
      double m = 0.0;
      for (std::size_t r = 0; r < data.rows(); ++r) m += data(r, c);
      m /= static_cast<double>(data.rows());
      double v = 0.0;
      for (std::size_t r = 0; r < data.rows(); ++r) v += (data(r, c) - m) * (data(r, c) - m);
      v /= static_cast<double>(data.rows());
      norm.shift[c] = m;
      norm.scale[c] = std::max(std::sqrt(v), 1e-6);
    }
    return norm;
  }

  Matrix apply(const Matrix& x) const {
    Matrix out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = (x(r, c) - shift[c]) / scale[c];
    return out;
  }

  friend bool operator==(const InputNormalization&, const InputNormalization&) = default;
};

// ---------------------------------------------------------------------------
// RelationNet
// ---------------------------------------------------------------------------

struct RelationNet {
  Mlp net;
  InputNormalization normalization;
  double on_mean = 0.0;   // mean |g| on on-manifold data when frozen
  double off_mean = 0.0;  // mean |g| on off-manifold data when frozen

  /// Hidden width for the k-th relation (1-based): 4, 8, 16, ... capped at 256.
  static std::size_t default_width(std::size_t k) {
    if (k == 0) throw ContractError("relation index is 1-based");
    std::size_t w = 4;
    for (std::size_t i = 1; i < k && w < 256; ++i) w *= 2;
    return std::min<std::size_t>(w, 256);
  }

  /// Three hidden tanh layers of equal width, scalar output.
  static RelationNet make(std::size_t input_dim, std::size_t width, std::mt19937_64& rng,
                          InputNormalization normalization = {}) {
    RelationNet g;
    g.net = Mlp::init({input_dim, width, width, width, 1}, rng);
    g.normalization = normalization.shift.empty() ? InputNormalization::identity(input_dim)
                                                  : std::move(normalization);
    if (g.normalization.shift.size() != input_dim) throw ContractError("RelationNet: normalization size mismatch");
    return g;
  }

  std::size_t input_dim() const { return net.input_dim(); }
  std::size_t hidden_width() const { return net.layer_sizes.size() > 2 ? net.layer_sizes[1] : 0; }

  /// g over a batch of rows; returns a column (rows x 1).
  Matrix evaluate(const Matrix& tau) const {
    if (tau.cols() != input_dim())
      throw ContractError("relation: expected tau of dimension " + std::to_string(input_dim()) + ", got " +
                          std::to_string(tau.cols()));
    return net.forward(normalization.apply(tau));
  }

  double value(std::span<const double> tau) const { return evaluate(Matrix::row_vector(tau))[0]; }

  friend bool operator==(const RelationNet&, const RelationNet&) = default;
};

/// A RelationNet's leaves inside a graph.
struct RelationNodes {
  MlpNodes mlp;
  dg::Var shift;      // 1 x N constant
  dg::Var inv_scale;  // 1 x N constant

  /// g(tau) for a batch input node; (rows x 1).
  dg::Var forward(dg::Var tau) const {
    dg::Graph& g = *tau.graph();
    dg::Var z = g.mul(g.sub(tau, g.broadcast_rows(shift, tau)), g.broadcast_rows(inv_scale, tau));
    return mlp.forward(z);
  }
  std::vector<dg::Var> parameters() const { return mlp.all(); }
};

inline RelationNodes declare(dg::Graph& g, const RelationNet& rel, const std::string& prefix) {
  RelationNodes nodes;
  nodes.mlp = declare(g, rel.net, prefix);
  nodes.shift = g.constant(Matrix::row_vector(rel.normalization.shift));
  Matrix inv(1, rel.input_dim());
  for (std::size_t c = 0; c < rel.input_dim(); ++c) inv[c] = 1.0 / rel.normalization.scale[c];
  nodes.inv_scale = g.constant(std::move(inv));
  return nodes;
}

inline void bind(dg::Graph& g, const RelationNodes& nodes, const RelationNet& rel) { bind(g, nodes.mlp, rel.net); }

/// Differentiable relation output for a batch of tau rows.
inline dg::Var relation_value(const RelationNodes& g, dg::Var tau) { return g.forward(tau); }

// ---------------------------------------------------------------------------
// Loss pieces
// ---------------------------------------------------------------------------

/// The graph quantities every relation loss is made of, for one batch input.
struct VanishingTerms {
  dg::Var value;          // g(tau), rows x 1
  dg::Var gradient;       // v = grad_tau g, rows x N
  dg::Var grad_norm;      // sqrt(||v||^2 + 1e-12), rows x 1
  dg::Var distance;       // d_g = |g| / ||v||, rows x 1
  dg::Var distance_mean;  // mean d_g, 1 x 1 (the primary term)
  dg::Var log_norm_term;  // -mean log||v||, 1 x 1
};

inline VanishingTerms vanishing_terms(const RelationNodes& rel, dg::Var tau) {
  dg::Graph& g = *tau.graph();
  VanishingTerms t;
  t.value = rel.forward(tau);
  const dg::Var wrt[] = {tau};
  t.gradient = g.gradient(g.sum(t.value), wrt)[0];
  t.grad_norm = g.sqrt(g.add_scalar(g.row_dot(t.gradient, t.gradient), kNormEps));
  t.distance = g.div(g.abs(t.value), t.grad_norm);
  t.distance_mean = g.mean(t.distance);
  t.log_norm_term = g.neg(g.mean(g.log(t.grad_norm)));
  return t;
}

/// Unclipped base loss: mean over the batch of d_g - log||v||.
inline dg::Var base_loss(const RelationNodes& rel, dg::Var tau) {
  VanishingTerms t = vanishing_terms(rel, tau);
  return tau.graph()->add(t.distance_mean, t.log_norm_term);
}

/// Per-row sin^2 of the angle between two gradient batches (rows x 1), via
/// 1 - (a.b)^2 / (||a||^2 ||b||^2).
inline dg::Var sin2_between(dg::Var a, dg::Var b) {
  dg::Graph& g = *a.graph();
  dg::Var ab = g.row_dot(a, b);
  dg::Var aa = g.add_scalar(g.row_dot(a, a), kNormEps);
  dg::Var bb = g.add_scalar(g.row_dot(b, b), kNormEps);
  return g.add_scalar(g.neg(g.div(g.mul(ab, ab), g.mul(aa, bb))), 1.0);
}

/// -mean over rows of sum_j log clamp(sin^2(v_j, v_k), 1e-12, 1). Unweighted;
/// zero when v_k is orthogonal to every v_j.
inline dg::Var transversality_term(dg::Var v_k, std::span<const dg::Var> previous) {
  if (previous.empty()) throw ContractError("transversality_term: needs at least one earlier relation");
  dg::Graph& g = *v_k.graph();
  dg::Var acc;
  for (dg::Var v_j : previous) {
    dg::Var lg = g.log(g.clamp(sin2_between(v_j, v_k), kSin2Floor, 1.0));
    acc = acc.valid() ? g.add(acc, lg) : lg;
  }
  return g.neg(g.mean(acc));
}

/// Transversality loss, unclipped, with the sin^2 term weighted by beta.
inline dg::Var transversality_loss(const RelationNodes& g_k, std::span<const RelationNodes> frozen, dg::Var tau,
                                   double beta) {
  dg::Graph& g = *tau.graph();
  VanishingTerms t = vanishing_terms(g_k, tau);
  std::vector<dg::Var> prev;
  const dg::Var wrt[] = {tau};
  for (const RelationNodes& r : frozen) prev.push_back(g.gradient(g.sum(r.forward(tau)), wrt)[0]);
  return g.add(g.add(t.distance_mean, t.log_norm_term), g.scale(transversality_term(t.gradient, prev), beta));
}

// ---------------------------------------------------------------------------
// Gradient angle report
// ---------------------------------------------------------------------------

struct GradientAngleReport {
  std::vector<Matrix> gradients;  // one (points x N) matrix per relation
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  Matrix sin2;  // points x pairs
  double min_sin2 = 1.0;
  double mean_sin2 = 1.0;
};

/// Input gradients of each relation at the given points, in a batch.
inline std::vector<Matrix> relation_gradients(std::span<const RelationNet> relations, const Matrix& points) {
  dg::Graph g;
  dg::Var tau = g.input({dg::kDynamic, points.cols()}, "tau");
  const dg::Var wrt[] = {tau};
  std::vector<RelationNodes> nodes;
  std::vector<dg::Var> grads;
  for (std::size_t k = 0; k < relations.size(); ++k) {
    nodes.push_back(declare(g, relations[k], "g" + std::to_string(k + 1)));
    grads.push_back(g.gradient(g.sum(nodes.back().forward(tau)), wrt)[0]);
    bind(g, nodes.back(), relations[k]);
  }
  g.bind(tau, points);
  g.evaluate(grads);
  std::vector<Matrix> out;
  for (dg::Var v : grads) out.push_back(g.value(v));
  return out;
}

inline double sin2_plain(std::span<const double> a, std::span<const double> b) {
  double ab = 0.0, aa = kNormEps, bb = kNormEps;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return std::clamp(1.0 - (ab * ab) / (aa * bb), 0.0, 1.0);
}

inline GradientAngleReport angle_report(std::span<const RelationNet> relations, const Matrix& points) {
  GradientAngleReport rep;
  rep.gradients = relation_gradients(relations, points);
  for (std::size_t i = 0; i < relations.size(); ++i)
    for (std::size_t j = i + 1; j < relations.size(); ++j) rep.pairs.emplace_back(i, j);
  rep.sin2 = Matrix(points.rows(), rep.pairs.size());
  double total = 0.0;
  for (std::size_t r = 0; r < points.rows(); ++r)
    for (std::size_t p = 0; p < rep.pairs.size(); ++p) {
      const double s = sin2_plain(rep.gradients[rep.pairs[p].first].row(r), rep.gradients[rep.pairs[p].second].row(r));
      rep.sin2(r, p) = s;
      rep.min_sin2 = std::min(rep.min_sin2, s);
      total += s;
    }
  if (!rep.sin2.empty()) rep.mean_sin2 = total / static_cast<double>(rep.sin2.size());
  return rep;
}

// ---------------------------------------------------------------------------
// Restricted syzygies
// ---------------------------------------------------------------------------

/// Coefficient trunk tau_off -> (f_1..f_{k-1}); the last coefficient is the
/// structural -1 and never appears among the trained weights.
struct SyzygyNet {
  Mlp trunk;
  InputNormalization normalization;

  static constexpr std::size_t kDefaultWidth = 32;

  static SyzygyNet make(std::size_t input_dim, std::size_t num_relations, std::mt19937_64& rng,
                        InputNormalization normalization = {}, std::size_t width = kDefaultWidth) {
    if (num_relations < 2) throw ContractError("SyzygyNet: needs at least two relations");
    SyzygyNet f;
    f.trunk = Mlp::init({input_dim, width, width, width, num_relations - 1}, rng);
    f.normalization = normalization.shift.empty() ? InputNormalization::identity(input_dim)
                                                  : std::move(normalization);
    return f;
  }

  std::size_t num_relations() const { return trunk.output_dim() + 1; }

  Matrix coefficients(const Matrix& tau_off) const { return trunk.forward(normalization.apply(tau_off)); }

  /// sum_{j<k} f_j(tau) y_j - y_k per row; y has k columns.
  Matrix evaluate(const Matrix& tau_off, const Matrix& y) const;
};

/// Plain syzygy combination for given coefficients (rows x k-1) and relation outputs (rows x k).
inline Matrix syzygy_combine(const Matrix& coeffs, const Matrix& y) {
  if (y.cols() != coeffs.cols() + 1 || y.rows() != coeffs.rows())
    throw ContractError("syzygy: expected " + std::to_string(coeffs.cols() + 1) + " relation outputs per row, got " +
                        std::to_string(y.cols()));
  Matrix out(y.rows(), 1);
  const std::size_t k = y.cols();
  for (std::size_t r = 0; r < y.rows(); ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j + 1 < k; ++j) s += coeffs(r, j) * y(r, j);
    out[r] = s - y(r, k - 1);
  }
  return out;
}

inline Matrix SyzygyNet::evaluate(const Matrix& tau_off, const Matrix& y) const {
  return syzygy_combine(coefficients(tau_off), y);
}

struct SyzygyNodes {
  MlpNodes trunk;
  dg::Var shift;
  dg::Var inv_scale;

  dg::Var coefficients(dg::Var tau) const {
    dg::Graph& g = *tau.graph();
    dg::Var z = g.mul(g.sub(tau, g.broadcast_rows(shift, tau)), g.broadcast_rows(inv_scale, tau));
    return trunk.forward(z);
  }
};

inline SyzygyNodes declare(dg::Graph& g, const SyzygyNet& f, const std::string& prefix) {
  SyzygyNodes nodes;
  nodes.trunk = declare(g, f.trunk, prefix);
  nodes.shift = g.constant(Matrix::row_vector(f.normalization.shift));
  Matrix inv(1, f.normalization.scale.size());
  for (std::size_t c = 0; c < inv.cols(); ++c) inv[c] = 1.0 / f.normalization.scale[c];
  nodes.inv_scale = g.constant(std::move(inv));
  return nodes;
}

inline void bind(dg::Graph& g, const SyzygyNodes& nodes, const SyzygyNet& f) { bind(g, nodes.trunk, f.trunk); }

/// Differentiable syzygy value: row_dot(coeffs, y_prev) - y_last, (rows x 1).
inline dg::Var syzygy_value(dg::Var coeffs, dg::Var y_prev, dg::Var y_last) {
  dg::Graph& g = *coeffs.graph();
  if (g.shape(coeffs).cols != dg::kDynamic && g.shape(y_prev).cols != dg::kDynamic &&
      g.shape(coeffs).cols != g.shape(y_prev).cols)
    throw ContractError("syzygy_value: coefficient count does not match earlier relations");
  return g.sub(g.row_dot(coeffs, y_prev), y_last);
}

/// L1 syzygy loss: mean |syzygy_value| over the batch.
inline dg::Var syzygy_loss(dg::Var syz) { return syz.graph()->mean(syz.graph()->abs(syz)); }

struct SyzygyAdjustedTerms {
  VanishingTerms base;  // on the on-manifold batch
  dg::Var syzygy;       // per-row syzygy value on the off-manifold batch
  dg::Var push_term;    // -mean |syzygy|, 1 x 1
};

/// Pieces of the syzygy-adjusted loss for a trainable g_k. The frozen part of
/// the syzygy, sum_{j<k} f_j(tau_off) g_j(tau_off), arrives precomputed as
/// `frozen_combination` (rows x 1), so gradients reach g_k only through
/// g_k(tau_off).
inline SyzygyAdjustedTerms syzygy_adjusted_terms(const RelationNodes& g_k, dg::Var tau_on, dg::Var tau_off,
                                                 dg::Var frozen_combination) {
  dg::Graph& g = *tau_on.graph();
  SyzygyAdjustedTerms t;
  t.base = vanishing_terms(g_k, tau_on);
  t.syzygy = g.sub(frozen_combination, g_k.forward(tau_off));
  t.push_term = g.neg(syzygy_loss(t.syzygy));
  return t;
}

/// Unclipped syzygy-adjusted loss: base loss on tau_on minus mean |syzygy| on tau_off.
inline dg::Var syzygy_adjusted_loss(const RelationNodes& g_k, dg::Var tau_on, dg::Var tau_off,
                                    dg::Var frozen_combination) {
  dg::Graph& g = *tau_on.graph();
  SyzygyAdjustedTerms t = syzygy_adjusted_terms(g_k, tau_on, tau_off, frozen_combination);
  return g.add(g.add(t.base.distance_mean, t.base.log_norm_term), t.push_term);
}

}  // namespace aml
