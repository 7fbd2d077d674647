#pragma once

/**
 * @file amltrain.hpp
 * @brief Sequential relation learning.
 *
 * Relations are trained one at a time and frozen. The first uses the base
 * loss; each later one is made independent of its predecessors either by a
 * transversality penalty on input-gradient angles, or by searching for a
 * restricted syzygy and, while one exists, pushing the candidate away from it.
 *
 * A relation "vanishes" when its mean |output| off-manifold is at least
 * stopping_ratio times its mean |output| on-manifold. Training stops on the
 * training split; a relation is kept only if the same test passes on a
 * held-out split.
 */

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "aml/adam.hpp"
#include "aml/diffgraph.hpp"
#include "aml/domains.hpp"
#include "aml/error.hpp"
#include "aml/io.hpp"
#include "aml/matrix.hpp"
#include "aml/relnet.hpp"
#include "aml/rng.hpp"

namespace aml {

enum class TrainMode { Transverse, Syzygy };
enum class AuxWeighting { Beta, Clip };

/// What a clipped auxiliary term contributes to the gradient once it hits its cap.
/// Clamp: nothing (the value is a constant there). Rescale: its gradient times the clip multiplier.
enum class ClipMode { Clamp, Rescale };

inline std::string to_string(ClipMode m) { return m == ClipMode::Clamp ? "clamp" : "rescale"; }
inline ClipMode clip_mode_from_string(const std::string& s) {
  if (s == "clamp") return ClipMode::Clamp;
  if (s == "rescale") return ClipMode::Rescale;
  throw ContractError("unknown clip mode '" + s + "'");
}

inline std::string to_string(TrainMode m) { return m == TrainMode::Transverse ? "transverse" : "syzygy"; }
inline TrainMode train_mode_from_string(const std::string& s) {
  if (s == "transverse") return TrainMode::Transverse;
  if (s == "syzygy") return TrainMode::Syzygy;
  throw ContractError("unknown training mode '" + s + "'");
}

struct TrainConfig {
  TrainMode mode = TrainMode::Transverse;
  std::size_t max_relations = 2;
  std::size_t epochs = 5000;         // budget per relation
  std::size_t syzygy_epochs = 2000;  // budget per syzygy network
  std::size_t batch_size = 256;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  double stopping_ratio = 5.0;
  double clip_factor = 2.0;
  ClipMode clip_mode = ClipMode::Clamp;
  double beta = 1e3;
  AuxWeighting transversality_weighting = AuxWeighting::Beta;
  std::size_t syzygy_max_attempts = 3;
  std::size_t syzygy_adjust_epochs = 100;  // syzygy-adjusted epochs per push round
  std::size_t syzygy_adjust_rounds = 5;
  double min_sin2 = 0.1;  // transversality gate on every held-out point
  double holdout_fraction = 0.2;
  std::size_t check_every = 10;  // epochs between stopping checks
  std::size_t width = 0;         // 0: 4, 8, 16, ... per relation index
  std::size_t syzygy_width = SyzygyNet::kDefaultWidth;
  bool normalize_inputs = true;
  OffManifoldConfig off;

  void validate() const {
    if (!(stopping_ratio > 1.0)) throw ContractError("config: stopping_ratio must be > 1");
    if (!(clip_factor > 0.0)) throw ContractError("config: clip_factor must be > 0");
    if (batch_size < 1) throw ContractError("config: batch_size must be >= 1");
    if (!(lr > 0.0)) throw ContractError("config: lr must be > 0");
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw ContractError("config: holdout_fraction in (0,1)");
    if (check_every < 1) throw ContractError("config: check_every must be >= 1");
    if (max_relations < 1) throw ContractError("config: max_relations must be >= 1");
  }

  std::size_t width_for(std::size_t k) const { return width ? width : RelationNet::default_width(k); }
};

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"mode", to_string(c.mode)},
           {"max_relations", c.max_relations},
           {"epochs", c.epochs},
           {"syzygy_epochs", c.syzygy_epochs},
           {"batch_size", c.batch_size},
           {"lr", c.lr},
           {"seed", c.seed},
           {"stopping_ratio", c.stopping_ratio},
           {"clip_factor", c.clip_factor},
           {"clip_mode", to_string(c.clip_mode)},
           {"beta", c.beta},
           {"transversality_weighting", c.transversality_weighting == AuxWeighting::Beta ? "beta" : "clip"},
           {"syzygy_max_attempts", c.syzygy_max_attempts},
           {"syzygy_adjust_epochs", c.syzygy_adjust_epochs},
           {"syzygy_adjust_rounds", c.syzygy_adjust_rounds},
           {"min_sin2", c.min_sin2},
           {"holdout_fraction", c.holdout_fraction},
           {"check_every", c.check_every},
           {"width", c.width},
           {"syzygy_width", c.syzygy_width},
           {"normalize_inputs", c.normalize_inputs},
           {"off_mode", to_string(c.off.mode)},
           {"off_inflate", c.off.inflate}};
  if (c.off.sigma_off) j["off_sigma"] = *c.off.sigma_off;
}

inline void from_json(const json& j, TrainConfig& c) {
  TrainConfig d;
  c.mode = train_mode_from_string(j.value("mode", to_string(d.mode)));
  c.max_relations = j.value("max_relations", d.max_relations);
  c.epochs = j.value("epochs", d.epochs);
  c.syzygy_epochs = j.value("syzygy_epochs", d.syzygy_epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.seed = j.value("seed", d.seed);
  c.stopping_ratio = j.value("stopping_ratio", d.stopping_ratio);
  c.clip_factor = j.value("clip_factor", d.clip_factor);
  c.clip_mode = clip_mode_from_string(j.value("clip_mode", to_string(d.clip_mode)));
  c.beta = j.value("beta", d.beta);
  c.transversality_weighting =
      j.value("transversality_weighting", std::string("beta")) == "clip" ? AuxWeighting::Clip : AuxWeighting::Beta;
  c.syzygy_max_attempts = j.value("syzygy_max_attempts", d.syzygy_max_attempts);
  c.syzygy_adjust_epochs = j.value("syzygy_adjust_epochs", d.syzygy_adjust_epochs);
  c.syzygy_adjust_rounds = j.value("syzygy_adjust_rounds", d.syzygy_adjust_rounds);
  c.min_sin2 = j.value("min_sin2", d.min_sin2);
  c.holdout_fraction = j.value("holdout_fraction", d.holdout_fraction);
  c.check_every = j.value("check_every", d.check_every);
  c.width = j.value("width", d.width);
  c.syzygy_width = j.value("syzygy_width", d.syzygy_width);
  c.normalize_inputs = j.value("normalize_inputs", d.normalize_inputs);
  c.off.mode = off_mode_from_string(j.value("off_mode", std::string("box_uniform")));
  c.off.inflate = j.value("off_inflate", d.off.inflate);
  if (j.contains("off_sigma")) c.off.sigma_off = j["off_sigma"].get<double>();
}

// ---------------------------------------------------------------------------
// Stopping and clipping rules
// ---------------------------------------------------------------------------

/// mean|off| >= stopping_ratio * mean|on|.
inline bool is_vanishing(std::span<const double> on_values, std::span<const double> off_values,
                         double stopping_ratio) {
  if (on_values.empty() || off_values.empty()) throw ContractError("is_vanishing: empty value set");
  return mean_abs(off_values) >= stopping_ratio * mean_abs(on_values);
}

/// Means-only form of is_vanishing.
inline bool is_vanishing_means(double on_mean, double off_mean, double stopping_ratio) {
  return off_mean >= stopping_ratio * on_mean;
}

/// Multiplier that caps |aux| at clip_factor * |primary|.
inline double clip_scale(double primary, double aux, double clip_factor) {
  const double cap = clip_factor * std::abs(primary);
  const double mag = std::abs(aux);
  if (mag <= cap) return 1.0;
  return cap / mag;
}

/// primary + sum of auxiliary terms, each rescaled so its magnitude is at most clip_factor * |primary|.
inline double clip_aux_terms(double primary, std::span<const double> aux_terms, double clip_factor = 2.0) {
  double total = primary;
  for (double a : aux_terms) total += a * clip_scale(primary, a, clip_factor);
  return total;
}

// ---------------------------------------------------------------------------
// Relation sets and persistence
// ---------------------------------------------------------------------------

inline constexpr int kRelationSetVersion = 1;

struct RelationSet {
  std::vector<RelationNet> relations;
  TrainMode mode = TrainMode::Transverse;
  json config = json::object();
  std::string dataset_fingerprint;
  std::vector<std::string> columns;

  std::size_t dim() const { return relations.empty() ? 0 : relations.front().input_dim(); }
  std::size_t size() const { return relations.size(); }
};

inline json relation_to_json(const RelationNet& g) {
  json weights = json::array(), biases = json::array();
  for (std::size_t l = 0; l < g.net.num_layers(); ++l) {
    weights.push_back(g.net.weights[l].values());
    biases.push_back(g.net.biases[l].values());
  }
  return json{{"layer_sizes", g.net.layer_sizes},
              {"weights", weights},
              {"biases", biases},
              {"input_shift", g.normalization.shift},
              {"input_scale", g.normalization.scale},
              {"on_mean", g.on_mean},
              {"off_mean", g.off_mean}};
}

inline RelationNet relation_from_json(const json& j) {
  RelationNet g;
  g.net.layer_sizes = j.at("layer_sizes").get<std::vector<std::size_t>>();
  const auto& sizes = g.net.layer_sizes;
  if (sizes.size() < 2) throw IoError("relation: layer_sizes needs at least two entries");
  const auto& W = j.at("weights");
  const auto& B = j.at("biases");
  if (W.size() != sizes.size() - 1 || B.size() != sizes.size() - 1) throw IoError("relation: layer count mismatch");
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    auto w = W.at(l).get<std::vector<double>>();
    auto b = B.at(l).get<std::vector<double>>();
    if (w.size() != sizes[l] * sizes[l + 1] || b.size() != sizes[l + 1])
      throw IoError("relation: parameter size does not match layer_sizes at layer " + std::to_string(l));
    g.net.weights.emplace_back(sizes[l], sizes[l + 1], std::move(w));
    g.net.biases.emplace_back(1, sizes[l + 1], std::move(b));
  }
  g.normalization.shift = j.value("input_shift", std::vector<double>(sizes.front(), 0.0));
  g.normalization.scale = j.value("input_scale", std::vector<double>(sizes.front(), 1.0));
  if (g.normalization.shift.size() != sizes.front() || g.normalization.scale.size() != sizes.front())
    throw IoError("relation: input normalization size mismatch");
  g.on_mean = j.at("on_mean").get<double>();
  g.off_mean = j.at("off_mean").get<double>();
  return g;
}

inline json relation_set_to_json(const RelationSet& set) {
  json rels = json::array();
  for (const auto& g : set.relations) rels.push_back(relation_to_json(g));
  return json{{"version", kRelationSetVersion},
              {"mode", to_string(set.mode)},
              {"N", set.dim()},
              {"columns", set.columns},
              {"relations", rels},
              {"syzygies", json::array()},
              {"config", set.config},
              {"dataset_fingerprint", set.dataset_fingerprint}};
}

inline std::string format_means_row(const std::vector<double>& v) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << ' ';
    os << std::setprecision(4) << v[i];
  }
  os << ']';
  return os.str();
}

inline void log_relation_set(const RelationSet& set, std::size_t syzygies = 0) {
  std::vector<double> on, off;
  for (const auto& g : set.relations) {
    on.push_back(g.on_mean);
    off.push_back(g.off_mean);
  }
  log_line("AML loaded " + std::to_string(set.size()) + " relations, " + std::to_string(syzygies) +
           " syzygies, on/off means:");
  log_line(format_means_row(on));
  log_line(format_means_row(off));
}

inline RelationSet relation_set_from_json(const json& j) {
  RelationSet set;
  try {
    const int version = j.at("version").get<int>();
    if (version != kRelationSetVersion)
      throw IoError("relation set schema version " + std::to_string(version) + " is not supported (expected " +
                    std::to_string(kRelationSetVersion) + ")");
    set.mode = train_mode_from_string(j.at("mode").get<std::string>());
    const std::size_t n = j.at("N").get<std::size_t>();
    for (const auto& r : j.at("relations")) set.relations.push_back(relation_from_json(r));
    for (const auto& g : set.relations)
      if (g.input_dim() != n) throw IoError("relation input dimension differs from N");
    set.config = j.value("config", json::object());
    set.dataset_fingerprint = j.value("dataset_fingerprint", std::string{});
    set.columns = j.value("columns", std::vector<std::string>{});
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed relation set: ") + e.what());
  } catch (const ContractError& e) {
    throw IoError(std::string("malformed relation set: ") + e.what());
  }
  return set;
}

inline void save_relation_set(const RelationSet& set, const std::filesystem::path& path) {
  write_json(path, relation_set_to_json(set));
}

/// Loads a relation set and logs its on/off means. All-or-nothing: any defect throws IoError.
inline RelationSet load_relation_set(const std::filesystem::path& path) {
  RelationSet set = relation_set_from_json(read_json(path));
  log_relation_set(set);
  return set;
}

// ---------------------------------------------------------------------------
// Training data
// ---------------------------------------------------------------------------

struct TrainingData {
  const ManifoldDataset* dataset = nullptr;
  Matrix on_train, on_test, off_train, off_test;
  InputNormalization normalization;
};

/// Seeded 80/20 (by default) split of both on- and off-manifold points. When
/// the dataset carries no off-manifold points they are generated here.
inline TrainingData prepare_training_data(const ManifoldDataset& d, const TrainConfig& cfg) {
  if (d.on_points.rows() < 2) throw ContractError("training: dataset needs at least two on-manifold points");
  SeedSplitter seeds(cfg.seed);
  TrainingData td;
  td.dataset = &d;
  Matrix off = d.off_points.rows() ? d.off_points : gen_offmanifold(d, cfg.off, seeds.derive("dataset.off"));
  if (off.cols() != d.dim()) throw ContractError("training: off-manifold dimension differs from on-manifold");
  auto split = [&](const Matrix& m, const char* tag, Matrix& train, Matrix& test) {
    std::vector<std::size_t> idx(m.rows());
    std::iota(idx.begin(), idx.end(), 0);
    auto rng = seeds.stream(tag);
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_test = static_cast<std::size_t>(std::llround(cfg.holdout_fraction * static_cast<double>(m.rows())));
    n_test = std::clamp<std::size_t>(n_test, 1, m.rows() - 1);
    std::vector<std::size_t> te(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    std::vector<std::size_t> tr(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
    test = m.select_rows(te);
    train = m.select_rows(tr);
  };
  split(d.on_points, "split.on", td.on_train, td.on_test);
  split(off, "split.off", td.off_train, td.off_test);
  td.normalization = cfg.normalize_inputs ? InputNormalization::fit(td.on_train)
                                          : InputNormalization::identity(d.dim());
  return td;
}

// ---------------------------------------------------------------------------
// Outcomes and logs
// ---------------------------------------------------------------------------

struct CurvePoint {
  std::size_t relation = 0;
  std::size_t epoch = 0;
  std::string metric;
  double value = 0.0;
};

struct SyzygyAttempt {
  std::size_t relation = 0;
  std::size_t attempt = 0;
  std::size_t epochs = 0;
  double f_train_mean = 0.0;
  double f_test_mean = 0.0;
  double gk_test_mean = 0.0;
  bool vanished = false;  // the syzygy was found: candidate looked dependent
  std::size_t push_rounds = 0;
  double f_test_mean_after = 0.0;
  double gk_test_mean_after = 0.0;
};

struct RelationOutcome {
  bool accepted = false;
  bool unchecked = false;  // syzygy mode with zero attempts
  RelationNet relation;
  double train_ratio = 0.0;
  double holdout_ratio = 0.0;
  double min_sin2 = std::numeric_limits<double>::quiet_NaN();
  std::size_t epochs_run = 0;
  std::string report;
  std::vector<SyzygyAttempt> attempts;
  std::vector<CurvePoint> curve;
};

inline double vanishing_ratio(double on_mean, double off_mean) {
  if (on_mean == 0.0) return off_mean > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
  return off_mean / on_mean;
}

namespace detail {

/// Differentiable objective for one trainable relation, built once and
/// re-bound every minibatch. Auxiliary terms are clipped against the primary
/// term (or weighted) after evaluation, so each keeps its own gradient list.
struct Objective {
  struct Aux {
    dg::Var value;
    double weight = 1.0;
    bool clipped = true;
    std::vector<dg::Var> grads;
  };

  std::unique_ptr<dg::Graph> graph = std::make_unique<dg::Graph>();
  RelationNodes trainable;
  std::vector<RelationNodes> frozen;
  dg::Var tau_on, tau_off, frozen_combination;
  dg::Var primary;
  std::vector<dg::Var> primary_grads;
  std::vector<Aux> aux;
  std::vector<dg::Var> roots;

  void finish() {
    auto params = trainable.parameters();
    primary_grads = graph->gradient(primary, params);
    roots = {primary};
    roots.insert(roots.end(), primary_grads.begin(), primary_grads.end());
    for (auto& a : aux) {
      a.grads = graph->gradient(a.value, params);
      roots.push_back(a.value);
      roots.insert(roots.end(), a.grads.begin(), a.grads.end());
    }
  }
};

inline Objective make_objective(const RelationNet& g_k, std::span<const RelationNet> frozen, bool transverse,
                                bool syzygy_push, const TrainConfig& cfg) {
  Objective obj;
  dg::Graph& g = *obj.graph;
  const std::size_t n = g_k.input_dim();
  obj.tau_on = g.input({dg::kDynamic, n}, "tau_on");
  obj.trainable = declare(g, g_k, "g");
  VanishingTerms t = vanishing_terms(obj.trainable, obj.tau_on);
  obj.primary = t.distance_mean;
  obj.aux.push_back({t.log_norm_term, 1.0, true, {}});
  if (transverse) {
    const dg::Var wrt[] = {obj.tau_on};
    std::vector<dg::Var> prev;
    for (std::size_t j = 0; j < frozen.size(); ++j) {
      obj.frozen.push_back(declare(g, frozen[j], "frozen" + std::to_string(j + 1)));
      bind(g, obj.frozen.back(), frozen[j]);
      prev.push_back(g.gradient(g.sum(obj.frozen.back().forward(obj.tau_on)), wrt)[0]);
    }
    const bool by_beta = cfg.transversality_weighting == AuxWeighting::Beta;
    obj.aux.push_back({transversality_term(t.gradient, prev), by_beta ? cfg.beta : 1.0, !by_beta, {}});
  }
  if (syzygy_push) {
    obj.tau_off = g.input({dg::kDynamic, n}, "tau_off");
    obj.frozen_combination = g.input({dg::kDynamic, 1}, "frozen_combination");
    dg::Var syz = g.sub(obj.frozen_combination, obj.trainable.forward(obj.tau_off));
    obj.aux.push_back({g.neg(syzygy_loss(syz)), 1.0, true, {}});
  }
  obj.finish();
  return obj;
}

/// One optimizer step; returns the clipped loss value.
inline double objective_step(Objective& obj, RelationNet& g_k, Adam& opt, const Matrix& on_batch,
                             const Matrix* off_batch, const Matrix* comb_batch, double clip_factor,
                             ClipMode mode) {
  dg::Graph& g = *obj.graph;
  bind(g, obj.trainable, g_k);
  g.bind(obj.tau_on, on_batch);
  if (off_batch) {
    g.bind(obj.tau_off, *off_batch);
    g.bind(obj.frozen_combination, *comb_batch);
  }
  g.evaluate(obj.roots);
  const double p = g.value(obj.primary)[0];
  std::vector<Matrix> total;
  for (dg::Var v : obj.primary_grads) total.push_back(g.value(v));
  double loss = p;
  for (const auto& a : obj.aux) {
    const double raw = a.weight * g.value(a.value)[0];
    const double scale = a.clipped ? clip_scale(p, raw, clip_factor) : 1.0;
    const double factor = a.weight * scale;
    loss += factor * g.value(a.value)[0];
    const double gf = (mode == ClipMode::Clamp && scale < 1.0) ? 0.0 : factor;
    for (std::size_t i = 0; i < total.size(); ++i) {
      const Matrix& ga = g.value(a.grads[i]);
      for (std::size_t k = 0; k < ga.size(); ++k) total[i][k] += gf * ga[k];
    }
  }
  auto params = g_k.net.parameters();
  opt.step(params, total);
  return loss;
}

inline std::vector<double> abs_column(const Matrix& m) {
  std::vector<double> out(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = std::abs(m[i]);
  return out;
}

struct RatioCheck {
  double on_mean = 0.0;
  double off_mean = 0.0;
  double ratio = 0.0;
};

inline RatioCheck ratio_check(const RelationNet& g, const Matrix& on, const Matrix& off) {
  RatioCheck r;
  r.on_mean = mean_abs(g.evaluate(on).flat());
  r.off_mean = mean_abs(g.evaluate(off).flat());
  r.ratio = vanishing_ratio(r.on_mean, r.off_mean);
  return r;
}

inline double min_sin2_against(std::span<const RelationNet> frozen, const RelationNet& g_k, const Matrix& points) {
  std::vector<RelationNet> all(frozen.begin(), frozen.end());
  all.push_back(g_k);
  auto grads = relation_gradients(all, points);
  double m = 1.0;
  const Matrix& vk = grads.back();
  for (std::size_t j = 0; j + 1 < grads.size(); ++j)
    for (std::size_t r = 0; r < points.rows(); ++r) m = std::min(m, sin2_plain(grads[j].row(r), vk.row(r)));
  return m;
}

/// Minibatch epochs over on_train with periodic stopping checks. Stops early
/// when `done(epoch, mean_loss)` returns true; mean_loss averages the steps
/// since the previous check.
template <class Done>
std::size_t run_epochs(Objective& obj, RelationNet& g_k, Adam& opt, const Matrix& on_train, std::size_t epochs,
                       std::size_t batch_size, std::mt19937_64& rng, double clip_factor, ClipMode mode, std::size_t check_every,
                       Done&& done, const Matrix* off_pool = nullptr, const Matrix* comb_pool = nullptr) {
  std::vector<std::size_t> order(on_train.rows());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::size_t> off_idx;
  double loss_sum = 0.0;
  std::size_t steps = 0;
  for (std::size_t e = 1; e <= epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      std::span<const std::size_t> sel(order.data() + start, end - start);
      Matrix batch = on_train.select_rows(sel);
      if (off_pool) {
        std::uniform_int_distribution<std::size_t> pick(0, off_pool->rows() - 1);
        off_idx.resize(sel.size());
        for (auto& i : off_idx) i = pick(rng);
        Matrix off_b = off_pool->select_rows(off_idx);
        Matrix comb_b = comb_pool->select_rows(off_idx);
        loss_sum += objective_step(obj, g_k, opt, batch, &off_b, &comb_b, clip_factor, mode);
      } else {
        loss_sum += objective_step(obj, g_k, opt, batch, nullptr, nullptr, clip_factor, mode);
      }
      ++steps;
    }
    if (e % check_every == 0 || e == epochs) {
      const double mean_loss = loss_sum / static_cast<double>(std::max<std::size_t>(steps, 1));
      loss_sum = 0.0;
      steps = 0;
      if (done(e, mean_loss)) return e;
    }
  }
  return epochs;
}

inline void freeze_means(RelationNet& g, const TrainingData& td) {
  RatioCheck c = ratio_check(g, td.on_test, td.off_test);
  g.on_mean = c.on_mean;
  g.off_mean = c.off_mean;
}

}  // namespace detail

/// Trains one relation with the base loss (and transversality penalty when
/// `frozen` is non-empty and transverse is set) until it vanishes on the
/// training split and passes the held-out gate, or the epoch budget runs out.
inline RelationOutcome train_relation_vanishing(const TrainConfig& cfg, const TrainingData& td,
                                                std::span<const RelationNet> frozen, bool transverse,
                                                RelationNet init, std::size_t k) {
  SeedSplitter seeds(cfg.seed);
  auto rng = seeds.stream("batches", k);
  Adam opt({.lr = cfg.lr});
  detail::Objective obj = detail::make_objective(init, frozen, transverse && !frozen.empty(), false, cfg);
  RelationOutcome out;
  out.relation = std::move(init);
  RelationNet& g = out.relation;
  const bool check_angles = transverse && !frozen.empty();

  auto done = [&](std::size_t epoch) {
    auto tr = detail::ratio_check(g, td.on_train, td.off_train);
    out.train_ratio = tr.ratio;
    out.curve.push_back({k, epoch, "train_ratio", tr.ratio});
    if (!is_vanishing_means(tr.on_mean, tr.off_mean, cfg.stopping_ratio)) return false;
    if (check_angles) {
      const double s_train = detail::min_sin2_against(frozen, g, td.on_train);
      out.curve.push_back({k, epoch, "min_sin2", s_train});
      if (s_train < cfg.min_sin2) return false;
    }
    auto te = detail::ratio_check(g, td.on_test, td.off_test);
    out.holdout_ratio = te.ratio;
    if (!is_vanishing_means(te.on_mean, te.off_mean, cfg.stopping_ratio)) return false;
    if (check_angles) {
      out.min_sin2 = detail::min_sin2_against(frozen, g, td.on_test);
      if (out.min_sin2 < cfg.min_sin2) return false;
    }
    return true;
  };

  bool ok = false;
  if (cfg.epochs == 0) {
    ok = done(0);
  } else {
    out.epochs_run = detail::run_epochs(obj, g, opt, td.on_train, cfg.epochs, cfg.batch_size, rng, cfg.clip_factor,
                                        cfg.clip_mode, cfg.check_every, [&](std::size_t e, double loss) {
                                          out.curve.push_back({k, e, "loss", loss});
                                          return ok = done(e);
                                        });
  }
  auto te = detail::ratio_check(g, td.on_test, td.off_test);
  out.holdout_ratio = te.ratio;
  if (check_angles) out.min_sin2 = detail::min_sin2_against(frozen, g, td.on_test);
  detail::freeze_means(g, td);
  out.accepted = ok;
  std::ostringstream rep;
  rep << "g" << k << ": " << (ok ? "vanishing" : "not vanishing") << " after " << out.epochs_run
      << " epochs; train ratio " << out.train_ratio << ", held-out ratio " << out.holdout_ratio;
  if (check_angles) rep << ", held-out min sin^2 " << out.min_sin2;
  out.report = rep.str();
  if (opt.skipped() || opt.rejected())
    out.report += "; optimizer skipped " + std::to_string(opt.skipped()) + " and rejected " +
                  std::to_string(opt.rejected()) + " steps";
  return out;
}

inline RelationNet fresh_relation(const TrainConfig& cfg, const TrainingData& td, std::size_t k) {
  auto rng = SeedSplitter(cfg.seed).stream("init", k);
  return RelationNet::make(td.on_train.cols(), cfg.width_for(k), rng, td.normalization);
}

inline RelationOutcome train_first_relation(const TrainConfig& cfg, const TrainingData& td) {
  cfg.validate();
  return train_relation_vanishing(cfg, td, {}, false, fresh_relation(cfg, td, 1), 1);
}

inline RelationOutcome train_next_transverse(const TrainConfig& cfg, const TrainingData& td, const RelationSet& set,
                                             std::optional<RelationNet> init = std::nullopt) {
  cfg.validate();
  if (set.relations.empty()) throw ContractError("train_next_transverse: relation set is empty");
  const std::size_t k = set.size() + 1;
  return train_relation_vanishing(cfg, td, set.relations, true, init ? *init : fresh_relation(cfg, td, k), k);
}

namespace detail {

struct SyzygyFit {
  SyzygyNet net;
  std::size_t epochs = 0;
  double f_train_mean = 0.0;
};

/// Fits coefficient trunk so that sum_j f_j y_j - y_k vanishes on tau_off (L1).
/// Stops once it vanishes on tau_off and then on the held-out tau_test, like
/// relation training; otherwise runs the whole budget.
inline SyzygyFit fit_syzygy(const TrainConfig& cfg, const Matrix& tau_off, const Matrix& y, const Matrix& tau_test,
                            const Matrix& y_test, std::mt19937_64& rng) {
  const std::size_t k = y.cols();
  SyzygyFit fit;
  fit.net = SyzygyNet::make(tau_off.cols(), k, rng, InputNormalization::fit(tau_off), cfg.syzygy_width);
  dg::Graph g;
  dg::Var tau = g.input({dg::kDynamic, tau_off.cols()}, "tau_off");
  dg::Var y_prev = g.input({dg::kDynamic, k - 1}, "y_prev");
  dg::Var y_last = g.input({dg::kDynamic, 1}, "y_last");
  SyzygyNodes nodes = declare(g, fit.net, "f");
  dg::Var loss = syzygy_loss(syzygy_value(nodes.coefficients(tau), y_prev, y_last));
  auto params = nodes.trunk.all();
  auto grads = g.gradient(loss, params);
  std::vector<dg::Var> roots{loss};
  roots.insert(roots.end(), grads.begin(), grads.end());

  Matrix yp(y.rows(), k - 1), yl(y.rows(), 1);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    for (std::size_t j = 0; j + 1 < k; ++j) yp(r, j) = y(r, j);
    yl[r] = y(r, k - 1);
  }
  const double yk_mean = mean_abs(yl.flat());
  const double yk_test_mean = mean_abs(y_test.column(k - 1).flat());
  Adam opt({.lr = std::max(cfg.lr, 1e-3)});
  std::vector<std::size_t> order(tau_off.rows());
  std::iota(order.begin(), order.end(), 0);
  auto trunk_params = fit.net.trunk.parameters();
  for (std::size_t e = 1; e <= cfg.syzygy_epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> sel(order.data() + start, end - start);
      bind(g, nodes, fit.net);
      g.bind(tau, tau_off.select_rows(sel));
      g.bind(y_prev, yp.select_rows(sel));
      g.bind(y_last, yl.select_rows(sel));
      g.evaluate(roots);
      std::vector<Matrix> gv;
      for (dg::Var v : grads) gv.push_back(g.value(v));
      opt.step(trunk_params, gv);
    }
    fit.epochs = e;
    if (e % cfg.check_every == 0 || e == cfg.syzygy_epochs) {
      fit.f_train_mean = mean_abs(fit.net.evaluate(tau_off, y).flat());
      if (is_vanishing_means(fit.f_train_mean, yk_mean, cfg.stopping_ratio) &&
          is_vanishing_means(mean_abs(fit.net.evaluate(tau_test, y_test).flat()), yk_test_mean, cfg.stopping_ratio))
        break;
    }
  }
  fit.f_train_mean = mean_abs(fit.net.evaluate(tau_off, y).flat());
  return fit;
}

inline Matrix relation_outputs(std::span<const RelationNet> frozen, const RelationNet& g_k, const Matrix& tau) {
  Matrix y(tau.rows(), frozen.size() + 1);
  for (std::size_t j = 0; j <= frozen.size(); ++j) {
    Matrix col = (j < frozen.size() ? frozen[j] : g_k).evaluate(tau);
    for (std::size_t r = 0; r < tau.rows(); ++r) y(r, j) = col[r];
  }
  return y;
}

}  // namespace detail

/// Syzygy-mode training of the next relation.
///
/// The candidate is first trained with the base loss. Then, per attempt, a
/// fresh syzygy network is fitted on newly drawn off-manifold points. If it
/// does not vanish on its own held-out off-manifold points, the candidate is
/// accepted as independent. Otherwise, unless this was the last attempt, the
/// syzygy is frozen and the candidate is trained with the syzygy-adjusted loss
/// for up to syzygy_adjust_rounds rounds while the syzygy still vanishes. A
/// candidate whose every attempt found a syzygy is rejected.
inline RelationOutcome train_next_syzygy(const TrainConfig& cfg, const TrainingData& td, const RelationSet& set,
                                         std::optional<RelationNet> init = std::nullopt) {
  cfg.validate();
  if (set.relations.empty()) throw ContractError("train_next_syzygy: relation set is empty");
  const std::size_t k = set.size() + 1;
  std::span<const RelationNet> frozen = set.relations;
  RelationOutcome out =
      train_relation_vanishing(cfg, td, {}, false, init ? *init : fresh_relation(cfg, td, k), k);
  if (!out.accepted) {
    out.report = "candidate " + out.report;
    return out;
  }
  if (cfg.syzygy_max_attempts == 0) {
    out.unchecked = true;
    out.report += "; accepted unchecked (no syzygy attempts)";
    return out;
  }

  SeedSplitter seeds = SeedSplitter(cfg.seed).child("syzygy", k);
  auto push_rng = seeds.stream("push");
  Adam push_opt({.lr = cfg.lr});
  detail::Objective push_obj = detail::make_objective(out.relation, {}, false, true, cfg);
  RelationNet& g = out.relation;
  bool independent = false;
  OffManifoldConfig off_cfg = cfg.off;
  off_cfg.count = std::max<std::size_t>(cfg.batch_size, 2);

  for (std::size_t j = 1; j <= cfg.syzygy_max_attempts; ++j) {
    SyzygyAttempt att;
    att.relation = k;
    att.attempt = j;
    const Matrix tau_off = gen_offmanifold(*td.dataset, off_cfg, seeds.derive("tau_off", j));
    const Matrix tau_test = gen_offmanifold(*td.dataset, off_cfg, seeds.derive("tau_off_test", j));
    auto fit_rng = seeds.stream("fit", j);
    detail::SyzygyFit fit = detail::fit_syzygy(cfg, tau_off, detail::relation_outputs(frozen, g, tau_off), tau_test,
                                               detail::relation_outputs(frozen, g, tau_test), fit_rng);
    att.epochs = fit.epochs;
    att.f_train_mean = fit.f_train_mean;

    auto test_syzygy = [&](double& f_mean, double& gk_mean) {
      const Matrix y = detail::relation_outputs(frozen, g, tau_test);
      f_mean = mean_abs(fit.net.evaluate(tau_test, y).flat());
      gk_mean = mean_abs(y.column(k - 1).flat());
      return is_vanishing_means(f_mean, gk_mean, cfg.stopping_ratio);
    };
    att.vanished = test_syzygy(att.f_test_mean, att.gk_test_mean);
    att.f_test_mean_after = att.f_test_mean;
    att.gk_test_mean_after = att.gk_test_mean;
    if (!att.vanished) {
      out.attempts.push_back(att);
      independent = true;
      break;
    }

    if (j == cfg.syzygy_max_attempts) {
      out.attempts.push_back(att);
      break;
    }

    // Frozen part of the syzygy on the training off-points.
    const Matrix coeffs = fit.net.coefficients(tau_off);
    Matrix comb(tau_off.rows(), 1);
    for (std::size_t jj = 0; jj < frozen.size(); ++jj) {
      const Matrix yj = frozen[jj].evaluate(tau_off);
      for (std::size_t r = 0; r < tau_off.rows(); ++r) comb[r] += coeffs(r, jj) * yj[r];
    }
    bool still = true;
    while (still && att.push_rounds < cfg.syzygy_adjust_rounds) {
      detail::run_epochs(push_obj, g, push_opt, td.on_train, cfg.syzygy_adjust_epochs, cfg.batch_size, push_rng,
                         cfg.clip_factor, cfg.clip_mode, cfg.syzygy_adjust_epochs, [](std::size_t, double) { return false; }, &tau_off,
                         &comb);
      ++att.push_rounds;
      out.epochs_run += cfg.syzygy_adjust_epochs;
      still = test_syzygy(att.f_test_mean_after, att.gk_test_mean_after);
    }
    out.attempts.push_back(att);
  }

  auto te = detail::ratio_check(g, td.on_test, td.off_test);
  auto tr = detail::ratio_check(g, td.on_train, td.off_train);
  out.holdout_ratio = te.ratio;
  out.train_ratio = tr.ratio;
  detail::freeze_means(g, td);
  const bool vanishing = is_vanishing_means(te.on_mean, te.off_mean, cfg.stopping_ratio);
  out.accepted = independent && vanishing;
  std::ostringstream rep;
  rep << "g" << k << ": ";
  if (!independent)
    rep << "rejected as dependent: every one of " << cfg.syzygy_max_attempts << " syzygy attempts vanished";
  else if (!vanishing)
    rep << "rejected: independent but no longer vanishing after syzygy pushes";
  else
    rep << "accepted as independent after " << out.attempts.size() << " syzygy attempt(s)";
  rep << "; held-out ratio " << out.holdout_ratio;
  out.report = rep.str();
  return out;
}

// ---------------------------------------------------------------------------
// Full run
// ---------------------------------------------------------------------------

struct TrainResult {
  RelationSet set;
  std::vector<RelationOutcome> outcomes;
  bool first_failed = false;
  std::string stop_reason;
};

/// Trains relations 1, 2, ... until max_relations or the first rejected candidate.
inline TrainResult train_relation_set(const TrainConfig& cfg, const ManifoldDataset& dataset) {
  cfg.validate();
  if (dataset.on_points.rows() == 0) throw ContractError("train: empty dataset");
  TrainingData td = prepare_training_data(dataset, cfg);
  TrainResult res;
  res.set.mode = cfg.mode;
  res.set.config = cfg;
  res.set.dataset_fingerprint = dataset.fingerprint;
  res.set.columns = dataset.columns;

  RelationOutcome first = train_first_relation(cfg, td);
  log_line(first.report);
  res.outcomes.push_back(first);
  if (!first.accepted) {
    res.first_failed = true;
    res.stop_reason = "first relation did not vanish";
    return res;
  }
  res.set.relations.push_back(first.relation);
  while (res.set.size() < cfg.max_relations) {
    RelationOutcome next = cfg.mode == TrainMode::Transverse ? train_next_transverse(cfg, td, res.set)
                                                             : train_next_syzygy(cfg, td, res.set);
    log_line(next.report);
    res.outcomes.push_back(next);
    if (!next.accepted) {
      res.stop_reason = "candidate " + std::to_string(res.set.size() + 1) + " rejected";
      return res;
    }
    res.set.relations.push_back(next.relation);
  }
  res.stop_reason = "reached max_relations";
  return res;
}

}  // namespace aml
