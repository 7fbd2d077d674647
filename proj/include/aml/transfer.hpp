#pragma once

/**
 * @file transfer.hpp
 * @brief Variational embedding of synthetic observations, with and without a
 * penalty from frozen relations.
 *
 * The observation domain is a block on an incline seen through a fixed random
 * tanh map into R^D. An embedding model encodes consecutive observations to
 * latent states; when relations are given, sum_k |g_k(z_t, z_t+1)| is added to
 * the loss so latent pairs follow the learned dynamics.
 */

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "aml/adam.hpp"
#include "aml/amltrain.hpp"
#include "aml/diffgraph.hpp"
#include "aml/domains.hpp"
#include "aml/error.hpp"
#include "aml/io.hpp"
#include "aml/matrix.hpp"
#include "aml/metrics.hpp"
#include "aml/mlp.hpp"
#include "aml/relnet.hpp"
#include "aml/rng.hpp"

namespace aml {

// ---------------------------------------------------------------------------
// Observation domain
// ---------------------------------------------------------------------------

/// Consecutive video-like frames: 0.1 s apart, starts in [0, 2].
inline InclineSpec transfer_source_spec() {
  InclineSpec s = InclineSpec::preset_named("fig6-top");
  s.preset = "transfer-source";
  s.horizon = 0.1;
  s.p0 = {0.0, 2.0};
  s.v0 = {0.0, 2.0};
  return s;
}

/// The source with linear drag, standing in for the sim-to-real gap.
inline InclineSpec transfer_target_spec() {
  InclineSpec s = transfer_source_spec();
  s.preset = "transfer-target";
  s.mu_d = 0.1;
  return s;
}

struct ObsDomainConfig {
  InclineSpec source = transfer_source_spec();
  InclineSpec target = transfer_target_spec();
  std::size_t obs_dim = 16;
  std::size_t obs_hidden = 32;
  double obs_noise = 0.01;
  std::uint64_t seed = 0;
};

/// Episode pairs: true states (p, v) at t and t+1 and their observations.
struct EpisodeBatch {
  Matrix state_t, state_next;
  Matrix obs_t, obs_next;

  std::size_t size() const { return state_t.rows(); }
};

class ObsDomain {
 public:
  explicit ObsDomain(ObsDomainConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.source.validate();
    cfg_.target.validate();
    if (cfg_.target.include_theta || cfg_.target.include_action)
      throw ContractError("obs domain: target must be a plain (p, v) incline");
    if (cfg_.obs_dim == 0) throw ContractError("obs domain: obs_dim must be positive");
    if (cfg_.source.dim() != cfg_.target.dim()) throw ContractError("obs domain: source and target layouts differ");
    auto rng = SeedSplitter(cfg_.seed).stream("obs_map");
    map_ = Mlp::init({2, cfg_.obs_hidden, cfg_.obs_dim}, rng);
    // pooled (p, v) statistics of source frames fix both the observation
    // map's input scaling and the physical units of the latent space
    const EpisodeBatch ref = simulate(cfg_.source, 2000, 1.0, SeedSplitter(cfg_.seed).derive("reference"));
    const Matrix pooled = vstack(ref.state_t, ref.state_next);
    const InputNormalization norm = InputNormalization::fit(pooled);
    shift_ = norm.shift;
    scale_ = norm.scale;
  }

  const ObsDomainConfig& config() const { return cfg_; }
  /// Latent coordinate c maps to state shift[c] + scale[c] * z_c.
  const std::vector<double>& state_shift() const { return shift_; }
  const std::vector<double>& state_scale() const { return scale_; }

  /// On-manifold source data for training the relations used as a penalty.
  ManifoldDataset source_dataset(std::size_t n, std::uint64_t seed) const {
    return gen_incline_dataset(cfg_.source, n, seed);
  }
  const Mlp& observation_map() const { return map_; }
  std::size_t obs_dim() const { return cfg_.obs_dim; }

  /// Noise-free observations of states (rows (p, v)).
  Matrix observe_clean(const Matrix& states) const {
    Matrix z(states.rows(), 2);
    for (std::size_t r = 0; r < states.rows(); ++r)
      for (std::size_t c = 0; c < 2; ++c) z(r, c) = (states(r, c) - shift_[c]) / scale_[c];
    return map_.forward(z);
  }

  /// `count` target-domain episodes whose start ranges are the target's
  /// ranges shrunk toward their lower ends to `width_fraction` of full width.
  EpisodeBatch episodes(std::size_t count, double width_fraction, std::uint64_t seed) const {
    EpisodeBatch b = simulate(cfg_.target, count, width_fraction, seed);
    auto rng = SeedSplitter(seed).stream("obs_noise");
    std::normal_distribution<double> noise(0.0, 1.0);
    b.obs_t = observe_clean(b.state_t);
    b.obs_next = observe_clean(b.state_next);
    for (double& v : b.obs_t.flat()) v += cfg_.obs_noise * noise(rng);
    for (double& v : b.obs_next.flat()) v += cfg_.obs_noise * noise(rng);
    return b;
  }

 private:
  static EpisodeBatch simulate(const InclineSpec& spec, std::size_t count, double width_fraction,
                               std::uint64_t seed) {
    auto rng = SeedSplitter(seed).stream("episodes");
    const double f = std::clamp(width_fraction, 0.0, 1.0);
    auto draw = [&rng, f](Range r) {
      const double hi = r.lo + f * r.width();
      return hi > r.lo ? std::uniform_real_distribution<double>(r.lo, hi)(rng) : r.lo;
    };
    EpisodeBatch b;
    b.state_t = Matrix(count, 2);
    b.state_next = Matrix(count, 2);
    for (std::size_t i = 0; i < count; ++i) {
      const double p0 = draw(spec.p0), v0 = draw(spec.v0);
      const InclineState end = simulate_incline(spec, p0, v0);
      b.state_t(i, 0) = p0;
      b.state_t(i, 1) = v0;
      b.state_next(i, 0) = end.p;
      b.state_next(i, 1) = end.v;
    }
    return b;
  }

  ObsDomainConfig cfg_;
  Mlp map_;
  std::vector<double> shift_, scale_;
};

// ---------------------------------------------------------------------------
// Embedding model
// ---------------------------------------------------------------------------

struct TransferConfig {
  std::size_t epochs = 400;
  std::size_t episodes_per_epoch = 512;
  std::size_t batch_size = 64;
  std::size_t hidden = 64;
  double lr = 1e-3;
  double lambda_aml = 1.0;
  double clip_factor = 2.0;
  double kl_weight = 1e-2;
  double drift_start = 0.25;  // start-range width fraction at epoch 1, growing linearly to 1
  std::size_t eval_points = 1000;
  std::size_t distortion_pairs = 10000;
  std::size_t eval_every = 0;  // 0: evaluate only after the last epoch
  AlignmentConfig align;

  void validate() const {
    if (epochs == 0 || episodes_per_epoch == 0 || batch_size == 0) throw ContractError("transfer: empty schedule");
    if (!(lr > 0.0)) throw ContractError("transfer: lr must be > 0");
    if (lambda_aml < 0.0) throw ContractError("transfer: lambda_aml must be >= 0");
    if (eval_points < 100) throw ContractError("transfer: need at least 100 evaluation points");
  }
};

inline void to_json(json& j, const TransferConfig& c) {
  j = json{{"epochs", c.epochs},           {"episodes_per_epoch", c.episodes_per_epoch},
           {"batch_size", c.batch_size},   {"hidden", c.hidden},
           {"lr", c.lr},                   {"lambda_aml", c.lambda_aml},
           {"clip_factor", c.clip_factor}, {"kl_weight", c.kl_weight},
           {"drift_start", c.drift_start}, {"eval_points", c.eval_points},
           {"distortion_pairs", c.distortion_pairs}, {"eval_every", c.eval_every},
           {"align_epochs", c.align.epochs}};
}

/// Encoder outputs standardized latents; physical latents are
/// state_shift + state_scale * z, the units relations are evaluated in.
struct EmbeddingModel {
  Mlp encoder;  // R^D -> (mean, log-variance) stacked, 2d outputs
  Mlp decoder;  // R^d -> R^D, from standardized latents
  std::size_t latent_dim = 2;
  std::vector<double> state_shift;
  std::vector<double> state_scale;

  static EmbeddingModel make(const ObsDomain& domain, std::size_t hidden, std::mt19937_64& rng) {
    EmbeddingModel m;
    m.latent_dim = 2;
    m.encoder = Mlp::init({domain.obs_dim(), hidden, hidden, 2 * m.latent_dim}, rng);
    m.decoder = Mlp::init({m.latent_dim, hidden, hidden, domain.obs_dim()}, rng);
    m.state_shift = domain.state_shift();
    m.state_scale = domain.state_scale();
    return m;
  }

  /// Physical latent means for a batch of observations.
  Matrix encode_mean(const Matrix& obs) const {
    const Matrix h = encoder.forward(obs);
    Matrix out(obs.rows(), latent_dim);
    for (std::size_t r = 0; r < obs.rows(); ++r)
      for (std::size_t c = 0; c < latent_dim; ++c) out(r, c) = state_shift[c] + state_scale[c] * h(r, c);
    return out;
  }

  std::vector<Matrix*> parameters() {
    auto p = encoder.parameters();
    auto q = decoder.parameters();
    p.insert(p.end(), q.begin(), q.end());
    return p;
  }
};

struct EpochStats {
  std::size_t epoch = 0;
  double recon = 0.0;
  double kl = 0.0;
  double penalty = 0.0;  // mean unweighted sum_k |g_k|
  double loss = 0.0;
  double align_mse = std::numeric_limits<double>::quiet_NaN();
  double rho_var = std::numeric_limits<double>::quiet_NaN();
};

struct EmbeddingEvaluation {
  AlignmentReport alignment;
  DistortionReport distortion;
};

struct EmbeddingRun {
  EmbeddingModel model;
  std::vector<EpochStats> history;
  EmbeddingEvaluation final_eval;
};

namespace detail {

inline Matrix selector(std::size_t rows, std::size_t cols, std::size_t row_offset, std::size_t col_offset,
                       std::size_t count) {
  Matrix s(rows, cols);
  for (std::size_t i = 0; i < count; ++i) s(row_offset + i, col_offset + i) = 1.0;
  return s;
}

}  // namespace detail

/// Alignment (latent means -> true states) and distortion on fresh full-range
/// target episodes; states and observations of t and t+1 are pooled.
inline EmbeddingEvaluation evaluate_embedding(const EmbeddingModel& m, const ObsDomain& domain,
                                              const TransferConfig& cfg, std::uint64_t seed) {
  const EpisodeBatch eval = domain.episodes(cfg.eval_points / 2 + cfg.eval_points % 2, 1.0, seed);
  const Matrix states = vstack(eval.state_t, eval.state_next);
  const Matrix latents = m.encode_mean(vstack(eval.obs_t, eval.obs_next));
  EmbeddingEvaluation ev;
  AlignmentConfig ac = cfg.align;
  ac.seed = seed;
  ev.alignment = alignment_error(latents, states, ac);
  ev.distortion = distortion(latents, states, cfg.distortion_pairs, seed);
  return ev;
}

/// Trains the embedding on the drifting target stream.
///
/// Loss = recon + kl_weight * KL + lambda_aml * penalty, with the penalty
/// rescaled to at most clip_factor * recon. recon decodes both latents of the
/// pair; KL is the closed-form diagonal-Gaussian KL summed over the pair.
/// With no relations or lambda_aml = 0 the penalty is not part of the graph.
inline EmbeddingRun train_embedding(const ObsDomain& domain, const RelationSet* relations, const TransferConfig& cfg,
                                    std::uint64_t seed) {
  cfg.validate();
  const std::size_t d = 2;
  const bool use_penalty = relations && !relations->relations.empty() && cfg.lambda_aml > 0.0;
  if (relations && !relations->relations.empty() && relations->dim() != 2 * d)
    throw ContractError("transfer: relation set expects " + std::to_string(relations->dim()) +
                        " inputs but paired latents have " + std::to_string(2 * d));
  SeedSplitter seeds(seed);
  auto init_rng = seeds.stream("model");
  EmbeddingRun run;
  run.model = EmbeddingModel::make(domain, cfg.hidden, init_rng);
  EmbeddingModel& m = run.model;

  dg::Graph g;
  const std::size_t D = domain.obs_dim();
  dg::Var xt = g.input({dg::kDynamic, D}, "x_t");
  dg::Var xn = g.input({dg::kDynamic, D}, "x_next");
  dg::Var et = g.input({dg::kDynamic, d}, "eps_t");
  dg::Var en = g.input({dg::kDynamic, d}, "eps_next");
  MlpNodes enc = declare(g, m.encoder, "enc");
  MlpNodes dec = declare(g, m.decoder, "dec");
  dg::Var take_mean = g.constant(detail::selector(2 * d, d, 0, 0, d));
  dg::Var take_logvar = g.constant(detail::selector(2 * d, d, d, 0, d));

  struct Latent {
    dg::Var mean, logvar, z;
  };
  auto latent = [&](dg::Var x, dg::Var eps) {
    dg::Var h = enc.forward(x);
    Latent l{g.dot(h, take_mean), g.dot(h, take_logvar), {}};
    l.z = g.add(l.mean, g.mul(g.exp(g.scale(l.logvar, 0.5)), eps));
    return l;
  };
  const Latent lt = latent(xt, et), ln = latent(xn, en);
  auto sq_err = [&](dg::Var z, dg::Var x) {
    dg::Var r = g.sub(dec.forward(z), x);
    return g.mean(g.mul(r, r));
  };
  auto kl_of = [&](const Latent& l) {
    dg::Var t = g.add_scalar(g.sub(g.add(g.mul(l.mean, l.mean), g.exp(l.logvar)), l.logvar), -1.0);
    return g.scale(g.mean(g.sum_cols(t)), 0.5);
  };
  dg::Var recon = g.add(sq_err(lt.z, xt), sq_err(ln.z, xn));
  dg::Var kl = g.add(kl_of(lt), kl_of(ln));

  auto params_v = enc.all();
  for (dg::Var v : dec.all()) params_v.push_back(v);
  auto recon_g = g.gradient(recon, params_v);
  auto kl_g = g.gradient(kl, params_v);
  std::vector<dg::Var> roots{recon, kl};
  roots.insert(roots.end(), recon_g.begin(), recon_g.end());
  roots.insert(roots.end(), kl_g.begin(), kl_g.end());

  dg::Var penalty;
  std::vector<dg::Var> pen_g;
  if (use_penalty) {
    dg::Var shift = g.constant(Matrix::row_vector(m.state_shift));
    dg::Var scale = g.constant(Matrix::row_vector(m.state_scale));
    auto physical = [&](dg::Var z) { return g.add(g.broadcast_rows(shift, z), g.mul(g.broadcast_rows(scale, z), z)); };
    dg::Var tau = g.add(g.dot(physical(lt.z), g.constant(detail::selector(d, 2 * d, 0, 0, d))),
                        g.dot(physical(ln.z), g.constant(detail::selector(d, 2 * d, 0, d, d))));
    for (std::size_t k = 0; k < relations->size(); ++k) {
      RelationNodes rn = declare(g, relations->relations[k], "rel" + std::to_string(k + 1));
      bind(g, rn, relations->relations[k]);
      dg::Var term = g.mean(g.abs(rn.forward(tau)));
      penalty = penalty.valid() ? g.add(penalty, term) : term;
    }
    pen_g = g.gradient(penalty, params_v);
    roots.push_back(penalty);
    roots.insert(roots.end(), pen_g.begin(), pen_g.end());
  }

  Adam opt({.lr = cfg.lr});
  auto params = m.parameters();
  auto stream = seeds.child("stream");
  auto noise_rng = seeds.stream("reparam");
  auto batch_rng = seeds.stream("batches");
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<Matrix> total(params.size());
  Matrix eps_t, eps_n;
  std::vector<std::size_t> order(cfg.episodes_per_epoch);

  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    const double progress = cfg.epochs == 1 ? 1.0 : static_cast<double>(e - 1) / static_cast<double>(cfg.epochs - 1);
    const double width = cfg.drift_start + (1.0 - cfg.drift_start) * progress;
    const EpisodeBatch data = domain.episodes(cfg.episodes_per_epoch, width, stream.derive("epoch", e));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), batch_rng);
    EpochStats st;
    st.epoch = e;
    std::size_t steps = 0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      std::span<const std::size_t> sel(order.data() + s, std::min(cfg.batch_size, order.size() - s));
      eps_t = Matrix(sel.size(), d);
      eps_n = Matrix(sel.size(), d);
      for (double& v : eps_t.flat()) v = nd(noise_rng);
      for (double& v : eps_n.flat()) v = nd(noise_rng);
      bind(g, enc, m.encoder);
      bind(g, dec, m.decoder);
      g.bind(xt, data.obs_t.select_rows(sel));
      g.bind(xn, data.obs_next.select_rows(sel));
      g.bind(et, eps_t);
      g.bind(en, eps_n);
      g.evaluate(roots);
      const double r = g.value(recon)[0], k = g.value(kl)[0];
      double loss = r + cfg.kl_weight * k;
      for (std::size_t i = 0; i < params.size(); ++i) {
        total[i] = g.value(recon_g[i]);
        const Matrix& gk = g.value(kl_g[i]);
        for (std::size_t q = 0; q < total[i].size(); ++q) total[i][q] += cfg.kl_weight * gk[q];
      }
      if (use_penalty) {
        const double p = g.value(penalty)[0];
        const double w = cfg.lambda_aml * clip_scale(r, cfg.lambda_aml * p, cfg.clip_factor);
        loss += w * p;
        st.penalty += p;
        for (std::size_t i = 0; i < params.size(); ++i) {
          const Matrix& gp = g.value(pen_g[i]);
          for (std::size_t q = 0; q < total[i].size(); ++q) total[i][q] += w * gp[q];
        }
      }
      opt.step(params, total);
      st.recon += r;
      st.kl += k;
      st.loss += loss;
      ++steps;
    }
    st.recon /= steps;
    st.kl /= steps;
    st.penalty /= steps;
    st.loss /= steps;
    const bool eval_now = e == cfg.epochs || (cfg.eval_every && e % cfg.eval_every == 0);
    if (eval_now) {
      EmbeddingEvaluation ev = evaluate_embedding(m, domain, cfg, seeds.derive("eval"));
      st.align_mse = ev.alignment.mse_per_dim[0];
      st.rho_var = ev.distortion.variance;
      if (e == cfg.epochs) run.final_eval = std::move(ev);
    }
    run.history.push_back(st);
  }
  return run;
}

// ---------------------------------------------------------------------------
// Multi-seed comparison
// ---------------------------------------------------------------------------

struct VariantResult {
  std::uint64_t seed = 0;
  std::string variant;  // "baseline" or "aml"
  double position_mse = 0.0;
  double align_mse = 0.0;  // mean over state dimensions
  double rho_var = 0.0;
  double rho_mean = 0.0;
  std::vector<EpochStats> history;
};

struct CompareReport {
  std::vector<VariantResult> results;

  std::vector<const VariantResult*> of(const std::string& variant) const {
    std::vector<const VariantResult*> out;
    for (const auto& r : results)
      if (r.variant == variant) out.push_back(&r);
    return out;
  }
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw ContractError("median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double median_of(const CompareReport& rep, const std::string& variant, double VariantResult::*field) {
  std::vector<double> v;
  for (const auto* r : rep.of(variant)) v.push_back(r->*field);
  return median(v);
}

/// Per seed: the same domain stream and model initialization, trained once
/// without the penalty and once with it (when relations are given). Seeds
/// are spread over `jobs` threads; results are ordered by seed then variant.
inline CompareReport compare_runs(const ObsDomainConfig& domain_cfg, const RelationSet* relations,
                                  const std::vector<std::uint64_t>& seeds, const TransferConfig& cfg,
                                  std::size_t jobs = 1, std::size_t min_seeds = 3) {
  if (seeds.size() < min_seeds)
    throw ContractError("compare_runs: need at least " + std::to_string(min_seeds) + " seeds");
  cfg.validate();
  const bool with_aml = relations && !relations->relations.empty();
  const std::size_t per_seed = with_aml ? 2 : 1;
  CompareReport rep;
  rep.results.resize(seeds.size() * per_seed);

  auto run_seed = [&](std::size_t i) {
    ObsDomainConfig dc = domain_cfg;
    dc.seed = SeedSplitter(seeds[i]).derive("domain");
    const ObsDomain domain(dc);
    for (std::size_t v = 0; v < per_seed; ++v) {
      const bool aml = v == 1;
      EmbeddingRun run = train_embedding(domain, aml ? relations : nullptr, cfg, seeds[i]);
      VariantResult& out = rep.results[i * per_seed + v];
      out.seed = seeds[i];
      out.variant = aml ? "aml" : "baseline";
      out.position_mse = run.final_eval.alignment.mse_per_dim[0];
      out.align_mse = run.final_eval.alignment.mse;
      out.rho_var = run.final_eval.distortion.variance;
      out.rho_mean = run.final_eval.distortion.mean;
      out.history = std::move(run.history);
      log_line("transfer seed " + std::to_string(seeds[i]) + " " + out.variant + ": position MSE " +
               format_double(out.position_mse) + ", Var(rho) " + format_double(out.rho_var));
    }
  };

  jobs = std::clamp<std::size_t>(jobs, 1, seeds.size());
  if (jobs == 1) {
    for (std::size_t i = 0; i < seeds.size(); ++i) run_seed(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(jobs);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t)
      pool.emplace_back([&, t] {
        try {
          for (std::size_t i = next++; i < seeds.size(); i = next++) run_seed(i);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return rep;
}

/// Rows (seed, variant, epoch, recon, kl, penalty, align_mse, rho_var).
inline std::string compare_csv(const CompareReport& rep) {
  std::string out = "seed,variant,epoch,recon,kl,penalty,align_mse,rho_var\n";
  for (const auto& r : rep.results)
    for (const auto& h : r.history)
      out += std::to_string(r.seed) + "," + r.variant + "," + std::to_string(h.epoch) + "," + format_double(h.recon) +
             "," + format_double(h.kl) + "," + format_double(h.penalty) + "," + format_double(h.align_mse) + "," +
             format_double(h.rho_var) + "\n";
  return out;
}

}  // namespace aml
