// aml: generate datasets, train relation sets, evaluate them, run the transfer comparison.
//
// Every run writes into <out>/<run-id>/ where <out> is --out (or AML_OUT when
// set) and <run-id> is derived from the command and its resolved flags.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "aml/aml.hpp"

namespace fs = std::filesystem;
using aml::json;

namespace {

enum Exit { kOk = 0, kUsage = 2, kContract = 3, kTraining = 4, kIo = 5 };

struct Common {
  std::string out = "runs";
  std::uint64_t seed = 1;
  std::string run_id;
};

fs::path out_root(const Common& c) {
  if (const char* env = std::getenv("AML_OUT"); env && *env) return env;
  return c.out;
}

/// Creates <out>/<run-id>/ and writes config.json there.
fs::path open_run(const Common& c, const std::string& command, json args, json inputs = json::object()) {
  json cfg{{"command", command}, {"seed", c.seed}, {"args", std::move(args)}, {"inputs", std::move(inputs)}};
  std::string id = c.run_id;
  if (id.empty()) {
    std::string slug = command;
    for (char& ch : slug)
      if (ch == ' ') ch = '-';
    id = slug + "-" + aml::hex64(aml::fnv1a64(cfg.dump())).substr(0, 12);
  }
  cfg["run_id"] = id;
  const fs::path dir = out_root(c) / id;
  fs::create_directories(dir);
  aml::write_json(dir / "config.json", cfg);
  return dir;
}

aml::Range parse_range(const std::string& text, const char* flag) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    char* end = nullptr;
    const double x = std::strtod(cell.c_str(), &end);
    if (end == cell.c_str() || *end) throw aml::ContractError(std::string(flag) + ": not a number: '" + cell + "'");
    v.push_back(x);
  }
  if (v.size() != 2) throw aml::ContractError(std::string(flag) + ": expected lo,hi");
  return {v[0], v[1]};
}

std::vector<std::size_t> parse_relation_list(const std::string& text, std::size_t available) {
  std::vector<std::size_t> out;
  if (text == "all") return out;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    const long k = std::strtol(cell.c_str(), nullptr, 10);
    if (k < 1 || static_cast<std::size_t>(k) > available)
      throw aml::ContractError("--relations: index '" + cell + "' outside 1.." + std::to_string(available));
    out.push_back(static_cast<std::size_t>(k - 1));
  }
  return out;
}

aml::Matrix rows_of(const std::vector<std::vector<double>>& rows, std::size_t cols) {
  aml::Matrix m(rows.size(), cols);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = rows[r][c];
  return m;
}

// ---- gen ----------------------------------------------------------------------

struct GenOptions {
  double p = 0.5;
  std::size_t n = 5000;
  std::optional<double> noise;
  std::string preset = "fig6-top";
  std::optional<double> theta, mu_k, mu_d, horizon;
  std::string p0_range, v0_range;
  std::string off_mode = "box_uniform";
  double off_inflate = 0.1;
  std::size_t n_off = 0;
};

aml::OffManifoldConfig off_config(const GenOptions& o) {
  aml::OffManifoldConfig off;
  off.mode = aml::off_mode_from_string(o.off_mode);
  off.inflate = o.off_inflate;
  off.count = o.n_off;
  return off;
}

int cmd_gen(const Common& c, const GenOptions& o, const std::string& kind) {
  aml::ManifoldDataset d;
  json args;
  if (kind == "analytic") {
    aml::AnalyticSpec s;
    s.slope = o.p;
    s.count = o.n;
    s.noise_sigma = o.noise.value_or(0.01);
    s.seed = c.seed;
    d = aml::gen_analytic(s);
    args = json{{"kind", kind}, {"spec", s}};
  } else {
    aml::InclineSpec s = aml::InclineSpec::preset_named(o.preset);
    if (o.theta) s.theta = *o.theta;
    if (o.mu_k) s.mu_k = *o.mu_k;
    if (o.mu_d) s.mu_d = *o.mu_d;
    if (o.horizon) s.horizon = *o.horizon;
    if (o.noise) s.noise_sigma = *o.noise;
    if (!o.p0_range.empty()) s.p0 = parse_range(o.p0_range, "--p0-range");
    if (!o.v0_range.empty()) s.v0 = parse_range(o.v0_range, "--v0-range");
    d = aml::gen_incline_dataset(s, o.n, c.seed);
    args = json{{"kind", kind}, {"n", o.n}, {"spec", s}};
  }
  const aml::OffManifoldConfig off = off_config(o);
  args["off"] = json{{"mode", o.off_mode}, {"inflate", o.off_inflate}, {"count", o.n_off}};
  d.off_points = aml::gen_offmanifold(d, off, aml::SeedSplitter(c.seed).derive("gen.off"));
  const fs::path dir = open_run(c, "gen " + kind, args);
  aml::save_dataset(dir, d);
  aml::log_line("wrote " + std::to_string(d.on_points.rows()) + " on-manifold and " +
                std::to_string(d.off_points.rows()) + " off-manifold points");
  std::cout << dir.string() << "\n";
  return kOk;
}

// ---- train --------------------------------------------------------------------

struct TrainOptions {
  std::string data;
  std::string mode = "transverse";
  std::size_t max_relations = 2;
  std::size_t epochs = 5000;
  std::size_t syzygy_epochs = 2000;
  std::size_t batch_size = 256;
  double lr = 1e-3;
  double stopping_ratio = 5.0;
  double clip_factor = 2.0;
  std::string clip_mode = "clamp";
  double beta = 1e3;
  std::string weighting = "beta";
  std::size_t syzygy_attempts = 3;
  std::size_t width = 0;
};

int cmd_train(const Common& c, const TrainOptions& o) {
  const aml::ManifoldDataset d = aml::load_dataset(o.data);
  aml::TrainConfig cfg;
  cfg.mode = aml::train_mode_from_string(o.mode);
  cfg.max_relations = o.max_relations;
  cfg.epochs = o.epochs;
  cfg.syzygy_epochs = o.syzygy_epochs;
  cfg.batch_size = o.batch_size;
  cfg.lr = o.lr;
  cfg.seed = c.seed;
  cfg.stopping_ratio = o.stopping_ratio;
  cfg.clip_factor = o.clip_factor;
  cfg.clip_mode = aml::clip_mode_from_string(o.clip_mode);
  cfg.beta = o.beta;
  if (o.weighting == "clip") cfg.transversality_weighting = aml::AuxWeighting::Clip;
  else if (o.weighting != "beta") throw aml::ContractError("--weighting must be beta or clip");
  cfg.syzygy_max_attempts = o.syzygy_attempts;
  cfg.width = o.width;
  cfg.validate();

  const fs::path dir = open_run(c, "train", json(cfg), json{{"data", o.data}, {"fingerprint", d.fingerprint}});
  const aml::TrainResult res = aml::train_relation_set(cfg, d);

  std::vector<aml::CurvePoint> curve;
  std::string attempts = "relation,attempt,epochs,f_train_mean,f_test_mean,gk_test_mean,vanished,push_rounds,"
                         "f_test_mean_after,gk_test_mean_after\n";
  json outcomes = json::array();
  for (const auto& oc : res.outcomes) {
    curve.insert(curve.end(), oc.curve.begin(), oc.curve.end());
    for (const auto& a : oc.attempts)
      attempts += std::to_string(a.relation) + "," + std::to_string(a.attempt) + "," + std::to_string(a.epochs) + "," +
                  aml::format_double(a.f_train_mean) + "," + aml::format_double(a.f_test_mean) + "," +
                  aml::format_double(a.gk_test_mean) + "," + (a.vanished ? "1" : "0") + "," +
                  std::to_string(a.push_rounds) + "," + aml::format_double(a.f_test_mean_after) + "," +
                  aml::format_double(a.gk_test_mean_after) + "\n";
    outcomes.push_back(json{{"accepted", oc.accepted},
                            {"train_ratio", oc.train_ratio},
                            {"holdout_ratio", oc.holdout_ratio},
                            {"min_sin2", std::isnan(oc.min_sin2) ? json(nullptr) : json(oc.min_sin2)},
                            {"epochs", oc.epochs_run},
                            {"report", oc.report}});
  }
  aml::write_text_atomic(dir / "curves.csv", aml::curves_csv(curve));
  if (cfg.mode == aml::TrainMode::Syzygy) aml::write_text_atomic(dir / "syzygy_attempts.csv", attempts);
  aml::write_json(dir / "train_report.json",
                  json{{"relations", res.set.size()}, {"stop_reason", res.stop_reason}, {"outcomes", outcomes}});
  if (res.first_failed) {
    std::cerr << "error: " << res.outcomes.front().report << "\n";
    return kTraining;
  }
  aml::save_relation_set(res.set, dir / "relations.json");
  if (res.set.size() < cfg.max_relations)
    aml::log_line("note: stopped at " + std::to_string(res.set.size()) + " relations (" + res.stop_reason + ")");
  std::cout << dir.string() << "\n";
  return kOk;
}

// ---- eval ---------------------------------------------------------------------

struct EvalOptions {
  std::string relations;
  std::string data;
  std::string which = "all";
  std::optional<double> range;
  std::size_t resolution = 60;
  double threshold_factor = 2.0;
  double inflate = 0.1;
  std::size_t grid = 10;
  std::string preset;
  std::size_t test_points = 2000;
  std::optional<double> ratio;
};

aml::RelationSet load_checked(const EvalOptions& o, const aml::ManifoldDataset& d) {
  aml::RelationSet set = aml::load_relation_set(o.relations);
  if (set.relations.empty()) throw aml::ContractError("relation set is empty");
  if (set.dim() != d.dim())
    throw aml::ContractError("relation set expects " + std::to_string(set.dim()) + " inputs, dataset has " +
                             std::to_string(d.dim()) + " columns");
  return set;
}

json eval_inputs(const EvalOptions& o, const aml::ManifoldDataset& d) {
  return json{{"relations", o.relations}, {"data", o.data}, {"fingerprint", d.fingerprint}};
}

aml::TrainConfig stored_config(const aml::RelationSet& set) {
  aml::TrainConfig cfg;
  if (!set.config.empty()) cfg = set.config.get<aml::TrainConfig>();
  return cfg;
}

/// Generalization test set: the dataset's incline with both start ranges set to [lo, range].
aml::ManifoldDataset widened(const aml::ManifoldDataset& d, double range, std::size_t n, std::uint64_t seed) {
  if (d.kind != "incline") throw aml::ContractError("--range applies to incline datasets only");
  aml::InclineSpec s = d.spec.get<aml::InclineSpec>();
  s.p0.hi = range;
  s.v0.hi = range;
  return aml::gen_incline_dataset(s, n, seed);
}

int cmd_eval_vanish(const Common& c, const EvalOptions& o) {
  const aml::ManifoldDataset d = aml::load_dataset(o.data);
  const aml::RelationSet set = load_checked(o, d);
  aml::TrainConfig cfg = stored_config(set);
  aml::Matrix on, off;
  const double ratio_gate = o.ratio.value_or(cfg.stopping_ratio);
  json args{{"range", o.range ? json(*o.range) : json(nullptr)}, {"test_points", o.test_points}, {"ratio", ratio_gate}};
  if (o.range) {
    const aml::ManifoldDataset test = widened(d, *o.range, o.test_points, aml::SeedSplitter(c.seed).derive("eval.test"));
    on = test.on_points;
    off = aml::gen_offmanifold(test, cfg.off, aml::SeedSplitter(c.seed).derive("eval.off"));
  } else {
    const aml::TrainingData td = aml::prepare_training_data(d, cfg);
    on = td.on_test;
    off = td.off_test;
  }
  const fs::path dir = open_run(c, "eval vanish", args, eval_inputs(o, d));
  std::vector<std::vector<double>> rows;
  bool all = true;
  for (std::size_t k = 0; k < set.size(); ++k) {
    const auto& g = set.relations[k];
    const double on_mean = aml::mean_abs(g.evaluate(on).flat());
    const double off_mean = aml::mean_abs(g.evaluate(off).flat());
    const bool ok = aml::is_vanishing_means(on_mean, off_mean, ratio_gate);
    all = all && ok;
    const double ratio = aml::vanishing_ratio(on_mean, off_mean);
    rows.push_back({static_cast<double>(k + 1), on_mean, off_mean, ratio, ok ? 1.0 : 0.0});
    std::cout << "g" << k + 1 << ": on " << on_mean << " off " << off_mean << " ratio " << ratio
              << (ok ? " (vanishing)" : " (not vanishing)") << "\n";
  }
  aml::write_csv(dir / "vanish.csv", {"relation", "on_mean", "off_mean", "ratio", "vanishing"}, rows_of(rows, 5));
  std::cout << dir.string() << "\n";
  return kOk;
}

int cmd_eval_levelset(const Common& c, const EvalOptions& o) {
  const aml::ManifoldDataset d = aml::load_dataset(o.data);
  const aml::RelationSet set = load_checked(o, d);
  aml::LevelSetOptions lo;
  lo.relations = parse_relation_list(o.which, set.size());
  lo.threshold_factor = o.threshold_factor;
  lo.seed = aml::SeedSplitter(c.seed).derive("eval.levelset");
  const aml::Box box = aml::dataset_box(d).inflated(o.inflate);
  const fs::path dir = open_run(
      c, "eval levelset",
      json{{"which", o.which}, {"resolution", o.resolution}, {"threshold_factor", o.threshold_factor}, {"inflate", o.inflate}},
      eval_inputs(o, d));

  const aml::LevelSetCloud cloud = aml::level_set(set, box, o.resolution, lo);
  aml::write_csv(dir / "levelset.csv", set.columns.empty() ? d.columns : set.columns, cloud.points);
  json summary{{"points", cloud.points.rows()}, {"scanned", cloud.scanned}, {"thresholds", cloud.thresholds}};
  for (std::size_t k : cloud.relations) {
    aml::LevelSetOptions single = lo;
    single.relations = {k};
    single.thresholds.reset();
    const aml::LevelSetCloud one = aml::level_set(set, box, o.resolution, single);
    aml::write_csv(dir / ("levelset_g" + std::to_string(k + 1) + ".csv"), d.columns, one.points);
  }
  if (d.kind == "analytic" && cloud.points.rows()) {
    const double slope = d.spec.at("slope").get<double>();
    double total = 0.0;
    for (std::size_t r = 0; r < cloud.points.rows(); ++r) total += aml::analytic_curve_distance(slope, cloud.points.row(r));
    summary["mean_curve_distance"] = total / static_cast<double>(cloud.points.rows());
    std::cout << "mean distance to the true curve: " << summary["mean_curve_distance"].get<double>() << "\n";
  }
  aml::write_json(dir / "levelset.json", summary);
  std::cout << "level set: " << cloud.points.rows() << " of " << cloud.scanned << " points\n" << dir.string() << "\n";
  return kOk;
}

int cmd_eval_phase(const Common& c, const EvalOptions& o) {
  const aml::ManifoldDataset d = aml::load_dataset(o.data);
  if (d.kind != "incline") throw aml::ContractError("eval phase needs an incline dataset");
  const aml::RelationSet set = load_checked(o, d);
  aml::InclineSpec spec = d.spec.get<aml::InclineSpec>();
  if (!o.preset.empty() && o.preset != spec.preset)
    throw aml::ContractError("--preset " + o.preset + " does not match the dataset preset " + spec.preset);
  aml::PhaseGrid grid;
  grid.p = spec.p0;
  grid.v = spec.v0;
  if (o.range) {
    if (!(*o.range > spec.p0.lo && *o.range > spec.v0.lo)) throw aml::ContractError("--range must exceed the start ranges' lower ends");
    grid.p.hi = *o.range;
    grid.v.hi = *o.range;
  }
  grid.np = grid.nv = o.grid;
  // the search window must cover endpoints of starts beyond the training range
  aml::PhaseSearch search = aml::phase_search_from(d, spec);
  const double extend = std::max({0.0, grid.p.hi - spec.p0.hi, grid.v.hi - spec.v0.hi});
  search.p1.hi += extend * (1.0 + spec.horizon);
  search.v1.hi += extend;
  const fs::path dir = open_run(c, "eval phase", json{{"range", o.range ? json(*o.range) : json(nullptr)}, {"grid", o.grid}},
                                eval_inputs(o, d));
  const aml::Matrix sim = aml::phase_export_simulator(spec, grid);
  const aml::Matrix rel = aml::phase_export_relations(set, spec, grid, search);
  aml::write_csv(dir / "phase_sim.csv", {"p0", "v0", "dp", "dv"}, sim);
  aml::Matrix rel_arrows(rel.rows(), 4);
  for (std::size_t r = 0; r < rel.rows(); ++r) {
    rel_arrows(r, 0) = rel(r, 0);
    rel_arrows(r, 1) = rel(r, 1);
    rel_arrows(r, 2) = rel(r, 2) - rel(r, 0);
    rel_arrows(r, 3) = rel(r, 3) - rel(r, 1);
  }
  aml::write_csv(dir / "phase_relations.csv", {"p0", "v0", "dp", "dv"}, rel_arrows);
  const double err = aml::phase_endpoint_error(rel, sim);
  aml::write_json(dir / "phase.json", json{{"mean_endpoint_error", err}, {"arrows", rel.rows()}});
  std::cout << "mean endpoint error " << err << "\n" << dir.string() << "\n";
  return kOk;
}

int cmd_eval_angles(const Common& c, const EvalOptions& o) {
  const aml::ManifoldDataset d = aml::load_dataset(o.data);
  const aml::RelationSet set = load_checked(o, d);
  if (set.size() < 2) throw aml::ContractError("eval angles needs at least two relations");
  const aml::TrainingData td = aml::prepare_training_data(d, stored_config(set));
  const fs::path dir = open_run(c, "eval angles", json::object(), eval_inputs(o, d));
  const aml::GradientAngleReport rep = aml::angle_report(set.relations, td.on_test);
  std::vector<std::string> cols;
  for (auto [i, j] : rep.pairs) cols.push_back("sin2_g" + std::to_string(i + 1) + "_g" + std::to_string(j + 1));
  aml::write_csv(dir / "angles.csv", cols, rep.sin2);
  aml::write_json(dir / "angles.json", json{{"min_sin2", rep.min_sin2}, {"mean_sin2", rep.mean_sin2}});
  std::cout << "min sin^2 " << rep.min_sin2 << ", mean " << rep.mean_sin2 << "\n" << dir.string() << "\n";
  return kOk;
}

// ---- transfer -----------------------------------------------------------------

struct TransferOptions {
  std::string relations;
  std::size_t seeds = 3;
  std::size_t jobs = 1;
  aml::TransferConfig cfg;
};

int cmd_transfer(const Common& c, const TransferOptions& o) {
  std::optional<aml::RelationSet> set;
  json inputs = json::object();
  if (!o.relations.empty()) {
    set = aml::load_relation_set(o.relations);
    inputs["relations"] = o.relations;
  }
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < o.seeds; ++i) seeds.push_back(c.seed + i);
  aml::ObsDomainConfig dc;
  json args(o.cfg);
  args["seeds"] = seeds;
  const fs::path dir = open_run(c, "transfer", args, inputs);
  const aml::CompareReport rep =
      aml::compare_runs(dc, set ? &*set : nullptr, seeds, o.cfg, o.jobs, set ? 3 : 1);
  aml::write_text_atomic(dir / "transfer.csv", aml::compare_csv(rep));
  json summary;
  for (const char* v : {"baseline", "aml"}) {
    if (rep.of(v).empty()) continue;
    summary[v] = json{{"median_rho_var", aml::median_of(rep, v, &aml::VariantResult::rho_var)},
                      {"median_position_mse", aml::median_of(rep, v, &aml::VariantResult::position_mse)}};
  }
  aml::write_json(dir / "transfer.json", summary);
  std::cout << summary.dump(2) << "\n" << dir.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Analytic manifold learning: datasets, relation training, evaluation and transfer"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&common](CLI::App* sub) {
    sub->add_option("--out", common.out, "Output root (AML_OUT overrides)");
    sub->add_option("--seed", common.seed, "Root seed");
    sub->add_option("--run-id", common.run_id, "Run directory name (default: derived from the flags)");
  };

  GenOptions gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate a dataset");
  gen_cmd->require_subcommand(1);
  auto* gen_an = gen_cmd->add_subcommand("analytic", "Hyperboloid cut by a plane");
  gen_an->add_option("--p", gen.p, "Plane slope");
  auto* gen_in = gen_cmd->add_subcommand("incline", "Block on an incline");
  gen_in->add_option("--preset", gen.preset)->check(CLI::IsMember({"fig6-top", "fig6-mid", "fig6-drag"}));
  gen_in->add_option("--theta", gen.theta, "Incline angle in radians");
  gen_in->add_option("--mu-k", gen.mu_k);
  gen_in->add_option("--mu-d", gen.mu_d);
  gen_in->add_option("--horizon", gen.horizon);
  gen_in->add_option("--p0-range", gen.p0_range, "lo,hi");
  gen_in->add_option("--v0-range", gen.v0_range, "lo,hi");
  for (auto* sub : {gen_an, gen_in}) {
    sub->add_option("--n", gen.n, "On-manifold points");
    sub->add_option("--noise", gen.noise, "Gaussian noise sigma");
    sub->add_option("--off-mode", gen.off_mode)->check(CLI::IsMember({"box_uniform", "thicken"}));
    sub->add_option("--off-inflate", gen.off_inflate);
    sub->add_option("--n-off", gen.n_off, "Off-manifold points (0: same as --n)");
    add_common(sub);
  }

  TrainOptions tr;
  auto* train_cmd = app.add_subcommand("train", "Train a relation set");
  train_cmd->add_option("--data", tr.data, "Dataset directory")->required();
  train_cmd->add_option("--mode", tr.mode)->check(CLI::IsMember({"transverse", "syzygy"}));
  train_cmd->add_option("--max-relations", tr.max_relations);
  train_cmd->add_option("--epochs", tr.epochs, "Epoch budget per relation");
  train_cmd->add_option("--syzygy-epochs", tr.syzygy_epochs);
  train_cmd->add_option("--batch-size", tr.batch_size);
  train_cmd->add_option("--lr", tr.lr);
  train_cmd->add_option("--stopping-ratio", tr.stopping_ratio);
  train_cmd->add_option("--clip-factor", tr.clip_factor);
  train_cmd->add_option("--clip-mode", tr.clip_mode, "Gradient of a capped term: clamp (zero) or rescale")
      ->check(CLI::IsMember({"clamp", "rescale"}));
  train_cmd->add_option("--beta", tr.beta);
  train_cmd->add_option("--weighting", tr.weighting, "Transversality weighting: beta or clip");
  train_cmd->add_option("--syzygy-attempts", tr.syzygy_attempts);
  train_cmd->add_option("--width", tr.width, "Hidden width (0: grows with the relation index)");
  add_common(train_cmd);

  EvalOptions ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a relation set");
  eval_cmd->require_subcommand(1);
  std::vector<CLI::App*> eval_subs;
  auto* ev_vanish = eval_cmd->add_subcommand("vanish", "Held-out vanishing ratios");
  ev_vanish->add_option("--range", ev.range, "Incline only: test starts in [lo, range]");
  ev_vanish->add_option("--test-points", ev.test_points);
  ev_vanish->add_option("--ratio", ev.ratio, "Vanishing gate (default: the training stopping ratio)");
  auto* ev_level = eval_cmd->add_subcommand("levelset", "Level-set point cloud");
  ev_level->add_option("--resolution", ev.resolution, "Grid points per axis");
  ev_level->add_option("--threshold-factor", ev.threshold_factor);
  ev_level->add_option("--inflate", ev.inflate, "Box growth around the data");
  auto* ev_phase = eval_cmd->add_subcommand("phase", "Phase arrows from relations and simulator");
  ev_phase->add_option("--preset", ev.preset);
  ev_phase->add_option("--range", ev.range, "Upper end of the start grid");
  ev_phase->add_option("--grid", ev.grid, "Grid points per axis");
  auto* ev_angles = eval_cmd->add_subcommand("angles", "Gradient angles on held-out points");
  for (auto* sub : {ev_vanish, ev_level, ev_phase, ev_angles}) {
    sub->add_option("--relations", ev.relations, "Relation set JSON")->required();
    sub->add_option("--data", ev.data, "Dataset directory")->required();
    add_common(sub);
  }
  ev_level->add_option("--which", ev.which, "Relations to intersect: all or 1,2,...");

  TransferOptions tf;
  auto* tr_cmd = app.add_subcommand("transfer", "Baseline vs penalized embedding over seeds");
  tr_cmd->add_option("--relations", tf.relations, "Relation set JSON (omit for baseline only)");
  tr_cmd->add_option("--seeds", tf.seeds, "Number of seeds, starting at --seed");
  tr_cmd->add_option("--jobs", tf.jobs, "Parallel seeds");
  tr_cmd->add_option("--epochs", tf.cfg.epochs);
  tr_cmd->add_option("--lambda", tf.cfg.lambda_aml);
  tr_cmd->add_option("--kl-weight", tf.cfg.kl_weight);
  tr_cmd->add_option("--episodes", tf.cfg.episodes_per_epoch, "Episodes per epoch");
  tr_cmd->add_option("--eval-every", tf.cfg.eval_every);
  add_common(tr_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (gen_cmd->parsed()) return cmd_gen(common, gen, gen_an->parsed() ? "analytic" : "incline");
    if (train_cmd->parsed()) return cmd_train(common, tr);
    if (ev_vanish->parsed()) return cmd_eval_vanish(common, ev);
    if (ev_level->parsed()) return cmd_eval_levelset(common, ev);
    if (ev_phase->parsed()) return cmd_eval_phase(common, ev);
    if (ev_angles->parsed()) return cmd_eval_angles(common, ev);
    if (tr_cmd->parsed()) return cmd_transfer(common, tf);
  } catch (const aml::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const aml::TrainingFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kTraining;
  } catch (const aml::ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kContract;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  }
  return kUsage;
}
