// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.
//
//   acceptance            run everything
//   acceptance 3 7        run criteria 3 and 7 only

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "aml/aml.hpp"
#include "cli_runner.hpp"
#include "fd_oracle.hpp"

namespace fs = std::filesystem;
using aml::Matrix;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  std::function<Verdict()> run;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

// Held-out on/off means for each relation, on the split the run trained with.
std::vector<std::pair<double, double>> holdout_means(const aml::RelationSet& set, const aml::TrainingData& td) {
  std::vector<std::pair<double, double>> out;
  for (const auto& g : set.relations)
    out.emplace_back(aml::mean_abs(g.evaluate(td.on_test).flat()), aml::mean_abs(g.evaluate(td.off_test).flat()));
  return out;
}

// ---------------------------------------------------------------------------

Verdict autodiff() {
  std::mt19937_64 rng(2024);
  double first = 0.0, second = 0.0, first_abs = 0.0, second_abs = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t inputs = 1 + i % 5;
    const auto a = aml::testing::first_order_check(rng, 3, 32, inputs);
    const auto b = aml::testing::second_order_check(rng, 3, 32, inputs);
    first = std::max(first, a.max_rel_error);
    second = std::max(second, b.max_rel_error);
    first_abs = std::max(first_abs, a.max_abs_error);
    second_abs = std::max(second_abs, b.max_abs_error);
  }
  return {first < 1e-5 && second < 1e-4, "100 nets: max first-order rel err " + fmt(first) + " (< 1e-5, abs " +
                                             fmt(first_abs) + "), second-order " + fmt(second) + " (< 1e-4, abs " +
                                             fmt(second_abs) + ")"};
}

Verdict dynamics() {
  const auto top = aml::InclineSpec::preset_named("fig6-top");
  const double a = 9.81 * std::sin(std::numbers::pi / 4);
  double worst = 0.0;
  for (double p0 : {0.0, 0.1, 0.2})
    for (double v0 : {0.0, 0.1, 0.2}) {
      const auto end = aml::simulate_incline(top, p0, v0);
      worst = std::max(worst, std::abs((end.p - p0) - (v0 + 0.5 * a)));
      worst = std::max(worst, std::abs((end.v - v0) - a));
    }
  const auto drag = aml::InclineSpec::preset_named("fig6-drag");
  double drag_err = 0.0;
  for (double theta : {std::numbers::pi / 20, std::numbers::pi / 6, std::numbers::pi / 2.5}) {
    const auto end = aml::simulate_incline(drag, 0.0, 0.0, 0.0, theta, 10.0);
    drag_err = std::max(drag_err, std::abs(end.v - 9.81 * std::sin(theta) / drag.mu_d));
  }
  return {worst < 1e-3 && drag_err < 1e-3,
          "frictionless max |dp|,|dv| error " + fmt(worst) + ", drag terminal velocity error " + fmt(drag_err)};
}

aml::TrainConfig analytic_config() {
  aml::TrainConfig cfg;
  cfg.seed = 5;
  cfg.max_relations = 2;
  cfg.stopping_ratio = 25.0;
  cfg.transversality_weighting = aml::AuxWeighting::Clip;
  return cfg;
}

Verdict analytic_recovery() {
  const auto d = aml::gen_analytic(aml::AnalyticSpec{});
  const auto cfg = analytic_config();
  const auto res = aml::train_relation_set(cfg, d);
  if (res.set.size() < 2) return {false, "only " + std::to_string(res.set.size()) + " relation(s): " + res.stop_reason};
  const auto td = aml::prepare_training_data(d, cfg);
  std::string detail = "held-out ratios";
  bool ok = true;
  for (auto [on, off] : holdout_means(res.set, td)) {
    ok = ok && aml::is_vanishing_means(on, off, 5.0);
    detail += " " + fmt(aml::vanishing_ratio(on, off));
  }
  const auto cloud = aml::level_set(res.set, aml::dataset_box(d).inflated(0.1), 60);
  double dist = std::numeric_limits<double>::infinity();
  if (cloud.points.rows()) {
    dist = 0.0;
    for (std::size_t r = 0; r < cloud.points.rows(); ++r) dist += aml::analytic_curve_distance(0.5, cloud.points.row(r));
    dist /= static_cast<double>(cloud.points.rows());
  }
  const double sin2 = aml::angle_report(res.set.relations, td.on_test).min_sin2;
  ok = ok && dist < 0.1 && sin2 >= 0.1;
  detail += " (>= 5); level set " + std::to_string(cloud.points.rows()) + " pts, mean curve distance " + fmt(dist) +
            " (< 0.1); min sin^2 " + fmt(sin2) + " (>= 0.1)";
  return {ok, detail};
}

Verdict syzygy_dependence() {
  const auto d = aml::gen_analytic(aml::AnalyticSpec{});
  aml::TrainConfig cfg;
  cfg.seed = 5;
  cfg.mode = aml::TrainMode::Syzygy;
  const auto td = aml::prepare_training_data(d, cfg);
  const auto first = aml::train_first_relation(cfg, td);
  if (!first.accepted) return {false, "g1 did not vanish: " + first.report};
  aml::RelationSet set;
  set.relations.push_back(first.relation);
  const auto out = aml::train_next_syzygy(cfg, td, set, first.relation);
  if (out.attempts.empty()) return {false, "no syzygy attempt was made: " + out.report};
  const auto& a1 = out.attempts.front();
  const bool found = a1.vanished;
  std::string detail = std::string("attempt 1 ") + (found ? "found" : "missed") + " the syzygy: mean|f| " +
                       fmt(a1.f_test_mean) + ", mean|g2| " + fmt(a1.gk_test_mean);
  bool restored = false;
  if (out.attempts.size() > 1 && !out.attempts.back().vanished) {
    restored = true;
    detail += "; attempt " + std::to_string(out.attempts.size()) + " fresh syzygy failed (independence restored)";
  } else if (!out.accepted && !out.report.empty()) {
    restored = true;
    detail += "; candidate rejected: " + out.report;
  }
  return {found && restored, detail};
}

Verdict incline_generalization() {
  const auto spec = aml::InclineSpec::preset_named("fig6-top");
  const auto d = aml::gen_incline_dataset(spec, 5000, 11);
  aml::TrainConfig cfg;
  cfg.seed = 5;
  cfg.transversality_weighting = aml::AuxWeighting::Clip;
  const auto res = aml::train_relation_set(cfg, d);
  if (res.set.size() == 0) return {false, "no relation learned"};
  auto wide = spec;
  wide.p0.hi = wide.v0.hi = 0.4;
  const auto test = aml::gen_incline_dataset(wide, 2000, 12);
  const Matrix off = aml::gen_offmanifold(test, cfg.off, 13);
  bool ok = true;
  std::string detail = std::to_string(res.set.size()) + " relation(s); [0,0.4] ratios";
  for (const auto& g : res.set.relations) {
    const double on = aml::mean_abs(g.evaluate(test.on_points).flat()), offm = aml::mean_abs(g.evaluate(off).flat());
    ok = ok && aml::is_vanishing_means(on, offm, 3.0);
    detail += " " + fmt(aml::vanishing_ratio(on, offm));
  }
  aml::PhaseGrid grid;
  const Matrix sim = aml::phase_export_simulator(spec, grid);
  const Matrix rel = aml::phase_export_relations(res.set, spec, grid, aml::phase_search_from(d, spec));
  const double err = aml::phase_endpoint_error(rel, sim);
  ok = ok && err < 0.15;
  detail += " (>= 3); phase endpoint error " + fmt(err) + " (< 0.15)";
  return {ok, detail};
}

Verdict preset_holdout(const char* name) {
  const auto d = aml::gen_incline_dataset(aml::InclineSpec::preset_named(name), 5000, 11);
  aml::TrainConfig cfg;
  cfg.seed = 5;
  const auto res = aml::train_relation_set(cfg, d);
  if (res.set.size() == 0) return {false, std::string(name) + ": no relation learned"};
  const auto td = aml::prepare_training_data(d, cfg);
  bool ok = true;
  std::string detail = std::string(name) + " " + std::to_string(res.set.size()) + " relation(s), held-out ratios";
  for (auto [on, off] : holdout_means(res.set, td)) {
    ok = ok && aml::is_vanishing_means(on, off, 5.0);
    detail += " " + fmt(aml::vanishing_ratio(on, off));
  }
  return {ok, detail};
}

Verdict presets() {
  const auto mid = preset_holdout("fig6-mid");
  const auto drag = preset_holdout("fig6-drag");
  return {mid.pass && drag.pass, mid.detail + "; " + drag.detail};
}

Verdict transfer() {
  aml::ObsDomainConfig dc;
  dc.source.noise_sigma = 0.001;
  const aml::ObsDomain dom(dc);
  const auto source = dom.source_dataset(5000, 1);
  aml::TrainConfig cfg;
  cfg.epochs = 2000;
  cfg.stopping_ratio = 20.0;
  const auto rel = aml::train_relation_set(cfg, source);
  if (rel.set.size() == 0) return {false, "no source relation learned"};
  const auto rep = aml::compare_runs(dc, &rel.set, {1, 2, 3}, aml::TransferConfig{});
  const double var_aml = aml::median_of(rep, "aml", &aml::VariantResult::rho_var);
  const double var_base = aml::median_of(rep, "baseline", &aml::VariantResult::rho_var);
  const double pos_aml = aml::median_of(rep, "aml", &aml::VariantResult::position_mse);
  const double pos_base = aml::median_of(rep, "baseline", &aml::VariantResult::position_mse);
  return {var_aml <= var_base && pos_aml <= pos_base,
          std::to_string(rel.set.size()) + " relation(s), 3 seeds: median Var(rho) " + fmt(var_aml) + " vs " +
              fmt(var_base) + ", median position MSE " + fmt(pos_aml) + " vs " + fmt(pos_base)};
}

Verdict metric_identities() {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix t(400, 2);
  for (double& v : t.flat()) v = nd(rng);
  const aml::Mlp g = aml::Mlp::init({2, 16, 3}, rng), f = aml::Mlp::init({3, 16, 2}, rng);
  const Matrix gt = g.forward(t), fgt = f.forward(gt);
  const auto rg = aml::distortion(gt, t, 5000, 1), rf = aml::distortion(fgt, gt, 5000, 1),
             rh = aml::distortion(fgt, t, 5000, 1);
  double add = rh.pairs == rg.pairs && rh.pairs == rf.pairs ? 0.0 : 1.0;
  for (std::size_t k = 0; k < rh.rho.size() && k < rg.rho.size() && k < rf.rho.size(); ++k)
    add = std::max(add, std::abs(rh.rho[k] - rg.rho[k] - rf.rho[k]));

  Matrix scaled = t;
  for (double& v : scaled.flat()) v *= 2.5;
  const double var = aml::distortion(scaled, t, 5000, 1).variance;

  // d_g under output-layer scaling, from the graph
  auto net = aml::RelationNet::make(3, 8, rng);
  for (Matrix& w : net.net.weights)
    for (double& v : w.flat()) v *= 2.0;
  auto big = net;
  for (double& v : big.net.weights.back().flat()) v *= 7.0;
  for (double& v : big.net.biases.back().flat()) v *= 7.0;
  Matrix tau(50, 3);
  for (double& v : tau.flat()) v = nd(rng);
  // d_g and ||v|| per row
  auto distance = [&](const aml::RelationNet& rel) {
    aml::dg::Graph gr;
    auto x = gr.input({aml::dg::kDynamic, 3}, "tau");
    auto nodes = aml::declare(gr, rel, "g");
    aml::bind(gr, nodes, rel);
    gr.bind(x, tau);
    const auto terms = aml::vanishing_terms(nodes, x);
    const aml::dg::Var roots[] = {terms.distance, terms.grad_norm};
    gr.evaluate(roots);
    return std::pair{gr.value(terms.distance), gr.value(terms.grad_norm)};
  };
  const auto [d1, n1] = distance(net);
  const auto [d7, n7] = distance(big);
  // The norm carries a 1e-12 stabilizer, which moves d_g by at most 1e-12 / (2 ||v||^2).
  double inv = 0.0;
  std::size_t steep = 0, within_bound = 0;
  for (std::size_t r = 0; r < d1.size(); ++r) {
    const double rel = std::abs(d7[r] - d1[r]) / std::abs(d1[r]);
    const double v2 = n1[r] * n1[r];
    if (rel <= 1e-10 + aml::kNormEps / (2.0 * v2)) ++within_bound;
    if (v2 >= 1e-2) {
      ++steep;
      inv = std::max(inv, rel);
    }
  }
  const bool ok = add < 1e-10 && var < 1e-12 && steep > 0 && inv < 1e-10 && within_bound == d1.size();
  return {ok, "rho additivity max error " + fmt(add) + ", uniform-scaling Var(rho) " + fmt(var) +
                  ", d_g output scaling: max relative change " + fmt(inv) + " over " + std::to_string(steep) +
                  " points with ||v||^2 >= 1e-2, " + std::to_string(within_bound) + "/" +
                  std::to_string(d1.size()) + " points within 1e-10 + stabilizer bound"};
}

std::vector<std::string> cli_pipeline(const fs::path& cwd, bool& ok) {
  std::vector<std::string> dirs;
  auto step = [&](const std::string& args) {
    const auto r = clitest::run(cwd, args);
    if (r.code != 0) ok = false;
    dirs.push_back(r.last_line());
    return r.last_line();
  };
  step("gen analytic --n 300 --seed 4");
  const auto data = step("gen incline --preset fig6-top --n 600 --seed 4");
  const auto rel = step("train --data " + data + " --epochs 2000 --seed 4");
  const auto syz = step("train --data " + data + " --mode syzygy --epochs 2000 --syzygy-epochs 200 --seed 4");
  const auto rels = rel + "/relations.json";
  step("eval vanish --relations " + rels + " --data " + data);
  step("eval vanish --relations " + rels + " --data " + data + " --range 0.4");
  step("eval levelset --relations " + syz + "/relations.json --data " + data + " --resolution 10");
  step("eval phase --relations " + rels + " --data " + data + " --preset fig6-top --grid 4");
  step("eval angles --relations " + syz + "/relations.json --data " + data);
  step("transfer --relations " + rels + " --seeds 3 --epochs 3 --episodes 128");
  return dirs;
}

Verdict reproducibility() {
  const auto root = fs::temp_directory_path() / "aml_acceptance_repro";
  fs::remove_all(root);
  fs::create_directories(root / "a");
  fs::create_directories(root / "b");
  bool ok_a = true, ok_b = true;
  const auto da = cli_pipeline(root / "a", ok_a), db = cli_pipeline(root / "b", ok_b);
  if (!ok_a || !ok_b || da != db) return {false, "a command failed or run directories differ"};
  std::size_t files = 0, differ = 0;
  std::string first_diff;
  for (const auto& d : da)
    for (const auto& e : fs::directory_iterator(root / "a" / d)) {
      const auto name = e.path().filename();
      ++files;
      if (clitest::slurp(e.path()) != clitest::slurp(root / "b" / d / name)) {
        ++differ;
        if (first_diff.empty()) first_diff = d + "/" + name.string();
      }
    }
  return {differ == 0 && files > 0, std::to_string(da.size()) + " commands, " + std::to_string(files) +
                                        " files compared, " + std::to_string(differ) + " differ" +
                                        (first_diff.empty() ? "" : " (first: " + first_diff + ")")};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoi(argv[i]));
  aml::set_log_sink([](const std::string&) {});

  const std::vector<Criterion> all = {
      {1, "autodiff vs finite differences", autodiff},
      {2, "incline dynamics oracle", dynamics},
      {3, "analytic-domain recovery", analytic_recovery},
      {4, "syzygy dependence detection", syzygy_dependence},
      {5, "incline generalization and phase arrows", incline_generalization},
      {6, "friction and drag presets", presets},
      {7, "transfer directional claims", transfer},
      {8, "metric identities", metric_identities},
      {9, "CLI reproducibility", reproducibility},
  };
  int failed = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!v.pass) ++failed;
    std::cout << "criterion " << c.id << ": " << (v.pass ? "PASS" : "FAIL") << "  " << c.name << "  [" << v.detail
              << "] (" << fmt(secs) << " s)" << std::endl;
  }
  return failed ? 1 : 0;
}
