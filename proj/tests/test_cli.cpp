#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "aml/amltrain.hpp"
#include "aml/io.hpp"
#include "cli_runner.hpp"

namespace fs = std::filesystem;
using clitest::run;
using clitest::slurp;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("aml_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// gen -> train -> every eval -> transfer, all inside `cwd`. Returns the run
// directories in order.
std::vector<std::string> pipeline(const fs::path& cwd) {
  std::vector<std::string> dirs;
  auto step = [&](const std::string& args) {
    const auto r = run(cwd, args);
    EXPECT_EQ(r.code, 0) << args << "\n" << r.out;
    dirs.push_back(r.last_line());
    return r.last_line();
  };
  const auto data = step("gen incline --preset fig6-top --n 400 --seed 3");
  const auto rel = step("train --data " + data + " --mode syzygy --syzygy-attempts 0 --epochs 200 --seed 3");
  const auto rels = rel + "/relations.json";
  step("eval vanish --relations " + rels + " --data " + data);
  step("eval levelset --relations " + rels + " --data " + data + " --resolution 8");
  step("eval phase --relations " + rels + " --data " + data + " --preset fig6-top --grid 3");
  step("eval angles --relations " + rels + " --data " + data);
  step("transfer --relations " + rels + " --seeds 3 --epochs 2 --episodes 64");
  return dirs;
}

std::set<std::string> files_in(const fs::path& dir) {
  std::set<std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) out.insert(e.path().filename().string());
  return out;
}

}  // namespace

TEST(Cli, PipelineIsByteIdenticalOnRerun) {
  const auto a = fresh_dir("repro_a"), b = fresh_dir("repro_b");
  const auto da = pipeline(a), db = pipeline(b);
  ASSERT_EQ(da, db);
  std::size_t compared = 0;
  for (const auto& d : da) {
    const auto names = files_in(a / d);
    ASSERT_EQ(names, files_in(b / d)) << d;
    for (const auto& n : names) {
      EXPECT_EQ(slurp(a / d / n), slurp(b / d / n)) << d << "/" << n;
      ++compared;
    }
  }
  EXPECT_GE(compared, 20u);
}

TEST(Cli, RunDirectoriesHoldTheExpectedFiles) {
  const auto cwd = fresh_dir("files");
  const auto d = pipeline(cwd);
  ASSERT_EQ(d.size(), 7u);
  const std::vector<std::set<std::string>> expect = {
      {"config.json", "data.csv", "off.csv", "meta.json"},
      {"config.json", "curves.csv", "train_report.json", "relations.json"},
      {"config.json", "vanish.csv"},
      {"config.json", "levelset.csv", "levelset_g1.csv", "levelset_g2.csv", "levelset.json"},
      {"config.json", "phase_sim.csv", "phase_relations.csv", "phase.json"},
      {"config.json", "angles.csv", "angles.json"},
      {"config.json", "transfer.csv", "transfer.json"},
  };
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto have = files_in(cwd / d[i]);
    for (const auto& f : expect[i]) EXPECT_TRUE(have.count(f)) << d[i] << " lacks " << f;
  }
  const auto cfg = aml::read_json(cwd / d[1] / "config.json");
  EXPECT_EQ(cfg.at("command"), "train");
  EXPECT_EQ(cfg.at("run_id"), fs::path(d[1]).filename().string());
  EXPECT_EQ(slurp(cwd / d[3] / "levelset.csv").substr(0, 12), "p0,v0,p1,v1\n");
}

TEST(Cli, RelationsFileLoadsBack) {
  const auto cwd = fresh_dir("load");
  const auto data = run(cwd, "gen incline --preset fig6-top --n 600").last_line();
  const auto r = run(cwd, "train --data " + data + " --max-relations 1 --epochs 400");
  ASSERT_EQ(r.code, 0) << r.out;
  aml::set_log_sink([](const std::string&) {});
  const auto set = aml::load_relation_set(cwd / r.last_line() / "relations.json");
  EXPECT_EQ(set.size(), 1u);
  EXPECT_EQ(set.dim(), 4u);
  EXPECT_GE(set.relations[0].off_mean, 5.0 * set.relations[0].on_mean);
}

TEST(Cli, AmlOutOverridesOutFlag) {
  const auto cwd = fresh_dir("env");
  const auto r = run(cwd, "gen analytic --n 50 --out ignored", "AML_OUT=elsewhere");
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(r.last_line().rfind("elsewhere/", 0), 0u) << r.last_line();
  EXPECT_FALSE(fs::exists(cwd / "ignored"));
}

TEST(Cli, ExplicitRunId) {
  const auto cwd = fresh_dir("runid");
  const auto r = run(cwd, "gen analytic --n 50 --run-id mine");
  ASSERT_EQ(r.code, 0);
  EXPECT_TRUE(fs::exists(cwd / "runs" / "mine" / "data.csv"));
}

TEST(Cli, ExitCodes) {
  const auto cwd = fresh_dir("codes");
  EXPECT_EQ(run(cwd, "").code, 2);
  EXPECT_EQ(run(cwd, "gen analytic --n notanumber").code, 2);
  EXPECT_EQ(run(cwd, "train").code, 2);
  EXPECT_EQ(run(cwd, "gen incline --theta 2.0").code, 3);
  EXPECT_EQ(run(cwd, "gen analytic --p 1.5").code, 3);
  EXPECT_EQ(run(cwd, "train --data does/not/exist").code, 5);

  const auto an = run(cwd, "gen analytic --n 200").last_line();
  const auto in = run(cwd, "gen incline --n 600").last_line();
  const auto tr = run(cwd, "train --data " + in + " --max-relations 1 --epochs 400");
  ASSERT_EQ(tr.code, 0);
  const auto rels = tr.last_line() + "/relations.json";
  // 4-d relations on 3-d data
  EXPECT_EQ(run(cwd, "eval vanish --relations " + rels + " --data " + an).code, 3);
  EXPECT_EQ(run(cwd, "eval vanish --relations missing.json --data " + in).code, 5);
  // one relation is not enough for angles
  EXPECT_EQ(run(cwd, "eval angles --relations " + rels + " --data " + in).code, 3);
  // first relation cannot vanish in zero epochs against a strict ratio
  EXPECT_EQ(run(cwd, "train --data " + an + " --epochs 1 --stopping-ratio 1000").code, 4);
}

TEST(Cli, HelpExitsZero) {
  const auto cwd = fresh_dir("help");
  const auto r = run(cwd, "--help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("train"), std::string::npos);
}
