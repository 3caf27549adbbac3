#include <gtest/gtest.h>
#include <sys/wait.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "flexest/cli_io.hpp"
#include "flexest/grid_io.hpp"
#include "oracles.hpp"

using namespace flexest;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("flexest_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run(const std::string& args) {
  const std::string cmd = std::string(FLEXEST_CLI) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int line_count(const fs::path& p) {
  std::ifstream in(p);
  std::string l;
  int n = 0;
  while (std::getline(in, l)) ++n;
  return n;
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

TEST(Config, Defaults) {
  const auto c = parse_config(nlohmann::json::object());
  EXPECT_EQ(c.loss.w_v, 100.0);
  EXPECT_EQ(c.loss.w_lp, 1.0);
  EXPECT_EQ(c.loss.lp_max, 100.0);
  EXPECT_EQ(c.loss.prob_threshold, 0.10);
  EXPECT_EQ(c.stage1.learning_rate, 1e-3);
  EXPECT_EQ(c.annopf_hidden, 500);
  EXPECT_EQ(c.grid_n, 20);
  EXPECT_FALSE(c.vmin.has_value());
}

TEST(Config, OverridesAndRoundTrip) {
  const auto j = nlohmann::json::parse(R"({"seed": 9, "limits": {"vmin": 0.92, "lp_max": 90},
    "penalties": {"w_v": 50}, "estimation": {"n": 7}})");
  const auto c = parse_config(j);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(*c.vmin, 0.92);
  EXPECT_EQ(c.loss.lp_max, 90.0);
  EXPECT_EQ(c.loss.w_v, 50.0);
  EXPECT_EQ(c.grid_n, 7);
  const auto back = parse_config(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_NE(config_hash(c), config_hash(parse_config(nlohmann::json::object())));
}

TEST(Config, RejectsUnknownKeysAndWrongTypes) {
  EXPECT_THROW(parse_config(nlohmann::json::parse(R"({"sed": 1})")), ValidationError);
  EXPECT_THROW(parse_config(nlohmann::json::parse(R"({"penalties": {"wv": 1}})")), ValidationError);
  EXPECT_THROW(parse_config(nlohmann::json::parse(R"({"penalties": {"w_v": "big"}})")), ValidationError);
  EXPECT_THROW(parse_config(nlohmann::json::parse(R"({"estimation": {"n": 1}})")), ValidationError);
  try {
    parse_config(nlohmann::json::parse(R"({"limits": {"vmn": 0.9}})"));
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("vmn"), std::string::npos);
  }
}

TEST(Config, ApplyLimitsSkipsSlack) {
  auto net = load_grid(oracle::fixture("4bus"));
  RunConfig c;
  c.vmin = 0.93;
  const double slack_vmin = net.buses[net.ext_grid.bus].vmin_pu;
  apply_limits(net, c);
  for (std::size_t b = 0; b < net.buses.size(); ++b)
    EXPECT_EQ(net.buses[b].vmin_pu, static_cast<int>(b) == net.ext_grid.bus ? slack_vmin : 0.93);
}

TEST(Hashing, Fnv1aVectors) {
  EXPECT_EQ(hex(fnv1a("")), "cbf29ce484222325");
  EXPECT_EQ(hex(fnv1a("a")), "af63dc4c8601ec8c");
  EXPECT_EQ(grid_hash(oracle::fixture("4bus")), grid_hash(oracle::fixture("4bus")));
  EXPECT_NE(grid_hash(oracle::fixture("4bus")), grid_hash(oracle::fixture("30bus")));
}

TEST(Samples, CsvRoundTrip) {
  const auto net = load_grid(oracle::fixture("4bus"));
  SampleConfig sc;
  sc.n_req_per_step = 2;
  auto set = generate_samples(net, load_profiles(oracle::fixture("4bus") + "/profiles.csv"), sc);
  set.samples.resize(30);
  const auto path = scratch("samples") / "s.csv";
  save_samples(set, net, path);
  const auto back = load_samples(net, path);
  ASSERT_EQ(back.samples.size(), set.samples.size());
  for (std::size_t i = 0; i < back.samples.size(); ++i) EXPECT_EQ(back.samples[i], set.samples[i]) << i;
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch("codes");
  const std::string grid = "--grid " + oracle::fixture("4bus");
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("pf --grid " + (dir / "nope").string()), 1);
  EXPECT_EQ(run("--version"), 0);
  write_file(dir / "bad.json", R"({"penalties": {"wv": 1}})");
  EXPECT_EQ(run("pf " + grid + " --config " + (dir / "bad.json").string() + " --out " + dir.string()), 1);
  EXPECT_EQ(run("baseline " + grid + " --mode sideways --out " + dir.string()), 1);
  EXPECT_EQ(run("estimate-area " + grid + " --model " + (dir / "missing.mlp").string() + " --out " + dir.string()), 1);
}

TEST(Cli, PowerFlowWritesTablesAndManifest) {
  const auto dir = scratch("pf");
  ASSERT_EQ(run("pf --grid " + oracle::fixture("4bus") + " --out " + dir.string()), 0);
  EXPECT_EQ(line_count(dir / "pf_buses.csv"), 5);
  EXPECT_TRUE(fs::exists(dir / "pf_branches.csv"));
  const auto m = nlohmann::json::parse(slurp(dir / "manifest.json"));
  EXPECT_EQ(m["command"], "pf");
  EXPECT_EQ(m["config_hash"], config_hash(RunConfig{}));
  EXPECT_EQ(m["grid_hash"], grid_hash(oracle::fixture("4bus")));
}

TEST(Cli, PipelineIsSeedDeterministic) {
  const auto dir = scratch("pipe");
  const std::string grid = "--grid " + oracle::fixture("4bus");
  write_file(dir / "cfg.json", R"({"samples": {"n_req_per_step": 1},
    "training": {"stage1_epochs": 2, "stage2_epochs": 1, "batch_size": 16},
    "annopf": {"hidden": 8},
    "approximators": {"hidden": 8, "epochs": 3},
    "uncertainty": {"n_samples": 20},
    "estimation": {"n": 4}})");
  const std::string cfg = " --config " + (dir / "cfg.json").string();
  const auto a = dir / "a", b = dir / "b";
  ASSERT_EQ(run("gen-samples " + grid + cfg + " --seed 3 --out " + a.string()), 0);
  ASSERT_EQ(run("gen-samples " + grid + cfg + " --seed 3 --out " + b.string()), 0);
  EXPECT_EQ(slurp(a / "samples.csv"), slurp(b / "samples.csv"));
  const std::string samples = " --samples " + (a / "samples.csv").string();
  ASSERT_EQ(run("train-stage1 " + grid + cfg + samples + " --limit 20 --seed 3 --out " + a.string()), 0);
  ASSERT_EQ(run("train-stage1 " + grid + cfg + samples + " --limit 20 --seed 3 --out " + b.string()), 0);
  EXPECT_EQ(slurp(a / "stage1.mlp"), slurp(b / "stage1.mlp"));
  const std::string model = " --model " + (a / "stage1.mlp").string();
  ASSERT_EQ(run("train-approx " + grid + cfg + model + samples + " --limit 10 --out " + a.string()), 0);
  EXPECT_TRUE(fs::exists(a / "n1.mlp"));
  EXPECT_TRUE(fs::exists(a / "ppf.mlp"));
  const std::string approx = " --n1 " + (a / "n1.mlp").string() + " --ppf " + (a / "ppf.mlp").string();
  ASSERT_EQ(run("estimate-area " + grid + cfg + model + approx + " --out " + a.string()), 0);
  EXPECT_EQ(line_count(a / "area.csv"), 17);
  const auto summary = nlohmann::json::parse(slurp(a / "area.json"));
  EXPECT_EQ(summary["points"], 16);
  ASSERT_EQ(run("baseline " + grid + cfg + " --mode max-p --out " + a.string()), 0);
  EXPECT_TRUE(nlohmann::json::parse(slurp(a / "baseline.json")).contains("interface_p_mw"));
}
