#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "flexest/grid_io.hpp"
#include "flexest/grid_model.hpp"
#include "oracles.hpp"

using namespace flexest;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("flexest_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void copy_bundle(const fs::path& from, const fs::path& to) {
  for (const auto& e : fs::directory_iterator(from)) fs::copy_file(e.path(), to / e.path().filename());
}

void replace_in(const fs::path& file, const std::string& from, const std::string& to) {
  std::ifstream is(file);
  std::stringstream ss;
  ss << is.rdbuf();
  std::string s = ss.str();
  const auto pos = s.find(from);
  ASSERT_NE(pos, std::string::npos);
  s.replace(pos, from.size(), to);
  std::ofstream os(file);
  os << s;
}

std::string load_error(const fs::path& dir) {
  try {
    (void)load_grid(dir);
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(GridIo, FourBusFixtureCounts) {
  const auto net = load_grid(oracle::fixture("4bus"));
  EXPECT_EQ(net.buses.size(), 4u);
  EXPECT_EQ(net.lines.size(), 3u);
  EXPECT_EQ(net.transformers.size(), 1u);
  EXPECT_EQ(net.loads.size(), 2u);
  EXPECT_EQ(net.ders.size(), 2u);
  EXPECT_EQ(net.controllable_ders().size(), 1u);
  EXPECT_EQ(net.ext_grid.bus, 0);
  EXPECT_TRUE(net.transformers[0].is_interface);
}

TEST(GridIo, AllFixturesValidate) {
  for (const char* f : {"2bus", "4bus", "30bus", "100bus"}) {
    const auto net = load_grid(oracle::fixture(f));
    EXPECT_NO_THROW(validate(net)) << f;
    EXPECT_FALSE(load_profiles(oracle::fixture(f) + "/profiles.csv").empty()) << f;
  }
}

TEST(GridIo, RoundTripIdentity) {
  for (const char* f : {"4bus", "30bus", "100bus"}) {
    const auto net = load_grid(oracle::fixture(f));
    const auto dir = scratch_dir(std::string("rt_") + f);
    save_grid(net, dir);
    EXPECT_EQ(load_grid(dir), net) << f;
    const auto prof = load_profiles(oracle::fixture(f) + "/profiles.csv");
    save_profiles(prof, dir / "profiles.csv");
    EXPECT_EQ(load_profiles(dir / "profiles.csv"), prof);
  }
}

TEST(GridIo, DanglingLoadNamesRow) {
  const auto dir = scratch_dir("dangling");
  copy_bundle(oracle::fixture("4bus"), dir);
  replace_in(dir / "load.csv", "3,10,3", "7,10,3");
  const auto msg = load_error(dir);
  EXPECT_NE(msg.find("load.csv:3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("missing bus 7"), std::string::npos) << msg;
}

TEST(GridIo, UnknownColumnAndNonNumericField) {
  auto dir = scratch_dir("badcol");
  copy_bundle(oracle::fixture("4bus"), dir);
  replace_in(dir / "load.csv", "bus,p_mw,q_mvar", "bus,p_mw,qq");
  EXPECT_NE(load_error(dir).find("unknown column 'qq'"), std::string::npos);

  dir = scratch_dir("nonnum");
  copy_bundle(oracle::fixture("4bus"), dir);
  replace_in(dir / "line.csv", "2.376", "2.3x6");
  const auto msg = load_error(dir);
  EXPECT_NE(msg.find("line.csv:2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("non-numeric"), std::string::npos) << msg;
}

TEST(GridIo, MissingTable) {
  const auto dir = scratch_dir("missing");
  copy_bundle(oracle::fixture("4bus"), dir);
  fs::remove(dir / "der.csv");
  EXPECT_NE(load_error(dir).find("missing table"), std::string::npos);
}

TEST(GridModel, YbusMatchesElementwiseOracle) {
  for (const char* f : {"2bus", "4bus", "30bus", "100bus"}) {
    auto net = load_grid(oracle::fixture(f));
    for (auto& t : net.transformers) t.tap_pos = std::min(t.tap_max, t.tap_pos + 2);
    const Eigen::MatrixXcd ours = Eigen::MatrixXcd(build_admittances(net).ybus);
    const auto ref = oracle::dense_ybus(net);
    EXPECT_LT((ours - ref).cwiseAbs().maxCoeff(), 1e-9 * ref.cwiseAbs().maxCoeff()) << f;
  }
}

TEST(GridModel, OutageEqualsOutOfService) {
  const auto net = load_grid(oracle::fixture("30bus"));
  auto off = net;
  off.lines[5].in_service = false;
  const Eigen::MatrixXcd a = Eigen::MatrixXcd(build_admittances(net, 5).ybus);
  const Eigen::MatrixXcd b = Eigen::MatrixXcd(build_admittances(off).ybus);
  EXPECT_EQ(a, b);
  EXPECT_LT((a - oracle::dense_ybus(net, 5)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(GridModel, ValidationRejectsBadData) {
  auto net = load_grid(oracle::fixture("4bus"));
  auto bad = net;
  bad.lines[0].to_bus = 9;
  EXPECT_THROW(validate(bad), ValidationError);
  bad = net;
  bad.buses[1].kind = BusKind::slack;
  EXPECT_THROW(validate(bad), ValidationError);
  bad = net;
  bad.transformers[0].tap_pos = bad.transformers[0].tap_max + 1;
  EXPECT_THROW(validate(bad), ValidationError);
  bad = net;
  bad.ders[0].p_set_mw = bad.ders[0].p_avail_mw + 1.0;
  EXPECT_THROW(validate(bad), ValidationError);
  bad = net;
  bad.transformers[0].is_interface = false;
  EXPECT_THROW(validate(bad), ValidationError);
  EXPECT_NO_THROW(validate(bad, {.require_interface = false}));
}

TEST(GridModel, CapabilityCurve) {
  Der d;
  d.p_inst_mw = 50.0;
  d.q_frac = 0.33;
  EXPECT_DOUBLE_EQ(der_q_limits(d, 50.0).second, 16.5);
  EXPECT_DOUBLE_EQ(der_q_limits(d, 10.0).second, 16.5);
  EXPECT_DOUBLE_EQ(der_q_limits(d, 5.0).second, 8.25);
  EXPECT_DOUBLE_EQ(der_q_limits(d, 0.0).second, 0.0);
  EXPECT_DOUBLE_EQ(der_q_limits(d, 5.0).first, -8.25);
  EXPECT_THROW(der_q_limits(d, 51.0), ValidationError);
}

TEST(GridModel, InjectionsAggregate) {
  const auto net = load_grid(oracle::fixture("30bus"));
  const auto inj = aggregate_injections(net);
  const auto ref = oracle::injections(net);
  for (Eigen::Index b = 0; b < ref.size(); ++b) {
    EXPECT_NEAR(inj.p[b], ref[b].real(), 1e-12);
    EXPECT_NEAR(inj.q[b], ref[b].imag(), 1e-12);
  }
}
