// Writes the bundled synthetic grid fixtures (CSV bundles + profiles).
//
//   make_fixtures <output-dir>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <random>
#include <utility>
#include <vector>

#include "flexest/grid_io.hpp"
#include "flexest/grid_model.hpp"

namespace {

using namespace flexest;

// 110 kV overhead line, 243-AL1/39 class.
constexpr double kROhmPerKm = 0.1188;
constexpr double kXOhmPerKm = 0.39;
constexpr double kBUsPerKm = 2.985;

struct Builder {
  Network net;

  int bus(double vn_kv, bool slack = false) {
    Bus b;
    b.id = static_cast<int>(net.buses.size());
    b.vn_kv = vn_kv;
    b.kind = slack ? BusKind::slack : BusKind::pq;
    net.buses.push_back(b);
    if (slack) net.ext_grid.bus = b.id;
    return b.id;
  }

  void line(int f, int t, double km, double i_max_ka = 0.645) {
    Line l;
    l.id = static_cast<int>(net.lines.size());
    l.from_bus = f;
    l.to_bus = t;
    auto round6 = [](double v) { return std::round(v * 1e6) / 1e6; };
    l.r_ohm = round6(kROhmPerKm * km);
    l.x_ohm = round6(kXOhmPerKm * km);
    l.b_total_us = round6(kBUsPerKm * km);
    l.i_max_ka = i_max_ka;
    net.lines.push_back(l);
  }

  void trafo(int hv, int lv, double sn_mva, bool interface) {
    Transformer t;
    t.id = static_cast<int>(net.transformers.size());
    t.hv_bus = hv;
    t.lv_bus = lv;
    t.sn_mva = sn_mva;
    t.vk_percent = 12.0;
    t.vkr_percent = 0.25;
    t.tap_min = -9;
    t.tap_max = 9;
    t.tap_step_percent = 1.5;
    t.is_interface = interface;
    net.transformers.push_back(t);
  }

  void load(int bus, double p_mw, double q_mvar) { net.loads.push_back({bus, p_mw, q_mvar}); }

  void der(int bus, double p_inst, bool controllable, double avail_frac = 0.5) {
    Der d;
    d.bus = bus;
    d.p_inst_mw = p_inst;
    d.p_avail_mw = avail_frac * p_inst;
    d.controllable = controllable;
    d.q_frac = 0.33;
    d.p_set_mw = d.p_avail_mw;
    d.q_set_mvar = 0.0;
    net.ders.push_back(d);
  }
};

Profiles make_profiles(int steps, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  Profiles p;
  double wind = 0.5;
  for (int k = 0; k < steps; ++k) {
    const double phase = 2.0 * M_PI * k / 24.0;
    ProfileStep s;
    s.load_p_scale = 0.75 + 0.2 * std::sin(phase - 1.2) + 0.03 * noise(rng);
    s.load_q_scale = s.load_p_scale * (0.95 + 0.05 * noise(rng));
    wind = std::clamp(wind + 0.12 * noise(rng), 0.05, 1.0);
    s.der_avail_scale = std::round(wind * 1e4) / 1e4;
    s.load_p_scale = std::round(s.load_p_scale * 1e4) / 1e4;
    s.load_q_scale = std::round(s.load_q_scale * 1e4) / 1e4;
    p.push_back(s);
  }
  return p;
}

Network two_bus() {
  Builder b;
  const int ehv = b.bus(380.0, true);
  const int hv = b.bus(110.0);
  b.trafo(ehv, hv, 100.0, true);
  b.load(hv, 20.0, 6.0);
  b.der(hv, 30.0, true, 0.5);
  return b.net;
}

Network four_bus() {
  Builder b;
  const int ehv = b.bus(380.0, true);
  const int s = b.bus(110.0);
  const int a = b.bus(110.0);
  const int c = b.bus(110.0);
  b.trafo(ehv, s, 200.0, true);
  b.line(s, a, 20.0);
  b.line(a, c, 15.0);
  b.line(s, c, 25.0);
  b.load(a, 30.0, 10.0);
  b.load(c, 10.0, 3.0);
  b.der(c, 60.0, true, 0.75);
  b.der(a, 10.0, false, 0.8);
  return b.net;
}

// Meshed 110 kV grid fed by two parallel interface transformers, with radial
// spurs hosting wind parks. Ratings of the cross ties and ring D make them
// N-1 critical at full wind; the 110 kV band is 0.95-1.05 pu.
Network thirty_bus() {
  Builder b;
  const int ehv = b.bus(380.0, true);
  for (int i = 1; i < 30; ++i) {
    b.bus(110.0);
    b.net.buses.back().vmin_pu = 0.95;
    b.net.buses.back().vmax_pu = 1.05;
  }
  b.trafo(ehv, 1, 250.0, true);
  b.trafo(ehv, 1, 250.0, true);

  const std::vector<std::tuple<int, int, double, double>> lines{
      // ring A
      {1, 2, 12, 0.645}, {2, 3, 10, 0.645}, {3, 4, 14, 0.645}, {4, 5, 9, 0.645}, {5, 6, 11, 0.645}, {6, 1, 13, 0.645},
      // ring B
      {1, 7, 15, 0.645}, {7, 8, 10, 0.645}, {8, 9, 12, 0.645}, {9, 10, 9, 0.645}, {10, 11, 14, 0.645}, {11, 1, 16, 0.645},
      // cross ties
      {3, 12, 11, 0.42}, {12, 13, 8, 0.42}, {13, 14, 10, 0.42}, {14, 9, 13, 0.42},
      // ring D
      {5, 15, 12, 0.34}, {15, 16, 10, 0.34}, {16, 17, 9, 0.34}, {17, 18, 11, 0.34}, {18, 6, 14, 0.34},
      // ring E
      {11, 19, 10, 0.5}, {19, 20, 12, 0.5}, {20, 21, 9, 0.5}, {21, 10, 11, 0.5},
      // spurs
      {14, 22, 8, 0.4}, {22, 23, 10, 0.4}, {17, 24, 7, 0.3}, {20, 25, 9, 0.4}, {25, 26, 8, 0.4},
      {8, 27, 6, 0.3}, {2, 28, 7, 0.3}, {12, 29, 6, 0.3},
      // second circuit on the substation feeder
      {1, 7, 15, 0.645}};
  for (const auto& [f, t, km, imax] : lines) b.line(f, t, km, imax);

  std::mt19937_64 rng(30);
  std::uniform_real_distribution<double> load_p(4.0, 14.0);
  for (int i = 2; i < 30; ++i) {
    if (i == 23 || i == 26) continue;
    const double p = std::round(load_p(rng) * 10.0) / 10.0;
    b.load(i, p, std::round(p * 3.3) / 10.0);
  }
  // controllable wind parks
  b.der(23, 70.0, true);
  b.der(26, 60.0, true);
  b.der(16, 50.0, true);
  b.der(13, 45.0, true);
  b.der(24, 35.0, true);
  // aggregated MV infeed
  std::uniform_real_distribution<double> mv(4.0, 16.0);
  for (int i : {2, 3, 4, 6, 7, 9, 10, 11, 15, 18, 19, 21, 27, 28, 29}) b.der(i, std::round(mv(rng)), false);
  return b.net;
}

// 100-bus meshed grid: one substation with three parallel interface
// transformers, 22 controllable wind parks, 79 aggregated MV DERs.
Network hundred_bus() {
  Builder b;
  const int ehv = b.bus(380.0, true);
  for (int i = 1; i < 100; ++i) b.bus(110.0);
  for (int k = 0; k < 3; ++k) b.trafo(ehv, 1, 300.0, true);

  std::mt19937_64 rng(100);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::pair<double, double>> xy(100, {0.5, 0.5});
  for (int i = 2; i < 100; ++i) xy[i] = {u(rng), u(rng)};
  auto dist_km = [&](int i, int j) {
    const double dx = xy[i].first - xy[j].first, dy = xy[i].second - xy[j].second;
    return std::max(3.0, 35.0 * std::sqrt(dx * dx + dy * dy));
  };
  // Prim MST over the HV buses, then mesh with nearest non-adjacent pairs.
  std::vector<bool> in_tree(100, false);
  std::vector<std::pair<int, int>> edges;
  in_tree[1] = true;
  for (int added = 1; added < 99; ++added) {
    double best = 1e18;
    std::pair<int, int> e{-1, -1};
    for (int i = 1; i < 100; ++i) {
      if (!in_tree[i]) continue;
      for (int j = 1; j < 100; ++j) {
        if (in_tree[j]) continue;
        const double d = dist_km(i, j);
        if (d < best) best = d, e = {i, j};
      }
    }
    in_tree[e.second] = true;
    edges.push_back(e);
  }
  std::vector<int> degree(100, 0);
  for (auto [i, j] : edges) ++degree[i], ++degree[j];
  int extra = 0;
  for (int i = 2; i < 100 && extra < 40; i += 2) {
    if (degree[i] > 2) continue;
    double best = 1e18;
    int partner = -1;
    for (int j = 1; j < 100; ++j) {
      if (j == i) continue;
      bool adjacent = false;
      for (auto [a, c] : edges) adjacent = adjacent || (a == i && c == j) || (a == j && c == i);
      if (adjacent) continue;
      const double d = dist_km(i, j);
      if (d < best) best = d, partner = j;
    }
    edges.emplace_back(i, partner);
    ++degree[i];
    ++degree[partner];
    ++extra;
  }
  // extra substation feeders to the nearest buses
  std::vector<int> order;
  for (int j = 2; j < 100; ++j) order.push_back(j);
  std::sort(order.begin(), order.end(), [&](int a, int c) { return dist_km(1, a) < dist_km(1, c); });
  for (int k = 0; k < 12; ++k) {
    const int j = order[k];
    bool adjacent = false;
    for (auto [a, c] : edges) adjacent = adjacent || (a == 1 && c == j) || (a == j && c == 1);
    if (!adjacent) edges.emplace_back(1, j);
  }
  for (auto [i, j] : edges) b.line(i, j, std::round(dist_km(i, j) * 10.0) / 10.0, 0.645);

  std::uniform_real_distribution<double> load_p(1.5, 6.0);
  for (int i = 2; i < 100; ++i) {
    if (i % 5 == 0) continue;
    const double p = std::round(load_p(rng) * 10.0) / 10.0;
    b.load(i, p, std::round(p * 3.3) / 10.0);
  }
  for (int k = 0; k < 22; ++k) b.der(4 + 4 * k, 18.0, true);
  for (int k = 0; k < 79; ++k) b.der(2 + (k * 37) % 98, std::round(1.0 + 4.0 * u(rng)), false);
  return b.net;
}

void emit(const std::filesystem::path& dir, const Network& net, const Profiles& profiles) {
  validate(net);
  save_grid(net, dir);
  save_profiles(profiles, dir / "profiles.csv");
  std::cout << dir.string() << ": " << net.buses.size() << " buses, " << net.lines.size() << " lines, "
            << net.transformers.size() << " transformers, " << net.ders.size() << " DERs\n";
}

}  // namespace

int main(int argc, char** argv) {
  const std::filesystem::path out = argc > 1 ? argv[1] : "fixtures";
  try {
    emit(out / "2bus", two_bus(), make_profiles(24, 2));
    emit(out / "4bus", four_bus(), make_profiles(24, 4));
    emit(out / "30bus", thirty_bus(), make_profiles(48, 30));
    emit(out / "100bus", hundred_bus(), make_profiles(48, 100));
  } catch (const std::exception& e) {
    std::cerr << "make_fixtures: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
