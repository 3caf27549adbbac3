#pragma once

// CSV grid bundles: bus.csv, line.csv, trafo.csv, load.csv, der.csv,
// extgrid.csv, optional gen.csv and profiles.csv.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "flexest/errors.hpp"
#include "flexest/grid_model.hpp"

namespace flexest {

/// One time step of normalized scaling factors.
struct ProfileStep {
  double load_p_scale = 1.0;
  double load_q_scale = 1.0;
  double der_avail_scale = 1.0;  // fraction of installed DER capacity

  bool operator==(const ProfileStep&) const = default;
};

using Profiles = std::vector<ProfileStep>;

namespace csv {

inline const std::vector<std::string> kBusHeader{"id", "vn_kv", "vmin_pu", "vmax_pu", "kind"};
inline const std::vector<std::string> kLineHeader{"id",         "from_bus", "to_bus",   "r_ohm",
                                                  "x_ohm",      "b_total_us", "i_max_ka", "in_service"};
inline const std::vector<std::string> kTrafoHeader{"id",        "hv_bus",  "lv_bus",  "sn_mva",
                                                   "vk_percent", "vkr_percent", "tap_pos", "tap_min",
                                                   "tap_max",   "tap_step_percent", "is_interface"};
inline const std::vector<std::string> kLoadHeader{"bus", "p_mw", "q_mvar"};
inline const std::vector<std::string> kGenHeader{"bus", "p_mw", "q_mvar"};
inline const std::vector<std::string> kDerHeader{"bus",    "p_inst_mw", "p_avail_mw", "controllable",
                                                 "q_frac", "p_set_mw",  "q_set_mvar"};
inline const std::vector<std::string> kExtGridHeader{"bus", "v_pu", "base_mva"};
inline const std::vector<std::string> kProfileHeader{"step", "load_p_scale", "load_q_scale", "der_avail_scale"};

struct Row {
  std::vector<std::string> cells;
  std::size_t line_no = 0;
};

struct Table {
  std::string file;
  std::vector<Row> rows;

  [[nodiscard]] std::string where(const Row& r) const { return file + ":" + std::to_string(r.line_no); }
};

inline std::vector<std::string> split(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    auto cell = line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
    while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t' || cell.back() == '\r')) cell.remove_suffix(1);
    out.emplace_back(cell);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline Table read_table(const std::filesystem::path& path, const std::vector<std::string>& header) {
  std::ifstream in(path);
  if (!in) throw ValidationError("missing table: " + path.string());
  Table t{path.filename().string(), {}};
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto cells = split(line);
    if (!have_header) {
      if (line_no == 1 && cells.front().rfind("\xEF\xBB\xBF", 0) == 0) cells.front().erase(0, 3);
      for (const auto& c : cells)
        if (std::find(header.begin(), header.end(), c) == header.end())
          throw ValidationError(t.file + ":" + std::to_string(line_no) + ": unknown column '" + c + "'");
      if (cells != header)
        throw ValidationError(t.file + ":" + std::to_string(line_no) + ": header must be exactly " +
                              [&] {
                                std::string s;
                                for (const auto& h : header) s += (s.empty() ? "" : ",") + h;
                                return s;
                              }());
      have_header = true;
      continue;
    }
    if (cells.size() != header.size())
      throw ValidationError(t.file + ":" + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                            " fields, got " + std::to_string(cells.size()));
    t.rows.push_back({std::move(cells), line_no});
  }
  if (!have_header) throw ValidationError(t.file + ": empty table");
  return t;
}

inline double to_double(const Table& t, const Row& r, std::size_t col) {
  const auto& s = r.cells[col];
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
    throw ValidationError(t.where(r) + ": non-numeric field '" + s + "'");
  return v;
}

inline int to_int(const Table& t, const Row& r, std::size_t col) {
  const auto& s = r.cells[col];
  int v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
    throw ValidationError(t.where(r) + ": non-integer field '" + s + "'");
  return v;
}

inline bool to_bool(const Table& t, const Row& r, std::size_t col) {
  const auto& s = r.cells[col];
  if (s == "1" || s == "true" || s == "True") return true;
  if (s == "0" || s == "false" || s == "False") return false;
  throw ValidationError(t.where(r) + ": non-boolean field '" + s + "'");
}

inline std::string fmt(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline void write_table(const std::filesystem::path& path, const std::vector<std::string>& header,
                        const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << '\n';
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << '\n';
  }
}

}  // namespace csv

/// Reads a grid bundle. Bus ids in the files are mapped to dense indices in
/// file order; every other table references buses by their file id.
inline Network load_grid(const std::filesystem::path& dir) {
  using namespace csv;
  if (!std::filesystem::is_directory(dir)) throw ValidationError("grid bundle not found: " + dir.string());
  Network net;

  const auto bus_t = read_table(dir / "bus.csv", kBusHeader);
  std::map<int, int> bus_index;
  for (const auto& r : bus_t.rows) {
    const int file_id = to_int(bus_t, r, 0);
    if (!bus_index.emplace(file_id, static_cast<int>(net.buses.size())).second)
      throw ValidationError(bus_t.where(r) + ": duplicate bus id " + std::to_string(file_id));
    Bus b;
    b.id = static_cast<int>(net.buses.size());
    b.vn_kv = to_double(bus_t, r, 1);
    b.vmin_pu = to_double(bus_t, r, 2);
    b.vmax_pu = to_double(bus_t, r, 3);
    const auto& kind = r.cells[4];
    if (kind == "slack") {
      b.kind = BusKind::slack;
    } else if (kind == "pq") {
      b.kind = BusKind::pq;
    } else {
      throw ValidationError(bus_t.where(r) + ": bus kind must be slack or pq, got '" + kind + "'");
    }
    net.buses.push_back(b);
  }
  auto bus_ref = [&](const Table& t, const Row& r, std::size_t col) {
    const int file_id = to_int(t, r, col);
    const auto it = bus_index.find(file_id);
    if (it == bus_index.end())
      throw ValidationError(t.where(r) + ": references missing bus " + std::to_string(file_id));
    return it->second;
  };

  const auto line_t = read_table(dir / "line.csv", kLineHeader);
  for (const auto& r : line_t.rows) {
    Line l;
    l.id = static_cast<int>(net.lines.size());
    l.from_bus = bus_ref(line_t, r, 1);
    l.to_bus = bus_ref(line_t, r, 2);
    l.r_ohm = to_double(line_t, r, 3);
    l.x_ohm = to_double(line_t, r, 4);
    l.b_total_us = to_double(line_t, r, 5);
    l.i_max_ka = to_double(line_t, r, 6);
    l.in_service = to_bool(line_t, r, 7);
    net.lines.push_back(l);
  }

  const auto trafo_t = read_table(dir / "trafo.csv", kTrafoHeader);
  for (const auto& r : trafo_t.rows) {
    Transformer t;
    t.id = static_cast<int>(net.transformers.size());
    t.hv_bus = bus_ref(trafo_t, r, 1);
    t.lv_bus = bus_ref(trafo_t, r, 2);
    t.sn_mva = to_double(trafo_t, r, 3);
    t.vk_percent = to_double(trafo_t, r, 4);
    t.vkr_percent = to_double(trafo_t, r, 5);
    t.tap_pos = to_int(trafo_t, r, 6);
    t.tap_min = to_int(trafo_t, r, 7);
    t.tap_max = to_int(trafo_t, r, 8);
    t.tap_step_percent = to_double(trafo_t, r, 9);
    t.is_interface = to_bool(trafo_t, r, 10);
    net.transformers.push_back(t);
  }

  const auto load_t = read_table(dir / "load.csv", kLoadHeader);
  for (const auto& r : load_t.rows)
    net.loads.push_back({bus_ref(load_t, r, 0), to_double(load_t, r, 1), to_double(load_t, r, 2)});

  if (std::filesystem::exists(dir / "gen.csv")) {
    const auto gen_t = read_table(dir / "gen.csv", kGenHeader);
    for (const auto& r : gen_t.rows)
      net.generators.push_back({bus_ref(gen_t, r, 0), to_double(gen_t, r, 1), to_double(gen_t, r, 2)});
  }

  const auto der_t = read_table(dir / "der.csv", kDerHeader);
  for (const auto& r : der_t.rows) {
    Der d;
    d.bus = bus_ref(der_t, r, 0);
    d.p_inst_mw = to_double(der_t, r, 1);
    d.p_avail_mw = to_double(der_t, r, 2);
    d.controllable = to_bool(der_t, r, 3);
    d.q_frac = to_double(der_t, r, 4);
    d.p_set_mw = to_double(der_t, r, 5);
    d.q_set_mvar = to_double(der_t, r, 6);
    net.ders.push_back(d);
  }

  const auto ext_t = read_table(dir / "extgrid.csv", kExtGridHeader);
  if (ext_t.rows.size() != 1) throw ValidationError("extgrid.csv must contain exactly one row");
  net.ext_grid.bus = bus_ref(ext_t, ext_t.rows[0], 0);
  net.ext_grid.v_pu = to_double(ext_t, ext_t.rows[0], 1);
  net.base_mva = to_double(ext_t, ext_t.rows[0], 2);

  validate(net);
  return net;
}

inline void save_grid(const Network& net, const std::filesystem::path& dir) {
  using namespace csv;
  std::filesystem::create_directories(dir);
  auto i = [](auto v) { return std::to_string(v); };
  auto b = [](bool v) { return std::string(v ? "1" : "0"); };

  std::vector<std::vector<std::string>> rows;
  for (const auto& x : net.buses)
    rows.push_back({i(x.id), fmt(x.vn_kv), fmt(x.vmin_pu), fmt(x.vmax_pu), x.kind == BusKind::slack ? "slack" : "pq"});
  write_table(dir / "bus.csv", kBusHeader, rows);

  rows.clear();
  for (const auto& x : net.lines)
    rows.push_back({i(x.id), i(x.from_bus), i(x.to_bus), fmt(x.r_ohm), fmt(x.x_ohm), fmt(x.b_total_us),
                    fmt(x.i_max_ka), b(x.in_service)});
  write_table(dir / "line.csv", kLineHeader, rows);

  rows.clear();
  for (const auto& x : net.transformers)
    rows.push_back({i(x.id), i(x.hv_bus), i(x.lv_bus), fmt(x.sn_mva), fmt(x.vk_percent), fmt(x.vkr_percent),
                    i(x.tap_pos), i(x.tap_min), i(x.tap_max), fmt(x.tap_step_percent), b(x.is_interface)});
  write_table(dir / "trafo.csv", kTrafoHeader, rows);

  rows.clear();
  for (const auto& x : net.loads) rows.push_back({i(x.bus), fmt(x.p_mw), fmt(x.q_mvar)});
  write_table(dir / "load.csv", kLoadHeader, rows);

  if (!net.generators.empty()) {
    rows.clear();
    for (const auto& x : net.generators) rows.push_back({i(x.bus), fmt(x.p_mw), fmt(x.q_mvar)});
    write_table(dir / "gen.csv", kGenHeader, rows);
  } else {
    std::filesystem::remove(dir / "gen.csv");
  }

  rows.clear();
  for (const auto& x : net.ders)
    rows.push_back({i(x.bus), fmt(x.p_inst_mw), fmt(x.p_avail_mw), b(x.controllable), fmt(x.q_frac), fmt(x.p_set_mw),
                    fmt(x.q_set_mvar)});
  write_table(dir / "der.csv", kDerHeader, rows);

  write_table(dir / "extgrid.csv", kExtGridHeader,
              {{i(net.ext_grid.bus), fmt(net.ext_grid.v_pu), fmt(net.base_mva)}});
}

inline Profiles load_profiles(const std::filesystem::path& file) {
  using namespace csv;
  const auto t = read_table(file, kProfileHeader);
  Profiles p;
  for (const auto& r : t.rows) {
    if (to_int(t, r, 0) != static_cast<int>(p.size()))
      throw ValidationError(t.where(r) + ": steps must be numbered 0, 1, 2, ...");
    ProfileStep s{to_double(t, r, 1), to_double(t, r, 2), to_double(t, r, 3)};
    if (s.der_avail_scale < 0.0 || s.der_avail_scale > 1.0)
      throw ValidationError(t.where(r) + ": der_avail_scale must lie in [0, 1]");
    p.push_back(s);
  }
  if (p.empty()) throw ValidationError(file.string() + ": no profile steps");
  return p;
}

inline void save_profiles(const Profiles& p, const std::filesystem::path& file) {
  using namespace csv;
  std::vector<std::vector<std::string>> rows;
  for (std::size_t k = 0; k < p.size(); ++k)
    rows.push_back({std::to_string(k), fmt(p[k].load_p_scale), fmt(p[k].load_q_scale), fmt(p[k].der_avail_scale)});
  write_table(file, kProfileHeader, rows);
}

}  // namespace flexest
