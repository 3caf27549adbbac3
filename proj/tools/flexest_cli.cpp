// flexest command-line tool.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <functional>
#include <iostream>
#include <memory>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "flexest/cli_io.hpp"
#include "flexest/estimation.hpp"

namespace fs = std::filesystem;
using namespace flexest;
using nlohmann::json;

namespace {

// Sub-seeds derived from the run seed so each stage is independently reproducible.
struct Seeds {
  std::uint64_t base = 0;
  [[nodiscard]] std::uint64_t samples() const { return base; }
  [[nodiscard]] std::uint64_t init() const { return base + 1; }
  [[nodiscard]] std::uint64_t stage1() const { return base + 2; }
  [[nodiscard]] std::uint64_t stage2() const { return base + 3; }
  [[nodiscard]] std::uint64_t mc() const { return base + 4; }
  [[nodiscard]] std::uint64_t approx() const { return base + 5; }
  [[nodiscard]] std::uint64_t split() const { return base + 6; }
};

struct Common {
  std::string grid;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
};

struct Context {
  Network net;
  RunConfig cfg;
  Seeds seeds;
  fs::path out;
  Manifest manifest;

  void input(const std::string& path) { manifest.inputs[path] = file_hash(path); }

  fs::path output(const std::string& name) {
    const auto p = out / name;
    written.push_back(p);
    return p;
  }

  void finish() {
    for (const auto& p : written) manifest.outputs[p.filename().string()] = file_hash(p);
    manifest.write(out);
  }

  std::vector<fs::path> written;
};

Context open(const Common& c, const std::string& command, int argc, char** argv) {
  Context ctx;
  ctx.cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  if (c.seed) ctx.cfg.seed = *c.seed;
  ctx.net = load_grid(c.grid);
  apply_limits(ctx.net, ctx.cfg);
  ctx.seeds.base = ctx.cfg.seed;
  ctx.out = c.out;
  fs::create_directories(ctx.out);
  auto& m = ctx.manifest;
  m.command = command;
  m.argv.assign(argv, argv + argc);
  m.config = ctx.cfg.to_json();
  m.config_hash = config_hash(ctx.cfg);
  m.grid_hash = grid_hash(c.grid);
  m.seed = ctx.cfg.seed;
  if (!c.config.empty()) ctx.input(c.config);
  return ctx;
}

Profiles grid_profiles(const std::string& grid) {
  const auto p = fs::path(grid) / "profiles.csv";
  if (!fs::exists(p)) throw ValidationError(grid + ": this command needs profiles.csv");
  return load_profiles(p);
}

GridStatus status_for(const Context& ctx, const std::string& grid, std::optional<int> step) {
  if (!step) return status_of(ctx.net);
  const auto prof = grid_profiles(grid);
  if (*step < 0 || *step >= static_cast<int>(prof.size()))
    throw ValidationError("--step " + std::to_string(*step) + " outside the profile range 0.." +
                          std::to_string(prof.size() - 1));
  return profile_status(ctx.net, prof[static_cast<std::size_t>(*step)]);
}

Mlp load_model(Context& ctx, const std::string& path) {
  Mlp m = load_mlp(path);
  ctx.input(path);
  if (!m.config_hash.empty() && m.config_hash != ctx.manifest.config_hash)
    std::cerr << "warning: " << path << " was trained under config " << m.config_hash << ", running with "
              << ctx.manifest.config_hash << '\n';
  return m;
}

Approximator load_approx(Context& ctx, const std::string& path) {
  auto a = load_approximator(path);
  ctx.input(path);
  ctx.input(path + ".json");
  return a;
}

SampleSet samples_for(Context& ctx, const std::string& grid, const std::string& path) {
  if (!path.empty()) {
    ctx.input(path);
    return load_samples(ctx.net, path);
  }
  SampleConfig sc = ctx.cfg.samples;
  sc.seed = ctx.seeds.samples();
  return generate_samples(ctx.net, grid_profiles(grid), sc);
}

UncertaintySpec uncertainty(const Context& ctx) {
  UncertaintySpec s = ctx.cfg.uncertainty;
  s.seed = ctx.seeds.mc();
  return s;
}

GradientOptions gradient_options(const Context& ctx) {
  GradientOptions g;
  g.step = ctx.cfg.fd_step;
  return g;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

std::string fixed(double v, int prec) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

std::string branch_name(const Network& net, std::size_t row) {
  return row < net.lines.size() ? "line" + std::to_string(row) : "trafo" + std::to_string(row - net.lines.size());
}

std::function<void(const EpochStats&)> progress(const std::string& stage) {
  return [stage](const EpochStats& e) {
    std::cerr << stage << " epoch " << e.epoch << " loss " << e.loss << " objective " << e.objective << " l_v " << e.l_v
              << " l_lp " << e.l_lp << '\n';
  };
}

double ms_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t).count();
}

std::unique_ptr<ApproximatorScreen> make_screen(Context& ctx, const std::string& n1, const std::string& ppf,
                                                std::optional<Approximator>& a1, std::optional<Approximator>& a2) {
  if (n1.empty() != ppf.empty()) throw ValidationError("--n1 and --ppf must be given together");
  if (n1.empty()) return nullptr;
  a1 = load_approx(ctx, n1);
  a2 = load_approx(ctx, ppf);
  return std::make_unique<ApproximatorScreen>(*a1, *a2);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TSO-DSO PQ flexibility area estimation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  Common common;
  std::optional<int> step;
  std::string model_path, n1_path, ppf_path, samples_path, mode = "max-p";
  std::optional<int> grid_n;
  int limit = 0, baseline_points = 5;
  bool unpenalized = false;
  double rp = 0.5, rq = 0.5;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--grid", common.grid, "grid bundle directory")->required()->check(CLI::ExistingDirectory);
    sub->add_option("--config", common.config, "run configuration JSON")->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "run seed (overrides the config)");
    sub->add_option("--out", common.out, "output directory")->capture_default_str();
    return sub;
  };
  auto add_step = [&](CLI::App* sub) {
    sub->add_option("--step", step, "profile step to use as the grid status (default: bundle values)");
  };
  auto add_screen = [&](CLI::App* sub) {
    sub->add_option("--n1", n1_path, "N-1 approximator model")->check(CLI::ExistingFile);
    sub->add_option("--ppf", ppf_path, "PPF approximator model")->check(CLI::ExistingFile);
  };

  auto* pf = add_common(app.add_subcommand("pf", "single power flow"));
  add_step(pf);
  auto* n1 = add_common(app.add_subcommand("n1", "N-1 contingency analysis"));
  add_step(n1);
  auto* ppf = add_common(app.add_subcommand("ppf", "Monte-Carlo probabilistic power flow"));
  add_step(ppf);
  auto* gen = add_common(app.add_subcommand("gen-samples", "generate training samples from the profiles"));
  auto* s1 = add_common(app.add_subcommand("train-stage1", "train the ANN-OPF on hard constraints"));
  s1->add_option("--samples", samples_path, "samples CSV (default: generate)")->check(CLI::ExistingFile);
  s1->add_option("--limit", limit, "use only the first N samples");
  s1->add_flag("--unpenalized", unpenalized, "objective only, no constraint penalties");
  auto* ta = add_common(app.add_subcommand("train-approx", "build datasets and train the N-1 and PPF approximators"));
  ta->add_option("--model", model_path, "stage-1 model (required for on-sample datasets)")->check(CLI::ExistingFile);
  ta->add_option("--samples", samples_path, "samples CSV (default: generate)")->check(CLI::ExistingFile);
  ta->add_option("--limit", limit, "use only the first N samples");
  auto* s2 = add_common(app.add_subcommand("train-stage2", "continue training with soft-constraint screening"));
  s2->add_option("--model", model_path, "stage-1 model")->required()->check(CLI::ExistingFile);
  s2->add_option("--samples", samples_path, "samples CSV (default: generate)")->check(CLI::ExistingFile);
  s2->add_option("--limit", limit, "use only the first N samples");
  add_screen(s2);
  auto* ea = add_common(app.add_subcommand("estimate-area", "predict and classify the PQ area"));
  auto* va = add_common(app.add_subcommand("verify-area", "estimate the area and audit it with the exact oracles"));
  for (auto* sub : {ea, va}) {
    sub->add_option("--model", model_path, "ANN-OPF model")->required()->check(CLI::ExistingFile);
    sub->add_option("--n", grid_n, "requirement grid size per axis");
    add_screen(sub);
    add_step(sub);
  }
  auto* bl = add_common(app.add_subcommand("baseline", "gradient-based OPF for one operating point"));
  bl->add_option("--mode", mode, "max-p, max-q, min-q or requirement")->capture_default_str();
  bl->add_option("--rp", rp, "requirement r_p in [0,1]")->check(CLI::Range(0.0, 1.0));
  bl->add_option("--rq", rq, "requirement r_q in [0,1]")->check(CLI::Range(0.0, 1.0));
  add_step(bl);
  auto* bench = add_common(app.add_subcommand("bench", "time the area sweep against the baseline"));
  bench->add_option("--model", model_path, "ANN-OPF model (default: untrained)")->check(CLI::ExistingFile);
  bench->add_option("--n", grid_n, "requirement grid size per axis");
  bench->add_option("--baseline-points", baseline_points, "baseline solves to time")->check(CLI::PositiveNumber);
  add_screen(bench);
  add_step(bench);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    std::cerr << sub->help();
    return 1;
  }

  const auto* sub = app.get_subcommands().front();
  const std::string cmd = sub->get_name();
  try {
    Context ctx = open(common, cmd, argc, argv);
    auto& cfg = ctx.cfg;

    if (cmd == "pf") {
      const Network n = apply_status(ctx.net, status_for(ctx, common.grid, step));
      const auto r = solve(make_scenario(n));
      std::cout << (r.converged ? "converged" : "NOT converged") << " in " << r.iterations
                << " iterations, max mismatch " << r.max_mismatch << " pu\n\n";
      std::cout << "bus      vm_pu   va_deg\n";
      std::ofstream bus_csv(ctx.output("pf_buses.csv"));
      bus_csv << "bus,vm_pu,va_deg\n";
      for (Eigen::Index b = 0; b < r.v.size(); ++b) {
        const double va = std::arg(r.v[b]) * 180.0 / std::numbers::pi;
        std::cout << std::setw(3) << b << "  " << fixed(std::abs(r.v[b]), 5) << "  " << std::setw(7) << fixed(va, 3)
                  << '\n';
        bus_csv << b << ',' << detail::fmt(std::abs(r.v[b])) << ',' << detail::fmt(va) << '\n';
      }
      std::cout << "\nbranch    from  to   p_from_mw  q_from_mvar  loading_%\n";
      std::ofstream br_csv(ctx.output("pf_branches.csv"));
      br_csv << "branch,from_bus,to_bus,p_from_mw,q_from_mvar,loading_percent\n";
      const auto adm = build_admittances(n);
      for (Eigen::Index k = 0; k < r.lp.size(); ++k) {
        const auto name = branch_name(n, static_cast<std::size_t>(k));
        const double p = r.s_f[k].real() * n.base_mva, q = r.s_f[k].imag() * n.base_mva;
        std::cout << std::left << std::setw(9) << name << std::right << std::setw(5) << adm.branch_from[k] << std::setw(4)
                  << adm.branch_to[k] << std::setw(12) << fixed(p, 3) << std::setw(13) << fixed(q, 3) << std::setw(11)
                  << fixed(r.lp[k], 2) << '\n';
        br_csv << name << ',' << adm.branch_from[k] << ',' << adm.branch_to[k] << ',' << detail::fmt(p) << ','
               << detail::fmt(q) << ',' << detail::fmt(r.lp[k]) << '\n';
      }
      std::cout << "\ninterface P " << fixed(r.interface_p_mw, 3) << " MW, Q " << fixed(r.interface_q_mvar, 3)
                << " Mvar\n";
      bus_csv.close();
      br_csv.close();
      ctx.finish();
      if (!r.converged) {
        std::cerr << "error: power flow did not converge: " << r.diagnostic << '\n';
        return 2;
      }
      return 0;
    }

    if (cmd == "n1") {
      const Network n = apply_status(ctx.net, status_for(ctx, common.grid, step));
      const auto rep = n1_analysis(n, make_scenario(n), cfg.loss.lp_max);
      std::cout << "cases " << rep.cases.size() << ", non-converged " << rep.non_converged_cases << ", violation "
                << (rep.any_violation ? "yes" : "no") << "\n\nline   lp_n0    lp_n1  worst_case\n";
      json lines = json::array();
      for (std::size_t j = 0; j < rep.line_ids.size(); ++j) {
        const auto k = static_cast<Eigen::Index>(j);
        std::cout << std::setw(4) << rep.line_ids[j] << std::setw(8) << fixed(rep.lp_n0[k], 2) << std::setw(9)
                  << fixed(rep.lp_n1[k], 2) << std::setw(12) << rep.worst_case[j] << '\n';
        lines.push_back({{"line", rep.line_ids[j]},
                         {"lp_n0", rep.lp_n0[k]},
                         {"lp_n1", std::isfinite(rep.lp_n1[k]) ? json(rep.lp_n1[k]) : json("inf")},
                         {"worst_case", rep.worst_case[j]}});
      }
      write_json(ctx.output("n1.json"), {{"cases", rep.cases},
                                         {"non_converged_cases", rep.non_converged_cases},
                                         {"any_violation", rep.any_violation},
                                         {"lp_max", cfg.loss.lp_max},
                                         {"lines", lines}});
      ctx.finish();
      return 0;
    }

    if (cmd == "ppf") {
      const Network n = apply_status(ctx.net, status_for(ctx, common.grid, step));
      const auto rep = run_mcs(n, uncertainty(ctx));
      std::cout << "samples " << rep.n_samples << ", non-converged " << rep.non_converged << ", aggregate probability "
                << fixed(rep.aggregate_prob, 4) << "\n\nbus  viol_prob  mean_v   std_v\n";
      json buses = json::array();
      for (Eigen::Index b = 0; b < rep.viol_prob.size(); ++b) {
        std::cout << std::setw(3) << b << std::setw(11) << fixed(rep.viol_prob[b], 4) << std::setw(9)
                  << fixed(rep.mean_v[b], 5) << std::setw(8) << fixed(rep.std_v[b], 5) << '\n';
        buses.push_back({{"bus", b}, {"viol_prob", rep.viol_prob[b]}, {"mean_v", rep.mean_v[b]}, {"std_v", rep.std_v[b]}});
      }
      write_json(ctx.output("ppf.json"), {{"n_samples", rep.n_samples},
                                          {"non_converged", rep.non_converged},
                                          {"aggregate_prob", rep.aggregate_prob},
                                          {"seed", ctx.seeds.mc()},
                                          {"buses", buses}});
      ctx.finish();
      return 0;
    }

    if (cmd == "gen-samples") {
      const auto set = samples_for(ctx, common.grid, "");
      save_samples(set, ctx.net, ctx.output("samples.csv"));
      std::cout << "samples " << set.samples.size() << ", dropped " << set.dropped << '\n';
      ctx.finish();
      return 0;
    }

    auto take = [&](SampleSet set) {
      if (limit > 0 && static_cast<std::size_t>(limit) < set.samples.size()) set.samples.resize(static_cast<std::size_t>(limit));
      if (set.samples.empty()) throw ValidationError("no usable samples");
      return set.samples;
    };

    if (cmd == "train-stage1") {
      const auto samples = take(samples_for(ctx, common.grid, samples_path));
      Mlp m = make_annopf(ctx.net, samples, cfg.annopf_hidden, cfg.annopf_layers, ctx.seeds.init());
      AugLossConfig loss = cfg.loss;
      loss.penalize = !unpenalized;
      TrainConfig tc = cfg.stage1;
      tc.seed = ctx.seeds.stage1();
      const auto log = train_stage1(m, ctx.net, samples, loss, tc, gradient_options(ctx), progress("stage1"));
      m.config_hash = ctx.manifest.config_hash;
      const auto name = unpenalized ? "unpenalized.mlp" : "stage1.mlp";
      save_mlp(m, ctx.output(name).string());
      const auto tel = ctx.output("telemetry.csv");
      fs::remove(tel);
      write_telemetry(log, tel.string(), unpenalized ? "unpenalized" : "stage1");
      std::cout << "trained on " << samples.size() << " samples, final loss " << log.back().loss << ", wrote "
                << (ctx.out / name).string() << '\n';
      ctx.finish();
      return 0;
    }

    if (cmd == "train-approx") {
      const auto samples = take(samples_for(ctx, common.grid, samples_path));
      std::optional<Mlp> m;
      if (!model_path.empty()) m = load_model(ctx, model_path);
      DatasetConfig dc;
      dc.mode = cfg.dataset_mode;
      dc.uncertainty = uncertainty(ctx);
      dc.n1_feature = cfg.n1_feature;
      dc.ppf_feature = cfg.ppf_feature;
      dc.lp_max = cfg.loss.lp_max;
      const auto data = build_datasets(ctx.net, samples, m ? &*m : nullptr, dc);
      save_dataset(data.n1, ctx.output("n1_dataset.csv"));
      save_dataset(data.ppf, ctx.output("ppf_dataset.csv"));
      ctx.output("n1_dataset.csv.json");
      ctx.output("ppf_dataset.csv.json");
      ApproxConfig ac = cfg.approx;
      ac.train.seed = ctx.seeds.approx();
      json metrics;
      for (const auto* d : {&data.n1, &data.ppf}) {
        const auto [train, test] = split(*d, cfg.test_fraction, ctx.seeds.split());
        Approximator a = d->kind == ApproxKind::n1 ? train_n1(train, ac) : train_ppf(train, ac);
        a.model.config_hash = ctx.manifest.config_hash;
        const double thr = d->kind == ApproxKind::n1 ? cfg.loss.lp_max : cfg.loss.prob_threshold;
        const auto ev = evaluate(a, test, thr);
        const auto name = to_string(d->kind);
        save_approximator(a, ctx.output(name + ".mlp"));
        ctx.output(name + ".mlp.json");
        metrics[name] = {{"train", train.size()},
                         {"test", test.size()},
                         {"dropped", d->dropped},
                         {"feature", to_string(d->feature)},
                         {"mae", ev.mae},
                         {"class_success", ev.class_success}};
        std::cout << name << ": " << train.size() << " train / " << test.size() << " test, MAE " << ev.mae
                  << ", classification success " << ev.class_success << '\n';
      }
      metrics["mode"] = data.n1.mode;
      write_json(ctx.output("approx_metrics.json"), metrics);
      ctx.finish();
      return 0;
    }

    if (cmd == "train-stage2") {
      const auto samples = take(samples_for(ctx, common.grid, samples_path));
      Mlp m = load_model(ctx, model_path);
      std::optional<Approximator> a1, a2;
      auto screen = make_screen(ctx, n1_path, ppf_path, a1, a2);
      if (!screen) throw ValidationError("train-stage2 needs --n1 and --ppf");
      TrainConfig tc = cfg.stage2;
      tc.seed = ctx.seeds.stage2();
      const auto log = train_stage2(m, ctx.net, samples, *screen, cfg.loss, tc, gradient_options(ctx), progress("stage2"));
      m.config_hash = ctx.manifest.config_hash;
      save_mlp(m, ctx.output("stage2.mlp").string());
      const auto tel = ctx.output("telemetry.csv");
      fs::remove(tel);
      write_telemetry(log, tel.string(), "stage2");
      std::cout << "final loss " << log.back().loss << ", wrote " << (ctx.out / "stage2.mlp").string() << '\n';
      ctx.finish();
      return 0;
    }

    if (cmd == "estimate-area" || cmd == "verify-area") {
      const Mlp m = load_model(ctx, model_path);
      std::optional<Approximator> a1, a2;
      const auto screen = make_screen(ctx, n1_path, ppf_path, a1, a2);
      const auto status = status_for(ctx, common.grid, step);
      AreaOptions ao;
      ao.n = grid_n.value_or(cfg.grid_n);
      const auto area = predict_area(ctx.net, status, m, screen.get(), cfg.loss, ao);
      write_area_csv(area, ctx.output("area.csv").string());
      json summary = area_summary(area);
      summary["seed"] = ctx.cfg.seed;
      summary["models"] = ctx.manifest.inputs;
      summary["screened"] = screen != nullptr;
      if (cmd == "verify-area") {
        const auto rep = verify_area(area, ctx.net, status, uncertainty(ctx), cfg.loss);
        summary["verification"] = {{"feasible", rep.feasible},
                                   {"false_feasible", rep.false_feasible},
                                   {"false_feasible_rate", rep.false_feasible_rate},
                                   {"soft", rep.soft},
                                   {"false_infeasible", rep.false_infeasible},
                                   {"false_infeasible_rate", rep.false_infeasible_rate},
                                   {"truly_insecure", rep.truly_insecure}};
        std::cout << "false-feasible " << rep.false_feasible << "/" << rep.feasible << ", false-infeasible "
                  << rep.false_infeasible << "/" << rep.soft << '\n';
      }
      write_json(ctx.output("area.json"), summary);
      std::cout << "points " << area.points.size() << ": feasible " << area.count(PointClass::feasible) << ", hard "
                << area.count(PointClass::hard_violation) << ", soft " << area.count(PointClass::soft_violation)
                << ", non-convergent " << area.count(PointClass::non_convergent) << "; prediction "
                << fixed(area.prediction_ms, 2) << " ms, postprocessing " << fixed(area.postprocessing_ms, 2) << " ms\n";
      ctx.finish();
      return 0;
    }

    if (cmd == "baseline") {
      const auto obj = parse_objective_mode(mode);
      const Network n = apply_status(ctx.net, status_for(ctx, common.grid, step));
      const auto bounds = flex_bounds(n);
      if (!bounds) throw NumericalError("flexibility bound probes do not converge");
      const auto problem = make_problem(n, nullptr, resolve_requirement(rp, rq, *bounds), *bounds);
      BaselineOptions bo;
      bo.iterations = cfg.baseline_iterations;
      bo.gradient = gradient_options(ctx);
      const auto t0 = std::chrono::steady_clock::now();
      const auto res = baseline_optimize(problem, cfg.loss, obj, bo);
      const double ms = ms_since(t0);
      json ders = json::array();
      for (std::size_t k = 0; k < problem.ctrl.size(); ++k) {
        const auto& d = n.ders[static_cast<std::size_t>(problem.ctrl[k])];
        const auto i = static_cast<Eigen::Index>(k);
        ders.push_back({{"der", problem.ctrl[k]},
                        {"bus", d.bus},
                        {"p_avail_mw", d.p_avail_mw},
                        {"p_mw", res.setpoints.p_mw[i]},
                        {"q_mvar", res.setpoints.q_mvar[i]}});
      }
      const json out{{"mode", mode},
                     {"r_p", rp},
                     {"r_q", rq},
                     {"feasible", res.feasible},
                     {"iterations", res.iterations},
                     {"interface_p_mw", res.result.interface_p_mw},
                     {"interface_q_mvar", res.result.interface_q_mvar},
                     {"objective", res.loss.objective},
                     {"l_v", res.loss.l_v},
                     {"l_lp", res.loss.l_lp},
                     {"time_ms", ms},
                     {"ders", ders}};
      write_json(ctx.output("baseline.json"), out);
      std::cout << out.dump(2) << '\n';
      ctx.finish();
      if (!res.feasible) {
        std::cerr << "error: no hard-feasible setpoint found" << (res.diagnostic.empty() ? "" : ": " + res.diagnostic)
                  << '\n';
        return 2;
      }
      return 0;
    }

    if (cmd == "bench") {
      const auto status = status_for(ctx, common.grid, step);
      Mlp m;
      bool trained = !model_path.empty();
      if (trained) {
        m = load_model(ctx, model_path);
      } else {
        // untrained stand-in with the configured architecture
        Sample s;
        s.status = status;
        m = make_annopf(ctx.net, {s}, cfg.annopf_hidden, cfg.annopf_layers, ctx.seeds.init());
      }
      std::optional<Approximator> a1, a2;
      const auto screen = make_screen(ctx, n1_path, ppf_path, a1, a2);
      AreaOptions ao;
      ao.n = grid_n.value_or(cfg.grid_n);
      const auto t0 = std::chrono::steady_clock::now();
      const auto area = predict_area(ctx.net, status, m, screen.get(), cfg.loss, ao);
      const double total = ms_since(t0);
      const double points = static_cast<double>(area.points.size());

      const Network n = apply_status(ctx.net, status);
      BaselineOptions bo;
      bo.iterations = cfg.baseline_iterations;
      bo.gradient = gradient_options(ctx);
      bo.gradient.threads = 1;
      const auto grid = requirement_grid(ao.n);
      const auto adm = std::make_shared<const AdmittanceSet>(build_admittances(n));
      double baseline_ms = 0.0;
      int solved = 0;
      for (int k = 0; k < baseline_points; ++k) {
        const auto& g = grid[static_cast<std::size_t>(k) * grid.size() / static_cast<std::size_t>(baseline_points)];
        const auto problem = make_problem(n, adm, resolve_requirement(g.first, g.second, area.bounds), area.bounds);
        const auto t1 = std::chrono::steady_clock::now();
        try {
          (void)baseline_optimize(problem, cfg.loss, ObjectiveMode::requirement, bo);
          ++solved;
        } catch (const NumericalError&) {
        }
        baseline_ms += ms_since(t1);
      }
      const double per_point = area.prediction_ms / points;
      const double base_per_point = baseline_ms / baseline_points;
      const json out{{"n", ao.n},
                     {"points", area.points.size()},
                     {"trained_model", trained},
                     {"screened", screen != nullptr},
                     {"prediction_ms", area.prediction_ms},
                     {"postprocessing_ms", area.postprocessing_ms},
                     {"total_ms", total},
                     {"per_point_prediction_ms", per_point},
                     {"baseline_points", baseline_points},
                     {"baseline_converged", solved},
                     {"baseline_per_point_ms", base_per_point},
                     {"speedup", per_point > 0.0 ? base_per_point / per_point : 0.0},
                     {"threads", default_parallelism()}};
      write_json(ctx.output("bench.json"), out);
      std::cout << out.dump(2) << '\n';
      ctx.finish();
      return 0;
    }
    throw ValidationError("unhandled subcommand " + cmd);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
