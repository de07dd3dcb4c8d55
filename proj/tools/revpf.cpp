// revpf: simulate panels, estimate production functions, and diagnose what
// revenue data can and cannot identify.
//
// Exit codes: 0 success, 2 validation failure, 3 solver/estimation failure,
// 4 I/O. REVPF_THREADS sets the worker count (default: hardware threads).

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "revpf/revpf.hpp"

namespace fs = std::filesystem;
using namespace revpf;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::string scan;
  std::string grid;
  std::string out;
  std::string panel;
};

unsigned threads_from_env() {
  if (const char* env = std::getenv("REVPF_THREADS")) {
    unsigned n = 0;
    const std::string_view s(env);
    if (!detail::parse_number(s, n) || n < 1)
      throw ArgumentError("REVPF_THREADS must be a positive integer, got '" + std::string(s) + "'");
    return n;
  }
  return detail::default_threads();
}

RunConfig load(const Options& o) {
  RunConfig c;
  if (!o.config.empty()) c = load_config(o.config);
  c.gmm.threads = threads_from_env();
  if (o.seed) {
    c.sim.seed = *o.seed;
    c.seed_given = true;
    c.gmm.seed = *o.seed;
  }
  if (!o.mode.empty()) c.mode = parse_mode(o.mode);
  if (!o.scan.empty()) {
    c.scan.clear();
    const auto& names = Technology::param_names(c.sim.tech.kind());
    for (auto item : detail::split_fields(o.scan)) {
      if (std::find(names.begin(), names.end(), item) == names.end())
        throw ArgumentError("--scan: unknown parameter '" + std::string(item) + "' for " + name_of(c.sim.tech.kind()));
      c.scan.emplace_back(item);
    }
  }
  if (!o.grid.empty()) {
    parse_grid(o.grid);
    c.grid = o.grid;
  }
  if (!o.panel.empty()) c.panel = o.panel;
  return c;
}

fs::path output_path(const Options& o, const RunConfig& c, const char* fallback) {
  return o.out.empty() ? fs::path(c.output_dir) / fallback : fs::path(o.out);
}

Panel input_panel(const RunConfig& c) {
  if (c.panel.empty()) throw ArgumentError("no input panel (pass PANEL or set [input] panel in the config)");
  return read_panel_csv(fs::path(c.panel));
}

std::map<std::string, std::string> provenance(const char* command, const RunConfig& c) {
  std::map<std::string, std::string> p{{"command", command},
                                       {"config_sha256", config_hash(c)},
                                       {"version", version()}};
  if (c.seed_given) p["seed"] = std::to_string(c.sim.seed);
  p["estimator_seed"] = std::to_string(c.gmm.seed);
  if (!c.panel.empty()) p["panel_sha256"] = sha256_hex(read_text_file(c.panel));
  return p;
}

int cmd_simulate(const Options& o) {
  const RunConfig c = load(o);
  if (!c.seed_given) throw ArgumentError("simulate needs a seed ([simulate] seed or --seed)");
  const Panel panel = simulate_panel(c.sim, c.gmm.threads);
  const fs::path out = output_path(o, c, "panel.csv");
  write_panel_csv(out, panel);

  auto prov = provenance("simulate", c);
  prov["panel_sha256"] = sha256_hex(read_text_file(out));
  json doc = prov;
  doc["config"] = to_ini(c);
  write_json_file(fs::path(out.string() + ".provenance.json"), doc);

  const auto rep = verify_panel(panel, c.sim);
  std::cout << "wrote " << out.string() << " (" << panel.size() << " rows, " << rep.violations()
            << " assumption violations)\n";
  return 0;
}

int cmd_estimate(const Options& o) {
  const RunConfig c = load(o);
  const Panel panel = input_panel(c);
  if (c.mode == Mode::Quantity && !panel.has_Q)
    throw ArgumentError("quantities unobserved: the panel has no Q column, so quantity mode is unavailable; "
                        "use --mode revenue");
  auto res = estimate(panel, estimate_spec(c));
  res.provenance = provenance("estimate", c);
  const fs::path out = output_path(o, c, "estimate.json");
  write_json_file(out, to_json(res));

  std::cout << name_of(res.mode) << " " << name_of(res.kind) << " estimate:";
  for (std::size_t j = 0; j < res.estimate.size(); ++j)
    std::cout << " " << res.param_names[j] << "=" << detail::format_double(res.estimate[j]);
  std::cout << "\nobjective " << detail::format_double(res.objective) << ", " << res.minima.size()
            << " distinct minima\n";
  if (!res.non_identified_axes.empty()) {
    std::cout << "not identified:";
    for (const auto& a : res.non_identified_axes) std::cout << " " << a;
    std::cout << "\n";
  }
  for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << "wrote " << out.string() << "\n";
  if (!res.converged) {
    std::cerr << "error: no local search converged\n";
    return 3;
  }
  return 0;
}

int cmd_diagnose(const Options& o) {
  const RunConfig c = load(o);
  const Panel panel = input_panel(c);
  auto rep = diagnose(panel, diagnose_spec(c));
  rep.provenance = provenance("diagnose", c);
  const fs::path out = output_path(o, c, "report.json");
  write_json_file(out, to_json(rep));

  if (!c.scan.empty() || !c.grid.empty()) {
    for (const auto& p : rep.profiles) {
      fs::path csv = out;
      csv.replace_filename(out.stem().string() + "_profile_" + p.param + ".csv");
      write_profile_csv(csv, p);
      std::cout << "wrote " << csv.string() << " (" << p.grid.size() << " rows)\n";
    }
  }
  for (const auto& [k, v] : rep.verdicts) std::cout << k << ": " << name_of(v) << "\n";
  for (const auto& n : rep.notes) std::cerr << "note: " << n << "\n";
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

int cmd_verify(const Options& o) {
  const RunConfig c = load(o);
  const Panel panel = input_panel(c);
  const auto rep = verify_panel(panel, c.sim);
  const fs::path out = output_path(o, c, "verify.json");
  write_json_file(out, to_json(rep));
  for (const auto& chk : rep.checks) {
    std::cout << chk.name << ": ";
    if (chk.skipped) std::cout << "skipped (" << chk.note << ")\n";
    else std::cout << chk.violations << " violations, max error " << detail::format_double(chk.max_error) << "\n";
  }
  if (!rep.ok()) {
    std::cout << "FAIL: " << rep.flagged_rows.size() << " rows flagged:";
    const std::size_t shown = std::min<std::size_t>(rep.flagged_rows.size(), 20);
    for (std::size_t i = 0; i < shown; ++i) std::cout << " " << rep.flagged_rows[i] + 1;
    if (shown < rep.flagged_rows.size()) std::cout << " ...";
    std::cout << " (1-based data rows)\n";
  } else {
    std::cout << "PASS\n";
  }
  std::cout << "wrote " << out.string() << "\n";
  return rep.ok() ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Production-function simulation, estimation and identification diagnostics"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(version()));
  Options o;

  auto add_common = [&](CLI::App* sub, bool takes_panel) {
    sub->add_option("--config", o.config, "INI configuration file")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "master seed (overrides the config)");
    sub->add_option("--out", o.out, "output file");
    if (takes_panel) sub->add_option("panel", o.panel, "panel CSV (or [input] panel in the config)");
  };

  auto* sim = app.add_subcommand("simulate", "simulate a firm panel");
  add_common(sim, false);
  auto* est = app.add_subcommand("estimate", "GMM estimation in quantity or revenue mode");
  add_common(est, true);
  est->add_option("--mode", o.mode, "quantity or revenue")->check(CLI::IsMember({"quantity", "revenue"}));
  auto* dia = app.add_subcommand("diagnose", "identification report for revenue data");
  add_common(dia, true);
  dia->add_option("--scan", o.scan, "parameters to profile, comma separated");
  dia->add_option("--grid", o.grid, "profile grid lo:hi:n");
  auto* ver = app.add_subcommand("verify", "check a panel against the model assumptions");
  add_common(ver, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (sim->parsed()) return cmd_simulate(o);
    if (est->parsed()) return cmd_estimate(o);
    if (dia->parsed()) return cmd_diagnose(o);
    return cmd_verify(o);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
