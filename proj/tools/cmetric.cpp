// cmetric: build and certify a contraction metric for a periodic orbit.
//
//   cmetric <subcommand> --config <path> [--out <dir>] [--seed <u64>]
//
// Exit codes: 0 success, 1 certification or invariant failures,
// 2 configuration error, 3 pipeline error (stage named on stderr).

#include "cmetric/pipeline/stages.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <iostream>

using namespace cmetric;
using namespace cmetric::pipeline;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCertFail = 1;
constexpr int kExitConfig = 2;
constexpr int kExitPipeline = 3;

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

RunConfig load(const Options& o) {
  RunConfig c = load_config(o.config);
  if (!o.out.empty()) c.out_dir = o.out;
  if (o.seed) c.seed = *o.seed;
  return c;
}

class Timer {
 public:
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - last_).count();
    last_ = now;
    return s;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

std::string params_text(const RunConfig& c) {
  std::string s;
  for (const auto& [k, v] : c.params) s += (s.empty() ? "" : ", ") + k + "=" + fmt(v);
  return s.empty() ? "" : " (" + s + ")";
}

std::string seconds_text(double s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", s);
  return buf;
}

std::string multipliers_text(const std::vector<cplx>& zs) {
  std::string s;
  for (const auto& z : zs) {
    s += s.empty() ? "" : ", ";
    s += z.imag() == 0.0 ? fmt(z.real()) : fmt(z.real()) + (z.imag() < 0 ? " - " : " + ") + fmt(std::abs(z.imag())) + "i";
  }
  return s;
}

struct SummaryInput {
  const RunConfig* config = nullptr;
  const OrbitStage* orbit = nullptr;
  const MetricStack* stack = nullptr;
  const OrbitMetricCheck* check = nullptr;
  const Certification* cert = nullptr;
  std::vector<std::pair<std::string, double>> runtimes;
};

std::string summary_text(const SummaryInput& in) {
  const RunConfig& c = *in.config;
  const auto& gm = in.stack->gm;
  const auto& cert = *in.cert;
  std::ostringstream s;
  s << "system: " << c.system << params_text(c) << "\n";
  s << "dimension: " << in.orbit->po.system.n << "\n";
  s << "period T: " << fmt(in.orbit->po.T) << "\n";
  s << "multipliers: " << multipliers_text(in.orbit->spectrum.multipliers) << "\n";
  s << "nu: " << fmt(gm.nu) << "\n";
  s << "epsilon: " << fmt(gm.epsilon) << "\n";
  s << "eps_prime: " << fmt(in.stack->om->dec.jordan.eps_prime) << "\n";
  s << "iota_U: " << fmt(in.stack->chart->U_level) << "\n";
  s << "iota: " << fmt(gm.iota) << "\n";
  s << "bound -nu+epsilon: " << fmt(cert.bound) << "\n";
  s << "tol_cert: " << fmt(cert.tol_cert) << "\n";
  if (in.check) {
    s << "orbit-metric suite: " << (in.check->pass() ? "PASS" : "FAIL")
      << " (max imaginary residue " << fmt(in.check->max_imag_residue) << ", max L_M0 + nu - epsilon "
      << fmt(in.check->max_rate_excess) << " over " << in.check->phases << " phases)\n";
  }
  s << "grid points: " << cert.rows.size() + cert.rejected.size() << " (rejected equilibria: " << cert.rejected.size()
    << ")\n";
  s << "PASS: " << cert.count(kPass) << "\n";
  s << "FAIL: " << cert.count(kFail) << "\n";
  s << "SKIPPED-outside-horizon: " << cert.count(kSkipped) << "\n";
  const auto mm = cert.min_margin();
  s << "min margin: " << (mm ? fmt(*mm) : std::string("none")) << "\n";
  s << "runtimes [s]:";
  for (const auto& [name, secs] : in.runtimes) s << " " << name << "=" << seconds_text(secs);
  s << "\n";
  for (const auto& x : cert.rejected) {
    s << "diagnostic: grid point (";
    for (Eigen::Index i = 0; i < x.size(); ++i) s << (i ? ", " : "") << fmt(x(i));
    s << ") is an equilibrium (f = 0) and was rejected\n";
  }
  for (const auto& r : cert.rows) {
    if (r.note.empty()) continue;
    s << "diagnostic: " << r.status << " at (";
    for (Eigen::Index i = 0; i < r.x.size(); ++i) s << (i ? ", " : "") << fmt(r.x(i));
    s << "): " << r.note << "\n";
  }
  return s.str();
}

int finish_certification(const RunConfig& c, const SummaryInput& in) {
  const auto& cert = *in.cert;
  write_text(c.out_dir / "cert.csv", cert_csv(cert, in.orbit->po.system.n));
  write_text(c.out_dir / "summary.txt", summary_text(in));
  for (const auto& x : cert.rejected) {
    std::cerr << "diagnostic: rejected equilibrium grid point";
    for (Eigen::Index i = 0; i < x.size(); ++i) std::cerr << ' ' << fmt(x(i));
    std::cerr << "\n";
  }
  const auto mm = cert.min_margin();
  std::cout << "certified " << cert.rows.size() << " points: " << cert.count(kPass) << " PASS, " << cert.count(kFail)
            << " FAIL, " << cert.count(kSkipped) << " " << kSkipped << "; min margin "
            << (mm ? fmt(*mm) : std::string("none")) << "\n";
  const bool suites = in.check == nullptr || in.check->pass();
  return cert.count(kFail) == 0 && suites ? kExitOk : kExitCertFail;
}

// ---- linear-periodic input ---------------------------------------------

int run_linear(const RunConfig& c) {
  Timer timer;
  const auto path = in_stage("floquet", [&] { return linear_path(c); });
  const Mat phiT = path.phi(path.T);
  const double nu = linear_nu(phiT, path.T);
  const double eps = c.resolve_epsilon(nu);
  const auto dec = in_stage("floquet", [&] { return floquet_decomposition(path, eps, floquet_options(c)); });
  const auto multipliers = eigenvalues_of(phiT);
  json fj = floquet_json(dec, multipliers);
  double worst = 0.0;
  for (int k = 0; k < c.samples; ++k) {
    worst = std::max(worst, metric_product(dec, path.T * k / c.samples).imag().cwiseAbs().maxCoeff());
  }
  fj["realness"] = {{"phases", c.samples}, {"max_imag", worst}, {"tolerance", 1e-9}};
  write_json(c.out_dir / "floquet.json", fj);
  std::ostringstream s;
  s << "system: linear-periodic\nperiod T: " << fmt(path.T) << "\nmultipliers: " << multipliers_text(multipliers)
    << "\nnu: " << fmt(nu) << "\nepsilon: " << fmt(eps) << "\neps_prime: " << fmt(dec.jordan.eps_prime)
    << "\nroundtrip residual: " << fmt(dec.roundtrip_residual) << "\nperiodicity residual: "
    << fmt(dec.periodicity_residual) << "\nrealness: max |Im S^-T P^-* P^-1 S^-1| over " << c.samples
    << " phases = " << fmt(worst) << "\ncertification: not applicable (no orbit)\nruntimes [s]: floquet="
    << seconds_text(timer.lap()) << "\n";
  write_text(c.out_dir / "summary.txt", s.str());
  std::cout << "floquet: multipliers " << multipliers_text(multipliers) << "; max imaginary residue " << fmt(worst)
            << "\n";
  return worst <= 1e-9 ? kExitOk : kExitCertFail;
}

// ---- subcommands ---------------------------------------------------------

void require_orbit_system(const RunConfig& c) {
  if (c.is_linear()) {
    throw Error(ErrorKind::ConfigError, "linear-periodic input supports only the 'floquet' and 'run' subcommands");
  }
}

int cmd_run(const RunConfig& c) {
  if (c.is_linear()) return run_linear(c);
  Timer timer;
  SummaryInput in;
  in.config = &c;
  const auto orbit = in_stage("orbit", [&] { return find_orbit_stage(c); });
  in.orbit = &orbit;
  write_json(c.out_dir / "orbit.json", orbit_json(c, orbit));
  in.runtimes.emplace_back("orbit", timer.lap());

  const double eps = c.resolve_epsilon(orbit.spectrum.nu);
  const auto om = in_stage("floquet", [&] {
    return std::make_shared<const OrbitMetric>(make_orbit_metric(orbit.po, eps, floquet_options(c)));
  });
  write_json(c.out_dir / "floquet.json", floquet_json(om->dec, orbit.spectrum.multipliers));
  in.runtimes.emplace_back("floquet", timer.lap());

  const auto check = in_stage("orbit-metric", [&] { return check_orbit_metric(*om, c.samples); });
  in.check = &check;
  write_json(c.out_dir / "orbit_metric.json", orbit_metric_json(check, *om));
  in.runtimes.emplace_back("orbit-metric", timer.lap());

  const auto stack = build_chart_and_metric(c, om);
  in.stack = &stack;
  write_json(c.out_dir / "chart.json", chart_json(*stack.chart, stack.gm));
  in.runtimes.emplace_back("chart", timer.lap());

  const auto cert = in_stage("certify", [&] { return certify_grid(stack.gm, grid_points(c.grid), c.tol_cert); });
  in.cert = &cert;
  in.runtimes.emplace_back("certify", timer.lap());
  return finish_certification(c, in);
}

int cmd_find_orbit(const RunConfig& c) {
  require_orbit_system(c);
  const auto orbit = in_stage("orbit", [&] { return find_orbit_stage(c); });
  write_json(c.out_dir / "orbit.json", orbit_json(c, orbit));
  std::cout << "orbit: T = " << fmt(orbit.po.T) << ", nu = " << fmt(orbit.spectrum.nu) << ", multipliers "
            << multipliers_text(orbit.spectrum.multipliers) << "\n";
  return kExitOk;
}

OrbitStage stored_orbit(const RunConfig& c) {
  return in_stage("orbit", [&] { return orbit_from_json(c, read_json(c.out_dir / "orbit.json")); });
}

std::shared_ptr<const OrbitMetric> stored_metric(const RunConfig& c, const OrbitStage& orbit) {
  const double eps = c.resolve_epsilon(orbit.spectrum.nu);
  return in_stage("floquet", [&] {
    return std::make_shared<const OrbitMetric>(make_orbit_metric(orbit.po, eps, floquet_options(c)));
  });
}

int cmd_floquet(const RunConfig& c) {
  if (c.is_linear()) return run_linear(c);
  const auto orbit = stored_orbit(c);
  const auto om = stored_metric(c, orbit);
  write_json(c.out_dir / "floquet.json", floquet_json(om->dec, orbit.spectrum.multipliers));
  std::cout << "floquet: multipliers " << multipliers_text(orbit.spectrum.multipliers) << "; roundtrip residual "
            << fmt(om->dec.roundtrip_residual) << ", periodicity residual " << fmt(om->dec.periodicity_residual)
            << "\n";
  return kExitOk;
}

int cmd_verify_orbit_metric(const RunConfig& c) {
  require_orbit_system(c);
  const auto orbit = stored_orbit(c);
  const auto om = stored_metric(c, orbit);
  const auto check = in_stage("orbit-metric", [&] { return check_orbit_metric(*om, c.samples); });
  write_json(c.out_dir / "orbit_metric.json", orbit_metric_json(check, *om));
  std::cout << "orbit-metric: max imaginary residue " << fmt(check.max_imag_residue) << ", max L_M0 + nu - epsilon "
            << fmt(check.max_rate_excess) << " over " << check.phases << " phases: "
            << (check.pass() ? "PASS" : "FAIL") << "\n";
  return check.pass() ? kExitOk : kExitCertFail;
}

MetricStack stored_stack(const RunConfig& c, std::shared_ptr<const OrbitMetric> om) {
  const json cj = in_stage("chart", [&] { return read_json(c.out_dir / "chart.json"); });
  const double stored_eps = cj.at("epsilon").get<double>();
  if (std::abs(stored_eps - om->dec.epsilon) > 1e-12 * std::max(1.0, stored_eps)) {
    throw StageError("chart", "stored chart was built for epsilon " + fmt(stored_eps) + ", configuration gives " +
                                  fmt(om->dec.epsilon));
  }
  return build_chart_and_metric(c, std::move(om), cj.at("iota_U").get<double>(), cj.at("iota").get<double>());
}

int cmd_certify(const RunConfig& c) {
  require_orbit_system(c);
  Timer timer;
  SummaryInput in;
  in.config = &c;
  const auto orbit = stored_orbit(c);
  in.orbit = &orbit;
  const auto stack = stored_stack(c, stored_metric(c, orbit));
  in.stack = &stack;
  in.runtimes.emplace_back("setup", timer.lap());
  const auto cert = in_stage("certify", [&] { return certify_grid(stack.gm, grid_points(c.grid), c.tol_cert); });
  in.cert = &cert;
  in.runtimes.emplace_back("certify", timer.lap());
  return finish_certification(c, in);
}

int cmd_probe_lipschitz(const RunConfig& c) {
  require_orbit_system(c);
  const auto orbit = stored_orbit(c);
  const auto stack = stored_stack(c, stored_metric(c, orbit));
  const auto rep = in_stage("lipschitz", [&] { return probe_lipschitz(stack.gm, c.grid, c.lipschitz_pairs, c.seed); });
  auto probe_json = [](const LipschitzProbe& p) {
    return json{{"pairs", p.pairs}, {"ratio", p.ratio}, {"y", to_json(p.y)}, {"y_prime", to_json(p.y_prime)}};
  };
  write_json(c.out_dir / "lipschitz.json", {{"metric", "M1"},
                                           {"small", probe_json(rep.small)},
                                           {"large", probe_json(rep.large)},
                                           {"stable", rep.stable()}});
  std::cout << "lipschitz: ratio " << fmt(rep.small.ratio) << " (" << rep.small.pairs << " pairs), "
            << fmt(rep.large.ratio) << " (" << rep.large.pairs << " pairs): " << (rep.stable() ? "stable" : "unstable")
            << "\n";
  return rep.stable() ? kExitOk : kExitCertFail;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contraction metric construction and certification for periodic orbits"};
  app.require_subcommand(1);
  Options opt;
  using Command = int (*)(const RunConfig&);
  const std::vector<std::tuple<std::string, std::string, Command>> commands = {
      {"run", "full pipeline: orbit, Floquet, chart, metric, certification", cmd_run},
      {"find-orbit", "locate the periodic orbit and write orbit.json", cmd_find_orbit},
      {"floquet", "Floquet decomposition from the stored orbit (or linear input)", cmd_floquet},
      {"verify-orbit-metric", "realness and rate checks of M0 on the stored orbit", cmd_verify_orbit_metric},
      {"certify", "certify the grid against the stored orbit and chart", cmd_certify},
      {"probe-lipschitz", "Lipschitz probe of L_M1 over the grid region", cmd_probe_lipschitz},
  };
  std::map<CLI::App*, Command> dispatch;
  for (const auto& [name, help, fn] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opt.config, "configuration file (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", opt.out, "output directory (overrides the configuration)");
    sub->add_option("--seed", opt.seed, "random seed (overrides the configuration)");
    dispatch[sub] = fn;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    const RunConfig config = load(opt);
    for (auto* sub : app.get_subcommands()) return dispatch.at(sub)(config);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::ConfigError) {
      std::cerr << "configuration error: " << e.what() << "\n";
      return kExitConfig;
    }
    std::cerr << "pipeline error: " << e.what() << "\n";
    return kExitPipeline;
  } catch (const StageError& e) {
    std::cerr << "pipeline error in stage '" << e.stage() << "': " << e.what() << "\n";
    return kExitPipeline;
  } catch (const std::exception& e) {
    std::cerr << "pipeline error: " << e.what() << "\n";
    return kExitPipeline;
  }
  return kExitPipeline;
}
