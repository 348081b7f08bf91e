#pragma once

// Pipeline stages, artifact serialization and grid certification shared by
// the command-line tool and the acceptance suite.

#include "cmetric/global_metric.hpp"
#include "cmetric/pipeline/config.hpp"
#include "cmetric/pipeline/parallel.hpp"

#include <chrono>
#include <cstdio>
#include <sstream>

namespace cmetric::pipeline {

/// Error raised by a named stage; the CLI maps it to exit code 3.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error(what), stage_(std::move(stage)) {}
  [[nodiscard]] const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

/// Runs body as stage `name`. ConfigError passes through untouched so that
/// late validation (epsilon against nu) still reports as a configuration error.
template <class Body>
auto in_stage(const std::string& name, Body&& body) -> decltype(body()) {
  try {
    return body();
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::ConfigError) throw;
    throw StageError(name, e.what());
  } catch (const json::exception& e) {
    throw StageError(name, std::string("artifact: ") + e.what());
  }
}

/// 17 significant digits; inf and nan spelled out.
[[nodiscard]] inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---- JSON helpers -------------------------------------------------------

[[nodiscard]] inline json to_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

[[nodiscard]] inline json to_json(const Mat& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) rows.push_back(to_json(Vec(m.row(r).transpose())));
  return rows;
}

[[nodiscard]] inline json to_json(const CMat& m) { return {{"re", to_json(Mat(m.real()))}, {"im", to_json(Mat(m.imag()))}}; }

[[nodiscard]] inline json to_json(const std::vector<cplx>& zs) {
  json out = json::array();
  for (const auto& z : zs) out.push_back({z.real(), z.imag()});
  return out;
}

[[nodiscard]] inline Vec vec_of(const json& j) { return detail::vec_from(j, "vector"); }
[[nodiscard]] inline Mat mat_of(const json& j) { return detail::mat_from(j, "matrix"); }

[[nodiscard]] inline json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(ErrorKind::InvariantViolation, "missing upstream artifact " + p.string());
  return json::parse(in);
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw Error(ErrorKind::InvariantViolation, "cannot write " + p.string());
}

inline void write_json(const std::filesystem::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

// ---- stages -------------------------------------------------------------

[[nodiscard]] inline OdeSystem system_of(const RunConfig& c) { return systems::make_system(c.system, c.params); }

[[nodiscard]] inline FloquetOptions floquet_options(const RunConfig& c) {
  FloquetOptions o;
  o.jordan.cluster_tol = c.eps_cluster;
  return o;
}

struct OrbitStage {
  PeriodicOrbit po;
  FloquetSpectrum spectrum;
};

[[nodiscard]] inline OrbitStage find_orbit_stage(const RunConfig& c) {
  ShootingOptions so;
  so.tol = c.tol;
  OrbitStage s;
  s.po = find_orbit(system_of(c), c.orbit_guess, c.period_guess, so);
  s.spectrum = floquet_spectrum(s.po, c.eps_cluster);
  return s;
}

[[nodiscard]] inline json orbit_json(const RunConfig& c, const OrbitStage& s) {
  json params = json::object();
  for (const auto& [k, v] : c.params) params[k] = v;
  return {{"system", c.system},
          {"params", params},
          {"n", s.po.system.n},
          {"q", to_json(s.po.q)},
          {"T", s.po.T},
          {"monodromy", to_json(s.po.monodromy)},
          {"multipliers", to_json(s.spectrum.multipliers)},
          {"nu", s.spectrum.nu},
          {"closure_residual", s.po.residual},
          {"newton_steps", s.po.newton_steps},
          {"trivial_offset", s.spectrum.trivial_offset},
          {"tolerances", {{"rtol", s.po.tol.rtol}, {"atol", s.po.tol.atol}}}};
}

/// Rebuilds the orbit from a stored anchor and period (no Newton steps).
[[nodiscard]] inline OrbitStage orbit_from_json(const RunConfig& c, const json& j) {
  if (j.at("system").get<std::string>() != c.system) {
    throw Error(ErrorKind::InvariantViolation, "stored orbit belongs to system '" + j["system"].get<std::string>() + "'");
  }
  Tolerances tol = c.tol;
  tol.rtol = j.at("tolerances").at("rtol").get<double>();
  tol.atol = j.at("tolerances").at("atol").get<double>();
  OrbitStage s;
  s.po = orbit_from_anchor(system_of(c), vec_of(j.at("q")), j.at("T").get<double>(), tol);
  s.spectrum = floquet_spectrum(s.po, c.eps_cluster);
  return s;
}

[[nodiscard]] inline json floquet_json(const FloquetDecomposition& dec, const std::vector<cplx>& multipliers) {
  json blocks = json::array();
  for (std::size_t j = 0; j < dec.jordan.blocks.size(); ++j) {
    const auto& b = dec.jordan.blocks[j];
    json jb = {{"kind", to_string(b.kind)}, {"jordan_size", b.m},   {"size", b.size()},
               {"offset", b.offset},        {"modulus", b.modulus()}, {"K", to_json(dec.blocks_K[j].K)}};
    if (b.kind == BlockKind::ComplexPair) {
      jb["alpha"] = b.alpha;
      jb["beta"] = b.beta;
    } else {
      jb["lambda"] = b.lambda;
    }
    blocks.push_back(jb);
  }
  json bound = json::array();
  for (const auto& row : dec.bound.rows) {
    bound.push_back({{"block", row.block}, {"lambda_max", row.lambda_max}, {"c", row.bound}, {"margin", row.margin}});
  }
  return {{"T", dec.T},
          {"epsilon", dec.epsilon},
          {"eps_prime", dec.jordan.eps_prime},
          {"multipliers", to_json(multipliers)},
          {"S", to_json(dec.jordan.S)},
          {"S_inverse", to_json(dec.Sinv)},
          {"blocks", blocks},
          {"A", to_json(dec.A)},
          {"B", to_json(dec.B)},
          {"mesh_nodes", dec.mesh.size()},
          {"residuals",
           {{"jordan", dec.jordan.residual},
            {"roundtrip", dec.roundtrip_residual},
            {"periodicity", dec.periodicity_residual},
            {"block", dec.block_residual},
            {"interpolation", dec.interpolation_residual}}},
          {"spectral_bound", bound},
          {"decisions", dec.jordan.decisions}};
}

[[nodiscard]] inline FundamentalPath linear_path(const RunConfig& c) {
  systems::LinearPeriodic lp;
  lp.n = static_cast<int>(c.linear->F0.rows());
  lp.T = c.linear->T;
  lp.F0 = c.linear->F0;
  lp.F1 = c.linear->F1;
  lp.F2 = c.linear->F2;
  return linear_periodic_path(lp, c.tol);
}

/// nu for a linear periodic input: -max ln|lambda| / T over all multipliers.
[[nodiscard]] inline double linear_nu(const Mat& monodromy, double T) {
  const Eigen::EigenSolver<Mat> es(monodromy);
  double worst = -kInf;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) worst = std::max(worst, std::log(std::abs(es.eigenvalues()(i))));
  return -worst / T;
}

[[nodiscard]] inline std::vector<cplx> eigenvalues_of(const Mat& m) {
  const Eigen::EigenSolver<Mat> es(m);
  std::vector<cplx> out(es.eigenvalues().data(), es.eigenvalues().data() + es.eigenvalues().size());
  std::sort(out.begin(), out.end(), [](cplx a, cplx b) {
    return std::abs(a) != std::abs(b) ? std::abs(a) > std::abs(b) : a.imag() > b.imag();
  });
  return out;
}

struct OrbitMetricCheck {
  int phases = 0;
  double max_imag_residue = 0.0;
  double max_rate_excess = -kInf;  // max over phases of L_{M0} + nu - eps
  [[nodiscard]] bool pass() const { return max_imag_residue <= 1e-9 && max_rate_excess <= 1e-8; }
};

[[nodiscard]] inline OrbitMetricCheck check_orbit_metric(const OrbitMetric& om, int phases) {
  OrbitMetricCheck chk;
  chk.phases = phases;
  for (int k = 0; k < phases; ++k) {
    const double th = om.T() * k / phases;
    chk.max_imag_residue = std::max(chk.max_imag_residue, orbit_sample(om, th).imag_residue);
    chk.max_rate_excess = std::max(chk.max_rate_excess, l_m0_at(om, th).lm.value + om.nu - om.dec.epsilon);
  }
  return chk;
}

[[nodiscard]] inline json orbit_metric_json(const OrbitMetricCheck& chk, const OrbitMetric& om) {
  return {{"phases", chk.phases},
          {"nu", om.nu},
          {"epsilon", om.dec.epsilon},
          {"max_imag_residue", chk.max_imag_residue},
          {"max_rate_excess", chk.max_rate_excess},
          {"restricted_rate", l_m0_restricted(om)},
          {"tolerances", {{"imag_residue", 1e-9}, {"rate_excess", 1e-8}}},
          {"pass", chk.pass()}};
}

[[nodiscard]] inline ChartOptions chart_options(const RunConfig& c) {
  ChartOptions o;
  o.seed = c.seed;
  return o;
}

[[nodiscard]] inline GlobalOptions global_options(const RunConfig& c) {
  GlobalOptions o;
  o.t_max_periods = c.t_max_periods;
  return o;
}

[[nodiscard]] inline json chart_json(const ProjectionChart& chart, const GlobalMetric& gm) {
  const auto& r = chart.calibration;
  return {{"epsilon", chart.epsilon},
          {"nu", chart.nu},
          {"mu", gm.mu},
          {"eps0", chart.eps0},
          {"iota_U", chart.U_level},
          {"iota", gm.iota},
          {"seed_count", chart.seed_p.size()},
          {"calibration",
           {{"iota_start", r.iota_start},
            {"halvings", r.halvings},
            {"samples", r.samples},
            {"worst_theta_dot_deviation", r.worst_theta_dot_deviation},
            {"min_denominator_ratio", r.min_denominator_ratio},
            {"worst_decay_rate", r.worst_decay_rate}}}};
}

/// Everything downstream of the orbit, shared read-only by certification workers.
struct MetricStack {
  std::shared_ptr<const OrbitMetric> om;
  std::shared_ptr<const ProjectionChart> chart;
  GlobalMetric gm;
};

[[nodiscard]] inline MetricStack build_chart_and_metric(const RunConfig& c, std::shared_ptr<const OrbitMetric> om,
                                                        std::optional<double> iota_U = std::nullopt,
                                                        std::optional<double> iota = std::nullopt) {
  MetricStack s;
  s.om = std::move(om);
  ChartOptions co = chart_options(c);
  if (iota_U) co.iota_U = *iota_U;
  s.chart = in_stage("chart", [&] {
    return std::make_shared<const ProjectionChart>(calibrate_chart(s.om, s.om->dec.epsilon, co));
  });
  GlobalOptions go = global_options(c);
  if (iota) go.iota = *iota;
  s.gm = in_stage("global-metric", [&] { return make_global_metric(s.chart, go); });
  return s;
}

// ---- certification ------------------------------------------------------

inline constexpr const char* kPass = "PASS";
inline constexpr const char* kFail = "FAIL";
inline constexpr const char* kSkipped = "SKIPPED-outside-horizon";

struct CertRow {
  Vec x;
  double d = kInf, V = kNaN, L_M = kNaN, margin = kNaN;
  std::string status;
  std::string note;
};

struct Certification {
  double bound = 0.0;  // -nu + eps
  double tol_cert = 0.0;
  std::vector<CertRow> rows;
  std::vector<Vec> rejected;  // grid points with f(x) = 0
  double seconds = 0.0;

  [[nodiscard]] int count(const std::string& status) const {
    return static_cast<int>(std::count_if(rows.begin(), rows.end(), [&](const CertRow& r) { return r.status == status; }));
  }
  [[nodiscard]] std::optional<double> min_margin() const {
    std::optional<double> m;
    for (const auto& r : rows) {
      if (!std::isnan(r.margin)) m = m ? std::min(*m, r.margin) : r.margin;
    }
    return m;
  }
};

[[nodiscard]] inline CertRow certify_point(const GlobalMetric& gm, const Vec& x, double tol_cert) {
  CertRow row;
  row.x = x;
  const double bound = -gm.nu + gm.epsilon;
  try {
    const auto fp = final_metric_point(gm, x);
    row.d = fp.base.d;
    row.V = fp.V.value;
    row.L_M = fp.l_m.value;
    row.margin = bound - row.L_M;
    row.status = row.margin >= -tol_cert ? kPass : kFail;
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::OutsideBasin || e.kind() == ErrorKind::NeverReachesLevel) {
      row.status = kSkipped;
    } else {
      row.status = kFail;
    }
    row.note = e.what();
  }
  return row;
}

/// Certifies every grid point; rows keep grid order whatever the worker count.
[[nodiscard]] inline Certification certify_grid(const GlobalMetric& gm, const std::vector<Vec>& grid, double tol_cert,
                                                unsigned workers = worker_count()) {
  const auto start = std::chrono::steady_clock::now();
  Certification cert;
  cert.bound = -gm.nu + gm.epsilon;
  cert.tol_cert = tol_cert;
  std::vector<Vec> pts;
  for (const Vec& x : grid) {
    if (gm.system().f(x).norm() <= 1e-12 * (1.0 + x.norm())) {
      cert.rejected.push_back(x);
    } else {
      pts.push_back(x);
    }
  }
  cert.rows.resize(pts.size());
  parallel_for(
      pts.size(), [&](std::size_t i) { cert.rows[i] = certify_point(gm, pts[i], tol_cert); }, workers);
  cert.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return cert;
}

[[nodiscard]] inline std::string cert_csv(const Certification& cert, int n) {
  std::ostringstream out;
  for (int i = 1; i <= n; ++i) out << 'x' << i << ',';
  out << "d,V,L_M,margin,status\n";
  for (const auto& r : cert.rows) {
    for (Eigen::Index i = 0; i < r.x.size(); ++i) out << fmt(r.x(i)) << ',';
    out << fmt(r.d) << ',' << fmt(r.V) << ',' << fmt(r.L_M) << ',' << fmt(r.margin) << ',' << r.status << '\n';
  }
  return out.str();
}

/// Lipschitz probe of L_{M1} at two sample sizes over the grid's region.
struct LipschitzReport {
  LipschitzProbe small, large;
  // same seed, so large covers small; doubling the pairs may move the sup by 20% at most
  [[nodiscard]] bool stable() const {
    return std::isfinite(small.ratio) && std::isfinite(large.ratio) && small.ratio <= large.ratio &&
           large.ratio <= 1.2 * small.ratio + 1e-12;
  }
};

[[nodiscard]] inline std::function<Vec(std::mt19937_64&)> grid_sampler(const GridSpec& g) {
  if (g.kind == GridSpec::Kind::Annulus) {
    return [g](std::mt19937_64& rng) {
      std::uniform_real_distribution<double> r(g.r_min, g.r_max), a(0.0, 2.0 * kPi);
      const double rr = r(rng), aa = a(rng);
      return Vec2(g.center[0] + rr * std::cos(aa), g.center[1] + rr * std::sin(aa));
    };
  }
  return [g](std::mt19937_64& rng) {
    Vec x(static_cast<Eigen::Index>(g.lower.size()));
    for (std::size_t i = 0; i < g.lower.size(); ++i) {
      x(static_cast<Eigen::Index>(i)) = std::uniform_real_distribution<double>(g.lower[i], g.upper[i])(rng);
    }
    return x;
  };
}

/// Thirds: the grid region, the chart tube d <= U, and the blending bands d <= 2 iota.
/// The bands are thin, so uniform grid samples almost never resolve where L_M1 is steepest.
[[nodiscard]] inline std::function<Vec(std::mt19937_64&)> domain_sampler(const GlobalMetric& gm, const GridSpec& g) {
  const auto chart = gm.chart;
  const double band = std::min(chart->U_level, 2.0 * gm.iota);
  return [chart, band, box = grid_sampler(g)](std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double pick = u(rng);
    if (pick < 1.0 / 3.0) return box(rng);
    const double theta = chart->T() * u(rng);
    const auto s = orbit_sample(*chart->om, theta);
    std::normal_distribution<double> gauss;
    Vec v(s.f.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = gauss(rng);
    const Vec Mf = s.M0 * s.f;
    v -= (Mf.dot(v) / s.f.dot(Mf)) * s.f;
    v /= std::sqrt(v.dot(s.M0 * v));
    const double top = pick < 2.0 / 3.0 ? chart->U_level : band;
    return chart_point(*chart, theta, v, top * u(rng));
  };
}

[[nodiscard]] inline LipschitzReport probe_lipschitz(const GlobalMetric& gm, const GridSpec& g, int pairs,
                                                     std::uint64_t seed) {
  LipschitzReport rep;
  const auto h = m1_handle(gm);
  rep.small = lipschitz_probe(h, gm.system(), domain_sampler(gm, g), pairs, seed);
  rep.large = lipschitz_probe(h, gm.system(), domain_sampler(gm, g), 2 * pairs, seed);
  return rep;
}

}  // namespace cmetric::pipeline
