#pragma once

// Run configuration: a JSON document describing one pipeline run.
//
// Units: time in the system's own time unit, rates (epsilon, nu) in 1/time,
// state coordinates and grid bounds in state units, angles in radians.

#include "cmetric/errors.hpp"
#include "cmetric/linalg.hpp"
#include "cmetric/ode/dop853.hpp"
#include "cmetric/systems.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace cmetric::pipeline {

using json = nlohmann::json;

struct GridSpec {
  enum class Kind { Box, Annulus } kind = Kind::Box;
  // box: per-axis bounds, inclusive
  std::vector<double> lower, upper;
  // annulus (n = 2): radii inclusive, angles 2 pi k / count
  std::vector<double> center{0.0, 0.0};
  double r_min = 0.0, r_max = 0.0;
  std::vector<int> counts;

  [[nodiscard]] std::size_t size() const {
    std::size_t s = 1;
    for (int c : counts) s *= static_cast<std::size_t>(c);
    return counts.empty() ? 0 : s;
  }
};

struct LinearInput {
  double T = 1.0;
  Mat F0, F1, F2;
};

struct RunConfig {
  std::string system;
  std::map<std::string, double> params;
  Tolerances tol{1e-11, 1e-13};
  // exactly one of the two is set; the factor is resolved against nu
  std::optional<double> epsilon;
  std::optional<double> epsilon_factor;
  double eps_cluster = 1e-6;
  Vec orbit_guess;
  double period_guess = 0.0;
  std::optional<LinearInput> linear;
  GridSpec grid;
  int samples = 200;
  double tol_cert = 1e-6;
  double t_max_periods = 50.0;
  int lipschitz_pairs = 1000;
  std::uint64_t seed = 20240611;
  std::filesystem::path out_dir = "out";

  [[nodiscard]] bool is_linear() const { return system == "linear-periodic"; }
  [[nodiscard]] int dimension() const {
    return is_linear() ? static_cast<int>(linear->F0.rows()) : static_cast<int>(orbit_guess.size());
  }

  /// Resolves epsilon for a computed nu and enforces 0 < epsilon < nu/2.
  [[nodiscard]] double resolve_epsilon(double nu) const {
    const double eps = epsilon ? *epsilon : *epsilon_factor * nu;
    if (!(eps > 0.0 && eps < 0.5 * nu)) {
      std::ostringstream msg;
      msg.precision(17);
      msg << "epsilon = " << eps << " is outside the admissible range (0, nu/2) = (0, " << 0.5 * nu << ")";
      throw Error(ErrorKind::ConfigError, msg.str());
    }
    return eps;
  }
};

namespace detail {

[[noreturn]] inline void config_fail(const std::string& what) { throw Error(ErrorKind::ConfigError, what); }

inline Vec vec_from(const json& j, const std::string& key) {
  if (!j.is_array()) config_fail("'" + key + "' must be an array of numbers");
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) config_fail("'" + key + "' must be an array of numbers");
    v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  }
  return v;
}

inline std::vector<double> list_from(const json& j, const std::string& key) {
  const Vec v = vec_from(j, key);
  return {v.data(), v.data() + v.size()};
}

inline Mat mat_from(const json& j, const std::string& key) {
  if (!j.is_array() || j.empty()) config_fail("'" + key + "' must be a non-empty array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Vec row = vec_from(j[static_cast<std::size_t>(r)], key);
    if (row.size() != cols) config_fail("'" + key + "' has ragged rows");
    m.row(r) = row.transpose();
  }
  return m;
}

inline double number(const json& j, const std::string& key, double fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_number()) config_fail("'" + key + "' must be a number");
  return j[key].get<double>();
}

inline double positive(const json& j, const std::string& key, double fallback) {
  const double v = number(j, key, fallback);
  if (!(v > 0.0)) config_fail("'" + key + "' must be positive");
  return v;
}

inline GridSpec parse_grid(const json& g, int n) {
  GridSpec spec;
  const std::string kind = g.value("kind", std::string("box"));
  if (!g.contains("counts") || !g["counts"].is_array()) config_fail("grid.counts is required");
  for (const auto& c : g["counts"]) {
    if (!c.is_number_integer() || c.get<int>() < 0) config_fail("grid.counts must be non-negative integers");
    spec.counts.push_back(c.get<int>());
  }
  if (kind == "box") {
    spec.kind = GridSpec::Kind::Box;
    spec.lower = list_from(g.at("lower"), "grid.lower");
    spec.upper = list_from(g.at("upper"), "grid.upper");
    const auto nn = static_cast<std::size_t>(n);
    if (spec.lower.size() != nn || spec.upper.size() != nn || spec.counts.size() != nn) {
      config_fail("box grid needs lower, upper and counts of the state dimension " + std::to_string(n));
    }
    for (std::size_t i = 0; i < nn; ++i) {
      if (!(spec.lower[i] <= spec.upper[i])) config_fail("grid.lower must not exceed grid.upper");
    }
  } else if (kind == "annulus") {
    spec.kind = GridSpec::Kind::Annulus;
    if (n != 2) config_fail("annulus grids are two-dimensional");
    if (g.contains("center")) spec.center = list_from(g["center"], "grid.center");
    spec.r_min = number(g, "r_min", -1.0);
    spec.r_max = number(g, "r_max", -1.0);
    if (!(spec.r_min > 0.0 && spec.r_min <= spec.r_max)) config_fail("annulus needs 0 < r_min <= r_max");
    if (spec.center.size() != 2 || spec.counts.size() != 2) config_fail("annulus needs a 2-D center and two counts");
  } else {
    config_fail("grid.kind must be 'box' or 'annulus'");
  }
  return spec;
}

}  // namespace detail

/// Parses and validates a configuration tree. Errors are ConfigError.
[[nodiscard]] inline RunConfig parse_config(const json& j) {
  using namespace detail;
  if (!j.is_object()) config_fail("configuration must be a JSON object");
  RunConfig c;
  try {
    c.system = j.at("system").get<std::string>();
    const auto names = systems::registered_names();
    if (std::find(names.begin(), names.end(), c.system) == names.end()) {
      config_fail("system '" + c.system + "' is not registered");
    }
    if (j.contains("params")) {
      for (const auto& [k, v] : j["params"].items()) {
        if (!v.is_number()) config_fail("params." + k + " must be a number");
        c.params[k] = v.get<double>();
      }
    }
    if (j.contains("integrator")) {
      c.tol.rtol = positive(j["integrator"], "rtol", c.tol.rtol);
      c.tol.atol = positive(j["integrator"], "atol", c.tol.atol);
    }
    if (j.contains("epsilon") == j.contains("epsilon_factor")) {
      config_fail("give exactly one of 'epsilon' (absolute) or 'epsilon_factor' (multiple of nu)");
    }
    if (j.contains("epsilon")) {
      c.epsilon = number(j, "epsilon", 0.0);
      if (!(*c.epsilon > 0.0)) config_fail("epsilon must be positive");
    } else {
      c.epsilon_factor = number(j, "epsilon_factor", 0.0);
      if (!(*c.epsilon_factor > 0.0 && *c.epsilon_factor < 0.5)) config_fail("epsilon_factor must lie in (0, 1/2)");
    }
    c.eps_cluster = positive(j, "eps_cluster", c.eps_cluster);
    c.samples = static_cast<int>(positive(j, "samples", c.samples));
    c.tol_cert = positive(j, "tol_cert", c.tol_cert);
    c.t_max_periods = positive(j, "t_max_periods", c.t_max_periods);
    c.lipschitz_pairs = static_cast<int>(positive(j, "lipschitz_pairs", c.lipschitz_pairs));
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("output")) c.out_dir = j["output"].get<std::string>();

    if (c.is_linear()) {
      const json& L = j.at("linear");
      LinearInput li;
      if (L.contains("preset")) {
        if (L["preset"].get<std::string>() != "rotating_half_turn") config_fail("unknown linear preset");
        const auto lp = systems::rotating_half_turn(number(L, "a", -0.3), number(L, "b", -1.0), positive(L, "T", 1.0));
        li = {lp.T, lp.F0, lp.F1, lp.F2};
      } else {
        li.T = positive(L, "T", 1.0);
        li.F0 = mat_from(L.at("F0"), "linear.F0");
        const auto n = li.F0.rows();
        li.F1 = L.contains("F1") ? mat_from(L["F1"], "linear.F1") : Mat::Zero(n, n);
        li.F2 = L.contains("F2") ? mat_from(L["F2"], "linear.F2") : Mat::Zero(n, n);
        for (const Mat* m : {&li.F0, &li.F1, &li.F2}) {
          if (m->rows() != n || m->cols() != n) config_fail("linear coefficients must be square of one size");
        }
      }
      c.linear = li;
    } else {
      const json& o = j.at("orbit");
      c.orbit_guess = vec_from(o.at("guess"), "orbit.guess");
      c.period_guess = positive(o, "period_guess", 0.0);
      c.grid = parse_grid(j.at("grid"), static_cast<int>(c.orbit_guess.size()));
    }
  } catch (const json::exception& e) {
    config_fail(std::string("malformed configuration: ") + e.what());
  }
  return c;
}

[[nodiscard]] inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ConfigError, "cannot open configuration " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::ConfigError, path.string() + ": " + e.what());
  }
  return parse_config(j);
}

/// Grid points in index order, last axis fastest.
[[nodiscard]] inline std::vector<Vec> grid_points(const GridSpec& g) {
  std::vector<Vec> pts;
  const std::size_t total = g.size();
  pts.reserve(total);
  auto lin = [](double a, double b, int count, int k) {
    return count == 1 ? 0.5 * (a + b) : a + (b - a) * k / (count - 1);
  };
  for (std::size_t idx = 0; idx < total; ++idx) {
    std::vector<int> sub(g.counts.size());
    std::size_t rest = idx;
    for (std::size_t a = g.counts.size(); a-- > 0;) {
      sub[a] = static_cast<int>(rest % static_cast<std::size_t>(g.counts[a]));
      rest /= static_cast<std::size_t>(g.counts[a]);
    }
    if (g.kind == GridSpec::Kind::Box) {
      Vec x(static_cast<Eigen::Index>(sub.size()));
      for (std::size_t a = 0; a < sub.size(); ++a) {
        x(static_cast<Eigen::Index>(a)) = lin(g.lower[a], g.upper[a], g.counts[a], sub[a]);
      }
      pts.push_back(x);
    } else {
      const double r = lin(g.r_min, g.r_max, g.counts[0], sub[0]);
      const double phi = 2.0 * kPi * sub[1] / g.counts[1];
      pts.push_back(Vec2(g.center[0] + r * std::cos(phi), g.center[1] + r * std::sin(phi)));
    }
  }
  return pts;
}

}  // namespace cmetric::pipeline
