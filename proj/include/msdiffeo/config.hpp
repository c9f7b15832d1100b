#pragma once

// Run configuration: plain-text `key = value` files with dotted key names.
// Blank lines and lines starting with '#' are ignored. Only `kernel.component`
// may repeat (one line per mixture component, coarse to fine). Unknown keys
// are rejected. `serialize` emits a canonical form that re-parses to the same
// settings, with doubles at 17 significant digits so round-trips are exact.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "msdiffeo/io.hpp"
#include "msdiffeo/kernels.hpp"
#include "msdiffeo/registration.hpp"

namespace msdiffeo {

enum class Command { Register, Decompose, Verify, Oracle };

inline const char* command_name(Command c) {
  switch (c) {
    case Command::Register: return "register";
    case Command::Decompose: return "decompose";
    case Command::Verify: return "verify";
    case Command::Oracle: return "oracle";
  }
  throw std::logic_error("unreachable command tag");
}

inline Command command_from_name(const std::string& s) {
  if (s == "register") return Command::Register;
  if (s == "decompose") return Command::Decompose;
  if (s == "verify") return Command::Verify;
  if (s == "oracle") return Command::Oracle;
  throw std::invalid_argument("unknown command: " + s);
}

struct RunConfig {
  Command command = Command::Verify;  // from the command line, not the file
  std::uint64_t seed = 0;
  std::string out = "out";

  std::string source, target, control;      // input paths
  std::string data_kind = "landmarks";      // landmarks | image
  double data_weight = 0.0;                 // 0: derive from domain size

  // Kernel block.
  std::string kernel_mode;                            // finite | continuum
  std::vector<std::pair<double, double>> components;  // (sigma, weight), coarse first
  double smin = 0.0, smax = 1.0;
  int nodes = 8;
  double sigma_min = 0.0, sigma_max = 0.0;
  std::vector<double> scale_edges;  // optional bin edges in s

  std::string formulation = "sum_of_kernels";
  std::string ordering = "coarse_last";
  int time_steps = 10;

  int grid_nx = 64, grid_ny = 64;
  double grid_h = 0.0;  // 0: 1/(max(nx,ny)-1)
  double grid_ox = 0.0, grid_oy = 0.0;

  OptimizerConfig optimizer;

  Grid2 grid() const {
    const double h = grid_h > 0.0 ? grid_h : 1.0 / (std::max(grid_nx, grid_ny) - 1);
    return Grid2{grid_nx, grid_ny, h, grid_ox, grid_oy};
  }

  KernelSpec kernel() const {
    if (kernel_mode == "finite") {
      if (components.empty())
        throw std::invalid_argument("finite kernel needs at least one kernel.component");
      std::vector<GaussianKernel> atoms;
      atoms.reserve(components.size());
      for (const auto& [sigma, weight] : components) atoms.push_back({sigma, weight});
      return KernelSpec::finite(atoms);
    }
    if (kernel_mode == "continuum") {
      if (!(sigma_max > 0.0) || !(sigma_min > 0.0))
        throw std::invalid_argument("continuum kernel needs kernel.sigma_min and kernel.sigma_max");
      return KernelSpec::continuum(smin, smax, nodes, sigma_min, sigma_max);
    }
    throw std::invalid_argument("kernel.mode must be 'finite' or 'continuum'");
  }

  Ordering ordering_tag() const {
    if (ordering == "coarse_last") return Ordering::CoarseLast;
    if (ordering == "coarse_first") return Ordering::CoarseFirst;
    throw std::invalid_argument("ordering must be 'coarse_last' or 'coarse_first'");
  }
};

namespace detail {

inline std::vector<double> parse_double_list(const std::string& v, const std::string& where) {
  std::vector<double> out;
  for (const std::string& tok : split(v, ','))
    out.push_back(parse_double(trim(tok), where));
  return out;
}

}  // namespace detail

// Parses config text into (key, value) pairs, preserving order.
inline std::vector<std::pair<std::string, std::string>> parse_config_pairs(
    const std::string& text) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  " is not 'key = value': '" + t + "'");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string value = detail::trim(t.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("empty key on config line " + std::to_string(lineno));
    pairs.emplace_back(key, value);
  }
  return pairs;
}

inline RunConfig config_from_pairs(
    const std::vector<std::pair<std::string, std::string>>& pairs) {
  RunConfig cfg;
  const std::string where = "config";
  bool seen_mode = false;
  for (const auto& [key, value] : pairs) {
    if (key == "seed") {
      const long long v = detail::parse_int(value, where);
      cfg.seed = static_cast<std::uint64_t>(v);
    } else if (key == "out") cfg.out = value;
    else if (key == "source") cfg.source = value;
    else if (key == "target") cfg.target = value;
    else if (key == "control") cfg.control = value;
    else if (key == "data.kind") {
      if (value != "landmarks" && value != "image")
        throw std::invalid_argument("data.kind must be 'landmarks' or 'image'");
      cfg.data_kind = value;
    } else if (key == "data.weight") cfg.data_weight = detail::parse_double(value, where);
    else if (key == "kernel.mode") {
      if (value != "finite" && value != "continuum")
        throw std::invalid_argument("kernel.mode must be 'finite' or 'continuum'");
      cfg.kernel_mode = value;
      seen_mode = true;
    } else if (key == "kernel.component") {
      const std::vector<double> sw = detail::parse_double_list(value, where);
      if (sw.size() != 2)
        throw std::invalid_argument("kernel.component must be 'sigma,weight': '" + value + "'");
      cfg.components.emplace_back(sw[0], sw[1]);
    } else if (key == "kernel.smin") cfg.smin = detail::parse_double(value, where);
    else if (key == "kernel.smax") cfg.smax = detail::parse_double(value, where);
    else if (key == "kernel.nodes")
      cfg.nodes = static_cast<int>(detail::parse_int(value, where));
    else if (key == "kernel.sigma_min") cfg.sigma_min = detail::parse_double(value, where);
    else if (key == "kernel.sigma_max") cfg.sigma_max = detail::parse_double(value, where);
    else if (key == "kernel.edges") cfg.scale_edges = detail::parse_double_list(value, where);
    else if (key == "formulation") cfg.formulation = value;
    else if (key == "ordering") cfg.ordering = value;
    else if (key == "time.steps")
      cfg.time_steps = static_cast<int>(detail::parse_int(value, where));
    else if (key == "grid.nx") cfg.grid_nx = static_cast<int>(detail::parse_int(value, where));
    else if (key == "grid.ny") cfg.grid_ny = static_cast<int>(detail::parse_int(value, where));
    else if (key == "grid.h") cfg.grid_h = detail::parse_double(value, where);
    else if (key == "grid.ox") cfg.grid_ox = detail::parse_double(value, where);
    else if (key == "grid.oy") cfg.grid_oy = detail::parse_double(value, where);
    else if (key == "optimizer.max_iters")
      cfg.optimizer.max_iters = static_cast<int>(detail::parse_int(value, where));
    else if (key == "optimizer.step_init")
      cfg.optimizer.step_init = detail::parse_double(value, where);
    else if (key == "optimizer.backtrack")
      cfg.optimizer.backtrack_factor = detail::parse_double(value, where);
    else if (key == "optimizer.armijo")
      cfg.optimizer.armijo_c = detail::parse_double(value, where);
    else if (key == "optimizer.grad_tol")
      cfg.optimizer.grad_tol = detail::parse_double(value, where);
    else if (key == "optimizer.energy_tol")
      cfg.optimizer.energy_rel_tol = detail::parse_double(value, where);
    else if (key == "optimizer.fd_interval")
      cfg.optimizer.fd_check_interval = static_cast<int>(detail::parse_int(value, where));
    else if (key == "optimizer.fd_step")
      cfg.optimizer.fd_check_step = detail::parse_double(value, where);
    else
      throw std::invalid_argument("unknown config key: '" + key + "'");
  }
  (void)seen_mode;
  // Tag sanity: surface bad names at parse time, not mid-run.
  (void)formulation_from_name(cfg.formulation);
  (void)cfg.ordering_tag();
  if (cfg.time_steps < 1) throw std::invalid_argument("time.steps must be positive");
  if (cfg.grid_nx < 2 || cfg.grid_ny < 2)
    throw std::invalid_argument("grid.nx and grid.ny must be at least 2");
  cfg.optimizer.validate();
  return cfg;
}

inline RunConfig parse_config(const std::string& text) {
  return config_from_pairs(parse_config_pairs(text));
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// Canonical serialization; parse(serialize(cfg)) restores identical settings.
inline std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream out;
  auto kv = [&](const std::string& k, const std::string& v) { out << k << " = " << v << '\n'; };
  auto kd = [&](const std::string& k, double v) { kv(k, detail::fmt17(v)); };
  kv("seed", std::to_string(cfg.seed));
  kv("out", cfg.out);
  if (!cfg.source.empty()) kv("source", cfg.source);
  if (!cfg.target.empty()) kv("target", cfg.target);
  if (!cfg.control.empty()) kv("control", cfg.control);
  kv("data.kind", cfg.data_kind);
  if (cfg.data_weight != 0.0) kd("data.weight", cfg.data_weight);
  if (!cfg.kernel_mode.empty()) kv("kernel.mode", cfg.kernel_mode);
  for (const auto& [sigma, weight] : cfg.components)
    kv("kernel.component", detail::fmt17(sigma) + "," + detail::fmt17(weight));
  if (cfg.kernel_mode == "continuum") {
    kd("kernel.smin", cfg.smin);
    kd("kernel.smax", cfg.smax);
    kv("kernel.nodes", std::to_string(cfg.nodes));
    kd("kernel.sigma_min", cfg.sigma_min);
    kd("kernel.sigma_max", cfg.sigma_max);
  }
  if (!cfg.scale_edges.empty()) {
    std::string list;
    for (std::size_t i = 0; i < cfg.scale_edges.size(); ++i)
      list += (i ? "," : "") + detail::fmt17(cfg.scale_edges[i]);
    kv("kernel.edges", list);
  }
  kv("formulation", cfg.formulation);
  kv("ordering", cfg.ordering);
  kv("time.steps", std::to_string(cfg.time_steps));
  kv("time.scale_nodes", std::to_string(cfg.scale_nodes));
  kv("grid.nx", std::to_string(cfg.grid_nx));
  kv("grid.ny", std::to_string(cfg.grid_ny));
  if (cfg.grid_h != 0.0) kd("grid.h", cfg.grid_h);
  if (cfg.grid_ox != 0.0) kd("grid.ox", cfg.grid_ox);
  if (cfg.grid_oy != 0.0) kd("grid.oy", cfg.grid_oy);
  kv("optimizer.max_iters", std::to_string(cfg.optimizer.max_iters));
  kd("optimizer.step_init", cfg.optimizer.step_init);
  kd("optimizer.backtrack", cfg.optimizer.backtrack_factor);
  kd("optimizer.armijo", cfg.optimizer.armijo_c);
  kd("optimizer.grad_tol", cfg.optimizer.grad_tol);
  kd("optimizer.energy_tol", cfg.optimizer.energy_rel_tol);
  kv("optimizer.fd_interval", std::to_string(cfg.optimizer.fd_check_interval));
  kd("optimizer.fd_step", cfg.optimizer.fd_check_step);
  return out.str();
}

}  // namespace msdiffeo
