// msdiffeo: multi-scale diffeomorphic registration with per-scale
// decomposition of the optimized deformation.
//
// Subcommands
//   register   optimize a matching problem described by a config file; writes
//              the energy log, the final control, the final map, and (for
//              shared-momentum landmark runs) the cross-formulation
//              equivalence report
//   decompose  split an optimized control into per-scale diffeomorphism
//              factors and the scale-indexed flow between scale cutoffs
//   verify     run the numerical self-check suite
//   oracle     run the randomized group-law checks of the matrix model
//
// Exit codes: 0 success, 1 bad usage/config/input, 2 runtime failure,
// 3 at least one verification check failed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "msdiffeo/config.hpp"
#include "msdiffeo/io.hpp"
#include "msdiffeo/kernels.hpp"
#include "msdiffeo/registration.hpp"
#include "msdiffeo/semidirect.hpp"
#include "msdiffeo/verify.hpp"
#include "msdiffeo/version.hpp"

namespace fs = std::filesystem;

namespace {

using namespace msdiffeo;

RunConfig resolve_config(const std::string& config_path, Command cmd,
                         const std::optional<std::string>& out_override,
                         const std::optional<std::uint64_t>& seed_override) {
  RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
  cfg.command = cmd;
  if (out_override) cfg.out = *out_override;
  if (seed_override) cfg.seed = *seed_override;
  if (cfg.out.empty()) throw std::invalid_argument("output directory must not be empty");
  return cfg;
}

// Builds the matching problem from the config's inputs. A missing target is
// allowed only where the data term is irrelevant (decompose) and defaults to
// the source.
MatchingProblem build_problem(const RunConfig& cfg, bool need_target) {
  if (cfg.source.empty()) throw std::invalid_argument("config needs a 'source' input path");
  if (need_target && cfg.target.empty())
    throw std::invalid_argument("config needs a 'target' input path");
  MatchingProblem prob;
  if (cfg.data_kind == "landmarks") {
    const LandmarkSet src = read_landmarks(cfg.source);
    prob.target = cfg.target.empty() ? src : read_landmarks(cfg.target);
    prob.source = src;
  } else {
    const ScalarField src = read_image(cfg.source);
    prob.target = cfg.target.empty() ? src : read_image(cfg.target);
    prob.source = src;
  }
  prob.kernel = cfg.kernel();
  prob.time_steps = cfg.time_steps;
  prob.formulation = formulation_from_name(cfg.formulation);
  prob.scale_edges = cfg.scale_edges;
  prob.data_weight = cfg.data_weight > 0.0
                         ? cfg.data_weight
                         : default_data_weight(domain_diameter(prob), prob.carrier_size());
  prob.validate();
  return prob;
}

void echo_config(const fs::path& out, const RunConfig& cfg) {
  std::ofstream f(out / "config_used.txt");
  if (!f) throw std::runtime_error("cannot write " + (out / "config_used.txt").string());
  f << serialize_config(cfg);
}

// Per-slot kernel evaluation mirroring the energy's momentum-slot view: one
// slot evaluates the whole mixture, several evaluate one scale (or continuum
// bin) each.
KernelSpec slot_spec(const MatchingProblem& prob, std::size_t n_slots) {
  if (n_slots == 1 || prob.kernel.mode == KernelMode::Finite) return prob.kernel;
  return prob.scale_edges.empty()
             ? prob.kernel.per_node_bins()
             : prob.kernel.bin_continuum(std::span<const double>(prob.scale_edges));
}

// Representative width of one momentum slot, for report labels.
double slot_sigma(const KernelSpec& spec, std::size_t s) {
  return spec.mode == KernelMode::Finite ? spec.components.at(s).sigma_lead()
                                         : spec.node_atoms.at(s).sigma;
}

// Backward Euler chain of the image energy: the returned map's forward slot
// holds the approximation of phi^{-1} at the grid nodes, the map the data
// term warps the source by.
Diffeomorphism image_backward_map(const MatchingProblem& prob, const Control& c) {
  const Grid2& g = prob.source_image().grid;
  const KernelSpec spec = slot_spec(prob, c.n_slots);
  const bool shared = c.n_slots == 1;
  const int M = c.time_steps;
  const double dt = 1.0 / M;
  const double w = g.h * g.h;  // carrier weight of the image chain
  std::vector<Vec2> nodes(g.size());
  for (int i = 0; i < g.nx; ++i)
    for (int j = 0; j < g.ny; ++j) nodes[g.idx(i, j)] = g.node(i, j);

  std::vector<Vec2> x = nodes;
  for (int mb = 0; mb < M; ++mb) {
    const int mr = M - 1 - mb;
    std::vector<Vec2> next(x.size());
    for (std::size_t a = 0; a < x.size(); ++a) {
      Vec2 v{};
      for (std::size_t s = 0; s < c.n_slots; ++s)
        for (std::size_t b = 0; b < nodes.size(); ++b) {
          const double r2 = sqnorm(x[a] - nodes[b]);
          v += (shared ? spec.eval(r2) : spec.eval_scale(s, r2)) * c.at(mr, s, b);
        }
      next[a] = x[a] - (dt * w) * v;
    }
    x = std::move(next);
  }
  Diffeomorphism xi(g);
  xi.map = std::move(x);
  return xi;
}

std::string fmt(double v) { return detail::fmt17(v); }

void write_equivalence_csv(const fs::path& path, const EquivalenceReport& rep,
                           const std::string& header) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << header << '\n' << "# reference=" << rep.reference << '\n'
      << "formulation,total,reg,data,delta_rel,sup_dist,decay_ratio1,decay_ratio2,bit_exact\n";
  for (const EquivalenceRow& r : rep.rows)
    out << r.formulation << ',' << fmt(r.total) << ',' << fmt(r.reg) << ',' << fmt(r.data) << ','
        << fmt(r.delta_rel) << ',' << fmt(r.sup_dist) << ',' << fmt(r.ratio1) << ','
        << fmt(r.ratio2) << ',' << (r.bit_exact ? 1 : 0) << '\n';
}

void print_equivalence(const EquivalenceReport& rep) {
  std::cout << "  equivalence report (reference: " << rep.reference << ")\n";
  std::cout << "    " << std::left << std::setw(24) << "formulation" << std::setw(14)
            << "delta_rel" << std::setw(14) << "sup_dist" << std::setw(20) << "decay_ratios"
            << "note\n";
  for (const EquivalenceRow& r : rep.rows) {
    std::ostringstream ratios;
    if (std::isnan(r.ratio1)) ratios << "-";
    else {
      ratios << std::setprecision(3) << r.ratio1;
      if (!std::isnan(r.ratio2)) ratios << ", " << std::setprecision(3) << r.ratio2;
    }
    std::ostringstream dist;
    if (std::isnan(r.sup_dist)) dist << "-";
    else dist << std::setprecision(3) << std::scientific << r.sup_dist;
    std::cout << "    " << std::left << std::setw(24) << r.formulation << std::setw(14)
              << std::setprecision(3) << std::scientific << r.delta_rel << std::setw(14)
              << dist.str() << std::setw(20) << ratios.str()
              << (r.bit_exact ? "bit-exact" : "") << "\n";
  }
  std::cout.unsetf(std::ios::floatfield);
}

int run_register(RunConfig cfg) {
  MatchingProblem prob = build_problem(cfg, /*need_target=*/true);
  cfg.data_weight = prob.data_weight;  // echo the derived weight so reruns match

  std::optional<Control> init;
  if (!cfg.control.empty()) init = read_control(cfg.control);

  const fs::path out(cfg.out);
  fs::create_directories(out);
  const std::string header = csv_header(cfg.seed, "register");
  echo_config(out, cfg);

  std::cout << "register: " << cfg.formulation << ", " << prob.slots() << " momentum slot(s), "
            << prob.carrier_size() << (prob.is_landmark() ? " landmarks, " : " image nodes, ")
            << prob.time_steps << " time steps, data weight " << prob.data_weight << "\n";

  const OptimizeResult res = optimize(prob, cfg.optimizer, init ? &*init : nullptr);
  const IterRecord& first = res.history.front();
  const IterRecord& last = res.history.back();
  std::cout << "  " << res.iterations << " iterations (" << res.stop_reason << ")\n"
            << "  energy " << first.total << " -> " << last.total << "  [reg " << last.reg
            << ", data " << last.data << "]\n";
  if (first.data > 0.0)
    std::cout << "  data mismatch reduced by " << 100.0 * (1.0 - last.data / first.data)
              << "%\n";
  if (res.fd_checks_run > 0)
    std::cout << "  gradient audits: " << res.fd_checks_run << ", worst relative error "
              << res.fd_worst_rel_error << "\n";

  write_energy_log(out / "energy_log.csv", res.history, header);
  write_control(out / "control_final.csv", res.control, header);

  if (prob.is_landmark()) {
    const std::vector<std::vector<Vec2>> traj = landmark_trajectory(prob, res.control);
    write_landmarks(out / "landmarks_final.csv",
                    LandmarkSet(prob.source_landmarks().ids, traj.back()), header);

    const Grid2 g = cfg.grid();
    const std::vector<double> times = FlowPath::uniform_times(prob.time_steps);
    double inv_residual = 0.0;
    const Diffeomorphism phi =
        flow_with_inverse(summed_control_path(prob, res.control, g, times), {}, &inv_residual);
    write_diffeomorphism(out / "phi_final.csv", phi, header);
    std::cout << "  final map on " << g.nx << "x" << g.ny
              << " grid, inverse residual " << inv_residual << "\n";

    if (prob.slots() == 1) {
      EquivalenceOptions opt;
      opt.grid = g;
      opt.decay_base_steps = 2 * prob.time_steps;  // keep the decay ladder nested in the chain
      const EquivalenceReport rep = equivalence_report(prob, res.control, opt);
      write_equivalence_csv(out / "equivalence_report.csv", rep, header);
      print_equivalence(rep);
    } else {
      std::cout << "  equivalence report skipped (multi-slot control; optimize under "
                   "sum_of_kernels or integral_kernel to compare formulations)\n";
    }
  } else {
    const Diffeomorphism xi = image_backward_map(prob, res.control);
    write_diffeomorphism(out / "phi_inverse_final.csv", xi, header);
    ScalarField warped(xi.grid);
    const ScalarField& src = prob.source_image();
    for (int i = 0; i < xi.grid.nx; ++i)
      for (int j = 0; j < xi.grid.ny; ++j)
        warped.at(i, j) = interpolate(src, xi.map[xi.grid.idx(i, j)]);
    write_scalar_field(out / "warped.csv", warped, header);
    write_pgm(out / "warped.pgm", warped);
  }

  std::cout << "  outputs in " << out.string() << "\n";
  return 0;
}

int run_decompose(RunConfig cfg) {
  if (cfg.control.empty())
    throw std::invalid_argument(
        "decompose needs a 'control' path in the config (produce one with 'register')");
  if (cfg.data_kind != "landmarks")
    throw std::invalid_argument("decompose is defined for landmark problems");

  MatchingProblem prob = build_problem(cfg, /*need_target=*/false);
  cfg.data_weight = prob.data_weight;
  const Control c = read_control(cfg.control);

  // Per-scale slots: keep a multi-slot formulation as given, or pick the
  // kernel's natural one when the config names a shared-momentum formulation.
  Formulation tag = formulation_from_name(cfg.formulation);
  if (tag == Formulation::SumOfKernels || tag == Formulation::IntegralKernel)
    tag = prob.kernel.mode == KernelMode::Finite ? Formulation::Simultaneous
                                                 : Formulation::KernelBundle;
  const MatchingProblem multi = prob.with_formulation(tag);
  const std::size_t S = multi.slots();

  Control cs;
  if (c.n_slots == S) {
    cs = c;
  } else if (c.n_slots == 1) {
    cs = project_control(multi, c, S);
    std::cout << "decompose: shared momentum projected onto " << S << " scale slot(s)\n";
  } else {
    throw std::invalid_argument("control has " + std::to_string(c.n_slots) +
                                " slots but the kernel decomposes into " + std::to_string(S));
  }

  const fs::path out(cfg.out);
  fs::create_directories(out);
  const std::string header = csv_header(cfg.seed, "decompose");
  echo_config(out, cfg);

  const Grid2 g = cfg.grid();
  const int steps = std::max(cfg.time_steps, c.time_steps);
  const std::vector<double> times = FlowPath::uniform_times(steps);
  const Ordering ordering = cfg.ordering_tag();

  // Factor reconstruction and the direct flow it must recompose to.
  const ScaleTuple tuple = control_scale_tuple(multi, cs, ordering, g, times);
  const Reconstruction rec = reconstruct(tuple);
  double inv_residual = 0.0;
  const Diffeomorphism phi =
      flow_with_inverse(summed_control_path(multi, cs, g, times), {}, &inv_residual);
  const double diagram_residual = sup_distance(rec.total, phi);

  write_diffeomorphism(out / "phi_total.csv", phi, header);
  write_diffeomorphism(out / "psi_total.csv", rec.total, header);

  // Scale-indexed flow across the cutoffs 0..S with one unit-weight node per
  // scale band; ascending s runs coarse to fine.
  std::vector<FlowPath> slot_paths = control_slot_paths(multi, cs, g, times);
  TimeScaleBundle bundle;
  for (std::size_t s = 0; s < S; ++s) {
    bundle.s.push_back(s + 0.5);
    bundle.lambda.push_back(1.0);
  }
  bundle.paths = slot_paths;
  std::vector<double> edges(S + 1);
  for (std::size_t j = 0; j <= S; ++j) edges[j] = static_cast<double>(j);
  const ScaleFlowResult flow = scale_flow(bundle, edges);
  for (std::size_t j = 0; j <= S; ++j)
    write_diffeomorphism(out / ("eta_edge" + std::to_string(j) + ".csv"), flow.eta_time[j],
                         header + "\n# scale cutoff s=" + fmt(edges[j]));

  // Per-scale rows in slot order (coarse to fine). The reconstruction stores
  // factors in the ordering's component convention: component 1 is the finest
  // scale when the coarse factor is applied last, the coarsest otherwise.
  const KernelSpec spec = slot_spec(multi, S);
  std::ofstream reportf(out / "decomposition_report.csv");
  if (!reportf) throw std::runtime_error("cannot write decomposition_report.csv");
  reportf << header << '\n'
          << "# ordering=" << ordering_name(ordering) << " diagram_residual="
          << fmt(diagram_residual) << " inverse_residual=" << fmt(inv_residual) << '\n'
          << "slot,sigma,sup_displacement,jac_det_min,jac_det_max,band_sup_displacement,"
             "route_gap\n";

  std::cout << "decompose: " << S << " scale(s), ordering " << ordering_name(ordering) << ", "
            << steps << " time steps, " << g.nx << "x" << g.ny << " grid\n";
  std::cout << "  " << std::left << std::setw(6) << "slot" << std::setw(10) << "sigma"
            << std::setw(14) << "sup_disp" << std::setw(22) << "jac_det[min,max]"
            << std::setw(14) << "band_disp" << "route_gap\n";

  for (std::size_t s = 0; s < S; ++s) {
    const std::size_t k = ordering == Ordering::CoarseLast ? S - 1 - s : s;
    const Diffeomorphism& factor = rec.factor(k);
    double jmin = std::numeric_limits<double>::infinity(), jmax = -jmin;
    for (int i = 0; i < g.nx; ++i)
      for (int j = 0; j < g.ny; ++j) {
        const double det = factor.jacobian_node(i, j).determinant();
        jmin = std::min(jmin, det);
        jmax = std::max(jmax, det);
      }
    const double sigma = slot_sigma(spec, s);
    const double disp = sup_displacement(factor);
    const Diffeomorphism band = scale_segment(flow, s, s + 1);
    const double band_disp = sup_displacement(band);
    const double gap = flow.gap[s + 1];

    write_diffeomorphism(out / ("psi_scale" + std::to_string(s) + ".csv"), factor,
                         header + "\n# slot=" + std::to_string(s) + " sigma=" + fmt(sigma) +
                             " ordering=" + ordering_name(ordering));
    write_diffeomorphism(out / ("psi_band" + std::to_string(s) + ".csv"), band,
                         header + "\n# scale band [" + fmt(edges[s]) + "," + fmt(edges[s + 1]) +
                             "] (coarse-first convention)");
    reportf << s << ',' << fmt(sigma) << ',' << fmt(disp) << ',' << fmt(jmin) << ','
            << fmt(jmax) << ',' << fmt(band_disp) << ',' << fmt(gap) << '\n';
    std::cout << "  " << std::left << std::setw(6) << s << std::setw(10)
              << std::setprecision(4) << sigma << std::setw(14) << std::setprecision(4)
              << std::scientific << disp << std::setw(22)
              << ("[" + std::to_string(jmin).substr(0, 8) + ", " +
                  std::to_string(jmax).substr(0, 8) + "]")
              << std::setw(14) << band_disp << gap << "\n";
    std::cout.unsetf(std::ios::floatfield);
  }

  std::cout << "  factor recomposition vs direct flow: " << std::setprecision(4)
            << std::scientific << diagram_residual << " (sup over nodes)\n";
  std::cout.unsetf(std::ios::floatfield);
  std::cout << "  outputs in " << out.string() << "\n";
  return 0;
}

int run_checks(const RunConfig& cfg, bool oracle_only) {
  const char* command = oracle_only ? "oracle" : "verify";
  const VerifyReport rep =
      oracle_only ? run_oracle_checks(cfg.seed) : run_verify_checks(cfg.seed);
  print_verify_report(rep, std::cout);
  const fs::path out(cfg.out);
  fs::create_directories(out);
  const fs::path file = out / (std::string(command) + "_report.csv");
  write_verify_report_csv(rep, file, cfg.seed, command);
  std::cout << "report written to " << file.string() << "\n";
  return rep.all_pass ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"msdiffeo: multi-scale diffeomorphic registration with per-scale decomposition"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("msdiffeo v") + msdiffeo::kVersion);

  std::string config_path;
  std::optional<std::string> out_override;
  std::optional<std::uint64_t> seed_override;

  auto add_common = [&](CLI::App* sub, bool config_required) {
    CLI::Option* c =
        sub->add_option("--config", config_path, "run configuration file (key = value lines)");
    c->check(CLI::ExistingFile);
    if (config_required) c->required();
    sub->add_option("--out", out_override, "output directory (overrides the config)");
    sub->add_option("--seed", seed_override,
                    "seed for the checks and output headers (overrides the config)");
  };

  CLI::App* reg = app.add_subcommand(
      "register", "optimize a matching problem and write the control, energy log, and final map");
  add_common(reg, true);
  CLI::App* dec = app.add_subcommand(
      "decompose", "split an optimized control into per-scale factors and the scale flow");
  add_common(dec, true);
  CLI::App* ver = app.add_subcommand(
      "verify", "run the numerical self-check suite (exit 3 if any check fails)");
  add_common(ver, false);
  CLI::App* orc = app.add_subcommand(
      "oracle", "run the randomized matrix-group law checks (exit 3 if any check fails)");
  add_common(orc, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;  // bad usage is exit 1; --help/--version exit 0
  }

  using msdiffeo::Command;
  try {
    if (reg->parsed())
      return run_register(resolve_config(config_path, Command::Register, out_override, seed_override));
    if (dec->parsed())
      return run_decompose(resolve_config(config_path, Command::Decompose, out_override, seed_override));
    if (ver->parsed())
      return run_checks(resolve_config(config_path, Command::Verify, out_override, seed_override), false);
    return run_checks(resolve_config(config_path, Command::Oracle, out_override, seed_override), true);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
