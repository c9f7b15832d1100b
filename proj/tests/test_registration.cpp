// Matching problems and controls: validation, energy identities, adjoint
// gradients against finite differences, the optimizer's contract, the
// shared-momentum projection, field extraction, and the equivalence report.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "msdiffeo/registration.hpp"

using namespace msdiffeo;

namespace {

MatchingProblem small_problem(Formulation f) {
  MatchingProblem prob;
  prob.source = LandmarkSet::from_points({{0.30, 0.35}, {0.65, 0.30}, {0.55, 0.68}});
  prob.target = LandmarkSet::from_points({{0.36, 0.40}, {0.70, 0.34}, {0.50, 0.62}});
  prob.kernel = KernelSpec::finite({{0.35, 1.0}, {0.10, 0.7}});
  prob.time_steps = 4;
  prob.data_weight = 100.0;
  prob.formulation = f;
  return prob;
}

void fill_control(Control& c, std::mt19937_64& rng, double amp) {
  std::uniform_real_distribution<double> u(-amp, amp);
  for (std::size_t k = 0; k < c.n_coords(); ++k) c.coord(k) = u(rng);
}

ScalarField blob_image(const Grid2& g, double cx, double cy) {
  ScalarField f(g);
  for (int i = 0; i < g.nx; ++i)
    for (int j = 0; j < g.ny; ++j) {
      const Vec2 p = g.node(i, j);
      const double r2 = (p.x - cx) * (p.x - cx) + (p.y - cy) * (p.y - cy);
      f.at(i, j) = std::exp(-r2 / 0.08);
    }
  return f;
}

}  // namespace

TEST_CASE("controls index by step, slot, and point", "[registration]") {
  Control c = Control::zeros(3, 2, 4);
  REQUIRE(c.size() == 24);
  REQUIRE(c.n_coords() == 48);
  c.at(1, 0, 2) = {5.0, -7.0};
  CHECK(c.p[(1 * 2 + 0) * 4 + 2].x == 5.0);
  CHECK(c.coord(2 * ((1 * 2 + 0) * 4 + 2)) == 5.0);
  CHECK(c.coord(2 * ((1 * 2 + 0) * 4 + 2) + 1) == -7.0);
  c.coord(0) = 3.25;
  CHECK(c.at(0, 0, 0).x == 3.25);

  CHECK_THROWS_AS(Control::zeros(0, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(Control::zeros(1, 0, 1), std::invalid_argument);
  CHECK_THROWS_AS(Control::zeros(1, 1, 0), std::invalid_argument);

  c.p[5].y = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(c.check_finite(), std::invalid_argument);
}

TEST_CASE("matching problems validate their inputs", "[registration]") {
  MatchingProblem base = small_problem(Formulation::SumOfKernels);
  CHECK_NOTHROW(base.validate());
  CHECK(base.slots() == 1);
  CHECK(base.with_formulation(Formulation::Simultaneous).slots() == 2);

  MatchingProblem bad = base;
  bad.target = ScalarField(Grid2{4, 4, 1.0 / 3.0});
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = base;
  bad.target = LandmarkSet::from_points({{0.1, 0.1}});
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = base;
  bad.data_weight = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.data_weight = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = base;
  bad.time_steps = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  // Formulation tags are tied to the kernel mode.
  bad = base.with_formulation(Formulation::IntegralKernel);
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = base.with_formulation(Formulation::KernelBundle);
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  MatchingProblem cont = base.with_formulation(Formulation::IntegralKernel);
  cont.kernel = KernelSpec::continuum(0.0, 1.0, 4, 0.08, 0.35);
  CHECK_NOTHROW(cont.validate());
  CHECK_THROWS_AS(cont.with_formulation(Formulation::SumOfKernels).validate(),
                  std::invalid_argument);
  CHECK_THROWS_AS(cont.with_formulation(Formulation::Simultaneous).validate(),
                  std::invalid_argument);

  // Image problems: shared grid, small grids only.
  const Grid2 g8{8, 8, 1.0 / 7.0};
  MatchingProblem img;
  img.source = blob_image(g8, 0.45, 0.5);
  img.target = blob_image(g8, 0.55, 0.5);
  img.kernel = base.kernel;
  img.data_weight = 50.0;
  img.time_steps = 3;
  CHECK_NOTHROW(img.validate());

  MatchingProblem big = img;
  const Grid2 g65{65, 65, 1.0 / 64.0};
  big.source = ScalarField(g65);
  big.target = ScalarField(g65);
  CHECK_THROWS_AS(big.validate(), std::invalid_argument);

  MatchingProblem off = img;
  off.target = blob_image(Grid2{8, 8, 0.2}, 0.5, 0.5);
  CHECK_THROWS_AS(off.validate(), std::invalid_argument);
}

TEST_CASE("zero controls leave the carrier still and cost only data",
          "[registration]") {
  for (Formulation f : {Formulation::SumOfKernels, Formulation::Simultaneous}) {
    const MatchingProblem prob = small_problem(f);
    const EnergyBreakdown e = energy(prob, prob.zero_control());
    CHECK(e.regularization == 0.0);
    for (double r : e.reg_per_scale) CHECK(r == 0.0);

    double data = 0.0;
    const auto& q0 = prob.source_landmarks().points;
    const auto& q1 = prob.target_landmarks().points;
    for (std::size_t a = 0; a < q0.size(); ++a) data += sqnorm(q0[a] - q1[a]);
    CHECK(e.data == data);
    CHECK(e.total == prob.data_weight * data);

    const auto X = landmark_trajectory(prob, prob.zero_control());
    REQUIRE(X.size() == static_cast<std::size_t>(prob.time_steps) + 1);
    for (std::size_t a = 0; a < q0.size(); ++a) {
      CHECK(X.back()[a].x == q0[a].x);
      CHECK(X.back()[a].y == q0[a].y);
    }
  }
}

TEST_CASE("adjoint gradients match central differences", "[registration]") {
  std::mt19937_64 rng(31);
  for (Formulation f : {Formulation::SumOfKernels, Formulation::Simultaneous,
                        Formulation::SdpCoarseFirst}) {
    const MatchingProblem prob = small_problem(f);
    Control c = prob.zero_control();
    fill_control(c, rng, 0.25);
    CHECK(gradient_fd_error(prob, c, 1e-6) < 1e-5);
  }

  MatchingProblem cont = small_problem(Formulation::IntegralKernel);
  cont.kernel = KernelSpec::continuum(0.0, 1.0, 4, 0.08, 0.35);
  Control cc = cont.zero_control();
  fill_control(cc, rng, 0.25);
  CHECK(gradient_fd_error(cont, cc, 1e-6) < 1e-5);
}

TEST_CASE("image gradients match central differences on a small grid",
          "[registration]") {
  const Grid2 g{8, 8, 1.0 / 7.0};
  MatchingProblem img;
  img.source = blob_image(g, 0.42, 0.5);
  img.target = blob_image(g, 0.56, 0.48);
  img.kernel = KernelSpec::finite({{0.3, 1.0}});
  img.data_weight = 50.0;
  img.time_steps = 3;
  img.validate();

  std::mt19937_64 rng(32);
  Control c = img.zero_control();
  fill_control(c, rng, 0.5);
  CHECK(gradient_fd_error(img, c, 1e-6) < 1e-5);

  CHECK_THROWS_AS(landmark_trajectory(img, c), std::invalid_argument);
  CHECK_THROWS_AS(project_control(img, c, 1), std::invalid_argument);
}

TEST_CASE("optimizer converges instantly on identical endpoints", "[registration]") {
  MatchingProblem prob = small_problem(Formulation::SumOfKernels);
  prob.target = prob.source;
  OptimizerConfig cfg;
  cfg.max_iters = 50;
  const OptimizeResult res = optimize(prob, cfg);
  CHECK(res.converged);
  CHECK(res.iterations <= 2);
  CHECK(res.energy.total == 0.0);
}

TEST_CASE("optimizer decreases energy monotonically and audits its gradient",
          "[registration]") {
  const MatchingProblem prob = small_problem(Formulation::SumOfKernels);
  OptimizerConfig cfg;
  cfg.max_iters = 40;
  cfg.fd_check_interval = 10;
  const OptimizeResult res = optimize(prob, cfg);

  REQUIRE(res.history.size() >= 2);
  CHECK(res.history.front().total == energy(prob, prob.zero_control()).total);
  for (std::size_t k = 1; k < res.history.size(); ++k)
    CHECK(res.history[k].total <= res.history[k - 1].total);
  CHECK(res.history.back().total < 0.25 * res.history.front().total);
  CHECK(res.fd_checks_run >= 1);
  CHECK(res.fd_worst_rel_error < 1e-5);

  OptimizerConfig bad;
  bad.step_init = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = OptimizerConfig{};
  bad.backtrack_factor = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = OptimizerConfig{};
  bad.armijo_c = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = OptimizerConfig{};
  bad.max_iters = -1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = OptimizerConfig{};
  bad.grad_tol = -1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("shared-momentum projection preserves the energy", "[registration]") {
  const MatchingProblem prob = small_problem(Formulation::SumOfKernels);
  OptimizerConfig cfg;
  cfg.max_iters = 30;
  const OptimizeResult res = optimize(prob, cfg);
  const double e_shared = res.energy.total;

  const MatchingProblem multi = prob.with_formulation(Formulation::Simultaneous);
  const Control c_pi = project_control(prob, res.control, multi.slots());
  REQUIRE(c_pi.n_slots == 2);
  const EnergyBreakdown e_multi = energy(multi, c_pi);
  CHECK(std::abs(e_multi.total - e_shared) / e_shared < 1e-6);

  // Both slots carry one momentum, and projecting back recovers the control.
  for (int m = 0; m < c_pi.time_steps; ++m)
    for (std::size_t a = 0; a < c_pi.n_points; ++a) {
      CHECK(c_pi.at(m, 0, a).x == c_pi.at(m, 1, a).x);
      CHECK(c_pi.at(m, 0, a).y == c_pi.at(m, 1, a).y);
    }
  const Control back = project_control(multi, c_pi, 1);
  double worst = 0.0;
  for (std::size_t k = 0; k < back.n_coords(); ++k)
    worst = std::max(worst, std::abs(back.coord(k) - res.control.coord(k)));
  CHECK(worst < 1e-6);
}

TEST_CASE("extracted slot fields are the kernel sums along the trajectory",
          "[registration]") {
  const MatchingProblem prob = small_problem(Formulation::Simultaneous);
  std::mt19937_64 rng(33);
  Control c = prob.zero_control();
  fill_control(c, rng, 0.3);

  const Grid2 g{9, 9, 0.125};
  const std::vector<double> times{0.0, 0.5, 1.0};
  const auto paths = control_slot_paths(prob, c, g, times);
  REQUIRE(paths.size() == 2);

  // At t = 0 the carrier sits at the sources; check the direct kernel sum.
  const auto& q0 = prob.source_landmarks().points;
  double worst = 0.0;
  for (std::size_t s = 0; s < 2; ++s)
    for (int i = 0; i < g.nx; ++i)
      for (int j = 0; j < g.ny; ++j) {
        const Vec2 x = g.node(i, j);
        Vec2 acc{};
        for (std::size_t b = 0; b < q0.size(); ++b)
          acc += prob.kernel.eval_scale(s, sqnorm(x - q0[b])) * c.at(0, s, b);
        const Vec2 got = paths[s].vel[0].at(i, j);
        worst = std::max({worst, std::abs(got.x - acc.x), std::abs(got.y - acc.y)});
      }
  CHECK(worst < 1e-15);

  // The summed path is the slotwise sum.
  const FlowPath sum = summed_control_path(prob, c, g, times);
  worst = 0.0;
  for (std::size_t m = 0; m < times.size(); ++m)
    for (std::size_t q = 0; q < sum.vel[m].values.size(); ++q) {
      const Vec2 got = sum.vel[m].values[q];
      const Vec2 want = paths[0].vel[m].values[q] + paths[1].vel[m].values[q];
      worst = std::max({worst, std::abs(got.x - want.x), std::abs(got.y - want.y)});
    }
  CHECK(worst < 1e-15);

  // Tuple components follow the ordering convention (slot order is coarse
  // to fine; CoarseLast lists the finest first).
  const ScaleTuple cl = control_scale_tuple(prob, c, Ordering::CoarseLast, g, times);
  CHECK(cl.scales[0].vel[0].values[40].x == paths[1].vel[0].values[40].x);
  const ScaleTuple cf = control_scale_tuple(prob, c, Ordering::CoarseFirst, g, times);
  CHECK(cf.scales[0].vel[0].values[40].x == paths[0].vel[0].values[40].x);

  CHECK_THROWS_AS(control_slot_paths(prob, c, g, {0.0, 1.5}), std::invalid_argument);
  CHECK_THROWS_AS(control_slot_paths(prob, Control::zeros(4, 3, 3), g, times),
                  std::invalid_argument);
  CHECK_THROWS_AS(control_slot_paths(prob, Control::zeros(4, 2, 5), g, times),
                  std::invalid_argument);
}

TEST_CASE("the equivalence report tabulates every formulation", "[registration]") {
  std::mt19937_64 rng(34);
  MatchingProblem prob = small_problem(Formulation::SumOfKernels);
  Control c = prob.zero_control();
  fill_control(c, rng, 0.2);

  EquivalenceOptions opt;
  opt.grid = Grid2{17, 17, 1.0 / 16.0};
  opt.decay_base_steps = 4;
  opt.decay_levels = 2;
  opt.run_decay = false;

  const EquivalenceReport rep = equivalence_report(prob, c, opt);
  CHECK(rep.reference == "sum_of_kernels");
  REQUIRE(rep.rows.size() == 4);
  CHECK(rep.rows[0].formulation == "sum_of_kernels");
  CHECK(rep.rows[0].bit_exact);
  CHECK(rep.rows[0].delta_rel == 0.0);
  CHECK(rep.rows[1].formulation == "simultaneous");
  CHECK(rep.rows[1].delta_rel < 1e-6);
  CHECK(std::isfinite(rep.rows[1].sup_dist));
  CHECK(rep.rows[2].formulation == "sdp_coarse_last");
  CHECK(rep.rows[3].formulation == "sdp_coarse_first");
  CHECK(std::isnan(rep.rows[2].ratio1));  // decay study switched off

  MatchingProblem cont = prob.with_formulation(Formulation::IntegralKernel);
  cont.kernel = KernelSpec::continuum(0.0, 1.0, 4, 0.08, 0.35);
  Control cc = cont.zero_control();
  fill_control(cc, rng, 0.2);
  const EquivalenceReport rep2 = equivalence_report(cont, cc, opt);
  REQUIRE(rep2.rows.size() == 5);
  CHECK(rep2.rows[1].formulation == "sum_of_kernels_binned");
  CHECK(rep2.rows[1].bit_exact);
  CHECK(rep2.rows[2].formulation == "kernel_bundle");

  CHECK_THROWS_AS(
      equivalence_report(prob.with_formulation(Formulation::Simultaneous),
                         Control::zeros(prob.time_steps, 2, 3), opt),
      std::invalid_argument);
}

TEST_CASE("the reconstruction decay study reports one error per level",
          "[registration]") {
  std::mt19937_64 rng(35);
  const MatchingProblem prob = small_problem(Formulation::Simultaneous);
  Control c = prob.zero_control();
  {
    // Time-constant momenta keep the summed path smooth enough for the
    // first-order decay to show on a 4->8 step ladder.
    std::uniform_real_distribution<double> u(-0.2, 0.2);
    for (std::size_t s = 0; s < c.n_slots; ++s)
      for (std::size_t a = 0; a < c.n_points; ++a) {
        const Vec2 v{u(rng), u(rng)};
        for (int m = 0; m < c.time_steps; ++m) c.at(m, s, a) = v;
      }
  }

  const Grid2 g{17, 17, 1.0 / 16.0};
  const DecayStudy study = sdp_decay_study(prob, c, Ordering::CoarseLast, g, 4, 2);
  REQUIRE(study.steps.size() == 2);
  CHECK(study.steps[0] == 4);
  CHECK(study.steps[1] == 8);
  REQUIRE(study.errors.size() == 2);
  REQUIRE(study.ratios.size() == 1);
  for (double e : study.errors) {
    CHECK(std::isfinite(e));
    CHECK(e > 0.0);
  }
  CHECK(study.ratios[0] > 1.0);  // halving the step must help; the rate is pinned elsewhere

  CHECK_THROWS_AS(sdp_decay_study(prob, c, Ordering::CoarseLast, g, 0, 2),
                  std::invalid_argument);
  CHECK_THROWS_AS(sdp_decay_study(prob, c, Ordering::CoarseLast, g, 4, 1),
                  std::invalid_argument);
}
