#pragma once

// Matching problems driven by kernel momenta: the time-discrete energies of
// the six formulations, their exact adjoint gradients, backtracking gradient
// descent, the shared-momentum projection between controls, grid extraction
// of per-scale velocity fields along an optimized trajectory, reconstruction
// decay studies, and the cross-formulation equivalence report.
//
// Discrete model for landmark problems (M steps, dt = 1/M, t_m = m dt):
//
//   velocity   v^m(x)    = sum_s sum_b k_s(|x - X^m_b|^2) p^m_{s,b}
//   positions  X^{m+1}_a = X^m_a + dt * v^m(X^m_a)
//   energy     E = dt * sum_m sum_s p^m_s' G_s(X^m) p^m_s
//                  + data_weight * sum_a |X^M_a - target_a|^2
//
// where s runs over the formulation's momentum slots: one shared slot whose
// kernel is the whole mixture (sum-of-kernels, integral-kernel), or one slot
// per scale of the mixture (simultaneous, the two semidirect formulations,
// kernel-bundle over quadrature bins). Image problems reuse the same chain on
// a static grid carrier, advected backward so the data term compares
// source(phi^{-1}(x)) with the target; they are experimental and capped at
// 64x64 nodes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "msdiffeo/fields.hpp"
#include "msdiffeo/flows.hpp"
#include "msdiffeo/kernels.hpp"
#include "msdiffeo/semidirect.hpp"

namespace msdiffeo {

// ---------------------------------------------------------------------------
// Formulations and controls.
// ---------------------------------------------------------------------------

enum class Formulation {
  SumOfKernels,    // one momentum, kernel = the whole finite mixture
  Simultaneous,    // one momentum per scale of a finite mixture
  SdpCoarseLast,   // simultaneous energy; factors ordered fine -> coarse
  SdpCoarseFirst,  // simultaneous energy; factors ordered coarse -> fine
  IntegralKernel,  // one momentum, kernel = quadrature of a scale continuum
  KernelBundle,    // one momentum per quadrature bin of a scale continuum
};

inline const char* formulation_name(Formulation f) {
  switch (f) {
    case Formulation::SumOfKernels: return "sum_of_kernels";
    case Formulation::Simultaneous: return "simultaneous";
    case Formulation::SdpCoarseLast: return "sdp_coarse_last";
    case Formulation::SdpCoarseFirst: return "sdp_coarse_first";
    case Formulation::IntegralKernel: return "integral_kernel";
    case Formulation::KernelBundle: return "kernel_bundle";
  }
  throw std::logic_error("unreachable formulation tag");
}

inline Formulation formulation_from_name(const std::string& s) {
  if (s == "sum_of_kernels") return Formulation::SumOfKernels;
  if (s == "simultaneous") return Formulation::Simultaneous;
  if (s == "sdp_coarse_last") return Formulation::SdpCoarseLast;
  if (s == "sdp_coarse_first") return Formulation::SdpCoarseFirst;
  if (s == "integral_kernel") return Formulation::IntegralKernel;
  if (s == "kernel_bundle") return Formulation::KernelBundle;
  throw std::invalid_argument("unknown formulation: " + s);
}

// Momentum control: one covector per (time step, momentum slot, carrier
// point). Slot count is 1 for shared-momentum formulations and the number of
// scales (or quadrature bins) otherwise.
struct Control {
  int time_steps = 0;
  std::size_t n_slots = 0;
  std::size_t n_points = 0;
  std::vector<Vec2> p;  // [(m * n_slots + s) * n_points + a]

  static Control zeros(int time_steps, std::size_t n_slots, std::size_t n_points) {
    if (time_steps < 1 || n_slots == 0 || n_points == 0)
      throw std::invalid_argument("control needs positive steps, slots, and points");
    Control c;
    c.time_steps = time_steps;
    c.n_slots = n_slots;
    c.n_points = n_points;
    c.p.assign(static_cast<std::size_t>(time_steps) * n_slots * n_points, Vec2{});
    return c;
  }

  Vec2& at(int m, std::size_t s, std::size_t a) {
    return p[(static_cast<std::size_t>(m) * n_slots + s) * n_points + a];
  }
  const Vec2& at(int m, std::size_t s, std::size_t a) const {
    return p[(static_cast<std::size_t>(m) * n_slots + s) * n_points + a];
  }

  std::size_t size() const { return p.size(); }
  std::size_t n_coords() const { return 2 * p.size(); }
  double coord(std::size_t k) const { return k % 2 == 0 ? p[k / 2].x : p[k / 2].y; }
  double& coord(std::size_t k) {
    return k % 2 == 0 ? p[k / 2].x : p[k / 2].y;
  }

  void check_finite() const {
    for (const Vec2& v : p)
      if (!finite(v)) throw std::invalid_argument("non-finite control covector");
  }
};

// Regularization per momentum slot plus the raw data mismatch; the total
// applies the data weight.
struct EnergyBreakdown {
  std::vector<double> reg_per_scale;
  double regularization = 0.0;
  double data = 0.0;   // raw squared distance (unweighted)
  double total = 0.0;  // regularization + data_weight * data
};

struct OptimizerConfig {
  int max_iters = 500;
  double step_init = 1.0;
  double backtrack_factor = 0.5;
  double armijo_c = 1e-4;
  double grad_tol = 1e-10;       // stop when the gradient norm drops below
  double energy_rel_tol = 1e-14; // stop when the relative drop falls below
  int fd_check_interval = 50;    // audit the gradient every k-th iterate (0: off)
  double fd_check_step = 1e-6;
  int fd_check_max_coords = 256;

  void validate() const {
    if (max_iters < 0) throw std::invalid_argument("optimizer max_iters must be nonnegative");
    if (!(step_init > 0.0)) throw std::invalid_argument("optimizer step_init must be positive");
    if (!(backtrack_factor > 0.0) || !(backtrack_factor < 1.0))
      throw std::invalid_argument("optimizer backtrack_factor must lie in (0,1)");
    if (!(armijo_c > 0.0) || !(armijo_c < 1.0))
      throw std::invalid_argument("optimizer armijo_c must lie in (0,1)");
    if (!(grad_tol >= 0.0) || !(energy_rel_tol >= 0.0))
      throw std::invalid_argument("optimizer stop tolerances must be nonnegative");
  }
};

struct MatchingProblem {
  std::variant<LandmarkSet, ScalarField> source;
  std::variant<LandmarkSet, ScalarField> target;
  double data_weight = 0.0;  // 1/(2 sigma^2)
  KernelSpec kernel;
  int time_steps = 10;
  Formulation formulation = Formulation::SumOfKernels;
  std::vector<double> scale_edges;  // kernel-bundle binning; empty = one bin per node

  bool is_landmark() const { return std::holds_alternative<LandmarkSet>(source); }

  const LandmarkSet& source_landmarks() const { return std::get<LandmarkSet>(source); }
  const LandmarkSet& target_landmarks() const { return std::get<LandmarkSet>(target); }
  const ScalarField& source_image() const { return std::get<ScalarField>(source); }
  const ScalarField& target_image() const { return std::get<ScalarField>(target); }

  std::size_t carrier_size() const {
    return is_landmark() ? source_landmarks().size() : source_image().grid.size();
  }

  MatchingProblem with_formulation(Formulation f) const {
    MatchingProblem p = *this;
    p.formulation = f;
    return p;
  }

  void validate() const;  // defined after the formulation view below

  std::size_t slots() const;
  Control zero_control() const;
};

// Diameter of the problem's ambient box: landmark bounding box (source and
// target together) or the image grid box.
inline double domain_diameter(const MatchingProblem& prob) {
  if (prob.is_landmark()) {
    double lox = std::numeric_limits<double>::infinity(), loy = lox;
    double hix = -lox, hiy = -lox;
    auto absorb = [&](const LandmarkSet& q) {
      for (const Vec2& p : q.points) {
        lox = std::min(lox, p.x);
        loy = std::min(loy, p.y);
        hix = std::max(hix, p.x);
        hiy = std::max(hiy, p.y);
      }
    };
    absorb(prob.source_landmarks());
    absorb(prob.target_landmarks());
    const double d = std::hypot(hix - lox, hiy - loy);
    return d > 0.0 ? d : 1.0;
  }
  const Grid2& g = prob.source_image().grid;
  return std::hypot(g.x_max() - g.ox, g.y_max() - g.oy);
}

// ---------------------------------------------------------------------------
// Momentum-slot view of a formulation: which effective kernel spec the energy
// runs over and whether all scales share one momentum. Shared slots evaluate
// the whole mixture in one flat pass, so a continuum spec and its binned
// finite twin produce bitwise identical energies.
// ---------------------------------------------------------------------------

namespace detail {

struct FormulationView {
  KernelSpec effective;
  bool shared = true;
  std::size_t n_slots = 1;

  double eval(std::size_t slot, double r2) const {
    return shared ? effective.eval(r2) : effective.eval_scale(slot, r2);
  }
  double eval_d(std::size_t slot, double r2) const {
    return shared ? effective.eval_d(r2) : effective.eval_scale_d(slot, r2);
  }
};

inline FormulationView view_for(const KernelSpec& kernel, Formulation f,
                                const std::vector<double>& scale_edges) {
  FormulationView v;
  switch (f) {
    case Formulation::SumOfKernels:
      if (kernel.mode != KernelMode::Finite)
        throw std::invalid_argument("sum-of-kernels formulation needs a finite kernel mixture");
      v.effective = kernel;
      v.shared = true;
      v.n_slots = 1;
      return v;
    case Formulation::IntegralKernel:
      if (kernel.mode != KernelMode::Continuum)
        throw std::invalid_argument("integral-kernel formulation needs a continuum kernel");
      v.effective = kernel;
      v.shared = true;
      v.n_slots = 1;
      return v;
    case Formulation::Simultaneous:
    case Formulation::SdpCoarseLast:
    case Formulation::SdpCoarseFirst:
      if (kernel.mode != KernelMode::Finite)
        throw std::invalid_argument("per-scale formulations need a finite kernel mixture");
      v.effective = kernel;
      v.shared = false;
      v.n_slots = kernel.components.size();
      return v;
    case Formulation::KernelBundle:
      if (kernel.mode != KernelMode::Continuum)
        throw std::invalid_argument("kernel-bundle formulation needs a continuum kernel");
      v.effective = scale_edges.empty()
                        ? kernel.per_node_bins()
                        : kernel.bin_continuum(std::span<const double>(scale_edges));
      v.shared = false;
      v.n_slots = v.effective.components.size();
      return v;
  }
  throw std::logic_error("unreachable formulation tag");
}

inline FormulationView view_for(const MatchingProblem& prob) {
  return view_for(prob.kernel, prob.formulation, prob.scale_edges);
}

// View matching a control's slot count rather than the problem's own
// formulation tag: 1 slot means shared momentum, several mean per-scale.
inline FormulationView view_for_slots(const MatchingProblem& prob, std::size_t n_slots) {
  const bool finite = prob.kernel.mode == KernelMode::Finite;
  if (n_slots == 1)
    return view_for(prob.kernel,
                    finite ? Formulation::SumOfKernels : Formulation::IntegralKernel,
                    prob.scale_edges);
  FormulationView v = view_for(prob.kernel,
                               finite ? Formulation::Simultaneous : Formulation::KernelBundle,
                               prob.scale_edges);
  if (v.n_slots != n_slots)
    throw std::invalid_argument("control slot count does not match the kernel's scale structure");
  return v;
}

inline void check_control_shape(const MatchingProblem& prob, const FormulationView& view,
                                const Control& c) {
  if (c.time_steps != prob.time_steps || c.n_slots != view.n_slots ||
      c.n_points != prob.carrier_size())
    throw std::invalid_argument("control shape does not match the problem");
  if (c.p.size() != static_cast<std::size_t>(c.time_steps) * c.n_slots * c.n_points)
    throw std::invalid_argument("control storage size mismatch");
}

}  // namespace detail

inline void MatchingProblem::validate() const {
  if (source.index() != target.index())
    throw std::invalid_argument("source and target must both be landmarks or both be images");
  if (is_landmark()) {
    if (source_landmarks().size() == 0)
      throw std::invalid_argument("landmark problem needs at least one point");
    if (source_landmarks().size() != target_landmarks().size())
      throw std::invalid_argument("source and target landmark counts differ");
  } else {
    require_same_grid(source_image().grid, target_image().grid);
    if (source_image().grid.size() > 64 * 64)
      throw std::invalid_argument("image matching is experimental and capped at 64x64 grids");
    source_image().check_finite();
    target_image().check_finite();
  }
  if (!(data_weight > 0.0) || !std::isfinite(data_weight))
    throw std::invalid_argument("data weight must be positive and finite");
  if (time_steps < 1) throw std::invalid_argument("time step count must be positive");
  (void)detail::view_for(*this);  // surfaces kernel/formulation mismatches
}

inline std::size_t MatchingProblem::slots() const { return detail::view_for(*this).n_slots; }

inline Control MatchingProblem::zero_control() const {
  return Control::zeros(time_steps, slots(), carrier_size());
}

// ---------------------------------------------------------------------------
// Energy and gradient.
// ---------------------------------------------------------------------------

namespace detail {

// Summed-slot velocity at the carrier points themselves.
inline std::vector<Vec2> carrier_velocity(const FormulationView& view,
                                          const std::vector<Vec2>& x, const Control& c, int m) {
  const std::size_t n = x.size();
  std::vector<Vec2> v(n, Vec2{});
  for (std::size_t s = 0; s < view.n_slots; ++s)
    for (std::size_t a = 0; a < n; ++a) {
      Vec2 acc{};
      for (std::size_t b = 0; b < n; ++b)
        acc += view.eval(s, sqnorm(x[a] - x[b])) * c.at(m, s, b);
      v[a] += acc;
    }
  return v;
}

// Forward Euler chain of the landmark positions; X[m][a] for m = 0..M.
inline std::vector<std::vector<Vec2>> landmark_chain(const FormulationView& view,
                                                     const std::vector<Vec2>& q0,
                                                     const Control& c) {
  const int M = c.time_steps;
  const double dt = 1.0 / M;
  std::vector<std::vector<Vec2>> X(M + 1);
  X[0] = q0;
  for (int m = 0; m < M; ++m) {
    const std::vector<Vec2> v = carrier_velocity(view, X[m], c, m);
    X[m + 1].resize(q0.size());
    for (std::size_t a = 0; a < q0.size(); ++a) X[m + 1][a] = X[m][a] + dt * v[a];
    check_state_finite(X[m + 1]);
  }
  return X;
}

inline EnergyBreakdown eval_landmarks(const MatchingProblem& prob, const FormulationView& view,
                                      const Control& c, Control* grad,
                                      std::vector<std::vector<Vec2>>* trajectory) {
  const std::vector<Vec2>& q0 = prob.source_landmarks().points;
  const std::vector<Vec2>& q1 = prob.target_landmarks().points;
  const int M = prob.time_steps;
  const double dt = 1.0 / M;
  const std::size_t n = q0.size(), S = view.n_slots;

  std::vector<std::vector<Vec2>> X = landmark_chain(view, q0, c);

  EnergyBreakdown e;
  e.reg_per_scale.assign(S, 0.0);
  for (int m = 0; m < M; ++m)
    for (std::size_t s = 0; s < S; ++s) {
      double acc = 0.0;
      for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b)
          acc += view.eval(s, sqnorm(X[m][a] - X[m][b])) * dot(c.at(m, s, a), c.at(m, s, b));
      e.reg_per_scale[s] += dt * acc;
    }
  for (double r : e.reg_per_scale) e.regularization += r;
  for (std::size_t a = 0; a < n; ++a) e.data += sqnorm(X[M][a] - q1[a]);
  e.total = e.regularization + prob.data_weight * e.data;

  if (grad) {
    *grad = Control::zeros(M, S, n);
    // Adjoint of the chain: lambda^M = d(data term)/dX^M, then backward.
    std::vector<Vec2> lambda(n);
    for (std::size_t a = 0; a < n; ++a) lambda[a] = 2.0 * prob.data_weight * (X[M][a] - q1[a]);
    for (int m = M - 1; m >= 0; --m) {
      const std::vector<Vec2>& x = X[m];
      // d E / d p^m while lambda still holds lambda^{m+1}.
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t a = 0; a < n; ++a) {
          Vec2 gp{}, gl{};
          for (std::size_t b = 0; b < n; ++b) {
            const double k = view.eval(s, sqnorm(x[a] - x[b]));
            gp += k * c.at(m, s, b);
            gl += k * lambda[b];
          }
          grad->at(m, s, a) = dt * (2.0 * gp + gl);
        }
      // lambda^m from lambda^{m+1}: kernel-derivative terms of the
      // regularization and of the step map.
      std::vector<Vec2> next(n);
      for (std::size_t a = 0; a < n; ++a) {
        Vec2 acc = lambda[a];
        for (std::size_t s = 0; s < S; ++s)
          for (std::size_t b = 0; b < n; ++b) {
            const Vec2 d = x[a] - x[b];
            const double kd = view.eval_d(s, sqnorm(d));
            const double w = 4.0 * kd * dot(c.at(m, s, a), c.at(m, s, b)) +
                             2.0 * kd * (dot(c.at(m, s, b), lambda[a]) +
                                         dot(c.at(m, s, a), lambda[b]));
            acc += (dt * w) * d;
          }
        next[a] = acc;
      }
      lambda = std::move(next);
    }
  }

  if (trajectory) *trajectory = std::move(X);
  return e;
}

// Image problems: static grid carrier, one velocity field per step, grid
// nodes advected BACKWARD through the reversed control so the endpoint
// samples phi^{-1}; data = h^2-weighted squared L2 mismatch of
// source(phi^{-1}(x)) against target(x).
inline EnergyBreakdown eval_images(const MatchingProblem& prob, const FormulationView& view,
                                   const Control& c, Control* grad) {
  const ScalarField& src = prob.source_image();
  const ScalarField& tgt = prob.target_image();
  const Grid2& g = src.grid;
  const int M = prob.time_steps;
  const double dt = 1.0 / M;
  const std::size_t n = g.size(), S = view.n_slots;
  const double w = g.h * g.h;  // carrier weight

  std::vector<Vec2> nodes(n);
  for (int i = 0; i < g.nx; ++i)
    for (int j = 0; j < g.ny; ++j) nodes[g.idx(i, j)] = g.node(i, j);

  // Backward chain xi^0 = id, xi^{mb+1} = xi^mb - dt v^{M-1-mb}(xi^mb).
  std::vector<std::vector<Vec2>> Xi(M + 1);
  Xi[0] = nodes;
  for (int mb = 0; mb < M; ++mb) {
    const int mr = M - 1 - mb;
    const std::vector<Vec2>& x = Xi[mb];
    Xi[mb + 1].resize(n);
    for (std::size_t a = 0; a < n; ++a) {
      Vec2 v{};
      for (std::size_t s = 0; s < S; ++s) {
        Vec2 acc{};
        for (std::size_t b = 0; b < n; ++b)
          acc += view.eval(s, sqnorm(x[a] - nodes[b])) * c.at(mr, s, b);
        v += acc;
      }
      Xi[mb + 1][a] = x[a] - (dt * w) * v;
    }
    check_state_finite(Xi[mb + 1]);
  }

  EnergyBreakdown e;
  e.reg_per_scale.assign(S, 0.0);
  for (int m = 0; m < M; ++m)
    for (std::size_t s = 0; s < S; ++s) {
      double acc = 0.0;
      for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b)
          acc += view.eval(s, sqnorm(nodes[a] - nodes[b])) * dot(c.at(m, s, a), c.at(m, s, b));
      e.reg_per_scale[s] += dt * w * w * acc;
    }
  for (double r : e.reg_per_scale) e.regularization += r;
  std::vector<double> resid(n);
  for (std::size_t a = 0; a < n; ++a) {
    resid[a] = interpolate(src, Xi[M][a]) - tgt.values[a];
    e.data += resid[a] * resid[a];
  }
  e.data *= w;
  e.total = e.regularization + prob.data_weight * e.data;

  if (grad) {
    *grad = Control::zeros(M, S, n);
    // Regularization part: static Gram, independent of the chain.
    for (int m = 0; m < M; ++m)
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t a = 0; a < n; ++a) {
          Vec2 gp{};
          for (std::size_t b = 0; b < n; ++b)
            gp += view.eval(s, sqnorm(nodes[a] - nodes[b])) * c.at(m, s, b);
          grad->at(m, s, a) += (2.0 * dt * w * w) * gp;
        }
    // Data part: adjoint of the backward chain.
    std::vector<Vec2> lambda(n);
    for (std::size_t a = 0; a < n; ++a)
      lambda[a] = (2.0 * prob.data_weight * w * resid[a]) * interpolate_gradient(src, Xi[M][a]);
    for (int mb = M - 1; mb >= 0; --mb) {
      const int mr = M - 1 - mb;
      const std::vector<Vec2>& x = Xi[mb];
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t b = 0; b < n; ++b) {
          Vec2 gl{};
          for (std::size_t a = 0; a < n; ++a)
            gl += view.eval(s, sqnorm(x[a] - nodes[b])) * lambda[a];
          grad->at(mr, s, b) += (-dt * w) * gl;
        }
      std::vector<Vec2> next(n);
      for (std::size_t a = 0; a < n; ++a) {
        Vec2 acc = lambda[a];
        for (std::size_t s = 0; s < S; ++s)
          for (std::size_t b = 0; b < n; ++b) {
            const Vec2 d = x[a] - nodes[b];
            const double kd = view.eval_d(s, sqnorm(d));
            acc += (-dt * w * 2.0 * kd * dot(c.at(mr, s, b), lambda[a])) * d;
          }
        next[a] = acc;
      }
      lambda = std::move(next);
    }
  }
  return e;
}

inline EnergyBreakdown eval_energy(const MatchingProblem& prob, const Control& c, Control* grad,
                                   std::vector<std::vector<Vec2>>* trajectory) {
  prob.validate();
  c.check_finite();
  const FormulationView view = view_for(prob);
  check_control_shape(prob, view, c);
  if (prob.is_landmark()) return eval_landmarks(prob, view, c, grad, trajectory);
  if (trajectory)
    throw std::invalid_argument("landmark trajectories are undefined for image problems");
  return eval_images(prob, view, c, grad);
}

}  // namespace detail

inline EnergyBreakdown energy(const MatchingProblem& prob, const Control& c) {
  return detail::eval_energy(prob, c, nullptr, nullptr);
}

inline EnergyBreakdown energy_and_gradient(const MatchingProblem& prob, const Control& c,
                                           Control& grad) {
  return detail::eval_energy(prob, c, &grad, nullptr);
}

// Euler-chain positions X[m][a] of a landmark problem under a control.
inline std::vector<std::vector<Vec2>> landmark_trajectory(const MatchingProblem& prob,
                                                          const Control& c) {
  std::vector<std::vector<Vec2>> X;
  detail::eval_energy(prob, c, nullptr, &X);
  return X;
}

// Relative discrepancy between the adjoint gradient and central finite
// differences. Checks every coordinate up to max_coords (0 = all), striding
// uniformly beyond that.
inline double gradient_fd_error(const MatchingProblem& prob, const Control& c,
                                double fd_step = 1e-6, int max_coords = 0) {
  Control grad;
  (void)energy_and_gradient(prob, c, grad);
  const std::size_t total = c.n_coords();
  std::size_t stride = 1;
  if (max_coords > 0 && total > static_cast<std::size_t>(max_coords))
    stride = (total + max_coords - 1) / max_coords;
  double diff2 = 0.0, ref2 = 0.0;
  Control probe = c;
  for (std::size_t k = 0; k < total; k += stride) {
    const double saved = probe.coord(k);
    probe.coord(k) = saved + fd_step;
    const double ep = energy(prob, probe).total;
    probe.coord(k) = saved - fd_step;
    const double em = energy(prob, probe).total;
    probe.coord(k) = saved;
    const double fd = (ep - em) / (2.0 * fd_step);
    const double d = grad.coord(k) - fd;
    diff2 += d * d;
    ref2 += fd * fd;
  }
  return std::sqrt(diff2) / std::max(std::sqrt(ref2), 1e-300);
}

// ---------------------------------------------------------------------------
// Optimizer: gradient descent with Armijo backtracking. The energy history is
// monotone nonincreasing by construction (steps are only accepted on
// sufficient decrease).
// ---------------------------------------------------------------------------

struct IterRecord {
  int iter = 0;
  double total = 0.0, reg = 0.0, data = 0.0;
  double step = 0.0;
  double grad_norm = 0.0;
};

struct OptimizeResult {
  Control control;
  EnergyBreakdown energy;
  std::vector<IterRecord> history;
  bool converged = false;
  std::string stop_reason;
  int iterations = 0;
  int fd_checks_run = 0;
  double fd_worst_rel_error = 0.0;
};

inline OptimizeResult optimize(const MatchingProblem& prob, const OptimizerConfig& cfg,
                               const Control* init = nullptr) {
  cfg.validate();
  prob.validate();
  OptimizeResult res;
  res.control = init ? *init : prob.zero_control();

  Control grad;
  EnergyBreakdown e = energy_and_gradient(prob, res.control, grad);
  auto norm_of = [](const Control& g) {
    double acc = 0.0;
    for (const Vec2& v : g.p) acc += sqnorm(v);
    return std::sqrt(acc);
  };
  double gnorm = norm_of(grad);
  res.history.push_back({0, e.total, e.regularization, e.data, 0.0, gnorm});

  double step = cfg.step_init;
  constexpr double kMinStep = 1e-18;
  for (int iter = 1; iter <= cfg.max_iters; ++iter) {
    if (gnorm <= cfg.grad_tol) {
      res.converged = true;
      res.stop_reason = "gradient-norm";
      break;
    }
    if (cfg.fd_check_interval > 0 && iter % cfg.fd_check_interval == 0) {
      const double err = gradient_fd_error(prob, res.control, cfg.fd_check_step,
                                           cfg.fd_check_max_coords);
      ++res.fd_checks_run;
      res.fd_worst_rel_error = std::max(res.fd_worst_rel_error, err);
    }

    const double g2 = gnorm * gnorm;
    bool accepted = false;
    Control candidate;
    EnergyBreakdown e_cand;
    while (step >= kMinStep) {
      candidate = res.control;
      for (std::size_t k = 0; k < candidate.p.size(); ++k)
        candidate.p[k] -= step * grad.p[k];
      bool blew_up = false;
      try {
        e_cand = energy(prob, candidate);
      } catch (const std::runtime_error&) {
        blew_up = true;  // overlong trial step; treat as rejection
      }
      if (!blew_up && std::isfinite(e_cand.total) &&
          e_cand.total <= e.total - cfg.armijo_c * step * g2) {
        accepted = true;
        break;
      }
      step *= cfg.backtrack_factor;
    }
    if (!accepted) {
      res.stop_reason = "step-underflow";
      break;
    }

    const double drop = e.total - e_cand.total;
    res.control = std::move(candidate);
    e = energy_and_gradient(prob, res.control, grad);
    gnorm = norm_of(grad);
    res.history.push_back({iter, e.total, e.regularization, e.data, step, gnorm});
    res.iterations = iter;

    if (drop <= cfg.energy_rel_tol * std::max(std::abs(e.total) + drop, 1e-300)) {
      res.converged = true;
      res.stop_reason = "energy-change";
      break;
    }
    step *= 2.0;
  }
  if (res.stop_reason.empty()) {
    if (gnorm <= cfg.grad_tol) {
      res.converged = true;
      res.stop_reason = "gradient-norm";
    } else {
      res.stop_reason = "max-iters";
    }
  }
  res.energy = e;
  return res;
}

// ---------------------------------------------------------------------------
// Shared-momentum projection between controls. The control's summed velocity
// at the moving carrier is re-expressed through the full mixture's Gram
// system, and the resulting momentum is replicated across the target slots:
// the minimal-norm per-scale decomposition of one velocity places the SAME
// momentum behind every scale kernel.
// ---------------------------------------------------------------------------

inline Control project_control(const MatchingProblem& prob, const Control& c,
                               std::size_t target_slots) {
  if (!prob.is_landmark())
    throw std::invalid_argument("scale projection of image controls is not supported");
  prob.validate();
  const detail::FormulationView view = detail::view_for_slots(prob, c.n_slots);
  detail::check_control_shape(prob, view, c);
  const std::size_t n = c.n_points;
  std::vector<std::vector<Vec2>> X = detail::landmark_chain(view, prob.source_landmarks().points, c);

  Control out = Control::zeros(c.time_steps, target_slots, n);
  for (int m = 0; m < c.time_steps; ++m) {
    const std::vector<Vec2> v = detail::carrier_velocity(view, X[m], c, m);
    GramSystem sys(prob.kernel, std::span<const Vec2>(X[m]));
    const std::vector<Vec2> shared = sys.solve(v);
    for (std::size_t s = 0; s < target_slots; ++s)
      for (std::size_t a = 0; a < n; ++a) out.at(m, s, a) = shared[a];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grid extraction of the control's velocity fields along its own trajectory.
// Positions between chain nodes follow the Euler segments exactly; the
// momentum is the interval's. Slot order is the kernel's (coarse to fine).
// ---------------------------------------------------------------------------

inline std::vector<FlowPath> control_slot_paths(const MatchingProblem& prob, const Control& c,
                                                const Grid2& g,
                                                const std::vector<double>& times) {
  if (!prob.is_landmark())
    throw std::invalid_argument("field extraction is defined for landmark problems only");
  prob.validate();
  const detail::FormulationView view = detail::view_for_slots(prob, c.n_slots);
  detail::check_control_shape(prob, view, c);
  const int M = c.time_steps;
  const std::size_t n = c.n_points, S = view.n_slots;
  std::vector<std::vector<Vec2>> X =
      detail::landmark_chain(view, prob.source_landmarks().points, c);

  // Carrier position and momentum interval per requested time.
  std::vector<std::vector<Vec2>> pos(times.size(), std::vector<Vec2>(n));
  std::vector<int> interval(times.size());
  for (std::size_t mt = 0; mt < times.size(); ++mt) {
    const double t = times[mt];
    if (t < 0.0 || t > 1.0)
      throw std::invalid_argument("field extraction times must lie in [0,1]");
    const int m = std::min(static_cast<int>(t * M), M - 1);
    const double alpha = t * M - m;
    interval[mt] = m;
    for (std::size_t b = 0; b < n; ++b)
      pos[mt][b] = X[m][b] + alpha * (X[m + 1][b] - X[m][b]);
  }

  std::vector<FlowPath> out;
  out.reserve(S);
  for (std::size_t s = 0; s < S; ++s) {
    std::vector<VectorField> vel(times.size(), VectorField(g));
    for (std::size_t mt = 0; mt < times.size(); ++mt) {
      const int m = interval[mt];
      for (int i = 0; i < g.nx; ++i)
        for (int j = 0; j < g.ny; ++j) {
          const Vec2 x = g.node(i, j);
          Vec2 acc{};
          for (std::size_t b = 0; b < n; ++b)
            acc += view.eval(s, sqnorm(x - pos[mt][b])) * c.at(m, s, b);
          vel[mt].at(i, j) = acc;
        }
    }
    out.emplace_back(g, times, std::move(vel));
  }
  return out;
}

inline FlowPath summed_control_path(const MatchingProblem& prob, const Control& c,
                                    const Grid2& g, const std::vector<double>& times) {
  std::vector<FlowPath> paths = control_slot_paths(prob, c, g, times);
  FlowPath out = std::move(paths.front());
  for (std::size_t s = 1; s < paths.size(); ++s)
    for (std::size_t m = 0; m < out.vel.size(); ++m) out.vel[m] += paths[s].vel[m];
  return out;
}

// Scale tuple of the control's per-slot fields in the ordering's component
// convention: component 1 is the finest scale under CoarseLast and the
// coarsest under CoarseFirst.
inline ScaleTuple control_scale_tuple(const MatchingProblem& prob, const Control& c,
                                      Ordering ordering, const Grid2& g,
                                      const std::vector<double>& times) {
  std::vector<FlowPath> paths = control_slot_paths(prob, c, g, times);  // coarse -> fine
  if (ordering == Ordering::CoarseLast) std::reverse(paths.begin(), paths.end());
  return ScaleTuple(ordering, std::move(paths));
}

// ---------------------------------------------------------------------------
// Reconstruction decay study: per-scale factors are rebuilt from the control
// at a ladder of time resolutions with a first-order integrator, composed,
// and compared against a high-order flow of the summed field. The sup error
// should halve with the step.
// ---------------------------------------------------------------------------

struct DecayStudy {
  Ordering ordering = Ordering::CoarseLast;
  std::vector<int> steps;
  std::vector<double> errors;
  std::vector<double> ratios;  // errors[i] / errors[i+1]
};

inline DecayStudy sdp_decay_study(const MatchingProblem& prob, const Control& c, Ordering ordering,
                                  const Grid2& g, int base_steps, int levels = 3) {
  if (base_steps < 1 || levels < 2)
    throw std::invalid_argument("decay study needs positive steps and at least two levels");
  const int finest = base_steps << (levels - 1);
  const std::vector<double> ref_times = FlowPath::uniform_times(finest);
  const FlowPath ref_path = summed_control_path(prob, c, g, ref_times);
  const TimeIntegrator ref_ti{TimeIntegrator::Scheme::RK4, 2};
  const Diffeomorphism phi_ref = integrate_flow(ref_path, ref_ti).back();

  DecayStudy study;
  study.ordering = ordering;
  const TimeIntegrator euler{TimeIntegrator::Scheme::Euler, 1};
  for (int lvl = 0; lvl < levels; ++lvl) {
    const int steps = base_steps << lvl;
    const std::vector<double> times = FlowPath::uniform_times(steps);
    const ScaleTuple tuple = control_scale_tuple(prob, c, ordering, g, times);
    const Reconstruction rec = reconstruct(tuple, euler);
    study.steps.push_back(steps);
    study.errors.push_back(sup_distance(rec.total, phi_ref));
  }
  for (std::size_t i = 0; i + 1 < study.errors.size(); ++i)
    study.ratios.push_back(study.errors[i] / study.errors[i + 1]);
  return study;
}

// ---------------------------------------------------------------------------
// Equivalence report: evaluate the other formulations at the controls induced
// by one optimized control and tabulate energy deltas, final-map distances,
// and reconstruction decay ratios.
// ---------------------------------------------------------------------------

struct EquivalenceRow {
  std::string formulation;
  double total = 0.0, reg = 0.0, data = 0.0;
  double delta_rel = 0.0;  // |total - reference| / max(|reference|, eps)
  double sup_dist = std::numeric_limits<double>::quiet_NaN();
  double ratio1 = std::numeric_limits<double>::quiet_NaN();
  double ratio2 = std::numeric_limits<double>::quiet_NaN();
  bool bit_exact = false;  // set when asserted bitwise equal to the reference
};

struct EquivalenceReport {
  std::string reference;
  std::vector<EquivalenceRow> rows;
};

struct EquivalenceOptions {
  Grid2 grid;                 // report grid for flows and reconstructions
  int decay_base_steps = 20;  // keep the control's time nodes nested (multiple of M)
  int decay_levels = 3;
  bool run_decay = true;      // grid reconstruction studies are the expensive part
};

inline EquivalenceReport equivalence_report(const MatchingProblem& prob, const Control& c,
                                            const EquivalenceOptions& opt) {
  if (!prob.is_landmark())
    throw std::invalid_argument("the equivalence report is defined for landmark problems only");
  prob.validate();
  if (prob.slots() != 1)
    throw std::invalid_argument(
        "the equivalence report starts from a shared-momentum control; optimize under "
        "sum_of_kernels or integral_kernel");

  EquivalenceReport rep;
  rep.reference = formulation_name(prob.formulation);
  const EnergyBreakdown e0 = energy(prob, c);
  auto delta = [&](double total) {
    return std::abs(total - e0.total) / std::max(std::abs(e0.total), 1e-300);
  };

  const int finest = opt.decay_base_steps << (opt.decay_levels - 1);
  const std::vector<double> ref_times = FlowPath::uniform_times(finest);
  const TimeIntegrator ref_ti{TimeIntegrator::Scheme::RK4, 2};
  const Diffeomorphism phi_ref =
      integrate_flow(summed_control_path(prob, c, opt.grid, ref_times), ref_ti).back();

  rep.rows.push_back({rep.reference, e0.total, e0.regularization, e0.data, 0.0, 0.0,
                      std::numeric_limits<double>::quiet_NaN(),
                      std::numeric_limits<double>::quiet_NaN(), true});

  // Continuum reference: the finite mixture binned from the same quadrature
  // executes identical floating-point sums, so its energy must match bitwise.
  if (prob.kernel.mode == KernelMode::Continuum) {
    MatchingProblem binned = prob;
    binned.kernel = prob.scale_edges.empty()
                        ? prob.kernel.per_node_bins()
                        : prob.kernel.bin_continuum(std::span<const double>(prob.scale_edges));
    binned.formulation = Formulation::SumOfKernels;
    binned.scale_edges.clear();
    const EnergyBreakdown eb = energy(binned, c);
    EquivalenceRow row;
    row.formulation = "sum_of_kernels_binned";
    row.total = eb.total;
    row.reg = eb.regularization;
    row.data = eb.data;
    row.delta_rel = delta(eb.total);
    row.bit_exact = eb.total == e0.total && eb.regularization == e0.regularization &&
                    eb.data == e0.data;
    rep.rows.push_back(row);
  }

  // Per-scale control from the shared momentum.
  const Formulation multi_tag = prob.kernel.mode == KernelMode::Finite
                                    ? Formulation::Simultaneous
                                    : Formulation::KernelBundle;
  const MatchingProblem multi = prob.with_formulation(multi_tag);
  const Control c_pi = project_control(prob, c, multi.slots());
  {
    const EnergyBreakdown em = energy(multi, c_pi);
    const Diffeomorphism phi_pi =
        integrate_flow(summed_control_path(multi, c_pi, opt.grid, ref_times), ref_ti).back();
    EquivalenceRow row;
    row.formulation = formulation_name(multi_tag);
    row.total = em.total;
    row.reg = em.regularization;
    row.data = em.data;
    row.delta_rel = delta(em.total);
    row.sup_dist = sup_distance(phi_pi, phi_ref);
    rep.rows.push_back(row);
  }

  // Semidirect formulations: same functional, factors rebuilt per ordering.
  const std::pair<Formulation, Ordering> sdp_rows[] = {
      {Formulation::SdpCoarseLast, Ordering::CoarseLast},
      {Formulation::SdpCoarseFirst, Ordering::CoarseFirst},
  };
  for (const auto& [tag, ordering] : sdp_rows) {
    MatchingProblem sdp = multi;
    if (prob.kernel.mode == KernelMode::Finite) sdp.formulation = tag;
    const EnergyBreakdown es = energy(sdp, c_pi);
    EquivalenceRow row;
    row.formulation = formulation_name(tag);
    row.total = es.total;
    row.reg = es.regularization;
    row.data = es.data;
    row.delta_rel = delta(es.total);
    if (opt.run_decay) {
      const DecayStudy study =
          sdp_decay_study(sdp, c_pi, ordering, opt.grid, opt.decay_base_steps, opt.decay_levels);
      row.sup_dist = study.errors.back();
      if (study.ratios.size() >= 1) row.ratio1 = study.ratios[0];
      if (study.ratios.size() >= 2) row.ratio2 = study.ratios[1];
    }
    rep.rows.push_back(row);
  }
  return rep;
}

}  // namespace msdiffeo
