#pragma once

// Flows of time-dependent velocity fields and the resulting grid-sampled
// diffeomorphisms: forward/backward integration, inverse maps, composition,
// adjoint action on vector fields, and transport of images and landmarks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "msdiffeo/fields.hpp"

namespace msdiffeo {

// phi sampled at grid nodes, with an optional sampled inverse. Off-node
// evaluation interpolates the displacement phi - id bilinearly inside the
// grid box and extends the boundary cells' patches linearly outside it, so
// affine maps evaluate exactly everywhere.
struct Diffeomorphism {
  Grid2 grid;
  std::vector<Vec2> map;
  std::vector<Vec2> inv;  // empty when no inverse is attached

  Diffeomorphism() = default;
  explicit Diffeomorphism(const Grid2& g) : grid(g), map(g.size()) {
    for (int i = 0; i < g.nx; ++i)
      for (int j = 0; j < g.ny; ++j) map[g.idx(i, j)] = g.node(i, j);
  }

  static Diffeomorphism identity(const Grid2& g) {
    Diffeomorphism d(g);
    d.inv = d.map;
    return d;
  }

  bool has_inverse() const { return !inv.empty(); }

  Vec2 at(int i, int j) const { return map[grid.idx(i, j)]; }

  Vec2 operator()(Vec2 p) const { return eval_samples(grid, map, p); }

  Vec2 apply_inverse(Vec2 p) const {
    if (!has_inverse())
      throw std::runtime_error(
          "inverse map unavailable; integrate the flow with inverse enabled or use inverse_flow");
    return eval_samples(grid, inv, p);
  }

  // Interpolate map samples at p: bilinear on the displacement samples inside
  // the grid box; outside, the nearest boundary cell's bilinear patch extends
  // linearly, so affine maps stay exact beyond the box as well.
  static Vec2 eval_samples(const Grid2& g, std::span<const Vec2> samples, Vec2 p) {
    if (!finite(p)) throw std::invalid_argument("invalid query point");
    const double u = (p.x - g.ox) / g.h;
    const double v = (p.y - g.oy) / g.h;
    const double uc = std::min(std::max(u, 0.0), static_cast<double>(g.nx - 1));
    const double vc = std::min(std::max(v, 0.0), static_cast<double>(g.ny - 1));
    int i = std::min(static_cast<int>(uc), g.nx - 2);
    int j = std::min(static_cast<int>(vc), g.ny - 2);
    double fu = u - i, fv = v - j;
    auto disp = [&](int ii, int jj) -> Vec2 {
      return samples[g.idx(ii, jj)] - g.node(ii, jj);
    };
    Vec2 d00 = disp(i, j), d10 = disp(i + 1, j), d01 = disp(i, j + 1), d11 = disp(i + 1, j + 1);
    Vec2 d = (1 - fu) * ((1 - fv) * d00 + fv * d01) + fu * ((1 - fv) * d10 + fv * d11);
    return p + d;
  }

  // Jacobian of the map at a node from difference stencils on the samples.
  Mat2 jacobian_node(int i, int j) const {
    auto at_ij = [&](int ii, int jj) { return map[grid.idx(ii, jj)]; };
    Vec2 dx = detail::d_di<Vec2>(grid, at_ij, i, j);
    Vec2 dy = detail::d_dj<Vec2>(grid, at_ij, i, j);
    Mat2 m;
    m << dx.x, dy.x, dx.y, dy.y;
    return m;
  }

  // Jacobian at an arbitrary point: central differences of the interpolated
  // map with step h.
  Mat2 jacobian_point(Vec2 p) const {
    const double h = grid.h;
    Vec2 fxp = (*this)({p.x + h, p.y}), fxm = (*this)({p.x - h, p.y});
    Vec2 fyp = (*this)({p.x, p.y + h}), fym = (*this)({p.x, p.y - h});
    Mat2 m;
    m << (fxp.x - fxm.x) / (2 * h), (fyp.x - fym.x) / (2 * h),
         (fxp.y - fxm.y) / (2 * h), (fyp.y - fym.y) / (2 * h);
    return m;
  }

};

// The same map with forward and inverse samples swapped.
inline Diffeomorphism inverse_view(const Diffeomorphism& d) {
  if (!d.has_inverse())
    throw std::runtime_error(
        "inverse map unavailable; integrate the flow with inverse enabled or use inverse_flow");
  Diffeomorphism out;
  out.grid = d.grid;
  out.map = d.inv;
  out.inv = d.map;
  return out;
}

inline double sup_distance(const Diffeomorphism& a, const Diffeomorphism& b) {
  require_same_grid(a.grid, b.grid);
  double m = 0.0;
  for (std::size_t k = 0; k < a.map.size(); ++k) m = std::max(m, norm2(a.map[k] - b.map[k]));
  return m;
}

inline double sup_displacement(const Diffeomorphism& a) {
  double m = 0.0;
  for (int i = 0; i < a.grid.nx; ++i)
    for (int j = 0; j < a.grid.ny; ++j)
      m = std::max(m, norm2(a.at(i, j) - a.grid.node(i, j)));
  return m;
}

// (a o b)(x) = a(b(x)). Inverse maps compose the other way around when both
// factors carry one.
inline Diffeomorphism compose(const Diffeomorphism& a, const Diffeomorphism& b) {
  require_same_grid(a.grid, b.grid);
  Diffeomorphism out(a.grid);
  for (std::size_t k = 0; k < out.map.size(); ++k) out.map[k] = a(b.map[k]);
  if (a.has_inverse() && b.has_inverse()) {
    out.inv.resize(out.map.size());
    for (std::size_t k = 0; k < out.map.size(); ++k)
      out.inv[k] = b.apply_inverse(a.inv[k]);
  }
  return out;
}

// Time-sampled velocity path on a grid; linear interpolation between nodes.
struct FlowPath {
  Grid2 grid;
  std::vector<double> times;
  std::vector<VectorField> vel;

  FlowPath() = default;
  FlowPath(const Grid2& g, std::vector<double> t, std::vector<VectorField> v)
      : grid(g), times(std::move(t)), vel(std::move(v)) {
    if (times.size() != vel.size() || times.size() < 2)
      throw std::invalid_argument("flow path needs matching times and at least two samples");
    for (std::size_t m = 1; m < times.size(); ++m)
      if (!(times[m] > times[m - 1]))
        throw std::invalid_argument("flow path times must be strictly increasing");
    for (const VectorField& f : vel) require_same_grid(grid, f.grid);
  }

  static std::vector<double> uniform_times(int steps, double t0 = 0.0, double t1 = 1.0) {
    std::vector<double> t(steps + 1);
    for (int m = 0; m <= steps; ++m)
      t[m] = t0 + (t1 - t0) * static_cast<double>(m) / steps;
    return t;
  }

  Vec2 velocity(double t, Vec2 x) const {
    if (t <= times.front()) return interpolate(vel.front(), x);
    if (t >= times.back()) return interpolate(vel.back(), x);
    auto it = std::upper_bound(times.begin(), times.end(), t);
    std::size_t m = static_cast<std::size_t>(it - times.begin()) - 1;
    double th = (t - times[m]) / (times[m + 1] - times[m]);
    Vec2 a = interpolate(vel[m], x);
    Vec2 b = interpolate(vel[m + 1], x);
    return (1.0 - th) * a + th * b;
  }
};

using VelocityFn = std::function<Vec2(double, Vec2)>;

struct TimeIntegrator {
  enum class Scheme { Euler, RK4 };
  Scheme scheme = Scheme::RK4;
  int substeps = 1;

  TimeIntegrator() = default;
  TimeIntegrator(Scheme s, int sub = 1) : scheme(s), substeps(sub) {
    if (substeps < 1) throw std::invalid_argument("integrator substeps must be positive");
  }
};

namespace detail {

// One explicit step of dX/dt = F(t, X) on a flat Vec2 state.
template <typename Deriv>
inline void explicit_step(std::vector<Vec2>& state, double t, double dt,
                          TimeIntegrator::Scheme scheme, const Deriv& F) {
  const std::size_t n = state.size();
  if (scheme == TimeIntegrator::Scheme::Euler) {
    std::vector<Vec2> k1 = F(t, state);
    for (std::size_t i = 0; i < n; ++i) state[i] += dt * k1[i];
    return;
  }
  std::vector<Vec2> k1 = F(t, state);
  std::vector<Vec2> s2(n);
  for (std::size_t i = 0; i < n; ++i) s2[i] = state[i] + (0.5 * dt) * k1[i];
  std::vector<Vec2> k2 = F(t + 0.5 * dt, s2);
  for (std::size_t i = 0; i < n; ++i) s2[i] = state[i] + (0.5 * dt) * k2[i];
  std::vector<Vec2> k3 = F(t + 0.5 * dt, s2);
  for (std::size_t i = 0; i < n; ++i) s2[i] = state[i] + dt * k3[i];
  std::vector<Vec2> k4 = F(t + dt, s2);
  for (std::size_t i = 0; i < n; ++i)
    state[i] += (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
}

inline void check_state_finite(const std::vector<Vec2>& state) {
  for (const Vec2& p : state)
    if (!finite(p))
      throw std::runtime_error("flow blow-up; reduce time step or velocity magnitude");
}

// Nodewise derivative field of the inverse-map advection d xi/dt = -Dxi * v.
inline std::vector<Vec2> inverse_advection_rhs(const Grid2& g, const std::vector<Vec2>& xi,
                                               const std::vector<Vec2>& v_nodes) {
  std::vector<Vec2> out(g.size());
  auto at_ij = [&](int ii, int jj) { return xi[g.idx(ii, jj)]; };
  for (int i = 0; i < g.nx; ++i)
    for (int j = 0; j < g.ny; ++j) {
      Vec2 dx = d_di<Vec2>(g, at_ij, i, j);
      Vec2 dy = d_dj<Vec2>(g, at_ij, i, j);
      const Vec2 v = v_nodes[g.idx(i, j)];
      out[g.idx(i, j)] = {-(dx.x * v.x + dy.x * v.y), -(dx.y * v.x + dy.y * v.y)};
    }
  return out;
}

}  // namespace detail

// Forward flow of a velocity source over given node times. Returns the map at
// every node time (entry 0 is the identity). When with_inverse is set, the
// inverse map is co-advected on the grid and attached at every time.
template <typename Velocity>
inline std::vector<Diffeomorphism> integrate_flow_times(const Velocity& vfn, const Grid2& g,
                                                        const std::vector<double>& times,
                                                        const TimeIntegrator& ti = {},
                                                        bool with_inverse = false) {
  if (times.size() < 2) throw std::invalid_argument("flow needs at least two time nodes");
  Diffeomorphism id = Diffeomorphism::identity(g);
  std::vector<Vec2> pos = id.map;
  std::vector<Vec2> xi = id.map;  // inverse map samples

  auto advect = [&](double t, const std::vector<Vec2>& st) {
    std::vector<Vec2> d(st.size());
    for (std::size_t k = 0; k < st.size(); ++k) d[k] = vfn(t, st[k]);
    return d;
  };

  std::vector<Diffeomorphism> out;
  out.reserve(times.size());
  out.push_back(id);  // identity carries its own inverse

  for (std::size_t m = 0; m + 1 < times.size(); ++m) {
    const double t0 = times[m], t1 = times[m + 1];
    const double dt = (t1 - t0) / ti.substeps;
    for (int s = 0; s < ti.substeps; ++s) {
      const double t = t0 + s * dt;
      detail::explicit_step(pos, t, dt, ti.scheme, advect);
      if (with_inverse) {
        auto inv_rhs = [&](double tt, const std::vector<Vec2>& st) {
          std::vector<Vec2> v_nodes(st.size());
          for (int i = 0; i < g.nx; ++i)
            for (int j = 0; j < g.ny; ++j) v_nodes[g.idx(i, j)] = vfn(tt, g.node(i, j));
          return detail::inverse_advection_rhs(g, st, v_nodes);
        };
        detail::explicit_step(xi, t, dt, ti.scheme, inv_rhs);
      }
    }
    detail::check_state_finite(pos);
    Diffeomorphism d(g);
    d.map = pos;
    if (with_inverse) {
      detail::check_state_finite(xi);
      d.inv = xi;
    }
    out.push_back(std::move(d));
  }
  return out;
}

inline std::vector<Diffeomorphism> integrate_flow(const FlowPath& path,
                                                  const TimeIntegrator& ti = {},
                                                  bool with_inverse = false) {
  auto vfn = [&path](double t, Vec2 x) { return path.velocity(t, x); };
  return integrate_flow_times(vfn, path.grid, path.times, ti, with_inverse);
}

inline std::vector<Diffeomorphism> integrate_flow(const VelocityFn& vfn, const Grid2& g,
                                                  int steps, const TimeIntegrator& ti = {},
                                                  bool with_inverse = false) {
  return integrate_flow_times(vfn, g, FlowPath::uniform_times(steps), ti, with_inverse);
}

struct InverseFlowResult {
  Diffeomorphism inverse;    // phi(1)^{-1}
  double composition_residual = 0.0;  // sup over nodes of |phi(phi^{-1}(x)) - x|
};

// phi(1)^{-1} by integrating d xi/dtau = -v(1-tau) o xi from the identity.
// The forward map is recomputed to report the composition residual.
inline InverseFlowResult inverse_flow(const FlowPath& path, const TimeIntegrator& ti = {}) {
  const double t0 = path.times.front(), t1 = path.times.back();
  auto back_v = [&](double tau, Vec2 x) { return -1.0 * path.velocity(t1 + t0 - tau, x); };
  std::vector<Diffeomorphism> back =
      integrate_flow_times(back_v, path.grid, path.times, ti, false);
  std::vector<Diffeomorphism> fwd = integrate_flow(path, ti, false);
  InverseFlowResult res;
  res.inverse = back.back();
  const Diffeomorphism& phi = fwd.back();
  double m = 0.0;
  for (int i = 0; i < path.grid.nx; ++i)
    for (int j = 0; j < path.grid.ny; ++j) {
      Vec2 x = path.grid.node(i, j);
      m = std::max(m, norm2(phi(res.inverse.at(i, j)) - x));
    }
  res.composition_residual = m;
  // Cross-attach so both maps are usable as full diffeomorphisms.
  res.inverse.inv = phi.map;
  return res;
}

// Forward flow endpoint with the backward-integrated inverse attached.
inline Diffeomorphism flow_with_inverse(const FlowPath& path, const TimeIntegrator& ti = {},
                                        double* residual = nullptr) {
  std::vector<Diffeomorphism> fwd = integrate_flow(path, ti, false);
  InverseFlowResult ir = inverse_flow(path, ti);
  Diffeomorphism phi = fwd.back();
  phi.inv = ir.inverse.map;
  if (residual) *residual = ir.composition_residual;
  return phi;
}

// Adjoint action on a vector field: (Ad_phi v)(x) = Dphi(phi^{-1}(x)) v(phi^{-1}(x)).
inline VectorField adjoint_action(const Diffeomorphism& phi, const VectorField& v) {
  if (!phi.has_inverse())
    throw std::runtime_error(
        "inverse map unavailable; integrate the flow with inverse enabled or use inverse_flow");
  VectorField out(phi.grid);
  for (int i = 0; i < phi.grid.nx; ++i)
    for (int j = 0; j < phi.grid.ny; ++j) {
      Vec2 y = phi.apply_inverse(phi.grid.node(i, j));
      Mat2 J = phi.jacobian_point(y);
      out.at(i, j) = mat_vec(J, interpolate(v, y));
    }
  return out;
}

// Image transport by the group action: (phi . I)(x) = I(phi^{-1}(x)).
inline ScalarField transport_image(const ScalarField& img, const Diffeomorphism& phi) {
  if (!phi.has_inverse())
    throw std::runtime_error(
        "inverse map unavailable; integrate the flow with inverse enabled or use inverse_flow");
  ScalarField out(phi.grid);
  for (int i = 0; i < phi.grid.nx; ++i)
    for (int j = 0; j < phi.grid.ny; ++j)
      out.at(i, j) = interpolate(img, phi.apply_inverse(phi.grid.node(i, j)));
  return out;
}

// Landmark transport: advect the points through the velocity field.
template <typename Velocity>
inline LandmarkSet transport_landmarks_times(const LandmarkSet& q, const Velocity& vfn,
                                             const std::vector<double>& times,
                                             const TimeIntegrator& ti = {}) {
  std::vector<Vec2> pos = q.points;
  auto advect = [&](double t, const std::vector<Vec2>& st) {
    std::vector<Vec2> d(st.size());
    for (std::size_t k = 0; k < st.size(); ++k) d[k] = vfn(t, st[k]);
    return d;
  };
  for (std::size_t m = 0; m + 1 < times.size(); ++m) {
    const double dt = (times[m + 1] - times[m]) / ti.substeps;
    for (int s = 0; s < ti.substeps; ++s)
      detail::explicit_step(pos, times[m] + s * dt, dt, ti.scheme, advect);
    detail::check_state_finite(pos);
  }
  return LandmarkSet(q.ids, std::move(pos));
}

inline LandmarkSet transport_landmarks(const LandmarkSet& q, const FlowPath& path,
                                       const TimeIntegrator& ti = {}) {
  auto vfn = [&path](double t, Vec2 x) { return path.velocity(t, x); };
  return transport_landmarks_times(q, vfn, path.times, ti);
}

}  // namespace msdiffeo
