#pragma once

// Scale-indexed decompositions of a flow: per-scale factor reconstruction by
// twisted transport equations, the tuple and scale-continuum Lie brackets,
// the sampling map from a continuum of scales to a finite tuple, and the
// scale-indexed flow computed two ways (time-first at each cutoff, and a
// single ODE in the scale variable).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "msdiffeo/fields.hpp"
#include "msdiffeo/flows.hpp"
#include "msdiffeo/semidirect_common.hpp"

namespace msdiffeo {

// ---------------------------------------------------------------------------
// A tuple of time-dependent velocity fields, one per scale, sharing one grid
// and one time ladder.
// ---------------------------------------------------------------------------

struct ScaleTuple {
  Ordering ordering = Ordering::CoarseLast;
  std::vector<FlowPath> scales;

  ScaleTuple() = default;
  ScaleTuple(Ordering ord, std::vector<FlowPath> sc)
      : ordering(ord), scales(std::move(sc)) {
    validate();
  }

  std::size_t size() const { return scales.size(); }
  const Grid2& grid() const { return scales.front().grid; }
  const std::vector<double>& times() const { return scales.front().times; }

  void validate() const {
    if (scales.empty()) throw std::invalid_argument("scale tuple needs at least one component");
    for (const FlowPath& p : scales) {
      require_same_grid(p.grid, scales.front().grid);
      if (p.times != scales.front().times)
        throw std::invalid_argument("scale tuple components must share one time ladder");
    }
  }

  // Velocity of the summed field at a time node.
  VectorField summed(std::size_t time_index) const {
    VectorField out(grid());
    for (const FlowPath& p : scales) out += p.vel.at(time_index);
    return out;
  }

  FlowPath summed_path() const {
    std::vector<VectorField> vel;
    vel.reserve(times().size());
    for (std::size_t m = 0; m < times().size(); ++m) vel.push_back(summed(m));
    return FlowPath(grid(), times(), std::move(vel));
  }
};

// ---------------------------------------------------------------------------
// Tuple Lie bracket induced by the twisted product. Written through the
// componentwise bracket of the outward partial sums it reads, with prefix
// sums P_k = a_1 + ... + a_k and suffix sums S_k = a_k + ... + a_n:
//
//   CoarseLast:  [a,b]_k = [a_k,b_k] + [S_{k+1}(a), b_k] + [a_k, S_{k+1}(b)]
//   CoarseFirst: [a,b]_k = [a_k,b_k] + [P_{k-1}(a), b_k] + [a_k, P_{k-1}(b)]
// ---------------------------------------------------------------------------

inline std::vector<VectorField> semidirect_bracket(Ordering ordering,
                                                   const std::vector<VectorField>& a,
                                                   const std::vector<VectorField>& b) {
  if (a.empty() || a.size() != b.size())
    throw std::invalid_argument("tuple bracket needs two tuples of equal nonzero length");
  const Grid2& g = a.front().grid;
  for (const VectorField& f : a) require_same_grid(f.grid, g);
  for (const VectorField& f : b) require_same_grid(f.grid, g);
  const std::size_t n = a.size();
  std::vector<VectorField> out(n);
  if (ordering == Ordering::CoarseFirst) {
    VectorField pa(g), pb(g);  // prefix sums of the strictly earlier components
    for (std::size_t k = 0; k < n; ++k) {
      VectorField term = lie_bracket(a[k], b[k]);
      term += lie_bracket(pa, b[k]);
      term += lie_bracket(a[k], pb);
      out[k] = std::move(term);
      pa += a[k];
      pb += b[k];
    }
  } else {
    VectorField sa(g), sb(g);  // suffix sums of the strictly later components
    for (std::size_t k = n; k-- > 0;) {
      VectorField term = lie_bracket(a[k], b[k]);
      term += lie_bracket(sa, b[k]);
      term += lie_bracket(a[k], sb);
      out[k] = std::move(term);
      sa += a[k];
      sb += b[k];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// A scale-parametrized bundle of vector fields at one instant: quadrature
// nodes s_j with weights lambda_j and a field sample per node, listed with
// the coarse end first (ascending s runs coarse to fine).
// ---------------------------------------------------------------------------

struct ScaleBundle {
  std::vector<double> s;
  std::vector<double> lambda;
  std::vector<VectorField> fields;

  std::size_t size() const { return s.size(); }
  const Grid2& grid() const { return fields.front().grid; }

  void validate() const {
    if (s.empty() || s.size() != lambda.size() || s.size() != fields.size())
      throw std::invalid_argument("scale bundle needs matching nodes, weights, and fields");
    for (std::size_t j = 1; j < s.size(); ++j)
      if (!(s[j] > s[j - 1]))
        throw std::invalid_argument("scale nodes must be strictly increasing");
    for (double w : lambda)
      if (!(w > 0.0)) throw std::invalid_argument("quadrature weights must be positive");
    for (const VectorField& f : fields) require_same_grid(f.grid, fields.front().grid);
  }
};

// Cumulative field up to node j with the boundary node counted at half
// weight: sum_{i<j} lambda_i u_i + (lambda_j / 2) u_j. With this quadrature
// the sampling map below intertwines the continuum and tuple brackets
// exactly, not just to quadrature order.
inline VectorField half_weight_prefix(const ScaleBundle& u, std::size_t j) {
  if (j >= u.size()) throw std::invalid_argument("scale node index out of range");
  std::vector<double> w(u.lambda.begin(), u.lambda.begin() + j + 1);
  w[j] *= 0.5;
  return integrate_scale(std::span<const VectorField>(u.fields.data(), j + 1),
                         std::span<const double>(w.data(), j + 1));
}

// Bracket on scale-parametrized bundles sharing one node set:
//   [u,v](s_j) = [U(s_j), v_j] + [u_j, V(s_j)]
// with U, V the half-weight cumulative fields.
inline ScaleBundle continuum_bracket(const ScaleBundle& u, const ScaleBundle& v) {
  u.validate();
  v.validate();
  if (u.s != v.s || u.lambda != v.lambda)
    throw std::invalid_argument("continuum bracket needs bundles on one scale quadrature");
  require_same_grid(u.grid(), v.grid());
  ScaleBundle out;
  out.s = u.s;
  out.lambda = u.lambda;
  out.fields.resize(u.size(), VectorField(u.grid()));
  for (std::size_t j = 0; j < u.size(); ++j) {
    VectorField cu = half_weight_prefix(u, j);
    VectorField cv = half_weight_prefix(v, j);
    VectorField term = lie_bracket(cu, v.fields[j]);
    term += lie_bracket(u.fields[j], cv);
    out.fields[j] = std::move(term);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sampling map: collapse a scale bundle onto a finite tuple. Each component
// is the weighted sum of the nodes in one bin, listed coarse-first. Node s
// belongs to bin k when edges[k] <= s < edges[k+1]; the outermost bins absorb
// nodes beyond the end edges (same convention as kernel binning).
// ---------------------------------------------------------------------------

inline std::vector<VectorField> sampling_map(const ScaleBundle& u,
                                             std::span<const double> edges) {
  u.validate();
  if (edges.size() < 2) throw std::invalid_argument("binning needs at least two edges");
  for (std::size_t j = 1; j < edges.size(); ++j)
    if (!(edges[j] > edges[j - 1]))
      throw std::invalid_argument("bin edges must be strictly increasing");
  const std::size_t nbins = edges.size() - 1;
  std::vector<std::vector<double>> w(nbins);
  std::vector<std::size_t> first(nbins, 0);
  std::size_t bin = 0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    while (bin + 1 < nbins && u.s[j] >= edges[bin + 1]) ++bin;
    if (w[bin].empty()) first[bin] = j;
    w[bin].push_back(u.lambda[j]);
  }
  std::vector<VectorField> out;
  out.reserve(nbins);
  for (std::size_t k = 0; k < nbins; ++k) {
    if (w[k].empty())
      throw std::invalid_argument("empty scale bin; refine quadrature or coarsen partition");
    out.push_back(integrate_scale(
        std::span<const VectorField>(u.fields.data() + first[k], w[k].size()),
        std::span<const double>(w[k].data(), w[k].size())));
  }
  return out;
}

// One component per node: out_j = lambda_j u_j.
inline std::vector<VectorField> sampling_map(const ScaleBundle& u) {
  u.validate();
  std::vector<VectorField> out;
  out.reserve(u.size());
  for (std::size_t j = 0; j < u.size(); ++j) {
    VectorField f = u.fields[j];
    f *= u.lambda[j];
    out.push_back(std::move(f));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reconstruction: integrate the per-scale factors of the flow of the summed
// field. Both orderings apply the finest factor to points first:
//
//   CoarseLast   total = psi_n o ... o psi_1,
//                d/dt psi_k = (v_k + w_k) o psi_k - Dpsi_k . w_k,
//                w_k = sum of the strictly finer components (i < k);
//   CoarseFirst  total = psi_1 o ... o psi_n,
//                d/dt psi_k = [Dchi_k o psi_k]^{-1} . (v_k o chi_k o psi_k),
//                chi_k = psi_1 o ... o psi_{k-1} (strictly coarser factors).
//
// The CoarseLast equations decouple (each factor sees only its own state);
// the CoarseFirst equations couple all factors and are integrated jointly.
// ---------------------------------------------------------------------------

struct Reconstruction {
  Ordering ordering = Ordering::CoarseLast;
  std::vector<double> times;
  // psi[k][m]: factor for scale component k at time node m (forward map only).
  std::vector<std::vector<Diffeomorphism>> psi;
  Diffeomorphism total;  // composite of the final factors, ordering-dependent

  const Diffeomorphism& factor(std::size_t k) const { return psi.at(k).back(); }
};

// Composite of one factor per scale in the ordering's composition order.
inline Diffeomorphism total_composition(Ordering ordering,
                                        const std::vector<Diffeomorphism>& factors) {
  if (factors.empty()) throw std::invalid_argument("composition of an empty factor list");
  if (ordering == Ordering::CoarseLast) {
    Diffeomorphism acc = factors.front();  // finest first
    for (std::size_t k = 1; k < factors.size(); ++k) acc = compose(factors[k], acc);
    return acc;
  }
  Diffeomorphism acc = factors.back();  // finest first
  for (std::size_t k = factors.size() - 1; k-- > 0;) acc = compose(factors[k], acc);
  return acc;
}

inline Reconstruction reconstruct_coarse_last(const ScaleTuple& tuple,
                                              const TimeIntegrator& ti = {}) {
  tuple.validate();
  if (tuple.ordering != Ordering::CoarseLast)
    throw std::invalid_argument("reconstruct_coarse_last expects a CoarseLast tuple");
  const Grid2& g = tuple.grid();
  const std::vector<double>& times = tuple.times();
  const std::size_t n = tuple.size();

  Reconstruction rec;
  rec.ordering = Ordering::CoarseLast;
  rec.times = times;
  rec.psi.assign(n, {});

  // Running sum of the strictly finer components.
  FlowPath finer(g, times, std::vector<VectorField>(times.size(), VectorField(g)));

  for (std::size_t k = 0; k < n; ++k) {
    const FlowPath& vk = tuple.scales[k];
    std::vector<Vec2> pos = Diffeomorphism::identity(g).map;

    auto rhs = [&](double t, const std::vector<Vec2>& st) {
      std::vector<Vec2> out(st.size());
      auto at_ij = [&](int ii, int jj) { return st[g.idx(ii, jj)]; };
      for (int i = 0; i < g.nx; ++i)
        for (int j = 0; j < g.ny; ++j) {
          const std::size_t q = g.idx(i, j);
          const Vec2 y = st[q];
          Vec2 f = vk.velocity(t, y) + finer.velocity(t, y);
          Vec2 dx = detail::d_di4<Vec2>(g, at_ij, i, j);
          Vec2 dy = detail::d_dj4<Vec2>(g, at_ij, i, j);
          const Vec2 wx = finer.velocity(t, g.node(i, j));
          out[q] = f - Vec2{dx.x * wx.x + dy.x * wx.y, dx.y * wx.x + dy.y * wx.y};
        }
      return out;
    };

    std::vector<Diffeomorphism>& seq = rec.psi[k];
    seq.reserve(times.size());
    Diffeomorphism d0(g);
    seq.push_back(d0);  // identity map, no inverse attached
    for (std::size_t m = 0; m + 1 < times.size(); ++m) {
      const double dt = (times[m + 1] - times[m]) / ti.substeps;
      for (int sub = 0; sub < ti.substeps; ++sub)
        detail::explicit_step(pos, times[m] + sub * dt, dt, ti.scheme, rhs);
      detail::check_state_finite(pos);
      Diffeomorphism d(g);
      d.map = pos;
      seq.push_back(std::move(d));
    }

    for (std::size_t m = 0; m < times.size(); ++m) finer.vel[m] += vk.vel[m];
  }

  std::vector<Diffeomorphism> finals;
  finals.reserve(n);
  for (std::size_t k = 0; k < n; ++k) finals.push_back(rec.psi[k].back());
  rec.total = total_composition(rec.ordering, finals);
  return rec;
}

inline Reconstruction reconstruct_coarse_first(const ScaleTuple& tuple,
                                               const TimeIntegrator& ti = {}) {
  tuple.validate();
  if (tuple.ordering != Ordering::CoarseFirst)
    throw std::invalid_argument("reconstruct_coarse_first expects a CoarseFirst tuple");
  const Grid2& g = tuple.grid();
  const std::vector<double>& times = tuple.times();
  const std::size_t n = tuple.size();
  const std::size_t N = g.size();

  // Joint state: factor k occupies [k*N, (k+1)*N).
  std::vector<Vec2> state;
  state.reserve(n * N);
  const std::vector<Vec2> id = Diffeomorphism::identity(g).map;
  for (std::size_t k = 0; k < n; ++k) state.insert(state.end(), id.begin(), id.end());

  auto rhs = [&](double t, const std::vector<Vec2>& st) {
    std::vector<Vec2> out(st.size());
    // chi_k applies the factors k-1, ..., 0 in that order.
    auto chi = [&](std::size_t k, Vec2 p) {
      for (std::size_t c = k; c-- > 0;)
        p = Diffeomorphism::eval_samples(g, std::span<const Vec2>(st.data() + c * N, N), p);
      return p;
    };
    const double h = g.h;
    for (std::size_t k = 0; k < n; ++k) {
      const FlowPath& vk = tuple.scales[k];
      for (std::size_t q = 0; q < N; ++q) {
        const Vec2 y = st[k * N + q];
        if (k == 0) {
          out[q] = vk.velocity(t, y);
          continue;
        }
        const Vec2 z = chi(k, y);
        const Vec2 fxp = chi(k, {y.x + h, y.y}), fxm = chi(k, {y.x - h, y.y});
        const Vec2 fyp = chi(k, {y.x, y.y + h}), fym = chi(k, {y.x, y.y - h});
        const double a = (fxp.x - fxm.x) / (2 * h), b = (fyp.x - fym.x) / (2 * h);
        const double c = (fxp.y - fxm.y) / (2 * h), d = (fyp.y - fym.y) / (2 * h);
        const double det = a * d - b * c;
        if (!(std::abs(det) > 1e-12))
          throw std::runtime_error(
              "degenerate scale composition; reduce time step or velocity magnitude");
        const Vec2 f = vk.velocity(t, z);
        out[k * N + q] = {(d * f.x - b * f.y) / det, (-c * f.x + a * f.y) / det};
      }
    }
    return out;
  };

  Reconstruction rec;
  rec.ordering = Ordering::CoarseFirst;
  rec.times = times;
  rec.psi.assign(n, {});
  auto record = [&]() {
    for (std::size_t k = 0; k < n; ++k) {
      Diffeomorphism d(g);
      std::copy(state.begin() + k * N, state.begin() + (k + 1) * N, d.map.begin());
      rec.psi[k].push_back(std::move(d));
    }
  };
  record();
  for (std::size_t m = 0; m + 1 < times.size(); ++m) {
    const double dt = (times[m + 1] - times[m]) / ti.substeps;
    for (int sub = 0; sub < ti.substeps; ++sub)
      detail::explicit_step(state, times[m] + sub * dt, dt, ti.scheme, rhs);
    detail::check_state_finite(state);
    record();
  }

  std::vector<Diffeomorphism> finals;
  finals.reserve(n);
  for (std::size_t k = 0; k < n; ++k) finals.push_back(rec.psi[k].back());
  rec.total = total_composition(rec.ordering, finals);
  return rec;
}

inline Reconstruction reconstruct(const ScaleTuple& tuple, const TimeIntegrator& ti = {}) {
  return tuple.ordering == Ordering::CoarseLast ? reconstruct_coarse_last(tuple, ti)
                                                : reconstruct_coarse_first(tuple, ti);
}

// ---------------------------------------------------------------------------
// Scale-indexed flow. The input is a velocity density over scale: quadrature
// nodes s_j with weights lambda_j and a full time path per node. Two routes
// to the scale-indexed map eta(s):
//
//   time-first   eta(s) = time-1 flow of the density accumulated below s;
//   scale ODE    d/ds eta(s) = Deta . A(s), A(s,x) the time integral of the
//                density at s pulled back by the truncated flow.
//
// The scale ODE steps bin edge to bin edge with a classic 4-stage rule whose
// stage fields are evaluated at the edges and bin centers.
// ---------------------------------------------------------------------------

struct TimeScaleBundle {
  std::vector<double> s;
  std::vector<double> lambda;
  std::vector<FlowPath> paths;

  std::size_t size() const { return s.size(); }
  const Grid2& grid() const { return paths.front().grid; }
  const std::vector<double>& times() const { return paths.front().times; }

  void validate() const {
    if (s.empty() || s.size() != lambda.size() || s.size() != paths.size())
      throw std::invalid_argument("scale bundle needs matching nodes, weights, and paths");
    for (std::size_t j = 1; j < s.size(); ++j)
      if (!(s[j] > s[j - 1]))
        throw std::invalid_argument("scale nodes must be strictly increasing");
    for (double w : lambda)
      if (!(w > 0.0)) throw std::invalid_argument("quadrature weights must be positive");
    for (const FlowPath& p : paths) {
      require_same_grid(p.grid, paths.front().grid);
      if (p.times != paths.front().times)
        throw std::invalid_argument("scale bundle paths must share one time ladder");
    }
  }

  // Bundle restricted to one instant.
  ScaleBundle at_time(std::size_t m) const {
    ScaleBundle out;
    out.s = s;
    out.lambda = lambda;
    out.fields.reserve(size());
    for (const FlowPath& p : paths) out.fields.push_back(p.vel.at(m));
    return out;
  }
};

enum class ScaleIntegrand {
  TruncatedFlow,   // [Dpsi_s(r)]^{-1} (density o psi_s(r)), no inverse maps
  AdjointInverse,  // D[psi_s(r)^{-1}] o psi_s(r) applied the same way, via
                   // the explicitly co-advected inverse maps
};

struct ScaleFlowOptions {
  TimeIntegrator time_integrator{};
  ScaleIntegrand integrand = ScaleIntegrand::TruncatedFlow;
};

struct ScaleFlowResult {
  std::vector<double> edges;
  std::vector<Diffeomorphism> eta_time;   // time-first map at each edge, inverse attached
  std::vector<Diffeomorphism> eta_scale;  // scale-ODE map at each edge, forward only
  std::vector<double> gap;                // sup distance between the two at each edge
};

namespace detail {

// Density accumulated below the cutoff: full weight strictly below, half
// weight for a node sitting on the cutoff itself.
inline FlowPath cumulative_path(const TimeScaleBundle& u, double cutoff, double tol) {
  const Grid2& g = u.grid();
  const std::vector<double>& times = u.times();
  std::vector<VectorField> vel(times.size(), VectorField(g));
  for (std::size_t m = 0; m < times.size(); ++m) {
    for (std::size_t j = 0; j < u.size(); ++j) {
      if (u.s[j] < cutoff - tol) {
        VectorField f = u.paths[j].vel[m];
        f *= u.lambda[j];
        vel[m] += f;
      } else if (u.s[j] <= cutoff + tol) {
        VectorField f = u.paths[j].vel[m];
        f *= 0.5 * u.lambda[j];
        vel[m] += f;
      }
    }
  }
  return FlowPath(g, times, std::move(vel));
}

// Density at the cutoff: linear interpolation between node paths, clamped.
inline FlowPath density_path(const TimeScaleBundle& u, double at) {
  if (at <= u.s.front()) return u.paths.front();
  if (at >= u.s.back()) return u.paths.back();
  std::size_t j = 0;
  while (u.s[j + 1] < at) ++j;
  const double th = (at - u.s[j]) / (u.s[j + 1] - u.s[j]);
  const Grid2& g = u.grid();
  std::vector<VectorField> vel(u.times().size(), VectorField(g));
  for (std::size_t m = 0; m < vel.size(); ++m)
    for (std::size_t q = 0; q < vel[m].values.size(); ++q)
      vel[m].values[q] = (1.0 - th) * u.paths[j].vel[m].values[q] +
                         th * u.paths[j + 1].vel[m].values[q];
  return FlowPath(g, u.times(), std::move(vel));
}

// A(s, x): time integral (trapezoid over the ladder) of the density at s
// pulled back along the flow of the density accumulated below s.
inline VectorField scale_stage_field(const TimeScaleBundle& u, double s_eval, double tol,
                                     const ScaleFlowOptions& opt) {
  const Grid2& g = u.grid();
  const std::vector<double>& times = u.times();
  const FlowPath trunc = cumulative_path(u, s_eval, tol);
  const FlowPath dens = density_path(u, s_eval);
  const bool use_inverse = opt.integrand == ScaleIntegrand::AdjointInverse;
  std::vector<Diffeomorphism> flow =
      integrate_flow(trunc, opt.time_integrator, use_inverse);

  VectorField acc(g);
  for (std::size_t m = 0; m < times.size(); ++m) {
    const double wl = m == 0 ? 0.0 : 0.5 * (times[m] - times[m - 1]);
    const double wr = m + 1 == times.size() ? 0.0 : 0.5 * (times[m + 1] - times[m]);
    const double tw = wl + wr;
    const Diffeomorphism& psi = flow[m];
    Diffeomorphism xi;
    if (use_inverse) {
      xi.grid = g;
      xi.map = psi.inv;
    }
    for (int i = 0; i < g.nx; ++i)
      for (int j = 0; j < g.ny; ++j) {
        const Vec2 y = psi.at(i, j);
        const Vec2 f = interpolate(dens.vel[m], y);
        Vec2 pulled;
        if (use_inverse) {
          pulled = mat_vec(xi.jacobian_point(y), f);
        } else {
          const Mat2 J = psi.jacobian_node(i, j);
          const double det = J(0, 0) * J(1, 1) - J(0, 1) * J(1, 0);
          if (!(std::abs(det) > 1e-12))
            throw std::runtime_error(
                "degenerate scale composition; reduce time step or velocity magnitude");
          pulled = {(J(1, 1) * f.x - J(0, 1) * f.y) / det,
                    (-J(1, 0) * f.x + J(0, 0) * f.y) / det};
        }
        acc.at(i, j) += tw * pulled;
      }
  }
  return acc;
}

}  // namespace detail

inline ScaleFlowResult scale_flow(const TimeScaleBundle& u, std::vector<double> edges,
                                  const ScaleFlowOptions& opt = {}) {
  u.validate();
  if (edges.size() < 2) throw std::invalid_argument("scale flow needs at least two edges");
  for (std::size_t j = 1; j < edges.size(); ++j)
    if (!(edges[j] > edges[j - 1]))
      throw std::invalid_argument("bin edges must be strictly increasing");
  if (u.s.front() < edges.front() || u.s.back() > edges.back())
    throw std::invalid_argument("scale nodes must lie inside the edge span");
  const Grid2& g = u.grid();
  const std::size_t nbins = edges.size() - 1;
  const double tol = 1e-9 * (edges.back() - edges.front());

  ScaleFlowResult res;
  res.edges = edges;

  // Time-first route: flow the accumulated density at each cutoff.
  res.eta_time.reserve(nbins + 1);
  res.eta_time.push_back(Diffeomorphism::identity(g));
  for (std::size_t j = 1; j <= nbins; ++j) {
    FlowPath trunc = detail::cumulative_path(u, edges[j], tol);
    res.eta_time.push_back(flow_with_inverse(trunc, opt.time_integrator));
  }

  // Scale-ODE route: stage fields at every edge and bin center.
  std::vector<VectorField> a_edge;
  a_edge.reserve(nbins + 1);
  for (std::size_t j = 0; j <= nbins; ++j)
    a_edge.push_back(detail::scale_stage_field(u, edges[j], tol, opt));
  std::vector<VectorField> a_mid;
  a_mid.reserve(nbins);
  for (std::size_t j = 0; j < nbins; ++j)
    a_mid.push_back(detail::scale_stage_field(u, 0.5 * (edges[j] + edges[j + 1]), tol, opt));

  auto rhs = [&](const std::vector<Vec2>& st, const VectorField& A) {
    std::vector<Vec2> out(st.size());
    auto at_ij = [&](int ii, int jj) { return st[g.idx(ii, jj)]; };
    for (int i = 0; i < g.nx; ++i)
      for (int j = 0; j < g.ny; ++j) {
        const Vec2 dx = detail::d_di<Vec2>(g, at_ij, i, j);
        const Vec2 dy = detail::d_dj<Vec2>(g, at_ij, i, j);
        const Vec2 a = A.at(i, j);
        out[g.idx(i, j)] = {dx.x * a.x + dy.x * a.y, dx.y * a.x + dy.y * a.y};
      }
    return out;
  };

  std::vector<Vec2> state = Diffeomorphism::identity(g).map;
  res.eta_scale.reserve(nbins + 1);
  {
    Diffeomorphism d(g);
    res.eta_scale.push_back(std::move(d));
  }
  const std::size_t N = g.size();
  for (std::size_t j = 0; j < nbins; ++j) {
    const double ds = edges[j + 1] - edges[j];
    std::vector<Vec2> k1 = rhs(state, a_edge[j]);
    std::vector<Vec2> tmp(N);
    for (std::size_t q = 0; q < N; ++q) tmp[q] = state[q] + (0.5 * ds) * k1[q];
    std::vector<Vec2> k2 = rhs(tmp, a_mid[j]);
    for (std::size_t q = 0; q < N; ++q) tmp[q] = state[q] + (0.5 * ds) * k2[q];
    std::vector<Vec2> k3 = rhs(tmp, a_mid[j]);
    for (std::size_t q = 0; q < N; ++q) tmp[q] = state[q] + ds * k3[q];
    std::vector<Vec2> k4 = rhs(tmp, a_edge[j + 1]);
    for (std::size_t q = 0; q < N; ++q)
      state[q] += (ds / 6.0) * (k1[q] + 2.0 * k2[q] + 2.0 * k3[q] + k4[q]);
    detail::check_state_finite(state);
    Diffeomorphism d(g);
    d.map = state;
    res.eta_scale.push_back(std::move(d));
  }

  res.gap.resize(nbins + 1);
  for (std::size_t j = 0; j <= nbins; ++j)
    res.gap[j] = sup_distance(res.eta_time[j], res.eta_scale[j]);
  return res;
}

// Map contributed between two cutoffs: eta(lo)^{-1} o eta(hi), taken from the
// time-first route (whose maps carry inverses).
inline Diffeomorphism scale_segment(const ScaleFlowResult& r, std::size_t lo, std::size_t hi) {
  if (lo >= r.eta_time.size() || hi >= r.eta_time.size())
    throw std::invalid_argument("edge index out of range");
  return compose(inverse_view(r.eta_time[lo]), r.eta_time[hi]);
}

}  // namespace msdiffeo
