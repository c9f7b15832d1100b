#pragma once

// Reproducing-kernel machinery: Gaussian mixtures (finite lists of scales and
// quadrature discretizations of a scale continuum), Gram systems over landmark
// or grid carriers, momentum solves, per-scale projection of a velocity, and
// RKHS norms.
//
// Every kernel here is isotropic scalar * Id2: k(x,y) = w * exp(-|x-y|^2 / (2 sigma^2)).
// Mixtures evaluate by accumulating their Gaussian atoms in one flat
// stored-order loop; a continuum spec and the finite spec obtained by binning
// its quadrature nodes therefore execute identical floating-point operations
// and agree bit-for-bit.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/IterativeLinearSolvers>

#include "msdiffeo/fields.hpp"

namespace msdiffeo {

struct GaussianKernel {
  double sigma = 1.0;
  double weight = 1.0;

  GaussianKernel() = default;
  GaussianKernel(double sigma_, double weight_) : sigma(sigma_), weight(weight_) {
    if (!(sigma > 0.0) || !std::isfinite(sigma))
      throw std::invalid_argument("kernel sigma must be positive and finite");
    if (!(weight > 0.0) || !std::isfinite(weight))
      throw std::invalid_argument("kernel weight must be positive and finite");
  }

  double eval(double r2) const { return weight * std::exp(-r2 / (2.0 * sigma * sigma)); }
  // d/d(r^2) of eval.
  double eval_d(double r2) const { return eval(r2) * (-1.0 / (2.0 * sigma * sigma)); }
};

// One scale of a mixture. Ordinary finite specs have a single Gaussian atom
// per scale; binning a continuum spec produces scales that carry several.
struct ScaleComponent {
  std::vector<GaussianKernel> atoms;

  double eval(double r2) const {
    double acc = 0.0;
    for (const GaussianKernel& a : atoms) acc += a.eval(r2);
    return acc;
  }
  double eval_d(double r2) const {
    double acc = 0.0;
    for (const GaussianKernel& a : atoms) acc += a.eval_d(r2);
    return acc;
  }
  // Representative width used for coarse-to-fine ordering checks.
  double sigma_lead() const { return atoms.front().sigma; }
};

enum class KernelMode { Finite, Continuum };

struct ContinuumNode {
  double s = 0.0;       // scale parameter in [s_min, s_max]
  double lambda = 0.0;  // quadrature weight
};

struct KernelSpec {
  KernelMode mode = KernelMode::Finite;
  std::vector<ScaleComponent> components;  // coarse -> fine (sigma decreasing)

  // Continuum data (quadrature discretization of K = int K_s dlambda(s)).
  double s_min = 0.0, s_max = 1.0;
  double sigma_min = 0.0, sigma_max = 0.0;
  std::vector<ContinuumNode> nodes;       // strictly increasing s, lambda > 0
  std::vector<GaussianKernel> node_atoms; // (sigma(s_j), lambda_j), same order

  // sigma(s) = sigma_max^(1-t) * sigma_min^t with t = (s - s_min)/(s_max - s_min):
  // geometric interpolation, monotone decreasing, so increasing s refines scale.
  double sigma_of(double s) const {
    const double t = (s - s_min) / (s_max - s_min);
    return std::pow(sigma_max, 1.0 - t) * std::pow(sigma_min, t);
  }

  static KernelSpec finite(std::vector<GaussianKernel> kernels) {
    if (kernels.empty()) throw std::invalid_argument("finite kernel spec needs at least one scale");
    KernelSpec spec;
    spec.mode = KernelMode::Finite;
    for (const GaussianKernel& k : kernels) spec.components.push_back(ScaleComponent{{k}});
    spec.validate_ordering();
    return spec;
  }

  static KernelSpec finite_components(std::vector<ScaleComponent> comps) {
    if (comps.empty()) throw std::invalid_argument("finite kernel spec needs at least one scale");
    for (const ScaleComponent& c : comps)
      if (c.atoms.empty()) throw std::invalid_argument("kernel scale with no atoms");
    KernelSpec spec;
    spec.mode = KernelMode::Finite;
    spec.components = std::move(comps);
    spec.validate_ordering();
    return spec;
  }

  // Midpoint quadrature with n_nodes uniform bins over [s_min, s_max].
  static KernelSpec continuum(double s_min, double s_max, int n_nodes,
                              double sigma_min, double sigma_max) {
    if (!(s_min < s_max)) throw std::invalid_argument("continuum spec needs s_min < s_max");
    if (n_nodes < 1) throw std::invalid_argument("continuum spec needs at least one node");
    if (!(sigma_min > 0.0) || !(sigma_max > sigma_min))
      throw std::invalid_argument("continuum spec needs 0 < sigma_min < sigma_max");
    KernelSpec spec;
    spec.mode = KernelMode::Continuum;
    spec.s_min = s_min;
    spec.s_max = s_max;
    spec.sigma_min = sigma_min;
    spec.sigma_max = sigma_max;
    const double ds = (s_max - s_min) / n_nodes;
    for (int j = 0; j < n_nodes; ++j) {
      ContinuumNode n{s_min + (j + 0.5) * ds, ds};
      spec.nodes.push_back(n);
      spec.node_atoms.emplace_back(spec.sigma_of(n.s), n.lambda);
    }
    return spec;
  }

  // Continuum spec with caller-provided nodes (strictly increasing s, lambda>0)
  // and an explicit sigma-of-s sampling.
  static KernelSpec continuum_nodes(double s_min, double s_max,
                                    std::vector<ContinuumNode> nodes,
                                    double sigma_min, double sigma_max) {
    if (nodes.empty()) throw std::invalid_argument("continuum spec needs at least one node");
    KernelSpec spec;
    spec.mode = KernelMode::Continuum;
    spec.s_min = s_min;
    spec.s_max = s_max;
    spec.sigma_min = sigma_min;
    spec.sigma_max = sigma_max;
    double prev = -std::numeric_limits<double>::infinity();
    for (const ContinuumNode& n : nodes) {
      if (!(n.s > prev)) throw std::invalid_argument("continuum nodes must be strictly increasing");
      if (!(n.lambda > 0.0)) throw std::invalid_argument("continuum node weight must be positive");
      prev = n.s;
      spec.node_atoms.emplace_back(spec.sigma_of(n.s), n.lambda);
    }
    spec.nodes = std::move(nodes);
    return spec;
  }

  void validate_ordering() const {
    // Coarse -> fine: the flat atom sigma sequence must strictly decrease.
    double prev = std::numeric_limits<double>::infinity();
    for (const ScaleComponent& c : components)
      for (const GaussianKernel& a : c.atoms) {
        if (!(a.sigma < prev))
          throw std::invalid_argument("kernel scales must be ordered coarse to fine (sigma strictly decreasing)");
        prev = a.sigma;
      }
  }

  std::size_t n_scales() const {
    return mode == KernelMode::Finite ? components.size() : nodes.size();
  }

  // Full-mixture scalar kernel value at squared distance r2: one flat
  // accumulator over all atoms in stored order.
  double eval(double r2) const {
    double acc = 0.0;
    if (mode == KernelMode::Finite) {
      for (const ScaleComponent& c : components)
        for (const GaussianKernel& a : c.atoms) acc += a.eval(r2);
    } else {
      for (const GaussianKernel& a : node_atoms) acc += a.eval(r2);
    }
    return acc;
  }

  double eval_d(double r2) const {
    double acc = 0.0;
    if (mode == KernelMode::Finite) {
      for (const ScaleComponent& c : components)
        for (const GaussianKernel& a : c.atoms) acc += a.eval_d(r2);
    } else {
      for (const GaussianKernel& a : node_atoms) acc += a.eval_d(r2);
    }
    return acc;
  }

  // Scalar kernel of one scale (finite: component i; continuum: node i).
  double eval_scale(std::size_t i, double r2) const {
    if (mode == KernelMode::Finite) return components.at(i).eval(r2);
    return node_atoms.at(i).eval(r2);
  }

  double eval_scale_d(std::size_t i, double r2) const {
    if (mode == KernelMode::Finite) return components.at(i).eval_d(r2);
    return node_atoms.at(i).eval_d(r2);
  }

  // Finite spec with one scale per quadrature node of this continuum spec,
  // in node order; evaluation is bitwise identical to the continuum spec.
  KernelSpec per_node_bins() const {
    if (mode != KernelMode::Continuum)
      throw std::invalid_argument("per_node_bins requires a continuum spec");
    KernelSpec spec;
    spec.mode = KernelMode::Finite;
    spec.components.reserve(node_atoms.size());
    for (const GaussianKernel& a : node_atoms) spec.components.push_back(ScaleComponent{{a}});
    return spec;
  }

  // Finite spec whose scale k aggregates the quadrature atoms of this
  // continuum spec falling in bin [edges[k-1], edges[k]). Atom order is
  // preserved, so evaluation is bitwise identical to the continuum spec.
  KernelSpec bin_continuum(std::span<const double> edges) const {
    if (mode != KernelMode::Continuum)
      throw std::invalid_argument("bin_continuum requires a continuum spec");
    if (edges.size() < 2) throw std::invalid_argument("binning needs at least two edges");
    std::vector<ScaleComponent> comps(edges.size() - 1);
    std::size_t bin = 0;
    for (std::size_t j = 0; j < nodes.size(); ++j) {
      while (bin + 1 < comps.size() && nodes[j].s >= edges[bin + 1]) ++bin;
      comps[bin].atoms.push_back(node_atoms[j]);
    }
    for (const ScaleComponent& c : comps)
      if (c.atoms.empty())
        throw std::invalid_argument("empty scale bin; refine quadrature or coarsen partition");
    KernelSpec spec;
    spec.mode = KernelMode::Finite;
    spec.components = std::move(comps);
    return spec;
  }
};

// 2x2-block kernel matrix evaluation: K(x,y) = k(|x-y|^2) * Id2, so scalar
// Gram matrices suffice and act per coordinate.

// ---------------------------------------------------------------------------
// Momentum: covectors attached to either a landmark carrier or every node of
// a grid carrier. Pairing with a velocity: sum_a <p_a, v(x_a)> (landmarks) or
// h^2 * sum_nodes <p, v> (grid).
// ---------------------------------------------------------------------------

struct Momentum {
  std::variant<LandmarkSet, Grid2> carrier;
  std::vector<Vec2> covectors;

  std::size_t size() const { return covectors.size(); }

  std::vector<Vec2> carrier_points() const {
    if (std::holds_alternative<LandmarkSet>(carrier))
      return std::get<LandmarkSet>(carrier).points;
    const Grid2& g = std::get<Grid2>(carrier);
    std::vector<Vec2> pts(g.size());
    for (int i = 0; i < g.nx; ++i)
      for (int j = 0; j < g.ny; ++j) pts[g.idx(i, j)] = g.node(i, j);
    return pts;
  }

  // Quadrature weight of the carrier measure (1 for landmarks, h^2 for grids).
  double carrier_weight() const {
    if (std::holds_alternative<Grid2>(carrier)) {
      const double h = std::get<Grid2>(carrier).h;
      return h * h;
    }
    return 1.0;
  }
};

inline double pairing(const Momentum& p, std::span<const Vec2> v_at_carrier) {
  if (p.covectors.size() != v_at_carrier.size())
    throw std::invalid_argument("momentum/velocity size mismatch");
  double acc = 0.0;
  for (std::size_t a = 0; a < p.covectors.size(); ++a) acc += dot(p.covectors[a], v_at_carrier[a]);
  return acc * p.carrier_weight();
}

// Velocity induced by a momentum: v(x) = sum_a K(x, x_a) p_a (scaled by the
// carrier weight for grid carriers).
inline Vec2 apply_kernel_at(const KernelSpec& spec, std::span<const Vec2> points,
                            std::span<const Vec2> covectors, double weight, Vec2 x) {
  Vec2 acc{};
  for (std::size_t a = 0; a < points.size(); ++a)
    acc += spec.eval(sqnorm(x - points[a])) * covectors[a];
  return weight * acc;
}

inline std::vector<Vec2> apply_kernel(const KernelSpec& spec, const Momentum& p,
                                      std::span<const Vec2> queries) {
  const std::vector<Vec2> pts = p.carrier_points();
  const double w = p.carrier_weight();
  std::vector<Vec2> out(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q)
    out[q] = apply_kernel_at(spec, pts, p.covectors, w, queries[q]);
  return out;
}

inline VectorField apply_kernel(const KernelSpec& spec, const Momentum& p, const Grid2& g) {
  const std::vector<Vec2> pts = p.carrier_points();
  const double w = p.carrier_weight();
  VectorField out(g);
  for (int i = 0; i < g.nx; ++i)
    for (int j = 0; j < g.ny; ++j)
      out.at(i, j) = apply_kernel_at(spec, pts, p.covectors, w, g.node(i, j));
  return out;
}

// ---------------------------------------------------------------------------
// Gram systems. The full-mixture Gram over carrier points, factored once with
// a symmetric factorization after adding the standard jitter
// 1e-10 * trace(G)/(2n) to the diagonal.
// ---------------------------------------------------------------------------

struct GramSystem {
  Eigen::MatrixXd G;  // scalar n x n kernel matrix (block structure is G (x) Id2)
  Eigen::LDLT<Eigen::MatrixXd> fact;
  double jitter = 0.0;
  double carrier_weight = 1.0;

  GramSystem(const KernelSpec& spec, std::span<const Vec2> points, double weight = 1.0)
      : carrier_weight(weight) {
    const std::size_t n = points.size();
    if (n == 0) throw std::invalid_argument("empty kernel carrier");
    G.resize(n, n);
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b)
        G(a, b) = spec.eval(sqnorm(points[a] - points[b]));
    // 2n x 2n block trace is 2 * trace(G); jitter = 1e-10 * trace_2n / (2n)
    // = 1e-10 * trace(G)/n.
    jitter = 1e-10 * G.trace() / static_cast<double>(n);
    Eigen::MatrixXd Gj = weight * G;
    Gj.diagonal().array() += jitter;
    fact.compute(Gj);
    if (fact.info() != Eigen::Success)
      throw std::runtime_error("ill-conditioned kernel system; increase jitter or separate points");
  }

  // Solve (w*G + jitter I) p = v per coordinate.
  std::vector<Vec2> solve(std::span<const Vec2> v) const {
    const std::size_t n = static_cast<std::size_t>(G.rows());
    if (v.size() != n) throw std::invalid_argument("gram solve size mismatch");
    Eigen::MatrixXd rhs(n, 2);
    for (std::size_t a = 0; a < n; ++a) {
      rhs(a, 0) = v[a].x;
      rhs(a, 1) = v[a].y;
    }
    Eigen::MatrixXd sol = fact.solve(rhs);
    // Residual guard against silent LDLT breakdown.
    double rnorm = ((carrier_weight * G) * sol - rhs).norm();
    double vnorm = rhs.norm();
    if (vnorm > 0.0 && !(rnorm <= 1e-6 * vnorm + 1e-300))
      throw std::runtime_error("ill-conditioned kernel system; increase jitter or separate points");
    std::vector<Vec2> p(n);
    for (std::size_t a = 0; a < n; ++a) p[a] = {sol(a, 0), sol(a, 1)};
    return p;
  }
};

// Momentum solve K p = v on the carrier. Landmark carriers use the direct
// symmetric factorization; grid carriers use conjugate gradients to 1e-8.
inline Momentum solve_momentum(const KernelSpec& spec, const LandmarkSet& carrier,
                               std::span<const Vec2> v) {
  GramSystem sys(spec, carrier.points);
  Momentum p;
  p.carrier = carrier;
  p.covectors = sys.solve(v);
  return p;
}

inline Momentum solve_momentum(const KernelSpec& spec, const Grid2& carrier,
                               std::span<const Vec2> v) {
  const std::size_t n = carrier.size();
  if (v.size() != n) throw std::invalid_argument("momentum solve size mismatch");
  std::vector<Vec2> pts(n);
  for (int i = 0; i < carrier.nx; ++i)
    for (int j = 0; j < carrier.ny; ++j) pts[carrier.idx(i, j)] = carrier.node(i, j);
  const double w = carrier.h * carrier.h;
  Eigen::MatrixXd G(n, n);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) G(a, b) = w * spec.eval(sqnorm(pts[a] - pts[b]));
  Eigen::ConjugateGradient<Eigen::MatrixXd, Eigen::Lower | Eigen::Upper> cg;
  cg.setTolerance(1e-8);
  cg.compute(G);
  Eigen::MatrixXd rhs(n, 2);
  for (std::size_t a = 0; a < n; ++a) {
    rhs(a, 0) = v[a].x;
    rhs(a, 1) = v[a].y;
  }
  Eigen::MatrixXd sol = cg.solve(rhs);
  if (cg.info() != Eigen::Success)
    throw std::runtime_error("ill-conditioned kernel system; increase jitter or separate points");
  Momentum p;
  p.carrier = carrier;
  p.covectors.resize(n);
  for (std::size_t a = 0; a < n; ++a) p.covectors[a] = {sol(a, 0), sol(a, 1)};
  return p;
}

// ---------------------------------------------------------------------------
// Minimal-norm multi-scale decomposition of a velocity known at the carrier:
// solve K p = v once, then v_i = K_i p. Realizes the projection whose summed
// componentwise norms attain ||v||_H^2.
// ---------------------------------------------------------------------------

struct ScaleProjection {
  std::vector<Vec2> momentum;                    // shared p = K^{-1} v
  std::vector<std::vector<Vec2>> per_scale;      // v_i at carrier points
  std::vector<double> norms2;                    // ||v_i||_{H_i}^2 = p^T G_i p
};

inline ScaleProjection project_scales(const KernelSpec& spec, const LandmarkSet& carrier,
                                      std::span<const Vec2> v) {
  const std::size_t n = carrier.size();
  const std::size_t ns = spec.n_scales();
  GramSystem sys(spec, carrier.points);
  ScaleProjection proj;
  proj.momentum = sys.solve(v);
  proj.per_scale.assign(ns, std::vector<Vec2>(n));
  proj.norms2.assign(ns, 0.0);
  for (std::size_t i = 0; i < ns; ++i) {
    for (std::size_t a = 0; a < n; ++a) {
      Vec2 acc{};
      for (std::size_t b = 0; b < n; ++b)
        acc += spec.eval_scale(i, sqnorm(carrier.points[a] - carrier.points[b])) *
               proj.momentum[b];
      proj.per_scale[i][a] = acc;
    }
    double s = 0.0;
    for (std::size_t a = 0; a < n; ++a) s += dot(proj.momentum[a], proj.per_scale[i][a]);
    proj.norms2[i] = s;
  }
  return proj;
}

// ||v||^2 for the velocity induced by momentum p: p^T G p over the carrier.
inline double rkhs_norm2(const KernelSpec& spec, const Momentum& p) {
  const std::vector<Vec2> pts = p.carrier_points();
  std::vector<Vec2> v = apply_kernel(spec, p, std::span<const Vec2>(pts));
  double acc = 0.0;
  for (std::size_t a = 0; a < pts.size(); ++a) acc += dot(p.covectors[a], v[a]);
  return acc * p.carrier_weight();
}

// Default matching weight: data_weight = 1/(2 sigma^2) with
// sigma^2 = 1e-2 * (domain diameter)^2 / n_points.
inline double default_data_weight(double domain_diameter, std::size_t n_points) {
  const double sigma2 = 1e-2 * domain_diameter * domain_diameter /
                        static_cast<double>(n_points == 0 ? 1 : n_points);
  return 1.0 / (2.0 * sigma2);
}

}  // namespace msdiffeo
