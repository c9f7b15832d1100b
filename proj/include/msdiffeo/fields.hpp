#pragma once

// Core value types: 2D grid, scalar/vector fields, landmark sets, and the
// grid calculus they support (bilinear interpolation, difference-stencil
// Jacobians, vector-field Lie brackets, weighted sums over scale samples).

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace msdiffeo {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2() = default;
  Vec2(double x_, double y_) : x(x_), y(y_) {}

  Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  Vec2& operator+=(const Vec2& o) { x += o.x; y += o.y; return *this; }
  Vec2& operator-=(const Vec2& o) { x -= o.x; y -= o.y; return *this; }
  Vec2& operator*=(double s) { x *= s; y *= s; return *this; }
};

inline Vec2 operator*(double s, const Vec2& v) { return {s * v.x, s * v.y}; }
inline double dot(const Vec2& a, const Vec2& b) { return a.x * b.x + a.y * b.y; }
inline double norm2(const Vec2& v) { return std::sqrt(dot(v, v)); }
inline double sqnorm(const Vec2& v) { return dot(v, v); }
inline bool finite(const Vec2& v) { return std::isfinite(v.x) && std::isfinite(v.y); }

using Mat2 = Eigen::Matrix2d;

inline Vec2 mat_vec(const Mat2& m, const Vec2& v) {
  return {m(0, 0) * v.x + m(0, 1) * v.y, m(1, 0) * v.x + m(1, 1) * v.y};
}

// Uniform isotropic node-centered grid. Node (i,j) sits at
// (ox + i*h, oy + j*h); storage of fields over it is row-major in i.
struct Grid2 {
  int nx = 0;
  int ny = 0;
  double h = 1.0;
  double ox = 0.0;
  double oy = 0.0;

  Grid2() = default;
  Grid2(int nx_, int ny_, double h_, double ox_ = 0.0, double oy_ = 0.0)
      : nx(nx_), ny(ny_), h(h_), ox(ox_), oy(oy_) {
    if (nx < 2 || ny < 2)
      throw std::invalid_argument("grid must have at least 2 nodes per axis");
    if (!(h > 0.0) || !std::isfinite(h))
      throw std::invalid_argument("grid spacing must be positive and finite");
    if (!std::isfinite(ox) || !std::isfinite(oy))
      throw std::invalid_argument("grid origin must be finite");
  }

  std::size_t size() const { return static_cast<std::size_t>(nx) * ny; }
  std::size_t idx(int i, int j) const { return static_cast<std::size_t>(i) * ny + j; }
  Vec2 node(int i, int j) const { return {ox + i * h, oy + j * h}; }
  double x_max() const { return ox + (nx - 1) * h; }
  double y_max() const { return oy + (ny - 1) * h; }

  bool same_as(const Grid2& o) const {
    return nx == o.nx && ny == o.ny && h == o.h && ox == o.ox && oy == o.oy;
  }
};

inline void require_same_grid(const Grid2& a, const Grid2& b) {
  if (!a.same_as(b)) throw std::invalid_argument("grid mismatch between fields");
}

struct ScalarField {
  Grid2 grid;
  std::vector<double> values;  // row-major, values[grid.idx(i,j)]

  ScalarField() = default;
  explicit ScalarField(const Grid2& g, double fill = 0.0)
      : grid(g), values(g.size(), fill) {}

  double& at(int i, int j) { return values[grid.idx(i, j)]; }
  double at(int i, int j) const { return values[grid.idx(i, j)]; }

  void check_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) throw std::invalid_argument("non-finite scalar field value");
  }
};

struct VectorField {
  Grid2 grid;
  std::vector<Vec2> values;  // row-major

  VectorField() = default;
  explicit VectorField(const Grid2& g, Vec2 fill = {})
      : grid(g), values(g.size(), fill) {}

  Vec2& at(int i, int j) { return values[grid.idx(i, j)]; }
  const Vec2& at(int i, int j) const { return values[grid.idx(i, j)]; }

  void check_finite() const {
    for (const Vec2& v : values)
      if (!finite(v)) throw std::invalid_argument("non-finite vector field value");
  }

  VectorField& operator+=(const VectorField& o) {
    require_same_grid(grid, o.grid);
    for (std::size_t k = 0; k < values.size(); ++k) values[k] += o.values[k];
    return *this;
  }
  VectorField& operator*=(double s) {
    for (Vec2& v : values) v *= s;
    return *this;
  }
};

struct LandmarkSet {
  std::vector<int> ids;
  std::vector<Vec2> points;

  LandmarkSet() = default;
  LandmarkSet(std::vector<int> ids_, std::vector<Vec2> pts)
      : ids(std::move(ids_)), points(std::move(pts)) {
    if (ids.size() != points.size())
      throw std::invalid_argument("landmark id/point count mismatch");
    for (const Vec2& p : points)
      if (!finite(p)) throw std::invalid_argument("non-finite landmark point");
  }

  static LandmarkSet from_points(std::vector<Vec2> pts) {
    std::vector<int> ids(pts.size());
    for (std::size_t a = 0; a < pts.size(); ++a) ids[a] = static_cast<int>(a);
    return LandmarkSet(std::move(ids), std::move(pts));
  }

  std::size_t size() const { return points.size(); }

  // No two points may coincide more closely than 1e-12 * scale.
  void check_separation(double scale) const {
    const double tol = 1e-12 * scale;
    for (std::size_t a = 0; a < points.size(); ++a)
      for (std::size_t b = a + 1; b < points.size(); ++b)
        if (norm2(points[a] - points[b]) < tol)
          throw std::invalid_argument("coincident landmark points");
  }
};

// ---------------------------------------------------------------------------
// Bilinear interpolation.
//
// Scalars: the query is clamped to the grid box, so values extend constantly.
// Vectors: values fade linearly to zero over one cell beyond the boundary
// (equivalent to bilinear interpolation on the grid padded with a ring of
// zero nodes), and vanish entirely further out.
// ---------------------------------------------------------------------------

inline double interpolate(const ScalarField& f, Vec2 p) {
  if (!finite(p)) throw std::invalid_argument("invalid query point");
  const Grid2& g = f.grid;
  double u = (p.x - g.ox) / g.h;
  double v = (p.y - g.oy) / g.h;
  u = std::min(std::max(u, 0.0), static_cast<double>(g.nx - 1));
  v = std::min(std::max(v, 0.0), static_cast<double>(g.ny - 1));
  int i = std::min(static_cast<int>(u), g.nx - 2);
  int j = std::min(static_cast<int>(v), g.ny - 2);
  double fu = u - i, fv = v - j;
  double f00 = f.at(i, j), f10 = f.at(i + 1, j);
  double f01 = f.at(i, j + 1), f11 = f.at(i + 1, j + 1);
  return (1 - fu) * ((1 - fv) * f00 + fv * f01) + fu * ((1 - fv) * f10 + fv * f11);
}

inline Vec2 interpolate(const VectorField& f, Vec2 p) {
  if (!finite(p)) throw std::invalid_argument("invalid query point");
  const Grid2& g = f.grid;
  const double u = (p.x - g.ox) / g.h;
  const double v = (p.y - g.oy) / g.h;
  if (u <= -1.0 || u >= g.nx || v <= -1.0 || v >= g.ny) return {0.0, 0.0};
  const int i = static_cast<int>(std::floor(u));
  const int j = static_cast<int>(std::floor(v));
  const double fu = u - i, fv = v - j;
  auto node = [&](int ii, int jj) -> Vec2 {
    if (ii < 0 || jj < 0 || ii >= g.nx || jj >= g.ny) return {0.0, 0.0};
    return f.at(ii, jj);
  };
  Vec2 f00 = node(i, j), f10 = node(i + 1, j);
  Vec2 f01 = node(i, j + 1), f11 = node(i + 1, j + 1);
  return (1 - fu) * ((1 - fv) * f00 + fv * f01) + fu * ((1 - fv) * f10 + fv * f11);
}

// Gradient of the clamped bilinear interpolant with respect to the query
// point; zero in a coordinate wherever the query is clamped to the grid box.
inline Vec2 interpolate_gradient(const ScalarField& f, Vec2 p) {
  if (!finite(p)) throw std::invalid_argument("invalid query point");
  const Grid2& g = f.grid;
  double u = (p.x - g.ox) / g.h;
  double v = (p.y - g.oy) / g.h;
  const bool cu = u < 0.0 || u > static_cast<double>(g.nx - 1);
  const bool cv = v < 0.0 || v > static_cast<double>(g.ny - 1);
  u = std::min(std::max(u, 0.0), static_cast<double>(g.nx - 1));
  v = std::min(std::max(v, 0.0), static_cast<double>(g.ny - 1));
  int i = std::min(static_cast<int>(u), g.nx - 2);
  int j = std::min(static_cast<int>(v), g.ny - 2);
  double fu = u - i, fv = v - j;
  double f00 = f.at(i, j), f10 = f.at(i + 1, j);
  double f01 = f.at(i, j + 1), f11 = f.at(i + 1, j + 1);
  double dfdu = (1 - fv) * (f10 - f00) + fv * (f11 - f01);
  double dfdv = (1 - fu) * (f01 - f00) + fu * (f11 - f10);
  return {cu ? 0.0 : dfdu / g.h, cv ? 0.0 : dfdv / g.h};
}

// ---------------------------------------------------------------------------
// Difference-stencil derivatives: central in the interior, one-sided at the
// boundary. Exact on fields affine in the spatial coordinates.
// ---------------------------------------------------------------------------

namespace detail {

template <typename Value, typename At>
inline Value d_di(const Grid2& g, const At& at, int i, int j) {
  if (i == 0) return (at(1, j) - at(0, j)) * (1.0 / g.h);
  if (i == g.nx - 1) return (at(i, j) - at(i - 1, j)) * (1.0 / g.h);
  return (at(i + 1, j) - at(i - 1, j)) * (0.5 / g.h);
}

template <typename Value, typename At>
inline Value d_dj(const Grid2& g, const At& at, int i, int j) {
  if (j == 0) return (at(i, 1) - at(i, 0)) * (1.0 / g.h);
  if (j == g.ny - 1) return (at(i, j) - at(i, j - 1)) * (1.0 / g.h);
  return (at(i, j + 1) - at(i, j - 1)) * (0.5 / g.h);
}

// Fourth-order central differences where a two-node margin exists, falling
// back to the second-order stencils near the boundary.
template <typename Value, typename At>
inline Value d_di4(const Grid2& g, const At& at, int i, int j) {
  if (i < 2 || i > g.nx - 3) return d_di<Value>(g, at, i, j);
  return (at(i - 2, j) + 8.0 * at(i + 1, j) - 8.0 * at(i - 1, j) - at(i + 2, j)) *
         (1.0 / (12.0 * g.h));
}

template <typename Value, typename At>
inline Value d_dj4(const Grid2& g, const At& at, int i, int j) {
  if (j < 2 || j > g.ny - 3) return d_dj<Value>(g, at, i, j);
  return (at(i, j - 2) + 8.0 * at(i, j + 1) - 8.0 * at(i, j - 1) - at(i, j + 2)) *
         (1.0 / (12.0 * g.h));
}

}  // namespace detail

// Per-node 2x2 Jacobian of a vector field, J(i,j) = [du/dx du/dy; dv/dx dv/dy].
inline Mat2 jacobian_at(const VectorField& f, int i, int j) {
  auto at = [&](int ii, int jj) { return f.at(ii, jj); };
  Vec2 dx = detail::d_di<Vec2>(f.grid, at, i, j);
  Vec2 dy = detail::d_dj<Vec2>(f.grid, at, i, j);
  Mat2 m;
  m << dx.x, dy.x, dx.y, dy.y;
  return m;
}

inline std::vector<Mat2> jacobian(const VectorField& f) {
  std::vector<Mat2> out(f.grid.size());
  for (int i = 0; i < f.grid.nx; ++i)
    for (int j = 0; j < f.grid.ny; ++j) out[f.grid.idx(i, j)] = jacobian_at(f, i, j);
  return out;
}

inline Vec2 gradient_at(const ScalarField& f, int i, int j) {
  auto at = [&](int ii, int jj) { return f.at(ii, jj); };
  double dx = detail::d_di<double>(f.grid, at, i, j);
  double dy = detail::d_dj<double>(f.grid, at, i, j);
  return {dx, dy};
}

// Vector-field Lie bracket [u,v] = Du*v - Dv*u, evaluated nodewise with the
// difference-stencil Jacobians.
inline VectorField lie_bracket(const VectorField& u, const VectorField& v) {
  require_same_grid(u.grid, v.grid);
  VectorField out(u.grid);
  for (int i = 0; i < u.grid.nx; ++i)
    for (int j = 0; j < u.grid.ny; ++j) {
      Mat2 du = jacobian_at(u, i, j);
      Mat2 dv = jacobian_at(v, i, j);
      const std::size_t k = u.grid.idx(i, j);
      out.values[k] = mat_vec(du, v.values[k]) - mat_vec(dv, u.values[k]);
    }
  return out;
}

// Weighted sum of sampled fields (quadrature over the scale variable):
// sum_j w_j f_j, accumulated in stored order with a single accumulator so
// the floating-point result is reproducible across callers.
inline VectorField integrate_scale(std::span<const VectorField> samples,
                                   std::span<const double> weights) {
  if (samples.empty()) throw std::invalid_argument("integrate_scale: no samples");
  if (samples.size() != weights.size())
    throw std::invalid_argument("integrate_scale: sample/weight count mismatch");
  VectorField acc(samples[0].grid);
  for (std::size_t j = 0; j < samples.size(); ++j) {
    require_same_grid(acc.grid, samples[j].grid);
    const double w = weights[j];
    for (std::size_t k = 0; k < acc.values.size(); ++k)
      acc.values[k] += w * samples[j].values[k];
  }
  return acc;
}

}  // namespace msdiffeo
