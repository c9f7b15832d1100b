// Grid, field, and landmark primitives: interpolation semantics, the
// difference-stencil calculus, and the scale quadrature accumulator.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <vector>

#include "msdiffeo/fields.hpp"
#include "support/polynomial_fields.hpp"

using namespace msdiffeo;
using msdiffeo::testsupport::interior_sup;
using msdiffeo::testsupport::Poly2;
using msdiffeo::testsupport::poly_bracket;
using msdiffeo::testsupport::PolyVec2;
using msdiffeo::testsupport::sample;

TEST_CASE("grid geometry and validation", "[fields]") {
  const Grid2 g(5, 4, 0.25, 1.0, -2.0);
  CHECK(g.size() == 20);
  CHECK(g.idx(0, 0) == 0);
  CHECK(g.idx(1, 0) == 4);  // row-major in i
  CHECK(g.idx(2, 3) == 11);
  CHECK(g.node(0, 0).x == 1.0);
  CHECK(g.node(3, 2).x == Catch::Approx(1.75));
  CHECK(g.node(3, 2).y == Catch::Approx(-1.5));
  CHECK(g.x_max() == Catch::Approx(2.0));
  CHECK(g.y_max() == Catch::Approx(-1.25));
  CHECK(g.same_as(Grid2(5, 4, 0.25, 1.0, -2.0)));
  CHECK_FALSE(g.same_as(Grid2(5, 4, 0.25, 1.0, -1.0)));

  CHECK_THROWS_AS(Grid2(1, 4, 0.25), std::invalid_argument);
  CHECK_THROWS_AS(Grid2(4, 1, 0.25), std::invalid_argument);
  CHECK_THROWS_AS(Grid2(4, 4, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(Grid2(4, 4, -0.1), std::invalid_argument);
  CHECK_THROWS_AS(Grid2(4, 4, std::numeric_limits<double>::quiet_NaN()), std::invalid_argument);
  CHECK_THROWS_AS(Grid2(4, 4, 0.25, std::numeric_limits<double>::infinity(), 0.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(require_same_grid(g, Grid2(5, 5, 0.25, 1.0, -2.0)), std::invalid_argument);
}

TEST_CASE("scalar interpolation is exact on bilinear functions and clamps outside",
          "[fields]") {
  const Grid2 g(9, 7, 0.125, 0.25, -0.5);
  auto fn = [](double x, double y) { return 2.0 + 0.5 * x - 0.3 * y + 0.7 * x * y; };
  ScalarField f(g);
  for (int i = 0; i < g.nx; ++i)
    for (int j = 0; j < g.ny; ++j) f.at(i, j) = fn(g.node(i, j).x, g.node(i, j).y);

  for (Vec2 q : {Vec2{0.437, -0.123}, Vec2{0.2500001, -0.4999}, Vec2{1.112, 0.1},
                 Vec2{0.8, -0.25}}) {
    CHECK(interpolate(f, q) == Catch::Approx(fn(q.x, q.y)).margin(1e-13));
  }

  // Clamped queries evaluate at the nearest box point.
  CHECK(interpolate(f, {g.x_max() + 3.0, 0.0}) ==
        Catch::Approx(fn(g.x_max(), 0.0)).margin(1e-13));
  CHECK(interpolate(f, {0.5, -5.0}) == Catch::Approx(fn(0.5, -0.5)).margin(1e-13));
  CHECK(interpolate(f, {-10.0, 10.0}) ==
        Catch::Approx(fn(0.25, g.y_max())).margin(1e-13));
  CHECK_THROWS_AS(interpolate(f, {std::numeric_limits<double>::quiet_NaN(), 0.0}),
                  std::invalid_argument);
}

TEST_CASE("vector interpolation is exact inside and fades over one cell outside",
          "[fields]") {
  const Grid2 g(9, 9, 0.125, 0.0, 0.0);
  const Mat2 A = (Mat2() << 0.3, -0.2, 0.5, 0.1).finished();
  const Vec2 b{0.05, -0.02};
  VectorField f(g);
  for (int i = 0; i < g.nx; ++i)
    for (int j = 0; j < g.ny; ++j) f.at(i, j) = mat_vec(A, g.node(i, j)) + b;

  for (Vec2 q : {Vec2{0.31, 0.77}, Vec2{0.0001, 0.9999}, Vec2{0.5, 0.5}}) {
    const Vec2 got = interpolate(f, q);
    const Vec2 want = mat_vec(A, q) + b;
    CHECK(norm2(got - want) < 1e-14);
  }

  // A constant field halves half a cell beyond the box and dies at one cell.
  const Vec2 c{0.4, -0.7};
  VectorField cf(g, c);
  const Vec2 half_left = interpolate(cf, {-0.5 * g.h, 0.5});
  CHECK(norm2(half_left - 0.5 * c) < 1e-15);
  const Vec2 quarter_right = interpolate(cf, {g.x_max() + 0.25 * g.h, 0.5});
  CHECK(norm2(quarter_right - 0.75 * c) < 1e-15);
  const Vec2 corner = interpolate(cf, {-0.5 * g.h, -0.5 * g.h});
  CHECK(norm2(corner - 0.25 * c) < 1e-15);
  CHECK(norm2(interpolate(cf, {-g.h, 0.5})) == 0.0);
  CHECK(norm2(interpolate(cf, {0.5, g.y_max() + g.h})) == 0.0);
  CHECK(norm2(interpolate(cf, {5.0, 0.5})) == 0.0);
}

TEST_CASE("interpolated gradient matches the bilinear surface and zeroes when clamped",
          "[fields]") {
  const Grid2 g(9, 7, 0.125, 0.25, -0.5);
  const double a = 2.0, bx = 0.5, cy = -0.3, dxy = 0.7;
  ScalarField f(g);
  for (int i = 0; i < g.nx; ++i)
    for (int j = 0; j < g.ny; ++j) {
      const Vec2 p = g.node(i, j);
      f.at(i, j) = a + bx * p.x + cy * p.y + dxy * p.x * p.y;
    }

  for (Vec2 q : {Vec2{0.437, -0.123}, Vec2{0.9, -0.4}, Vec2{1.1, 0.2}}) {
    const Vec2 got = interpolate_gradient(f, q);
    CHECK(got.x == Catch::Approx(bx + dxy * q.y).margin(1e-12));
    CHECK(got.y == Catch::Approx(cy + dxy * q.x).margin(1e-12));
  }

  const Vec2 clamped_x = interpolate_gradient(f, {g.x_max() + 1.0, -0.2});
  CHECK(clamped_x.x == 0.0);
  CHECK(clamped_x.y == Catch::Approx(cy + dxy * g.x_max()).margin(1e-12));
  const Vec2 clamped_y = interpolate_gradient(f, {0.5, -4.0});
  CHECK(clamped_y.y == 0.0);
  CHECK(clamped_y.x == Catch::Approx(bx + dxy * (-0.5)).margin(1e-12));
}

TEST_CASE("difference stencils are exact on affine fields at every node", "[fields]") {
  const Grid2 g(7, 8, 0.2, -0.3, 0.1);
  const Mat2 A = (Mat2() << 0.7, -0.4, 0.2, 0.9).finished();
  VectorField f(g);
  for (int i = 0; i < g.nx; ++i)
    for (int j = 0; j < g.ny; ++j) f.at(i, j) = mat_vec(A, g.node(i, j)) + Vec2{1.0, -2.0};
  for (int i = 0; i < g.nx; ++i)
    for (int j = 0; j < g.ny; ++j) {
      const Mat2 J = jacobian_at(f, i, j);
      CHECK((J - A).cwiseAbs().maxCoeff() < 1e-13);
    }

  ScalarField s(g);
  for (int i = 0; i < g.nx; ++i)
    for (int j = 0; j < g.ny; ++j) s.at(i, j) = 0.4 * g.node(i, j).x - 1.3 * g.node(i, j).y;
  for (int i = 0; i < g.nx; ++i)
    for (int j = 0; j < g.ny; ++j) {
      const Vec2 grad = gradient_at(s, i, j);
      CHECK(grad.x == Catch::Approx(0.4).margin(1e-13));
      CHECK(grad.y == Catch::Approx(-1.3).margin(1e-13));
    }
}

TEST_CASE("grid bracket tracks the exact polynomial bracket at stencil order", "[fields]") {
  const PolyVec2 u{Poly2::monomial(3, 0, 1.0) + Poly2::monomial(1, 2, -2.0),
                   Poly2::monomial(1, 1, 1.0) + Poly2::monomial(0, 3, 1.0)};
  const PolyVec2 v{Poly2::monomial(2, 1, 1.0),
                   Poly2::monomial(1, 0, 1.0) + Poly2::monomial(0, 2, -1.0)};
  const PolyVec2 exact = poly_bracket(u, v);

  const double margin = 2.0 / 32.0;  // same physical interior on both grids
  double res33 = 0.0, res65 = 0.0;
  for (int gn : {33, 65}) {
    const Grid2 g(gn, gn, 1.0 / (gn - 1));
    const VectorField bg = lie_bracket(sample(u, g), sample(v, g));
    (gn == 33 ? res33 : res65) = interior_sup(bg, exact, margin);
  }
  INFO("bracket truncation: 33^2 " << res33 << ", 65^2 " << res65);
  CHECK(res65 < 2e-3);              // absolute floor for these cubic fields
  CHECK(res33 / res65 > 3.5);       // second-order stencils quarter the error
  CHECK(res33 / res65 < 4.5);
}

TEST_CASE("scale quadrature accumulates in stored order", "[fields]") {
  const Grid2 g(4, 3, 0.5);
  std::vector<VectorField> fs;
  for (int k = 0; k < 3; ++k) {
    VectorField f(g);
    for (std::size_t q = 0; q < f.values.size(); ++q)
      f.values[q] = {0.1 * k + 0.01 * q, 0.2 * k - 0.03 * q};
    fs.push_back(std::move(f));
  }
  const std::vector<double> w{0.5, 1.25, -0.75};
  const VectorField got = integrate_scale(fs, w);
  VectorField want(g);
  for (std::size_t j = 0; j < fs.size(); ++j)
    for (std::size_t q = 0; q < want.values.size(); ++q)
      want.values[q] += w[j] * fs[j].values[q];
  for (std::size_t q = 0; q < want.values.size(); ++q) {
    CHECK(got.values[q].x == want.values[q].x);  // bitwise: same accumulation order
    CHECK(got.values[q].y == want.values[q].y);
  }

  CHECK_THROWS_AS(integrate_scale(std::span<const VectorField>{},
                                  std::span<const double>{}),
                  std::invalid_argument);
  const std::vector<double> short_w{1.0};
  CHECK_THROWS_AS(integrate_scale(std::span<const VectorField>(fs.data(), 3),
                                  std::span<const double>(short_w.data(), 1)),
                  std::invalid_argument);
  std::vector<VectorField> mixed;
  mixed.emplace_back(g);
  mixed.emplace_back(Grid2(5, 3, 0.5));
  const std::vector<double> w2{1.0, 1.0};
  CHECK_THROWS_AS(integrate_scale(std::span<const VectorField>(mixed.data(), 2),
                                  std::span<const double>(w2.data(), 2)),
                  std::invalid_argument);
}

TEST_CASE("landmark sets validate shape, finiteness, and separation", "[fields]") {
  const LandmarkSet lm = LandmarkSet::from_points({{0.1, 0.2}, {0.5, 0.6}, {0.9, 0.1}});
  CHECK(lm.size() == 3);
  CHECK(lm.ids == std::vector<int>{0, 1, 2});
  CHECK_NOTHROW(lm.check_separation(1.0));

  CHECK_THROWS_AS(LandmarkSet({0, 1}, {{0.0, 0.0}}), std::invalid_argument);
  CHECK_THROWS_AS(
      LandmarkSet::from_points({{0.0, std::numeric_limits<double>::quiet_NaN()}}),
      std::invalid_argument);
  const LandmarkSet close = LandmarkSet::from_points({{0.3, 0.3}, {0.3, 0.3 + 1e-15}});
  CHECK_THROWS_AS(close.check_separation(1.0), std::invalid_argument);
}

TEST_CASE("field containers validate finiteness and combine elementwise", "[fields]") {
  const Grid2 g(3, 3, 0.5);
  VectorField a(g, {1.0, 2.0});
  VectorField b(g, {0.25, -0.5});
  a += b;
  CHECK(a.at(1, 1).x == Catch::Approx(1.25));
  a *= 2.0;
  CHECK(a.at(2, 2).y == Catch::Approx(3.0));
  CHECK_NOTHROW(a.check_finite());
  a.at(0, 1).y = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(a.check_finite(), std::invalid_argument);

  ScalarField s(g, 1.5);
  CHECK_NOTHROW(s.check_finite());
  s.at(2, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(s.check_finite(), std::invalid_argument);

  VectorField other(Grid2(4, 3, 0.5));
  CHECK_THROWS_AS(b += other, std::invalid_argument);
}
