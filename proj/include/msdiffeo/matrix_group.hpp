#pragma once

// Finite-dimensional model for the iterated semidirect-product laws: a nested
// chain of 3x3 matrix groups
//
//   GL3  >  invertible upper triangular  >  unipotent upper triangular
//        >  central unipotent (only the (0,2) entry free)
//
// on which both product orderings, their inverses, the reordering
// homomorphism, and the two trivializations can be checked to near machine
// precision. Multiplication and level-aware inversion preserve the structural
// zero/one patterns exactly in floating point.

#include <cmath>
#include <cstddef>
#include <random>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "msdiffeo/semidirect_common.hpp"

namespace msdiffeo {

using Mat3 = Eigen::Matrix3d;

// Chain depth: 0 is the largest group, higher levels are deeper subgroups.
enum class MatrixLevel : int { General = 0, Triangular = 1, Unipotent = 2, Central = 3 };

struct MatrixGroupElement {
  Mat3 m = Mat3::Identity();
  MatrixLevel level = MatrixLevel::General;

  MatrixGroupElement() = default;
  MatrixGroupElement(const Mat3& mat, MatrixLevel lvl) : m(mat), level(lvl) {}

  static MatrixGroupElement identity(MatrixLevel lvl) {
    return {Mat3::Identity(), lvl};
  }
};

inline bool matrix_in_level(const Mat3& m, MatrixLevel lvl) {
  switch (lvl) {
    case MatrixLevel::General:
      return true;
    case MatrixLevel::Triangular:
      return m(1, 0) == 0.0 && m(2, 0) == 0.0 && m(2, 1) == 0.0;
    case MatrixLevel::Unipotent:
      return matrix_in_level(m, MatrixLevel::Triangular) && m(0, 0) == 1.0 &&
             m(1, 1) == 1.0 && m(2, 2) == 1.0;
    case MatrixLevel::Central:
      return matrix_in_level(m, MatrixLevel::Unipotent) && m(0, 1) == 0.0 && m(1, 2) == 0.0;
  }
  return false;
}

// Level-aware inverse: closed forms for the deeper levels keep the structural
// pattern exact; the general level uses a dense solve.
inline Mat3 matrix_inverse(const Mat3& m, MatrixLevel lvl) {
  switch (lvl) {
    case MatrixLevel::Central: {
      Mat3 r = Mat3::Identity();
      r(0, 2) = -m(0, 2);
      return r;
    }
    case MatrixLevel::Unipotent: {
      const double a = m(0, 1), b = m(0, 2), c = m(1, 2);
      Mat3 r = Mat3::Identity();
      r(0, 1) = -a;
      r(1, 2) = -c;
      r(0, 2) = a * c - b;
      return r;
    }
    case MatrixLevel::Triangular: {
      // Back substitution on the upper triangle.
      Mat3 r = Mat3::Zero();
      r(0, 0) = 1.0 / m(0, 0);
      r(1, 1) = 1.0 / m(1, 1);
      r(2, 2) = 1.0 / m(2, 2);
      r(1, 2) = -m(1, 2) * r(2, 2) / m(1, 1);
      r(0, 1) = -m(0, 1) * r(1, 1) / m(0, 0);
      r(0, 2) = -(m(0, 1) * r(1, 2) + m(0, 2) * r(2, 2)) / m(0, 0);
      return r;
    }
    case MatrixLevel::General:
    default: {
      Eigen::FullPivLU<Mat3> lu(m);
      if (!lu.isInvertible()) throw std::runtime_error("singular matrix group element");
      return lu.inverse();
    }
  }
}

inline MatrixGroupElement inverse(const MatrixGroupElement& g) {
  return {matrix_inverse(g.m, g.level), g.level};
}

// Product of elements from levels la and lb lives in the shallower level.
inline MatrixGroupElement multiply(const MatrixGroupElement& a, const MatrixGroupElement& b) {
  MatrixLevel lvl = static_cast<int>(a.level) < static_cast<int>(b.level) ? a.level : b.level;
  return {a.m * b.m, lvl};
}

inline MatrixGroupElement conjugate(const MatrixGroupElement& g, const MatrixGroupElement& h) {
  // c_g h = g h g^{-1}
  return {g.m * h.m * matrix_inverse(g.m, g.level), h.level};
}

inline double sup_abs_diff(const Mat3& a, const Mat3& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

// Random well-conditioned element of a given level.
inline MatrixGroupElement random_element(std::mt19937_64& rng, MatrixLevel lvl) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> diag(0.5, 1.5);
  Mat3 m = Mat3::Identity();
  switch (lvl) {
    case MatrixLevel::General: {
      for (int tries = 0; tries < 64; ++tries) {
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) m(i, j) = (i == j ? diag(rng) : 0.5 * u(rng));
        if (std::abs(m.determinant()) > 0.2) break;
      }
      break;
    }
    case MatrixLevel::Triangular:
      m(0, 0) = diag(rng);
      m(1, 1) = diag(rng);
      m(2, 2) = diag(rng);
      m(0, 1) = u(rng);
      m(0, 2) = u(rng);
      m(1, 2) = u(rng);
      break;
    case MatrixLevel::Unipotent:
      m(0, 1) = u(rng);
      m(0, 2) = u(rng);
      m(1, 2) = u(rng);
      break;
    case MatrixLevel::Central:
      m(0, 2) = u(rng);
      break;
  }
  return {m, lvl};
}

// ---------------------------------------------------------------------------
// Tuples over the chain. CoarseLast tuples decrease in group size along the
// tuple (component 1 in the largest group, the finest scale); CoarseFirst
// tuples increase (component 1 in the deepest subgroup, the coarsest scale).
// ---------------------------------------------------------------------------

struct MatrixSdpTuple {
  Ordering ordering = Ordering::CoarseLast;
  std::vector<MatrixGroupElement> comps;

  std::size_t size() const { return comps.size(); }
};

inline MatrixLevel chain_level(Ordering ord, std::size_t n, std::size_t k) {
  // Levels used for an n-tuple are 0..n-1 of the chain.
  int lvl = ord == Ordering::CoarseLast ? static_cast<int>(k)
                                        : static_cast<int>(n - 1 - k);
  return static_cast<MatrixLevel>(lvl);
}

inline MatrixSdpTuple random_tuple(std::mt19937_64& rng, Ordering ord, std::size_t n) {
  if (n < 1 || n > 4) throw std::invalid_argument("matrix chain supports 1..4 levels");
  MatrixSdpTuple t;
  t.ordering = ord;
  for (std::size_t k = 0; k < n; ++k) t.comps.push_back(random_element(rng, chain_level(ord, n, k)));
  return t;
}

inline MatrixSdpTuple identity_tuple(Ordering ord, std::size_t n) {
  MatrixSdpTuple t;
  t.ordering = ord;
  for (std::size_t k = 0; k < n; ++k)
    t.comps.push_back(MatrixGroupElement::identity(chain_level(ord, n, k)));
  return t;
}

// Identity seeded at the deepest level used by an n-tuple, so that running
// prefix/suffix products pick up the correct (shallowest-participant) level
// through multiply() and keep pattern-exact inverses available.
inline MatrixGroupElement deep_identity(std::size_t n) {
  return MatrixGroupElement::identity(static_cast<MatrixLevel>(static_cast<int>(n) - 1));
}

// Semidirect product in the ordering-dependent form:
//   CoarseLast:  (a.b)_k = a_k * c_{a_{k+1}...a_n}(b_k)
//   CoarseFirst: (a.b)_k = c_{(b_1...b_{k-1})^{-1}}(a_k) * b_k
inline MatrixSdpTuple sdp_multiply(const MatrixSdpTuple& a, const MatrixSdpTuple& b) {
  if (a.ordering != b.ordering || a.size() != b.size())
    throw std::invalid_argument("semidirect product of mismatched tuples");
  const std::size_t n = a.size();
  MatrixSdpTuple out;
  out.ordering = a.ordering;
  out.comps.resize(n);
  if (a.ordering == Ordering::CoarseLast) {
    // Build from the last component backwards so the suffix a_{k+1}...a_n is available.
    MatrixGroupElement suffix = deep_identity(n);
    for (std::size_t k = n; k-- > 0;) {
      out.comps[k] = multiply(a.comps[k], conjugate(suffix, b.comps[k]));
      if (k > 0) suffix = multiply(a.comps[k], suffix);
    }
  } else {
    MatrixGroupElement prefix = deep_identity(n);
    for (std::size_t k = 0; k < n; ++k) {
      out.comps[k] = multiply(conjugate(inverse(prefix), a.comps[k]), b.comps[k]);
      prefix = multiply(prefix, b.comps[k]);
    }
  }
  return out;
}

inline MatrixSdpTuple sdp_inverse(const MatrixSdpTuple& a) {
  const std::size_t n = a.size();
  MatrixSdpTuple out;
  out.ordering = a.ordering;
  out.comps.resize(n);
  if (a.ordering == Ordering::CoarseLast) {
    // inv_n = a_n^{-1}; inv_k = c_{(a_{k+1}...a_n)^{-1}}(a_k^{-1}).
    MatrixGroupElement suffix = deep_identity(n);
    for (std::size_t k = n; k-- > 0;) {
      out.comps[k] = conjugate(inverse(suffix), inverse(a.comps[k]));
      suffix = multiply(a.comps[k], suffix);
    }
  } else {
    // inv_1 = a_1^{-1}; inv_k = c_{(inv_1...inv_{k-1})^{-1}}(a_k^{-1}).
    MatrixGroupElement prefix = deep_identity(n);
    for (std::size_t k = 0; k < n; ++k) {
      out.comps[k] = conjugate(inverse(prefix), inverse(a.comps[k]));
      prefix = multiply(prefix, out.comps[k]);
    }
  }
  return out;
}

// Reordering homomorphism CoarseLast -> CoarseFirst:
//   Phi(g)_1 = g_n,  Phi(g)_k = c_{(g_{n+2-k}...g_n)^{-1}}(g_{n+1-k}).
inline MatrixSdpTuple reorder_hom(const MatrixSdpTuple& g) {
  if (g.ordering != Ordering::CoarseLast)
    throw std::invalid_argument("reorder_hom expects a CoarseLast tuple");
  const std::size_t n = g.size();
  MatrixSdpTuple out;
  out.ordering = Ordering::CoarseFirst;
  out.comps.resize(n);
  MatrixGroupElement suffix = deep_identity(n);
  for (std::size_t k = 1; k <= n; ++k) {
    const MatrixGroupElement& src = g.comps[n - k];
    out.comps[k - 1] = conjugate(inverse(suffix), src);
    suffix = multiply(src, suffix);
  }
  return out;
}

enum class Trivialization { T1, T2 };

// Homomorphisms into the direct product, both listing component k as the
// composite of everything from scale k outward:
//   T1 on CoarseLast:  out_k = g_k g_{k+1} ... g_n   (suffix products)
//   T2 on CoarseFirst: out_k = g_1 ... g_{n+1-k}     (prefix products, longest first)
// With these conventions T2 o reorder_hom = T1 holds componentwise.
inline std::vector<MatrixGroupElement> trivialize(const MatrixSdpTuple& g, Trivialization which) {
  const std::size_t n = g.size();
  std::vector<MatrixGroupElement> out(n);
  if (which == Trivialization::T1) {
    if (g.ordering != Ordering::CoarseLast)
      throw std::invalid_argument("T1 expects a CoarseLast tuple");
    MatrixGroupElement suffix = deep_identity(n);
    for (std::size_t k = n; k-- > 0;) {
      suffix = multiply(g.comps[k], suffix);
      out[k] = suffix;
    }
  } else {
    if (g.ordering != Ordering::CoarseFirst)
      throw std::invalid_argument("T2 expects a CoarseFirst tuple");
    MatrixGroupElement prefix = deep_identity(n);
    for (std::size_t k = 0; k < n; ++k) {
      prefix = multiply(prefix, g.comps[k]);
      out[n - 1 - k] = prefix;
    }
  }
  return out;
}

// Total composite map carried by a tuple (the image of the homomorphism into
// the full group): for CoarseLast tuples g_1 ... g_n, for CoarseFirst tuples
// likewise g_1 ... g_n (prefix of everything).
inline Mat3 tuple_total(const MatrixSdpTuple& g) {
  Mat3 acc = Mat3::Identity();
  for (const MatrixGroupElement& c : g.comps) acc = acc * c.m;
  return acc;
}

}  // namespace msdiffeo
