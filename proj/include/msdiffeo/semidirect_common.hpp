#pragma once

// Shared conventions for scale-indexed tuples.
//
// A tuple (g_1, ..., g_n) lists one factor per scale. Two index conventions
// are supported, named after where the coarse scale sits:
//
//   CoarseLast:  component 1 is the finest scale, component n the coarsest.
//   CoarseFirst: component 1 is the coarsest scale, component n the finest.
//
// In both conventions the composite map applies the finest factor to points
// first. The product twists by conjugation with the factors that sit closer
// to the coarse end: suffix factors for CoarseLast, prefix factors for
// CoarseFirst.

namespace msdiffeo {

enum class Ordering { CoarseLast, CoarseFirst };

inline const char* ordering_name(Ordering o) {
  return o == Ordering::CoarseLast ? "coarse_last" : "coarse_first";
}

}  // namespace msdiffeo
