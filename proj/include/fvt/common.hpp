#pragma once

// Every library symbol lives in an inline namespace keyed on the scalar
// precision. The default build is 32-bit; FVT_REAL_DOUBLE selects a 64-bit
// build of the same sources, used by the finite-difference gradient suite.
// Both builds can be linked into one binary without symbol clashes.

#if defined(FVT_REAL_DOUBLE)
#define FVT_NS f64
#else
#define FVT_NS f32
#endif

namespace fvt {
inline namespace FVT_NS {

#if defined(FVT_REAL_DOUBLE)
using real = double;
#else
using real = float;
#endif

}  // namespace FVT_NS
}  // namespace fvt
