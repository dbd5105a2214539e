#pragma once

namespace hseg {

// Scalar type for all tensor arithmetic. 64-bit by default; a build with
// HSEG_REAL32 switches the whole stack to 32-bit floats.
#ifdef HSEG_REAL32
using real_t = float;
#else
using real_t = double;
#endif

}  // namespace hseg
