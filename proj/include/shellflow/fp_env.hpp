#pragma once

#if defined(__SSE__) || defined(__x86_64__)
#include <xmmintrin.h>
#define SHELLFLOW_HAVE_MXCSR 1
#endif

namespace shellflow {

/// Flushes subnormal results and operands to zero for the current thread
/// while in scope. Strongly damped shells decay into the subnormal range,
/// where x86 arithmetic is one to two orders of magnitude slower; values
/// that small carry no information at |u| ~ 1. Every simulation entry point
/// installs the guard, so results do not depend on the caller's setting.
class FlushDenormals {
public:
    FlushDenormals() noexcept {
#ifdef SHELLFLOW_HAVE_MXCSR
        saved_ = _mm_getcsr();
        _mm_setcsr(saved_ | 0x8040u);  // FTZ | DAZ
#endif
    }
    ~FlushDenormals() {
#ifdef SHELLFLOW_HAVE_MXCSR
        _mm_setcsr(saved_);
#endif
    }
    FlushDenormals(const FlushDenormals&) = delete;
    FlushDenormals& operator=(const FlushDenormals&) = delete;

private:
    unsigned saved_ = 0;
};

}  // namespace shellflow
