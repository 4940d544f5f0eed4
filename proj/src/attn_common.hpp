// Shared low-level steps of the tiled and non-tiled attention paths. Both
// must produce bit-identical values entry by entry, so the gridding and
// accumulation rules live in exactly one place.
#pragma once

#include <cmath>
#include <limits>

#include "lpfa/attention.hpp"

namespace lpfa::detail {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// One alpha-scaled score entry: mode-arithmetic dot of q[i,:] and k[j,:],
/// then the F64 alpha product, then the score grid.
double score_entry(const Mat& q, const Mat& k, std::size_t i, std::size_t j,
                   double alpha, Mode mode);

/// Score block rows [r0, r0+nr) x cols [c0, c0+nc) with causal masking
/// applied on global indices (masked entries are -inf).
Mat score_block(const Mat& q, const Mat& k, double alpha,
                const PrecisionPlan& plan, std::size_t r0, std::size_t nr,
                std::size_t c0, std::size_t nc);

/// exp(x) on the softmax grid; -inf maps to exactly 0.
double grid_exp(double x, Grid g);

/// O = o_acc / l on the normalize path: F32 divide for lp/hp accumulators,
/// F64 for exact, then the normalize grid.
double norm_div(double o_acc, double l, Mode accum, Grid out_grid);

/// Accumulator arithmetic for the running O, l: F32 for lp/hp, F64 exact.
inline bool f32_accum(Mode pv_mode) { return pv_mode != Mode::Exact; }

inline double acc_add(double a, double b, bool f32) {
  if (f32) {
    return static_cast<double>(static_cast<float>(a) + static_cast<float>(b));
  }
  return a + b;
}

inline double acc_mul(double a, double b, bool f32) {
  if (f32) {
    return static_cast<double>(static_cast<float>(a) * static_cast<float>(b));
  }
  return a * b;
}

inline double acc_fma(double acc, double a, double b, bool f32) {
  return acc_add(acc, acc_mul(a, b, f32), f32);
}

/// Matmul with AMP-style operand casting: inputs are snapped to the mode's
/// operand grid at the boundary.
Mat cast_mm(const Mat& a, const Mat& b, Mode mode,
            SumMode sum = SumMode::FinalRound);

}  // namespace lpfa::detail
