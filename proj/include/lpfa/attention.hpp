#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "lpfa/linalg.hpp"

namespace lpfa {

/// Where the backward pass takes δ = rowsum(dO ∘ O) from.
enum class DeltaSource {
  dO_O_lp,          // O as produced by the low-precision forward
  dO_O_hp,          // the F32 companion output
  dP_P,             // rowsum(dP ∘ P), the algebraically equal reformulation
  recompute_PV_hp,  // O rebuilt as P V in F32 inside the backward pass
};

const char* delta_source_name(DeltaSource d);

struct PrecisionPlan {
  Mode score_mode = Mode::LP;      // S = alpha Q Kᵀ
  Mode softmax_mode = Mode::LP;    // grid of P̄ = exp(S - m)
  Mode pv_mode = Mode::LP;         // Ō = P̄ V
  Mode normalize_mode = Mode::LP;  // O = Ō / ℓ
  Mode backward_mode = Mode::HP;
  DeltaSource delta_source = DeltaSource::dO_O_lp;
  bool causal = false;

  /// BF16 forward with F32 backward: the mixed-precision default.
  static PrecisionPlan lp();
  static PrecisionPlan hp();
  static PrecisionPlan exact();
};

/// Everything the forward pass saw, kept for the backward pass and for the
/// lp-vs-hp comparisons.
struct AttnTape {
  Mat S;     // alpha-scaled scores on the score grid (-inf where masked)
  Mat Pbar;  // exp(S - m) on the softmax grid; each row's max is exactly 1
  Mat P;     // exp(S - L), row-stochastic; F64 in exact plans, else F32
  Mat O_lp;  // the plan-path output
  Mat O_hp;  // F32 companion from the same P̄ and ℓ (== O_lp without lp stages)
  Vec m, l, L;
  double alpha = 1.0;
  PrecisionPlan plan;
  Mat q, k, v;
};

struct AttnGrads {
  Mat dQ, dK, dV;
  Mat dS, dP;
  Vec delta;
};

struct SoftmaxParts {
  Mat p_bar;  // F64, ungridded
  Vec m;
  Vec l;
};

/// Row-shifted exponentials: p_bar = exp(s - rowmax(s)), l = rowsum(p_bar).
/// -inf entries (masking) map to 0.
SoftmaxParts safe_softmax(const Mat& s);

AttnTape forward(const Mat& q, const Mat& k, const Mat& v, double alpha,
                 const PrecisionPlan& plan);

AttnGrads backward(const AttnTape& tape, const Mat& dO,
                   const PrecisionPlan& plan);
AttnGrads backward(const AttnTape& tape, const Mat& dO);

/// (δ_lp - δ_hp) per row: rowsum(dO ∘ O_lp) - rowsum(dO ∘ O_hp) in F64.
Vec delta_diff(const AttnTape& tape, const Mat& dO);

/// Tape round-trip through the sectioned binary container.
std::vector<std::byte> tape_to_bytes(const AttnTape& tape);
AttnTape tape_from_bytes(std::span<const std::byte> bytes);

}  // namespace lpfa
