#pragma once

#include "lpfa/attention.hpp"

namespace lpfa {

struct TileConfig {
  std::size_t block_rows = 0;  // B_r
  std::size_t block_cols = 0;  // B_c
  double beta = 7.0;           // dynamic-maximum factor, used when stabilized
  bool stabilized = false;
  /// Also adjust rows whose repeated maximum is exactly 0 (a case the
  /// where-rules leave untouched); their maximum becomes 1.
  bool strict_zero_max = false;
};

struct FlashOut {
  Mat O;     // plan-path output
  Mat O_hp;  // F32 companion from the same probabilities (== O without lp stages)
  Vec L;     // logsumexp statistics m + log(l)
  Vec m;
  Vec l;
};

/// Tiled online-softmax forward. With block_rows == block_cols == N the
/// result is bit-identical to attention.forward under the same plan.
FlashOut flash_forward(const Mat& q, const Mat& k, const Mat& v, double alpha,
                       const TileConfig& cfg, const PrecisionPlan& plan);

/// Per-row block maximum with the dynamic adjustment: a repeated positive
/// maximum becomes beta*r_m, a repeated negative one becomes 0, all others
/// (including a repeated zero unless strict_zero_max) pass through. Fully
/// masked rows stay at -inf. When `running` is given (one entry per block
/// row), a block maximum equal to the running maximum counts as repeated,
/// so values split across blocks are caught too.
Vec stabilized_rowmax(const Mat& s_block, double beta,
                      bool strict_zero_max = false,
                      const Vec* running = nullptr);

/// flash_forward with the per-block maxima adjusted before the running-max
/// merge (repeats detected against the running maximum as well); requires
/// cfg.stabilized and cfg.beta > 1.
FlashOut stabilized_flash_forward(const Mat& q, const Mat& k, const Mat& v,
                                  double alpha, const TileConfig& cfg,
                                  const PrecisionPlan& plan);

/// Full-matrix tape assembled from flash outputs: S rebuilt per entry
/// (entries are tiling-independent), P = exp(S - L) exactly as the backward
/// recomputes it, Pbar relative to the final running maximum. For a standard
/// run this matches the non-tiled forward's tape; for a stabilized run it is
/// the only tape (and Pbar's row maxima sit below 1 by construction).
AttnTape flash_tape(const Mat& q, const Mat& k, const Mat& v, double alpha,
                    const PrecisionPlan& plan, const FlashOut& out);

/// Tiled backward per Alg. 2: recomputes P = exp(S - L) blockwise and
/// accumulates dQ, dK, dV in the tiled loop order (which matches the
/// non-tiled ascending order, so results are bit-identical to
/// attention.backward at every block size). If tape is given, L is checked
/// against the tape's L by checksum and a mismatch throws ("stale L"); the
/// dO_O_hp delta source requires the tape.
AttnGrads flash_backward(const Mat& q, const Mat& k, const Mat& v,
                         const Mat& O, const Mat& dO, const Vec& L,
                         double alpha, const TileConfig& cfg,
                         const PrecisionPlan& plan,
                         const AttnTape* tape = nullptr);

}  // namespace lpfa
