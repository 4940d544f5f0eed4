#include "lpfa/flash.hpp"

#include <cmath>
#include <stdexcept>

#include "lpfa/serialize.hpp"
#include "attn_common.hpp"

namespace lpfa {
namespace {

using detail::acc_add;
using detail::acc_fma;
using detail::acc_mul;
using detail::kNegInf;
using detail::score_block;
using detail::score_entry;

void check_shapes(const Mat& q, const Mat& k, const Mat& v,
                  const PrecisionPlan& plan) {
  if (q.cols != k.cols) throw std::invalid_argument("flash: q/k dim mismatch");
  if (v.rows != k.rows) throw std::invalid_argument("flash: k/v row mismatch");
  if (plan.causal && q.rows != k.rows) {
    throw std::invalid_argument("flash: causal mask needs square scores");
  }
}

void check_tiles(const TileConfig& cfg, std::size_t n_rows,
                 std::size_t n_cols) {
  if (cfg.block_rows == 0 || cfg.block_cols == 0) {
    throw std::invalid_argument("flash: block sizes must be positive");
  }
  if (cfg.block_rows > n_rows || cfg.block_cols > n_cols) {
    throw std::invalid_argument("flash: block larger than the matrix");
  }
  if (cfg.stabilized && !(cfg.beta > 1.0)) {
    throw std::invalid_argument("flash: stabilized run needs beta > 1");
  }
}

void check_block_usable(const Mat& s) {
  for (double x : s.data) {
    if (std::isnan(x) || x == std::numeric_limits<double>::infinity()) {
      throw std::runtime_error("flash: non-finite score");
    }
  }
}

// P entry recomputed from the saved statistics, on the tape's P grid.
double recompute_p(double s, double big_l, Grid p_grid) {
  if (s == kNegInf || big_l == kNegInf) return 0.0;
  return snap(std::exp(s - big_l), p_grid);
}

}  // namespace

Vec stabilized_rowmax(const Mat& s_block, double beta, bool strict_zero_max,
                      const Vec* running) {
  if (s_block.empty()) {
    throw std::invalid_argument("stabilized_rowmax: empty block");
  }
  if (running && running->size() != s_block.rows) {
    throw std::invalid_argument("stabilized_rowmax: running size mismatch");
  }
  Vec out = Vec::zeros(s_block.rows, Grid::F64);
  for (std::size_t i = 0; i < s_block.rows; ++i) {
    double r_m = kNegInf;
    for (std::size_t j = 0; j < s_block.cols; ++j) {
      const double x = s_block.at(i, j);
      if (std::isnan(x)) throw std::invalid_argument("stabilized_rowmax: NaN entry");
      if (x > r_m) r_m = x;
    }
    if (r_m == kNegInf) {  // fully masked row: leave untouched
      out[i] = r_m;
      continue;
    }
    // A bit-equal running maximum is an earlier occurrence of the same value.
    std::size_t r_s = (running && (*running)[i] == r_m) ? 1 : 0;
    for (std::size_t j = 0; j < s_block.cols; ++j) {
      if (s_block.at(i, j) == r_m) ++r_s;
    }
    double adj = r_m;
    if (r_s > 1) {
      if (r_m > 0) {
        adj = beta * r_m;
      } else if (r_m < 0) {
        adj = 0.0;
      } else if (strict_zero_max) {
        adj = 1.0;
      }
    }
    out[i] = adj;
  }
  return out;
}

FlashOut flash_forward(const Mat& q, const Mat& k, const Mat& v, double alpha,
                       const TileConfig& cfg, const PrecisionPlan& plan) {
  check_shapes(q, k, v, plan);
  const std::size_t n = q.rows, nk = k.rows, dv = v.cols;
  check_tiles(cfg, n, nk);

  const Grid soft_grid = mode_grid(plan.softmax_mode);
  const Grid pv_grid = mode_grid(plan.pv_mode);
  const Grid out_grid = mode_grid(plan.normalize_mode);
  const bool f32 = detail::f32_accum(plan.pv_mode);
  const bool fully_exact =
      plan.pv_mode == Mode::Exact && plan.normalize_mode == Mode::Exact;

  Mat o_acc = Mat::zeros(n, dv, Grid::F64);     // plan-path accumulator
  Mat o_acc_hp = Mat::zeros(n, dv, Grid::F64);  // F32 companion accumulator
  Vec m = Vec::full(n, kNegInf, Grid::F64);
  Vec l = Vec::zeros(n, f32 ? Grid::F32 : Grid::F64);

  for (std::size_t r0 = 0; r0 < n; r0 += cfg.block_rows) {
    const std::size_t nr = std::min(cfg.block_rows, n - r0);
    for (std::size_t c0 = 0; c0 < nk; c0 += cfg.block_cols) {
      const std::size_t nc = std::min(cfg.block_cols, nk - c0);
      const Mat s_blk = score_block(q, k, alpha, plan, r0, nr, c0, nc);
      check_block_usable(s_blk);
      Vec m_run = Vec::zeros(nr, Grid::F64);
      for (std::size_t i = 0; i < nr; ++i) m_run[i] = m[r0 + i];
      const Vec blk_max =
          cfg.stabilized
              ? stabilized_rowmax(s_blk, cfg.beta, cfg.strict_zero_max, &m_run)
              : rowmax(s_blk);

      for (std::size_t i = 0; i < nr; ++i) {
        const std::size_t gi = r0 + i;
        const double m_new = std::max(m[gi], blk_max[i]);
        if (m_new == kNegInf) continue;  // no unmasked column seen yet
        const double scale =
            (m[gi] == kNegInf) ? 0.0
                               : acc_mul(1.0, std::exp(m[gi] - m_new), f32);

        std::vector<double> p_row(nc);
        double row_sum = 0.0;
        for (std::size_t j = 0; j < nc; ++j) {
          p_row[j] = detail::grid_exp(s_blk.at(i, j) - m_new, soft_grid);
          row_sum = acc_add(row_sum, p_row[j], f32);
        }
        l[gi] = acc_add(acc_mul(scale, l[gi], f32), row_sum, f32);

        for (std::size_t f = 0; f < dv; ++f) {
          double o = acc_mul(scale, o_acc.at(gi, f), f32);
          double o_hp = acc_mul(scale, o_acc_hp.at(gi, f), true);
          for (std::size_t j = 0; j < nc; ++j) {
            // PV folds its operands on the pv grid, like the non-tiled
            // matmul's cast; the companion always folds in F32.
            o = acc_fma(o, snap(p_row[j], pv_grid),
                        snap(v.at(c0 + j, f), pv_grid), f32);
            o_hp = acc_fma(o_hp, p_row[j], v.at(c0 + j, f), true);
          }
          o_acc.at(gi, f) = o;
          o_acc_hp.at(gi, f) = o_hp;
        }
        m[gi] = m_new;
      }
    }
  }

  FlashOut out;
  out.O = Mat::zeros(n, dv, out_grid);
  out.O_hp = Mat::zeros(n, dv, Grid::F32);
  out.L = Vec::zeros(n, Grid::F64);
  for (std::size_t i = 0; i < n; ++i) {
    out.L[i] = (l[i] == 0.0) ? kNegInf : m[i] + std::log(l[i]);
    for (std::size_t f = 0; f < dv; ++f) {
      const double o_pv = snap(o_acc.at(i, f), pv_grid);
      out.O.at(i, f) =
          (l[i] == 0.0)
              ? 0.0
              : detail::norm_div(o_pv, l[i], plan.normalize_mode, out_grid);
      out.O_hp.at(i, f) =
          (l[i] == 0.0)
              ? 0.0
              : detail::norm_div(o_acc_hp.at(i, f), l[i], Mode::HP, Grid::F32);
    }
  }
  if (fully_exact) out.O_hp = out.O;  // no low-precision stage to compare against
  out.m = std::move(m);
  out.l = std::move(l);
  return out;
}

FlashOut stabilized_flash_forward(const Mat& q, const Mat& k, const Mat& v,
                                  double alpha, const TileConfig& cfg,
                                  const PrecisionPlan& plan) {
  if (!cfg.stabilized) {
    throw std::invalid_argument("stabilized_flash_forward: cfg.stabilized unset");
  }
  return flash_forward(q, k, v, alpha, cfg, plan);
}

AttnTape flash_tape(const Mat& q, const Mat& k, const Mat& v, double alpha,
                    const PrecisionPlan& plan, const FlashOut& out) {
  check_shapes(q, k, v, plan);
  const std::size_t n = q.rows, nk = k.rows;
  if (out.O.rows != n || out.m.size() != n || out.l.size() != n ||
      out.L.size() != n) {
    throw std::invalid_argument("flash_tape: outputs do not match q/k/v");
  }
  const Grid soft_grid = mode_grid(plan.softmax_mode);
  const bool fully_exact = plan.score_mode == Mode::Exact &&
                           plan.softmax_mode == Mode::Exact &&
                           plan.pv_mode == Mode::Exact &&
                           plan.normalize_mode == Mode::Exact;
  const Grid p_grid = fully_exact ? Grid::F64 : Grid::F32;

  AttnTape tape;
  tape.S = score_block(q, k, alpha, plan, 0, n, 0, nk);
  tape.Pbar = Mat::zeros(n, nk, soft_grid);
  tape.P = Mat::zeros(n, nk, p_grid);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < nk; ++j) {
      const double s = tape.S.at(i, j);
      tape.Pbar.at(i, j) =
          (s == kNegInf) ? 0.0 : detail::grid_exp(s - out.m[i], soft_grid);
      tape.P.at(i, j) = recompute_p(s, out.L[i], p_grid);
    }
  }
  tape.O_lp = out.O;
  tape.O_hp = out.O_hp;
  tape.m = out.m;
  tape.l = out.l;
  tape.L = out.L;
  tape.alpha = alpha;
  tape.plan = plan;
  tape.q = q;
  tape.k = k;
  tape.v = v;
  return tape;
}

AttnGrads flash_backward(const Mat& q, const Mat& k, const Mat& v,
                         const Mat& O, const Mat& dO, const Vec& L,
                         double alpha, const TileConfig& cfg,
                         const PrecisionPlan& plan, const AttnTape* tape) {
  check_shapes(q, k, v, plan);
  const std::size_t n = q.rows, nk = k.rows, d = q.cols, dv = v.cols;
  if (dO.rows != n || dO.cols != dv) {
    throw std::invalid_argument("flash_backward: dO shape mismatch");
  }
  if (O.rows != n || O.cols != dv) {
    throw std::invalid_argument("flash_backward: O shape mismatch");
  }
  if (L.size() != n) {
    throw std::invalid_argument("flash_backward: L length mismatch");
  }
  check_tiles(cfg, n, nk);
  if (tape) {
    const auto bytes_of = [](const Vec& x) {
      return fnv1a(std::as_bytes(std::span(x.data)));
    };
    if (bytes_of(L) != bytes_of(tape->L)) {
      throw std::invalid_argument(
          "flash_backward: stale L, checksum differs from the tape");
    }
  }

  const Mode bmode = plan.backward_mode;
  const Grid bgrid = mode_grid(bmode);
  const bool f32 = bmode != Mode::Exact;
  const bool fully_exact = plan.score_mode == Mode::Exact &&
                           plan.softmax_mode == Mode::Exact &&
                           plan.pv_mode == Mode::Exact &&
                           plan.normalize_mode == Mode::Exact;
  const Grid p_grid = fully_exact ? Grid::F64 : Grid::F32;

  AttnGrads g;
  g.delta = Vec::zeros(n, Grid::F64);
  switch (plan.delta_source) {
    case DeltaSource::dO_O_lp:
      g.delta = rowsum(hadamard(dO, O));
      break;
    case DeltaSource::dO_O_hp:
      if (!tape || tape->O_hp.empty()) {
        throw std::invalid_argument(
            "flash_backward: delta source dO_O_hp needs the forward tape");
      }
      g.delta = rowsum(hadamard(dO, tape->O_hp));
      break;
    case DeltaSource::dP_P:
      break;  // filled in the pre-pass below
    case DeltaSource::recompute_PV_hp: {
      // Rebuild P blockwise, fold PV in F32, then delta = rowsum(dO o PV).
      for (std::size_t r0 = 0; r0 < n; r0 += cfg.block_rows) {
        const std::size_t nr = std::min(cfg.block_rows, n - r0);
        std::vector<double> pv(nr * dv, 0.0);
        for (std::size_t c0 = 0; c0 < nk; c0 += cfg.block_cols) {
          const std::size_t nc = std::min(cfg.block_cols, nk - c0);
          const Mat s_blk = score_block(q, k, alpha, plan, r0, nr, c0, nc);
          for (std::size_t i = 0; i < nr; ++i) {
            for (std::size_t f = 0; f < dv; ++f) {
              double acc = pv[i * dv + f];
              for (std::size_t j = 0; j < nc; ++j) {
                const double p =
                    recompute_p(s_blk.at(i, j), L[r0 + i], p_grid);
                acc = acc_fma(acc, p, v.at(c0 + j, f), true);
              }
              pv[i * dv + f] = acc;
            }
          }
        }
        for (std::size_t i = 0; i < nr; ++i) {
          double acc = 0.0;
          for (std::size_t f = 0; f < dv; ++f) {
            acc += dO.at(r0 + i, f) * pv[i * dv + f];
          }
          g.delta[r0 + i] = acc;
        }
      }
      break;
    }
  }

  // Pre-pass for the dP o P source: the full-row sums must exist before any
  // dS entry is formed.
  if (plan.delta_source == DeltaSource::dP_P) {
    for (std::size_t r0 = 0; r0 < n; r0 += cfg.block_rows) {
      const std::size_t nr = std::min(cfg.block_rows, n - r0);
      for (std::size_t c0 = 0; c0 < nk; c0 += cfg.block_cols) {
        const std::size_t nc = std::min(cfg.block_cols, nk - c0);
        const Mat s_blk = score_block(q, k, alpha, plan, r0, nr, c0, nc);
        for (std::size_t i = 0; i < nr; ++i) {
          double acc = g.delta[r0 + i];
          for (std::size_t j = 0; j < nc; ++j) {
            const double p = recompute_p(s_blk.at(i, j), L[r0 + i], p_grid);
            const double dp = score_entry(dO, v, r0 + i, c0 + j, 1.0, bmode);
            acc += dp * p;
          }
          g.delta[r0 + i] = acc;
        }
      }
    }
  }

  g.dP = Mat::zeros(n, nk, bgrid);
  g.dS = Mat::zeros(n, nk, bgrid);
  Mat dq_acc = Mat::zeros(n, d, Grid::F64);
  Mat dk_acc = Mat::zeros(nk, d, Grid::F64);
  Mat dv_acc = Mat::zeros(nk, dv, Grid::F64);

  for (std::size_t c0 = 0; c0 < nk; c0 += cfg.block_cols) {
    const std::size_t nc = std::min(cfg.block_cols, nk - c0);
    for (std::size_t r0 = 0; r0 < n; r0 += cfg.block_rows) {
      const std::size_t nr = std::min(cfg.block_rows, n - r0);
      const Mat s_blk = score_block(q, k, alpha, plan, r0, nr, c0, nc);
      for (std::size_t i = 0; i < nr; ++i) {
        const std::size_t gi = r0 + i;
        for (std::size_t j = 0; j < nc; ++j) {
          const std::size_t gj = c0 + j;
          const double p = recompute_p(s_blk.at(i, j), L[gi], p_grid);
          const double dp = score_entry(dO, v, gi, gj, 1.0, bmode);
          const double ds = snap(alpha * (p * (dp - g.delta[gi])), bgrid);
          g.dP.at(gi, gj) = dp;
          g.dS.at(gi, gj) = ds;
          for (std::size_t f = 0; f < d; ++f) {
            dq_acc.at(gi, f) = acc_fma(dq_acc.at(gi, f), ds,
                                       snap(k.at(gj, f), bgrid), f32);
            dk_acc.at(gj, f) = acc_fma(dk_acc.at(gj, f), ds,
                                       snap(q.at(gi, f), bgrid), f32);
          }
          for (std::size_t f = 0; f < dv; ++f) {
            dv_acc.at(gj, f) = acc_fma(dv_acc.at(gj, f), snap(p, bgrid),
                                       snap(dO.at(gi, f), bgrid), f32);
          }
        }
      }
    }
  }

  g.dQ = to_grid(dq_acc, bgrid);
  g.dK = to_grid(dk_acc, bgrid);
  g.dV = to_grid(dv_acc, bgrid);
  return g;
}

}  // namespace lpfa
