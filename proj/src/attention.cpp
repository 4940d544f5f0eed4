#include "lpfa/attention.hpp"

#include <cmath>
#include <stdexcept>

#include "lpfa/serialize.hpp"
#include "attn_common.hpp"

namespace lpfa {

namespace detail {

double score_entry(const Mat& q, const Mat& k, std::size_t i, std::size_t j,
                   double alpha, Mode mode) {
  const std::size_t d = q.cols;
  double dot;
  switch (mode) {
    case Mode::LP: {
      std::vector<B16> qa(d), kb(d);
      for (std::size_t t = 0; t < d; ++t) {
        qa[t] = encode_b16(q.at(i, t));
        kb[t] = encode_b16(k.at(j, t));
      }
      dot = decode_b16(dot_lp(qa, kb).value);
      break;
    }
    case Mode::HP: {
      std::vector<float> qa(d), kb(d);
      for (std::size_t t = 0; t < d; ++t) {
        qa[t] = static_cast<float>(q.at(i, t));
        kb[t] = static_cast<float>(k.at(j, t));
      }
      dot = static_cast<double>(dot_hp(qa, kb));
      break;
    }
    case Mode::Exact:
    default: {
      double acc = 0.0;
      for (std::size_t t = 0; t < d; ++t) acc += q.at(i, t) * k.at(j, t);
      dot = acc;
      break;
    }
  }
  return snap(alpha * dot, mode_grid(mode));
}

Mat score_block(const Mat& q, const Mat& k, double alpha,
                const PrecisionPlan& plan, std::size_t r0, std::size_t nr,
                std::size_t c0, std::size_t nc) {
  Mat s = Mat::zeros(nr, nc, mode_grid(plan.score_mode));
  for (std::size_t i = 0; i < nr; ++i) {
    for (std::size_t j = 0; j < nc; ++j) {
      if (plan.causal && c0 + j > r0 + i) {
        s.at(i, j) = kNegInf;
      } else {
        s.at(i, j) = score_entry(q, k, r0 + i, c0 + j, alpha, plan.score_mode);
      }
    }
  }
  return s;
}

double grid_exp(double x, Grid g) {
  if (x == kNegInf) return 0.0;
  return snap(std::exp(x), g);
}

double norm_div(double o_acc, double l, Mode accum, Grid out_grid) {
  double quotient;
  if (accum == Mode::Exact) {
    quotient = o_acc / l;
  } else {
    quotient = static_cast<double>(static_cast<float>(o_acc) /
                                   static_cast<float>(l));
  }
  return snap(quotient, out_grid);
}

Mat cast_mm(const Mat& a, const Mat& b, Mode mode, SumMode sum) {
  const Grid g = mode_grid(mode);
  return matmul(to_grid(a, g), to_grid(b, g), mode, sum);
}

}  // namespace detail

using detail::kNegInf;

const char* delta_source_name(DeltaSource d) {
  switch (d) {
    case DeltaSource::dO_O_lp: return "dO_O_lp";
    case DeltaSource::dO_O_hp: return "dO_O_hp";
    case DeltaSource::dP_P: return "dP_P";
    case DeltaSource::recompute_PV_hp: return "recompute_PV_hp";
  }
  return "?";
}

PrecisionPlan PrecisionPlan::lp() { return PrecisionPlan{}; }

PrecisionPlan PrecisionPlan::hp() {
  PrecisionPlan p;
  p.score_mode = p.softmax_mode = p.pv_mode = p.normalize_mode = Mode::HP;
  p.backward_mode = Mode::HP;
  p.delta_source = DeltaSource::dO_O_hp;
  return p;
}

PrecisionPlan PrecisionPlan::exact() {
  PrecisionPlan p;
  p.score_mode = p.softmax_mode = p.pv_mode = p.normalize_mode = Mode::Exact;
  p.backward_mode = Mode::Exact;
  p.delta_source = DeltaSource::dO_O_hp;
  return p;
}

namespace {

bool forward_is_exact(const PrecisionPlan& plan) {
  return plan.score_mode == Mode::Exact && plan.softmax_mode == Mode::Exact &&
         plan.pv_mode == Mode::Exact && plan.normalize_mode == Mode::Exact;
}

void check_scores_usable(const Mat& s) {
  for (double x : s.data) {
    if (std::isnan(x) || x == std::numeric_limits<double>::infinity()) {
      throw std::runtime_error("attention: non-finite score");
    }
  }
}

}  // namespace

SoftmaxParts safe_softmax(const Mat& s) {
  SoftmaxParts parts;
  parts.m = rowmax(s);
  parts.p_bar = Mat::zeros(s.rows, s.cols, Grid::F64);
  for (std::size_t i = 0; i < s.rows; ++i) {
    for (std::size_t j = 0; j < s.cols; ++j) {
      const double x = s.at(i, j);
      parts.p_bar.at(i, j) = (x == kNegInf) ? 0.0 : std::exp(x - parts.m[i]);
    }
  }
  parts.l = rowsum(parts.p_bar);
  return parts;
}

AttnTape forward(const Mat& q, const Mat& k, const Mat& v, double alpha,
                 const PrecisionPlan& plan) {
  if (q.cols != k.cols) throw std::invalid_argument("forward: q/k dim mismatch");
  if (v.rows != k.rows) throw std::invalid_argument("forward: k/v row mismatch");
  if (plan.causal && q.rows != k.rows) {
    throw std::invalid_argument("forward: causal mask needs square scores");
  }
  const std::size_t N = q.rows, Nk = k.rows, dv = v.cols;

  AttnTape tape;
  tape.alpha = alpha;
  tape.plan = plan;
  tape.q = q;
  tape.k = k;
  tape.v = v;

  tape.S = detail::score_block(q, k, alpha, plan, 0, N, 0, Nk);
  check_scores_usable(tape.S);

  tape.m = rowmax(tape.S);
  const Grid soft_grid = mode_grid(plan.softmax_mode);
  tape.Pbar = Mat::zeros(N, Nk, soft_grid);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < Nk; ++j) {
      // Masked entries stay 0 even in a fully masked row (m = -inf).
      tape.Pbar.at(i, j) =
          (tape.S.at(i, j) == kNegInf)
              ? 0.0
              : detail::grid_exp(tape.S.at(i, j) - tape.m[i], soft_grid);
    }
  }

  // The normalizer accumulates in the same precision as the PV product.
  const bool f32 = detail::f32_accum(plan.pv_mode);
  tape.l = Vec::zeros(N, f32 ? Grid::F32 : Grid::F64);
  for (std::size_t i = 0; i < N; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < Nk; ++j) {
      acc = detail::acc_add(acc, tape.Pbar.at(i, j), f32);
    }
    tape.l[i] = acc;
  }

  const Mat o_bar = detail::cast_mm(tape.Pbar, v, plan.pv_mode);

  const Grid norm_grid = mode_grid(plan.normalize_mode);
  tape.O_lp = Mat::zeros(N, dv, norm_grid);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < dv; ++j) {
      tape.O_lp.at(i, j) =
          (tape.l[i] == 0.0)
              ? 0.0
              : detail::norm_div(o_bar.at(i, j), tape.l[i],
                                 plan.normalize_mode, norm_grid);
    }
  }

  if (plan.pv_mode == Mode::Exact && plan.normalize_mode == Mode::Exact) {
    tape.O_hp = tape.O_lp;
  } else {
    const Mat o_bar_hp = detail::cast_mm(tape.Pbar, v, Mode::HP);
    tape.O_hp = Mat::zeros(N, dv, Grid::F32);
    for (std::size_t i = 0; i < N; ++i) {
      for (std::size_t j = 0; j < dv; ++j) {
        tape.O_hp.at(i, j) =
            (tape.l[i] == 0.0)
                ? 0.0
                : detail::norm_div(o_bar_hp.at(i, j), tape.l[i], Mode::HP,
                                   Grid::F32);
      }
    }
  }

  tape.L = Vec::zeros(N, Grid::F64);
  for (std::size_t i = 0; i < N; ++i) {
    tape.L[i] = (tape.l[i] == 0.0) ? kNegInf : tape.m[i] + std::log(tape.l[i]);
  }

  const Grid p_grid = forward_is_exact(plan) ? Grid::F64 : Grid::F32;
  tape.P = Mat::zeros(N, Nk, p_grid);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < Nk; ++j) {
      const double s = tape.S.at(i, j);
      tape.P.at(i, j) =
          (s == kNegInf || tape.L[i] == kNegInf)
              ? 0.0
              : snap(std::exp(s - tape.L[i]), p_grid);
    }
  }
  return tape;
}

AttnGrads backward(const AttnTape& tape, const Mat& dO,
                   const PrecisionPlan& plan) {
  if (dO.rows != tape.O_lp.rows || dO.cols != tape.O_lp.cols) {
    throw std::invalid_argument("backward: dO shape mismatch");
  }
  const std::size_t N = tape.P.rows, Nk = tape.P.cols;
  const Mode bmode = plan.backward_mode;
  const Grid bgrid = mode_grid(bmode);

  AttnGrads g;
  g.dP = detail::cast_mm(dO, transpose(tape.v), bmode);

  switch (plan.delta_source) {
    case DeltaSource::dO_O_lp:
      if (tape.O_lp.empty()) throw std::invalid_argument("backward: tape lacks O_lp");
      g.delta = rowsum(hadamard(dO, tape.O_lp));
      break;
    case DeltaSource::dO_O_hp:
      if (tape.O_hp.empty()) throw std::invalid_argument("backward: tape lacks O_hp");
      g.delta = rowsum(hadamard(dO, tape.O_hp));
      break;
    case DeltaSource::dP_P:
      g.delta = rowsum(hadamard(g.dP, tape.P));
      break;
    case DeltaSource::recompute_PV_hp: {
      const Mat o_rec = detail::cast_mm(tape.P, tape.v, Mode::HP);
      g.delta = rowsum(hadamard(dO, o_rec));
      break;
    }
  }

  g.dS = Mat::zeros(N, Nk, bgrid);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = 0; j < Nk; ++j) {
      g.dS.at(i, j) = snap(
          tape.alpha * (tape.P.at(i, j) * (g.dP.at(i, j) - g.delta[i])), bgrid);
    }
  }

  g.dQ = detail::cast_mm(g.dS, tape.k, bmode);
  g.dK = detail::cast_mm(transpose(g.dS), tape.q, bmode);
  g.dV = detail::cast_mm(transpose(tape.P), dO, bmode);
  return g;
}

AttnGrads backward(const AttnTape& tape, const Mat& dO) {
  return backward(tape, dO, tape.plan);
}

Vec delta_diff(const AttnTape& tape, const Mat& dO) {
  if (tape.O_lp.empty() || tape.O_hp.empty()) {
    throw std::invalid_argument("delta_diff: tape lacks O_lp/O_hp pair");
  }
  const Vec lo = rowsum(hadamard(dO, tape.O_lp));
  const Vec hi = rowsum(hadamard(dO, tape.O_hp));
  Vec out = Vec::zeros(lo.size(), Grid::F64);
  for (std::size_t i = 0; i < lo.size(); ++i) out[i] = lo[i] - hi[i];
  return out;
}

std::vector<std::byte> tape_to_bytes(const AttnTape& tape) {
  // Plan knobs travel as a small F64 row; every value is a small integer.
  Mat meta = Mat::zeros(1, 8, Grid::F64);
  meta.at(0, 0) = tape.alpha;
  meta.at(0, 1) = static_cast<double>(tape.plan.score_mode);
  meta.at(0, 2) = static_cast<double>(tape.plan.softmax_mode);
  meta.at(0, 3) = static_cast<double>(tape.plan.pv_mode);
  meta.at(0, 4) = static_cast<double>(tape.plan.normalize_mode);
  meta.at(0, 5) = static_cast<double>(tape.plan.backward_mode);
  meta.at(0, 6) = static_cast<double>(tape.plan.delta_source);
  meta.at(0, 7) = tape.plan.causal ? 1.0 : 0.0;

  std::vector<Section> sections;
  sections.push_back({"meta", mat_to_bytes(meta)});
  sections.push_back({"S", mat_to_bytes(tape.S)});
  sections.push_back({"Pbar", mat_to_bytes(tape.Pbar)});
  sections.push_back({"P", mat_to_bytes(tape.P)});
  sections.push_back({"O_lp", mat_to_bytes(tape.O_lp)});
  sections.push_back({"O_hp", mat_to_bytes(tape.O_hp)});
  sections.push_back({"m", vec_to_bytes(tape.m)});
  sections.push_back({"l", vec_to_bytes(tape.l)});
  sections.push_back({"L", vec_to_bytes(tape.L)});
  sections.push_back({"q", mat_to_bytes(tape.q)});
  sections.push_back({"k", mat_to_bytes(tape.k)});
  sections.push_back({"v", mat_to_bytes(tape.v)});
  return container_to_bytes(sections);
}

AttnTape tape_from_bytes(std::span<const std::byte> bytes) {
  const auto sections = container_from_bytes(bytes);
  const auto mat = [&](const char* name) {
    const Section* s = find_section(sections, name);
    if (!s) throw std::runtime_error(std::string("tape lacks section ") + name);
    return mat_from_bytes(s->bytes);
  };
  const auto vec = [&](const char* name) {
    const Section* s = find_section(sections, name);
    if (!s) throw std::runtime_error(std::string("tape lacks section ") + name);
    return vec_from_bytes(s->bytes);
  };

  const Mat meta = mat("meta");
  if (meta.rows != 1 || meta.cols != 8) {
    throw std::runtime_error("tape meta section has wrong shape");
  }
  AttnTape tape;
  tape.alpha = meta.at(0, 0);
  tape.plan.score_mode = static_cast<Mode>(static_cast<int>(meta.at(0, 1)));
  tape.plan.softmax_mode = static_cast<Mode>(static_cast<int>(meta.at(0, 2)));
  tape.plan.pv_mode = static_cast<Mode>(static_cast<int>(meta.at(0, 3)));
  tape.plan.normalize_mode = static_cast<Mode>(static_cast<int>(meta.at(0, 4)));
  tape.plan.backward_mode = static_cast<Mode>(static_cast<int>(meta.at(0, 5)));
  tape.plan.delta_source =
      static_cast<DeltaSource>(static_cast<int>(meta.at(0, 6)));
  tape.plan.causal = meta.at(0, 7) != 0.0;
  tape.S = mat("S");
  tape.Pbar = mat("Pbar");
  tape.P = mat("P");
  tape.O_lp = mat("O_lp");
  tape.O_hp = mat("O_hp");
  tape.m = vec("m");
  tape.l = vec("l");
  tape.L = vec("L");
  tape.q = mat("q");
  tape.k = mat("k");
  tape.v = mat("v");
  return tape;
}

}  // namespace lpfa
