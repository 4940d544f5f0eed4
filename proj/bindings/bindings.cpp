// Python surface over the core library: bf16 bit-level helpers, the
// attention forward/backward pair, tiled flash variants, the gradient-bias
// report and the paired-arm experiment. Composite results come back as
// plain dicts and numpy arrays; the experiment returns the versioned JSON
// the CLI writes, so both front ends share one format.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "lpfa/attention.hpp"
#include "lpfa/diagnostics.hpp"
#include "lpfa/flash.hpp"
#include "lpfa/harness.hpp"
#include "lpfa/linalg.hpp"
#include "lpfa/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>

namespace py = pybind11;
using namespace lpfa;

namespace {

using DoubleArray =
    py::array_t<double, py::array::c_style | py::array::forcecast>;

Grid parse_grid(const std::string& name) {
  if (name == "b16") return Grid::B16;
  if (name == "f32") return Grid::F32;
  if (name == "f64") return Grid::F64;
  throw std::invalid_argument("unknown grid '" + name + "'");
}

PrecisionPlan parse_plan(const std::string& name) {
  if (name == "lp") return PrecisionPlan::lp();
  if (name == "hp") return PrecisionPlan::hp();
  if (name == "exact") return PrecisionPlan::exact();
  throw std::invalid_argument("unknown plan '" + name + "'");
}

DeltaSource parse_delta_source(const std::string& name) {
  for (DeltaSource s : {DeltaSource::dO_O_lp, DeltaSource::dO_O_hp,
                        DeltaSource::dP_P, DeltaSource::recompute_PV_hp})
    if (name == delta_source_name(s)) return s;
  throw std::invalid_argument("unknown delta source '" + name + "'");
}

Mat to_mat(const DoubleArray& a, const char* what) {
  if (a.ndim() != 2)
    throw std::invalid_argument(std::string(what) + ": expected a 2-D array");
  Mat m = Mat::zeros(static_cast<std::size_t>(a.shape(0)),
                     static_cast<std::size_t>(a.shape(1)));
  std::copy_n(a.data(), m.data.size(), m.data.begin());
  return m;
}

py::array_t<double> from_mat(const Mat& m) {
  py::array_t<double> a({m.rows, m.cols});
  std::copy(m.data.begin(), m.data.end(), a.mutable_data());
  return a;
}

py::array_t<double> from_vec(const Vec& v) {
  py::array_t<double> a(v.size());
  std::copy(v.data.begin(), v.data.end(), a.mutable_data());
  return a;
}

double alpha_or_default(std::optional<double> alpha, std::size_t d) {
  return alpha ? *alpha : 1.0 / std::sqrt(static_cast<double>(d));
}

WorkloadSpec spec_from_args(std::size_t n, std::size_t d, std::size_t dm,
                            std::uint64_t seed, double tie_rate,
                            double value_sign_bias, double sink_strength) {
  WorkloadSpec spec;
  spec.N = n;
  spec.d = d;
  spec.D = dm;
  spec.seed = seed;
  spec.tie_rate = tie_rate;
  spec.value_sign_bias = value_sign_bias;
  spec.sink_strength = sink_strength;
  return spec;
}

py::dict event_dict(const RoundingEvent& e) {
  py::dict d;
  d["position"] = e.position;
  d["exact"] = e.exact;
  d["rounded"] = decode_b16(e.rounded);
  d["bits"] = e.rounded.bits;
  d["error"] = e.error;
  d["rounded_up"] = e.rounded_up;
  d["overflow_shift"] = e.overflow_shift;
  return d;
}

}  // namespace

PYBIND11_MODULE(_lpfa, mod) {
  mod.doc() =
      "Bit-exact bfloat16 attention emulation: rounding-event probes, "
      "precision-tagged attention, tiled flash forms and the paired "
      "training-arm experiment.";

  // ---- numerics ----
  mod.def(
      "b16_bits", [](double x) { return encode_b16(x).bits; },
      py::arg("x"), "Nearest-even bfloat16 bit pattern of x.");
  mod.def(
      "b16_value", [](std::uint16_t bits) {
        return decode_b16(B16::from_bits(bits));
      },
      py::arg("bits"), "Exact value of a bfloat16 bit pattern.");
  mod.def("b16_ulp", &ulp_b16, py::arg("x"),
          "bfloat16 unit in the last place at the magnitude of x.");
  mod.def(
      "snap", [](double x, const std::string& grid) {
        return snap(x, parse_grid(grid));
      },
      py::arg("x"), py::arg("grid") = "b16",
      "Round x to the named grid ('b16', 'f32', 'f64').");
  mod.def(
      "snap_array", [](const DoubleArray& a, const std::string& grid) {
        const Grid g = parse_grid(grid);
        py::array_t<double> out(std::vector<py::ssize_t>(
            a.shape(), a.shape() + a.ndim()));
        const double* src = a.data();
        double* dst = out.mutable_data();
        for (py::ssize_t i = 0; i < a.size(); ++i) dst[i] = snap(src[i], g);
        return out;
      },
      py::arg("a"), py::arg("grid") = "b16",
      "Elementwise snap of an array to the named grid.");
  mod.def(
      "add_b16",
      [](double a, double b) {
        const AddResult r = add_b16_pair(encode_b16(a), encode_b16(b));
        py::dict d = event_dict(r.event);
        d["value"] = decode_b16(r.value);
        return d;
      },
      py::arg("a"), py::arg("b"),
      "Bit-level bfloat16 addition of the two rounded operands; returns the "
      "result with its rounding event.");
  mod.def(
      "rounding_bit_table", []() {
        py::list rows;
        for (const RoundingBitEntry& e : rounding_bit_table())
          rows.append(py::make_tuple(e.lhs, e.rhs, e.kept, e.rounding_bit));
        return rows;
      },
      "All 10 unordered 2-bit additions as (lhs, rhs, kept, rounding_bit).");
  mod.def(
      "prefix_errors",
      [](const DoubleArray& p, const DoubleArray& v, bool per_step) {
        if (p.ndim() != 1 || v.ndim() != 1 || p.size() != v.size())
          throw std::invalid_argument(
              "prefix_errors: expected two 1-D arrays of equal length");
        std::vector<B16> pb(static_cast<std::size_t>(p.size()));
        std::vector<B16> vb(pb.size());
        for (std::size_t i = 0; i < pb.size(); ++i) {
          pb[i] = encode_b16(p.data()[i]);
          vb[i] = encode_b16(v.data()[i]);
        }
        const SumMode mode = per_step ? SumMode::StepRound : SumMode::FinalRound;
        py::list events;
        for (const RoundingEvent& e : prefix_error_trace(pb, vb, mode))
          events.append(event_dict(e));
        return events;
      },
      py::arg("p"), py::arg("v"), py::arg("per_step") = false,
      "Rounding event of every prefix of the low-precision dot product p.v.");

  // ---- attention ----
  mod.def(
      "attention",
      [](const DoubleArray& q, const DoubleArray& k, const DoubleArray& v,
         std::optional<double> alpha, const std::string& plan, bool causal) {
        const Mat qm = to_mat(q, "q"), km = to_mat(k, "k"), vm = to_mat(v, "v");
        PrecisionPlan p = parse_plan(plan);
        p.causal = causal;
        const AttnTape tape =
            forward(qm, km, vm, alpha_or_default(alpha, qm.cols), p);
        py::dict out;
        out["O"] = from_mat(tape.O_lp);
        out["O_hp"] = from_mat(tape.O_hp);
        out["L"] = from_vec(tape.L);
        out["alpha"] = tape.alpha;
        return out;
      },
      py::arg("q"), py::arg("k"), py::arg("v"), py::arg("alpha") = py::none(),
      py::arg("plan") = "lp", py::arg("causal") = false,
      "Non-tiled attention under the named precision plan; returns the "
      "plan-path output, its F32 companion and the logsumexp statistics.");
  mod.def(
      "attention_grads",
      [](const DoubleArray& q, const DoubleArray& k, const DoubleArray& v,
         const DoubleArray& dO, std::optional<double> alpha,
         const std::string& plan, const std::string& delta_source,
         bool causal) {
        const Mat qm = to_mat(q, "q"), km = to_mat(k, "k"), vm = to_mat(v, "v");
        PrecisionPlan p = parse_plan(plan);
        p.causal = causal;
        p.delta_source = parse_delta_source(delta_source);
        const AttnTape tape =
            forward(qm, km, vm, alpha_or_default(alpha, qm.cols), p);
        const AttnGrads g = backward(tape, to_mat(dO, "dO"));
        py::dict out;
        out["dQ"] = from_mat(g.dQ);
        out["dK"] = from_mat(g.dK);
        out["dV"] = from_mat(g.dV);
        out["delta"] = from_vec(g.delta);
        return out;
      },
      py::arg("q"), py::arg("k"), py::arg("v"), py::arg("dO"),
      py::arg("alpha") = py::none(), py::arg("plan") = "lp",
      py::arg("delta_source") = "dO_O_lp", py::arg("causal") = false,
      "Forward plus backward; delta_source picks the delta formulation "
      "('dO_O_lp', 'dO_O_hp', 'dP_P', 'recompute_PV_hp').");
  mod.def(
      "flash",
      [](const DoubleArray& q, const DoubleArray& k, const DoubleArray& v,
         std::optional<double> alpha, const std::string& plan,
         std::size_t block_rows, std::size_t block_cols, bool stabilized,
         double beta, bool causal) {
        const Mat qm = to_mat(q, "q"), km = to_mat(k, "k"), vm = to_mat(v, "v");
        PrecisionPlan p = parse_plan(plan);
        p.causal = causal;
        TileConfig cfg;
        cfg.block_rows = block_rows == 0 ? qm.rows : block_rows;
        cfg.block_cols = block_cols == 0 ? km.rows : block_cols;
        cfg.stabilized = stabilized;
        cfg.beta = beta;
        const double a = alpha_or_default(alpha, qm.cols);
        const FlashOut out = stabilized
                                 ? stabilized_flash_forward(qm, km, vm, a, cfg, p)
                                 : flash_forward(qm, km, vm, a, cfg, p);
        py::dict d;
        d["O"] = from_mat(out.O);
        d["O_hp"] = from_mat(out.O_hp);
        d["L"] = from_vec(out.L);
        return d;
      },
      py::arg("q"), py::arg("k"), py::arg("v"), py::arg("alpha") = py::none(),
      py::arg("plan") = "lp", py::arg("block_rows") = 0,
      py::arg("block_cols") = 0, py::arg("stabilized") = false,
      py::arg("beta") = 7.0, py::arg("causal") = false,
      "Tiled online-softmax forward; block size 0 means one full-size block. "
      "stabilized=True adjusts repeated block maxima before the merge.");

  // ---- diagnostics ----
  mod.def(
      "gradient_bias",
      [](const DoubleArray& q, const DoubleArray& k, const DoubleArray& v,
         const DoubleArray& dO, const DoubleArray& x,
         std::optional<double> alpha, const std::string& plan) {
        const Mat qm = to_mat(q, "q"), km = to_mat(k, "k"), vm = to_mat(v, "v");
        const double a = alpha_or_default(alpha, qm.cols);
        const AttnTape tape = forward(qm, km, vm, a, parse_plan(plan));
        const GradErrorReport rep =
            grad_error_report(tape, to_mat(dO, "dO"), to_mat(x, "x"), km, a);
        py::dict out;
        out["coeffs"] = from_vec(rep.coeffs);
        out["bias_sum"] = rep.bias_sum;
        out["dq_diff"] = from_mat(rep.dq_diff);
        out["dwq_diff"] = from_mat(rep.dwq_diff);
        out["similarity"] = from_mat(rep.similarity);
        out["r_hat"] = from_mat(rep.r_hat);
        out["rank1_residual"] = rep.rank1_residual;
        return out;
      },
      py::arg("q"), py::arg("k"), py::arg("v"), py::arg("dO"), py::arg("x"),
      py::arg("alpha") = py::none(), py::arg("plan") = "lp",
      "Per-token decomposition of the low-vs-high-precision gradient gap: "
      "coefficients, their sum, the dQ and dW_Q differences and the rank-1 "
      "alignment summary.");

  // ---- harness ----
  mod.def(
      "sign_probe",
      [](std::size_t n, std::size_t d, std::size_t dm, std::uint64_t seed,
         double tie_rate, double value_sign_bias, double sink_strength) {
        const SignProbe p = sign_probe(spec_from_args(
            n, d, dm, seed, tie_rate, value_sign_bias, sink_strength));
        py::dict out;
        out["mean_o_gap"] = p.mean_o_gap;
        out["mean_coeff"] = p.mean_coeff;
        out["frac_coeff_pos"] = p.frac_coeff_pos;
        out["tie_rows"] = p.tie_rows;
        out["max_dO"] = p.max_dO;
        return out;
      },
      py::arg("n") = 128, py::arg("d") = 16, py::arg("dm") = 32,
      py::arg("seed") = 1, py::arg("tie_rate") = 0.05,
      py::arg("value_sign_bias") = 0.9, py::arg("sink_strength") = 9.7,
      "Step-0 sign measurement on the engineered workload: mean output gap, "
      "mean delta-gap coefficient and the premise flags.");
  mod.def(
      "experiment",
      [](std::size_t steps, const std::string& arm_a, const std::string& arm_b,
         std::size_t n, std::size_t d, std::size_t dm, std::uint64_t seed,
         double tie_rate, double value_sign_bias, double sink_strength,
         std::optional<double> lr) {
        const WorkloadSpec spec = spec_from_args(
            n, d, dm, seed, tie_rate, value_sign_bias, sink_strength);
        ArmSpec a{arm_a, arm_config(arm_a, spec.N)};
        ArmSpec b{arm_b, arm_config(arm_b, spec.N)};
        if (lr) {
          a.cfg.lr = *lr;
          b.cfg.lr = *lr;
        }
        std::string json;
        {
          py::gil_scoped_release release;
          json = comparison_to_json(run_experiment(spec, a, b, steps));
        }
        return json;
      },
      py::arg("steps") = 20, py::arg("arm_a") = "lp",
      py::arg("arm_b") = "stabilized-lp", py::arg("n") = 128,
      py::arg("d") = 16, py::arg("dm") = 32, py::arg("seed") = 1,
      py::arg("tie_rate") = 0.05, py::arg("value_sign_bias") = 0.9,
      py::arg("sink_strength") = 9.7, py::arg("lr") = py::none(),
      "Paired training arms over one recorded batch sequence; returns the "
      "versioned comparison JSON (the same format the CLI writes). Arm names: "
      "'lp', 'hp', 'exact', 'hp-delta', 'stabilized-lp'.");
}
