#include "CLI11.hpp"

#include "lpfa/attention.hpp"
#include "lpfa/diagnostics.hpp"
#include "lpfa/flash.hpp"
#include "lpfa/harness.hpp"
#include "lpfa/numerics.hpp"
#include "lpfa/serialize.hpp"
#include "lpfa/svg.hpp"

#include "json.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

using namespace lpfa;
using nlohmann::json;

namespace {

constexpr int kExitPass = 0;
constexpr int kExitAssert = 1;
constexpr int kExitUsage = 2;

std::string bits_string(B16 b) {
  std::string s;
  s += ((b.bits >> 15) & 1) ? '1' : '0';
  s += ' ';
  for (int i = 14; i >= 7; --i) s += ((b.bits >> i) & 1) ? '1' : '0';
  s += ' ';
  for (int i = 6; i >= 0; --i) s += ((b.bits >> i) & 1) ? '1' : '0';
  return s;
}

std::filesystem::path out_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("LPFA_OUT_DIR")) return env;
  return ".";
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << text;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int checks_failed = 0;

void expect(bool ok, const std::string& what) {
  if (!ok) {
    ++checks_failed;
    std::cout << "MISMATCH: " << what << "\n";
  }
}

// --- addition-demo -----------------------------------------------------

struct DemoResult {
  double accumulator = 0.0, addend = 0.0, residual = 0.0;
  double exact = 0.0;
  B16 a16{}, b16{}, result{};
  bool overflow_shift = false, rounding_bit = false, sticky = false;
  std::string decision;
  double error = 0.0;
};

// The running F32 sum carries sub-BF16 residue; adding the next BF16 value
// overflows the significand, and the shifted-out bit plus the residue decide
// the rounding. Without the residue the same addition is an exact midpoint
// and ties-to-even rounds the other way.
DemoResult addition_demo(bool sticky) {
  DemoResult r;
  r.accumulator = sticky ? -2.4071154594421387 : -2.40625;
  r.addend = -2.296875;
  r.a16 = encode_b16(r.accumulator);
  r.b16 = encode_b16(r.addend);
  r.residual = r.accumulator - decode_b16(r.a16);
  r.exact = static_cast<double>(static_cast<float>(r.accumulator) +
                                static_cast<float>(r.addend));

  // significand add at the BF16 level (both operands share the exponent)
  const unsigned sig_a = 128u + (r.a16.bits & 0x7Fu);
  const unsigned sig_b = 128u + (r.b16.bits & 0x7Fu);
  const unsigned sum = sig_a + sig_b;
  r.overflow_shift = sum > 255u;
  r.rounding_bit = (sum & 1u) != 0;
  r.sticky = r.residual != 0.0;
  if (r.rounding_bit && r.sticky)
    r.decision = "round away (rounding bit 1, sticky bits below it)";
  else if (r.rounding_bit && ((sum >> 1) & 1u) == 0)
    r.decision = "tie, kept significand even: round down (ties-to-even)";
  else if (r.rounding_bit)
    r.decision = "tie, kept significand odd: round away (ties-to-even)";
  else
    r.decision = "truncate (rounding bit 0)";

  r.result = encode_b16(r.exact);
  r.error = decode_b16(r.result) - r.exact;
  return r;
}

int cmd_addition_demo(bool no_sticky, bool as_json) {
  checks_failed = 0;
  const DemoResult r = addition_demo(!no_sticky);

  if (!no_sticky) {
    expect(r.exact == -4.703990459442139, "exact FP32 sum");
    expect(bits_string(r.result) == "1 10000001 0010111", "result bits");
    expect(decode_b16(r.result) == -4.71875, "result value");
    expect(r.error == -0.014759540557861328, "rounding error");
    expect(r.residual == -0.00086545944213867188, "accumulator residue");
    expect(r.overflow_shift && r.rounding_bit && r.sticky, "rounding path");
  } else {
    expect(r.exact == -4.703125, "exact midpoint sum");
    expect(decode_b16(r.result) == -4.6875, "ties-to-even target");
    expect(bits_string(r.result) == "1 10000001 0010110", "result bits");
    expect(!r.sticky, "no sticky bits");
    const AddResult pair = add_b16_pair(r.a16, r.b16);
    expect(pair.value == r.result, "bit-level adder agreement");
  }

  if (as_json) {
    json j;
    j["config"] = {{"subcommand", "addition-demo"},
                   {"sticky", !no_sticky},
                   {"json", true}};
    j["operands"] = {{"accumulator", r.accumulator},
                     {"accumulator_b16", decode_b16(r.a16)},
                     {"residual", r.residual},
                     {"addend", r.addend}};
    j["exact_sum"] = r.exact;
    j["rounding"] = {{"overflow_shift", r.overflow_shift},
                     {"rounding_bit", r.rounding_bit},
                     {"sticky", r.sticky},
                     {"decision", r.decision}};
    j["result"] = {{"bits", bits_string(r.result)},
                   {"value", decode_b16(r.result)}};
    j["error"] = r.error;
    j["pass"] = checks_failed == 0;
    std::cout << j.dump(2) << "\n";
    return checks_failed == 0 ? kExitPass : kExitAssert;
  }

  std::cout << "# lpfa addition-demo sticky=" << (no_sticky ? "off" : "on")
            << " json=off\n";
  std::cout << "operand a: " << shortest(r.accumulator) << "\n"
            << "  = bf16 " << shortest(decode_b16(r.a16)) << " ("
            << bits_string(r.a16) << ") + residue " << shortest(r.residual)
            << "\n";
  std::cout << "operand b: " << shortest(r.addend) << " (" << bits_string(r.b16)
            << ")\n";
  std::cout << "alignment: exponents equal, no shift\n";
  const unsigned sum = 128u + (r.a16.bits & 0x7Fu) + 128u + (r.b16.bits & 0x7Fu);
  std::cout << "significand sum: " << sum
            << (r.overflow_shift ? " overflows -> right shift 1, exponent +1"
                                 : "")
            << "\n";
  std::cout << "shifted-out rounding bit: " << (r.rounding_bit ? 1 : 0)
            << ", sticky: " << (r.sticky ? 1 : 0) << "\n";
  std::cout << "exact sum: " << shortest(r.exact) << "\n";
  std::cout << "decision: " << r.decision << "\n";
  std::cout << "bf16 result: " << bits_string(r.result) << " = "
            << shortest(decode_b16(r.result)) << "\n";
  std::cout << "error: " << shortest(r.error) << "\n";
  std::cout << (checks_failed == 0 ? "PASS" : "FAIL") << "\n";
  return checks_failed == 0 ? kExitPass : kExitAssert;
}

// --- trace --------------------------------------------------------------

std::vector<B16> row_b16(const Mat& m, std::size_t row) {
  std::vector<B16> out(m.cols);
  for (std::size_t j = 0; j < m.cols; ++j) out[j] = encode_b16(m.at(row, j));
  return out;
}

std::vector<B16> col_b16(const Mat& m, std::size_t col) {
  std::vector<B16> out(m.rows);
  for (std::size_t i = 0; i < m.rows; ++i) out[i] = encode_b16(m.at(i, col));
  return out;
}

int cmd_trace(const std::string& workload, std::size_t row, std::size_t feature,
              std::size_t step, bool per_step, std::uint64_t seed,
              const std::string& svg_path, const std::string& csv_path) {
  std::vector<B16> p, v;
  if (workload == "claim3") {
    WorkloadSpec spec;
    spec.seed = seed;
    if (row >= spec.N) {
      std::cerr << "trace: row " << row << " out of range (N=" << spec.N
                << ")\n";
      return kExitUsage;
    }
    if (feature >= spec.d) {
      std::cerr << "trace: feature " << feature << " out of range (d=" << spec.d
                << ")\n";
      return kExitUsage;
    }
    const Batch b = make_batch(spec, step);
    const TrainState st = init_state(spec);
    const Projected pr = project(b.X, st);
    const double alpha = 1.0 / std::sqrt(static_cast<double>(spec.d));
    const AttnTape tape =
        forward(pr.q, pr.k, pr.v, alpha, PrecisionPlan::lp());
    p = row_b16(tape.Pbar, row);
    v = col_b16(pr.v, feature);
  } else if (workload == "unit") {
    // exactly representable prefixes: the all-zero error baseline
    const double pv[8] = {1, 0, 1, 0, 1, 0, 1, 0};
    const double vv[8] = {0.5, -1, 2, 0.25, -0.5, 1, -2, 4};
    if (row != 0 || feature != 0) {
      std::cerr << "trace: unit workload has a single row and feature\n";
      return kExitUsage;
    }
    for (int i = 0; i < 8; ++i) {
      p.push_back(encode_b16(pv[i]));
      v.push_back(encode_b16(vv[i]));
    }
  } else {
    std::cerr << "trace: unknown workload '" << workload
              << "' (expected claim3 or unit)\n";
    return kExitUsage;
  }

  const SumMode mode = per_step ? SumMode::StepRound : SumMode::FinalRound;
  const std::vector<RoundingEvent> events = prefix_error_trace(p, v, mode);

  std::string csv = "position,exact,rounded,error,rounded_up,overflow_shift\n";
  for (const RoundingEvent& e : events) {
    csv += std::to_string(e.position);
    csv += ',';
    csv += shortest(e.exact);
    csv += ',';
    csv += shortest(decode_b16(e.rounded));
    csv += ',';
    csv += shortest(e.error);
    csv += ',';
    csv += e.rounded_up ? '1' : '0';
    csv += ',';
    csv += e.overflow_shift ? '1' : '0';
    csv += '\n';
  }

  std::cout << "# lpfa trace workload=" << workload << " row=" << row
            << " feature=" << feature << " step=" << step << " seed=" << seed
            << " mode=" << (per_step ? "per-step" : "final") << "\n";
  std::cout << csv;

  if (!csv_path.empty()) write_text(csv_path, csv);
  if (!svg_path.empty()) {
    SvgSeries s;
    s.name = "cumulative error";
    for (const RoundingEvent& e : events) {
      s.xs.push_back(static_cast<double>(e.position));
      s.ys.push_back(e.error);
    }
    write_text(svg_path,
               svg_step_chart({s}, "prefix rounding error", "position",
                              "error"));
  }
  return kExitPass;
}

// --- random instances for the check drivers ------------------------------

Mat random_b16(std::size_t r, std::size_t c, Rng& rng, double lo = -2.0,
               double hi = 2.0) {
  Mat m = Mat::zeros(r, c, Grid::B16);
  for (double& x : m.data) x = snap(rng.uniform(lo, hi), Grid::B16);
  return m;
}

// --- attn-diff ------------------------------------------------------------

int cmd_attn_diff(std::size_t n, std::size_t d, std::uint64_t seed,
                  double tol) {
  std::cout << "# lpfa attn-diff n=" << n << " d=" << d << " seed=" << seed
            << " tol=" << shortest(tol) << "\n";
  Rng rng(seed);
  const Mat q = random_b16(n, d, rng), k = random_b16(n, d, rng),
            v = random_b16(n, d, rng), dO = random_b16(n, d, rng, -1.0, 1.0);
  const double alpha = 1.0 / std::sqrt(static_cast<double>(d));

  const AttnTape tape = forward(q, k, v, alpha, PrecisionPlan::lp());
  double max_gap = 0.0;
  for (std::size_t i = 0; i < tape.O_lp.data.size(); ++i)
    max_gap = std::max(max_gap,
                       std::fabs(tape.O_lp.data[i] - tape.O_hp.data[i]));
  std::cout << "max|O_lp - O_hp| = " << shortest(max_gap) << "\n";

  // the formulations are algebraically equal; quantization-free arithmetic
  // is where that equality is testable
  const AttnTape exact_tape = forward(q, k, v, alpha, PrecisionPlan::exact());
  const DeltaSource sources[] = {DeltaSource::dO_O_hp, DeltaSource::dP_P,
                                 DeltaSource::recompute_PV_hp};
  std::vector<Vec> deltas;
  for (const DeltaSource src : sources) {
    PrecisionPlan pb = exact_tape.plan;
    pb.delta_source = src;
    deltas.push_back(backward(exact_tape, dO, pb).delta);
  }
  double worst = 0.0;
  for (std::size_t a = 0; a < deltas.size(); ++a)
    for (std::size_t b = a + 1; b < deltas.size(); ++b)
      for (std::size_t i = 0; i < n; ++i) {
        const double denom = std::max(
            1.0, std::max(std::fabs(deltas[a][i]), std::fabs(deltas[b][i])));
        worst = std::max(worst, std::fabs(deltas[a][i] - deltas[b][i]) / denom);
      }
  std::cout << "delta formulations max relative gap = " << shortest(worst)
            << "\n";

  const Vec bias = delta_diff(tape, dO);
  double bias_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) bias_sum += bias[i];
  std::cout << "sum (delta_lp - delta_hp) = " << shortest(bias_sum) << "\n";

  const bool ok = worst <= tol;
  std::cout << (ok ? "PASS" : "FAIL") << "\n";
  return ok ? kExitPass : kExitAssert;
}

// --- gradcheck ------------------------------------------------------------

double loss_of(const Mat& q, const Mat& k, const Mat& v, const Mat& dO,
               double alpha, const PrecisionPlan& plan) {
  const AttnTape tape = forward(q, k, v, alpha, plan);
  double s = 0.0;
  for (std::size_t i = 0; i < tape.O_lp.data.size(); ++i)
    s += dO.data[i] * tape.O_lp.data[i];
  return s;
}

int cmd_gradcheck(std::size_t n, std::size_t d, std::uint64_t seed, double tol,
                  double eps) {
  std::cout << "# lpfa gradcheck n=" << n << " d=" << d << " seed=" << seed
            << " tol=" << shortest(tol) << " eps=" << shortest(eps) << "\n";
  Rng rng(seed);
  Mat q = random_b16(n, d, rng), k = random_b16(n, d, rng),
      v = random_b16(n, d, rng);
  const Mat dO = random_b16(n, d, rng, -1.0, 1.0);
  q.grid = k.grid = v.grid = Grid::F64;  // exact-mode check, ungridded moves
  const double alpha = 1.0 / std::sqrt(static_cast<double>(d));
  const PrecisionPlan plan = PrecisionPlan::exact();

  const AttnGrads an = backward(forward(q, k, v, alpha, plan), dO, plan);
  const Mat* analytic[] = {&an.dQ, &an.dK, &an.dV};
  Mat* inputs[] = {&q, &k, &v};
  const char* names[] = {"dQ", "dK", "dV"};

  double worst_all = 0.0;
  for (int w = 0; w < 3; ++w) {
    double worst = 0.0;
    Mat& m = *inputs[w];
    for (std::size_t idx = 0; idx < m.data.size(); ++idx) {
      const double keep = m.data[idx];
      m.data[idx] = keep + eps;
      const double up = loss_of(q, k, v, dO, alpha, plan);
      m.data[idx] = keep - eps;
      const double dn = loss_of(q, k, v, dO, alpha, plan);
      m.data[idx] = keep;
      const double fd = (up - dn) / (2.0 * eps);
      const double anv = analytic[w]->data[idx];
      worst = std::max(worst,
                       std::fabs(fd - anv) / std::max(1.0, std::fabs(anv)));
    }
    std::cout << names[w] << " max relative error = " << shortest(worst)
              << "\n";
    worst_all = std::max(worst_all, worst);
  }
  const bool ok = worst_all < tol;
  std::cout << (ok ? "PASS" : "FAIL") << "\n";
  return ok ? kExitPass : kExitAssert;
}

// --- tiling-check ----------------------------------------------------------

int cmd_tiling_check(std::size_t n, std::size_t d, std::uint64_t seed,
                     const std::string& blocks_flag, double tol) {
  std::vector<std::size_t> blocks;
  if (blocks_flag.empty()) {
    blocks = {1, 2, std::max<std::size_t>(1, n / 2), n};
  } else {
    std::stringstream ss(blocks_flag);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const long b = std::strtol(item.c_str(), nullptr, 10);
      if (b < 1 || static_cast<std::size_t>(b) > n) {
        std::cerr << "tiling-check: block " << item << " out of [1, " << n
                  << "]\n";
        return kExitUsage;
      }
      blocks.push_back(static_cast<std::size_t>(b));
    }
  }
  std::cout << "# lpfa tiling-check n=" << n << " d=" << d << " seed=" << seed
            << " blocks=";
  for (std::size_t i = 0; i < blocks.size(); ++i)
    std::cout << (i ? "," : "") << blocks[i];
  std::cout << " tol=" << shortest(tol) << "\n";

  Rng rng(seed);
  const Mat q = random_b16(n, d, rng), k = random_b16(n, d, rng),
            v = random_b16(n, d, rng);
  const double alpha = 1.0 / std::sqrt(static_cast<double>(d));
  const PrecisionPlan plan = PrecisionPlan::exact();
  const AttnTape ref = forward(q, k, v, alpha, plan);

  bool ok = true;
  for (const std::size_t b : blocks) {
    TileConfig cfg;
    cfg.block_rows = cfg.block_cols = b;
    const FlashOut out = flash_forward(q, k, v, alpha, cfg, plan);
    double worst = 0.0;
    for (std::size_t i = 0; i < out.O.data.size(); ++i)
      worst = std::max(worst, std::fabs(out.O.data[i] - ref.O_lp.data[i]));
    bool bitwise = out.O.data == ref.O_lp.data;
    std::cout << "B=" << b << " max|flash - reference| = " << shortest(worst)
              << (bitwise ? " (bitwise)" : "") << "\n";
    if (worst >= tol) ok = false;
    if (b == n && !bitwise) ok = false;
  }
  std::cout << (ok ? "PASS" : "FAIL") << "\n";
  return ok ? kExitPass : kExitAssert;
}

// --- experiment -------------------------------------------------------------

struct ExperimentConfig {
  WorkloadSpec spec;
  std::size_t steps = 200;
  std::string arm_a = "lp", arm_b = "stabilized-lp";
  double lr = TrainConfig{}.lr;
  double clip_norm = TrainConfig{}.clip_norm;
  std::optional<double> assert_min_bias_reduction;
  bool assert_wq_growth_ordered = false;
  std::string out_prefix = "experiment";
};

int parse_config(const std::filesystem::path& path, ExperimentConfig& cfg) {
  std::ifstream in(path);
  if (!in) {
    std::cerr << "experiment: cannot open config " << path << "\n";
    return kExitUsage;
  }
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto notspace = [](unsigned char c) { return !std::isspace(c); };
    line.erase(line.begin(),
               std::find_if(line.begin(), line.end(), notspace));
    line.erase(std::find_if(line.rbegin(), line.rend(), notspace).base(),
               line.end());
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      std::cerr << path.string() << ":" << lineno << ": expected key = value\n";
      return kExitUsage;
    }
    std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    key.erase(std::find_if(key.rbegin(), key.rend(), notspace).base(),
              key.end());
    value.erase(value.begin(),
                std::find_if(value.begin(), value.end(), notspace));

    try {
      if (key == "N") cfg.spec.N = std::stoul(value);
      else if (key == "d") cfg.spec.d = std::stoul(value);
      else if (key == "D") cfg.spec.D = std::stoul(value);
      else if (key == "seed") cfg.spec.seed = std::stoull(value);
      else if (key == "tie_rate") cfg.spec.tie_rate = std::stod(value);
      else if (key == "value_sign_bias")
        cfg.spec.value_sign_bias = std::stod(value);
      else if (key == "sink_strength") cfg.spec.sink_strength = std::stod(value);
      else if (key == "steps") cfg.steps = std::stoul(value);
      else if (key == "lr") cfg.lr = std::stod(value);
      else if (key == "clip_norm") cfg.clip_norm = std::stod(value);
      else if (key == "arm_a") cfg.arm_a = value;
      else if (key == "arm_b") cfg.arm_b = value;
      else if (key == "assert_min_bias_reduction")
        cfg.assert_min_bias_reduction = std::stod(value);
      else if (key == "assert_wq_growth_ordered")
        cfg.assert_wq_growth_ordered = (value == "true" || value == "1");
      else if (key == "out_prefix") cfg.out_prefix = value;
      else {
        std::cerr << path.string() << ":" << lineno << ": unknown key '" << key
                  << "'\n";
        return kExitUsage;
      }
    } catch (const std::exception&) {
      std::cerr << path.string() << ":" << lineno << ": bad value '" << value
                << "' for " << key << "\n";
      return kExitUsage;
    }
  }
  return kExitPass;
}

double norm_growth(const ArmReport& arm, std::size_t weight) {
  const std::vector<double>& series = arm.norms.norms.at(weight);
  return series.back() - series.front();
}

int cmd_experiment(const std::string& config_path, std::optional<long> steps,
                   const std::string& out_flag) {
  ExperimentConfig cfg;
  const int parsed = parse_config(config_path, cfg);
  if (parsed != kExitPass) return parsed;
  if (steps) {
    if (*steps < 0) {
      std::cerr << "experiment: --steps must be >= 0\n";
      return kExitUsage;
    }
    cfg.steps = static_cast<std::size_t>(*steps);
  }

  ArmSpec a{cfg.arm_a, TrainConfig{}}, b{cfg.arm_b, TrainConfig{}};
  try {
    a.cfg = arm_config(cfg.arm_a, cfg.spec.N);
    b.cfg = arm_config(cfg.arm_b, cfg.spec.N);
  } catch (const std::invalid_argument& e) {
    std::cerr << "experiment: " << e.what() << "\n";
    return kExitUsage;
  }
  a.cfg.lr = b.cfg.lr = cfg.lr;
  a.cfg.clip_norm = b.cfg.clip_norm = cfg.clip_norm;

  std::cout << "# lpfa experiment config=" << config_path
            << " N=" << cfg.spec.N << " d=" << cfg.spec.d << " D=" << cfg.spec.D
            << " seed=" << cfg.spec.seed
            << " tie_rate=" << shortest(cfg.spec.tie_rate)
            << " value_sign_bias=" << shortest(cfg.spec.value_sign_bias)
            << " sink_strength=" << shortest(cfg.spec.sink_strength)
            << " steps=" << cfg.steps << " lr=" << shortest(cfg.lr)
            << " clip_norm=" << shortest(cfg.clip_norm) << " arm_a=" << cfg.arm_a
            << " arm_b=" << cfg.arm_b << "\n";

  const ComparisonReport rep = run_experiment(cfg.spec, a, b, cfg.steps);

  const std::filesystem::path dir = out_dir(out_flag);
  std::filesystem::create_directories(dir);
  const auto csv_a = dir / (cfg.out_prefix + "_a.csv");
  const auto csv_b = dir / (cfg.out_prefix + "_b.csv");
  const auto json_path = dir / (cfg.out_prefix + ".json");
  write_text(csv_a, arm_metrics_csv(rep.a));
  write_text(csv_b, arm_metrics_csv(rep.b));
  write_text(json_path, comparison_to_json(rep));
  std::cout << "wrote " << csv_a.string() << ", " << csv_b.string() << ", "
            << json_path.string() << "\n";

  if (cfg.steps == 0) {
    std::cout << "no steps requested, nothing to assert\nPASS\n";
    return kExitPass;
  }

  const double cum_a = rep.a.bias_cum.back();
  const double cum_b = rep.b.bias_cum.back();
  const double growth_a = norm_growth(rep.a, 0);
  const double growth_b = norm_growth(rep.b, 0);
  std::cout << cfg.arm_a << ": final bias_cumsum = " << shortest(cum_a)
            << ", W_Q spectral norm growth = " << shortest(growth_a) << "\n";
  std::cout << cfg.arm_b << ": final bias_cumsum = " << shortest(cum_b)
            << ", W_Q spectral norm growth = " << shortest(growth_b) << "\n";

  bool ok = true;
  if (cfg.assert_min_bias_reduction) {
    const double ratio = std::fabs(cum_a) / std::max(std::fabs(cum_b), 1e-300);
    std::cout << "bias reduction |a|/|b| = " << shortest(ratio)
              << " (required >= " << shortest(*cfg.assert_min_bias_reduction)
              << ")\n";
    if (!(ratio >= *cfg.assert_min_bias_reduction)) ok = false;
  }
  if (cfg.assert_wq_growth_ordered) {
    std::cout << "W_Q growth ordered (b < a): "
              << (growth_b < growth_a ? "yes" : "no") << "\n";
    if (!(growth_b < growth_a)) ok = false;
  }
  std::cout << (ok ? "PASS" : "FAIL") << "\n";
  return ok ? kExitPass : kExitAssert;
}

// --- report ------------------------------------------------------------------

int cmd_report(const std::string& json_flag, const std::string& csv_a,
               const std::string& csv_b) {
  std::cout << "# lpfa report json=" << json_flag << " csv_a="
            << (csv_a.empty() ? "-" : csv_a) << " csv_b="
            << (csv_b.empty() ? "-" : csv_b) << "\n";
  std::string text;
  try {
    text = read_text(json_flag);
  } catch (const std::exception& e) {
    std::cerr << "report: " << e.what() << "\n";
    return kExitUsage;
  }
  ComparisonReport rep;
  try {
    rep = comparison_from_json(text);
  } catch (const std::exception& e) {
    std::cerr << "report: malformed comparison JSON: " << e.what() << "\n";
    return kExitUsage;
  }

  bool ok = true;
  if (comparison_to_json(rep) != text) {
    std::cout << "JSON re-serialization differs from the input file\n";
    ok = false;
  }
  if (!csv_a.empty() && read_text(csv_a) != arm_metrics_csv(rep.a)) {
    std::cout << "arm A CSV differs from the report's metrics\n";
    ok = false;
  }
  if (!csv_b.empty() && read_text(csv_b) != arm_metrics_csv(rep.b)) {
    std::cout << "arm B CSV differs from the report's metrics\n";
    ok = false;
  }

  std::cout << "workload: N=" << rep.spec.N << " d=" << rep.spec.d
            << " D=" << rep.spec.D << " seed=" << rep.spec.seed
            << " sink_strength=" << shortest(rep.spec.sink_strength) << "\n";
  std::cout << "steps: " << rep.steps << "\n";
  for (const ArmReport* arm : {&rep.a, &rep.b}) {
    if (arm->bias_cum.empty()) {
      std::cout << arm->name << ": no steps\n";
      continue;
    }
    std::cout << arm->name
              << ": final loss = " << shortest(arm->loss.back())
              << ", final bias_cumsum = " << shortest(arm->bias_cum.back())
              << ", W_Q spectral norm growth = "
              << shortest(norm_growth(*arm, 0)) << "\n";
  }
  if (!rep.a.bias_cum.empty() && !rep.b.bias_cum.empty()) {
    const double ratio = std::fabs(rep.a.bias_cum.back()) /
                         std::max(std::fabs(rep.b.bias_cum.back()), 1e-300);
    std::cout << "bias reduction |a|/|b| = " << shortest(ratio) << "\n";
  }
  std::cout << (ok ? "round-trip lossless\nPASS" : "FAIL") << "\n";
  return ok ? kExitPass : kExitAssert;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"low-precision flash-attention instability artifact"};
  app.require_subcommand(1);

  // addition-demo
  auto* demo = app.add_subcommand(
      "addition-demo", "bit-level walkthrough of the biased BF16 addition");
  bool no_sticky = false, demo_json = false;
  demo->add_flag("--no-sticky", no_sticky,
                 "drop the sub-BF16 residue: the exact-midpoint variant");
  demo->add_flag("--json", demo_json, "machine-readable event");

  // trace
  auto* trace = app.add_subcommand(
      "trace", "per-position rounding events of one output entry");
  std::string tr_workload = "claim3";
  std::size_t tr_row = 0, tr_feature = 0, tr_step = 0;
  std::uint64_t tr_seed = 1;
  bool tr_per_step = false;
  std::string tr_svg, tr_csv;
  trace->add_option("--workload", tr_workload, "claim3 or unit");
  trace->add_option("--row", tr_row, "query row T");
  trace->add_option("--feature", tr_feature, "value feature column");
  trace->add_option("--step", tr_step, "harness step of the batch");
  trace->add_option("--seed", tr_seed, "workload seed");
  trace->add_flag("--per-step", tr_per_step,
                  "round the running sum to BF16 after every addition");
  trace->add_option("--svg", tr_svg, "write a step plot to this path");
  trace->add_option("--csv", tr_csv, "also write the CSV to this path");

  // attn-diff
  auto* diff = app.add_subcommand(
      "attn-diff", "lp-vs-hp output gap and delta formulation agreement");
  std::size_t ad_n = 64, ad_d = 16;
  std::uint64_t ad_seed = 1;
  double ad_tol = 1e-6;
  diff->add_option("--n", ad_n, "sequence length");
  diff->add_option("--d", ad_d, "head dimension");
  diff->add_option("--seed", ad_seed, "rng seed");
  diff->add_option("--tol", ad_tol, "relative tolerance");

  // gradcheck
  auto* grad = app.add_subcommand(
      "gradcheck", "finite-difference check of the attention backward pass");
  std::size_t gc_n = 16, gc_d = 8;
  std::uint64_t gc_seed = 1;
  double gc_tol = 1e-4, gc_eps = 1e-5;
  grad->add_option("--n", gc_n, "sequence length");
  grad->add_option("--d", gc_d, "head dimension");
  grad->add_option("--seed", gc_seed, "rng seed");
  grad->add_option("--tol", gc_tol, "max relative error");
  grad->add_option("--eps", gc_eps, "finite-difference step");

  // tiling-check
  auto* tile = app.add_subcommand(
      "tiling-check", "flash vs non-tiled attention across block sizes");
  std::size_t tc_n = 128, tc_d = 16;
  std::uint64_t tc_seed = 3;
  std::string tc_blocks;
  double tc_tol = 1e-10;
  tile->add_option("--n", tc_n, "sequence length");
  tile->add_option("--d", tc_d, "head dimension");
  tile->add_option("--seed", tc_seed, "rng seed");
  tile->add_option("--blocks", tc_blocks, "comma-separated block sizes");
  tile->add_option("--tol", tc_tol, "max absolute difference");

  // experiment
  auto* exp = app.add_subcommand(
      "experiment", "paired-arm training run driven by a config file");
  std::string ex_config, ex_out;
  long ex_steps = -1;
  exp->add_option("--config", ex_config, "key = value config file")
      ->required();
  exp->add_option("--steps", ex_steps, "override the configured step count");
  exp->add_option("--out", ex_out,
                  "output directory (default $LPFA_OUT_DIR or .)");

  // report
  auto* rep = app.add_subcommand(
      "report", "re-ingest experiment outputs and summarize them");
  std::string rp_json, rp_csv_a, rp_csv_b;
  rep->add_option("--json", rp_json, "comparison JSON path")->required();
  rep->add_option("--csv-a", rp_csv_a, "arm A metrics CSV to verify");
  rep->add_option("--csv-b", rp_csv_b, "arm B metrics CSV to verify");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (demo->parsed()) return cmd_addition_demo(no_sticky, demo_json);
    if (trace->parsed())
      return cmd_trace(tr_workload, tr_row, tr_feature, tr_step, tr_per_step,
                       tr_seed, tr_svg, tr_csv);
    if (diff->parsed()) return cmd_attn_diff(ad_n, ad_d, ad_seed, ad_tol);
    if (grad->parsed())
      return cmd_gradcheck(gc_n, gc_d, gc_seed, gc_tol, gc_eps);
    if (tile->parsed())
      return cmd_tiling_check(tc_n, tc_d, tc_seed, tc_blocks, tc_tol);
    if (exp->parsed())
      return cmd_experiment(ex_config,
                            ex_steps >= 0 ? std::optional<long>(ex_steps)
                                          : std::nullopt,
                            ex_out);
    if (rep->parsed()) return cmd_report(rp_json, rp_csv_a, rp_csv_b);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitAssert;
  }
  return kExitUsage;
}
