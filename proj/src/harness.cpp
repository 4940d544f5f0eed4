#include "lpfa/harness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "attn_common.hpp"
#include "lpfa/serialize.hpp"

namespace lpfa {

namespace {

using json = nlohmann::json;

// Workload geometry. X rows carry an alignment coordinate [0], a direction
// block [1, d), background noise [d, D-1) and a value-feed coordinate [D-1].
// The two sink tokens share every coordinate except the value feed, whose
// B16 significands have opposite parity so their unit-probability sum lands
// exactly on a rounding tie.
constexpr double kTieScore = 3.5;   // score of a tie row on the sink pair
constexpr double kSelfNorm = 5.5;   // direction length of untied rows
constexpr double kNoiseSd = 0.3;
constexpr double kSinkNoiseSd = 0.05;
constexpr double kResidueLo = 5e-4;  // value-feed magnitude of non-sink rows
constexpr double kResidueHi = 3e-3;
constexpr double kSinkValueA = -2.40625;    // even significand
constexpr double kSinkValueB = -2.296875;   // odd significand
constexpr double kProjScale = 0.5;          // W_Q = W_K = 0.5 [I; 0]
constexpr double kValueColSd = 0.02;
constexpr double kTargetFeature0 = 0.5;

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

void validate(const WorkloadSpec& spec) {
  if (spec.N < 1 || spec.d < 1 || spec.D < 1)
    throw std::invalid_argument("workload: N, d, D must be >= 1");
  if (!(spec.tie_rate >= 0.0 && spec.tie_rate <= 1.0))
    throw std::invalid_argument("workload: tie_rate not in [0,1]");
  if (!(spec.value_sign_bias >= 0.0 && spec.value_sign_bias <= 1.0))
    throw std::invalid_argument("workload: value_sign_bias not in [0,1]");
  if (!(spec.sink_strength >= 0.0) || !std::isfinite(spec.sink_strength))
    throw std::invalid_argument("workload: sink_strength must be finite");
}

bool has_sink_pair(const WorkloadSpec& spec) {
  return spec.tie_rate > 0.0 && spec.N >= 2;
}

double head_alpha(std::size_t d) {
  return 1.0 / std::sqrt(static_cast<double>(d));
}

/// Alignment coordinate giving a tie row the score kTieScore on the sinks:
// S = alpha * mu^2 * a_tie * a_sink with mu the projection scale.
double tie_align(const WorkloadSpec& spec) {
  if (spec.sink_strength <= 0.0) return 1.0;
  return kTieScore * std::sqrt(static_cast<double>(spec.d)) /
         (kProjScale * kProjScale * spec.sink_strength);
}

double frob_sq(const Mat& m) {
  double acc = 0.0;
  for (double v : m.data) acc += v * v;
  return acc;
}

json vec_json(const std::vector<double>& v) { return json(v); }

json norms_json(const NormSeries& s) {
  return json{{"steps", s.steps}, {"names", s.names}, {"norms", s.norms}};
}

NormSeries norms_from(const json& j) {
  NormSeries s;
  s.steps = j.at("steps").get<std::vector<std::size_t>>();
  s.names = j.at("names").get<std::vector<std::string>>();
  s.norms = j.at("norms").get<std::vector<std::vector<double>>>();
  return s;
}

json arm_json(const ArmReport& arm) {
  return json{{"name", arm.name},
              {"loss", vec_json(arm.loss)},
              {"bias_sums", vec_json(arm.bias_sums)},
              {"bias_cum", vec_json(arm.bias_cum)},
              {"norms", norms_json(arm.norms)}};
}

ArmReport arm_from(const json& j) {
  ArmReport arm;
  arm.name = j.at("name").get<std::string>();
  arm.loss = j.at("loss").get<std::vector<double>>();
  arm.bias_sums = j.at("bias_sums").get<std::vector<double>>();
  arm.bias_cum = j.at("bias_cum").get<std::vector<double>>();
  arm.norms = norms_from(j.at("norms"));
  return arm;
}

ArmReport run_arm(const WorkloadSpec& spec, const ArmSpec& arm,
                  const std::vector<Batch>& log) {
  TrainState st = init_state(spec);
  ArmReport rep;
  rep.name = arm.name;
  rep.norms.names = {"W_Q", "W_K", "W_V"};
  rep.norms.norms.resize(3);
  rep.norms = norm_tracker({st.W_Q, st.W_K, st.W_V}, 0, std::move(rep.norms));
  double cum = 0.0;
  for (const Batch& batch : log) {
    const StepResult r = train_step(st, batch, arm.cfg);
    rep.loss.push_back(r.loss);
    rep.bias_sums.push_back(r.report.bias_sum);
    cum += r.report.bias_sum;
    rep.bias_cum.push_back(cum);
    rep.norms =
        norm_tracker({st.W_Q, st.W_K, st.W_V}, st.step, std::move(rep.norms));
  }
  return rep;
}

}  // namespace

double Rng::uniform() {
  return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

double Rng::normal() {
  double acc = 0.0;
  for (int i = 0; i < 12; ++i) acc += uniform();
  return acc - 6.0;
}

std::vector<std::size_t> engineered_tie_rows(const WorkloadSpec& spec) {
  if (!has_sink_pair(spec)) return {};
  const std::size_t n = spec.N, mid = n / 2;
  const std::size_t want = std::min<std::size_t>(
      n, std::max<std::size_t>(
             2, static_cast<std::size_t>(std::llround(spec.tie_rate * n))));
  std::vector<std::size_t> rows = {0, mid};
  // Spread the remaining tie rows over odd indices first, then the rest.
  for (std::size_t pass = 0; pass < 2 && rows.size() < want; ++pass) {
    for (std::size_t i = 1 + pass; i < n && rows.size() < want; i += 2) {
      if (i == mid || i == 0) continue;
      rows.push_back(i);
    }
  }
  std::sort(rows.begin(), rows.end());
  return rows;
}

Batch make_batch(const WorkloadSpec& spec, std::size_t step) {
  validate(spec);
  Rng rng(mix(spec.seed, step));
  const std::size_t n = spec.N, d = spec.d, dm = spec.D;
  const bool pair = has_sink_pair(spec);
  const std::size_t mid = n / 2;

  std::vector<char> tied(n, 0);
  for (std::size_t i : engineered_tie_rows(spec)) tied[i] = 1;

  Batch batch;
  batch.X = Mat::zeros(n, dm, Grid::B16);
  Mat& x = batch.X;
  for (std::size_t i = 0; i < n; ++i) {
    const bool sink = (i == 0) || (pair && i == mid);
    const double sd = sink ? kSinkNoiseSd : kNoiseSd;
    for (std::size_t r = 1; r + 1 < dm; ++r)
      x.at(i, r) = snap(sd * rng.normal(), Grid::B16);

    double align = 0.0;
    if (sink) {
      // The +-2% jitter moves the sink scores across several B16 bins per
      // step; the key collision is bitwise, so the engineered ties survive.
      align = spec.sink_strength * (1.0 + 0.02 * (2.0 * rng.uniform() - 1.0));
    } else if (tied[i]) {
      align = tie_align(spec) * (1.0 + 0.02 * (2.0 * rng.uniform() - 1.0));
    } else {
      align = rng.uniform(0.2, 0.8);
      // A per-row direction keeps every untied row's maximum on itself,
      // far from the other rows.
      if (d >= 2) {
        std::vector<double> dir(d - 1);
        double norm_sq = 0.0;
        for (double& g : dir) {
          g = rng.normal();
          norm_sq += g * g;
        }
        const double s = norm_sq > 0.0 ? kSelfNorm / std::sqrt(norm_sq) : 0.0;
        for (std::size_t r = 1; r < d; ++r)
          x.at(i, r) = snap(x.at(i, r) + s * dir[r - 1], Grid::B16);
      }
    }
    x.at(i, 0) = snap(align, Grid::B16);

    if (dm >= 2) {
      double value = 0.0;
      if (sink) {
        value = kSinkValueA;
      } else {
        const double mag = rng.uniform(kResidueLo, kResidueHi);
        value = (rng.uniform() < spec.value_sign_bias) ? -mag : mag;
      }
      x.at(i, dm - 1) = snap(value, Grid::B16);
    }
  }
  if (pair) {
    // The second sink is a bitwise copy except for the value feed, so the
    // key projections collide while the value entries differ.
    for (std::size_t r = 0; r + 1 < dm; ++r) x.at(mid, r) = x.at(0, r);
    if (dm >= 2) x.at(mid, dm - 1) = snap(kSinkValueB, Grid::B16);
  }

  batch.Y = Mat::zeros(n, d, Grid::F64);
  for (std::size_t i = 0; i < n; ++i) {
    batch.Y.at(i, 0) = kTargetFeature0;
    for (std::size_t f = 1; f < d; ++f)
      batch.Y.at(i, f) = rng.uniform(-0.3, 0.3);
  }
  return batch;
}

std::vector<std::size_t> repeated_max_rows(const Mat& s) {
  const Vec m = rowmax(s);
  const Vec hits = rowsum_eq(s, m);
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < s.rows; ++i)
    if (std::isfinite(m[i]) && hits[i] >= 2.0) rows.push_back(i);
  return rows;
}

Workload gen_workload(const WorkloadSpec& spec) {
  Workload w;
  w.batch = make_batch(spec, 0);
  const TrainState st = init_state(spec);
  const Projected p = project(w.batch.X, st);
  const Mat s = detail::score_block(p.q, p.k, head_alpha(spec.d),
                                    PrecisionPlan::lp(), 0, spec.N, 0, spec.N);
  const double measured =
      static_cast<double>(repeated_max_rows(s).size()) /
      static_cast<double>(spec.N);
  w.measured_tie_rate = measured;
  if (spec.tie_rate <= 0.0)
    w.tie_rate_unreachable = measured >= 0.01;
  else
    w.tie_rate_unreachable =
        std::fabs(measured - spec.tie_rate) > 0.2 * spec.tie_rate;
  return w;
}

TrainState init_state(const WorkloadSpec& spec) {
  validate(spec);
  Rng rng(mix(spec.seed, 0x5745494748545353ull));
  const std::size_t d = spec.d, dm = spec.D;
  TrainState st;
  st.W_Q = Mat::zeros(dm, d, Grid::F64);
  st.W_K = Mat::zeros(dm, d, Grid::F64);
  for (std::size_t c = 0; c < std::min(d, dm); ++c) {
    st.W_Q.at(c, c) = kProjScale;
    st.W_K.at(c, c) = kProjScale;
  }
  st.W_V = Mat::zeros(dm, d, Grid::F64);
  st.W_V.at(dm - 1, 0) = 1.0;  // feature 0 reads the value coordinate
  for (std::size_t f = 1; f < d; ++f)
    for (std::size_t r = 0; r < dm; ++r)
      st.W_V.at(r, f) = kValueColSd * rng.normal();
  st.m_Q = Mat::zeros(dm, d);
  st.v_Q = Mat::zeros(dm, d);
  st.m_K = Mat::zeros(dm, d);
  st.v_K = Mat::zeros(dm, d);
  st.m_V = Mat::zeros(dm, d);
  st.v_V = Mat::zeros(dm, d);
  return st;
}

Projected project(const Mat& x, const TrainState& state) {
  if (x.cols != state.W_Q.rows)
    throw std::invalid_argument("project: X width does not match weights");
  Projected p;
  p.q = detail::cast_mm(x, state.W_Q, Mode::LP);
  p.k = detail::cast_mm(x, state.W_K, Mode::LP);
  p.v = detail::cast_mm(x, state.W_V, Mode::LP);
  return p;
}

TrainConfig arm_config(const std::string& name, std::size_t n) {
  TrainConfig cfg;
  cfg.tiles.block_rows = cfg.tiles.block_cols =
      std::max<std::size_t>(1, std::min<std::size_t>(32, n));
  if (name == "lp") {
    cfg.plan = PrecisionPlan::lp();
  } else if (name == "hp") {
    cfg.plan = PrecisionPlan::hp();
  } else if (name == "exact") {
    cfg.plan = PrecisionPlan::exact();
  } else if (name == "hp-delta") {
    cfg.plan = PrecisionPlan::lp();
    cfg.plan.delta_source = DeltaSource::dO_O_hp;
  } else if (name == "stabilized-lp") {
    cfg.plan = PrecisionPlan::lp();
    cfg.tiles.stabilized = true;
  } else {
    throw std::invalid_argument("arm_config: unknown arm " + name);
  }
  return cfg;
}

double lr_at(const TrainConfig& cfg, std::size_t step) {
  if (cfg.schedule == LrSchedule::Constant) return cfg.lr;
  if (step < cfg.warmup_steps)
    return cfg.lr * static_cast<double>(step + 1) /
           static_cast<double>(cfg.warmup_steps);
  const std::size_t span =
      std::max<std::size_t>(1, cfg.total_steps - cfg.warmup_steps);
  const double t =
      std::min(1.0, static_cast<double>(step - cfg.warmup_steps) /
                        static_cast<double>(span));
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

void adamw_update(Mat& w, Mat& m1, Mat& m2, const Mat& g,
                  const TrainConfig& cfg, std::size_t t, double lr) {
  if (w.rows != g.rows || w.cols != g.cols || m1.rows != g.rows ||
      m2.rows != g.rows)
    throw std::invalid_argument("adamw_update: shape mismatch");
  if (t == 0) throw std::invalid_argument("adamw_update: t is 1-based");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < w.data.size(); ++i) {
    const double grad = g.data[i];
    m1.data[i] = cfg.beta1 * m1.data[i] + (1.0 - cfg.beta1) * grad;
    m2.data[i] = cfg.beta2 * m2.data[i] + (1.0 - cfg.beta2) * grad * grad;
    const double mhat = m1.data[i] / bc1;
    const double vhat = m2.data[i] / bc2;
    w.data[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

StepResult train_step(TrainState& state, const Batch& batch,
                      const TrainConfig& cfg) {
  const std::size_t n = batch.X.rows;
  if (batch.X.cols != state.W_Q.rows)
    throw std::invalid_argument("train_step: batch width vs weights");
  const std::size_t d = state.W_Q.cols;
  if (batch.Y.rows != n || batch.Y.cols != d)
    throw std::invalid_argument("train_step: target shape");

  const Projected p = project(batch.X, state);
  const double alpha = head_alpha(d);
  const FlashOut f =
      cfg.tiles.stabilized
          ? stabilized_flash_forward(p.q, p.k, p.v, alpha, cfg.tiles, cfg.plan)
          : flash_forward(p.q, p.k, p.v, alpha, cfg.tiles, cfg.plan);
  const AttnTape tape = flash_tape(p.q, p.k, p.v, alpha, cfg.plan, f);

  const double inv = 1.0 / static_cast<double>(n * d);
  double loss = 0.0;
  Mat dO = Mat::zeros(n, d, Grid::F64);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ff = 0; ff < d; ++ff) {
      const double e = f.O.at(i, ff) - batch.Y.at(i, ff);
      loss += e * e * inv;
      dO.at(i, ff) = 2.0 * e * inv;
    }
  }
  if (!std::isfinite(loss)) {
    double max_o = 0.0, max_w = 0.0;
    for (double v : f.O.data) max_o = std::max(max_o, std::fabs(v));
    for (const Mat* w : {&state.W_Q, &state.W_K, &state.W_V})
      for (double v : w->data) max_w = std::max(max_w, std::fabs(v));
    throw std::runtime_error(
        "train_step: non-finite loss at step " + std::to_string(state.step) +
        " (loss=" + shortest(loss) + ", max|O|=" + shortest(max_o) +
        ", max|W|=" + shortest(max_w) + ")");
  }

  const AttnGrads g = flash_backward(p.q, p.k, p.v, f.O, dO, f.L, alpha,
                                     cfg.tiles, cfg.plan, &tape);
  const Mat xt = transpose(batch.X);
  Mat dwq = detail::cast_mm(xt, g.dQ, cfg.plan.backward_mode);
  Mat dwk = detail::cast_mm(xt, g.dK, cfg.plan.backward_mode);
  Mat dwv = detail::cast_mm(xt, g.dV, cfg.plan.backward_mode);

  StepResult res;
  res.grad_norm = std::sqrt(frob_sq(dwq) + frob_sq(dwk) + frob_sq(dwv));
  if (res.grad_norm > cfg.clip_norm && res.grad_norm > 0.0) {
    res.clip_scale = cfg.clip_norm / res.grad_norm;
    for (Mat* m : {&dwq, &dwk, &dwv}) {
      for (double& v : m->data) v *= res.clip_scale;
      m->grid = Grid::F64;
    }
  }

  res.report = grad_error_report(tape, dO, batch.X, p.k, alpha);
  res.loss = loss;

  const double lr = lr_at(cfg, state.step);
  const std::size_t t = state.step + 1;
  adamw_update(state.W_Q, state.m_Q, state.v_Q, dwq, cfg, t, lr);
  adamw_update(state.W_K, state.m_K, state.v_K, dwk, cfg, t, lr);
  adamw_update(state.W_V, state.m_V, state.v_V, dwv, cfg, t, lr);

  state.batch_log.push_back(batch);
  state.step += 1;
  return res;
}

ComparisonReport run_experiment(const WorkloadSpec& spec, const ArmSpec& a,
                                const ArmSpec& b, std::size_t steps) {
  std::vector<Batch> log;
  log.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) log.push_back(make_batch(spec, t));
  ComparisonReport rep;
  rep.spec = spec;
  rep.steps = steps;
  rep.a = run_arm(spec, a, log);
  rep.b = run_arm(spec, b, log);
  return rep;
}

void record_batches(const std::filesystem::path& path,
                    const std::vector<Batch>& batches) {
  std::vector<Section> sections;
  Mat meta = Mat::zeros(1, 1, Grid::F64);
  meta.at(0, 0) = static_cast<double>(batches.size());
  sections.push_back({"meta", mat_to_bytes(meta)});
  for (std::size_t t = 0; t < batches.size(); ++t) {
    sections.push_back({"X" + std::to_string(t), mat_to_bytes(batches[t].X)});
    sections.push_back({"Y" + std::to_string(t), mat_to_bytes(batches[t].Y)});
  }
  write_container(path, sections);
}

std::vector<Batch> replay_batches(const std::filesystem::path& path) {
  const std::vector<Section> sections = read_container(path);
  const Section* meta = find_section(sections, "meta");
  if (!meta) throw std::runtime_error("batch log: missing meta section");
  const Mat meta_mat = mat_from_bytes(meta->bytes);
  const auto count = static_cast<std::size_t>(meta_mat.at(0, 0));
  std::vector<Batch> out;
  out.reserve(count);
  for (std::size_t t = 0; t < count; ++t) {
    const Section* xs = find_section(sections, "X" + std::to_string(t));
    const Section* ys = find_section(sections, "Y" + std::to_string(t));
    if (!xs || !ys)
      throw std::runtime_error("batch log: missing batch " + std::to_string(t));
    out.push_back({mat_from_bytes(xs->bytes), mat_from_bytes(ys->bytes)});
  }
  return out;
}

std::string arm_metrics_csv(const ArmReport& arm) {
  std::string out = "step,loss,bias_sum,bias_cumsum,norm_wq,norm_wk,norm_wv\n";
  for (std::size_t t = 0; t < arm.loss.size(); ++t) {
    out += std::to_string(t + 1);
    out += ',';
    out += shortest(arm.loss[t]);
    out += ',';
    out += shortest(arm.bias_sums[t]);
    out += ',';
    out += shortest(arm.bias_cum[t]);
    for (std::size_t m = 0; m < arm.norms.norms.size(); ++m) {
      out += ',';
      out += shortest(arm.norms.norms[m].at(t + 1));
    }
    out += '\n';
  }
  return out;
}

std::string comparison_to_json(const ComparisonReport& report) {
  json j;
  j["schema"] = "lpfa.comparison";
  j["version"] = 1;
  j["spec"] = json{{"N", report.spec.N},
                   {"d", report.spec.d},
                   {"D", report.spec.D},
                   {"seed", report.spec.seed},
                   {"tie_rate", report.spec.tie_rate},
                   {"value_sign_bias", report.spec.value_sign_bias},
                   {"sink_strength", report.spec.sink_strength}};
  j["steps"] = report.steps;
  j["arms"] = json::array({arm_json(report.a), arm_json(report.b)});
  return j.dump();
}

ComparisonReport comparison_from_json(const std::string& text) {
  const json j = json::parse(text);
  if (j.at("schema").get<std::string>() != "lpfa.comparison" ||
      j.at("version").get<int>() != 1)
    throw std::invalid_argument("comparison_from_json: unknown schema");
  ComparisonReport rep;
  const json& s = j.at("spec");
  rep.spec.N = s.at("N").get<std::size_t>();
  rep.spec.d = s.at("d").get<std::size_t>();
  rep.spec.D = s.at("D").get<std::size_t>();
  rep.spec.seed = s.at("seed").get<std::uint64_t>();
  rep.spec.tie_rate = s.at("tie_rate").get<double>();
  rep.spec.value_sign_bias = s.at("value_sign_bias").get<double>();
  rep.spec.sink_strength = s.at("sink_strength").get<double>();
  rep.steps = j.at("steps").get<std::size_t>();
  rep.a = arm_from(j.at("arms").at(0));
  rep.b = arm_from(j.at("arms").at(1));
  return rep;
}

SignProbe sign_probe(const WorkloadSpec& spec) {
  const Workload w = gen_workload(spec);
  const TrainState st = init_state(spec);
  const Projected p = project(w.batch.X, st);
  const double alpha = head_alpha(spec.d);
  const AttnTape tape = forward(p.q, p.k, p.v, alpha, PrecisionPlan::lp());

  const std::size_t n = spec.N, d = spec.d;
  const double inv = 1.0 / static_cast<double>(n * d);
  Mat dO = Mat::zeros(n, d, Grid::F64);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t f = 0; f < d; ++f)
      dO.at(i, f) = 2.0 * (tape.O_lp.at(i, f) - w.batch.Y.at(i, f)) * inv;

  const Vec coeffs = delta_diff(tape, dO);
  const std::vector<std::size_t> ties = repeated_max_rows(tape.S);

  SignProbe probe;
  probe.tie_rows = ties.size();
  if (ties.empty()) return probe;
  probe.max_dO = -std::numeric_limits<double>::infinity();
  std::size_t pos = 0;
  for (std::size_t t : ties) {
    probe.mean_o_gap += tape.O_lp.at(t, 0) - tape.O_hp.at(t, 0);
    probe.mean_coeff += coeffs[t];
    if (coeffs[t] > 0.0) ++pos;
    probe.max_dO = std::max(probe.max_dO, dO.at(t, 0));
  }
  const double count = static_cast<double>(ties.size());
  probe.mean_o_gap /= count;
  probe.mean_coeff /= count;
  probe.frac_coeff_pos = static_cast<double>(pos) / count;
  return probe;
}

}  // namespace lpfa
