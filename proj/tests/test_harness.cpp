#include "doctest.h"

#include "lpfa/diagnostics.hpp"
#include "lpfa/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unistd.h>
#include <vector>

using namespace lpfa;

namespace {

WorkloadSpec small_spec(std::uint64_t seed = 7) {
  WorkloadSpec spec;
  spec.N = 32;
  spec.d = 8;
  spec.D = 16;
  spec.seed = seed;
  return spec;
}

bool same_data(const Mat& a, const Mat& b) {
  return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
}

std::filesystem::path temp_file(const char* tag) {
  return std::filesystem::temp_directory_path() /
         (std::string("lpfa_harness_") + tag + "_" +
          std::to_string(::getpid()) + ".bin");
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(item);
  return out;
}

}  // namespace

TEST_CASE("rng produces uniform and normal draws deterministically") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) {
    const double u = a.uniform();
    CHECK(u == b.uniform());
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  Rng c(42);
  double mean = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = c.normal();
    mean += x;
    sq += x * x;
  }
  mean /= n;
  sq = sq / n - mean * mean;
  CHECK(std::fabs(mean) < 0.03);
  CHECK(std::fabs(sq - 1.0) < 0.05);
  CHECK(Rng(1).uniform() != Rng(2).uniform());
}

TEST_CASE("make_batch is deterministic and fresh across steps") {
  const WorkloadSpec spec;
  const Batch b1 = make_batch(spec, 3);
  const Batch b2 = make_batch(spec, 3);
  CHECK(same_data(b1.X, b2.X));
  CHECK(same_data(b1.Y, b2.Y));
  const Batch b3 = make_batch(spec, 4);
  CHECK_FALSE(same_data(b1.X, b3.X));

  WorkloadSpec other = spec;
  other.seed = spec.seed + 1;
  CHECK_FALSE(same_data(b1.X, make_batch(other, 3).X));
}

TEST_CASE("engineered skeleton: twin sinks, value pair, targets") {
  const WorkloadSpec spec;
  const std::size_t mid = spec.N / 2;
  const Batch b = make_batch(spec, 0);

  SUBCASE("sink rows collide bitwise on every coordinate but the value feed") {
    for (std::size_t r = 0; r + 1 < spec.D; ++r)
      CHECK(b.X.at(mid, r) == b.X.at(0, r));
    CHECK(b.X.at(0, spec.D - 1) == -2.40625);
    CHECK(b.X.at(mid, spec.D - 1) == -2.296875);
  }

  SUBCASE("value feed is small and predominantly negative elsewhere") {
    std::size_t neg = 0, total = 0;
    for (std::size_t i = 0; i < spec.N; ++i) {
      if (i == 0 || i == mid) continue;
      const double v = b.X.at(i, spec.D - 1);
      CHECK(std::fabs(v) > 1e-4);
      CHECK(std::fabs(v) < 1e-2);
      neg += v < 0.0;
      ++total;
    }
    const double frac = static_cast<double>(neg) / static_cast<double>(total);
    CHECK(frac > spec.value_sign_bias - 0.1);
  }

  SUBCASE("targets pin the designated feature above every output") {
    for (std::size_t i = 0; i < spec.N; ++i) {
      CHECK(b.Y.at(i, 0) == 0.5);
      for (std::size_t f = 1; f < spec.d; ++f) {
        CHECK(b.Y.at(i, f) > -0.3);
        CHECK(b.Y.at(i, f) < 0.3);
      }
    }
  }

  SUBCASE("inputs live on the B16 grid") {
    CHECK(b.X.grid == Grid::B16);
    CHECK(b.X.on_grid());
  }
}

TEST_CASE("engineered_tie_rows covers the sinks and honours the rate") {
  const WorkloadSpec spec;
  const auto rows = engineered_tie_rows(spec);
  CHECK(rows.size() == 6);  // max(2, round(0.05 * 128))
  CHECK(std::is_sorted(rows.begin(), rows.end()));
  CHECK(std::find(rows.begin(), rows.end(), 0u) != rows.end());
  CHECK(std::find(rows.begin(), rows.end(), spec.N / 2) != rows.end());
  for (const std::size_t r : rows) CHECK(r < spec.N);

  WorkloadSpec tiny = spec;
  tiny.tie_rate = 0.001;
  CHECK(engineered_tie_rows(tiny).size() == 2);  // floor: the sink pair

  WorkloadSpec off = spec;
  off.tie_rate = 0.0;
  CHECK(engineered_tie_rows(off).empty());
}

TEST_CASE("gen_workload measures the realized tie rate") {
  SUBCASE("defaults hit the target") {
    const Workload w = gen_workload(WorkloadSpec{});
    CHECK_FALSE(w.tie_rate_unreachable);
    CHECK(w.measured_tie_rate ==
          doctest::Approx(0.05).epsilon(0.2));
  }

  SUBCASE("sub-floor target is flagged") {
    WorkloadSpec spec;
    spec.tie_rate = 0.001;  // floor of two engineered rows overshoots this
    const Workload w = gen_workload(spec);
    CHECK(w.tie_rate_unreachable);
  }

  SUBCASE("overwhelming sinks capture foreign maxima and are flagged") {
    WorkloadSpec spec;
    spec.sink_strength = 128.0;
    const Workload w = gen_workload(spec);
    CHECK(w.measured_tie_rate > 0.5);
    CHECK(w.tie_rate_unreachable);
  }

  SUBCASE("tie_rate zero yields an untied workload") {
    WorkloadSpec spec;
    spec.tie_rate = 0.0;
    const Workload w = gen_workload(spec);
    CHECK(w.measured_tie_rate < 0.01);
    CHECK_FALSE(w.tie_rate_unreachable);
  }
}

TEST_CASE("workload validation") {
  WorkloadSpec spec;
  spec.N = 0;
  CHECK_THROWS_AS(gen_workload(spec), std::invalid_argument);
  spec = WorkloadSpec{};
  spec.tie_rate = 1.5;
  CHECK_THROWS_AS(make_batch(spec, 0), std::invalid_argument);
  spec = WorkloadSpec{};
  spec.sink_strength = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(init_state(spec), std::invalid_argument);
}

TEST_CASE("projections land on the B16 grid") {
  const WorkloadSpec spec = small_spec();
  const TrainState st = init_state(spec);
  const Batch b = make_batch(spec, 0);
  const Projected p = project(b.X, st);
  for (const Mat* m : {&p.q, &p.k, &p.v}) {
    CHECK(m->grid == Grid::B16);
    CHECK(m->on_grid());
    CHECK(m->rows == spec.N);
    CHECK(m->cols == spec.d);
  }
}

TEST_CASE("arm presets") {
  const TrainConfig lp = arm_config("lp", 128);
  CHECK(lp.tiles.block_rows == 32);
  CHECK(lp.tiles.block_cols == 32);
  CHECK_FALSE(lp.tiles.stabilized);
  CHECK(lp.plan.delta_source == DeltaSource::dO_O_lp);

  CHECK(arm_config("hp-delta", 128).plan.delta_source == DeltaSource::dO_O_hp);
  CHECK(arm_config("stabilized-lp", 128).tiles.stabilized);
  CHECK(arm_config("lp", 8).tiles.block_rows == 8);

  const TrainConfig exact = arm_config("exact", 128);
  CHECK(exact.plan.score_mode == Mode::Exact);
  CHECK(exact.plan.pv_mode == Mode::Exact);
  CHECK(exact.plan.backward_mode == Mode::Exact);
  CHECK_THROWS_AS(arm_config("fp8", 128), std::invalid_argument);
}

TEST_CASE("lr_at schedules") {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  CHECK(lr_at(cfg, 0) == 1e-3);
  CHECK(lr_at(cfg, 999) == 1e-3);

  cfg.schedule = LrSchedule::CosineWarmup;
  cfg.warmup_steps = 10;
  cfg.total_steps = 110;
  CHECK(lr_at(cfg, 0) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(lr_at(cfg, 4) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(lr_at(cfg, 9) == doctest::Approx(1e-3).epsilon(1e-12));
  // halfway through the cosine span
  CHECK(lr_at(cfg, 60) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(lr_at(cfg, 110) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(lr_at(cfg, 10'000) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("adamw matches the constant-gradient closed form") {
  // With m = v = 0 and a constant gradient, bias correction cancels exactly
  // and each of the first steps moves by -lr * g / (|g| + eps).
  TrainConfig cfg;
  cfg.lr = 1e-3;
  Mat w = Mat::zeros(2, 2);
  w.at(0, 0) = 1.0;
  w.at(0, 1) = -2.0;
  w.at(1, 0) = 0.5;
  w.at(1, 1) = 3.0;
  const Mat w0 = w;
  Mat g = Mat::zeros(2, 2);
  g.at(0, 0) = 0.3;
  g.at(0, 1) = -0.1;
  g.at(1, 0) = 2.0;
  g.at(1, 1) = 0.004;
  Mat m1 = Mat::zeros(2, 2), m2 = Mat::zeros(2, 2);

  adamw_update(w, m1, m2, g, cfg, 1, cfg.lr);
  adamw_update(w, m1, m2, g, cfg, 2, cfg.lr);

  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      const double gij = g.at(i, j);
      const double want =
          w0.at(i, j) - 2.0 * cfg.lr * gij / (std::fabs(gij) + cfg.eps);
      CHECK(w.at(i, j) == doctest::Approx(want).epsilon(1e-10));
      // second-moment saturation: the move is sign(g) scaled by ~lr
      CHECK((w.at(i, j) < w0.at(i, j)) == (gij > 0.0));
    }

  SUBCASE("t is one-based") {
    CHECK_THROWS_AS(adamw_update(w, m1, m2, g, cfg, 0, cfg.lr),
                    std::invalid_argument);
  }
  SUBCASE("shapes must agree") {
    Mat bad = Mat::zeros(3, 2);
    CHECK_THROWS_AS(adamw_update(w, m1, m2, bad, cfg, 3, cfg.lr),
                    std::invalid_argument);
  }
}

TEST_CASE("train_step clips the global gradient norm") {
  const WorkloadSpec spec = small_spec();
  const Batch b = make_batch(spec, 0);
  const TrainConfig cfg = arm_config("lp", spec.N);

  TrainState st = init_state(spec);
  const StepResult free_run = train_step(st, b, cfg);
  CHECK(free_run.grad_norm > 0.0);
  CHECK(free_run.clip_scale == 1.0);  // defaults never clip this workload

  TrainConfig tight = cfg;
  tight.clip_norm = 0.5 * free_run.grad_norm;
  TrainState st2 = init_state(spec);
  const StepResult clipped = train_step(st2, b, tight);
  CHECK(clipped.grad_norm == free_run.grad_norm);
  CHECK(clipped.clip_scale == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(clipped.grad_norm * clipped.clip_scale <=
        tight.clip_norm * (1.0 + 1e-12));
}

TEST_CASE("train_step bookkeeping") {
  const WorkloadSpec spec = small_spec();
  const Batch b = make_batch(spec, 0);

  SUBCASE("zero lr leaves the weights bitwise untouched") {
    TrainConfig cfg = arm_config("lp", spec.N);
    cfg.lr = 0.0;
    TrainState st = init_state(spec);
    const Mat wq = st.W_Q, wk = st.W_K, wv = st.W_V;
    const StepResult r = train_step(st, b, cfg);
    CHECK(std::isfinite(r.loss));
    CHECK(same_data(st.W_Q, wq));
    CHECK(same_data(st.W_K, wk));
    CHECK(same_data(st.W_V, wv));
    CHECK(st.step == 1);
    CHECK(st.batch_log.size() == 1);
  }

  SUBCASE("exact arm has identically zero bias") {
    TrainState st = init_state(spec);
    const StepResult r = train_step(st, b, arm_config("exact", spec.N));
    CHECK(r.report.bias_sum == 0.0);
    for (const double c : r.report.coeffs.data) CHECK(c == 0.0);
  }

  SUBCASE("non-finite loss throws with a diagnostic") {
    Batch poisoned = b;
    poisoned.Y.at(0, 0) = 1e200;  // squared error overflows F64
    TrainState st = init_state(spec);
    CHECK_THROWS_AS(train_step(st, poisoned, arm_config("lp", spec.N)),
                    std::runtime_error);
  }

  SUBCASE("mismatched batch shape throws") {
    TrainState st = init_state(spec);
    Batch wrong = b;
    wrong.Y = Mat::zeros(spec.N, spec.d + 1);
    CHECK_THROWS_AS(train_step(st, wrong, arm_config("lp", spec.N)),
                    std::invalid_argument);
  }
}

TEST_CASE("run_experiment pairs arms over one batch sequence") {
  const WorkloadSpec spec = small_spec(11);
  const ArmSpec lp{"lp", arm_config("lp", spec.N)};
  const std::size_t steps = 4;

  SUBCASE("identical arm configs give bitwise identical trajectories") {
    const ComparisonReport rep =
        run_experiment(spec, lp, ArmSpec{"lp-too", lp.cfg}, steps);
    CHECK(rep.steps == steps);
    CHECK(rep.a.loss == rep.b.loss);
    CHECK(rep.a.bias_sums == rep.b.bias_sums);
    CHECK(rep.a.bias_cum == rep.b.bias_cum);
    CHECK(rep.a.norms.norms == rep.b.norms.norms);
    CHECK(rep.a.norms.steps.size() == steps + 1);  // step 0 plus each step
  }

  SUBCASE("repeat runs are bitwise identical") {
    const ArmSpec hp{"hp", arm_config("hp", spec.N)};
    const ComparisonReport r1 = run_experiment(spec, lp, hp, steps);
    const ComparisonReport r2 = run_experiment(spec, lp, hp, steps);
    CHECK(r1.a.loss == r2.a.loss);
    CHECK(r1.b.loss == r2.b.loss);
    CHECK(r1.a.bias_cum == r2.a.bias_cum);
    CHECK(r1.b.bias_cum == r2.b.bias_cum);
    CHECK(r1.a.norms.norms == r2.a.norms.norms);
    CHECK(r1.b.norms.norms == r2.b.norms.norms);
  }
}

TEST_CASE("batch log round-trips and drives an identical replay") {
  const WorkloadSpec spec = small_spec(13);
  const TrainConfig cfg = arm_config("lp", spec.N);
  const std::size_t steps = 3;

  TrainState live = init_state(spec);
  std::vector<StepResult> live_results;
  for (std::size_t t = 0; t < steps; ++t)
    live_results.push_back(train_step(live, make_batch(spec, t), cfg));

  const auto path = temp_file("replay");
  record_batches(path, live.batch_log);

  SUBCASE("replayed batches are bitwise equal") {
    const std::vector<Batch> back = replay_batches(path);
    REQUIRE(back.size() == steps);
    for (std::size_t t = 0; t < steps; ++t) {
      CHECK(same_data(back[t].X, live.batch_log[t].X));
      CHECK(same_data(back[t].Y, live.batch_log[t].Y));
    }
  }

  SUBCASE("replay reproduces the trajectory bitwise") {
    const std::vector<Batch> back = replay_batches(path);
    TrainState replayed = init_state(spec);
    for (std::size_t t = 0; t < steps; ++t) {
      const StepResult r = train_step(replayed, back[t], cfg);
      CHECK(r.loss == live_results[t].loss);
      CHECK(r.grad_norm == live_results[t].grad_norm);
      CHECK(r.report.bias_sum == live_results[t].report.bias_sum);
    }
    CHECK(same_data(replayed.W_Q, live.W_Q));
    CHECK(same_data(replayed.W_K, live.W_K));
    CHECK(same_data(replayed.W_V, live.W_V));
  }

  SUBCASE("truncation is detected") {
    const auto cut = temp_file("truncated");
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    std::ofstream out(cut, std::ios::binary);
    out.write(bytes.data(),
              static_cast<std::streamsize>(bytes.size() - 9));
    out.close();
    CHECK_THROWS_AS(replay_batches(cut), std::runtime_error);
    std::filesystem::remove(cut);
  }

  SUBCASE("missing file throws") {
    CHECK_THROWS_AS(replay_batches(temp_file("nonexistent")),
                    std::runtime_error);
  }

  std::filesystem::remove(path);
}

TEST_CASE("comparison report serialization") {
  const WorkloadSpec spec = small_spec(17);
  const ComparisonReport rep =
      run_experiment(spec, ArmSpec{"lp", arm_config("lp", spec.N)},
                     ArmSpec{"hp", arm_config("hp", spec.N)}, 2);

  SUBCASE("JSON round-trips bitwise") {
    const ComparisonReport back = comparison_from_json(comparison_to_json(rep));
    CHECK(back.steps == rep.steps);
    CHECK(back.spec.N == rep.spec.N);
    CHECK(back.spec.seed == rep.spec.seed);
    CHECK(back.spec.sink_strength == rep.spec.sink_strength);
    CHECK(back.a.name == "lp");
    CHECK(back.b.name == "hp");
    CHECK(back.a.loss == rep.a.loss);
    CHECK(back.b.bias_cum == rep.b.bias_cum);
    CHECK(back.a.norms.norms == rep.a.norms.norms);
    CHECK_THROWS_AS(comparison_from_json("{}"), std::exception);
  }

  SUBCASE("metrics CSV is one row per step") {
    const std::string csv = arm_metrics_csv(rep.a);
    std::stringstream ss(csv);
    std::string line;
    REQUIRE(std::getline(ss, line));
    CHECK(line == "step,loss,bias_sum,bias_cumsum,norm_wq,norm_wk,norm_wv");
    std::size_t rows = 0;
    while (std::getline(ss, line)) {
      const auto fields = split(line, ',');
      REQUIRE(fields.size() == 7);
      CHECK(fields[0] == std::to_string(rows + 1));  // state after the update
      CHECK(std::stod(fields[1]) == rep.a.loss[rows]);
      CHECK(std::stod(fields[4]) == rep.a.norms.norms[0][rows + 1]);
      ++rows;
    }
    CHECK(rows == rep.steps);
  }
}

TEST_CASE("sign probe reports the engineered directions") {
  const SignProbe p = sign_probe(WorkloadSpec{});
  CHECK(p.tie_rows >= 2);
  CHECK(p.mean_o_gap < 0.0);
  CHECK(p.mean_coeff > 0.0);
  CHECK(p.frac_coeff_pos > 0.5);
  CHECK(p.max_dO < 0.0);
}

TEST_CASE("stabilized arm accumulates less bias than lp" *
          doctest::timeout(120)) {
  const WorkloadSpec spec;  // full engineered geometry
  const ComparisonReport rep = run_experiment(
      spec, ArmSpec{"lp", arm_config("lp", spec.N)},
      ArmSpec{"stabilized-lp", arm_config("stabilized-lp", spec.N)}, 40);
  const double lp_cum = rep.a.bias_cum.back();
  const double stab_cum = rep.b.bias_cum.back();
  CHECK(lp_cum > 0.0);
  CHECK(std::fabs(lp_cum) > 1.5 * std::fabs(stab_cum));
}
