#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "exitrec/errors.hpp"
#include "exitrec/exit_model.hpp"
#include "exitrec/exit_policy.hpp"
#include "exitrec/rng.hpp"
#include "oracles.hpp"

using namespace exitrec;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

LayerTrace random_trace(Rng& rng, const std::vector<int>& layers, int N) {
  LayerTrace t;
  t.num_layers = N;
  // coarse values so exact-equality corner cases show up
  const bool coarse = rng.bernoulli(0.3);
  for (int l : layers) {
    const double p = coarse ? static_cast<double>(rng.index(5)) / 4.0 : rng.uniform();
    t.entries.emplace_back(l, p);
  }
  t.final_p_yes = rng.uniform();
  return t;
}

ExitPolicy random_policy(Rng& rng, const std::vector<int>& layers) {
  ExitPolicy p;
  const double taus[] = {0.0, 0.01, 0.05, 0.1, 0.3, 1.0, kInf};
  p.tau = taus[rng.index(7)];
  p.window = 1 + static_cast<int>(rng.index(4));
  p.force_exit_at_last = rng.bernoulli(0.3);
  if (rng.bernoulli(0.4)) {
    for (int l : layers) {
      if (rng.bernoulli(0.6)) p.exit_layers.push_back(l);
    }
  }
  return p;
}

ModelConfig small_model() {
  ModelConfig c;
  c.num_layers = 6;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.vocab_size = 40;
  c.context_limit = 32;
  c.exit_layers = {1, 2, 3, 4, 5};
  c.seed = 3;
  return c;
}

// Spread the exit heads' predictions so exits are not all-or-nothing.
ExitModel jittered_model() {
  ExitModel m(small_model());
  Rng rng(21);
  for (std::size_t i = m.trunk_parameter_count(); i < m.parameter_count(); ++i) m.parameters()[i] += 0.3 * rng.normal();
  for (std::size_t i = 0; i < m.trunk_parameter_count(); ++i) m.parameters()[i] += 0.02 * rng.normal();
  return m;
}

std::vector<int> tokens(Rng& rng, std::size_t n) {
  std::vector<int> t{2};
  while (t.size() < n) t.push_back(5 + static_cast<int>(rng.index(35)));
  return t;
}

int depth_of(const ExitDecision& d) { return d.exited ? d.exit_layer : 1 << 30; }

}  // namespace

TEST_SUITE("exit_policy") {

TEST_CASE("discrepancy and window mean") {
  CHECK(discrepancy(0.4, 0.4) == 0.0);
  CHECK(discrepancy(0.8, 0.7) == doctest::Approx(0.1));
  CHECK(discrepancy(0.0, 1.0) == 1.0);
  CHECK(window_mean(std::vector{0.1, 0.2, 0.3}, 3) == doctest::Approx(0.2));
  CHECK(window_mean(std::vector{0.5}, 4) == 0.5);
  CHECK(window_mean(std::vector{0.25, 0.25, 0.25}, 2) == 0.25);
  CHECK(window_mean(std::vector{9.0, 0.1, 0.3}, 2) == doctest::Approx(0.2));
  CHECK_THROWS_AS(window_mean(std::vector<double>{}, 2), NoHistory);
}

TEST_CASE("should_exit") {
  ExitPolicy p;
  p.tau = 0.05;
  p.window = 2;
  CHECK(should_exit(p, 0.21, std::vector{0.15, 0.25}));
  CHECK_FALSE(should_exit(p, 0.21, std::vector{0.2}));  // warm-up
  CHECK_FALSE(should_exit(p, 0.3, std::vector{0.2, 0.2}));
  p.tau = 0.25;
  CHECK_FALSE(should_exit(p, 0.75, std::vector{0.5, 0.5}));  // strict
  CHECK(should_exit(p, 0.5, std::vector{0.5, 0.75}));
  p.tau = 0.0;
  CHECK_FALSE(should_exit(p, 0.2, std::vector{0.2, 0.2}));
  p.tau = kInf;
  CHECK_FALSE(should_exit(p, 0.2, std::vector<double>{}));
  CHECK(should_exit(p, 0.9, std::vector{0.0, 0.0}));
}

TEST_CASE("policy validation") {
  ExitPolicy p;
  p.tau = -0.1;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p.tau = std::nan("");
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p.tau = kInf;
  CHECK_NOTHROW(p.validate());
  p.window = 0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p.window = 1;
  p.exit_layers = {3, 2};
  CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("replay by hand") {
  LayerTrace t;
  t.num_layers = 12;
  t.entries = {{3, 0.6}, {6, 0.6}, {9, 0.6}};
  t.final_p_yes = 0.7;
  ExitPolicy p;
  p.tau = 0.01;
  p.window = 1;
  const auto d = replay_trace(t, p);
  CHECK(d.exited);
  CHECK(d.exit_layer == 9);
  CHECK(d.p_yes_at_exit == 0.6);
  CHECK(d.layers_evaluated == 9);

  p.tau = 0.0;
  CHECK(replay_trace(t, p) == ExitDecision{false, kFullDepth, 0.7, 12});
  p.force_exit_at_last = true;
  CHECK(replay_trace(t, p) == ExitDecision{true, 9, 0.6, 9});
  p.exit_layers = {3, 6};
  CHECK(replay_trace(t, p) == ExitDecision{true, 6, 0.6, 6});

  LayerTrace empty;
  empty.final_p_yes = 0.5;
  CHECK_THROWS_AS(replay_trace(empty, p), TraceFormat);
  t.entries = {{6, 0.5}, {3, 0.5}};
  CHECK_THROWS_AS(replay_trace(t, p), TraceFormat);
  t.entries = {{3, 1.5}};
  CHECK_THROWS_AS(replay_trace(t, p), TraceFormat);
}

TEST_CASE("replay equals the brute-force rule on random traces") {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<int> layers;
    for (int l = 1; l < 16; ++l) {
      if (rng.bernoulli(0.4)) layers.push_back(l);
    }
    if (layers.empty()) layers.push_back(8);
    const auto t = random_trace(rng, layers, 16);
    const auto pol = random_policy(rng, layers);
    const auto got = replay_trace(t, pol);
    const auto want = oracle::replay(t, pol);
    CHECK(got.exit_layer == want.exit_layer);
    CHECK(got.p_yes_at_exit == want.p);
    CHECK(got.layers_evaluated == want.layers);
    CHECK(got.exited == (want.exit_layer != kFullDepth));
  }
}

TEST_CASE("tau monotonicity and warm-up") {
  Rng rng(2);
  const std::vector<int> layers{2, 4, 6, 8, 10, 12, 14};
  const double taus[] = {0.0, 0.001, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, kInf};
  for (int trial = 0; trial < 500; ++trial) {
    const auto t = random_trace(rng, layers, 16);
    for (int m = 1; m <= 4; ++m) {
      int prev = 1 << 30;
      for (double tau : taus) {
        ExitPolicy p;
        p.tau = tau;
        p.window = m;
        const auto d = replay_trace(t, p);
        CHECK(depth_of(d) <= prev);
        prev = depth_of(d);
        if (d.exited) {
          // at least m earlier discrepancies: visited index >= m + 1
          const auto it = std::find_if(t.entries.begin(), t.entries.end(),
                                       [&](const auto& e) { return e.first == d.exit_layer; });
          CHECK(it - t.entries.begin() >= m + 1);
        }
      }
      ExitPolicy inf;
      inf.tau = kInf;
      inf.window = m;
      CHECK(replay_trace(t, inf).exit_layer == layers[static_cast<std::size_t>(m) + 1]);
    }
  }
}

TEST_CASE("online decisions") {
  const auto model = jittered_model();
  Rng rng(3);
  std::size_t exits = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const auto t = tokens(rng, 8 + rng.index(20));
    ExitPolicy zero;
    zero.tau = 0.0;
    const auto full = run_with_exit(model, t, zero);
    CHECK_FALSE(full.decision.exited);
    CHECK(full.decision.p_yes_at_exit == model.predict_yes(t));
    CHECK(full.decision.layers_evaluated == 6);
    CHECK(full.trace.entries.size() == 5);

    for (int m = 1; m <= 2; ++m) {
      ExitPolicy inf;
      inf.tau = kInf;
      inf.window = m;
      const auto r = run_with_exit(model, t, inf);
      CHECK(r.decision.exit_layer == m + 2);
      CHECK(r.decision.layers_evaluated == m + 2);
      CHECK(r.trace.entries.size() == static_cast<std::size_t>(m + 2));
    }

    ExitPolicy pol;
    pol.tau = 0.02 + 0.1 * rng.uniform();
    pol.window = 1 + static_cast<int>(rng.index(2));
    pol.force_exit_at_last = rng.bernoulli(0.3);
    if (rng.bernoulli(0.3)) pol.exit_layers = {1, 3, 5};
    const auto r = run_with_exit(model, t, pol);
    CHECK(replay_trace(r.trace, pol) == r.decision);
    if (r.decision.exited) {
      ++exits;
      CHECK(r.decision.layers_evaluated == r.decision.exit_layer);
      CHECK(r.trace.entries.back().first == r.decision.exit_layer);
      CHECK_FALSE(r.trace.final_p_yes.has_value());
    }
  }
  CHECK(exits > 0);

  ExitPolicy bad;
  bad.exit_layers = {2, 6};
  CHECK_THROWS_AS(run_with_exit(model, tokens(rng, 5), bad), NotAnExitLayer);
}

TEST_CASE("forced exit at the last policy layer") {
  const auto model = jittered_model();
  Rng rng(4);
  ExitPolicy p;
  p.tau = 0.0;
  p.exit_layers = {2, 3};
  p.force_exit_at_last = true;
  const auto r = run_with_exit(model, tokens(rng, 12), p);
  CHECK(r.decision == ExitDecision{true, 3, r.trace.entries.back().second, 3});
}

TEST_CASE("trace files") {
  LayerTrace a;
  a.id = "a";
  a.entries = {{3, 0.25}, {6, 0.1 + 0.2}};
  a.final_p_yes = 1.0 / 3.0;
  a.num_layers = 12;
  LayerTrace b;
  b.id = "b";
  b.entries = {{3, 0.5}};
  const auto back = trace_from_json(trace_to_json(a));
  CHECK(back.id == "a");
  CHECK(back.entries == a.entries);
  CHECK(back.final_p_yes == a.final_p_yes);
  CHECK(back.num_layers == 12);

  const auto path = std::filesystem::temp_directory_path() / "exitrec_traces.jsonl";
  write_traces(path, std::vector{a, b});
  const auto read = read_traces(path, 9);
  REQUIRE(read.size() == 2);
  CHECK(read[0].num_layers == 12);
  CHECK(read[1].num_layers == 9);
  CHECK_FALSE(read[1].final_p_yes.has_value());
  std::ofstream(path) << R"({"id": 1, "entries": [[3, 0.5, 1]]})" << '\n';
  CHECK_THROWS_AS(read_traces(path), TraceFormat);
  std::ofstream(path) << "not json\n";
  CHECK_THROWS_AS(read_traces(path), TraceFormat);
  std::filesystem::remove(path);
}

TEST_CASE("sweep") {
  Rng rng(5);
  std::vector<LayerTrace> traces;
  for (int k = 0; k < 50; ++k) traces.push_back(random_trace(rng, {3, 6, 9}, 12));
  const std::vector<double> taus{0.0, kInf};
  const std::vector<int> windows{1};
  const auto rows = sweep(traces, taus, windows);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].mean_exit_layer == 12.0);
  CHECK(rows[0].agreement_with_full == 1.0);
  CHECK(rows[0].simulated_speedup == 1.0);
  CHECK(rows[1].mean_exit_layer == 9.0);
  CHECK(rows[1].simulated_speedup == doctest::Approx(12.0 / 9.0));
  traces[0].num_layers = 0;
  CHECK_THROWS_AS(sweep(traces, taus, windows), TraceFormat);
}

}
