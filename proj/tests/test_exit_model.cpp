#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "exitrec/errors.hpp"
#include "exitrec/exit_model.hpp"
#include "exitrec/metrics.hpp"
#include "exitrec/rng.hpp"
#include "oracles.hpp"

using namespace exitrec;

namespace {

ModelConfig tiny(int layers = 2, std::vector<int> exits = {1}) {
  ModelConfig c;
  c.num_layers = layers;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.vocab_size = 64;
  c.context_limit = 16;
  c.exit_layers = std::move(exits);
  c.seed = 7;
  return c;
}

std::vector<int> random_tokens(Rng& rng, std::size_t n, int vocab) {
  std::vector<int> t{2};
  while (t.size() < n) t.push_back(5 + static_cast<int>(rng.index(static_cast<std::uint64_t>(vocab - 5))));
  return t;
}

// Perturb the trunk away from the symmetric init so every gradient path is
// exercised (zero biases, unit gains otherwise hide mistakes).
void jitter(ExitModel& m, std::uint64_t seed, double scale = 0.05) {
  Rng rng(seed);
  for (auto& p : m.parameters()) p += scale * rng.normal();
}

// LayerNorm then affine map, written from the flat head layout.
std::vector<double> head_oracle(std::span<const double> head, std::span<const double> h, int vocab) {
  const std::size_t d = h.size();
  double mean = 0, var = 0;
  for (double x : h) mean += x;
  mean /= static_cast<double>(d);
  for (double x : h) var += (x - mean) * (x - mean);
  var /= static_cast<double>(d);
  std::vector<double> z(d);
  for (std::size_t i = 0; i < d; ++i) z[i] = (h[i] - mean) / std::sqrt(var + 1e-5) * head[i] + head[d + i];
  std::vector<double> logits(static_cast<std::size_t>(vocab));
  const std::size_t w = 2 * d, b = w + static_cast<std::size_t>(vocab) * d;
  for (std::size_t v = 0; v < logits.size(); ++v) {
    double acc = head[b + v];
    for (std::size_t i = 0; i < d; ++i) acc += head[w + v * d + i] * z[i];
    logits[v] = acc;
  }
  return logits;
}

std::vector<double> oracle_softmax(const std::vector<double>& z) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  std::vector<double> p;
  double s = 0;
  for (double v : z) s += std::exp(v - mx);
  for (double v : z) p.push_back(std::exp(v - mx) / s);
  return p;
}

std::vector<TrainingExample> pattern_data(Rng& rng, std::size_t n, int vocab) {
  // The answer is decided by the token right before the end.
  std::vector<TrainingExample> out;
  for (std::size_t k = 0; k < n; ++k) {
    auto t = random_tokens(rng, 6, vocab);
    const bool yes = rng.bernoulli(0.5);
    t.back() = yes ? 10 : 11;
    out.push_back({t, yes ? kYesToken : kNoToken});
  }
  return out;
}

}  // namespace

TEST_SUITE("exit_model") {

TEST_CASE("config validation") {
  CHECK_NOTHROW(tiny().validate());
  auto c = tiny();
  c.exit_layers = {1, 1};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.exit_layers = {2};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.exit_layers = {0};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.d_model = 15;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  ModelConfig deep;
  deep.num_layers = 32;
  deep.d_model = 8;
  deep.n_heads = 2;
  deep.d_ff = 8;
  deep.vocab_size = 32;
  deep.exit_layers = {5, 10, 15, 20, 25, 30};
  CHECK_NOTHROW(deep.validate());
  deep.num_layers = 24;
  deep.exit_layers = {5, 10, 15, 20};
  CHECK_NOTHROW(deep.validate());

  CHECK(ModelConfig::from_json_string(tiny().to_json_string()) == tiny());
  CHECK(ModelConfig::from_json_string(R"({"num_layers": 6})").d_model == 128);
}

TEST_CASE("seeded init is bit-identical") {
  const ExitModel a(tiny()), b(tiny());
  CHECK(std::equal(a.parameters().begin(), a.parameters().end(), b.parameters().begin()));
  auto c = tiny();
  c.seed = 8;
  CHECK(ExitModel(c).trunk_checksum() != a.trunk_checksum());
  CHECK(a.parameter_count() > a.trunk_parameter_count());
  CHECK(a.exit_head_parameters(0).size() == 2 * 16 + 64 * 16 + 64);
  CHECK(a.trunk_parameter_count() + a.exit_head_parameters(0).size() == a.parameter_count());
}

TEST_CASE("forward record") {
  ExitModel m(tiny(3, {1, 2}));
  jitter(m, 1);
  Rng rng(2);
  const auto t = random_tokens(rng, 10, 64);
  const auto r = m.forward(t);
  CHECK(r.hidden.size() == 4);
  CHECK(r.logits_by_exit.size() == 2);
  CHECK(r.logits_by_exit.count(1) == 1);
  CHECK(r.logits_by_exit.count(3) == 0);
  for (const auto& p : {softmax(r.final_logits), early_decode(r, 1), early_decode(r, 2)}) {
    CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-9));
    for (double x : p) CHECK(x >= 0.0);
  }
  CHECK_THROWS_AS(early_decode(r, 3), NotAnExitLayer);

  auto u = t;
  u[2] = u[2] == 9 ? 8 : 9;
  CHECK(m.forward(u).final_logits != r.final_logits);

  CHECK(m.predict_yes(t) == bidimensional_softmax(r.final_logits[kYesToken], r.final_logits[kNoToken]));
  CHECK(m.final_logits(r.hidden.back()) == r.final_logits);
  CHECK(m.final_logit(r.hidden.back(), 17) == r.final_logits[17]);
  CHECK(m.exit_logit(1, r.hidden[2], 17) == r.logits_by_exit.at(2)[17]);

  CHECK_THROWS_AS(m.forward(random_tokens(rng, 17, 64)), ContextOverflow);
  CHECK_THROWS_AS(m.forward(std::vector<int>{2, 64}), ConfigError);
  CHECK_THROWS_AS(m.forward(std::vector<int>{}), ConfigError);
}

TEST_CASE("early decode matches an independent head evaluation") {
  ExitModel m(tiny(3, {1, 2}));
  jitter(m, 3);
  Rng rng(4);
  const auto r = m.forward(random_tokens(rng, 12, 64));
  for (std::size_t i = 0; i < 2; ++i) {
    const int layer = m.exit_layers()[i];
    const auto want = oracle_softmax(head_oracle(m.exit_head_parameters(i), r.hidden[layer], 64));
    const auto got = early_decode(r, layer);
    for (std::size_t v = 0; v < want.size(); ++v) CHECK(std::fabs(got[v] - want[v]) < 1e-12);
  }
  ForwardRecord zero;
  zero.logits_by_exit[1] = std::vector<double>(64, 0.0);
  for (double p : early_decode(zero, 1)) CHECK(p == doctest::Approx(1.0 / 64));
}

TEST_CASE("full model gradient vs finite differences") {
  for (auto kind : {LossKind::answer_pair, LossKind::full_vocab}) {
    ExitModel m(tiny());
    jitter(m, 5);
    Rng rng(6);
    const auto t = random_tokens(rng, 9, 64);
    std::vector<double> g(m.parameter_count(), 0.0);
    loss_and_gradient(m, t, kNoToken, g, kind);
    auto params = m.parameters();
    double worst = 0;
    for (std::size_t i = 0; i < m.trunk_parameter_count(); ++i) {
      const double num = oracle::central_difference([&] { return loss(m, t, kNoToken, kind); }, params[i], 1e-5);
      worst = std::max(worst, oracle::relative_error(g[i], num));
    }
    CHECK(worst < 1e-4);
    for (std::size_t i = m.trunk_parameter_count(); i < m.parameter_count(); ++i) CHECK(g[i] == 0.0);
  }
}

TEST_CASE("exit head gradients vs finite differences") {
  ExitModel m(tiny(3, {1, 2}));
  jitter(m, 8);
  Rng rng(9);
  const auto t = random_tokens(rng, 8, 64);
  std::vector<double> g(m.parameter_count(), 0.0);
  exit_loss_and_gradient(m, t, kYesToken, g);
  auto params = m.parameters();
  for (std::size_t i = 0; i < m.trunk_parameter_count(); ++i) CHECK(g[i] == 0.0);
  double worst = 0;
  for (std::size_t i = m.trunk_parameter_count(); i < m.parameter_count(); ++i) {
    const double num = oracle::central_difference([&] { return exit_loss(m, t, kYesToken); }, params[i], 1e-5);
    worst = std::max(worst, oracle::relative_error(g[i], num));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("head learning rates") {
  for (int d = 0; d < 10; ++d) CHECK(head_lr(0.3, 0.0, d) == 0.3);
  CHECK(std::fabs(head_lr(1e-3, 0.1, 5) - 6.0653e-4) < 1e-8);
  CHECK(head_lr(0.1, 0.5, 0) == 0.1);
  for (int d = 0; d < 10; ++d) CHECK(head_lr(0.1, 0.2, d) > head_lr(0.1, 0.2, d + 1));
  CHECK_THROWS_AS(head_lr(0.0, 0.1, 1), ConfigError);
  CHECK_THROWS_AS(head_lr(0.1, -0.1, 1), ConfigError);
}

TEST_CASE("loss at init is about ln 2 on balanced labels") {
  ExitModel m(tiny());
  Rng rng(10);
  double sum = 0;
  for (int k = 0; k < 40; ++k) sum += loss(m, random_tokens(rng, 8, 64), k % 2 ? kYesToken : kNoToken);
  CHECK(sum / 40 == doctest::Approx(std::log(2.0)).epsilon(0.02));
}

TEST_CASE("memorizes a single repeated sample") {
  ExitModel m(tiny());
  Rng rng(11);
  const TrainingExample ex{random_tokens(rng, 8, 64), kYesToken};
  const std::vector<TrainingExample> data(16, ex);
  OptimizerConfig opt;
  opt.learning_rate = 0.05;
  opt.epochs = 30;
  const auto rep = full_tune(m, data, opt);
  CHECK(rep.phase == Phase::full_tuned);
  CHECK(m.phase() == Phase::full_tuned);
  CHECK(rep.step_losses.size() == 60);
  CHECK(loss(m, ex.tokens, kYesToken) < 0.01);
}

TEST_CASE("training is reproducible") {
  Rng rng(12);
  const auto data = pattern_data(rng, 24, 64);
  OptimizerConfig opt;
  opt.epochs = 2;
  opt.seed = 3;
  ExitModel a(tiny()), b(tiny());
  const auto ra = full_tune(a, data, opt);
  const auto rb = full_tune(b, data, opt);
  CHECK(ra.step_losses == rb.step_losses);
  CHECK(a.trunk_checksum() == b.trunk_checksum());
}

TEST_CASE("non-finite loss aborts") {
  ExitModel m(tiny());
  m.parameters()[0] = std::nan("");
  std::vector<TrainingExample> data{{{0, 5, 6}, kYesToken}};
  CHECK_THROWS_AS(full_tune(m, data, {}), TrainingDiverged);
}

TEST_CASE("head tuning freezes the trunk") {
  ExitModel m(tiny(3, {1, 2}));
  Rng rng(13);
  const auto data = pattern_data(rng, 40, 64);
  CHECK_THROWS_AS(head_tune(m, data, {}), PhaseOrder);
  OptimizerConfig opt;
  opt.learning_rate = 0.05;
  opt.epochs = 3;
  full_tune(m, data, opt);

  std::vector<std::vector<double>> probes;
  for (const auto& ex : data) probes.push_back(m.forward(ex.tokens).final_logits);
  const auto before = m.trunk_checksum();
  const std::vector<double> trunk(m.trunk_parameters().begin(), m.trunk_parameters().end());
  opt.beta = 0.5;
  const auto rep = head_tune(m, data, opt);
  CHECK(m.phase() == Phase::head_tuned);
  CHECK(rep.phase == Phase::head_tuned);
  CHECK(m.trunk_checksum() == before);
  CHECK(std::equal(trunk.begin(), trunk.end(), m.trunk_parameters().begin()));
  for (std::size_t k = 0; k < data.size(); ++k) CHECK(m.forward(data[k].tokens).final_logits == probes[k]);
  REQUIRE(rep.head_learning_rates.size() == 2);
  CHECK(rep.head_learning_rates[0] == head_lr(0.05, 0.5, 1));
  CHECK(rep.head_learning_rates[1] == head_lr(0.05, 0.5, 2));
}

TEST_CASE("heads learn a class split that is already in the hidden state") {
  // One fixed prompt per class: after memorisation the layer-1 states of the
  // two classes differ, so a linear head can separate them.
  ExitModel m(tiny(2, {1}));
  Rng rng(14);
  auto yes = random_tokens(rng, 6, 64);
  auto no = yes;
  no[3] = yes[3] == 20 ? 21 : 20;
  std::vector<TrainingExample> data;
  for (int k = 0; k < 8; ++k) {
    data.push_back({yes, kYesToken});
    data.push_back({no, kNoToken});
  }
  OptimizerConfig opt;
  opt.learning_rate = 0.05;
  opt.epochs = 20;
  full_tune(m, data, opt);
  const double start = exit_loss(m, yes, kYesToken) + exit_loss(m, no, kNoToken);
  opt.learning_rate = 0.5;
  opt.epochs = 40;
  head_tune(m, data, opt);
  CHECK(exit_loss(m, yes, kYesToken) < std::log(2.0));
  CHECK(exit_loss(m, no, kNoToken) < std::log(2.0));
  CHECK(exit_loss(m, yes, kYesToken) + exit_loss(m, no, kNoToken) < start);
}

TEST_CASE("checkpoint round trip and corruption") {
  ExitModel m(tiny(3, {1, 2}));
  jitter(m, 15);
  m.set_phase(Phase::full_tuned);
  const auto dir = std::filesystem::temp_directory_path();
  const auto path = dir / "exitrec_model.ckpt";
  save_checkpoint(m, path);
  const auto back = load_checkpoint(path);
  CHECK(back.config() == m.config());
  CHECK(back.phase() == Phase::full_tuned);
  CHECK(std::equal(m.parameters().begin(), m.parameters().end(), back.parameters().begin()));
  Rng rng(16);
  const auto probe = random_tokens(rng, 10, 64);
  CHECK(back.forward(probe).final_logits == m.forward(probe).final_logits);

  // load then head_tune: trunk still frozen
  auto tuned = load_checkpoint(path);
  const auto sum = tuned.trunk_checksum();
  head_tune(tuned, pattern_data(rng, 8, 64), {});
  CHECK(tuned.trunk_checksum() == sum);

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  CHECK(bytes.substr(0, 4) == "EXRM");
  std::filesystem::resize_file(path, bytes.size() - 5);
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);

  auto bumped = bytes;
  bumped[4] = 9;
  std::ofstream(path, std::ios::binary) << bumped;
  try {
    load_checkpoint(path);
    FAIL("expected a version error");
  } catch (const CheckpointError& e) {
    const std::string what = e.what();
    CHECK(what.find('9') != std::string::npos);
    CHECK(what.find(std::to_string(kCheckpointVersion)) != std::string::npos);
  }
  std::ofstream(path, std::ios::binary) << bytes << "x";
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(dir / "exitrec_missing.ckpt"), CheckpointError);
  std::filesystem::remove(path);
}

}
