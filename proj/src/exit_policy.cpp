#include "exitrec/exit_policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "exitrec/errors.hpp"
#include "exitrec/metrics.hpp"

namespace exitrec {

namespace {

bool in_layers(const std::vector<int>& layers, int l) {
  return layers.empty() || std::binary_search(layers.begin(), layers.end(), l);
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void LayerTrace::validate() const {
  auto fail = [&](const std::string& msg) {
    throw TraceFormat("trace " + (id.empty() ? std::string("<unnamed>") : id) + ": " + msg);
  };
  if (entries.empty()) fail("no entries");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto [l, p] = entries[i];
    if (l < 1) fail("layer " + std::to_string(l) + " is not positive");
    if (i > 0 && l <= entries[i - 1].first) fail("layers are not strictly ascending");
    if (num_layers > 0 && l >= num_layers) fail("layer " + std::to_string(l) + " is not below N");
    if (!(p >= 0.0 && p <= 1.0)) fail("p_yes outside [0, 1]");
  }
  if (final_p_yes && !(*final_p_yes >= 0.0 && *final_p_yes <= 1.0)) fail("final_p_yes outside [0, 1]");
  if (num_layers < 0) fail("negative num_layers");
}

void ExitPolicy::validate() const {
  if (std::isnan(tau) || tau < 0) throw ConfigError("tau must be non-negative");
  if (window < 1) throw ConfigError("window must be at least 1");
  for (std::size_t i = 0; i < exit_layers.size(); ++i) {
    if (exit_layers[i] < 1) throw ConfigError("policy exit layers must be positive");
    if (i > 0 && exit_layers[i] <= exit_layers[i - 1]) {
      throw ConfigError("policy exit layers must be strictly ascending");
    }
  }
}

double discrepancy(double p_curr, double p_prev) { return std::abs(p_curr - p_prev); }

double window_mean(std::span<const double> history, int m) {
  if (m < 1) throw ConfigError("window must be at least 1");
  if (history.empty()) throw NoHistory();
  const std::size_t n = std::min(history.size(), static_cast<std::size_t>(m));
  double sum = 0.0;
  for (std::size_t i = history.size() - n; i < history.size(); ++i) sum += history[i];
  return sum / static_cast<double>(n);
}

bool should_exit(const ExitPolicy& policy, double current, std::span<const double> history) {
  if (history.size() < static_cast<std::size_t>(policy.window)) return false;
  return std::abs(current - window_mean(history, policy.window)) < policy.tau;
}

ExitMonitor::ExitMonitor(const ExitPolicy& policy, int last_layer)
    : policy_(policy), last_layer_(last_layer) {}

bool ExitMonitor::observe(int layer, double p_yes) {
  bool exit = false;
  if (prev_) {
    const double d = discrepancy(p_yes, *prev_);
    exit = should_exit(policy_, d, history_);
    history_.push_back(d);
  }
  prev_ = p_yes;
  return exit || (policy_.force_exit_at_last && layer == last_layer_);
}

ExitRun run_with_exit(const ExitModel& model, std::span<const int> tokens,
                      const ExitPolicy& policy) {
  policy.validate();
  for (int l : policy.exit_layers) model.exit_index(l);
  const auto& layers = policy.exit_layers.empty() ? model.exit_layers() : policy.exit_layers;
  const int N = model.config().num_layers;

  ExitRun run;
  run.trace.num_layers = N;
  DepthRunner runner(model, tokens);
  ExitMonitor monitor(policy, layers.empty() ? kFullDepth : layers.back());
  for (int l : layers) {
    while (runner.depth() < l) runner.advance();
    const auto h = runner.last_hidden();
    const std::size_t idx = model.exit_index(l);
    const double p = bidimensional_softmax(model.exit_logit(idx, h, kYesToken),
                                           model.exit_logit(idx, h, kNoToken));
    run.trace.entries.emplace_back(l, p);
    if (monitor.observe(l, p)) {
      run.decision = {true, l, p, runner.layers_evaluated()};
      return run;
    }
  }
  while (runner.depth() < N) runner.advance();
  const auto h = runner.last_hidden();
  const double p = bidimensional_softmax(model.final_logit(h, kYesToken), model.final_logit(h, kNoToken));
  run.trace.final_p_yes = p;
  run.decision = {false, kFullDepth, p, runner.layers_evaluated()};
  return run;
}

ExitDecision replay_trace(const LayerTrace& trace, const ExitPolicy& policy) {
  trace.validate();
  policy.validate();
  int last = kFullDepth;
  if (policy.exit_layers.empty()) {
    last = trace.entries.back().first;
  } else {
    last = policy.exit_layers.back();
  }
  ExitMonitor monitor(policy, last);
  for (const auto& [l, p] : trace.entries) {
    if (!in_layers(policy.exit_layers, l)) continue;
    if (monitor.observe(l, p)) return {true, l, p, l};
  }
  if (!trace.final_p_yes) {
    throw TraceFormat("trace " + trace.id + " ends before full depth without an exit");
  }
  return {false, kFullDepth, *trace.final_p_yes, trace.num_layers};
}

std::string trace_to_json(const LayerTrace& trace) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [l, p] : trace.entries) entries.push_back({l, p});
  nlohmann::json j = {{"id", trace.id}, {"entries", entries}};
  j["final_p_yes"] = trace.final_p_yes ? nlohmann::json(*trace.final_p_yes) : nlohmann::json(nullptr);
  if (trace.num_layers > 0) j["num_layers"] = trace.num_layers;
  return j.dump();
}

LayerTrace trace_from_json(const std::string& line) {
  LayerTrace t;
  try {
    const auto j = nlohmann::json::parse(line);
    const auto& id = j.at("id");
    t.id = id.is_string() ? id.get<std::string>() : id.dump();
    for (const auto& e : j.at("entries")) {
      if (!e.is_array() || e.size() != 2) throw TraceFormat("entry is not a [layer, p_yes] pair");
      t.entries.emplace_back(e[0].get<int>(), e[1].get<double>());
    }
    if (j.contains("final_p_yes") && !j["final_p_yes"].is_null()) {
      t.final_p_yes = j["final_p_yes"].get<double>();
    }
    t.num_layers = j.value("num_layers", 0);
  } catch (const nlohmann::json::exception& e) {
    throw TraceFormat(std::string("malformed trace line: ") + e.what());
  }
  t.validate();
  return t;
}

void write_traces(const std::filesystem::path& path, std::span<const LayerTrace> traces) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& t : traces) out << trace_to_json(t) << '\n';
}

std::vector<LayerTrace> read_traces(const std::filesystem::path& path, int default_num_layers) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open trace file " + path.string());
  std::vector<LayerTrace> traces;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      traces.push_back(trace_from_json(line));
    } catch (const TraceFormat& e) {
      throw TraceFormat(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (traces.back().num_layers == 0) traces.back().num_layers = default_num_layers;
  }
  return traces;
}

std::vector<SweepRow> sweep(std::span<const LayerTrace> traces, std::span<const double> taus,
                            std::span<const int> windows, const ExitPolicy& base) {
  if (traces.empty()) throw DataError("sweep: no traces");
  for (const auto& t : traces) {
    if (t.num_layers <= 0) throw TraceFormat("trace " + t.id + " lacks num_layers");
    if (!t.final_p_yes) throw TraceFormat("trace " + t.id + " lacks final_p_yes");
  }
  std::vector<SweepRow> rows;
  for (double tau : taus) {
    for (int m : windows) {
      ExitPolicy policy = base;
      policy.tau = tau;
      policy.window = m;
      double exit_sum = 0.0, layer_sum = 0.0, depth_sum = 0.0;
      std::size_t agree = 0;
      for (const auto& t : traces) {
        const auto d = replay_trace(t, policy);
        const int depth = d.exited ? d.exit_layer : t.num_layers;
        exit_sum += depth;
        layer_sum += d.layers_evaluated;
        depth_sum += t.num_layers;
        if ((d.p_yes_at_exit >= 0.5) == (*t.final_p_yes >= 0.5)) ++agree;
      }
      const double n = static_cast<double>(traces.size());
      rows.push_back({tau, m, exit_sum / n, static_cast<double>(agree) / n, depth_sum / layer_sum});
    }
  }
  return rows;
}

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "tau,window,mean_exit_layer,agreement_with_full,simulated_speedup\n";
  for (const auto& r : rows) {
    out << format_double(r.tau) << ',' << r.window << ',' << format_double(r.mean_exit_layer) << ','
        << format_double(r.agreement_with_full) << ',' << format_double(r.simulated_speedup) << '\n';
  }
}

}  // namespace exitrec
