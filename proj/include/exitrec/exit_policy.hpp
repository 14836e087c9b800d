#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "exitrec/exit_model.hpp"

namespace exitrec {

inline constexpr int kFullDepth = -1;

struct LayerTrace {
  std::string id;
  std::vector<std::pair<int, double>> entries;  // (exit layer, p_yes), ascending layers
  std::optional<double> final_p_yes;             // set when full depth was reached
  int num_layers = 0;                            // model depth N, 0 if unknown

  // Throws TraceFormat.
  void validate() const;
};

struct ExitPolicy {
  double tau = 0.05;
  int window = 2;                // m, in exit-layer steps
  std::vector<int> exit_layers;  // empty: every exit layer of the model / trace
  bool force_exit_at_last = false;

  // Throws ConfigError. tau may be +inf (exit as soon as warm-up allows).
  void validate() const;
};

struct ExitDecision {
  bool exited = false;
  int exit_layer = kFullDepth;
  double p_yes_at_exit = 0.0;
  int layers_evaluated = 0;

  bool operator==(const ExitDecision&) const = default;
};

double discrepancy(double p_curr, double p_prev);

// Mean of the last min(m, size) entries; NoHistory on an empty history.
double window_mean(std::span<const double> history, int m);

// history holds the discrepancies of earlier layers only.
bool should_exit(const ExitPolicy& policy, double current, std::span<const double> history);

// The decision rule fed one visited exit layer at a time; used by both the
// online path and trace replay.
class ExitMonitor {
 public:
  // last_layer: where force_exit_at_last fires.
  ExitMonitor(const ExitPolicy& policy, int last_layer);

  bool observe(int layer, double p_yes);
  const std::vector<double>& history() const { return history_; }

 private:
  const ExitPolicy& policy_;
  int last_layer_;
  std::optional<double> prev_;
  std::vector<double> history_;
};

struct ExitRun {
  ExitDecision decision;
  LayerTrace trace;
};

// Policy exit layers must be a subset of the model's (NotAnExitLayer).
ExitRun run_with_exit(const ExitModel& model, std::span<const int> tokens,
                      const ExitPolicy& policy);

// Entries whose layer is not in a non-empty policy layer set are skipped.
ExitDecision replay_trace(const LayerTrace& trace, const ExitPolicy& policy);

std::string trace_to_json(const LayerTrace& trace);
LayerTrace trace_from_json(const std::string& line);
void write_traces(const std::filesystem::path& path, std::span<const LayerTrace> traces);
// Traces without num_layers take default_num_layers.
std::vector<LayerTrace> read_traces(const std::filesystem::path& path, int default_num_layers = 0);

struct SweepRow {
  double tau = 0.0;
  int window = 0;
  double mean_exit_layer = 0.0;     // full depth counts as N
  double agreement_with_full = 0.0;  // same side of 0.5 as the full-depth prediction
  double simulated_speedup = 0.0;    // N / mean layers evaluated
};

// Every trace must carry num_layers and final_p_yes.
std::vector<SweepRow> sweep(std::span<const LayerTrace> traces, std::span<const double> taus,
                            std::span<const int> windows, const ExitPolicy& base = {});

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows);

}  // namespace exitrec
