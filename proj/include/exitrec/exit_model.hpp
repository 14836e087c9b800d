#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace exitrec {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Answer word ids; the vocabulary reserves these slots.
inline constexpr int kYesToken = 3;
inline constexpr int kNoToken = 4;

struct ModelConfig {
  int num_layers = 12;
  int d_model = 128;
  int n_heads = 4;
  int d_ff = 512;
  int vocab_size = 4096;
  int context_limit = 512;
  std::vector<int> exit_layers{3, 6, 9};
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;

  std::string to_json_string() const;
  // Missing keys keep their defaults.
  static ModelConfig from_json_string(const std::string& text);
  static ModelConfig load(const std::filesystem::path& path);

  bool operator==(const ModelConfig&) const = default;
};

enum class Phase : std::uint8_t { initialized = 0, full_tuned = 1, head_tuned = 2 };

std::string to_string(Phase phase);

// Values at the scored (last) position.
struct ForwardRecord {
  std::vector<std::vector<double>> hidden;           // h^(0) .. h^(N)
  std::map<int, std::vector<double>> logits_by_exit;  // exit layer -> logits
  std::vector<double> final_logits;
};

std::vector<double> softmax(std::span<const double> logits);

// softmax(logits_by_exit[layer]); throws NotAnExitLayer.
std::vector<double> early_decode(const ForwardRecord& record, int layer);

struct LayerCache;

// Pre-LayerNorm causal decoder. All parameters live in one flat array: the
// trunk (embeddings, blocks, final LayerNorm and final head) is a prefix and
// the exit heads (LayerNorm + linear each) follow in exit-layer order.
class ExitModel {
 public:
  explicit ExitModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  Phase phase() const { return phase_; }
  void set_phase(Phase p) { phase_ = p; }

  std::size_t parameter_count() const { return params_.size(); }
  std::size_t trunk_parameter_count() const { return trunk_size_; }
  std::span<double> parameters() { return params_; }
  std::span<const double> parameters() const { return params_; }
  std::span<const double> trunk_parameters() const { return {params_.data(), trunk_size_}; }
  // Parameters of the head mounted on exit_layers()[index].
  std::span<const double> exit_head_parameters(std::size_t index) const;

  const std::vector<int>& exit_layers() const { return config_.exit_layers; }
  bool is_exit_layer(int layer) const;
  std::size_t exit_index(int layer) const;  // throws NotAnExitLayer

  // Throws ContextOverflow past the context limit, ConfigError on empty input
  // or ids outside the vocabulary.
  void check_tokens(std::span<const int> tokens) const;

  ForwardRecord forward(std::span<const int> tokens) const;

  // Logits from the final head or from exit head `index`, given the raw
  // hidden state at the scored position. The single-token forms repeat the
  // arithmetic of the full vector exactly.
  std::vector<double> final_logits(std::span<const double> hidden) const;
  std::vector<double> exit_logits(std::size_t index, std::span<const double> hidden) const;
  double final_logit(std::span<const double> hidden, int token) const;
  double exit_logit(std::size_t index, std::span<const double> hidden, int token) const;

  // Probability of the yes token under the bidimensional softmax over the
  // yes/no logits, at full depth.
  double predict_yes(std::span<const int> tokens) const;

  std::uint64_t trunk_checksum() const;

  struct HeadOffsets {
    std::size_t ln_g, ln_b, w, b;  // w is vocab x d_model
  };
  struct LayerOffsets {
    std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

 private:
  friend class DepthRunner;
  friend struct ModelAccess;

  void layer_forward(int layer, Matrix& x, LayerCache* cache) const;
  Matrix embed(std::span<const int> tokens) const;

  ModelConfig config_;
  Phase phase_ = Phase::initialized;
  std::vector<double> params_;
  std::size_t tok_emb_ = 0, pos_emb_ = 0;
  std::vector<LayerOffsets> layers_;
  HeadOffsets final_head_{};
  std::vector<HeadOffsets> exit_heads_;
  std::size_t trunk_size_ = 0;
};

std::uint64_t fnv1a(std::span<const double> values);

// Layer-by-layer execution; the only path that runs transformer blocks at
// inference, so early exit and full depth share every floating point op.
class DepthRunner {
 public:
  DepthRunner(const ExitModel& model, std::span<const int> tokens);

  int depth() const { return depth_; }
  void advance();
  std::span<const double> last_hidden() const;
  int layers_evaluated() const { return depth_; }

 private:
  const ExitModel& model_;
  Matrix x_;
  int depth_ = 0;
};

// answer_pair: cross-entropy of the two-way softmax over the yes/no logits
// (the quantity that is scored). full_vocab: cross-entropy over every token.
enum class LossKind { answer_pair, full_vocab };

LossKind parse_loss_kind(const std::string& s);

// Cross-entropy of the final head at the last position; gradient is added
// into grad (size parameter_count()).
double loss_and_gradient(const ExitModel& model, std::span<const int> tokens, int answer,
                         std::span<double> grad, LossKind kind = LossKind::answer_pair);
double loss(const ExitModel& model, std::span<const int> tokens, int answer,
            LossKind kind = LossKind::answer_pair);

// Sum over exit heads of each head's cross-entropy. Only head parameters
// receive gradient; the trunk is treated as constant.
double exit_loss_and_gradient(const ExitModel& model, std::span<const int> tokens, int answer,
                              std::span<double> grad, LossKind kind = LossKind::answer_pair);
double exit_loss(const ExitModel& model, std::span<const int> tokens, int answer,
                 LossKind kind = LossKind::answer_pair);

struct TrainingExample {
  std::vector<int> tokens;
  int answer = 0;  // yes or no token id
};

struct OptimizerConfig {
  double learning_rate = 0.01;  // full_tune rate, and lambda0 for head_tune
  double beta = 0.1;            // head learning-rate depth decay
  double momentum = 0.9;
  int epochs = 1;
  std::size_t batch_size = 8;
  double clip_norm = 1.0;  // gradient norm clip, 0 disables
  LossKind loss = LossKind::answer_pair;
  std::uint64_t seed = 0;
};

struct TrainReport {
  Phase phase = Phase::full_tuned;
  std::vector<double> step_losses;
  std::vector<double> head_learning_rates;  // head_tune only, exit-layer order
  double wall_seconds = 0.0;
};

double head_lr(double lambda0, double beta, int depth);

// Throws TrainingDiverged on a non-finite loss.
TrainReport full_tune(ExitModel& model, std::span<const TrainingExample> data,
                      const OptimizerConfig& opt);

// Requires a fully tuned model (PhaseOrder otherwise). Exit-layer hidden
// states are computed once with the frozen trunk and reused every epoch.
TrainReport head_tune(ExitModel& model, std::span<const TrainingExample> data,
                      const OptimizerConfig& opt);

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ExitModel& model, const std::filesystem::path& path);
ExitModel load_checkpoint(const std::filesystem::path& path);

}  // namespace exitrec
