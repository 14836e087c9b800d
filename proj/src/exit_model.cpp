#include "exitrec/exit_model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "exitrec/binary_io.hpp"
#include "exitrec/errors.hpp"
#include "exitrec/metrics.hpp"
#include "exitrec/rng.hpp"

namespace exitrec {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

using CMat = Eigen::Map<const Matrix>;
using MMat = Eigen::Map<Matrix>;
using CRow = Eigen::Map<const Eigen::RowVectorXd>;
using MRow = Eigen::Map<Eigen::RowVectorXd>;

void layer_norm(const Matrix& x, const double* gain, const double* bias, Matrix& out,
                Matrix* xhat, Eigen::VectorXd* rstd) {
  const Eigen::Index n = x.rows(), d = x.cols();
  out.resize(n, d);
  if (xhat) xhat->resize(n, d);
  if (rstd) rstd->resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    const double rs = 1.0 / std::sqrt(var + kLnEps);
    for (Eigen::Index c = 0; c < d; ++c) {
      const double xh = (x(r, c) - mean) * rs;
      if (xhat) (*xhat)(r, c) = xh;
      out(r, c) = xh * gain[c] + bias[c];
    }
    if (rstd) (*rstd)(r) = rs;
  }
}

// Accumulates gain/bias gradients and adds the input gradient into dx.
void layer_norm_backward(const Matrix& dout, const Matrix& xhat, const Eigen::VectorXd& rstd,
                         const double* gain, double* dgain, double* dbias, Matrix& dx) {
  const Eigen::Index n = dout.rows(), d = dout.cols();
  Eigen::RowVectorXd dxhat(d);
  for (Eigen::Index r = 0; r < n; ++r) {
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (Eigen::Index c = 0; c < d; ++c) {
      dgain[c] += dout(r, c) * xhat(r, c);
      dbias[c] += dout(r, c);
      dxhat(c) = dout(r, c) * gain[c];
      mean_dxhat += dxhat(c);
      mean_dxhat_xhat += dxhat(c) * xhat(r, c);
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (Eigen::Index c = 0; c < d; ++c) {
      dx(r, c) += rstd(r) * (dxhat(c) - mean_dxhat - xhat(r, c) * mean_dxhat_xhat);
    }
  }
}

double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + kGeluA * u * u * u))); }

double gelu_grad(double u) {
  const double t = std::tanh(kGeluC * (u + kGeluA * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * u * u);
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

void check_answer(const ExitModel& m, int answer, LossKind kind) {
  if (kind == LossKind::answer_pair) {
    if (answer != kYesToken && answer != kNoToken) {
      throw ConfigError("answer token must be the yes or no id, got " + std::to_string(answer));
    }
  } else if (answer < 0 || answer >= m.config().vocab_size) {
    throw ConfigError("answer token " + std::to_string(answer) + " outside the vocabulary");
  }
}

}  // namespace

struct LayerCache {
  Matrix x_in, xhat1, a1, q, k, v, ctx, x_mid, xhat2, a2, u, g;
  Eigen::VectorXd rstd1, rstd2;
  std::vector<Matrix> probs;
};

// Head evaluation, losses and backprop; friend of ExitModel.
struct ModelAccess {
  struct HeadCache {
    std::vector<double> xhat, z;
    double rstd = 0.0;
  };

  static void head_normalize(const ExitModel& m, const ExitModel::HeadOffsets& h,
                             std::span<const double> hidden, HeadCache& c) {
    const std::size_t d = hidden.size();
    const double* p = m.params_.data();
    double mean = 0.0;
    for (double x : hidden) mean += x;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double x : hidden) var += (x - mean) * (x - mean);
    var /= static_cast<double>(d);
    c.rstd = 1.0 / std::sqrt(var + kLnEps);
    c.xhat.resize(d);
    c.z.resize(d);
    for (std::size_t i = 0; i < d; ++i) {
      c.xhat[i] = (hidden[i] - mean) * c.rstd;
      c.z[i] = c.xhat[i] * p[h.ln_g + i] + p[h.ln_b + i];
    }
  }

  static double head_dot(const ExitModel& m, const ExitModel::HeadOffsets& h,
                         const std::vector<double>& z, int token) {
    const std::size_t d = z.size();
    const double* w = m.params_.data() + h.w + static_cast<std::size_t>(token) * d;
    double acc = m.params_[h.b + static_cast<std::size_t>(token)];
    for (std::size_t i = 0; i < d; ++i) acc += w[i] * z[i];
    return acc;
  }

  static std::vector<double> head_logits(const ExitModel& m, const ExitModel::HeadOffsets& h,
                                         std::span<const double> hidden) {
    HeadCache c;
    head_normalize(m, h, hidden, c);
    std::vector<double> logits(static_cast<std::size_t>(m.config_.vocab_size));
    for (int v = 0; v < m.config_.vocab_size; ++v) logits[static_cast<std::size_t>(v)] = head_dot(m, h, c.z, v);
    return logits;
  }

  static double head_logit(const ExitModel& m, const ExitModel::HeadOffsets& h,
                           std::span<const double> hidden, int token) {
    HeadCache c;
    head_normalize(m, h, hidden, c);
    return head_dot(m, h, c.z, token);
  }

  // Loss of one head on one hidden state. Gradients go into grad (indexed like
  // the parameter array); the hidden-state gradient into dhidden if given.
  static double head_loss_and_gradient(const ExitModel& m, const ExitModel::HeadOffsets& h,
                                       std::span<const double> hidden, int answer, LossKind kind,
                                       double* grad, double* dhidden) {
    const std::size_t d = hidden.size();
    const int V = m.config_.vocab_size;
    HeadCache c;
    head_normalize(m, h, hidden, c);

    std::vector<std::pair<int, double>> dlogits;
    double loss = 0.0;
    if (kind == LossKind::answer_pair) {
      const double s = head_dot(m, h, c.z, kYesToken) - head_dot(m, h, c.z, kNoToken);
      const bool yes = answer == kYesToken;
      loss = yes ? softplus(-s) : softplus(s);
      const double p = bidimensional_softmax(s, 0.0);
      const double ds = p - (yes ? 1.0 : 0.0);
      dlogits = {{kYesToken, ds}, {kNoToken, -ds}};
    } else {
      std::vector<double> logits(static_cast<std::size_t>(V));
      for (int v = 0; v < V; ++v) logits[static_cast<std::size_t>(v)] = head_dot(m, h, c.z, v);
      const auto probs = softmax(logits);
      loss = -std::log(std::max(probs[static_cast<std::size_t>(answer)], 1e-300));
      dlogits.reserve(static_cast<std::size_t>(V));
      for (int v = 0; v < V; ++v) {
        dlogits.emplace_back(v, probs[static_cast<std::size_t>(v)] - (v == answer ? 1.0 : 0.0));
      }
    }

    const double* p = m.params_.data();
    std::vector<double> dz(d, 0.0);
    for (const auto& [v, g] : dlogits) {
      const std::size_t row = h.w + static_cast<std::size_t>(v) * d;
      grad[h.b + static_cast<std::size_t>(v)] += g;
      for (std::size_t i = 0; i < d; ++i) {
        grad[row + i] += g * c.z[i];
        dz[i] += g * p[row + i];
      }
    }
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    std::vector<double> dxhat(d);
    for (std::size_t i = 0; i < d; ++i) {
      grad[h.ln_g + i] += dz[i] * c.xhat[i];
      grad[h.ln_b + i] += dz[i];
      dxhat[i] = dz[i] * p[h.ln_g + i];
      mean_dxhat += dxhat[i];
      mean_dxhat_xhat += dxhat[i] * c.xhat[i];
    }
    if (dhidden) {
      mean_dxhat /= static_cast<double>(d);
      mean_dxhat_xhat /= static_cast<double>(d);
      for (std::size_t i = 0; i < d; ++i) {
        dhidden[i] += c.rstd * (dxhat[i] - mean_dxhat - c.xhat[i] * mean_dxhat_xhat);
      }
    }
    return loss;
  }

  static void layer_backward(const ExitModel& m, int l, const LayerCache& c, Matrix& dx,
                             double* grad) {
    const auto& o = m.layers_[static_cast<std::size_t>(l)];
    const int d = m.config_.d_model, ff = m.config_.d_ff, H = m.config_.n_heads;
    const int dh = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const double* p = m.params_.data();
    const Eigen::Index T = dx.rows();

    // MLP branch
    MMat(grad + o.w2, ff, d).noalias() += c.g.transpose() * dx;
    MRow(grad + o.b2, d) += dx.colwise().sum();
    Matrix du = dx * CMat(p + o.w2, ff, d).transpose();
    for (Eigen::Index i = 0; i < du.size(); ++i) du.data()[i] *= gelu_grad(c.u.data()[i]);
    MMat(grad + o.w1, d, ff).noalias() += c.a2.transpose() * du;
    MRow(grad + o.b1, ff) += du.colwise().sum();
    Matrix da2 = du * CMat(p + o.w1, d, ff).transpose();
    Matrix dmid = dx;
    layer_norm_backward(da2, c.xhat2, c.rstd2, p + o.ln2_g, grad + o.ln2_g, grad + o.ln2_b, dmid);

    // attention branch
    MMat(grad + o.wo, d, d).noalias() += c.ctx.transpose() * dmid;
    MRow(grad + o.bo, d) += dmid.colwise().sum();
    Matrix dctx = dmid * CMat(p + o.wo, d, d).transpose();
    Matrix dq(T, d), dk(T, d), dv(T, d);
    for (int h = 0; h < H; ++h) {
      const Matrix& P = c.probs[static_cast<std::size_t>(h)];
      const auto dctx_h = dctx.middleCols(h * dh, dh);
      Matrix dP = dctx_h * c.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh).noalias() = P.transpose() * dctx_h;
      Eigen::VectorXd rowdot = dP.cwiseProduct(P).rowwise().sum();
      Matrix dS = P.cwiseProduct(dP.colwise() - rowdot) * scale;
      dq.middleCols(h * dh, dh).noalias() = dS * c.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh).noalias() = dS.transpose() * c.q.middleCols(h * dh, dh);
    }
    MMat(grad + o.wq, d, d).noalias() += c.a1.transpose() * dq;
    MMat(grad + o.wk, d, d).noalias() += c.a1.transpose() * dk;
    MMat(grad + o.wv, d, d).noalias() += c.a1.transpose() * dv;
    MRow(grad + o.bq, d) += dq.colwise().sum();
    MRow(grad + o.bk, d) += dk.colwise().sum();
    MRow(grad + o.bv, d) += dv.colwise().sum();
    Matrix da1 = dq * CMat(p + o.wq, d, d).transpose();
    da1.noalias() += dk * CMat(p + o.wk, d, d).transpose();
    da1.noalias() += dv * CMat(p + o.wv, d, d).transpose();
    dx = dmid;
    layer_norm_backward(da1, c.xhat1, c.rstd1, p + o.ln1_g, grad + o.ln1_g, grad + o.ln1_b, dx);
  }

  static double loss_and_gradient(const ExitModel& m, std::span<const int> tokens, int answer,
                                  std::span<double> grad, LossKind kind) {
    if (grad.size() != m.params_.size()) throw ConfigError("gradient buffer has the wrong size");
    check_answer(m, answer, kind);
    const int N = m.config_.num_layers, d = m.config_.d_model;
    Matrix x = m.embed(tokens);
    const Eigen::Index T = x.rows();
    std::vector<LayerCache> caches(static_cast<std::size_t>(N));
    for (int l = 0; l < N; ++l) m.layer_forward(l, x, &caches[static_cast<std::size_t>(l)]);

    Matrix dx = Matrix::Zero(T, d);
    const std::span<const double> last(x.data() + (T - 1) * d, static_cast<std::size_t>(d));
    const double loss = head_loss_and_gradient(m, m.final_head_, last, answer, kind, grad.data(),
                                               dx.data() + (T - 1) * d);
    for (int l = N - 1; l >= 0; --l) layer_backward(m, l, caches[static_cast<std::size_t>(l)], dx, grad.data());

    for (Eigen::Index t = 0; t < T; ++t) {
      const auto tok = static_cast<std::size_t>(tokens[static_cast<std::size_t>(t)]);
      MRow(grad.data() + m.tok_emb_ + tok * static_cast<std::size_t>(d), d) += dx.row(t);
      MRow(grad.data() + m.pos_emb_ + static_cast<std::size_t>(t) * static_cast<std::size_t>(d), d) += dx.row(t);
    }
    return loss;
  }

  static double exit_loss_and_gradient(const ExitModel& m, std::span<const int> tokens,
                                       int answer, double* grad, LossKind kind) {
    check_answer(m, answer, kind);
    const auto& L = m.config_.exit_layers;
    double total = 0.0;
    if (L.empty()) return total;
    DepthRunner runner(m, tokens);
    std::size_t next = 0;
    while (next < L.size()) {
      runner.advance();
      if (runner.depth() == L[next]) {
        total += head_loss_and_gradient(m, m.exit_heads_[next], runner.last_hidden(), answer,
                                        kind, grad, nullptr);
        ++next;
      }
    }
    return total;
  }

  static const ExitModel::HeadOffsets& exit_head(const ExitModel& m, std::size_t i) {
    return m.exit_heads_[i];
  }
  static std::vector<double>& params(ExitModel& m) { return m.params_; }
};

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (num_layers < 1) fail("num_layers must be at least 1");
  if (d_model < 1 || n_heads < 1) fail("d_model and n_heads must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (d_ff < 1) fail("d_ff must be positive");
  if (vocab_size <= std::max(kYesToken, kNoToken)) fail("vocab_size too small for the answer ids");
  if (context_limit < 1) fail("context_limit must be positive");
  for (std::size_t i = 0; i < exit_layers.size(); ++i) {
    const int l = exit_layers[i];
    if (l < 1 || l >= num_layers) {
      fail("exit layer " + std::to_string(l) + " outside 1.." + std::to_string(num_layers - 1));
    }
    if (i > 0 && l <= exit_layers[i - 1]) fail("exit layers must be strictly ascending");
  }
}

std::string ModelConfig::to_json_string() const {
  nlohmann::json j = {{"num_layers", num_layers},   {"d_model", d_model},
                      {"n_heads", n_heads},         {"d_ff", d_ff},
                      {"vocab_size", vocab_size},   {"context_limit", context_limit},
                      {"exit_layers", exit_layers}, {"seed", seed}};
  return j.dump(2);
}

ModelConfig ModelConfig::from_json_string(const std::string& text) {
  ModelConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.num_layers = j.value("num_layers", c.num_layers);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.context_limit = j.value("context_limit", c.context_limit);
    c.exit_layers = j.value("exit_layers", c.exit_layers);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
  return c;
}

ModelConfig ModelConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open model config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_string(ss.str());
}

std::string to_string(Phase phase) {
  switch (phase) {
    case Phase::initialized: return "initialized";
    case Phase::full_tuned: return "full_tuned";
    case Phase::head_tuned: return "head_tuned";
  }
  return "unknown";
}

LossKind parse_loss_kind(const std::string& s) {
  if (s == "answer_pair") return LossKind::answer_pair;
  if (s == "full_vocab") return LossKind::full_vocab;
  throw ConfigError("unknown loss kind '" + s + "' (answer_pair|full_vocab)");
}

// ---------------------------------------------------------------- model

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

std::vector<double> early_decode(const ForwardRecord& record, int layer) {
  const auto it = record.logits_by_exit.find(layer);
  if (it == record.logits_by_exit.end()) throw NotAnExitLayer(layer);
  return softmax(it->second);
}

ExitModel::ExitModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto N = static_cast<std::size_t>(config_.num_layers);
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto ff = static_cast<std::size_t>(config_.d_ff);
  const auto V = static_cast<std::size_t>(config_.vocab_size);
  const auto C = static_cast<std::size_t>(config_.context_limit);

  Rng rng(config_.seed);
  auto alloc = [&](std::size_t n) {
    const std::size_t off = params_.size();
    params_.resize(off + n, 0.0);
    return off;
  };
  auto normal = [&](std::size_t n, double sd) {
    const std::size_t off = alloc(n);
    for (std::size_t i = 0; i < n; ++i) params_[off + i] = sd * rng.normal();
    return off;
  };
  auto ones = [&](std::size_t n) {
    const std::size_t off = alloc(n);
    std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(off), n, 1.0);
    return off;
  };
  auto head = [&]() {
    HeadOffsets h{};
    h.ln_g = ones(d);
    h.ln_b = alloc(d);
    h.w = normal(V * d, 0.02);
    h.b = alloc(V);
    return h;
  };

  const double sd_in = 1.0 / std::sqrt(static_cast<double>(d));
  const double sd_ff = 1.0 / std::sqrt(static_cast<double>(ff));
  const double resid = 1.0 / std::sqrt(2.0 * static_cast<double>(N));

  tok_emb_ = normal(V * d, 0.02);
  pos_emb_ = normal(C * d, 0.02);
  layers_.resize(N);
  for (auto& o : layers_) {
    o.ln1_g = ones(d);
    o.ln1_b = alloc(d);
    o.wq = normal(d * d, sd_in);
    o.bq = alloc(d);
    o.wk = normal(d * d, sd_in);
    o.bk = alloc(d);
    o.wv = normal(d * d, sd_in);
    o.bv = alloc(d);
    o.wo = normal(d * d, sd_in * resid);
    o.bo = alloc(d);
    o.ln2_g = ones(d);
    o.ln2_b = alloc(d);
    o.w1 = normal(d * ff, sd_in);
    o.b1 = alloc(ff);
    o.w2 = normal(ff * d, sd_ff * resid);
    o.b2 = alloc(d);
  }
  final_head_ = head();
  trunk_size_ = params_.size();
  for (std::size_t i = 0; i < config_.exit_layers.size(); ++i) exit_heads_.push_back(head());
}

std::span<const double> ExitModel::exit_head_parameters(std::size_t index) const {
  const std::size_t begin = exit_heads_.at(index).ln_g;
  const std::size_t end = index + 1 < exit_heads_.size() ? exit_heads_[index + 1].ln_g : params_.size();
  return {params_.data() + begin, end - begin};
}

bool ExitModel::is_exit_layer(int layer) const {
  return std::binary_search(config_.exit_layers.begin(), config_.exit_layers.end(), layer);
}

std::size_t ExitModel::exit_index(int layer) const {
  const auto& L = config_.exit_layers;
  const auto it = std::lower_bound(L.begin(), L.end(), layer);
  if (it == L.end() || *it != layer) throw NotAnExitLayer(layer);
  return static_cast<std::size_t>(it - L.begin());
}

void ExitModel::check_tokens(std::span<const int> tokens) const {
  if (tokens.empty()) throw ConfigError("empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(config_.context_limit)) {
    throw ContextOverflow(std::to_string(tokens.size()) + " tokens exceed the context limit of " +
                          std::to_string(config_.context_limit));
  }
  for (int t : tokens) {
    if (t < 0 || t >= config_.vocab_size) {
      throw ConfigError("token id " + std::to_string(t) + " outside the vocabulary");
    }
  }
}

Matrix ExitModel::embed(std::span<const int> tokens) const {
  check_tokens(tokens);
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto T = static_cast<Eigen::Index>(tokens.size());
  Matrix x(T, config_.d_model);
  for (Eigen::Index t = 0; t < T; ++t) {
    const double* te = params_.data() + tok_emb_ + static_cast<std::size_t>(tokens[static_cast<std::size_t>(t)]) * d;
    const double* pe = params_.data() + pos_emb_ + static_cast<std::size_t>(t) * d;
    for (std::size_t c = 0; c < d; ++c) x(t, static_cast<Eigen::Index>(c)) = te[c] + pe[c];
  }
  return x;
}

void ExitModel::layer_forward(int layer, Matrix& x, LayerCache* cache) const {
  const auto& o = layers_[static_cast<std::size_t>(layer)];
  const int d = config_.d_model, ff = config_.d_ff, H = config_.n_heads;
  const int dh = d / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* p = params_.data();
  const Eigen::Index T = x.rows();

  LayerCache local;
  LayerCache& c = cache ? *cache : local;
  if (cache) c.x_in = x;

  layer_norm(x, p + o.ln1_g, p + o.ln1_b, c.a1, cache ? &c.xhat1 : nullptr,
             cache ? &c.rstd1 : nullptr);
  c.q.noalias() = c.a1 * CMat(p + o.wq, d, d);
  c.q.rowwise() += CRow(p + o.bq, d);
  c.k.noalias() = c.a1 * CMat(p + o.wk, d, d);
  c.k.rowwise() += CRow(p + o.bk, d);
  c.v.noalias() = c.a1 * CMat(p + o.wv, d, d);
  c.v.rowwise() += CRow(p + o.bv, d);

  c.ctx.resize(T, d);
  if (cache) c.probs.resize(static_cast<std::size_t>(H));
  Matrix P;
  for (int h = 0; h < H; ++h) {
    P.noalias() = c.q.middleCols(h * dh, dh) * c.k.middleCols(h * dh, dh).transpose();
    for (Eigen::Index i = 0; i < T; ++i) {
      double mx = -INFINITY;
      for (Eigen::Index j = 0; j <= i; ++j) {
        P(i, j) *= scale;
        mx = std::max(mx, P(i, j));
      }
      double sum = 0.0;
      for (Eigen::Index j = 0; j <= i; ++j) {
        P(i, j) = std::exp(P(i, j) - mx);
        sum += P(i, j);
      }
      for (Eigen::Index j = 0; j <= i; ++j) P(i, j) /= sum;
      for (Eigen::Index j = i + 1; j < T; ++j) P(i, j) = 0.0;
    }
    c.ctx.middleCols(h * dh, dh).noalias() = P * c.v.middleCols(h * dh, dh);
    if (cache) c.probs[static_cast<std::size_t>(h)] = P;
  }
  x.noalias() += c.ctx * CMat(p + o.wo, d, d);
  x.rowwise() += CRow(p + o.bo, d);
  if (cache) c.x_mid = x;

  layer_norm(x, p + o.ln2_g, p + o.ln2_b, c.a2, cache ? &c.xhat2 : nullptr,
             cache ? &c.rstd2 : nullptr);
  c.u.noalias() = c.a2 * CMat(p + o.w1, d, ff);
  c.u.rowwise() += CRow(p + o.b1, ff);
  c.g.resize(T, ff);
  for (Eigen::Index i = 0; i < c.u.size(); ++i) c.g.data()[i] = gelu(c.u.data()[i]);
  x.noalias() += c.g * CMat(p + o.w2, ff, d);
  x.rowwise() += CRow(p + o.b2, d);
}

ForwardRecord ExitModel::forward(std::span<const int> tokens) const {
  ForwardRecord rec;
  DepthRunner runner(*this, tokens);
  auto snapshot = [&] {
    const auto h = runner.last_hidden();
    rec.hidden.emplace_back(h.begin(), h.end());
  };
  snapshot();
  for (int j = 1; j <= config_.num_layers; ++j) {
    runner.advance();
    snapshot();
    if (is_exit_layer(j)) rec.logits_by_exit[j] = exit_logits(exit_index(j), rec.hidden.back());
  }
  rec.final_logits = final_logits(rec.hidden.back());
  return rec;
}

std::vector<double> ExitModel::final_logits(std::span<const double> hidden) const {
  return ModelAccess::head_logits(*this, final_head_, hidden);
}

std::vector<double> ExitModel::exit_logits(std::size_t index, std::span<const double> hidden) const {
  return ModelAccess::head_logits(*this, exit_heads_.at(index), hidden);
}

double ExitModel::final_logit(std::span<const double> hidden, int token) const {
  return ModelAccess::head_logit(*this, final_head_, hidden, token);
}

double ExitModel::exit_logit(std::size_t index, std::span<const double> hidden, int token) const {
  return ModelAccess::head_logit(*this, exit_heads_.at(index), hidden, token);
}

double ExitModel::predict_yes(std::span<const int> tokens) const {
  DepthRunner runner(*this, tokens);
  while (runner.depth() < config_.num_layers) runner.advance();
  const auto h = runner.last_hidden();
  return bidimensional_softmax(final_logit(h, kYesToken), final_logit(h, kNoToken));
}

std::uint64_t fnv1a(std::span<const double> values) {
  std::uint64_t hash = 14695981039346656037ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
  for (std::size_t i = 0; i < values.size_bytes(); ++i) {
    hash ^= bytes[i];
    hash *= 1099511628211ULL;
  }
  return hash;
}

std::uint64_t ExitModel::trunk_checksum() const { return fnv1a(trunk_parameters()); }

DepthRunner::DepthRunner(const ExitModel& model, std::span<const int> tokens)
    : model_(model), x_(model.embed(tokens)) {}

void DepthRunner::advance() {
  if (depth_ >= model_.config_.num_layers) throw ConfigError("depth runner is already at full depth");
  model_.layer_forward(depth_, x_, nullptr);
  ++depth_;
}

std::span<const double> DepthRunner::last_hidden() const {
  const auto d = static_cast<std::size_t>(x_.cols());
  return {x_.data() + static_cast<std::size_t>(x_.rows() - 1) * d, d};
}

// ---------------------------------------------------------------- losses

double loss_and_gradient(const ExitModel& model, std::span<const int> tokens, int answer,
                         std::span<double> grad, LossKind kind) {
  return ModelAccess::loss_and_gradient(model, tokens, answer, grad, kind);
}

double loss(const ExitModel& model, std::span<const int> tokens, int answer, LossKind kind) {
  check_answer(model, answer, kind);
  DepthRunner runner(model, tokens);
  while (runner.depth() < model.config().num_layers) runner.advance();
  const auto h = runner.last_hidden();
  if (kind == LossKind::answer_pair) {
    const double s = model.final_logit(h, kYesToken) - model.final_logit(h, kNoToken);
    return answer == kYesToken ? softplus(-s) : softplus(s);
  }
  const auto probs = softmax(model.final_logits(h));
  return -std::log(std::max(probs[static_cast<std::size_t>(answer)], 1e-300));
}

double exit_loss_and_gradient(const ExitModel& model, std::span<const int> tokens, int answer,
                              std::span<double> grad, LossKind kind) {
  if (grad.size() != model.parameter_count()) throw ConfigError("gradient buffer has the wrong size");
  return ModelAccess::exit_loss_and_gradient(model, tokens, answer, grad.data(), kind);
}

double exit_loss(const ExitModel& model, std::span<const int> tokens, int answer, LossKind kind) {
  std::vector<double> scratch(model.parameter_count(), 0.0);
  return ModelAccess::exit_loss_and_gradient(model, tokens, answer, scratch.data(), kind);
}

// ---------------------------------------------------------------- training

double head_lr(double lambda0, double beta, int depth) {
  if (!(lambda0 > 0)) throw ConfigError("lambda0 must be positive");
  if (!(beta >= 0)) throw ConfigError("beta must be non-negative");
  return lambda0 * std::exp(-beta * static_cast<double>(depth));
}

namespace {

void validate_optimizer(const OptimizerConfig& opt) {
  if (!(opt.learning_rate > 0)) throw ConfigError("learning rate must be positive");
  if (!(opt.momentum >= 0 && opt.momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
  if (opt.epochs < 0) throw ConfigError("epochs must be non-negative");
  if (opt.batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (!(opt.clip_norm >= 0)) throw ConfigError("clip norm must be non-negative");
}

void clip(double* g, std::size_t n, double max_norm) {
  if (max_norm <= 0) return;
  double sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) sq += g[i] * g[i];
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (std::size_t i = 0; i < n; ++i) g[i] *= s;
  }
}

void diverged(const char* phase, int epoch, std::size_t step, double value) {
  std::ostringstream os;
  os << phase << ": non-finite loss " << value << " at epoch " << epoch << ", step " << step;
  throw TrainingDiverged(os.str());
}

}  // namespace

TrainReport full_tune(ExitModel& model, std::span<const TrainingExample> data,
                      const OptimizerConfig& opt) {
  validate_optimizer(opt);
  if (data.empty()) throw DataError("full_tune: no training examples");
  const auto start = std::chrono::steady_clock::now();
  TrainReport report;
  report.phase = Phase::full_tuned;

  auto& params = ModelAccess::params(model);
  const std::size_t trunk = model.trunk_parameter_count();
  std::vector<double> grad(params.size()), velocity(trunk, 0.0);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(opt.seed);

  std::size_t step = 0;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t b = 0; b < order.size(); b += opt.batch_size) {
      const std::size_t e = std::min(order.size(), b + opt.batch_size);
      std::fill(grad.begin(), grad.end(), 0.0);
      double total = 0.0;
      for (std::size_t i = b; i < e; ++i) {
        const auto& ex = data[order[i]];
        total += loss_and_gradient(model, ex.tokens, ex.answer, grad, opt.loss);
      }
      const double n = static_cast<double>(e - b);
      const double mean = total / n;
      if (!std::isfinite(mean)) diverged("full_tune", epoch, step, mean);
      for (std::size_t i = 0; i < trunk; ++i) grad[i] /= n;
      clip(grad.data(), trunk, opt.clip_norm);
      for (std::size_t i = 0; i < trunk; ++i) {
        velocity[i] = opt.momentum * velocity[i] + grad[i];
        params[i] -= opt.learning_rate * velocity[i];
      }
      report.step_losses.push_back(mean);
      ++step;
    }
  }
  model.set_phase(Phase::full_tuned);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

TrainReport head_tune(ExitModel& model, std::span<const TrainingExample> data,
                      const OptimizerConfig& opt) {
  if (model.phase() == Phase::initialized) {
    throw PhaseOrder("head_tune requires a fully tuned model (phase is initialized)");
  }
  validate_optimizer(opt);
  if (data.empty()) throw DataError("head_tune: no training examples");
  const auto start = std::chrono::steady_clock::now();
  const auto& L = model.exit_layers();
  TrainReport report;
  report.phase = Phase::head_tuned;
  for (int l : L) report.head_learning_rates.push_back(head_lr(opt.learning_rate, opt.beta, l));
  if (L.empty()) {
    model.set_phase(Phase::head_tuned);
    return report;
  }

  // Frozen trunk: hidden states at each exit layer never change.
  const std::size_t H = L.size();
  std::vector<std::vector<std::vector<double>>> features(data.size());
  for (std::size_t n = 0; n < data.size(); ++n) {
    DepthRunner runner(model, data[n].tokens);
    std::size_t next = 0;
    while (next < H) {
      runner.advance();
      if (runner.depth() == L[next]) {
        const auto h = runner.last_hidden();
        features[n].emplace_back(h.begin(), h.end());
        ++next;
      }
    }
  }

  auto& params = ModelAccess::params(model);
  std::vector<double> grad(params.size(), 0.0), velocity(params.size(), 0.0);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(opt.seed);

  std::size_t step = 0;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t b = 0; b < order.size(); b += opt.batch_size) {
      const std::size_t e = std::min(order.size(), b + opt.batch_size);
      const double n = static_cast<double>(e - b);
      double step_loss = 0.0;
      for (std::size_t h = 0; h < H; ++h) {
        const auto span = model.exit_head_parameters(h);
        const std::size_t begin = static_cast<std::size_t>(span.data() - params.data());
        std::fill_n(grad.begin() + static_cast<std::ptrdiff_t>(begin), span.size(), 0.0);
        double total = 0.0;
        for (std::size_t i = b; i < e; ++i) {
          total += ModelAccess::head_loss_and_gradient(model, ModelAccess::exit_head(model, h),
                                                       features[order[i]][h], data[order[i]].answer,
                                                       opt.loss, grad.data(), nullptr);
        }
        step_loss += total / n;
        double* g = grad.data() + begin;
        for (std::size_t i = 0; i < span.size(); ++i) g[i] /= n;
        clip(g, span.size(), opt.clip_norm);
        const double lr = report.head_learning_rates[h];
        for (std::size_t i = 0; i < span.size(); ++i) {
          velocity[begin + i] = opt.momentum * velocity[begin + i] + g[i];
          params[begin + i] -= lr * velocity[begin + i];
        }
      }
      if (!std::isfinite(step_loss)) diverged("head_tune", epoch, step, step_loss);
      report.step_losses.push_back(step_loss);
      ++step;
    }
  }
  model.set_phase(Phase::head_tuned);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

// ---------------------------------------------------------------- checkpoint

void save_checkpoint(const ExitModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  const auto& c = model.config();
  out.write("EXRM", 4);
  binio::write_pod<std::uint32_t>(out, kCheckpointVersion);
  for (int v : {c.num_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.context_limit}) {
    binio::write_pod<std::int32_t>(out, v);
  }
  binio::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(c.exit_layers.size()));
  for (int l : c.exit_layers) binio::write_pod<std::int32_t>(out, l);
  binio::write_pod<std::uint64_t>(out, c.seed);
  binio::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(model.phase()));
  binio::write_pod<std::uint64_t>(out, model.parameter_count());
  binio::write_doubles(out, model.parameters());
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

ExitModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  try {
    binio::expect_magic(in, "EXRM", "checkpoint");
    const auto version = binio::read_pod<std::uint32_t>(in, "checkpoint version");
    if (version != kCheckpointVersion) {
      throw CheckpointError("checkpoint version " + std::to_string(version) +
                            " is not supported (this build reads version " +
                            std::to_string(kCheckpointVersion) + ")");
    }
    ModelConfig c;
    for (int* f : {&c.num_layers, &c.d_model, &c.n_heads, &c.d_ff, &c.vocab_size, &c.context_limit}) {
      *f = binio::read_pod<std::int32_t>(in, "checkpoint config");
    }
    const auto nl = binio::read_pod<std::uint32_t>(in, "checkpoint exit layers");
    if (nl > 4096) throw CheckpointError("implausible exit layer count in checkpoint");
    c.exit_layers.resize(nl);
    for (auto& l : c.exit_layers) l = binio::read_pod<std::int32_t>(in, "checkpoint exit layers");
    c.seed = binio::read_pod<std::uint64_t>(in, "checkpoint seed");
    const auto phase = binio::read_pod<std::uint8_t>(in, "checkpoint phase");
    if (phase > static_cast<std::uint8_t>(Phase::head_tuned)) throw CheckpointError("bad phase in checkpoint");
    const auto count = binio::read_pod<std::uint64_t>(in, "checkpoint parameter count");
    try {
      c.validate();
    } catch (const ConfigError& e) {
      throw CheckpointError(std::string("checkpoint holds an invalid config: ") + e.what());
    }
    ExitModel model(c);
    if (count != model.parameter_count()) {
      throw CheckpointError("checkpoint parameter count " + std::to_string(count) +
                            " does not match its config (" + std::to_string(model.parameter_count()) + ")");
    }
    binio::read_doubles(in, model.parameters(), "checkpoint parameters");
    if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes after checkpoint data");
    model.set_phase(static_cast<Phase>(phase));
    return model;
  } catch (const CheckpointError&) {
    throw;
  } catch (const DataError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace exitrec
