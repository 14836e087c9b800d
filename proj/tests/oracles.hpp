#pragma once

// Independent reference implementations used by the unit and acceptance
// tests. Written the slow, obvious way on purpose; nothing here calls into
// the code under test except for reading inputs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "exitrec/exit_policy.hpp"
#include "exitrec/graph_retriever.hpp"

namespace oracle {

using Dense = std::vector<std::vector<double>>;

// Layers 0..K of propagation as powers of the dense normalised adjacency.
// Node order: users by graph index, then items. Degree-0 nodes get a 1 on the
// diagonal so they carry their embedding forward.
inline std::vector<Dense> dense_propagation(const exitrec::InteractionGraph& g,
                                            const std::vector<exitrec::GraphEdge>& edges,
                                            const Dense& layer0, std::size_t K) {
  const std::size_t n = g.num_nodes();
  Dense a(n, std::vector<double>(n, 0.0));
  for (const auto& e : edges) {
    const std::size_t u = *g.user_index(e.user_id);
    const std::size_t i = g.num_users() + *g.item_index(e.item_id);
    a[u][i] = a[i][u] = 1.0;  // duplicates collapse
  }
  std::vector<double> deg(n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) deg[r] += a[r][c];
  }
  Dense norm(n, std::vector<double>(n, 0.0));
  for (std::size_t r = 0; r < n; ++r) {
    if (deg[r] == 0.0) {
      norm[r][r] = 1.0;
      continue;
    }
    for (std::size_t c = 0; c < n; ++c) {
      if (a[r][c] != 0.0) norm[r][c] = 1.0 / std::sqrt(deg[r] * deg[c]);
    }
  }
  std::vector<Dense> out{layer0};
  const std::size_t d = layer0.empty() ? 0 : layer0[0].size();
  for (std::size_t k = 1; k <= K; ++k) {
    Dense next(n, std::vector<double>(d, 0.0));
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        if (norm[r][c] == 0.0) continue;
        for (std::size_t j = 0; j < d; ++j) next[r][j] += norm[r][c] * out.back()[c][j];
      }
    }
    out.push_back(std::move(next));
  }
  return out;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Full scan, stable sort on (-similarity, index).
inline std::vector<std::pair<std::size_t, double>> topk(const Dense& users, std::size_t query,
                                                        std::size_t k) {
  std::vector<std::pair<std::size_t, double>> all;
  for (std::size_t v = 0; v < users.size(); ++v) {
    if (v != query) all.emplace_back(v, cosine(users[query], users[v]));
  }
  std::stable_sort(all.begin(), all.end(),
                   [](const auto& x, const auto& y) { return x.second > y.second; });
  all.resize(std::min(k, all.size()));
  return all;
}

// Concordant pairs over all (positive, negative) pairs, ties count half.
inline double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  long long twice = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      ++pairs;
      twice += s[i] > s[j] ? 2 : s[i] == s[j] ? 1 : 0;
    }
  }
  return static_cast<double>(twice) / (2.0 * static_cast<double>(pairs));
}

inline double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct Decision {
  int exit_layer;  // -1 = full depth
  double p;
  int layers;
};

// The exit rule written out directly: at the visited layer with index v
// (0-based), the discrepancy is |p_v - p_{v-1}|; it may exit once at least m
// earlier discrepancies exist and |D - mean(last m earlier D)| < tau.
inline Decision replay(const exitrec::LayerTrace& t, const exitrec::ExitPolicy& pol) {
  std::vector<std::pair<int, double>> visited;
  for (const auto& e : t.entries) {
    if (pol.exit_layers.empty() ||
        std::find(pol.exit_layers.begin(), pol.exit_layers.end(), e.first) != pol.exit_layers.end()) {
      visited.push_back(e);
    }
  }
  int last = visited.empty() ? -1 : visited.back().first;
  if (!pol.exit_layers.empty()) last = *std::max_element(pol.exit_layers.begin(), pol.exit_layers.end());
  std::vector<double> ds;
  for (std::size_t v = 0; v < visited.size(); ++v) {
    const auto [layer, p] = visited[v];
    if (v >= 1) {
      const double D = std::fabs(p - visited[v - 1].second);
      const std::size_t m = static_cast<std::size_t>(pol.window);
      if (ds.size() >= m) {
        double sum = 0;
        for (std::size_t i = ds.size() - m; i < ds.size(); ++i) sum += ds[i];
        if (std::fabs(D - sum / static_cast<double>(m)) < pol.tau) return {layer, p, layer};
      }
      ds.push_back(D);
    }
    if (pol.force_exit_at_last && layer == last) return {layer, p, layer};
  }
  return {-1, t.final_p_yes.value_or(-1.0), t.num_layers};
}

// Central differences of f around x[i].
inline double central_difference(const std::function<double()>& f, double& x, double eps) {
  const double saved = x;
  x = saved + eps;
  const double up = f();
  x = saved - eps;
  const double down = f();
  x = saved;
  return (up - down) / (2 * eps);
}

inline double relative_error(double a, double n) {
  return std::fabs(a - n) / std::max({std::fabs(a), std::fabs(n), 1e-6});
}

}  // namespace oracle
