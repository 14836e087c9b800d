#include "exitrec/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "exitrec/errors.hpp"

namespace exitrec {

double bidimensional_softmax(double s_a, double s_b) {
  const double d = s_a - s_b;
  if (d >= 0) return 1.0 / (1.0 + std::exp(-d));
  return 1.0 - 1.0 / (1.0 + std::exp(d));
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw ConfigError("auc: " + std::to_string(scores.size()) + " scores but " +
                      std::to_string(labels.size()) + " labels");
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw DataError("auc: non-finite score");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Sweep tie groups in ascending score order. Counts are integers; the
  // half-credit is kept doubled so the sum stays exact.
  unsigned long long negatives_below = 0, positives = 0, negatives = 0;
  unsigned long long doubled = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    unsigned long long pos = 0, neg = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      const int y = labels[order[j]];
      if (y != 0 && y != 1) throw DataError("auc: label must be 0 or 1");
      (y == 1 ? pos : neg) += 1;
      ++j;
    }
    doubled += pos * (2 * negatives_below + neg);
    negatives_below += neg;
    positives += pos;
    negatives += neg;
    i = j;
  }
  if (positives == 0 || negatives == 0) {
    throw UndefinedMetric("auc undefined: " + std::to_string(positives) + " positives, " +
                          std::to_string(negatives) + " negatives");
  }
  return static_cast<double>(doubled) / (2.0 * static_cast<double>(positives) *
                                         static_cast<double>(negatives));
}

}  // namespace exitrec
