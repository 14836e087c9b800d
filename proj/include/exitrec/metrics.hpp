#pragma once

#include <span>

namespace exitrec {

// exp(s_a) / (exp(s_a) + exp(s_b)), i.e. logistic(s_a - s_b). The two branches
// make f(a, b) == 1 - f(b, a) hold exactly.
double bidimensional_softmax(double s_a, double s_b);

// Mann-Whitney AUC; tied scores across classes count one half.
// Throws UndefinedMetric unless both classes are present.
double auc(std::span<const double> scores, std::span<const int> labels);

}  // namespace exitrec
