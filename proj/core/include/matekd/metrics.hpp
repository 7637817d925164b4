#pragma once

#include <span>
#include <string_view>
#include <utility>

namespace matekd {

// accuracy, f1 (positive class 1), matthews (multi-class form), pearson,
// spearman (average ranks for ties). Matthews and the correlations return 0
// when a denominator vanishes.
double compute_metric(std::string_view name, std::span<const double> predictions,
                      std::span<const double> references);
double compute_metric(std::string_view name, std::span<const int> predictions,
                      std::span<const int> references);

bool is_known_metric(std::string_view name);
// Closed interval of valid values.
std::pair<double, double> metric_range(std::string_view name);

}  // namespace matekd
