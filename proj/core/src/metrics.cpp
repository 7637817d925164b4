#include "matekd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "matekd/error.hpp"

namespace matekd {

namespace {

double accuracy(std::span<const double> p, std::span<const double> r) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < p.size(); ++i) hit += p[i] == r[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(p.size());
}

double f1(std::span<const double> p, std::span<const double> r) {
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool pp = p[i] == 1.0;
    const bool rp = r[i] == 1.0;
    tp += pp && rp;
    fp += pp && !rp;
    fn += !pp && rp;
  }
  const double denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2 * tp / denom;
}

// Gorodkin's R_K; equals the usual phi coefficient for two classes.
double matthews(std::span<const double> p, std::span<const double> r) {
  std::map<double, std::size_t> classes;
  for (double v : p) classes.emplace(v, 0);
  for (double v : r) classes.emplace(v, 0);
  std::size_t k = 0;
  for (auto& [_, idx] : classes) idx = k++;
  std::vector<double> conf(k * k, 0.0);  // conf[true * k + pred]
  for (std::size_t i = 0; i < p.size(); ++i) conf[classes[r[i]] * k + classes[p[i]]] += 1.0;
  std::vector<double> t(k, 0.0), pr(k, 0.0);
  double c = 0, s = static_cast<double>(p.size());
  for (std::size_t a = 0; a < k; ++a) {
    c += conf[a * k + a];
    for (std::size_t b = 0; b < k; ++b) {
      t[a] += conf[a * k + b];
      pr[b] += conf[a * k + b];
    }
  }
  double tp_sum = 0, pp = 0, tt = 0;
  for (std::size_t a = 0; a < k; ++a) {
    tp_sum += t[a] * pr[a];
    pp += pr[a] * pr[a];
    tt += t[a] * t[a];
  }
  const double denom = std::sqrt((s * s - pp) * (s * s - tt));
  return denom == 0 ? 0.0 : (c * s - tp_sum) / denom;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  const double denom = std::sqrt(sxx * syy);
  return denom == 0 ? 0.0 : std::clamp(sxy / denom, -1.0, 1.0);
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t q = i; q <= j; ++q) ranks[order[q]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

bool is_known_metric(std::string_view name) {
  return name == "accuracy" || name == "f1" || name == "matthews" || name == "pearson" ||
         name == "spearman";
}

std::pair<double, double> metric_range(std::string_view name) {
  if (!is_known_metric(name)) throw Error("unknown metric: " + std::string(name));
  if (name == "accuracy" || name == "f1") return {0.0, 1.0};
  return {-1.0, 1.0};
}

double compute_metric(std::string_view name, std::span<const double> predictions,
                      std::span<const double> references) {
  if (!is_known_metric(name)) throw Error("unknown metric: " + std::string(name));
  if (predictions.size() != references.size())
    throw Error("prediction/reference length mismatch: " + std::to_string(predictions.size()) + " vs " +
                std::to_string(references.size()));
  if (predictions.empty()) throw Error("metric needs at least one prediction");
  if (name == "accuracy") return accuracy(predictions, references);
  if (name == "f1") return f1(predictions, references);
  if (name == "matthews") return matthews(predictions, references);
  if (name == "pearson") return pearson(predictions, references);
  auto rp = average_ranks(predictions);
  auto rr = average_ranks(references);
  return pearson(rp, rr);
}

double compute_metric(std::string_view name, std::span<const int> predictions,
                      std::span<const int> references) {
  std::vector<double> p(predictions.begin(), predictions.end());
  std::vector<double> r(references.begin(), references.end());
  return compute_metric(name, p, r);
}

}  // namespace matekd
