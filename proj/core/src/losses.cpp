#include "matekd/losses.hpp"

#include <cmath>
#include <string>

#include "matekd/error.hpp"

namespace matekd {

using ag::Matrix;
using ag::Var;

void LossConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("KD temperature must be > 0");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must be in [0, 1]");
}

namespace {

Matrix row_of(std::span<const double> v) {
  Matrix m(1, static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = v[i];
  return m;
}

void check_pair(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size())
    throw Error("logit length mismatch: " + std::to_string(p.size()) + " vs " + std::to_string(q.size()));
  if (p.empty()) throw Error("empty logit vector");
}

void check_pair(const Matrix& p, const Var& q) {
  if (p.rows() != q.rows() || p.cols() != q.cols()) throw Error("logit shape mismatch");
  if (p.rows() == 0) throw Error("empty logit batch");
}

// Row-wise KL(softmax(p) || softmax(q)) and its gradient w.r.t. q.
double kl_rows(const Matrix& p_logits, const Matrix& q_logits, Matrix* grad_q) {
  Matrix lp = ag::log_softmax_rows(p_logits);
  Matrix lq = ag::log_softmax_rows(q_logits);
  Matrix pp = lp.array().exp();
  double total = (pp.array() * (lp - lq).array()).sum();
  if (grad_q != nullptr) *grad_q = lq.array().exp() - pp.array();
  return total;
}

}  // namespace

double kl_div(std::span<const double> p_logits, std::span<const double> q_logits) {
  check_pair(p_logits, q_logits);
  return std::max(0.0, kl_rows(row_of(p_logits), row_of(q_logits), nullptr));
}

double ce_loss(std::span<const double> logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size())
    throw Error("label " + std::to_string(label) + " out of range for " + std::to_string(logits.size()) +
                " classes");
  return -ag::log_softmax_rows(row_of(logits))(0, label);
}

double kd_loss(std::span<const double> teacher_logits, std::span<const double> student_logits,
               double temperature) {
  if (!(temperature > 0.0)) throw Error("temperature must be > 0");
  check_pair(teacher_logits, student_logits);
  Matrix t = row_of(teacher_logits) / temperature;
  Matrix s = row_of(student_logits) / temperature;
  return temperature * temperature * std::max(0.0, kl_rows(t, s, nullptr));
}

double kd_baseline_loss(double ce, double kd, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw Error("lambda must be in [0, 1]");
  return (1.0 - lambda) * ce + lambda * kd;
}

double adv_loss(std::span<const double> teacher_logits, std::span<const double> student_logits) {
  return kl_div(teacher_logits, student_logits);
}

double mate_kd_loss(double ce, double kd, double adv) {
  if (!std::isfinite(ce) || !std::isfinite(kd) || !std::isfinite(adv))
    throw Error("non-finite loss term");
  return (ce + kd + adv) / 3.0;
}

double generator_objective(std::span<const double> teacher_logits,
                           std::span<const double> student_logits) {
  return kl_div(teacher_logits, student_logits);
}

Var ce_loss(const Var& logits, std::span<const int> labels) {
  const Eigen::Index n = logits.rows();
  if (static_cast<std::size_t>(n) != labels.size()) throw Error("ce_loss: label count mismatch");
  if (n == 0) throw Error("ce_loss: empty batch");
  Matrix logp = ag::log_softmax_rows(logits.value());
  double total = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= logits.cols()) throw Error("label " + std::to_string(y) + " out of range");
    total -= logp(r, y);
  }
  std::vector<int> ys(labels.begin(), labels.end());
  Matrix value(1, 1);
  value(0, 0) = total / static_cast<double>(n);
  return ag::make_result(std::move(value), {logits}, [logp = std::move(logp), ys = std::move(ys)](ag::Node& self) {
    Matrix g = logp.array().exp();
    for (std::size_t r = 0; r < ys.size(); ++r) g(static_cast<Eigen::Index>(r), ys[r]) -= 1.0;
    g *= self.grad(0, 0) / static_cast<double>(ys.size());
    self.parents[0]->accumulate(g);
  });
}

Var kd_loss(const Matrix& teacher_logits, const Var& student_logits, double temperature) {
  if (!(temperature > 0.0)) throw Error("temperature must be > 0");
  check_pair(teacher_logits, student_logits);
  const double t = temperature;
  Matrix grad_q;
  double kl = kl_rows(teacher_logits / t, student_logits.value() / t, &grad_q);
  const auto n = static_cast<double>(teacher_logits.rows());
  Matrix value(1, 1);
  value(0, 0) = std::max(0.0, t * t * kl / n);
  // d/ds [T^2 KL(p || softmax(s / T))] = T (softmax(s / T) - p)
  return ag::make_result(std::move(value), {student_logits}, [grad_q = std::move(grad_q), t, n](ag::Node& self) {
    self.parents[0]->accumulate(grad_q * (t * self.grad(0, 0) / n));
  });
}

Var kl_div(const Matrix& teacher_logits, const Var& student_logits) {
  return kd_loss(teacher_logits, student_logits, 1.0);
}

Var adv_loss(const Matrix& teacher_logits, const Var& student_logits, const LossConfig& config) {
  return config.adv_uses_temperature ? kd_loss(teacher_logits, student_logits, config.temperature)
                                     : kl_div(teacher_logits, student_logits);
}

Var kd_baseline_loss(const Var& ce, const Var& kd, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw Error("lambda must be in [0, 1]");
  return ag::add(ag::scale(ce, 1.0 - lambda), ag::scale(kd, lambda));
}

Var mate_kd_loss(const Var& ce, const Var& kd, const Var& adv) {
  if (!std::isfinite(ce.item()) || !std::isfinite(kd.item()) || !std::isfinite(adv.item()))
    throw Error("non-finite loss term");
  return ag::scale(ag::add(ag::add(ce, kd), adv), 1.0 / 3.0);
}

Var generator_objective(const Matrix& teacher_logits, const Var& student_logits) {
  return kl_div(teacher_logits, student_logits);
}

}  // namespace matekd
