#pragma once

#include <span>

#include "matekd/autograd.hpp"

namespace matekd {

struct LossConfig {
  // KD softening temperature.
  double temperature = 2.0;
  // CE/KD interpolation for the plain KD baseline only.
  double lambda = 0.5;
  // Apply `temperature` to the adversarial term as well (default: T = 1).
  bool adv_uses_temperature = false;

  void validate() const;
};

// ---- scalar forms on single logit vectors ----

// KL(softmax(p) || softmax(q)), evaluated in log space.
double kl_div(std::span<const double> p_logits, std::span<const double> q_logits);
double ce_loss(std::span<const double> logits, int label);
// T^2 * KL(softmax(t / T) || softmax(s / T)).
double kd_loss(std::span<const double> teacher_logits, std::span<const double> student_logits,
               double temperature);
double kd_baseline_loss(double ce, double kd, double lambda);
double adv_loss(std::span<const double> teacher_logits, std::span<const double> student_logits);
double mate_kd_loss(double ce, double kd, double adv);
double generator_objective(std::span<const double> teacher_logits,
                           std::span<const double> student_logits);

// ---- differentiable batch forms (mean over rows) ----
// Teacher logits are plain matrices: they never take part in differentiation.

ag::Var ce_loss(const ag::Var& logits, std::span<const int> labels);
ag::Var kd_loss(const ag::Matrix& teacher_logits, const ag::Var& student_logits, double temperature);
ag::Var kl_div(const ag::Matrix& teacher_logits, const ag::Var& student_logits);
ag::Var adv_loss(const ag::Matrix& teacher_logits, const ag::Var& student_logits,
                 const LossConfig& config = {});
ag::Var kd_baseline_loss(const ag::Var& ce, const ag::Var& kd, double lambda);
// (ce + kd + adv) / 3. Throws on a non-finite term.
ag::Var mate_kd_loss(const ag::Var& ce, const ag::Var& kd, const ag::Var& adv);
// Value to MAXIMIZE: KL(teacher || student) on pseudo samples. The generator
// is trained by minimizing the negation (see trainer).
ag::Var generator_objective(const ag::Matrix& teacher_logits, const ag::Var& student_logits);

}  // namespace matekd
