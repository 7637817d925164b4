#pragma once

#include <vector>

#include "matekd/autograd.hpp"

namespace matekd {

// Decoupled weight decay Adam with the usual framework defaults.
struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

class AdamW {
 public:
  AdamW(std::vector<ag::Var> params, AdamWOptions options = {});

  // Parameters without an accumulated gradient are left untouched.
  void step(double lr);
  void zero_grad();
  long steps() const { return t_; }

 private:
  std::vector<ag::Var> params_;
  std::vector<ag::Matrix> m_;
  std::vector<ag::Matrix> v_;
  AdamWOptions options_;
  long t_ = 0;
};

}  // namespace matekd
