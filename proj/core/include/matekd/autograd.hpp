#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// double matrices. Every value is 2-D; scalars are 1x1.

#include <Eigen/Dense>

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

#include "matekd/rng.hpp"

namespace matekd::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Node {
  Matrix value;
  Matrix grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g);
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);

  const Matrix& value() const { return node_->value; }
  // Direct write access; only optimizers and checkpoint loading use this.
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.resize(0, 0); }

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const;
  bool defined() const { return static_cast<bool>(node_); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Runs reverse accumulation from a 1x1 value.
void backward(const Var& loss);

bool grad_enabled();

// Disables graph construction on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds a result node. The backward closure is attached only when graph
// construction is enabled and at least one input requires a gradient.
Var make_result(Matrix value, std::initializer_list<Var> inputs,
                std::function<void(Node&)> backward_fn);

Var constant(Matrix value);

// ---- elementwise and linear algebra ----
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_row_bias(const Var& x, const Var& bias);  // bias is 1 x cols
Var gelu(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var dropout(const Var& x, double rate, Rng& rng);

// ---- row indexing ----
Var gather_rows(const Var& table, std::span<const int> ids);
Var select_rows(const Var& x, std::span<const int> rows);
// Copy of `base` with `rows[i]` written at row `at[i]`. Gradient flows to
// `rows` only; `base` is a constant.
Var scatter_rows(const Matrix& base, const Var& rows, std::span<const int> at);

// Multi-head scaled dot-product self-attention over `batch` sequences of
// `seq_len` rows each. `key_valid[b * seq_len + j] == 0` excludes key j.
Var self_attention(const Var& q, const Var& k, const Var& v, int batch, int seq_len,
                   int num_heads, std::span<const unsigned char> key_valid);

// ---- row-wise numerics shared by several modules ----
Matrix softmax_rows(const Matrix& logits);
Matrix log_softmax_rows(const Matrix& logits);

}  // namespace matekd::ag
