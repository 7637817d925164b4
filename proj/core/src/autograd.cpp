#include "matekd/autograd.hpp"

#include <cmath>
#include <numbers>
#include <unordered_set>

#include "matekd/error.hpp"

namespace matekd::ag {

namespace {

thread_local bool g_grad_enabled = true;

void require(bool ok, const char* what) {
  if (!ok) throw Error(what);
}

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

double Var::item() const {
  require(rows() == 1 && cols() == 1, "item() on a non-scalar");
  return node_->value(0, 0);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_result(Matrix value, std::initializer_list<Var> inputs,
                std::function<void(Node&)> backward_fn) {
  Var out(std::move(value));
  if (!g_grad_enabled) return out;
  bool needs = false;
  for (const Var& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  const auto& node = out.node();
  node->requires_grad = true;
  for (const Var& in : inputs) node->parents.push_back(in.node());
  node->backward = std::move(backward_fn);
  return out;
}

Var constant(Matrix value) { return Var(std::move(value), false); }

void backward(const Var& loss) {
  require(loss.rows() == 1 && loss.cols() == 1, "backward() needs a scalar loss");
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && parent->backward && !seen.contains(parent)) {
        seen.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && node->grad.size() != 0) node->backward(*node);
  }
}

Var matmul(const Var& a, const Var& b) {
  require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  return make_result(a.value() * b.value(), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) pa.accumulate(self.grad * pb.value.transpose());
    if (pb.requires_grad) pb.accumulate(pa.value.transpose() * self.grad);
  });
}

Var add(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  return make_result(a.value() + b.value(), {a, b}, [](Node& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  return make_result(a.value() - b.value(), {a, b}, [](Node& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
    if (self.parents[1]->requires_grad) self.parents[1]->accumulate(-self.grad);
  });
}

Var scale(const Var& a, double s) {
  return make_result(a.value() * s, {a}, [s](Node& self) {
    self.parents[0]->accumulate(self.grad * s);
  });
}

Var add_row_bias(const Var& x, const Var& bias) {
  require(bias.rows() == 1 && bias.cols() == x.cols(), "add_row_bias: bias shape");
  Matrix out = x.value();
  out.rowwise() += bias.value().row(0);
  return make_result(std::move(out), {x, bias}, [](Node& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
    if (self.parents[1]->requires_grad)
      self.parents[1]->accumulate(self.grad.colwise().sum());
  });
}

Var gelu(const Var& x) {
  const Matrix& in = x.value();
  Matrix out = in.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); });
  return make_result(std::move(out), {x}, [](Node& self) {
    const Matrix& in = self.parents[0]->value;
    constexpr double kInvSqrt2Pi = 0.3989422804014327;
    Matrix d = in.unaryExpr([](double v) {
      double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      return cdf + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
    });
    self.parents[0]->accumulate(self.grad.cwiseProduct(d));
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Index n = x.rows();
  const Index d = x.cols();
  require(gamma.cols() == d && beta.cols() == d, "layer_norm: parameter width");
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Index r = 0; r < n; ++r) {
    auto row = x.value().row(r);
    double mean = row.mean();
    double var = (row.array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (row.array() - mean) * inv_std(r);
  }
  Matrix out = xhat;
  out.array().rowwise() *= gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return make_result(std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       Node& px = *self.parents[0];
                       Node& pg = *self.parents[1];
                       Node& pb = *self.parents[2];
                       if (pg.requires_grad)
                         pg.accumulate(self.grad.cwiseProduct(xhat).colwise().sum());
                       if (pb.requires_grad) pb.accumulate(self.grad.colwise().sum());
                       if (px.requires_grad) {
                         Matrix dxhat = self.grad;
                         dxhat.array().rowwise() *= pg.value.row(0).array();
                         Matrix dx(xhat.rows(), xhat.cols());
                         for (Index r = 0; r < xhat.rows(); ++r) {
                           double m1 = dxhat.row(r).mean();
                           double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
                           dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 -
                                                     xhat.row(r).array() * m2);
                         }
                         px.accumulate(dx);
                       }
                     });
}

Var dropout(const Var& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  require(rate < 1.0, "dropout: rate must be < 1");
  Matrix keep(x.rows(), x.cols());
  const double s = 1.0 / (1.0 - rate);
  for (Index i = 0; i < keep.size(); ++i) keep.data()[i] = uniform01(rng) >= rate ? s : 0.0;
  Matrix out = x.value().cwiseProduct(keep);
  return make_result(std::move(out), {x}, [keep = std::move(keep)](Node& self) {
    self.parents[0]->accumulate(self.grad.cwiseProduct(keep));
  });
}

Var gather_rows(const Var& table, std::span<const int> ids) {
  const Index n = static_cast<Index>(ids.size());
  Matrix out(n, table.cols());
  for (Index i = 0; i < n; ++i) {
    require(ids[i] >= 0 && ids[i] < table.rows(), "gather_rows: id out of range");
    out.row(i) = table.value().row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return make_result(std::move(out), {table}, [idx = std::move(idx)](Node& self) {
    Node& pt = *self.parents[0];
    Matrix g = Matrix::Zero(pt.value.rows(), pt.value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Index>(i));
    pt.accumulate(g);
  });
}

Var select_rows(const Var& x, std::span<const int> rows) {
  // Same arithmetic as gather_rows; kept separate for readability at call sites.
  return gather_rows(x, rows);
}

Var scatter_rows(const Matrix& base, const Var& rows, std::span<const int> at) {
  require(rows.rows() == static_cast<Index>(at.size()), "scatter_rows: row count mismatch");
  require(rows.cols() == base.cols(), "scatter_rows: width mismatch");
  Matrix out = base;
  for (std::size_t i = 0; i < at.size(); ++i) {
    require(at[i] >= 0 && at[i] < base.rows(), "scatter_rows: index out of range");
    out.row(at[i]) = rows.value().row(static_cast<Index>(i));
  }
  std::vector<int> idx(at.begin(), at.end());
  return make_result(std::move(out), {rows}, [idx = std::move(idx)](Node& self) {
    Node& pr = *self.parents[0];
    Matrix g(pr.value.rows(), pr.value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(static_cast<Index>(i)) = self.grad.row(idx[i]);
    pr.accumulate(g);
  });
}

Var self_attention(const Var& q, const Var& k, const Var& v, int batch, int seq_len,
                   int num_heads, std::span<const unsigned char> key_valid) {
  const Index d = q.cols();
  require(q.rows() == static_cast<Index>(batch) * seq_len, "self_attention: row count");
  require(k.rows() == q.rows() && v.rows() == q.rows(), "self_attention: q/k/v rows");
  require(k.cols() == d && v.cols() == d, "self_attention: q/k/v width");
  require(d % num_heads == 0, "self_attention: width not divisible by heads");
  require(key_valid.size() == static_cast<std::size_t>(q.rows()), "self_attention: mask size");
  const Index dh = d / num_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Index L = seq_len;

  // probs[b * H + h] is the L x L attention matrix.
  std::vector<Matrix> probs(static_cast<std::size_t>(batch) * num_heads);
  Matrix out(q.rows(), d);
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < num_heads; ++h) {
      auto Q = q.value().block(b * L, h * dh, L, dh);
      auto K = k.value().block(b * L, h * dh, L, dh);
      auto V = v.value().block(b * L, h * dh, L, dh);
      Matrix s = (Q * K.transpose()) * inv_sqrt;
      for (Index j = 0; j < L; ++j)
        if (!key_valid[b * L + j]) s.col(j).setConstant(-std::numeric_limits<double>::infinity());
      Matrix p = softmax_rows(s);
      out.block(b * L, h * dh, L, dh) = p * V;
      probs[static_cast<std::size_t>(b) * num_heads + h] = std::move(p);
    }
  }

  return make_result(
      std::move(out), {q, k, v},
      [probs = std::move(probs), batch, num_heads, L, dh, inv_sqrt](Node& self) {
        Node& pq = *self.parents[0];
        Node& pk = *self.parents[1];
        Node& pv = *self.parents[2];
        Matrix gq = Matrix::Zero(pq.value.rows(), pq.value.cols());
        Matrix gk = Matrix::Zero(pk.value.rows(), pk.value.cols());
        Matrix gv = Matrix::Zero(pv.value.rows(), pv.value.cols());
        for (int b = 0; b < batch; ++b) {
          for (int h = 0; h < num_heads; ++h) {
            const Matrix& p = probs[static_cast<std::size_t>(b) * num_heads + h];
            auto Q = pq.value.block(b * L, h * dh, L, dh);
            auto K = pk.value.block(b * L, h * dh, L, dh);
            auto V = pv.value.block(b * L, h * dh, L, dh);
            auto dO = self.grad.block(b * L, h * dh, L, dh);
            gv.block(b * L, h * dh, L, dh) = p.transpose() * dO;
            Matrix dp = dO * V.transpose();
            Eigen::VectorXd rowdot = dp.cwiseProduct(p).rowwise().sum();
            Matrix ds = p.cwiseProduct(dp.colwise() - rowdot) * inv_sqrt;
            gq.block(b * L, h * dh, L, dh) = ds * K;
            gk.block(b * L, h * dh, L, dh) = ds.transpose() * Q;
          }
        }
        if (pq.requires_grad) pq.accumulate(gq);
        if (pk.requires_grad) pk.accumulate(gk);
        if (pv.requires_grad) pv.accumulate(gv);
      });
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    double m = logits.row(r).maxCoeff();
    auto e = (logits.row(r).array() - m).exp();
    out.row(r) = e / e.sum();
  }
  return out;
}

Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    double m = logits.row(r).maxCoeff();
    double lse = m + std::log((logits.row(r).array() - m).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

}  // namespace matekd::ag
