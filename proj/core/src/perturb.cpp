#include "matekd/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "matekd/error.hpp"

namespace matekd {

using ag::Matrix;
using ag::Var;

std::pair<TokenSequence, MaskPlan> mask_tokens(const TokenSequence& seq, double rho,
                                               std::uint64_t seed) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw Error("rho must be in [0, 1]");
  Rng rng(seed);
  MaskPlan plan;
  plan.rho = rho;
  plan.seed = seed;
  std::vector<int> maskable;
  for (int i = 0; i < seq.length(); ++i) {
    if (!seq.maskable[static_cast<std::size_t>(i)]) continue;
    maskable.push_back(i);
    if (uniform01(rng) < rho) plan.positions.push_back(i);
  }
  if (rho > 0.0 && plan.positions.empty() && !maskable.empty())
    plan.positions.push_back(maskable[uniform_index(rng, maskable.size())]);

  TokenSequence out = seq;
  for (int p : plan.positions) out.ids[static_cast<std::size_t>(p)] = Vocabulary::kMask;
  return {std::move(out), std::move(plan)};
}

Matrix sample_gumbel(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Matrix g(rows, cols);
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    double u = std::clamp(uniform01(rng), kGumbelEps, 1.0 - kGumbelEps);
    g.data()[i] = -std::log(-std::log(u));
  }
  return g;
}

namespace {

Matrix gumbel_forward(const Matrix& logits, const Matrix& g, double tau) {
  return ag::softmax_rows((ag::log_softmax_rows(logits) + g) / tau);
}

}  // namespace

std::vector<double> gumbel_softmax(std::span<const double> logits, std::span<const double> g,
                                   double tau) {
  if (!(tau > 0.0)) throw Error("Gumbel-Softmax temperature must be > 0");
  if (logits.size() != g.size()) throw Error("logits/noise length mismatch");
  Matrix l(1, static_cast<Eigen::Index>(logits.size()));
  Matrix n(1, static_cast<Eigen::Index>(g.size()));
  for (std::size_t i = 0; i < logits.size(); ++i) {
    l(0, static_cast<Eigen::Index>(i)) = logits[i];
    n(0, static_cast<Eigen::Index>(i)) = g[i];
  }
  Matrix y = gumbel_forward(l, n, tau);
  return {y.data(), y.data() + y.size()};
}

Var gumbel_softmax(const Var& logits, const Matrix& g, double tau) {
  if (!(tau > 0.0)) throw Error("Gumbel-Softmax temperature must be > 0");
  if (g.rows() != logits.rows() || g.cols() != logits.cols()) throw Error("logits/noise shape mismatch");
  Matrix y = gumbel_forward(logits.value(), g, tau);
  Matrix p = ag::softmax_rows(logits.value());
  Matrix y_saved = y;
  return ag::make_result(std::move(y), {logits}, [y = std::move(y_saved), p = std::move(p), tau](ag::Node& self) {
    // softmax backward at temperature tau, then log-softmax backward.
    Eigen::VectorXd dot = self.grad.cwiseProduct(y).rowwise().sum();
    Matrix dz = y.cwiseProduct(self.grad.colwise() - dot) / tau;
    Eigen::VectorXd dz_sum = dz.rowwise().sum();
    Matrix dl = (dz.array() - p.array().colwise() * dz_sum.array()).matrix();
    self.parents[0]->accumulate(dl);
  });
}

int argmax(std::span<const double> v) {
  if (v.empty()) throw Error("argmax of an empty vector");
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

Var straight_through(const Var& relaxed) {
  const Matrix& r = relaxed.value();
  Matrix hard = Matrix::Zero(r.rows(), r.cols());
  for (Eigen::Index i = 0; i < r.rows(); ++i)
    hard(i, argmax(std::span(r.row(i).data(), static_cast<std::size_t>(r.cols())))) = 1.0;
  return ag::make_result(std::move(hard), {relaxed},
                         [](ag::Node& self) { self.parents[0]->accumulate(self.grad); });
}

Matrix one_hot_rows(std::span<const int> ids, int vocab_size) {
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(ids.size()), vocab_size);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab_size) throw Error("token id outside vocabulary");
    m(static_cast<Eigen::Index>(i), ids[i]) = 1.0;
  }
  return m;
}

namespace {

std::vector<int> overwrite_with_argmax(std::vector<int> ids, const Matrix& rows, std::span<const int> at) {
  for (std::size_t i = 0; i < at.size(); ++i) {
    auto r = rows.row(static_cast<Eigen::Index>(i));
    ids[static_cast<std::size_t>(at[i])] = argmax(std::span(r.data(), static_cast<std::size_t>(rows.cols())));
  }
  return ids;
}

}  // namespace

RelaxedSequence assemble_pseudo(const TokenSequence& original, const MaskPlan& plan,
                                const Var& sampled_rows, int vocab_size) {
  if (sampled_rows.rows() != static_cast<Eigen::Index>(plan.positions.size()))
    throw Error("sampled row count " + std::to_string(sampled_rows.rows()) + " != plan size " +
                std::to_string(plan.positions.size()));
  for (int p : plan.positions)
    if (p < 0 || p >= original.length() || !original.maskable[static_cast<std::size_t>(p)])
      throw Error("mask plan names a non-maskable position");
  RelaxedSequence out;
  out.rows = ag::scatter_rows(one_hot_rows(original.ids, vocab_size), sampled_rows, plan.positions);
  out.hard_ids = overwrite_with_argmax(original.ids, sampled_rows.value(), plan.positions);
  out.mask_positions = plan.positions;
  return out;
}

MaskedBatch mask_batch(const Batch& batch, double rho, std::uint64_t seed) {
  MaskedBatch out;
  out.masked = batch;
  const auto L = static_cast<std::size_t>(batch.seq_len);
  for (int b = 0; b < batch.size; ++b) {
    const auto off = static_cast<std::size_t>(b) * L;
    TokenSequence seq;
    seq.ids.assign(batch.ids.begin() + static_cast<long>(off), batch.ids.begin() + static_cast<long>(off + L));
    seq.maskable.assign(batch.maskable.begin() + static_cast<long>(off),
                        batch.maskable.begin() + static_cast<long>(off + L));
    auto [masked, plan] = mask_tokens(seq, rho, splitmix64(seed + static_cast<std::uint64_t>(b)));
    std::copy(masked.ids.begin(), masked.ids.end(), out.masked.ids.begin() + static_cast<long>(off));
    for (int p : plan.positions) out.flat_positions.push_back(static_cast<int>(off) + p);
    out.plans.push_back(std::move(plan));
  }
  return out;
}

Batch PseudoBatch::hard_batch() const {
  Batch b;
  b.size = size;
  b.seq_len = seq_len;
  b.ids = hard_ids;
  b.key_valid = key_valid;
  return b;
}

PseudoBatch assemble_pseudo_batch(const Batch& original, const MaskedBatch& masked,
                                  const Var& sampled_rows, int vocab_size) {
  if (sampled_rows.rows() != static_cast<Eigen::Index>(masked.flat_positions.size()))
    throw Error("sampled row count does not match the mask plans");
  PseudoBatch out;
  out.size = original.size;
  out.seq_len = original.seq_len;
  out.key_valid = original.key_valid;
  out.plans = masked.plans;
  out.flat_positions = masked.flat_positions;
  out.rows = ag::scatter_rows(one_hot_rows(original.ids, vocab_size), sampled_rows, masked.flat_positions);
  out.hard_ids = overwrite_with_argmax(original.ids, sampled_rows.value(), masked.flat_positions);
  return out;
}

Matrix special_token_penalty(int vocab_size) {
  Matrix m = Matrix::Zero(1, vocab_size);
  for (int id = 0; id < Vocabulary::kNumSpecials && id < vocab_size; ++id)
    m(0, id) = -std::numeric_limits<double>::infinity();
  return m;
}

PseudoBatch generate_pseudo_batch(const MaskedLM& generator, const Batch& original,
                                  const PseudoSampleOptions& options, std::uint64_t seed) {
  const int K = generator.config().vocab_size;
  MaskedBatch masked = mask_batch(original, options.rho, derive_seed(seed, "mask"));
  if (masked.flat_positions.empty()) {
    // rho == 0 or nothing maskable: X' == X.
    return assemble_pseudo_batch(original, masked, ag::constant(Matrix(0, K)), K);
  }
  Var logits = ag::select_rows(generator.logits(masked.masked, options.forward), masked.flat_positions);
  Matrix penalty = special_token_penalty(K).replicate(logits.rows(), 1);
  Var restricted = ag::add(logits, ag::constant(std::move(penalty)));
  Rng noise_rng(derive_seed(seed, "gumbel"));
  Matrix g = sample_gumbel(restricted.rows(), K, noise_rng);
  Var sampled = straight_through(gumbel_softmax(restricted, g, options.tau));
  return assemble_pseudo_batch(original, masked, sampled, K);
}

}  // namespace matekd
