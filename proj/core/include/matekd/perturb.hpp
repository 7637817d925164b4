#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "matekd/autograd.hpp"
#include "matekd/models.hpp"
#include "matekd/rng.hpp"
#include "matekd/vocab_data.hpp"

namespace matekd {

// Outcome of random masking for one sequence.
struct MaskPlan {
  std::vector<int> positions;  // sorted, unique, all maskable
  double rho = 0.0;
  std::uint64_t seed = 0;
};

// Each maskable position draws p ~ U(0,1) and is masked when p < rho. When
// rho > 0 selects nothing, one uniformly chosen maskable position is masked.
std::pair<TokenSequence, MaskPlan> mask_tokens(const TokenSequence& seq, double rho,
                                               std::uint64_t seed);

struct GumbelSample {
  ag::Matrix g;
  double tau = 1.0;
};

inline constexpr double kGumbelEps = 1e-10;

// -log(-log(u)), u ~ U(0,1) clamped to [eps, 1 - eps].
ag::Matrix sample_gumbel(Eigen::Index rows, Eigen::Index cols, Rng& rng);

// softmax((log_softmax(logits) + g) / tau).
std::vector<double> gumbel_softmax(std::span<const double> logits, std::span<const double> g,
                                   double tau);
ag::Var gumbel_softmax(const ag::Var& logits, const ag::Matrix& g, double tau);

// Index of the largest entry; ties go to the lowest index.
int argmax(std::span<const double> v);

// Forward: row-wise exact one-hot at the argmax. Backward: identity.
ag::Var straight_through(const ag::Var& relaxed);

// Per-position distributions over the vocabulary plus the matching hard ids.
struct RelaxedSequence {
  ag::Var rows;  // seq_len x K
  std::vector<int> hard_ids;
  std::vector<int> mask_positions;
};

ag::Matrix one_hot_rows(std::span<const int> ids, int vocab_size);

// Non-plan positions become constant one-hots of the original tokens; plan
// positions take the sampled rows in plan order.
RelaxedSequence assemble_pseudo(const TokenSequence& original, const MaskPlan& plan,
                                const ag::Var& sampled_rows, int vocab_size);

// ---- batched pipeline used by the trainer ----

struct MaskedBatch {
  Batch masked;
  std::vector<MaskPlan> plans;
  std::vector<int> flat_positions;  // b * seq_len + position, in plan order
};

// Sequence b is masked with seed derived from `seed` and b.
MaskedBatch mask_batch(const Batch& batch, double rho, std::uint64_t seed);

struct PseudoBatch {
  int size = 0;
  int seq_len = 0;
  ag::Var rows;  // (size * seq_len) x K
  std::vector<int> hard_ids;
  std::vector<unsigned char> key_valid;
  std::vector<MaskPlan> plans;
  std::vector<int> flat_positions;

  Batch hard_batch() const;
};

PseudoBatch assemble_pseudo_batch(const Batch& original, const MaskedBatch& masked,
                                  const ag::Var& sampled_rows, int vocab_size);

// Additive row that removes special tokens from the generator's support.
ag::Matrix special_token_penalty(int vocab_size);

struct PseudoSampleOptions {
  double rho = 0.3;
  double tau = 1.0;
  ForwardOptions forward;
};

// mask -> generator logits at masked positions -> Gumbel-Softmax ->
// straight-through -> assemble. Gradients reach the generator through `rows`
// when graph construction is enabled.
PseudoBatch generate_pseudo_batch(const MaskedLM& generator, const Batch& original,
                                  const PseudoSampleOptions& options, std::uint64_t seed);

}  // namespace matekd
