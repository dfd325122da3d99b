// Training objectives with exact gradients.
//
// Contrastive term, per anchor i with query embedding u_i and positive v_i:
//
//   L_cl = -(1/B) sum_i log( exp(tau u_i.v_i) / sum_{j in B*_i} exp(tau u_i.v_j) )
//
// B*_i is every in-batch target plus one row per memory entry: the entry's
// token with the largest u_i . row (lowest index on ties). Selection indices
// are held fixed when differentiating.
//
// Alignment term, with p_i = (1/K) sum_k alpha_k v^i_k over all K target tokens:
//
//   L_cos = (1/B) sum_i (1 - cos(p_i, u_i))

#ifndef CSMCIR_LOSSES_HPP
#define CSMCIR_LOSSES_HPP

#include <cstddef>
#include <span>
#include <vector>

#include "csmcir/numerics.hpp"

namespace csmcir {

struct LossConfig {
  double tau = 10.0;
  bool use_memory_negatives = true;
};

struct BatchEmbeddings {
  Matrix queries;  // U, B x d_e, unit rows
  Matrix targets;  // V, B x d_e, unit rows; row i is the positive of anchor i
  Matrix memory;   // (M * tokens_per_entry) x d_e, or empty
  std::size_t tokens_per_entry = 1;
};

struct ContrastiveResult {
  double loss = 0.0;
  Vector per_anchor;  // the bracketed -log term for each anchor
  Matrix grad_queries;
  Matrix grad_targets;
  Matrix grad_memory;  // same shape as BatchEmbeddings::memory
};

ContrastiveResult contrastive_loss(const BatchEmbeddings& emb, const LossConfig& cfg);

/// Index of the memory row chosen for anchor `u` from entry `entry`.
std::size_t select_memory_row(const Matrix& memory, std::size_t tokens_per_entry,
                              std::size_t entry, std::span<const double> u);

struct CosineResult {
  double loss = 0.0;
  std::vector<Matrix> grad_tokens;  // one K x d_e per sample
  Matrix grad_queries;
  Vector grad_alpha;
};

/// `target_tokens[i]` holds the K query-token rows of sample i's target side.
/// Throws DomainError when a pooled vector has zero norm.
CosineResult cosine_loss(std::span<const Matrix> target_tokens, const Matrix& queries,
                         std::span<const double> alpha);

struct TotalLossResult {
  double loss = 0.0;
  double loss_cl = 0.0;
  double loss_cos = 0.0;
  Matrix grad_queries;
  Matrix grad_targets;
  Matrix grad_memory;
  std::vector<Matrix> grad_tokens;
  Vector grad_alpha;
};

TotalLossResult total_loss(const BatchEmbeddings& emb, std::span<const Matrix> target_tokens,
                           std::span<const double> alpha, const LossConfig& cfg);

}  // namespace csmcir

#endif  // CSMCIR_LOSSES_HPP
