// Data-parallel kernels used by the memory bank, the losses' negative pool and
// retrieval evaluation.
//
// Each kernel exists twice: `kernels::serial` is the reference loop kept for
// testing, `kernels::omp` distributes independent rows over OpenMP threads.
// Both call the same per-row code, so their results are bitwise identical and
// independent of thread count. The unqualified `kernels::` names dispatch to
// the OpenMP variants.

#ifndef CSMCIR_KERNELS_HPP
#define CSMCIR_KERNELS_HPP

#include <cstddef>
#include <cstdint>
#include <vector>

#include "csmcir/encoder.hpp"
#include "csmcir/numerics.hpp"

namespace csmcir::kernels {

/// Row-wise softmax distributions and their entropies.
struct RowDistributions {
  Matrix probs;
  Vector entropies;
};

using Ordering = std::vector<std::vector<std::uint32_t>>;

namespace serial {
// S(i, j) = a_i . b_j
Matrix similarity(const Matrix& a, const Matrix& b);
// Softmax and entropy per row; mask_diagonal drops the (i, i) term.
RowDistributions softmax_entropy_rows(const Matrix& logits, bool mask_diagonal = false);
// S(i, g) = max_k q_i . tokens[g * K + k]
Matrix max_token_scores(const Matrix& queries, const Matrix& tokens, std::size_t tokens_per_item);
// Per-row indices by descending score, ties by ascending index.
Ordering argsort_rows_desc(const Matrix& scores);
// encode(params, pairs[i]) for every i, in index order.
std::vector<EncoderOutput> encode_all(const EncoderParams& params,
                                      const std::vector<ModalPair>& pairs);
}  // namespace serial

namespace omp {
// S(i, j) = a_i . b_j
Matrix similarity(const Matrix& a, const Matrix& b);
// Softmax and entropy per row; mask_diagonal drops the (i, i) term.
RowDistributions softmax_entropy_rows(const Matrix& logits, bool mask_diagonal = false);
// S(i, g) = max_k q_i . tokens[g * K + k]
Matrix max_token_scores(const Matrix& queries, const Matrix& tokens, std::size_t tokens_per_item);
// Per-row indices by descending score, ties by ascending index.
Ordering argsort_rows_desc(const Matrix& scores);
// encode(params, pairs[i]) for every i, in index order.
std::vector<EncoderOutput> encode_all(const EncoderParams& params,
                                      const std::vector<ModalPair>& pairs);
}  // namespace omp

using omp::argsort_rows_desc;
using omp::encode_all;
using omp::max_token_scores;
using omp::similarity;
using omp::softmax_entropy_rows;

/// Number of threads the OpenMP variants will use (1 without OpenMP).
int thread_count();

}  // namespace csmcir::kernels

#endif  // CSMCIR_KERNELS_HPP
