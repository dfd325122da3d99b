#include <exception>

#include "row_ops.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace csmcir::kernels {

int thread_count() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace omp {

namespace {

// Exceptions must not escape an OpenMP region; the first one is rethrown
// after the loop.
template <typename Body>
void parallel_rows(std::size_t n, Body&& body) {
  std::exception_ptr error;
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      body(static_cast<std::size_t>(i));
    } catch (...) {
#pragma omp critical(csmcir_kernel_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace

Matrix similarity(const Matrix& a, const Matrix& b) {
  detail::check_similarity(a, b);
  Matrix out(a.rows(), b.rows());
  parallel_rows(a.rows(), [&](std::size_t i) { detail::similarity_row(a, b, i, out); });
  return out;
}

RowDistributions softmax_entropy_rows(const Matrix& logits, bool mask_diagonal) {
  detail::check_logits(logits, mask_diagonal);
  RowDistributions out{Matrix(logits.rows(), logits.cols()), Vector(logits.rows())};
  parallel_rows(logits.rows(),
                [&](std::size_t i) { detail::softmax_entropy_row(logits, i, mask_diagonal, out); });
  return out;
}

Matrix max_token_scores(const Matrix& queries, const Matrix& tokens, std::size_t tokens_per_item) {
  detail::check_tokens(queries, tokens, tokens_per_item);
  Matrix out(queries.rows(), tokens.rows() / tokens_per_item);
  parallel_rows(queries.rows(), [&](std::size_t i) {
    detail::max_token_row(queries, tokens, tokens_per_item, i, out);
  });
  return out;
}

Ordering argsort_rows_desc(const Matrix& scores) {
  Ordering out(scores.rows());
  parallel_rows(scores.rows(), [&](std::size_t i) { out[i] = detail::argsort_row(scores, i); });
  return out;
}

std::vector<EncoderOutput> encode_all(const EncoderParams& params,
                                      const std::vector<ModalPair>& pairs) {
  std::vector<EncoderOutput> out(pairs.size());
  parallel_rows(pairs.size(), [&](std::size_t i) { out[i] = encode(params, pairs[i]); });
  return out;
}

}  // namespace omp
}  // namespace csmcir::kernels
