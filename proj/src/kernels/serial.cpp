#include "row_ops.hpp"

namespace csmcir::kernels::serial {

Matrix similarity(const Matrix& a, const Matrix& b) {
  detail::check_similarity(a, b);
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) detail::similarity_row(a, b, i, out);
  return out;
}

RowDistributions softmax_entropy_rows(const Matrix& logits, bool mask_diagonal) {
  detail::check_logits(logits, mask_diagonal);
  RowDistributions out{Matrix(logits.rows(), logits.cols()), Vector(logits.rows())};
  for (std::size_t i = 0; i < logits.rows(); ++i)
    detail::softmax_entropy_row(logits, i, mask_diagonal, out);
  return out;
}

Matrix max_token_scores(const Matrix& queries, const Matrix& tokens, std::size_t tokens_per_item) {
  detail::check_tokens(queries, tokens, tokens_per_item);
  Matrix out(queries.rows(), tokens.rows() / tokens_per_item);
  for (std::size_t i = 0; i < queries.rows(); ++i)
    detail::max_token_row(queries, tokens, tokens_per_item, i, out);
  return out;
}

Ordering argsort_rows_desc(const Matrix& scores) {
  Ordering out(scores.rows());
  for (std::size_t i = 0; i < scores.rows(); ++i) out[i] = detail::argsort_row(scores, i);
  return out;
}

std::vector<EncoderOutput> encode_all(const EncoderParams& params,
                                      const std::vector<ModalPair>& pairs) {
  std::vector<EncoderOutput> out;
  out.reserve(pairs.size());
  for (const auto& pair : pairs) out.push_back(encode(params, pair));
  return out;
}

}  // namespace csmcir::kernels::serial
