// Per-row bodies shared by the serial and OpenMP kernels. Keeping one copy is
// what makes the two variants agree bit for bit.

#ifndef CSMCIR_KERNELS_ROW_OPS_HPP
#define CSMCIR_KERNELS_ROW_OPS_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "csmcir/error.hpp"
#include "csmcir/kernels.hpp"

namespace csmcir::kernels::detail {

inline void similarity_row(const Matrix& a, const Matrix& b, std::size_t i, Matrix& out) {
  auto ar = a.row(i);
  auto o = out.row(i);
  for (std::size_t j = 0; j < b.rows(); ++j) {
    auto br = b.row(j);
    double s = 0.0;
    for (std::size_t c = 0; c < ar.size(); ++c) s += ar[c] * br[c];
    o[j] = s;
  }
}

inline void softmax_entropy_row(const Matrix& logits, std::size_t i, bool mask_diagonal,
                                RowDistributions& out) {
  auto l = logits.row(i);
  auto p = out.probs.row(i);
  const auto skip = [&](std::size_t j) { return mask_diagonal && j == i; };
  double shift = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < l.size(); ++j)
    if (!skip(j)) shift = std::max(shift, l[j]);
  double total = 0.0;
  for (std::size_t j = 0; j < l.size(); ++j) {
    p[j] = skip(j) ? 0.0 : std::exp(l[j] - shift);
    total += p[j];
  }
  double h = 0.0;
  for (std::size_t j = 0; j < l.size(); ++j) {
    p[j] /= total;
    if (p[j] > 0.0) h -= p[j] * std::log(p[j]);
  }
  out.entropies[i] = h;
}

inline void max_token_row(const Matrix& queries, const Matrix& tokens, std::size_t k,
                          std::size_t i, Matrix& out) {
  auto q = queries.row(i);
  auto o = out.row(i);
  for (std::size_t g = 0; g < out.cols(); ++g) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < k; ++t) {
      auto tr = tokens.row(g * k + t);
      double s = 0.0;
      for (std::size_t c = 0; c < q.size(); ++c) s += q[c] * tr[c];
      best = std::max(best, s);
    }
    o[g] = best;
  }
}

inline std::vector<std::uint32_t> argsort_row(const Matrix& scores, std::size_t i) {
  auto s = scores.row(i);
  std::vector<std::uint32_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), 0U);
  std::sort(idx.begin(), idx.end(), [&](std::uint32_t x, std::uint32_t y) {
    if (s[x] != s[y]) return s[x] > s[y];
    return x < y;
  });
  return idx;
}

inline void check_similarity(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ContractError("similarity: column count mismatch");
}

inline void check_logits(const Matrix& logits, bool mask_diagonal) {
  if (logits.cols() == 0) throw DomainError("softmax_entropy_rows: empty rows");
  if (mask_diagonal && (logits.rows() != logits.cols() || logits.cols() < 2)) {
    throw ContractError("softmax_entropy_rows: masked diagonal needs a square matrix, n >= 2");
  }
  if (!all_finite(logits.values())) throw DomainError("softmax_entropy_rows: non-finite logit");
}

inline void check_tokens(const Matrix& queries, const Matrix& tokens, std::size_t k) {
  if (k == 0 || tokens.rows() % k != 0) {
    throw ContractError("max_token_scores: token rows not a multiple of tokens_per_item");
  }
  if (queries.cols() != tokens.cols()) throw ContractError("max_token_scores: width mismatch");
}

}  // namespace csmcir::kernels::detail

#endif  // CSMCIR_KERNELS_ROW_OPS_HPP
