// Independent scalar evaluations of the training objectives.

#ifndef CSMCIR_LOSS_ORACLE_HPP
#define CSMCIR_LOSS_ORACLE_HPP

#include <algorithm>
#include <cmath>
#include <vector>

#include "csmcir/numerics.hpp"

namespace csmcir::oracle {

/// Textbook InfoNCE with in-batch negatives: mean over i of
/// logsumexp_j(tau u_i.v_j) - tau u_i.v_i.
inline double info_nce(const Matrix& u, const Matrix& v, double tau) {
  double total = 0.0;
  for (std::size_t i = 0; i < u.rows(); ++i) {
    std::vector<double> logits;
    for (std::size_t j = 0; j < v.rows(); ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < u.cols(); ++c) s += u(i, c) * v(j, c);
      logits.push_back(tau * s);
    }
    const double hi = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - hi);
    total += hi + std::log(z) - logits[i];
  }
  return total / static_cast<double>(u.rows());
}

/// Per-anchor -log(exp(tau u.v_i) / (sum_j exp(tau u.v_j) + sum_e exp(tau max_k u.m_ek))).
inline std::vector<double> memory_contrastive_terms(const Matrix& u, const Matrix& v, const Matrix& mem,
                                                    std::size_t k, double tau) {
  std::vector<double> out;
  const std::size_t entries = k == 0 ? 0 : mem.rows() / k;
  for (std::size_t i = 0; i < u.rows(); ++i) {
    double den = 0.0;
    for (std::size_t j = 0; j < v.rows(); ++j) den += std::exp(tau * csmcir::dot(u.row(i), v.row(j)));
    for (std::size_t e = 0; e < entries; ++e) {
      double best = -INFINITY;
      for (std::size_t t = 0; t < k; ++t) best = std::max(best, csmcir::dot(u.row(i), mem.row(e * k + t)));
      den += std::exp(tau * best);
    }
    out.push_back(-std::log(std::exp(tau * csmcir::dot(u.row(i), v.row(i))) / den));
  }
  return out;
}

inline double mean(const std::vector<double>& x) {
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

/// (1/B) sum_i (1 - cos((1/K) sum_k alpha_k v^i_k, u_i)).
inline double cosine_alignment(const std::vector<Matrix>& tokens, const Matrix& u, const std::vector<double>& alpha) {
  double total = 0.0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    std::vector<double> pooled(u.cols(), 0.0);
    for (std::size_t k = 0; k < alpha.size(); ++k)
      for (std::size_t c = 0; c < u.cols(); ++c) pooled[c] += alpha[k] * tokens[i](k, c) / static_cast<double>(alpha.size());
    total += 1.0 - csmcir::dot(pooled, u.row(i)) / (csmcir::norm(pooled) * csmcir::norm(u.row(i)));
  }
  return total / static_cast<double>(tokens.size());
}

}  // namespace csmcir::oracle

#endif  // CSMCIR_LOSS_ORACLE_HPP
