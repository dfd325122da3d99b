#include "csmcir/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "csmcir/error.hpp"

namespace csmcir {

namespace {

// Loose enough that finite-difference probes (h ~ 1e-5) stay admissible.
constexpr double kUnitTolerance = 1e-4;

void require_unit_rows(const Matrix& m, const char* what) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    if (std::abs(norm(m.row(r)) - 1.0) > kUnitTolerance) {
      throw ContractError(std::string("contrastive_loss: ") + what + " row " + std::to_string(r) +
                          " is not unit norm");
    }
  }
}

}  // namespace

std::size_t select_memory_row(const Matrix& memory, std::size_t tokens_per_entry,
                              std::size_t entry, std::span<const double> u) {
  std::size_t best = entry * tokens_per_entry;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < tokens_per_entry; ++t) {
    const std::size_t r = entry * tokens_per_entry + t;
    const double s = dot(memory.row(r), u);
    if (s > best_score) {
      best_score = s;
      best = r;
    }
  }
  return best;
}

ContrastiveResult contrastive_loss(const BatchEmbeddings& emb, const LossConfig& cfg) {
  const std::size_t b = emb.queries.rows();
  if (b == 0) throw ContractError("contrastive_loss: empty batch");
  if (!(cfg.tau > 0.0) || !std::isfinite(cfg.tau)) throw ContractError("contrastive_loss: tau must be positive");
  if (emb.targets.rows() != b || emb.targets.cols() != emb.queries.cols()) {
    throw ContractError("contrastive_loss: queries and targets must have the same shape");
  }
  const bool with_memory = cfg.use_memory_negatives && !emb.memory.empty();
  if (with_memory) {
    if (emb.memory.cols() != emb.queries.cols()) throw ContractError("contrastive_loss: memory width mismatch");
    if (emb.tokens_per_entry == 0 || emb.memory.rows() % emb.tokens_per_entry != 0) {
      throw ContractError("contrastive_loss: memory rows not a multiple of tokens_per_entry");
    }
    require_unit_rows(emb.memory, "memory");
  }
  require_unit_rows(emb.queries, "query");
  require_unit_rows(emb.targets, "target");

  const std::size_t entries = with_memory ? emb.memory.rows() / emb.tokens_per_entry : 0;
  ContrastiveResult res;
  res.per_anchor.resize(b);
  res.grad_queries = Matrix(b, emb.queries.cols());
  res.grad_targets = Matrix(b, emb.targets.cols());
  res.grad_memory = Matrix(emb.memory.rows(), emb.memory.cols());

  const double inv_b = 1.0 / static_cast<double>(b);
  Vector logits(b + entries);
  std::vector<std::size_t> chosen(entries);
  for (std::size_t i = 0; i < b; ++i) {
    auto u = emb.queries.row(i);
    for (std::size_t j = 0; j < b; ++j) logits[j] = cfg.tau * dot(u, emb.targets.row(j));
    for (std::size_t e = 0; e < entries; ++e) {
      chosen[e] = select_memory_row(emb.memory, emb.tokens_per_entry, e, u);
      logits[b + e] = cfg.tau * dot(u, emb.memory.row(chosen[e]));
    }
    const double shift = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (double l : logits) total += std::exp(l - shift);
    const double log_norm = shift + std::log(total);
    res.per_anchor[i] = log_norm - logits[i];
    res.loss += res.per_anchor[i];

    // d(term_i)/d(logit_j) = p_j - [j == i].
    auto gu = res.grad_queries.row(i);
    for (std::size_t j = 0; j < b + entries; ++j) {
      double w = std::exp(logits[j] - log_norm);
      if (j == i) w -= 1.0;
      w *= cfg.tau * inv_b;
      if (j < b) {
        axpy(w, emb.targets.row(j), gu);
        axpy(w, u, res.grad_targets.row(j));
      } else {
        const std::size_t r = chosen[j - b];
        axpy(w, emb.memory.row(r), gu);
        axpy(w, u, res.grad_memory.row(r));
      }
    }
  }
  res.loss *= inv_b;
  return res;
}

CosineResult cosine_loss(std::span<const Matrix> target_tokens, const Matrix& queries,
                         std::span<const double> alpha) {
  const std::size_t b = queries.rows();
  if (b == 0) throw ContractError("cosine_loss: empty batch");
  if (target_tokens.size() != b) throw ContractError("cosine_loss: one token matrix per sample required");
  const std::size_t k = alpha.size();
  if (k == 0) throw ContractError("cosine_loss: alpha is empty");
  const std::size_t de = queries.cols();

  CosineResult res;
  res.grad_queries = Matrix(b, de);
  res.grad_alpha.assign(k, 0.0);
  res.grad_tokens.reserve(b);
  const double inv_b = 1.0 / static_cast<double>(b);
  const double inv_k = 1.0 / static_cast<double>(k);

  for (std::size_t i = 0; i < b; ++i) {
    const Matrix& v = target_tokens[i];
    if (v.rows() != k || v.cols() != de) throw ContractError("cosine_loss: token matrix shape mismatch");
    auto u = queries.row(i);
    Vector pooled(de, 0.0);
    for (std::size_t t = 0; t < k; ++t) axpy(alpha[t] * inv_k, v.row(t), pooled);
    const double np = norm(pooled);
    const double nu = norm(u);
    if (!(np > 0.0)) {
      throw DomainError("cosine_loss: pooled target vector of sample " + std::to_string(i) +
                        " has zero norm");
    }
    if (!(nu > 0.0)) throw DomainError("cosine_loss: zero query embedding");
    const double c = dot(pooled, u) / (np * nu);
    res.loss += 1.0 - c;

    // dL/dp and dL/du for this sample, already scaled by -1/B.
    Vector gp(de);
    auto gu = res.grad_queries.row(i);
    for (std::size_t d = 0; d < de; ++d) {
      gp[d] = -inv_b * (u[d] / (np * nu) - c * pooled[d] / (np * np));
      gu[d] = -inv_b * (pooled[d] / (np * nu) - c * u[d] / (nu * nu));
    }
    Matrix gv(k, de);
    for (std::size_t t = 0; t < k; ++t) {
      axpy(alpha[t] * inv_k, gp, gv.row(t));
      res.grad_alpha[t] += inv_k * dot(v.row(t), gp);
    }
    res.grad_tokens.push_back(std::move(gv));
  }
  res.loss *= inv_b;
  return res;
}

TotalLossResult total_loss(const BatchEmbeddings& emb, std::span<const Matrix> target_tokens,
                           std::span<const double> alpha, const LossConfig& cfg) {
  ContrastiveResult cl = contrastive_loss(emb, cfg);
  CosineResult cs = cosine_loss(target_tokens, emb.queries, alpha);
  TotalLossResult out;
  out.loss_cl = cl.loss;
  out.loss_cos = cs.loss;
  out.loss = cl.loss + cs.loss;
  out.grad_queries = std::move(cl.grad_queries);
  out.grad_queries += cs.grad_queries;
  out.grad_targets = std::move(cl.grad_targets);
  out.grad_memory = std::move(cl.grad_memory);
  out.grad_tokens = std::move(cs.grad_tokens);
  out.grad_alpha = std::move(cs.grad_alpha);
  return out;
}

}  // namespace csmcir
