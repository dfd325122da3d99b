#include "csmcir/memory_bank.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "csmcir/error.hpp"
#include "csmcir/kernels.hpp"

namespace csmcir {

namespace {

constexpr double kUnitTolerance = 1e-9;

void check_batch(const BankBatch& batch, std::size_t expected_dim) {
  const std::size_t b = batch.ids.size();
  if (b == 0) throw ContractError("memory bank: empty batch");
  if (batch.images.rows() != b || batch.captions.rows() != b) {
    throw ContractError("memory bank: batch rows do not match id count");
  }
  if (expected_dim != 0 && batch.images.cols() != expected_dim) {
    throw ContractError("memory bank: batch embedding width does not match stored entries");
  }
  std::unordered_set<std::string> seen;
  for (const auto& id : batch.ids) {
    if (!seen.insert(id).second) throw ContractError("memory bank: duplicate batch id '" + id + "'");
  }
  for (std::size_t r = 0; r < b; ++r) {
    if (std::abs(norm(batch.images.row(r)) - 1.0) > kUnitTolerance) {
      throw ContractError("memory bank: batch image embedding is not unit norm");
    }
  }
}

void require_warm(const MemoryBank& bank, const char* what) {
  if (bank.capacity() == 0 || !bank.warm()) {
    throw StateError(std::string(what) + ": memory bank is not warm (" +
                     std::to_string(bank.size()) + "/" + std::to_string(bank.capacity()) + ")");
  }
}

std::vector<ModalPair> entry_pairs(const MemoryBank& bank) {
  std::vector<ModalPair> pairs;
  pairs.reserve(bank.size());
  for (const auto& e : bank.entries()) pairs.push_back(make_modal_pair(e.image_embedding, e.caption_embedding));
  return pairs;
}

}  // namespace

MemoryBank::MemoryBank(BankOptions options) : options_(options) {
  if (options_.n_max == 0) throw ContractError("memory bank: n_max must be positive");
  entries_.reserve(options_.capacity);
}

void MemoryBank::write_slot(std::size_t slot, const BankBatch& batch, std::size_t row) {
  MemoryEntry& e = entries_[slot];
  e.image_embedding = batch.images.row_copy(row);
  e.caption_embedding = batch.captions.row_copy(row);
  e.caption_id = batch.ids[row];
  e.delta_t = 0;
  e.inserted_at = next_sequence_++;
}

std::size_t MemoryBank::fill(const BankBatch& batch) {
  check_batch(batch, entries_.empty() ? 0 : entries_.front().image_embedding.size());
  std::size_t taken = 0;
  for (std::size_t r = 0; r < batch.ids.size() && !warm(); ++r, ++taken) {
    entries_.emplace_back();
    write_slot(entries_.size() - 1, batch, r);
  }
  return taken;
}

EntropyReport MemoryBank::update(const BankBatch& batch) {
  require_warm(*this, "update");
  check_batch(batch, entries_.front().image_embedding.size());

  // Scores come from the pre-update snapshot only.
  EntropyReport report = compute_entropies(batch.images, *this);
  report.h_mem_retained = retention_scores(report, *this);

  std::vector<std::size_t> by_batch(batch.ids.size());
  std::iota(by_batch.begin(), by_batch.end(), 0);
  std::stable_sort(by_batch.begin(), by_batch.end(), [&](std::size_t a, std::size_t b) {
    return report.h_batch[a] > report.h_batch[b];
  });
  std::vector<std::size_t> by_memory(entries_.size());
  std::iota(by_memory.begin(), by_memory.end(), 0);
  std::stable_sort(by_memory.begin(), by_memory.end(), [&](std::size_t a, std::size_t b) {
    return report.h_mem_retained[a] < report.h_mem_retained[b];
  });

  const std::size_t pairs = std::min(by_batch.size(), by_memory.size());
  for (std::size_t k = 0; k < pairs; ++k) {
    const std::size_t j = by_batch[k];
    const std::size_t i = by_memory[k];
    // Both lists are sorted, so every later pair fails too.
    if (!(report.h_batch[j] > report.h_mem_retained[i])) break;
    report.replacements.push_back({j, i});
  }

  std::vector<bool> replaced(entries_.size(), false);
  for (const auto& r : report.replacements) replaced[r.memory_index] = true;
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (!replaced[i]) ++entries_[i].delta_t;
  for (const auto& r : report.replacements) write_slot(r.memory_index, batch, r.batch_index);
  return report;
}

std::vector<std::size_t> MemoryBank::fifo_update(const BankBatch& batch) {
  require_warm(*this, "fifo_update");
  check_batch(batch, entries_.front().image_embedding.size());
  if (batch.ids.size() > entries_.size()) {
    throw ContractError("fifo_update: batch larger than bank capacity");
  }
  std::vector<std::size_t> order(entries_.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return entries_[a].inserted_at < entries_[b].inserted_at;
  });
  order.resize(batch.ids.size());

  std::vector<bool> evicted(entries_.size(), false);
  for (std::size_t slot : order) evicted[slot] = true;
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (!evicted[i]) ++entries_[i].delta_t;
  for (std::size_t r = 0; r < order.size(); ++r) write_slot(order[r], batch, r);
  return order;
}

Matrix MemoryBank::image_matrix() const {
  std::vector<Vector> rows;
  rows.reserve(entries_.size());
  for (const auto& e : entries_) rows.push_back(e.image_embedding);
  return Matrix::from_rows(rows);
}

void MemoryBank::validate() const {
  if (entries_.size() > options_.capacity) throw StateError("memory bank: size exceeds capacity");
  std::unordered_set<std::uint64_t> sequences;
  for (const auto& e : entries_) {
    if (std::abs(norm(e.image_embedding) - 1.0) > kUnitTolerance) {
      throw StateError("memory bank: stored image embedding is not unit norm");
    }
    if (e.image_embedding.size() != entries_.front().image_embedding.size() ||
        e.caption_embedding.size() != entries_.front().caption_embedding.size()) {
      throw StateError("memory bank: ragged entries");
    }
    if (e.inserted_at >= next_sequence_ || !sequences.insert(e.inserted_at).second) {
      throw StateError("memory bank: inconsistent insertion sequence");
    }
  }
}

MemoryBank MemoryBank::restore(BankOptions options, std::vector<MemoryEntry> entries,
                               std::uint64_t next_sequence) {
  MemoryBank bank(options);
  bank.entries_ = std::move(entries);
  bank.next_sequence_ = next_sequence;
  bank.validate();
  return bank;
}

Matrix batch_to_memory_probs(const Matrix& batch, const MemoryBank& bank) {
  require_warm(bank, "batch_to_memory_probs");
  return kernels::softmax_entropy_rows(kernels::similarity(batch, bank.image_matrix())).probs;
}

Matrix memory_to_memory_probs(const MemoryBank& bank) {
  require_warm(bank, "memory_to_memory_probs");
  const Matrix m = bank.image_matrix();
  return kernels::softmax_entropy_rows(kernels::similarity(m, m),
                                       bank.options().exclude_self_similarity)
      .probs;
}

EntropyReport compute_entropies(const Matrix& batch, const MemoryBank& bank) {
  require_warm(bank, "compute_entropies");
  const Matrix m = bank.image_matrix();
  EntropyReport report;
  report.h_batch = kernels::softmax_entropy_rows(kernels::similarity(batch, m)).entropies;
  report.h_mem = kernels::softmax_entropy_rows(kernels::similarity(m, m),
                                               bank.options().exclude_self_similarity)
                     .entropies;
  return report;
}

Vector retention_scores(const EntropyReport& report, const MemoryBank& bank) {
  if (report.h_mem.size() != bank.size()) {
    throw ContractError("retention_scores: report does not match bank size");
  }
  const double n_max = static_cast<double>(bank.options().n_max);
  Vector out(bank.size());
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const double age = static_cast<double>(bank.entries()[i].delta_t);
    out[i] = std::max(0.0, 1.0 - age / n_max) * report.h_mem[i];
  }
  return out;
}

Matrix negatives_for_step(const MemoryBank& bank, const EncoderParams& params) {
  require_warm(bank, "negatives_for_step");
  const std::size_t k = params.dims.num_query_tokens;
  const auto outputs = kernels::encode_all(params, entry_pairs(bank));
  Matrix out(bank.size() * k, params.dims.embed_dim);
  for (std::size_t e = 0; e < outputs.size(); ++e) {
    for (std::size_t t = 0; t < k; ++t) {
      auto src = outputs[e].tokens.row(t + 1);
      std::copy(src.begin(), src.end(), out.row(e * k + t).begin());
    }
  }
  return out;
}

Matrix negatives_by_entry_cls(const MemoryBank& bank, const EncoderParams& params) {
  require_warm(bank, "negatives_by_entry_cls");
  const auto outputs = kernels::encode_all(params, entry_pairs(bank));
  Matrix out(bank.size(), params.dims.embed_dim);
  for (std::size_t e = 0; e < outputs.size(); ++e) {
    const auto sel = target_embedding(outputs[e], outputs[e].tokens.row(0));
    std::copy(sel.embedding.begin(), sel.embedding.end(), out.row(e).begin());
  }
  return out;
}

}  // namespace csmcir
