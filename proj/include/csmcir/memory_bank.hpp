// Entropy-aware memory bank and the FIFO baseline.
//
// The bank stores static inputs only: the frozen image embedding and the
// caption features of past target samples. Encodings used as negatives are
// recomputed with the current encoder on every step (negatives_for_step).
//
// Scoring, for batch embeddings z_i and stored embeddings m_j:
//
//   P^B(i, j) = softmax_j(z_i . m_j)          H^B_i = entropy(P^B(i, :))
//   P^M(i, j) = softmax_j(m_i . m_j)          H^M_i = entropy(P^M(i, :))
//   retention_i = max(0, 1 - dt_i / n_max) * H^M_i
//
// An update pairs the k-th highest-entropy batch sample with the k-th
// lowest-retention entry and replaces while H^B > retention, stopping at the
// first failed comparison.

#ifndef CSMCIR_MEMORY_BANK_HPP
#define CSMCIR_MEMORY_BANK_HPP

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "csmcir/encoder.hpp"
#include "csmcir/numerics.hpp"

namespace csmcir {

struct MemoryEntry {
  Vector image_embedding;    // unit norm
  Vector caption_embedding;
  std::string caption_id;
  std::uint64_t delta_t = 0;       // steps since last written
  std::uint64_t inserted_at = 0;   // insertion sequence number, FIFO order

  bool operator==(const MemoryEntry&) const = default;
};

struct Replacement {
  std::size_t batch_index;
  std::size_t memory_index;

  bool operator==(const Replacement&) const = default;
};

struct EntropyReport {
  Vector h_batch;         // length B
  Vector h_mem;           // length M
  Vector h_mem_retained;  // length M
  std::vector<Replacement> replacements;
};

/// A batch offered to the bank; rows of `images` and `captions` align with `ids`.
struct BankBatch {
  const Matrix& images;
  const Matrix& captions;
  std::span<const std::string> ids;
};

struct BankOptions {
  std::size_t capacity = 64;
  std::uint64_t n_max = 10;
  /// Drop the j = i term from the bank's self-similarity softmax.
  bool exclude_self_similarity = false;

  bool operator==(const BankOptions&) const = default;
};

class MemoryBank {
 public:
  explicit MemoryBank(BankOptions options);

  const BankOptions& options() const noexcept { return options_; }
  std::size_t capacity() const noexcept { return options_.capacity; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool warm() const noexcept { return entries_.size() == options_.capacity; }
  const std::vector<MemoryEntry>& entries() const noexcept { return entries_; }
  std::uint64_t next_sequence() const noexcept { return next_sequence_; }

  /// Appends batch rows until the bank is full; returns how many were taken.
  std::size_t fill(const BankBatch& batch);

  /// Entropy-aware replacement step. Requires a warm bank.
  EntropyReport update(const BankBatch& batch);

  /// Evicts the B oldest entries (by insertion order) and writes the batch
  /// into their slots. Returns the evicted slot indices, oldest first.
  std::vector<std::size_t> fifo_update(const BankBatch& batch);

  Matrix image_matrix() const;

  /// Throws StateError if a structural invariant is broken.
  void validate() const;

  /// Rebuilds a bank from serialized state (checkpoints).
  static MemoryBank restore(BankOptions options, std::vector<MemoryEntry> entries,
                            std::uint64_t next_sequence);

  bool operator==(const MemoryBank&) const = default;

 private:
  void write_slot(std::size_t slot, const BankBatch& batch, std::size_t row);

  BankOptions options_;
  std::vector<MemoryEntry> entries_;
  std::uint64_t next_sequence_ = 0;
};

/// B x M matrix of softmax_j(z_i . m_j). Throws StateError on a cold bank.
Matrix batch_to_memory_probs(const Matrix& batch, const MemoryBank& bank);

/// M x M matrix of softmax_j(m_i . m_j), self term included unless the bank
/// was built with exclude_self_similarity.
Matrix memory_to_memory_probs(const MemoryBank& bank);

/// Fills h_batch and h_mem of a report.
EntropyReport compute_entropies(const Matrix& batch, const MemoryBank& bank);

/// max(0, 1 - dt_i / n_max) * H^M_i for every entry.
Vector retention_scores(const EntropyReport& report, const MemoryBank& bank);

/// Re-encodes every entry with the current parameters and returns the K
/// query-token rows of each, stacked: row e * K + k is token k of entry e.
Matrix negatives_for_step(const MemoryBank& bank, const EncoderParams& params);

/// Anchor-independent variant: per entry, the query-token row closest to that
/// entry's own CLS output. M x d_e.
Matrix negatives_by_entry_cls(const MemoryBank& bank, const EncoderParams& params);

}  // namespace csmcir

#endif  // CSMCIR_MEMORY_BANK_HPP
