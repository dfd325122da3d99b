// The training loop.
//
// Per optimizer step: take the next batch of the epoch's seeded shuffle,
// frozen-extract its features, encode query and target sides with the shared
// encoder, re-encode the memory bank for negatives, evaluate the total loss,
// backpropagate, apply AdamW, then offer the batch's frozen target embeddings
// to the bank. Everything is a pure function of (config, dataset).

#ifndef CSMCIR_HARNESS_TRAINER_HPP
#define CSMCIR_HARNESS_TRAINER_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "csmcir/data.hpp"
#include "csmcir/error.hpp"
#include "csmcir/eval.hpp"
#include "csmcir/harness/checkpoint.hpp"
#include "csmcir/harness/config.hpp"
#include "csmcir/losses.hpp"

namespace csmcir::harness {

struct StepRecord {
  std::uint64_t step = 0;  // 0-based index of the step these losses belong to
  double loss_cl = 0.0;
  double loss_cos = 0.0;
  double loss_total = 0.0;
  double learning_rate = 0.0;
  std::size_t replacements = 0;  // bank writes after this step

  bool operator==(const StepRecord&) const = default;
};

/// A non-finite loss stopped training. Holds the state before the bad step.
class TrainingAborted : public NonFiniteError {
 public:
  TrainingAborted(const std::string& what, Checkpoint last_good)
      : NonFiniteError(what), last_good_(std::move(last_good)) {}
  const Checkpoint& last_good() const noexcept { return last_good_; }

 private:
  Checkpoint last_good_;
};

/// Batch indices of one step, from the per-epoch shuffle.
std::vector<std::size_t> batch_indices(const TrainConfig& cfg, std::size_t num_samples, std::uint64_t step);
/// `steps`, or `epochs` whole epochs when set.
std::uint64_t total_steps(const TrainConfig& cfg, std::size_t num_samples);

class Trainer {
 public:
  /// Fresh run: seeded parameters, zero optimizer state, prefilled bank.
  Trainer(const TrainConfig& cfg, const data::Dataset& dataset);
  /// Resumes from a checkpoint taken on the same dataset.
  Trainer(Checkpoint checkpoint, const data::Dataset& dataset);

  /// One optimizer step. Throws TrainingAborted on a non-finite loss, with
  /// the trainer left unchanged.
  StepRecord step();
  /// Held-out retrieval of the query split against the gallery.
  eval::MetricsRecord evaluate(const StepRecord& last) const;

  Checkpoint checkpoint() const;
  bool finished() const noexcept { return step_ >= total_; }
  std::uint64_t current_step() const noexcept { return step_; }
  std::uint64_t total() const noexcept { return total_; }
  const TrainConfig& config() const noexcept { return cfg_; }
  const EncoderParams& params() const noexcept { return params_; }
  const MemoryBank& bank() const noexcept { return bank_; }

  /// Embedding pairs (u_i, v_i) of a triplet split under the current parameters.
  struct SideEmbeddings {
    Matrix queries;
    Matrix targets;
  };
  SideEmbeddings embed(const std::vector<data::TripletSample>& samples) const;

 private:
  struct Frozen {
    Matrix ref_images;
    Matrix manip_texts;
    Matrix target_images;
    Matrix captions;
  };
  static Frozen extract(const data::Dataset& ds, const std::vector<data::TripletSample>& s);
  StepRecord step_unchecked();
  void prepare();
  void prefill_bank();

  TrainConfig cfg_;
  const data::Dataset* dataset_;
  std::uint64_t total_ = 0;
  std::uint64_t step_ = 0;
  EncoderParams params_;
  AdamWState optimizer_;
  MemoryBank bank_;
  Rng rng_;
  Frozen train_;
  Frozen queries_;
  Matrix gallery_images_;
  Matrix gallery_captions_;
  std::vector<std::string> train_ids_;
};

struct TrainOptions {
  /// Output directory for metrics.csv, metrics.jsonl, losses.csv and
  /// checkpoints. Empty keeps everything in memory.
  std::filesystem::path out_dir;
  std::optional<Checkpoint> resume;
  /// Stop once this many steps have completed (the run is resumable).
  std::optional<std::uint64_t> stop_at;
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const eval::MetricsRecord&)> on_eval;
};

struct TrainResult {
  Checkpoint final_checkpoint;
  std::vector<eval::MetricsRecord> metrics;
  std::vector<StepRecord> losses;
};

TrainResult train(const TrainConfig& cfg, const data::Dataset& dataset, const TrainOptions& options = {});

std::string loss_csv_header();
std::string loss_csv_row(const StepRecord& r);

/// JSONL with one row per side per sample: {"index","id","side","embedding"}.
/// Returns the number of rows written.
std::size_t dump_embeddings(const Checkpoint& checkpoint, const data::Dataset& dataset,
                            const std::filesystem::path& out);

}  // namespace csmcir::harness

#endif  // CSMCIR_HARNESS_TRAINER_HPP
