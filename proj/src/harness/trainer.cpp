#include "csmcir/harness/trainer.hpp"

#include <fmt/format.h>

#include <cassert>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>

#include "csmcir/error.hpp"
#include "csmcir/kernels.hpp"

namespace csmcir::harness {

namespace {

constexpr std::uint64_t kInitTag = 1;
constexpr std::uint64_t kPrefillTag = 2;
constexpr std::uint64_t kEpochTagBase = 0x1000;

#ifdef NDEBUG
constexpr bool kDebugBuild = false;
#else
constexpr bool kDebugBuild = true;
#endif

std::vector<ModalPair> pairs_of(const Matrix& images, const Matrix& texts, std::span<const std::size_t> rows) {
  std::vector<ModalPair> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(make_modal_pair(images.row(r), texts.row(r)));
  return out;
}

std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

Matrix gather(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(m.row(rows[i]).begin(), m.row(rows[i]).end(), out.row(i).begin());
  return out;
}

// Rows 1..K of an encoder output.
Matrix query_token_rows(const EncoderOutput& out) {
  const std::size_t k = out.num_query_tokens();
  Matrix t(k, out.tokens.cols());
  for (std::size_t r = 0; r < k; ++r) std::copy(out.tokens.row(r + 1).begin(), out.tokens.row(r + 1).end(), t.row(r).begin());
  return t;
}

}  // namespace

std::uint64_t total_steps(const TrainConfig& cfg, std::size_t num_samples) {
  if (cfg.epochs == 0) return cfg.steps;
  return cfg.epochs * (num_samples / cfg.batch_size);
}

std::vector<std::size_t> batch_indices(const TrainConfig& cfg, std::size_t num_samples, std::uint64_t step) {
  const std::size_t per_epoch = num_samples / cfg.batch_size;
  if (per_epoch == 0) throw ContractError("training set is smaller than one batch");
  const std::uint64_t epoch = step / per_epoch;
  const std::size_t offset = static_cast<std::size_t>(step % per_epoch) * cfg.batch_size;
  std::vector<std::size_t> order = iota_n(num_samples);
  Rng(cfg.seed).fork(kEpochTagBase + epoch).shuffle(order);
  return {order.begin() + static_cast<std::ptrdiff_t>(offset),
          order.begin() + static_cast<std::ptrdiff_t>(offset + cfg.batch_size)};
}

// ---- construction -----------------------------------------------------------

Trainer::Frozen Trainer::extract(const data::Dataset& ds, const std::vector<data::TripletSample>& s) {
  const data::FrozenExtractor image = ds.image_extractor();
  const data::FrozenExtractor text = ds.text_extractor();
  std::vector<Vector> ref, manip, target, caption;
  for (const auto& t : s) {
    ref.push_back(t.ref_features);
    manip.push_back(t.manip_features);
    target.push_back(t.target_features);
    caption.push_back(t.caption_features);
  }
  return Frozen{image.extract_rows(ref), text.extract_rows(manip), image.extract_rows(target),
                text.extract_rows(caption)};
}

void Trainer::prepare() {
  cfg_.validate();
  const data::Dataset& ds = *dataset_;
  if (ds.train.empty()) throw ContractError("train: dataset has no training samples");
  if (ds.config.feature_dim != cfg_.dims.feature_dim) {
    throw ContractError("train: dataset feature_dim differs from the encoder's");
  }
  if (ds.train.size() < cfg_.batch_size) throw ContractError("train: fewer samples than batch_size");
  if (ds.train.size() < cfg_.memory_size) throw ContractError("train: fewer samples than memory_size");
  total_ = total_steps(cfg_, ds.train.size());
  train_ = extract(ds, ds.train);
  queries_ = extract(ds, ds.queries);
  const data::FrozenExtractor image = ds.image_extractor();
  const data::FrozenExtractor text = ds.text_extractor();
  std::vector<Vector> gi, gc;
  for (const auto& g : ds.gallery) {
    gi.push_back(g.image_features);
    gc.push_back(g.caption_features);
  }
  gallery_images_ = image.extract_rows(gi);
  gallery_captions_ = text.extract_rows(gc);
  train_ids_.clear();
  for (const auto& t : ds.train) train_ids_.push_back(t.id);
}

void Trainer::prefill_bank() {
  if (cfg_.bank_policy == BankPolicy::none) return;
  std::vector<std::size_t> order = iota_n(train_ids_.size());
  Rng(cfg_.seed).fork(kPrefillTag).shuffle(order);
  order.resize(cfg_.memory_size);
  const Matrix images = gather(train_.target_images, order);
  const Matrix captions = gather(train_.captions, order);
  std::vector<std::string> ids;
  for (std::size_t i : order) ids.push_back(train_ids_[i]);
  bank_.fill(BankBatch{images, captions, ids});
}

Trainer::Trainer(const TrainConfig& cfg, const data::Dataset& dataset)
    : cfg_(cfg),
      dataset_(&dataset),
      bank_(BankOptions{cfg.memory_size, cfg.n_max, cfg.exclude_self_similarity}),
      rng_(cfg.seed) {
  prepare();
  Rng init = rng_.fork(kInitTag);
  params_ = EncoderParams::initialize(cfg_.dims, init);
  optimizer_ = AdamWState::zeros(cfg_.dims);
  prefill_bank();
}

Trainer::Trainer(Checkpoint ck, const data::Dataset& dataset)
    : cfg_(std::move(ck.config)),
      dataset_(&dataset),
      step_(ck.step),
      params_(std::move(ck.params)),
      optimizer_(std::move(ck.optimizer)),
      bank_(std::move(ck.bank)),
      rng_(ck.rng) {
  prepare();
  params_.validate();
  if (step_ > total_) throw ContractError("checkpoint step lies beyond the configured run length");
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ck;
  ck.config = cfg_;
  ck.params = params_;
  ck.optimizer = optimizer_;
  ck.bank = bank_;
  ck.step = step_;
  ck.rng = rng_;
  return ck;
}

// ---- one step ---------------------------------------------------------------

StepRecord Trainer::step() {
  if (finished()) throw StateError("train: run already complete");
  try {
    return step_unchecked();
  } catch (const TrainingAborted&) {
    throw;
  } catch (const NonFiniteError& e) {
    // Raised by the forward pass, before any state is mutated.
    throw TrainingAborted(fmt::format("train: step {}: {}", step_, e.what()), checkpoint());
  }
}

StepRecord Trainer::step_unchecked() {
  const std::size_t B = cfg_.batch_size;
  const std::size_t K = cfg_.dims.num_query_tokens;
  const std::vector<std::size_t> batch = batch_indices(cfg_, train_ids_.size(), step_);

  const std::vector<ModalPair> query_pairs = pairs_of(train_.ref_images, train_.manip_texts, batch);
  const std::vector<ModalPair> target_pairs = pairs_of(train_.target_images, train_.captions, batch);
  const std::vector<EncoderOutput> zq = kernels::encode_all(params_, query_pairs);
  const std::vector<EncoderOutput> zt = kernels::encode_all(params_, target_pairs);

  BatchEmbeddings emb;
  emb.queries = Matrix(B, cfg_.dims.embed_dim);
  emb.targets = Matrix(B, cfg_.dims.embed_dim);
  std::vector<Matrix> target_tokens;
  std::vector<std::size_t> selected(B);
  for (std::size_t i = 0; i < B; ++i) {
    const Vector u = query_embedding(zq[i]);
    const TargetSelection v = target_embedding(zt[i], u);
    std::copy(u.begin(), u.end(), emb.queries.row(i).begin());
    std::copy(v.embedding.begin(), v.embedding.end(), emb.targets.row(i).begin());
    selected[i] = v.row;
    target_tokens.push_back(query_token_rows(zt[i]));
  }
  LossConfig loss_cfg{cfg_.tau, cfg_.bank_policy != BankPolicy::none};
  if (loss_cfg.use_memory_negatives) {
    if (cfg_.negative_selection == NegativeSelection::per_anchor) {
      emb.memory = negatives_for_step(bank_, params_);
      emb.tokens_per_entry = K;
    } else {
      emb.memory = negatives_by_entry_cls(bank_, params_);
      emb.tokens_per_entry = 1;
    }
  }

  const TotalLossResult loss = total_loss(emb, target_tokens, params_.alpha.values(), loss_cfg);
  StepRecord rec;
  rec.step = step_;
  rec.loss_cl = loss.loss_cl;
  rec.loss_cos = loss.loss_cos;
  rec.loss_total = loss.loss;
  if (!std::isfinite(loss.loss)) {
    throw TrainingAborted(fmt::format("train: non-finite loss at step {} (cl={}, cos={})", step_, loss.loss_cl,
                                      loss.loss_cos),
                          checkpoint());
  }

  // Upstream gradients on the encoder outputs. Memory negatives are constants.
  EncoderParams grads = EncoderParams::zeros(cfg_.dims);
  for (std::size_t i = 0; i < B; ++i) {
    Matrix dq(K + 1, cfg_.dims.embed_dim);
    std::copy(loss.grad_queries.row(i).begin(), loss.grad_queries.row(i).end(), dq.row(0).begin());
    encode_backward_accumulate(params_, query_pairs[i], dq, grads);

    Matrix dt(K + 1, cfg_.dims.embed_dim);
    for (std::size_t k = 0; k < K; ++k) {
      std::copy(loss.grad_tokens[i].row(k).begin(), loss.grad_tokens[i].row(k).end(), dt.row(k + 1).begin());
    }
    axpy(1.0, loss.grad_targets.row(i), dt.row(selected[i]));
    encode_backward_accumulate(params_, target_pairs[i], dt, grads);
  }
  std::copy(loss.grad_alpha.begin(), loss.grad_alpha.end(), grads.alpha.values().begin());

  const double lr =
      cfg_.lr_schedule == "cosine" ? cosine_lr(step_, total_, cfg_.learning_rate) : cfg_.learning_rate;
  rec.learning_rate = lr;
  try {
    adamw_step(params_, grads, optimizer_, lr,
               AdamWHyper{cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_epsilon, cfg_.weight_decay});
  } catch (const NonFiniteError& e) {
    throw TrainingAborted(fmt::format("train: step {}: {}", step_, e.what()), checkpoint());
  }

  const Matrix images = gather(train_.target_images, batch);
  const Matrix captions = gather(train_.captions, batch);
  std::vector<std::string> ids;
  for (std::size_t i : batch) ids.push_back(train_ids_[i]);
  const BankBatch offered{images, captions, ids};
  if (cfg_.bank_policy == BankPolicy::eamb) {
    const EntropyReport report = bank_.update(offered);
    rec.replacements = report.replacements.size();
    if (cfg_.check_invariants || kDebugBuild) {
      bank_.validate();
      for (const auto& r : report.replacements) {
        if (!(report.h_batch[r.batch_index] > report.h_mem_retained[r.memory_index])) {
          throw StateError("train: replacement without an entropy gain");
        }
      }
    }
  } else if (cfg_.bank_policy == BankPolicy::fifo) {
    rec.replacements = bank_.fifo_update(offered).size();
    if (cfg_.check_invariants || kDebugBuild) bank_.validate();
  }

  ++step_;
  return rec;
}

// ---- evaluation -------------------------------------------------------------

Trainer::SideEmbeddings Trainer::embed(const std::vector<data::TripletSample>& samples) const {
  const Frozen f = extract(*dataset_, samples);
  const std::vector<std::size_t> rows = iota_n(samples.size());
  const auto zq = kernels::encode_all(params_, pairs_of(f.ref_images, f.manip_texts, rows));
  const auto zt = kernels::encode_all(params_, pairs_of(f.target_images, f.captions, rows));
  SideEmbeddings out{Matrix(samples.size(), cfg_.dims.embed_dim), Matrix(samples.size(), cfg_.dims.embed_dim)};
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Vector u = query_embedding(zq[i]);
    const Vector v = target_embedding(zt[i], u).embedding;
    std::copy(u.begin(), u.end(), out.queries.row(i).begin());
    std::copy(v.begin(), v.end(), out.targets.row(i).begin());
  }
  return out;
}

eval::MetricsRecord Trainer::evaluate(const StepRecord& last) const {
  eval::MetricsRecord m;
  m.step = step_;
  m.loss_cl = last.loss_cl;
  m.loss_cos = last.loss_cos;
  m.loss_total = last.loss_total;
  const data::Dataset& ds = *dataset_;
  if (ds.queries.empty() || ds.gallery.empty()) return m;

  const std::size_t K = cfg_.dims.num_query_tokens;
  const std::vector<std::size_t> qrows = iota_n(ds.queries.size());
  const std::vector<std::size_t> grows = iota_n(ds.gallery.size());
  const auto zq = kernels::encode_all(params_, pairs_of(queries_.ref_images, queries_.manip_texts, qrows));
  const auto zg = kernels::encode_all(params_, pairs_of(gallery_images_, gallery_captions_, grows));
  Matrix u(zq.size(), cfg_.dims.embed_dim);
  for (std::size_t q = 0; q < zq.size(); ++q) {
    std::copy(zq[q].tokens.row(0).begin(), zq[q].tokens.row(0).end(), u.row(q).begin());
  }
  Matrix tokens(zg.size() * K, cfg_.dims.embed_dim);
  for (std::size_t g = 0; g < zg.size(); ++g) {
    for (std::size_t k = 0; k < K; ++k) {
      std::copy(zg[g].tokens.row(k + 1).begin(), zg[g].tokens.row(k + 1).end(), tokens.row(g * K + k).begin());
    }
  }
  std::vector<std::size_t> truth;
  for (const auto& q : ds.queries) truth.push_back(q.target_index);
  const eval::RankingResult ranking = eval::rank_scores(kernels::max_token_scores(u, tokens, K), truth);
  m.recall = eval::recall_at_k(ranking, eval::kRecallKs);
  const bool have_subsets = ds.subsets.size() == ds.queries.size() &&
                            std::all_of(ds.subsets.begin(), ds.subsets.end(), [](const auto& s) { return !s.empty(); });
  if (have_subsets) m.subset_recall = eval::subset_recall_at_k(ranking, ds.subsets, eval::kSubsetKs);
  return m;
}

// ---- the run ----------------------------------------------------------------

std::string loss_csv_header() { return "step,loss_cl,loss_cos,loss_total,learning_rate,replacements"; }

std::string loss_csv_row(const StepRecord& r) {
  return fmt::format("{},{},{},{},{},{}", r.step, r.loss_cl, r.loss_cos, r.loss_total, r.learning_rate,
                     r.replacements);
}

TrainResult train(const TrainConfig& cfg, const data::Dataset& dataset, const TrainOptions& options) {
  Trainer trainer = options.resume ? Trainer(*options.resume, dataset) : Trainer(cfg, dataset);
  const TrainConfig& c = trainer.config();
  const bool to_disk = !options.out_dir.empty();

  std::optional<eval::MetricsWriter> metrics;
  std::ofstream losses;
  if (to_disk) {
    std::filesystem::create_directories(options.out_dir);
    metrics.emplace(options.out_dir / "metrics.csv", options.out_dir / "metrics.jsonl");
    const auto loss_path = options.out_dir / "losses.csv";
    const bool fresh = !std::filesystem::exists(loss_path) || std::filesystem::file_size(loss_path) == 0;
    losses.open(loss_path, std::ios::app | std::ios::binary);
    if (!losses) throw std::runtime_error("cannot open " + loss_path.string());
    if (fresh) losses << loss_csv_header() << '\n';
  }

  TrainResult result;
  const std::uint64_t stop = options.stop_at ? std::min(*options.stop_at, trainer.total()) : trainer.total();
  while (trainer.current_step() < stop) {
    StepRecord rec;
    try {
      rec = trainer.step();
    } catch (const TrainingAborted& e) {
      if (to_disk) save_checkpoint(options.out_dir / "checkpoint_last_good.bin", e.last_good());
      throw;
    }
    result.losses.push_back(rec);
    if (to_disk) losses << loss_csv_row(rec) << '\n';
    if (options.on_step) options.on_step(rec);

    const std::uint64_t done = trainer.current_step();
    if (done % c.eval_interval == 0 || done == trainer.total()) {
      const eval::MetricsRecord m = trainer.evaluate(rec);
      result.metrics.push_back(m);
      if (metrics) metrics->append(m);
      if (options.on_eval) options.on_eval(m);
    }
    if (to_disk && c.checkpoint_interval > 0 && done % c.checkpoint_interval == 0) {
      save_checkpoint(options.out_dir / fmt::format("checkpoint_step{}.bin", done), trainer.checkpoint());
    }
  }
  result.final_checkpoint = trainer.checkpoint();
  if (to_disk) {
    losses.flush();
    save_checkpoint(options.out_dir / "checkpoint.bin", result.final_checkpoint);
  }
  return result;
}

// ---- embedding dump ---------------------------------------------------------

std::size_t dump_embeddings(const Checkpoint& checkpoint, const data::Dataset& dataset,
                            const std::filesystem::path& out) {
  const Trainer trainer(checkpoint, dataset);
  const Trainer::SideEmbeddings e = trainer.embed(dataset.train);
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  std::ofstream file(out, std::ios::binary | std::ios::trunc);
  if (!file) throw std::runtime_error("cannot write " + out.string());
  std::size_t rows = 0;
  for (std::size_t i = 0; i < dataset.train.size(); ++i) {
    for (const char* side : {"query", "target"}) {
      const Matrix& m = side[0] == 'q' ? e.queries : e.targets;
      nlohmann::ordered_json j;
      j["index"] = i;
      j["id"] = dataset.train[i].id;
      j["side"] = side;
      j["embedding"] = m.row_copy(i);
      file << j.dump() << '\n';
      ++rows;
    }
  }
  if (!file) throw std::runtime_error("short write on " + out.string());
  return rows;
}

}  // namespace csmcir::harness
