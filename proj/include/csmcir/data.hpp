// Triplet data: synthetic generation with a known ground truth, the frozen
// feature extractor, and JSONL ingestion.
//
// Synthetic construction. Latent codes x ~ N(0, I_L). A fixed set of A
// attribute shifts s_a. For a triplet with target latent x_t and attribute a
// the reference latent is r = x_t - s_a, so r + s_a is exactly the target.
// Raw features are fixed random linear maps of the latents plus N(0, σ²)
// noise: reference/target images through the image map, the manipulation
// through its own map applied to s_a, the caption through the caption map
// applied to the target latent. The evaluation gallery is noiseless.

#ifndef CSMCIR_DATA_HPP
#define CSMCIR_DATA_HPP

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "csmcir/eval.hpp"
#include "csmcir/numerics.hpp"

namespace csmcir::data {

struct TripletSample {
  std::string id;
  Vector ref_features;
  Vector manip_features;
  Vector target_features;
  Vector caption_features;
  std::size_t target_index = 0;

  bool operator==(const TripletSample&) const = default;
};

struct GalleryItem {
  std::string id;
  Vector image_features;
  Vector caption_features;

  bool operator==(const GalleryItem&) const = default;
};

struct SyntheticConfig {
  std::size_t latent_dim = 8;      // L
  std::size_t raw_dim = 32;        // d_raw
  std::size_t feature_dim = 16;    // d, frozen extractor output
  std::size_t num_attributes = 8;  // A
  std::size_t num_samples = 512;   // N training triplets
  std::size_t train_pool = 128;    // distinct training target latents
  std::size_t gallery_size = 256;
  std::size_t num_queries = 256;   // held-out queries against the gallery
  std::size_t subset_size = 6;     // candidates per query for subset recall
  double noise = 0.05;             // σ
  double shift_scale = 1.5;        // |s_a|
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const SyntheticConfig&) const = default;
};

nlohmann::json synthetic_config_to_json(const SyntheticConfig& cfg);
/// Missing keys keep their defaults; unknown keys throw SchemaError.
SyntheticConfig synthetic_config_from_json(const nlohmann::json& j);

/// Fixed random projection d_raw -> d, then tanh and L2 normalization.
class FrozenExtractor {
 public:
  FrozenExtractor() = default;
  FrozenExtractor(std::uint64_t seed, std::size_t raw_dim, std::size_t feature_dim);

  Vector extract(std::span<const double> raw) const;
  Matrix extract_rows(const std::vector<Vector>& raws) const;

  std::uint64_t seed() const noexcept { return seed_; }
  std::size_t raw_dim() const noexcept { return projection_.cols(); }
  std::size_t feature_dim() const noexcept { return projection_.rows(); }

 private:
  std::uint64_t seed_ = 0;
  Matrix projection_;  // d x d_raw
};

struct Dataset {
  SyntheticConfig config;  // for loaded external data only the dims are meaningful
  bool synthetic = false;
  std::vector<TripletSample> train;
  std::vector<TripletSample> queries;
  std::vector<GalleryItem> gallery;
  std::vector<std::vector<std::size_t>> subsets;  // per query, empty when absent
  std::uint64_t image_projection_seed = 0;
  std::uint64_t text_projection_seed = 0;
  eval::RecallMap oracle_recall;  // latent-space retrieval ceiling on the queries

  FrozenExtractor image_extractor() const;
  FrozenExtractor text_extractor() const;
  std::size_t raw_dim() const;
};

/// Pure function of the config.
Dataset generate_synthetic(const SyntheticConfig& cfg);

/// Brute-force latent-space retrieval from the noisy observations: least
/// squares recovery of the reference latent, nearest attribute shift, then
/// Euclidean ranking of the gallery latents.
eval::RecallMap oracle_latent_recall(const SyntheticConfig& cfg, const Dataset& dataset,
                                     std::span<const int> ks);

/// Throws ContractError if two rows lie within `tolerance` of each other.
void check_no_collisions(const Matrix& embeddings, double tolerance = 1e-9);

// ---- JSONL ----------------------------------------------------------------

/// One object per line with the TripletSample fields. `caption` (text) may
/// replace `caption_features`; it is embedded with the hashing text embedder
/// at the width of `ref_features`. Optional `subset` arrays are returned
/// through `subsets` when non-null.
std::vector<TripletSample> load_triplets_jsonl(const std::filesystem::path& path,
                                               std::vector<std::vector<std::size_t>>* subsets = nullptr);
void write_triplets_jsonl(const std::filesystem::path& path, const std::vector<TripletSample>& samples,
                          const std::vector<std::vector<std::size_t>>* subsets = nullptr);

std::vector<GalleryItem> load_gallery_jsonl(const std::filesystem::path& path);
void write_gallery_jsonl(const std::filesystem::path& path, const std::vector<GalleryItem>& items);

/// Directory layout: train.jsonl, queries.jsonl, gallery.jsonl, dataset.json.
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace csmcir::data

#endif  // CSMCIR_DATA_HPP
