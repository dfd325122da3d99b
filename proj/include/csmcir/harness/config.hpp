// Training configuration and its TOML / JSON forms.

#ifndef CSMCIR_HARNESS_CONFIG_HPP
#define CSMCIR_HARNESS_CONFIG_HPP

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "csmcir/data.hpp"
#include "csmcir/encoder.hpp"

namespace csmcir::harness {

enum class BankPolicy { eamb, fifo, none };
/// How a memory entry's K tokens collapse into one negative.
enum class NegativeSelection { per_anchor, entry_cls };

std::string_view to_string(BankPolicy p);
BankPolicy parse_bank_policy(std::string_view s);
std::string_view to_string(NegativeSelection s);
NegativeSelection parse_negative_selection(std::string_view s);

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t memory_size = 64;
  std::uint64_t n_max = 10;
  EncoderDims dims;
  double tau = 10.0;
  double learning_rate = 1e-2;
  double weight_decay = 0.05;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t steps = 500;
  std::uint64_t epochs = 0;  // when nonzero, overrides steps
  std::string lr_schedule = "cosine";
  BankPolicy bank_policy = BankPolicy::eamb;
  NegativeSelection negative_selection = NegativeSelection::per_anchor;
  bool exclude_self_similarity = false;
  std::uint64_t eval_interval = 100;
  std::uint64_t checkpoint_interval = 0;  // 0 = final checkpoint only
  bool check_invariants = false;
  std::uint64_t seed = 1;

  std::string data_dir;  // dataset directory; empty = generate from `synthetic`
  std::optional<data::SyntheticConfig> synthetic;
  std::string out_dir;

  /// Throws ContractError on an invalid combination.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Unknown keys are rejected with SchemaError.
TrainConfig parse_train_config(std::string_view toml_text, std::string_view source = "config");
TrainConfig load_train_config(const std::filesystem::path& path);

/// Synthetic dataset generation parameters plus `out_dir`.
struct GenDataConfig {
  data::SyntheticConfig synthetic;
  std::string out_dir;
};
GenDataConfig load_gen_data_config(const std::filesystem::path& path);

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// The dataset a config refers to: loaded from data_dir, or generated.
data::Dataset resolve_dataset(const TrainConfig& cfg);

}  // namespace csmcir::harness

#endif  // CSMCIR_HARNESS_CONFIG_HPP
