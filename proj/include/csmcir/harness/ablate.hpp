// Grid sweeps over bank policy, memory size, age threshold and seed.

#ifndef CSMCIR_HARNESS_ABLATE_HPP
#define CSMCIR_HARNESS_ABLATE_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "csmcir/data.hpp"
#include "csmcir/eval.hpp"
#include "csmcir/harness/config.hpp"

namespace csmcir::harness {

/// Cells are the cartesian product policies x memory_sizes x n_max x seeds.
/// Axes left empty take the base config's value.
struct SweepSpec {
  std::vector<BankPolicy> policies;
  std::vector<std::size_t> memory_sizes;
  std::vector<std::uint64_t> n_max;
  std::vector<std::uint64_t> seeds;
  std::uint64_t steps = 0;  // 0 = base config's budget
};

SweepSpec parse_sweep_spec(std::string_view toml_text, std::string_view source = "sweep");
SweepSpec load_sweep_spec(const std::filesystem::path& path);

struct CellResult {
  TrainConfig config;
  bool ok = false;
  std::string error;
  eval::MetricsRecord final_metrics;
};

/// Every cell's config, in sweep order.
std::vector<TrainConfig> expand_sweep(const TrainConfig& base, const SweepSpec& sweep);

/// Runs every cell (OpenMP-parallel over cells). A failing cell is reported,
/// not rethrown.
std::vector<CellResult> ablate(const TrainConfig& base, const SweepSpec& sweep, const data::Dataset& dataset);

/// Mean final recall per (policy, memory size, n_max) over successful seeds.
struct SummaryRow {
  BankPolicy policy;
  std::size_t memory_size;
  std::uint64_t n_max;
  std::size_t seeds_ok = 0;
  std::size_t seeds_failed = 0;
  eval::RecallMap mean_recall;
  eval::RecallMap mean_subset_recall;
};
std::vector<SummaryRow> summarize(const std::vector<CellResult>& cells);

std::string cells_csv(const std::vector<CellResult>& cells);
std::string summary_csv(const std::vector<SummaryRow>& rows);

}  // namespace csmcir::harness

#endif  // CSMCIR_HARNESS_ABLATE_HPP
