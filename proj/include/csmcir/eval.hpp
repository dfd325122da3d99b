// Exact retrieval ranking and recall metrics.

#ifndef CSMCIR_EVAL_HPP
#define CSMCIR_EVAL_HPP

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "csmcir/numerics.hpp"

namespace csmcir::eval {

struct RankingResult {
  /// order[q] lists gallery indices by descending score, ties by index.
  std::vector<std::vector<std::uint32_t>> order;
  /// 1-based rank of the ground truth of each query.
  std::vector<std::size_t> ground_truth_rank;
  std::vector<std::size_t> ground_truth;
};

using RecallMap = std::map<int, double>;

/// Ranks a query-by-gallery score matrix.
RankingResult rank_scores(const Matrix& scores, std::span<const std::size_t> ground_truth);

/// Dot-product ranking of unit-norm query rows against gallery rows.
RankingResult rank_gallery(const Matrix& queries, const Matrix& gallery,
                           std::span<const std::size_t> ground_truth);

/// Fraction of queries with ground-truth rank <= K, for every K in `ks`.
RecallMap recall_at_k(const RankingResult& result, std::span<const int> ks);

/// Recall when each query only competes against its own candidate subset.
/// The subset order is the global order restricted to the subset.
RecallMap subset_recall_at_k(const RankingResult& result,
                             const std::vector<std::vector<std::size_t>>& subsets,
                             std::span<const int> ks);

inline constexpr int kRecallKs[] = {1, 5, 10, 50};
inline constexpr int kSubsetKs[] = {1, 2, 3};

struct MetricsRecord {
  std::uint64_t step = 0;
  double loss_cl = 0.0;
  double loss_cos = 0.0;
  double loss_total = 0.0;
  RecallMap recall;
  RecallMap subset_recall;

  bool operator==(const MetricsRecord&) const = default;
};

/// Fixed CSV header: step,loss_cl,loss_cos,loss_total,recall@1,...,subset_recall@3
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRecord& r);
std::string metrics_json_line(const MetricsRecord& r);
MetricsRecord parse_metrics_json_line(const std::string& line);

/// Appends records to `<stem>.csv` and `<stem>.jsonl`, writing the CSV header
/// when the file is new or empty.
class MetricsWriter {
 public:
  MetricsWriter(const std::filesystem::path& csv, const std::filesystem::path& jsonl);
  void append(const MetricsRecord& r);

 private:
  std::ofstream csv_;
  std::ofstream jsonl_;
};

}  // namespace csmcir::eval

#endif  // CSMCIR_EVAL_HPP
