#include "csmcir/eval.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <nlohmann/json.hpp>
#include <unordered_set>

#include "csmcir/error.hpp"
#include "csmcir/kernels.hpp"

namespace csmcir::eval {

using nlohmann::ordered_json;

RankingResult rank_scores(const Matrix& scores, std::span<const std::size_t> ground_truth) {
  if (scores.cols() == 0) throw ContractError("rank_gallery: empty gallery");
  if (ground_truth.size() != scores.rows()) {
    throw ContractError("rank_gallery: one ground-truth index per query required");
  }
  RankingResult res;
  res.order = kernels::argsort_rows_desc(scores);
  res.ground_truth.assign(ground_truth.begin(), ground_truth.end());
  res.ground_truth_rank.resize(scores.rows());
  for (std::size_t q = 0; q < scores.rows(); ++q) {
    if (ground_truth[q] >= scores.cols()) throw ContractError("rank_gallery: ground truth out of range");
    const auto& row = res.order[q];
    const auto it = std::find(row.begin(), row.end(), static_cast<std::uint32_t>(ground_truth[q]));
    res.ground_truth_rank[q] = static_cast<std::size_t>(it - row.begin()) + 1;
  }
  return res;
}

RankingResult rank_gallery(const Matrix& queries, const Matrix& gallery,
                           std::span<const std::size_t> ground_truth) {
  if (gallery.rows() == 0) throw ContractError("rank_gallery: empty gallery");
  return rank_scores(kernels::similarity(queries, gallery), ground_truth);
}

namespace {

void check_ks(std::span<const int> ks) {
  for (int k : ks)
    if (k <= 0) throw ContractError("recall_at_k: K must be positive");
}

RecallMap recall_from_ranks(std::span<const std::size_t> ranks, std::span<const int> ks) {
  RecallMap out;
  for (int k : ks) {
    std::size_t hits = 0;
    for (std::size_t r : ranks) hits += r <= static_cast<std::size_t>(k) ? 1 : 0;
    out[k] = ranks.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(ranks.size());
  }
  return out;
}

}  // namespace

RecallMap recall_at_k(const RankingResult& result, std::span<const int> ks) {
  check_ks(ks);
  return recall_from_ranks(result.ground_truth_rank, ks);
}

RecallMap subset_recall_at_k(const RankingResult& result,
                             const std::vector<std::vector<std::size_t>>& subsets,
                             std::span<const int> ks) {
  check_ks(ks);
  if (subsets.size() != result.order.size()) {
    throw ContractError("subset_recall_at_k: one subset per query required");
  }
  std::vector<std::size_t> ranks(subsets.size());
  for (std::size_t q = 0; q < subsets.size(); ++q) {
    const std::unordered_set<std::size_t> members(subsets[q].begin(), subsets[q].end());
    if (!members.contains(result.ground_truth[q])) {
      throw ContractError("subset_recall_at_k: ground truth missing from subset of query " +
                          std::to_string(q));
    }
    std::size_t rank = 0;
    for (std::uint32_t g : result.order[q]) {
      if (!members.contains(g)) continue;
      ++rank;
      if (g == result.ground_truth[q]) break;
    }
    ranks[q] = rank;
  }
  return recall_from_ranks(ranks, ks);
}

// ---- metrics stream -------------------------------------------------------

std::string metrics_csv_header() {
  std::string h = "step,loss_cl,loss_cos,loss_total";
  for (int k : kRecallKs) h += fmt::format(",recall@{}", k);
  for (int k : kSubsetKs) h += fmt::format(",subset_recall@{}", k);
  return h;
}

std::string metrics_csv_row(const MetricsRecord& r) {
  std::string row = fmt::format("{},{},{},{}", r.step, r.loss_cl, r.loss_cos, r.loss_total);
  for (int k : kRecallKs) {
    auto it = r.recall.find(k);
    row += it == r.recall.end() ? std::string(",") : fmt::format(",{}", it->second);
  }
  for (int k : kSubsetKs) {
    auto it = r.subset_recall.find(k);
    row += it == r.subset_recall.end() ? std::string(",") : fmt::format(",{}", it->second);
  }
  return row;
}

std::string metrics_json_line(const MetricsRecord& r) {
  ordered_json j;
  j["step"] = r.step;
  j["loss_cl"] = r.loss_cl;
  j["loss_cos"] = r.loss_cos;
  j["loss_total"] = r.loss_total;
  ordered_json rec = ordered_json::object();
  for (const auto& [k, v] : r.recall) rec[std::to_string(k)] = v;
  ordered_json sub = ordered_json::object();
  for (const auto& [k, v] : r.subset_recall) sub[std::to_string(k)] = v;
  j["recall"] = rec;
  j["subset_recall"] = sub;
  return j.dump();
}

MetricsRecord parse_metrics_json_line(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  MetricsRecord r;
  r.step = j.at("step").get<std::uint64_t>();
  r.loss_cl = j.at("loss_cl").get<double>();
  r.loss_cos = j.at("loss_cos").get<double>();
  r.loss_total = j.at("loss_total").get<double>();
  for (const auto& [k, v] : j.at("recall").items()) r.recall[std::stoi(k)] = v.get<double>();
  for (const auto& [k, v] : j.at("subset_recall").items()) r.subset_recall[std::stoi(k)] = v.get<double>();
  return r;
}

MetricsWriter::MetricsWriter(const std::filesystem::path& csv, const std::filesystem::path& jsonl) {
  const bool fresh = !std::filesystem::exists(csv) || std::filesystem::file_size(csv) == 0;
  csv_.open(csv, std::ios::app | std::ios::binary);
  jsonl_.open(jsonl, std::ios::app | std::ios::binary);
  if (!csv_ || !jsonl_) throw std::runtime_error("MetricsWriter: cannot open output files");
  if (fresh) csv_ << metrics_csv_header() << '\n';
}

void MetricsWriter::append(const MetricsRecord& r) {
  csv_ << metrics_csv_row(r) << '\n';
  jsonl_ << metrics_json_line(r) << '\n';
  csv_.flush();
  jsonl_.flush();
}

}  // namespace csmcir::eval
