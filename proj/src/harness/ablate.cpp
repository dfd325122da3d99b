#include "csmcir/harness/ablate.hpp"

#include <fmt/format.h>

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <toml.hpp>

#include "csmcir/error.hpp"
#include "csmcir/harness/trainer.hpp"

namespace csmcir::harness {

namespace {

template <typename T, typename Convert>
std::vector<T> read_array(const toml::table& root, const char* key, Convert convert) {
  std::vector<T> out;
  const toml::node* node = root.get(key);
  if (node == nullptr) return out;
  const toml::array* arr = node->as_array();
  if (arr == nullptr) throw SchemaError(std::string(key) + " must be an array", node->source().begin.line);
  for (const toml::node& item : *arr) out.push_back(convert(item, key));
  return out;
}

std::uint64_t as_count(const toml::node& n, const char* key) {
  if (!n.is_integer() || *n.value<std::int64_t>() < 0) {
    throw SchemaError(std::string(key) + " entries must be non-negative integers", n.source().begin.line);
  }
  return static_cast<std::uint64_t>(*n.value<std::int64_t>());
}

BankPolicy as_policy(const toml::node& n, const char* key) {
  if (!n.is_string()) throw SchemaError(std::string(key) + " entries must be strings", n.source().begin.line);
  return parse_bank_policy(*n.value<std::string>());
}

}  // namespace

SweepSpec parse_sweep_spec(std::string_view text, std::string_view source) {
  toml::table root;
  try {
    root = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    throw SchemaError(std::string(source) + ": " + std::string(e.description()), e.source().begin.line);
  }
  static const std::set<std::string, std::less<>> known = {"policies", "memory_sizes", "n_max", "seeds", "steps"};
  for (const auto& [key, node] : root) {
    if (!known.contains(key.str())) {
      throw SchemaError("unknown sweep key '" + std::string(key.str()) + "'", key.source().begin.line);
    }
  }
  SweepSpec s;
  s.policies = read_array<BankPolicy>(root, "policies", as_policy);
  for (std::uint64_t m : read_array<std::uint64_t>(root, "memory_sizes", as_count)) s.memory_sizes.push_back(m);
  s.n_max = read_array<std::uint64_t>(root, "n_max", as_count);
  s.seeds = read_array<std::uint64_t>(root, "seeds", as_count);
  if (const toml::node* n = root.get("steps")) s.steps = as_count(*n, "steps");
  return s;
}

SweepSpec load_sweep_spec(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_sweep_spec(ss.str(), path.string());
}

std::vector<TrainConfig> expand_sweep(const TrainConfig& base, const SweepSpec& sweep) {
  auto or_base = [](const auto& axis, auto value) {
    using T = typename std::decay_t<decltype(axis)>::value_type;
    return axis.empty() ? std::vector<T>{static_cast<T>(value)} : axis;
  };
  std::vector<TrainConfig> cells;
  for (BankPolicy p : or_base(sweep.policies, base.bank_policy)) {
    for (std::size_t m : or_base(sweep.memory_sizes, base.memory_size)) {
      for (std::uint64_t n : or_base(sweep.n_max, base.n_max)) {
        for (std::uint64_t seed : or_base(sweep.seeds, base.seed)) {
          TrainConfig c = base;
          c.bank_policy = p;
          c.memory_size = p == BankPolicy::none ? 0 : m;
          c.n_max = n;
          c.seed = seed;
          c.out_dir.clear();
          if (sweep.steps > 0) {
            c.steps = sweep.steps;
            c.epochs = 0;
          }
          cells.push_back(std::move(c));
        }
      }
    }
  }
  return cells;
}

std::vector<CellResult> ablate(const TrainConfig& base, const SweepSpec& sweep, const data::Dataset& dataset) {
  const std::vector<TrainConfig> configs = expand_sweep(base, sweep);
  std::vector<CellResult> results(configs.size());
  const auto n = static_cast<std::ptrdiff_t>(configs.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    CellResult& cell = results[static_cast<std::size_t>(i)];
    cell.config = configs[static_cast<std::size_t>(i)];
    try {
      const TrainResult r = train(cell.config, dataset);
      if (r.metrics.empty()) throw StateError("cell produced no evaluation");
      cell.final_metrics = r.metrics.back();
      cell.ok = true;
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
  }
  return results;
}

std::vector<SummaryRow> summarize(const std::vector<CellResult>& cells) {
  std::vector<SummaryRow> rows;
  std::map<std::tuple<int, std::size_t, std::uint64_t>, std::size_t> index;
  for (const auto& c : cells) {
    const auto key = std::make_tuple(static_cast<int>(c.config.bank_policy), c.config.memory_size, c.config.n_max);
    auto [it, inserted] = index.try_emplace(key, rows.size());
    if (inserted) {
      SummaryRow fresh;
      fresh.policy = c.config.bank_policy;
      fresh.memory_size = c.config.memory_size;
      fresh.n_max = c.config.n_max;
      rows.push_back(std::move(fresh));
    }
    SummaryRow& row = rows[it->second];
    if (!c.ok) {
      ++row.seeds_failed;
      continue;
    }
    ++row.seeds_ok;
    for (const auto& [k, v] : c.final_metrics.recall) row.mean_recall[k] += v;
    for (const auto& [k, v] : c.final_metrics.subset_recall) row.mean_subset_recall[k] += v;
  }
  for (auto& row : rows) {
    if (row.seeds_ok == 0) continue;
    for (auto& [k, v] : row.mean_recall) v /= static_cast<double>(row.seeds_ok);
    for (auto& [k, v] : row.mean_subset_recall) v /= static_cast<double>(row.seeds_ok);
  }
  return rows;
}

namespace {

std::string recall_columns(const std::string& prefix) {
  std::string h;
  for (int k : eval::kRecallKs) h += fmt::format(",{}recall@{}", prefix, k);
  for (int k : eval::kSubsetKs) h += fmt::format(",{}subset_recall@{}", prefix, k);
  return h;
}

std::string recall_values(const eval::RecallMap& recall, const eval::RecallMap& subset) {
  std::string s;
  for (int k : eval::kRecallKs) {
    auto it = recall.find(k);
    s += it == recall.end() ? std::string(",") : fmt::format(",{}", it->second);
  }
  for (int k : eval::kSubsetKs) {
    auto it = subset.find(k);
    s += it == subset.end() ? std::string(",") : fmt::format(",{}", it->second);
  }
  return s;
}

// CSV field with embedded quotes doubled.
std::string quoted(const std::string& s) {
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch == '\n' ? ' ' : ch;
  }
  return out + "\"";
}

}  // namespace

std::string cells_csv(const std::vector<CellResult>& cells) {
  std::string out = "policy,memory_size,n_max,seed,status,step" + recall_columns("") + ",error\n";
  for (const auto& c : cells) {
    out += fmt::format("{},{},{},{},{},", to_string(c.config.bank_policy), c.config.memory_size, c.config.n_max,
                       c.config.seed, c.ok ? "ok" : "failed");
    if (c.ok) {
      out += fmt::format("{}", c.final_metrics.step);
      out += recall_values(c.final_metrics.recall, c.final_metrics.subset_recall);
      out += ",\n";
    } else {
      out += recall_values({}, {});
      out += "," + quoted(c.error) + "\n";
    }
  }
  return out;
}

std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::string out = "policy,memory_size,n_max,seeds_ok,seeds_failed" + recall_columns("mean_") + "\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{},{}", to_string(r.policy), r.memory_size, r.n_max, r.seeds_ok, r.seeds_failed);
    out += recall_values(r.mean_recall, r.mean_subset_recall);
    out += "\n";
  }
  return out;
}

}  // namespace csmcir::harness
