// Command-line entry point: train, eval, ablate, dump-embeddings, gen-data, mcot run.

#include <fmt/format.h>

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <memory>
#include <nlohmann/json.hpp>

#include "csmcir/data.hpp"
#include "csmcir/harness/ablate.hpp"
#include "csmcir/harness/checkpoint.hpp"
#include "csmcir/harness/config.hpp"
#include "csmcir/harness/trainer.hpp"
#include "csmcir/mcot.hpp"

namespace fs = std::filesystem;
using namespace csmcir;
using namespace csmcir::harness;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

nlohmann::ordered_json recall_json(const eval::RecallMap& m) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [k, v] : m) j[std::to_string(k)] = v;
  return j;
}

int run_train(const fs::path& config_path, const std::string& out_override, const std::string& resume) {
  TrainConfig cfg = load_train_config(config_path);
  if (!out_override.empty()) cfg.out_dir = out_override;
  if (cfg.out_dir.empty()) throw ContractError("train needs out_dir in the config or --out");
  const data::Dataset ds = resolve_dataset(cfg);
  TrainOptions opts;
  opts.out_dir = cfg.out_dir;
  if (!resume.empty()) {
    opts.resume = load_checkpoint(resume);
    opts.resume->config.out_dir = cfg.out_dir;
  }
  opts.on_eval = [](const eval::MetricsRecord& m) { std::cout << eval::metrics_json_line(m) << '\n'; };
  const TrainResult r = train(cfg, ds, opts);
  fmt::print(stderr, "trained {} steps; checkpoint at {}\n", r.final_checkpoint.step,
             (fs::path(cfg.out_dir) / "checkpoint.bin").string());
  if (!ds.oracle_recall.empty()) {
    fmt::print(stderr, "oracle ceiling recall@10 = {}\n", ds.oracle_recall.at(10));
  }
  return 0;
}

int run_eval(const fs::path& checkpoint, const fs::path& data_dir) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const data::Dataset ds = data::load_dataset(data_dir);
  const Trainer trainer(ck, ds);
  const eval::MetricsRecord m = trainer.evaluate(StepRecord{});
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["recall"] = recall_json(m.recall);
  j["subset_recall"] = recall_json(m.subset_recall);
  j["oracle_recall"] = recall_json(ds.oracle_recall);
  std::cout << j.dump() << '\n';
  return 0;
}

int run_ablate(const fs::path& config_path, const fs::path& sweep_path, const std::string& out_override) {
  const TrainConfig base = load_train_config(config_path);
  const SweepSpec sweep = load_sweep_spec(sweep_path);
  const fs::path out = out_override.empty() ? fs::path(base.out_dir) : fs::path(out_override);
  if (out.empty()) throw ContractError("ablate needs out_dir in the config or --out");
  const data::Dataset ds = resolve_dataset(base);
  const std::vector<CellResult> cells = ablate(base, sweep, ds);
  write_text(out / "cells.csv", cells_csv(cells));
  const std::string summary = summary_csv(summarize(cells));
  write_text(out / "summary.csv", summary);
  std::cout << summary;
  std::size_t failed = 0;
  for (const auto& c : cells) failed += c.ok ? 0 : 1;
  if (failed > 0) fmt::print(stderr, "{} of {} cells failed; see cells.csv\n", failed, cells.size());
  return failed == cells.size() ? 1 : 0;
}

int run_dump(const fs::path& checkpoint, const fs::path& out) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const data::Dataset ds = resolve_dataset(ck.config);
  const std::size_t rows = dump_embeddings(ck, ds, out);
  fmt::print(stderr, "wrote {} rows to {}\n", rows, out.string());
  return 0;
}

int run_gen_data(const fs::path& config_path) {
  const GenDataConfig g = load_gen_data_config(config_path);
  const data::Dataset ds = data::generate_synthetic(g.synthetic);
  data::write_dataset(g.out_dir, ds);
  fmt::print(stderr, "wrote {} train / {} query / {} gallery rows to {}; oracle recall@10 = {}\n",
             ds.train.size(), ds.queries.size(), ds.gallery.size(), g.out_dir, ds.oracle_recall.at(10));
  return 0;
}

int run_mcot(const fs::path& manifest_path, const fs::path& out, const std::string& backend_spec,
             std::size_t concurrency, const std::string& prompts_path, std::size_t retry_limit,
             const std::string& model) {
  const std::vector<std::string> manifest = mcot::read_manifest(manifest_path);
  const mcot::McotPromptSet prompts =
      prompts_path.empty() ? mcot::McotPromptSet::defaults() : mcot::McotPromptSet::load_json(prompts_path);
  std::unique_ptr<mcot::TextBackend> backend;
  if (backend_spec == "mock") {
    backend = std::make_unique<mcot::MockBackend>();
  } else {
    mcot::BackendConfig bc;
    bc.endpoint = backend_spec;
    bc.model = model;
    bc.max_in_flight = concurrency;
    bc.retry_limit = retry_limit;
    backend = std::make_unique<mcot::HttpBackend>(bc);
  }
  mcot::BatchOptions opts;
  opts.concurrency = concurrency;
  opts.generation.model = model;
  opts.generation.retry_limit = retry_limit;
  const mcot::BatchSummary s = mcot::run_batch(manifest, prompts, *backend, out, opts);
  for (const auto& e : s.retry_log) {
    fmt::print(stderr, "retry {} stage {} attempt {}: {}\n", e.image_id, e.stage + 1, e.attempt, e.error);
  }
  for (const auto& f : s.failures) fmt::print(stderr, "failed {}: {}\n", f.image_id, f.error);
  fmt::print(stderr, "{} images: {} generated, {} cached, {} failed, {} retries\n", s.total, s.generated,
             s.cached, s.failed, s.retries);
  return s.failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"csmcir: memory-bank contrastive training toolkit for composed image retrieval"};
  app.require_subcommand(1);

  std::string config, sweep, checkpoint, data_dir, out, resume;

  auto* train_cmd = app.add_subcommand("train", "Train from a TOML config");
  train_cmd->add_option("--config", config, "TOML config")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", out, "Override out_dir");
  train_cmd->add_option("--resume", resume, "Resume from a checkpoint")->check(CLI::ExistingFile);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset directory");
  eval_cmd->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);

  auto* ablate_cmd = app.add_subcommand("ablate", "Run a grid sweep; writes cells.csv and summary.csv");
  ablate_cmd->add_option("--config", config)->required()->check(CLI::ExistingFile);
  ablate_cmd->add_option("--sweep", sweep)->required()->check(CLI::ExistingFile);
  ablate_cmd->add_option("--out", out, "Output directory (default: out_dir)");

  auto* dump_cmd = app.add_subcommand("dump-embeddings", "Write query/target embeddings as JSONL");
  dump_cmd->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  dump_cmd->add_option("--out", out)->required();

  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset directory");
  gen_cmd->add_option("--config", config)->required()->check(CLI::ExistingFile);

  auto* mcot_cmd = app.add_subcommand("mcot", "Chain-of-thought caption generation");
  mcot_cmd->require_subcommand(1);
  auto* mcot_run = mcot_cmd->add_subcommand("run", "Caption every manifest entry into a JSONL cache");
  std::string manifest, backend = "mock", prompts, model = "mock";
  std::size_t concurrency = 4;
  std::size_t retry_limit = 2;
  mcot_run->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
  mcot_run->add_option("--out", out, "Caption cache (JSONL)")->required();
  mcot_run->add_option("--backend", backend, "Endpoint URL or 'mock'")->capture_default_str();
  mcot_run->add_option("--concurrency", concurrency)->capture_default_str()->check(CLI::PositiveNumber);
  mcot_run->add_option("--prompts", prompts, "Prompt set JSON")->check(CLI::ExistingFile);
  mcot_run->add_option("--retry-limit", retry_limit)->capture_default_str();
  mcot_run->add_option("--model", model)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) return run_train(config, out, resume);
    if (eval_cmd->parsed()) return run_eval(checkpoint, data_dir);
    if (ablate_cmd->parsed()) return run_ablate(config, sweep, out);
    if (dump_cmd->parsed()) return run_dump(checkpoint, out);
    if (gen_cmd->parsed()) return run_gen_data(config);
    if (mcot_run->parsed()) {
      return run_mcot(manifest, out, backend, concurrency, prompts, retry_limit, model);
    }
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 2;
  }
  return 0;
}
