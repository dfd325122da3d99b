#include <algorithm>
#include <condition_variable>
#include <ctime>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include "csmcir/error.hpp"
#include "csmcir/mcot.hpp"

namespace csmcir::mcot {

using nlohmann::ordered_json;

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string record_to_json(const CaptionRecord& r) {
  ordered_json j;
  j["image_id"] = r.image_id;
  j["stage_outputs"] = r.stage_outputs;
  j["final_caption"] = r.final_caption;
  j["backend_name"] = r.backend_name;
  j["timestamp"] = r.timestamp;
  return j.dump();
}

CaptionRecord record_from_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  CaptionRecord r;
  r.image_id = j.at("image_id").get<std::string>();
  const auto& stages = j.at("stage_outputs");
  if (!stages.is_array() || stages.size() != kStageCount) {
    throw SchemaError("caption record must hold 4 stage outputs");
  }
  for (std::size_t i = 0; i < kStageCount; ++i) r.stage_outputs[i] = stages.at(i).get<std::string>();
  r.final_caption = j.at("final_caption").get<std::string>();
  r.backend_name = j.at("backend_name").get<std::string>();
  r.timestamp = j.at("timestamp").get<std::string>();
  if (r.final_caption.empty()) throw SchemaError("caption record has an empty final caption");
  return r;
}

CaptionRecord generate_caption(const std::string& image_ref, const McotPromptSet& prompts,
                               TextBackend& backend, const GenerationOptions& options) {
  prompts.validate();
  CaptionRecord record;
  record.image_id = image_ref;
  record.backend_name = backend.name();
  for (std::size_t stage = 0; stage < kStageCount; ++stage) {
    const std::string body =
        encode_request({options.model, prompts.render(stage, record.stage_outputs), image_ref});
    for (std::size_t attempt = 1;; ++attempt) {
      try {
        record.stage_outputs[stage] = decode_response(backend.post(body), stage);
        break;
      } catch (const BackendError& e) {
        if (attempt > options.retry_limit) throw;
        if (options.on_retry) options.on_retry(RetryEvent{image_ref, stage, attempt, e.what()});
      }
    }
  }
  const auto& last = record.stage_outputs[kStageCount - 1];
  const auto first = last.find_first_not_of(" \t\r\n");
  const auto end = last.find_last_not_of(" \t\r\n");
  record.final_caption = last.substr(first, end - first + 1);
  record.timestamp = options.clock ? options.clock() : utc_now();
  return record;
}

std::vector<CaptionRecord> read_cache(const std::filesystem::path& path) {
  std::vector<CaptionRecord> out;
  if (!std::filesystem::exists(path)) return out;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CacheError("cannot read caption cache " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  std::size_t start = 0;
  std::size_t line_no = 0;
  while (start < text.size()) {
    ++line_no;
    const std::size_t nl = text.find('\n', start);
    const bool terminated = nl != std::string::npos;
    const std::string line = text.substr(start, terminated ? nl - start : std::string::npos);
    start = terminated ? nl + 1 : text.size();
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(line));
    } catch (const std::exception& e) {
      if (!terminated) break;  // torn final write
      throw CacheError("caption cache " + path.string() + " line " + std::to_string(line_no) +
                       " is unreadable: " + e.what());
    }
  }
  return out;
}

std::vector<std::string> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    out.push_back(line.substr(first, last - first + 1));
  }
  return out;
}

namespace {

void write_cache_atomically(const std::filesystem::path& path, const std::vector<CaptionRecord>& records) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CacheError("cannot write caption cache " + tmp.string());
    for (const auto& r : records) out << record_to_json(r) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

// Drops a torn trailing line so appends start on a fresh line.
void truncate_to_last_newline(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  if (text.empty() || text.back() == '\n') return;
  const auto nl = text.rfind('\n');
  std::filesystem::resize_file(path, nl == std::string::npos ? 0 : nl + 1);
}

struct Outcome {
  std::optional<CaptionRecord> record;
  std::string error;
};

}  // namespace

BatchSummary run_batch(const std::vector<std::string>& manifest, const McotPromptSet& prompts,
                       TextBackend& backend, const std::filesystem::path& cache_path,
                       const BatchOptions& options) {
  if (manifest.empty()) throw ContractError("run_batch: manifest is empty");
  if (options.concurrency < 1) throw ContractError("run_batch: concurrency must be >= 1");
  prompts.validate();
  {
    std::unordered_set<std::string> seen;
    for (const auto& id : manifest)
      if (!seen.insert(id).second) throw ContractError("run_batch: duplicate manifest entry " + id);
  }

  const std::vector<CaptionRecord> existing = read_cache(cache_path);
  std::unordered_map<std::string, CaptionRecord> cached;
  for (const auto& r : existing) cached.insert_or_assign(r.image_id, r);
  truncate_to_last_newline(cache_path);

  BatchSummary summary;
  summary.total = manifest.size();
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    if (cached.contains(manifest[i])) {
      ++summary.cached;
    } else {
      pending.push_back(i);
    }
  }

  std::mutex mutex;
  std::condition_variable ready;
  std::vector<std::optional<Outcome>> outcomes(pending.size());
  std::size_t next_task = 0;
  bool stop = false;

  GenerationOptions gen = options.generation;
  gen.on_retry = [&](const RetryEvent& e) {
    std::lock_guard lock(mutex);
    summary.retry_log.push_back(e);
    ++summary.retries;
  };

  auto worker = [&] {
    for (;;) {
      std::size_t task;
      {
        std::lock_guard lock(mutex);
        if (stop || next_task >= pending.size()) return;
        task = next_task++;
      }
      Outcome outcome;
      try {
        outcome.record = generate_caption(manifest[pending[task]], prompts, backend, gen);
      } catch (const std::exception& e) {
        outcome.error = e.what();
      }
      {
        std::lock_guard lock(mutex);
        outcomes[task] = std::move(outcome);
      }
      ready.notify_all();
    }
  };

  const std::size_t threads = std::min(options.concurrency, pending.size());
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);

  // Single writer: append completed records strictly in manifest order.
  std::size_t written_new = 0;
  {
    std::ofstream out(cache_path, std::ios::binary | std::ios::app);
    if (!out) {
      {
        std::lock_guard lock(mutex);
        stop = true;
      }
      for (auto& th : pool) th.join();
      throw CacheError("cannot open caption cache " + cache_path.string() + " for writing");
    }
    for (std::size_t task = 0; task < pending.size(); ++task) {
      Outcome outcome;
      {
        std::unique_lock lock(mutex);
        ready.wait(lock, [&] { return outcomes[task].has_value(); });
        outcome = std::move(*outcomes[task]);
      }
      if (outcome.record) {
        out << record_to_json(*outcome.record) << '\n';
        out.flush();
        cached.insert_or_assign(outcome.record->image_id, *outcome.record);
        ++summary.generated;
        ++written_new;
      } else {
        ++summary.failed;
        summary.failures.push_back({manifest[pending[task]], outcome.error});
      }
      if (options.stop_after && written_new >= *options.stop_after && task + 1 < pending.size()) {
        summary.interrupted = true;
        break;
      }
    }
  }
  {
    std::lock_guard lock(mutex);
    stop = true;
  }
  for (auto& th : pool) th.join();
  if (summary.interrupted) return summary;

  // Canonical order: manifest entries first, then any other cached ids as found.
  std::vector<CaptionRecord> ordered;
  std::unordered_set<std::string> in_manifest(manifest.begin(), manifest.end());
  for (const auto& id : manifest)
    if (auto it = cached.find(id); it != cached.end()) ordered.push_back(it->second);
  std::unordered_set<std::string> emitted;
  for (const auto& r : existing) {
    if (!in_manifest.contains(r.image_id) && emitted.insert(r.image_id).second) ordered.push_back(cached.at(r.image_id));
  }
  write_cache_atomically(cache_path, ordered);
  return summary;
}

}  // namespace csmcir::mcot
