// Offline multi-level chain-of-thought captioning.
//
// Every target image goes through four sequential backend calls:
//   1. core essence       2. visual attributes
//   3. observation        4. final caption
// Each stage prompt embeds the outputs of the stages before it. Prompts keep
// the literal "<image url>" placeholder; the actual reference travels in the
// request's image_ref field.
//
// Wire contract (HTTP POST, JSON):  {"model", "prompt", "image_ref"} -> {"text"}

#ifndef CSMCIR_MCOT_HPP
#define CSMCIR_MCOT_HPP

#include <array>
#include <atomic>
#include <chrono>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "csmcir/numerics.hpp"

namespace csmcir::mcot {

inline constexpr std::string_view kImagePlaceholder = "<image url>";
inline constexpr std::size_t kStageCount = 4;

/// Deterministic hashed bag-of-tokens embedding: lowercase, split on
/// non-alphanumerics, hash each token into `dim` signed buckets, L2-normalize.
/// Throws DomainError when the text has no tokens.
Vector embed_caption(std::string_view text, std::size_t dim);

// ---- prompts ----------------------------------------------------------------

/// Stage templates. Slots: {domain}, {core_essence}, {visual_attributes},
/// {observation}, {examples}.
struct McotPromptSet {
  std::array<std::string, kStageCount> templates;
  std::vector<std::string> few_shot_examples;
  std::string domain = "fashion";

  /// Built-in templates; assets/mcot_prompts.json ships the same text.
  static McotPromptSet defaults();
  static McotPromptSet load_json(const std::filesystem::path& path);

  /// Every template nonempty with exactly one "<image url>", and each stage
  /// referencing the outputs it depends on.
  void validate() const;

  /// Prompt for stage `stage` (0-based) given the outputs of earlier stages.
  std::string render(std::size_t stage, const std::array<std::string, kStageCount>& prior) const;
};

// ---- backends ---------------------------------------------------------------

struct BackendRequest {
  std::string model;
  std::string prompt;
  std::string image_ref;
};

/// Transient failure (network, timeout, 5xx). Retried.
class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Response violated the wire contract. Not retried.
class ValidationError : public std::runtime_error {
 public:
  ValidationError(const std::string& what, std::size_t stage)
      : std::runtime_error("stage " + std::to_string(stage + 1) + ": " + what), stage_(stage) {}
  std::size_t stage() const noexcept { return stage_; }

 private:
  std::size_t stage_;
};

std::string encode_request(const BackendRequest& request);
/// Extracts "text"; throws ValidationError naming `stage` otherwise.
std::string decode_response(const std::string& body, std::size_t stage);

class TextBackend {
 public:
  virtual ~TextBackend() = default;
  virtual std::string name() const = 0;
  /// Returns the raw JSON response body for an encoded request body.
  virtual std::string post(const std::string& request_body) = 0;
};

struct BackendConfig {
  std::string endpoint;  // http://host:port/path
  std::string model = "mock";
  std::size_t max_in_flight = 4;  // C
  std::size_t retry_limit = 2;
  std::chrono::milliseconds timeout{30000};

  void validate() const;
};

class HttpBackend final : public TextBackend {
 public:
  explicit HttpBackend(BackendConfig config);
  std::string name() const override;
  std::string post(const std::string& request_body) override;

 private:
  BackendConfig config_;
  std::string host_;
  std::string path_;
};

/// Response body for a request, as the mock serves it. The stage is read
/// from the "### Step N" heading of the prompt.
std::string mock_respond(const std::string& request_body);

/// In-process backend speaking the same JSON wire contract. Counts calls and
/// concurrent requests, and can inject transient failures.
class MockBackend final : public TextBackend {
 public:
  explicit MockBackend(std::chrono::microseconds latency = std::chrono::microseconds(0));

  std::string name() const override { return "mock"; }
  std::string post(const std::string& request_body) override;

  /// The next `times` requests for `image_ref` fail with BackendError.
  void fail_next(const std::string& image_ref, std::size_t times);
  /// Requests for `image_ref` return a body without "text".
  void corrupt(const std::string& image_ref);

  std::size_t calls() const noexcept { return calls_.load(); }
  std::size_t max_in_flight() const noexcept { return max_in_flight_.load(); }

 private:
  std::chrono::microseconds latency_;
  std::atomic<std::size_t> calls_{0};
  std::atomic<std::size_t> in_flight_{0};
  std::atomic<std::size_t> max_in_flight_{0};
  std::mutex mutex_;
  std::map<std::string, std::size_t> failures_;
  std::map<std::string, bool> corrupted_;
};

// ---- records and the pipeline ------------------------------------------------

struct CaptionRecord {
  std::string image_id;
  std::array<std::string, kStageCount> stage_outputs;
  std::string final_caption;
  std::string backend_name;
  std::string timestamp;

  bool operator==(const CaptionRecord&) const = default;
};

/// One JSON object, fixed field order, no trailing newline.
std::string record_to_json(const CaptionRecord& record);
CaptionRecord record_from_json(const std::string& line);

struct RetryEvent {
  std::string image_id;
  std::size_t stage;
  std::size_t attempt;  // 1-based attempt that failed
  std::string error;
};

using Clock = std::function<std::string()>;
/// ISO-8601 UTC wall-clock time.
std::string utc_now();

struct GenerationOptions {
  std::string model = "mock";
  std::size_t retry_limit = 2;
  Clock clock = utc_now;
  /// Called for every failed attempt that will be retried.
  std::function<void(const RetryEvent&)> on_retry;
};

/// Runs the four stages for one image. Throws BackendError after the retry
/// budget is spent and ValidationError on a malformed response.
CaptionRecord generate_caption(const std::string& image_ref, const McotPromptSet& prompts,
                               TextBackend& backend, const GenerationOptions& options);

struct BatchOptions {
  GenerationOptions generation;
  std::size_t concurrency = 4;  // C
  /// Stop after writing this many new records, as if killed. Testing aid.
  std::optional<std::size_t> stop_after;
};

struct BatchFailure {
  std::string image_id;
  std::string error;
};

struct BatchSummary {
  std::size_t total = 0;
  std::size_t generated = 0;
  std::size_t cached = 0;
  std::size_t failed = 0;
  std::size_t retries = 0;
  bool interrupted = false;
  std::vector<RetryEvent> retry_log;
  std::vector<BatchFailure> failures;
};

/// Thrown when an existing cache cannot be read back.
class CacheError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reads a JSONL cache. A final line without a newline that fails to parse is
/// treated as a torn write and dropped; any other bad line throws CacheError.
std::vector<CaptionRecord> read_cache(const std::filesystem::path& path);

/// Captions every manifest entry not already cached, with at most
/// `concurrency` images (hence requests) in flight. Records are appended in
/// manifest order as they complete; on success the cache is rewritten in
/// manifest order, so re-runs leave it byte-identical.
BatchSummary run_batch(const std::vector<std::string>& manifest, const McotPromptSet& prompts,
                       TextBackend& backend, const std::filesystem::path& cache_path,
                       const BatchOptions& options);

/// One image reference per nonblank line.
std::vector<std::string> read_manifest(const std::filesystem::path& path);

}  // namespace csmcir::mcot

#endif  // CSMCIR_MCOT_HPP
