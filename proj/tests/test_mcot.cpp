#include <doctest.h>
#include <httplib.h>

#include <fstream>
#include <nlohmann/json.hpp>
#include <thread>

#include "csmcir/error.hpp"
#include "csmcir/mcot.hpp"
#include "test_support.hpp"

using namespace csmcir;
using namespace csmcir::mcot;
using csmcir::testing::read_bytes;
using csmcir::testing::scratch_dir;

namespace {

// Fixed clock so cache bytes are comparable across runs.
GenerationOptions fixed_clock_options() {
  GenerationOptions g;
  g.clock = [] { return std::string("2000-01-01T00:00:00Z"); };
  return g;
}

BatchOptions batch_options(std::size_t concurrency = 4) {
  BatchOptions b;
  b.generation = fixed_clock_options();
  b.concurrency = concurrency;
  return b;
}

std::vector<std::string> manifest_of(std::size_t n) {
  std::vector<std::string> m;
  for (std::size_t i = 0; i < n; ++i) m.push_back("img/" + std::to_string(i) + ".jpg");
  return m;
}

class Recording final : public TextBackend {
 public:
  std::string name() const override { return "mock"; }
  std::string post(const std::string& body) override {
    prompts.push_back(nlohmann::json::parse(body).at("prompt").get<std::string>());
    return mock_respond(body);
  }
  std::vector<std::string> prompts;
};

}  // namespace

TEST_CASE("caption embedding") {
  const Vector a = embed_caption("red dress", 16);
  CHECK(a == embed_caption("red dress", 16));
  CHECK(a == embed_caption("Dress, RED!", 16));
  CHECK(std::abs(norm(a) - 1.0) < 1e-12);
  CHECK(dot(a, embed_caption("blue truck", 16)) < 1.0 - 1e-9);
  CHECK_THROWS_AS(embed_caption(" ,.;", 16), DomainError);
  CHECK_THROWS_AS(embed_caption("x", 0), DomainError);
}

TEST_CASE("prompt set") {
  const McotPromptSet d = McotPromptSet::defaults();
  CHECK_NOTHROW(d.validate());
  const McotPromptSet shipped = McotPromptSet::load_json(std::filesystem::path(CSMCIR_ASSET_DIR) / "mcot_prompts.json");
  CHECK(shipped.templates == d.templates);
  CHECK(shipped.few_shot_examples == d.few_shot_examples);
  CHECK(shipped.domain == d.domain);

  McotPromptSet bad = d;
  bad.templates[1] += std::string(kImagePlaceholder);
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = d;
  bad.templates[3] = "### Step 4 <image url>";
  CHECK_THROWS_AS(bad.validate(), ContractError);
  CHECK_THROWS_AS(d.render(4, {}), ContractError);
}

TEST_CASE("four stages, each fed by the previous outputs") {
  Recording backend;
  const CaptionRecord r = generate_caption("img/a.jpg", McotPromptSet::defaults(), backend, fixed_clock_options());
  REQUIRE(backend.prompts.size() == kStageCount);
  for (std::size_t i = 0; i < kStageCount; ++i) {
    CHECK(r.stage_outputs[i].find("[stage-" + std::to_string(i + 1) + "]") == 0);
    for (std::size_t j = 0; j < i; ++j) CHECK(backend.prompts[i].find(r.stage_outputs[j]) != std::string::npos);
    CHECK(backend.prompts[i].find(kImagePlaceholder) != std::string::npos);
  }
  CHECK(r.final_caption == r.stage_outputs[3]);
  CHECK(r.timestamp == "2000-01-01T00:00:00Z");
  CHECK(record_from_json(record_to_json(r)) == r);
}

TEST_CASE("transient failures are retried and logged") {
  const auto dir = scratch_dir("mcot_retry");
  MockBackend backend;
  backend.fail_next("img/1.jpg", 1);
  BatchOptions opts = batch_options();
  opts.generation.retry_limit = 1;
  const auto s = run_batch(manifest_of(3), McotPromptSet::defaults(), backend, dir / "c.jsonl", opts);
  CHECK(s.generated == 3);
  CHECK(s.failed == 0);
  CHECK(s.retries == 1);
  REQUIRE(s.retry_log.size() == 1);
  CHECK(s.retry_log[0].image_id == "img/1.jpg");
  CHECK(s.retry_log[0].stage == 0);
  CHECK(s.retry_log[0].attempt == 1);
  CHECK(backend.calls() == 3 * kStageCount + 1);

  // Retry budget exhausted: the image fails and is not cached.
  MockBackend flaky;
  flaky.fail_next("img/0.jpg", 5);
  const auto dir2 = scratch_dir("mcot_exhaust");
  const auto s2 = run_batch(manifest_of(2), McotPromptSet::defaults(), flaky, dir2 / "c.jsonl", opts);
  CHECK(s2.failed == 1);
  CHECK(s2.generated == 1);
  CHECK(read_cache(dir2 / "c.jsonl").size() == 1);
}

TEST_CASE("malformed responses are validation errors") {
  MockBackend backend;
  backend.corrupt("img/x.jpg");
  CHECK_THROWS_AS(generate_caption("img/x.jpg", McotPromptSet::defaults(), backend, fixed_clock_options()),
                  ValidationError);
  CHECK(backend.calls() == 1);  // not retried
  CHECK_THROWS_AS(decode_response("not json", 2), ValidationError);
  CHECK_THROWS_AS(decode_response(R"({"text":"  "})", 0), ValidationError);
  CHECK(decode_response(R"({"text":"ok"})", 0) == "ok");
}

TEST_CASE("batch output: order, idempotence and a warm cache") {
  const auto dir = scratch_dir("mcot_batch");
  const auto cache = dir / "captions.jsonl";
  const auto manifest = manifest_of(20);
  MockBackend backend(std::chrono::microseconds(200));
  const auto s = run_batch(manifest, McotPromptSet::defaults(), backend, cache, batch_options());
  CHECK(s.generated == 20);
  CHECK(backend.max_in_flight() <= 4);
  const auto records = read_cache(cache);
  REQUIRE(records.size() == 20);
  for (std::size_t i = 0; i < 20; ++i) CHECK(records[i].image_id == manifest[i]);
  const auto bytes = read_bytes(cache);

  MockBackend warm;
  const auto again = run_batch(manifest, McotPromptSet::defaults(), warm, cache, batch_options());
  CHECK(warm.calls() == 0);
  CHECK(again.cached == 20);
  CHECK(read_bytes(cache) == bytes);

  // Same bytes under a different concurrency level.
  const auto serial_cache = dir / "serial.jsonl";
  MockBackend one;
  run_batch(manifest, McotPromptSet::defaults(), one, serial_cache, batch_options(1));
  CHECK(read_bytes(serial_cache) == bytes);
  CHECK(one.max_in_flight() == 1);
}

TEST_CASE("interrupted batch resumes to identical output") {
  const auto dir = scratch_dir("mcot_resume");
  const auto manifest = manifest_of(12);
  MockBackend full;
  run_batch(manifest, McotPromptSet::defaults(), full, dir / "full.jsonl", batch_options());

  BatchOptions killed = batch_options();
  killed.stop_after = 5;
  MockBackend first;
  const auto s1 = run_batch(manifest, McotPromptSet::defaults(), first, dir / "part.jsonl", killed);
  CHECK(s1.interrupted);
  CHECK(read_cache(dir / "part.jsonl").size() == 5);
  // Simulate a torn trailing write.
  {
    std::ofstream out(dir / "part.jsonl", std::ios::app | std::ios::binary);
    out << R"({"image_id":"img/5.jpg","stage_)";
  }
  MockBackend second;
  const auto s2 = run_batch(manifest, McotPromptSet::defaults(), second, dir / "part.jsonl", batch_options());
  CHECK(s2.cached == 5);
  CHECK(s2.generated == 7);
  CHECK(second.calls() == 7 * kStageCount);
  CHECK(read_bytes(dir / "part.jsonl") == read_bytes(dir / "full.jsonl"));
}

TEST_CASE("batch input contracts") {
  const auto dir = scratch_dir("mcot_contracts");
  MockBackend backend;
  CHECK_THROWS_AS(run_batch({"a", "b", "a"}, McotPromptSet::defaults(), backend, dir / "c.jsonl", batch_options()),
                  ContractError);
  CHECK_THROWS_AS(run_batch({}, McotPromptSet::defaults(), backend, dir / "c.jsonl", batch_options()), ContractError);
  CHECK_THROWS_AS(run_batch({"a"}, McotPromptSet::defaults(), backend, dir / "c.jsonl", batch_options(0)),
                  ContractError);
  CHECK(backend.calls() == 0);

  // A bad line that is not the last one is corruption, not a torn write.
  {
    std::ofstream out(dir / "bad.jsonl");
    out << "{oops}\n" << record_to_json(generate_caption("a", McotPromptSet::defaults(), backend, fixed_clock_options()))
        << '\n';
  }
  CHECK_THROWS_AS(read_cache(dir / "bad.jsonl"), CacheError);

  {
    std::ofstream out(dir / "manifest.txt");
    out << "  a.jpg \n\n b.jpg\r\n";
  }
  CHECK(read_manifest(dir / "manifest.txt") == std::vector<std::string>{"a.jpg", "b.jpg"});
}

TEST_CASE("HTTP backend against a local server") {
  httplib::Server server;
  std::atomic<int> hits{0};
  server.Post("/v1/caption", [&](const httplib::Request& req, httplib::Response& res) {
    ++hits;
    res.set_content(mock_respond(req.body), "application/json");
  });
  server.Post("/broken", [](const httplib::Request&, httplib::Response& res) { res.status = 503; });
  const int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  BackendConfig cfg;
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/caption";
  cfg.timeout = std::chrono::milliseconds(5000);
  HttpBackend http(cfg);
  MockBackend local;
  const auto a = generate_caption("img/h.jpg", McotPromptSet::defaults(), http, fixed_clock_options());
  const auto b = generate_caption("img/h.jpg", McotPromptSet::defaults(), local, fixed_clock_options());
  CHECK(a.stage_outputs == b.stage_outputs);
  CHECK(hits.load() == 4);

  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/broken";
  HttpBackend broken(cfg);
  GenerationOptions g = fixed_clock_options();
  g.retry_limit = 0;
  CHECK_THROWS_AS(generate_caption("img/h.jpg", McotPromptSet::defaults(), broken, g), BackendError);

  server.stop();
  th.join();
  cfg.endpoint = "ftp://nowhere";
  CHECK_THROWS_AS(HttpBackend{cfg}, ContractError);
}
