#include <httplib.h>

#include <nlohmann/json.hpp>
#include <regex>
#include <thread>

#include "csmcir/error.hpp"
#include "csmcir/mcot.hpp"

namespace csmcir::mcot {

using nlohmann::json;

std::string encode_request(const BackendRequest& r) {
  nlohmann::ordered_json j;
  j["model"] = r.model;
  j["prompt"] = r.prompt;
  j["image_ref"] = r.image_ref;
  return j.dump();
}

std::string decode_response(const std::string& body, std::size_t stage) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::parse_error&) {
    throw ValidationError("response is not JSON", stage);
  }
  if (!j.is_object() || !j.contains("text") || !j.at("text").is_string()) {
    throw ValidationError("response lacks a string \"text\" field", stage);
  }
  auto text = j.at("text").get<std::string>();
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) {
    throw ValidationError("response text is empty", stage);
  }
  return text;
}

void BackendConfig::validate() const {
  if (max_in_flight < 1) throw ContractError("backend: max in-flight requests must be >= 1");
  if (timeout.count() <= 0) throw ContractError("backend: timeout must be positive");
}

// ---- HTTP -------------------------------------------------------------------

HttpBackend::HttpBackend(BackendConfig config) : config_(std::move(config)) {
  config_.validate();
  static const std::regex url(R"(^(http://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(config_.endpoint, m, url)) {
    throw ContractError("backend: endpoint must look like http://host:port/path, got " + config_.endpoint);
  }
  host_ = m[1].str();
  path_ = m[2].matched ? m[2].str() : "/";
}

std::string HttpBackend::name() const { return "http:" + config_.model; }

std::string HttpBackend::post(const std::string& request_body) {
  httplib::Client client(host_);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());
  auto res = client.Post(path_, request_body, "application/json");
  if (!res) throw BackendError("backend unreachable: " + httplib::to_string(res.error()));
  if (res->status < 200 || res->status >= 300) {
    throw BackendError("backend returned HTTP " + std::to_string(res->status));
  }
  return res->body;
}

// ---- mock -------------------------------------------------------------------

std::string mock_respond(const std::string& request_body) {
  const json req = json::parse(request_body);
  const std::string prompt = req.at("prompt").get<std::string>();
  const std::string image = req.at("image_ref").get<std::string>();
  static const std::regex heading(R"(### Step ([1-4]))");
  std::smatch m;
  const int stage = std::regex_search(prompt, m, heading) ? std::stoi(m[1].str()) : 0;
  std::string text;
  switch (stage) {
    case 1: text = "[stage-1] essence of " + image; break;
    case 2: text = "[stage-2] attributes of " + image; break;
    case 3: text = "[stage-3] observation on " + image; break;
    case 4: text = "[stage-4] caption for " + image; break;
    default: text = "[stage-?] " + image; break;
  }
  nlohmann::ordered_json out;
  out["text"] = text;
  return out.dump();
}

MockBackend::MockBackend(std::chrono::microseconds latency) : latency_(latency) {}

void MockBackend::fail_next(const std::string& image_ref, std::size_t times) {
  std::lock_guard lock(mutex_);
  failures_[image_ref] += times;
}

void MockBackend::corrupt(const std::string& image_ref) {
  std::lock_guard lock(mutex_);
  corrupted_[image_ref] = true;
}

std::string MockBackend::post(const std::string& request_body) {
  ++calls_;
  const std::size_t now = ++in_flight_;
  std::size_t seen = max_in_flight_.load();
  while (now > seen && !max_in_flight_.compare_exchange_weak(seen, now)) {
  }
  struct Leave {
    std::atomic<std::size_t>& counter;
    ~Leave() { --counter; }
  } leave{in_flight_};

  if (latency_.count() > 0) std::this_thread::sleep_for(latency_);
  const std::string image = json::parse(request_body).at("image_ref").get<std::string>();
  {
    std::lock_guard lock(mutex_);
    if (auto it = failures_.find(image); it != failures_.end() && it->second > 0) {
      --it->second;
      throw BackendError("injected failure for " + image);
    }
    if (corrupted_.contains(image)) return R"({"error":"corrupted"})";
  }
  return mock_respond(request_body);
}

}  // namespace csmcir::mcot
