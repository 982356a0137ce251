#include "vlmpref/vlmclient.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <regex>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "vlmpref/core.hpp"
#include "vlmpref/error.hpp"

// after Eigen: resolv.h defines a _res macro that collides with Eigen internals
#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

namespace vlmpref {

using nlohmann::json;

std::size_t ChatRequest::num_images() const {
  return static_cast<std::size_t>(
      std::count_if(parts.begin(), parts.end(), [](const ChatPart& p) { return p.kind == ChatPart::Kind::Image; }));
}

std::string ChatRequest::flatten() const {
  const bool single = num_images() == 1;
  std::string out;
  int image_no = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) out += '\n';
    if (parts[i].kind == ChatPart::Kind::Text) {
      out += parts[i].text;
    } else {
      ++image_no;
      out += single ? std::string("[Image]") : "[Image " + std::to_string(image_no) + "]";
    }
  }
  return out;
}

std::string request_hash(const ChatRequest& request) {
  std::string material = "model:" + request.model_name + '\n';
  for (const auto& p : request.parts) {
    if (p.kind == ChatPart::Kind::Text) {
      material += "text:" + std::to_string(p.text.size()) + ':' + p.text + '\n';
    } else {
      if (!p.image) throw Error("image part without image");
      material += "image:" + p.image->sha256 + '\n';
    }
  }
  return sha256_hex(material);
}

// ---------------------------------------------------------------- templates

namespace prompts {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

ChatRequest text_request(std::string text, std::string_view id) {
  ChatRequest r;
  r.parts.push_back(ChatPart::of_text(std::move(text)));
  r.template_id = id;
  return r;
}

void require_image(const std::shared_ptr<const PngImage>& img) {
  if (!img) throw Error("segment has no image");
}

ChatRequest two_image_request(std::string tail, std::shared_ptr<const PngImage> img0,
                              std::shared_ptr<const PngImage> img1, std::string_view id) {
  require_image(img0);
  require_image(img1);
  ChatRequest r;
  r.template_id = id;
  r.parts.push_back(ChatPart::of_text("Consider the following two images:"));
  r.parts.push_back(ChatPart::of_text("Image 1:"));
  r.parts.push_back(ChatPart::of_image(std::move(img0)));
  r.parts.push_back(ChatPart::of_text("Image 2:"));
  r.parts.push_back(ChatPart::of_image(std::move(img1)));
  r.parts.push_back(ChatPart::of_text(std::move(tail)));
  return r;
}

constexpr std::string_view kLabelInstruction =
    "Reply a single line of 0 if the goal is better achieved in Image 1, or 1 if it is better achieved in Image 2.\n"
    "Reply -1 if the text is unsure or there is no difference.";

}  // namespace

std::string normalize_goal(std::string_view goal) {
  goal = trim(goal);
  if (goal == "to" || goal == "To") return {};
  if (goal.size() > 3 && (goal.substr(0, 3) == "to " || goal.substr(0, 3) == "To ")) goal = trim(goal.substr(3));
  return std::string(goal);
}

std::string two_stage_questions(std::string_view task) {
  return "1. What is shown in Image 1?\n"
         "2. What is shown in Image 2?\n"
         "3. The goal is to " +
         std::string(task) +
         ". Is there any difference between Image 1 and Image 2 in terms of achieving the goal?";
}

std::string score_questions(std::string_view task) {
  return "1. What is shown in the image?\n"
         "2. The goal is " +
         std::string(task) +
         ". On a scale of 0 to 1, the score is 1 if the goal is achieved. What score would you give the image in "
         "terms of achieving the goal?";
}

ChatRequest two_stage_analysis(std::string_view task, std::shared_ptr<const PngImage> img0,
                               std::shared_ptr<const PngImage> img1) {
  return two_image_request("\n" + two_stage_questions(task), std::move(img0), std::move(img1), kTwoStageAnalysis);
}

ChatRequest two_stage_labeling(std::string_view questions, std::string_view response) {
  return text_request("Based on the text below to the questions:\n" + std::string(questions) + "\n" +
                          std::string(response) +
                          "\nIs the goal better achieved in Image 1 or Image 2? " + std::string(kLabelInstruction),
                      kTwoStageLabeling);
}

ChatRequest single_stage(std::string_view task, std::shared_ptr<const PngImage> img0,
                         std::shared_ptr<const PngImage> img1) {
  std::string tail = "\n1. What is shown in Image 1?\n"
                     "2. What is shown in Image 2?\n"
                     "3. The goal is " +
                     std::string(task) +
                     ". Is there any difference between Image 1 and Image 2 in terms of achieving the goal?\n"
                     "\n"
                     "Is the goal better achieved in Image 1 or Image 2?\n" +
                     std::string(kLabelInstruction);
  return two_image_request(std::move(tail), std::move(img0), std::move(img1), kSingleStage);
}

ChatRequest score_analysis(std::string_view task, std::shared_ptr<const PngImage> img) {
  require_image(img);
  ChatRequest r;
  r.template_id = kScoreAnalysis;
  r.parts.push_back(ChatPart::of_text("Consider the following image:"));
  r.parts.push_back(ChatPart::of_image(std::move(img)));
  r.parts.push_back(ChatPart::of_text(score_questions(task)));
  return r;
}

ChatRequest score_labeling(std::string_view questions, std::string_view response) {
  return text_request("Based on the text below to the questions:\n" + std::string(questions) + "\n" +
                          std::string(response) +
                          "\nPlease reply a single line of the score the text has given.\n"
                          "Reply -1 if the text is unsure.",
                      kScoreLabeling);
}

}  // namespace prompts

namespace {

std::string checked_goal(std::string_view goal) {
  auto g = prompts::normalize_goal(goal);
  if (g.empty()) throw Error("missing goal");
  return g;
}

void check_response(std::string_view response) {
  if (prompts::trim(response).empty()) throw Error("missing analysis");
}

}  // namespace

ChatRequest render_two_stage_analysis(std::string_view goal, std::shared_ptr<const PngImage> img0,
                                      std::shared_ptr<const PngImage> img1) {
  return prompts::two_stage_analysis(checked_goal(goal), std::move(img0), std::move(img1));
}

ChatRequest render_two_stage_labeling(std::string_view goal, std::string_view analysis_response) {
  const auto g = checked_goal(goal);
  check_response(analysis_response);
  return prompts::two_stage_labeling(prompts::two_stage_questions(g), analysis_response);
}

// The single-stage and score templates read "The goal is [task]", so the
// "to" is put back for them.
ChatRequest render_single_stage(std::string_view goal, std::shared_ptr<const PngImage> img0,
                                std::shared_ptr<const PngImage> img1) {
  return prompts::single_stage("to " + checked_goal(goal), std::move(img0), std::move(img1));
}

ChatRequest render_score_analysis(std::string_view goal, std::shared_ptr<const PngImage> img) {
  return prompts::score_analysis("to " + checked_goal(goal), std::move(img));
}

ChatRequest render_score_labeling(std::string_view goal, std::string_view analysis_response) {
  const auto g = checked_goal(goal);
  check_response(analysis_response);
  return prompts::score_labeling(prompts::score_questions("to " + g), analysis_response);
}

int parse_preference(std::string_view reply) {
  auto s = prompts::trim(reply);
  if (!s.empty() && s.back() == '.') s.remove_suffix(1);
  if (s == "0") return 0;
  if (s == "1") return 1;
  return -1;
}

std::optional<double> parse_score(std::string_view reply) {
  std::string_view last;
  std::size_t pos = 0;
  while (pos <= reply.size()) {
    auto end = reply.find('\n', pos);
    if (end == std::string_view::npos) end = reply.size();
    auto line = prompts::trim(reply.substr(pos, end - pos));
    if (!line.empty()) last = line;
    pos = end + 1;
  }
  static const std::regex number(R"([-+]?(\d+(\.\d*)?|\.\d+))");
  std::match_results<std::string_view::const_iterator> m;
  if (!std::regex_search(last.begin(), last.end(), m, number)) return std::nullopt;
  const double v = std::stod(m.str());
  if (v == -1.0) return std::nullopt;
  return std::clamp(v, 0.0, 1.0);
}

// ---------------------------------------------------------------- backends

std::string ScriptedBackend::complete(const ChatRequest& request) {
  ++calls_;
  std::lock_guard lock(mutex_);
  log_.push_back(request);
  if (reject_) throw CredentialRejected();
  if (pending_failures_ > 0) {
    --pending_failures_;
    throw TransientBackendError("scripted transient failure");
  }
  if (auto it = replay_.find(request_hash(request)); it != replay_.end()) return it->second;
  if (responder_) {
    if (auto r = responder_(request)) return *r;
  }
  if (cycle_.empty()) throw TransientBackendError("no scripted response");
  auto text = cycle_[cycle_pos_ % cycle_.size()];
  ++cycle_pos_;
  return text;
}

void ScriptedBackend::add_replay(const std::string& hash, std::string text) {
  std::lock_guard lock(mutex_);
  replay_[hash] = std::move(text);
}

void ScriptedBackend::load_replay(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error("cannot read replay file: " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const auto content = ss.str();
  const auto first = content.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return;
  if (content[first] == '{' && content.find('\n', first) != std::string::npos &&
      json::accept(content.substr(first, content.find('\n', first) - first))) {
    std::istringstream lines(content);
    std::string line;
    while (std::getline(lines, line)) {
      if (prompts::trim(line).empty()) continue;
      const auto j = json::parse(line);
      add_replay(j.at("hash").get<std::string>(), j.at("text").get<std::string>());
    }
    return;
  }
  const auto table = json::parse(content);
  for (const auto& [hash, text] : table.items()) add_replay(hash, text.get<std::string>());
}

void ScriptedBackend::set_cycle(std::vector<std::string> cycle) {
  std::lock_guard lock(mutex_);
  cycle_ = std::move(cycle);
  cycle_pos_ = 0;
}

std::vector<ChatRequest> ScriptedBackend::requests() const {
  std::lock_guard lock(mutex_);
  return log_;
}

HttpChatBackend::HttpChatBackend(HttpBackendConfig config) : config_(std::move(config)) {
  static const std::regex url(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(config_.endpoint, m, url)) throw Error("invalid endpoint: " + config_.endpoint);
  scheme_host_ = m[1].str();
  path_ = m[2].matched ? m[2].str() : "/v1/chat/completions";
}

std::string HttpChatBackend::build_body(const ChatRequest& request, const std::string& model) {
  json content = json::array();
  for (const auto& p : request.parts) {
    if (p.kind == ChatPart::Kind::Text) {
      content.push_back({{"type", "text"}, {"text", p.text}});
    } else {
      content.push_back({{"type", "image_url"},
                         {"image_url", {{"url", "data:image/png;base64," + base64_encode(p.image->bytes)}}}});
    }
  }
  json body{{"model", model.empty() ? request.model_name : model},
            {"temperature", request.temperature},
            {"max_tokens", request.max_output_tokens},
            {"messages", json::array({{{"role", "user"}, {"content", content}}})}};
  return body.dump();
}

std::string HttpChatBackend::extract_text(const std::string& body) {
  const auto j = json::parse(body, nullptr, false);
  if (j.is_discarded()) throw TransientBackendError("malformed response body");
  const auto& choices = j.value("choices", json::array());
  if (choices.empty()) throw TransientBackendError("response without choices");
  const auto& content = choices[0].at("message").at("content");
  if (content.is_string()) return content.get<std::string>();
  std::string text;
  for (const auto& c : content) text += c.value("text", "");
  return text;
}

std::string HttpChatBackend::complete(const ChatRequest& request) {
  const char* key = std::getenv(config_.credential_env.c_str());
  if (!key || !*key) throw CredentialRejected();
  httplib::Client client(scheme_host_);
  client.set_connection_timeout(config_.timeout_seconds);
  client.set_read_timeout(config_.timeout_seconds);
  client.set_bearer_token_auth(key);
  auto res = client.Post(path_, build_body(request, config_.model), "application/json");
  if (!res) throw TransientBackendError("transport error: " + httplib::to_string(res.error()));
  if (res->status == 401 || res->status == 403) throw CredentialRejected();
  if (res->status == 429 || res->status >= 500) {
    throw TransientBackendError("http status " + std::to_string(res->status));
  }
  if (res->status != 200) throw ProviderUnavailable("http status " + std::to_string(res->status));
  return extract_text(res->body);
}

// ---------------------------------------------------------------- client

namespace {

json response_to_json(const std::string& key, const ChatResponse& r) {
  return {{"key", key}, {"text", r.text}, {"latency_ms", r.latency_ms}, {"backend", r.backend}};
}

}  // namespace

ResponseCache::ResponseCache(std::filesystem::path file) : file_(std::move(file)) {
  std::ifstream in(file_);
  std::string line;
  while (std::getline(in, line)) {
    if (prompts::trim(line).empty()) continue;
    const auto j = json::parse(line, nullptr, false);
    if (j.is_discarded()) continue;  // torn final line from an interrupted run
    ChatResponse r;
    r.text = j.at("text").get<std::string>();
    r.latency_ms = j.value("latency_ms", std::int64_t{0});
    r.backend = j.value("backend", "");
    entries_[j.at("key").get<std::string>()] = std::move(r);
  }
}

std::optional<ChatResponse> ResponseCache::get(const std::string& key) const {
  std::lock_guard lock(mutex_);
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void ResponseCache::put(const std::string& key, const ChatResponse& response) {
  std::lock_guard lock(mutex_);
  if (entries_.contains(key)) return;
  entries_[key] = response;
  if (file_.empty()) return;
  if (file_.has_parent_path()) std::filesystem::create_directories(file_.parent_path());
  std::ofstream out(file_, std::ios::app);
  out << response_to_json(key, response).dump() << '\n';
}

std::size_t ResponseCache::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

RateLimiter::RateLimiter(double requests_per_minute, double burst)
    : rate_per_sec_(requests_per_minute / 60.0), burst_(std::max(1.0, burst)), tokens_(burst_), last_(Clock::now()) {}

void RateLimiter::acquire() {
  if (rate_per_sec_ <= 0.0) return;
  std::unique_lock lock(mutex_);
  while (true) {
    const auto now = Clock::now();
    tokens_ = std::min(burst_, tokens_ + std::chrono::duration<double>(now - last_).count() * rate_per_sec_);
    last_ = now;
    if (tokens_ >= 1.0) {
      tokens_ -= 1.0;
      return;
    }
    const auto wait = std::chrono::duration<double>((1.0 - tokens_) / rate_per_sec_);
    lock.unlock();
    std::this_thread::sleep_for(wait);
    lock.lock();
  }
}

QueryAuditLog::QueryAuditLog(std::filesystem::path file) : file_(std::move(file)) {
  if (file_.has_parent_path()) std::filesystem::create_directories(file_.parent_path());
  out_.open(file_, std::ios::app);
  if (!out_) throw Error("cannot open audit log: " + file_.string());
}

void QueryAuditLog::append(const std::string& line) {
  std::lock_guard lock(mutex_);
  out_ << line << '\n';
  out_.flush();
}

VlmClient::VlmClient(std::shared_ptr<ChatBackend> backend, std::shared_ptr<ResponseCache> cache,
                     std::shared_ptr<QueryAuditLog> audit, RetryPolicy retry, Sleeper sleeper,
                     std::shared_ptr<RateLimiter> limiter)
    : backend_(std::move(backend)),
      cache_(cache ? std::move(cache) : std::make_shared<ResponseCache>()),
      audit_(std::move(audit)),
      retry_(retry),
      sleeper_(sleeper ? std::move(sleeper) : Sleeper([](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); })),
      limiter_(std::move(limiter)) {
  if (!backend_) throw Error("no backend");
  if (retry_.max_attempts < 1) throw Error("max_attempts must be positive");
}

std::vector<std::chrono::milliseconds> VlmClient::sleeps() const {
  std::lock_guard lock(sleeps_mutex_);
  return sleeps_;
}

void VlmClient::audit(const ChatRequest& request, const std::string& hash, const ChatResponse* response,
                      const std::string& error) {
  if (!audit_) return;
  json line{{"timestamp", iso8601_now()},
            {"request_hash", hash},
            {"template_id", request.template_id},
            {"model", request.model_name},
            {"images", request.num_images()}};
  if (response) {
    line["response"] = response->text;
    line["latency_ms"] = response->latency_ms;
    line["cached"] = response->cached;
    line["attempts"] = response->attempts;
    line["backend"] = response->backend;
  } else {
    line["error"] = error;
  }
  audit_->append(line.dump());
}

ChatResponse VlmClient::send(const ChatRequest& original) {
  ChatRequest request = original;
  if (request.model_name.empty()) request.model_name = model_;
  const auto key = request_hash(request);
  ++requests_;
  if (auto hit = cache_->get(key)) {
    hit->cached = true;
    hit->attempts = 0;
    audit(request, key, &*hit, {});
    return *hit;
  }
  for (int attempt = 1;; ++attempt) {
    if (limiter_) limiter_->acquire();
    const auto start = std::chrono::steady_clock::now();
    try {
      ++backend_calls_;
      ChatResponse r;
      r.text = backend_->complete(request);
      r.latency_ms =
          std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start).count();
      r.backend = backend_->name();
      r.attempts = attempt;
      cache_->put(key, r);
      audit(request, key, &r, {});
      return r;
    } catch (const CredentialRejected&) {
      audit(request, key, nullptr, "credential rejected");
      throw;
    } catch (const TransientBackendError& e) {
      if (attempt >= retry_.max_attempts) {
        audit(request, key, nullptr, e.what());
        throw ProviderUnavailable(e.what());
      }
      const auto delay = retry_.base_delay * (std::int64_t{1} << (attempt - 1));
      {
        std::lock_guard lock(sleeps_mutex_);
        sleeps_.push_back(delay);
      }
      sleeper_(delay);
    } catch (const ProviderUnavailable& e) {
      audit(request, key, nullptr, e.what());
      throw;
    }
  }
}

BackendConfig load_backend_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error("cannot read backend config: " + file.string());
  const auto j = json::parse(in);
  BackendConfig c;
  c.type = j.value("type", c.type);
  c.http.endpoint = j.value("endpoint", "");
  c.http.model = j.value("model", "");
  c.http.credential_env = j.value("credential_env", c.http.credential_env);
  c.http.timeout_seconds = j.value("timeout_seconds", c.http.timeout_seconds);
  c.replay_file = j.value("replay_file", "");
  c.responses = j.value("responses", std::vector<std::string>{});
  c.requests_per_minute = j.value("requests_per_minute", 0.0);
  c.max_attempts = j.value("max_attempts", c.max_attempts);
  c.base_delay_ms = j.value("base_delay_ms", c.base_delay_ms);
  c.cache_file = j.value("cache_file", "");
  if (!c.replay_file.empty() && std::filesystem::path(c.replay_file).is_relative()) {
    c.replay_file = (file.parent_path() / c.replay_file).string();
  }
  return c;
}

std::shared_ptr<ChatBackend> make_backend(const BackendConfig& config) {
  if (config.type == "scripted") {
    auto b = std::make_shared<ScriptedBackend>(config.responses);
    if (!config.replay_file.empty()) b->load_replay(config.replay_file);
    return b;
  }
  if (config.type == "http") return std::make_shared<HttpChatBackend>(config.http);
  throw Error("unknown backend type: " + config.type);
}

std::shared_ptr<VlmClient> make_client(const BackendConfig& config, const std::filesystem::path& run_dir) {
  const std::filesystem::path cache_file =
      config.cache_file.empty() ? run_dir / "vlm_cache.jsonl" : std::filesystem::path(config.cache_file);
  auto client = std::make_shared<VlmClient>(
      make_backend(config), std::make_shared<ResponseCache>(cache_file),
      std::make_shared<QueryAuditLog>(run_dir / "vlm_queries.jsonl"),
      RetryPolicy{config.max_attempts, std::chrono::milliseconds(config.base_delay_ms)}, nullptr,
      std::make_shared<RateLimiter>(config.requests_per_minute));
  client->set_model_name(config.http.model.empty() ? config.type : config.http.model);
  return client;
}

}  // namespace vlmpref
