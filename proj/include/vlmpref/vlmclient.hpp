#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vlmpref/image.hpp"

namespace vlmpref {

struct ChatPart {
  enum class Kind { Text, Image };
  Kind kind = Kind::Text;
  std::string text;
  std::shared_ptr<const PngImage> image;

  static ChatPart of_text(std::string t) { return {Kind::Text, std::move(t), nullptr}; }
  static ChatPart of_image(std::shared_ptr<const PngImage> img) { return {Kind::Image, {}, std::move(img)}; }
};

struct ChatRequest {
  std::vector<ChatPart> parts;
  std::string model_name;
  double temperature = 0.0;
  int max_output_tokens = 1024;
  std::string template_id;

  [[nodiscard]] std::size_t num_images() const;
  // Text parts joined by newlines; images appear as "[Image]" when there is
  // exactly one, otherwise "[Image k]".
  [[nodiscard]] std::string flatten() const;
};

// SHA-256 hex over the model name, text parts and image content hashes.
std::string request_hash(const ChatRequest& request);

struct ChatResponse {
  std::string text;
  std::int64_t latency_ms = 0;
  std::string backend;
  bool cached = false;
  int attempts = 0;
};

// ---------------------------------------------------------------- templates

namespace prompts {

inline constexpr std::string_view kTwoStageAnalysis = "two_stage_analysis";
inline constexpr std::string_view kTwoStageLabeling = "two_stage_labeling";
inline constexpr std::string_view kSingleStage = "single_stage";
inline constexpr std::string_view kScoreAnalysis = "score_analysis";
inline constexpr std::string_view kScoreLabeling = "score_labeling";

// Drops surrounding whitespace and one leading "to " from a goal sentence.
std::string normalize_goal(std::string_view goal);

// Literal renderers: `task` is substituted verbatim where the template holds
// its task-description placeholder.
std::string two_stage_questions(std::string_view task);
std::string score_questions(std::string_view task);
ChatRequest two_stage_analysis(std::string_view task, std::shared_ptr<const PngImage> img0,
                               std::shared_ptr<const PngImage> img1);
ChatRequest two_stage_labeling(std::string_view questions, std::string_view response);
ChatRequest single_stage(std::string_view task, std::shared_ptr<const PngImage> img0,
                         std::shared_ptr<const PngImage> img1);
ChatRequest score_analysis(std::string_view task, std::shared_ptr<const PngImage> img);
ChatRequest score_labeling(std::string_view questions, std::string_view response);

}  // namespace prompts

// Goal-level renderers. Goals are stored without the leading "to".
ChatRequest render_two_stage_analysis(std::string_view goal, std::shared_ptr<const PngImage> img0,
                                      std::shared_ptr<const PngImage> img1);
ChatRequest render_two_stage_labeling(std::string_view goal, std::string_view analysis_response);
ChatRequest render_single_stage(std::string_view goal, std::shared_ptr<const PngImage> img0,
                                std::shared_ptr<const PngImage> img1);
ChatRequest render_score_analysis(std::string_view goal, std::shared_ptr<const PngImage> img);
ChatRequest render_score_labeling(std::string_view goal, std::string_view analysis_response);

// "0", "1", "-1" (surrounding whitespace and one trailing '.' allowed);
// anything else is -1.
int parse_preference(std::string_view reply);
// First number on the last non-empty line, clamped to [0, 1]. nullopt when
// the reply is unsure (-1) or has no number.
std::optional<double> parse_score(std::string_view reply);

// ---------------------------------------------------------------- backends

class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  [[nodiscard]] virtual std::string name() const = 0;
  // Throws TransientBackendError (retried) or CredentialRejected.
  virtual std::string complete(const ChatRequest& request) = 0;
};

// Offline backend: replay table by request hash, then a responder callback,
// then a cycling list of canned replies.
class ScriptedBackend final : public ChatBackend {
 public:
  using Responder = std::function<std::optional<std::string>(const ChatRequest&)>;

  ScriptedBackend() = default;
  explicit ScriptedBackend(std::vector<std::string> cycle) : cycle_(std::move(cycle)) {}

  [[nodiscard]] std::string name() const override { return "scripted"; }
  std::string complete(const ChatRequest& request) override;

  void add_replay(const std::string& hash, std::string text);
  // JSON object {hash: text} or JSONL lines {"hash":..., "text":...}.
  void load_replay(const std::filesystem::path& file);
  void set_responder(Responder r) { responder_ = std::move(r); }
  void set_cycle(std::vector<std::string> cycle);
  // The next `n` calls throw TransientBackendError.
  void fail_next(int n) { pending_failures_ = n; }
  void reject_credentials(bool on) { reject_ = on; }

  [[nodiscard]] std::size_t calls() const { return calls_; }
  [[nodiscard]] std::vector<ChatRequest> requests() const;

 private:
  mutable std::mutex mutex_;
  std::unordered_map<std::string, std::string> replay_;
  Responder responder_;
  std::vector<std::string> cycle_;
  std::size_t cycle_pos_ = 0;
  std::atomic<int> pending_failures_{0};
  bool reject_ = false;
  std::atomic<std::size_t> calls_{0};
  std::vector<ChatRequest> log_;
};

struct HttpBackendConfig {
  std::string endpoint;  // e.g. https://api.example.com/v1/chat/completions
  std::string model;
  std::string credential_env = "VLM_API_KEY";
  int timeout_seconds = 120;
};

// OpenAI-compatible chat-completions endpoint; images sent as PNG data URLs.
class HttpChatBackend final : public ChatBackend {
 public:
  explicit HttpChatBackend(HttpBackendConfig config);
  [[nodiscard]] std::string name() const override { return "http:" + config_.model; }
  std::string complete(const ChatRequest& request) override;

  // Request body, exposed for tests.
  [[nodiscard]] static std::string build_body(const ChatRequest& request, const std::string& model);
  [[nodiscard]] static std::string extract_text(const std::string& body);

 private:
  HttpBackendConfig config_;
  std::string scheme_host_;
  std::string path_;
};

// ---------------------------------------------------------------- client

// Append-only on-disk response store; keys are request hashes.
class ResponseCache {
 public:
  ResponseCache() = default;  // memory only
  explicit ResponseCache(std::filesystem::path file);

  [[nodiscard]] std::optional<ChatResponse> get(const std::string& key) const;
  void put(const std::string& key, const ChatResponse& response);
  [[nodiscard]] std::size_t size() const;
  [[nodiscard]] const std::filesystem::path& path() const { return file_; }

 private:
  mutable std::mutex mutex_;
  std::filesystem::path file_;
  std::unordered_map<std::string, ChatResponse> entries_;
};

// Token bucket, shared by concurrent callers. 0 requests/minute = unlimited.
class RateLimiter {
 public:
  using Clock = std::chrono::steady_clock;
  explicit RateLimiter(double requests_per_minute = 0.0, double burst = 1.0);
  void acquire();

 private:
  std::mutex mutex_;
  double rate_per_sec_;
  double burst_;
  double tokens_;
  Clock::time_point last_;
};

// `vlm_queries.jsonl`, one line per query.
class QueryAuditLog {
 public:
  explicit QueryAuditLog(std::filesystem::path file);
  void append(const std::string& line);
  [[nodiscard]] const std::filesystem::path& path() const { return file_; }

 private:
  std::mutex mutex_;
  std::filesystem::path file_;
  std::ofstream out_;
};

struct RetryPolicy {
  int max_attempts = 5;
  std::chrono::milliseconds base_delay{1000};
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

class VlmClient {
 public:
  VlmClient(std::shared_ptr<ChatBackend> backend, std::shared_ptr<ResponseCache> cache = nullptr,
            std::shared_ptr<QueryAuditLog> audit = nullptr, RetryPolicy retry = {}, Sleeper sleeper = nullptr,
            std::shared_ptr<RateLimiter> limiter = nullptr);

  // Cache first; otherwise the backend with exponential backoff. Throws
  // ProviderUnavailable after the last attempt, CredentialRejected at once.
  ChatResponse send(const ChatRequest& request);

  [[nodiscard]] std::size_t backend_calls() const { return backend_calls_; }
  [[nodiscard]] std::size_t requests_sent() const { return requests_; }
  [[nodiscard]] const std::string& model_name() const { return model_; }
  void set_model_name(std::string m) { model_ = std::move(m); }
  [[nodiscard]] std::vector<std::chrono::milliseconds> sleeps() const;

 private:
  void audit(const ChatRequest& request, const std::string& hash, const ChatResponse* response,
             const std::string& error);

  std::shared_ptr<ChatBackend> backend_;
  std::shared_ptr<ResponseCache> cache_;
  std::shared_ptr<QueryAuditLog> audit_;
  RetryPolicy retry_;
  Sleeper sleeper_;
  std::shared_ptr<RateLimiter> limiter_;
  std::string model_;
  std::atomic<std::size_t> backend_calls_{0};
  std::atomic<std::size_t> requests_{0};
  mutable std::mutex sleeps_mutex_;
  std::vector<std::chrono::milliseconds> sleeps_;
};

// Backend configuration file (JSON):
//   {"type": "scripted"|"http", "endpoint", "model", "credential_env",
//    "replay_file", "responses": [...], "requests_per_minute", "max_attempts",
//    "base_delay_ms", "cache_file"}
struct BackendConfig {
  std::string type = "scripted";
  HttpBackendConfig http;
  std::string replay_file;
  std::vector<std::string> responses;
  double requests_per_minute = 0.0;
  int max_attempts = 5;
  int base_delay_ms = 1000;
  std::string cache_file;  // default: <run_dir>/vlm_cache.jsonl
};

BackendConfig load_backend_config(const std::filesystem::path& file);
std::shared_ptr<ChatBackend> make_backend(const BackendConfig& config);
// Client wired with the run directory's cache and audit log.
std::shared_ptr<VlmClient> make_client(const BackendConfig& config, const std::filesystem::path& run_dir);

}  // namespace vlmpref
