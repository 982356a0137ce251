#include "vlmpref/feedback.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <cmath>
#include <cstdlib>
#include <iostream>
#include <map>
#include <regex>
#include <sstream>

#include <nlohmann/json.hpp>

#include "vlmpref/error.hpp"

namespace vlmpref {

using nlohmann::json;

int oracle_label(double p0, double p1, double tie_epsilon) {
  if (p1 - p0 > tie_epsilon) return 1;
  if (p0 - p1 > tie_epsilon) return 0;
  return -1;
}

int noisy_oracle_label(double p0, double p1, double q, Rng& rng, double tie_epsilon) {
  if (!(q >= 0.0 && q < 0.5)) throw Error("flip probability out of range");
  const int label = oracle_label(p0, p1, tie_epsilon);
  if (label == -1) return -1;
  std::bernoulli_distribution flip(q);
  return flip(rng) ? 1 - label : label;
}

namespace {

std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ULL;
  return h ^ (h >> 31);
}

double progress_of(const Segment& s) {
  if (!s.progress) throw Error("segment has no progress");
  return *s.progress;
}

std::string fixed(double v) {
  std::ostringstream ss;
  ss << v;
  return ss.str();
}

}  // namespace

Rng pair_rng(std::uint64_t seed, const Segment& first, const Segment& second) {
  std::uint64_t h = mix(seed, static_cast<std::uint64_t>(first.source_episode));
  h = mix(h, static_cast<std::uint64_t>(first.source_step));
  h = mix(h, static_cast<std::uint64_t>(second.source_episode));
  h = mix(h, static_cast<std::uint64_t>(second.source_step));
  return Rng(h);
}

LabelResult OracleProvider::label(const Segment& first, const Segment& second) {
  return {oracle_label(progress_of(first), progress_of(second), eps_), std::nullopt, 0};
}

NoisyOracleProvider::NoisyOracleProvider(double q, std::uint64_t seed, double eps) : q_(q), seed_(seed), eps_(eps) {
  if (!(q >= 0.0 && q < 0.5)) throw Error("flip probability out of range");
}

std::string NoisyOracleProvider::name() const { return "noisy-oracle:" + fixed(q_); }

LabelResult NoisyOracleProvider::label(const Segment& first, const Segment& second) {
  auto rng = pair_rng(seed_, first, second);
  return {noisy_oracle_label(progress_of(first), progress_of(second), q_, rng, eps_), std::nullopt, 0};
}

ScriptedDiscardProvider::ScriptedDiscardProvider(double p, std::uint64_t seed, double eps)
    : p_(p), seed_(seed), eps_(eps) {
  if (!(p >= 0.0 && p <= 1.0)) throw Error("discard probability out of range");
}

std::string ScriptedDiscardProvider::name() const { return "scripted:" + fixed(p_); }

LabelResult ScriptedDiscardProvider::label(const Segment& first, const Segment& second) {
  auto rng = pair_rng(seed_ ^ 0x5eedULL, first, second);
  if (std::bernoulli_distribution(p_)(rng)) return {-1, std::string("-1"), 0};
  const int l = oracle_label(progress_of(first), progress_of(second), eps_);
  return {l, std::to_string(l), 0};
}

HumanProvider::HumanProvider(std::istream& in, std::ostream& out, std::filesystem::path image_dir, std::string goal)
    : in_(in), out_(out), image_dir_(std::move(image_dir)), goal_(std::move(goal)) {}

LabelResult HumanProvider::label(const Segment& first, const Segment& second) {
  if (!first.image || !second.image) throw Error("segment has no image");
  std::lock_guard lock(mutex_);
  std::filesystem::create_directories(image_dir_);
  const auto p0 = image_dir_ / (first.image->sha256 + ".png");
  const auto p1 = image_dir_ / (second.image->sha256 + ".png");
  save_png(*first.image, p0);
  save_png(*second.image, p1);
  out_ << "Goal: " << goal_ << "\nImage 1: " << p0.string() << "\nImage 2: " << p1.string()
       << "\nLabel (0 = Image 1, 1 = Image 2, -1 = no preference): " << std::flush;
  std::string line;
  if (!std::getline(in_, line)) throw ProviderUnavailable("no input");
  return {parse_preference(line), line, 0};
}

VlmTwoStageProvider::VlmTwoStageProvider(std::shared_ptr<VlmClient> client, std::string goal)
    : client_(std::move(client)), goal_(prompts::normalize_goal(goal)) {
  if (!client_) throw Error("no client");
  if (goal_.empty()) throw Error("goal required");
}

LabelResult VlmTwoStageProvider::label(const Segment& first, const Segment& second) {
  if (!first.image || !second.image) throw Error("segment has no image");
  const auto analysis = client_->send(render_two_stage_analysis(goal_, first.image, second.image));
  // an empty analysis cannot be labeled; treat as "no preference"
  if (analysis.text.find_first_not_of(" \t\r\n") == std::string::npos) return {-1, analysis.text, 1};
  const auto labeling = client_->send(render_two_stage_labeling(goal_, analysis.text));
  return {parse_preference(labeling.text), analysis.text + "\n---\n" + labeling.text, 2};
}

VlmSingleStageProvider::VlmSingleStageProvider(std::shared_ptr<VlmClient> client, std::string goal)
    : client_(std::move(client)), goal_(prompts::normalize_goal(goal)) {
  if (!client_) throw Error("no client");
  if (goal_.empty()) throw Error("goal required");
}

LabelResult VlmSingleStageProvider::label(const Segment& first, const Segment& second) {
  if (!first.image || !second.image) throw Error("segment has no image");
  const auto reply = client_->send(render_single_stage(goal_, first.image, second.image));
  return {parse_preference(reply.text), reply.text, 1};
}

VlmScoreProvider::VlmScoreProvider(std::shared_ptr<VlmClient> client, std::string goal)
    : client_(std::move(client)), goal_(prompts::normalize_goal(goal)) {
  if (!client_) throw Error("no client");
  if (goal_.empty()) throw Error("goal required");
}

std::optional<double> VlmScoreProvider::score(const Segment& segment) {
  if (!segment.image) throw Error("segment has no image");
  const auto analysis = client_->send(render_score_analysis(goal_, segment.image));
  if (analysis.text.find_first_not_of(" \t\r\n") == std::string::npos) return std::nullopt;
  const auto reply = client_->send(render_score_labeling(goal_, analysis.text));
  return parse_score(reply.text);
}

HttpEmbedder::HttpEmbedder(std::string endpoint, std::string credential_env) : credential_env_(std::move(credential_env)) {
  static const std::regex url(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(endpoint, m, url)) throw Error("invalid endpoint: " + endpoint);
  scheme_host_ = m[1].str();
  path_ = m[2].matched ? m[2].str() : "/embed";
}

std::vector<double> HttpEmbedder::post(const std::string& body) {
  httplib::Client client(scheme_host_);
  if (const char* key = std::getenv(credential_env_.c_str()); key && *key) client.set_bearer_token_auth(key);
  auto res = client.Post(path_, body, "application/json");
  if (!res) throw ProviderUnavailable(httplib::to_string(res.error()));
  if (res->status == 401 || res->status == 403) throw CredentialRejected();
  if (res->status != 200) throw ProviderUnavailable("http status " + std::to_string(res->status));
  return json::parse(res->body).at("embedding").get<std::vector<double>>();
}

std::vector<double> HttpEmbedder::embed_image(const PngImage& image) {
  return post(json{{"image", base64_encode(image.bytes)}}.dump());
}

std::vector<double> HttpEmbedder::embed_text(const std::string& text) { return post(json{{"text", text}}.dump()); }

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw Error("embedding dimension mismatch");
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (nu == 0.0 || nv == 0.0) throw Error("degenerate embedding");
  return dot / (std::sqrt(nu) * std::sqrt(nv));
}

double embedding_similarity_score(Embedder& embedder, const PngImage& image, const std::string& goal) {
  const auto u = embedder.embed_image(image);
  const auto v = embedder.embed_text(goal);
  return cosine_similarity(u, v);
}

EmbeddingRewardSource::EmbeddingRewardSource(std::shared_ptr<Embedder> embedder, std::string goal, Resolution res)
    : embedder_(std::move(embedder)), goal_(std::move(goal)), res_(res) {
  if (!embedder_) throw Error("no embedder");
}

double EmbeddingRewardSource::reward(const StepResult& step, const Environment& env) {
  if (goal_embedding_.empty()) goal_embedding_ = embedder_->embed_text(goal_);
  const auto png = encode_png(env.render(step.next_state, res_));
  return cosine_similarity(embedder_->embed_image(png), goal_embedding_);
}

double sparse_reward(const StepResult& step) { return step.success ? 1.0 : 0.0; }

// ---------------------------------------------------------------- registry

namespace {

double parse_probability(const std::string& arg, const std::string& name) {
  if (arg.empty()) throw Error(name + " needs a probability, e.g. " + name + ":0.2");
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(arg, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != arg.size()) throw Error("invalid probability: " + arg);
  return v;
}

std::shared_ptr<VlmClient> need_client(const ProviderContext& ctx) {
  if (!ctx.client) throw Error("provider needs a VLM backend");
  return ctx.client();
}

std::string need_goal(const ProviderContext& ctx) {
  if (prompts::normalize_goal(ctx.config.goal_description).empty()) throw Error("goal required");
  return ctx.config.goal_description;
}

std::mutex& registry_mutex() {
  static std::mutex m;
  return m;
}

std::map<std::string, ProviderFactory>& registry() {
  static std::map<std::string, ProviderFactory> r{
      {"oracle",
       [](const std::string&, const ProviderContext& c) {
         return FeedbackSource{std::make_shared<OracleProvider>(c.config.tie_epsilon), nullptr, nullptr};
       }},
      {"noisy-oracle",
       [](const std::string& arg, const ProviderContext& c) {
         return FeedbackSource{std::make_shared<NoisyOracleProvider>(parse_probability(arg, "noisy-oracle"),
                                                                     c.config.seed, c.config.tie_epsilon),
                               nullptr, nullptr};
       }},
      {"scripted",
       [](const std::string& arg, const ProviderContext& c) {
         return FeedbackSource{std::make_shared<ScriptedDiscardProvider>(parse_probability(arg, "scripted"),
                                                                         c.config.seed, c.config.tie_epsilon),
                               nullptr, nullptr};
       }},
      {"human",
       [](const std::string&, const ProviderContext& c) {
         return FeedbackSource{
             std::make_shared<HumanProvider>(c.input ? *c.input : std::cin, c.output ? *c.output : std::cout,
                                             std::filesystem::path(c.config.run_dir) / "human",
                                             c.config.goal_description),
             nullptr, nullptr};
       }},
      {"vlm2stage",
       [](const std::string&, const ProviderContext& c) {
         const auto goal = need_goal(c);
         return FeedbackSource{std::make_shared<VlmTwoStageProvider>(need_client(c), goal), nullptr, nullptr};
       }},
      {"vlm1stage",
       [](const std::string&, const ProviderContext& c) {
         const auto goal = need_goal(c);
         return FeedbackSource{std::make_shared<VlmSingleStageProvider>(need_client(c), goal), nullptr, nullptr};
       }},
      {"vlm-score",
       [](const std::string&, const ProviderContext& c) {
         const auto goal = need_goal(c);
         return FeedbackSource{nullptr, std::make_shared<VlmScoreProvider>(need_client(c), goal), nullptr};
       }},
      {"embed-score",
       [](const std::string&, const ProviderContext& c) {
         const auto goal = need_goal(c);
         if (!c.embedder) throw Error("embed-score needs an embedder");
         return FeedbackSource{nullptr, nullptr,
                               std::make_shared<EmbeddingRewardSource>(c.embedder, goal, c.config.render_resolution)};
       }},
      {"gt-dense",
       [](const std::string&, const ProviderContext&) {
         return FeedbackSource{nullptr, nullptr, std::make_shared<GtDenseReward>()};
       }},
      {"gt-sparse",
       [](const std::string&, const ProviderContext&) {
         return FeedbackSource{nullptr, nullptr, std::make_shared<GtSparseReward>()};
       }},
  };
  return r;
}

std::pair<std::string, std::string> split_spec(const std::string& spec) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos) return {spec, {}};
  return {spec.substr(0, colon), spec.substr(colon + 1)};
}

}  // namespace

void register_provider(const std::string& name, ProviderFactory factory) {
  std::lock_guard lock(registry_mutex());
  registry()[name] = std::move(factory);
}

FeedbackSource make_feedback(const std::string& spec, const ProviderContext& context) {
  const auto [name, arg] = split_spec(spec);
  ProviderFactory factory;
  {
    std::lock_guard lock(registry_mutex());
    auto it = registry().find(name);
    if (it == registry().end()) throw Error("unknown provider: " + spec);
    factory = it->second;
  }
  return factory(arg, context);
}

std::vector<std::string> provider_names() {
  std::lock_guard lock(registry_mutex());
  std::vector<std::string> names;
  for (const auto& [n, _] : registry()) names.push_back(n);
  return names;
}

bool provider_needs_goal(const std::string& spec) {
  const auto name = split_spec(spec).first;
  return name == "vlm2stage" || name == "vlm1stage" || name == "vlm-score" || name == "embed-score";
}

}  // namespace vlmpref
