#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "vlmpref/core.hpp"
#include "vlmpref/envsim.hpp"
#include "vlmpref/vlmclient.hpp"

namespace vlmpref {

struct LabelResult {
  int label = -1;
  std::optional<std::string> raw_response;  // stage replies joined by "\n---\n"
  int requests = 0;
};

class PreferenceProvider {
 public:
  virtual ~PreferenceProvider() = default;
  [[nodiscard]] virtual std::string name() const = 0;
  [[nodiscard]] virtual std::string goal_description() const { return {}; }
  [[nodiscard]] virtual bool needs_images() const { return false; }
  // Safe to call concurrently. Throws ProviderUnavailable on transport failure.
  virtual LabelResult label(const Segment& first, const Segment& second) = 0;
};

class ScoreProvider {
 public:
  virtual ~ScoreProvider() = default;
  [[nodiscard]] virtual std::string name() const = 0;
  [[nodiscard]] virtual std::string goal_description() const { return {}; }
  // Score in [0, 1], or nullopt when unsure.
  virtual std::optional<double> score(const Segment& segment) = 0;
};

// Rewards computed straight from the environment, bypassing reward learning.
class DirectRewardSource {
 public:
  virtual ~DirectRewardSource() = default;
  [[nodiscard]] virtual std::string name() const = 0;
  virtual double reward(const StepResult& step, const Environment& env) = 0;
};

// 1 if p1 beats p0 by more than tie_epsilon, 0 for the mirror case, else -1.
int oracle_label(double p0, double p1, double tie_epsilon = 1e-6);
// Oracle label with 0 and 1 swapped with probability q; ties stay -1.
int noisy_oracle_label(double p0, double p1, double q, Rng& rng, double tie_epsilon = 1e-6);

// Deterministic per-pair generator, so labels do not depend on the order in
// which concurrent queries finish.
Rng pair_rng(std::uint64_t seed, const Segment& first, const Segment& second);

class OracleProvider final : public PreferenceProvider {
 public:
  explicit OracleProvider(double tie_epsilon = 1e-6) : eps_(tie_epsilon) {}
  [[nodiscard]] std::string name() const override { return "oracle"; }
  LabelResult label(const Segment& first, const Segment& second) override;

 private:
  double eps_;
};

class NoisyOracleProvider final : public PreferenceProvider {
 public:
  NoisyOracleProvider(double flip_probability, std::uint64_t seed, double tie_epsilon = 1e-6);
  [[nodiscard]] std::string name() const override;
  LabelResult label(const Segment& first, const Segment& second) override;

 private:
  double q_;
  std::uint64_t seed_;
  double eps_;
};

// Oracle labels, except a fixed fraction of pairs answered with -1.
class ScriptedDiscardProvider final : public PreferenceProvider {
 public:
  ScriptedDiscardProvider(double discard_probability, std::uint64_t seed, double tie_epsilon = 1e-6);
  [[nodiscard]] std::string name() const override;
  LabelResult label(const Segment& first, const Segment& second) override;

 private:
  double p_;
  std::uint64_t seed_;
  double eps_;
};

// Debug labeler: writes both images to disk, prints their paths and reads a
// label from the input stream.
class HumanProvider final : public PreferenceProvider {
 public:
  HumanProvider(std::istream& in, std::ostream& out, std::filesystem::path image_dir, std::string goal);
  [[nodiscard]] std::string name() const override { return "human"; }
  [[nodiscard]] std::string goal_description() const override { return goal_; }
  [[nodiscard]] bool needs_images() const override { return true; }
  LabelResult label(const Segment& first, const Segment& second) override;

 private:
  std::mutex mutex_;
  std::istream& in_;
  std::ostream& out_;
  std::filesystem::path image_dir_;
  std::string goal_;
};

class VlmTwoStageProvider final : public PreferenceProvider {
 public:
  VlmTwoStageProvider(std::shared_ptr<VlmClient> client, std::string goal);
  [[nodiscard]] std::string name() const override { return "vlm2stage"; }
  [[nodiscard]] std::string goal_description() const override { return goal_; }
  [[nodiscard]] bool needs_images() const override { return true; }
  LabelResult label(const Segment& first, const Segment& second) override;

 private:
  std::shared_ptr<VlmClient> client_;
  std::string goal_;
};

class VlmSingleStageProvider final : public PreferenceProvider {
 public:
  VlmSingleStageProvider(std::shared_ptr<VlmClient> client, std::string goal);
  [[nodiscard]] std::string name() const override { return "vlm1stage"; }
  [[nodiscard]] std::string goal_description() const override { return goal_; }
  [[nodiscard]] bool needs_images() const override { return true; }
  LabelResult label(const Segment& first, const Segment& second) override;

 private:
  std::shared_ptr<VlmClient> client_;
  std::string goal_;
};

class VlmScoreProvider final : public ScoreProvider {
 public:
  VlmScoreProvider(std::shared_ptr<VlmClient> client, std::string goal);
  [[nodiscard]] std::string name() const override { return "vlm-score"; }
  [[nodiscard]] std::string goal_description() const override { return goal_; }
  std::optional<double> score(const Segment& segment) override;

 private:
  std::shared_ptr<VlmClient> client_;
  std::string goal_;
};

// Image and text encoders sharing one embedding space.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::vector<double> embed_image(const PngImage& image) = 0;
  virtual std::vector<double> embed_text(const std::string& text) = 0;
};

class StubEmbedder final : public Embedder {
 public:
  using ImageFn = std::function<std::vector<double>(const PngImage&)>;
  using TextFn = std::function<std::vector<double>(const std::string&)>;
  StubEmbedder(ImageFn image, TextFn text) : image_(std::move(image)), text_(std::move(text)) {}
  std::vector<double> embed_image(const PngImage& image) override { return image_(image); }
  std::vector<double> embed_text(const std::string& text) override { return text_(text); }

 private:
  ImageFn image_;
  TextFn text_;
};

// POSTs {"image": <base64 png>} or {"text": ...} and reads {"embedding": [...]}.
class HttpEmbedder final : public Embedder {
 public:
  explicit HttpEmbedder(std::string endpoint, std::string credential_env = "VLM_API_KEY");
  std::vector<double> embed_image(const PngImage& image) override;
  std::vector<double> embed_text(const std::string& text) override;

 private:
  std::vector<double> post(const std::string& body);
  std::string scheme_host_;
  std::string path_;
  std::string credential_env_;
};

double cosine_similarity(std::span<const double> u, std::span<const double> v);
double embedding_similarity_score(Embedder& embedder, const PngImage& image, const std::string& goal);

// Cosine similarity between the rendered observation and the goal text.
class EmbeddingRewardSource final : public DirectRewardSource {
 public:
  EmbeddingRewardSource(std::shared_ptr<Embedder> embedder, std::string goal, Resolution res);
  [[nodiscard]] std::string name() const override { return "embed-score"; }
  double reward(const StepResult& step, const Environment& env) override;

 private:
  std::shared_ptr<Embedder> embedder_;
  std::string goal_;
  Resolution res_;
  std::vector<double> goal_embedding_;
};

class GtDenseReward final : public DirectRewardSource {
 public:
  [[nodiscard]] std::string name() const override { return "gt-dense"; }
  double reward(const StepResult& step, const Environment&) override { return step.gt_reward; }
};

double sparse_reward(const StepResult& step);

class GtSparseReward final : public DirectRewardSource {
 public:
  [[nodiscard]] std::string name() const override { return "gt-sparse"; }
  double reward(const StepResult& step, const Environment&) override { return sparse_reward(step); }
};

// Exactly one member is set.
struct FeedbackSource {
  std::shared_ptr<PreferenceProvider> preference;
  std::shared_ptr<ScoreProvider> score;
  std::shared_ptr<DirectRewardSource> direct;
};

struct ProviderContext {
  RunConfig config;
  std::function<std::shared_ptr<VlmClient>()> client;  // built on first use
  std::shared_ptr<Embedder> embedder;
  std::istream* input = nullptr;
  std::ostream* output = nullptr;
};

using ProviderFactory = std::function<FeedbackSource(const std::string& argument, const ProviderContext&)>;

// Names: oracle, noisy-oracle:q, scripted:p, human, vlm2stage, vlm1stage,
// vlm-score, embed-score, gt-dense, gt-sparse. "name:arg" passes arg along.
void register_provider(const std::string& name, ProviderFactory factory);
FeedbackSource make_feedback(const std::string& spec, const ProviderContext& context);
std::vector<std::string> provider_names();
// True for providers that talk to a VLM and therefore need a goal.
bool provider_needs_goal(const std::string& spec);

}  // namespace vlmpref
