#include <doctest.h>

#include <cmath>
#include <sstream>
#include <thread>

#include "support.hpp"
#include "vlmpref/error.hpp"
#include "vlmpref/feedback.hpp"

using namespace vlmpref;
using testing::segment;
using testing::TempDir;

namespace {

std::shared_ptr<VlmClient> scripted_client(std::vector<std::string> replies,
                                           std::shared_ptr<ScriptedBackend>* out = nullptr) {
  auto backend = std::make_shared<ScriptedBackend>(std::move(replies));
  if (out) *out = backend;
  return std::make_shared<VlmClient>(backend, std::make_shared<ResponseCache>(), nullptr, RetryPolicy{1, {}},
                                     [](auto) {});
}

}  // namespace

TEST_CASE("oracle_label") {
  CHECK(oracle_label(0.2, 0.7, 1e-6) == 1);
  CHECK(oracle_label(0.5, 0.5, 1e-6) == -1);
  CHECK(oracle_label(0.7, 0.2, 1e-6) == 0);
  CHECK(oracle_label(0.5, 0.5 + 5e-7, 1e-6) == -1);
  CHECK(oracle_label(0.5, 0.5 + 2e-6, 1e-6) == 1);
}

TEST_CASE("oracle properties") {
  Rng rng(12);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  for (int i = 0; i < 5000; ++i) {
    const double a = u(rng), b = (i % 10 == 0) ? a : u(rng);
    const int ab = oracle_label(a, b), ba = oracle_label(b, a);
    CHECK(ab >= -1);
    CHECK(ab <= 1);
    CHECK(ba == (ab == -1 ? -1 : 1 - ab));
    if (ab != -1) {
      // strictly increasing rescalings keep the label
      CHECK(oracle_label(std::exp(a), std::exp(b)) == ab);
      CHECK(oracle_label(3.0 * a + 1.0, 3.0 * b + 1.0) == ab);
      CHECK(oracle_label(std::atan(a), std::atan(b)) == ab);
    }
  }
}

TEST_CASE("noisy oracle") {
  Rng rng(99);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SUBCASE("no noise matches the oracle") {
    for (int i = 0; i < 1000; ++i) {
      const double a = u(rng), b = u(rng);
      CHECK(noisy_oracle_label(a, b, 0.0, rng) == oracle_label(a, b));
    }
  }
  SUBCASE("flip rate") {
    int flips = 0, pairs = 0;
    while (pairs < 10000) {
      const double a = u(rng), b = u(rng);
      const int clean = oracle_label(a, b);
      if (clean == -1) continue;
      ++pairs;
      if (noisy_oracle_label(a, b, 0.2, rng) != clean) ++flips;
    }
    CHECK(std::abs(flips / 10000.0 - 0.2) <= 0.01);
  }
  SUBCASE("ties pass through") {
    for (double q : {0.0, 0.1, 0.3, 0.49}) CHECK(noisy_oracle_label(0.4, 0.4, q, rng) == -1);
  }
  SUBCASE("probability range") {
    CHECK_THROWS_AS(noisy_oracle_label(0.1, 0.2, 0.5, rng), Error);
    CHECK_THROWS_AS(noisy_oracle_label(0.1, 0.2, -0.1, rng), Error);
    CHECK_THROWS_AS(NoisyOracleProvider(0.7, 1), Error);
  }
  SUBCASE("provider labels depend only on the pair") {
    NoisyOracleProvider p(0.3, 5);
    int flips = 0;
    for (int i = 0; i < 2000; ++i) {
      const auto a = segment({double(i)}, u(rng), i), b = segment({double(i) + 0.5}, u(rng), i + 10000);
      const int first = p.label(a, b).label;
      CHECK(p.label(a, b).label == first);
      const int clean = oracle_label(*a.progress, *b.progress);
      if (clean != -1 && first != clean) ++flips;
    }
    CHECK(std::abs(flips / 2000.0 - 0.3) <= 0.04);
  }
}

TEST_CASE("oracle provider") {
  OracleProvider p;
  CHECK(p.label(segment({0.0}, 0.1), segment({0.0}, 0.9)).label == 1);
  CHECK(p.label(segment({0.0}, 0.9), segment({0.0}, 0.1)).label == 0);
  CHECK(p.label(segment({0.0}, 0.4), segment({0.0}, 0.4)).label == -1);
  CHECK(p.label(segment({0.0}, 0.4), segment({0.0}, 0.4)).requests == 0);
  Segment bare;
  bare.states = {{0.0}};
  CHECK_THROWS_WITH_AS(p.label(bare, segment({0.0}, 0.4)), "segment has no progress", Error);
}

TEST_CASE("scripted discard provider") {
  ScriptedDiscardProvider p(0.25, 3);
  Rng rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int discarded = 0;
  for (int i = 0; i < 4000; ++i) {
    const auto a = segment({double(i)}, u(rng), i), b = segment({double(i)}, u(rng), i + 5000);
    const int l = p.label(a, b).label;
    if (l == -1) {
      ++discarded;
    } else {
      CHECK(l == oracle_label(*a.progress, *b.progress));
    }
  }
  CHECK(std::abs(discarded / 4000.0 - 0.25) <= 0.03);
}

TEST_CASE("two-stage VLM provider") {
  const auto a = segment({0.0}, 0.1, 1), b = segment({1.0}, 0.9, 2);
  SUBCASE("label 1") {
    std::shared_ptr<ScriptedBackend> backend;
    VlmTwoStageProvider p(scripted_client({"Image 2 is closer.", "1"}, &backend), "balance the pole");
    const auto r = p.label(a, b);
    CHECK(r.label == 1);
    CHECK(r.requests == 2);
    CHECK(backend->calls() == 2);
    CHECK(r.raw_response == std::optional<std::string>("Image 2 is closer.\n---\n1"));
    const auto reqs = backend->requests();
    REQUIRE(reqs.size() == 2);
    CHECK(reqs[0].num_images() == 2);
    CHECK(reqs[1].num_images() == 0);
    CHECK(reqs[1].flatten().find("Image 2 is closer.") != std::string::npos);
  }
  SUBCASE("unsure") {
    VlmTwoStageProvider p(scripted_client({"Both look the same.", "-1"}), "balance the pole");
    CHECK(p.label(a, b).label == -1);
  }
  SUBCASE("unparseable reply") {
    VlmTwoStageProvider p(scripted_client({"analysis", "The second looks better"}), "balance the pole");
    CHECK(p.label(a, b).label == -1);
  }
  SUBCASE("transport failure") {
    std::shared_ptr<ScriptedBackend> backend;
    VlmTwoStageProvider p(scripted_client({"x"}, &backend), "balance the pole");
    backend->fail_next(1);
    CHECK_THROWS_AS(p.label(a, b), ProviderUnavailable);
  }
  SUBCASE("segments need images") {
    VlmTwoStageProvider p(scripted_client({"x"}), "balance the pole");
    Segment bare;
    bare.states = {{0.0}};
    CHECK_THROWS_AS(p.label(bare, b), Error);
  }
  CHECK_THROWS_WITH_AS(VlmTwoStageProvider(scripted_client({}), ""), "goal required", Error);
}

TEST_CASE("single-stage VLM provider") {
  const auto a = segment({0.0}, 0.1, 1), b = segment({1.0}, 0.9, 2);
  std::shared_ptr<ScriptedBackend> backend;
  VlmSingleStageProvider p(scripted_client({"0", "-1", "Image 1 probably"}, &backend), "balance the pole");
  const auto r = p.label(a, b);
  CHECK(r.label == 0);
  CHECK(r.requests == 1);
  CHECK(backend->calls() == 1);
  CHECK(backend->requests()[0].template_id == "single_stage");
  CHECK(p.label(a, segment({1.0}, 0.9, 3)).label == -1);
  CHECK(p.label(a, segment({1.0}, 0.9, 4)).label == -1);
  CHECK(backend->calls() == 3);
  // a repeated pair is answered from the cache
  CHECK(p.label(a, b).label == 0);
  CHECK(backend->calls() == 3);
}

TEST_CASE("VLM score provider") {
  auto s = [](int k) { return segment({0.0}, 0.5, k); };
  std::shared_ptr<ScriptedBackend> backend;
  VlmScoreProvider p(scripted_client({"looks half done", "0.8", "unclear", "-1", "done", "1", "?", "no idea"},
                                     &backend),
                     "balance the pole");
  CHECK(p.score(s(1)) == 0.8);
  CHECK_FALSE(p.score(s(2)).has_value());
  CHECK(p.score(s(3)) == 1.0);
  CHECK_FALSE(p.score(s(4)).has_value());
  CHECK(backend->calls() == 8);
  CHECK(backend->requests()[0].template_id == "score_analysis");
  CHECK(backend->requests()[1].template_id == "score_labeling");
}

TEST_CASE("every provider label is in {-1, 0, 1}") {
  Rng rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::shared_ptr<PreferenceProvider>> providers{
      std::make_shared<OracleProvider>(), std::make_shared<NoisyOracleProvider>(0.4, 2),
      std::make_shared<ScriptedDiscardProvider>(0.5, 2),
      std::make_shared<VlmSingleStageProvider>(scripted_client({"0", "1", "-1", "2", "yes", "0."}), "x"),
      std::make_shared<VlmTwoStageProvider>(scripted_client({"a", "1", "b", "maybe", "c", "0", "d", "-1"}), "x")};
  for (auto& p : providers) {
    for (int i = 0; i < 60; ++i) {
      const int l = p->label(segment({0.0}, u(rng), i), segment({0.0}, u(rng), i + 100)).label;
      CHECK((l == -1 || l == 0 || l == 1));
    }
  }
}

TEST_CASE("providers tolerate concurrent calls") {
  auto backend = std::make_shared<ScriptedBackend>();
  backend->set_responder([](const ChatRequest& r) -> std::optional<std::string> {
    return r.template_id == "two_stage_analysis" ? "analysis" : "1";
  });
  auto client = std::make_shared<VlmClient>(backend);
  VlmTwoStageProvider p(client, "x");
  std::atomic<int> ones{0};
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t)
    threads.emplace_back([&, t] {
      for (int i = 0; i < 25; ++i) ones += p.label(segment({0.0}, 0.0, t * 100 + i), segment({1.0}, 0.0, 7)).label;
    });
  for (auto& t : threads) t.join();
  CHECK(ones == 100);
}

TEST_CASE("human provider") {
  TempDir dir("human");
  std::istringstream in("1\nnope\n");
  std::ostringstream out;
  HumanProvider p(in, out, dir.path(), "balance the pole");
  const auto a = segment({0.0}, 0.1, 1), b = segment({1.0}, 0.9, 2);
  CHECK(p.label(a, b).label == 1);
  CHECK(out.str().find(".png") != std::string::npos);
  CHECK(std::filesystem::exists(dir.path() / (a.image->sha256 + ".png")));
  CHECK(p.label(a, b).label == -1);
  CHECK_THROWS_AS(p.label(a, b), ProviderUnavailable);
}

TEST_CASE("cosine similarity") {
  auto constant = [](std::vector<double> v) { return [v](const auto&) { return v; }; };
  const auto img = testing::solid_png(0, 0, 0);
  StubEmbedder same(constant({1, 0, 0}), constant({1, 0, 0}));
  CHECK(embedding_similarity_score(same, *img, "goal") == doctest::Approx(1.0).epsilon(1e-15));
  StubEmbedder ortho(constant({1, 0}), constant({0, 1}));
  CHECK(embedding_similarity_score(ortho, *img, "goal") == 0.0);
  StubEmbedder diag(constant({1, 1}), constant({1, 0}));
  CHECK(embedding_similarity_score(diag, *img, "goal") == doctest::Approx(std::sqrt(2.0) / 2.0).epsilon(1e-15));
  StubEmbedder zero(constant({0, 0}), constant({1, 0}));
  CHECK_THROWS_WITH_AS(embedding_similarity_score(zero, *img, "goal"), "degenerate embedding", Error);
  StubEmbedder mismatch(constant({1, 0, 0}), constant({1, 0}));
  CHECK_THROWS_AS(embedding_similarity_score(mismatch, *img, "goal"), Error);

  const std::vector<double> u{3, 4}, v{-6, -8};
  CHECK(cosine_similarity(u, v) == doctest::Approx(-1.0).epsilon(1e-15));
}

TEST_CASE("embedding reward source renders the next state") {
  auto env = make_environment("ballpush2d");
  int image_calls = 0, text_calls = 0;
  auto embedder = std::make_shared<StubEmbedder>(
      [&](const PngImage& p) {
        ++image_calls;
        const auto img = decode_png(p);
        return std::vector<double>{double(img.width), double(img.height)};
      },
      [&](const std::string&) {
        ++text_calls;
        return std::vector<double>{1.0, 0.0};
      });
  EmbeddingRewardSource src(embedder, "push the ball", {30, 40});
  StepResult step;
  step.next_state = {0.1, 0.1, 0.5, 0.5, 0.8, 0.8};
  const double r = src.reward(step, *env);
  CHECK(r == doctest::Approx(30.0 / 50.0).epsilon(1e-12));
  src.reward(step, *env);
  CHECK(image_calls == 2);
  CHECK(text_calls == 1);
}

TEST_CASE("direct rewards") {
  StepResult win, loss;
  win.success = true;
  win.gt_reward = -0.02;
  CHECK(sparse_reward(win) == 1.0);
  CHECK(sparse_reward(loss) == 0.0);
  auto env = make_environment("ballpush2d");
  GtDenseReward dense;
  CHECK(dense.reward(win, *env) == -0.02);

  // a failed episode under the sparse reward returns nothing
  GtSparseReward sparse;
  Rng rng(2);
  env->reset(rng);
  double total = 0.0;
  while (!env->finished()) {
    const auto s = env->step(Vector{0.0, 0.0});
    CHECK_FALSE(s.success);
    total += sparse.reward(s, *env);
  }
  CHECK(total == 0.0);
}

TEST_CASE("provider registry") {
  ProviderContext ctx;
  ctx.config.goal_description = "balance the pole";
  const auto names = provider_names();
  for (const char* n : {"oracle", "noisy-oracle", "human", "vlm2stage", "vlm1stage", "vlm-score", "embed-score",
                        "gt-dense", "gt-sparse"})
    CHECK(std::find(names.begin(), names.end(), n) != names.end());

  CHECK(make_feedback("oracle", ctx).preference->name() == "oracle");
  const auto noisy = make_feedback("noisy-oracle:0.2", ctx);
  REQUIRE(noisy.preference);
  CHECK(noisy.preference->name() == "noisy-oracle:0.2");
  CHECK_THROWS_AS(make_feedback("noisy-oracle", ctx), Error);
  CHECK_THROWS_AS(make_feedback("noisy-oracle:abc", ctx), Error);
  CHECK_THROWS_AS(make_feedback("noisy-oracle:0.6", ctx), Error);
  CHECK(make_feedback("gt-dense", ctx).direct->name() == "gt-dense");
  CHECK(make_feedback("gt-sparse", ctx).direct->name() == "gt-sparse");
  CHECK_THROWS_WITH_AS(make_feedback("telepathy", ctx), "unknown provider: telepathy", Error);
  CHECK_THROWS_AS(make_feedback("vlm2stage", ctx), Error);  // no backend
  CHECK_THROWS_AS(make_feedback("embed-score", ctx), Error);

  ctx.client = [] { return scripted_client({"a", "0"}); };
  const auto vlm = make_feedback("vlm2stage", ctx);
  REQUIRE(vlm.preference);
  CHECK(vlm.preference->needs_images());
  CHECK(make_feedback("vlm-score", ctx).score);
  ctx.config.goal_description = "";
  CHECK_THROWS_WITH_AS(make_feedback("vlm1stage", ctx), "goal required", Error);

  CHECK(provider_needs_goal("vlm2stage"));
  CHECK(provider_needs_goal("vlm-score"));
  CHECK_FALSE(provider_needs_goal("oracle"));
  CHECK_FALSE(provider_needs_goal("noisy-oracle:0.1"));

  register_provider("always-zero", [](const std::string&, const ProviderContext&) {
    return FeedbackSource{nullptr, nullptr, std::make_shared<GtSparseReward>()};
  });
  CHECK(make_feedback("always-zero", ctx).direct);
}
