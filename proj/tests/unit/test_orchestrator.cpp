#include <doctest.h>

#include <atomic>
#include <fstream>
#include <sstream>

#include "support.hpp"
#include "vlmpref/error.hpp"
#include "vlmpref/orchestrator.hpp"

using namespace vlmpref;
using testing::TempDir;

namespace {

RunConfig small_config(const std::filesystem::path& dir) {
  RunConfig c;
  c.env_name = "cartpole";
  c.provider_name = "oracle";
  c.run_dir = dir.string();
  c.seed = 3;
  c.total_steps = 400;
  c.warmup_steps = 300;
  c.eval_interval = 200;
  c.eval_episodes = 2;
  c.schedule.queries_per_session = 20;
  c.schedule.session_interval_steps = 100;
  c.schedule.total_query_budget = 60;
  c.schedule.reward_update_epochs = 20;
  c.render_resolution = {32, 32};
  return c;
}

FeedbackSource oracle() { return {std::make_shared<OracleProvider>(), nullptr, nullptr}; }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Answers like the oracle until `fail_after` calls, then is unreachable.
class FlakyProvider final : public PreferenceProvider {
 public:
  explicit FlakyProvider(int fail_after) : fail_after_(fail_after) {}
  [[nodiscard]] std::string name() const override { return "flaky"; }
  LabelResult label(const Segment& a, const Segment& b) override {
    if (calls_++ >= fail_after_) throw ProviderUnavailable("backend down");
    return inner_.label(a, b);
  }

 private:
  int fail_after_;
  std::atomic<int> calls_{0};
  OracleProvider inner_;
};

// Labels without inspecting the records, stripped of the wall-clock field.
std::vector<std::string> logged_labels(const std::filesystem::path& dir) {
  std::vector<std::string> out;
  for (auto j : read_jsonl(dir / "preferences.jsonl")) {
    j.erase("query_timestamp");
    out.push_back(j.dump());
  }
  return out;
}

}  // namespace

TEST_CASE("collect_step stores one transition and one observation") {
  TempDir dir("orch_step");
  auto config = small_config(dir.path());
  std::vector<Vector> emitted;
  RunHooks hooks;
  hooks.on_step = [&](const Transition&, const Vector& a) { emitted.push_back(a); };
  TrainingRun run(config, oracle(), hooks);

  for (int i = 0; i < 30; ++i) {
    const auto replay_before = run.replay().size();
    const auto images_before = run.images().size();
    const auto t = run.collect_step();
    CHECK(run.replay().size() == replay_before + 1);
    CHECK(run.images().size() == images_before + 1);

    Transition probe;
    probe.state = t.state;
    CHECK(t.reward == run.reward().predict_batch(run.encoder().encode(probe))(0));
    REQUIRE(emitted.size() == static_cast<std::size_t>(i + 1));
    REQUIRE(t.action.size() == emitted.back().size());
    for (std::size_t k = 0; k < t.action.size(); ++k) CHECK(t.action[k] == emitted.back()[k]);
    const auto& stored = run.replay()[run.replay().size() - 1];
    CHECK(stored.action == t.action);
  }
  CHECK(run.env_steps() == 30);
}

TEST_CASE("feedback session respects the remaining budget") {
  TempDir dir("orch_budget");
  auto config = small_config(dir.path());
  config.schedule.queries_per_session = 50;
  config.schedule.total_query_budget = 80;
  TrainingRun run(config, oracle());
  for (int i = 0; i < 120; ++i) run.collect_step();

  const auto first = run.feedback_session();
  CHECK(first.requested == 50);
  CHECK(run.queries_issued() == 50);
  const auto second = run.feedback_session();
  CHECK(second.requested == 30);
  CHECK(second.answered == 30);
  CHECK(run.queries_issued() == 80);
  const auto third = run.feedback_session();
  CHECK(third.requested == 0);
  CHECK(run.queries_issued() == 80);
}

TEST_CASE("oracle sessions grow the trainable set by the session size") {
  TempDir dir("orch_trainable");
  auto config = small_config(dir.path());
  config.audit_relabel = true;
  TrainingRun run(config, oracle());
  for (int i = 0; i < 150; ++i) run.collect_step();

  std::size_t before = 0;
  for (int s = 0; s < 2; ++s) {
    const auto report = run.feedback_session();
    const auto ties = report.labels.at(-1);
    CHECK(report.trainable == before + static_cast<std::size_t>(report.answered) - ties);
    before = report.trainable;
    REQUIRE(report.stale_rewards.has_value());
    CHECK(*report.stale_rewards == 0);
    CHECK(report.relabeled == run.replay().size());
    CHECK(count_stale_rewards(run.replay(), run.reward(), run.encoder()) == 0);
  }
  // Cart-pole observations are continuous, so exact ties do not occur.
  CHECK(run.preferences().count(-1) == 0);
  CHECK(run.preferences().trainable_view().size() == 40);
}

TEST_CASE("a session with fewer than two observations is deferred") {
  TempDir dir("orch_defer");
  TrainingRun run(small_config(dir.path()), oracle());
  run.collect_step();
  const auto report = run.feedback_session();
  CHECK(report.deferred);
  CHECK(report.requested == 0);
  CHECK(run.queries_issued() == 0);
}

TEST_CASE("direct reward sources reject feedback sessions") {
  TempDir dir("orch_direct");
  auto config = small_config(dir.path());
  config.provider_name = "gt-dense";
  TrainingRun run(config, {nullptr, nullptr, std::make_shared<GtDenseReward>()});
  const auto t = run.collect_step();
  CHECK(t.reward == doctest::Approx(1.0));
  CHECK_THROWS_WITH_AS(run.feedback_session(), "direct reward sources have no feedback sessions", Error);
}

TEST_CASE("feedback source must hold one provider") {
  TempDir dir("orch_source");
  CHECK_THROWS_AS(TrainingRun(small_config(dir.path()), FeedbackSource{}), Error);
}

TEST_CASE("train: sessions on the step schedule, budget and step accounting") {
  TempDir dir("orch_train");
  auto config = small_config(dir.path());
  config.replay_capacity = 150;
  config.audit_relabel = true;
  std::vector<SessionReport> seen;
  RunHooks hooks;
  hooks.on_session = [&](const SessionReport& r) { seen.push_back(r); };
  TrainingRun run(config, oracle(), hooks);
  const auto report = run.train();

  CHECK(report.completed);
  CHECK_FALSE(report.halted);
  CHECK(report.env_steps == 400);
  CHECK(run.env_steps() == run.replay_offset() + static_cast<std::int64_t>(run.replay().total_pushed()));
  CHECK(run.replay().size() == 150);
  CHECK(report.queries_issued <= config.schedule.total_query_budget);
  REQUIRE(seen.size() == 3);  // steps 100, 200, 300; budget spent afterwards
  for (std::size_t i = 0; i < seen.size(); ++i) {
    CHECK(seen[i].env_steps % config.schedule.session_interval_steps == 0);
    CHECK(seen[i].env_steps == static_cast<std::int64_t>(100 * (i + 1)));
    REQUIRE(seen[i].stale_rewards.has_value());
    CHECK(*seen[i].stale_rewards == 0);
  }
  CHECK(report.queries_issued == 60);
  CHECK(report.metrics.size() == 2);

  for (const char* f : {"config.json", "metrics.csv", "preferences.jsonl", "reward_report.json", "run_state.json",
                        "sac_400.ckpt", "reward_member_0.ckpt", "plots/learning_curve.csv",
                        "plots/learning_curve.png"})
    CHECK_MESSAGE(std::filesystem::exists(dir.path() / f), f);
  CHECK(read_jsonl(dir.path() / "preferences.jsonl").size() == 60);
}

TEST_CASE("zero total steps leaves a valid skeleton") {
  TempDir dir("orch_zero");
  auto config = small_config(dir.path());
  config.total_steps = 0;
  TrainingRun run(config, oracle());
  const auto report = run.train();
  CHECK(report.completed);
  CHECK(report.env_steps == 0);
  CHECK(report.metrics.empty());
  CHECK(std::filesystem::exists(dir.path() / "config.json"));
  CHECK(std::filesystem::exists(dir.path() / "metrics.csv"));
  CHECK(std::filesystem::exists(dir.path() / "plots" / "learning_curve.csv"));
  const auto csv = slurp(dir.path() / "plots" / "learning_curve.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1);  // header only
}

TEST_CASE("identical seeds give identical metrics") {
  TempDir a("orch_det_a"), b("orch_det_b"), c("orch_det_c");
  auto config = small_config(a.path());
  config.provider_name = "scripted:0.3";
  auto scripted = [&] {
    return FeedbackSource{std::make_shared<ScriptedDiscardProvider>(0.3, 11), nullptr, nullptr};
  };
  TrainingRun(config, scripted()).train();
  config.run_dir = b.path().string();
  TrainingRun(config, scripted()).train();
  const auto first = slurp(a.path() / "metrics.csv");
  CHECK(first == slurp(b.path() / "metrics.csv"));
  CHECK(logged_labels(a.path()) == logged_labels(b.path()));

  config.run_dir = c.path().string();
  config.seed = 4;
  TrainingRun(config, scripted()).train();
  CHECK(first != slurp(c.path() / "metrics.csv"));
}

TEST_CASE("session workers do not change the outcome") {
  TempDir a("orch_w1"), b("orch_w4");
  auto config = small_config(a.path());
  config.total_steps = 250;
  config.schedule.total_query_budget = 40;
  auto scripted = [] { return FeedbackSource{std::make_shared<ScriptedDiscardProvider>(0.3, 5), nullptr, nullptr}; };
  config.session_workers = 1;
  TrainingRun(config, scripted()).train();
  config.run_dir = b.path().string();
  config.session_workers = 4;
  TrainingRun(config, scripted()).train();
  CHECK(slurp(a.path() / "metrics.csv") == slurp(b.path() / "metrics.csv"));
  CHECK(logged_labels(a.path()) == logged_labels(b.path()));
}

TEST_CASE("discarded records are logged but never trained on") {
  TempDir dir("orch_discard");
  auto config = small_config(dir.path());
  config.schedule.queries_per_session = 50;
  config.schedule.total_query_budget = 200;
  TrainingRun run(config, {std::make_shared<ScriptedDiscardProvider>(0.3, 7), nullptr, nullptr});
  for (int i = 0; i < 200; ++i) run.collect_step();

  for (int s = 0; s < 4; ++s) {
    const auto report = run.feedback_session();
    CHECK(report.trainable == run.preferences().size() - run.preferences().count(-1));
    REQUIRE(report.training.has_value());
  }
  const auto total = run.preferences().size();
  CHECK(total == 200);
  const auto discarded = run.preferences().count(-1);
  CHECK(discarded > 30);
  CHECK(discarded < 90);
  CHECK(run.preferences().trainable_view().size() == total - discarded);
  for (const auto* r : run.preferences().trainable_view()) CHECK(r->label != -1);

  const auto logged = read_jsonl(dir.path() / "preferences.jsonl");
  CHECK(logged.size() == total);
  std::size_t logged_discards = 0;
  for (const auto& j : logged) logged_discards += j.at("label").get<int>() == -1 ? 1 : 0;
  CHECK(logged_discards == discarded);
}

TEST_CASE("provider failure halts with a resumable checkpoint") {
  TempDir dir("orch_halt");
  auto config = small_config(dir.path());
  // First session succeeds, the second finds the provider gone.
  const auto report = TrainingRun(config, {std::make_shared<FlakyProvider>(20), nullptr, nullptr}).train();
  CHECK(report.halted);
  CHECK_FALSE(report.completed);
  CHECK(report.env_steps == 200);
  CHECK(report.queries_issued == 20);
  CHECK(report.halt_reason.find("backend down") != std::string::npos);
  CHECK(std::filesystem::exists(dir.path() / "sac_200.ckpt"));
  const auto state = json::parse(slurp(dir.path() / "run_state.json"));
  CHECK(state.at("halted").get<bool>());
  CHECK(read_jsonl(dir.path() / "preferences.jsonl").size() == 20);

  auto resumed = TrainingRun::resume(dir.path(), oracle());
  CHECK(resumed->env_steps() == 200);
  CHECK(resumed->queries_issued() == 20);
  CHECK(resumed->preferences().size() == 20);
  const auto finished = resumed->train();
  CHECK(finished.completed);
  CHECK(finished.env_steps == 400);
  CHECK(resumed->replay_offset() == 200);
  CHECK(resumed->env_steps() == resumed->replay_offset() + static_cast<std::int64_t>(resumed->replay().total_pushed()));
  CHECK(finished.queries_issued == 60);
  CHECK(read_jsonl(dir.path() / "preferences.jsonl").size() == 60);
  CHECK(json::parse(slurp(dir.path() / "reward_report.json")).at("sessions").size() == 4);  // including the failed one
}

TEST_CASE("resume without state fails") {
  TempDir dir("orch_noresume");
  CHECK_THROWS_AS(TrainingRun::resume(dir.path(), oracle()), Error);
}

TEST_CASE("prepare_run_dir refuses previous runs without force") {
  TempDir dir("orch_prepare");
  prepare_run_dir(dir.path() / "fresh", false);
  {
    TrainingRun run(small_config(dir.path()), oracle());
  }
  std::ofstream(dir.path() / "vlm_cache.jsonl") << "{}\n";
  CHECK_THROWS_AS(prepare_run_dir(dir.path(), false), Error);
  prepare_run_dir(dir.path(), true);
  CHECK_FALSE(std::filesystem::exists(dir.path() / "config.json"));
  CHECK(std::filesystem::exists(dir.path() / "vlm_cache.jsonl"));
  prepare_run_dir(dir.path(), false);
}

TEST_CASE("image reward input stores the rendered reward observation") {
  TempDir dir("orch_image");
  auto config = small_config(dir.path());
  config.reward_input_mode = RewardInputMode::Image;
  config.reward_resolution = {32, 32};
  config.ensemble_size = 1;
  TrainingRun run(config, oracle());
  const auto t = run.collect_step();
  REQUIRE(t.reward_image != nullptr);
  CHECK(t.reward_image->width == 32);
  Transition probe;
  probe.state = t.state;
  probe.reward_image = t.reward_image;
  CHECK(t.reward == run.reward().predict_batch(run.encoder().encode(probe))(0));
}

TEST_CASE("score provider sessions train on scores") {
  TempDir dir("orch_score");
  auto config = small_config(dir.path());
  auto backend = std::make_shared<ScriptedBackend>(std::vector<std::string>{"Score: 0.7", "I am not sure", "Score: 0.2"});
  auto client = std::make_shared<VlmClient>(backend, std::make_shared<ResponseCache>(), nullptr, RetryPolicy{1, {}},
                                            [](auto) {});
  config.provider_name = "vlm-score";
  config.goal_description = "balance the pole";
  TrainingRun run(config, {nullptr, std::make_shared<VlmScoreProvider>(client, "balance the pole"), nullptr});
  for (int i = 0; i < 50; ++i) run.collect_step();
  const auto report = run.feedback_session();
  CHECK(report.answered == 20);
  CHECK(report.labels.at(-1) + run.scores().size() == 20);
  CHECK(report.training.has_value());
  CHECK(read_jsonl(dir.path() / "scores.jsonl").size() == 20);
}
