// Python bindings: configuration, training runs, feedback primitives and the
// analysis reports. Configurations cross the boundary as dicts.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <Eigen/Core>

#include "vlmpref/analysis.hpp"
#include "vlmpref/envsim.hpp"
#include "vlmpref/error.hpp"
#include "vlmpref/feedback.hpp"
#include "vlmpref/orchestrator.hpp"
#include "vlmpref/rewardmodel.hpp"
#include "vlmpref/serialization.hpp"
#include "vlmpref/vlmclient.hpp"

namespace py = pybind11;
using namespace vlmpref;

namespace {

json to_json_value(const py::handle& obj) {
  return json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

py::object to_python(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

// Defaults patched with the given fields.
RunConfig config_from(const py::dict& fields) {
  json j = RunConfig{};
  j.merge_patch(to_json_value(fields));
  return j.get<RunConfig>();
}

py::dict session_dict(const SessionReport& s) {
  py::dict d;
  d["index"] = s.index;
  d["env_steps"] = s.env_steps;
  d["deferred"] = s.deferred;
  d["requested"] = s.requested;
  d["answered"] = s.answered;
  d["failed"] = s.failed;
  d["labels"] = s.labels;
  d["trainable"] = s.trainable;
  d["relabeled"] = s.relabeled;
  d["stale_rewards"] = s.stale_rewards ? py::cast(*s.stale_rewards) : py::none();
  if (s.training) {
    d["epochs"] = s.training->epochs;
    d["loss"] = s.training->final_loss;
    d["accuracy"] = s.training->final_accuracy;
  }
  return d;
}

py::dict report_dict(const TrainReport& r) {
  py::dict d;
  d["completed"] = r.completed;
  d["halted"] = r.halted;
  d["halt_reason"] = r.halt_reason;
  d["env_steps"] = r.env_steps;
  d["queries_issued"] = r.queries_issued;
  py::list sessions, metrics;
  for (const auto& s : r.sessions) sessions.append(session_dict(s));
  for (const auto& m : r.metrics) {
    py::dict row;
    row["step"] = m.step;
    row["eval_return"] = m.eval_return;
    row["success_rate"] = m.success_rate;
    row["queries_issued"] = m.queries_issued;
    metrics.append(row);
  }
  d["sessions"] = sessions;
  d["metrics"] = metrics;
  return d;
}

FeedbackSource source_for(const RunConfig& config) { return make_feedback_for(config); }

Segment progress_segment(double progress, std::int64_t step) {
  Segment s;
  s.states = {{progress}};
  s.progress = progress;
  s.source_step = step;
  return s;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Preference-based reinforcement learning from vision-language model feedback";

  py::register_exception<ProviderUnavailable>(m, "ProviderUnavailable");
  py::register_exception<Error>(m, "VlmprefError");

  // ------------------------------------------------------------ config
  m.def("default_config", [] { return to_python(json(RunConfig{})); });
  m.def("normalize_config", [](const py::dict& fields) { return to_python(json(config_from(fields))); },
        py::arg("config"), "Fills in defaults and validates.");
  m.def("load_config", [](const std::filesystem::path& p) { return to_python(json(load_config(p))); });
  m.def("parse_schedule", [](const std::string& text) {
    const auto s = parse_schedule(text);
    return py::make_tuple(s.queries_per_session, s.session_interval_steps, s.total_query_budget);
  });

  // ------------------------------------------------------------ reward model math
  m.def("bt_probability", &bt_probability, py::arg("sum_first"), py::arg("sum_second"));
  m.def(
      "preference_loss",
      [](const std::vector<double>& sums0, const std::vector<double>& sums1, const std::vector<int>& labels) {
        const auto r = preference_loss_from_sums(Eigen::Map<const Eigen::VectorXd>(sums0.data(), sums0.size()),
                                                 Eigen::Map<const Eigen::VectorXd>(sums1.data(), sums1.size()),
                                                 labels);
        return py::make_tuple(r.loss, std::vector<double>(r.grad_sum0.begin(), r.grad_sum0.end()),
                              std::vector<double>(r.grad_sum1.begin(), r.grad_sum1.end()));
      },
      py::arg("sums_first"), py::arg("sums_second"), py::arg("labels"),
      "Mean loss and its gradients with respect to both sum vectors.");

  // ------------------------------------------------------------ feedback
  m.def("oracle_label", &oracle_label, py::arg("progress_first"), py::arg("progress_second"),
        py::arg("tie_epsilon") = 1e-6);
  m.def("parse_preference", [](const std::string& reply) { return parse_preference(reply); });
  m.def("parse_score", [](const std::string& reply) { return parse_score(reply); });
  m.def("provider_names", &provider_names);

  // ------------------------------------------------------------ environments
  py::class_<Environment, std::shared_ptr<Environment>>(m, "Environment")
      .def_property_readonly("name", &Environment::name)
      .def_property_readonly("state_dim", &Environment::state_dim)
      .def_property_readonly("action_dim", &Environment::action_dim)
      .def_property_readonly("horizon", &Environment::horizon)
      .def_property_readonly("goal_description", &Environment::goal_description)
      .def("reset", [](Environment& env, std::uint64_t seed) {
        Rng rng(seed);
        return env.reset(rng);
      }, py::arg("seed") = 0)
      .def("step", [](Environment& env, const std::vector<double>& action) {
        const auto r = env.step(action);
        py::dict d;
        d["next_state"] = r.next_state;
        d["gt_reward"] = r.gt_reward;
        d["done"] = r.done;
        d["terminated"] = r.terminated;
        d["success"] = r.success;
        d["progress"] = r.progress;
        return d;
      })
      .def("progress", [](const Environment& env, const std::vector<double>& s) { return env.progress(s); })
      .def("finished", &Environment::finished);
  m.def("make_environment", [](const std::string& name) {
    return std::shared_ptr<Environment>(make_environment(name));
  });
  m.def("expert_rollout", [](const std::string& env_name, std::uint64_t seed) {
    auto env = make_environment(env_name);
    const auto policy = scripted_expert(env_name);
    Rng rng(seed);
    auto state = env->reset(rng);
    std::vector<double> progress{env->progress(state)};
    double ret = 0.0;
    bool success = false;
    while (!env->finished()) {
      const auto r = env->step(policy(state));
      state = r.next_state;
      progress.push_back(r.progress);
      ret += r.gt_reward;
      success = success || r.success;
    }
    return py::make_tuple(progress, ret, success);
  }, py::arg("env"), py::arg("seed") = 0, "Progress series, return and success of one scripted-expert episode.");

  // ------------------------------------------------------------ training
  py::class_<TrainingRun>(m, "TrainingRun")
      .def(py::init([](const py::dict& fields) {
             const auto config = config_from(fields);
             prepare_run_dir(config.run_dir, false);
             return std::make_unique<TrainingRun>(config, source_for(config));
           }),
           py::arg("config"))
      .def("collect_step", [](TrainingRun& run) {
        const auto t = run.collect_step();
        py::dict d;
        d["state"] = t.state;
        d["action"] = t.action;
        d["reward"] = t.reward;
        d["next_state"] = t.next_state;
        d["done"] = t.done;
        return d;
      })
      .def("feedback_session", [](TrainingRun& run) { return session_dict(run.feedback_session()); })
      .def("train", [](TrainingRun& run) {
        TrainReport r;
        {
          py::gil_scoped_release release;
          r = run.train();
        }
        return report_dict(r);
      })
      .def("checkpoint", &TrainingRun::checkpoint)
      .def_property_readonly("env_steps", &TrainingRun::env_steps)
      .def_property_readonly("queries_issued", &TrainingRun::queries_issued)
      .def_property_readonly("replay_size", [](const TrainingRun& r) { return r.replay().size(); })
      .def_property_readonly("image_buffer_size", [](const TrainingRun& r) { return r.images().size(); })
      .def_property_readonly("preference_counts", [](const TrainingRun& r) { return r.preferences().counts(); })
      .def("stale_rewards", [](TrainingRun& r) { return count_stale_rewards(r.replay(), r.reward(), r.encoder()); });

  m.def("prepare_run_dir", &prepare_run_dir, py::arg("run_dir"), py::arg("force") = false);
  m.def("train", [](const py::dict& fields, bool force) {
    const auto config = config_from(fields);
    prepare_run_dir(config.run_dir, force);
    TrainReport r;
    {
      py::gil_scoped_release release;
      r = train(config);
    }
    return report_dict(r);
  }, py::arg("config"), py::arg("force") = false);

  // ------------------------------------------------------------ analysis
  m.def("bin_accuracy_from_run", [](const std::filesystem::path& run_dir, int bins) {
    const auto report = bin_accuracy(PreferenceLog::load(run_dir), bins);
    py::list rows;
    for (const auto& b : report.bins) rows.append(py::make_tuple(b.correct, b.incorrect, b.no_preference));
    return py::make_tuple(report.edges, rows, report.accuracy());
  }, py::arg("run_dir"), py::arg("bins") = 10);
  m.def("bin_accuracy", [](const std::vector<std::tuple<double, double, int>>& labeled, int bins) {
    std::vector<PreferenceRecord> records;
    std::int64_t step = 0;
    for (const auto& [p0, p1, label] : labeled) {
      PreferenceRecord r;
      r.first = progress_segment(p0, step++);
      r.second = progress_segment(p1, step++);
      r.label = label;
      records.push_back(std::move(r));
    }
    const auto report = bin_accuracy(records, bins);
    py::list rows;
    for (const auto& b : report.bins) rows.append(py::make_tuple(b.correct, b.incorrect, b.no_preference));
    return py::make_tuple(report.edges, rows, report.accuracy());
  }, py::arg("records"), py::arg("bins") = 10, "Records are (progress_first, progress_second, label) triples.");
  m.def("alignment", [](const std::vector<std::vector<double>>& rewards, const std::vector<double>& progress) {
    const auto c = alignment_from_series(rewards, progress);
    py::dict d;
    d["per_seed"] = c.per_seed;
    d["mean"] = c.mean;
    d["standard_error"] = c.standard_error;
    d["progress"] = c.progress;
    d["progress_constant"] = c.progress_constant;
    return d;
  }, py::arg("rewards"), py::arg("progress"));
  m.def("learning_curve", [](const std::vector<std::filesystem::path>& run_dirs) {
    const auto c = learning_curve(std::span<const std::filesystem::path>(run_dirs));
    py::dict d;
    d["steps"] = c.steps;
    d["return_mean"] = c.return_mean;
    d["return_se"] = c.return_se;
    d["success_mean"] = c.success_mean;
    d["success_se"] = c.success_se;
    d["runs"] = c.runs;
    return d;
  }, py::arg("run_dirs"));
}
