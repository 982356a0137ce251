import json
import math
import os

import pytest

import vlmpref


def small_config(run_dir, **overrides):
    config = {
        "env_name": "cartpole",
        "provider_name": "oracle",
        "run_dir": str(run_dir),
        "seed": 3,
        "total_steps": 300,
        "warmup_steps": 250,
        "eval_interval": 150,
        "eval_episodes": 1,
        "schedule": {
            "queries_per_session": 10,
            "session_interval_steps": 100,
            "total_query_budget": 30,
            "reward_update_epochs": 10,
            "policy_update_steps": 1,
        },
        "render_resolution": {"width": 32, "height": 32},
    }
    config.update(overrides)
    return config


def test_bradley_terry():
    assert vlmpref.bt_probability(0.0, math.log(3.0)) == pytest.approx(0.75, abs=1e-12)
    assert vlmpref.bt_probability(1.0, 2.0) + vlmpref.bt_probability(2.0, 1.0) == pytest.approx(1.0, abs=1e-12)
    loss, g0, g1 = vlmpref.preference_loss([0.0], [0.0], [1])
    assert loss == pytest.approx(math.log(2.0))
    assert g0[0] == pytest.approx(0.5) and g1[0] == pytest.approx(-0.5)


def test_labels_and_parsing():
    assert vlmpref.oracle_label(0.2, 0.7) == 1
    assert vlmpref.oracle_label(0.7, 0.2) == 0
    assert vlmpref.oracle_label(0.5, 0.5) == -1
    assert vlmpref.parse_preference("1") == 1
    assert vlmpref.parse_preference("no idea") == -1
    assert vlmpref.parse_score("-1") is None
    assert vlmpref.parse_schedule("50,5000,10000") == (50, 5000, 10000)
    assert "oracle" in vlmpref.provider_names()


def test_config_defaults():
    config = vlmpref.normalize_config({"env_name": "cartpole"})
    assert config["schedule"]["reward_update_epochs"] == 200
    assert config["ensemble_size"] == 3
    assert vlmpref.default_config()["discount"] == pytest.approx(0.99)


def test_environment_and_expert():
    env = vlmpref.make_environment("ballpush2d")
    state = env.reset(1)
    assert len(state) == env.state_dim
    step = env.step([0.0] * env.action_dim)
    assert set(step) >= {"next_state", "progress", "done"}
    progress, _, success = vlmpref.expert_rollout("ballpush2d", 2)
    assert success
    assert all(b >= a - 1e-9 for a, b in zip(progress, progress[1:]))


def test_training_run(tmp_path):
    run = vlmpref.TrainingRun(small_config(tmp_path / "run"))
    for _ in range(50):
        run.collect_step()
    assert run.replay_size == 50 and run.image_buffer_size == 50
    session = run.feedback_session()
    assert session["requested"] == 10
    assert run.queries_issued == 10
    assert run.stale_rewards() == 0


def test_train_and_analysis(tmp_path):
    run_dir = tmp_path / "run"
    report = vlmpref.train(small_config(run_dir))
    assert report["completed"]
    assert report["queries_issued"] == 30
    assert (run_dir / "metrics.csv").exists()
    edges, rows, accuracy = vlmpref.bin_accuracy_from_run(str(run_dir), 5)
    assert len(edges) == 6 and len(rows) == 5
    assert accuracy == pytest.approx(1.0)
    curve = vlmpref.learning_curve([str(run_dir)])
    assert curve["steps"] == [150.0, 300.0]
    with pytest.raises(vlmpref.VlmprefError):
        vlmpref.train(small_config(run_dir))
    assert vlmpref.train(small_config(run_dir), force=True)["completed"]


def test_bin_accuracy_and_alignment():
    edges, rows, accuracy = vlmpref.bin_accuracy([(0.1, 0.9, 1), (0.9, 0.1, 1), (0.2, 0.3, -1)], 2)
    assert sum(sum(r) for r in rows) == 3
    assert accuracy == pytest.approx(1 / 3)
    progress = [0.0, 0.2, 0.5, 1.0]
    curve = vlmpref.alignment([progress, [-p for p in progress]], progress)
    assert curve["per_seed"][0] == pytest.approx(curve["progress"], abs=1e-12)
    assert curve["per_seed"][1] == pytest.approx([1 - p for p in curve["progress"]], abs=1e-12)
