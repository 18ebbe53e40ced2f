import json
import math

import numpy as np
import pytest
import yaml

import remind


def test_worked_routing_example():
    p = [0.2, 0.2, 0.15, 0.1, 0.05] + [0.3 / 27] * 27
    r = remind.uncertainty_metrics(np.array(p))
    assert abs(r["mean_entropy_nats"] - 2.658) < 0.005
    assert abs(r["mean_kl_vs_uniform"] - 0.807) < 0.005
    assert r["entropy_nats"].shape == (1, 1)


def test_kl_identity_on_random_rows():
    rng = np.random.default_rng(0)
    for n in (2, 8, 32):
        p = rng.dirichlet(np.ones(n), size=50)
        r = remind.uncertainty_metrics(p)
        np.testing.assert_allclose(r["entropy_nats"] + r["kl_vs_uniform"], math.log(n), atol=1e-9)


def test_off_simplex_rows_raise():
    with pytest.raises(ValueError):
        remind.uncertainty_metrics(np.array([0.5, 0.4]))


def test_lambda_update():
    out = remind.update_lambda([0.5, 0.5], {0: 1.0, 1: 0.0}, math.log(2))
    assert out == pytest.approx([2 / 3, 1 / 3], abs=1e-12)
    with pytest.raises(ValueError):
        remind.update_lambda([0.5, 0.5], {}, 0.0)


def test_group_distribution_sums_to_one():
    d = remind.group_distribution([0.08, 0.12, 0.15, 0.15])
    assert len(d) == 15
    assert sum(d) == pytest.approx(1.0)
    assert d[-1] >= 0.55


def test_power_iteration_matches_numpy():
    rng = np.random.default_rng(3)
    j = rng.normal(size=(5, 9))
    theta = remind.ntk(j)
    np.testing.assert_allclose(theta, j @ j.T, atol=1e-12)
    e = remind.top_eigvec(theta)
    w, v = np.linalg.eigh(theta)
    assert e["value"] == pytest.approx(w[-1], rel=1e-8)
    assert abs(np.dot(e["vector"], v[:, -1])) == pytest.approx(1.0, abs=1e-6)


def test_consistency():
    g = [1.0, 2.0, 3.0]
    assert remind.consistency(g, g) == 1.0
    assert remind.consistency(g, [0.0, 0.0, 0.0]) is None


def test_config_round_trip_and_strictness():
    text = remind.default_config_yaml()
    assert remind.normalize_config(text) == text
    cfg = yaml.safe_load(text)
    assert cfg["dataset"]["modalities"] == 4
    with pytest.raises(ValueError, match="train.lerning_rate"):
        remind.normalize_config("train:\n  lerning_rate: 0.1\n")


def test_small_pipeline_is_deterministic(tmp_path):
    config = "dataset:\n  n_samples: 300\ntrain:\n  max_steps: 30\n  checkpoint_every: 10\n"
    runs = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        remind.generate(out, config, seed=5)
        result = remind.train(out, config, seed=5)
        summary = remind.analyze(out, config, seed=5)
        assert result["final_step"] == 30
        assert summary["window_steps"] == [30]
        runs.append((result["model_hash"], (tmp_path / name / "metrics.json").read_text()))
    assert runs[0] == runs[1]
    metrics = json.loads(runs[0][1])
    assert metrics["steps"] == 30
