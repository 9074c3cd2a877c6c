"""
Tests for the simulation designs, metrics and benchmark harness
"""

import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import simulation
from constants import TRUE_SLOPES
from errors import ConfigError, NumericalError
from longitudinal_data import CLUSTER_CONSTANT
from model_state import ModelState
from simulation import (
    SimulationConfig,
    aggregate,
    bench_grid,
    evaluate,
    generate,
    grid_cells,
    replication_seed,
    true_covariance,
    write_report,
)


SMALL_GRID = {
    "design": "random_intercepts",
    "n": 6,
    "n_i": 4,
    "p": 5,
    "tau": [0.4],
    "sigma": 0.4,
    "replications": 2,
    "m_stop": 20,
    "k": 3,
    "variants": ["cv", "aic"],
}


def test_true_covariance_of_random_slopes():
    Q = true_covariance("random_slopes", 1.0)
    assert_allclose(Q, [[1.0, 0.6, 0.6], [0.6, 1.0, 0.6], [0.6, 0.6, 1.0]])
    assert_allclose(true_covariance("random_intercepts", 0.8), [[0.64]])


def test_generate_random_intercepts():
    config = SimulationConfig(n=10, n_i=3, p=6, tau=0.8)
    data, truth = generate("random_intercepts", config, replication_seed(config, 0))
    assert (data.N, data.n, data.p, data.q) == (30, 10, 6, 1)
    assert data.covariate_kind[:2] == (CLUSTER_CONSTANT, CLUSTER_CONSTANT)
    assert truth.beta0 == 1.0
    assert_array_equal(truth.beta, list(TRUE_SLOPES) + [0.0, 0.0])
    assert truth.informative == (0, 1, 2, 3)
    assert truth.gamma.shape == (10,)


def test_generate_random_slopes_uses_three_effects():
    config = SimulationConfig(design="random_slopes", n=8, n_i=4, p=5, tau=1.6)
    data, truth = generate("random_slopes", config, replication_seed(config, 1))
    assert data.z_terms == ("intercept", 2, 3)
    assert truth.gamma.shape == (24,)


def test_zero_tau_gives_zero_random_effects():
    config = SimulationConfig(n=5, n_i=2, p=4, tau=0.0)
    _, truth = generate("random_intercepts", config, replication_seed(config, 0))
    assert_array_equal(truth.gamma, 0.0)


def test_constant_covariate_design():
    config = SimulationConfig(design="constant_covariate", n=7, n_i=3, p=1)
    data, truth = generate("constant_covariate", config, replication_seed(config, 0))
    assert data.p == 1
    assert data.covariate_kind == (CLUSTER_CONSTANT,)
    assert truth.beta0 == 0.0
    assert_array_equal(truth.beta, [1.0])


def test_generation_is_deterministic_per_replication():
    config = SimulationConfig(n=5, n_i=3, p=4)
    first, _ = generate("random_intercepts", config, replication_seed(config, 3))
    again, _ = generate("random_intercepts", config, replication_seed(config, 3))
    other, _ = generate("random_intercepts", config, replication_seed(config, 4))
    assert_array_equal(first.y, again.y)
    assert not np.array_equal(first.y, other.y)


@pytest.mark.parametrize(
    "changes", [{"p": 3}, {"n": 1}, {"tau": -0.1}, {"sigma": 0.0}, {"design": "crossed"}, {"replications": 0},
     {"replications": 1.5}, {"n": "ten"}]
)
def test_invalid_grid_cell(changes):
    with pytest.raises(ConfigError):
        SimulationConfig(**changes)


def test_evaluate_empty_model():
    config = SimulationConfig(n=4, n_i=2, p=6, tau=0.4, sigma=0.4)
    _, truth = generate("random_intercepts", config, replication_seed(config, 0))
    state = ModelState.zeros(8, 6, 4, 1).evolve(sigma2=truth.sigma ** 2, Q=truth.Q.copy())
    metrics = evaluate(truth, state)
    assert metrics["mse_beta"] == 55.0
    assert metrics["mse_gamma"] == pytest.approx(float(np.sum(truth.gamma ** 2)))
    assert metrics["mse_sigma"] == 0.0
    assert metrics["mse_tau"] == 0.0
    assert metrics["fn_rate"] == 1.0
    assert metrics["fp_rate"] == 0.0


def test_evaluate_selection_rates():
    config = SimulationConfig(n=4, n_i=2, p=6)
    _, truth = generate("random_intercepts", config, replication_seed(config, 0))
    beta = np.array([2.0, 4.0, 0.0, 0.0, 0.1, 0.0])
    state = ModelState.zeros(8, 6, 4, 1).evolve(beta0=1.0, beta=beta)
    metrics = evaluate(truth, state)
    assert metrics["fn_rate"] == 0.5
    assert metrics["fp_rate"] == 0.5
    assert metrics["beta1_hat"] == 2.0


def test_grid_cells_cross_tau_and_p():
    cells = grid_cells({"design": "random_intercepts", "tau": [0.4, 0.8, 1.6], "p": [10, 25], "n": 20})
    assert len(cells) == 6
    assert {(c.tau, c.p) for c in cells} == {(t, p) for t in (0.4, 0.8, 1.6) for p in (10, 25)}
    assert all(c.n == 20 for c in cells)


def test_grid_rejects_unknown_key():
    with pytest.raises(ConfigError, match="unknown grid key"):
        grid_cells({"tau": 0.4, "lambda": 3})


def test_bench_grid_small(tmp_path):
    report = bench_grid(SMALL_GRID, progress=False)
    assert len(report.rows) == 4
    assert not report.failures
    assert [(c["variant"], c["replications"]) for c in report.aggregates] == [("aic", 2), ("cv", 2)]
    for row in report.rows:
        assert 1 <= row["m_star"] <= 20

    csv_path, json_path = write_report(report, str(tmp_path), "small")
    with open(json_path, encoding="utf-8") as f:
        cells = json.load(f)["cells"]
    assert len(cells) == 2
    assert cells[0]["failed"] == 0


def test_bench_grid_csv_is_reproducible(tmp_path):
    first = tmp_path / "a.csv"
    second = tmp_path / "b.csv"
    bench_grid(SMALL_GRID, progress=False).write_csv(str(first))
    bench_grid(SMALL_GRID, progress=False).write_csv(str(second))
    assert first.read_bytes() == second.read_bytes()


def test_failed_replications_are_recorded(monkeypatch):
    def failing(data, config):
        raise NumericalError("ill-conditioned variance state: test")

    monkeypatch.setattr(simulation, "run", failing)
    report = bench_grid(dict(SMALL_GRID, variants=["aic"]), progress=False)
    assert len(report.failures) == 2
    assert report.rows[0]["error"] == "NUMERICAL_FAILURE: ill-conditioned variance state: test"
    assert report.aggregates[0]["failed"] == 2
    assert report.aggregates[0]["mse_beta"] is None


def test_aggregate_empty():
    assert aggregate([]) == []


def test_unknown_variant_rejected():
    with pytest.raises(ConfigError, match="unknown variant"):
        bench_grid(dict(SMALL_GRID, variants=["bic"]), progress=False)


def test_grid_values_given_as_whole_floats():
    cells = grid_cells({"tau": 4e-1, "p": [1e1], "n": 6.0, "replications": 2.0})
    assert (cells[0].p, cells[0].n, cells[0].replications) == (10, 6, 2)
    assert type(cells[0].replications) is int
