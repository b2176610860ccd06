from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from cpmm.em import FitConfig, FitResult, MixtureParams, e_step, fit, predict, rmsd
from cpmm.exceptions import DomainError
from cpmm.matnorm import TemporalCholesky
from cpmm.patterns import ModelSpec
from cpmm.sim import (
    adjusted_rand_index,
    default_covariate_sampler,
    generate_dataset,
    recovery_report,
    scenario_params,
)


def as_fit(data, params) -> FitResult:
    post = e_step(data, params)
    return FitResult(params, post, [0.0], True, 0, 0, post.labels, rmsd(predict(data, params), data.Y))


def test_centred_noise():
    spec = ModelSpec(1, "VVV", "GAR", 0, 3, 2)
    params = MixtureParams(spec, [1.0], np.zeros((1, 3, 2)), (TemporalCholesky.identity(3),), np.eye(2)[None])
    n = 4000
    data, _ = generate_dataset(params, n=n, seed=1)
    assert np.all(np.abs(data.Y.mean(axis=0)) < 3 / np.sqrt(n))


def test_weights_binomial():
    params = replace(scenario_params(2, 2, 1, seed=0), weights=np.array([0.5, 0.5]))
    n = 10_000
    _, truth = generate_dataset(params, n=n, seed=2)
    assert abs(np.sum(truth.labels == 0) - n / 2) < 3 * np.sqrt(n / 4)


def test_generation_deterministic():
    params = scenario_params(3, 4, 2, q=2, seed=5)
    a, ta = generate_dataset(params, default_covariate_sampler(1), n=50, seed=9)
    b, tb = generate_dataset(params, default_covariate_sampler(1), n=50, seed=9)
    assert a.equals(b) and np.array_equal(ta.labels, tb.labels)
    assert set(np.unique(a.X[:, :, 0])) <= {0.0, 1.0}
    assert np.all(a.X[:, :, 0] == a.X[:, :1, 0])


def test_ari_examples():
    a = np.array([0, 0, 1, 1, 2, 2, 2])
    assert adjusted_rand_index(a, a) == 1.0
    assert adjusted_rand_index(a, (a + 1) % 3) == 1.0
    with pytest.raises(DomainError):
        adjusted_rand_index(a, a[:-1])


def test_ari_against_sklearn(rng):
    for _ in range(30):
        n = rng.integers(2, 60)
        a, b = rng.integers(0, 4, n), rng.integers(0, 3, n)
        assert adjusted_rand_index(a, b) == pytest.approx(adjusted_rand_score(a, b), abs=1e-12)
        assert adjusted_rand_index(a, b) == pytest.approx(adjusted_rand_index(b, a), abs=1e-12)


def test_ari_independent_labelings():
    rng = np.random.default_rng(4)
    a, b = rng.integers(0, 3, 10_000), rng.integers(0, 3, 10_000)
    assert abs(adjusted_rand_index(a, b)) < 0.02


def test_report_for_truth_and_permutation():
    truth = scenario_params(3, 4, 2, q=1, seed=8)
    data, tb = generate_dataset(truth, n=120, seed=9)
    rep = recovery_report(tb, as_fit(data, truth))
    assert rep.ari == 1.0 and rep.selected_k_correct
    assert rep.rmse_regression == 0.0 and rep.rmse_rho == 0.0 and rep.rmse_D == 0.0 and rep.rmse_omega == 0.0
    rep2 = recovery_report(tb, as_fit(data, truth.permuted([2, 0, 1])))
    d1, d2 = rep.to_dict(), rep2.to_dict()
    d1.pop("permutation"), d2.pop("permutation")
    assert d1 == d2


def test_report_k_mismatch():
    truth = scenario_params(2, 3, 2, seed=3)
    data, tb = generate_dataset(truth, n=80, seed=4)
    res = fit(data, ModelSpec(1, "VVV", "GAR", 1, 3, 2), FitConfig(n_starts=1))
    rep = recovery_report(tb, res)
    assert not rep.selected_k_correct
    assert rep.rmse_regression is None and rep.permutation is None
    assert rep.ari < 1.0


def test_misspecified_temporal_order():
    truth = scenario_params(2, 5, 2, m=1, rho=0.8, seed=6)
    data, tb = generate_dataset(truth, n=200, seed=7)
    good = recovery_report(tb, fit(data, truth.spec, FitConfig(n_starts=2)))
    bad = recovery_report(tb, fit(data, replace(truth.spec, m=0), FitConfig(n_starts=2)))
    assert bad.selected_k_correct
    assert bad.rmse_rho > good.rmse_rho


def test_end_to_end_recovery():
    truth = scenario_params(2, 4, 3, q=2, m=1, separation=10.0, seed=12)
    data, tb = generate_dataset(truth, default_covariate_sampler(), n=400, seed=13)
    res = fit(data, truth.spec, FitConfig(n_starts=3))
    rep = recovery_report(tb, res)
    assert rep.rmse_regression <= 0.1
    assert rep.ari == 1.0
    again = recovery_report(tb, fit(data, truth.spec, FitConfig(n_starts=3)))
    assert again.to_dict() == rep.to_dict()
