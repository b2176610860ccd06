from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import norm

from cpmm.data import PanelDataset
from cpmm.em import FitConfig, fit
from cpmm.exceptions import DomainError, InferenceError
from cpmm.infer import (
    coefficient_loglik,
    numerical_gradient,
    numerical_hessian,
    observed_information,
    standard_errors,
    wald,
    wald_report,
)
from cpmm.patterns import ModelSpec
from cpmm.sim import generate_dataset, scenario_params

# (estimate, se, printed one-sided p) for every cell of a reference coefficient table,
# rows Gender, Age, Education, Health self-rating; columns group 1..3 x (EM, MS, MO)
REFERENCE_CELLS = [
    (-0.96, 0.90, 0.144), (-2.71, 1.25, 0.015), (0.65, 0.96, 0.249),
    (1.67, 0.45, 0.000), (0.19, 0.25, 0.224), (-0.93, 0.47, 0.024),
    (1.42, 0.71, 0.022), (0.25, 0.54, 0.320), (-0.07, 0.26, 0.389),
    (-0.07, 0.02, 0.001), (0.01, 0.02, 0.329), (-0.00, 0.03, 0.454),
    (-0.16, 0.04, 0.000), (-0.05, 0.03, 0.015), (0.05, 0.04, 0.078),
    (-0.08, 0.02, 0.001), (0.01, 0.04, 0.406), (-0.00, 0.02, 0.492),
    (0.05, 0.11, 0.335), (0.05, 0.10, 0.331), (0.02, 0.12, 0.450),
    (0.41, 0.06, 0.000), (0.48, 0.03, 0.000), (0.11, 0.05, 0.010),
    (0.24, 0.09, 0.002), (0.25, 0.08, 0.001), (0.05, 0.04, 0.101),
    (0.09, 0.24, 0.355), (0.05, 0.32, 0.435), (-0.67, 0.40, 0.045),
    (-0.09, 0.13, 0.249), (-0.05, 0.09, 0.302), (-0.62, 0.11, 0.000),
    (-0.15, 0.22, 0.253), (-0.04, 0.18, 0.405), (-0.33, 0.08, 0.000),
]


def test_wald_cited_cells():
    z, p1, p2 = wald(1.67, 0.45)
    assert z == pytest.approx(3.711, abs=1e-3)
    assert abs(p1 - 0.000) <= 0.002
    assert p2 == 2 * p1
    z, p1, _ = wald(-2.71, 1.25)
    assert z == pytest.approx(-2.168, abs=1e-3)
    assert abs(p1 - 0.015) <= 0.002


def test_wald_zero_and_domain():
    assert wald(0.0, 1.0) == (0.0, 0.5, 1.0)
    with pytest.raises(DomainError):
        wald(1.0, 0.0)
    with pytest.raises(DomainError):
        wald(1.0, -2.0)


def _p_range(est, se):
    """One-sided p over the rounding box est +- 0.005, se +- 0.005."""
    lo = max(abs(est) - 0.005, 0.0) / (se + 0.005)
    hi = (abs(est) + 0.005) / (se - 0.005)
    return wald(hi, 1.0)[1], wald(lo, 1.0)[1]


@pytest.mark.parametrize("est,se,p", REFERENCE_CELLS)
def test_reference_cells_consistent_with_one_sided(est, se, p):
    # printed inputs carry 2 decimals, so the check runs over their rounding interval
    pmin, pmax = _p_range(est, se)
    assert pmin - 0.0005 - 0.002 <= p <= pmax + 0.0005 + 0.002


def test_reference_cells_point_arithmetic():
    # literal property: p from the printed (estimate, se) within 0.002 of the printed p.
    # Expected to fail: 17 of 36 cells have inputs rounded too coarsely for this.
    off = [(est, se, p, round(wald(est, se)[1], 4)) for est, se, p in REFERENCE_CELLS if abs(wald(est, se)[1] - p) > 0.002]
    assert not off, f"{len(off)} cells outside +-0.002: {off}"


def test_reference_cells_reject_two_sided():
    bad = 0
    for est, se, p in REFERENCE_CELLS:
        pmin, pmax = _p_range(est, se)
        if not (2 * pmin - 0.0025 <= p <= min(1.0, 2 * pmax) + 0.0025):
            bad += 1
    assert bad >= 20


def test_hessian_exact_on_quadratic(rng):
    A = rng.normal(size=(4, 4))
    H = -(A @ A.T + np.eye(4))
    b = rng.normal(size=4)

    def f(x):
        return 0.5 * x @ H @ x + b @ x + 3.0

    x0 = rng.normal(size=4) * 5
    # no truncation error on a quadratic; a wide step keeps cancellation error far below 1e-6
    np.testing.assert_allclose(numerical_hessian(f, x0, rel_step=1e-2), H, atol=1e-6)
    np.testing.assert_allclose(numerical_gradient(f, x0, rel_step=1e-2), H @ x0 + b, atol=1e-6)
    # at the default step the same check only holds to the cancellation floor eps |f| / h^2
    np.testing.assert_allclose(numerical_hessian(f, x0), H, atol=1e-3)


def test_standard_errors_refuse_non_pd():
    with pytest.raises(InferenceError):
        standard_errors(np.diag([1.0, -1.0]))
    np.testing.assert_allclose(standard_errors(np.diag([4.0, 0.25])), [0.5, 2.0])


def test_ols_oracle():
    rng = np.random.default_rng(3)
    n, q = 200, 2
    X = rng.normal(size=(n, 1, q))
    y = 1.0 + X[:, 0] @ np.array([0.5, -2.0]) + rng.normal(size=n) * 0.7
    data = PanelDataset(y[:, None, None], X)
    res = fit(data, ModelSpec(1, "VVV", "GAR", 0, 1, 1, q, True), FitConfig(n_starts=1, tol=1e-14))
    design = np.column_stack([np.ones(n), X[:, 0]])
    beta = np.linalg.lstsq(design, y, rcond=None)[0]
    sigma2 = np.sum((y - design @ beta) ** 2) / n
    se_ref = np.sqrt(np.diag(sigma2 * np.linalg.inv(design.T @ design)))
    report = wald_report(data, res.params)
    se = np.array([r.se for r in report.rows])
    np.testing.assert_allclose(se, se_ref, rtol=1e-4)
    np.testing.assert_allclose([r.estimate for r in report.rows], beta, rtol=1e-8)
    assert [r.term for r in report.rows] == ["intercept[1]", "x1", "x2"]


@pytest.fixture(scope="module")
def fitted():
    truth = scenario_params(2, 4, 2, q=2, m=1, phi="EGAR", seed=9)
    data, _ = generate_dataset(truth, n=200, seed=10)
    res = fit(data, truth.spec, FitConfig(n_starts=3, tol=1e-14, max_iter=3000))
    return data, res


def test_information_symmetric_pd_and_stationary(fitted):
    data, res = fitted
    info = observed_information(data, res.params)
    assert np.array_equal(info, info.T)
    assert np.linalg.eigvalsh(info)[0] > 0
    se = standard_errors(info)
    g = numerical_gradient(coefficient_loglik(data, res.params), res.params.theta.ravel())
    assert np.linalg.norm(g * se) < 1e-3


def test_report_layout(fitted):
    data, res = fitted
    report = wald_report(data, res.params)
    assert len(report.rows) == res.params.theta.size
    assert len(report.covariate_rows()) == 2 * 2 * 2
    for r in report.rows:
        assert r.p_two_sided == pytest.approx(2 * norm.sf(abs(r.z)))


def test_se_scale_with_sample_size():
    truth = scenario_params(2, 3, 2, q=1, m=1, phi="EGAR", seed=14)
    ratios = []
    for seed in range(3):
        small, _ = generate_dataset(truth, n=200, seed=50 + seed)
        large, _ = generate_dataset(truth, n=800, seed=60 + seed)
        se = []
        for d in (small, large):
            res = fit(d, truth.spec, FitConfig(n_starts=2, tol=1e-12, max_iter=2000), init=truth)
            se.append(np.array([r.se for r in wald_report(d, res.params).covariate_rows()]))
        ratios.append(np.mean(se[0] / se[1]))
    assert abs(np.mean(ratios) / 2.0 - 1.0) < 0.15
