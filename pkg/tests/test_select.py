from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from cpmm.em import FitConfig, fit
from cpmm.exceptions import FitError
from cpmm.patterns import ModelSpec
from cpmm.select import GridRow, GridSpec, aic, bic, cell_seed, grid_search
from cpmm.sim import generate_dataset, scenario_params

FAST = FitConfig(n_starts=3, max_iter=200)


def test_bic_aic_examples():
    assert bic(-100.0, 10, 50) == pytest.approx(200 + 10 * math.log(50))
    assert round(bic(-100.0, 10, 50), 3) == 239.120
    assert bic(-42.5, 0, 9) == 85.0
    assert aic(-100.0, 10) == 220.0
    assert aic(-42.5, 0) == 85.0


def test_bic_affine_in_nu():
    for n in (5, 359, 10_000):
        assert bic(-7.0, 11, n) - bic(-7.0, 10, n) == pytest.approx(math.log(n))
    assert aic(-7.0, 11) - aic(-7.0, 10) == pytest.approx(2.0)


def test_table5_consistency_probe():
    # printed loglik is rounded to the unit, so the implied BIC carries +-1 (plus +-0.5 for its own rounding)
    assert abs(bic(-14030, 122, 359) - 28777) <= 1.5
    assert abs(bic(-14030, 125, 359) - 28777) > 1.5


@pytest.fixture(scope="module")
def k2_data():
    truth = scenario_params(2, 4, 2, q=1, m=1, phi="GAR", omega="VVV", seed=31)
    data, _ = generate_dataset(truth, n=150, seed=32)
    return data


def test_single_cell_equals_direct_fit(k2_data):
    grid = GridSpec(ks=(2,), ms=(1,), omegas=("VVV",), phis=("GAR",), config=FAST)
    table = grid_search(k2_data, grid)
    assert len(table.rows) == 1
    spec = table.best.spec
    direct = fit(k2_data, spec, replace(FAST, seed=cell_seed(FAST.seed, spec)))
    assert table.best.loglik == direct.loglik
    assert table.best.bic == bic(direct.loglik, table.best.nu, k2_data.n)


def test_rows_one_per_cell_and_order_independent(k2_data):
    g1 = GridSpec(ks=(1, 2), ms=(0, 1), omegas=("VVV", "EEE"), phis=("GAR", "EGAR"), covariates=(True, False),
                  config=FAST)
    g2 = replace(g1, ks=(2, 1), ms=(1, 0), omegas=("EEE", "VVV"), phis=("EGAR", "GAR"), covariates=(False, True))
    t1, t2 = grid_search(k2_data, g1), grid_search(k2_data, g2)
    assert len(t1.rows) == 32
    key = lambda r: (r.spec, r.loglik, r.bic, r.nu)  # noqa: E731
    assert [key(r) for r in t1.rows] == [key(r) for r in t2.rows]
    assert all(a.sort_key() <= b.sort_key() for a, b in zip(t1.rows, t1.rows[1:]))
    assert t1.best.spec.k == 2
    assert "BIC" in t1.metadata["bic"]


def test_threads_do_not_change_results(k2_data):
    g = GridSpec(ks=(1, 2, 3), ms=(1,), config=FAST)
    a = grid_search(k2_data, g)
    b = grid_search(k2_data, replace(g, threads=3))
    assert [(r.spec, r.loglik) for r in a.rows] == [(r.spec, r.loglik) for r in b.rows]


def test_tie_break_by_nu():
    s_small = ModelSpec(1, "EEE", "GAR", 0, 3, 2)
    s_big = ModelSpec(1, "VVV", "GAR", 1, 3, 2)
    rows = [GridRow(s_big, -1.0, 20, 5.0, 5.0, 1.0, True, 0.0), GridRow(s_small, -1.0, 10, 5.0, 5.0, 1.0, True, 0.0)]
    rows.sort(key=GridRow.sort_key)
    assert rows[0].spec == s_small
    failed = GridRow(s_small, math.nan, 10, math.nan, math.nan, math.nan, False, 0.0, failed=True)
    rows = sorted([failed, *rows], key=GridRow.sort_key)
    assert rows[-1].failed


def test_selects_true_k():
    hits = 0
    for seed in range(3):
        truth = scenario_params(2, 4, 2, m=1, seed=100 + seed)
        data, _ = generate_dataset(truth, n=150, seed=200 + seed)
        table = grid_search(data, GridSpec(ks=(1, 2, 3), ms=(1,), config=FAST))
        hits += table.best.spec.k == 2
    assert hits == 3


def test_smaller_true_pattern_preferred():
    truth = scenario_params(2, 4, 3, m=1, omega="EEE", seed=41)
    data, _ = generate_dataset(truth, n=200, seed=42)
    table = grid_search(data, GridSpec(ks=(2,), ms=(1,), omegas=("EEE", "VVV"), config=FAST))
    assert table.best.spec.omega == "EEE"


def test_warm_start_chain(k2_data):
    table = grid_search(k2_data, GridSpec(ks=(1, 2, 3), ms=(1,), config=FAST, warm_start=True))
    assert sorted(r.spec.k for r in table.rows) == [1, 2, 3]
    assert not any(r.failed for r in table.rows)


def test_all_cells_fail():
    rng = np.random.default_rng(1)
    from cpmm.data import PanelDataset

    data = PanelDataset(rng.normal(size=(6, 3, 2)), None)
    with pytest.raises(FitError) as info:
        grid_search(data, GridSpec(ks=(3,), ms=(1,), config=FAST))
    assert info.value.diagnostics


def test_failed_cell_kept_in_table(k2_data):
    small = k2_data.subset(np.arange(8))
    table = grid_search(small, GridSpec(ks=(1, 4), ms=(0,), covariates=(False,), config=FAST))
    assert [r.failed for r in table.rows] == [False, True]
    assert table.rows[1].error
