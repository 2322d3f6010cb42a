import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcfiv.bart import BartConfig
from bcfiv.model import estimate_instrument_propensity
from bcfiv.simgen import (
    CELLS,
    Compliance,
    SimScenario,
    generate,
    oracle_cell_cace,
    parse_key_values,
    unit_stream,
)


def test_strong_cells():
    assert SimScenario(k=1).cell_tau() == {"l1": 1.0, "l2": -1.0, "l3": 0.0, "l4": 0.0}


def test_slight_cells():
    assert SimScenario(k=1, heterogeneity="slight").cell_tau() == {"l1": 1.0, "l2": -1.0, "l3": 0.5, "l4": -0.5}


def test_null_effect():
    sd = generate(SimScenario(n=300, k=0, seed=1))
    assert np.all(sd.true_tau == 0)
    assert set(oracle_cell_cace(sd).values()) == {0.0}


def test_oracle_strong_half():
    assert oracle_cell_cace(SimScenario(k=0.5)) == {"l1": 0.5, "l2": -0.5, "l3": 0.0, "l4": 0.0}


def test_oracle_constant_itt():
    s = SimScenario(itt_mode="constant_itt", compliance=Compliance.gap(0.5))
    o = oracle_cell_cace(s)
    c = s.itt_constant
    assert o["l1"] == pytest.approx(c / 0.25) and o["l2"] == pytest.approx(c / 0.75)
    assert o["l3"] == pytest.approx(c / 0.5)


def test_compliance_grid_steps():
    gaps = np.round(np.arange(0, 0.5001, 0.05), 10)
    rates = [(Compliance.gap(g).l1, Compliance.gap(g).l2) for g in gaps]
    assert rates[1] == pytest.approx((0.475, 0.525))
    assert rates[-1] == pytest.approx((0.25, 0.75))
    assert len(rates) == 11


@pytest.mark.parametrize("robustness", ["none", "confounded_instrument", "correlated_covariates"])
def test_structural_invariants(robustness):
    sd = generate(SimScenario(n=2000, k=0.7, heterogeneity="slight", robustness=robustness, seed=3))
    d = sd.data
    assert np.array_equal(sd.y1, sd.y0 + sd.w1 * sd.true_tau)
    assert np.array_equal(d.y, np.where(d.z == 1, sd.y1, sd.y0))
    assert np.all(d.w[d.z == 0] == 0)  # one-sided noncompliance
    assert np.array_equal(d.w, d.z * sd.w1)
    want = np.select(
        [(d.x[:, 0] == 0) & (d.x[:, 1] == 0), (d.x[:, 0] == 1) & (d.x[:, 1] == 1), d.x[:, 0] == 1],
        ["l1", "l2", "l3"], "l4",
    )
    assert np.array_equal(sd.cell, want)
    assert set(np.unique(d.x)) <= {0.0, 1.0}


def test_cell_compliance_within_three_se():
    s = SimScenario(n=8000, compliance=Compliance(default=0.5, l1=0.25, l2=0.75), seed=4)
    sd = generate(s)
    for c in CELLS:
        m = sd.cell == c
        rate = s.compliance.rate(c)
        se = math.sqrt(rate * (1 - rate) / m.sum())
        assert abs(sd.w1[m].mean() - rate) <= 3 * se


def test_covariate_margins_and_instrument():
    sd = generate(SimScenario(n=8000, seed=5))
    assert np.all(np.abs(sd.data.x.mean(axis=0) - 0.5) <= 3 * 0.5 / math.sqrt(8000))
    assert abs(sd.data.z.mean() - 0.5) <= 3 * 0.5 / math.sqrt(8000)


def test_copula_hits_target_correlation():
    sd = generate(SimScenario(n=8000, robustness="correlated_covariates", correlation=0.25, seed=6))
    c = np.corrcoef(sd.data.x, rowvar=False)
    off = c[~np.eye(10, dtype=bool)]
    assert np.all(np.abs(off - 0.25) <= 0.05)


def test_confounded_instrument_recovered_by_propensity():
    sd = generate(SimScenario(n=4000, robustness="confounded_instrument", seed=7))
    logistic = lambda a: 1 / (1 + math.exp(-a))
    want = {"l1": logistic(-1.0), "l2": logistic(1.0), "l3": 0.5, "l4": 0.5}
    pi = estimate_instrument_propensity(sd.data.x, sd.data.z, BartConfig(q=200, n_burn=100, n_draw=100))
    for c in CELLS:
        m = sd.cell == c
        assert abs(sd.data.z[m].mean() - want[c]) <= 0.05
        assert abs(pi[m].mean() - want[c]) <= 0.07


@settings(max_examples=20)
@given(n=st.integers(1, 60), extra=st.integers(1, 40), seed=st.integers(0, 2**32 - 1))
def test_growing_n_extends_prefix(n, extra, seed):
    a = generate(SimScenario(n=n, seed=seed, k=0.3))
    b = generate(SimScenario(n=n + extra, seed=seed, k=0.3))
    for f in ("y", "w", "z", "x"):
        assert np.array_equal(getattr(a.data, f), getattr(b.data, f)[:n])


def test_unit_draws_independent_of_other_units():
    # the stream of unit i is keyed by (seed, i) alone
    g1, g2 = unit_stream(9, 17), unit_stream(9, 17)
    assert np.array_equal(g1.random(5), g2.random(5))
    assert not np.array_equal(unit_stream(9, 17).random(5), unit_stream(9, 18).random(5))
    sd = generate(SimScenario(n=40, seed=9))
    g = unit_stream(9, 17)
    x17 = (g.standard_normal(10) > 0).astype(float)
    assert np.array_equal(sd.data.x[17], x17)


def test_parse_key_values():
    text = "# scenario\nn = 1000\nk=0.5  # effect\n\nheterogeneity = slight\n"
    kv = parse_key_values(text)
    assert kv == {"n": "1000", "k": "0.5", "heterogeneity": "slight"}
    s = SimScenario.from_mapping(kv)
    assert (s.n, s.k, s.heterogeneity) == (1000, 0.5, "slight")
    for bad in ("n 1000", "=3", "n=1\nn=2"):
        with pytest.raises(ValueError):
            parse_key_values(bad)


def test_from_mapping_compliance_forms():
    assert SimScenario.from_mapping({"compliance": "0.25"}).compliance == Compliance(0.25)
    s = SimScenario.from_mapping({"compliance_gap": "0.5"})
    assert (s.compliance.rate("l1"), s.compliance.rate("l2"), s.compliance.rate("l3")) == (0.25, 0.75, 0.5)
    s = SimScenario.from_mapping({"compliance_default": "0.6", "compliance_l1": "0.3"})
    assert s.compliance.rate("l1") == 0.3 and s.compliance.rate("l2") == 0.6
    with pytest.raises(ValueError):
        SimScenario.from_mapping({"colour": "red"})


@pytest.mark.parametrize(
    "kw", [dict(k=-1), dict(p=1), dict(compliance=0.0), dict(compliance=1.5), dict(heterogeneity="mild"),
           dict(robustness="other"), dict(n=0)]
)
def test_invalid_scenarios(kw):
    with pytest.raises(ValueError):
        SimScenario(**kw)


def test_csv_dump_has_oracle_columns(tmp_path):
    sd = generate(SimScenario(n=20, seed=1))
    sd.to_csv(tmp_path / "d.csv")
    header = (tmp_path / "d.csv").read_text().splitlines()[0].split(",")
    assert {"true_tau", "true_compliance", "cell", "y0", "y1", "w1"} <= set(header)
