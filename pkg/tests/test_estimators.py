import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bcfiv.dataset import Dataset
from bcfiv.estimators import (
    Z95,
    infer_tree,
    itt_hat,
    pic_hat,
    stars_for,
    tsls,
    wald,
    weak_iv_test,
)
from bcfiv.simgen import CELL_DEFINITIONS, SimScenario, generate
from bcfiv.subgroups import match_truth, subgroup_tree
from bcfiv.tree import DecisionTree, Node

GOLDEN = Path(__file__).parent / "golden"


def fixed_node(n, tau, comp, seed):
    g = np.random.default_rng(seed)
    z = (g.random(n) < 0.5).astype(float)
    w = z * (g.random(n) < comp)
    y = g.standard_normal(n) + tau * w
    return y, w, z


# -- moment estimators --------------------------------------------------------


def test_itt_examples():
    assert itt_hat([1, 1, 0, 0], [1, 1, 0, 0]) == 1.0
    assert itt_hat([3, 1, 2, 2], [1, 0, 1, 0]) == 1.0


def test_pic_examples():
    z = np.r_[np.ones(8), np.zeros(8)]
    assert pic_hat(z, z) == 1.0
    w = np.r_[np.ones(6), np.zeros(2), np.zeros(8)]
    assert pic_hat(w, z) == 0.75


def test_single_arm_node_discarded():
    e = tsls(np.arange(5.0), np.ones(5), np.ones(5))
    assert e.discarded and math.isnan(e.tau_hat) and e.n1 == 5 and e.n0 == 0


def test_zero_first_stage_discarded():
    z = np.array([1, 1, 0, 0.0])
    e = tsls(np.array([1, 2, 3, 4.0]), np.array([1, 0, 1, 0.0]), z)
    assert e.discarded and e.reason == "no first stage"


# -- 2SLS ----------------------------------------------------------------------


def test_perfect_compliance_collapses_to_two_sample():
    g = np.random.default_rng(1)
    z = (g.random(300) < 0.4).astype(float)
    y = g.standard_normal(300) * (1 + z) + 0.3 * z
    e = tsls(y, z, z)
    y1, y0 = y[z == 1], y[z == 0]
    se2 = np.sum((y1 - y1.mean()) ** 2) / y1.size**2 + np.sum((y0 - y0.mean()) ** 2) / y0.size**2
    assert e.tau_hat == pytest.approx(y1.mean() - y0.mean(), abs=1e-12)
    assert e.se == pytest.approx(math.sqrt(se2), rel=1e-10)


def node_arrays():
    n = st.integers(4, 60)
    return n.flatmap(
        lambda k: st.tuples(
            hnp.arrays(float, k, elements=st.floats(-100, 100)),
            hnp.arrays(float, k, elements=st.sampled_from([0.0, 1.0])),
            hnp.arrays(float, k, elements=st.sampled_from([0.0, 1.0])),
        )
    )


@given(node_arrays())
def test_wald_equals_tsls(arrs):
    y, w, z = arrs
    assume(0 < z.sum() < z.size)
    pic = pic_hat(w, z)
    assume(abs(pic) > 0.05)
    e = tsls(y, w, z)
    assert abs(e.tau_hat - wald(y, w, z)) <= 1e-10 * max(1.0, abs(e.tau_hat))
    assert abs(e.tau_hat * e.pic_hat - e.itt_hat) <= 1e-10 * max(1.0, abs(e.itt_hat))


@given(node_arrays(), st.floats(0.1, 50), st.floats(-50, 50))
def test_scale_equivariance(arrs, c, shift):
    y, w, z = arrs
    assume(0 < z.sum() < z.size and abs(pic_hat(w, z)) > 0.05)
    a, b, s = tsls(y, w, z), tsls(c * y, w, z), tsls(y + shift, w, z)
    assert b.tau_hat == pytest.approx(c * a.tau_hat, rel=1e-9, abs=1e-9)
    assert b.se == pytest.approx(c * a.se, rel=1e-9, abs=1e-9)
    assert s.tau_hat == pytest.approx(a.tau_hat, rel=1e-9, abs=1e-7)
    assert s.se == pytest.approx(a.se, rel=1e-7, abs=1e-7)


@given(node_arrays())
def test_estimate_invariants(arrs):
    y, w, z = arrs
    assume(0 < z.sum() < z.size and abs(pic_hat(w, z)) > 0.05)
    e = tsls(y, w, z)
    if math.isfinite(e.se):
        assert e.ci95[0] == pytest.approx(e.tau_hat - Z95 * e.se)
        assert e.ci95[1] == pytest.approx(e.tau_hat + Z95 * e.se)
    assert e.stars == (stars_for(e.p_value) if not math.isnan(e.p_value) else "")


def test_simulated_node_within_three_se():
    y, w, z = fixed_node(2000, 0.5, 0.75, 3)
    e = tsls(y, w, z)
    assert abs(e.tau_hat - 0.5) <= 3 * e.se
    assert e.p_value < 0.01 and e.stars == "***"


def test_consistency_median_error_shrinks():
    med = []
    for n in (500, 2000, 8000):
        errs = [abs(tsls(*fixed_node(n, 0.5, 0.75, 1000 * n + r)).tau_hat - 0.5) for r in range(100)]
        med.append(np.median(errs))
    assert med[0] > med[1] > med[2]


def test_stars_thresholds():
    assert [stars_for(p) for p in (0.005, 0.01, 0.03, 0.05, 0.07, 0.1, 0.5)] == ["***", "**", "**", "*", "*", "", ""]


# -- weak instrument ----------------------------------------------------------------


def test_weak_iv_perfect_first_stage():
    z = np.tile([0.0, 1.0], 50)
    f, weak = weak_iv_test(z, z)
    assert f == math.inf and not weak


def test_weak_iv_null_first_stage():
    fs = []
    for r in range(300):
        g = np.random.default_rng(r)
        z = (g.random(100) < 0.5).astype(float)
        w = (g.random(100) < 0.5).astype(float)
        fs.append(weak_iv_test(w, z)[0])
    fs = np.array(fs)
    assert abs(fs.mean() - 1.0) <= 0.25
    assert np.mean(fs < 10) > 0.99


def test_weak_iv_threshold_sensitivity():
    def weak_rate(n):
        out = []
        for r in range(300):
            g = np.random.default_rng(r)
            z = (g.random(n) < 0.5).astype(float)
            out.append(weak_iv_test(z * (g.random(n) < 0.25), z)[1])
        return np.mean(out)

    assert weak_rate(250) < 0.05
    assert weak_rate(40) > 0.3


# -- annotated trees ----------------------------------------------------------------------


def cell_tree(p=10):
    return DecisionTree(
        (
            Node(0, 0, feature=0, threshold=0.5, left=1, right=2),
            Node(1, 1, feature=1, threshold=0.5, left=3, right=4),
            Node(2, 1, feature=1, threshold=0.5, left=5, right=6),
            Node(3, 2), Node(4, 2), Node(5, 2), Node(6, 2),
        ),
        n_features=p,
    )


def test_root_is_overall_cace():
    d = generate(SimScenario(n=2000, k=0.5, seed=5)).data
    st_ = subgroup_tree(cell_tree(), d.x)
    at = infer_tree(st_, d)
    assert abs(at.root.tau_hat) <= 3 * at.root.se
    assert at.root.tau_hat == tsls(d.y, d.w, d.z).tau_hat


def test_first_cell_leaf_recovers_effect():
    sd = generate(SimScenario(n=2000, k=1.0, seed=6))
    st_ = subgroup_tree(cell_tree(), sd.data.x)
    assert match_truth(st_, {"l1": CELL_DEFINITIONS["l1"]})["l1"]
    at = infer_tree(st_, sd.data)
    leaf = at.estimates[3]
    assert 400 <= leaf.n <= 600
    assert abs(leaf.tau_hat - 1.0) <= 3 * leaf.se


def test_small_and_empty_nodes_discarded():
    g = np.random.default_rng(7)
    x = np.zeros((200, 2))
    x[:10, 0] = 1.0  # ten rows on the right
    z = (g.random(200) < 0.5).astype(float)
    z[:10] = [1, 0] * 5
    d = Dataset(y=g.standard_normal(200), w=z, z=z, x=x)
    t = DecisionTree(
        (
            Node(0, 0, feature=0, threshold=0.5, left=1, right=2),
            Node(1, 1, feature=1, threshold=0.5, left=3, right=4),
            Node(2, 1), Node(3, 2), Node(4, 2),
        ),
        n_features=2,
    )
    at = infer_tree(subgroup_tree(t, x), d, min_node=50)
    small = at.estimates[2]
    assert small.n == 10 and small.discarded and "n<50" in small.reason
    empty = at.estimates[4]
    assert empty.n == 0 and empty.discarded
    assert not at.root.discarded
    assert sum(at.inference_shares[j] for j in t.leaves) == pytest.approx(1.0)
    tau, lo, hi, node = at.unit_estimates(x)
    assert np.all(node[:10] == 0)  # fall back to the root when the leaf is discarded


def test_weak_node_discarded():
    g = np.random.default_rng(8)
    n = 400
    z = (g.random(n) < 0.5).astype(float)
    w = (g.random(n) < 0.5).astype(float)  # no first stage
    d = Dataset(y=g.standard_normal(n), w=w, z=z, x=np.zeros((n, 1)))
    at = infer_tree(subgroup_tree(DecisionTree.stump(1), d.x), d)
    assert at.root.weak_flag and at.root.discarded and "weak" in at.root.reason


def golden_tree():
    sd = generate(SimScenario(n=1200, k=1.0, seed=11))
    names = tuple(f"x{j + 1}" for j in range(10))
    return infer_tree(subgroup_tree(cell_tree(), sd.data.x, names), sd.data)


def test_render_golden():
    got = golden_tree().render() + "\n"
    want = (GOLDEN / "annotated_tree.txt").read_text()
    assert got == want


def test_json_is_strict_and_complete():
    at = golden_tree()
    d = json.loads(at.to_json())
    assert len(d["nodes"]) == 7
    for nd in d["nodes"]:
        e = nd["estimate"]
        assert set(e) >= {"tau_hat", "se", "ci95", "p_value", "stars", "first_stage_f", "weak_flag", "discarded"}
        assert 0 <= nd["inference_share"] <= 1
