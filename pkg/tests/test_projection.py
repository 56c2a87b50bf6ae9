import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blift.dgp import DgpParams, SimulationScenario, simulate_replicate, total_effects
from blift.errors import BootstrapError, ProjectionError
from blift.estimators import EffectEstimate, build_feature_table
from blift.exposure import exposure_table
from blift.graph import BipartiteGraph, validate_assignment
from blift.models import KrrConfig
from blift.projection import (
    attach_bootstrap,
    bootstrap_ci,
    bootstrap_effect,
    percentile_interval,
    project_effect,
    projection_factor,
    require_edge_additivity,
    resample_counts,
)

from conftest import graphs, random_graph


def treatment_estimate(value, estimand="PTTE", ci=None):
    return EffectEstimate(estimand, "treatment", "krr", value, 10, ci, 0.95 if ci else None)


def sized_graph(n_prim, n_out):
    # every outcome unit sees one primary unit
    return BipartiteGraph.from_arrays(
        [f"t{j:03d}" for j in range(n_prim)], [True] * n_prim, [f"o{i:03d}" for i in range(n_out)],
        np.arange(n_out), np.arange(n_out) % n_prim,
    )


def loop_totals(g, d):
    """Outcome-side and treatment-side sums of edge effects, by explicit iteration."""
    nprim = [0] * g.n_outcome
    nsec = [0] * g.n_outcome
    for i, j in zip(g.edge_outcome.tolist(), g.edge_treatment.tolist()):
        if g.is_primary[j]:
            nprim[i] += 1
        else:
            nsec[i] += 1
    o_prim = [i for i in range(g.n_outcome) if nprim[i]]
    o_both = [i for i in o_prim if nsec[i]]
    both = set(o_both)
    out_p = [0.0] * g.n_outcome
    out_s = [0.0] * g.n_outcome
    t_p = [0.0] * g.n_treatment
    t_s = [0.0] * g.n_treatment
    for e, (i, j) in enumerate(zip(g.edge_outcome.tolist(), g.edge_treatment.tolist())):
        if g.is_primary[j]:
            out_p[i] += d[e]
            t_p[j] += d[e]
        else:
            out_s[i] += d[e]
            if i in both:
                t_s[j] += d[e]
    prim = [j for j in range(g.n_treatment) if g.is_primary[j]]
    sec = [j for j in range(g.n_treatment) if not g.is_primary[j]]
    return (
        math.fsum(out_p[i] for i in o_prim) / len(o_prim), math.fsum(t_p[j] for j in prim) / len(prim),
        math.fsum(out_s[i] for i in o_both) / len(o_both) if o_both else None,
        math.fsum(t_s[j] for j in sec) / len(sec) if sec and o_both else None,
        len(prim), len(o_prim), len(sec), len(o_both),
    )


def test_projection_examples():
    g = sized_graph(300, 600)
    p = project_effect(treatment_estimate(2.0), g, edge_additive=True)
    assert p.estimate == 1.0 and p.level == "outcome" and p.method == "proj_krr"
    assert p.metadata["projection"] == {"factor": 0.5, "numerator": 300, "denominator": 600,
                                        "source_estimate": 2.0, "source_method": "krr"}
    g2 = BipartiteGraph.from_arrays(["a", "b"], [True, False], ["o1", "o2"], [0, 0, 1], [0, 1, 0])
    assert project_effect(treatment_estimate(0.0, "STTE"), g2, edge_additive=True).estimate == 0.0


def test_projection_requires_additivity_flag():
    g = sized_graph(3, 6)
    with pytest.raises(ProjectionError, match="edge-additive"):
        project_effect(treatment_estimate(1.0), g)
    with pytest.raises(ProjectionError, match="--edge-additive"):
        require_edge_additivity(False)
    require_edge_additivity(True)


def test_projection_errors():
    g = sized_graph(3, 6)
    with pytest.raises(ProjectionError, match="only treatment-level"):
        project_effect(EffectEstimate("PTTE", "outcome", "krr", 1.0, 6), g, edge_additive=True)
    with pytest.raises(ProjectionError, match="O_Both is empty"):
        projection_factor(g, "STTE")
    with pytest.raises(ProjectionError, match="unknown estimand"):
        projection_factor(g, "ATE")


def test_projection_scales_interval_and_replicates():
    g = sized_graph(2, 8)
    e = treatment_estimate(4.0, ci=(2.0, 6.0))
    e = EffectEstimate(**{**e.__dict__, "metadata": {"bootstrap": {"replicates": [3.0, 5.0]}}})
    p = project_effect(e, g, edge_additive=True)
    assert p.ci == (0.5, 1.5)
    assert p.metadata["bootstrap"]["replicates"] == [0.75, 1.25]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 500), st.integers(1, 25), st.integers(0, 25), st.integers(0, 2**32 - 1))
def test_projection_identity_on_random_edge_additive_outcomes(n_out, n_p, n_s, seed):
    g = random_graph(seed, n_out, n_p, n_s, edge_prob=min(1.0, 3.0 / (n_p + n_s)))
    if g.o_prim_index.size == 0:
        return
    rng = np.random.default_rng(seed)
    d = rng.normal(1.0, 1.0, g.n_edges) * rng.choice([1.0, 10.0], g.n_edges)
    po, pt, so, st_, n_tp, n_op, n_ts, n_ob = loop_totals(g, d)
    assert abs(po - n_tp / n_op * pt) <= 1e-10 * max(abs(po), 1e-300) or abs(po) < 1e-12
    gt = total_effects(g, d, np.zeros_like(d))
    f = projection_factor(g, "PTTE").factor
    assert math.isclose(gt.ptte_outcome, po, rel_tol=1e-10, abs_tol=1e-12)
    assert abs(gt.ptte_outcome - f * gt.ptte_treatment) <= 1e-10 * abs(gt.ptte_outcome) + 1e-13
    if so is not None and st_ is not None:
        fs = projection_factor(g, "STTE").factor
        assert fs == n_ts / n_ob
        assert abs(gt.stte_outcome - fs * gt.stte_treatment) <= 1e-10 * abs(gt.stte_outcome) + 1e-13


@pytest.mark.parametrize("p", [0.5, 0.4])
def test_projection_identity_on_simulated_truth(p):
    exp = simulate_replicate(SimulationScenario(1, 2.8, p, n_outcome=2000, n_primary=40, n_secondary=30),
                             DgpParams(), 0)
    gt, g = exp.truth, exp.graph
    assert math.isclose(gt.ptte_outcome, projection_factor(g, "PTTE").factor * gt.ptte_treatment, rel_tol=1e-10)
    assert math.isclose(gt.stte_outcome, projection_factor(g, "STTE").factor * gt.stte_treatment, rel_tol=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-10, 10), st.floats(-10, 10), st.integers(1, 50),
       st.integers(1, 200))
def test_projection_is_linear(x, y, a, b, n_p, n_o):
    g = sized_graph(n_p, max(n_o, n_p))
    lhs = project_effect(treatment_estimate(a * x + b * y), g, edge_additive=True).estimate
    rhs = (a * project_effect(treatment_estimate(x), g, edge_additive=True).estimate
           + b * project_effect(treatment_estimate(y), g, edge_additive=True).estimate)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-9)


# -- bootstrap -------------------------------------------------------------------------------


def test_resample_counts_sum_and_determinism():
    c = resample_counts(50, 7, 3)
    assert c.sum() == 50 and c.size == 50
    assert np.array_equal(c, resample_counts(50, 7, 3))
    assert not np.array_equal(c, resample_counts(50, 7, 4))


def test_zero_variance_collapses_interval():
    r = bootstrap_ci(lambda counts: 2.5, 20, B=30)
    assert r.interval == (2.5, 2.5) and r.standard_error == 0.0


def test_same_seed_same_interval():
    proc = lambda counts: float(np.dot(counts, np.arange(counts.size)))  # noqa: E731
    assert bootstrap_ci(proc, 30, B=50, seed=4) == bootstrap_ci(proc, 30, B=50, seed=4)
    assert bootstrap_ci(proc, 30, B=50, seed=4).interval != bootstrap_ci(proc, 30, B=50, seed=5).interval


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=300), st.floats(0.01, 0.98), st.floats(0.0, 1.0))
def test_wider_confidence_never_narrows(reps, c1, t):
    c2 = c1 + t * (0.99 - c1)
    arr = np.array(reps)
    lo1, hi1 = percentile_interval(arr, c1)
    lo2, hi2 = percentile_interval(arr, c2)
    assert lo2 <= lo1 and hi2 >= hi1


def test_failures_are_counted_then_fatal():
    def flaky(counts):
        if counts[0] == 0:
            raise RuntimeError("boom")
        return 1.0

    r = bootstrap_ci(flaky, 10, B=40, max_failure_rate=1.0)
    assert r.failures > 0 and len(r.replicates) == 40 - r.failures
    with pytest.raises(BootstrapError, match="failed"):
        bootstrap_ci(flaky, 10, B=40, max_failure_rate=0.0)
    with pytest.raises(BootstrapError):
        bootstrap_ci(flaky, 10, B=1)


def test_bootstrap_result_json_keeps_replicates():
    r = bootstrap_ci(lambda c: float(c[0]), 10, B=20, seed=2)
    d = json.loads(r.to_json())
    assert d["replicates"] == list(r.replicates) and d["interval"] == list(r.interval) and d["B"] == 20
    assert r.interval_at(0.5)[0] >= r.interval[0]


def small_table(level, seed_order=0):
    sc = SimulationScenario(1, 2.8, 0.5, n_outcome=600, n_primary=30, n_secondary=20)
    exp = simulate_replicate(sc, DgpParams(), 0)
    g = exp.graph
    if seed_order:
        # same graph built from shuffled inputs
        rng = np.random.default_rng(seed_order)
        perm_t = rng.permutation(g.n_treatment)
        perm_o = rng.permutation(g.n_outcome)
        perm_e = rng.permutation(g.n_edges)
        inv_t = np.argsort(perm_t)
        inv_o = np.argsort(perm_o)
        h = BipartiteGraph.from_arrays(
            [g.treatment_ids[k] for k in perm_t], g.is_primary[perm_t], [g.outcome_ids[k] for k in perm_o],
            inv_o[g.edge_outcome[perm_e]], inv_t[g.edge_treatment[perm_e]],
            treatment_covariate_names=g.treatment_covariate_names, treatment_covariates=g.treatment_covariates[perm_t],
        )
        assert h.fingerprint == g.fingerprint
        g = h
    z = validate_assignment(g, exp.assignment.z)
    ex = exposure_table(g, z, 0.5)
    return g, build_feature_table(g, ex, exp.outcomes, level)


@pytest.mark.parametrize("level", ["outcome", "treatment"])
def test_bootstrap_effect_is_order_invariant(level):
    cfg = KrrConfig(bandwidth=1.0, ridge=1e-3)
    g1, t1 = small_table(level)
    g2, t2 = small_table(level, seed_order=9)
    r1 = bootstrap_effect(g1, t1, "krr", cfg, B=15, seed=3)
    r2 = bootstrap_effect(g2, t2, "krr", cfg, B=15, seed=3)
    assert r1.interval == r2.interval


def test_bootstrap_effect_projection_transform():
    g, t = small_table("treatment")
    cfg = KrrConfig(bandwidth=1.0, ridge=1e-3)
    raw = bootstrap_effect(g, t, "lp", None, B=12, seed=1)
    proj = bootstrap_effect(g, t, "lp", None, B=12, seed=1, project=True, edge_additive=True)
    f = projection_factor(g, "PTTE").factor
    np.testing.assert_allclose(proj.replicates, np.array(raw.replicates) * f, rtol=1e-14)
    with pytest.raises(ProjectionError):
        bootstrap_effect(g, t, "krr", cfg, B=12, project=True)
    est = attach_bootstrap(treatment_estimate(1.0), raw)
    assert est.ci == raw.interval and est.metadata["bootstrap"]["B"] == 12
