from dataclasses import replace

import numpy as np
import pytest

from blift.dgp import DgpParams, scenario, simulate_replicate
from blift.errors import EstimationError
from blift.estimators import (
    EdgeOutcomes,
    EffectEstimate,
    Level,
    UnitOutcomes,
    basic_estimate,
    build_feature_table,
    estimate_effect,
    fit_response_model,
    load_outcomes,
    row_weights,
    write_edge_outcomes_csv,
)
from blift.exposure import exposure_table
from blift.graph import BipartiteGraph, all_treated, validate_assignment
from blift.models import PolynomialModel
from blift.pipeline import EstimationConfig, analyze

from conftest import random_graph

SMALL = dict(n_outcome=800, n_primary=40, n_secondary=30)


def small_experiment(spec=1, replicate=0, **kw):
    sc = scenario(spec, **{**SMALL, **kw})
    exp = simulate_replicate(sc, DgpParams(), replicate)
    return exp, exposure_table(exp.graph, exp.assignment, sc.treatment_probability)


def test_only_primary_neighbours_means_primary_component_is_total():
    g = random_graph(1, 40, 6, 0, 0.4)
    y = EdgeOutcomes(np.random.default_rng(0).normal(size=g.n_edges))
    np.testing.assert_allclose(y.outcome_primary(g), y.outcome_total(g))
    z = validate_assignment(g, np.random.default_rng(1).integers(0, 2, g.n_treatment))
    t = build_feature_table(g, exposure_table(g, z, 0.5), y, "outcome")
    np.testing.assert_allclose(t.y, y.outcome_total(g)[g.o_prim_index])


def test_population_of_each_level():
    exp, ex = small_experiment()
    g = exp.graph
    for lv, pop in [("outcome", g.o_prim_index), ("treatment", g.primary_index),
                    ("secondary_outcome", g.o_both_index), ("secondary_treatment", g.secondary_index)]:
        t = build_feature_table(g, ex, exp.outcomes, lv)
        assert t.unit_index.tolist() == pop.tolist()


def test_gps_column_value():
    g = BipartiteGraph.from_arrays([f"t{j}" for j in range(4)], [True] * 4, ["o1"], [0, 0, 0, 0], [0, 1, 2, 3])
    ex = exposure_table(g, validate_assignment(g, [1, 0, 1, 0]), 0.5)
    t = build_feature_table(g, ex, UnitOutcomes(np.array([1.0]), np.zeros(4)), "outcome")
    assert t.columns[:2] == ("E", "gps")
    assert t.X[0, 0] == 0.5 and t.X[0, 1] == pytest.approx(0.375, abs=1e-15)
    # counterfactual points: E = 1 and 0 with their own GPS values
    assert t.X_full[0, :2].tolist() == [1.0, 0.0625]
    assert t.X_zero[0, :2].tolist() == [0.0, 0.0625]


def test_counterfactual_points_on_treatment_level():
    exp, ex = small_experiment()
    g = exp.graph
    t = build_feature_table(g, ex, exp.outcomes, "treatment")
    one = exposure_table(g, all_treated(g), 0.5)
    np.testing.assert_array_equal(t.X_full[:, 1], one.direct[g.primary_index])
    np.testing.assert_array_equal(t.X_full[:, 2], one.indirect[g.primary_index])
    assert not t.X_zero[:, :3].any()
    np.testing.assert_array_equal(t.X_full[:, 3:], t.X[:, 3:])


def test_constant_model_gives_zero_effect():
    exp, ex = small_experiment()
    t = build_feature_table(exp.graph, ex, exp.outcomes, "outcome")
    coef = np.zeros(6 + len(t.linear))
    coef[0] = 7.0
    m = PolynomialModel(t.columns, t.poly, t.linear, coef)
    assert estimate_effect(m, t).estimate == 0.0


def test_outcome_equal_to_exposure_gives_unit_effect():
    exp, ex = small_experiment()
    g = exp.graph
    yo = np.zeros(g.n_outcome)
    yo[ex.outcome_index] = ex.exposure
    t = build_feature_table(g, ex, UnitOutcomes(yo, np.zeros(g.n_treatment)), "outcome")
    est = estimate_effect(fit_response_model(t, "lp"), t)
    assert est.estimate == pytest.approx(1.0, abs=1e-8)
    assert any("unit-level outcomes" in w for w in est.warnings)


def test_basic_all_treated_has_no_control_group():
    exp, _ = small_experiment()
    g = exp.graph
    ex = exposure_table(g, all_treated(g), 0.5)
    with pytest.raises(EstimationError, match="empty control"):
        basic_estimate(g, ex, exp.outcomes, "treatment")


def test_basic_separated_means():
    g = random_graph(4, 30, 8, 2, 0.3)
    z = np.array([1, 0] * 5)[: g.n_treatment] * g.is_primary
    zv = validate_assignment(g, z)
    yt = z.astype(float)
    est = basic_estimate(g, exposure_table(g, zv, 0.5), UnitOutcomes(np.zeros(g.n_outcome), yt), "treatment")
    assert est.estimate == 1.0 and est.method == "basic"


def test_basic_undefined_for_secondary_levels():
    exp, ex = small_experiment()
    with pytest.raises(EstimationError, match="PTTE"):
        basic_estimate(exp.graph, ex, exp.outcomes, "secondary_outcome")


def test_secondary_levels_need_edge_outcomes():
    exp, ex = small_experiment()
    g = exp.graph
    units = UnitOutcomes(exp.outcomes.outcome_total(g), exp.outcomes.treatment_total(g))
    for lv in ("secondary_outcome", "secondary_treatment"):
        with pytest.raises(EstimationError, match="edge-level"):
            build_feature_table(g, ex, units, lv)


def test_exposures_must_come_from_the_same_graph():
    a, ex = small_experiment()
    b, _ = small_experiment(replicate=1)
    with pytest.raises(EstimationError, match="different graph"):
        build_feature_table(b.graph, ex, b.outcomes, "outcome")


def test_desk_scale_krr_recovers_truth_scenario_1():
    exp = simulate_replicate(scenario(1), DgpParams(), 0)
    ex = exposure_table(exp.graph, exp.assignment, 0.5)
    t = build_feature_table(exp.graph, ex, exp.outcomes, "outcome")
    est = estimate_effect(fit_response_model(t, "krr", seed=exp.model_seed), t)
    assert abs(est.estimate / exp.truth.ptte_outcome - 1) < 0.05


def test_desk_scale_basic_underestimates_scenario_3():
    exp = simulate_replicate(scenario(3), DgpParams(), 0)
    ex = exposure_table(exp.graph, exp.assignment, 0.5)
    est = basic_estimate(exp.graph, ex, exp.outcomes, "outcome")
    assert est.estimate <= 0.9 * exp.truth.ptte_outcome


def test_row_weights():
    exp, ex = small_experiment()
    g = exp.graph
    rng = np.random.default_rng(0)
    for lv, pop, inc, deg in [("outcome", g.primary_index, g.incidence_primary, g.n_prim),
                              ("secondary_outcome", g.secondary_index, g.incidence_secondary, g.n_sec)]:
        t = build_feature_table(g, ex, exp.outcomes, lv)
        counts = rng.integers(0, 3, pop.size)
        w = row_weights(g, t, counts)
        # loop reference: mean multiplicity of each row's neighbours in the resampled population
        col = {j: k for k, j in enumerate(pop)}
        ref = []
        for i in t.unit_index:
            nb = [col[j] for j in g.edge_treatment[g.edge_outcome == i] if j in col]
            ref.append(np.mean([counts[c] for c in nb]))
        np.testing.assert_allclose(w, ref)
        assert row_weights(g, t, np.ones(pop.size)).tolist() == [1.0] * t.n_rows
    t = build_feature_table(g, ex, exp.outcomes, "treatment")
    counts = rng.integers(0, 3, g.primary_index.size)
    assert row_weights(g, t, counts).tolist() == counts.astype(float).tolist()


def test_weighted_estimate_ignores_zero_weight_rows():
    exp, ex = small_experiment()
    t = build_feature_table(exp.graph, ex, exp.outcomes, "treatment")
    m = fit_response_model(t, "lp")
    w = np.zeros(t.n_rows)
    w[:5] = 1
    est = estimate_effect(m, t, weights=w)
    diff = m.predict(t.X_full[:5]) - m.predict(t.X_zero[:5])
    assert est.estimate == pytest.approx(diff.mean())
    assert est.population_size == 5


def test_effect_estimate_round_trip():
    e = EffectEstimate("PTTE", "outcome", "krr", 0.5, 10, (0.4, 0.6), 0.95, ("w",), {"a": 1})
    assert EffectEstimate.from_dict(e.to_dict()) == e
    with pytest.raises(EstimationError):
        EffectEstimate("PTTE", "outcome", "krr", float("nan"), 10)


def test_outcome_files(tmp_path):
    exp, _ = small_experiment()
    g = exp.graph
    write_edge_outcomes_csv(g, exp.outcomes, tmp_path / "y.csv")
    back = load_outcomes(g, tmp_path / "y.csv")
    assert np.array_equal(back.y, exp.outcomes.y)
    lines = (tmp_path / "y.csv").read_text().splitlines()
    (tmp_path / "dup.csv").write_text("\n".join(lines + [lines[1]]) + "\n")
    with pytest.raises(EstimationError, match="duplicate"):
        load_outcomes(g, tmp_path / "dup.csv")
    (tmp_path / "short.csv").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(EstimationError, match="no outcome"):
        load_outcomes(g, tmp_path / "short.csv")
    (tmp_path / "bad.csv").write_text(lines[0] + "\n" + lines[1].rsplit(",", 1)[0] + ",abc\n")
    with pytest.raises(EstimationError, match="non-numeric"):
        load_outcomes(g, tmp_path / "bad.csv")
    (tmp_path / "u.csv").write_text(f"unit_id,y\n{g.outcome_ids[0]},2.5\n{g.treatment_ids[0]},1\n")
    u = load_outcomes(g, tmp_path / "u.csv")
    assert u.outcome[0] == 2.5 and u.treatment[0] == 1.0 and np.isnan(u.outcome[1])
    (tmp_path / "h.csv").write_text("a,b\n")
    with pytest.raises(EstimationError, match="header"):
        load_outcomes(g, tmp_path / "h.csv")


def test_analyze_collects_failures_instead_of_raising():
    exp, _ = small_experiment()
    g = exp.graph
    ex = exposure_table(g, all_treated(g), 0.5)
    est, fails = analyze(g, ex, exp.outcomes, EstimationConfig(methods=("basic", "lp"), levels=("treatment",)))
    assert {f.method for f in fails} >= {"basic"}
    assert all(isinstance(f.error, str) and f.error for f in fails)


def test_analyze_projects_only_when_additive():
    exp, ex = small_experiment()
    g = exp.graph
    cfg = EstimationConfig(methods=("basic", "krr"), levels=("treatment",))
    est, _ = analyze(g, ex, exp.outcomes, cfg, seed=1)
    assert [e.method for e in est] == ["basic", "krr"]
    est, _ = analyze(g, ex, exp.outcomes, replace(cfg, edge_additive=True), seed=1)
    assert [e.method for e in est] == ["basic", "krr", "proj_krr"]
    proj = est[-1]
    assert proj.level == "outcome"
    assert proj.estimate == pytest.approx(est[1].estimate * g.primary_index.size / g.o_prim_index.size, rel=1e-14)


def test_analyze_attaches_overlap_flags_to_outcome_estimates():
    exp, ex = small_experiment()
    est, _ = analyze(exp.graph, ex, exp.outcomes, EstimationConfig(methods=("lp",), levels=("outcome",)))
    assert "overlap_flagged_strata" in est[0].metadata


def test_level_lookup():
    assert Level.of("stte", "Outcome") is Level.SECONDARY_OUTCOME
    assert Level("treatment").estimand == "PTTE"
