"""Acceptance suite: one PASS/FAIL line per criterion, at desk scale.

The replication studies here take roughly half an hour on one core.
"""
import itertools
import math
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from blift.cli import main
from blift.dgp import (
    DEFAULT_BETA,
    SCENARIO_GRID,
    DgpParams,
    generate_graph,
    replicate_estimates,
    run_replications,
    scenario,
    simulate_replicate,
    total_effects,
)
from blift.estimators import Level, build_feature_table, estimate_effect, fit_response_model
from blift.exposure import (
    compute_outcome_exposures,
    compute_secondary_indirect_exposure,
    compute_treatment_exposures,
    exposure_table,
    gps_binomial,
)
from blift.graph import all_treated, none_treated
from blift.pipeline import BootstrapConfig, EstimationConfig, bootstrap_se, estimate_level
from blift.projection import bootstrap_effect, projection_factor

from conftest import random_graph

pytestmark = pytest.mark.slow

SPECS = tuple(sorted(SCENARIO_GRID))
REPS = 50
CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def verdict(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def rel(a: float, b: float) -> float:
    return abs(a - b) / abs(b)


def values(run, estimand, level, method):
    return {r.replicate: r.estimate for r in run.records
            if r.estimand == estimand and r.level == level and r.method == method}


def truths(run, estimand, level):
    return {r.replicate: r.ground_truth for r in run.records if r.estimand == estimand and r.level == level}


def median_of(d: dict) -> float:
    return float(np.median(list(d.values())))


@pytest.fixture(scope="module")
def studies():
    """Default-pattern study: all five scenarios, 50 replicates, no bootstrap."""
    cfg = EstimationConfig(methods=("basic", "lp", "krr"), project=("krr",), edge_additive=True)
    t0 = time.perf_counter()
    runs = {s: run_replications(scenario(s, replications=REPS), DgpParams(), cfg) for s in SPECS}
    return runs, time.perf_counter() - t0


def null_beta() -> dict:
    beta = {a: dict(row) for a, row in DEFAULT_BETA.items()}
    for t in ("premium", "xl"):
        beta[t]["economy"] = 0.0
    return beta


# -- 1 ----------------------------------------------------------------------------------


def test_criterion_1_projection_identity(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    cases = 0

    def check(graph, gt):
        nonlocal worst, cases
        for est, side_o, side_t in (("PTTE", gt.ptte_outcome, gt.ptte_treatment),
                                    ("STTE", gt.stte_outcome, gt.stte_treatment)):
            if math.isnan(side_o) or side_o == 0.0:
                continue
            f = projection_factor(graph, est).factor
            worst = max(worst, rel(f * side_t, side_o))
            cases += 1

    for k in range(100):
        n_o = int(rng.integers(1, 501))
        n_p = int(rng.integers(1, 41))
        n_s = int(rng.integers(0, 51 - n_p))
        g = random_graph(int(rng.integers(2**31)), n_o, n_p, n_s, float(rng.choice([0.05, 0.15, 0.4])))
        y0 = rng.normal(size=g.n_edges)
        y1 = y0 + rng.normal(0.5, 1.0, size=g.n_edges)
        check(g, total_effects(g, y1, y0))
    for s in SPECS:
        exp = simulate_replicate(scenario(s), DgpParams(), 0)
        check(exp.graph, exp.truth)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 60.0 and cases >= 200
    verdict(capsys, 1, ok, f"max relative error {worst:.2e} over {cases} identities in {elapsed:.1f}s")


# -- 2 ----------------------------------------------------------------------------------


def test_criterion_2_gps_enumeration(capsys):
    t0 = time.perf_counter()
    worst = worst_sum = 0.0
    for n in range(1, 13):
        patterns = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int64)
        ones = patterns.sum(axis=1)
        for p in (0.1, 0.4, 0.45, 0.5, 0.9):
            prob = np.prod(np.where(patterns == 1, p, 1.0 - p), axis=1)
            oracle = np.bincount(ones, prob, n + 1)
            got = np.array([gps_binomial(k / n, n, p).probability for k in range(n + 1)])
            worst = max(worst, float(np.max(np.abs(got - oracle))))
            worst_sum = max(worst_sum, abs(math.fsum(got) - 1.0))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and worst_sum <= 1e-12 and elapsed < 30.0
    verdict(capsys, 2, ok, f"max |gps - enumeration| {worst:.1e}, max |sum - 1| {worst_sum:.1e}, {elapsed:.1f}s")


# -- 3 ----------------------------------------------------------------------------------


def test_criterion_3_estimator_recovery(capsys, studies):
    runs, elapsed = studies
    parts, ok = [], elapsed < 1800.0
    for s in SPECS:
        gt = median_of(truths(runs[s], "PTTE", "outcome"))
        e = rel(median_of(values(runs[s], "PTTE", "outcome", "krr")), gt)
        ok &= e <= 0.05
        parts.append(f"s{s} krr {e:.2%}")
    gt1 = median_of(truths(runs[1], "PTTE", "outcome"))
    e_lp = rel(median_of(values(runs[1], "PTTE", "outcome", "lp")), gt1)
    ok &= e_lp <= 0.05
    parts.append(f"s1 lp {e_lp:.2%}")
    verdict(capsys, 3, ok, "; ".join(parts) + f"; study {elapsed:.0f}s")


# -- 4 ----------------------------------------------------------------------------------


def test_criterion_4_basic_bias(capsys, studies):
    runs, _ = studies
    parts, ok = [], True
    for s in SPECS:
        basic = values(runs[s], "PTTE", "outcome", "basic")
        krr = values(runs[s], "PTTE", "outcome", "krr")
        gt = median_of(truths(runs[s], "PTTE", "outcome"))
        shortfall = 1.0 - median_of(basic) / gt
        signs = [np.sign(basic[r] - krr[r]) for r in sorted(basic) if r in krr]
        stable = max(signs.count(-1.0), signs.count(1.0))
        ok &= shortfall >= 0.10 and stable >= 45
        parts.append(f"s{s} below GT by {shortfall:.1%}, sign stable {stable}/{len(signs)}")
    verdict(capsys, 4, ok, "; ".join(parts))


# -- 5 ----------------------------------------------------------------------------------


def test_criterion_5_stte_structure(capsys, studies):
    runs, _ = studies
    parts, ok = [], True

    # no cross-type spillover: both STTE levels should be indistinguishable from zero
    cfg = EstimationConfig(
        methods=("krr",), levels=("secondary_outcome", "secondary_treatment"), project=(),
        bootstrap=BootstrapConfig(B=50, levels=("secondary_outcome", "secondary_treatment")),
    )
    sc = scenario(1, replications=REPS)
    null = [replicate_estimates(sc, DgpParams(beta=null_beta()), cfg, r) for r in range(REPS)]
    for level in ("outcome", "treatment"):
        hits = [(e, exp.truth.value("STTE", level)) for exp, ests, _ in null for e in ests
                if e.estimand == "STTE" and e.level == level]
        med = float(np.median([abs(e.estimate) for e, _ in hits]))
        se = float(np.median([bootstrap_se(e) for e, _ in hits]))
        ok &= len(hits) == REPS and med <= 3.0 * se and all(gt == 0.0 for _, gt in hits)
        parts.append(f"null {level} median|est| {med:.4f} vs 3 SE {3 * se:.4f}")

    sign_ok = identity = 0
    worst_proj = 0.0
    for s in SPECS:
        run = runs[s]
        gt_o = median_of(truths(run, "STTE", "outcome"))
        krr_o = median_of(values(run, "STTE", "outcome", "krr"))
        krr_t = median_of(values(run, "STTE", "treatment", "krr"))
        proj = median_of(values(run, "STTE", "outcome", "proj_krr"))
        if krr_o != 0 and krr_t != 0 and np.sign(krr_o) == np.sign(gt_o) == np.sign(krr_t):
            sign_ok += 1
        worst_proj = max(worst_proj, rel(proj, krr_o))
        exp = simulate_replicate(scenario(s), DgpParams(), 0)
        f = projection_factor(exp.graph, "STTE").factor
        if rel(f * exp.truth.stte_treatment, exp.truth.stte_outcome) <= 1e-10:
            identity += 1
    ok &= sign_ok == len(SPECS) and identity == len(SPECS) and worst_proj <= 0.10
    parts.append(f"default sign matches GT {sign_ok}/{len(SPECS)}, GT projection exact {identity}/{len(SPECS)}, "
                 f"max |proj - krr| {worst_proj:.1%} of median")
    verdict(capsys, 5, ok, "; ".join(parts))


# -- 6 ----------------------------------------------------------------------------------


def test_criterion_6_bootstrap_coverage(capsys):
    cfg = EstimationConfig(
        methods=("krr",), levels=("outcome", "treatment"), project=(),
        bootstrap=BootstrapConfig(B=200, confidence=0.95, levels=("outcome", "treatment")),
    )
    run = run_replications(scenario(1, replications=REPS), DgpParams(), cfg)
    parts, ok = [], True
    for level in ("outcome", "treatment"):
        recs = [r for r in run.records if r.estimand == "PTTE" and r.level == level and r.method == "krr"]
        hit = sum(r.ci_lo <= r.ground_truth <= r.ci_hi for r in recs)
        ok &= len(recs) == REPS and hit >= math.ceil(0.85 * REPS)
        parts.append(f"{level} coverage {hit}/{len(recs)}")
    verdict(capsys, 6, ok, "; ".join(parts))


# -- 7 ----------------------------------------------------------------------------------


def _median_time(fn, repeats: int = 7) -> tuple[float, object]:
    times, out = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def test_criterion_7_projection_speed(capsys):
    parts, ok = [], True
    for s in SPECS:
        sc = scenario(s)
        exp = simulate_replicate(sc, DgpParams(), 0)
        args = (exp.graph, exp.assignment, exp.outcomes, sc.treatment_probability)
        t_out, direct = _median_time(lambda: estimate_level(*args, "outcome", seed=exp.model_seed))
        t_tr, projected = _median_time(
            lambda: estimate_level(*args, "treatment", seed=exp.model_seed, project=True))
        speedup = t_out / t_tr

        table = build_feature_table(exp.graph, exposure_table(exp.graph, exp.assignment, sc.treatment_probability),
                                    exp.outcomes, Level.TREATMENT)
        model = fit_response_model(table, "krr", None, exp.model_seed)
        assert estimate_effect(model, table).estimate * projection_factor(exp.graph, "PTTE").factor == pytest.approx(
            projected.estimate, rel=1e-12)
        boot = bootstrap_effect(exp.graph, table, "krr", model.with_fixed_hyperparameters(), B=200, seed=exp.model_seed,
                                model_seed=exp.model_seed, project=True, edge_additive=True)
        width = boot.interval[1] - boot.interval[0]
        gap = abs(projected.estimate - direct.estimate)
        ok &= speedup >= 10.0 and gap <= width
        parts.append(f"s{s} {t_out * 1e3:.0f}ms vs {t_tr * 1e3:.0f}ms ({speedup:.1f}x), "
                     f"|diff| {gap:.3f} vs width {width:.3f}")
    verdict(capsys, 7, ok, "; ".join(parts))


# -- 8 ----------------------------------------------------------------------------------


def boundary_law_holds(graph) -> bool:
    one = all_treated(graph)
    zero = none_treated(graph)
    e1 = compute_outcome_exposures(graph, one).exposure
    oe = compute_outcome_exposures(graph, zero).exposure
    te = compute_treatment_exposures(graph, zero)
    sec = compute_secondary_indirect_exposure(graph, zero)
    return bool(np.all(e1 == 1.0) and np.all(oe == 0.0) and np.all(te.direct == 0)
                and np.all(te.indirect == 0) and np.all(sec == 0))


def test_criterion_8_boundary_law(capsys):
    graphs = 0
    bad = 0
    for s in SPECS:
        sc = scenario(s)
        for r in range(REPS):
            g_ss = np.random.SeedSequence([sc.base_seed, r]).spawn(5)[0]
            bad += not boundary_law_holds(generate_graph(sc, g_ss))
            graphs += 1
    rng = np.random.default_rng(8)
    for k in range(200):
        g = random_graph(int(rng.integers(2**31)), int(rng.integers(1, 300)), int(rng.integers(1, 30)),
                         int(rng.integers(0, 30)), float(rng.choice([0.02, 0.1, 0.5])))
        bad += not boundary_law_holds(g)
        graphs += 1
    verdict(capsys, 8, bad == 0, f"{graphs - bad}/{graphs} graphs satisfy the boundary law")


# -- 9 ----------------------------------------------------------------------------------


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(capsys, tmp_path):
    cfg = CONFIGS / "smoke.json"
    trees = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
        assert main(["report", "--config", str(cfg), "--out", str(out)]) == 0
        trees.append(_tree(out))
    csvs = [k for k in trees[0] if k.endswith("replications.csv")]
    ok = trees[0] == trees[1] and len(csvs) >= 2 and any(k.endswith("manifest.json") for k in trees[0])
    verdict(capsys, 9, ok, f"{len(trees[0])} files byte-identical across two runs ({len(csvs)} replication CSVs)")
