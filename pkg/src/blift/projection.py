"""Exact treatment-to-outcome projection and percentile bootstrap intervals."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import BootstrapError, EstimationError, ProjectionError
from .estimators import (
    EffectEstimate,
    FeatureTable,
    estimate_effect,
    fit_response_model,
    population_units,
    row_weights,
)
from .graph import BipartiteGraph


@dataclass(frozen=True)
class ProjectionFactor:
    estimand: str
    numerator: int
    denominator: int

    @property
    def factor(self) -> float:
        return self.numerator / self.denominator


def projection_factor(graph: BipartiteGraph, estimand: str) -> ProjectionFactor:
    """|T_prim| / |O_prim| for PTTE, |T_sec| / |O_Both| for STTE, read off the graph."""
    estimand = estimand.upper()
    if estimand == "PTTE":
        num, den, what = graph.primary_index.size, graph.o_prim_index.size, "O_prim"
    elif estimand == "STTE":
        num, den, what = graph.secondary_index.size, graph.o_both_index.size, "O_Both"
    else:
        raise ProjectionError(f"unknown estimand {estimand!r}")
    if den == 0:
        raise ProjectionError(f"cannot project {estimand}: {what} is empty")
    if num == 0:
        raise ProjectionError(f"cannot project {estimand}: treatment population is empty")
    return ProjectionFactor(estimand, int(num), int(den))


def require_edge_additivity(edge_additive: bool) -> None:
    """Projection is exact only when unit outcomes are sums of edge outcomes; the caller must say so."""
    if not edge_additive:
        raise ProjectionError(
            "projection requires edge-additive outcomes (unit outcomes are sums of edge outcomes); "
            "set edge_additive=true in the run config (or pass --edge-additive) only if the metric "
            "is additive over edges, e.g. counts or revenue, not medians or ratios"
        )


def project_effect(estimate: EffectEstimate, graph: BipartiteGraph, edge_additive: bool = False) -> EffectEstimate:
    """Map a treatment-level total effect onto the outcome level."""
    require_edge_additivity(edge_additive)
    if estimate.level != "treatment":
        raise ProjectionError(f"only treatment-level estimates can be projected, got level {estimate.level!r}")
    pf = projection_factor(graph, estimate.estimand)
    ci = None
    if estimate.ci is not None:
        ci = (estimate.ci[0] * pf.factor, estimate.ci[1] * pf.factor)
    meta = dict(estimate.metadata)
    meta["projection"] = {
        "factor": pf.factor,
        "numerator": pf.numerator,
        "denominator": pf.denominator,
        "source_estimate": estimate.estimate,
        "source_method": estimate.method,
    }
    if "bootstrap" in meta:
        meta["bootstrap"] = dict(meta["bootstrap"], replicates=[r * pf.factor for r in meta["bootstrap"]["replicates"]])
    return replace(
        estimate,
        level="outcome",
        method=f"proj_{estimate.method}",
        estimate=estimate.estimate * pf.factor,
        ci=ci,
        metadata=meta,
    )


# -- bootstrap --------------------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapResult:
    replicates: tuple[float, ...]
    interval: tuple[float, float]
    confidence: float
    B: int
    seed: int
    failures: int = 0
    errors: tuple[str, ...] = field(default=(), repr=False)

    @property
    def standard_error(self) -> float:
        return float(np.std(self.replicates, ddof=1)) if len(self.replicates) > 1 else 0.0

    def interval_at(self, confidence: float) -> tuple[float, float]:
        return percentile_interval(np.asarray(self.replicates), confidence)

    def to_dict(self) -> dict:
        return {
            "B": self.B,
            "seed": self.seed,
            "confidence": self.confidence,
            "interval": list(self.interval),
            "standard_error": self.standard_error,
            "failures": self.failures,
            "replicates": list(self.replicates),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def percentile_interval(replicates: np.ndarray, confidence: float) -> tuple[float, float]:
    if not 0.0 < confidence < 1.0:
        raise BootstrapError(f"confidence must lie in (0, 1), got {confidence}")
    lo, hi = np.quantile(replicates, [(1.0 - confidence) / 2.0, (1.0 + confidence) / 2.0])
    return float(lo), float(hi)


def resample_counts(n_units: int, seed: int, replicate: int) -> np.ndarray:
    """Multiplicities of a with-replacement resample of ``n_units`` rank-ordered units."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, replicate]))
    return np.bincount(rng.integers(0, n_units, size=n_units), minlength=n_units)


def bootstrap_ci(
    procedure: Callable[[np.ndarray], float],
    n_units: int,
    B: int = 200,
    confidence: float = 0.95,
    seed: int = 0,
    transform: Callable[[float], float] | None = None,
    max_failure_rate: float = 0.2,
) -> BootstrapResult:
    """Percentile bootstrap over treatment-side units.

    ``procedure`` receives one multiplicity per unit (units in rank order, i.e.
    sorted id) and returns the re-estimated effect. ``transform`` maps each
    replicate before the quantiles are taken (used for projection).
    """
    if B < 2:
        raise BootstrapError("bootstrap needs B >= 2")
    if not 0.0 < confidence < 1.0:
        raise BootstrapError(f"confidence must lie in (0, 1), got {confidence}")
    reps: list[float] = []
    errors: list[str] = []
    for b in range(B):
        counts = resample_counts(n_units, seed, b)
        try:
            value = float(procedure(counts))
            if not np.isfinite(value):
                raise EstimationError("non-finite replicate")
        except Exception as exc:  # a failed replicate is data, not a crash
            errors.append(f"replicate {b}: {exc}")
            continue
        reps.append(transform(value) if transform else value)
    if len(errors) > max_failure_rate * B:
        raise BootstrapError(
            f"{len(errors)} of {B} bootstrap replicates failed (limit {max_failure_rate:.0%}); first: {errors[0]}"
        )
    arr = np.asarray(reps)
    return BootstrapResult(tuple(reps), percentile_interval(arr, confidence), confidence, B, seed, len(errors), tuple(errors))


def bootstrap_effect(
    graph: BipartiteGraph,
    table: FeatureTable,
    method: str,
    config=None,
    B: int = 200,
    confidence: float = 0.95,
    seed: int = 0,
    model_seed: int = 0,
    project: bool = False,
    edge_additive: bool = False,
) -> BootstrapResult:
    """Bootstrap an estimated effect by resampling the level's treatment-side population.

    Replicates refit the response model on multiplicity-weighted rows. Pass the
    full-sample model's ``with_fixed_hyperparameters()`` as ``config`` to skip the
    per-replicate CV search.
    """
    level = table.level
    if project:
        if level.side != "treatment":
            raise ProjectionError("only treatment-level estimates can be projected")
        require_edge_additivity(edge_additive)
        factor = projection_factor(graph, level.estimand).factor
        transform = lambda v: v * factor  # noqa: E731
    else:
        transform = None
    n_units = population_units(graph, level).size

    def procedure(counts):
        w = row_weights(graph, table, counts)
        model = fit_response_model(table, method, config, model_seed, weights=w)
        return estimate_effect(model, table, weights=w).estimate

    return bootstrap_ci(procedure, n_units, B, confidence, seed, transform)


def attach_bootstrap(estimate: EffectEstimate, result: BootstrapResult) -> EffectEstimate:
    meta = dict(estimate.metadata)
    meta["bootstrap"] = {"B": result.B, "seed": result.seed, "failures": result.failures,
                         "standard_error": result.standard_error, "replicates": list(result.replicates)}
    return replace(estimate, ci=result.interval, confidence=result.confidence, metadata=meta)
