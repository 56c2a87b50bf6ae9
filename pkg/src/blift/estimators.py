"""Feature construction, response-model fitting and counterfactual aggregation.

Each ``Level`` pairs an estimand with its unit population:

=====================  =========  ==========  =====================================
level                  estimand   population  features
=====================  =========  ==========  =====================================
outcome                PTTE       O_prim      E, gps, n_prim, X_i
treatment              PTTE       T_prim      z, e_dir, e_ind, n_out, X_j
secondary_outcome      STTE       O_Both      E, gps, n_prim, n_sec, X_i
secondary_treatment    STTE       T_sec       e_ind_sec, n_both, X_j
=====================  =========  ==========  =====================================

``n_out`` (outcome units a primary unit reaches) and ``n_both`` (a secondary
unit's outcome units in O_Both) are network features: without them a control
unit's baseline, which scales with its degree, is invisible to the model.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import EstimationError
from .exposure import ExposureTable, full_deployment_exposures, gps_array
from .graph import BipartiteGraph
from .models import (
    GbtConfig,
    KrrConfig,
    LpConfig,
    ResponseModel,
    fit_boosted_trees,
    fit_kernel_ridge,
    fit_polynomial,
)


class Level(str, Enum):
    OUTCOME = "outcome"
    TREATMENT = "treatment"
    SECONDARY_OUTCOME = "secondary_outcome"
    SECONDARY_TREATMENT = "secondary_treatment"

    @property
    def estimand(self) -> str:
        return "PTTE" if self in (Level.OUTCOME, Level.TREATMENT) else "STTE"

    @property
    def side(self) -> str:
        return "outcome" if self in (Level.OUTCOME, Level.SECONDARY_OUTCOME) else "treatment"

    @classmethod
    def of(cls, estimand: str, side: str) -> "Level":
        return {
            ("PTTE", "outcome"): cls.OUTCOME,
            ("PTTE", "treatment"): cls.TREATMENT,
            ("STTE", "outcome"): cls.SECONDARY_OUTCOME,
            ("STTE", "treatment"): cls.SECONDARY_TREATMENT,
        }[(estimand.upper(), side.lower())]


# -- observed outcomes ------------------------------------------------------------------


@dataclass(frozen=True)
class EdgeOutcomes:
    """Edge-level outcomes Y_ij aligned with the graph's edge arrays."""

    y: np.ndarray

    def _sum(self, graph: BipartiteGraph, by: str, mask=None) -> np.ndarray:
        idx, n = (graph.edge_outcome, graph.n_outcome) if by == "outcome" else (graph.edge_treatment, graph.n_treatment)
        if mask is None:
            return np.bincount(idx, weights=self.y, minlength=n)
        return np.bincount(idx[mask], weights=self.y[mask], minlength=n)

    def outcome_total(self, graph):
        return self._sum(graph, "outcome")

    def outcome_primary(self, graph):
        return self._sum(graph, "outcome", graph.edge_is_primary)

    def outcome_secondary(self, graph):
        return self._sum(graph, "outcome", ~graph.edge_is_primary)

    def treatment_total(self, graph):
        return self._sum(graph, "treatment")

    def treatment_secondary(self, graph):
        """Y_{j,sec}: sum over j's edges into O_Both."""
        return self._sum(graph, "treatment", graph.in_o_both[graph.edge_outcome])


@dataclass(frozen=True)
class UnitOutcomes:
    """Unit-level outcomes only (no edge decomposition). NaN marks unobserved units."""

    outcome: np.ndarray
    treatment: np.ndarray


Outcomes = EdgeOutcomes | UnitOutcomes


def _value(raw: str, where: str) -> float:
    try:
        v = float(raw)
    except ValueError:
        raise EstimationError(f"outcome for {where}: non-numeric value {raw!r}") from None
    if not math.isfinite(v):
        raise EstimationError(f"outcome for {where}: non-finite value {raw!r}")
    return v


def load_outcomes(graph: BipartiteGraph, path) -> Outcomes:
    """Edge-level ``outcome_id,treatment_id,y`` (one row per edge) or unit-level ``unit_id,y``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise EstimationError(f"{path}: empty outcomes file")
    header, body = [c.strip() for c in rows[0]], rows[1:]
    bad = [r for r in body if len(r) != len(header)]
    if bad:
        raise EstimationError(f"outcome row {bad[0]!r} has {len(bad[0])} fields, expected {len(header)}")
    if header == ["outcome_id", "treatment_id", "y"]:
        o_pos = {u: k for k, u in enumerate(graph.outcome_ids)}
        t_pos = {u: k for k, u in enumerate(graph.treatment_ids)}
        key = graph.edge_outcome * graph.n_treatment + graph.edge_treatment
        y = np.full(graph.n_edges, np.nan)
        for r in body:
            if r[0] not in o_pos or r[1] not in t_pos:
                raise EstimationError(f"outcome row ({r[0]!r}, {r[1]!r}) does not name an edge of the graph")
            k = np.searchsorted(key, o_pos[r[0]] * graph.n_treatment + t_pos[r[1]])
            if k >= key.size or key[k] != o_pos[r[0]] * graph.n_treatment + t_pos[r[1]]:
                raise EstimationError(f"outcome row ({r[0]!r}, {r[1]!r}) does not name an edge of the graph")
            if not np.isnan(y[k]):
                raise EstimationError(f"duplicate outcome for edge ({r[0]!r}, {r[1]!r})")
            y[k] = _value(r[2], f"edge ({r[0]!r}, {r[1]!r})")
        if np.isnan(y).any():
            raise EstimationError(f"{int(np.isnan(y).sum())} edges have no outcome")
        return EdgeOutcomes(y)
    if header == ["unit_id", "y"]:
        o_pos = {u: k for k, u in enumerate(graph.outcome_ids)}
        t_pos = {u: k for k, u in enumerate(graph.treatment_ids)}
        yo = np.full(graph.n_outcome, np.nan)
        yt = np.full(graph.n_treatment, np.nan)
        for r in body:
            if r[0] in o_pos:
                yo[o_pos[r[0]]] = _value(r[1], repr(r[0]))
            elif r[0] in t_pos:
                yt[t_pos[r[0]]] = _value(r[1], repr(r[0]))
            else:
                raise EstimationError(f"outcome row names unknown unit {r[0]!r}")
        return UnitOutcomes(yo, yt)
    raise EstimationError("outcomes CSV header must be outcome_id,treatment_id,y or unit_id,y")


def write_edge_outcomes_csv(graph: BipartiteGraph, outcomes: EdgeOutcomes, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["outcome_id", "treatment_id", "y"])
        for o, t, y in zip(graph.edge_outcome, graph.edge_treatment, outcomes.y):
            w.writerow([graph.outcome_ids[o], graph.treatment_ids[t], repr(float(y))])


# -- feature tables -------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureTable:
    level: Level
    unit_index: np.ndarray
    columns: tuple[str, ...]
    X: np.ndarray
    y: np.ndarray
    X_full: np.ndarray
    X_zero: np.ndarray
    poly: tuple[int, ...]
    linear: tuple[int, ...]
    p: float
    caveats: tuple[str, ...] = ()

    @property
    def n_rows(self) -> int:
        return int(self.y.size)

    def __post_init__(self):
        for a in (self.X, self.X_full, self.X_zero):
            if a.shape != (self.unit_index.size, len(self.columns)):
                raise EstimationError("feature arrays do not match the population")


def _varying(names, cov: np.ndarray) -> tuple[tuple[str, ...], np.ndarray]:
    """Drop covariates that are constant over the population (they would duplicate the intercept)."""
    if cov.shape[0] == 0:
        return tuple(names), cov
    keep = np.ptp(cov, axis=0) > 0
    return tuple(n for n, k in zip(names, keep) if k), cov[:, keep]


def build_feature_table(
    graph: BipartiteGraph,
    exposures: ExposureTable,
    outcomes: Outcomes,
    level: Level | str,
) -> FeatureTable:
    """Feature rows, targets and counterfactual feature points for one level."""
    level = Level(level)
    if exposures.graph_fingerprint != graph.fingerprint:
        raise EstimationError("exposure table was computed on a different graph")
    p = exposures.p
    caveats: list[str] = []

    if level in (Level.OUTCOME, Level.SECONDARY_OUTCOME):
        rows = np.arange(exposures.outcome_index.size)
        if level is Level.SECONDARY_OUTCOME:
            rows = rows[exposures.n_sec > 0]
        idx = exposures.outcome_index[rows]
        k, n = exposures.treated[rows], exposures.n_prim[rows]
        if isinstance(outcomes, EdgeOutcomes):
            target = outcomes.outcome_primary(graph) if level is Level.OUTCOME else outcomes.outcome_secondary(graph)
        elif level is Level.OUTCOME:
            target = np.asarray(outcomes.outcome, dtype=float)
            caveats.append("unit-level outcomes: Y_i used in place of its primary-edge component Y_i,prim")
        else:
            raise EstimationError("secondary_outcome level needs edge-level outcomes (Y_i,sec component)")
        cov_names, cov = _varying(graph.outcome_covariate_names, graph.outcome_covariates[idx])
        net = [n.astype(float)]
        names = ["E", "gps", "n_prim"]
        if level is Level.SECONDARY_OUTCOME:
            net.append(exposures.n_sec[rows].astype(float))
            names.append("n_sec")
        base = np.column_stack(net + [cov])
        X = np.column_stack([k / n, exposures.gps[rows], base])
        X_full = np.column_stack([np.ones(idx.size), gps_array(n, n, p), base])
        X_zero = np.column_stack([np.zeros(idx.size), gps_array(np.zeros_like(n), n, p), base])
        columns = tuple(names) + cov_names
        poly = (0, 1)
        linear = tuple(range(len(names), len(columns)))
        y = target[idx]
    else:
        full, full_sec = full_deployment_exposures(graph)
        if level is Level.TREATMENT:
            idx = graph.primary_index
            if isinstance(outcomes, EdgeOutcomes):
                target = outcomes.treatment_total(graph)
            else:
                target = np.asarray(outcomes.treatment, dtype=float)
            n_out = graph.treatment_degree[idx].astype(float)
            cov_names, cov = _varying(graph.treatment_covariate_names, graph.treatment_covariates[idx])
            X = np.column_stack([exposures.z[idx], exposures.direct[idx], exposures.indirect[idx], n_out, cov])
            X_full = np.column_stack([np.ones(idx.size), full.direct[idx], full.indirect[idx], n_out, cov])
            X_zero = np.column_stack([np.zeros((idx.size, 3)), n_out, cov])
            columns = ("z", "e_dir", "e_ind", "n_out") + cov_names
            poly = (1, 2)
            linear = tuple(range(3, len(columns)))
        else:
            idx = graph.secondary_index
            if not isinstance(outcomes, EdgeOutcomes):
                raise EstimationError("secondary_treatment level needs edge-level outcomes (Y_j,sec component)")
            target = outcomes.treatment_secondary(graph)
            n_both = graph.degree_in_o_both[idx].astype(float)
            cov_names, cov = _varying(graph.treatment_covariate_names, graph.treatment_covariates[idx])
            X = np.column_stack([exposures.indirect_secondary, n_both, cov])
            X_full = np.column_stack([full_sec, n_both, cov])
            X_zero = np.column_stack([np.zeros(idx.size), n_both, cov])
            columns = ("e_ind_sec", "n_both") + cov_names
            poly = (0,)
            linear = tuple(range(1, len(columns)))
        y = target[idx]
    X = np.asarray(X, dtype=float).reshape(idx.size, len(columns))
    X_full = np.asarray(X_full, dtype=float).reshape(idx.size, len(columns))
    X_zero = np.asarray(X_zero, dtype=float).reshape(idx.size, len(columns))
    return FeatureTable(level, idx, columns, X, np.asarray(y, dtype=float), X_full, X_zero, poly, linear, p, tuple(caveats))


# -- fitting and aggregation --------------------------------------------------------------


def fit_response_model(
    table: FeatureTable,
    method: str,
    config=None,
    seed: int = 0,
    weights: np.ndarray | None = None,
) -> ResponseModel:
    """Fit LP, KRR or GBT to a feature table; deterministic given ``seed``."""
    method = method.lower()
    if method == "lp":
        return fit_polynomial(table.X, table.y, table.columns, table.poly, table.linear, weights,
                              config if isinstance(config, LpConfig) else None)
    if method == "krr":
        return fit_kernel_ridge(table.X, table.y, table.columns, weights,
                                config if isinstance(config, KrrConfig) else None, seed)
    if method == "gbt":
        return fit_boosted_trees(table.X, table.y, table.columns, weights,
                                 config if isinstance(config, GbtConfig) else None, seed)
    raise EstimationError(f"unknown method {method!r}")


@dataclass(frozen=True)
class EffectEstimate:
    estimand: str
    level: str
    method: str
    estimate: float
    population_size: int
    ci: tuple[float, float] | None = None
    confidence: float | None = None
    warnings: tuple[str, ...] = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.estimate):
            raise EstimationError(f"{self.estimand}/{self.level}/{self.method}: non-finite estimate")

    def with_interval(self, lo: float, hi: float, confidence: float) -> "EffectEstimate":
        return replace(self, ci=(float(lo), float(hi)), confidence=confidence)

    def to_dict(self) -> dict:
        return {
            "estimand": self.estimand,
            "level": self.level,
            "method": self.method,
            "estimate": self.estimate,
            "population_size": self.population_size,
            "ci": list(self.ci) if self.ci else None,
            "confidence": self.confidence,
            "warnings": list(self.warnings),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EffectEstimate":
        return cls(
            d["estimand"], d["level"], d["method"], float(d["estimate"]), int(d["population_size"]),
            tuple(d["ci"]) if d.get("ci") else None, d.get("confidence"), tuple(d.get("warnings", ())),
            dict(d.get("metadata", {})),
        )


def _extrapolation_warnings(table: FeatureTable, train: np.ndarray) -> list[str]:
    X = table.X[train]
    lo, hi = X.min(axis=0), X.max(axis=0)
    out = []
    for name, cf in (("full deployment", table.X_full[train]), ("zero deployment", table.X_zero[train])):
        outside = (cf < lo - 1e-12) | (cf > hi + 1e-12)
        cols = [table.columns[c] for c in np.flatnonzero(outside.any(axis=0))]
        if cols:
            share = float(outside.any(axis=1).mean())
            out.append(f"extrapolation: {name} point outside observed support of {cols} for {share:.1%} of units")
    return out


def estimate_effect(model: ResponseModel, table: FeatureTable, weights: np.ndarray | None = None) -> EffectEstimate:
    """Average predicted full-minus-zero deployment difference over the population."""
    w = np.ones(table.n_rows) if weights is None else np.asarray(weights, dtype=float)
    use = w > 0
    if not use.any():
        raise EstimationError("empty estimand population")
    diff = model.predict(table.X_full[use]) - model.predict(table.X_zero[use])
    est = float(np.average(diff, weights=w[use]))
    return EffectEstimate(
        estimand=table.level.estimand,
        level=table.level.side,
        method=model.method,
        estimate=est,
        population_size=int(use.sum()),
        warnings=tuple(list(table.caveats) + _extrapolation_warnings(table, use)),
    )


def basic_estimate(graph: BipartiteGraph, exposures: ExposureTable, outcomes: Outcomes, level: Level | str) -> EffectEstimate:
    """Difference in means ignoring interference.

    Treatment level: Y_j of treated vs control primary units. Outcome level: Y_i of
    units with E_i > 1/2 vs E_i < 1/2 over O_prim (E_i = 1/2 excluded).
    """
    level = Level(level)
    if level is Level.TREATMENT:
        y = outcomes.treatment_total(graph) if isinstance(outcomes, EdgeOutcomes) else np.asarray(outcomes.treatment)
        idx = graph.primary_index
        z = exposures.z[idx]
        hi, lo = y[idx][z == 1], y[idx][z == 0]
        pop = idx.size
    elif level is Level.OUTCOME:
        y = outcomes.outcome_total(graph) if isinstance(outcomes, EdgeOutcomes) else np.asarray(outcomes.outcome)
        y = y[exposures.outcome_index]
        twice = 2 * exposures.treated
        hi, lo = y[twice > exposures.n_prim], y[twice < exposures.n_prim]
        pop = exposures.outcome_index.size
    else:
        raise EstimationError("basic estimator is defined for the PTTE levels only")
    if hi.size == 0 or lo.size == 0:
        raise EstimationError(f"basic {level.value} contrast has an empty {'treated' if hi.size == 0 else 'control'} group")
    return EffectEstimate("PTTE", level.side, "basic", float(hi.mean() - lo.mean()), int(pop))


# -- bootstrap support ------------------------------------------------------------------------


def population_units(graph: BipartiteGraph, level: Level) -> np.ndarray:
    """Treatment-side units resampled by the bootstrap for this level."""
    return graph.primary_index if level.estimand == "PTTE" else graph.secondary_index


def row_weights(graph: BipartiteGraph, table: FeatureTable, counts: np.ndarray) -> np.ndarray:
    """Row multiplicities induced by resampled treatment-unit ``counts``.

    Treatment rows take their own count. An outcome row takes the mean
    multiplicity of its neighbours in the resampled population (edges of the
    induced multigraph divided by its degree), so every unit keeps expected
    weight one and the replicate targets the same unweighted average.
    """
    counts = np.asarray(counts, dtype=float)
    idx = table.unit_index
    if table.level is Level.OUTCOME:
        return (graph.incidence_primary @ counts)[idx] / graph.n_prim[idx]
    if table.level is Level.SECONDARY_OUTCOME:
        return (graph.incidence_secondary @ counts)[idx] / graph.n_sec[idx]
    return counts
