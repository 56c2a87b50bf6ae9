"""Run every configured estimator on one experiment."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

from .errors import BliftError, ConfigError
from .estimators import (
    EffectEstimate,
    Level,
    Outcomes,
    basic_estimate,
    build_feature_table,
    estimate_effect,
    fit_response_model,
)
from .exposure import ExposureTable, diagnose_overlap, exposure_table
from .graph import AssignmentVector, BipartiteGraph
from .models import METHODS, GbtConfig, KrrConfig, LpConfig, config_from_dict
from .projection import attach_bootstrap, bootstrap_effect, project_effect

ALL_LEVELS = tuple(level.value for level in Level)


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 0
    confidence: float = 0.95
    methods: tuple[str, ...] = ("krr",)
    levels: tuple[str, ...] = ALL_LEVELS

    def __post_init__(self):
        if self.B < 0 or self.B == 1:
            raise ConfigError("bootstrap.B must be 0 (off) or >= 2")
        if not 0.0 < self.confidence < 1.0:
            raise ConfigError("bootstrap.confidence must lie in (0, 1)")


@dataclass(frozen=True)
class EstimationConfig:
    methods: tuple[str, ...] = ("basic", "lp", "krr")
    levels: tuple[str, ...] = ALL_LEVELS
    lp: LpConfig = field(default_factory=LpConfig)
    krr: KrrConfig = field(default_factory=KrrConfig)
    gbt: GbtConfig = field(default_factory=GbtConfig)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    # treatment-level estimates of these methods are also projected to the outcome level
    project: tuple[str, ...] = ("krr",)
    edge_additive: bool = False

    def __post_init__(self):
        for m in self.methods:
            if m != "basic" and m not in METHODS:
                raise ConfigError(f"estimation.methods: unknown method {m!r}")
        for lv in self.levels + self.bootstrap.levels:
            if lv not in ALL_LEVELS:
                raise ConfigError(f"estimation.levels: unknown level {lv!r}")

    def model_config(self, method: str):
        return {"lp": self.lp, "krr": self.krr, "gbt": self.gbt}[method]

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "EstimationConfig":
        d = dict(d or {})
        extra = sorted(set(d) - set(cls.__dataclass_fields__))
        if extra:
            raise ConfigError(f"estimation: unknown field(s) {extra}")
        kw: dict = {}
        for key in ("methods", "levels", "project"):
            if key in d:
                kw[key] = tuple(d[key])
        for m in METHODS:
            if m in d:
                try:
                    kw[m] = config_from_dict(m, d[m])
                except TypeError as exc:
                    raise ConfigError(f"estimation.{m}: {exc}") from None
        if "bootstrap" in d:
            b = dict(d["bootstrap"])
            for key in ("methods", "levels"):
                if key in b:
                    b[key] = tuple(b[key])
            try:
                kw["bootstrap"] = BootstrapConfig(**b)
            except TypeError as exc:
                raise ConfigError(f"estimation.bootstrap: {exc}") from None
        if "edge_additive" in d:
            kw["edge_additive"] = bool(d["edge_additive"])
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Failure:
    estimand: str
    level: str
    method: str
    error: str


def analyze(
    graph: BipartiteGraph,
    exposures: ExposureTable,
    outcomes: Outcomes,
    config: EstimationConfig,
    seed: int = 0,
) -> tuple[list[EffectEstimate], list[Failure]]:
    """Estimates for every (level, method) pair; failures are collected, not raised."""
    estimates: list[EffectEstimate] = []
    failures: list[Failure] = []
    overlap = diagnose_overlap(exposures)
    flagged = list(overlap.flagged)
    boot = config.bootstrap
    for lv in config.levels:
        level = Level(lv)
        try:
            table = build_feature_table(graph, exposures, outcomes, level)
        except BliftError as exc:
            for m in config.methods:
                failures.append(Failure(level.estimand, level.side, m, str(exc)))
            continue
        for m in config.methods:
            try:
                if m == "basic":
                    if level.estimand != "PTTE":
                        continue
                    est = basic_estimate(graph, exposures, outcomes, level)
                else:
                    model = fit_response_model(table, m, config.model_config(m), seed)
                    est = estimate_effect(model, table)
                    if level.side == "outcome":
                        est = _with_meta(est, overlap_flagged_strata=flagged)
                    if boot.B and m in boot.methods and lv in boot.levels:
                        fixed = model.with_fixed_hyperparameters() or config.model_config(m)
                        res = bootstrap_effect(graph, table, m, fixed, boot.B, boot.confidence, seed=seed, model_seed=seed)
                        est = attach_bootstrap(est, res)
            except BliftError as exc:
                failures.append(Failure(level.estimand, level.side, m, str(exc)))
                continue
            estimates.append(est)
            if level.side == "treatment" and m in config.project and config.edge_additive:
                try:
                    estimates.append(project_effect(est, graph, edge_additive=True))
                except BliftError as exc:
                    failures.append(Failure(level.estimand, "outcome", f"proj_{m}", str(exc)))
    return estimates, failures


def estimate_level(
    graph: BipartiteGraph,
    z: AssignmentVector,
    outcomes: Outcomes,
    p: float,
    level: Level | str,
    method: str = "krr",
    config=None,
    seed: int = 0,
    project: bool = False,
) -> EffectEstimate:
    """One estimate from raw inputs: exposures, features, fit, aggregate.

    With ``project`` a treatment-level estimate is mapped to the outcome level
    (the caller asserts edge additivity by asking for it).
    """
    table = build_feature_table(graph, exposure_table(graph, z, p), outcomes, level)
    est = estimate_effect(fit_response_model(table, method, config, seed), table)
    return project_effect(est, graph, edge_additive=True) if project else est


def _with_meta(est: EffectEstimate, **kw) -> EffectEstimate:
    return replace(est, metadata={**est.metadata, **kw})


def bootstrap_se(est: EffectEstimate) -> float:
    reps = est.metadata.get("bootstrap", {}).get("replicates")
    return float(np.std(reps, ddof=1)) if reps and len(reps) > 1 else float("nan")
