"""Attention-spillover simulator with exact ground truth.

Edge outcome:

    Y_ij = alpha_type(j) + gamma_i * sum_{k ~ i} beta[type(j)][type(k)] * log v_k(Z) + eps_ij

with v_k = visibility_treated when k is primary and treated, visibility_base
otherwise. The sum runs over every treatment unit adjacent to i.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

from .errors import ConfigError
from .estimators import EdgeOutcomes
from .exposure import exposure_table
from .graph import AssignmentVector, BipartiteGraph, all_treated, check_assignment, none_treated, validate_assignment
from .pipeline import EstimationConfig, analyze
from .report import RECORD_COLUMNS, full

PRIMARY_TYPE = "economy"
SECONDARY_TYPES = ("premium", "xl")

# own-type boost, substitute (premium) gains, competitor (xl) loses
DEFAULT_BETA: dict[str, dict[str, float]] = {
    "economy": {"economy": 0.65, "premium": 0.0, "xl": 0.0},
    "premium": {"economy": 0.40, "premium": 0.0, "xl": 0.0},
    "xl": {"economy": -0.10, "premium": 0.0, "xl": 0.0},
}


@dataclass(frozen=True)
class DgpParams:
    """Distributional parameters; :meth:`realize` draws the per-unit values."""

    beta: Mapping[str, Mapping[str, float]] = field(default_factory=lambda: DEFAULT_BETA)
    alpha: Mapping[str, float] | None = None
    alpha_band: tuple[float, float] = (0.5, 1.5)
    gamma_range: tuple[float, float] = (0.5, 1.5)
    sigma: float = 0.02
    visibility_base: float = 1.0
    visibility_treated: float = 1.1
    primary_type: str = PRIMARY_TYPE
    secondary_types: tuple[str, ...] = SECONDARY_TYPES
    prominence_saturation: bool = False

    def __post_init__(self):
        types = self.type_names
        if len(set(types)) != len(types):
            raise ConfigError("type names must be distinct")
        for t in types:
            if t not in self.beta:
                raise ConfigError(f"beta: missing row for type {t!r}")
            for u in types:
                if u not in self.beta[t]:
                    raise ConfigError(f"beta[{t!r}]: missing entry for type {u!r}")
        if self.alpha is not None and set(self.alpha) != set(types):
            raise ConfigError("alpha must give one value per type")
        lo, hi = self.alpha_band
        if lo > hi:
            raise ConfigError("alpha_band must be ordered")
        lo, hi = self.gamma_range
        if lo > hi:
            raise ConfigError("gamma_range must be ordered")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if self.visibility_base <= 0 or self.visibility_treated <= 0:
            raise ConfigError("visibility scores must be positive")
        if self.prominence_saturation and self.beta[self.primary_type][self.primary_type] >= 0:
            raise ConfigError("prominence_saturation requires beta[primary][primary] < 0")

    @property
    def type_names(self) -> tuple[str, ...]:
        return (self.primary_type,) + tuple(self.secondary_types)

    def beta_matrix(self) -> np.ndarray:
        t = self.type_names
        return np.array([[float(self.beta[a][b]) for b in t] for a in t])

    def type_index(self, graph: BipartiteGraph) -> np.ndarray:
        """Primary units get type 0; secondary units cycle through the secondary types."""
        idx = np.zeros(graph.n_treatment, dtype=np.int64)
        sec = graph.secondary_index
        if sec.size and not self.secondary_types:
            raise ConfigError("graph has secondary units but no secondary types are configured")
        idx[sec] = 1 + np.arange(sec.size) % max(len(self.secondary_types), 1)
        return idx

    def realize(self, graph: BipartiteGraph, rng: np.random.Generator) -> "RealizedDgp":
        names = self.type_names
        if self.alpha is None:
            alpha_t = rng.uniform(*self.alpha_band, size=len(names))
        else:
            alpha_t = np.array([float(self.alpha[t]) for t in names])
        gamma = rng.uniform(*self.gamma_range, size=graph.n_outcome)
        return RealizedDgp(
            type_names=names,
            type_index=self.type_index(graph),
            alpha=alpha_t,
            gamma=gamma,
            beta=self.beta_matrix(),
            sigma=float(self.sigma),
            log_base=math.log(self.visibility_base),
            log_treated=math.log(self.visibility_treated),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beta"] = {a: dict(row) for a, row in self.beta.items()}
        d["alpha"] = dict(self.alpha) if self.alpha is not None else None
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DgpParams":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError(f"dgp: unknown field(s) {extra}")
        for key in ("alpha_band", "gamma_range", "secondary_types"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class RealizedDgp:
    """Concrete per-unit parameters for one graph.

    ``alpha`` is per type, ``gamma`` per outcome unit, ``type_index`` per
    treatment unit, ``beta[a, b]`` the effect of type-b visibility on type-a edges.
    """

    type_names: tuple[str, ...]
    type_index: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    sigma: float
    log_base: float
    log_treated: float

    def with_gamma(self, gamma) -> "RealizedDgp":
        return replace(self, gamma=np.broadcast_to(np.asarray(gamma, dtype=float), self.gamma.shape).copy())

    def with_beta(self, beta) -> "RealizedDgp":
        return replace(self, beta=np.asarray(beta, dtype=float))


def noiseless_edge_outcomes(graph: BipartiteGraph, params: RealizedDgp, z: np.ndarray) -> np.ndarray:
    """Deterministic part of Y_ij for raw 0/1 assignment ``z`` (treatment-unit order)."""
    if params.gamma.shape != (graph.n_outcome,) or params.type_index.shape != (graph.n_treatment,):
        raise ConfigError("realized parameters do not match the graph")
    log_v = np.full(graph.n_treatment, params.log_base)
    log_v[graph.is_primary & (np.asarray(z) == 1)] = params.log_treated
    t = params.type_index
    # S[i, a] = sum_{k ~ i} beta[a, type(k)] log v_k
    S = graph.incidence @ (params.beta[:, t].T * log_v[:, None])
    S = np.asarray(S)
    tj = t[graph.edge_treatment]
    i = graph.edge_outcome
    return params.alpha[tj] + params.gamma[i] * S[i, tj]


def simulate_outcomes(
    graph: BipartiteGraph,
    params: RealizedDgp,
    z: AssignmentVector,
    seed: int | np.random.SeedSequence | np.random.Generator,
) -> EdgeOutcomes:
    """Edge outcomes under assignment ``z`` with Gaussian noise of scale ``sigma``."""
    zz = check_assignment(graph, z)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    y = noiseless_edge_outcomes(graph, params, zz)
    if params.sigma > 0:
        y = y + rng.normal(0.0, params.sigma, size=y.size)
    y.flags.writeable = False
    return EdgeOutcomes(y)


# -- ground truth ---------------------------------------------------------------------


@dataclass(frozen=True)
class GroundTruth:
    ptte_outcome: float
    ptte_treatment: float
    stte_outcome: float
    stte_treatment: float

    def value(self, estimand: str, level: str) -> float:
        side = "outcome" if level in ("outcome", "secondary_outcome") else "treatment"
        return getattr(self, f"{estimand.lower()}_{side}")

    def to_dict(self) -> dict:
        return asdict(self)


def total_effects(graph: BipartiteGraph, y1: np.ndarray, y0: np.ndarray) -> GroundTruth:
    """Four total effects from edge outcomes under full (y1) and zero (y0) deployment."""
    d = np.asarray(y1, dtype=float) - np.asarray(y0, dtype=float)
    prim = graph.edge_is_primary
    o = graph.edge_outcome
    t = graph.edge_treatment
    both = graph.in_o_both[o]
    nO, nT = graph.n_outcome, graph.n_treatment
    ptte_o = float(np.bincount(o[prim], d[prim], nO)[graph.o_prim_index].mean()) if graph.o_prim_index.size else math.nan
    ptte_t = float(np.bincount(t, d, nT)[graph.primary_index].mean()) if graph.primary_index.size else math.nan
    sec = ~prim
    stte_o = float(np.bincount(o[sec], d[sec], nO)[graph.o_both_index].mean()) if graph.o_both_index.size else math.nan
    stte_t = float(np.bincount(t[both], d[both], nT)[graph.secondary_index].mean()) if graph.secondary_index.size else math.nan
    return GroundTruth(ptte_o, ptte_t, stte_o, stte_t)


def ground_truth_effects(graph: BipartiteGraph, params: RealizedDgp) -> GroundTruth:
    """Noiseless DGP evaluated at Z(1) and Z(0)."""
    y1 = noiseless_edge_outcomes(graph, params, all_treated(graph).z)
    y0 = noiseless_edge_outcomes(graph, params, none_treated(graph).z)
    return total_effects(graph, y1, y0)


# -- scenarios and graph generation ---------------------------------------------------------


@dataclass(frozen=True)
class SimulationScenario:
    spec_id: int
    mean_primary_degree: float
    treatment_probability: float
    n_outcome: int = 30_000
    n_primary: int = 150
    n_secondary: int = 150
    secondary_degree: int = 2
    replications: int = 50
    base_seed: int = 0
    # expose each treatment unit's type as 0/1 covariates (the analyst knows vehicle types)
    type_covariates: bool = True

    def __post_init__(self):
        if min(self.n_outcome, self.n_primary) <= 0 or self.n_secondary < 0:
            raise ConfigError("unit counts must be positive")
        if not 0.0 < self.treatment_probability < 1.0:
            raise ConfigError("treatment_probability must lie in (0, 1)")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if self.mean_primary_degree < 1.0:
            raise ConfigError("mean_primary_degree must be >= 1 so every outcome unit has a primary neighbour")
        if self.secondary_degree < 0:
            raise ConfigError("secondary_degree must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimulationScenario":
        d = dict(d)
        extra = sorted(set(d) - set(cls.__dataclass_fields__))
        if extra:
            raise ConfigError(f"scenario: unknown field(s) {extra}")
        for key in ("spec_id", "mean_primary_degree", "treatment_probability"):
            if key not in d:
                raise ConfigError(f"scenario: missing required field {key!r}")
        return cls(**d)


# (mean primary degree, treatment probability) per specification
SCENARIO_GRID: dict[int, tuple[float, float]] = {
    1: (2.8, 0.50),
    2: (5.4, 0.50),
    3: (8.0, 0.50),
    4: (8.0, 0.45),
    5: (8.0, 0.40),
}


def scenario(spec_id: int, **overrides) -> SimulationScenario:
    if spec_id not in SCENARIO_GRID:
        raise ConfigError(f"unknown specification {spec_id}; expected one of {sorted(SCENARIO_GRID)}")
    deg, p = SCENARIO_GRID[spec_id]
    return SimulationScenario(spec_id, deg, p, **overrides)


def _sample_without_replacement(rng: np.random.Generator, rows: int, pool: int, k: int) -> np.ndarray:
    if k == 0 or rows == 0:
        return np.zeros((rows, 0), dtype=np.int64)
    keys = rng.random((rows, pool))
    return np.argpartition(keys, k - 1, axis=1)[:, :k].astype(np.int64)


def generate_graph(sc: SimulationScenario, seed) -> BipartiteGraph:
    """Random graph: primary degree on {floor, ceil} of the target, neighbours uniform."""
    target = sc.mean_primary_degree
    if target > sc.n_primary:
        raise ConfigError(f"mean primary degree {target} exceeds the {sc.n_primary} primary units")
    if sc.secondary_degree > sc.n_secondary:
        raise ConfigError(f"secondary degree {sc.secondary_degree} exceeds the {sc.n_secondary} secondary units")
    rng = np.random.default_rng(seed)
    n = sc.n_outcome
    lo = math.floor(target)
    hi = min(lo + 1, sc.n_primary)
    n_hi = int(round((target - lo) * n)) if hi > lo else 0
    deg = np.full(n, lo, dtype=np.int64)
    deg[rng.permutation(n)[:n_hi]] = hi

    eo, et = [], []
    for d in np.unique(deg):
        rows = np.flatnonzero(deg == d)
        nb = _sample_without_replacement(rng, rows.size, sc.n_primary, int(d))
        eo.append(np.repeat(rows, d))
        et.append(nb.ravel())
    nb = _sample_without_replacement(rng, n, sc.n_secondary, sc.secondary_degree)
    eo.append(np.repeat(np.arange(n), sc.secondary_degree))
    et.append(sc.n_primary + nb.ravel())

    w_o, w_p, w_s = len(str(n - 1)), len(str(sc.n_primary - 1)), len(str(max(sc.n_secondary - 1, 0)))
    t_ids = [f"p{j:0{w_p}d}" for j in range(sc.n_primary)] + [f"s{j:0{w_s}d}" for j in range(sc.n_secondary)]
    o_ids = [f"o{i:0{w_o}d}" for i in range(n)]
    return BipartiteGraph.from_arrays(
        treatment_ids=t_ids,
        is_primary=np.arange(len(t_ids)) < sc.n_primary,
        outcome_ids=o_ids,
        edge_outcome=np.concatenate(eo),
        edge_treatment=np.concatenate(et),
    )


def draw_assignment(graph: BipartiteGraph, p: float, seed) -> AssignmentVector:
    """Independent Bernoulli(p) on primary units."""
    rng = np.random.default_rng(seed)
    z = np.zeros(graph.n_treatment, dtype=np.int8)
    z[graph.primary_index] = rng.random(graph.primary_index.size) < p
    return validate_assignment(graph, z)


def attach_type_covariates(graph: BipartiteGraph, params: DgpParams) -> BipartiteGraph:
    """Copy of ``graph`` with one indicator covariate per non-primary type after the first."""
    names = params.type_names[2:]
    t = params.type_index(graph)
    cov = np.column_stack([t == 2 + k for k in range(len(names))]).astype(float) if names else None
    return BipartiteGraph.from_arrays(
        treatment_ids=graph.treatment_ids,
        is_primary=graph.is_primary,
        outcome_ids=graph.outcome_ids,
        edge_outcome=graph.edge_outcome,
        edge_treatment=graph.edge_treatment,
        edge_weight=graph.edge_weight,
        treatment_covariate_names=[f"type_{n}" for n in names],
        treatment_covariates=cov,
    )


@dataclass(frozen=True)
class SimulatedExperiment:
    graph: BipartiteGraph
    params: RealizedDgp
    assignment: AssignmentVector
    outcomes: EdgeOutcomes
    truth: GroundTruth
    model_seed: int


def simulate_replicate(sc: SimulationScenario, params: DgpParams, replicate: int) -> SimulatedExperiment:
    """One replicate, fully determined by (base_seed, replicate)."""
    g_ss, p_ss, z_ss, e_ss, m_ss = np.random.SeedSequence([sc.base_seed, replicate]).spawn(5)
    graph = generate_graph(sc, g_ss)
    if sc.type_covariates:
        graph = attach_type_covariates(graph, params)
    realized = params.realize(graph, np.random.default_rng(p_ss))
    z = draw_assignment(graph, sc.treatment_probability, z_ss)
    outcomes = simulate_outcomes(graph, realized, z, e_ss)
    model_seed = int(m_ss.generate_state(1)[0])
    return SimulatedExperiment(graph, realized, z, outcomes, ground_truth_effects(graph, realized), model_seed)


# -- replication studies -------------------------------------------------------------------

@dataclass(frozen=True)
class ReplicationRecord:
    replicate: int
    estimand: str
    level: str
    method: str
    estimate: float
    ci_lo: float
    ci_hi: float
    ground_truth: float

    def row(self) -> list[str]:
        return [str(self.replicate), self.estimand, self.level, self.method,
                full(self.estimate), full(self.ci_lo), full(self.ci_hi), full(self.ground_truth)]


@dataclass(frozen=True)
class ReplicationFailure:
    replicate: int
    estimand: str
    level: str
    method: str
    error: str


@dataclass(frozen=True)
class ReplicationRun:
    scenario: SimulationScenario
    records: tuple[ReplicationRecord, ...]
    failures: tuple[ReplicationFailure, ...]

    def records_csv(self) -> str:
        lines = [",".join(RECORD_COLUMNS)] + [",".join(r.row()) for r in self.records]
        return "\n".join(lines) + "\n"

    def failures_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["replicate", "estimand", "level", "method", "error"])
        for f in self.failures:
            w.writerow([f.replicate, f.estimand, f.level, f.method, f.error])
        return buf.getvalue()

    def medians(self) -> dict[tuple[str, str, str], float]:
        groups: dict[tuple[str, str, str], list[float]] = {}
        for r in self.records:
            groups.setdefault((r.estimand, r.level, r.method), []).append(r.estimate)
        return {k: float(np.median(v)) for k, v in sorted(groups.items())}


def replicate_estimates(sc: SimulationScenario, params: DgpParams, config: EstimationConfig, replicate: int):
    """Simulate one replicate and run the configured estimators: (experiment, estimates, failures)."""
    exp = simulate_replicate(sc, params, replicate)
    ex = exposure_table(exp.graph, exp.assignment, sc.treatment_probability)
    estimates, failures = analyze(exp.graph, ex, exp.outcomes, config, seed=exp.model_seed)
    return exp, estimates, failures


def replicate_records(
    sc: SimulationScenario, params: DgpParams, config: EstimationConfig, replicate: int
) -> tuple[list[ReplicationRecord], list[ReplicationFailure]]:
    exp, estimates, failures = replicate_estimates(sc, params, config, replicate)
    recs = []
    for e in estimates:
        lo, hi = e.ci if e.ci else (math.nan, math.nan)
        recs.append(ReplicationRecord(replicate, e.estimand, e.level, e.method, e.estimate, lo, hi,
                                      exp.truth.value(e.estimand, e.level)))
    fails = [ReplicationFailure(replicate, f.estimand, f.level, f.method, f.error) for f in failures]
    return recs, fails


def _replicate_task(args):
    return replicate_records(*args)


def run_replications(sc: SimulationScenario, params: DgpParams, config=None, jobs: int = 1) -> ReplicationRun:
    """All replicates of a scenario; records are ordered by replicate regardless of ``jobs``."""
    if config is None:
        config = EstimationConfig(edge_additive=True)
    tasks = [(sc, params, config, r) for r in range(sc.replications)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_replicate_task, tasks))
    else:
        results = [_replicate_task(t) for t in tasks]
    records = tuple(r for recs, _ in results for r in recs)
    failures = tuple(f for _, fails in results for f in fails)
    return ReplicationRun(sc, records, failures)
