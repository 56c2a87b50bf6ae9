"""Exposure mappings and the binomial generalized propensity score.

Outcome exposure is held in rational form: ``treated`` (k) primary neighbours
out of ``n_prim`` (n), so E_i = k / n under the default w_ij = 1 / n_i^prim.
Treatment-side exposures are integer counts.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from numbers import Real

import numpy as np

from .errors import ExposureError
from .graph import AssignmentVector, BipartiteGraph, check_assignment


@dataclass(frozen=True)
class GpsValue:
    probability: float
    exposure: Fraction
    n: int
    p: float


def _exposure_numerator(e, n: int) -> int:
    if isinstance(e, Fraction):
        k = e * n
        if k.denominator != 1:
            raise ExposureError(f"exposure {e} is not attainable with {n} neighbours")
        return int(k)
    k = float(e) * n
    kr = round(k)
    if abs(k - kr) > 1e-9:
        raise ExposureError(f"exposure {e} is not attainable with {n} neighbours")
    return int(kr)


def gps_binomial(e: Real | Fraction, n: int, p: float) -> GpsValue:
    """r(e, n, p) = C(n, k) p^k (1-p)^(n-k) with k = e * n."""
    if n <= 0:
        raise ExposureError("GPS undefined for n = 0 primary neighbours")
    if not 0.0 <= p <= 1.0:
        raise ExposureError(f"treatment probability {p} outside [0, 1]")
    k = _exposure_numerator(e, n)
    if not 0 <= k <= n:
        raise ExposureError(f"exposure {e} outside [0, 1]")
    prob = math.comb(n, k) * p**k * (1.0 - p) ** (n - k)
    return GpsValue(prob, Fraction(k, n), n, p)


def gps_array(k: np.ndarray, n: np.ndarray, p: float) -> np.ndarray:
    """Vectorised GPS for integer treated counts ``k`` out of ``n``."""
    k = np.asarray(k, dtype=np.int64)
    n = np.asarray(n, dtype=np.int64)
    if np.any(n <= 0):
        raise ExposureError("GPS undefined for n = 0 primary neighbours")
    if np.any((k < 0) | (k > n)):
        raise ExposureError("treated count outside [0, n]")
    # exact binomial coefficients, computed once per distinct (n, k) pair
    width = int(n.max(initial=0)) + 1
    keys, inverse = np.unique(n.ravel() * width + k.ravel(), return_inverse=True)
    comb = np.array([math.comb(int(c // width), int(c % width)) for c in keys], dtype=float)[inverse]
    # numpy gives 0.0**0 == 1.0, matching the degenerate p in {0, 1} cases
    return comb.reshape(k.shape) * np.power(p, k) * np.power(1.0 - p, n - k)


# -- exposure mappings ------------------------------------------------------------


@dataclass(frozen=True)
class OutcomeExposures:
    """Per-unit exposure for outcome units in O_prim (``index`` are graph positions)."""

    index: np.ndarray
    treated: np.ndarray
    n_prim: np.ndarray

    @property
    def exposure(self) -> np.ndarray:
        return self.treated / self.n_prim

    def fractions(self) -> list[Fraction]:
        return [Fraction(int(k), int(n)) for k, n in zip(self.treated, self.n_prim)]


@dataclass(frozen=True)
class TreatmentExposures:
    """Direct and indirect exposure counts, one entry per treatment unit."""

    direct: np.ndarray
    indirect: np.ndarray


def treated_primary_counts(graph: BipartiteGraph, z: np.ndarray) -> np.ndarray:
    """k_i: number of treated primary neighbours of every outcome unit."""
    return graph.incidence_primary @ z[graph.primary_index].astype(np.int64)


def compute_outcome_exposures(graph: BipartiteGraph, z: AssignmentVector) -> OutcomeExposures:
    """E_i = sum_{j in N_i^prim} Z_j / n_i^prim for i in O_prim."""
    zz = check_assignment(graph, z)
    k = treated_primary_counts(graph, zz)
    idx = graph.o_prim_index
    return OutcomeExposures(idx, k[idx], graph.n_prim[idx])


def compute_treatment_exposures(graph: BipartiteGraph, z: AssignmentVector) -> TreatmentExposures:
    """E^Dir_j = Z_j |C_j ∩ O_prim| and E^Ind_j = co-neighbour treated count, over O_prim.

    Both are zero for secondary units, since j never belongs to N_i^prim.
    """
    zz = check_assignment(graph, z).astype(np.int64)
    k = treated_primary_counts(graph, zz)
    prim = graph.primary_index
    deg = np.zeros(graph.n_treatment, dtype=np.int64)
    deg[prim] = graph.treatment_degree[prim]
    direct = zz * deg
    indirect = np.zeros(graph.n_treatment, dtype=np.int64)
    # sum over i ~ j of (k_i - Z_j) removes j's own contribution
    indirect[prim] = graph.incidence_primary.T @ k - zz[prim] * deg[prim]
    return TreatmentExposures(direct, indirect)


def compute_secondary_indirect_exposure(graph: BipartiteGraph, z: AssignmentVector) -> np.ndarray:
    """For j in T_sec: treated primary neighbours summed over j's outcome units in O_Both.

    Returned array is aligned with ``graph.secondary_index``.
    """
    zz = check_assignment(graph, z)
    k = treated_primary_counts(graph, zz)
    k = np.where(graph.in_o_both, k, 0)
    return np.asarray(graph.incidence_secondary.T @ k, dtype=np.int64)


def full_deployment_exposures(graph: BipartiteGraph) -> tuple[TreatmentExposures, np.ndarray]:
    """Treatment-side exposures under Z(1), without building the assignment."""
    prim = graph.primary_index
    direct = np.zeros(graph.n_treatment, dtype=np.int64)
    direct[prim] = graph.treatment_degree[prim]
    indirect = np.zeros(graph.n_treatment, dtype=np.int64)
    indirect[prim] = graph.incidence_primary.T @ graph.n_prim - direct[prim]
    sec = np.asarray(graph.incidence_secondary.T @ np.where(graph.in_o_both, graph.n_prim, 0), dtype=np.int64)
    return TreatmentExposures(direct, indirect), sec


# -- exposure table -----------------------------------------------------------------


@dataclass(frozen=True)
class ExposureTable:
    """Everything exposure-related for one realized assignment.

    Outcome arrays cover O_prim (positions in ``outcome_index``); treatment arrays
    cover every treatment unit; ``indirect_secondary`` covers T_sec.
    """

    outcome_index: np.ndarray
    treated: np.ndarray
    n_prim: np.ndarray
    n_sec: np.ndarray
    gps: np.ndarray
    direct: np.ndarray
    indirect: np.ndarray
    indirect_secondary: np.ndarray
    z: np.ndarray
    p: float
    assignment_id: str
    graph_fingerprint: str

    @property
    def exposure(self) -> np.ndarray:
        return self.treated / self.n_prim

    def to_csv(self, graph: BipartiteGraph, path) -> None:
        """Columns ``unit_id,level,E,E_dir,E_ind,n_prim,n_sec,gps``.

        Secondary treatment rows report the secondary indirect-exposure variant in E_ind.
        """
        ind = self.indirect.copy()
        ind[graph.secondary_index] = self.indirect_secondary
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["unit_id", "level", "E", "E_dir", "E_ind", "n_prim", "n_sec", "gps"])
            for pos, k, n, ns, r in zip(self.outcome_index, self.treated, self.n_prim, self.n_sec, self.gps):
                w.writerow([graph.outcome_ids[pos], "outcome", repr(float(k / n)), "", "", int(n), int(ns), repr(float(r))])
            for j, tid in enumerate(graph.treatment_ids):
                w.writerow([tid, "treatment", "", int(self.direct[j]), int(ind[j]), "", "", ""])


def exposure_table(graph: BipartiteGraph, z: AssignmentVector, p: float) -> ExposureTable:
    """All exposures for ``z``; ``p`` is the design treatment probability."""
    if not 0.0 < p < 1.0:
        raise ExposureError(f"design treatment probability must lie in (0, 1), got {p}")
    oe = compute_outcome_exposures(graph, z)
    te = compute_treatment_exposures(graph, z)
    sec = compute_secondary_indirect_exposure(graph, z)
    return ExposureTable(
        outcome_index=oe.index,
        treated=oe.treated,
        n_prim=oe.n_prim,
        n_sec=graph.n_sec[oe.index],
        gps=gps_array(oe.treated, oe.n_prim, p),
        direct=te.direct,
        indirect=te.indirect,
        indirect_secondary=sec,
        z=check_assignment(graph, z),
        p=p,
        assignment_id=z.id,
        graph_fingerprint=graph.fingerprint,
    )


# -- overlap diagnostic -------------------------------------------------------------


@dataclass(frozen=True)
class OverlapStratum:
    n_prim: int
    units: int
    support: tuple[int, ...]
    counts: tuple[int, ...]
    flagged: bool
    small_sample: bool


@dataclass(frozen=True)
class OverlapReport:
    strata: tuple[OverlapStratum, ...]

    @property
    def flagged(self) -> tuple[int, ...]:
        return tuple(s.n_prim for s in self.strata if s.flagged)

    @property
    def ok(self) -> bool:
        return not self.flagged

    def to_dict(self) -> dict:
        return {
            "strata": [
                {
                    "n_prim": s.n_prim,
                    "units": s.units,
                    "support": [f"{k}/{s.n_prim}" for k in s.support],
                    "counts": list(s.counts),
                    "flagged": s.flagged,
                    "small_sample": s.small_sample,
                }
                for s in self.strata
            ],
            "flagged_strata": list(self.flagged),
        }


def diagnose_overlap(exposures: ExposureTable, min_units: int = 2) -> OverlapReport:
    """Observed exposure support per n_i^prim stratum.

    A stratum is flagged when fewer than two distinct exposure levels occur;
    strata with fewer than ``min_units`` units carry the small-sample marker and
    are flagged as well.
    """
    strata = []
    for n in np.unique(exposures.n_prim):
        ks = exposures.treated[exposures.n_prim == n]
        levels, counts = np.unique(ks, return_counts=True)
        small = ks.size < min_units
        strata.append(
            OverlapStratum(
                n_prim=int(n),
                units=int(ks.size),
                support=tuple(int(x) for x in levels),
                counts=tuple(int(c) for c in counts),
                flagged=bool(levels.size < 2 or small),
                small_sample=bool(small),
            )
        )
    return OverlapReport(tuple(strata))
