"""Bipartite experiment data model: units, weighted edges, eligibility and derived index sets.

Units are kept in sorted-id order and edges in sorted (outcome_id, treatment_id)
order, so a graph built from any permutation of the same records is identical.
All derived structures are recomputed from the edge arrays on first access.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import AssignmentError, GraphValidationError


class Eligibility(str, Enum):
    PRIMARY = "primary"
    SECONDARY = "secondary"


@dataclass(frozen=True)
class TreatmentUnit:
    id: str
    eligibility: Eligibility
    covariates: tuple[tuple[str, float], ...] = ()


@dataclass(frozen=True)
class OutcomeUnit:
    id: str
    covariates: tuple[tuple[str, float], ...] = ()


@dataclass(frozen=True)
class Edge:
    outcome_id: str
    treatment_id: str
    weight: float = 1.0


@dataclass(frozen=True)
class IndexSets:
    """Set-valued view of the derived structure (ids, not positions)."""

    primary_neighbors: dict[str, frozenset[str]]
    n_prim: dict[str, int]
    n_sec: dict[str, int]
    connected_outcomes: dict[str, frozenset[str]]
    o_prim: frozenset[str]
    o_both: frozenset[str]


def _covariate_matrix(rows: Sequence[tuple[tuple[str, float], ...]], who: str) -> tuple[tuple[str, ...], np.ndarray]:
    if not rows:
        return (), np.zeros((0, 0))
    names = tuple(name for name, _ in rows[0])
    for r in rows:
        if tuple(name for name, _ in r) != names:
            raise GraphValidationError(f"{who} units carry inconsistent covariate names")
    mat = np.array([[v for _, v in r] for r in rows], dtype=float).reshape(len(rows), len(names))
    if not np.all(np.isfinite(mat)):
        raise GraphValidationError(f"{who} covariates must be finite")
    return names, mat


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    """Immutable weighted bipartite graph between treatment-side and outcome-side units.

    Positions index into ``treatment_ids`` / ``outcome_ids``; both are sorted.
    ``edge_outcome``/``edge_treatment`` hold positions, ``edge_weight`` the raw w_ij.
    Use :meth:`from_units` or :meth:`from_arrays` rather than the constructor.
    """

    treatment_ids: tuple[str, ...]
    is_primary: np.ndarray
    outcome_ids: tuple[str, ...]
    edge_outcome: np.ndarray
    edge_treatment: np.ndarray
    edge_weight: np.ndarray
    treatment_covariate_names: tuple[str, ...] = ()
    treatment_covariates: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    outcome_covariate_names: tuple[str, ...] = ()
    outcome_covariates: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    # -- construction -------------------------------------------------------------

    @classmethod
    def from_units(
        cls,
        treatment_units: Iterable[TreatmentUnit],
        outcome_units: Iterable[OutcomeUnit],
        edges: Iterable[Edge],
    ) -> "BipartiteGraph":
        tu = list(treatment_units)
        ou = list(outcome_units)
        if not tu:
            raise GraphValidationError("treatment side is empty")
        _check_unique([u.id for u in tu] + [u.id for u in ou], "unit id")
        tu.sort(key=lambda u: u.id)
        ou.sort(key=lambda u: u.id)
        t_pos = {u.id: k for k, u in enumerate(tu)}
        o_pos = {u.id: k for k, u in enumerate(ou)}
        eo, et, ew = [], [], []
        for e in edges:
            if e.outcome_id not in o_pos:
                raise GraphValidationError(f"edge references unknown outcome unit {e.outcome_id!r}")
            if e.treatment_id not in t_pos:
                raise GraphValidationError(f"edge references unknown treatment unit {e.treatment_id!r}")
            eo.append(o_pos[e.outcome_id])
            et.append(t_pos[e.treatment_id])
            ew.append(float(e.weight))
        t_names, t_cov = _covariate_matrix([u.covariates for u in tu], "treatment")
        o_names, o_cov = _covariate_matrix([u.covariates for u in ou], "outcome")
        return cls.from_arrays(
            treatment_ids=[u.id for u in tu],
            is_primary=[Eligibility(u.eligibility) is Eligibility.PRIMARY for u in tu],
            outcome_ids=[u.id for u in ou],
            edge_outcome=np.asarray(eo, dtype=np.int64),
            edge_treatment=np.asarray(et, dtype=np.int64),
            edge_weight=np.asarray(ew, dtype=float),
            treatment_covariate_names=t_names,
            treatment_covariates=t_cov,
            outcome_covariate_names=o_names,
            outcome_covariates=o_cov,
        )

    @classmethod
    def from_arrays(
        cls,
        treatment_ids: Sequence[str],
        is_primary: Sequence[bool],
        outcome_ids: Sequence[str],
        edge_outcome: np.ndarray,
        edge_treatment: np.ndarray,
        edge_weight: np.ndarray | None = None,
        treatment_covariate_names: Sequence[str] = (),
        treatment_covariates: np.ndarray | None = None,
        outcome_covariate_names: Sequence[str] = (),
        outcome_covariates: np.ndarray | None = None,
    ) -> "BipartiteGraph":
        """Fast path: edges given as positions into the id sequences.

        Units are re-sorted by id and edges re-indexed accordingly.
        """
        t_ids = [str(x) for x in treatment_ids]
        o_ids = [str(x) for x in outcome_ids]
        if not t_ids:
            raise GraphValidationError("treatment side is empty")
        _check_unique(t_ids + o_ids, "unit id")
        prim = np.asarray(is_primary, dtype=bool)
        if prim.shape != (len(t_ids),):
            raise GraphValidationError("is_primary must have one entry per treatment unit")
        eo = np.asarray(edge_outcome, dtype=np.int64).ravel()
        et = np.asarray(edge_treatment, dtype=np.int64).ravel()
        ew = np.ones(eo.shape) if edge_weight is None else np.asarray(edge_weight, dtype=float).ravel()
        if not (eo.shape == et.shape == ew.shape):
            raise GraphValidationError("edge arrays must have equal length")
        if eo.size and (eo.min() < 0 or eo.max() >= len(o_ids)):
            raise GraphValidationError("edge references unknown outcome unit")
        if et.size and (et.min() < 0 or et.max() >= len(t_ids)):
            raise GraphValidationError("edge references unknown treatment unit")
        if np.any(~np.isfinite(ew)):
            raise GraphValidationError("edge weights must be finite")
        if np.any(ew < 0):
            raise GraphValidationError("negative edge weight")
        if np.any(ew == 0):
            raise GraphValidationError("existing edges must have positive weight")

        t_order = np.argsort(np.array(t_ids, dtype=object), kind="stable")
        o_order = np.argsort(np.array(o_ids, dtype=object), kind="stable")
        t_rank = np.empty_like(t_order)
        t_rank[t_order] = np.arange(len(t_order))
        o_rank = np.empty_like(o_order)
        o_rank[o_order] = np.arange(len(o_order))
        eo, et = o_rank[eo] if eo.size else eo, t_rank[et] if et.size else et

        order = np.lexsort((et, eo))
        eo, et, ew = eo[order], et[order], ew[order]
        if eo.size > 1:
            dup = (np.diff(eo) == 0) & (np.diff(et) == 0)
            if dup.any():
                k = int(np.flatnonzero(dup)[0])
                raise GraphValidationError(
                    f"duplicate edge ({o_ids[o_order[eo[k]]]!r}, {t_ids[t_order[et[k]]]!r})"
                )

        def _cov(mat, names, order, n, who):
            names = tuple(names)
            if mat is None or len(names) == 0:
                return (), np.zeros((n, 0))
            mat = np.asarray(mat, dtype=float).reshape(n, len(names))
            if not np.all(np.isfinite(mat)):
                raise GraphValidationError(f"{who} covariates must be finite")
            return names, mat[order]

        t_names, t_cov = _cov(treatment_covariates, treatment_covariate_names, t_order, len(t_ids), "treatment")
        o_names, o_cov = _cov(outcome_covariates, outcome_covariate_names, o_order, len(o_ids), "outcome")
        for arr in (prim, eo, et, ew, t_cov, o_cov):
            arr.flags.writeable = False
        return cls(
            treatment_ids=tuple(t_ids[k] for k in t_order),
            is_primary=prim[t_order].copy(),
            outcome_ids=tuple(o_ids[k] for k in o_order),
            edge_outcome=eo,
            edge_treatment=et,
            edge_weight=ew,
            treatment_covariate_names=t_names,
            treatment_covariates=t_cov,
            outcome_covariate_names=o_names,
            outcome_covariates=o_cov,
        )

    # -- sizes --------------------------------------------------------------------

    @property
    def n_treatment(self) -> int:
        return len(self.treatment_ids)

    @property
    def n_outcome(self) -> int:
        return len(self.outcome_ids)

    @property
    def n_edges(self) -> int:
        return int(self.edge_outcome.size)

    @cached_property
    def primary_index(self) -> np.ndarray:
        return np.flatnonzero(self.is_primary)

    @cached_property
    def secondary_index(self) -> np.ndarray:
        return np.flatnonzero(~self.is_primary)

    # -- derived structure --------------------------------------------------------

    @cached_property
    def incidence(self) -> sp.csr_matrix:
        """Binary outcome x treatment incidence matrix."""
        data = np.ones(self.n_edges, dtype=np.int64)
        return sp.csr_matrix(
            (data, (self.edge_outcome, self.edge_treatment)), shape=(self.n_outcome, self.n_treatment)
        )

    @cached_property
    def incidence_primary(self) -> sp.csr_matrix:
        """Incidence restricted to primary columns (outcome x |T_prim|)."""
        return self.incidence[:, self.primary_index].tocsr()

    @cached_property
    def incidence_secondary(self) -> sp.csr_matrix:
        return self.incidence[:, self.secondary_index].tocsr()

    @cached_property
    def edge_is_primary(self) -> np.ndarray:
        return self.is_primary[self.edge_treatment]

    @cached_property
    def n_prim(self) -> np.ndarray:
        return np.bincount(self.edge_outcome[self.edge_is_primary], minlength=self.n_outcome)

    @cached_property
    def n_sec(self) -> np.ndarray:
        return np.bincount(self.edge_outcome[~self.edge_is_primary], minlength=self.n_outcome)

    @cached_property
    def treatment_degree(self) -> np.ndarray:
        return np.bincount(self.edge_treatment, minlength=self.n_treatment)

    @cached_property
    def in_o_prim(self) -> np.ndarray:
        return self.n_prim >= 1

    @cached_property
    def in_o_both(self) -> np.ndarray:
        return (self.n_prim >= 1) & (self.n_sec >= 1)

    @cached_property
    def o_prim_index(self) -> np.ndarray:
        return np.flatnonzero(self.in_o_prim)

    @cached_property
    def o_both_index(self) -> np.ndarray:
        return np.flatnonzero(self.in_o_both)

    @cached_property
    def degree_in_o_both(self) -> np.ndarray:
        """Per treatment unit, number of connected outcome units in O_Both."""
        mask = self.in_o_both[self.edge_outcome]
        return np.bincount(self.edge_treatment[mask], minlength=self.n_treatment)

    @cached_property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update("\x1f".join(self.treatment_ids).encode())
        h.update(b"\x1e")
        h.update(self.is_primary.astype(np.uint8).tobytes())
        h.update("\x1f".join(self.outcome_ids).encode())
        h.update(b"\x1e")
        for arr in (self.edge_outcome, self.edge_treatment, self.edge_weight,
                    self.treatment_covariates, self.outcome_covariates):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    # -- record views -------------------------------------------------------------

    def treatment_units(self) -> list[TreatmentUnit]:
        return [
            TreatmentUnit(
                tid,
                Eligibility.PRIMARY if self.is_primary[k] else Eligibility.SECONDARY,
                tuple(zip(self.treatment_covariate_names, map(float, self.treatment_covariates[k]))),
            )
            for k, tid in enumerate(self.treatment_ids)
        ]

    def outcome_units(self) -> list[OutcomeUnit]:
        return [
            OutcomeUnit(oid, tuple(zip(self.outcome_covariate_names, map(float, self.outcome_covariates[k]))))
            for k, oid in enumerate(self.outcome_ids)
        ]

    def edges(self) -> list[Edge]:
        return [
            Edge(self.outcome_ids[o], self.treatment_ids[t], float(w))
            for o, t, w in zip(self.edge_outcome, self.edge_treatment, self.edge_weight)
        ]

    def to_dict(self) -> dict:
        """Canonical JSON-ready form (sorted units, sorted edge pairs)."""
        return {
            "treatment_units": [
                {"id": u.id, "eligibility": u.eligibility.value, "covariates": dict(u.covariates)}
                for u in self.treatment_units()
            ],
            "outcome_units": [{"id": u.id, "covariates": dict(u.covariates)} for u in self.outcome_units()],
            "edges": [[e.outcome_id, e.treatment_id, e.weight] for e in self.edges()],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: Mapping) -> "BipartiteGraph":
        return cls.from_units(
            [TreatmentUnit(u["id"], Eligibility(u["eligibility"]), tuple(u.get("covariates", {}).items()))
             for u in d["treatment_units"]],
            [OutcomeUnit(u["id"], tuple(u.get("covariates", {}).items())) for u in d["outcome_units"]],
            [Edge(o, t, w) for o, t, w in d["edges"]],
        )


def _check_unique(ids: Sequence[str], what: str) -> None:
    seen: set[str] = set()
    for x in ids:
        if x in seen:
            raise GraphValidationError(f"duplicate {what} {x!r}")
        seen.add(x)


def derive_index_sets(graph: BipartiteGraph) -> IndexSets:
    """Set-valued N_i^prim, n_i^prim, n_i^sec, C_j, O_prim and O_Both."""
    tid, oid = graph.treatment_ids, graph.outcome_ids
    prim_nb: dict[str, set[str]] = {o: set() for o in oid}
    conn: dict[str, set[str]] = {t: set() for t in tid}
    for o, t in zip(graph.edge_outcome, graph.edge_treatment):
        conn[tid[t]].add(oid[o])
        if graph.is_primary[t]:
            prim_nb[oid[o]].add(tid[t])
    n_prim = {o: int(graph.n_prim[k]) for k, o in enumerate(oid)}
    n_sec = {o: int(graph.n_sec[k]) for k, o in enumerate(oid)}
    return IndexSets(
        primary_neighbors={o: frozenset(s) for o, s in prim_nb.items()},
        n_prim=n_prim,
        n_sec=n_sec,
        connected_outcomes={t: frozenset(s) for t, s in conn.items()},
        o_prim=frozenset(o for o in oid if n_prim[o] >= 1),
        o_both=frozenset(o for o in oid if n_prim[o] >= 1 and n_sec[o] >= 1),
    )


# -- assignments ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AssignmentVector:
    """Validated 0/1 assignment aligned with ``graph.treatment_ids``.

    Only :func:`validate_assignment` (and the Z(1)/Z(0) helpers) should build one;
    ``graph_fingerprint`` ties it to the graph it was checked against.
    """

    z: np.ndarray
    graph_fingerprint: str

    def as_mapping(self, graph: BipartiteGraph) -> dict[str, int]:
        return {t: int(v) for t, v in zip(graph.treatment_ids, self.z)}

    @property
    def id(self) -> str:
        return hashlib.sha256(self.graph_fingerprint.encode() + self.z.tobytes()).hexdigest()[:16]


def validate_assignment(graph: BipartiteGraph, z: Mapping[str, int] | Sequence[int] | np.ndarray) -> AssignmentVector:
    """Check that ``z`` covers exactly the treatment ids and is zero on secondary units."""
    if isinstance(z, AssignmentVector):
        z = z.z
    if isinstance(z, Mapping):
        keys = set(z)
        ids = set(graph.treatment_ids)
        missing = sorted(ids - keys)
        unknown = sorted(keys - ids)
        if missing:
            raise AssignmentError(f"assignment missing treatment unit(s): {missing[:5]}")
        if unknown:
            raise AssignmentError(f"assignment names unknown unit(s): {unknown[:5]}")
        arr = np.array([z[t] for t in graph.treatment_ids])
    else:
        arr = np.asarray(z)
        if arr.shape != (graph.n_treatment,):
            raise AssignmentError(f"assignment has {arr.size} entries, graph has {graph.n_treatment} treatment units")
    if not np.all((arr == 0) | (arr == 1)):
        raise AssignmentError("assignment values must be 0 or 1")
    arr = arr.astype(np.int8)
    bad = np.flatnonzero((arr == 1) & ~graph.is_primary)
    if bad.size:
        raise AssignmentError(
            f"eligibility violation: secondary unit {graph.treatment_ids[bad[0]]!r} has nonzero assignment"
        )
    arr.flags.writeable = False
    return AssignmentVector(arr, graph.fingerprint)


def all_treated(graph: BipartiteGraph) -> AssignmentVector:
    """Z(1): every primary unit treated."""
    return validate_assignment(graph, graph.is_primary.astype(np.int8))


def none_treated(graph: BipartiteGraph) -> AssignmentVector:
    """Z(0) = 0."""
    return validate_assignment(graph, np.zeros(graph.n_treatment, dtype=np.int8))


def check_assignment(graph: BipartiteGraph, z: AssignmentVector) -> np.ndarray:
    if not isinstance(z, AssignmentVector) or z.graph_fingerprint != graph.fingerprint:
        raise AssignmentError("assignment was not validated against this graph")
    return z.z


# -- CSV ingestion ------------------------------------------------------------------


def _read_csv(source) -> tuple[list[str], list[list[str]]]:
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    else:
        rows = list(csv.reader(source))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise GraphValidationError("empty CSV source")
    return [c.strip() for c in rows[0]], [[c.strip() for c in r] for r in rows[1:]]


def _side_covariates(names: list[str], rows: list[list[str]], who: str) -> tuple[list[str], list[list[float]]]:
    """Covariate columns blank for every row of a side do not belong to that side."""
    keep = [k for k in range(1, len(names)) if any(r[k] != "" for r in rows)]
    out = []
    for r in rows:
        vals = []
        for k in keep:
            if r[k] == "":
                raise GraphValidationError(f"{who} unit {r[0]!r}: missing covariate {names[k]!r}")
            try:
                vals.append(float(r[k]))
            except ValueError:
                raise GraphValidationError(f"{who} unit {r[0]!r}: non-numeric covariate {names[k]!r}") from None
        out.append(vals)
    return [names[k] for k in keep], out


def load_graph(units_source, edges_source) -> BipartiteGraph:
    """Build a validated graph from a units CSV and an edges CSV.

    units: ``id,side,eligibility,<covariates...>``; edges: ``outcome_id,treatment_id,weight``.
    Either argument may be a path or an iterable of CSV lines.
    """
    header, rows = _read_csv(units_source)
    if header[:3] != ["id", "side", "eligibility"]:
        raise GraphValidationError("units CSV header must start with id,side,eligibility")
    cov_names = header[3:]
    t_rows, o_rows, t_elig = [], [], []
    for r in rows:
        if len(r) != len(header):
            raise GraphValidationError(f"units CSV row {r!r} has {len(r)} fields, expected {len(header)}")
        uid, side, elig = r[0], r[1].lower(), r[2].lower()
        if uid == "":
            raise GraphValidationError("blank unit id")
        if side == "treatment":
            if elig not in ("primary", "secondary"):
                raise GraphValidationError(f"treatment unit {uid!r}: eligibility must be primary or secondary")
            t_rows.append([uid] + r[3:])
            t_elig.append(Eligibility(elig))
        elif side == "outcome":
            if elig != "":
                raise GraphValidationError(f"outcome unit {uid!r}: eligibility must be blank")
            o_rows.append([uid] + r[3:])
        else:
            raise GraphValidationError(f"unit {uid!r}: side must be treatment or outcome, got {r[1]!r}")
    full = ["id"] + cov_names
    t_names, t_vals = _side_covariates(full, t_rows, "treatment") if t_rows else ([], [])
    o_names, o_vals = _side_covariates(full, o_rows, "outcome") if o_rows else ([], [])
    tu = [TreatmentUnit(r[0], e, tuple(zip(t_names, v))) for r, e, v in zip(t_rows, t_elig, t_vals)]
    ou = [OutcomeUnit(r[0], tuple(zip(o_names, v))) for r, v in zip(o_rows, o_vals)]

    eh, erows = _read_csv(edges_source) if edges_source is not None else (["outcome_id", "treatment_id", "weight"], [])
    if eh != ["outcome_id", "treatment_id", "weight"]:
        raise GraphValidationError("edges CSV header must be outcome_id,treatment_id,weight")
    edges = []
    for r in erows:
        if len(r) != 3:
            raise GraphValidationError(f"edges CSV row {r!r} must have 3 fields")
        try:
            w = float(r[2])
        except ValueError:
            raise GraphValidationError(f"edge ({r[0]!r}, {r[1]!r}): non-numeric weight {r[2]!r}") from None
        edges.append(Edge(r[0], r[1], w))
    return BipartiteGraph.from_units(tu, ou, edges)


def write_graph_csv(graph: BipartiteGraph, units_path, edges_path) -> None:
    cov = list(dict.fromkeys(list(graph.treatment_covariate_names) + list(graph.outcome_covariate_names)))
    with open(units_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "side", "eligibility"] + cov)
        for u in graph.treatment_units():
            c = dict(u.covariates)
            w.writerow([u.id, "treatment", u.eligibility.value] + [repr(c[n]) if n in c else "" for n in cov])
        for u in graph.outcome_units():
            c = dict(u.covariates)
            w.writerow([u.id, "outcome", ""] + [repr(c[n]) if n in c else "" for n in cov])
    with open(edges_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["outcome_id", "treatment_id", "weight"])
        for e in graph.edges():
            w.writerow([e.outcome_id, e.treatment_id, repr(e.weight)])


def load_assignment(graph: BipartiteGraph, source) -> AssignmentVector:
    header, rows = _read_csv(source)
    if header != ["treatment_id", "z"]:
        raise AssignmentError("assignment CSV header must be treatment_id,z")
    z: dict[str, int] = {}
    for r in rows:
        if r[0] in z:
            raise AssignmentError(f"duplicate assignment row for {r[0]!r}")
        if r[1] not in ("0", "1"):
            raise AssignmentError(f"assignment for {r[0]!r} must be 0 or 1, got {r[1]!r}")
        z[r[0]] = int(r[1])
    return validate_assignment(graph, z)


def write_assignment_csv(graph: BipartiteGraph, z: AssignmentVector, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["treatment_id", "z"])
        for t, v in zip(graph.treatment_ids, z.z):
            w.writerow([t, int(v)])
