"""Median tables, boxplot summaries and the run manifest.

Everything here is computed from replication CSVs, so a report can be rebuilt
from the simulation outputs alone.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import platform
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ReportError

SCHEMA_VERSION = 1
RECORD_COLUMNS = ("replicate", "estimand", "level", "method", "estimate", "ci_lo", "ci_hi", "ground_truth")

# (column title, estimand, level, method); method None means the ground-truth column
PTTE_COLUMNS = (
    ("GT", "PTTE", "outcome", None),
    ("Basic", "PTTE", "outcome", "basic"),
    ("LP", "PTTE", "outcome", "lp"),
    ("KRR", "PTTE", "outcome", "krr"),
    ("GBT", "PTTE", "outcome", "gbt"),
    ("Projected", "PTTE", "outcome", "proj_krr"),
)
STTE_OUTCOME_COLUMNS = (
    ("GT", "STTE", "outcome", None),
    ("LP", "STTE", "outcome", "lp"),
    ("KRR", "STTE", "outcome", "krr"),
    ("GBT", "STTE", "outcome", "gbt"),
    ("Projected", "STTE", "outcome", "proj_krr"),
)
STTE_TREATMENT_COLUMNS = (
    ("GT", "STTE", "treatment", None),
    ("LP", "STTE", "treatment", "lp"),
    ("KRR", "STTE", "treatment", "krr"),
    ("GBT", "STTE", "treatment", "gbt"),
)


# -- file helpers ------------------------------------------------------------------------


def atomic_write_text(path, text: str) -> None:
    """Write UTF-8 text via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def full(x: float) -> str:
    return "" if x is None or math.isnan(x) else repr(float(x))


def two_dp(x: float) -> str:
    if x is None or math.isnan(x):
        return "-"
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


def versions() -> dict:
    import scipy
    import sklearn

    from . import __version__

    return {
        "blift": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "python": platform.python_version(),
    }


# -- records ----------------------------------------------------------------------------


@dataclass(frozen=True)
class RecordSet:
    """Parsed replication CSV for one specification."""

    spec_id: int
    mean_primary_degree: float
    treatment_probability: float
    schema_version: int
    rows: tuple[dict, ...]

    def values(self, estimand: str, level: str, method: str | None) -> np.ndarray:
        if method is None:
            # one ground-truth value per replicate
            seen = {}
            for r in self.rows:
                if r["estimand"] == estimand and r["level"] == level and not math.isnan(r["ground_truth"]):
                    seen.setdefault(r["replicate"], r["ground_truth"])
            return np.array([seen[k] for k in sorted(seen)])
        return np.array([
            r["estimate"] for r in self.rows
            if r["estimand"] == estimand and r["level"] == level and r["method"] == method
            and not math.isnan(r["estimate"])
        ])

    def groups(self) -> list[tuple[str, str, str]]:
        return sorted({(r["estimand"], r["level"], r["method"]) for r in self.rows})


def _num(s: str) -> float:
    return float(s) if s != "" else math.nan


def parse_records(text: str) -> list[dict]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != RECORD_COLUMNS:
        raise ReportError(f"replication CSV header {header} does not match {list(RECORD_COLUMNS)}")
    rows = []
    for line in reader:
        if not line:
            continue
        rows.append({
            "replicate": int(line[0]), "estimand": line[1], "level": line[2], "method": line[3],
            "estimate": _num(line[4]), "ci_lo": _num(line[5]), "ci_hi": _num(line[6]),
            "ground_truth": _num(line[7]),
        })
    return rows


def load_record_set(run_dir) -> RecordSet:
    run_dir = Path(run_dir)
    meta_path = run_dir / "run.json"
    csv_path = run_dir / "replications.csv"
    if not meta_path.exists() or not csv_path.exists():
        raise ReportError(f"{run_dir} is not a simulation output (needs run.json and replications.csv)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    sc = meta["scenario"]
    return RecordSet(
        int(sc["spec_id"]), float(sc["mean_primary_degree"]), float(sc["treatment_probability"]),
        int(meta.get("schema_version", -1)), tuple(parse_records(csv_path.read_text(encoding="utf-8"))),
    )


# -- summaries ---------------------------------------------------------------------------


def median_or_nan(v: np.ndarray) -> float:
    return float(np.median(v)) if v.size else math.nan


def boxplot_stats(v: Sequence[float]) -> dict:
    """Tukey summary: quartiles, whiskers at the most extreme points within 1.5 IQR, outliers."""
    v = np.sort(np.asarray(v, dtype=float))
    if v.size == 0:
        raise ReportError("boxplot of an empty sample")
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return {
        "n": int(v.size),
        "min": float(v[0]),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "max": float(v[-1]),
        "whisker_lo": float(inside[0]),
        "whisker_hi": float(inside[-1]),
        "outliers": [float(x) for x in v[(v < lo_fence) | (v > hi_fence)]],
    }


@dataclass(frozen=True)
class MedianTable:
    name: str
    columns: tuple[str, ...]
    rows: tuple[tuple[int, float, float, tuple[float, ...]], ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["spec", "mean_primary_degree", "treatment_probability", *self.columns])
        for spec, deg, p, vals in self.rows:
            w.writerow([spec, repr(deg), repr(p), *[full(x) for x in vals]])
        return buf.getvalue()

    def to_markdown(self) -> str:
        head = ["Spec", "Degree", "p", *self.columns]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        for spec, deg, p, vals in self.rows:
            lines.append("| " + " | ".join([str(spec), f"{deg:g}", f"{p:g}", *[two_dp(x) for x in vals]]) + " |")
        return "\n".join(lines) + "\n"


def median_table(name: str, sets: Sequence[RecordSet], spec_columns) -> MedianTable:
    present = [c for c in spec_columns if c[3] is None or any(s.values(c[1], c[2], c[3]).size for s in sets)]
    rows = []
    for s in sets:
        rows.append((s.spec_id, s.mean_primary_degree, s.treatment_probability,
                     tuple(median_or_nan(s.values(e, lv, m)) for _, e, lv, m in present)))
    return MedianTable(name, tuple(c[0] for c in present), tuple(rows))


@dataclass(frozen=True)
class ReportBundle:
    ptte: MedianTable
    stte_outcome: MedianTable
    stte_treatment: MedianTable
    boxplots: tuple[dict, ...]
    manifest: dict

    def files(self) -> dict[str, str]:
        out = {}
        for t in (self.ptte, self.stte_outcome, self.stte_treatment):
            out[f"{t.name}.csv"] = t.to_csv()
            out[f"{t.name}.md"] = t.to_markdown()
        out["boxplot.json"] = canonical_json(list(self.boxplots))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["spec", "estimand", "level", "method", "n", "min", "q1", "median", "q3", "max",
                    "whisker_lo", "whisker_hi", "n_outliers"])
        for b in self.boxplots:
            w.writerow([b["spec"], b["estimand"], b["level"], b["method"], b["n"], full(b["min"]), full(b["q1"]),
                        full(b["median"]), full(b["q3"]), full(b["max"]), full(b["whisker_lo"]),
                        full(b["whisker_hi"]), len(b["outliers"])])
        out["boxplot.csv"] = buf.getvalue()
        manifest = dict(self.manifest)
        manifest["files"] = {k: sha256_text(v) for k, v in sorted(out.items())}
        out["manifest.json"] = canonical_json(manifest)
        return out

    def write(self, out_dir) -> list[Path]:
        paths = []
        for name, text in self.files().items():
            p = Path(out_dir) / name
            atomic_write_text(p, text)
            paths.append(p)
        return paths


def emit_report(sets: Iterable[RecordSet], manifest: Mapping | None = None) -> ReportBundle:
    """Median tables (one row per specification) and boxplot summaries."""
    sets = sorted(sets, key=lambda s: s.spec_id)
    if not sets:
        raise ReportError("no replication records to report")
    schemas = {s.schema_version for s in sets}
    if len(schemas) > 1 or schemas != {SCHEMA_VERSION}:
        raise ReportError(f"incompatible record schema versions {sorted(schemas)}; expected {SCHEMA_VERSION}")
    ids = [s.spec_id for s in sets]
    if len(set(ids)) != len(ids):
        raise ReportError(f"duplicate specification ids {ids}")
    boxes = []
    for s in sets:
        for est, lv in sorted({(e, l) for e, l, _ in s.groups()}):
            gt = s.values(est, lv, None)
            if gt.size:
                boxes.append({"spec": s.spec_id, "estimand": est, "level": lv, "method": "gt", **boxplot_stats(gt)})
        for est, lv, m in s.groups():
            v = s.values(est, lv, m)
            if v.size:
                boxes.append({"spec": s.spec_id, "estimand": est, "level": lv, "method": m, **boxplot_stats(v)})
    man = {
        "schema_version": SCHEMA_VERSION,
        "specs": ids,
        "records": {str(s.spec_id): len(s.rows) for s in sets},
        "versions": versions(),
    }
    man.update(dict(manifest or {}))
    return ReportBundle(
        median_table("ptte_outcome", sets, PTTE_COLUMNS),
        median_table("stte_outcome", sets, STTE_OUTCOME_COLUMNS),
        median_table("stte_treatment", sets, STTE_TREATMENT_COLUMNS),
        tuple(boxes),
        man,
    )
