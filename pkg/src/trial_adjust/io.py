"""CSV ingestion and report serialisation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import MissingData, NonNumeric, SchemaError
from .glm import TrialData

__all__ = ["Bindings", "read_trial_csv", "write_report", "report_to_csv", "MISSING_TOKENS"]

MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none", "."})


@dataclass(frozen=True)
class Bindings:
    """Column names for the outcome, arm and covariates.

    ``covariates=None`` uses every remaining column. ``categorical`` forces
    the named covariates to be treated as factors even if they look numeric.
    """

    outcome: str
    arm: str
    covariates: Optional[tuple] = None
    categorical: tuple = ()


def _is_missing(text: str) -> bool:
    return text.strip().lower() in MISSING_TOKENS


def _as_float(text: str):
    try:
        val = float(text)
    except ValueError:
        return None
    return val if math.isfinite(val) else None


def read_trial_csv(path, bindings: Bindings, family: str = "logit") -> TrialData:
    """Load a trial from a UTF-8 CSV with a header row.

    Numeric covariates are used as they are. Non-numeric (or explicitly
    categorical) covariates are expanded into indicator columns, with the
    lexicographically first level as the reference. Arm labels are numbered
    ``1..k`` in order of first appearance; the labels are kept on the
    returned :class:`TrialData` as ``arm_labels``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = [r for r in reader if any(cell.strip() for cell in r)]
    if len(set(header)) != len(header):
        raise SchemaError(f"{path}: duplicate column names")
    index = {name: j for j, name in enumerate(header)}

    covs = bindings.covariates
    if covs is None:
        covs = tuple(h for h in header if h not in (bindings.outcome, bindings.arm))
    for name in (bindings.outcome, bindings.arm, *covs):
        if name not in index:
            raise SchemaError(f"{path}: no column named {name!r}")
    for name in bindings.categorical:
        if name not in covs:
            raise SchemaError(f"categorical column {name!r} is not a bound covariate")
    if not rows:
        raise SchemaError(f"{path}: no data rows")

    def column(name):
        j = index[name]
        vals = []
        for lineno, r in enumerate(rows, start=2):
            if j >= len(r) or _is_missing(r[j]):
                raise MissingData(f"{path}: missing value in column {name!r} (row {lineno})")
            vals.append(r[j].strip())
        return vals

    y_raw = column(bindings.outcome)
    y = []
    for v in y_raw:
        f = _as_float(v)
        if f is None:
            raise NonNumeric(f"outcome column {bindings.outcome!r} has non-numeric value {v!r}")
        y.append(f)
    y = np.array(y)
    if family == "logit" and not np.all((y == 0) | (y == 1)):
        raise SchemaError(f"outcome column {bindings.outcome!r} must be 0/1 for the logit family")
    if family == "poisson" and (np.any(y < 0) or np.any(y != np.round(y))):
        raise SchemaError(f"outcome column {bindings.outcome!r} must hold non-negative counts")

    arm_raw = column(bindings.arm)
    labels = list(dict.fromkeys(arm_raw))
    if len(labels) < 2:
        raise SchemaError(f"arm column {bindings.arm!r} needs at least two levels")
    code = {lab: i + 1 for i, lab in enumerate(labels)}
    arm = np.array([code[v] for v in arm_raw])

    blocks = []
    names = []
    for name in covs:
        raw = column(name)
        nums = [_as_float(v) for v in raw]
        if name not in bindings.categorical and all(v is not None for v in nums):
            blocks.append(np.array(nums)[:, None])
            names.append(name)
            continue
        levels = sorted(set(raw))
        for lev in levels[1:]:
            blocks.append(np.array([1.0 if v == lev else 0.0 for v in raw])[:, None])
            names.append(f"{name}[{lev}]")
    w = np.hstack(blocks) if blocks else np.empty((len(rows), 0))
    return TrialData(y=y, arm=arm, w=w, k=len(labels), covariate_names=tuple(names),
                     arm_labels=tuple(labels))


# ---------------------------------------------------------------------------
# reports

# report fields holding proportions or risk differences; the CSV projection
# shows them multiplied by 100
_PERCENT_FIELDS = ("relative_efficiency",)
_DIFF_FIELDS = ("estimate", "se", "ci_lower", "ci_upper")

CSV_COLUMNS = (
    "estimator", "variance", "test", "contrast", "estimate", "se", "ci_lower",
    "ci_upper", "z", "p_value", "relative_efficiency", "status",
)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def report_to_json(report: dict) -> str:
    return json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n"


def _scaled(row, scale_diff):
    out = {}
    for col in CSV_COLUMNS:
        val = row.get(col)
        if isinstance(val, float) and math.isfinite(val):
            if col in _PERCENT_FIELDS or (scale_diff and col in _DIFF_FIELDS):
                val = 100.0 * val
            val = repr(val)
        elif val is None or (isinstance(val, float) and not math.isfinite(val)):
            val = ""
        out[col] = val
    return out


def report_to_csv(report: dict) -> str:
    """Flat projection: one line per analysis row plus the unadjusted row.

    Risk differences, their standard errors and interval bounds and the
    relative efficiency are shown in percent; everything else is unscaled.
    """
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(CSV_COLUMNS), lineterminator="\n")
    writer.writeheader()
    for row in [report["unadjusted"], *report["rows"]]:
        writer.writerow(_scaled(row, row.get("contrast") == "difference"))
    return buf.getvalue()


def write_report(report: dict, path, fmt: Optional[str] = None) -> Path:
    """Write ``report`` as JSON (canonical) or CSV; the format defaults to the suffix."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".") or "json").lower()
    if fmt == "json":
        text = report_to_json(report)
    elif fmt == "csv":
        text = report_to_csv(report)
    else:
        raise ValueError(f"unsupported report format {fmt!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def rows_to_csv(rows: Sequence[dict], path) -> Path:
    """Write a list of flat dicts (e.g. simulation cells) as CSV."""
    path = Path(path)
    if not rows:
        path.write_text("", encoding="utf-8")
        return path
    cols = list(rows[0].keys())
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path
