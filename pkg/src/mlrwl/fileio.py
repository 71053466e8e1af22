"""CSV datasets and JSON model files.

Data files have a header ``x1..xp,a1..aK,y[,prob]``.  Model files are JSON
with a ``schema_version``; floats are written with Python's shortest
round-trip repr, so loading reproduces every coefficient bit for bit.
"""
from __future__ import annotations

import hashlib
import io
import json
import re
from typing import Optional, Tuple

import numpy as np

from .core import DecisionFunctionParams, DimensionError, InvalidInputError, TrialDataset, validate_dataset
from .kernels import KernelSpec

__all__ = [
    "SCHEMA_VERSION",
    "DataParseError",
    "blob_sha1",
    "format_float",
    "dataset_to_csv",
    "write_dataset",
    "parse_csv",
    "read_dataset",
    "read_covariates",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
]

SCHEMA_VERSION = 1

_X = re.compile(r"^x(\d+)$")
_A = re.compile(r"^a(\d+)$")


class DataParseError(InvalidInputError):
    """Malformed data file; the message names the offending line."""


def blob_sha1(data: bytes) -> str:
    """Content hash as git computes it for a blob."""
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def format_float(v: float) -> str:
    return repr(float(v))


def dataset_to_csv(dataset: TrialDataset, include_prob: bool = False) -> str:
    if include_prob and dataset.propensity is None:
        raise InvalidInputError("dataset carries no propensities to write")
    cols = [f"x{j + 1}" for j in range(dataset.p)] + [f"a{k + 1}" for k in range(dataset.K)] + ["y"]
    if include_prob:
        cols.append("prob")
    out = io.StringIO()
    out.write(",".join(cols) + "\n")
    for i in range(dataset.n):
        row = [format_float(v) for v in dataset.X[i]]
        row += [str(int(a)) for a in dataset.A[i]]
        row.append(format_float(dataset.Y[i]))
        if include_prob:
            row.append(format_float(dataset.propensity[i]))
        out.write(",".join(row) + "\n")
    return out.getvalue()


def write_dataset(path: str, dataset: TrialDataset, include_prob: bool = False) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(dataset_to_csv(dataset, include_prob))


def _columns(header: list, need_outcome: bool) -> Tuple[list, list, Optional[int], Optional[int]]:
    xs, as_, y, prob = {}, {}, None, None
    for j, name in enumerate(header):
        name = name.strip()
        if (m := _X.match(name)) is not None:
            xs[int(m.group(1))] = j
        elif (m := _A.match(name)) is not None:
            as_[int(m.group(1))] = j
        elif name == "y":
            y = j
        elif name == "prob":
            prob = j
        else:
            raise DataParseError(f"line 1: unknown column {name!r}")
    for label, cols in (("x", xs), ("a", as_)):
        if cols and sorted(cols) != list(range(1, len(cols) + 1)):
            raise DataParseError(f"line 1: {label} columns must be numbered 1..{len(cols)} without gaps")
    if not xs:
        raise DataParseError("line 1: no covariate columns (x1, x2, ...)")
    if need_outcome and (not as_ or y is None):
        raise DataParseError("line 1: header needs treatment columns a1..aK and an outcome column y")
    return [xs[j] for j in sorted(xs)], [as_[k] for k in sorted(as_)], y, prob


def parse_csv(text: str, *, need_outcome: bool = True) -> Tuple[np.ndarray, Optional[np.ndarray], Optional[np.ndarray], Optional[np.ndarray]]:
    """Parse CSV text into ``(X, A, Y, prob)``; absent parts are ``None``."""
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise DataParseError("line 1: missing header")
    header = lines[0].split(",")
    xc, ac, yc, pc = _columns(header, need_outcome)
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise DataParseError(f"line {ln}: expected {len(header)} fields, found {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            bad = next(p for p in parts if not _is_float(p))
            raise DataParseError(f"line {ln}: cannot parse {bad.strip()!r} as a number") from None
        if not np.all(np.isfinite(rows[-1])):
            raise DataParseError(f"line {ln}: non-finite value")
        for k, c in enumerate(ac):
            if rows[-1][c] not in (-1.0, 1.0):
                raise DataParseError(f"line {ln}: treatment a{k + 1} must be -1 or 1, found {parts[c].strip()!r}")
    if not rows:
        raise DataParseError("no data rows")
    M = np.array(rows, dtype=float)
    X = M[:, xc]
    A = M[:, ac].astype(np.int64) if ac else None
    Y = M[:, yc] if yc is not None else None
    prob = M[:, pc] if pc is not None else None
    return X, A, Y, prob


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _decode(raw: bytes) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataParseError(f"file is not UTF-8 ({exc})") from None


def read_dataset(path: str) -> Tuple[TrialDataset, str]:
    """Load and validate a data file; also return its content hash."""
    raw = _read_bytes(path)
    X, A, Y, prob = parse_csv(_decode(raw))
    ds = validate_dataset(TrialDataset(X, A, Y, prob))
    return ds, blob_sha1(raw)


def read_covariates(path: str) -> np.ndarray:
    """Covariate columns of a data file; treatment and outcome columns are optional."""
    X, _, _, _ = parse_csv(_decode(_read_bytes(path)), need_outcome=False)
    return X


# ---------------------------------------------------------------------------
# models


def _floats(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def model_to_dict(params: DecisionFunctionParams, *, config: Optional[dict] = None, data_sha1: Optional[str] = None, report: Optional[dict] = None) -> dict:
    d = {
        "schema_version": SCHEMA_VERSION,
        "kind": params.kind,
        "K": params.K,
        "p": params.p,
        "intercepts": _floats(params.intercepts),
    }
    if params.kind == "linear":
        d["linear_coefs"] = _floats(params.linear_coefs)
    else:
        d["dual_coefs"] = _floats(params.dual_coefs)
        d["train_X"] = _floats(params.train_X)
        d["kernel"] = params.kernel.to_dict()
    d["config"] = config or {}
    d["data_sha1"] = data_sha1
    d["report"] = report or {}
    return d


def model_from_dict(d: dict) -> DecisionFunctionParams:
    try:
        version = int(d["schema_version"])
        if version > SCHEMA_VERSION:
            raise InvalidInputError(f"model schema {version} is newer than supported ({SCHEMA_VERSION})")
        kind = d["kind"]
        b0 = np.array(d["intercepts"], dtype=float)
        if kind == "linear":
            params = DecisionFunctionParams("linear", b0, linear_coefs=np.array(d["linear_coefs"], dtype=float).reshape(len(b0), -1))
        elif kind == "kernel":
            params = DecisionFunctionParams(
                "kernel",
                b0,
                dual_coefs=np.array(d["dual_coefs"], dtype=float).reshape(len(b0), -1),
                kernel=KernelSpec.from_dict(d["kernel"]),
                train_X=np.array(d["train_X"], dtype=float),
            )
        else:
            raise InvalidInputError(f"unknown rule kind {kind!r}")
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, InvalidInputError):
            raise
        raise InvalidInputError(f"malformed model file ({type(exc).__name__}: {exc})") from None
    if params.K != int(d.get("K", params.K)) or params.p != int(d.get("p", params.p)):
        raise DimensionError("model dimensions disagree with its K and p fields")
    return params


def save_model(path: str, params: DecisionFunctionParams, **meta) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(params, **meta), fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")


def load_model(path: str) -> Tuple[DecisionFunctionParams, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"model file is not valid JSON (line {exc.lineno})") from None
    return model_from_dict(d), d
