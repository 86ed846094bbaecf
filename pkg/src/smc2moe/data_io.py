"""Synthetic benchmark generators, normalization and CSV input/output."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .errors import DataFormatError, DegenerateDataError

GENERATORS = ("synth1", "synth2")


@dataclass(frozen=True)
class NormalizationRecord:
    """Affine maps x' = (x - x_min) / x_range and y' = (y - y_shift) / y_scale."""

    x_min: tuple
    x_range: tuple
    y_shift: float
    y_scale: float

    def apply_x(self, X):
        return (np.asarray(X, dtype=float) - np.array(self.x_min)) / np.array(self.x_range)

    def invert_x(self, Xn):
        return np.asarray(Xn, dtype=float) * np.array(self.x_range) + np.array(self.x_min)

    def apply_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_shift) / self.y_scale

    def invert_y(self, yn):
        return np.asarray(yn, dtype=float) * self.y_scale + self.y_shift

    def to_dict(self) -> dict:
        return {"x_min": list(self.x_min), "x_range": list(self.x_range),
                "y_shift": self.y_shift, "y_scale": self.y_scale}

    @classmethod
    def from_dict(cls, d) -> "NormalizationRecord":
        return cls(tuple(float(v) for v in d["x_min"]), tuple(float(v) for v in d["x_range"]),
                   float(d["y_shift"]), float(d["y_scale"]))

    @classmethod
    def identity(cls, D: int) -> "NormalizationRecord":
        return cls((0.0,) * D, (1.0,) * D, 0.0, 1.0)


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    normalization: NormalizationRecord | None = None
    provenance: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        X = X.reshape(Y.shape[0], -1) if X.ndim != 2 else X
        if X.shape[0] != Y.shape[0]:
            raise ValueError("X and Y have different numbers of rows")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def N(self) -> int:
        return self.Y.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]


# ---------------------------------------------------------------------------
# synthetic generators
# ---------------------------------------------------------------------------


def f_synth1(x):
    x = np.asarray(x, dtype=float)
    return np.sin(np.pi * x) * np.cos((np.pi * x) ** 3)


def noise_sd_synth1(x):
    return np.full(np.shape(x), 0.15)


def f_synth2(x):
    x = np.asarray(x, dtype=float)
    return np.where(x <= 0.3, np.sin(60 * x) - 2, np.where(x <= 0.5, 10.0, np.sin(4 * np.pi * x) - 10))


def noise_sd_synth2(x):
    x = np.asarray(x, dtype=float)
    return np.where(x <= 0.3, 0.05, np.where(x <= 0.5, 0.025, 0.10))


TRUTH = {"synth1": (f_synth1, noise_sd_synth1), "synth2": (f_synth2, noise_sd_synth2)}


def _generate(tag: str, N: int, seed: int) -> Dataset:
    if N < 1:
        raise ValueError("N must be at least 1")
    f, sd = TRUTH[tag]
    g = rngmod.stream(seed, rngmod.GENERATE)
    x = g.uniform(0.0, 1.0, size=N)
    y = f(x) + sd(x) * g.standard_normal(N)
    return Dataset(x.reshape(N, 1), y, None, f"{tag} N={N} seed={seed}", {"generator": tag, "N": N, "seed": seed})


def gen_synth1(N: int = 300, seed: int = 0) -> Dataset:
    """Smooth curve with homoskedastic noise (sd 0.15), x ~ U(0, 1)."""
    return _generate("synth1", N, seed)


def gen_synth2(N: int = 300, seed: int = 0) -> Dataset:
    """Discontinuous three-region curve with region-wise noise sds 0.05, 0.025, 0.10."""
    return _generate("synth2", N, seed)


def generate(tag: str, N: int, seed: int) -> Dataset:
    if tag not in TRUTH:
        raise ValueError(f"unknown generator {tag!r}; expected one of {GENERATORS}")
    return _generate(tag, N, seed)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def normalize(ds: Dataset) -> tuple[Dataset, NormalizationRecord]:
    """Map inputs to [0, 1] per dimension and outputs to min 0, sample variance 1."""
    if ds.N < 2:
        raise DegenerateDataError("normalization needs at least two rows")
    x_min = ds.X.min(axis=0)
    x_range = ds.X.max(axis=0) - x_min
    if np.any(x_range <= 0):
        raise DegenerateDataError("an input column is constant")
    y_scale = float(np.std(ds.Y, ddof=1))
    if not y_scale > 0:
        raise DegenerateDataError("outputs are constant")
    rec = NormalizationRecord(tuple(x_min.tolist()), tuple(x_range.tolist()), float(ds.Y.min()), y_scale)
    out = Dataset(rec.apply_x(ds.X), rec.apply_y(ds.Y), rec, ds.provenance, dict(ds.meta))
    return out, rec


def denormalize(ds: Dataset, rec: NormalizationRecord) -> Dataset:
    return Dataset(rec.invert_x(ds.X), rec.invert_y(ds.Y), None, ds.provenance, dict(ds.meta))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def fmt(v: float) -> str:
    """17 significant digits: round-trips every double."""
    return format(float(v), ".17g")


def load_csv(path, D: int) -> Dataset:
    """Read a header row followed by D input columns and one output column.

    Blank lines and lines starting with ``#`` are skipped.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    rows, bad = [], []
    header = None
    with path.open(newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = next(csv.reader([line]))
            if header is None:
                header = fields
                if len(header) != D + 1:
                    raise DataFormatError(f"{path}: header has {len(header)} columns, expected {D + 1}")
                continue
            if len(fields) != D + 1:
                bad.append(f"row {lineno}: expected {D + 1} columns, got {len(fields)}")
                continue
            try:
                vals = [float(v) for v in fields]
            except ValueError:
                bad.append(f"row {lineno}: non-numeric field")
                continue
            if not all(math.isfinite(v) for v in vals):
                bad.append(f"row {lineno}: non-finite value")
                continue
            rows.append(vals)
    if header is None:
        raise DataFormatError(f"{path}: missing header row")
    if bad:
        raise DataFormatError(f"{path}: malformed rows: " + "; ".join(bad))
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    arr = np.array(rows)
    return Dataset(arr[:, :D], arr[:, D], None, f"csv {path.name}", {"source": str(path), "columns": header})


def write_csv(ds: Dataset, path, provenance: str | None = None):
    path = Path(path)
    cols = ["x"] if ds.D == 1 else [f"x{d + 1}" for d in range(ds.D)]
    with path.open("w", newline="") as fh:
        fh.write(f"# {provenance or ds.provenance}\n")
        fh.write(",".join(cols + ["y"]) + "\n")
        for x, y in zip(ds.X, ds.Y):
            fh.write(",".join([fmt(v) for v in x] + [fmt(y)]) + "\n")


def write_normalization(rec: NormalizationRecord, path, extra: dict | None = None):
    payload = {"normalization": rec.to_dict()}
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_normalization(path) -> tuple[NormalizationRecord, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"normalization record {path} does not exist")
    payload = json.loads(path.read_text())
    return NormalizationRecord.from_dict(payload["normalization"]), payload
