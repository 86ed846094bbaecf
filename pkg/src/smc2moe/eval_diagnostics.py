"""Density distances to ground truth, posterior similarity and expert counts."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_io import TRUTH, NormalizationRecord
from .predictive import grid_density


@dataclass
class GroundTruthDensity:
    density: np.ndarray  # G x Ny, in normalized units
    median: np.ndarray  # G


def ground_truth_density(tag: str, x_grid, y_grid, rec: NormalizationRecord) -> GroundTruthDensity:
    """Generating law N(f(x), σ(x)²) evaluated on a normalized grid.

    Grid inputs are mapped back to raw units to evaluate f and σ, and the
    density is rescaled by the output scale so it integrates to one in
    normalized units.  It goes through the same grid representation as the
    predictive (cell averages for Gaussians narrower than two y* spacings),
    so the two are compared like for like.
    """
    if tag not in TRUTH:
        raise ValueError(f"unknown generator {tag!r}")
    f, sd = TRUTH[tag]
    Xg = np.asarray(x_grid, dtype=float)
    Xg = Xg.reshape(-1, 1) if Xg.ndim == 1 else Xg
    if Xg.shape[1] != 1:
        raise ValueError("synthetic generators are one-dimensional")
    x_raw = rec.invert_x(Xg)[:, 0]
    loc = rec.apply_y(f(x_raw))
    scale = sd(x_raw) / rec.y_scale
    y = np.asarray(y_grid, dtype=float)
    if y.ndim != 1 or y.size < 2 or np.any(np.diff(y) <= 0):
        raise ValueError("y_grid must be strictly increasing with at least two points")
    dens = grid_density(np.zeros((1, loc.size)), loc[None], (scale * scale)[None], y)
    return GroundTruthDensity(dens, loc)


def density_distance(a, b) -> tuple[float, float]:
    """Unweighted L1 and L2 vector norms of a - b over all grid cells."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch: {a.shape} vs {b.shape}")
    d = (a - b).ravel()
    return float(np.sum(np.abs(d))), float(np.sqrt(np.sum(d * d)))


def median_distance(est, truth) -> float:
    est = np.asarray(est, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if est.shape != truth.shape:
        raise ValueError("median vectors have different lengths")
    return float(np.sum(np.abs(est - truth)))


def _labels_and_weights(sample):
    w = np.asarray(sample.weights, dtype=float)
    L = np.array([p.labels for p in sample.particles], dtype=np.int64)
    return L, w / w.sum()


def psm(sample) -> np.ndarray:
    """Posterior similarity: entry (i, i') = Σ_j w_j 1[c_ji = c_ji']."""
    L, w = _labels_and_weights(sample)
    N = L.shape[1]
    out = np.zeros((N, N))
    for wj, lab in zip(w, L):
        if wj == 0:
            continue
        out += wj * (lab[:, None] == lab[None, :])
    out = np.clip(0.5 * (out + out.T), 0.0, 1.0)
    np.fill_diagonal(out, 1.0)
    return out


def expert_count_posterior(sample, K: int) -> np.ndarray:
    """Weighted histogram of non-empty expert counts; entry i is P(count = i + 1)."""
    L, w = _labels_and_weights(sample)
    hist = np.zeros(K)
    for wj, lab in zip(w, L):
        hist[len(np.unique(lab)) - 1 if lab.size else 0] += wj
    return hist / hist.sum()


def mean_expert_count(sample, K: int) -> float:
    h = expert_count_posterior(sample, K)
    return float(np.dot(np.arange(1, K + 1), h))


def write_matrix_csv(M, path, fmt=lambda v: format(float(v), ".17g")):
    M = np.atleast_2d(M)
    with Path(path).open("w", newline="") as fh:
        fh.write(",".join(f"c{i}" for i in range(M.shape[1])) + "\n")
        for row in M:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def write_histogram_csv(hist, path, fmt=lambda v: format(float(v), ".17g")):
    with Path(path).open("w", newline="") as fh:
        fh.write("n_experts,probability\n")
        for i, p in enumerate(hist):
            fh.write(f"{i + 1},{fmt(p)}\n")


def write_distances_csv(run_id: str, l1: float, l2: float, med: float | None, path,
                        fmt=lambda v: format(float(v), ".17g")):
    with Path(path).open("w", newline="") as fh:
        fh.write("run_id,l1,l2,median_l1\n")
        fh.write(f"{run_id},{fmt(l1)},{fmt(l2)},{'' if med is None else fmt(med)}\n")
