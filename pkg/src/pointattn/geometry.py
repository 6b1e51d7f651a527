"""Point-set geometry: farthest point sampling, pairwise distances, Chamfer loss.

Clouds are (n, 3) float arrays. Everything here is deterministic: FPS and
the Chamfer nearest-neighbor selections break ties toward the lowest index,
so results are reproducible and permutation behavior is well defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .tensor import Tensor, DimensionError, _accumulate, _grad_buffer, _record, _result


@dataclass(frozen=True)
class FpsResult:
    """Indices selected by farthest point sampling, in selection order."""

    indices: np.ndarray

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)


def _as_points(cloud, name: str) -> np.ndarray:
    pts = np.asarray(cloud, dtype=np.float64) if not isinstance(cloud, np.ndarray) else cloud
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DimensionError(f"{name}: expected an (n, 3) cloud, got shape {pts.shape}")
    if pts.shape[0] < 1:
        raise ValueError(f"{name}: cloud must contain at least one point")
    return pts


def _sq_dist_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs squared Euclidean distances, clamped at 0 against rounding."""
    d = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    np.maximum(d, 0.0, out=d)
    return d


def fps(cloud, k: int, start: int = 0) -> FpsResult:
    """Greedy max-min subset selection of k points.

    Each successive index maximizes the minimum squared distance to the
    already-selected set; ties break toward the lowest unselected index.
    """
    pts = _as_points(cloud, "fps")
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"fps: k={k} must satisfy 1 <= k <= {n}")
    if not 0 <= start < n:
        raise ValueError(f"fps: start={start} out of range for {n} points")
    # min squared distance to the selected set drives the greedy choice;
    # selected entries go negative so ties at zero (duplicate points)
    # still pick a fresh index.
    return FpsResult(indices=_kernels.fps_greedy(pts, int(k), int(start)))


def _indices_of(indices) -> np.ndarray:
    if isinstance(indices, FpsResult):
        return indices.indices
    return np.asarray(indices, dtype=np.int64)


def gather_rows(features: Tensor, indices) -> Tensor:
    """Select rows of a feature matrix; backward scatters into the sources."""
    idx = _indices_of(indices)
    n = features.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"gather_rows: index out of range for {n} rows")
    out = _result(features.data[idx], features)

    def backward(g):
        if features.requires_grad:
            np.add.at(_grad_buffer(features), idx, g)

    _record(out, backward)
    return out


def pairwise_sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """Matrix of squared Euclidean distances between two point sets."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise DimensionError(
            f"pairwise_sq_dist: shapes {a.data.shape} and {b.data.shape} incompatible")
    out = _result(_sq_dist_matrix(a.data, b.data), a, b)

    def backward(g):
        # d(i,j) = |a_i|^2 + |b_j|^2 - 2 a_i.b_j
        if a.requires_grad:
            _accumulate(a, 2.0 * (g.sum(axis=1, keepdims=True) * a.data - g @ b.data))
        if b.requires_grad:
            _accumulate(b, 2.0 * (g.sum(axis=0)[:, None] * b.data - g.T @ a.data))

    _record(out, backward)
    return out


def chamfer(p: Tensor, s: Tensor, variant: str = "l2") -> Tensor:
    """Symmetric Chamfer distance between two clouds, as a scalar tensor.

    Sums the two directional means (no 1/2 factor). "l2" uses squared
    Euclidean distances, "l1" Euclidean. Gradients flow through both
    nearest-neighbor selections; at zero distance the l1 subgradient is 0.
    """
    if variant not in ("l1", "l2"):
        raise ValueError(f"chamfer: unknown variant {variant!r}")
    if p.data.ndim != 2 or p.data.shape[1] != 3 or p.data.shape[0] < 1:
        raise ValueError(f"chamfer: p must be a nonempty (n, 3) cloud, got {p.data.shape}")
    if s.data.ndim != 2 or s.data.shape[1] != 3 or s.data.shape[0] < 1:
        raise ValueError(f"chamfer: s must be a nonempty (m, 3) cloud, got {s.data.shape}")
    n, m = p.data.shape[0], s.data.shape[0]
    near_s, dp = _kernels.nearest(p.data, s.data)   # nearest s for each p
    near_p, ds = _kernels.nearest(s.data, p.data)   # nearest p for each s
    if variant == "l2":
        value = dp.mean() + ds.mean()
    else:
        dp = np.sqrt(dp)
        ds = np.sqrt(ds)
        value = dp.mean() + ds.mean()
    out = _result(np.asarray(value, dtype=p.data.dtype), p, s)

    def backward(g):
        gs = float(g)
        diff_p = p.data - s.data[near_s]           # (n, 3)
        diff_s = s.data - p.data[near_p]           # (m, 3)
        if variant == "l2":
            gp_dir = (2.0 * gs / n) * diff_p
            gs_dir = (2.0 * gs / m) * diff_s
        else:
            with np.errstate(invalid="ignore", divide="ignore"):
                up = np.where(dp[:, None] > 0, diff_p / np.where(dp[:, None] > 0, dp[:, None], 1.0), 0.0)
                us = np.where(ds[:, None] > 0, diff_s / np.where(ds[:, None] > 0, ds[:, None], 1.0), 0.0)
            gp_dir = (gs / n) * up
            gs_dir = (gs / m) * us
        if p.requires_grad:
            buf = _grad_buffer(p)
            buf += gp_dir
            np.add.at(buf, near_p, -gs_dir)
        if s.requires_grad:
            buf = _grad_buffer(s)
            buf += gs_dir
            np.add.at(buf, near_s, -gp_dir)

    _record(out, backward)
    return out
