"""Centerline resampling, projective transforms, and shape metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLine, LengthMismatch, PointAtInfinity

_MIN_LENGTH = 1e-9


def as_centerline(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 2)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise ValueError(f"a centerline needs shape (N>=2, 2), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("centerline coordinates must be finite")
    return pts


def arc_length(points) -> np.ndarray:
    """Cumulative arc length at each vertex, starting at 0."""
    pts = as_centerline(points)
    seg = np.hypot(*np.diff(pts, axis=0).T)
    return np.concatenate([[0.0], np.cumsum(seg)])


def resample(points, m: int) -> np.ndarray:
    """Return ``m`` points at uniform arc-length spacing along the polyline.

    The first and last input points are reproduced exactly.
    """
    if m < 2:
        raise ValueError("m must be >= 2")
    pts = as_centerline(points)
    s = arc_length(pts)
    total = s[-1]
    if total < _MIN_LENGTH:
        raise DegenerateLine(f"total arc length {total:.3g} mm is degenerate")
    targets = total * np.arange(m) / (m - 1)
    idx = np.clip(np.searchsorted(s, targets, side="right") - 1, 0, len(pts) - 2)
    seg_len = s[idx + 1] - s[idx]
    frac = np.where(seg_len > 0, (targets - s[idx]) / np.where(seg_len > 0, seg_len, 1.0), 0.0)
    frac = np.clip(frac, 0.0, 1.0)
    out = pts[idx] + frac[:, None] * (pts[idx + 1] - pts[idx])
    out[0] = pts[0]
    out[-1] = pts[-1]
    return out


class Homography:
    """Planar projective transform with ``matrix[2, 2] == 1``."""

    def __init__(self, matrix):
        H = np.array(matrix, dtype=np.float64).reshape(3, 3)
        if abs(H[2, 2]) < 1e-15:
            raise ValueError("cannot normalise a homography whose bottom-right entry is zero")
        H = H / H[2, 2]
        if abs(np.linalg.det(H)) <= 1e-12:
            raise ValueError("homography must be invertible")
        self.matrix = H

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls([[1, 0, tx], [0, 1, ty], [0, 0, 1]])

    def compose(self, other: "Homography") -> "Homography":
        """``self.compose(other)`` applies ``other`` first, then ``self``."""
        return Homography(self.matrix @ other.matrix)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def __call__(self, points) -> np.ndarray:
        return apply_homography(self, points)

    def __repr__(self):
        return f"Homography({self.matrix.tolist()!r})"


def apply_homography(h: Homography, points) -> np.ndarray:
    pts = as_centerline(points)
    homog = np.column_stack([pts, np.ones(len(pts))]) @ h.matrix.T
    w = homog[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise PointAtInfinity("a point maps to the line at infinity")
    return homog[:, :2] / w[:, None]


@dataclass(frozen=True)
class ShapeError:
    e_mean: float
    e_max: float
    epsilon: float


def shape_error(current, target) -> ShapeError:
    """Root-mean-square and worst point deviation plus the combined error in mm^2."""
    a = as_centerline(current)
    b = as_centerline(target)
    if a.shape != b.shape:
        raise LengthMismatch(f"{len(a)} points vs {len(b)} points")
    d2 = np.sum((a - b) ** 2, axis=1)
    mean_sq = float(np.mean(d2))
    max_sq = float(np.max(d2))
    return ShapeError(np.sqrt(mean_sq), np.sqrt(max_sq), 0.5 * (mean_sq + max_sq))


def turning_curvature(points) -> tuple[np.ndarray, np.ndarray]:
    """Discrete curvature at interior vertices and the arc length each one covers."""
    pts = as_centerline(points)
    if len(pts) < 3:
        raise DegenerateLine("curvature needs at least 3 points")
    edges = np.diff(pts, axis=0)
    lengths = np.hypot(edges[:, 0], edges[:, 1])
    if np.any(lengths < _MIN_LENGTH):
        raise DegenerateLine("consecutive points coincide")
    cross = edges[:-1, 0] * edges[1:, 1] - edges[:-1, 1] * edges[1:, 0]
    dot = np.sum(edges[:-1] * edges[1:], axis=1)
    turn = np.arctan2(cross, dot)
    ds = 0.5 * (lengths[:-1] + lengths[1:])
    return turn / ds, ds


def bending_energy(points) -> float:
    """Arc-length averaged squared curvature, (1/L) sum kappa_i^2 ds_i, in mm^-2."""
    pts = as_centerline(points)
    total = arc_length(pts)[-1]
    if total < _MIN_LENGTH:
        raise DegenerateLine("zero-length centerline")
    kappa, ds = turning_curvature(pts)
    return float(np.sum(kappa ** 2 * ds) / total)
