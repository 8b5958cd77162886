"""Discrete probability measures on R^d and the small set of operations the
rest of the package builds on: moments, deletions, pushforwards and CSV I/O.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

WEIGHT_TOL = 1e-12


class MeasureError(ValueError):
    """Raised on malformed measures or mismatched dimensions."""


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Weighted point cloud ``sum_i w_i delta_{x_i}``.

    Duplicate points are allowed (multisets are measures with repeated atoms).
    Weights are normalized once at construction.
    """

    points: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise MeasureError("points must be a non-empty (n, d) array")
        if self.weights is None:
            w = np.full(pts.shape[0], 1.0 / pts.shape[0])
        else:
            w = np.array(self.weights, dtype=float).reshape(-1)
            if w.shape[0] != pts.shape[0]:
                raise MeasureError(
                    f"{w.shape[0]} weights given for {pts.shape[0]} points")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise MeasureError("weights must be finite and nonnegative")
            total = w.sum()
            if total <= 0:
                raise MeasureError("total mass must be positive")
            if abs(total - 1.0) > WEIGHT_TOL:
                w = w / total
        if not np.all(np.isfinite(pts)):
            raise MeasureError("points must be finite")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        return cls(points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def __len__(self) -> int:
        return self.size

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def subset(self, idx) -> "DiscreteMeasure":
        """Uniform-or-weighted restriction to the atoms ``idx``, renormalized."""
        idx = np.asarray(idx, dtype=int)
        return DiscreteMeasure(self.points[idx], self.weights[idx])


@dataclass(frozen=True, eq=False)
class MomentSummary:
    mean: np.ndarray
    covariance: np.ndarray
    center_override: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class ProjectionFrame:
    """A k x d matrix ``U`` with orthonormal rows (``U U^T = I_k``)."""

    rows: np.ndarray

    def __post_init__(self):
        U = np.atleast_2d(np.array(self.rows, dtype=float))
        k, d = U.shape
        if k > d:
            raise MeasureError(f"frame has k={k} rows but dimension d={d}")
        if not np.allclose(U @ U.T, np.eye(k), atol=1e-10, rtol=0):
            raise MeasureError("frame rows are not orthonormal")
        U.setflags(write=False)
        object.__setattr__(self, "rows", U)

    @property
    def k(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @classmethod
    def from_matrix(cls, M) -> "ProjectionFrame":
        """Orthonormalize the rows of ``M`` (QR) and wrap them."""
        M = np.atleast_2d(np.asarray(M, dtype=float))
        q, r = np.linalg.qr(M.T)
        # Fix signs so the frame is a deterministic function of M.
        s = np.sign(np.diag(r))
        s[s == 0] = 1.0
        return cls((q * s).T)


def moments(m: DiscreteMeasure, center=None) -> MomentSummary:
    """Mean and (optionally re-centered) second moment matrix of ``m``.

    With ``center`` given the covariance is ``E[(X - c)(X - c)^T]``.
    """
    mu = m.mean
    if center is None:
        c = mu
    else:
        c = np.asarray(center, dtype=float).reshape(-1)
        if c.shape[0] != m.dim:
            raise MeasureError(
                f"center has dimension {c.shape[0]}, measure has {m.dim}")
    X = m.points - c
    cov = (X * m.weights[:, None]).T @ X
    cov = 0.5 * (cov + cov.T)
    return MomentSummary(mu, cov, None if center is None else c)


def covariance(m: DiscreteMeasure) -> np.ndarray:
    return moments(m).covariance


def delete_and_renormalize(m: DiscreteMeasure, keep_weights):
    """Keep ``keep_weights[i] <= weights[i]`` of each atom and renormalize.

    Returns ``(Q, eps)`` where ``eps = 1 - kept mass``, so that
    ``Q <= P / (1 - eps)`` atom-wise. Atoms with zero kept mass are dropped.
    """
    keep = np.asarray(keep_weights, dtype=float).reshape(-1)
    if keep.shape[0] != m.size:
        raise MeasureError("keep_weights must have one entry per atom")
    if np.any(keep < 0) or np.any(keep > m.weights * (1 + 1e-12) + 1e-300):
        raise MeasureError("keep_weights must satisfy 0 <= keep <= weights")
    keep = np.minimum(keep, m.weights)
    kept = keep.sum()
    if kept <= 0:
        raise MeasureError("cannot delete all mass")
    nz = keep > 0
    q = DiscreteMeasure(m.points[nz], keep[nz] / kept)
    return q, max(0.0, 1.0 - kept)


def pushforward(m: DiscreteMeasure, U) -> DiscreteMeasure:
    """Image of ``m`` under ``x -> U x`` (weights unchanged)."""
    rows = U.rows if isinstance(U, ProjectionFrame) else np.atleast_2d(U)
    if rows.shape[1] != m.dim:
        raise MeasureError(
            f"frame acts on R^{rows.shape[1]}, measure lives in R^{m.dim}")
    return DiscreteMeasure(m.points @ rows.T, m.weights)


def _atom_masses(m: DiscreteMeasure) -> dict:
    out: dict = {}
    for x, w in zip(map(tuple, m.points), m.weights):
        out[x] = out.get(x, 0.0) + w
    return out


def tv_distance(a: DiscreteMeasure, b: DiscreteMeasure) -> float:
    """Total variation ``0.5 * sum |a(x) - b(x)|`` over the union of atoms.

    Atoms are identified by exact coordinate equality.
    """
    if a.dim != b.dim:
        raise MeasureError("dimension mismatch")
    ma, mb = _atom_masses(a), _atom_masses(b)
    keys = set(ma) | set(mb)
    return 0.5 * float(sum(abs(ma.get(x, 0.0) - mb.get(x, 0.0)) for x in keys))


# --------------------------------------------------------------------- CSV I/O


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_csv(m: DiscreteMeasure, path, with_weights: bool = True) -> None:
    """Write ``w,x1,...,xd`` rows with 17 significant digits."""
    header = (["w"] if with_weights else []) + [f"x{j + 1}" for j in range(m.dim)]
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for w, x in zip(m.weights, m.points):
        row = ([_fmt(w)] if with_weights else []) + [_fmt(v) for v in x]
        buf.write(",".join(row) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path) -> DiscreteMeasure:
    """Parse a dataset CSV; the ``w`` column is optional (uniform if absent)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MeasureError(f"{path}: empty file") from None
        has_w = bool(header) and header[0] == "w"
        xcols = header[1:] if has_w else header
        if not xcols or any(not h.startswith("x") for h in xcols):
            raise MeasureError(f"{path}:1: expected header 'w,x1,...,xd'")
        rows, weights = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise MeasureError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise MeasureError(f"{path}:{lineno}: {exc}") from None
            if has_w:
                weights.append(vals[0])
                rows.append(vals[1:])
            else:
                rows.append(vals)
    if not rows:
        raise MeasureError(f"{path}: no data rows")
    return DiscreteMeasure(np.array(rows), np.array(weights) if has_w else None)
