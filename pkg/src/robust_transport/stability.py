"""Resilience and stability oracles for discrete measures.

All suprema range over deletions ``Q <= P / (1 - eps)``. In one dimension the
mean supremum is attained by deleting ``eps`` mass from one tail, which gives
exact values. In higher dimension the searches return lower bounds
(falsification only), except for the exhaustive mode on tiny instances.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .measures import DiscreteMeasure, MeasureError
from .seeding import as_rng

EXHAUSTIVE_MAX_N = 12


class StabilityError(ValueError):
    pass


@dataclass(frozen=True)
class StabilityParams:
    eps: float
    delta: float
    lam: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise StabilityError("eps must lie in (0, 1)")
        if self.delta < self.eps:
            raise StabilityError("delta must be at least eps")
        if self.lam is not None and self.lam < 0:
            raise StabilityError("lam must be nonnegative")

    @property
    def cov_bound(self) -> float:
        return self.delta**2 / self.eps


@dataclass(frozen=True)
class SearchConfig:
    """``mode`` is ``auto`` (exhaustive when ``n <= 12``), ``exhaustive`` or
    ``heuristic``."""

    mode: str = "auto"
    directions: int = 64
    ascent_steps: int = 100
    seed: int = 0


@dataclass(frozen=True, eq=False)
class StabilityWitness:
    """A deletion ``Q`` (given by kept per-atom mass) breaking stability."""

    keep_weights: np.ndarray
    mean_shift: float
    cov_deviation: float
    violated: str
    direction: Optional[np.ndarray] = None

    def measure(self, p: DiscreteMeasure) -> DiscreteMeasure:
        nz = self.keep_weights > 0
        return DiscreteMeasure(p.points[nz], self.keep_weights[nz])


def _check_eps(eps: float) -> None:
    if not 0.0 < eps < 1.0:
        raise StabilityError(f"eps must lie in (0, 1), got {eps}")


# ------------------------------------------------------------ 1-D resilience


def _tail_removal(w_sorted: np.ndarray, eps: float) -> np.ndarray:
    """Mass removed from each atom when deleting ``eps`` from the front."""
    before = np.concatenate(([0.0], np.cumsum(w_sorted)[:-1]))
    return np.clip(eps - before, 0.0, w_sorted)


def _tail_shifts(x: np.ndarray, w: np.ndarray, eps: float):
    """Mean shifts (lower-tail deletion, upper-tail deletion) and their removals."""
    order = np.argsort(x, kind="stable")
    xs, ws = x[order], w[order]
    c = xs - ws @ xs
    lo = _tail_removal(ws, eps)
    hi = _tail_removal(ws[::-1], eps)[::-1]
    # mu_Q - mu_P = -sum_i r_i (x_i - mu_P) / (1 - eps)
    s_lo = -float(lo @ c) / (1.0 - eps)
    s_hi = float(hi @ c) / (1.0 - eps)
    return order, (s_lo, lo), (s_hi, hi)


def mean_resilience_1d(p: DiscreteMeasure, eps: float) -> float:
    """Exact ``sup_{Q <= P/(1-eps)} |mu_Q - mu_P|`` for a measure on the line."""
    _check_eps(eps)
    if p.dim != 1:
        raise MeasureError("mean_resilience_1d needs a one-dimensional measure")
    _, (s_lo, _), (s_hi, _) = _tail_shifts(p.points[:, 0], p.weights, eps)
    return max(s_lo, s_hi, 0.0)


def _best_tail_keep(x: np.ndarray, w: np.ndarray, eps: float) -> np.ndarray:
    order, (s_lo, lo), (s_hi, hi) = _tail_shifts(x, w, eps)
    removed = lo if s_lo >= s_hi else hi
    keep = np.empty_like(w)
    keep[order] = w[order] - removed
    return keep


def _shift_of(p: DiscreteMeasure, keep: np.ndarray) -> np.ndarray:
    return keep @ p.points / keep.sum() - p.mean


def mean_resilience(p: DiscreteMeasure, eps: float, direction_budget: int = 64,
                    ascent_steps: int = 100, seed=0) -> float:
    """Lower bound on ``tau(P, eps)``; exact when ``P`` is one-dimensional.

    Each sampled direction ``v`` gives the best 1-D tail deletion along
    ``v``; the deletion is then refined by alternating ``v <- mu_Q - mu_P``.
    The reported value is ``||mu_Q - mu_P||`` of the best deletion found.
    """
    _check_eps(eps)
    if p.dim == 1:
        return mean_resilience_1d(p, eps)
    return _search_mean(p, eps, direction_budget, ascent_steps, seed)[0]


def _search_mean(p, eps, direction_budget, ascent_steps, seed):
    rng = as_rng(seed)
    dirs = rng.standard_normal((max(direction_budget, 1), p.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    best_val, best_keep, best_v = -1.0, None, None
    scored = []
    for v in dirs:
        keep = _best_tail_keep(p.points @ v, p.weights, eps)
        val = float(np.linalg.norm(_shift_of(p, keep)))
        scored.append((val, keep))
        if val > best_val:
            best_val, best_keep, best_v = val, keep, v
    # Refine from the strongest few starts.
    scored.sort(key=lambda t: -t[0])
    for _, keep in scored[:8]:
        for _ in range(ascent_steps):
            shift = _shift_of(p, keep)
            nrm = np.linalg.norm(shift)
            if nrm == 0:
                break
            v = shift / nrm
            new_keep = _best_tail_keep(p.points @ v, p.weights, eps)
            new_val = float(np.linalg.norm(_shift_of(p, new_keep)))
            if new_val <= nrm * (1 + 1e-14):
                break
            keep = new_keep
            if new_val > best_val:
                best_val, best_keep, best_v = new_val, new_keep, v
    return best_val, best_keep, best_v


def pth_order_resilience(p: DiscreteMeasure, eps: float, order: int) -> float:
    """``tau_p(P, eps)``: 1-D resilience of the law of ``||Z - mu_P||^p``."""
    _check_eps(eps)
    if order not in (1, 2):
        raise StabilityError("order must be 1 or 2")
    r = np.linalg.norm(p.points - p.mean, axis=1) ** order
    return mean_resilience_1d(DiscreteMeasure(r, p.weights), eps)


# ------------------------------------------------------- stability searches


def _cov(points: np.ndarray, w: np.ndarray, center: np.ndarray) -> np.ndarray:
    X = points - center
    return (X * w[:, None]).T @ X


def _deviation(p: DiscreteMeasure, keep: np.ndarray):
    q = keep / keep.sum()
    mu_q = q @ p.points
    shift = float(np.linalg.norm(mu_q - p.mean))
    diff = _cov(p.points, q, mu_q) - _cov(p.points, p.weights, p.mean)
    dev = float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (diff + diff.T)))))
    return shift, dev


def vertex_deletions(w: np.ndarray, eps: float, tol: float = 1e-12):
    """Kept-mass vectors at the vertices of ``{Q <= P/(1-eps)}``: whole atoms
    deleted plus at most one partially deleted atom, ``eps`` mass in total."""
    n = len(w)
    for r in range(n + 1):
        for D in itertools.combinations(range(n), r):
            md = float(w[list(D)].sum())
            if md > eps + tol:
                continue
            keep = w.copy()
            keep[list(D)] = 0.0
            rem = eps - md
            if rem <= tol:
                yield keep
                continue
            for j in range(n):
                if j not in D and w[j] > rem + tol:
                    k2 = keep.copy()
                    k2[j] -= rem
                    yield k2


def stability_parameter(p: DiscreteMeasure, eps: float) -> float:
    """Certified ``delta`` with ``P`` ``(eps, delta)``-stable, by enumeration.

    The mean term is convex in ``Q`` and so maximal at a vertex. The
    covariance term is bounded by the vertex maximum of
    ``lambda_max(Sigma_Q(mu_P) - Sigma_P)`` (an upper bound, since
    ``Sigma_Q <= Sigma_Q(mu_P)`` and the latter is linear in ``Q``) and of
    ``lambda_max(Sigma_P - Sigma_Q)`` (convex in ``Q``).
    """
    _check_eps(eps)
    if p.size > EXHAUSTIVE_MAX_N:
        raise StabilityError(f"enumeration is limited to n <= {EXHAUSTIVE_MAX_N}")
    sig_p = _cov(p.points, p.weights, p.mean)
    mean_sup, cov_sup = 0.0, 0.0
    for keep in vertex_deletions(np.array(p.weights), eps):
        q = keep / keep.sum()
        mu_q = q @ p.points
        mean_sup = max(mean_sup, float(np.linalg.norm(mu_q - p.mean)))
        up = np.linalg.eigvalsh(_cov(p.points, q, p.mean) - sig_p)[-1]
        down = np.linalg.eigvalsh(sig_p - _cov(p.points, q, mu_q))[-1]
        cov_sup = max(cov_sup, float(up), float(down))
    return max(eps, mean_sup, math.sqrt(eps * cov_sup))


def _witness(p, keep, params, v=None, tol=1e-12) -> Optional[StabilityWitness]:
    shift, dev = _deviation(p, keep)
    if shift > params.delta + tol:
        return StabilityWitness(keep, shift, dev, "mean", v)
    if dev > params.cov_bound * (1 + 1e-12) + tol:
        return StabilityWitness(keep, shift, dev, "covariance", v)
    return None


def _block_candidates(x: np.ndarray, w: np.ndarray, eps: float):
    """Deletions along one direction: every contiguous block of mass ``eps``
    in sorted order, and every two-tailed split of ``eps``."""
    order = np.argsort(x, kind="stable")
    ws = w[order]
    cum = np.concatenate(([0.0], np.cumsum(ws)))
    total = cum[-1]
    starts = np.unique(np.concatenate((cum, cum - eps)))
    starts = starts[(starts >= -1e-15) & (starts <= total - eps + 1e-15)]
    lo_edge, hi_edge = cum[:-1], cum[1:]
    out = []
    for s in starts:
        # Middle block [s, s + eps].
        ov = np.clip(np.minimum(hi_edge, s + eps) - np.maximum(lo_edge, s), 0.0, None)
        out.append(ov)
        # Tails [0, s'] and [total - (eps - s'), total] with s' = s.
        if 0.0 <= s <= eps:
            t = np.clip(np.minimum(hi_edge, s) - lo_edge, 0.0, None)
            t += np.clip(hi_edge - np.maximum(lo_edge, total - (eps - s)), 0.0, None)
            out.append(np.minimum(t, ws))
    for rem in out:
        keep = np.empty_like(w)
        keep[order] = np.clip(ws - rem, 0.0, None)
        if keep.sum() > 0:
            yield keep


def stability_violation(p: DiscreteMeasure, params: StabilityParams,
                        search: Optional[SearchConfig] = None) -> Optional[StabilityWitness]:
    """Look for a deletion breaking ``(eps, delta)``-stability.

    Exhaustive mode (``n <= 12``) checks every vertex deletion with exact
    mean shift and exact ``||Sigma_Q - Sigma_P||_op``. Heuristic mode scans
    block deletions along sampled and ascended directions. Either mode can
    only falsify: ``None`` means no witness was found.
    """
    search = search or SearchConfig()
    eps = params.eps
    mode = search.mode
    if mode == "auto":
        mode = "exhaustive" if p.size <= EXHAUSTIVE_MAX_N else "heuristic"
    if mode == "exhaustive":
        if p.size > EXHAUSTIVE_MAX_N:
            raise StabilityError(f"exhaustive mode is limited to n <= {EXHAUSTIVE_MAX_N}")
        for keep in vertex_deletions(np.array(p.weights), eps):
            wit = _witness(p, keep, params)
            if wit is not None:
                return wit
        return None
    if mode != "heuristic":
        raise StabilityError(f"unknown search mode {mode!r}")

    # Mean part: tail deletions with alternating ascent.
    _, keep, v = _search_mean(p, eps, search.directions, search.ascent_steps, search.seed)
    wit = _witness(p, keep, params, v)
    if wit is not None:
        return wit
    # Covariance part: block scans along sampled directions, then along the
    # top eigenvector of the deviation found so far.
    rng = as_rng(search.seed + 1)
    dirs = rng.standard_normal((max(search.directions, 1), p.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    best_dev, best_keep = -1.0, None
    for v in dirs:
        for keep in _block_candidates(p.points @ v, np.array(p.weights), eps):
            wit = _witness(p, keep, params, v)
            if wit is not None:
                return wit
            dev = _deviation(p, keep)[1]
            if dev > best_dev:
                best_dev, best_keep = dev, keep
    for _ in range(search.ascent_steps if p.dim > 1 else 0):
        q = best_keep / best_keep.sum()
        diff = _cov(p.points, q, q @ p.points) - _cov(p.points, p.weights, p.mean)
        lam, vec = np.linalg.eigh(0.5 * (diff + diff.T))
        v = vec[:, np.argmax(np.abs(lam))]
        improved = False
        for keep in _block_candidates(p.points @ v, np.array(p.weights), eps):
            wit = _witness(p, keep, params, v)
            if wit is not None:
                return wit
            dev = _deviation(p, keep)[1]
            if dev > best_dev * (1 + 1e-12):
                best_dev, best_keep, improved = dev, keep, True
        if not improved:
            break
    return None


def certificate_bound(delta_tilde: float, eta_tilde: float, eps: float, q: int,
                      k: int) -> float:
    """``21 eps^(1/q-1) dt sqrt(k)/(1-eps) + 36 eps^(1/q-1/2) et/(1-eps)^(3/2)``."""
    if not 0.0 < eps < 1.0:
        raise StabilityError("eps must lie in (0, 1)")
    return (21.0 * eps ** (1.0 / q - 1.0) * delta_tilde * math.sqrt(k) / (1.0 - eps)
            + 36.0 * eps ** (1.0 / q - 0.5) * eta_tilde / (1.0 - eps) ** 1.5)
