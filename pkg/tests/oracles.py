"""Independent reference computations used only by the tests.

None of these share code with the package: transport problems go through
scipy's LP solver on the dense plan, moments through exact rationals, and
resilience through brute-force subset enumeration.
"""

from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np
from scipy.optimize import linprog


def exact_moments(points, weights=None):
    """Mean and covariance in exact rational arithmetic (returned as floats)."""
    pts = [[Fraction(float(v)) for v in row] for row in np.atleast_2d(points)]
    n, d = len(pts), len(pts[0])
    if weights is None:
        w = [Fraction(1, n)] * n
    else:
        raw = [Fraction(float(v)) for v in weights]
        tot = sum(raw)
        w = [v / tot for v in raw]
    mu = [sum(w[i] * pts[i][j] for i in range(n)) for j in range(d)]
    cov = [[sum(w[i] * (pts[i][a] - mu[a]) * (pts[i][b] - mu[b]) for i in range(n))
            for b in range(d)] for a in range(d)]
    return np.array([float(v) for v in mu]), np.array([[float(v) for v in r] for r in cov])


def _cost(xa, xb, p):
    diff = xa[:, None, :] - xb[None, :, :]
    c = np.sqrt(np.sum(diff**2, axis=2))
    return c if p == 1 else c**2


def lp_wp(xa, wa, xb, wb, p=1) -> float:
    """``W_p`` by a dense LP over all ``n_a * n_b`` plan entries."""
    xa, xb = np.atleast_2d(xa), np.atleast_2d(xb)
    wa = np.asarray(wa, float) / np.sum(wa)
    wb = np.asarray(wb, float) / np.sum(wb)
    na, nb = len(wa), len(wb)
    C = _cost(xa, xb, p).ravel()
    rows = np.kron(np.eye(na), np.ones(nb))
    cols = np.kron(np.ones(na), np.eye(nb))
    res = linprog(C, A_eq=np.vstack([rows, cols]), b_eq=np.concatenate([wa, wb]),
                  bounds=(0, None), method="highs")
    assert res.status == 0, res.message
    return max(res.fun, 0.0) ** (1.0 / p)


def lp_robust_wp(xa, wa, xb, wb, eps, p=1) -> float:
    """Partial transport: row sums <= wa, column sums <= wb, total 1 - eps."""
    xa, xb = np.atleast_2d(xa), np.atleast_2d(xb)
    wa = np.asarray(wa, float) / np.sum(wa)
    wb = np.asarray(wb, float) / np.sum(wb)
    na, nb = len(wa), len(wb)
    C = _cost(xa, xb, p).ravel()
    rows = np.kron(np.eye(na), np.ones(nb))
    cols = np.kron(np.ones(na), np.eye(nb))
    res = linprog(C, A_ub=np.vstack([rows, cols]), b_ub=np.concatenate([wa, wb]),
                  A_eq=np.ones((1, na * nb)), b_eq=[1.0 - eps], bounds=(0, None),
                  method="highs")
    assert res.status == 0, res.message
    return max(res.fun, 0.0) ** (1.0 / p)


def w1_line_cdf(xa, wa, xb, wb) -> float:
    """``int |F_a - F_b|`` over the merged support."""
    xa, xb = np.ravel(xa), np.ravel(xb)
    wa = np.asarray(wa, float) / np.sum(wa)
    wb = np.asarray(wb, float) / np.sum(wb)
    grid = np.unique(np.concatenate([xa, xb]))
    Fa = np.array([wa[xa <= g].sum() for g in grid])
    Fb = np.array([wb[xb <= g].sum() for g in grid])
    return float(np.sum(np.abs(Fa - Fb)[:-1] * np.diff(grid)))


def resilience_by_subsets(points, j: int) -> float:
    """``max ||mean(S) - mean(all)||`` over subsets keeping ``n - j`` of ``n``
    equally weighted points (the sup over deletions when ``eps = j / n``)."""
    x = np.atleast_2d(np.asarray(points, float))
    if x.shape[0] == 1 and x.shape[1] > 1:
        x = x.T
    n = x.shape[0]
    mu = x.mean(axis=0)
    best = 0.0
    for keep in itertools.combinations(range(n), n - j):
        best = max(best, float(np.linalg.norm(x[list(keep)].mean(axis=0) - mu)))
    return best


def project_l12_ball(D: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection onto ``{D : sum_i ||D_i|| <= radius}``."""
    norms = np.linalg.norm(D, axis=1)
    if norms.sum() <= radius:
        return D
    # Project the norm vector onto the simplex-like l1 ball, then rescale rows.
    u = np.sort(norms)[::-1]
    css = np.cumsum(u)
    k = np.nonzero(u * np.arange(1, len(u) + 1) > (css - radius))[0][-1]
    theta = (css[k] - radius) / (k + 1.0)
    new = np.maximum(norms - theta, 0.0)
    scale = np.divide(new, norms, out=np.zeros_like(new), where=norms > 0)
    return D * scale[:, None]


def dro_displacement_ascent(points, loss, grad, tau, steps=2000, lr=0.5, seed=0):
    """Projected gradient ascent on per-point displacements with average norm
    at most ``tau``. Returns the best mean loss found (a lower bound on the
    worst case over the W1 ball)."""
    rng = np.random.default_rng(seed)
    X = np.atleast_2d(points)
    n = X.shape[0]
    D = project_l12_ball(rng.standard_normal(X.shape) * 1e-3, n * tau)
    best = float(np.mean(loss(X + D)))
    for t in range(1, steps + 1):
        G = grad(X + D) / n
        D = project_l12_ball(D + lr / np.sqrt(t) * n * G, n * tau)
        best = max(best, float(np.mean(loss(X + D))))
    return best


def lp_resilience_1d(x, w, eps) -> float:
    """``sup |mu_Q - mu_P|`` over deletions of ``eps`` mass, as two LPs over
    the removed mass per atom ``0 <= r <= w``, ``sum r = eps``."""
    x = np.ravel(np.asarray(x, float))
    w = np.asarray(w, float) / np.sum(w)
    c = x - w @ x
    best = 0.0
    for sign in (1.0, -1.0):
        # mu_Q - mu_P = -sum r_i c_i / (1 - eps); maximize sign * that.
        res = linprog(sign * c, A_eq=np.ones((1, len(x))), b_eq=[eps],
                      bounds=list(zip(np.zeros(len(x)), w)), method="highs")
        assert res.status == 0, res.message
        best = max(best, -res.fun / (1.0 - eps))
    return best
