"""Wasserstein DRO for Lipschitz losses with low-rank affine structure.

A loss is ``l(z) = inner(A z + b)`` with ``A`` a ``k x d`` matrix. For the
supported inner losses the W1 worst case over a ball of radius ``tau`` is
``E[l] + tau * Lip(l)``. This turns the robust objective into a
Lipschitz-regularized empirical risk.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .filtering import FilterConfig, FilterReport, filter_w2
from .measures import DiscreteMeasure, MeasureError

INNER_LOSSES = ("linear", "absolute", "hinge")


class WDROError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LossSpec:
    """``l(z) = inner(A z + b)`` with

    * ``linear``: ``sum(s)``
    * ``absolute``: ``||s||_2``
    * ``hinge``: ``max(0, 1 - sum(s))``
    """

    A: np.ndarray
    b: np.ndarray
    inner: str
    growth_order: int = 1

    def __post_init__(self):
        A = np.atleast_2d(np.array(self.A, dtype=float))
        b = np.array(self.b, dtype=float).reshape(-1)
        if b.shape[0] != A.shape[0]:
            raise WDROError(f"offset has length {b.shape[0]}, map has {A.shape[0]} rows")
        if self.inner not in INNER_LOSSES:
            raise WDROError(f"unsupported inner loss {self.inner!r}")
        if self.growth_order not in (1, 2):
            raise WDROError("growth_order must be 1 or 2")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def k(self) -> int:
        return self.A.shape[0]

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def inner_value(self, s: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(s)
        if self.inner == "linear":
            return s.sum(axis=1)
        if self.inner == "absolute":
            return np.linalg.norm(s, axis=1)
        return np.maximum(0.0, 1.0 - s.sum(axis=1))

    def __call__(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return self.inner_value(z @ self.A.T + self.b)

    @property
    def lip_const(self) -> float:
        """Exact Lipschitz constant w.r.t. the Euclidean norm on ``R^d``."""
        if self.inner == "absolute":
            return float(np.linalg.norm(self.A, 2)) if self.A.size else 0.0
        return float(np.linalg.norm(self.A.sum(axis=0)))

    def expectation(self, m: DiscreteMeasure) -> float:
        if m.dim != self.dim:
            raise MeasureError(f"loss acts on R^{self.dim}, measure lives in R^{m.dim}")
        return float(m.weights @ self(m.points))

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "b": self.b.tolist(), "inner": self.inner,
                "growth_order": self.growth_order, "lip_const": self.lip_const}

    @classmethod
    def from_dict(cls, d: dict) -> "LossSpec":
        return cls(np.array(d["A"]), np.array(d["b"]), d["inner"], d.get("growth_order", 1))


@dataclass(frozen=True)
class DROConfig:
    radius: float
    p: int = 1

    def __post_init__(self):
        if self.radius < 0:
            raise WDROError("radius must be nonnegative")
        if self.p != 1:
            raise WDROError("only p = 1 is supported")


def dro_value_w1(p_hat: DiscreteMeasure, loss: LossSpec, tau: float) -> float:
    """``sup_{Q : W1(Q, P_hat) <= tau} E_Q[l] = E_{P_hat}[l] + tau Lip(l)``.

    Exact for the supported family: each inner loss grows at its Lipschitz
    rate along a ray, so a vanishing mass sent far along that ray attains
    the supremum.
    """
    if tau < 0:
        raise WDROError("tau must be nonnegative")
    return loss.expectation(p_hat) + tau * loss.lip_const


def reduce_loss(loss: LossSpec, tol: float = 1e-12):
    """Factor ``A = B U`` with ``U`` having orthonormal rows.

    Uses QR of ``A^T`` when ``A`` has full row rank and an SVD otherwise,
    in which case ``U`` has ``rank(A)`` rows. Returns ``(U, reduced_loss)``
    where ``reduced_loss(U z) = loss(z)``.
    """
    A = loss.A
    k, d = A.shape
    if k <= d:
        q, r = np.linalg.qr(A.T)
        diag = np.abs(np.diag(r))
        scale = max(1.0, float(np.abs(A).max(initial=0.0)))
        if diag.size and diag.min() > tol * scale:
            return q.T, LossSpec(r.T, loss.b, loss.inner, loss.growth_order)
    u, s, vt = np.linalg.svd(A, full_matrices=False)
    rank = int(np.sum(s > tol * max(1.0, s.max(initial=0.0))))
    if rank == 0:
        # Constant loss: any single direction works.
        U = np.zeros((1, d))
        U[0, 0] = 1.0
        return U, LossSpec(np.zeros((k, 1)), loss.b, loss.inner, loss.growth_order)
    U = vt[:rank]
    B = u[:, :rank] * s[:rank]
    return U, LossSpec(B, loss.b, loss.inner, loss.growth_order)


def pushforward_equivalence_check(p_hat: DiscreteMeasure, loss: LossSpec, tau: float):
    """Worst-case value in ``R^d`` and on the projection ``U # P_hat``.

    Returns ``(lhs, rhs)``; the two agree up to rounding.
    """
    U, reduced = reduce_loss(loss)
    lhs = dro_value_w1(p_hat, loss, tau)
    proj = DiscreteMeasure(p_hat.points @ U.T, p_hat.weights)
    rhs = dro_value_w1(proj, reduced, tau)
    return lhs, rhs


# ----------------------------------------------------------------- families


@dataclass(frozen=True)
class LossFamily:
    """Parametrized convex loss families over ``z in R^d``.

    * ``absolute_regression``: ``z = (x, y)`` with ``y`` the last coordinate,
      ``l(z) = |theta . x + theta0 - y|``. With ``d = 1`` this is the
      location family ``|theta0 - z|``.
    * ``hinge``: ``l(z) = max(0, 1 - theta . z)`` with ``z = y x`` the
      label-signed features and every ``theta_j`` in ``[-radius, radius]``.
      There is no intercept: a free offset would make the loss vanish.
    * ``linear``: ``l(z) = theta . z`` with ``||theta|| <= radius``.

    ``params`` is ``theta``, followed by ``theta0`` for absolute_regression.
    """

    name: str
    dim: int
    radius: float = 1.0

    def __post_init__(self):
        if self.name not in ("absolute_regression", "hinge", "linear"):
            raise WDROError(f"unknown family {self.name!r}")
        if self.dim < 1:
            raise WDROError("dim must be positive")

    @property
    def n_params(self) -> int:
        if self.name == "absolute_regression":
            return self.dim
        return self.dim

    def loss(self, params) -> LossSpec:
        t = np.asarray(params, dtype=float).reshape(-1)
        if t.shape[0] != self.n_params:
            raise WDROError(f"expected {self.n_params} parameters, got {t.shape[0]}")
        if self.name == "absolute_regression":
            A = np.concatenate((t[:-1], [-1.0]))[None, :]
            return LossSpec(A, t[-1:], "absolute")
        if self.name == "hinge":
            return LossSpec(t[None, :], np.zeros(1), "hinge")
        return LossSpec(t[None, :], np.zeros(1), "linear")

    def _parts(self, params, Z: np.ndarray, w: np.ndarray):
        """Objective pieces: ``(risk, risk_subgradient, lip, lip_subgradient)``."""
        t = np.asarray(params, dtype=float)
        if self.name == "absolute_regression":
            a = np.concatenate((t[:-1], [-1.0]))
            r = Z @ a + t[-1]
            sg = np.sign(r) * w
            g = np.concatenate((sg @ Z[:, :-1], [sg.sum()]))
            lip = float(np.linalg.norm(a))
            gl = np.concatenate((t[:-1] / lip, [0.0]))
            return float(w @ np.abs(r)), g, lip, gl
        if self.name == "hinge":
            m = 1.0 - Z @ t
            act = (m > 0) * w
            g = -(act @ Z)
            lip = float(np.linalg.norm(t))
            gl = t / lip if lip > 0 else np.zeros(self.dim)
            return float(w @ np.maximum(m, 0.0)), g, lip, gl
        mu = w @ Z
        lip = float(np.linalg.norm(t))
        gl = t / lip if lip > 0 else np.zeros(self.dim)
        return float(mu @ t), mu, lip, gl

    def project(self, params) -> np.ndarray:
        t = np.asarray(params, dtype=float)
        if self.name == "linear":
            nrm = np.linalg.norm(t)
            if nrm > self.radius:
                return t * (self.radius / nrm)
        if self.name == "hinge":
            return np.clip(t, -self.radius, self.radius)
        return t

    def objective(self, params, m: DiscreteMeasure, tau: float) -> float:
        risk, _, lip, _ = self._parts(params, m.points, m.weights)
        return risk + tau * lip


@dataclass(frozen=True)
class OptConfig:
    max_iters: int = 20000
    step: float = 0.5
    tol: float = 1e-6
    patience: int = 500
    # Step-size multipliers of the successive restarts.
    stages: tuple = (1.0, 0.2, 0.04, 0.01)


@dataclass
class FitResult:
    loss: LossSpec
    params: np.ndarray
    objective: float
    converged: bool
    iterations: int
    family: str = ""
    tau: float = 0.0
    filter_report: Optional[FilterReport] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"family": self.family, "params": self.params.tolist(), "tau": self.tau,
                "objective": self.objective, "converged": self.converged,
                "iterations": self.iterations, "loss": self.loss.to_dict()}

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


def erm(family: LossFamily, m: DiscreteMeasure) -> np.ndarray:
    """Exact empirical risk minimizer by linear programming.

    Covers ``absolute_regression`` (weighted least absolute deviations) and
    the box-constrained ``hinge``; the ``linear`` family has the closed form
    ``-radius * mean / ||mean||``.
    """
    Z, w = m.points, m.weights
    n, d = Z.shape
    if family.dim != d:
        raise MeasureError("family and measure dimensions differ")
    if family.name == "linear":
        mu = w @ Z
        nrm = np.linalg.norm(mu)
        return np.zeros(d) if nrm == 0 else -family.radius * mu / nrm
    # Variables: params (free), then slacks u >= 0; minimize w . u.
    p = family.n_params
    c = np.concatenate((np.zeros(p), w))
    if family.name == "absolute_regression":
        # |x . theta + theta0 - y| <= u
        X1 = np.hstack((Z[:, :-1], np.ones((n, 1))))
        y = Z[:, -1]
        eye = sparse.identity(n, format="csr")
        A_ub = sparse.vstack([sparse.hstack([X1, -eye]), sparse.hstack([-X1, -eye])])
        b_ub = np.concatenate((y, -y))
    else:
        # 1 - z . theta <= u
        A_ub = sparse.hstack([-sparse.csr_matrix(Z), -sparse.identity(n)])
        b_ub = -np.ones(n)
    box = (-family.radius, family.radius) if family.name == "hinge" else (None, None)
    bounds = [box] * p + [(0, None)] * n
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0:
        raise WDROError(f"ERM linear program failed: {res.message}")
    return res.x[:p]


def _descend(family: LossFamily, Z, w, tau, t, step, opt: OptConfig):
    """One subgradient stage from ``t``. Returns ``(best_t, best_f, converged, iters)``."""
    risk, g, lip, gl = family._parts(t, Z, w)
    best_t, best_f = t.copy(), risk + tau * lip
    last_gain_at, ref = 0, best_f
    converged, it = False, 0
    for it in range(1, opt.max_iters + 1):
        sub = g + tau * gl
        nrm = np.linalg.norm(sub)
        if nrm == 0:
            converged = True
            break
        t = family.project(t - (step / math.sqrt(it)) * sub / nrm)
        risk, g, lip, gl = family._parts(t, Z, w)
        f = risk + tau * lip
        if f < best_f:
            best_f, best_t = f, t.copy()
        if ref - best_f > opt.tol:
            ref, last_gain_at = best_f, it
        elif it - last_gain_at >= opt.patience:
            converged = True
            break
    return best_t, best_f, converged, it


def fit_dro(p_hat: DiscreteMeasure, family: LossFamily, tau: float,
            opt: Optional[OptConfig] = None, init=None) -> FitResult:
    """Minimize ``E_{P_hat}[l_theta] + tau Lip(l_theta)`` by subgradient descent.

    Starts from the exact ERM (``tau = 0`` solution) unless ``init`` is
    given. Each stage takes normalized steps of size ``step * m / sqrt(t)``
    for the next multiplier ``m`` in ``opt.stages``, restarting from the best
    iterate so far. A stage converges once the best objective improves by
    less than ``tol`` over ``patience`` consecutive steps; the fit is
    ``converged`` when every stage did.
    """
    if tau < 0:
        raise WDROError("tau must be nonnegative")
    opt = opt or OptConfig()
    Z, w = p_hat.points, p_hat.weights
    t = family.project(erm(family, p_hat) if init is None else np.asarray(init, dtype=float))
    if tau == 0 and init is None:
        return FitResult(family.loss(t), t, family.objective(t, p_hat, 0.0), True, 0,
                         family.name, tau)
    best_t, best_f = t, family.objective(t, p_hat, tau)
    converged, total = True, 0
    for mult in opt.stages:
        cand_t, cand_f, ok, its = _descend(family, Z, w, tau, best_t, opt.step * mult, opt)
        converged, total = converged and ok, total + its
        if cand_f < best_f:
            best_t, best_f = cand_t, cand_f
    return FitResult(family.loss(best_t), best_t, best_f, converged, total, family.name, tau)


def or_wdro_fit(corrupted: DiscreteMeasure, eps: float, rho: float, family: LossFamily,
                tau: float, opt: Optional[OptConfig] = None,
                filter_cfg: Optional[FilterConfig] = None) -> FitResult:
    """Filter the corrupted sample, then fit the W1-robust objective on the estimate."""
    cfg = filter_cfg or FilterConfig.practical(eps, rho)
    if cfg.eps != eps or cfg.rho != rho:
        raise WDROError("filter_cfg budgets must match eps and rho")
    p_hat, report = filter_w2(corrupted, cfg)
    res = fit_dro(p_hat, family, tau, opt)
    res.filter_report = report
    return res


def excess_risk(fitted: LossSpec, oracle_best: LossSpec, eval_measure: DiscreteMeasure) -> float:
    """``E_eval[fitted] - E_eval[oracle_best]``."""
    return fitted.expectation(eval_measure) - oracle_best.expectation(eval_measure)
