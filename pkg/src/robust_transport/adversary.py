"""Corruption simulators for the combined TV + Wasserstein contamination model,
budget certificates, and the constructive W1 -> (W2, TV) decomposition.

Budget convention: the local (Wasserstein) budget is an *average*,
``(1/n) * sum_{i kept} ||x~_i - x_i|| <= rho``, which is what makes
``RW_1^eps(P~_n, P_n) <= rho`` hold for the empirical measures.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .measures import DiscreteMeasure, MeasureError, tv_distance
from .seeding import as_rng
from .transport import Coupling, robust_wp, wp_exact

MAX_EPS = 0.49


class CorruptionError(ValueError):
    pass


# ---------------------------------------------------------------- strategies


@dataclass
class Cluster:
    """All replaced points sit at ``mean + distance * direction``."""

    distance: float
    direction: Optional[np.ndarray] = None


@dataclass
class HeavyTail:
    """Replaced points are ``mean + scale * Z`` with ``Z`` multivariate Cauchy."""

    scale: float = 1.0


@dataclass
class Shell:
    """Replaced points uniform on the sphere of ``radius`` about the mean."""

    radius: float


@dataclass
class CustomPoints:
    points: np.ndarray


@dataclass
class UniformShift:
    direction: Optional[np.ndarray] = None


@dataclass
class Concentrated:
    """A ``frac`` fraction of points each moved ``rho / frac`` along ``direction``."""

    frac: float
    direction: Optional[np.ndarray] = None


TVStrategy = Union[Cluster, HeavyTail, Shell, CustomPoints]
W1Strategy = Union[UniformShift, Concentrated]


def parse_strategy(spec: Optional[dict]):
    """Build a strategy from a config mapping like ``{"kind": "cluster", ...}``."""
    if spec is None:
        return None
    spec = dict(spec)
    kind = spec.pop("kind")
    if "direction" in spec and spec["direction"] is not None:
        spec["direction"] = np.asarray(spec["direction"], dtype=float)
    if kind == "custom":
        spec["points"] = np.asarray(spec["points"], dtype=float)
    table = {"cluster": Cluster, "heavy_tail": HeavyTail, "shell": Shell,
             "custom": CustomPoints, "uniform_shift": UniformShift,
             "concentrated": Concentrated}
    if kind not in table:
        raise CorruptionError(f"unknown strategy kind {kind!r}")
    return table[kind](**spec)


def strategy_to_dict(s) -> Optional[dict]:
    if s is None:
        return None
    names = {Cluster: "cluster", HeavyTail: "heavy_tail", Shell: "shell",
             CustomPoints: "custom", UniformShift: "uniform_shift",
             Concentrated: "concentrated"}
    out = {"kind": names[type(s)]}
    for k, v in vars(s).items():
        out[k] = v.tolist() if isinstance(v, np.ndarray) else v
    return out


# ---------------------------------------------------------------------- plan


@dataclass
class CorruptionPlan:
    """What the adversary did: replaced indices and per-point displacements.

    ``displacements[i]`` is zero for replaced indices (they carry no local
    budget) and for untouched points.
    """

    tv_indices: np.ndarray
    displacements: np.ndarray
    eps: float
    rho: float
    tv_strategy: Optional[dict] = None
    w1_strategy: Optional[dict] = None
    seed: Optional[int] = None
    certificate: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.displacements.shape[0]

    @property
    def local_budget_used(self) -> float:
        keep = np.ones(self.n, dtype=bool)
        keep[self.tv_indices] = False
        return float(np.linalg.norm(self.displacements[keep], axis=1).sum() / self.n)

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "rho": self.rho,
            "n": self.n,
            "tv_indices": [int(i) for i in self.tv_indices],
            "displacements": self.displacements.tolist(),
            "tv_strategy": self.tv_strategy,
            "w1_strategy": self.w1_strategy,
            "seed": self.seed,
            "certificate": self.certificate,
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionPlan":
        disp = np.asarray(d["displacements"], dtype=float)
        return cls(np.asarray(d["tv_indices"], dtype=int).reshape(-1),
                   disp.reshape(int(d["n"]), -1), float(d["eps"]), float(d["rho"]),
                   d.get("tv_strategy"), d.get("w1_strategy"), d.get("seed"),
                   d.get("certificate", {}))

    @classmethod
    def from_json(cls, path) -> "CorruptionPlan":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _direction(direction, d: int) -> np.ndarray:
    if direction is None:
        u = np.zeros(d)
        u[0] = 1.0
        return u
    u = np.asarray(direction, dtype=float).reshape(-1)
    if u.shape[0] != d:
        raise CorruptionError(f"direction has length {u.shape[0]}, data has d={d}")
    nrm = np.linalg.norm(u)
    if nrm == 0:
        raise CorruptionError("direction must be nonzero")
    return u / nrm


def _require_uniform(m: DiscreteMeasure) -> None:
    if not m.is_uniform:
        raise CorruptionError("corruption models act on uniform empirical measures")


def n_replaced(eps: float, n: int) -> int:
    return int(math.floor(eps * n + 1e-9))


def _replacement_points(clean: DiscreteMeasure, m: int, strategy, rng) -> np.ndarray:
    d, mu = clean.dim, clean.mean
    if isinstance(strategy, Cluster):
        return np.tile(mu + strategy.distance * _direction(strategy.direction, d), (m, 1))
    if isinstance(strategy, HeavyTail):
        z = rng.standard_normal((m, d)) / np.abs(rng.standard_normal((m, 1)))
        return mu + strategy.scale * z
    if isinstance(strategy, Shell):
        z = rng.standard_normal((m, d))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        return mu + strategy.radius * z
    if isinstance(strategy, CustomPoints):
        pts = np.atleast_2d(np.asarray(strategy.points, dtype=float))
        if pts.shape[1] != d or pts.shape[0] < m:
            raise CorruptionError(f"custom strategy needs at least {m} points in R^{d}")
        return pts[:m]
    raise CorruptionError(f"not a TV strategy: {strategy!r}")


def _check_eps(eps: float) -> None:
    if not 0.0 <= eps <= MAX_EPS:
        raise CorruptionError(f"eps must lie in [0, {MAX_EPS}], got {eps}")


def tv_corrupt(clean: DiscreteMeasure, eps: float, strategy: TVStrategy, rng_seed=None):
    """Replace exactly ``floor(eps * n)`` randomly chosen points.

    Returns ``(corrupted, plan)``. The TV budget is certified by count.
    """
    _check_eps(eps)
    _require_uniform(clean)
    rng = as_rng(rng_seed)
    n = clean.size
    m = n_replaced(eps, n)
    idx = np.sort(rng.choice(n, size=m, replace=False)) if m else np.zeros(0, int)
    pts = np.array(clean.points)
    if m:
        pts[idx] = _replacement_points(clean, m, strategy, rng)
    plan = CorruptionPlan(idx, np.zeros_like(pts), eps, 0.0,
                          tv_strategy=strategy_to_dict(strategy),
                          seed=rng_seed if isinstance(rng_seed, int) else None)
    return DiscreteMeasure(pts), plan


def _shift_vectors(n: int, d: int, rho: float, strategy: W1Strategy,
                   eligible: np.ndarray, rng) -> np.ndarray:
    disp = np.zeros((n, d))
    if rho == 0 or eligible.size == 0:
        return disp
    u = _direction(strategy.direction, d)
    if isinstance(strategy, UniformShift):
        disp[eligible] = rho * u
    elif isinstance(strategy, Concentrated):
        if not 0 < strategy.frac <= 1:
            raise CorruptionError("concentrated frac must lie in (0, 1]")
        m = min(eligible.size, max(1, int(math.floor(strategy.frac * n + 1e-9))))
        chosen = np.sort(rng.choice(eligible, size=m, replace=False))
        # Average displacement over all n points is exactly rho.
        disp[chosen] = (rho * n / m) * u
    else:
        raise CorruptionError(f"not a W1 strategy: {strategy!r}")
    return disp


def w1_corrupt(clean: DiscreteMeasure, rho: float, strategy: W1Strategy, rng_seed=None):
    """Locally perturb points with average displacement norm ``rho``."""
    if rho < 0:
        raise CorruptionError("rho must be nonnegative")
    _require_uniform(clean)
    rng = as_rng(rng_seed)
    n, d = clean.size, clean.dim
    disp = _shift_vectors(n, d, rho, strategy, np.arange(n), rng)
    plan = CorruptionPlan(np.zeros(0, int), disp, 0.0, rho,
                          w1_strategy=strategy_to_dict(strategy),
                          seed=rng_seed if isinstance(rng_seed, int) else None)
    return DiscreteMeasure(clean.points + disp), plan


def combined_corrupt(clean: DiscreteMeasure, eps: float, rho: float,
                     tv_strategy: Optional[TVStrategy], w1_strategy: Optional[W1Strategy],
                     rng_seed=None, certify="auto"):
    """Local shifts on the kept indices, then TV replacement of ``floor(eps n)``
    points. With ``certify`` (``"auto"``: only when the instance is small
    enough for the exact solver) the plan carries an ``RW_1^eps`` certificate.
    """
    _check_eps(eps)
    if rho < 0:
        raise CorruptionError("rho must be nonnegative")
    _require_uniform(clean)
    rng = as_rng(rng_seed)
    n, d = clean.size, clean.dim
    m = n_replaced(eps, n)
    if m and tv_strategy is None:
        raise CorruptionError("eps > 0 needs a TV strategy")
    if rho > 0 and w1_strategy is None:
        raise CorruptionError("rho > 0 needs a W1 strategy")
    idx = np.sort(rng.choice(n, size=m, replace=False)) if m else np.zeros(0, int)
    keep = np.setdiff1d(np.arange(n), idx)
    disp = (_shift_vectors(n, d, rho, w1_strategy, keep, rng)
            if w1_strategy is not None else np.zeros((n, d)))
    pts = clean.points + disp if rho > 0 else np.array(clean.points)
    if m:
        pts[idx] = _replacement_points(clean, m, tv_strategy, rng)
    plan = CorruptionPlan(idx, disp, eps, rho, strategy_to_dict(tv_strategy),
                          strategy_to_dict(w1_strategy),
                          seed=rng_seed if isinstance(rng_seed, int) else None)
    out = DiscreteMeasure(pts)
    if certify is True or (certify == "auto" and (n + 1) ** 2 <= 10**6):
        plan.certificate = certify_budgets(clean, out, plan)
    return out, plan


def certify_budgets(clean: DiscreteMeasure, corrupted: DiscreteMeasure,
                    plan: CorruptionPlan, tol: float = 1e-9, exact: bool = True) -> dict:
    """Independent checks of a plan's budgets.

    * TV: replaced count ``<= floor(eps n)``; the remaining points must agree
      with ``clean + displacement``.
    * Local: identity-coupling average displacement ``<= rho``.
    * Combined (``exact``): ``RW_1^eps(corrupted, clean) <= rho`` via the
      partial-transport solver.
    """
    n = clean.size
    keep = np.setdiff1d(np.arange(n), plan.tv_indices)
    tv_ok = len(plan.tv_indices) <= n_replaced(plan.eps, n)
    consistent = bool(np.allclose(corrupted.points[keep],
                                  clean.points[keep] + plan.displacements[keep],
                                  rtol=0, atol=1e-9))
    moved = np.linalg.norm(corrupted.points[keep] - clean.points[keep], axis=1).sum() / n
    out = {
        "tv_count": int(len(plan.tv_indices)),
        "tv_ok": bool(tv_ok),
        "consistent": consistent,
        "local_average": float(moved),
        "local_ok": bool(moved <= plan.rho + tol),
    }
    if exact:
        eps_used = len(plan.tv_indices) / n
        rw = robust_wp(corrupted, clean, eps_used, 1, max_size=None)
        out["robust_w1"] = float(rw)
        out["robust_ok"] = bool(rw <= plan.rho + tol)
    out["ok"] = all(v for k, v in out.items() if k.endswith("_ok") or k == "consistent")
    return out


# ---------------------------------------------------------- W1 decomposition


def w1_decompose(p: DiscreteMeasure, q: DiscreteMeasure, coupling: Coupling,
                 tau: float) -> DiscreteMeasure:
    """Split a W1 perturbation into a W2-small part plus a TV part.

    Given a coupling of ``(p, q)`` with mean displacement ``rho``, keep the
    moves ``x -> y`` whose length is below the ``(1 - tau)`` quantile (the
    boundary edge is split so exactly ``1 - tau`` mass moves) and leave the
    rest at ``x``. The returned ``R`` satisfies ``W1(p, R) <= rho``,
    ``W2(p, R) <= sqrt(2) rho / sqrt(tau)`` and ``||R - q||_TV <= tau``.
    """
    if not 0.0 < tau < 1.0:
        raise CorruptionError("tau must lie in (0, 1)")
    if p.dim != q.dim:
        raise MeasureError("dimension mismatch")
    src, tgt, mass = coupling.source_idx, coupling.target_idx, coupling.mass
    x, y = p.points[src], q.points[tgt]
    length = np.linalg.norm(y - x, axis=1)
    order = np.argsort(length, kind="stable")
    cum = np.cumsum(mass[order])
    total = cum[-1]
    budget = (1.0 - tau) * total
    moved = np.zeros_like(mass)
    before = np.concatenate(([0.0], cum[:-1]))
    full = cum <= budget
    moved[order[full]] = mass[order[full]]
    # The boundary edge moves only the mass needed to reach 1 - tau exactly.
    partial = np.flatnonzero(~full & (before < budget))
    if partial.size:
        e = order[partial[0]]
        moved[e] = budget - before[partial[0]]
    stay = mass - moved
    pts = np.vstack([y[moved > 0], x[stay > 0]])
    w = np.concatenate([moved[moved > 0], stay[stay > 0]])
    return DiscreteMeasure(pts, w)


def check_decomposition(p: DiscreteMeasure, q: DiscreteMeasure, coupling: Coupling,
                        tau: float, tol: float = 1e-8) -> dict:
    """Run ``w1_decompose`` and verify its three inequalities with exact OT."""
    rho = float(np.sum(coupling.mass * np.linalg.norm(coupling.displacements(p, q), axis=1)))
    r = w1_decompose(p, q, coupling, tau)
    w1_val = wp_exact(p, r, 1, max_size=None)[0]
    w2_val = wp_exact(p, r, 2, max_size=None)[0]
    tv = tv_distance(r, q)
    w2_bound = math.sqrt(2.0) * rho / math.sqrt(tau)
    return {
        "rho": rho, "tau": tau, "w1": w1_val, "w2": w2_val, "w2_bound": w2_bound,
        "tv": tv,
        "w1_ok": w1_val <= rho + tol,
        "w2_ok": w2_val <= w2_bound + tol,
        "tv_ok": tv <= tau + tol,
    }
