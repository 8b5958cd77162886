"""Batch experiment harness behind the command line interface.

Every random quantity is drawn from a generator seeded by
``derive_seed(master_seed, role, trial, cell)``, so any row of a results
file can be regenerated on its own from the stored seeds.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import adversary as adv
from .filtering import FilterConfig, filter_w2
from .measures import DiscreteMeasure, read_csv, write_csv
from .seeding import derive_seed
from .spectral import positive_part_trace, shrink_cost, sym_eig, w2_shrink_map
from .stability import mean_resilience_1d, pth_order_resilience
from .transport import SlicedConfig, max_sliced_profile, max_sliced_w1, wp_exact
from .wdro import (LossFamily, LossSpec, OptConfig, erm, excess_risk, fit_dro,
                   pushforward_equivalence_check, dro_value_w1)

log = logging.getLogger(__name__)

# Seed roles.
DATA, CORRUPT, FILTER, SLICE = 0, 1, 2, 3

SWEEP_HEADER = ["trial", "seed", "eps", "rho", "k", "w1k_corrupted_vs_clean",
                "w1k_filtered_vs_clean", "mean_err_naive", "mean_err_filtered",
                "iterations", "removed_count"]
RISK_HEADER = ["trial", "seed", "eps", "rho", "tau", "w11_filtered_vs_clean",
               "objective", "converged", "excess_risk", "lip_star", "bound",
               "within_bound"]
SUITES = ("budgets", "lemma_sandwich", "lemma_decompose", "resilience", "wdro_equiv")


class ConfigError(ValueError):
    pass


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


@dataclass
class ExperimentConfig:
    """Parsed JSON configuration.

    ``distribution`` is a mapping with ``kind`` in ``gaussian`` (``d``),
    ``heavy_tail`` (``d``, ``q > 2``: Student t scaled to unit covariance),
    ``linear_regression`` (``d``, ``noise``: ``y = x_1 + noise * N(0,1)``
    stored as the last coordinate) or ``file`` (``path``).
    """

    distribution: dict
    n: int = 1000
    eps_grid: List[float] = field(default_factory=lambda: [0.05])
    rho_grid: List[float] = field(default_factory=lambda: [0.0])
    k_list: Optional[List[int]] = None
    trials: int = 1
    master_seed: int = 0
    filter_preset: object = "practical"
    output_dir: str = "out"
    tv_strategy: Optional[dict] = None
    w1_strategy: Optional[dict] = None
    sliced: dict = field(default_factory=dict)
    workers: int = 1
    dro: dict = field(default_factory=dict)
    suite: Optional[str] = None
    data_dir: Optional[str] = None
    input: Optional[str] = None
    per_point_report: bool = False

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "distribution" not in raw:
            raise ConfigError("config needs a 'distribution' entry")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    @property
    def dim(self) -> int:
        if self.distribution.get("kind") == "file":
            return read_csv(self.distribution["path"]).dim
        return int(self.distribution["d"])

    def validate(self) -> None:
        kind = self.distribution.get("kind")
        if kind not in ("gaussian", "heavy_tail", "linear_regression", "file"):
            raise ConfigError(f"unknown distribution kind {kind!r}")
        if kind == "heavy_tail" and not float(self.distribution.get("q", 0)) > 2:
            raise ConfigError("heavy_tail needs q > 2 for a finite covariance")
        if kind == "file" and "path" not in self.distribution:
            raise ConfigError("file distribution needs a 'path'")
        if not self.eps_grid or not self.rho_grid:
            raise ConfigError("eps_grid and rho_grid must be nonempty")
        if any(not 0 <= e <= 0.49 for e in self.eps_grid):
            raise ConfigError("eps values must lie in [0, 0.49]")
        if any(r < 0 for r in self.rho_grid):
            raise ConfigError("rho values must be nonnegative")
        if self.trials < 1 or self.workers < 1:
            raise ConfigError("trials and workers must be positive")
        d = self.dim
        if kind != "file":
            if self.n < d:
                raise ConfigError(f"n = {self.n} is smaller than d = {d}")
            eps_max = max(self.eps_grid)
            if eps_max > 0 and d > 1 and self.n < d * math.log(d) / eps_max:
                log.warning("n = %d is below d log(d) / eps = %.0f", self.n,
                            d * math.log(d) / eps_max)
        if self.k_list is not None and any(not 1 <= k <= d for k in self.k_list):
            raise ConfigError(f"k_list entries must lie in [1, {d}]")
        if self.suite is not None and self.suite not in SUITES:
            raise ConfigError(f"unknown suite {self.suite!r}; choose from {', '.join(SUITES)}")

    def ks(self) -> List[int]:
        d = self.dim
        if self.k_list is not None:
            return sorted(set(int(k) for k in self.k_list))
        return sorted({k for k in (1, 2, 5, d) if k <= d})

    def filter_config(self, eps: float, rho: float, seed) -> FilterConfig:
        p = self.filter_preset
        if isinstance(p, dict):
            return FilterConfig(eps=eps, rho=rho, sigma=float(p["sigma"]),
                                big_c=float(p["big_c"]), seed=seed)
        return FilterConfig.preset(p, eps, rho, seed=seed)

    def sliced_config(self, seed, evaluation: bool = True) -> SlicedConfig:
        base = SlicedConfig(**self.sliced)
        # Evaluation runs double the restart budget.
        restarts = 2 * base.restarts if evaluation else base.restarts
        return replace(base, restarts=restarts, seed=seed)

    def tv(self):
        if self.tv_strategy is not None:
            return adv.parse_strategy(self.tv_strategy)
        return adv.Cluster(10.0 * math.sqrt(self.dim))

    def w1(self):
        if self.w1_strategy is not None:
            return adv.parse_strategy(self.w1_strategy)
        return adv.UniformShift()


# -------------------------------------------------------------------- data


def sample_clean(cfg: ExperimentConfig, trial: int) -> DiscreteMeasure:
    dist = cfg.distribution
    kind = dist["kind"]
    if kind == "file":
        return read_csv(dist["path"])
    rng = np.random.default_rng(derive_seed(cfg.master_seed, DATA, trial))
    n, d = cfg.n, int(dist["d"])
    if kind == "gaussian":
        return DiscreteMeasure(rng.standard_normal((n, d)))
    if kind == "heavy_tail":
        q = float(dist["q"])
        z = rng.standard_normal((n, d))
        chi = rng.chisquare(q, size=(n, 1))
        return DiscreteMeasure(z / np.sqrt(chi / q) * math.sqrt((q - 2) / q))
    noise = float(dist.get("noise", 0.5))
    x = rng.standard_normal((n, d - 1))
    y = x[:, 0] + noise * rng.standard_normal(n)
    return DiscreteMeasure(np.column_stack([x, y]))


def cells(cfg: ExperimentConfig):
    """``(cell_index, eps, rho)`` in grid order."""
    i = 0
    for e in cfg.eps_grid:
        for r in cfg.rho_grid:
            yield i, float(e), float(r)
            i += 1


def corrupt(cfg: ExperimentConfig, clean: DiscreteMeasure, trial: int, cell: int,
            eps: float, rho: float):
    seed = derive_seed(cfg.master_seed, CORRUPT, trial, cell)
    tv = cfg.tv() if eps > 0 else None
    w1 = cfg.w1() if rho > 0 else None
    out, plan = adv.combined_corrupt(clean, eps, rho, tv, w1, rng_seed=seed, certify=False)
    plan.seed = seed
    return out, plan


# ---------------------------------------------------------------- simulate


def cmd_simulate(cfg: ExperimentConfig, out_dir) -> List[Path]:
    """Write ``trial_XXX/clean.csv`` and, per grid cell,
    ``trial_XXX/cell_YY/{corrupted.csv, plan.json}``."""
    out = Path(out_dir)
    written = []
    for t in range(cfg.trials):
        tdir = out / f"trial_{t:03d}"
        tdir.mkdir(parents=True, exist_ok=True)
        clean = sample_clean(cfg, t)
        write_csv(clean, tdir / "clean.csv", with_weights=False)
        for c, eps, rho in cells(cfg):
            cdir = tdir / f"cell_{c:02d}"
            cdir.mkdir(exist_ok=True)
            bad, plan = corrupt(cfg, clean, t, c, eps, rho)
            write_csv(bad, cdir / "corrupted.csv", with_weights=False)
            plan.to_json(cdir / "plan.json")
            written.append(cdir)
    return written


# ------------------------------------------------------------------ filter


def cmd_filter(cfg: ExperimentConfig, input_path, out_dir):
    """Filter a dataset CSV with the first grid cell's budgets."""
    data = read_csv(input_path)
    eps, rho = float(cfg.eps_grid[0]), float(cfg.rho_grid[0])
    fcfg = cfg.filter_config(eps, rho, derive_seed(cfg.master_seed, FILTER, 0, 0))
    est, report = filter_w2(data, fcfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(est, out / "estimate.csv", with_weights=False)
    report.to_json(out / "report.json", per_point=cfg.per_point_report)
    return est, report


# ------------------------------------------------------------------- sweep


def sweep_trial(cfg: ExperimentConfig, trial: int) -> List[list]:
    """All rows for one trial, in (cell, k) order."""
    clean = sample_clean(cfg, trial)
    ks = cfg.ks()
    rows = []
    for c, eps, rho in cells(cfg):
        bad, plan = corrupt(cfg, clean, trial, c, eps, rho)
        fseed = derive_seed(cfg.master_seed, FILTER, trial, c)
        est, report = filter_w2(bad, cfg.filter_config(eps, rho, fseed))
        scfg = cfg.sliced_config(derive_seed(cfg.master_seed, SLICE, trial, c))
        prof_bad = max_sliced_profile(bad, clean, ks, scfg)
        prof_est = max_sliced_profile(est, clean, ks, scfg)
        err_naive = float(np.linalg.norm(bad.mean - clean.mean))
        err_filt = float(np.linalg.norm(est.mean - clean.mean))
        for k in ks:
            rows.append([trial, plan.seed, eps, rho, k, prof_bad[k].value,
                         prof_est[k].value, err_naive, err_filt,
                         len(report.iterations), report.removed_count])
    return rows


def _sweep_job(args):
    cfg, trial = args
    return sweep_trial(cfg, trial)


def run_trials(cfg: ExperimentConfig, job, trials=None) -> List[list]:
    """Run ``job((cfg, trial))`` for every trial, in a process pool when
    ``cfg.workers > 1``. Results come back in trial order."""
    trials = list(range(cfg.trials)) if trials is None else list(trials)
    tasks = [(cfg, t) for t in trials]
    if cfg.workers == 1 or len(tasks) == 1:
        return [job(a) for a in tasks]
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(job, tasks, chunksize=1))


def write_rows(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_rows(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cmd_sweep(cfg: ExperimentConfig, out_dir, figure: bool = True) -> Path:
    """Write ``results.csv``, ``plot.gp`` and (optionally) ``results.png``."""
    from .plotting import render_sweep, write_gnuplot_script

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r for trial_rows in run_trials(cfg, _sweep_job) for r in trial_rows]
    path = out / "results.csv"
    write_rows(path, SWEEP_HEADER, rows)
    cols = {h: i + 1 for i, h in enumerate(SWEEP_HEADER)}
    write_gnuplot_script(out / "plot.gp", path.name, cfg.ks(), cols)
    if figure:
        render_sweep(read_rows(path), out / "results.png")
    return path


# --------------------------------------------------------------------- dro


def _family(cfg: ExperimentConfig) -> LossFamily:
    spec = cfg.dro
    return LossFamily(spec.get("family", "absolute_regression"), cfg.dim,
                      float(spec.get("radius", 1.0)))


def _opt(cfg: ExperimentConfig) -> OptConfig:
    return OptConfig(**cfg.dro.get("opt", {}))


def dro_trial(cfg: ExperimentConfig, trial: int, sqrt_eps_coef: float):
    clean = sample_clean(cfg, trial)
    family = _family(cfg)
    star = family.loss(erm(family, clean))
    rows, fits = [], []
    for c, eps, rho in cells(cfg):
        bad, plan = corrupt(cfg, clean, trial, c, eps, rho)
        fseed = derive_seed(cfg.master_seed, FILTER, trial, c)
        est, report = filter_w2(bad, cfg.filter_config(eps, rho, fseed))
        scfg = cfg.sliced_config(derive_seed(cfg.master_seed, SLICE, trial, c),
                                 evaluation=False)
        w11 = max_sliced_w1(est, clean, 1, scfg).value
        tau = cfg.dro.get("tau", "auto")
        tau = w11 + sqrt_eps_coef * math.sqrt(eps) if tau == "auto" else float(tau)
        fit = fit_dro(est, family, tau, _opt(cfg))
        ex = excess_risk(fit.loss, star, clean)
        bound = 2.0 * star.lip_const * tau
        rows.append([trial, plan.seed, eps, rho, tau, w11, fit.objective, fit.converged,
                     ex, star.lip_const, bound, ex <= bound])
        d = fit.to_dict()
        d.update(trial=trial, eps=eps, rho=rho, filter_status=report.status)
        fits.append(d)
    return rows, fits


def calibrate_sqrt_eps_coef(cfg: ExperimentConfig, trials: int = 5,
                            eps_grid=(0.01, 0.02, 0.05, 0.1)) -> float:
    """Least-squares slope ``c`` in ``W_{1,1}(P_hat, P_n) ~ c sqrt(eps)``.

    Uses calibration trials whose seeds are disjoint from evaluation trials
    (the master seed is remixed), and only rho = 0.
    """
    cal = replace(cfg, master_seed=derive_seed(cfg.master_seed, 0xCA1), eps_grid=list(eps_grid),
                  rho_grid=[0.0], trials=trials)
    xs, ys = [], []
    for t in range(trials):
        clean = sample_clean(cal, t)
        for c, eps, rho in cells(cal):
            bad, _ = corrupt(cal, clean, t, c, eps, rho)
            est, _ = filter_w2(bad, cal.filter_config(eps, rho,
                                                      derive_seed(cal.master_seed, FILTER, t, c)))
            scfg = cal.sliced_config(derive_seed(cal.master_seed, SLICE, t, c), evaluation=False)
            xs.append(math.sqrt(eps))
            ys.append(max_sliced_w1(est, clean, 1, scfg).value)
    x, y = np.array(xs), np.array(ys)
    return float(x @ y / (x @ x))


def cmd_dro(cfg: ExperimentConfig, out_dir, figure: bool = True):
    """Filter-then-DRO on each trial and cell; writes ``fit.json`` and ``risk.csv``."""
    from .plotting import render_dro

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    coef = cfg.dro.get("sqrt_eps_coef")
    if coef is None:
        coef = calibrate_sqrt_eps_coef(cfg, int(cfg.dro.get("calibration_trials", 5)))
    coef = float(coef)
    results = run_trials(cfg, _dro_job_for(coef))
    rows = [r for rs, _ in results for r in rs]
    fits = [f for _, fs in results for f in fs]
    write_rows(out / "risk.csv", RISK_HEADER, rows)
    with open(out / "fit.json", "w", encoding="utf-8") as fh:
        json.dump({"sqrt_eps_coef": coef, "fits": fits}, fh, indent=1)
        fh.write("\n")
    if figure:
        render_dro(read_rows(out / "risk.csv"), out / "risk.png")
    return out / "risk.csv"


class _dro_job_for:
    """Picklable job closure carrying the calibrated coefficient."""

    def __init__(self, coef: float):
        self.coef = coef

    def __call__(self, args):
        cfg, trial = args
        return dro_trial(cfg, trial, self.coef)


# ------------------------------------------------------------------ verify


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""
    informational: bool = False


def suite_lemma_sandwich(seed: int = 0, instances: int = 100, n: int = 200, d: int = 10):
    """``tr(S - 2I)_+ / 2 <= sum_{l > 1} (sqrt(l) - 1)^2 <= tr(S - I)_+`` and
    the shrink map realizing the middle term."""
    rng = np.random.default_rng(seed)
    worst_lo = worst_hi = worst_map = 0.0
    for _ in range(instances):
        scale = rng.exponential(1.0, size=d) * 3.0
        x = rng.standard_normal((n, d)) * scale
        x = x @ np.linalg.qr(rng.standard_normal((d, d)))[0]
        m = DiscreteMeasure(x)
        cov = np.cov(x, rowvar=False, bias=True)
        mid = shrink_cost(cov)
        lo = 0.5 * positive_part_trace(cov, 2.0)
        hi = positive_part_trace(cov, 1.0)
        worst_lo = min(worst_lo, mid - lo)
        worst_hi = min(worst_hi, hi - mid)
        A = w2_shrink_map(cov)
        c = x - m.mean
        cost = float(np.mean(np.sum((c - c @ A.T) ** 2, axis=1)))
        lam_max = float(sym_eig(A @ cov @ A).eigenvalues[0])
        worst_map = max(worst_map, abs(cost - mid) / max(1.0, mid), lam_max - 1.0)
    return [
        Check("sandwich_lower", worst_lo >= -1e-8, f"min slack {worst_lo:.3g}"),
        Check("sandwich_upper", worst_hi >= -1e-8, f"min slack {worst_hi:.3g}"),
        Check("shrink_map", worst_map <= 1e-8, f"max violation {worst_map:.3g}"),
    ]


def suite_lemma_decompose(seed: int = 0, instances: int = 50, n: int = 100,
                          taus=(0.1, 0.3)):
    rng = np.random.default_rng(seed)
    fails = {"w1": 0, "w2": 0, "tv": 0}
    for i in range(instances):
        d = int(rng.integers(1, 4))
        p = DiscreteMeasure(rng.standard_normal((n, d)))
        shift = rng.standard_normal((n, d)) * rng.exponential(0.5, size=(n, 1))
        q = DiscreteMeasure(p.points + shift)
        _, coupling = wp_exact(p, q, 1, max_size=None)
        for tau in taus:
            res = adv.check_decomposition(p, q, coupling, tau, tol=1e-8)
            for key in fails:
                fails[key] += not res[f"{key}_ok"]
    total = instances * len(taus)
    return [Check(f"decompose_{k}", v == 0, f"{total - v}/{total} pass") for k, v in fails.items()]


def suite_resilience(seed: int = 0, instances: int = 50, eps_grid=None):
    """Large-eps identity and the p-th order chain on 1-D measures.

    The link ``tau <= tau_1`` is false in general (``Unif{-1, 1}`` has
    ``tau_1 = 0``) and is reported without affecting the verdict.
    """
    eps_grid = eps_grid or [round(0.1 * j, 1) for j in range(1, 10)]
    rng = np.random.default_rng(seed)
    worst_id, chain2_fail, chain1_fail, count = 0.0, 0, 0, 0
    for _ in range(instances):
        n = int(rng.integers(2, 30))
        p = DiscreteMeasure(rng.standard_normal(n) * rng.exponential(1.0, n), rng.random(n) + 0.05)
        for e in eps_grid:
            count += 1
            t = mean_resilience_1d(p, e)
            lhs = mean_resilience_1d(p, 1 - e)
            worst_id = max(worst_id, abs(lhs - (1 - e) / e * t))
            t1 = pth_order_resilience(p, e, 1)
            t2 = pth_order_resilience(p, e, 2)
            chain1_fail += t > t1 + 1e-9
            chain2_fail += t1 > math.sqrt(t2) + 1e-9
    return [
        Check("large_eps_identity", worst_id <= 1e-12, f"max error {worst_id:.3g}"),
        Check("tau1_le_sqrt_tau2", chain2_fail == 0, f"{count - chain2_fail}/{count} pass"),
        Check("tau_le_tau1", chain1_fail == 0, f"{count - chain1_fail}/{count} pass "
              "(false in general; informational)", informational=True),
    ]


def random_loss(rng, d: int, k: int, inner: str) -> LossSpec:
    return LossSpec(rng.standard_normal((k, d)), rng.standard_normal(k), inner)


def suite_wdro_equiv(seed: int = 0, instances: int = 50, d: int = 4, k: int = 1):
    rng = np.random.default_rng(seed)
    worst_eq = worst_reg = 0.0
    for _ in range(instances):
        n = int(rng.integers(5, 40))
        p = DiscreteMeasure(rng.standard_normal((n, d)) * 2.0)
        tau = float(rng.exponential(1.0))
        for inner in ("hinge", "absolute"):
            loss = random_loss(rng, d, k, inner)
            lhs, rhs = pushforward_equivalence_check(p, loss, tau)
            worst_eq = max(worst_eq, abs(lhs - rhs))
            reg = dro_value_w1(p, loss, tau) - loss.expectation(p)
            worst_reg = max(worst_reg, abs(reg - tau * loss.lip_const))
    return [
        Check("pushforward_equality", worst_eq <= 1e-6, f"max |lhs - rhs| {worst_eq:.3g}"),
        Check("regularizer_identity", worst_reg <= 1e-9, f"max error {worst_reg:.3g}"),
    ]


def suite_budgets(data_dir):
    """Re-certify every ``plan.json`` under a ``cmd_simulate`` output tree."""
    root = Path(data_dir)
    plans = sorted(root.glob("trial_*/cell_*/plan.json"))
    if not plans:
        return [Check("budgets", False, f"no plan.json found under {root}")]
    checks = []
    for plan_path in plans:
        cdir = plan_path.parent
        clean = read_csv(cdir.parent / "clean.csv")
        bad = read_csv(cdir / "corrupted.csv")
        plan = adv.CorruptionPlan.from_json(plan_path)
        exact = (clean.size + 1) ** 2 <= 10**6
        cert = adv.certify_budgets(clean, bad, plan, exact=exact)
        detail = f"tv {cert['tv_count']}, local {cert['local_average']:.6g} <= {plan.rho:g}"
        if exact:
            detail += f", RW1 {cert['robust_w1']:.6g}"
        checks.append(Check(str(cdir.relative_to(root)), cert["ok"], detail))
    return checks


def cmd_verify(suite: str, seed: int = 0, data_dir=None) -> List[Check]:
    if suite == "budgets":
        if data_dir is None:
            raise ConfigError("the budgets suite needs data_dir (a simulate output)")
        return suite_budgets(data_dir)
    table = {"lemma_sandwich": suite_lemma_sandwich, "lemma_decompose": suite_lemma_decompose,
             "resilience": suite_resilience, "wdro_equiv": suite_wdro_equiv}
    if suite not in table:
        raise ConfigError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    return table[suite](seed)
