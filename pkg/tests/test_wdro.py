import json

import numpy as np
import pytest

cp = pytest.importorskip("cvxpy")

from oracles import dro_displacement_ascent  # noqa: E402
from robust_transport.adversary import Cluster, tv_corrupt  # noqa: E402
from robust_transport.filtering import FilterConfig  # noqa: E402
from robust_transport.measures import DiscreteMeasure, MeasureError  # noqa: E402
from robust_transport.wdro import (DROConfig, LossFamily, LossSpec, OptConfig, WDROError,  # noqa: E402
                                   dro_value_w1, erm, excess_risk, fit_dro, or_wdro_fit,
                                   pushforward_equivalence_check, reduce_loss)


def regression_data(rng, n, d, noise=0.5):
    X = rng.standard_normal((n, d))
    X[:, -1] = X[:, 0] + noise * rng.standard_normal(n)
    return DiscreteMeasure(X)


# -------------------------------------------------------------------- losses


def test_lossspec_validation_and_roundtrip():
    with pytest.raises(WDROError):
        LossSpec(np.ones((2, 3)), np.ones(1), "linear")
    with pytest.raises(WDROError):
        LossSpec(np.ones((1, 3)), np.ones(1), "huber")
    loss = LossSpec(np.array([[1.0, -2.0, 0.5]]), [0.3], "absolute")
    back = LossSpec.from_dict(json.loads(json.dumps(loss.to_dict())))
    assert np.array_equal(back.A, loss.A) and back.inner == "absolute"
    with pytest.raises(MeasureError):
        loss.expectation(DiscreteMeasure([[0.0, 1.0]]))


@pytest.mark.parametrize("inner", ["linear", "absolute", "hinge"])
def test_lip_const_is_tight_upper_bound(inner):
    rng = np.random.default_rng(0)
    for k in (1, 2, 3):
        loss = LossSpec(rng.standard_normal((k, 4)), rng.standard_normal(k), inner)
        x = rng.standard_normal((500, 4)) * 3
        y = rng.standard_normal((500, 4)) * 3
        ratio = np.abs(loss(x) - loss(y)) / np.linalg.norm(x - y, axis=1)
        assert ratio.max() <= loss.lip_const + 1e-12
        # Far along the steepest ray the difference quotient reaches the constant.
        if inner == "absolute":
            v = np.linalg.svd(loss.A)[2][0]
        else:
            v = loss.A.sum(axis=0) / np.linalg.norm(loss.A.sum(axis=0))
            v = -v if inner == "hinge" else v
        z = np.zeros(4)
        q = abs(loss(z + 1e4 * v)[0] - loss(z + 2e4 * v)[0]) / 1e4
        assert q == pytest.approx(loss.lip_const, rel=1e-6)


def test_dro_value_examples():
    p = DiscreteMeasure([[0.0]])
    absval = LossSpec([[1.0]], [0.0], "absolute")
    assert dro_value_w1(p, absval, 2.0) == pytest.approx(2.0)
    rng = np.random.default_rng(1)
    m = DiscreteMeasure(rng.standard_normal((20, 3)))
    loss = LossSpec(rng.standard_normal((1, 3)), [0.1], "hinge")
    assert dro_value_w1(m, loss, 0.0) == loss.expectation(m)
    with pytest.raises(WDROError):
        dro_value_w1(m, loss, -1.0)
    with pytest.raises(WDROError):
        DROConfig(-0.1)
    with pytest.raises(WDROError):
        DROConfig(0.1, p=2)


def test_dro_value_monotone_with_slope_lip():
    rng = np.random.default_rng(2)
    m = DiscreteMeasure(rng.standard_normal((15, 2)))
    loss = LossSpec(rng.standard_normal((2, 2)), rng.standard_normal(2), "absolute")
    taus = np.linspace(0, 3, 13)
    vals = np.array([dro_value_w1(m, loss, t) for t in taus])
    assert np.all(np.diff(vals) >= 0)
    assert np.allclose(np.diff(vals) / np.diff(taus), loss.lip_const)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_linear_dro_matches_displacement_ascent(d):
    rng = np.random.default_rng(d)
    for _ in range(3):
        m = DiscreteMeasure(rng.standard_normal((12, d)))
        theta = rng.standard_normal(d)
        loss = LossSpec(theta[None, :], [0.2], "linear")
        tau = float(rng.uniform(0.1, 2.0))
        brute = dro_displacement_ascent(m.points, loss, lambda z: np.tile(theta, (len(z), 1)),
                                        tau, steps=300)
        assert dro_value_w1(m, loss, tau) == pytest.approx(brute, abs=1e-3)


@pytest.mark.parametrize("inner", ["absolute", "hinge"])
def test_ascent_never_beats_closed_form(inner):
    rng = np.random.default_rng(5)
    for _ in range(3):
        m = DiscreteMeasure(rng.standard_normal((10, 2)))
        loss = LossSpec(rng.standard_normal((1, 2)), rng.standard_normal(1), inner)
        tau = float(rng.uniform(0.1, 2.0))

        def grad(z, loss=loss):
            s = z @ loss.A.T + loss.b
            if inner == "absolute":
                return np.sign(s) * loss.A[0]
            return -(s[:, 0] < 1).astype(float)[:, None] * loss.A[0]

        brute = dro_displacement_ascent(m.points, loss, grad, tau, steps=500)
        closed = dro_value_w1(m, loss, tau)
        assert brute <= closed + 1e-9
        # One point carrying the whole budget already gets within 1/n of the sup.
        assert brute >= closed - np.max(np.abs(loss(m.points))) / m.size - 1e-9


# -------------------------------------------------------------- reduction


def test_reduce_loss_factorization():
    rng = np.random.default_rng(3)
    for k, d in ((1, 4), (2, 4), (4, 4), (5, 3)):
        loss = LossSpec(rng.standard_normal((k, d)), rng.standard_normal(k), "absolute")
        U, red = reduce_loss(loss)
        assert np.allclose(U @ U.T, np.eye(U.shape[0]), atol=1e-12)
        z = rng.standard_normal((30, d))
        assert np.allclose(red(z @ U.T), loss(z), atol=1e-12)
        assert red.lip_const == pytest.approx(loss.lip_const, rel=1e-12)


def test_reduce_rank_deficient():
    A = np.array([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0]])
    U, red = reduce_loss(LossSpec(A, [0.0, 1.0], "absolute"))
    assert U.shape == (1, 3)
    U0, red0 = reduce_loss(LossSpec(np.zeros((1, 3)), [1.0], "hinge"))
    assert red0.lip_const == 0.0


@pytest.mark.parametrize("inner", ["hinge", "absolute", "linear"])
def test_pushforward_equivalence(inner):
    rng = np.random.default_rng(4)
    for _ in range(50):
        m = DiscreteMeasure(rng.standard_normal((int(rng.integers(3, 30)), 4)))
        loss = LossSpec(rng.standard_normal((1, 4)), rng.standard_normal(1), inner)
        tau = float(rng.exponential())
        lhs, rhs = pushforward_equivalence_check(m, loss, tau)
        assert abs(lhs - rhs) <= 1e-6
        zero = pushforward_equivalence_check(m, loss, 0.0)
        assert zero[0] == pytest.approx(loss.expectation(m), abs=1e-12)
        assert zero[1] == pytest.approx(loss.expectation(m), abs=1e-9)
        assert dro_value_w1(m, loss, tau) - loss.expectation(m) == pytest.approx(
            tau * loss.lip_const, abs=1e-9)


def test_full_rank_identity_reduction():
    rng = np.random.default_rng(6)
    m = DiscreteMeasure(rng.standard_normal((10, 3)))
    loss = LossSpec(np.eye(3), np.zeros(3), "absolute")
    lhs, rhs = pushforward_equivalence_check(m, loss, 0.7)
    assert lhs == pytest.approx(rhs, abs=1e-12)


# ---------------------------------------------------------------- fitting


def cvx_objective(family, m, tau):
    Z, w = m.points, m.weights
    th = cp.Variable(family.n_params)
    if family.name == "absolute_regression":
        res = Z[:, :-1] @ th[:-1] + th[-1] - Z[:, -1]
        obj = w @ cp.abs(res) + tau * cp.norm(cp.hstack([th[:-1], np.array([-1.0])]))
        cons = []
    else:
        obj = w @ cp.pos(1 - Z @ th) + tau * cp.norm(th)
        cons = [cp.abs(th) <= family.radius]
    prob = cp.Problem(cp.Minimize(obj), cons)
    prob.solve(solver="CLARABEL")
    return prob.value


def test_erm_matches_cvx():
    rng = np.random.default_rng(7)
    m = regression_data(rng, 300, 4)
    fam = LossFamily("absolute_regression", 4)
    assert fam.objective(erm(fam, m), m, 0.0) == pytest.approx(cvx_objective(fam, m, 0.0), abs=1e-7)
    y = np.sign(rng.standard_normal(300))
    X = rng.standard_normal((300, 3)) + 0.7 * y[:, None]
    hm = DiscreteMeasure(y[:, None] * X)
    hf = LossFamily("hinge", 3, radius=2.0)
    assert hf.objective(erm(hf, hm), hm, 0.0) == pytest.approx(cvx_objective(hf, hm, 0.0), abs=1e-7)


@pytest.mark.parametrize("tau", [0.05, 0.2, 1.0])
def test_fit_dro_reaches_optimum(tau):
    rng = np.random.default_rng(8)
    m = regression_data(rng, 400, 5)
    fam = LossFamily("absolute_regression", 5)
    res = fit_dro(m, fam, tau)
    ref = cvx_objective(fam, m, tau)
    assert res.converged
    assert res.objective == pytest.approx(fam.objective(res.params, m, tau), abs=1e-12)
    assert ref - 1e-7 <= res.objective <= ref + 1e-6


@pytest.mark.parametrize("tau", [0.05, 0.3])
def test_fit_dro_hinge_reaches_optimum(tau):
    rng = np.random.default_rng(9)
    y = np.sign(rng.standard_normal(300))
    X = rng.standard_normal((300, 3)) + 0.5 * y[:, None]
    m = DiscreteMeasure(y[:, None] * X)
    fam = LossFamily("hinge", 3, radius=2.0)
    res = fit_dro(m, fam, tau)
    ref = cvx_objective(fam, m, tau)
    assert ref - 1e-7 <= res.objective <= ref + 1e-6


def test_zero_budgets_give_erm():
    rng = np.random.default_rng(10)
    m = regression_data(rng, 200, 3)
    fam = LossFamily("absolute_regression", 3)
    res = or_wdro_fit(m, 0.0, 0.0, fam, 0.0)
    assert np.array_equal(res.params, erm(fam, m))
    assert res.filter_report.status == "bypass"


def test_location_family_median():
    x = np.array([0.0, 1.0, 2.0, 10.0, 11.0])
    m = DiscreteMeasure(x[:, None])
    fam = LossFamily("absolute_regression", 1)
    for tau in (0.0, 0.5, 3.0):
        res = fit_dro(m, fam, tau)
        assert res.params[-1] == pytest.approx(2.0, abs=1e-3)


def test_linear_family_closed_form():
    m = DiscreteMeasure([[1.0, 0.0], [3.0, 0.0]])
    fam = LossFamily("linear", 2, radius=2.0)
    assert np.allclose(erm(fam, m), [-2.0, 0.0])


def test_family_errors():
    with pytest.raises(WDROError):
        LossFamily("quantile", 2)
    fam = LossFamily("hinge", 2)
    with pytest.raises(WDROError):
        fam.loss([1.0, 2.0, 3.0])
    with pytest.raises(MeasureError):
        erm(fam, DiscreteMeasure([[0.0, 1.0, 2.0]]))
    with pytest.raises(WDROError):
        fit_dro(DiscreteMeasure([[0.0, 1.0]]), fam, -1.0)


def test_excess_risk_examples():
    rng = np.random.default_rng(11)
    m = regression_data(rng, 300, 3)
    fam = LossFamily("absolute_regression", 3)
    best = fam.loss(erm(fam, m))
    assert excess_risk(best, best, m) == 0.0
    for _ in range(10):
        other = fam.loss(rng.standard_normal(3))
        assert excess_risk(other, best, m) >= -1e-9


def test_or_wdro_pipeline_fixture():
    rng = np.random.default_rng(12)
    d = 10
    clean = regression_data(rng, 1000, d)
    u = np.zeros(d)
    u[0], u[-1] = 1.0, -1.0
    corrupted, _ = tv_corrupt(clean, 0.05, Cluster(10 * np.sqrt(d), u / np.sqrt(2)), 13)
    fam = LossFamily("absolute_regression", d)
    tau = 0.3
    res = or_wdro_fit(corrupted, 0.05, 0.0, fam, tau, filter_cfg=FilterConfig.practical(0.05, seed=14))
    star = fam.loss(erm(fam, clean))
    risk = excess_risk(res.loss, star, clean)
    assert 0 <= risk <= 2 * star.lip_const * tau
    naive = fit_dro(corrupted, fam, tau)
    assert excess_risk(naive.loss, star, clean) > risk
    d_json = res.to_dict()
    assert d_json["family"] == "absolute_regression" and len(d_json["params"]) == d


def test_or_wdro_budget_mismatch():
    m = DiscreteMeasure(np.random.default_rng(0).standard_normal((50, 2)))
    with pytest.raises(WDROError):
        or_wdro_fit(m, 0.1, 0.0, LossFamily("absolute_regression", 2), 0.1,
                    filter_cfg=FilterConfig.practical(0.05))


def test_opt_config_budget_respected():
    rng = np.random.default_rng(15)
    m = regression_data(rng, 100, 3)
    res = fit_dro(m, LossFamily("absolute_regression", 3), 0.2,
                  OptConfig(max_iters=5, patience=10**6))
    assert not res.converged and res.iterations == 5 * len(OptConfig().stages)
