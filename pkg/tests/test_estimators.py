from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asclt_lab.estimators import (
    CLSState,
    ErrorLedger,
    LSState,
    cls_mean_update,
    cls_variance_update,
    corollary_report,
    eta_error_report,
    eta_error_statistic,
    ledger_checkpoints,
    ls_update,
    update_ledger,
)
from asclt_lab.kernels import replay
from asclt_lab.martingale import check_step_identities
from asclt_lab.models import (
    ARSpec,
    BranchingSpec,
    CountLaw,
    NoiseSpec,
    branching_trajectory,
    limiting_matrix_ar,
    simulate_ar,
    simulate_branching,
)


def test_ls_hand_step():
    st_ = LSState.start(np.eye(1), true_theta=[2.0])
    st_, resid, rec = ls_update(st_, [1.0], 2.0)
    assert resid == 2.0
    assert st_.theta_hat[0] == pytest.approx(1.0)
    # theta_hat_1 - theta = S_0^{-1} M_1 with M_1 = M_0 = -2 and S_0 = 2
    np.testing.assert_array_equal(st_.transform.M, [-2.0])
    assert st_.theta_error[0] == pytest.approx(st_.gram.S_inv[0, 0] * st_.transform.M[0]) == pytest.approx(-1.0)
    assert rec.pi == pytest.approx(2.0)


def test_noiseless_error_identity():
    rng = np.random.default_rng(1)
    theta = np.array([0.7, -0.3])
    st_ = LSState.start(np.eye(2), true_theta=theta)
    for _ in range(200):
        phi = rng.normal(size=2)
        st_.update(phi, float(theta @ phi))
        np.testing.assert_allclose(st_.theta_error, -st_.gram.S_inv @ theta, atol=1e-12)
    assert np.linalg.norm(st_.theta_error) < 0.01


def test_random_d3_normal_equations():
    rng = np.random.default_rng(2)
    theta = rng.normal(size=3)
    st_ = LSState.start(np.eye(3), true_theta=theta)
    phis = rng.normal(size=(1000, 3))
    xs = phis @ theta + rng.normal(size=1000)
    for k in range(1000):
        st_.update(phis[k], xs[k])
        # S_{n-1}^{-1} M_n at every step
        np.testing.assert_allclose(st_.theta_error, st_.gram.S_inv @ st_.transform.M, rtol=1e-9, atol=1e-12)
    direct = np.linalg.solve(np.eye(3) + phis.T @ phis, phis.T @ xs)
    np.testing.assert_allclose(st_.theta_hat, direct, rtol=1e-8)
    np.testing.assert_allclose(st_.theta_hat, np.linalg.solve(st_.gram.S, st_.b), rtol=1e-9)


def test_pi_identity_per_step():
    rng = np.random.default_rng(3)
    theta = np.array([0.5, 0.4])
    st_ = LSState.start(np.eye(2), true_theta=theta)
    for _ in range(2000):
        phi = rng.normal(size=2)
        eps = rng.normal()
        resid, rec = st_.update(phi, float(theta @ phi) + eps)
        assert rec.pi == pytest.approx(resid - eps, rel=1e-9, abs=1e-12)
        for _, r in check_step_identities(rec):
            assert r <= 1e-9
        # pi equals minus g: the prediction gap is the projected estimation error
        assert rec.pi == pytest.approx(-rec.g, rel=1e-8, abs=1e-12)


def test_unknown_theta_has_no_record():
    st_ = LSState.start(d=2)
    resid, rec = st_.update([1.0, 0.0], 3.0)
    assert rec is None and resid == 3.0 and st_.theta_error is None
    with pytest.raises(ValueError):
        st_.update([np.nan, 0.0], 1.0)


def test_ledger_zero_gap_step():
    led = ErrorLedger()
    update_ledger(led, 1, 0.8, 0.8, np.zeros(2), np.eye(2))
    assert all(v == 0.0 for v in led.pi_2q.values())


def test_ledger_single_step_gap():
    led = ErrorLedger(p_set=(1,), q_set=(1,))
    resid, eps = 1.3, 0.5
    pi = resid - eps
    update_ledger(led, 1, resid, eps, np.array([0.1]), np.eye(1))
    assert led.Gamma(1) - led.Delta(1) == pytest.approx((pi * pi + 2 * pi * eps) / 1)
    assert led.GL[1] == pytest.approx(0.01)


def test_ledger_gamma_equals_C_over_n():
    rng = np.random.default_rng(4)
    led = ErrorLedger(p_set=(1, 2), q_set=(1, 2))
    for k in range(1, 101):
        update_ledger(led, k, rng.normal(), rng.normal(), rng.normal(size=2), np.eye(2))
    for q in (1, 2):
        assert led.Gamma(q) == led.C[q] / led.n


def test_ledger_checkpoints_match_incremental_updates():
    rng = np.random.default_rng(5)
    n = 300
    resid, eps = rng.normal(size=n), rng.normal(size=n)
    err = rng.normal(size=(n, 2)) * 0.1
    L = np.array([[2.0, 0.3], [0.3, 1.0]])
    snaps = ledger_checkpoints(resid, eps, err, L, [50, 300])
    led = ErrorLedger()
    for k in range(n):
        update_ledger(led, k + 1, resid[k], eps[k], err[k], L)
        if k + 1 == 50:
            for p in (1, 2):
                assert led.GL[p] == pytest.approx(snaps[0].GL[p], rel=1e-12)
    for p in (1, 2):
        assert led.C[p] == pytest.approx(snaps[1].C[p], rel=1e-12)
        assert led.G[p] == pytest.approx(snaps[1].G[p], rel=1e-12)
        assert led.GL[p] == pytest.approx(snaps[1].GL[p], rel=1e-12)
    for q in (1, 2):
        assert led.Delta(q) == pytest.approx(snaps[1].Delta(q), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=50))
def test_ledger_monotone(steps):
    led = ErrorLedger()
    prev = None
    for k, (r, e) in enumerate(steps, start=1):
        update_ledger(led, k, r, e, np.array([r - e]), np.eye(1))
        cur = [led.C[1], led.C[2], led.G[1], led.GL[2], led.resid_2q[1], led.eps_2q[2], led.pi_2q[1]]
        assert all(v >= 0 for v in cur)
        if prev is not None:
            assert all(b >= a for a, b in zip(prev, cur))
        prev = cur


def test_zero_noise_report():
    spec = ARSpec((0.5,), NoiseSpec("zero", 0.0))
    traj = simulate_ar(spec, 1000, np.random.default_rng(0))
    rp = replay(traj.phi, traj.eps, traj.x_next, M0=[-0.5], theta=[0.5])
    led = ledger_checkpoints(rp.resid, traj.eps, rp.err, np.eye(1), [1000], f=rp.f, V=rp.V, g=rp.g)[0]
    rep = corollary_report(led, float(rp.log_dets[-1] - rp.log_det0), 0.0, 1, {1: 0.0, 2: 0.0})
    assert rep["status"] == "insufficient data"
    for key, val in rep.items():
        if isinstance(val, float):
            assert val == 0.0 or math.isnan(val), key


def test_corollary_report_without_theta():
    led = ErrorLedger(n=10, C={1: 5.0, 2: 9.0})
    rep = corollary_report(led, 2.0, 1.0, 1, theta_known=False)
    assert math.isnan(rep["res5_1"]) and math.isnan(rep["cvmoy_2"])
    assert rep["C_1"] == 5.0


def test_prediction_moments_at_large_n():
    spec = ARSpec((0.5,))
    traj = simulate_ar(spec, 1_000_000, np.random.default_rng(6))
    rp = replay(traj.phi, traj.eps, traj.x_next, M0=[-0.5], theta=[0.5])
    L = limiting_matrix_ar(spec)
    led = ledger_checkpoints(rp.resid, traj.eps, rp.err, L, [1_000_000], f=rp.f, V=rp.V, g=rp.g)[0]
    rep = corollary_report(led, float(rp.log_dets[-1] - rp.log_det0), 1.0, 1, {1: 1.0, 2: 3.0})
    assert rep["C_1"] / 1_000_000 == pytest.approx(1.0, rel=0.05)
    assert rep["C_2"] / 1_000_000 == pytest.approx(3.0, rel=0.10)
    assert rep["moment_ratio_2"] == pytest.approx(1.0, rel=0.05)


def test_cvmoy_uses_identity_with_S():
    # (theta_hat_k - theta)^T S_k (theta_hat_k - theta) = V_k + g_k^2, the quantity summed into cvmoy
    rng = np.random.default_rng(7)
    theta = np.array([0.3, -0.2])
    st_ = LSState.start(np.eye(2), true_theta=theta)
    for _ in range(300):
        phi = rng.normal(size=2)
        e_prev = st_.theta_error.copy()
        S_prev = st_.gram.S.copy()
        _, rec = st_.update(phi, float(theta @ phi) + rng.normal())
        # V is the S_{k-1}-weighted error of theta_hat_k
        assert rec.V == pytest.approx(e_prev @ S_prev @ e_prev, rel=1e-9, abs=1e-12)
        assert e_prev @ st_.gram.S @ e_prev == pytest.approx(rec.V + rec.g**2, rel=1e-9, abs=1e-12)


def raw_steps(path):
    return list(path.steps())


def test_cls_degenerate_constant_stream():
    st_ = CLSState.start()
    rng = np.random.default_rng(8)
    draws = rng.poisson(1.0, 5000)
    for i in draws:
        st_.update(0, int(i))
    assert st_.theta_hat[1] == pytest.approx(draws.sum() / (len(draws) + 1), rel=1e-9)
    assert np.all(np.isfinite(st_.theta_hat))
    assert abs(st_.theta_hat[0]) < 1e-9


def test_cls_zero_variance_stream():
    spec = BranchingSpec(offspring=CountLaw("constant", 0), immigration=CountLaw("constant", 1))
    path = simulate_branching(spec, 3000, np.random.default_rng(0))
    st_ = CLSState.start(theta=spec.theta, eta=spec.eta)
    for x, nxt, _ in path.steps():
        st_.update(x, nxt)
    assert np.all(np.abs(st_.eta_hat) < 1e-3)
    report = eta_error_report(np.zeros((100, 2)), np.eye(2), 1, [50, 100])
    assert all(r["eta_stat"] == 0.0 for r in report)


def test_cls_object_path_matches_replay_and_normal_equations():
    spec = BranchingSpec()
    path = simulate_branching(spec, 3000, np.random.default_rng(9))
    st_ = CLSState.start(theta=spec.theta, eta=spec.eta)
    eps_hats = []
    for x, nxt, _ in path.steps():
        eps_hats.append(cls_mean_update(st_, x, nxt))
        cls_variance_update(st_, x, eps_hats[-1])
        # weighted transform identity theta_hat - theta = S^{-1} M
        np.testing.assert_allclose(st_.mean.theta_error, st_.S @ np.zeros(2) + st_.mean.gram.S_inv @ st_.mean.transform.M,
                                   rtol=1e-9, atol=1e-12)
    x = path.x[:-1].astype(float)
    nxt = path.x[1:].astype(float)
    c = x + 1.0
    Phi = np.stack((x, np.ones_like(x)), axis=1)
    S = np.eye(2) + (Phi / c[:, None]).T @ Phi
    np.testing.assert_allclose(st_.theta_hat, np.linalg.solve(S, (Phi / c[:, None]).T @ nxt), rtol=1e-9)
    Q = np.eye(2) + (Phi / c[:, None] ** 2).T @ Phi
    rhs = (Phi / c[:, None] ** 2).T @ np.array(eps_hats) ** 2
    np.testing.assert_allclose(st_.Q, Q, rtol=1e-12)
    np.testing.assert_allclose(Q @ st_.eta_hat, rhs, rtol=1e-9)
    traj = branching_trajectory(path, spec)
    rp = replay(traj.phi, traj.eps, traj.x_next, S0=np.eye(2), M0=-spec.theta, theta=spec.theta)
    np.testing.assert_allclose(rp.err[-1] + spec.theta, st_.theta_hat, rtol=1e-9)
    np.testing.assert_allclose(rp.resid * np.sqrt(c), eps_hats, rtol=1e-9, atol=1e-12)


def test_cls_large_n_estimates():
    spec = BranchingSpec()
    path = simulate_branching(spec, 1_000_000, np.random.default_rng(10))
    traj = branching_trajectory(path, spec)
    rp = replay(traj.phi, traj.eps, traj.x_next, S0=np.eye(2), M0=-spec.theta, theta=spec.theta)
    theta_hat = rp.err[-1] + spec.theta
    np.testing.assert_allclose(theta_hat, [0.5, 1.0], rtol=0.02)
    x = path.x[:-1].astype(float)
    c = x + 1.0
    phi_v = np.stack((x, np.ones_like(x)), axis=1) / c[:, None]
    z = (rp.resid * np.sqrt(c)) ** 2 / c
    rv = replay(phi_v, z - phi_v @ spec.eta, z, S0=np.eye(2), M0=-spec.eta, theta=spec.eta)
    np.testing.assert_allclose(rv.err[-1] + spec.eta, [0.5, 1.0], rtol=0.10)
    Lam = np.array([[0.3, 0.2], [0.2, 0.5]])
    stats = [eta_error_statistic(rv.err, Lam, 1, n) for n in (10_000, 100_000, 1_000_000)]
    assert all(math.isfinite(s) for s in stats)
    assert max(stats) <= 10 * min(stats)


@pytest.mark.parametrize("p", [1, 2, 3])
def test_eta_statistic_homogeneity(p):
    rng = np.random.default_rng(p)
    err = rng.normal(size=(500, 2)) * 0.1
    Lam = np.array([[1.0, 0.2], [0.2, 0.5]])
    a = eta_error_statistic(err, Lam, p)
    assert eta_error_statistic(err, 2 * Lam, p) == pytest.approx(2**p * a, rel=1e-12)
    rep = eta_error_report(err, Lam, p, [100, 500], sigma2_candidate=0.5)
    assert rep[-1]["eta_stat"] == pytest.approx(a)
    assert rep[0]["candidate_ell"] > 0
