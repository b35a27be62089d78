import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from beamopt import solvers
from beamopt.errors import ContractError
from beamopt.recovery import construct_p3, intermediates, recover_p1, recover_p2, scale_simplex
from beamopt.sysmodel import SystemConfig, db_to_linear, generate_channels, sinr_downlink, total_power

CFG = SystemConfig(6, 4, p_max=0.1, sinr_targets=db_to_linear(5.0))


def _hs(count, seed):
    return np.stack([s.h for s in generate_channels(CFG, count, seed)])


@given(arrays(float, st.integers(1, 8), elements=st.floats(1e-6, 1e6)), st.floats(1e-3, 1e3))
def test_scale_simplex_lands_on_the_budget(v, p_max):
    out = scale_simplex(v, p_max)
    assert out.sum() == pytest.approx(p_max, rel=1e-12)
    assert np.allclose(out / out.sum(), v / v.sum())


def test_scale_simplex_contracts():
    with pytest.raises(ContractError):
        scale_simplex([1.0, -0.1], 1.0)
    with pytest.raises(ContractError):
        scale_simplex([0.0, 0.0], 1.0)


def test_p1_recovery_from_optimal_powers_is_optimal():
    hs = _hs(30, 1)
    sol = solvers.solve_sinr_balancing_batch(hs, CFG)
    out = recover_p1(sol.q_star, hs, CFG.noise_power, CFG.p_max, CFG.stream_weights)
    assert np.allclose(out.sinr.min(-1), sol.balanced_value, rtol=1e-8)
    assert np.allclose(out.total_power, CFG.p_max)


@given(st.integers(0, 2**31 - 1))
def test_p1_recovery_never_beats_the_optimum(seed):
    hs = _hs(3, seed % 1000)
    q = scale_simplex(np.random.default_rng(seed).random((3, 4)) + 1e-3, CFG.p_max)
    out = recover_p1(q, hs, CFG.noise_power, CFG.p_max, CFG.stream_weights)
    best = solvers.solve_sinr_balancing_batch(hs, CFG).balanced_value
    balanced = out.sinr.min(-1)
    assert np.all(balanced <= best * (1 + 1e-6))
    # balanced downlink: every user ends at the same SINR
    assert np.allclose(out.sinr.max(-1), balanced, rtol=1e-7)
    assert np.allclose(out.total_power, CFG.p_max)


def test_p2_recovery_from_optimal_powers():
    hs = _hs(40, 2)
    sol = solvers.solve_power_min_batch(hs, CFG)
    ok = sol.status == solvers.STATUS_OK
    out = recover_p2(sol.q_star[ok], hs[ok], CFG.noise_power, CFG.sinr_targets)
    assert np.all(out.feasible)
    assert np.allclose(out.total_power, sol.total_power[ok], rtol=1e-8)


@given(st.integers(0, 2**31 - 1), st.floats(0.2, 5.0))
def test_p2_recovered_power_is_at_least_optimal(seed, spread):
    hs = _hs(4, seed % 1000)
    sol = solvers.solve_power_min_batch(hs, CFG)
    ok = sol.status == solvers.STATUS_OK
    noise = np.exp(spread * np.random.default_rng(seed).standard_normal((4, 4)) / 5)
    out = recover_p2(sol.q_star * noise, hs, CFG.noise_power, CFG.sinr_targets)
    good = out.feasible & ok
    assert np.all(out.total_power[good] >= sol.total_power[good] * (1 - 1e-9))
    gamma = sinr_downlink(hs[good], out.w[good], CFG.noise_power)
    assert np.allclose(gamma, CFG.sinr_targets, rtol=1e-6)


def test_p2_recovery_flags():
    # N = 1 cannot serve two users at 10 dB: the linear system yields a negative power
    cfg = SystemConfig(1, 2, sinr_targets=db_to_linear(10.0))
    h = np.stack([s.h for s in generate_channels(cfg, 5, 0)])
    out = recover_p2(np.full((5, 2), 1e-3), h, cfg.noise_power, cfg.sinr_targets)
    assert not np.any(out.feasible)
    assert np.all(out.negative_power)
    with pytest.raises(ContractError):
        recover_p2(-np.ones(4), _hs(1, 0)[0], CFG.noise_power, CFG.sinr_targets)


def test_p3_construction(rng=np.random.default_rng(3)):
    h = _hs(1, 3)[0]
    p = scale_simplex(rng.random(4), 1.0)
    lam = scale_simplex(rng.random(4), 1.0)
    w = construct_p3(p, lam, h, CFG.noise_power)
    assert np.allclose(np.linalg.norm(w, axis=0) ** 2, p)
    assert total_power(w) == pytest.approx(1.0)
    # direction k is proportional to (I + sum lam_j/sigma^2 h_j h_j^H)^{-1} h_k
    a = np.eye(6) + sum(lam[j] / CFG.noise_power * np.outer(h[:, j], h[:, j].conj()) for j in range(4))
    d = np.linalg.solve(a, h)
    for k in range(4):
        cos = abs(np.vdot(d[:, k], w[:, k])) / (np.linalg.norm(d[:, k]) * np.linalg.norm(w[:, k]))
        assert cos == pytest.approx(1.0, abs=1e-10)


def test_intermediates():
    h = _hs(1, 4)[0]
    q = np.full(4, CFG.p_max / 4)
    out = intermediates(q, h, CFG.noise_power, CFG.p_max, CFG.stream_weights, CFG.sinr_targets)
    t = CFG.noise_power * np.eye(6) + sum(q[k] * np.outer(h[:, k], h[:, k].conj()) for k in range(4))
    assert np.allclose(out.t_matrix, t)
    assert out.upsilon.shape == (5, 5) and np.all(out.upsilon >= 0)
    assert out.psi.shape == (4, 4)
