import numpy as np
import pytest
from hypothesis import given, strategies as st

from beamopt import solvers
from beamopt.errors import ContractError, ConvergenceError, InfeasibleError
from beamopt.recovery import construct_p3
from beamopt.sysmodel import (
    SystemConfig,
    db_to_linear,
    generate_channels,
    sinr_downlink,
    sinr_uplink,
    total_power,
    weighted_sum_rate,
)

from conftest import complex_normal
from oracles import (
    balancing_grid_oracle,
    downlink_sinr_loops,
    mmse_uplink_sinr,
    perron_root_charpoly,
    power_min_grid_oracle,
)

CFG = SystemConfig(6, 4, p_max=0.1, sinr_targets=db_to_linear(5.0))


def _hs(cfg, count, seed, pathloss=True):
    return np.stack([s.h for s in generate_channels(cfg, count, seed, with_pathloss=pathloss)])


def test_hpd_solve_matches_dense_solve(rng):
    a = complex_normal(rng, 5, 5)
    t = a @ a.conj().T + np.eye(5)
    b = complex_normal(rng, 5, 3)
    assert np.allclose(solvers.hpd_solve(t, b), np.linalg.solve(t, b))
    ts = np.stack([t, 2 * t])
    bs = np.stack([b, b])
    assert np.allclose(solvers.hpd_solve(ts, bs)[1], np.linalg.solve(2 * t, b))


@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_power_iteration_matches_characteristic_polynomial(n, seed):
    m = np.random.default_rng(seed).random((n, n)) + 0.05
    psi, v = solvers.dominant_eig(m)
    assert psi == pytest.approx(perron_root_charpoly(m), rel=1e-8)
    assert v[-1] == 1.0 and np.all(v > 0)
    assert np.allclose(m @ v, psi * v, rtol=1e-6)


def test_power_iteration_contracts():
    with pytest.raises(ContractError):
        solvers.dominant_eig(-np.eye(2))
    # eigenvalues 1 and 0.999: far too slow for 50 steps
    m = np.array([[1.0, 0.0, 0.0], [0.0, 0.999, 0.0], [1.0, 1.0, 0.5]])
    with pytest.raises(ConvergenceError) as err:
        solvers.dominant_eig(m, max_iter=50)
    assert err.value.last is not None
    psi, v = solvers.perron_pair(m, max_iter=50)
    assert psi == pytest.approx(1.0, rel=1e-12)
    assert np.allclose(m @ v, v)


def test_upsilon_eigenvector_balances_the_downlink(rng):
    h = _hs(CFG, 1, 3)[0]
    wt = solvers.normalize_columns(complex_normal(rng, 6, 4))
    rho = np.array([1.0, 2.0, 1.0, 0.5])
    p, psi = solvers.balance_downlink_powers(wt, h, rho, CFG.noise_power, CFG.p_max)
    assert p.sum() == pytest.approx(CFG.p_max, rel=1e-10)
    gamma = downlink_sinr_loops(h, solvers.apply_powers(wt, p), CFG.noise_power)
    assert np.allclose(gamma / rho, 1.0 / psi, rtol=1e-7)


def test_balancing_duality_and_eigen_optimality():
    sol = solvers.solve_sinr_balancing_batch(_hs(CFG, 60, 11), CFG)
    assert np.all(sol.converged)
    hs = _hs(CFG, 60, 11)
    for i in range(60):
        ul = sinr_uplink(hs[i], sol.w_tilde_star[i], sol.q_star[i], CFG.noise_power)
        dl = sinr_downlink(hs[i], sol.w_star[i], CFG.noise_power)
        assert abs(dl.min() - ul.min()) / ul.min() < 1e-6
        assert dl.max() / dl.min() - 1 < 1e-6
    assert np.allclose(sol.balanced_value * sol.eigenvalue, 1.0, atol=1e-8)
    assert np.allclose(sol.q_star.sum(-1), CFG.p_max)


def test_balancing_psi_is_nonincreasing():
    sol = solvers.solve_sinr_balancing(_hs(CFG, 1, 4)[0], CFG, track=True)
    traj = np.array(sol.psi_trajectory)
    assert np.all(np.diff(traj) <= 1e-12 * traj[:-1])


def test_two_user_oracles():
    cfg = SystemConfig(2, 2, p_max=0.1, sinr_targets=db_to_linear(5.0))
    for s in generate_channels(cfg, 4, seed=21):
        b = solvers.solve_sinr_balancing(s.h, cfg)
        grid = balancing_grid_oracle(s.h, cfg.noise_power, cfg.p_max, cfg.stream_weights)
        assert b.balanced_value == pytest.approx(grid, rel=1e-3)
        p = solvers.solve_power_min(s.h, cfg)
        grid = power_min_grid_oracle(s.h, cfg.noise_power, cfg.sinr_targets)
        assert p.total_power == pytest.approx(grid, rel=1e-3)


def test_interference_function_definition(rng):
    h = complex_normal(rng, 3, 3)
    q = rng.random(3) + 0.1
    gamma_t = np.array([1.0, 2.0, 3.0])
    expected = gamma_t * q / mmse_uplink_sinr(h, q, 0.5)
    assert np.allclose(solvers.interference_function(h, q, gamma_t, 0.5), expected)


def test_power_min_meets_targets_with_equality():
    hs = _hs(CFG, 80, 5)
    sol = solvers.solve_power_min_batch(hs, CFG)
    ok = sol.status == solvers.STATUS_OK
    assert ok.mean() > 0.9
    gamma = sinr_downlink(hs[ok], sol.w_star[ok], CFG.noise_power)
    assert np.allclose(gamma, CFG.sinr_targets, rtol=1e-6)
    assert np.allclose(sol.q_star[ok].sum(-1), sol.p_star[ok].sum(-1), rtol=1e-6)
    assert np.allclose(total_power(sol.w_star[ok]), sol.total_power[ok], rtol=1e-9)


def test_power_min_trajectory_is_monotone():
    sol = solvers.solve_power_min(_hs(CFG, 1, 8)[0], CFG, track=True)
    traj = np.array(sol.q_trajectory)
    assert np.all(np.diff(traj, axis=0) >= -1e-15)


def test_power_min_reports_infeasible_targets():
    cfg = SystemConfig(1, 2, sinr_targets=db_to_linear(10.0))
    h = _hs(cfg, 1, 0)[0]
    with pytest.raises(InfeasibleError):
        solvers.solve_power_min(h, cfg)


@pytest.mark.parametrize("step", ["scaled", "bisection"])
def test_wmmse_rate_is_nondecreasing(step):
    cfg = CFG.replace(p_max=1.0)
    sol = solvers.solve_wmmse_batch(_hs(cfg, 40, 2), cfg, power_step=step)
    for traj in sol.rate_trajectory:
        assert np.all(np.diff(traj) >= -1e-9)
    assert np.allclose(total_power(sol.w), cfg.p_max, rtol=1e-8)


def test_wmmse_directions_match_the_structure():
    cfg = CFG.replace(p_max=1.0)
    hs = _hs(cfg, 40, 3)
    sol = solvers.solve_wmmse_batch(hs, cfg)
    w = construct_p3(sol.p, sol.lam, hs, cfg.noise_power)
    cos = np.abs(np.sum(w.conj() * sol.w, axis=1)) / (np.linalg.norm(w, axis=1) * np.linalg.norm(sol.w, axis=1))
    assert cos.min() > 0.999
    assert np.allclose(sol.lam.sum(-1), cfg.p_max)


def test_wmmse_improves_on_its_start():
    hs = _hs(CFG, 30, 9)
    start = solvers.rzf_beamforming(hs, CFG)
    sol = solvers.solve_wmmse_batch(hs, CFG)
    r0 = weighted_sum_rate(hs, start, CFG.rate_weights, CFG.noise_power)
    r1 = weighted_sum_rate(hs, sol.w, CFG.rate_weights, CFG.noise_power)
    assert np.all(r1 >= r0 - 1e-9)


def test_wmmse_rejects_oversized_start(rng):
    h = complex_normal(rng, 6, 4)
    with pytest.raises(ContractError):
        solvers.solve_wmmse(h, CFG, w_init=10 * h)


def test_zf_nulls_interference_and_meets_targets():
    hs = _hs(CFG, 20, 1)
    wt = solvers.zf_directions(hs)
    g = np.abs(np.swapaxes(hs, 1, 2).conj() @ wt) ** 2
    off = g * (1 - np.eye(4))
    assert np.all(off <= 1e-20 * g.max())
    w = solvers.zf_power_min(hs, CFG)
    assert np.allclose(sinr_downlink(hs, w, CFG.noise_power), CFG.sinr_targets)
    w = solvers.zf_balanced_power(hs, CFG)
    gamma = sinr_downlink(hs, w, CFG.noise_power)
    assert np.allclose(gamma.min(-1), gamma.max(-1))
    assert np.allclose(total_power(w), CFG.p_max)
    with pytest.raises(ContractError):
        solvers.zf_directions(complex_normal(np.random.default_rng(0), 2, 3))


def test_rzf_with_tiny_regulariser_is_mrt(rng):
    h = complex_normal(rng, 4, 3)
    cfg = CFG.replace(n_antennas=4, n_users=3)
    w = solvers.rzf_beamforming(h, cfg, lam_split=np.full(3, 1e-12 * cfg.noise_power))
    assert np.allclose(w, solvers.mrt_beamforming(h, cfg))
    with pytest.raises(ValueError):
        SystemConfig(4, 2, sinr_targets=[1.0, 2.0]).replace(n_users=3)


def test_optimal_beats_baselines():
    hs = _hs(CFG, 50, 12)
    bal = solvers.solve_sinr_balancing_batch(hs, CFG).balanced_value
    zf = sinr_downlink(hs, solvers.zf_balanced_power(hs, CFG), CFG.noise_power).min(-1)
    rzf = sinr_downlink(hs, solvers.rzf_balanced(hs, CFG), CFG.noise_power).min(-1)
    assert np.all(bal >= zf * (1 - 1e-6)) and np.all(bal >= rzf * (1 - 1e-6))


def test_power_min_stop_rules_agree():
    hs = _hs(CFG, 30, 6)
    ref = solvers.solve_power_min_batch(hs, CFG, tol=1e-9)
    dl = solvers.solve_power_min_batch(hs, CFG, tol=1e-6, stop_rule="downlink")
    ok = (ref.status == solvers.STATUS_OK) & (dl.status == solvers.STATUS_OK)
    assert ok.mean() > 0.9
    assert np.allclose(dl.total_power[ok], ref.total_power[ok], rtol=1e-4)
    loose = solvers.solve_power_min_batch(hs, CFG, tol=1e-2, stop_rule="downlink")
    assert np.all(loose.iterations <= dl.iterations)
    with pytest.raises(ContractError):
        solvers.solve_power_min_batch(hs, CFG, stop_rule="never")
