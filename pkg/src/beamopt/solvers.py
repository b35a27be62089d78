"""Exact iterative solvers and closed-form baselines.

* SINR balancing under a sum-power budget: alternating uplink MMSE receive
  filters and Perron eigenvector power updates.
* Power minimisation under SINR floors: fixed-point iteration of the
  standard interference function, then downlink powers by linear solve.
* Weighted sum-rate maximisation: WMMSE block-coordinate ascent.
* ZF / RZF / MRT baselines.

The batch functions take channel stacks ``(F, N, K)`` and run each sample to
its own stopping point; the single-sample wrappers raise on failure.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ContractError, ConvergenceError, DegenerateChannelError, InfeasibleError
from .sysmodel import SystemConfig, _as_array, sinr_downlink, total_power, weighted_sum_rate

SOLVER_TOL = 1e-6
EIG_TOL = 1e-10
SOLVER_MAX_ITER = 500
EIG_MAX_ITER = 1000
WMMSE_MAX_ITER = 10
WMMSE_RATE_TOL = 1e-5

# convergence-threshold presets used by the timing experiments
EPS_PRESETS = {"1e-2": 1e-2, "1e-4": 1e-4}


def _herm(a):
    return np.swapaxes(a, -1, -2).conj()


@functools.lru_cache(maxsize=64)
def _eye(n):
    """Shared read-only identity; the per-sample timing path calls this a lot."""
    e = np.eye(n)
    e.flags.writeable = False
    return e


def hpd_solve(t, b):
    """Solve ``T x = b`` for Hermitian positive-definite ``T``.

    Single matrices go through a Cholesky factorisation.  Stacks use
    ``numpy.linalg.solve`` because numpy has no batched triangular solve.
    """
    if t.ndim == 2:
        c = scipy.linalg.cho_factor(t, lower=True, check_finite=False)
        return scipy.linalg.cho_solve(c, b, check_finite=False)
    return np.linalg.solve(t, b)


def covariance(h, q, noise_power):
    """``T = sigma^2 I + sum_k q_k h_k h_k^H`` for ``h`` of shape ``(..., N, K)``."""
    t = (h * np.asarray(q)[..., None, :]) @ _herm(h)
    t += noise_power * _eye(h.shape[-2])
    return t


def normalize_columns(w):
    norms = np.linalg.norm(w, axis=-2, keepdims=True)
    if not norms.all():
        raise DegenerateChannelError("zero beamforming direction")
    return w / norms


def mmse_directions(h, q, noise_power):
    """Unit-norm uplink MMSE receive filters ``T^{-1} h_k / ||T^{-1} h_k||``."""
    return normalize_columns(hpd_solve(covariance(h, q, noise_power), h))


def _coupling(h, w_tilde):
    g = np.abs(_herm(h) @ w_tilde) ** 2  # g[k, j] = |h_k^H w_j|^2
    diag = np.diagonal(g, axis1=-2, axis2=-1)
    if np.any(diag <= 0):
        raise DegenerateChannelError("|w_k^H h_k| = 0 for some user")
    k = g.shape[-1]
    off = g * (1.0 - np.eye(k))
    return diag, off


def _extended(d, du, noise_power, p_max):
    k = d.shape[-1]
    top = np.concatenate([du, (d * noise_power)[..., :, None]], axis=-1)
    bottom = top.sum(axis=-2, keepdims=True) / p_max
    return np.concatenate([top, bottom], axis=-2)


def build_upsilon(w_tilde, h, rho, noise_power, p_max):
    """Extended downlink coupling matrix of size ``(K+1) x (K+1)``.

    Its Perron root is the inverse of the best balanced weighted SINR
    reachable with directions ``w_tilde`` and sum power ``p_max``; the
    matching eigenvector is ``[p; 1]``.
    """
    h = _as_array(h)
    diag, off = _coupling(h, w_tilde)
    d = np.asarray(rho) / diag
    return _extended(d, d[..., :, None] * off, noise_power, p_max)


def build_upsilon_uplink(w_tilde, h, rho, noise_power, p_max):
    """Uplink counterpart of :func:`build_upsilon` (coupling matrix transposed)."""
    h = _as_array(h)
    diag, off = _coupling(h, w_tilde)
    d = np.asarray(rho) / diag
    return _extended(d, d[..., :, None] * np.swapaxes(off, -1, -2), noise_power, p_max)


def dominant_eig(m, tol=EIG_TOL, max_iter=EIG_MAX_ITER):
    """Perron root and eigenvector of a nonnegative matrix by power iteration.

    Starts from the all-ones vector and stops once successive Rayleigh
    quotients agree to ``tol`` relative.  The eigenvector is scaled so its
    last entry is 1.  Works on stacks ``(..., n, n)``; iterates until every
    matrix in the stack has converged.
    """
    psi, v, done = _power_iteration(m, tol, max_iter)
    if not np.all(done):
        raise ConvergenceError("power iteration did not converge", last=(psi, v))
    return psi, v


def _power_iteration(m, tol, max_iter):
    m = np.asarray(m, dtype=float)
    if np.any(m < 0):
        raise ContractError("matrix must be entrywise nonnegative")
    v = np.ones(m.shape[:-1])
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    psi = np.full(m.shape[:-2], np.nan)
    for _ in range(max_iter):
        mv = (m @ v[..., None])[..., 0]
        new = (v * mv).sum(axis=-1)
        nrm = np.linalg.norm(mv, axis=-1, keepdims=True)
        v = mv / np.where(nrm > 0, nrm, 1.0)
        done = np.abs(new - psi) <= tol * np.abs(new)
        psi = new
        if np.all(done):
            break
    # Rayleigh quotient of the final (normalised) iterate
    psi = (v * (m @ v[..., None])[..., 0]).sum(axis=-1)
    return psi, v / v[..., -1:], done


def perron_pair(m, tol=EIG_TOL, max_iter=EIG_MAX_ITER):
    """:func:`dominant_eig` with a dense fallback for slowly converging matrices.

    When the second eigenvalue sits close to the Perron root, power
    iteration can need thousands of steps; those matrices are handed to a
    full eigendecomposition instead of raising.
    """
    psi, v, done = _power_iteration(m, tol, max_iter)
    if np.all(done):
        return psi, v
    m = np.asarray(m, dtype=float)
    bad = ~np.asarray(done)
    vals, vecs = np.linalg.eig(m[bad])
    top = np.argmax(vals.real, axis=-1)
    vec = np.abs(np.take_along_axis(vecs, top[..., None, None], axis=-1)[..., 0])
    psi = np.array(psi, dtype=float, copy=True)
    v = np.array(v, dtype=float, copy=True)
    psi[bad] = np.take_along_axis(vals.real, top[..., None], axis=-1)[..., 0]
    v[bad] = vec / vec[..., -1:]
    return psi, v


def balance_downlink_powers(w_tilde, h, rho, noise_power, p_max, tol=EIG_TOL, max_iter=EIG_MAX_ITER):
    """Optimal balanced downlink powers for fixed unit directions.

    Returns ``(p, psi)``; the balanced weighted SINR is ``1 / psi`` and
    ``sum(p) == p_max``.
    """
    ups = build_upsilon(w_tilde, h, rho, noise_power, p_max)
    psi, v = perron_pair(ups, tol, max_iter)
    return v[..., :-1], psi


def apply_powers(w_tilde, p):
    """Scale unit directions by powers: ``w_k = sqrt(p_k) w~_k``."""
    return w_tilde * np.sqrt(np.asarray(p))[..., None, :]


# ---------------------------------------------------------------------------
# SINR balancing


@dataclass
class BalanceSolution:
    q_star: np.ndarray
    w_tilde_star: np.ndarray
    p_star: np.ndarray
    w_star: np.ndarray
    balanced_value: np.ndarray
    eigenvalue: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    psi_trajectory: list | None = None


def solve_sinr_balancing_batch(hs, config: SystemConfig, tol=SOLVER_TOL, max_iter=SOLVER_MAX_ITER,
                               track=False) -> BalanceSolution:
    """Alternating SINR balancing for a stack of channels ``(F, N, K)``.

    Each round computes MMSE filters for the current uplink powers, then
    replaces the powers with the Perron vector of the uplink coupling
    matrix.  A sample stops once its Perron root changes by less than
    ``tol`` relative; its final filters are the MMSE filters of the final
    powers and the downlink powers come from the downlink Perron vector.
    """
    hs = np.asarray(hs)
    f, _, k = hs.shape
    sigma2, p_max, rho = config.noise_power, config.p_max, config.stream_weights
    q = np.zeros((f, k))
    psi_prev = np.full(f, np.inf)
    active = np.ones(f, dtype=bool)
    iters = np.zeros(f, dtype=int)
    traj = [[] for _ in range(f)] if track else None
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        h = hs[idx]
        wt = mmse_directions(h, q[idx], sigma2)
        psi, v = perron_pair(build_upsilon_uplink(wt, h, rho, sigma2, p_max))
        iters[idx] += 1
        if track:
            for i, val in zip(idx, psi):
                traj[i].append(float(val))
        done = np.abs(psi - psi_prev[idx]) < tol * psi_prev[idx]
        # converged samples keep the powers whose filters produced ``psi``
        keep = idx[~done]
        q[keep] = v[~done, :-1]
        psi_prev[idx] = psi
        active[idx[done]] = False
    converged = ~active
    wt = mmse_directions(hs, q, sigma2)
    p, psi = balance_downlink_powers(wt, hs, rho, sigma2, p_max)
    w = apply_powers(wt, p)
    gamma = sinr_downlink(hs, w, sigma2)
    balanced = np.min(gamma / rho, axis=-1)
    return BalanceSolution(q, wt, p, w, balanced, psi, iters, converged, traj)


def _single(batch_solution, cls, fields):
    return cls(**{name: getattr(batch_solution, name)[0] for name in fields})


def solve_sinr_balancing(h, config: SystemConfig, tol=SOLVER_TOL, max_iter=SOLVER_MAX_ITER,
                         track=False) -> BalanceSolution:
    """Single-sample SINR balancing; raises :class:`ConvergenceError` on failure."""
    sol = solve_sinr_balancing_batch(_as_array(h)[None], config, tol, max_iter, track)
    out = BalanceSolution(sol.q_star[0], sol.w_tilde_star[0], sol.p_star[0], sol.w_star[0],
                          float(sol.balanced_value[0]), float(sol.eigenvalue[0]), int(sol.iterations[0]),
                          bool(sol.converged[0]), sol.psi_trajectory[0] if track else None)
    if not out.converged:
        raise ConvergenceError("SINR balancing did not converge", last=out)
    return out


# ---------------------------------------------------------------------------
# power minimisation


@dataclass
class PowerMinSolution:
    q_star: np.ndarray
    w_star: np.ndarray
    total_power: np.ndarray
    iterations: np.ndarray
    p_star: np.ndarray = None
    w_tilde_star: np.ndarray = None
    status: np.ndarray = None
    q_trajectory: list | None = None


STATUS_OK, STATUS_DIVERGED, STATUS_MAXITER, STATUS_INFEASIBLE = 0, 1, 2, 3
STOP_RULES = ("max_rel", "total", "downlink")


def interference_function(h, q, gamma_t, noise_power):
    """``I_k(q) = Gamma_k / (h_k^H (sigma^2 I + sum_{j != k} q_j h_j h_j^H)^{-1} h_k)``.

    Vectorised over users and leading batch axes.
    """
    k = h.shape[-1]
    mask = 1.0 - np.eye(k)
    qk = np.asarray(q)[..., None, :] * mask  # row k excludes user k
    # (..., K, N, N) per-user interference-plus-noise covariances
    hk = h[..., None, :, :] * qk[..., :, None, :]
    a = hk @ _herm(h)[..., None, :, :] + noise_power * np.eye(h.shape[-2])
    rhs = np.swapaxes(h, -1, -2)[..., :, :, None]
    x = np.linalg.solve(a, rhs)[..., 0]
    quad = np.real((np.swapaxes(h, -1, -2).conj() * x).sum(axis=-1))
    return np.asarray(gamma_t) / quad


def _psi_from_gains(g, gamma_t):
    eye = _eye(g.shape[-1])
    return g * (eye / np.asarray(gamma_t)[..., :, None] - (1.0 - eye))


def downlink_power_matrix(w_tilde, h, gamma_t):
    """``Psi[k,k] = |h_k^H w_k|^2 / Gamma_k``, ``Psi[k,j] = -|h_k^H w_j|^2``."""
    return _psi_from_gains(np.abs(_herm(h) @ w_tilde) ** 2, gamma_t)


def qos_downlink_powers(w_tilde, h, gamma_t, noise_power):
    """Downlink powers meeting every SINR target with equality: ``sigma^2 Psi^{-1} 1``.

    Returns ``(p, ok)``.  ``ok`` is False where ``Psi`` is singular.
    """
    return qos_powers_from_gains(np.abs(_herm(h) @ w_tilde) ** 2, gamma_t, noise_power)


def qos_powers_from_gains(g, gamma_t, noise_power):
    """:func:`qos_downlink_powers` from precomputed gains ``g[k, j] = |h_k^H w_j|^2``."""
    psi = _psi_from_gains(g, gamma_t)
    k = psi.shape[-1]
    ones = np.ones(psi.shape[:-1])
    if psi.ndim == 2:
        try:
            return noise_power * np.linalg.solve(psi, ones), True
        except np.linalg.LinAlgError:
            return np.full(k, np.nan), False
    p = np.full(psi.shape[:-1], np.nan)
    ok = np.ones(psi.shape[:-2], dtype=bool)
    try:
        p = noise_power * np.linalg.solve(psi, ones[..., None])[..., 0]
    except np.linalg.LinAlgError:
        for i in np.ndindex(psi.shape[:-2]):
            try:
                p[i] = noise_power * np.linalg.solve(psi[i], ones[i])
            except np.linalg.LinAlgError:
                ok[i] = False
    return p, ok & np.all(np.isfinite(p), axis=-1)


def solve_power_min_batch(hs, config: SystemConfig, tol=SOLVER_TOL, max_iter=SOLVER_MAX_ITER,
                          stop_rule="max_rel", track=False) -> PowerMinSolution:
    """Fixed-point power minimisation for a stack of channels.

    Starts from ``q = 0``.  ``stop_rule="max_rel"`` stops when every
    component changes by less than ``tol`` relative; ``"total"`` stops on
    the relative change of the uplink total power; ``"downlink"`` on the
    relative change of the downlink total power ``sum ||w_k||^2`` that the
    current MMSE receivers would need (the timing-experiment rule, one
    extra QoS power solve per iteration).
    Samples whose powers blow past
    ``1e6 * K * max(Gamma) * sigma^2 / min ||h_k||^2`` are marked diverged.
    """
    if stop_rule not in STOP_RULES:
        raise ContractError(f"unknown stop rule {stop_rule!r}")
    hs = np.asarray(hs)
    f, _, k = hs.shape
    sigma2, gamma_t = config.noise_power, config.sinr_targets
    bound = 1e6 * k * gamma_t.max() * sigma2 / np.min(np.linalg.norm(hs, axis=1) ** 2, axis=-1)
    q = np.zeros((f, k))
    status = np.full(f, STATUS_MAXITER)
    active = np.ones(f, dtype=bool)
    iters = np.zeros(f, dtype=int)
    prev_dl = np.full(f, np.nan)
    traj = [[q[i].copy()] for i in range(f)] if track else None
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        new = interference_function(hs[idx], q[idx], gamma_t, sigma2)
        old = q[idx]
        iters[idx] += 1
        if stop_rule == "downlink":
            # downlink power the current receivers would need; NaN never stops
            p_dl, _ = qos_powers_from_gains(np.abs(_herm(hs[idx]) @ mmse_directions(hs[idx], new, sigma2)) ** 2,
                                            gamma_t, sigma2)
            dl_total = p_dl.sum(-1)
            done = np.abs(dl_total - prev_dl[idx]) <= tol * prev_dl[idx]
            prev_dl[idx] = dl_total
        elif stop_rule == "total":
            done = np.abs(new.sum(-1) - old.sum(-1)) <= tol * new.sum(-1)
        else:
            done = np.all(np.abs(new - old) <= tol * new, axis=-1)
        diverged = ~np.all(np.isfinite(new), axis=-1) | np.any(new > bound[idx, None], axis=-1)
        q[idx] = new
        if track:
            for i, row in zip(idx, new):
                traj[i].append(row.copy())
        status[idx[done & ~diverged]] = STATUS_OK
        status[idx[diverged]] = STATUS_DIVERGED
        active[idx[done | diverged]] = False
    p = np.full((f, k), np.nan)
    wt = np.zeros_like(hs)
    good = np.flatnonzero(status == STATUS_OK)
    if good.size:
        wt[good] = mmse_directions(hs[good], q[good], sigma2)
        pg, ok = qos_downlink_powers(wt[good], hs[good], gamma_t, sigma2)
        ok &= np.all(pg > 0, axis=-1)
        p[good] = pg
        status[good[~ok]] = STATUS_INFEASIBLE
    w = apply_powers(wt, np.where(np.isfinite(p) & (p > 0), p, 0.0))
    return PowerMinSolution(q, w, np.sum(p, axis=-1), iters, p, wt, status, traj)


def solve_power_min(h, config: SystemConfig, tol=SOLVER_TOL, max_iter=SOLVER_MAX_ITER,
                    stop_rule="max_rel", track=False) -> PowerMinSolution:
    """Single-sample power minimisation.

    Raises :class:`InfeasibleError` for unreachable targets and
    :class:`ConvergenceError` when ``max_iter`` runs out first.
    """
    sol = solve_power_min_batch(_as_array(h)[None], config, tol, max_iter, stop_rule, track)
    status = int(sol.status[0])
    out = PowerMinSolution(sol.q_star[0], sol.w_star[0], float(sol.total_power[0]), int(sol.iterations[0]),
                           sol.p_star[0], sol.w_tilde_star[0], status, sol.q_trajectory[0] if track else None)
    if status in (STATUS_DIVERGED, STATUS_INFEASIBLE):
        raise InfeasibleError("SINR targets are not achievable for this channel")
    if status == STATUS_MAXITER:
        raise ConvergenceError("power minimisation did not converge", last=out)
    return out


# ---------------------------------------------------------------------------
# WMMSE


@dataclass
class WmmseSolution:
    w: np.ndarray
    p: np.ndarray
    lam: np.ndarray
    rate_trajectory: list
    iterations: np.ndarray
    mu: np.ndarray = None


def regularized_directions(h, lam, noise_power):
    """Unit directions ``(I + sum_j lam_j/sigma^2 h_j h_j^H)^{-1} h_k``, normalised."""
    h = _as_array(h)
    n = h.shape[-2]
    a = (h * (np.asarray(lam) / noise_power)[..., None, :]) @ _herm(h) + np.eye(n)
    return normalize_columns(hpd_solve(a, h))


def _receivers(h, w, noise_power):
    a = _herm(h) @ w  # a[k, j] = h_k^H w_j
    signal = np.diagonal(a, axis1=-2, axis2=-1)
    total = (np.abs(a) ** 2).sum(axis=-1) + noise_power
    u = signal.conj() / total
    mse = 1.0 - np.abs(signal) ** 2 / total
    return u, 1.0 / mse


def _transmit_bisection(h, u, omega, alpha, p_max):
    """Exact minimiser of the weighted-MSE transmit subproblem under the power budget.

    ``w_k = alpha_k omega_k u_k^* (A + mu I)^{-1} h_k`` with
    ``A = sum_j c_j h_j h_j^H``, ``c_j = alpha_j omega_j |u_j|^2`` and the
    smallest ``mu >= 0`` meeting the budget.  ``mu`` is bracketed by
    doubling and refined by 64 bisection steps in the eigenbasis of ``A``.
    """
    c = alpha * omega * np.abs(u) ** 2
    amat = (h * c[..., None, :]) @ _herm(h)
    evals, vecs = np.linalg.eigh(amat)
    evals = np.clip(evals, 0.0, None)
    b = _herm(vecs) @ (h * (alpha * omega * u.conj())[..., None, :])
    mag = (np.abs(b) ** 2).sum(axis=-1)
    scale = evals.max(axis=-1)
    nonnull = evals > 1e-12 * scale[..., None]

    def power(mu):
        den = evals + mu[..., None]
        live = nonnull | (mu[..., None] > 0)
        return np.where(live, mag / np.where(live, den, 1.0) ** 2, 0.0).sum(axis=-1)

    zero = np.zeros_like(scale)
    at_zero = power(zero) <= p_max
    hi = np.maximum(scale, 1e-300)
    while np.any((power(hi) > p_max) & ~at_zero):
        hi = np.where(power(hi) > p_max, hi * 2.0, hi)
    lo = zero.copy()
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        over = power(mid) > p_max
        lo = np.where(over, mid, lo)
        hi = np.where(over, hi, mid)
    mu = np.where(at_zero, 0.0, hi)
    den = evals + mu[..., None]
    live = nonnull | (mu[..., None] > 0)
    inv = np.where(live, 1.0 / np.where(live, den, 1.0), 0.0)
    return vecs @ (inv[..., :, None] * b), c, mu


def _transmit_scaled(h, u, omega, alpha, p_max, noise_power):
    """Full-power transmit update with a jointly rescaled receiver.

    Minimises the weighted MSE over ``V`` when the transmitter is scaled to
    the budget and every receiver by the inverse factor, which gives
    ``v_k = alpha_k omega_k u_k^* (A + mu I)^{-1} h_k`` with the closed-form
    ``mu = sigma^2 sum_j c_j / p_max``, followed by ``w = sqrt(p_max/||V||^2) V``.
    Directions then coincide with the structured solution for virtual
    powers ``lam = p_max c / sum(c)``.
    """
    c = alpha * omega * np.abs(u) ** 2
    mu = noise_power * c.sum(axis=-1) / p_max
    a = (h * c[..., None, :]) @ _herm(h) + mu[..., None, None] * np.eye(h.shape[-2])
    v = hpd_solve(a, h * (alpha * omega * u.conj())[..., None, :])
    beta = np.sqrt(p_max / total_power(v))
    return v * beta[..., None, None], c, mu


def solve_wmmse_batch(hs, config: SystemConfig, w_init=None, max_iter=WMMSE_MAX_ITER,
                      rate_tol=WMMSE_RATE_TOL, power_step="scaled") -> WmmseSolution:
    """WMMSE weighted sum-rate ascent on a stack of channels.

    Receiver and weight are updated first from ``w_init`` (RZF with equal
    splits when omitted).  A sample stops after ``max_iter`` transmit
    updates or once its rate gains less than ``rate_tol`` bits/s/Hz.

    ``power_step="scaled"`` uses the full-power update with rescaled
    receivers; ``"bisection"`` solves for the budget multiplier by
    bisection.  Both are monotone in the rate.  The virtual powers are the
    regulariser weights of the last transmit update normalised to sum to
    ``p_max``; with the scaled step they reproduce the returned directions
    exactly.
    """
    hs = np.asarray(hs)
    f, _, k = hs.shape
    sigma2, p_max, alpha = config.noise_power, config.p_max, config.rate_weights
    if w_init is None:
        w_init = rzf_beamforming(hs, config)
    w = np.array(w_init, dtype=complex, copy=True)
    rate = weighted_sum_rate(hs, w, alpha, sigma2)
    traj = [[float(r)] for r in rate]
    c_last = np.full((f, k), np.nan)
    mu_last = np.full(f, np.nan)
    active = np.ones(f, dtype=bool)
    iters = np.zeros(f, dtype=int)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        h = hs[idx]
        u, omega = _receivers(h, w[idx], sigma2)
        if power_step == "scaled":
            w_new, c, mu = _transmit_scaled(h, u, omega, alpha, p_max, sigma2)
        elif power_step == "bisection":
            w_new, c, mu = _transmit_bisection(h, u, omega, alpha, p_max)
        else:
            raise ValueError(f"unknown power_step {power_step!r}")
        new_rate = weighted_sum_rate(h, w_new, alpha, sigma2)
        w[idx] = w_new
        c_last[idx] = c
        mu_last[idx] = mu
        iters[idx] += 1
        for i, r in zip(idx, new_rate):
            traj[i].append(float(r))
        done = np.abs(new_rate - rate[idx]) < rate_tol
        rate[idx] = new_rate
        active[idx[done]] = False
    p = np.linalg.norm(w, axis=1) ** 2
    missing = ~np.isfinite(c_last[:, 0])
    if np.any(missing):
        # max_iter == 0: fall back to the receivers of w_init
        u, omega = _receivers(hs[missing], w[missing], sigma2)
        c_last[missing] = alpha * omega * np.abs(u) ** 2
    lam = p_max * c_last / c_last.sum(axis=-1, keepdims=True)
    return WmmseSolution(w, p, lam, traj, iters, mu_last)


def solve_wmmse(h, config: SystemConfig, w_init=None, max_iter=WMMSE_MAX_ITER,
                rate_tol=WMMSE_RATE_TOL, power_step="scaled") -> WmmseSolution:
    h = _as_array(h)
    if w_init is not None:
        if np.sum(np.abs(w_init) ** 2) > config.p_max * (1 + 1e-9):
            raise ContractError("initial beamformer exceeds the power budget")
        w_init = np.asarray(w_init)[None]
    sol = solve_wmmse_batch(h[None], config, w_init, max_iter, rate_tol, power_step)
    return WmmseSolution(sol.w[0], sol.p[0], sol.lam[0], sol.rate_trajectory[0], int(sol.iterations[0]),
                         float(sol.mu[0]))


# ---------------------------------------------------------------------------
# closed-form baselines


def zf_directions(h):
    """Unit-norm columns of ``H (H^H H)^{-1}``, which null all cross-user terms."""
    h = _as_array(h)
    n, k = h.shape[-2:]
    if k > n:
        raise ContractError("zero forcing needs K <= N")
    gram = _herm(h) @ h
    s = np.linalg.svd(h, compute_uv=False)
    if np.any(s[..., -1] <= 1e-12 * s[..., 0]):
        raise ContractError("channel matrix is rank deficient")
    return normalize_columns(h @ np.linalg.inv(gram))


def _zf_gains(h, wt):
    return np.abs(np.diagonal(_herm(h) @ wt, axis1=-2, axis2=-1)) ** 2


def zf_balanced_power(h, config: SystemConfig):
    """ZF directions with powers equalising ``gamma_k / rho_k`` under the budget."""
    h = _as_array(h)
    wt = zf_directions(h)
    p = config.stream_weights * config.noise_power / _zf_gains(h, wt)
    p = p * (config.p_max / p.sum(axis=-1, keepdims=True))
    return apply_powers(wt, p)


def zf_power_min(h, config: SystemConfig):
    """ZF directions with the least power meeting each SINR target."""
    h = _as_array(h)
    wt = zf_directions(h)
    return apply_powers(wt, config.sinr_targets * config.noise_power / _zf_gains(h, wt))


def zf_equal_power(h, config: SystemConfig):
    h = _as_array(h)
    return apply_powers(zf_directions(h), np.full(h.shape[-1], config.p_max / h.shape[-1]))


def mrt_beamforming(h, config: SystemConfig, power_split=None):
    h = _as_array(h)
    k = h.shape[-1]
    p = np.full(k, config.p_max / k) if power_split is None else np.asarray(power_split)
    return apply_powers(normalize_columns(h), p)


def rzf_beamforming(h, config: SystemConfig, power_split=None, lam_split=None):
    """Regularised ZF: structured directions with virtual powers ``lam_split``
    and transmit powers ``power_split`` (both default to ``p_max / K``)."""
    h = _as_array(h)
    k = h.shape[-1]
    even = np.full(k, config.p_max / k)
    p = even if power_split is None else np.asarray(power_split, dtype=float)
    lam = even if lam_split is None else np.asarray(lam_split, dtype=float)
    return apply_powers(regularized_directions(h, lam, config.noise_power), p)


def rzf_balanced(h, config: SystemConfig):
    """RZF directions with balanced downlink powers (SINR-balancing baseline)."""
    h = _as_array(h)
    k = h.shape[-1]
    wt = regularized_directions(h, np.full(k, config.p_max / k), config.noise_power)
    p, _ = balance_downlink_powers(wt, h, config.stream_weights, config.noise_power, config.p_max)
    return apply_powers(wt, p)
