"""Beamforming recovery: scaling layers and the conversion/construction layers
that turn predicted key features into full beamforming matrices.

All functions accept a single channel ``(N, K)`` or a stack ``(F, N, K)``
with matching leading axes on the feature vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .solvers import (
    EIG_TOL,
    apply_powers,
    balance_downlink_powers,
    build_upsilon,
    downlink_power_matrix,
    covariance,
    mmse_directions,
    qos_powers_from_gains,
    regularized_directions,
)
from .sysmodel import _as_array, sinr_downlink, total_power

# relative SINR shortfall beyond which a P2 recovery counts as missing its targets
QOS_SHORTFALL = 1e-3


@dataclass
class RecoveryIntermediates:
    t_matrix: np.ndarray
    upsilon: np.ndarray | None = None
    psi: np.ndarray | None = None


@dataclass
class RecoveryOutcome:
    w: np.ndarray
    feasible: np.ndarray
    sinr: np.ndarray
    total_power: np.ndarray
    p: np.ndarray | None = None
    negative_power: np.ndarray | None = None
    shortfall: np.ndarray | None = None


def scale_simplex(v, p_max):
    """Rescale nonnegative vectors onto the simplex ``sum(v) = p_max``."""
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise ContractError("scaling layer input must be nonnegative")
    s = v.sum(axis=-1, keepdims=True)
    if np.any(s <= 0):
        raise ContractError("prediction collapsed to the zero vector")
    return v * (p_max / s)


def recover_p1(q_hat, h, noise_power, p_max, rho, eig_tol=EIG_TOL) -> RecoveryOutcome:
    """Uplink powers -> MMSE directions -> balanced downlink powers.

    ``q_hat`` should already sit on the power simplex.  The downlink powers
    are the first ``K`` entries of the Perron vector of the extended coupling
    matrix, so the result always spends exactly ``p_max``.
    """
    h = _as_array(h)
    wt = mmse_directions(h, q_hat, noise_power)
    p, _ = balance_downlink_powers(wt, h, rho, noise_power, p_max, tol=eig_tol)
    w = apply_powers(wt, p)
    gamma = sinr_downlink(h, w, noise_power)
    ok = np.ones(gamma.shape[:-1], dtype=bool)
    return RecoveryOutcome(w, ok, gamma, total_power(w), p)


def recover_p2(q_hat, h, noise_power, sinr_targets, shortfall=QOS_SHORTFALL) -> RecoveryOutcome:
    """Uplink powers -> MMSE directions -> downlink powers meeting every target.

    ``feasible`` is False when the power solve fails, yields a nonpositive
    power, or the recovered SINRs miss a target by more than ``shortfall``
    (relative).  The first two cases are also reported in
    ``negative_power``; the last in ``shortfall``.
    """
    h = _as_array(h)
    q_hat = np.asarray(q_hat, dtype=float)
    if q_hat.min() < 0:
        raise ContractError("uplink powers must be nonnegative")
    wt = mmse_directions(h, q_hat, noise_power)
    g = np.abs(np.swapaxes(h, -1, -2).conj() @ wt) ** 2  # g[k, j] = |h_k^H w~_j|^2
    p, solved = qos_powers_from_gains(g, sinr_targets, noise_power)
    negative = ~(solved & np.all(p > 0, axis=-1))
    p_used = np.where(negative[..., None], 0.0, p)
    w = apply_powers(wt, p_used)
    # SINRs from the same gains; the directions have unit norm so ||w_k||^2 = p_k
    signal = np.diagonal(g, axis1=-2, axis2=-1) * p_used
    gamma = signal / ((g * p_used[..., None, :]).sum(axis=-1) - signal + noise_power)
    short = ~negative & np.any(gamma < np.asarray(sinr_targets) * (1 - shortfall), axis=-1)
    feasible = ~negative & ~short
    return RecoveryOutcome(w, feasible, gamma, p_used.sum(axis=-1), p, negative, short)


def construct_p3(p_hat, lam_hat, h, noise_power):
    """Structured sum-rate beamformers ``sqrt(p_k) (I + sum lam_j/sigma^2 h_j h_j^H)^{-1} h_k / ||.||``."""
    wt = regularized_directions(h, lam_hat, noise_power)
    return apply_powers(wt, p_hat)


def intermediates(q_hat, h, noise_power, p_max=None, rho=None, sinr_targets=None) -> RecoveryIntermediates:
    """Matrices built along the P1 / P2 recovery paths, for inspection."""
    h = _as_array(h)
    t = covariance(h, q_hat, noise_power)
    wt = mmse_directions(h, q_hat, noise_power)
    ups = None if p_max is None else build_upsilon(wt, h, rho, noise_power, p_max)
    psi = None if sinr_targets is None else downlink_power_matrix(wt, h, sinr_targets)
    return RecoveryIntermediates(t, ups, psi)
