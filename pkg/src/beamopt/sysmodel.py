"""System model: configuration, channel generation, SINR/rate metrics, network
input encoding and the binary dataset format.

Channel matrices follow the ``(..., N, K)`` layout throughout the package:
column ``k`` is the channel ``h_k`` of user ``k`` and any leading axes are
batch axes.  Every metric here broadcasts over those leading axes.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DomainError, FormatError

NOISE_PSD_DBM_HZ = -174.0
DEFAULT_BANDWIDTH_HZ = 20e6


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def linear_to_db(x):
    return 10.0 * np.log10(np.asarray(x, dtype=float))


def dbm_to_watts(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def watts_to_dbm(w):
    return 10.0 * np.log10(np.asarray(w, dtype=float)) + 30.0


def pathloss_db(distance_km):
    """Macro-cell pathloss ``128.1 + 37.6 log10(d)`` in dB, ``d`` in km."""
    d = np.asarray(distance_km, dtype=float)
    if np.any(~(d > 0)):
        raise DomainError(f"distance must be positive, got {distance_km!r}")
    out = 128.1 + 37.6 * np.log10(d)
    return float(out) if out.ndim == 0 else out


def noise_power_watts(bandwidth_hz):
    """Thermal noise power over ``bandwidth_hz`` at -174 dBm/Hz."""
    if not bandwidth_hz > 0:
        raise DomainError(f"bandwidth must be positive, got {bandwidth_hz!r}")
    return 10.0 ** ((NOISE_PSD_DBM_HZ + 10.0 * np.log10(bandwidth_hz) - 30.0) / 10.0)


def _per_user(value, k, name):
    arr = np.broadcast_to(np.asarray(1.0 if value is None else value, dtype=float), (k,)).copy()
    if np.any(~(arr > 0)):
        raise DomainError(f"all {name} must be positive")
    return arr


@dataclass
class SystemConfig:
    """Scenario parameters. Powers in watts, SINR targets in linear scale."""

    n_antennas: int
    n_users: int
    noise_power: float = field(default_factory=lambda: noise_power_watts(DEFAULT_BANDWIDTH_HZ))
    p_max: float = 0.1
    sinr_targets: np.ndarray | None = None
    stream_weights: np.ndarray | None = None
    rate_weights: np.ndarray | None = None
    bandwidth_hz: float = DEFAULT_BANDWIDTH_HZ
    cell_radius_m: float = 500.0
    min_distance_m: float = 100.0

    def __post_init__(self):
        self.n_antennas = int(self.n_antennas)
        self.n_users = int(self.n_users)
        if self.n_antennas < 1 or self.n_users < 1:
            raise DomainError("need at least one antenna and one user")
        self.noise_power = float(self.noise_power)
        self.p_max = float(self.p_max)
        if not self.noise_power > 0:
            raise DomainError("noise power must be positive")
        if not self.p_max > 0:
            raise DomainError("power budget must be positive")
        if not self.bandwidth_hz > 0:
            raise DomainError("bandwidth must be positive")
        if not 0 <= self.min_distance_m < self.cell_radius_m:
            raise DomainError("need 0 <= min_distance_m < cell_radius_m")
        k = self.n_users
        self.sinr_targets = _per_user(self.sinr_targets, k, "SINR targets")
        self.stream_weights = _per_user(self.stream_weights, k, "stream weights")
        self.rate_weights = _per_user(self.rate_weights, k, "rate weights")

    def replace(self, **changes) -> "SystemConfig":
        """Copy with ``changes``; uniform per-user vectors follow a new ``n_users``."""
        if changes.get("n_users", self.n_users) != self.n_users:
            for key in ("sinr_targets", "stream_weights", "rate_weights"):
                vec = getattr(self, key)
                if key not in changes:
                    if np.any(vec != vec[0]):
                        raise DomainError(f"{key} differ across users; pass them for the new n_users")
                    changes[key] = float(vec[0])
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("sinr_targets", "stream_weights", "rate_weights"):
            d[key] = [float(x) for x in d[key]]
        return d


@dataclass
class ChannelSample:
    h: np.ndarray
    user_distances_km: np.ndarray | None = None


@dataclass
class Metrics:
    sinr: np.ndarray
    balanced: float
    total_power: float
    sum_rate: float
    feasible: bool


def stack_channels(samples) -> np.ndarray:
    """Stack a list of samples (or bare matrices) into an ``(F, N, K)`` array."""
    return np.stack([s.h if isinstance(s, ChannelSample) else np.asarray(s) for s in samples])


def sample_rng(seed: int, index: int) -> np.random.Generator:
    # one substream per sample so any slicing of the index range reproduces
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _draw_sample(config: SystemConfig, rng, with_pathloss):
    n, k = config.n_antennas, config.n_users
    dist = None
    h = (rng.standard_normal((n, k)) + 1j * rng.standard_normal((n, k))) / np.sqrt(2.0)
    if with_pathloss:
        r0, r1 = config.min_distance_m, config.cell_radius_m
        u = rng.random(k)
        dist = np.sqrt(u * (r1**2 - r0**2) + r0**2) / 1000.0
        gain = 10.0 ** (-pathloss_db(dist) / 10.0)
        h = h * np.sqrt(gain)[None, :]
    return ChannelSample(h=h, user_distances_km=dist)


def generate_channels(config: SystemConfig, count: int, seed: int, with_pathloss: bool = True,
                      start: int = 0) -> list[ChannelSample]:
    """Draw ``count`` i.i.d. Rayleigh channel samples.

    Users are placed uniformly over the annulus between ``min_distance_m``
    and ``cell_radius_m``; the pathloss gain multiplies the small-scale
    fading as an amplitude factor ``sqrt(10^(-PL/10))``.  Sample ``i``
    uses its own substream, so ``start`` lets callers generate disjoint
    chunks that agree with one serial run.
    """
    if count < 1:
        raise DomainError("count must be >= 1")
    return [_draw_sample(config, sample_rng(seed, start + i), with_pathloss) for i in range(count)]


def _gains(h, w):
    # G[..., k, j] = |h_k^H w_j|^2
    return np.abs(np.swapaxes(h, -1, -2).conj() @ w) ** 2


def _as_array(h):
    return h.h if isinstance(h, ChannelSample) else np.asarray(h)


def sinr_downlink(h, w, noise_power):
    """Downlink SINR of every user for beamformers ``w`` (same layout as ``h``)."""
    h = _as_array(h)
    g = _gains(h, w)
    signal = np.diagonal(g, axis1=-2, axis2=-1)
    interference = g.sum(axis=-1) - signal
    return signal / (interference + noise_power)


def check_unit_columns(w, tol=1e-9):
    norms = np.linalg.norm(w, axis=-2)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ContractError("beamformer columns must have unit l2 norm")


def sinr_uplink(h, w_tilde, q, noise_power):
    """Virtual-uplink SINR with receive filters ``w_tilde`` and powers ``q``.

    User ``k``'s interference is collected through its own filter:
    ``sum_{j != k} q_j |h_j^H w_k|^2``.
    """
    h = _as_array(h)
    check_unit_columns(w_tilde)
    q = np.asarray(q, dtype=float)
    g = _gains(h, w_tilde)
    signal = np.diagonal(g, axis1=-2, axis2=-1)
    received = (q[..., :, None] * g).sum(axis=-2)  # sum_j q_j |h_j^H w_k|^2
    interference = received - q * signal
    return q * signal / (interference + noise_power)


def weighted_sum_rate(h, w, rate_weights, noise_power):
    """Weighted sum rate in bits/s/Hz."""
    gamma = sinr_downlink(h, w, noise_power)
    return (np.asarray(rate_weights) * np.log2(1.0 + gamma)).sum(axis=-1)


def total_power(w):
    return (np.abs(w) ** 2).sum(axis=(-2, -1))


def metrics(h, w, config: SystemConfig) -> Metrics:
    gamma = sinr_downlink(h, w, config.noise_power)
    rate = float((config.rate_weights * np.log2(1.0 + gamma)).sum())
    power = float(total_power(w))
    feasible = bool(np.all(gamma >= config.sinr_targets * (1 - 1e-6)))
    return Metrics(gamma, float(np.min(gamma / config.stream_weights)), power, rate, feasible)


def normalize_input(h, noise_power):
    """Encode channels as the real ``2 x NK`` network input.

    The entries are divided by the noise power, then row 0 holds the real
    parts and row 1 the imaginary parts of the user-major vectorisation
    ``[h_1; h_2; ...; h_K]``.  Accepts ``(N, K)`` or ``(F, N, K)``.
    """
    h = _as_array(h)
    v = np.swapaxes(h, -1, -2).reshape(h.shape[:-2] + (-1,)) / noise_power
    return np.stack([v.real, v.imag], axis=-2)


def denormalize_input(x, noise_power, n_antennas):
    x = np.asarray(x)
    v = (x[..., 0, :] + 1j * x[..., 1, :]) * noise_power
    k = v.shape[-1] // n_antennas
    return np.swapaxes(v.reshape(v.shape[:-1] + (k, n_antennas)), -1, -2)


# ---------------------------------------------------------------------------
# dataset file format

DATASET_MAGIC = b"BNND"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIQIddI")
_CONFIG = struct.Struct("<5d")
PROBLEM_CODES = {"p1": 1, "p2": 2, "p3": 3}
_PROBLEM_NAMES = {v: k for k, v in PROBLEM_CODES.items()}
FLAG_PATHLOSS = 1
FLAG_DISTANCES = 2


@dataclass
class Dataset:
    """Channels paired with normalised solver targets.

    With ``log_span == 0`` the labels are ``raw / target_scale``; otherwise
    they are ``1 + ln(raw / target_scale) / log_span``.  Either way they
    lie in (0, 1] and :meth:`decode` maps them back to watts.
    """

    config: SystemConfig
    channels: np.ndarray
    targets: np.ndarray
    target_scale: float
    problem: str = "p1"
    with_pathloss: bool = True
    distances: np.ndarray | None = None
    log_span: float = 0.0

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=complex)
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if len(self.channels) != len(self.targets):
            raise ContractError("samples and targets differ in length")
        if not self.target_scale > 0:
            raise ContractError("target_scale must be positive")
        if not self.log_span >= 0:
            raise ContractError("log_span must be nonnegative")

    def __len__(self):
        return len(self.channels)

    @property
    def samples(self) -> list[ChannelSample]:
        d = self.distances
        return [ChannelSample(h, None if d is None else d[i]) for i, h in enumerate(self.channels)]

    def subset(self, index) -> "Dataset":
        d = None if self.distances is None else self.distances[index]
        return dataclasses.replace(self, channels=self.channels[index], targets=self.targets[index],
                                   distances=d)

    def inputs(self) -> np.ndarray:
        return normalize_input(self.channels, self.config.noise_power)

    def decode(self, labels=None) -> np.ndarray:
        return decode_targets(self.targets if labels is None else labels, self.target_scale, self.log_span)


def choose_target_scale(raw_targets) -> float:
    return 1.05 * float(np.max(raw_targets))


def choose_log_span(raw_targets, target_scale) -> float:
    """Span of ``ln(raw / scale)`` widened by 5%, so every label stays above 0."""
    raw = np.asarray(raw_targets, dtype=float)
    if np.any(raw <= 0):
        raise ContractError("log targets need strictly positive values")
    return 1.05 * float(np.max(-np.log(raw / target_scale)))


def encode_targets(raw, target_scale, log_span=0.0):
    """Map physical key features into (0, 1] (linear or log-affine)."""
    r = np.asarray(raw, dtype=float) / target_scale
    return r if log_span == 0 else 1.0 + np.log(r) / log_span


def decode_targets(labels, target_scale, log_span=0.0):
    y = np.asarray(labels, dtype=float)
    return target_scale * (y if log_span == 0 else np.exp(log_span * (y - 1.0)))


def dataset_write(path, ds: Dataset) -> None:
    cfg = ds.config
    n, k = cfg.n_antennas, cfg.n_users
    if ds.channels.shape[1:] != (n, k):
        raise ContractError("channel shape does not match config")
    flags = PROBLEM_CODES[ds.problem] << 8
    if ds.with_pathloss:
        flags |= FLAG_PATHLOSS
    if ds.distances is not None:
        flags |= FLAG_DISTANCES
    count, width = ds.targets.shape
    parts = [
        _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, k, count, width, float(ds.target_scale),
                     float(ds.log_span), flags),
        _CONFIG.pack(cfg.noise_power, cfg.p_max, cfg.bandwidth_hz, cfg.cell_radius_m, cfg.min_distance_m),
        np.concatenate([cfg.sinr_targets, cfg.stream_weights, cfg.rate_weights]).astype("<f8").tobytes(),
    ]
    vec = np.swapaxes(ds.channels, 1, 2).reshape(count, n * k)
    cols = [vec.real, vec.imag, ds.targets]
    if ds.distances is not None:
        cols.append(ds.distances)
    parts.append(np.concatenate(cols, axis=1).astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def dataset_read(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a beamopt dataset")
    if len(buf) < _HEADER.size + _CONFIG.size:
        raise FormatError(f"{path}: truncated header")
    _, version, n, k, count, width, scale, span, flags = _HEADER.unpack_from(buf, 0)
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    problem = _PROBLEM_NAMES.get(flags >> 8)
    if problem is None:
        raise FormatError(f"{path}: unknown problem code {flags >> 8}")
    off = _HEADER.size
    noise, p_max, bw, radius, dmin = _CONFIG.unpack_from(buf, off)
    off += _CONFIG.size
    has_dist = bool(flags & FLAG_DISTANCES)
    row = 2 * n * k + width + (k if has_dist else 0)
    need = off + 3 * k * 8 + count * row * 8
    if len(buf) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(buf)} (truncated or corrupt)")
    vecs = np.frombuffer(buf, dtype="<f8", count=3 * k, offset=off)
    off += 3 * k * 8
    config = SystemConfig(n, k, noise_power=noise, p_max=p_max, sinr_targets=vecs[:k].copy(),
                          stream_weights=vecs[k:2 * k].copy(), rate_weights=vecs[2 * k:].copy(),
                          bandwidth_hz=bw, cell_radius_m=radius, min_distance_m=dmin)
    body = np.frombuffer(buf, dtype="<f8", count=count * row, offset=off).reshape(count, row)
    nk = n * k
    vec = body[:, :nk] + 1j * body[:, nk:2 * nk]
    channels = np.swapaxes(vec.reshape(count, k, n), 1, 2).copy()
    targets = body[:, 2 * nk:2 * nk + width].copy()
    distances = body[:, 2 * nk + width:].copy() if has_dist else None
    return Dataset(config, channels, targets, scale, problem, bool(flags & FLAG_PATHLOSS), distances, span)
