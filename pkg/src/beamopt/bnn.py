"""Beamforming neural networks: targets, training, prediction and evaluation.

A model couples a trained network with the recovery layers of its problem:

* P1 (SINR balancing) predicts uplink powers, scales them onto the power
  simplex and recovers balanced downlink beamformers.
* P2 (power minimisation) predicts uplink powers and recovers downlink
  powers meeting every SINR floor; the recovery can be infeasible.
* P3 (sum rate) predicts transmit and virtual powers ``[p; lambda]`` and
  builds the structured beamformers.  Training is supervised against WMMSE
  labels, then fine-tuned on the sum rate itself.
"""

from __future__ import annotations

import struct
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import neural
from .errors import ContractError, FormatError, InfeasibleError
from .neural import AdamState, Network, TrainConfig
from .recovery import RecoveryOutcome, construct_p3, recover_p1, recover_p2, scale_simplex
from .solvers import (
    EPS_PRESETS,
    STATUS_OK,
    rzf_balanced,
    rzf_beamforming,
    solve_power_min_batch,
    solve_sinr_balancing_batch,
    solve_wmmse_batch,
    zf_balanced_power,
    zf_equal_power,
    zf_power_min,
)
from .sysmodel import (
    PROBLEM_CODES,
    Dataset,
    SystemConfig,
    _as_array,
    choose_log_span,
    choose_target_scale,
    decode_targets,
    encode_targets,
    normalize_input,
    sinr_downlink,
    total_power,
    weighted_sum_rate,
)

STAGES = ("supervised", "pretrained", "hybrid")
STAGE2_LR = 1e-4
STAGE2_EPOCHS = 30
FD_DELTA = 1e-4


def output_width(problem, n_users):
    if problem not in PROBLEM_CODES:
        raise ContractError(f"unknown problem {problem!r}")
    return 2 * n_users if problem == "p3" else n_users


@dataclass
class BnnModel:
    problem: str
    net: Network
    config: SystemConfig
    target_scale: float
    stage: str = "supervised"
    adam: AdamState | None = None
    history: dict = field(default_factory=dict)
    log_span: float = 0.0
    plan: neural.InferencePlan | None = field(default=None, repr=False)

    def __post_init__(self):
        m = output_width(self.problem, self.config.n_users)
        if self.net.n_outputs != m:
            raise ContractError(f"{self.problem} needs {m} network outputs, got {self.net.n_outputs}")
        if self.stage not in STAGES:
            raise ContractError(f"unknown stage {self.stage!r}")

    def compile(self):
        """Freeze the current parameters into a fast inference plan."""
        self.plan = neural.InferencePlan(self.net)
        return self

    def raw_outputs(self, h):
        """Network outputs (still normalised) for channels ``(F, N, K)``.

        Uses the compiled plan when there is one; training drops the plan.
        """
        x = normalize_input(pad_for_model(h, self.config.n_antennas), self.config.noise_power)
        if self.plan is not None:
            return self.plan(x)
        return neural.predict(self.net, x)

    def decode(self, outputs):
        """Network outputs -> physical key features (watts)."""
        return decode_targets(outputs, self.target_scale, self.log_span)


# ---------------------------------------------------------------------------
# targets


@dataclass
class TargetReport:
    dataset: Dataset
    dropped: int
    raw: np.ndarray


# label map per problem: "log" stores an affine map of ln(raw); "linear" stores raw / scale
DEFAULT_TARGET_MAP = {"p1": "log", "p2": "linear", "p3": "linear"}


def _finish(problem, config, hs, raw, keep, target_scale, with_pathloss, distances, target_map, log_span):
    raw, hs = raw[keep], hs[keep]
    if len(raw) == 0:
        raise ContractError("every sample failed; no targets produced")
    target_map = target_map or DEFAULT_TARGET_MAP[problem]
    if target_map not in ("log", "linear"):
        raise ContractError(f"unknown target map {target_map!r}")
    scale = choose_target_scale(raw) if target_scale is None else float(target_scale)
    if target_map == "linear":
        span = 0.0
    else:
        span = choose_log_span(raw, scale) if log_span is None else float(log_span)
    d = None if distances is None else np.asarray(distances)[keep]
    ds = Dataset(config, hs, encode_targets(raw, scale, span), scale, problem, with_pathloss, d, span)
    return TargetReport(ds, int(np.count_nonzero(~keep)), raw)


def _stack(samples):
    if isinstance(samples, np.ndarray):
        return samples, None
    hs = np.stack([_as_array(s) for s in samples])
    dist = [getattr(s, "user_distances_km", None) for s in samples]
    return hs, (None if any(d is None for d in dist) else np.stack(dist))


def make_targets_p1(samples, config: SystemConfig, target_scale=None, with_pathloss=True, target_map=None,
                    log_span=None) -> TargetReport:
    """Optimal uplink powers ``q*`` of SINR balancing as labels."""
    hs, dist = _stack(samples)
    sol = solve_sinr_balancing_batch(hs, config)
    return _finish("p1", config, hs, sol.q_star, sol.converged, target_scale, with_pathloss, dist,
                   target_map, log_span)


def make_targets_p2(samples, config: SystemConfig, target_scale=None, with_pathloss=True, target_map=None,
                    log_span=None) -> TargetReport:
    """Optimal uplink powers of power minimisation; infeasible samples are dropped."""
    hs, dist = _stack(samples)
    sol = solve_power_min_batch(hs, config)
    if not np.any(sol.status == STATUS_OK):
        raise InfeasibleError("no sample admits the requested SINR targets")
    return _finish("p2", config, hs, sol.q_star, sol.status == STATUS_OK, target_scale, with_pathloss, dist,
                   target_map, log_span)


def make_targets_p3(samples, config: SystemConfig, target_scale=None, with_pathloss=True, target_map=None,
                    log_span=None) -> TargetReport:
    """``[p; lambda]`` from WMMSE started at RZF with equal splits."""
    hs, dist = _stack(samples)
    sol = solve_wmmse_batch(hs, config)
    raw = np.concatenate([sol.p, sol.lam], axis=1)
    keep = np.all(np.isfinite(raw), axis=1)
    return _finish("p3", config, hs, raw, keep, target_scale, with_pathloss, dist, target_map, log_span)


MAKE_TARGETS = {"p1": make_targets_p1, "p2": make_targets_p2, "p3": make_targets_p3}


# ---------------------------------------------------------------------------
# prediction


def pad_for_model(h, n_antennas):
    """Zero-fill antenna rows so an ``N' x K`` channel fits an ``N``-antenna model."""
    h = _as_array(h)
    extra = n_antennas - h.shape[-2]
    if extra < 0:
        raise ContractError(f"channel has {h.shape[-2]} antennas, model only {n_antennas}")
    if extra == 0:
        return h
    pad = [(0, 0)] * h.ndim
    pad[-2] = (0, extra)
    return np.pad(h, pad)


def _check_model(model, problem, h):
    if model.problem != problem:
        raise ContractError(f"model was trained for {model.problem}, not {problem}")
    if h.shape[-1] != model.config.n_users:
        raise ContractError("user count does not match the model")


def _single(fn):
    def wrapper(model, h, **kw):
        h = _as_array(h)
        if h.ndim == 2:
            out = fn(model, h[None], **kw)
            return type(out)(**{k: (None if v is None else v[0]) for k, v in out.__dict__.items()})
        return fn(model, h, **kw)
    wrapper.__doc__ = fn.__doc__
    wrapper.__name__ = fn.__name__
    return wrapper


def _split_p3(outputs, k, scale, p_max, log_span=0.0):
    o = decode_targets(outputs, scale, log_span)
    return scale_simplex(o[..., :k], p_max), scale_simplex(o[..., k:], p_max)


@dataclass
class P3Outcome:
    w: np.ndarray
    p: np.ndarray
    lam: np.ndarray
    sum_rate: np.ndarray
    total_power: np.ndarray


@_single
def predict_p1(model: BnnModel, h, outputs=None) -> RecoveryOutcome:
    """Network -> target scale -> power simplex -> balanced beamformers."""
    _check_model(model, "p1", h)
    cfg = model.config
    o = model.raw_outputs(h) if outputs is None else outputs
    q = scale_simplex(model.decode(o), cfg.p_max)
    return recover_p1(q, h, cfg.noise_power, cfg.p_max, cfg.stream_weights)


@_single
def predict_p2(model: BnnModel, h, outputs=None) -> RecoveryOutcome:
    """Network -> target scale -> QoS recovery (no power budget, no simplex)."""
    _check_model(model, "p2", h)
    cfg = model.config
    o = model.raw_outputs(h) if outputs is None else outputs
    return recover_p2(model.decode(o), h, cfg.noise_power, cfg.sinr_targets)


@_single
def predict_p3(model: BnnModel, h, outputs=None) -> P3Outcome:
    """Network -> ``[p; lambda]`` each on the simplex -> structured beamformers."""
    _check_model(model, "p3", h)
    cfg = model.config
    o = model.raw_outputs(h) if outputs is None else outputs
    p, lam = _split_p3(o, cfg.n_users, model.target_scale, cfg.p_max, model.log_span)
    w = construct_p3(p, lam, h, cfg.noise_power)
    return P3Outcome(w, p, lam, weighted_sum_rate(h, w, cfg.rate_weights, cfg.noise_power), total_power(w))


PREDICT = {"p1": predict_p1, "p2": predict_p2, "p3": predict_p3}


# ---------------------------------------------------------------------------
# training


def train_model(problem, dataset: Dataset, cfg: TrainConfig = None, channels=(8, 8), init_seed=None,
                log=None) -> BnnModel:
    """Supervised training (MSE on normalised labels) of a freshly initialised network."""
    cfg = cfg or TrainConfig()
    if dataset.problem != problem:
        raise ContractError(f"dataset holds {dataset.problem} targets, not {problem}")
    k = dataset.config.n_users
    net = neural.build_network(dataset.config.n_antennas, k, output_width(problem, k), channels,
                               seed=cfg.seed if init_seed is None else init_seed)
    hist = neural.train_supervised(net, dataset.inputs(), dataset.targets, cfg, log=log)
    stage = "pretrained" if problem == "p3" else "supervised"
    return BnnModel(problem, net, dataset.config, dataset.target_scale, stage, hist.pop("adam"), hist,
                    dataset.log_span)


def p3_rate_of_outputs(outputs, h, config: SystemConfig, target_scale, log_span=0.0):
    """Weighted sum rate of the beamformers recovered from raw network outputs."""
    p, lam = _split_p3(outputs, config.n_users, target_scale, config.p_max, log_span)
    w = construct_p3(p, lam, h, config.noise_power)
    return weighted_sum_rate(h, w, config.rate_weights, config.noise_power)


def fd_output_gradient(outputs, h, config: SystemConfig, target_scale, delta=FD_DELTA, log_span=0.0):
    """Central differences of the sum rate in each of the ``2K`` network outputs.

    The step for output ``i`` is ``delta * |o_i|``.  All ``4K`` perturbed
    recoveries of a batch are evaluated as one stacked solve.
    """
    outputs = np.asarray(outputs, dtype=float)
    f, m = outputs.shape
    step = delta * np.abs(outputs)
    eye = np.eye(m)
    pert = np.concatenate([outputs[:, None, :] + step[:, :, None] * eye,
                           outputs[:, None, :] - step[:, :, None] * eye], axis=1)  # (F, 2m, m)
    hh = np.broadcast_to(h[:, None], (f, 2 * m) + h.shape[1:])
    r = p3_rate_of_outputs(pert.reshape(-1, m), hh.reshape((-1,) + h.shape[1:]), config, target_scale, log_span)
    r = r.reshape(f, 2 * m)
    return (r[:, :m] - r[:, m:]) / (2 * step)


def richardson_check(outputs, h, config, target_scale, delta=FD_DELTA, log_span=0.0):
    """Largest relative difference between the gradients at ``delta`` and ``delta / 2``."""
    g1 = fd_output_gradient(outputs, h, config, target_scale, delta, log_span)
    g2 = fd_output_gradient(outputs, h, config, target_scale, delta / 2, log_span)
    return float(np.max(np.abs(g1 - g2)) / max(np.max(np.abs(g2)), 1e-300))


@dataclass
class Stage2Config:
    epochs: int = STAGE2_EPOCHS
    lr: float = STAGE2_LR
    batch_size: int = 200
    seed: int = 0
    delta: float = FD_DELTA
    keep_best: bool = True


def _mean_rate(model, h):
    out = model.raw_outputs(h)
    return float(np.mean(p3_rate_of_outputs(out, h, model.config, model.target_scale, model.log_span)))


def train_p3_stage2(model: BnnModel, dataset: Dataset, cfg: Stage2Config = None, train_idx=None,
                    val_idx=None, log=None) -> BnnModel:
    """Fine-tune a P3 model on the negative mean sum rate of its recovered beamformers.

    The gradient in the network outputs comes from :func:`fd_output_gradient`
    and is chained into the analytic backward pass.  With ``keep_best`` the
    parameters with the highest validation rate are kept, the stage-1
    parameters included, so fine-tuning never lowers the validation rate.
    """
    cfg = cfg or Stage2Config()
    if model.problem != "p3":
        raise ContractError("stage-2 training only applies to p3 models")
    model.plan = None
    if model.stage != "pretrained":
        warnings.warn("stage-2 training on a network without supervised pretraining", stacklevel=2)
    rng = np.random.default_rng(cfg.seed)
    if train_idx is None:
        tcfg = TrainConfig(seed=cfg.seed)
        train_idx, val_idx = neural.split_indices(len(dataset), tcfg, rng)
    x = dataset.inputs()
    hs = dataset.channels
    net = model.net
    params = net.parameters()
    adam = AdamState(lr=cfg.lr)
    history = {"loss": [], "val_rate": []}
    best_rate = _mean_rate(model, hs[val_idx])
    best = [p.copy() for p in neural._tensor_list(net)]
    history["val_rate_start"] = best_rate
    bcfg = TrainConfig(batch_size=cfg.batch_size)
    for epoch in range(cfg.epochs):
        total, seen = 0.0, 0
        for b in neural.iterate_batches(train_idx, bcfg, rng):
            out, cache = neural.forward(net, x[b], "train")
            rate = p3_rate_of_outputs(out, hs[b], model.config, model.target_scale, model.log_span)
            grad = fd_output_gradient(out, hs[b], model.config, model.target_scale, cfg.delta, model.log_span)
            total -= float(rate.sum())
            seen += len(b)
            neural.adam_step(params, neural.backward(net, cache, -grad / len(b)), adam)
        history["loss"].append(total / seen)
        rate = _mean_rate(model, hs[val_idx])
        history["val_rate"].append(rate)
        if cfg.keep_best and rate > best_rate:
            best_rate = rate
            best = [p.copy() for p in neural._tensor_list(net)]
        if log is not None:
            log(epoch, history["loss"][-1], rate)
    if cfg.keep_best:
        for dst, src in zip(neural._tensor_list(net), best):
            dst[...] = src
    model.stage = "hybrid"
    model.adam = adam
    model.history = {**model.history, "stage2": history}
    return model


def train_p3_hybrid(dataset: Dataset, cfg: TrainConfig = None, stage2: Stage2Config = None,
                    channels=(8, 8), log=None) -> tuple[BnnModel, BnnModel]:
    """Two-stage P3 training; returns ``(stage-1 copy, hybrid model)``."""
    cfg = cfg or TrainConfig()
    model = train_model("p3", dataset, cfg, channels, log=log)
    stage1 = copy_model(model)
    h = model.history
    stage2 = stage2 or Stage2Config(seed=cfg.seed, batch_size=cfg.batch_size)
    train_p3_stage2(model, dataset, stage2, h["train_idx"], h["val_idx"], log=log)
    return stage1, model


def copy_model(model: BnnModel) -> BnnModel:
    net, _, _ = neural.network_from_bytes(neural.network_to_bytes(model.net))
    return BnnModel(model.problem, net, model.config.replace(), model.target_scale, model.stage, None,
                    dict(model.history), model.log_span)


# ---------------------------------------------------------------------------
# model files: an envelope section followed by the network checkpoint

ENVELOPE_MAGIC = b"BNNE"
ENVELOPE_VERSION = 1
_ENV = struct.Struct("<4sIIIddII5d")


def model_to_bytes(model: BnnModel, with_adam=True) -> bytes:
    cfg = model.config
    head = _ENV.pack(ENVELOPE_MAGIC, ENVELOPE_VERSION, PROBLEM_CODES[model.problem], STAGES.index(model.stage),
                     float(model.target_scale), float(model.log_span), cfg.n_antennas, cfg.n_users, cfg.noise_power, cfg.p_max,
                     cfg.bandwidth_hz, cfg.cell_radius_m, cfg.min_distance_m)
    vecs = np.concatenate([cfg.sinr_targets, cfg.stream_weights, cfg.rate_weights]).astype("<f8").tobytes()
    return head + vecs + neural.network_to_bytes(model.net, model.adam if with_adam else None)


def model_from_bytes(buf: bytes) -> BnnModel:
    if len(buf) < _ENV.size or buf[:4] != ENVELOPE_MAGIC:
        raise FormatError("not a beamopt model file")
    _, version, code, stage, scale, span, n, k, noise, p_max, bw, radius, dmin = _ENV.unpack_from(buf, 0)
    if version != ENVELOPE_VERSION:
        raise FormatError(f"unsupported model version {version}")
    names = {v: key for key, v in PROBLEM_CODES.items()}
    if code not in names or stage >= len(STAGES):
        raise FormatError("corrupt model envelope")
    off = _ENV.size
    if len(buf) < off + 24 * k:
        raise FormatError("model file truncated")
    vecs = np.frombuffer(buf, dtype="<f8", count=3 * k, offset=off).copy()
    cfg = SystemConfig(n, k, noise_power=noise, p_max=p_max, sinr_targets=vecs[:k], stream_weights=vecs[k:2 * k],
                       rate_weights=vecs[2 * k:], bandwidth_hz=bw, cell_radius_m=radius, min_distance_m=dmin)
    net, adam, end = neural.network_from_bytes(buf, off + 24 * k)
    if end != len(buf):
        raise FormatError("trailing bytes after model checkpoint")
    return BnnModel(names[code], net, cfg, scale, STAGES[stage], adam, log_span=span)


def save_model(path, model: BnnModel, with_adam=True):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model, with_adam))


def load_model(path) -> BnnModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# evaluation

METHODS = {
    "p1": ("optimal", "zf", "rzf", "bnn"),
    "p2": ("optimal", "zf", "bnn"),
    "p3": ("wmmse", "wmmse_rand", "zf", "rzf", "bnn", "bnn_supervised"),
}


@dataclass
class MethodResult:
    method: str
    objective: float
    objective_all: float
    feasibility: float
    time_per_sample: float
    count: int


@dataclass
class EvalReport:
    problem: str
    objective_name: str
    rows: list[MethodResult]
    sample_count: int
    per_sample: dict = field(default_factory=dict)

    def row(self, method) -> MethodResult:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)


OBJECTIVE = {"p1": "balanced_sinr", "p2": "total_power", "p3": "sum_rate"}


def _run_method(problem, method, h, config, models, eps, rng):
    """Objective values and feasibility flags of one method on a stack of channels."""
    sigma2 = config.noise_power
    ok = np.ones(len(h), dtype=bool)
    if problem == "p1":
        if method == "optimal":
            w = solve_sinr_balancing_batch(h, config, tol=eps).w_star
        elif method == "zf":
            w = zf_balanced_power(h, config)
        elif method == "rzf":
            w = rzf_balanced(h, config)
        else:
            w = predict_p1(models[method], h).w
        return np.min(sinr_downlink(h, w, sigma2) / config.stream_weights, axis=-1), ok
    if problem == "p2":
        if method == "optimal":
            sol = solve_power_min_batch(h, config, tol=eps, stop_rule="downlink")
            return sol.total_power, sol.status == STATUS_OK
        if method == "zf":
            return total_power(zf_power_min(h, config)), ok
        out = predict_p2(models[method], h)
        return out.total_power, out.feasible
    if method == "wmmse":
        w = solve_wmmse_batch(h, config).w
    elif method == "wmmse_rand":
        w0 = rng.normal(size=h.shape) + 1j * rng.normal(size=h.shape)
        w0 *= np.sqrt(config.p_max / total_power(w0))[:, None, None]
        w = solve_wmmse_batch(h, config, w_init=w0).w
    elif method == "zf":
        w = zf_equal_power(h, config)
    elif method == "rzf":
        w = rzf_beamforming(h, config)
    else:
        w = predict_p3(models[method], h).w
    return weighted_sum_rate(h, w, config.rate_weights, sigma2), ok


def time_samples(problem, method, h, config, models, eps, rng):
    """Wall-clock seconds of each sample, solved one at a time."""
    out = np.empty(len(h))
    for i in range(len(h)):
        t0 = time.perf_counter()
        _run_method(problem, method, h[i:i + 1], config, models, eps, rng)
        out[i] = time.perf_counter() - t0
    return out


def evaluate(models: dict, methods, dataset: Dataset, eps_preset="1e-4", timing=True, timing_count=None,
             seed=0) -> EvalReport:
    """Compare methods on a test set.

    ``models`` maps method names (``"bnn"``, ``"bnn_supervised"``) to
    trained models of the dataset's problem.  For P2 the objective is the
    mean power over the samples where the BNN is feasible (every sample if
    no BNN is evaluated); ``objective_all`` averages over each method's own
    feasible set.  Times are per sample, running one sample at a time.
    """
    problem = dataset.problem
    eps = EPS_PRESETS[eps_preset] if isinstance(eps_preset, str) else float(eps_preset)
    config = dataset.config
    for name, m in models.items():
        if m.problem != problem or m.config.n_users != config.n_users or m.config.n_antennas < config.n_antennas:
            raise ContractError(f"model {name!r} does not match the dataset configuration")
    for m in models.values():
        if m.plan is None:
            m.compile()
    h = dataset.channels
    values, feas = {}, {}
    for method in methods:
        if method not in METHODS[problem]:
            raise ContractError(f"method {method!r} is not available for {problem}")
        if method.startswith("bnn") and method not in models:
            raise ContractError(f"method {method!r} needs a model")
        values[method], feas[method] = _run_method(problem, method, h, config, models, eps,
                                                   np.random.default_rng(seed))
    common = feas["bnn"] if "bnn" in feas else np.ones(len(h), dtype=bool)
    rows = []
    n_time = len(h) if timing_count is None else min(timing_count, len(h))
    for method in methods:
        v, f = values[method], feas[method]
        mask = common & f
        t = float(np.mean(time_samples(problem, method, h[:n_time], config, models, eps,
                                       np.random.default_rng(seed)))) if timing else float("nan")
        rows.append(MethodResult(method, float(np.mean(v[mask])) if mask.any() else float("nan"),
                                 float(np.mean(v[f])) if f.any() else float("nan"),
                                 100.0 * float(np.mean(f)), t, len(h)))
    return EvalReport(problem, OBJECTIVE[problem], rows, len(h), {"values": values, "feasible": feas})
