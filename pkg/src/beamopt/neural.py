"""A small convolutional regression network written directly in numpy.

The stack is fixed: ``[conv -> batch-norm -> ReLU] x L -> flatten -> dense
-> sigmoid``.  Inputs are ``(F, 2, NK)`` (or ``(F, 1, 2, NK)``) real arrays;
activations use the NCHW layout internally.  Everything runs in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ContractError, FormatError

BN_MOMENTUM = 0.99
BN_EPS = 1e-3


@dataclass
class ConvLayer:
    weight: np.ndarray  # (c_out, c_in, a, a)
    bias: np.ndarray  # (c_out,)

    def __post_init__(self):
        if self.weight.shape[-1] % 2 == 0:
            raise ContractError("kernel size must be odd")


@dataclass
class BatchNormLayer:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS


@dataclass
class DenseLayer:
    weight: np.ndarray  # (m, d)
    bias: np.ndarray  # (m,)


@dataclass
class Network:
    n_antennas: int
    n_users: int
    convs: list[ConvLayer]
    norms: list[BatchNormLayer]
    dense: DenseLayer

    @property
    def input_shape(self):
        return (2, self.n_antennas * self.n_users)

    @property
    def n_outputs(self):
        return self.dense.weight.shape[0]

    def parameters(self) -> list[np.ndarray]:
        """Trainable tensors in stack order (views, safe to update in place)."""
        out = []
        for conv, bn in zip(self.convs, self.norms):
            out += [conv.weight, conv.bias, bn.scale, bn.shift]
        return out + [self.dense.weight, self.dense.bias]


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


@dataclass
class TrainConfig:
    batch_size: int = 200
    epochs: int = 100
    validation_split: float = 0.2
    shuffle_each_epoch: bool = True
    seed: int = 0
    lr: float = 1e-3

    def __post_init__(self):
        if not 0 < self.validation_split < 1:
            raise ContractError("validation_split must lie in (0, 1)")


# ---------------------------------------------------------------------------
# initialisation


def _fans(shape):
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    return shape[1], shape[0]


def glorot_normal_init(shape, seed=None, rng=None):
    """Zero-mean normal draws with std ``sqrt(2 / (fan_in + fan_out))``.

    Conv kernels ``(c_out, c_in, a, a)`` count ``a^2 c_in`` / ``a^2 c_out``;
    dense weights ``(m, d)`` count ``d`` / ``m``.
    """
    rng = np.random.default_rng(seed) if rng is None else rng
    fan_in, fan_out = _fans(shape)
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)


def build_network(n_antennas, n_users, n_outputs, channels=(8, 8), kernel=3, seed=0) -> Network:
    rng = np.random.default_rng(seed)
    convs, norms = [], []
    c_in = 1
    for c in channels:
        convs.append(ConvLayer(glorot_normal_init((c, c_in, kernel, kernel), rng=rng), np.zeros(c)))
        norms.append(BatchNormLayer(np.ones(c), np.zeros(c), np.zeros(c), np.ones(c)))
        c_in = c
    d = 2 * n_antennas * n_users * c_in
    dense = DenseLayer(glorot_normal_init((n_outputs, d), rng=rng), np.zeros(n_outputs))
    return Network(n_antennas, n_users, convs, norms, dense)


# ---------------------------------------------------------------------------
# layers


def conv2d_forward(x, layer: ConvLayer):
    """Stride-1 cross-correlation with ``a // 2`` zero padding (shape preserving)."""
    out, _ = _conv_forward(x, layer)
    return out


def _conv_forward(x, layer):
    if x.ndim != 4 or x.shape[1] != layer.weight.shape[1]:
        raise ContractError(f"conv expects (F, {layer.weight.shape[1]}, H, W), got {x.shape}")
    a = layer.weight.shape[-1]
    pad = a // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = sliding_window_view(xp, (a, a), axis=(2, 3))  # (F, C, H, W, a, a)
    out = np.tensordot(cols, layer.weight, axes=([1, 4, 5], [1, 2, 3]))  # (F, H, W, O)
    return out.transpose(0, 3, 1, 2) + layer.bias[None, :, None, None], cols


def _conv_backward(dout, cols, layer, x_shape):
    a = layer.weight.shape[-1]
    pad = a // 2
    f, c, hgt, wid = x_shape
    dw = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, a, a)
    db = dout.sum(axis=(0, 2, 3))
    tmp = np.tensordot(dout, layer.weight, axes=([1], [0]))  # (F, H, W, C, a, a)
    dxp = np.zeros((f, c, hgt + 2 * pad, wid + 2 * pad))
    for i in range(a):
        for j in range(a):
            dxp[:, :, i:i + hgt, j:j + wid] += tmp[..., i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, pad:pad + hgt, pad:pad + wid], dw, db


def batchnorm_forward(x, layer: BatchNormLayer, mode="train", update_stats=True):
    out, _ = _bn_forward(x, layer, mode, update_stats)
    return out


def _bn_forward(x, layer, mode, update_stats):
    axes = (0, 2, 3)
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_stats:
            mom = layer.momentum
            layer.running_mean[...] = mom * layer.running_mean + (1 - mom) * mean
            layer.running_var[...] = mom * layer.running_var + (1 - mom) * var
    elif mode == "infer":
        mean, var = layer.running_mean, layer.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + layer.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = layer.scale[None, :, None, None] * xhat + layer.shift[None, :, None, None]
    return out, (xhat, inv_std, mode)


def _bn_backward(dout, cache, layer):
    xhat, inv_std, mode = cache
    axes = (0, 2, 3)
    dscale = (dout * xhat).sum(axis=axes)
    dshift = dout.sum(axis=axes)
    dxhat = dout * layer.scale[None, :, None, None]
    if mode == "infer":
        return dxhat * inv_std[None, :, None, None], dscale, dshift
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dx = (m * dxhat - dxhat.sum(axis=axes)[None, :, None, None]
          - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None])
    return dx * (inv_std / m)[None, :, None, None], dscale, dshift


def relu(t):
    return np.maximum(t, 0.0)


def sigmoid(t):
    return expit(t)


def dense_forward(v, layer: DenseLayer):
    return v @ layer.weight.T + layer.bias


def mse(pred, target):
    """Squared error averaged over samples and outputs."""
    pred, target = np.atleast_2d(pred), np.atleast_2d(target)
    return float(np.sum((pred - target) ** 2) / pred.size)


def mae(pred, target):
    pred, target = np.atleast_2d(pred), np.atleast_2d(target)
    return float(np.sum(np.abs(pred - target)) / pred.size)


# ---------------------------------------------------------------------------
# whole network


@dataclass
class ForwardCache:
    x_shapes: list
    conv: list
    bn: list
    relu_masks: list
    flat: np.ndarray
    out: np.ndarray
    feature_shape: tuple


def _check_input(net, x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1:] != (1,) + net.input_shape:
        raise ContractError(f"network expects inputs of shape (F, {net.input_shape[0]}, "
                            f"{net.input_shape[1]}), got {np.shape(x)}")
    return x


def forward(net: Network, x, mode="infer", update_stats=True):
    """Run the network; returns ``(outputs, cache)``.

    ``mode="train"`` normalises with batch statistics and, unless
    ``update_stats`` is False, moves the running statistics.
    """
    a = _check_input(net, x)
    shapes, conv_c, bn_c, masks = [], [], [], []
    for conv, bn in zip(net.convs, net.norms):
        shapes.append(a.shape)
        z, cols = _conv_forward(a, conv)
        conv_c.append(cols)
        z, c = _bn_forward(z, bn, mode, update_stats)
        bn_c.append(c)
        mask = z > 0
        masks.append(mask)
        a = z * mask
    feat = a.shape
    flat = a.reshape(a.shape[0], -1)
    out = sigmoid(dense_forward(flat, net.dense))
    return out, ForwardCache(shapes, conv_c, bn_c, masks, flat, out, feat)


def predict(net: Network, x, batch_size=4096):
    x = np.asarray(x, dtype=float)
    outs = [forward(net, x[i:i + batch_size], "infer")[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.empty((0, net.n_outputs))


class InferencePlan:
    """Inference-mode forward pass with batch-norm folded into the convolutions.

    Activations are kept channel-last, so each layer is one copy into a
    zero-bordered buffer, one gather with precomputed im2col indices and
    one matrix product.  Buffers for small batches are reused between
    calls, which keeps single-sample latency low.  The plan is a snapshot:
    rebuild it after the parameters change.
    """

    _REUSE_MAX = 64

    def __init__(self, net: Network):
        self.input_shape = net.input_shape
        hgt, wid = self.input_shape
        self.layers = []
        for conv, bn in zip(net.convs, net.norms):
            c_out, c_in, a, _ = conv.weight.shape
            pad = a // 2
            s = bn.scale / np.sqrt(bn.running_var + bn.eps)
            # rows ordered (di, dj, c) to match the gather below
            wmat = (conv.weight * s[:, None, None, None]).transpose(2, 3, 1, 0).reshape(-1, c_out)
            bias = (conv.bias - bn.running_mean) * s + bn.shift
            wp = wid + 2 * pad
            # flat index of (i + di, j + dj, c) in the padded (hp, wp, c_in) layout
            di, dj, c = np.meshgrid(np.arange(a), np.arange(a), np.arange(c_in), indexing="ij")
            i, j = np.meshgrid(np.arange(hgt), np.arange(wid), indexing="ij")
            idx = ((i.ravel()[:, None] + di.ravel()[None, :]) * wp
                   + (j.ravel()[:, None] + dj.ravel()[None, :])) * c_in + c.ravel()[None, :]
            self.layers.append((pad, idx, np.ascontiguousarray(wmat), bias, c_in))
        # dense weights expect channel-major (c, i, j) features; activations here are (i, j, c)
        c_last = net.convs[-1].weight.shape[0]
        m = net.n_outputs
        self.dense_w = np.ascontiguousarray(
            net.dense.weight.reshape(m, c_last, hgt, wid).transpose(2, 3, 1, 0).reshape(-1, m))
        self.dense_b = net.dense.bias.copy()
        self._buffers = {}

    def _padded(self, f):
        bufs = self._buffers.get(f)
        if bufs is None:
            hgt, wid = self.input_shape
            bufs = [np.zeros((f, hgt + 2 * pad, wid + 2 * pad, c_in)) for pad, _, _, _, c_in in self.layers]
            if f <= self._REUSE_MAX:
                self._buffers[f] = bufs
        return bufs

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 4 and x.shape[1] == 1:
            x = x[:, 0]
        if x.shape[1:] != self.input_shape:
            raise ContractError(f"network expects inputs of shape (F, {self.input_shape[0]}, "
                                f"{self.input_shape[1]}), got {x.shape}")
        f = x.shape[0]
        hgt, wid = self.input_shape
        a = x[..., None]
        for (pad, idx, wmat, bias, _), buf in zip(self.layers, self._padded(f)):
            buf[:, pad:pad + hgt, pad:pad + wid] = a
            z = np.take(buf.reshape(f, -1), idx, axis=1) @ wmat  # (F, H*W, c_out)
            z += bias
            np.maximum(z, 0.0, out=z)
            a = z.reshape(f, hgt, wid, -1)
        return sigmoid(z.reshape(f, -1) @ self.dense_w + self.dense_b)


def backward(net: Network, cache: ForwardCache, dout):
    """Reverse-mode gradients of a scalar loss given ``dL/d(outputs)``.

    Returns gradients in the order of :meth:`Network.parameters`.
    """
    if cache is None:
        raise ContractError("backward needs the cache returned by forward")
    dz = dout * cache.out * (1.0 - cache.out)
    dw_dense = dz.T @ cache.flat
    db_dense = dz.sum(axis=0)
    da = (dz @ net.dense.weight).reshape(cache.feature_shape)
    grads = []
    for li in reversed(range(len(net.convs))):
        dz = da * cache.relu_masks[li]
        dz, dscale, dshift = _bn_backward(dz, cache.bn[li], net.norms[li])
        da, dw, db = _conv_backward(dz, cache.conv[li], net.convs[li], cache.x_shapes[li])
        grads = [dw, db, dscale, dshift] + grads
    return grads + [dw_dense, db_dense]


def count_forward_ops(net: Network):
    """Arithmetic operations of one single-sample forward pass.

    Counted from the activation shapes seen on a real pass: a
    multiply and an add per kernel tap, one op per element for batch-norm
    and activation layers, two per dense weight and one per output for
    the bias and the sigmoid.
    """
    ops = 0
    a = np.zeros((1, 1) + net.input_shape)
    for conv, bn in zip(net.convs, net.norms):
        z = conv2d_forward(a, conv)
        _, c_out, hgt, wid = z.shape
        ops += 2 * conv.weight[0].size * hgt * wid * c_out
        ops += 2 * z[0].size  # normalisation and ReLU
        a = relu(batchnorm_forward(z, bn, "infer"))
    ops += 2 * net.dense.weight.size + 2 * net.n_outputs
    return ops


# ---------------------------------------------------------------------------
# optimisation


def adam_step(params, grads, state: AdamState):
    """One in-place Adam update with bias correction."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def split_indices(count, cfg: TrainConfig, rng):
    perm = rng.permutation(count)
    n_val = int(round(cfg.validation_split * count))
    return perm[:count - n_val], perm[count - n_val:]


def iterate_batches(idx, cfg: TrainConfig, rng):
    order = rng.permutation(idx) if cfg.shuffle_each_epoch else idx
    for i in range(0, len(order), cfg.batch_size):
        yield order[i:i + cfg.batch_size]


def evaluate_loss(net, x, y, loss="mse"):
    if len(x) == 0:
        return float("nan")
    fn = mse if loss == "mse" else mae
    return fn(predict(net, x), y)


def train_supervised(net: Network, x, y, cfg: TrainConfig = None, loss="mse", adam: AdamState = None,
                     log=None):
    """Minibatch Adam on MSE (or MAE) between network outputs and ``y``.

    One seeded shuffle splits off the last ``validation_split`` fraction for
    validation; the training part is reshuffled every epoch.  Returns a
    history dict with per-epoch ``train_loss`` (train mode, averaged over
    batches) and ``val_loss`` (inference mode).
    """
    cfg = cfg or TrainConfig()
    x = np.asarray(x, dtype=float)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if len(x) == 0:
        raise ContractError("empty training set")
    adam = adam or AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = split_indices(len(x), cfg, rng)
    history = {"train_loss": [], "val_loss": [], "train_idx": train_idx, "val_idx": val_idx}
    params = net.parameters()
    for epoch in range(cfg.epochs):
        total, seen = 0.0, 0
        for b in iterate_batches(train_idx, cfg, rng):
            out, cache = forward(net, x[b], "train")
            diff = out - y[b]
            if loss == "mse":
                total += float(np.sum(diff**2)) / y.shape[1]
                grad = 2.0 * diff / diff.size
            else:
                total += float(np.sum(np.abs(diff))) / y.shape[1]
                grad = np.sign(diff) / diff.size
            seen += len(b)
            adam_step(params, backward(net, cache, grad), adam)
        history["train_loss"].append(total / seen)
        history["val_loss"].append(evaluate_loss(net, x[val_idx], y[val_idx], loss))
        if log is not None:
            log(epoch, history["train_loss"][-1], history["val_loss"][-1])
    history["adam"] = adam
    return history


# ---------------------------------------------------------------------------
# checkpoint format

MODEL_MAGIC = b"BNNM"
MODEL_VERSION = 1
_ARCH = struct.Struct("<4sIIIIII")
_BN = struct.Struct("<dd")
_ADAM = struct.Struct("<Qdddd")


def _tensor_list(net):
    out = []
    for conv, bn in zip(net.convs, net.norms):
        out += [conv.weight, conv.bias, bn.scale, bn.shift, bn.running_mean, bn.running_var]
    return out + [net.dense.weight, net.dense.bias]


def network_to_bytes(net: Network, adam: AdamState = None) -> bytes:
    channels = [c.weight.shape[0] for c in net.convs]
    kernel = net.convs[0].weight.shape[-1]
    bn = net.norms[0]
    parts = [
        _ARCH.pack(MODEL_MAGIC, MODEL_VERSION, net.n_antennas, net.n_users, net.n_outputs, len(channels), kernel),
        struct.pack(f"<{len(channels)}I", *channels),
        _BN.pack(bn.momentum, bn.eps),
    ]
    parts += [np.ascontiguousarray(t, dtype="<f8").tobytes() for t in _tensor_list(net)]
    if adam is not None and adam.m:
        parts.append(struct.pack("<I", 1))
        parts.append(_ADAM.pack(adam.step, adam.lr, adam.beta1, adam.beta2, adam.eps))
        parts += [np.ascontiguousarray(t, dtype="<f8").tobytes() for t in adam.m + adam.v]
    else:
        parts.append(struct.pack("<I", 0))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf, offset=0):
        self.buf, self.off = buf, offset

    def unpack(self, st):
        if self.off + st.size > len(self.buf):
            raise FormatError("checkpoint truncated")
        vals = st.unpack_from(self.buf, self.off)
        self.off += st.size
        return vals

    def array(self, shape):
        n = int(np.prod(shape))
        if self.off + 8 * n > len(self.buf):
            raise FormatError("checkpoint truncated")
        a = np.frombuffer(self.buf, dtype="<f8", count=n, offset=self.off).reshape(shape).copy()
        self.off += 8 * n
        return a


def network_from_bytes(buf: bytes, offset=0):
    """Parse a checkpoint blob; returns ``(network, adam_or_None, end_offset)``."""
    r = _Reader(buf, offset)
    if buf[offset:offset + 4] != MODEL_MAGIC:
        raise FormatError("not a beamopt model checkpoint")
    _, version, n, k, m, n_conv, kernel = r.unpack(_ARCH)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    channels = r.unpack(struct.Struct(f"<{n_conv}I"))
    momentum, eps = r.unpack(_BN)
    convs, norms = [], []
    c_in = 1
    for c in channels:
        w = r.array((c, c_in, kernel, kernel))
        convs.append(ConvLayer(w, r.array((c,))))
        norms.append(BatchNormLayer(r.array((c,)), r.array((c,)), r.array((c,)), r.array((c,)), momentum, eps))
        c_in = c
    dense = DenseLayer(r.array((m, 2 * n * k * c_in)), r.array((m,)))
    net = Network(n, k, convs, norms, dense)
    (has_adam,) = r.unpack(struct.Struct("<I"))
    adam = None
    if has_adam:
        step, lr, b1, b2, aeps = r.unpack(_ADAM)
        shapes = [p.shape for p in net.parameters()]
        ms = [r.array(s) for s in shapes]
        vs = [r.array(s) for s in shapes]
        adam = AdamState(lr, b1, b2, aeps, step, ms, vs)
    return net, adam, r.off


def save_network(path, net, adam=None):
    with open(path, "wb") as fh:
        fh.write(network_to_bytes(net, adam))


def load_network(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    net, adam, end = network_from_bytes(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after checkpoint")
    return net, adam
