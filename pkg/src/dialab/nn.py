"""Feed-forward networks with batch normalization and hand-written backprop.

Parameters split three ways: ``theta_A`` is every BN (gamma, beta) pair,
``theta_F`` every linear weight/bias, and the BN source statistics
(mu_s, sigma2_s) are kept per layer and only ever read.

A forward pass never mutates the network; it returns the logits, the batch
statistics of every BN layer and a trace that ``backward`` consumes.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import BatchTooSmallError, CheckpointParseError, ConfigError, DimensionError
from .numeric import DTYPE, Rng

DEFAULT_EPS = 1e-5


@dataclass
class Linear:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class ReLU:
    dim: int


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    mu_s: np.ndarray
    sigma2_s: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        c = len(self.gamma)
        if not (len(self.beta) == len(self.mu_s) == len(self.sigma2_s) == c):
            raise DimensionError("gamma, beta, mu_s and sigma2_s must share one length")
        if self.eps <= 0:
            raise ConfigError("BN eps must be positive", key="eps")
        if np.any(np.asarray(self.sigma2_s).real < 0):
            raise ConfigError("BN source variance must be nonnegative", key="sigma2_s")

    @property
    def channels(self) -> int:
        return len(self.gamma)

    @classmethod
    def identity(cls, channels: int, eps: float = DEFAULT_EPS) -> "BatchNorm":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), eps)


Layer = Union[Linear, ReLU, BatchNorm]


# ---------------------------------------------------------------- BN modes

@dataclass(frozen=True)
class TrainStats:
    """Normalize with the stored source statistics."""


@dataclass(frozen=True)
class TestStats:
    """Normalize with the statistics of the current batch."""


@dataclass(frozen=True)
class Smoothed:
    """Convex mix ``tau * source + (1 - tau) * batch``; the last ``n_tr`` BN layers use ``tau = 1``."""

    tau: float
    n_tr: int = 0

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}", key="tau")
        if self.n_tr < 0:
            raise ConfigError(f"n_tr must be nonnegative, got {self.n_tr}", key="n_tr")


BnMode = Union[TrainStats, TestStats, Smoothed]


def layer_tau(mode: BnMode, from_end: int) -> float:
    """Weight on the source statistics for a BN layer ``from_end`` positions before the last one."""
    if isinstance(mode, TestStats):
        return 0.0
    if isinstance(mode, TrainStats):
        return 1.0
    if from_end < mode.n_tr:
        return 1.0
    return float(mode.tau)


@dataclass
class BnStats:
    layer_index: int
    mu: np.ndarray
    var: np.ndarray


BnSnapshot = list  # list[BnStats], one per BN layer in network order


@dataclass
class _BnCache:
    z: np.ndarray
    mu_t: np.ndarray
    mu_bar: np.ndarray
    scale: np.ndarray  # sqrt(var_bar + eps)
    xhat: np.ndarray
    tau: float
    gamma: np.ndarray
    uses_batch: bool


def _batch_stats(z):
    mu = z.mean(axis=0)
    var = ((z - mu) ** 2).mean(axis=0)
    return mu, var


def _bn_apply(layer: BatchNorm, z, tau: float, mode: BnMode):
    n = z.shape[0]
    if z.ndim != 2 or z.shape[1] != layer.channels:
        raise DimensionError(f"BN layer expects (n, {layer.channels}) input, got {z.shape}")
    uses_batch = tau < 1.0
    if uses_batch and n < 2:
        raise BatchTooSmallError(f"batch statistics need at least 2 samples, got {n}")
    mu_t, var_t = _batch_stats(z)
    if isinstance(mode, TestStats):
        mu_bar, var_bar = mu_t, var_t
    elif isinstance(mode, TrainStats):
        mu_bar, var_bar = layer.mu_s, layer.sigma2_s
    else:
        mu_bar = tau * layer.mu_s + (1.0 - tau) * mu_t
        var_bar = tau * layer.sigma2_s + (1.0 - tau) * var_t
    scale = np.sqrt(var_bar + layer.eps)
    xhat = (z - mu_bar) / scale
    out = layer.gamma * xhat + layer.beta
    cache = _BnCache(z, mu_t, mu_bar, scale, xhat, tau, layer.gamma, uses_batch)
    return out, mu_t, var_t, cache


def bn_forward(layer: BatchNorm, z, mode: BnMode = TestStats(), from_end: int = 0, layer_index: int = 0):
    """Normalize ``z`` with ``layer``; returns ``(out, BnStats)``.

    ``from_end`` is the layer's position counted from the last BN layer and
    only matters for ``Smoothed`` modes with ``n_tr > 0``.
    """
    out, mu_t, var_t, _ = _bn_apply(layer, z, layer_tau(mode, from_end), mode)
    return out, BnStats(layer_index, mu_t, var_t)


# ---------------------------------------------------------------- network

@dataclass
class Network:
    layers: list = field(default_factory=list)

    def __post_init__(self):
        width = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Linear):
                if width is not None and layer.in_dim != width:
                    raise DimensionError(f"layer {i}: expects width {layer.in_dim}, previous gives {width}")
                width = layer.out_dim
            elif isinstance(layer, ReLU):
                if width is not None and layer.dim != width:
                    raise DimensionError(f"layer {i}: ReLU width {layer.dim} != {width}")
                width = layer.dim
            elif isinstance(layer, BatchNorm):
                if width is not None and layer.channels != width:
                    raise DimensionError(f"layer {i}: BN has {layer.channels} channels, input width {width}")
                width = layer.channels
            else:
                raise TypeError(f"unsupported layer type {type(layer).__name__}")

    @property
    def input_dim(self) -> int:
        first = self.layers[0]
        return first.in_dim if isinstance(first, Linear) else (first.channels if isinstance(first, BatchNorm) else first.dim)

    @property
    def output_dim(self) -> int:
        for layer in reversed(self.layers):
            if isinstance(layer, Linear):
                return layer.out_dim
            if isinstance(layer, BatchNorm):
                return layer.channels
        return self.layers[-1].dim

    @property
    def bn_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, BatchNorm)]

    @property
    def n_bn(self) -> int:
        return len(self.bn_layers)

    def clone(self) -> "Network":
        return copy.deepcopy(self)

    # theta_A as one flat vector: [gamma_0, beta_0, gamma_1, beta_1, ...]
    def theta_A(self) -> np.ndarray:
        parts = []
        for bn in self.bn_layers:
            parts += [bn.gamma, bn.beta]
        return np.concatenate(parts) if parts else np.zeros(0)

    def with_theta_A(self, flat) -> "Network":
        """Copy sharing theta_F and source statistics, with theta_A replaced (dtype may be complex)."""
        flat = np.asarray(flat)
        layers, pos = [], 0
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                c = layer.channels
                gamma, beta = flat[pos:pos + c].copy(), flat[pos + c:pos + 2 * c].copy()
                pos += 2 * c
                layers.append(BatchNorm(gamma, beta, layer.mu_s, layer.sigma2_s, layer.eps))
            else:
                layers.append(layer)
        if pos != flat.size:
            raise DimensionError(f"theta_A has {pos} entries, got {flat.size}")
        net = Network.__new__(Network)
        net.layers = layers
        return net

    def theta_F(self) -> list:
        return [(l.weight, l.bias) for l in self.layers if isinstance(l, Linear)]

    def theta_B_source(self) -> list:
        return [(l.mu_s, l.sigma2_s) for l in self.bn_layers]


def mlp(dims, bn: bool = True, rng: Rng | None = None, eps: float = DEFAULT_EPS) -> Network:
    """``dims[0] -> dims[1] -> BN -> ReLU -> ... -> dims[-1]`` with He-initialized weights."""
    rng = rng or Rng(0)
    layers: list = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b))
        layers.append(Linear(w, np.zeros(b)))
        if i < len(dims) - 2:
            if bn:
                layers.append(BatchNorm.identity(b, eps))
            layers.append(ReLU(b))
    return Network(layers)


@dataclass
class Trace:
    mode: BnMode
    caches: list
    x: np.ndarray


@dataclass
class ForwardResult:
    logits: np.ndarray
    snapshot: list
    trace: Trace


def forward(net: Network, x, mode: BnMode = TestStats()) -> ForwardResult:
    x = np.asarray(x)
    if x.dtype.kind not in "fc":
        x = x.astype(DTYPE)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise DimensionError(f"input must be (n, {net.input_dim}), got {x.shape}")
    n_bn = net.n_bn
    bn_pos = 0
    h = x
    caches, snapshot = [], []
    for layer in net.layers:
        if isinstance(layer, Linear):
            caches.append(h)
            h = h @ layer.weight + layer.bias
        elif isinstance(layer, ReLU):
            mask = h.real > 0
            caches.append(mask)
            h = h * mask
        else:
            tau = layer_tau(mode, n_bn - 1 - bn_pos)
            h, mu_t, var_t, cache = _bn_apply(layer, h, tau, mode)
            caches.append(cache)
            snapshot.append(BnStats(bn_pos, mu_t, var_t))
            bn_pos += 1
    return ForwardResult(h, snapshot, Trace(mode, caches, x))


def logits(net: Network, x, mode: BnMode = TestStats()) -> np.ndarray:
    return forward(net, x, mode).logits


@dataclass
class Gradients:
    input: np.ndarray
    gamma: list
    beta: list
    weight: list
    bias: list

    def theta_A(self) -> np.ndarray:
        parts = []
        for g, b in zip(self.gamma, self.beta):
            parts += [g, b]
        return np.concatenate(parts) if parts else np.zeros(0)


def backward(net: Network, trace: Trace, upstream) -> Gradients:
    """Reverse pass for ``<upstream, logits>``, including coupling through batch statistics."""
    g = np.asarray(upstream)
    gammas, betas, weights, biases = [], [], [], []
    for layer, cache in zip(reversed(net.layers), reversed(trace.caches)):
        if isinstance(layer, Linear):
            weights.append(cache.T @ g)
            biases.append(g.sum(axis=0))
            g = g @ layer.weight.T
        elif isinstance(layer, ReLU):
            g = g * cache
        else:
            c: _BnCache = cache
            gammas.append((g * c.xhat).sum(axis=0))
            betas.append(g.sum(axis=0))
            dxhat = g * c.gamma
            dz = dxhat / c.scale
            if c.tau < 1.0:
                n = c.z.shape[0]
                d_mu = -dz.sum(axis=0)
                d_var = -0.5 * (dxhat * (c.z - c.mu_bar)).sum(axis=0) / c.scale ** 3
                w = 1.0 - c.tau
                dz = dz + w * (d_mu / n + d_var * 2.0 * (c.z - c.mu_t) / n)
            g = dz
    return Gradients(g, gammas[::-1], betas[::-1], weights[::-1], biases[::-1])


def backward_input(net: Network, x, mode: BnMode, upstream) -> np.ndarray:
    res = forward(net, x, mode)
    _check_upstream(res.logits, upstream)
    return backward(net, res.trace, upstream).input


def backward_theta_A(net: Network, x, mode: BnMode, upstream) -> np.ndarray:
    """Flat gradient over (gamma, beta) of every BN layer, same layout as ``Network.theta_A``."""
    res = forward(net, x, mode)
    _check_upstream(res.logits, upstream)
    return backward(net, res.trace, upstream).theta_A()


def _check_upstream(out, upstream):
    if np.shape(upstream) != out.shape:
        raise DimensionError(f"upstream gradient shape {np.shape(upstream)} != logits shape {out.shape}")


# ---------------------------------------------------------------- checkpoints

_MAGIC = "dialab-checkpoint 1"


def _fmt(arr) -> str:
    return ",".join(format(float(v), ".17g") for v in np.asarray(arr, dtype=DTYPE).ravel())


def save_checkpoint(net: Network) -> str:
    manifest = []
    body = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Linear):
            manifest.append({"kind": "linear", "in": layer.in_dim, "out": layer.out_dim})
            body.append(f"layer {i} weight {_fmt(layer.weight)}")
            body.append(f"layer {i} bias {_fmt(layer.bias)}")
        elif isinstance(layer, ReLU):
            manifest.append({"kind": "relu", "dim": layer.dim})
        else:
            manifest.append({"kind": "batchnorm", "channels": layer.channels, "eps": format(layer.eps, ".17g")})
            for name in ("gamma", "beta", "mu_s", "sigma2_s"):
                body.append(f"layer {i} {name} {_fmt(getattr(layer, name))}")
    head = [_MAGIC, "manifest " + json.dumps(manifest, separators=(",", ":"))]
    return "\n".join(head + body) + "\n"


_ARRAYS = {"linear": ("weight", "bias"), "batchnorm": ("gamma", "beta", "mu_s", "sigma2_s"), "relu": ()}


def load_checkpoint(text: str) -> Network:
    lines = text.splitlines()
    if not lines or lines[0].strip() != _MAGIC:
        raise CheckpointParseError("not a dialab checkpoint (bad header)")
    if len(lines) < 2 or not lines[1].startswith("manifest "):
        raise CheckpointParseError("missing manifest line")
    try:
        manifest = json.loads(lines[1][len("manifest "):])
    except json.JSONDecodeError as exc:
        raise CheckpointParseError(f"malformed manifest: {exc}") from None

    arrays: dict = {}
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split(" ", 3)
        if len(parts) != 4 or parts[0] != "layer":
            raise CheckpointParseError(f"line {lineno}: expected 'layer <i> <name> <values>'")
        try:
            idx = int(parts[1])
        except ValueError:
            raise CheckpointParseError(f"line {lineno}: bad layer index {parts[1]!r}") from None
        try:
            values = np.array([float(v) for v in parts[3].split(",")], dtype=DTYPE)
        except ValueError:
            raise CheckpointParseError(f"layer {idx}: unparsable values for {parts[2]!r}", layer_index=idx) from None
        arrays[(idx, parts[2])] = values

    layers: list = []
    for i, spec in enumerate(manifest):
        kind = spec.get("kind")
        if kind not in _ARRAYS:
            raise CheckpointParseError(f"layer {i}: unknown layer kind {kind!r}", layer_index=i)
        got = {}
        for name in _ARRAYS[kind]:
            if (i, name) not in arrays:
                raise CheckpointParseError(f"layer {i} ({kind}): missing parameter array {name!r}", layer_index=i)
            got[name] = arrays[(i, name)]
        try:
            if kind == "linear":
                a, b = int(spec["in"]), int(spec["out"])
                if got["weight"].size != a * b or got["bias"].size != b:
                    raise CheckpointParseError(f"layer {i} (linear): array sizes do not match {a}x{b}", layer_index=i)
                layers.append(Linear(got["weight"].reshape(a, b), got["bias"]))
            elif kind == "relu":
                layers.append(ReLU(int(spec["dim"])))
            else:
                c = int(spec["channels"])
                if any(v.size != c for v in got.values()):
                    raise CheckpointParseError(f"layer {i} (batchnorm): arrays must have {c} entries", layer_index=i)
                layers.append(BatchNorm(got["gamma"], got["beta"], got["mu_s"], got["sigma2_s"], float(spec["eps"])))
        except KeyError as exc:
            raise CheckpointParseError(f"layer {i}: manifest entry lacks {exc}", layer_index=i) from None
    try:
        return Network(layers)
    except DimensionError as exc:
        raise CheckpointParseError(str(exc)) from None
