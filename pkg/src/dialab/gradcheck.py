"""Central finite-difference oracles for every analytic gradient in the package."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .diagnostics import analytic_bn_input_gradient
from .numeric import Rng

FD_STEP = 1e-5
KINK_MARGIN = 1e-3
MAGNITUDE_FLOOR = 1e-3


def central_difference(f, x, h: float = FD_STEP) -> np.ndarray:
    """Gradient of the scalar function ``f`` at ``x`` by central differences."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f(x)
        x[idx] = orig - h
        down = f(x)
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor: float = MAGNITUDE_FLOOR) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``.

    The floor keeps gradients that are zero up to roundoff (two-sample BN is
    nearly input invariant) from reporting O(1) errors; central differences
    on O(1) outputs cannot resolve anything below ~1e-11 absolute.
    """
    a, b = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


@dataclass(frozen=True)
class CheckResult:
    name: str
    instance: int
    n: int
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tol


def _min_relu_margin(net, x, mode):
    """Smallest |pre-activation| feeding any ReLU; finite differences are invalid near 0."""
    margin = np.inf
    for i, layer in enumerate(net.layers):
        if isinstance(layer, nn.ReLU):
            pre = nn.forward(nn.Network(net.layers[:i]), x, mode).logits
            margin = min(margin, float(np.min(np.abs(pre))))
    return margin


def random_network(rng: Rng, d=3, hidden=(5, 4), k=3) -> nn.Network:
    """Two-BN-layer MLP with randomized affine parameters and source statistics."""
    net = nn.mlp([d, *hidden, k], rng=rng)
    layers = []
    for layer in net.layers:
        if isinstance(layer, nn.BatchNorm):
            c = layer.channels
            layer = nn.BatchNorm(rng.normal(1.0, 0.3, c), rng.normal(0.0, 0.3, c),
                                 rng.normal(0.0, 0.5, c), rng.uniform(0.5, 2.0, c))
        layers.append(layer)
    return nn.Network(layers)


def random_mode(rng: Rng, n_bn: int) -> nn.BnMode:
    pick = int(rng.integers(0, 3))
    if pick == 0:
        return nn.TestStats()
    if pick == 1:
        return nn.TrainStats()
    return nn.Smoothed(float(rng.uniform(0.0, 1.0)), int(rng.integers(0, n_bn + 1)))


def _instance(rng, n):
    while True:
        net = random_network(rng)
        mode = random_mode(rng, net.n_bn)
        x = rng.uniform(0.0, 1.0, size=(n, net.input_dim))
        if _min_relu_margin(net, x, mode) > KINK_MARGIN:
            return net, mode, x, rng.normal(0.0, 1.0, size=(n, net.output_dim))


def check_network_gradients(seed: int, n_instances: int = 100, tol: float = 1e-5) -> list:
    """Input and theta_A gradients of random networks versus central differences."""
    rng = Rng(seed)
    results = []
    for k in range(n_instances):
        n = (2, 4, 8)[k % 3]
        net, mode, x, up = _instance(rng, n)
        res = nn.forward(net, x, mode)
        grads = nn.backward(net, res.trace, up)

        def f_x(xx):
            return float(np.sum(up * nn.forward(net, xx, mode).logits))

        theta = net.theta_A()

        def f_theta(t):
            return float(np.sum(up * nn.forward(net.with_theta_A(t), x, mode).logits))

        results.append(CheckResult("backward_input", k, n, relative_error(grads.input, central_difference(f_x, x)), tol))
        results.append(CheckResult("backward_theta_A", k, n,
                                   relative_error(grads.theta_A(), central_difference(f_theta, theta)), tol))
    return results


def single_bn_output(x_tgt, batch, w, b, tau, mu_s, sigma2_s, eps):
    """Direct evaluation of the smoothed single-BN linear score of ``x_tgt``."""
    mu_t = batch.mean(axis=0)
    var_t = ((batch - mu_t) ** 2).mean(axis=0)
    mu_bar = tau * mu_s + (1 - tau) * mu_t
    var_bar = tau * sigma2_s + (1 - tau) * var_t
    return float(np.sum((x_tgt - mu_bar) / np.sqrt(var_bar + eps) * w) + b)


def check_analytic_bn(seed: int, n_instances: int = 100, taus=(0.0, 0.3, 0.7), tol: float = 1e-5) -> list:
    rng = Rng(seed)
    results = []
    for k in range(n_instances):
        n = (2, 4, 8)[k % 3]
        d = 3
        batch = rng.uniform(0.0, 1.0, size=(n, d))
        w = rng.normal(0.0, 1.0, size=d)
        mu_s, sigma2_s = rng.uniform(0.2, 0.8, size=d), rng.uniform(0.02, 0.2, size=d)
        i = int(rng.integers(1, n))
        j = int(rng.integers(0, d))
        for tau in taus:
            def f(v, i=i, j=j, tau=tau):
                bb = batch.copy()
                bb[i, j] = v[0]
                # target is row 0 and is held fixed while row i moves
                return single_bn_output(batch[0], bb, w, 0.0, tau, mu_s, sigma2_s, 0.0)

            fd = central_difference(f, np.array([batch[i, j]]))[0]
            an = analytic_bn_input_gradient(batch[0], batch, w, i, j, tau, mu_s, sigma2_s)
            results.append(CheckResult(f"analytic_bn_input_gradient(tau={tau})", k, n, relative_error([an], [fd]), tol))
    return results


def run_gradcheck(seed: int = 0, n_instances: int = 100, tol: float = 1e-5) -> list:
    return check_network_gradients(seed, n_instances, tol) + check_analytic_bn(seed + 1, n_instances, tol=tol)
