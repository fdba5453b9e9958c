"""Distribution Invading Attack.

The attacker controls a few rows of a test batch.  Because the victim
re-estimates BN statistics (and possibly takes a TTA step) on the whole
batch, perturbing those rows moves the prediction on other, untouched rows.
Perturbations are found by sign-gradient descent projected onto an
l-infinity ball and the pixel box.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import nn
from .errors import ConfigError, NumericError
from .numeric import Rng, cross_entropy, softmax
from .tta import Method, TtaConfig, loss_input_gradient, tta_theta_gradient

UNBOUNDED = math.inf
_COMPLEX_STEP = 1e-20


@dataclass(frozen=True)
class Targeted:
    tgt_index: int
    tgt_label: int


@dataclass(frozen=True)
class Indiscriminate:
    pass


@dataclass(frozen=True)
class StealthyTargeted:
    tgt_index: int
    tgt_label: int
    omega: float = 0.1


Objective = Union[Targeted, Indiscriminate, StealthyTargeted]


@dataclass(frozen=True)
class AttackSpec:
    objective: Objective
    mal_indices: tuple
    epsilon: float = UNBOUNDED
    alpha: float = 1 / 255
    n_steps: int = 500
    bilevel: bool = False
    pixel_bounds: tuple = (0.0, 1.0)
    restarts: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mal_indices", tuple(sorted(int(i) for i in self.mal_indices)))
        if len(set(self.mal_indices)) != len(self.mal_indices):
            raise ConfigError("mal_indices contains duplicates", key="attack.mal_indices")
        if not self.epsilon >= 0:
            raise ConfigError("epsilon must be nonnegative", key="attack.epsilon")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive", key="attack.alpha")
        if self.n_steps < 0:
            raise ConfigError("n_steps must be nonnegative", key="attack.n_steps")
        if self.restarts < 0:
            raise ConfigError("restarts must be nonnegative", key="attack.restarts")
        lo, hi = self.pixel_bounds
        if not lo < hi:
            raise ConfigError("pixel_bounds must satisfy low < high", key="attack.pixel_bounds")
        tgt = getattr(self.objective, "tgt_index", None)
        if tgt is not None and tgt in self.mal_indices:
            raise ConfigError("the targeted sample cannot be malicious", key="attack.mal_indices")
        if isinstance(self.objective, StealthyTargeted) and self.objective.omega < 0:
            raise ConfigError("omega must be nonnegative", key="attack.omega")


@dataclass
class AttackResult:
    mal_indices: tuple
    perturbation: np.ndarray
    final_loss: float
    best_step: int
    loss_trace: list = field(default_factory=list)

    def apply(self, batch) -> np.ndarray:
        out = np.array(batch, dtype=float, copy=True)
        idx = list(self.mal_indices)
        out[idx] = out[idx] + self.perturbation
        return out


def _objective_rows(objective: Objective, mal, n):
    """Rows scored by the secondary (benign) term of the objective."""
    excluded = set(mal)
    if not isinstance(objective, Indiscriminate):
        excluded.add(objective.tgt_index)
    return np.array([i for i in range(n) if i not in excluded], dtype=int)


def loss_and_logit_grad(objective: Objective, mal, logits, labels=None):
    """Adversarial loss of a logit matrix and its gradient w.r.t. the logits."""
    n, k = logits.shape
    grad = np.zeros_like(logits)
    if isinstance(objective, (Targeted, StealthyTargeted)):
        t = objective.tgt_index
        if not 0 <= objective.tgt_label < k:
            raise ConfigError(f"target label {objective.tgt_label} outside [0, {k})", key="attack.tgt_label")
        row = logits[t:t + 1]
        loss = cross_entropy(row, [objective.tgt_label])[0]
        grad[t] = softmax(row)[0]
        grad[t, objective.tgt_label] -= 1.0
        if isinstance(objective, StealthyTargeted) and objective.omega > 0:
            rows = _objective_rows(objective, mal, n)
            if len(rows):
                y = _labels(labels, rows)
                loss = loss + objective.omega * cross_entropy(logits[rows], y).mean()
                g = softmax(logits[rows])
                g[np.arange(len(rows)), y] -= 1.0
                grad[rows] += objective.omega * g / len(rows)
        return loss, grad
    rows = _objective_rows(objective, mal, n)
    if not len(rows):
        return 0.0, grad
    y = _labels(labels, rows)
    loss = -cross_entropy(logits[rows], y).mean()
    g = softmax(logits[rows])
    g[np.arange(len(rows)), y] -= 1.0
    grad[rows] = -g / len(rows)
    return loss, grad


def _labels(labels, rows):
    if labels is None:
        raise ConfigError("this objective needs ground-truth labels", key="attack.labels")
    return np.asarray(labels, dtype=int)[rows]


def adversarial_loss(spec: AttackSpec, net_star: nn.Network, batch, labels=None,
                     bn_mode: nn.BnMode = nn.TestStats()) -> float:
    """Objective value for an (already adapted) network on the full batch."""
    out = nn.forward(net_star, batch, bn_mode).logits
    return float(loss_and_logit_grad(spec.objective, spec.mal_indices, out, labels)[0])


def sign_gradient_step(delta, grad, alpha, epsilon, base_rows, pixel_bounds=(0.0, 1.0)):
    """One projected sign-descent step; result stays in the ball and keeps ``base + delta`` in bounds."""
    lo, hi = pixel_bounds
    d = delta - alpha * np.sign(grad)
    if math.isfinite(epsilon):
        d = np.clip(d, -epsilon, epsilon)
    return _fit_box(d, base_rows, lo, hi)


def _fit_box(d, base, lo, hi):
    d = np.clip(d, lo - base, hi - base)
    # base + (hi - base) can round past hi
    over = base + d > hi
    if over.any():
        d[over] = np.nextafter(d[over], -np.inf)
    under = base + d < lo
    if under.any():
        d[under] = np.nextafter(d[under], np.inf)
    return d


class _Problem:
    """Attack objective as a function of the full batch, with its exact input gradient."""

    def __init__(self, net, labels, tta: TtaConfig, spec: AttackSpec):
        self.net, self.labels, self.tta, self.spec = net, labels, tta, spec
        self.bilevel = spec.bilevel and tta.method is not Method.TEBN
        if self.bilevel and tta.steps != 1:
            raise ConfigError("bilevel attacks differentiate exactly through one TTA step; set tta.steps = 1",
                              key="tta.steps")

    def __call__(self, x):
        spec, tta = self.spec, self.tta
        net = self.net
        if self.bilevel:
            theta = net.theta_A()
            net = net.with_theta_A(theta - tta.eta * tta_theta_gradient(self.net, x, tta))
        res = nn.forward(net, x, tta.bn_mode)
        loss, d_logits = loss_and_logit_grad(spec.objective, spec.mal_indices, res.logits, self.labels)
        grads = nn.backward(net, res.trace, d_logits)
        gx = grads.input
        if self.bilevel:
            # d/dx of (dL/dtheta') . theta'(x) = -eta * d/dx [u . grad_theta L_TTA(x, theta)],
            # evaluated by a complex step along u
            u = grads.theta_A()
            scale = max(float(np.max(np.abs(u))), 1e-300)
            probe = self.net.with_theta_A(self.net.theta_A() + 1j * _COMPLEX_STEP * (u / scale))
            mixed = loss_input_gradient(probe, self.net, x, tta).imag * (scale / _COMPLEX_STEP)
            gx = gx - tta.eta * mixed
        return float(loss), gx

    def theta_star(self, x) -> nn.Network:
        if not self.bilevel:
            return self.net
        return self.net.with_theta_A(self.net.theta_A() - self.tta.eta * tta_theta_gradient(self.net, x, self.tta))


def attack_objective(net_pre: nn.Network, batch, labels, tta: TtaConfig, spec: AttackSpec):
    """Callable ``x -> (loss, d loss / d x)`` used by ``dia_attack``; exposed for gradient checks."""
    return _Problem(net_pre, labels, tta, spec)


def dia_attack(net_pre: nn.Network, batch, labels, tta: TtaConfig, spec: AttackSpec,
               rng: Optional[Rng] = None) -> AttackResult:
    """Craft perturbations for ``spec.mal_indices``; benign rows are never modified.

    Returns the best iterate seen (the zero perturbation included), with the
    loss of every visited iterate in ``loss_trace``.
    """
    batch = np.asarray(batch, dtype=float)
    n = batch.shape[0]
    mal = list(spec.mal_indices)
    if not mal:
        raise ConfigError("attack needs at least one malicious row", key="attack.n_mal")
    if n < 2:
        raise ConfigError("attack needs a batch of at least 2 rows", key="bench.batch_size")
    if min(mal) < 0 or max(mal) >= n:
        raise ConfigError("malicious index out of range", key="attack.mal_indices")
    tgt = getattr(spec.objective, "tgt_index", None)
    if tgt is not None and not 0 <= tgt < n:
        raise ConfigError("target index out of range", key="attack.tgt_index")
    lo, hi = spec.pixel_bounds
    base = batch[mal]
    if np.any(base < lo) or np.any(base > hi):
        raise ConfigError("malicious rows must start inside pixel_bounds", key="attack.pixel_bounds")
    if spec.restarts and rng is None:
        raise ConfigError("random restarts need an rng", key="attack.restarts")

    problem = _Problem(net_pre, labels, tta, spec)
    best = None
    for restart in range(spec.restarts + 1):
        if restart == 0:
            delta = np.zeros_like(base)
        else:
            radius = spec.epsilon if math.isfinite(spec.epsilon) else hi - lo
            delta = _fit_box(rng.uniform(-radius, radius, size=base.shape), base, lo, hi)
        result = _descend(problem, batch, mal, base, delta, spec)
        if best is None or result.final_loss < best.final_loss:
            best = result
    return best


def _descend(problem, batch, mal, base, delta, spec: AttackSpec) -> AttackResult:
    x = batch.copy()
    trace = []
    best_loss, best_delta, best_step = math.inf, delta, 0
    for step in range(spec.n_steps + 1):
        x[mal] = base + delta
        loss, gx = problem(x)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite attack loss at step {step}", step=step)
        trace.append(loss)
        if loss < best_loss:
            best_loss, best_delta, best_step = loss, delta, step
        if step == spec.n_steps:
            break
        g = gx[mal]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite attack gradient at step {step}", step=step)
        delta = sign_gradient_step(delta, g, spec.alpha, spec.epsilon, base, spec.pixel_bounds)
    return AttackResult(tuple(mal), best_delta, best_loss, best_step, trace)
