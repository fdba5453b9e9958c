"""Test-time adaptation: batch-statistics replacement plus one of six update rules."""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import BatchTooSmallError, ConfigError, NumericError
from .numeric import argmax_rows, log_softmax, one_hot, softmax


class Method(str, enum.Enum):
    TEBN = "tebn"
    TENT = "tent"
    HARD_PL = "hard_pl"
    SOFT_PL = "soft_pl"
    ROBUST_PL = "robust_pl"
    CONJUGATE_PL = "conjugate_pl"

    @classmethod
    def parse(cls, name) -> "Method":
        if isinstance(name, cls):
            return name
        key = re.sub(r"[^a-z]", "", str(name).lower())
        for m in cls:
            if m.value.replace("_", "") == key:
                return m
        raise ConfigError(f"unknown TTA method {name!r}", key="tta.method")


@dataclass(frozen=True)
class TtaConfig:
    method: Method = Method.TENT
    eta: float = 1e-3
    steps: int = 1
    q: float = 0.8
    T: float = 1.0
    bn_mode: nn.BnMode = field(default_factory=nn.TestStats)
    optimizer: str = "sgd"

    def __post_init__(self):
        object.__setattr__(self, "method", Method.parse(self.method))
        if self.eta < 0:
            raise ConfigError("eta must be nonnegative", key="tta.eta")
        if self.steps < 1:
            raise ConfigError("steps must be a positive integer", key="tta.steps")
        _check_shape_params(self.q, self.T)
        if self.optimizer != "sgd":
            # an Adam inner optimizer is reserved but not implemented
            raise ConfigError(f"optimizer {self.optimizer!r} is not supported; only 'sgd'", key="tta.optimizer")


def _check_shape_params(q, T):
    if not 0.0 < q <= 1.0:
        raise ConfigError(f"q must lie in (0, 1], got {q}", key="tta.q")
    if not T > 0:
        raise ConfigError(f"T must be positive, got {T}", key="tta.T")


def _entropy_and_grad(z):
    logp = log_softmax(z)
    p = np.exp(logp)
    h = -np.sum(p * logp, axis=1)
    grad = -p * (logp + h[:, None])
    return h, grad


def loss_and_grads(method, logits, teacher_logits, q=0.8, T=1.0):
    """Mean TTA loss, its gradient w.r.t. ``logits``, and w.r.t. ``teacher_logits`` (or None).

    Works for complex ``logits`` (complex-step differentiation); the teacher
    is always real.
    """
    method = Method.parse(method)
    _check_shape_params(q, T)
    z = logits
    n = z.shape[0]
    if method is Method.TEBN:
        return 0.0, np.zeros_like(z), None
    if method is Method.TENT:
        h, g = _entropy_and_grad(z)
        return h.mean(), g / n, None
    if method is Method.CONJUGATE_PL:
        # logsumexp(u) - softmax(u).u with u = z/T, which is the entropy of softmax(u)
        h, g = _entropy_and_grad(z / T)
        return h.mean(), g / (T * n), None

    logp = log_softmax(z)
    p = np.exp(logp)
    if method is Method.SOFT_PL:
        pt = softmax(teacher_logits)
        per_row = -np.sum(pt * logp, axis=1)
        d_teacher = -pt * (logp - np.sum(pt * logp, axis=1, keepdims=True))
        return per_row.mean(), (p - pt) / n, d_teacher / n

    labels = argmax_rows(teacher_logits)
    onehot = one_hot(labels, z.shape[1])
    logp_y = logp[np.arange(n), labels]
    if method is Method.HARD_PL:
        return (-logp_y).mean(), (p - onehot) / n, None
    # ROBUST_PL: generalized cross-entropy (1 - p_y^q) / q
    p_y_q = np.exp(q * logp_y)
    return ((1.0 - p_y_q) / q).mean(), p_y_q[:, None] * (p - onehot) / n, None


def tta_loss(method, logits, teacher_logits=None, q: float = 0.8, T: float = 1.0) -> float:
    method = Method.parse(method)
    if teacher_logits is None:
        teacher_logits = logits
    return float(np.real(loss_and_grads(method, np.asarray(logits, dtype=float), np.asarray(teacher_logits, dtype=float), q, T)[0]))


def _require_batch(batch):
    if np.shape(batch)[0] < 2:
        raise BatchTooSmallError(f"test batch needs at least 2 samples, got {np.shape(batch)[0]}")


def tta_update(net: nn.Network, batch, config: TtaConfig):
    """Adapt ``net`` on ``batch``; returns ``(adapted network, BN snapshot of the batch)``.

    The input network is left untouched.  TeBN performs no parameter update;
    every other method takes ``config.steps`` plain gradient steps on theta_A.
    Pseudo-label teachers are the pre-update network under the batch statistics.
    """
    _require_batch(batch)
    pre = nn.forward(net, batch, config.bn_mode)
    if config.method is Method.TEBN:
        return net.clone(), pre.snapshot
    teacher = pre.logits
    theta = net.theta_A()
    current, res = net, pre
    for step in range(config.steps):
        if step > 0:
            res = nn.forward(current, batch, config.bn_mode)
        _, d_logits, _ = loss_and_grads(config.method, res.logits, teacher, config.q, config.T)
        grad = nn.backward(current, res.trace, d_logits).theta_A()
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite TTA gradient", step=step)
        theta = theta - config.eta * grad
        current = net.with_theta_A(theta)
    return current, pre.snapshot


def predict(net: nn.Network, batch, bn_mode: nn.BnMode = nn.TestStats()) -> np.ndarray:
    """Class index per row; ties go to the lowest index."""
    return argmax_rows(nn.forward(net, batch, bn_mode).logits)


def adapt_and_predict(net: nn.Network, batch, config: TtaConfig):
    """Adapt on the batch then predict it; returns ``(adapted net, labels, snapshot)``."""
    adapted, snapshot = tta_update(net, batch, config)
    return adapted, predict(adapted, batch, config.bn_mode), snapshot


def loss_input_gradient(student: nn.Network, teacher: nn.Network, batch, config: TtaConfig):
    """Gradient of the TTA loss w.r.t. every batch entry.

    ``student`` may carry complex theta_A; the pseudo-label path through
    ``teacher`` (a real network) is included, so the result is the total
    derivative of the loss with the teacher re-evaluated on the batch.
    """
    t = nn.forward(teacher, batch, config.bn_mode)
    s = nn.forward(student, batch, config.bn_mode)
    _, d_logits, d_teacher = loss_and_grads(config.method, s.logits, t.logits, config.q, config.T)
    gx = nn.backward(student, s.trace, d_logits).input
    if d_teacher is not None:
        gx = gx + nn.backward(teacher, t.trace, d_teacher).input
    return gx


def tta_theta_gradient(net: nn.Network, batch, config: TtaConfig) -> np.ndarray:
    """Gradient of the TTA loss w.r.t. theta_A, teacher held fixed at the same network."""
    res = nn.forward(net, batch, config.bn_mode)
    teacher = np.real(res.logits)
    _, d_logits, _ = loss_and_grads(config.method, res.logits, teacher, config.q, config.T)
    return nn.backward(net, res.trace, d_logits).theta_A()
