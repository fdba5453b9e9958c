"""Synthetic distribution-shift benchmark, source training and the trial protocol.

Each test batch is one attack trial.  Methods that update theta_A carry the
adapted parameters into the next trial; TeBN trials are independent and may
run in parallel.  Every trial draws its randomness from
``Rng.derive(seed, trial_index)``, so serial and parallel runs agree exactly.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import nn
from .attack import AttackSpec, Indiscriminate, StealthyTargeted, Targeted, UNBOUNDED, dia_attack
from .defense import DefenseSpec, make_bn_mode
from .diagnostics import bn_drift_report, max_mean_drift
from .errors import ConfigError, DomainError, TrainingError
from .numeric import Rng, cross_entropy, one_hot, softmax
from .tta import Method, TtaConfig, adapt_and_predict, predict


@dataclass(frozen=True)
class ShiftSpec:
    bias: tuple = (0.2,)
    scale: tuple = (1.0,)
    noise_std: float = 0.05

    def vectors(self, d):
        return _broadcast(self.bias, d, "benchmark.shift.bias"), _broadcast(self.scale, d, "benchmark.shift.scale")


def _broadcast(values, d, key):
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.size == 1:
        return np.full(d, float(arr[0]))
    if arr.size != d:
        raise ConfigError(f"expected 1 or {d} entries, got {arr.size}", key=key)
    return arr


@dataclass(frozen=True)
class BenchmarkSpec:
    n_classes: int = 10
    dim: int = 32
    train_size: int = 5000
    test_size: int = 10000
    batch_size: int = 200
    cluster_std: float = 0.25
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes", key="benchmark.n_classes")
        if self.dim < 1:
            raise ConfigError("dim must be positive", key="benchmark.dim")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2", key="benchmark.batch_size")
        if self.test_size % self.batch_size:
            raise ConfigError("test_size must be a multiple of batch_size", key="benchmark.test_size")
        if self.train_size < 1:
            raise ConfigError("train_size must be positive", key="benchmark.train_size")


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    def batches(self, size):
        for start in range(0, len(self) - size + 1, size):
            yield self.x[start:start + size], self.y[start:start + size]


def generate_benchmark(spec: BenchmarkSpec):
    """Gaussian class clusters in the unit cube; returns ``(train, clean_test, shifted_test)``.

    The shifted split reuses the clean test points, applies ``scale * x + bias``
    plus Gaussian noise and clips back to [0, 1].
    """
    rng = Rng.derive(spec.seed, 0)
    centers = rng.uniform(0.25, 0.75, size=(spec.n_classes, spec.dim))

    def draw(n, stream):
        r = Rng.derive(spec.seed, stream)
        y = r.integers(0, spec.n_classes, size=n)
        x = centers[y] + r.normal(0.0, spec.cluster_std, size=(n, spec.dim))
        return Dataset(np.clip(x, 0.0, 1.0), y)

    train = draw(spec.train_size, 1)
    clean = draw(spec.test_size, 2)
    bias, scale = spec.shift.vectors(spec.dim)
    noise = Rng.derive(spec.seed, 3).normal(0.0, 1.0, size=clean.x.shape) * spec.shift.noise_std
    shifted = Dataset(np.clip(clean.x * scale + bias + noise, 0.0, 1.0), clean.y.copy())
    return train, clean, shifted


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainSpec:
    hidden: tuple = (64, 64)
    epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 100
    seed: int = 0


def train_source(train_set: Dataset, architecture=(64, 64), epochs: int = 10, lr: float = 0.05,
                 seed: int = 0, batch_size: int = 100, momentum: float = 0.9) -> nn.Network:
    """Minibatch SGD on cross-entropy; BN source statistics come from one full pass at the end."""
    if len(train_set) == 0:
        raise DomainError("empty training set")
    k = int(train_set.y.max()) + 1
    rng = Rng.derive(seed, 100)
    net = nn.mlp([train_set.x.shape[1], *architecture, k], rng=rng)
    params = _trainable(net)
    velocity = [np.zeros_like(p) for p in params]
    n = len(train_set)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n - 1, batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue
            res = nn.forward(net, train_set.x[idx], nn.TestStats())
            loss = cross_entropy(res.logits, train_set.y[idx]).mean()
            if not math.isfinite(loss):
                raise TrainingError(f"training diverged in epoch {epoch}")
            d_logits = (softmax(res.logits) - one_hot(train_set.y[idx], k)) / len(idx)
            grads = _flatten_grads(net, nn.backward(net, res.trace, d_logits))
            for v, g in zip(velocity, grads):
                v *= momentum
                v -= lr * g
            params = [p + v for p, v in zip(params, velocity)]
            net = _with_params(net, params)
    # source statistics over the full training set
    snapshot = nn.forward(net, train_set.x, nn.TestStats()).snapshot
    layers, bn_i = [], 0
    for layer in net.layers:
        if isinstance(layer, nn.BatchNorm):
            s = snapshot[bn_i]
            layers.append(nn.BatchNorm(layer.gamma, layer.beta, s.mu.copy(), s.var.copy(), layer.eps))
            bn_i += 1
        else:
            layers.append(layer)
    return nn.Network(layers)


def _trainable(net):
    out = []
    for layer in net.layers:
        if isinstance(layer, nn.Linear):
            out += [layer.weight, layer.bias]
        elif isinstance(layer, nn.BatchNorm):
            out += [layer.gamma, layer.beta]
    return out


def _flatten_grads(net, g: nn.Gradients):
    """Gradients in the same order as ``_trainable``."""
    out, lin, bn = [], 0, 0
    for layer in net.layers:
        if isinstance(layer, nn.Linear):
            out += [g.weight[lin], g.bias[lin]]
            lin += 1
        elif isinstance(layer, nn.BatchNorm):
            out += [g.gamma[bn], g.beta[bn]]
            bn += 1
    return out


def _with_params(net, params):
    layers, pos = [], 0
    for layer in net.layers:
        if isinstance(layer, nn.Linear):
            layers.append(nn.Linear(params[pos], params[pos + 1]))
            pos += 2
        elif isinstance(layer, nn.BatchNorm):
            layers.append(nn.BatchNorm(params[pos], params[pos + 1], layer.mu_s, layer.sigma2_s, layer.eps))
            pos += 2
        else:
            layers.append(layer)
    return nn.Network(layers)


def accuracy(net: nn.Network, data: Dataset, bn_mode: nn.BnMode = nn.TrainStats(), batch_size: int = 200) -> float:
    correct = 0
    for x, y in data.batches(batch_size):
        correct += int(np.sum(predict(net, x, bn_mode) == y))
    return correct / (len(data) // batch_size * batch_size)


# ---------------------------------------------------------------- trials

@dataclass(frozen=True)
class AttackPlan:
    """Per-run attack settings; targets and malicious rows are drawn per trial."""

    objective: str = "targeted"
    n_mal: int = 10
    epsilon: float = UNBOUNDED
    alpha: float = 1 / 255
    n_steps: int = 500
    bilevel: bool = False
    omega: float = 0.1
    restarts: int = 0

    def __post_init__(self):
        if self.objective not in ("targeted", "indiscriminate", "stealthy"):
            raise ConfigError(f"unknown objective {self.objective!r}", key="attack.objective")
        if self.n_mal < 0:
            raise ConfigError("n_mal must be nonnegative", key="attack.n_mal")


@dataclass
class TrialRecord:
    trial_index: int
    method: str
    success: Optional[bool]
    benign_error_rate: float
    degradation: float
    bn_drift_max: float
    seed: int
    tgt_index: Optional[int] = None
    tgt_label: Optional[int] = None
    n_mal: int = 0
    attack_loss: Optional[float] = None
    n_benign: int = 0
    benign_correct_clean: int = 0
    benign_correct_attacked: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TrialRecord":
        return cls(**json.loads(line))


@dataclass
class RunSummary:
    asr: Optional[float]
    corruption_error_rate: float
    corruption_accuracy_degradation: float
    records: list

    @property
    def corruption_accuracy(self) -> float:
        return 1.0 - self.corruption_error_rate

    @property
    def n_trials(self) -> int:
        return len(self.records)


def summarize(records) -> RunSummary:
    records = list(records)
    if not records:
        raise DomainError("no trial records to summarize")
    scored = [r.success for r in records if r.success is not None]
    asr = sum(scored) / len(scored) if scored else None
    n = len(records)
    err = sum(r.benign_error_rate for r in records) / n
    deg = sum(r.degradation for r in records) / n
    return RunSummary(asr, err, deg, records)


def _trial_spec(plan: AttackPlan, y, n_classes, rng: Rng):
    n = len(y)
    if plan.objective == "indiscriminate":
        tgt = label = None
        pool = np.arange(n)
    else:
        tgt = int(rng.integers(0, n))
        wrong = [c for c in range(n_classes) if c != int(y[tgt])]
        label = int(wrong[int(rng.integers(0, len(wrong)))])
        pool = np.array([i for i in range(n) if i != tgt])
    if plan.n_mal > len(pool):
        raise ConfigError(f"n_mal={plan.n_mal} exceeds available rows {len(pool)}", key="attack.n_mal")
    mal = tuple(int(i) for i in rng.choice(pool, size=plan.n_mal, replace=False)) if plan.n_mal else ()
    if plan.objective == "targeted":
        objective = Targeted(tgt, label)
    elif plan.objective == "stealthy":
        objective = StealthyTargeted(tgt, label, plan.omega)
    else:
        objective = Indiscriminate()
    return objective, mal, tgt, label


def _run_one(state: nn.Network, x, y, k, cfg: TtaConfig, plan: Optional[AttackPlan], seed: int, n_classes: int):
    rng = Rng.derive(seed, k)
    clean_net, clean_pred, clean_snap = adapt_and_predict(state, x, cfg)
    record = TrialRecord(k, cfg.method.value, None, 0.0, 0.0, 0.0, seed)
    mal, tgt = (), None
    att_net, att_pred, att_snap = clean_net, clean_pred, clean_snap
    if plan is not None:
        objective, mal, tgt, label = _trial_spec(plan, y, n_classes, rng)
        record.tgt_index, record.tgt_label, record.n_mal = tgt, label, len(mal)
        if mal:
            spec = AttackSpec(objective, mal, plan.epsilon, plan.alpha, plan.n_steps, plan.bilevel,
                              restarts=plan.restarts)
            result = dia_attack(state, x, y, cfg, spec, rng)
            record.attack_loss = result.final_loss
            att_net, att_pred, att_snap = adapt_and_predict(state, result.apply(x), cfg)
        if tgt is not None:
            record.success = bool(att_pred[tgt] == label)
    rows = np.array([i for i in range(len(y)) if i != tgt and i not in set(mal)], dtype=int)
    record.n_benign = len(rows)
    record.benign_correct_clean = int(np.sum(clean_pred[rows] == y[rows]))
    record.benign_correct_attacked = int(np.sum(att_pred[rows] == y[rows]))
    record.benign_error_rate = 1.0 - record.benign_correct_attacked / len(rows)
    record.degradation = (record.benign_correct_clean - record.benign_correct_attacked) / len(rows)
    record.bn_drift_max = max_mean_drift(bn_drift_report(clean_snap, att_snap))
    return att_net, record, (clean_snap, att_snap)


def _run_independent(args):
    net, x, y, k, cfg, plan, seed, n_classes = args
    return _run_one(net, x, y, k, cfg, plan, seed, n_classes)[1]


def trial_snapshots(net: nn.Network, shifted_test: Dataset, tta: TtaConfig, attack: Optional[AttackPlan],
                    defense: Optional[DefenseSpec] = None, seed: int = 0, batch_size: int = 200,
                    trial_index: int = 0):
    """BN snapshots of one trial's clean and attacked batch, plus its record (first-trial state)."""
    cfg = tta if defense is None else replace(tta, bn_mode=make_bn_mode(defense, net))
    batches = list(shifted_test.batches(batch_size))
    if not 0 <= trial_index < len(batches):
        raise ConfigError(f"trial index {trial_index} out of range", key="trial")
    x, y = batches[trial_index]
    _, record, (clean, attacked) = _run_one(net, x, y, trial_index, cfg, attack, seed, net.output_dim)
    return clean, attacked, record


def run_trials(net: nn.Network, shifted_test: Dataset, tta: TtaConfig, attack: Optional[AttackPlan] = None,
               defense: Optional[DefenseSpec] = None, seed: int = 0, batch_size: int = 200,
               n_trials: Optional[int] = None, jobs: int = 1, n_classes: Optional[int] = None) -> RunSummary:
    """Run every test batch (or the first ``n_trials``) through attack, adaptation and scoring."""
    cfg = tta if defense is None else replace(tta, bn_mode=make_bn_mode(defense, net))
    n_classes = n_classes or net.output_dim
    batches = list(shifted_test.batches(batch_size))
    if n_trials is not None:
        batches = batches[:n_trials]
    if not batches:
        raise ConfigError("test split yields no full batch", key="bench.batch_size")

    if cfg.method is Method.TEBN:
        tasks = [(net, x, y, k, cfg, attack, seed, n_classes) for k, (x, y) in enumerate(batches)]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                records = list(pool.map(_run_independent, tasks))
        else:
            records = [_run_independent(t) for t in tasks]
    else:
        state, records = net, []
        for k, (x, y) in enumerate(batches):
            state, rec, _ = _run_one(state, x, y, k, cfg, attack, seed, n_classes)
            records.append(rec)
    records.sort(key=lambda r: r.trial_index)
    return summarize(records)


def write_jsonl(records, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_jsonl(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [TrialRecord.from_json(line) for line in fh if line.strip()]


def summary_row(summary: RunSummary) -> dict:
    return {
        "n_trials": summary.n_trials,
        "asr": "" if summary.asr is None else repr(summary.asr),
        "corruption_error_rate": repr(summary.corruption_error_rate),
        "corruption_accuracy": repr(summary.corruption_accuracy),
        "corruption_accuracy_degradation": repr(summary.corruption_accuracy_degradation),
    }
