"""Robust BN estimation: smoothing toward source statistics and pinning the last BN layers."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional

from . import nn
from .errors import ConfigError


@dataclass(frozen=True)
class DefenseSpec:
    tau: float = 0.0
    n_tr: int = 0

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}", key="defense.tau")
        if self.n_tr < 0:
            raise ConfigError(f"n_tr must be nonnegative, got {self.n_tr}", key="defense.n_tr")


def make_bn_mode(spec: DefenseSpec, net: Optional[nn.Network] = None) -> nn.Smoothed:
    if net is not None and spec.n_tr > net.n_bn:
        raise ConfigError(f"n_tr={spec.n_tr} exceeds the network's {net.n_bn} BN layers", key="defense.n_tr")
    return nn.Smoothed(spec.tau, spec.n_tr)


@dataclass(frozen=True)
class DefenseCell:
    tau: float
    n_tr: int
    asr: Optional[float]
    corruption_accuracy: float
    corruption_accuracy_degradation: float


def defense_sweep(net, shifted_test, tta, attack, taus, n_trs, seed: int = 0,
                  batch_size: int = 200, n_trials=None, jobs: int = 1) -> list:
    """Run the full trial protocol for every (tau, n_tr) cell.

    The attacker differentiates through the same smoothed statistics the
    defender uses.  Every cell reuses ``seed``, so cells differ only by the
    defense.
    """
    from .bench import run_trials

    cells = []
    for tau in taus:
        for n_tr in n_trs:
            spec = DefenseSpec(float(tau), int(n_tr))
            make_bn_mode(spec, net)
            summary = run_trials(net, shifted_test, tta, attack, spec, seed,
                                 batch_size=batch_size, n_trials=n_trials, jobs=jobs)
            cells.append(DefenseCell(spec.tau, spec.n_tr, summary.asr, summary.corruption_accuracy,
                                     summary.corruption_accuracy_degradation))
    return cells


def defense_csv(cells) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tau", "n_tr", "asr", "corruption_accuracy", "corruption_accuracy_degradation"])
    for c in cells:
        w.writerow([repr(c.tau), c.n_tr, "" if c.asr is None else repr(c.asr),
                    repr(c.corruption_accuracy), repr(c.corruption_accuracy_degradation)])
    return buf.getvalue()
