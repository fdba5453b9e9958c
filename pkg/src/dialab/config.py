"""Experiment configuration documents (TOML).

Unknown keys are rejected and every error names the dotted key at fault.
Example::

    seed = 0
    trials = 50

    [benchmark]
    n_classes = 10
    dim = 32
    cluster_std = 0.25
    [benchmark.shift]
    bias = 0.2
    noise_std = 0.05

    [model]
    hidden = [64, 64]

    [tta]
    method = "tent"

    [attack]
    objective = "targeted"
    n_mal = 10

    [defense]
    tau = 0.6
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import nn
from .bench import AttackPlan, BenchmarkSpec, ShiftSpec, TrainSpec
from .defense import DefenseSpec
from .errors import ConfigError
from .tta import TtaConfig


@dataclass(frozen=True)
class SweepSpec:
    n_mal: tuple = (1, 2, 4, 8, 16, 32, 64, 128)
    taus: tuple = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    n_trs: tuple = (0, 1, 2)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    trials: Optional[int] = None
    benchmark: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    model: TrainSpec = field(default_factory=TrainSpec)
    tta: TtaConfig = field(default_factory=TtaConfig)
    attack: Optional[AttackPlan] = None
    defense: Optional[DefenseSpec] = None
    sweep: SweepSpec = field(default_factory=SweepSpec)


_TOP = {"seed", "trials", "benchmark", "model", "tta", "attack", "defense", "sweep"}


def _section(raw, name, cls, converters=None):
    if not isinstance(raw.get(name, {}), dict):
        raise ConfigError(f"[{name}] must be a table", key=name)
    data = dict(raw.get(name) or {})
    allowed = {f.name for f in fields(cls)}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown key '{name}.{key}'", key=f"{name}.{key}")
    for key, conv in (converters or {}).items():
        if key in data:
            try:
                data[key] = conv(data[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for '{name}.{key}': {exc}", key=f"{name}.{key}") from None
    try:
        return cls(**data)
    except ConfigError as exc:
        if exc.key and not exc.key.startswith(name + "."):
            exc.key = f"{name}.{exc.key.split('.')[-1]}"
            exc.args = (f"{exc.args[0]} (key '{exc.key}')",)
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value in [{name}]: {exc}", key=name) from None


def _float(v):
    if isinstance(v, str) and v.lower() in ("inf", "unbounded"):
        return math.inf
    if isinstance(v, bool):
        raise ValueError("expected a number")
    return float(v)


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError(f"expected an integer, got {v!r}")
    return v


def _floats(v):
    return tuple(_float(x) for x in (v if isinstance(v, list) else [v]))


def _ints(v):
    return tuple(_int(x) for x in (v if isinstance(v, list) else [v]))


def _bn_mode(v):
    if isinstance(v, str):
        key = v.lower().replace("_", "").replace("-", "")
        if key == "teststats":
            return nn.TestStats()
        if key == "trainstats":
            return nn.TrainStats()
    raise ValueError(f"bn_mode must be 'test_stats' or 'train_stats' (use [defense] for smoothing), got {v!r}")


def from_dict(raw: dict) -> ExperimentConfig:
    for key in raw:
        if key not in _TOP:
            raise ConfigError(f"unknown key '{key}'", key=key)
    bench_raw = dict(raw.get("benchmark") or {})
    shift_raw = bench_raw.pop("shift", {})
    shift = _section({"benchmark.shift": shift_raw}, "benchmark.shift", ShiftSpec,
                     {"bias": _floats, "scale": _floats, "noise_std": _float})
    bench_raw["shift"] = shift
    benchmark = _section({"benchmark": bench_raw}, "benchmark", BenchmarkSpec, {
        "n_classes": _int, "dim": _int, "train_size": _int, "test_size": _int, "batch_size": _int,
        "cluster_std": _float, "seed": _int})
    model = _section(raw, "model", TrainSpec, {
        "hidden": _ints, "epochs": _int, "lr": _float, "momentum": _float, "batch_size": _int, "seed": _int})
    tta = _section(raw, "tta", TtaConfig, {
        "eta": _float, "steps": _int, "q": _float, "T": _float, "bn_mode": _bn_mode})
    attack = None
    if "attack" in raw:
        attack = _section(raw, "attack", AttackPlan, {
            "n_mal": _int, "epsilon": _float, "alpha": _float, "n_steps": _int, "omega": _float,
            "restarts": _int, "bilevel": _bool})
    defense = None
    if "defense" in raw:
        defense = _section(raw, "defense", DefenseSpec, {"tau": _float, "n_tr": _int})
    sweep = _section(raw, "sweep", SweepSpec, {"n_mal": _ints, "taus": _floats, "n_trs": _ints})
    seed = raw.get("seed", 0)
    trials = raw.get("trials")
    try:
        seed = _int(seed)
        trials = None if trials is None else _int(trials)
    except ValueError as exc:
        raise ConfigError(str(exc), key="seed" if not isinstance(seed, int) else "trials") from None
    if trials is not None and trials < 1:
        raise ConfigError("trials must be positive", key="trials")
    return ExperimentConfig(seed, trials, benchmark, model, tta, attack, defense, sweep)


def _bool(v):
    if not isinstance(v, bool):
        raise ValueError(f"expected true/false, got {v!r}")
    return v


def loads(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None
    return from_dict(raw)


def load(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            text = fh.read().decode("utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", key="--config") from None
    return loads(text)
