"""Desk-scale laboratory for distribution invading attacks on test-time adaptation."""
from . import attack, bench, defense, diagnostics, nn, numeric, tta
from .attack import AttackSpec, Indiscriminate, StealthyTargeted, Targeted, dia_attack
from .bench import AttackPlan, BenchmarkSpec, generate_benchmark, run_trials, train_source
from .defense import DefenseSpec, make_bn_mode
from .nn import Network, Smoothed, TestStats, TrainStats
from .tta import Method, TtaConfig, tta_update

__version__ = "0.1.0"
