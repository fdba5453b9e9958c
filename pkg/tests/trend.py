"""Seeded end-to-end benchmark runs shared by the acceptance suite and ``calibrate.py``."""
import time

from dialab import bench
from dialab.defense import DefenseSpec
from dialab.tta import TtaConfig

SEED = 0
TRIALS = 50
BENCH = bench.BenchmarkSpec(n_classes=10, dim=32, train_size=5000, test_size=10000, batch_size=200, seed=SEED)
TTA = TtaConfig(method="tent")
N_MAL = (2, 10, 40)
DEFENSE_N_MAL = 40
TAU = 0.6


def source_model():
    train, clean, shifted = bench.generate_benchmark(BENCH)
    net = bench.train_source(train, (64, 64), epochs=10, lr=0.05, seed=SEED)
    return net, shifted


def _run(net, shifted, plan=None, defense=None, tta=TTA):
    s = bench.run_trials(net, shifted, tta, plan, defense, SEED, BENCH.batch_size, TRIALS)
    return {"asr": s.asr, "error": s.corruption_error_rate, "degradation": s.corruption_accuracy_degradation}


def trend_metrics(net, shifted) -> dict:
    t0 = time.perf_counter()
    m = {
        "source_accuracy": bench.accuracy(net, shifted, batch_size=BENCH.batch_size),
        "no_attack": _run(net, shifted),
        "targeted_n0": _run(net, shifted, bench.AttackPlan("targeted", n_mal=0)),
    }
    for n in N_MAL:
        m[f"targeted_n{n}"] = _run(net, shifted, bench.AttackPlan("targeted", n_mal=n))
    m["indiscriminate_n40"] = _run(net, shifted, bench.AttackPlan("indiscriminate", n_mal=40))
    # omega = 0 reduces the stealthy objective to the targeted one, so that run is reused
    m["stealthy_omega0"] = m[f"targeted_n{DEFENSE_N_MAL}"]
    m["stealthy_omega0.1"] = _run(net, shifted, bench.AttackPlan("stealthy", n_mal=40, omega=0.1))
    m["defense_tau0_ntr0"] = m[f"targeted_n{DEFENSE_N_MAL}"]
    for n_tr in (0, 1):
        m[f"defense_tau{TAU}_ntr{n_tr}"] = _run(net, shifted, bench.AttackPlan("targeted", n_mal=DEFENSE_N_MAL),
                                                DefenseSpec(TAU, n_tr))
    m["seconds"] = time.perf_counter() - t0
    return m
