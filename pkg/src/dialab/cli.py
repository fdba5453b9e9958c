"""Command-line entry point: ``dialab <subcommand> [options]``.

Exit codes: 0 success, 1 configuration or parse error, 2 numeric failure,
3 gradient check failure.  Command-line flags override the config document.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from dataclasses import replace

from . import bench, config as config_mod, nn
from .bench import AttackPlan
from .defense import defense_csv, defense_sweep
from .diagnostics import bn_drift_report, drift_csv, drift_summary
from .errors import CheckpointParseError, ConfigError, DialabError, NumericError
from .gradcheck import run_gradcheck

log = logging.getLogger("dialab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", help="TOML experiment document")
    p.add_argument("--seed", type=int, help="master seed (overrides 'seed')")
    p.add_argument("--out", default="dialab-out", help="output directory; nothing is written elsewhere")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="max worker processes")
    p.add_argument("--checkpoint", help="source model checkpoint; trained from the config when omitted")
    p.add_argument("--trials", type=int, help="use only the first N test batches")
    p.add_argument("--method", help="TTA method (overrides tta.method)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dialab", description="Distribution invading attacks on test-time adaptation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-source", help="train the source model and write a checkpoint")
    _common(p)

    p = sub.add_parser("attack", help="run the trial protocol with an attack")
    _common(p)
    p.add_argument("--n-mal", type=int, help="malicious rows per batch (overrides attack.n_mal)")
    p.add_argument("--objective", choices=["targeted", "indiscriminate", "stealthy"])
    p.add_argument("--bilevel", action="store_true", help="differentiate through the TTA step")

    p = sub.add_parser("defend", help="sweep (tau, n_tr) defenses against an adaptive attacker")
    _common(p)
    p.add_argument("--taus", help="comma-separated smoothing factors")
    p.add_argument("--n-trs", help="comma-separated counts of pinned BN layers")

    p = sub.add_parser("sweep", help="vary the number of malicious rows")
    _common(p)
    p.add_argument("--n-mal", help="comma-separated malicious counts")

    p = sub.add_parser("gradcheck", help="finite-difference oracle suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-5)

    p = sub.add_parser("drift", help="BN drift between a clean and an attacked batch")
    _common(p)
    p.add_argument("--trial", type=int, default=0, help="test batch index")

    p = sub.add_parser("report", help="summarize a trials JSONL file")
    p.add_argument("input", help="trials.jsonl written by 'attack'")
    p.add_argument("--out", help="also write report.txt into this directory")
    return parser


def _load_config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "trials", None) is not None:
        if args.trials < 1:
            raise ConfigError("--trials must be positive", key="--trials")
        cfg = replace(cfg, trials=args.trials)
    if getattr(args, "method", None):
        cfg = replace(cfg, tta=replace(cfg.tta, method=args.method))
    if getattr(args, "jobs", 1) < 1:
        raise ConfigError("--jobs must be at least 1", key="--jobs")
    return cfg


def _source_model(args, cfg):
    data = bench.generate_benchmark(cfg.benchmark)
    if args.checkpoint:
        try:
            with open(args.checkpoint, encoding="utf-8") as fh:
                net = nn.load_checkpoint(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read checkpoint: {exc}", key="--checkpoint") from None
        if net.input_dim != cfg.benchmark.dim:
            raise ConfigError("checkpoint input width does not match benchmark.dim", key="--checkpoint")
    else:
        m = cfg.model
        net = bench.train_source(data[0], m.hidden, m.epochs, m.lr, m.seed, m.batch_size, m.momentum)
    return net, data


def _plan(args, cfg) -> AttackPlan:
    plan = cfg.attack or AttackPlan()
    if getattr(args, "objective", None):
        plan = replace(plan, objective=args.objective)
    if isinstance(getattr(args, "n_mal", None), int):
        plan = replace(plan, n_mal=args.n_mal)
    if getattr(args, "bilevel", False):
        plan = replace(plan, bilevel=True)
    return plan


def _int_list(text, key):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key} expects comma-separated integers", key=key) from None


def _float_list(text, key):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key} expects comma-separated numbers", key=key) from None


def _write(out_dir, name, text):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _run(args, cfg, net, shifted, plan):
    return bench.run_trials(net, shifted, cfg.tta, plan, cfg.defense, cfg.seed,
                            batch_size=cfg.benchmark.batch_size, n_trials=cfg.trials, jobs=args.jobs)


def cmd_train_source(args):
    cfg = _load_config(args)
    net, (train, clean, shifted) = _source_model(args, cfg)
    path = _write(args.out, "model.ckpt", nn.save_checkpoint(net))
    bs = cfg.benchmark.batch_size
    print(f"checkpoint: {path}")
    print(f"source accuracy clean={bench.accuracy(net, clean, batch_size=bs):.4f} "
          f"shifted={bench.accuracy(net, shifted, batch_size=bs):.4f}")
    return EXIT_OK


def cmd_attack(args):
    cfg = _load_config(args)
    net, (_, _, shifted) = _source_model(args, cfg)
    summary = _run(args, cfg, net, shifted, _plan(args, cfg))
    os.makedirs(args.out, exist_ok=True)
    bench.write_jsonl(summary.records, os.path.join(args.out, "trials.jsonl"))
    row = bench.summary_row(summary)
    _write(args.out, "summary.csv", _csv(list(row), [list(row.values())]))
    print(_format_summary(summary))
    return EXIT_OK


def cmd_defend(args):
    cfg = _load_config(args)
    net, (_, _, shifted) = _source_model(args, cfg)
    taus = _float_list(args.taus, "--taus") if args.taus else cfg.sweep.taus
    n_trs = _int_list(args.n_trs, "--n-trs") if args.n_trs else cfg.sweep.n_trs
    cells = defense_sweep(net, shifted, cfg.tta, _plan(args, cfg), taus, n_trs, cfg.seed,
                          cfg.benchmark.batch_size, cfg.trials, args.jobs)
    text = defense_csv(cells)
    _write(args.out, "defense.csv", text)
    print(text, end="")
    return EXIT_OK


def cmd_sweep(args):
    cfg = _load_config(args)
    net, (_, _, shifted) = _source_model(args, cfg)
    counts = _int_list(args.n_mal, "--n-mal") if args.n_mal else cfg.sweep.n_mal
    base = _plan(args, cfg)
    rows, lines = [], []
    for n_mal in counts:
        summary = _run(args, cfg, net, shifted, replace(base, n_mal=n_mal))
        row = bench.summary_row(summary)
        rows.append([n_mal, *row.values()])
        lines += [r.to_json() for r in summary.records]
    text = _csv(["n_mal", *bench.summary_row(summary)], rows)
    _write(args.out, "sweep.csv", text)
    _write(args.out, "sweep_trials.jsonl", "".join(line + "\n" for line in lines))
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(args):
    results = run_gradcheck(args.seed, args.instances, args.tol)
    worst = {}
    for r in results:
        if r.name not in worst or r.error > worst[r.name].error:
            worst[r.name] = r
    failed = [r for r in results if not r.passed]
    for name, r in worst.items():
        print(f"{'PASS' if r.passed else 'FAIL'} {name}: worst relative error {r.error:.3e} (tol {r.tol:g})")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_GRADCHECK if failed else EXIT_OK


def cmd_drift(args):
    cfg = _load_config(args)
    net, (_, _, shifted) = _source_model(args, cfg)
    clean, attacked, _ = bench.trial_snapshots(net, shifted, cfg.tta, _plan(args, cfg), cfg.defense,
                                               cfg.seed, cfg.benchmark.batch_size, args.trial)
    report = bn_drift_report(clean, attacked)
    _write(args.out, "drift.csv", drift_csv(report))
    summary = drift_summary(report)
    _write(args.out, "drift.txt", summary)
    print(summary, end="")
    return EXIT_OK


def _format_summary(summary) -> str:
    asr = "n/a" if summary.asr is None else f"{summary.asr:.4f}"
    return (f"trials                          {summary.n_trials}\n"
            f"attack success rate             {asr}\n"
            f"corruption error rate           {summary.corruption_error_rate:.4f}\n"
            f"corruption accuracy degradation {summary.corruption_accuracy_degradation:.4f}")


def cmd_report(args):
    try:
        records = bench.read_jsonl(args.input)
    except OSError as exc:
        raise ConfigError(f"cannot read {args.input}: {exc}", key="input") from None
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"malformed trial record in {args.input}: {exc}", key="input") from None
    summary = bench.summarize(records)
    methods = sorted({r.method for r in records})
    text = f"method(s)                       {','.join(methods)}\n" + _format_summary(summary) + "\n"
    if args.out:
        _write(args.out, "report.txt", text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "train-source": cmd_train_source,
    "attack": cmd_attack,
    "defend": cmd_defend,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "drift": cmd_drift,
    "report": cmd_report,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointParseError) as exc:
        key = getattr(exc, "key", None)
        print(f"dialab: error: {exc}" + (f" [key: {key}]" if key else ""), file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"dialab: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DialabError as exc:
        print(f"dialab: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
