"""Command-line entry point: ``collatz-lab <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from collatz_lab import analysis
from collatz_lab import interventions as iv
from collatz_lab.config import ConfigError, ExperimentConfig, apply_overrides, desk_profile, paper_profile
from collatz_lab.numeral import SWEEP_BASES
from collatz_lab.train import CheckpointError, ConfigMismatch, Evaluator, TrainConfig, load_checkpoint, make_split

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_VERIFY = 4
EXIT_EXISTS = 5

KINDS_BY_COMMAND = {
    "train": ("baseline", "multi_seed"),
    "sweep": ("base_sweep", "depth_sweep", "distribution_ablation", "carry_exposure", "multi_seed"),
    "intervene": ("transplant", "rewind", "transfer"),
    "probe": ("probe_scan",),
    "erase": ("erasure_scan",),
}

# top-level ExperimentConfig fields exposed as flags
_LIST_FLAGS = {"bases": int, "dec_depths": int, "samplings": str, "seeds": int, "conditions": str}
_SCALAR_FLAGS = {"name": str, "threshold": float, "rewind_step": int, "source_steps": int, "output_dir": str}


def _add_experiment_args(p: argparse.ArgumentParser, command: str) -> None:
    kinds = KINDS_BY_COMMAND[command]
    p.add_argument("--config", help="YAML or JSON experiment config")
    p.add_argument("--profile", choices=("desk", "paper"), default="desk", help="defaults when no --config is given")
    p.add_argument("--kind", choices=kinds, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field by dotted path, e.g. model.d_model=128 or train.steps=500")
    for k, typ in _LIST_FLAGS.items():
        p.add_argument(f"--{k.replace('_', '-')}", type=typ, nargs="+", default=None)
    for k, typ in _SCALAR_FLAGS.items():
        p.add_argument(f"--{k.replace('_', '-')}", type=typ, default=None)
    p.add_argument("--steps", type=int, help="shortcut for train.steps")
    p.add_argument("--base", type=int, help="shortcut for model.base")
    p.add_argument("--out", help="exact result directory (overrides output_dir/name and $COLLATZ_OUT)")
    p.add_argument("--force", action="store_true", help="overwrite an existing result directory")
    p.add_argument("--workers", type=int, default=None, help="parallel units (default $COLLATZ_PARALLEL or 1)")


def build_config(args, command: str) -> ExperimentConfig:
    kinds = KINDS_BY_COMMAND[command]
    if args.config:
        if not Path(args.config).is_file():
            raise ConfigError(f"config file {args.config} does not exist")
        cfg = ExperimentConfig.load(args.config)
        if args.kind and args.kind != cfg.kind:
            raise ConfigError(f"--kind {args.kind} conflicts with config kind {cfg.kind}")
    else:
        cfg = (desk_profile if args.profile == "desk" else paper_profile)(args.kind or kinds[0])
    if cfg.kind not in kinds:
        raise ConfigError(f"'{command}' runs {', '.join(kinds)}; config kind is {cfg.kind}")
    sets = list(args.set)
    if args.steps is not None:
        sets.append(f"train.steps={args.steps}")
    if args.base is not None:
        sets.append(f"model.base={args.base}")
    for k in list(_LIST_FLAGS) + list(_SCALAR_FLAGS):
        v = getattr(args, k)
        if v is not None:
            sets.append(f"{k}={json.dumps(v)}")
    return apply_overrides(cfg, sets) if sets else cfg


def _run_experiment(args, command: str) -> int:
    from collatz_lab import runner

    cfg = build_config(args, command)
    root = runner.run(cfg, out=args.out, force=args.force, workers=args.workers)
    print(f"results: {root}")
    print((root / "summary.csv").read_text(), end="")
    return EXIT_OK


def _train_config_of(ck) -> TrainConfig:
    prov = ck.provenance.get("train_config")
    if prov is None:
        raise ConfigMismatch("checkpoint carries no train configuration; cannot rebuild its eval set")
    return TrainConfig.from_dict(prov)


def _probe_checkpoint(args) -> int:
    from collatz_lab.model import Transformer

    ck = load_checkpoint(args.checkpoint)
    tcfg = _train_config_of(ck)
    ev = Evaluator(tcfg, make_split(tcfg), ck.model_cfg.base)
    model = Transformer(ck.model_cfg, ck.params)
    layers = args.layers if args.layers is not None else list(range(ck.model_cfg.n_enc_layers))
    print("layer,target_k,accuracy,majority_rate,conditional")
    for layer in layers:
        z = ev.pooled(model, layer)
        for k in args.levels:
            y = analysis.residue_labels(ev.operands, k)
            res = analysis.fit_probe(z, y, l2=args.l2, target=f"a{k}")
            cond = analysis.conditional_probe(z, ev.operands, k, l2=args.l2) if k > 1 else res.accuracy
            print(f"{layer},{k},{res.accuracy:.6f},{res.majority_rate:.6f},{cond:.6f}")
    return EXIT_OK


def _erase_checkpoint(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    tcfg = _train_config_of(ck)
    if args.random_direction is not None:
        u = np.random.default_rng(args.random_direction).standard_normal(ck.model_cfg.d_model)
        u /= np.linalg.norm(u)
        label = f"random(seed={args.random_direction})"
    else:
        u, res = iv.parity_direction(ck, tcfg)
        label = f"parity probe (held-out acc {res.accuracy:.4f})"
    r = iv.erasure_eval(ck, u, tcfg)
    print(f"direction: {label}")
    print("baseline,erased,delta")
    print(f"{r.baseline:.6f},{r.erased:.6f},{r.delta:.6f}")
    return EXIT_OK


def _entropy(args) -> int:
    print("base,even,odd")
    for b in args.bases:
        e = analysis.local_predictability(b, "even", args.lo, args.hi, args.window)
        o = analysis.local_predictability(b, "odd", args.lo, args.hi, args.window)
        print(f"{b},{e:.6f},{o:.6f}")
    return EXIT_OK


def _report(args) -> int:
    from collatz_lab import runner

    for name, path in runner.report(args.dir).items():
        print(f"{name}: {path}")
    return EXIT_OK


def _verify(args) -> int:
    from collatz_lab import runner

    rep = runner.verify(args.dir, reeval=not args.no_reeval)
    for c in rep.checks:
        print(f"{'PASS' if c.ok else 'FAIL'}  {c.name}" + (f"  ({c.detail})" if c.detail else ""))
    print(f"{len(rep.checks) - len(rep.failures())}/{len(rep.checks)} checks passed")
    return EXIT_OK if rep.ok else EXIT_VERIFY


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="collatz-lab", description="Collatz grokking experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    for command, help_ in (("train", "baseline or multi-seed training"), ("sweep", "base/depth/distribution sweeps"),
                           ("intervene", "transplant, rewind and transfer conditions")):
        p = sub.add_parser(command, help=help_)
        _add_experiment_args(p, command)
        p.set_defaults(func=lambda a, c=command: _run_experiment(a, c))

    p = sub.add_parser("probe", help="probe scan run, or probe a saved checkpoint")
    _add_experiment_args(p, "probe")
    p.add_argument("--checkpoint", help="probe this checkpoint instead of running a scan")
    p.add_argument("--levels", type=int, nargs="+", default=[1, 2, 3, 4])
    p.add_argument("--layers", type=int, nargs="+", default=None)
    p.add_argument("--l2", type=float, default=1.0)
    p.set_defaults(func=lambda a: _probe_checkpoint(a) if a.checkpoint else _run_experiment(a, "probe"))

    p = sub.add_parser("erase", help="erasure scan run, or erase the parity direction on a checkpoint")
    _add_experiment_args(p, "erase")
    p.add_argument("--checkpoint")
    p.add_argument("--random-direction", type=int, default=None, metavar="SEED",
                   help="erase a random unit direction instead (control)")
    p.set_defaults(func=lambda a: _erase_checkpoint(a) if a.checkpoint else _run_experiment(a, "erase"))

    p = sub.add_parser("entropy", help="local predictability per base and branch")
    p.add_argument("--bases", type=int, nargs="+", default=list(SWEEP_BASES))
    p.add_argument("--lo", type=int, default=1)
    p.add_argument("--hi", type=int, default=10_000)
    p.add_argument("--window", type=int, default=2)
    p.set_defaults(func=_entropy)

    p = sub.add_parser("report", help="write plot-ready tables for a result directory")
    p.add_argument("dir")
    p.set_defaults(func=_report)

    p = sub.add_parser("verify", help="re-check hashes, round-trips, CIs and recounts")
    p.add_argument("dir")
    p.add_argument("--no-reeval", action="store_true", help="skip reloading the final checkpoint")
    p.set_defaults(func=_verify)
    return ap


def main(argv: list[str] | None = None) -> int:
    from collatz_lab import runner

    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigMismatch) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (runner.ResultExists, runner.IncompleteResult) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_EXISTS
    except (CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - runtime faults map to one exit code
        print(f"runtime fault: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
