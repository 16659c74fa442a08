"""Experiment execution, plot-ready reporting, and artifact verification.

Result directory layout::

    <root>/config.yaml        verbatim experiment config
    <root>/INCOMPLETE         present until every unit finished
    <root>/manifest.json      sha256 of every file written by run()
    <root>/summary.csv        one row per unit (final eval)
    <root>/aggregates/*.csv   mean/std over seeds, per condition
    <root>/runs/<unit>/run.json, metrics.jsonl, predictions.jsonl, frozen.json,
                       checkpoints/step_0000000.ckpt ...
    <root>/report/*.csv       written by report()
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from multiprocessing import get_context
from pathlib import Path

import torch

from collatz_lab import analysis
from collatz_lab import interventions as iv
from collatz_lab.config import ExperimentConfig
from collatz_lab.model import ModelConfig, Transformer, width_matched_d_ff
from collatz_lab.tasks import ExampleCache
from collatz_lab.train import (CheckpointError, TrainConfig, checkpoint_bytes, checkpoint_from_bytes,
                               load_checkpoint, make_split, save_checkpoint, subtree_hash)

log = logging.getLogger(__name__)

RESULT_SCHEMA = 1
INCOMPLETE = "INCOMPLETE"
ENV_OUT = "COLLATZ_OUT"
ENV_PARALLEL = "COLLATZ_PARALLEL"
SUMMARY_FIELDS = ["unit", "condition", "seed", "base", "dec_layers", "d_ff", "sampling", "task", "final_step",
                  "n_eval", "acc", "acc_lo", "acc_hi", "acc_even", "acc_odd", "digit_acc", "best_acc",
                  "steps_to_threshold"]


class ResultExists(FileExistsError):
    pass


class IncompleteResult(RuntimeError):
    pass


@dataclass
class Unit:
    """One training run inside an experiment."""

    name: str
    model: ModelConfig
    train: TrainConfig
    seed: int
    plan: str = "scratch"
    converged_from: str | None = None
    early_from: str | None = None
    early_step: int | None = None
    meta: dict = field(default_factory=dict)


def _seeded(t: TrainConfig, seed: int) -> TrainConfig:
    return replace(t, seed=seed, data_seed=seed)


def plan_units(cfg: ExperimentConfig) -> list[list[Unit]]:
    """Stages of independent units; a stage may read checkpoints of earlier stages."""
    m, t, s0 = cfg.model, cfg.train, cfg.seeds[0]
    src_t = replace(t, steps=cfg.source_steps or t.steps)
    k = cfg.kind

    def unit(name, seed=s0, model=m, train=t, **kw):
        meta = {"condition": kw.pop("condition", "baseline"), "seed": seed, "base": model.base,
                "dec_layers": model.n_dec_layers, "d_ff": model.d_ff, "sampling": train.sampling.kind,
                "task": train.task}
        return Unit(name, model, train, seed, meta=meta, **kw)

    if k in ("baseline", "erasure_scan", "probe_scan"):
        return [[unit(k)]]
    if k == "multi_seed":
        return [[unit(f"seed{s}", seed=s) for s in cfg.seeds]]
    if k == "base_sweep":
        out = []
        for b in cfg.bases:
            tb = t
            if b == 2:  # collapse diagnostics at every eval
                tb = replace(t, diagnostics=tuple(dict.fromkeys(t.diagnostics + ("pr", "cosine"))))
            out.append(unit(f"base{b}", model=replace(m, base=b), train=tb, condition=f"base{b}"))
        return [out]
    if k == "depth_sweep":
        out = [unit(f"dec{d}", model=replace(m, n_dec_layers=d), condition=f"dec{d}") for d in cfg.dec_depths]
        if cfg.width_matched and max(cfg.dec_depths) > 1:
            deep = replace(m, n_dec_layers=max(cfg.dec_depths))
            wm = replace(m, n_dec_layers=1, d_ff=width_matched_d_ff(deep, 1))
            out.append(unit("dec1_wm", model=wm, condition="dec1_width_matched"))
        return [out]
    if k in ("distribution_ablation", "carry_exposure"):
        return [[unit(s, train=replace(t, sampling=replace(t.sampling, kind=s)), condition=s) for s in cfg.samplings]]
    if k == "transplant":
        src = unit("source", train=src_t, condition="source")
        runs = [unit(f"{c}_s{s}", seed=s, plan=c, converged_from=None if c == "scratch" else "source", condition=c)
                for c in cfg.conditions for s in cfg.seeds]
        return [[src], runs]
    if k == "rewind":
        # the source must train well past the rewind point, or "early" and "converged" coincide
        src_t = replace(src_t, converge_min_step=max(src_t.converge_min_step, 2 * cfg.rewind_step))
        if src_t.steps <= cfg.rewind_step:
            raise ValueError(f"source budget {src_t.steps} does not pass rewind_step {cfg.rewind_step}")
        src = unit("source", train=src_t, condition="source")
        runs = [unit(f"decoder_rewind_s{s}", seed=s, plan="decoder_rewind", converged_from="source",
                     early_from="source", early_step=cfg.rewind_step, condition="decoder_rewind")
                for s in cfg.seeds]
        return [[src], runs]
    if k == "transfer":
        tc, tg = replace(t, task="collatz"), replace(t, task="gcd")
        first = [unit("collatz_scratch", train=tc, condition="scratch"),
                 unit("gcd_scratch", train=tg, condition="scratch")]
        second = [unit("collatz_to_gcd", train=tg, plan="encoder_transplant", converged_from="collatz_scratch",
                       condition="transfer"),
                  unit("gcd_to_collatz", train=tc, plan="encoder_transplant", converged_from="gcd_scratch",
                       condition="transfer")]
        return [first, second]
    raise ValueError(f"no unit plan for experiment kind {k!r}")


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


def _ckpt_name(step: int) -> str:
    return f"step_{step:07d}.ckpt"


def checkpoint_paths(run_dir: Path) -> list[Path]:
    return sorted((run_dir / "checkpoints").glob("step_*.ckpt"))


def final_checkpoint(run_dir: Path):
    paths = checkpoint_paths(run_dir)
    if not paths:
        raise CheckpointError(f"no checkpoints in {run_dir}")
    return load_checkpoint(paths[-1])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def execute_unit(root: str, unit: Unit, threshold: float = 0.7) -> dict:
    """Train one unit, streaming metrics, predictions and checkpoints into ``runs/<name>``."""
    root = Path(root)
    d = root / "runs" / unit.name
    (d / "checkpoints").mkdir(parents=True, exist_ok=True)
    info = {"name": unit.name, "plan": unit.plan, "seed": unit.seed, "model": unit.model.to_dict(),
            "train": _seeded(unit.train, unit.seed).to_dict(), "converged_from": unit.converged_from,
            "early_from": unit.early_from, "early_step": unit.early_step, "meta": unit.meta, "status": "running"}
    _write_json(d / "run.json", info)

    converged = final_checkpoint(root / "runs" / unit.converged_from) if unit.converged_from else None
    early = None
    if unit.early_from:
        p = root / "runs" / unit.early_from / "checkpoints" / _ckpt_name(unit.early_step)
        if not p.exists():
            raise CheckpointError(f"source run {unit.early_from} has no checkpoint at step {unit.early_step}")
        early = load_checkpoint(p)
    plan = iv.InterventionPlan(unit.plan, converged=converged, early=early)

    with open(d / "metrics.jsonl", "w") as mf, open(d / "predictions.jsonl", "w") as pf:
        def on_eval(ev):
            mf.write(json.dumps(ev.record.to_dict(), sort_keys=True) + "\n")
            mf.flush()
            pf.write(json.dumps({"step": ev.record.step, "predictions": ev.predictions,
                                 "erased": ev.erased_predictions}) + "\n")
            pf.flush()

        def on_ckpt(_seed, ck):
            save_checkpoint(ck, d / "checkpoints" / _ckpt_name(ck.step))

        res = iv.run_condition(plan, unit.model, unit.train, [unit.seed], on_checkpoint=on_ckpt,
                               on_eval=on_eval, keep_checkpoints=False)
    mat = iv.materialize(replace(plan, init_seed=unit.seed), unit.model)
    _write_json(d / "frozen.json", {"prefixes": list(mat.frozen_prefixes), "expected": mat.frozen_hashes,
                                    "log": res.hash_log[unit.seed]})
    run = res.runs[unit.seed]
    info.update(status="complete", final_step=run.final.step, wall_time=run.wall_time)
    _write_json(d / "run.json", info)
    return summary_row(unit.name, unit.meta, run.records, threshold)


def summary_row(name: str, meta: dict, records: list[analysis.MetricRecord], threshold: float) -> dict:
    last = records[-1]
    steps = [r.step for r in records]
    accs = [r.acc for r in records]
    row = {"unit": name, **{k: meta.get(k) for k in ("condition", "seed", "base", "dec_layers", "d_ff", "sampling", "task")},
           "final_step": last.step, "n_eval": last.n_eval, "acc": last.acc, "acc_lo": last.acc_lo,
           "acc_hi": last.acc_hi, "acc_even": last.acc_even, "acc_odd": last.acc_odd, "digit_acc": last.digit_acc,
           "best_acc": max(accs), "steps_to_threshold": analysis.steps_to_threshold(steps, accs, threshold)}
    return row


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_csv(path: Path, rows: list[dict], fields: list[str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fields})
    return path


def _worker_init():
    torch.set_num_threads(1)


def parallelism(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get(ENV_PARALLEL, default)))
    except ValueError:
        return default


def resolve_output(cfg: ExperimentConfig, out: str | Path | None = None) -> Path:
    if out is not None:
        return Path(out)
    p = Path(cfg.output_dir)
    root = os.environ.get(ENV_OUT)
    return (Path(root) / p / cfg.name) if root and not p.is_absolute() else p / cfg.name


def run(cfg: ExperimentConfig, out: str | Path | None = None, force: bool = False,
        workers: int | None = None) -> Path:
    """Execute every unit of ``cfg`` and return the result directory."""
    root = resolve_output(cfg, out)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise ResultExists(f"{root} already holds results; pass force to overwrite")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / INCOMPLETE).write_text("run started; remove only by completing the run\n")
    (root / "config.yaml").write_text(cfg.dumps())

    workers = workers or parallelism()
    rows = []
    for stage in plan_units(cfg):
        if workers > 1 and len(stage) > 1:
            with ProcessPoolExecutor(min(workers, len(stage)), mp_context=get_context("spawn"),
                                     initializer=_worker_init) as pool:
                rows += list(pool.map(execute_unit, [str(root)] * len(stage), stage, [cfg.threshold] * len(stage)))
        else:
            rows += [execute_unit(str(root), u, cfg.threshold) for u in stage]
    _write_csv(root / "summary.csv", rows, SUMMARY_FIELDS)
    _write_kind_tables(root, cfg, rows)
    _write_aggregates(root, cfg)

    files = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in (INCOMPLETE, "manifest.json") and "report" not in p.relative_to(root).parts:
            files[str(p.relative_to(root))] = _sha256(p)
    _write_json(root / "manifest.json", {"schema_version": RESULT_SCHEMA, "experiment": cfg.kind,
                                         "name": cfg.name, "files": files})
    (root / INCOMPLETE).unlink()
    return root


def load_records(run_dir: Path) -> list[analysis.MetricRecord]:
    with open(run_dir / "metrics.jsonl") as f:
        return [analysis.MetricRecord.from_dict(json.loads(line)) for line in f if line.strip()]


def load_runs(root: Path) -> dict[str, dict]:
    out = {}
    for d in sorted((root / "runs").iterdir()):
        if (d / "run.json").exists():
            out[d.name] = json.loads((d / "run.json").read_text())
    return out


def _write_kind_tables(root: Path, cfg: ExperimentConfig, rows: list[dict]) -> None:
    if cfg.kind == "base_sweep":
        table = [{"base": r["base"], "All": r["acc"], "Even": r["acc_even"], "Odd": r["acc_odd"],
                  "All_lo": r["acc_lo"], "All_hi": r["acc_hi"]} for r in rows]
        _write_csv(root / "base_sweep.csv", table, ["base", "All", "Even", "Odd", "All_lo", "All_hi"])
    if cfg.kind == "transfer":
        by = {r["unit"]: r for r in rows}
        layout = [("collatz", "gcd", "transfer", "collatz_to_gcd"), ("none", "gcd", "scratch", "gcd_scratch"),
                  ("gcd", "collatz", "transfer", "gcd_to_collatz"), ("none", "collatz", "scratch", "collatz_scratch")]
        table = [{"encoder_from": a, "target_task": b, "condition": c, "unit": u, "final_step": by[u]["final_step"],
                  "acc": by[u]["acc"], "acc_lo": by[u]["acc_lo"], "acc_hi": by[u]["acc_hi"]} for a, b, c, u in layout]
        _write_csv(root / "transfer.csv", table,
                   ["encoder_from", "target_task", "condition", "unit", "final_step", "acc", "acc_lo", "acc_hi"])


def _write_aggregates(root: Path, cfg: ExperimentConfig) -> None:
    groups: dict[str, dict[int, list]] = {}
    for name, info in load_runs(root).items():
        if info["meta"]["condition"] == "source":
            continue
        groups.setdefault(info["meta"]["condition"], {})[info["seed"]] = load_records(root / "runs" / name)
    for cond, by_seed in groups.items():
        if len(by_seed) < 2:
            continue
        rows = []
        cols = {}
        for fld in ("acc", "acc_even", "acc_odd"):
            steps, mean, std = iv.aggregate(by_seed, fld)
            cols[fld] = (mean, std)
        for i, st in enumerate(steps):
            row = {"step": st, "n_seeds": len(by_seed)}
            for fld, (mean, std) in cols.items():
                row[f"{fld}_mean"], row[f"{fld}_std"] = mean[i], std[i]
            rows.append(row)
        _write_csv(root / "aggregates" / f"{cond}.csv", rows,
                   ["step", "n_seeds"] + [f"{f}_{s}" for f in cols for s in ("mean", "std")])
        ends = [{"seed": s, "final_step": recs[-1].step, "acc": recs[-1].acc, "acc_lo": recs[-1].acc_lo,
                 "acc_hi": recs[-1].acc_hi, "n_correct": recs[-1].n_correct, "n_eval": recs[-1].n_eval}
                for s, recs in sorted(by_seed.items())]
        _write_csv(root / "aggregates" / f"{cond}_endpoints.csv", ends,
                   ["seed", "final_step", "acc", "acc_lo", "acc_hi", "n_correct", "n_eval"])


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def report(root: str | Path) -> dict[str, Path]:
    """Write one tidy CSV per figure family under ``<root>/report``."""
    root = Path(root)
    if (root / INCOMPLETE).exists():
        raise IncompleteResult(f"{root} carries the {INCOMPLETE} marker; finish or rerun the experiment")
    cfg = ExperimentConfig.load(root / "config.yaml")
    out_dir = root / "report"
    acc_rows, probe_rows, erase_rows, depth_rows, collapse_rows = [], [], [], [], []
    for name, info in load_runs(root).items():
        meta = info["meta"]
        for r in load_records(root / "runs" / name):
            common = {"run": name, "condition": meta["condition"], "seed": info["seed"], "step": r.step}
            acc_rows.append({**common, "overall": r.acc, "even": r.acc_even, "odd": r.acc_odd,
                             "ci_lo": r.acc_lo, "ci_hi": r.acc_hi})
            for key, a in sorted(r.probe_acc.items()):
                layer, target = key.split(":")
                probe_rows.append({**common, "layer": int(layer), "target_k": int(target[1:]), "accuracy": a})
            if r.erased_acc is not None:
                erase_rows.append({**common, "baseline": r.acc, "erased": r.erased_acc, "delta": r.delta_erase})
            if cfg.kind == "depth_sweep":
                depth_rows.append({**common, "dec_layers": meta["dec_layers"], "d_ff": meta["d_ff"], "odd": r.acc_odd})
            if r.participation_ratio is not None or r.ckpt_cosine is not None:
                collapse_rows.append({**common, "base": meta["base"], "loss": r.loss,
                                      "participation_ratio": r.participation_ratio, "ckpt_cosine": r.ckpt_cosine})
    key = ["run", "condition", "seed", "step"]
    files = {"accuracy_vs_step": _write_csv(out_dir / "accuracy_vs_step.csv", acc_rows,
                                            key + ["overall", "even", "odd", "ci_lo", "ci_hi"])}
    if probe_rows:
        files["probe_accuracy"] = _write_csv(out_dir / "probe_accuracy.csv", probe_rows, key + ["layer", "target_k", "accuracy"])
    if erase_rows:
        files["erasure"] = _write_csv(out_dir / "erasure.csv", erase_rows, key + ["baseline", "erased", "delta"])
    if depth_rows:
        files["depth_odd"] = _write_csv(out_dir / "depth_odd.csv", depth_rows, key + ["dec_layers", "d_ff", "odd"])
    if collapse_rows:
        files["collapse"] = _write_csv(out_dir / "collapse.csv", collapse_rows,
                                       key + ["base", "loss", "participation_ratio", "ckpt_cosine"])
    if cfg.kind == "base_sweep":
        rows = [{"base": b, "even": analysis.local_predictability(b, "even", cfg.train.range_lo, cfg.train.range_hi),
                 "odd": analysis.local_predictability(b, "odd", cfg.train.range_lo, cfg.train.range_hi)}
                for b in cfg.bases]
        files["entropy_by_base"] = _write_csv(out_dir / "entropy_by_base.csv", rows, ["base", "even", "odd"])
    return files


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class VerifyReport:
    checks: list[Check] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return bool(self.checks) and all(c.ok for c in self.checks)

    def add(self, name: str, ok: bool, detail: str = "") -> None:
        self.checks.append(Check(name, bool(ok), detail))

    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.ok]

    def to_dict(self) -> dict:
        return {"ok": self.ok, "checks": [asdict(c) for c in self.checks]}


def _recount(rec: analysis.MetricRecord, preds, targets, operands) -> list[str]:
    redo = analysis.score_predictions(rec.step, preds, targets, operands, rec.loss)
    bad = []
    for f in ("n_eval", "n_correct", "acc", "acc_lo", "acc_hi", "n_even", "n_even_correct", "acc_even",
              "n_odd", "n_odd_correct", "acc_odd", "digit_acc"):
        if getattr(redo, f) != getattr(rec, f):
            bad.append(f"{f}: stored {getattr(rec, f)} recount {getattr(redo, f)}")
    return bad


def verify(root: str | Path, reeval: bool = True) -> VerifyReport:
    """Re-check stored artifacts; failures are returned, never raised."""
    root = Path(root)
    rep = VerifyReport()
    rep.add("complete", not (root / INCOMPLETE).exists(), "INCOMPLETE marker present" if (root / INCOMPLETE).exists() else "")
    try:
        cfg = ExperimentConfig.load(root / "config.yaml")
        rep.add("config parses", True)
    except Exception as e:  # noqa: BLE001 - reported, not raised
        rep.add("config parses", False, str(e))
        return rep
    mpath = root / "manifest.json"
    if mpath.exists():
        files = json.loads(mpath.read_text())["files"]
        bad = [f for f, h in files.items() if not (root / f).exists() or _sha256(root / f) != h]
        rep.add("manifest hashes", not bad, ", ".join(bad[:5]))
    else:
        rep.add("manifest hashes", False, "manifest.json missing")

    runs = load_runs(root) if (root / "runs").exists() else {}
    for name, info in runs.items():
        d = root / "runs" / name
        mcfg = ModelConfig(**info["model"])
        tcfg = TrainConfig.from_dict(info["train"])
        cks = {}
        rt_bad, load_bad = [], []
        for p in checkpoint_paths(d):
            raw = p.read_bytes()
            try:
                ck = checkpoint_from_bytes(raw)
            except CheckpointError as e:
                load_bad.append(f"{p.name}: {e}")
                continue
            cks[ck.step] = ck
            if checkpoint_bytes(ck) != raw:
                rt_bad.append(p.name)
        rep.add(f"{name}: checkpoint content hashes", not load_bad, "; ".join(load_bad))
        rep.add(f"{name}: checkpoint round-trip", not rt_bad and bool(cks), ", ".join(rt_bad) or ("" if cks else "no checkpoints"))

        frozen = json.loads((d / "frozen.json").read_text()) if (d / "frozen.json").exists() else None
        if frozen and frozen["prefixes"]:
            drift = [f"step {s} {p}" for s, ck in sorted(cks.items()) for p in frozen["prefixes"]
                     if subtree_hash(ck.params, p) != frozen["expected"][p]]
            rep.add(f"{name}: frozen subtree hashes", not drift and len(cks) == len(checkpoint_paths(d)), ", ".join(drift[:5]))
        if info.get("converged_from") and 0 in cks:
            src_paths = checkpoint_paths(root / "runs" / info["converged_from"])
            if src_paths:
                src = load_checkpoint(src_paths[-1])
                part = "dec." if info["plan"] == "decoder_transplant" else "enc."
                rep.add(f"{name}: step-0 {part[:-1]} equals converged source",
                        subtree_hash(cks[0].params, part) == subtree_hash(src.params, part))
        if info.get("early_from") and 0 in cks:
            p = root / "runs" / info["early_from"] / "checkpoints" / _ckpt_name(info["early_step"])
            ok = p.exists() and subtree_hash(cks[0].params, "dec.") == subtree_hash(load_checkpoint(p).params, "dec.")
            rep.add(f"{name}: step-0 decoder equals step-{info['early_step']} source", ok)

        records = load_records(d)
        ci_bad = []
        for r in records:
            lo, hi = analysis.clopper_pearson(r.n_correct, r.n_eval)
            if not (r.acc_lo <= r.acc <= r.acc_hi and (lo, hi) == (r.acc_lo, r.acc_hi)):
                ci_bad.append(str(r.step))
            for k, n, a, l_, h_ in ((r.n_even_correct, r.n_even, r.acc_even, r.acc_even_lo, r.acc_even_hi),
                                    (r.n_odd_correct, r.n_odd, r.acc_odd, r.acc_odd_lo, r.acc_odd_hi)):
                if n and not (l_ <= a <= h_ and analysis.clopper_pearson(k, n) == (l_, h_)):
                    ci_bad.append(f"{r.step} branch")
        rep.add(f"{name}: CI brackets", not ci_bad, ", ".join(ci_bad[:5]))

        cache = ExampleCache(tcfg.task, mcfg.base)
        items = list(make_split(tcfg).eval_set)
        examples = [cache.get(x) for x in items]
        targets = [e.target_digits for e in examples]
        operands = [e.operands[0] for e in examples] if tcfg.task == "collatz" else None
        stored = {}
        with open(d / "predictions.jsonl") as f:
            for line in f:
                obj = json.loads(line)
                stored[obj["step"]] = obj
        rc_bad = []
        for r in records:
            if r.step not in stored:
                rc_bad.append(f"step {r.step}: predictions missing")
                continue
            rc_bad += [f"step {r.step} {m}" for m in _recount(r, stored[r.step]["predictions"], targets, operands)]
            if operands is not None and r.n_even + r.n_odd != r.n_eval:
                rc_bad.append(f"step {r.step}: branch counts do not sum to eval size")
            er = stored[r.step].get("erased")
            if er is not None and analysis.acc_seq(er, targets).value != r.erased_acc:
                rc_bad.append(f"step {r.step}: erased accuracy recount differs")
        rep.add(f"{name}: metric recount", not rc_bad and bool(records), "; ".join(rc_bad[:5]))

        if reeval and records and records[-1].step in cks and records[-1].step in stored:
            ck = cks[records[-1].step]
            model = Transformer(ck.model_cfg, ck.params)
            batch = cache.batch(items)
            max_new = max(len(e.target_tokens) for e in examples)
            preds = model.predict(batch.enc, max_new).tokens
            same = preds == stored[records[-1].step]["predictions"]
            acc = analysis.acc_seq(preds, targets).value
            rep.add(f"{name}: reload re-evaluation", same and acc == records[-1].acc,
                    "" if same else f"re-evaluated accuracy {acc} vs stored {records[-1].acc}")
    if not runs:
        rep.add("runs present", False, "no runs/ directory")
    return rep
