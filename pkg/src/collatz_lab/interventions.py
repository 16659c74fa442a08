"""Causal conditions: scratch, encoder/decoder transplant, decoder rewind, parity erasure."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np
import torch

from collatz_lab import analysis
from collatz_lab.model import ModelConfig, Transformer, init_params
from collatz_lab.train import (Checkpoint, ConfigMismatch, Evaluator, TrainConfig, TrainResult,
                               make_split, subtree_hash, train_loop)

KINDS = ("scratch", "encoder_transplant", "decoder_transplant", "decoder_rewind", "parity_erasure_eval")
ENC, DEC = "enc.", "dec."


class FrozenHashDrift(RuntimeError):
    """A frozen parameter subtree changed during training."""


@dataclass
class InterventionPlan:
    kind: str
    converged: Checkpoint | None = None  # phi*, psi*
    early: Checkpoint | None = None  # psi^(early), used by decoder_rewind
    init_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown intervention kind {self.kind!r}")

    @property
    def frozen_prefixes(self) -> tuple[str, ...]:
        return {"scratch": (), "encoder_transplant": (ENC,), "decoder_transplant": (DEC,),
                "decoder_rewind": (ENC,), "parity_erasure_eval": (ENC, DEC)}[self.kind]


@dataclass
class Materialized:
    checkpoint: Checkpoint  # optimizer state is not carried over
    frozen_prefixes: tuple[str, ...]
    frozen_hashes: dict[str, str]


def _check_compatible(cfg: ModelConfig, ck: Checkpoint | None, what: str, parts: tuple[str, ...]) -> None:
    if ck is None:
        raise ValueError(f"{what} checkpoint is required for this plan")
    src = ck.model_cfg
    if src.base != cfg.base or src.d_model != cfg.d_model or src.max_len != cfg.max_len:
        raise ConfigMismatch(f"{what} checkpoint is incompatible (base/d_model/max_len differ)")
    if ENC in parts and (src.n_enc_layers, src.d_ff, src.n_heads) != (cfg.n_enc_layers, cfg.d_ff, cfg.n_heads):
        raise ConfigMismatch(f"{what} encoder shape differs from target config")
    if DEC in parts and (src.n_dec_layers, src.d_ff, src.n_heads) != (cfg.n_dec_layers, cfg.d_ff, cfg.n_heads):
        raise ConfigMismatch(f"{what} decoder shape differs from target config")


def materialize(plan: InterventionPlan, cfg: ModelConfig) -> Materialized:
    """Assemble starting parameters: fresh init from ``init_seed``, then copy in source subtrees."""
    params = init_params(cfg, plan.init_seed)
    copies: list[tuple[Checkpoint, str]] = []
    if plan.kind in ("encoder_transplant", "decoder_rewind"):
        _check_compatible(cfg, plan.converged, "converged", (ENC,))
        copies.append((plan.converged, ENC))
    if plan.kind == "decoder_transplant":
        _check_compatible(cfg, plan.converged, "converged", (DEC,))
        copies.append((plan.converged, DEC))
    if plan.kind == "decoder_rewind":
        _check_compatible(cfg, plan.early, "early", (DEC,))
        copies.append((plan.early, DEC))
    if plan.kind == "parity_erasure_eval":
        _check_compatible(cfg, plan.converged, "converged", (ENC, DEC))
        copies += [(plan.converged, ENC), (plan.converged, DEC)]
    for src, prefix in copies:
        for k in params:
            if k.startswith(prefix):
                params[k] = src.params[k].detach().clone()
    hashes = {p: subtree_hash(params, p) for p in plan.frozen_prefixes}
    prov = {"intervention": plan.kind, "init_seed": plan.init_seed}
    return Materialized(Checkpoint(cfg, params, None, 0, prov), plan.frozen_prefixes, hashes)


@dataclass
class ConditionResult:
    kind: str
    runs: dict[int, TrainResult]
    steps: list[int]
    mean: list[float]
    std: list[float]
    hash_log: dict[int, list[tuple[int, dict[str, str]]]]

    def steps_to(self, threshold: float) -> dict[int, int | None]:
        return {s: analysis.steps_to_threshold([r.step for r in run.records], [r.acc for r in run.records], threshold)
                for s, run in self.runs.items()}


def run_condition(plan: InterventionPlan, cfg: ModelConfig, tcfg: TrainConfig, seeds: list[int],
                  on_checkpoint=None, **train_kw) -> ConditionResult:
    """Train the plan once per seed; each seed drives both the fresh init and the data stream.

    Frozen subtree hashes are checked at every checkpoint; any drift aborts.
    """
    if tcfg.steps <= 0:
        raise ValueError("training budget must be positive")
    if plan.kind == "parity_erasure_eval":
        raise ValueError("parity_erasure_eval is an evaluation, use erasure_eval")
    runs, hash_log = {}, {}
    for seed in seeds:
        mat = materialize(replace(plan, init_seed=seed), cfg)
        log_: list = []

        def check(ck, mat=mat, log_=log_, seed=seed):
            now = {p: subtree_hash(ck.params, p) for p in mat.frozen_prefixes}
            log_.append((ck.step, now))
            if now != mat.frozen_hashes:
                raise FrozenHashDrift(f"frozen subtree changed by step {ck.step}")
            if on_checkpoint is not None:
                on_checkpoint(seed, ck)

        seed_cfg = replace(tcfg, seed=seed, data_seed=seed)
        init = None if plan.kind == "scratch" else mat.checkpoint
        runs[seed] = train_loop(cfg, seed_cfg, init=init, frozen_prefixes=mat.frozen_prefixes,
                                on_checkpoint=check, provenance={"intervention": plan.kind}, **train_kw)
        hash_log[seed] = log_
    steps, mean, std = aggregate({s: r.records for s, r in runs.items()})
    return ConditionResult(plan.kind, runs, steps, mean, std, hash_log)


def aggregate(records_by_seed: dict, field: str = "acc") -> tuple[list[int], list[float], list[float]]:
    """Mean and population std across seeds at steps every seed evaluated."""
    common = None
    for recs in records_by_seed.values():
        s = {r.step for r in recs}
        common = s if common is None else common & s
    steps = sorted(common or [])
    mean, std = [], []
    for st in steps:
        vals = [next(getattr(r, field) for r in recs if r.step == st) for recs in records_by_seed.values()]
        mean.append(float(np.mean(vals)))
        std.append(float(np.std(vals)))
    return steps, mean, std


@dataclass
class ErasureResult:
    baseline: float
    erased: float
    delta: float
    baseline_predictions: list
    erased_predictions: list


def erasure_eval(ck: Checkpoint, u, tcfg: TrainConfig, items: list | None = None) -> ErasureResult:
    """Accuracy on the eval set with and without projecting ``u`` out of final encoder states."""
    u = torch.as_tensor(np.asarray(u), dtype=torch.float64)
    if u.ndim != 1 or u.shape[0] != ck.model_cfg.d_model:
        raise ConfigMismatch(f"direction has shape {tuple(u.shape)}, model d_model is {ck.model_cfg.d_model}")
    split = make_split(tcfg)
    if items is not None:
        split.eval_set = list(items)
    ev = Evaluator(replace(tcfg, diagnostics=()), split, ck.model_cfg.base)
    model = Transformer(ck.model_cfg, OrderedDict((k, v.detach()) for k, v in ck.params.items()))
    base_pred = model.predict(ev.batch.enc, ev.max_new).tokens
    er_pred = model.predict(ev.batch.enc, ev.max_new, erase=u).tokens
    a = analysis.acc_seq(base_pred, ev.targets).value
    b = analysis.acc_seq(er_pred, ev.targets).value
    return ErasureResult(a, b, a - b, base_pred, er_pred)


def parity_direction(ck: Checkpoint, tcfg: TrainConfig, layer: int = -1, seed: int = 0) -> tuple[np.ndarray, analysis.ProbeResult]:
    """Fit the parity probe on pooled encoder states of the eval set; return its raw-space unit direction."""
    split = make_split(tcfg)
    ev = Evaluator(replace(tcfg, diagnostics=()), split, ck.model_cfg.base)
    model = Transformer(ck.model_cfg, OrderedDict((k, v.detach()) for k, v in ck.params.items()))
    z = ev.pooled(model, layer)
    res = analysis.fit_probe(z, analysis.residue_labels(ev.operands, 1), seed=seed, target="a1")
    return res.probe.raw_direction, res
