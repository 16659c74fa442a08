"""AdamW with warmup + cosine schedule, freezing, checkpoints, and the training loop."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from collatz_lab import analysis
from collatz_lab import autograd as ag
from collatz_lab.model import ModelConfig, Transformer, init_params
from collatz_lab.tasks import (DataSplit, ExampleCache, PairSplit, Sampler, SamplingSpec,
                               build_pair_split, build_split)

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


class ConfigMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------


def lr_at(step: int, total_steps: int, base_lr: float = 1e-4, warmup: int = 4000) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup or total_steps <= warmup:
        return base_lr * min(step, warmup) / warmup if warmup else base_lr
    frac = (step - warmup) / (total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-9
    weight_decay: float = 1e-2
    clip_norm: float = 5.0

    @classmethod
    def zeros_like(cls, params, **hp) -> "OptimState":
        st = cls(**hp)
        st.m = {k: torch.zeros_like(p) for k, p in params.items()}
        st.v = {k: torch.zeros_like(p) for k, p in params.items()}
        return st

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in ("beta1", "beta2", "eps", "weight_decay", "clip_norm")}


def no_decay(name: str) -> bool:
    """Layer-norm gains/biases and embeddings are excluded from weight decay."""
    return ".ln" in name or name.endswith("_emb")


FreezeMask = dict  # name -> True if trainable


def freeze_mask(params, frozen_prefixes: tuple[str, ...] = ()) -> FreezeMask:
    return {k: not any(k.startswith(p) for p in frozen_prefixes) for k in params}


@torch.no_grad()
def clip_grads(grads: dict, names, max_norm: float) -> float:
    total = math.sqrt(sum(float(torch.sum(grads[k].double() ** 2)) for k in names))
    if max_norm and total > max_norm:
        c = max_norm / total
        for k in names:
            grads[k].mul_(c)
    return total


@torch.no_grad()
def adamw_step(params: dict, grads: dict, state: OptimState, mask: FreezeMask, lr: float,
               decay_filter: Callable[[str], bool] = no_decay) -> float:
    """One decoupled-weight-decay Adam update over trainable parameters.

    Gradients are clipped to ``state.clip_norm`` global norm (trainable
    tensors only) before the update. Returns the pre-clip norm.
    """
    names = [k for k in params if mask.get(k, True) and grads.get(k) is not None]
    for k in names:
        if not bool(torch.isfinite(grads[k]).all()):
            raise NonFiniteGradient(f"non-finite gradient in {k} at step {state.step + 1}")
    gnorm = clip_grads(grads, names, state.clip_norm)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1, bc2 = 1 - b1**t, 1 - b2**t
    for k in names:
        p, g = params[k], grads[k]
        if state.weight_decay and not decay_filter(k):
            p.mul_(1 - lr * state.weight_decay)
        m, v = state.m[k], state.v[k]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return gnorm


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"CLZCKPT\0"
FORMAT_VERSION = 1


def tensor_hash(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().contiguous().cpu().numpy().astype("<f4" if t.dtype == torch.float32 else "<f8").tobytes()).hexdigest()


def subtree_hash(params, prefix: str) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        if k.startswith(prefix):
            h.update(k.encode())
            h.update(bytes.fromhex(tensor_hash(params[k])))
    return h.hexdigest()


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    params: "OrderedDict[str, torch.Tensor]"
    optim: OptimState | None
    step: int
    provenance: dict = field(default_factory=dict)
    rng: dict = field(default_factory=dict)

    def clone(self) -> "Checkpoint":
        opt = None
        if self.optim is not None:
            opt = OptimState(m={k: v.clone() for k, v in self.optim.m.items()},
                             v={k: v.clone() for k, v in self.optim.v.items()},
                             step=self.optim.step, **self.optim.hyper())
        return Checkpoint(self.model_cfg, OrderedDict((k, v.detach().clone()) for k, v in self.params.items()),
                          opt, self.step, dict(self.provenance), dict(self.rng))


def _dtype_code(t: torch.Tensor) -> str:
    if t.dtype == torch.float32:
        return "<f4"
    if t.dtype == torch.float64:
        return "<f8"
    raise CheckpointError(f"unsupported dtype {t.dtype}")


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    """Serialize: magic, u32 version, u64 manifest length, manifest JSON, sha256(manifest), blocks.

    Blocks are raw little-endian arrays laid out in manifest order; each
    carries its own sha256 in the manifest.
    """
    blocks = []
    entries = []
    offset = 0

    def push(group, name, t):
        nonlocal offset
        raw = t.detach().contiguous().cpu().numpy().astype(_dtype_code(t)).tobytes()
        entries.append({"group": group, "name": name, "dtype": _dtype_code(t), "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest()})
        blocks.append(raw)
        offset += len(raw)

    for k, p in ck.params.items():
        push("param", k, p)
    optim_meta = None
    if ck.optim is not None:
        for k in ck.params:
            push("m", k, ck.optim.m[k])
            push("v", k, ck.optim.v[k])
        optim_meta = {"step": ck.optim.step, **ck.optim.hyper()}
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": ck.model_cfg.to_dict(),
        "schedule_step": ck.step,
        "optimizer": optim_meta,
        "provenance": ck.provenance,
        "rng": ck.rng,
        "blocks": entries,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    head = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(mbytes)) + mbytes + hashlib.sha256(mbytes).digest()
    return head + b"".join(blocks)


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, mlen = struct.unpack("<IQ", buf[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    mbytes = buf[20:20 + mlen]
    if hashlib.sha256(mbytes).digest() != buf[20 + mlen:52 + mlen]:
        raise CheckpointError("manifest hash mismatch")
    manifest = json.loads(mbytes)
    data = buf[52 + mlen:]
    groups: dict[str, OrderedDict] = {"param": OrderedDict(), "m": OrderedDict(), "v": OrderedDict()}
    for e in manifest["blocks"]:
        raw = data[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"] or hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise CheckpointError(f"content hash mismatch in block {e['group']}:{e['name']}")
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
        groups[e["group"]][e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")))
    cfg = ModelConfig(**manifest["model_config"])
    opt = None
    if manifest["optimizer"] is not None:
        meta = dict(manifest["optimizer"])
        step = meta.pop("step")
        opt = OptimState(m=dict(groups["m"]), v=dict(groups["v"]), step=step, **meta)
    return Checkpoint(cfg, groups["param"], opt, manifest["schedule_step"], manifest["provenance"], manifest["rng"])


def save_checkpoint(ck: Checkpoint, path: str | Path) -> str:
    buf = checkpoint_bytes(ck)
    Path(path).write_bytes(buf)
    return hashlib.sha256(buf).hexdigest()


def load_checkpoint(path: str | Path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    task: str = "collatz"
    range_lo: int = 1
    range_hi: int = 10_000
    eval_size: int = 5000
    split_seed: int = 0
    sampling: SamplingSpec = field(default_factory=SamplingSpec)
    steps: int = 100_000
    batch_size: int = 512
    draw_size: int = 1000
    lr: float = 1e-4
    warmup: int = 4000
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-9
    clip_norm: float = 5.0
    eval_every: int = 2000
    ckpt_every: int = 2000
    eval_at_start: bool = True
    seed: int = 0  # parameter init
    data_seed: int = 0
    diagnostics: tuple[str, ...] = ()  # any of "pr", "cosine", "probe", "erasure"
    probe_levels: tuple[int, ...] = (1, 2, 3, 4)
    probe_layers: tuple[int, ...] = (-1,)
    stop_at_acc: float | None = None  # end early once overall eval accuracy reaches this
    stop_on_convergence: bool = False
    converge_window: int = 5
    converge_tol: float = 0.005
    converge_min_step: int = 0
    converge_min_acc: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["diagnostics"] = list(self.diagnostics)
        d["probe_levels"] = list(self.probe_levels)
        d["probe_layers"] = list(self.probe_layers)
        if d["sampling"]["depth_weights"] is not None:
            d["sampling"]["depth_weights"] = [list(x) for x in d["sampling"]["depth_weights"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        s = dict(d.get("sampling") or {})
        if s.get("depth_weights") is not None:
            s["depth_weights"] = tuple((int(a), float(b)) for a, b in s["depth_weights"])
        d["sampling"] = SamplingSpec(**s)
        for k in ("diagnostics", "probe_levels", "probe_layers"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def resume_key(self) -> dict:
        """Fields that must agree between a run and its resumption."""
        d = self.to_dict()
        for k in ("eval_every", "ckpt_every", "diagnostics", "probe_levels", "probe_layers", "stop_at_acc",
                  "eval_at_start", "stop_on_convergence", "converge_window", "converge_tol",
                  "converge_min_step", "converge_min_acc"):
            d.pop(k)
        return d


class DataStream:
    """Training batches as a pure function of the step index.

    The stream is cut into chunks of ``draw_size`` integers, chunk ``c``
    drawn from ``default_rng([data_seed, c])``; the batch for step ``t``
    is the slice ``[t*B, (t+1)*B)`` of that stream.
    """

    def __init__(self, tcfg: TrainConfig, split, base: int):
        self.cfg = tcfg
        self.split = split
        self.sampler = Sampler(tcfg.sampling, split, base) if tcfg.task == "collatz" else None
        self._chunks: OrderedDict = OrderedDict()

    def _chunk(self, c: int):
        ch = self._chunks.get(c)
        if ch is None:
            rng = np.random.default_rng([self.cfg.data_seed, c])
            if self.sampler is not None:
                ch = [int(x) for x in self.sampler.sample(self.cfg.draw_size, rng)]
            else:
                ch = self.split.sample(self.cfg.draw_size, rng)
            self._chunks[c] = ch
            while len(self._chunks) > 4:
                self._chunks.popitem(last=False)
        return ch

    def batch_items(self, step: int) -> list:
        b, dsz = self.cfg.batch_size, self.cfg.draw_size
        start, stop = step * b, (step + 1) * b
        out = []
        pos = start
        while pos < stop:
            c, off = divmod(pos, dsz)
            take = min(stop - pos, dsz - off)
            out.extend(self._chunk(c)[off:off + take])
            pos += take
        return out


def make_split(tcfg: TrainConfig):
    if tcfg.task == "collatz":
        return build_split(tcfg.range_lo, tcfg.range_hi, tcfg.eval_size, tcfg.split_seed)
    return build_pair_split(tcfg.range_lo, tcfg.range_hi, tcfg.eval_size, tcfg.split_seed)


@dataclass
class EvalResult:
    record: analysis.MetricRecord
    predictions: list[list[int]]
    erased_predictions: list[list[int]] | None = None


class Evaluator:
    """Greedy-decodes the fixed eval set and fills in a MetricRecord."""

    def __init__(self, tcfg: TrainConfig, split, base: int):
        self.tcfg = tcfg
        self.base = base
        self.cache = ExampleCache(tcfg.task, base)
        self.items = list(split.eval_set)
        self.examples = [self.cache.get(x) for x in self.items]
        self.targets = [e.target_digits for e in self.examples]
        self.operands = [e.operands[0] for e in self.examples] if tcfg.task == "collatz" else None
        self.batch = self.cache.batch(self.items) if self.items else None
        self.max_new = max((len(e.target_tokens) for e in self.examples), default=1)
        self._prev_params = None

    def pooled(self, model: Transformer, layer: int = -1) -> np.ndarray:
        with torch.no_grad():
            enc = model.encode(self.batch.enc)
            return analysis.pool_hidden(enc, layer).double().numpy()

    def __call__(self, model: Transformer, step: int, loss: float | None = None) -> EvalResult:
        preds = model.predict(self.batch.enc, self.max_new).tokens
        rec = analysis.score_predictions(step, preds, self.targets, self.operands, loss)
        diag = self.tcfg.diagnostics
        erased = None
        if diag and self.operands is not None:
            with torch.no_grad():
                enc = model.encode(self.batch.enc)
            if "pr" in diag:
                rec.participation_ratio = analysis.participation_ratio(analysis.pool_hidden(enc).double().numpy()).value
            if "cosine" in diag:
                if self._prev_params is not None:
                    rec.ckpt_cosine = analysis.checkpoint_cosine(self._prev_params, model.params)
                self._prev_params = OrderedDict((k, v.detach().clone()) for k, v in model.params.items())
            if "probe" in diag or "erasure" in diag:
                layers = self.tcfg.probe_layers if "probe" in diag else (-1,)
                levels = self.tcfg.probe_levels if "probe" in diag else (1,)
                parity_probe = None
                for layer in layers:
                    z = analysis.pool_hidden(enc, layer).double().numpy()
                    for k in levels:
                        y = analysis.residue_labels(self.operands, k)
                        if len(np.unique(y)) < 2:
                            continue
                        res = analysis.fit_probe(z, y, target=f"a{k}")
                        rec.probe_acc[f"{layer}:a{k}"] = res.accuracy
                        if k == 1 and layer in (-1, model.cfg.n_enc_layers - 1):
                            parity_probe = res.probe
                if "erasure" in diag and parity_probe is not None:
                    u = torch.from_numpy(parity_probe.raw_direction)
                    erased = model.predict(self.batch.enc, self.max_new, erase=u).tokens
                    e = analysis.acc_seq(erased, self.targets)
                    rec.erased_acc = e.value
                    rec.delta_erase = rec.acc - e.value
        return EvalResult(rec, preds, erased)


@dataclass
class TrainResult:
    records: list[analysis.MetricRecord]
    checkpoints: dict[int, Checkpoint]
    final: Checkpoint
    predictions: dict[int, list[list[int]]] = field(default_factory=dict)
    erased_predictions: dict[int, list[list[int]]] = field(default_factory=dict)
    wall_time: float = 0.0


def train_loop(mcfg: ModelConfig, tcfg: TrainConfig, *, init: Checkpoint | None = None,
               resume: Checkpoint | None = None, frozen_prefixes: tuple[str, ...] = (),
               on_checkpoint: Callable[[Checkpoint], None] | None = None,
               on_eval: Callable[[EvalResult], None] | None = None,
               keep_checkpoints: bool = True, provenance: dict | None = None) -> TrainResult:
    """Train for ``tcfg.steps`` optimizer steps.

    ``init`` supplies starting parameters (optimizer state is fresh);
    ``resume`` continues a saved run exactly, including optimizer moments.
    Evaluation and checkpointing happen at multiples of their cadences and
    at the final step.
    """
    t0 = time.time()
    split = make_split(tcfg)
    stream = DataStream(tcfg, split, mcfg.base)
    cache = ExampleCache(tcfg.task, mcfg.base)
    evaluator = Evaluator(tcfg, split, mcfg.base)
    prov = {"seed": tcfg.seed, "data_seed": tcfg.data_seed, "split_seed": tcfg.split_seed,
            "train_config": tcfg.resume_key(), **(provenance or {})}

    hp = dict(beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.eps, weight_decay=tcfg.weight_decay, clip_norm=tcfg.clip_norm)
    if resume is not None:
        if resume.model_cfg != mcfg:
            raise ConfigMismatch("resume checkpoint has a different model config")
        if resume.provenance.get("train_config") != tcfg.resume_key():
            raise ConfigMismatch("resume checkpoint was trained with a different train config")
        ck = resume.clone()
        params, opt, start = ck.params, ck.optim, ck.step
        prov = {**ck.provenance}
    else:
        if init is not None:
            if init.model_cfg != mcfg:
                raise ConfigMismatch("init checkpoint has a different model config")
            params = OrderedDict((k, v.detach().clone()) for k, v in init.params.items())
        else:
            params = init_params(mcfg, tcfg.seed)
        opt = OptimState.zeros_like(params, **hp)
        start = 0
    mask = freeze_mask(params, frozen_prefixes)
    for k, p in params.items():
        p.requires_grad_(mask[k])
    model = Transformer(mcfg, params)

    result = TrainResult([], {}, None)
    last_loss = None

    def snapshot(step) -> Checkpoint:
        return Checkpoint(mcfg, OrderedDict((k, v.detach().clone()) for k, v in params.items()),
                          OptimState(m={k: v.clone() for k, v in opt.m.items()},
                                     v={k: v.clone() for k, v in opt.v.items()}, step=opt.step, **opt.hyper()),
                          step, dict(prov), {"data_seed": tcfg.data_seed, "init_seed": tcfg.seed})

    def evaluate(step):
        ev = evaluator(model, step, last_loss)
        result.records.append(ev.record)
        result.predictions[step] = ev.predictions
        if ev.erased_predictions is not None:
            result.erased_predictions[step] = ev.erased_predictions
        if on_eval:
            on_eval(ev)
        log.info("step %d loss %s acc %.4f even %s odd %s", step, last_loss, ev.record.acc,
                 ev.record.acc_even, ev.record.acc_odd)
        return ev

    def checkpoint(step):
        ck = snapshot(step)
        if keep_checkpoints:
            result.checkpoints[step] = ck
        if on_checkpoint:
            on_checkpoint(ck)

    if start == 0 and resume is None:
        if tcfg.eval_at_start:
            evaluate(0)
        checkpoint(0)

    trainable = [k for k in params if mask[k]]
    step = start
    while step < tcfg.steps:
        items = stream.batch_items(step)
        b = cache.batch(items)
        for k in trainable:
            params[k].grad = None
        loss = model.loss(b.enc, b.dec_in, b.labels)
        ag.backward(loss)
        grads = {k: params[k].grad for k in trainable}
        step += 1
        adamw_step(params, grads, opt, mask, lr_at(step, tcfg.steps, tcfg.lr, tcfg.warmup))
        last_loss = float(loss.detach())
        is_last = step == tcfg.steps
        stop = False
        if step % tcfg.eval_every == 0 or is_last:
            ev = evaluate(step)
            stop = tcfg.stop_at_acc is not None and ev.record.acc >= tcfg.stop_at_acc
            if tcfg.stop_on_convergence and step >= tcfg.converge_min_step and ev.record.acc >= tcfg.converge_min_acc:
                accs = [r.acc for r in result.records]
                stop = stop or analysis.is_converged(accs, tcfg.converge_window, tcfg.converge_tol)
        if step % tcfg.ckpt_every == 0 or is_last or stop:
            checkpoint(step)
        if stop:
            break

    for p in params.values():
        p.requires_grad_(False)
    result.final = snapshot(step)
    result.wall_time = time.time() - t0
    return result
