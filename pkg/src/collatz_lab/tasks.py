"""Procedural Collatz/GCD data: splits, sampling distributions, tokenization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from collatz_lab.numeral import carry_depth, collatz_step, from_digits, gcd, to_digits

MAX_SEQ_LEN = 64
SAMPLING_KINDS = ("uniform", "log_uniform", "residue_stratified", "carry_stratified", "short_carry")


class EmptyStratumError(ValueError):
    """A residue class or carry-depth bucket the sampling spec needs has no members."""


@dataclass(frozen=True)
class Vocab:
    base: int

    @property
    def pad(self) -> int:
        return self.base

    @property
    def bos(self) -> int:
        return self.base + 1

    @property
    def eos(self) -> int:
        return self.base + 2

    @property
    def size(self) -> int:
        return self.base + 3

    def strip(self, tokens: Sequence[int]) -> list[int]:
        """Digits of a decoded sequence, cut at the first EOS."""
        out = []
        for t in tokens:
            if t == self.eos:
                break
            if t != self.pad and t != self.bos:
                out.append(int(t))
        return out


@dataclass(frozen=True)
class SamplingSpec:
    kind: str = "uniform"
    range_lo: int = 1
    range_hi: int = 10_000
    modulus: int = 64
    max_depth: int = 2
    depth_weights: tuple[tuple[int, float], ...] | None = None

    def __post_init__(self):
        if self.kind not in SAMPLING_KINDS:
            raise ValueError(f"unknown sampling kind {self.kind!r}")
        if not 1 <= self.range_lo <= self.range_hi:
            raise ValueError(f"bad range [{self.range_lo}, {self.range_hi}]")
        if self.modulus < 1 or self.max_depth < 0:
            raise ValueError("modulus must be >= 1 and max_depth >= 0")


@dataclass
class DataSplit:
    train_pool: np.ndarray  # sorted
    eval_set: list[int]
    seed: int

    def __post_init__(self):
        self.train_pool = np.asarray(self.train_pool, dtype=np.int64)


def build_split(lo: int, hi: int, eval_size: int, seed: int) -> DataSplit:
    """Partition ``[lo, hi]`` into a training pool and a seeded held-out list."""
    size = hi - lo + 1
    if size < 1:
        raise ValueError(f"empty range [{lo}, {hi}]")
    if not 0 <= eval_size < size:
        raise ValueError(f"eval_size {eval_size} must be < range size {size}")
    rng = np.random.default_rng(seed)
    values = np.arange(lo, hi + 1, dtype=np.int64)
    perm = rng.permutation(size)
    eval_idx = perm[:eval_size]
    mask = np.ones(size, dtype=bool)
    mask[eval_idx] = False
    return DataSplit(values[mask], [int(v) for v in values[eval_idx]], seed)


class Sampler:
    """Precomputed sampling weights for one (spec, split, base) combination."""

    def __init__(self, spec: SamplingSpec, split: DataSplit, base: int):
        self.spec = spec
        self.base = base
        pool = split.train_pool
        pool = pool[(pool >= spec.range_lo) & (pool <= spec.range_hi)]
        if len(pool) == 0:
            raise EmptyStratumError("training pool is empty within the sampling range")
        self.pool = pool
        self.classes: list[np.ndarray] | None = None
        self.probs: np.ndarray | None = None

        kind = spec.kind
        if kind == "uniform":
            self.probs = None
        elif kind == "log_uniform":
            w = 1.0 / pool.astype(np.float64)
            self.probs = w / w.sum()
        elif kind == "residue_stratified":
            res = pool % spec.modulus
            self.classes = [pool[res == r] for r in range(spec.modulus)]
            if any(len(c) == 0 for c in self.classes):
                missing = [r for r, c in enumerate(self.classes) if len(c) == 0]
                raise EmptyStratumError(f"residue classes {missing} mod {spec.modulus} are empty")
        elif kind == "short_carry":
            keep = np.array([n % 2 == 0 or carry_depth(int(n), base) <= spec.max_depth for n in pool])
            self.pool = pool[keep]
            if len(self.pool) == 0:
                raise EmptyStratumError("short_carry excluded the whole pool")
        elif kind == "carry_stratified":
            self.probs = self._carry_stratified_probs(pool)

    def _carry_stratified_probs(self, pool: np.ndarray) -> np.ndarray:
        odd = pool % 2 == 1
        depths = np.array([carry_depth(int(n), self.base) if n % 2 else -1 for n in pool])
        present = sorted(set(depths[odd].tolist()))
        if self.spec.depth_weights is None:
            weights = {d: 1.0 for d in present}
        else:
            weights = dict(self.spec.depth_weights)
            empty = [d for d, w in weights.items() if w > 0 and d not in present]
            if empty:
                raise EmptyStratumError(f"carry-depth buckets {empty} are empty in the pool")
        probs = np.zeros(len(pool))
        n_even, n_odd = int((~odd).sum()), int(odd.sum())
        # odd/even mass follows the pool; only the odd mass is reshuffled by depth
        if n_even:
            probs[~odd] = (n_even / len(pool)) / n_even
        total_w = sum(weights.get(d, 0.0) for d in present)
        if n_odd and total_w <= 0:
            raise EmptyStratumError("depth_weights give zero mass to every odd bucket")
        for d in present:
            members = depths == d
            w = weights.get(d, 0.0)
            probs[members] = (n_odd / len(pool)) * (w / total_w) / members.sum()
        return probs / probs.sum()

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if count < 1:
            raise ValueError("count must be >= 1")
        if self.classes is not None:
            n_cls = len(self.classes)
            q, r = divmod(count, n_cls)
            per_class = np.full(n_cls, q)
            per_class[rng.choice(n_cls, size=r, replace=False)] += 1
            parts = [c[rng.integers(0, len(c), size=k)] for c, k in zip(self.classes, per_class)]
            out = np.concatenate(parts)
            return out[rng.permutation(len(out))]
        if self.probs is None:
            return self.pool[rng.integers(0, len(self.pool), size=count)]
        return rng.choice(self.pool, size=count, p=self.probs)


def sample_batch(spec: SamplingSpec, split: DataSplit, count: int, rng: np.random.Generator, base: int = 10) -> np.ndarray:
    return Sampler(spec, split, base).sample(count, rng)


@dataclass(frozen=True)
class PairSplit:
    """GCD split: held-out operand pairs, training draws reject them."""

    lo: int
    hi: int
    eval_set: list[tuple[int, int]]
    seed: int

    @cached_property
    def _excluded(self) -> frozenset:
        return frozenset(self.eval_set)

    def sample(self, count: int, rng: np.random.Generator) -> list[tuple[int, int]]:
        out: list[tuple[int, int]] = []
        while len(out) < count:
            ab = rng.integers(self.lo, self.hi + 1, size=(count - len(out), 2))
            out.extend((int(a), int(b)) for a, b in ab if (int(a), int(b)) not in self._excluded)
        return out


def build_pair_split(lo: int, hi: int, eval_size: int, seed: int) -> PairSplit:
    rng = np.random.default_rng(seed)
    seen: dict[tuple[int, int], None] = {}
    while len(seen) < eval_size:
        a, b = rng.integers(lo, hi + 1, size=2)
        seen.setdefault((int(a), int(b)), None)
    return PairSplit(lo, hi, list(seen), seed)


@dataclass
class TaskExample:
    task: str
    input_tokens: list[int]
    target_tokens: list[int]  # digits + EOS
    operands: tuple[int, ...]
    branch: str | None = None
    depth: int | None = None
    bos: int = field(default=-1, repr=False)

    @property
    def decoder_input(self) -> list[int]:
        return [self.bos] + self.target_tokens[:-1]

    @property
    def target_digits(self) -> list[int]:
        return self.target_tokens[:-1]


def encode_example(task: str, operands, base: int, max_len: int = MAX_SEQ_LEN) -> TaskExample:
    vocab = Vocab(base)
    if task == "collatz":
        n = int(operands[0] if isinstance(operands, (tuple, list)) else operands)
        inp = to_digits(n, base)
        tgt = to_digits(collatz_step(n), base)
        branch = "even" if n % 2 == 0 else "odd"
        depth = carry_depth(n, base) if n % 2 else None
        ops: tuple[int, ...] = (n,)
    elif task == "gcd":
        a, b = (int(x) for x in operands)
        inp = to_digits(a, base) + [vocab.bos] + to_digits(b, base)
        tgt = to_digits(gcd(a, b), base)
        branch, depth, ops = None, None, (a, b)
    else:
        raise ValueError(f"unknown task {task!r}")
    target = tgt + [vocab.eos]
    if len(inp) > max_len or len(target) > max_len:
        raise ValueError(f"example {ops} exceeds max sequence length {max_len}")
    return TaskExample(task, inp, target, ops, branch, depth, bos=vocab.bos)


def decode_input(task: str, tokens: Sequence[int], base: int) -> tuple[int, ...]:
    vocab = Vocab(base)
    toks = [t for t in tokens if t != vocab.pad]
    if task == "collatz":
        return (from_digits(toks, base),)
    i = toks.index(vocab.bos)
    return from_digits(toks[:i], base), from_digits(toks[i + 1:], base)


@dataclass
class Batch:
    enc: torch.Tensor  # (B, S) left-padded
    dec_in: torch.Tensor  # (B, T) right-padded
    labels: torch.Tensor  # (B, T) right-padded with PAD


def collate(examples: Sequence[TaskExample], base: int) -> Batch:
    pad = Vocab(base).pad
    s = max(len(e.input_tokens) for e in examples)
    t = max(len(e.target_tokens) for e in examples)
    enc = torch.full((len(examples), s), pad, dtype=torch.long)
    dec = torch.full((len(examples), t), pad, dtype=torch.long)
    lab = torch.full((len(examples), t), pad, dtype=torch.long)
    for i, e in enumerate(examples):
        enc[i, s - len(e.input_tokens):] = torch.tensor(e.input_tokens)
        dec[i, : len(e.target_tokens)] = torch.tensor(e.decoder_input)
        lab[i, : len(e.target_tokens)] = torch.tensor(e.target_tokens)
    return Batch(enc, dec, lab)


class ExampleCache:
    """Memoized per-operand encodings; training steps hit the same integers often."""

    def __init__(self, task: str, base: int, max_len: int = MAX_SEQ_LEN):
        self.task, self.base, self.max_len = task, base, max_len
        self._cache: dict = {}

    def get(self, operands) -> TaskExample:
        key = operands if isinstance(operands, tuple) else (int(operands),)
        ex = self._cache.get(key)
        if ex is None:
            ex = encode_example(self.task, key, self.base, self.max_len)
            self._cache[key] = ex
        return ex

    def batch(self, items: Iterable) -> Batch:
        return collate([self.get(x) for x in items], self.base)


def export_jsonl(examples: Iterable[TaskExample], path: str | Path, base: int) -> None:
    vocab = Vocab(base)
    with open(path, "w") as fh:
        for e in examples:
            rec = {
                "task": e.task,
                "operands": list(e.operands),
                "base": base,
                "input_digits": [t if t != vocab.bos else "BOS" for t in e.input_tokens],
                "target_digits": e.target_digits,
                "branch": e.branch,
                "carry_depth": e.depth,
            }
            fh.write(json.dumps(rec) + "\n")
