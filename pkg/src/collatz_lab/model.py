"""Encoder-decoder transformer over digit tokens.

Parameters live in a flat ordered dict so that checkpointing, freezing
and transplanting operate on plain name prefixes: everything under
``enc.`` is the encoder, everything under ``dec.`` the decoder.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import torch

from collatz_lab import autograd as ag
from collatz_lab.tasks import MAX_SEQ_LEN, Vocab

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    base: int = 8
    d_model: int = 256
    n_heads: int = 8
    d_ff: int = 1024
    n_enc_layers: int = 6
    n_dec_layers: int = 6
    max_len: int = MAX_SEQ_LEN
    dropout: float = 0.0
    activation: str = "gelu"
    pos_encoding: str = "sinusoidal"  # or "learned"
    enc_pos_origin: str = "msb"  # position 0 is the first real digit ("msb") or the last ("lsb")
    norm: str = "pre"  # or "post"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.activation not in ag.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.pos_encoding not in ("sinusoidal", "learned"):
            raise ValueError(f"unknown positional encoding {self.pos_encoding!r}")
        if self.enc_pos_origin not in ("msb", "lsb") or self.norm not in ("pre", "post"):
            raise ValueError("bad enc_pos_origin or norm")
        if self.dropout != 0.0:
            raise ValueError("dropout is not supported; training is deterministic")

    @property
    def vocab_size(self) -> int:
        return self.base + 3

    def to_dict(self) -> dict:
        return asdict(self)


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count; matches ``len`` of :func:`init_params` output."""
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    attn = 4 * (d * d + d)
    ffn = d * f + f + f * d + d
    ln = 2 * d
    enc_layer = attn + ffn + 2 * ln
    dec_layer = 2 * attn + ffn + 3 * ln
    pos = 2 * cfg.max_len * d if cfg.pos_encoding == "learned" else 0
    return (cfg.n_enc_layers * enc_layer + cfg.n_dec_layers * dec_layer
            + 2 * v * d + 2 * ln + d * v + v + pos)


def width_matched_d_ff(target: ModelConfig, n_dec_layers: int = 1) -> int:
    """d_ff (shared by all layers) giving ``n_dec_layers`` a parameter count closest to ``target``."""
    goal = param_count(target)
    base = ModelConfig(**{**target.to_dict(), "n_dec_layers": n_dec_layers, "d_ff": 0})
    per_unit = (param_count(ModelConfig(**{**base.to_dict(), "d_ff": 1})) - param_count(base))
    return max(1, round((goal - param_count(base)) / per_unit))


def _layer_names(prefix: str, kinds: list[str], cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.d_model, cfg.d_ff
    out = []
    for k in kinds:
        if k.startswith("ln"):
            out += [(f"{prefix}.{k}.g", (d,)), (f"{prefix}.{k}.b", (d,))]
        elif k.endswith("attn"):
            for w in ("q", "k", "v", "o"):
                out += [(f"{prefix}.{k}.w{w}", (d, d)), (f"{prefix}.{k}.b{w}", (d,))]
        elif k == "ff":
            out += [(f"{prefix}.ff.w1", (d, f)), (f"{prefix}.ff.b1", (f,)),
                    (f"{prefix}.ff.w2", (f, d)), (f"{prefix}.ff.b2", (d,))]
    return out


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, v = cfg.d_model, cfg.vocab_size
    shapes = [("enc.tok_emb", (v, d))]
    if cfg.pos_encoding == "learned":
        shapes.append(("enc.pos_emb", (cfg.max_len, d)))
    for i in range(cfg.n_enc_layers):
        shapes += _layer_names(f"enc.layers.{i}", ["ln1", "self_attn", "ln2", "ff"], cfg)
    shapes += [("enc.ln_f.g", (d,)), ("enc.ln_f.b", (d,))]
    shapes.append(("dec.tok_emb", (v, d)))
    if cfg.pos_encoding == "learned":
        shapes.append(("dec.pos_emb", (cfg.max_len, d)))
    for i in range(cfg.n_dec_layers):
        shapes += _layer_names(f"dec.layers.{i}", ["ln1", "self_attn", "ln2", "cross_attn", "ln3", "ff"], cfg)
    shapes += [("dec.ln_f.g", (d,)), ("dec.ln_f.b", (d,)), ("dec.out.w", (d, v)), ("dec.out.b", (v,))]
    return shapes


def init_params(cfg: ModelConfig, seed: int, dtype=torch.float32) -> "OrderedDict[str, torch.Tensor]":
    """Seeded init: uniform(+-1/sqrt(fan_in)) for matrices, N(0, 1/d) embeddings, unit LN gains.

    The output head is scaled down by a further 1/sqrt(fan_in) so initial
    logits are close to uniform over the vocabulary.
    """
    gen = torch.Generator().manual_seed(seed)
    params: OrderedDict[str, torch.Tensor] = OrderedDict()
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith("_emb"):
            t = torch.randn(shape, generator=gen, dtype=torch.float64) / math.sqrt(cfg.d_model)
        elif ".ln" in name and leaf == "g":
            t = torch.ones(shape, dtype=torch.float64)
        elif len(shape) == 2:
            bound = 1.0 / math.sqrt(shape[0])
            if name == "dec.out.w":
                bound /= math.sqrt(shape[0])
            t = (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound
        else:
            t = torch.zeros(shape, dtype=torch.float64)
        params[name] = t.to(dtype)
    return params


def sinusoidal(length: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(length, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe.to(dtype)


@dataclass
class EncoderOutput:
    """Per-layer encoder states; ``hidden[-1]`` is what the decoder attends to.

    ``hidden[j]`` for ``j < L-1`` is the residual stream after layer ``j+1``;
    the last entry is the final normalized output.
    """

    hidden: list[torch.Tensor]  # each (B, S, d)
    pad_mask: torch.Tensor  # (B, S) True at PAD

    @property
    def final(self) -> torch.Tensor:
        return self.hidden[-1]

    def with_final(self, final: torch.Tensor) -> "EncoderOutput":
        return EncoderOutput(self.hidden[:-1] + [final], self.pad_mask)


@dataclass
class DecodeResult:
    tokens: list[list[int]]
    truncated: list[bool] = field(default_factory=list)


class Transformer:
    def __init__(self, cfg: ModelConfig, params: "OrderedDict[str, torch.Tensor] | None" = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        self.vocab = Vocab(cfg.base)
        self._act = ag.ACTIVATIONS[cfg.activation]
        self._pe_cache: dict = {}

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def to(self, dtype) -> "Transformer":
        return Transformer(self.cfg, OrderedDict((k, v.detach().to(dtype)) for k, v in self.params.items()))

    def requires_grad_(self, flag: bool = True) -> "Transformer":
        for p in self.params.values():
            p.requires_grad_(flag)
        return self

    # -- building blocks -------------------------------------------------

    def _p(self, name):
        return self.params[name]

    def _ln(self, x, prefix):
        return ag.layer_norm(x, self._p(prefix + ".g"), self._p(prefix + ".b"))

    def _lin(self, x, w, b):
        return ag.linear(x, self._p(w), self._p(b))

    def _attn(self, x, mem, prefix, bias):
        b, t, d = x.shape
        s = mem.shape[1]
        h = self.cfg.n_heads
        dh = d // h
        q = self._lin(x, prefix + ".wq", prefix + ".bq").view(b, t, h, dh).transpose(1, 2)
        k = self._lin(mem, prefix + ".wk", prefix + ".bk").view(b, s, h, dh).transpose(1, 2)
        v = self._lin(mem, prefix + ".wv", prefix + ".bv").view(b, s, h, dh).transpose(1, 2)
        out = ag.attention(q, k, v, bias).transpose(1, 2).reshape(b, t, d)
        return self._lin(out, prefix + ".wo", prefix + ".bo")

    def _ff(self, x, prefix):
        hdn = self._act(self._lin(x, prefix + ".w1", prefix + ".b1"))
        return self._lin(hdn, prefix + ".w2", prefix + ".b2")

    def _sublayer(self, x, fn, ln):
        if self.cfg.norm == "pre":
            return ag.add(x, fn(self._ln(x, ln)))
        return self._ln(ag.add(x, fn(x)), ln)

    def _positions(self, pos_ids, side):
        if self.cfg.pos_encoding == "learned":
            return ag.embedding(pos_ids, self._p(f"{side}.pos_emb"))
        key = self.dtype
        pe = self._pe_cache.get(key)
        if pe is None:
            pe = self._pe_cache[key] = sinusoidal(self.cfg.max_len, self.cfg.d_model, self.dtype)
        return pe[pos_ids]

    # -- public API ------------------------------------------------------

    def encode(self, tokens: torch.Tensor, erase: torch.Tensor | None = None) -> EncoderOutput:
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.shape[1] > self.cfg.max_len:
            raise ValueError(f"input length {tokens.shape[1]} exceeds max_len {self.cfg.max_len}")
        pad = tokens == self.vocab.pad
        real = (~pad).long()
        if self.cfg.enc_pos_origin == "msb":
            pos = (torch.cumsum(real, 1) - 1).clamp(min=0)
        else:
            pos = (torch.flip(torch.cumsum(torch.flip(real, [1]), 1), [1]) - 1).clamp(min=0)
        x = ag.embedding(tokens, self._p("enc.tok_emb")) * math.sqrt(self.cfg.d_model)
        x = ag.add(x, self._positions(pos, "enc"))
        bias = torch.zeros(pad.shape, dtype=x.dtype).masked_fill(pad, NEG_INF)[:, None, None, :]
        hidden = []
        for i in range(self.cfg.n_enc_layers):
            pre = f"enc.layers.{i}"
            x = self._sublayer(x, lambda y: self._attn(y, y, pre + ".self_attn", bias), pre + ".ln1")
            x = self._sublayer(x, lambda y: self._ff(y, pre + ".ff"), pre + ".ln2")
            hidden.append(x)
        final = self._ln(x, "enc.ln_f") if self.cfg.norm == "pre" else x
        hidden[-1] = final
        out = EncoderOutput(hidden, pad)
        if erase is not None:
            out = erase_direction(out, erase)
        return out

    def encode_with_erasure(self, tokens: torch.Tensor, u: torch.Tensor) -> EncoderOutput:
        return self.encode(tokens, erase=u)

    def decode_teacher_forced(self, enc: EncoderOutput, dec_in: torch.Tensor) -> torch.Tensor:
        if dec_in.ndim == 1:
            dec_in = dec_in[None]
        if not bool((dec_in[:, 0] == self.vocab.bos).all()):
            raise ValueError("decoder input must start with BOS")
        t = dec_in.shape[1]
        if t > self.cfg.max_len:
            raise ValueError(f"decoder length {t} exceeds max_len {self.cfg.max_len}")
        x = ag.embedding(dec_in, self._p("dec.tok_emb")) * math.sqrt(self.cfg.d_model)
        x = ag.add(x, self._positions(torch.arange(t)[None].expand_as(dec_in), "dec"))
        causal = torch.triu(torch.full((t, t), NEG_INF, dtype=x.dtype), diagonal=1)[None, None]
        mem = enc.final
        cross = torch.zeros(enc.pad_mask.shape, dtype=x.dtype).masked_fill(enc.pad_mask, NEG_INF)[:, None, None, :]
        for i in range(self.cfg.n_dec_layers):
            pre = f"dec.layers.{i}"
            x = self._sublayer(x, lambda y: self._attn(y, y, pre + ".self_attn", causal), pre + ".ln1")
            x = self._sublayer(x, lambda y: self._attn(y, mem, pre + ".cross_attn", cross), pre + ".ln2")
            x = self._sublayer(x, lambda y: self._ff(y, pre + ".ff"), pre + ".ln3")
        if self.cfg.norm == "pre":
            x = self._ln(x, "dec.ln_f")
        return self._lin(x, "dec.out.w", "dec.out.b")

    def loss(self, enc_tokens, dec_in, labels) -> torch.Tensor:
        logits = self.decode_teacher_forced(self.encode(enc_tokens), dec_in)
        return ag.cross_entropy(logits, labels, ignore_index=self.vocab.pad)

    @torch.no_grad()
    def greedy_decode(self, enc: EncoderOutput, max_new: int) -> DecodeResult:
        """Argmax decoding from BOS; stops at EOS or after ``max_new`` tokens.

        Returned sequences exclude EOS. ``torch.argmax`` returns the first
        maximal index, so ties go to the lowest token id.
        """
        b = enc.final.shape[0]
        max_new = min(max_new, self.cfg.max_len - 1)
        seq = torch.full((b, 1), self.vocab.bos, dtype=torch.long)
        done = torch.zeros(b, dtype=torch.bool)
        for _ in range(max_new):
            logits = self.decode_teacher_forced(enc, seq)[:, -1]
            nxt = torch.argmax(logits, dim=-1)
            nxt = torch.where(done, torch.full_like(nxt, self.vocab.pad), nxt)
            seq = torch.cat([seq, nxt[:, None]], dim=1)
            done |= nxt == self.vocab.eos
            if bool(done.all()):
                break
        tokens, truncated = [], []
        for row, fin in zip(seq[:, 1:].tolist(), done.tolist()):
            if self.vocab.eos in row:
                row = row[: row.index(self.vocab.eos)]
            tokens.append([t for t in row if t != self.vocab.pad])
            truncated.append(not fin)
        return DecodeResult(tokens, truncated)

    @torch.no_grad()
    def predict(self, enc_tokens: torch.Tensor, max_new: int, erase: torch.Tensor | None = None, chunk: int = 1024) -> DecodeResult:
        tokens, truncated = [], []
        for i in range(0, enc_tokens.shape[0], chunk):
            res = self.greedy_decode(self.encode(enc_tokens[i:i + chunk], erase=erase), max_new)
            tokens += res.tokens
            truncated += res.truncated
        return DecodeResult(tokens, truncated)


def erase_direction(enc: EncoderOutput, u: torch.Tensor, tol: float = 1e-6) -> EncoderOutput:
    """Project ``u`` out of every final-layer state; earlier layers are untouched."""
    if u.ndim != 1 or u.shape[0] != enc.final.shape[-1]:
        raise ValueError(f"direction must have shape ({enc.final.shape[-1]},)")
    if abs(float(torch.linalg.vector_norm(u.double())) - 1.0) > tol:
        raise ValueError("erasure direction must be unit-norm")
    # projection done in float64, then cast back, to keep |<h, u>| near rounding level
    h = enc.final.double()
    u = u.double() / torch.linalg.vector_norm(u.double())
    out = h - (h @ u)[..., None] * u
    return enc.with_final(out.to(enc.final.dtype))
