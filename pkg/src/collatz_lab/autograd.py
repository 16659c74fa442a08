"""Tensor primitives with reverse-mode gradients, and a finite-difference checker.

The primitives are thin wrappers over torch autograd that add the shape
checks and PAD handling the model relies on. The finite-difference
checker is independent of torch's gradient machinery: it only evaluates
the forward function.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch
import torch.nn.functional as F

LN_EPS = 1e-5


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class BackwardError(RuntimeError):
    pass


def _fail(op: str, *shapes) -> None:
    raise ShapeError(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        _fail("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        _fail("matmul", a.shape, b.shape)
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``a + b`` where ``b`` may broadcast into ``a`` but never the reverse."""
    try:
        shape = torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        _fail("add", a.shape, b.shape)
    if shape != a.shape:
        _fail("add", a.shape, b.shape)
    return a + b


def linear(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ w + b`` for ``w`` of shape (in, out), fused into one kernel."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or (b is not None and b.shape != w.shape[1:]):
        _fail("linear", x.shape, w.shape, *(() if b is None else (b.shape,)))
    flat = x.reshape(-1, x.shape[-1])
    out = torch.addmm(b, flat, w) if b is not None else flat @ w
    return out.view(*x.shape[:-1], w.shape[1])


def scale(a: torch.Tensor, c: float) -> torch.Tensor:
    return a * c


def softmax(x: torch.Tensor) -> torch.Tensor:
    # torch's kernel subtracts the row max internally
    return torch.softmax(x, dim=-1)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d) + bias) v over (B, H, T, d) operands, as one fused kernel."""
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1] or q.shape[:-2] != k.shape[:-2]:
        _fail("attention", q.shape, k.shape, v.shape)
    return F.scaled_dot_product_attention(q, k, v, attn_mask=bias.to(q.dtype))


def layer_norm(x: torch.Tensor, gain: torch.Tensor | None = None, bias: torch.Tensor | None = None, eps: float = LN_EPS) -> torch.Tensor:
    if gain is not None and gain.shape != x.shape[-1:]:
        _fail("layer_norm", x.shape, gain.shape)
    # biased variance, eps inside the sqrt
    return F.layer_norm(x, x.shape[-1:], gain, bias, eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact (erf) GELU."""
    return F.gelu(x)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp(x, min=0.0)


ACTIVATIONS = {"gelu": gelu, "relu": relu}


def embedding(ids: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    if ids.dtype not in (torch.int64, torch.int32):
        raise TypeError("embedding ids must be integer")
    if ids.numel() and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table with {table.shape[0]} rows")
    return table[ids]


def concat(xs: list[torch.Tensor], dim: int = -1) -> torch.Tensor:
    ref = xs[0].shape
    d = dim % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != d):
            _fail("concat", *(y.shape for y in xs))
    return torch.cat(xs, dim=dim)


def slice_(x: torch.Tensor, dim: int, start: int, stop: int) -> torch.Tensor:
    if not 0 <= start <= stop <= x.shape[dim]:
        raise ShapeError(f"slice [{start}:{stop}] out of bounds for dim of size {x.shape[dim]}")
    return x.narrow(dim, start, stop - start)


def transpose(x: torch.Tensor, d0: int = -2, d1: int = -1) -> torch.Tensor:
    return x.transpose(d0, d1)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor, ignore_index: int | None = None) -> torch.Tensor:
    """Mean token cross-entropy over non-ignored labels (log-sum-exp form).

    Ignored positions are removed before any arithmetic, so their logits
    receive exactly zero gradient.
    """
    if logits.shape[:-1] != labels.shape:
        _fail("cross_entropy", logits.shape, labels.shape)
    flat = logits.reshape(-1, logits.shape[-1])
    lab = labels.reshape(-1)
    if ignore_index is not None:
        keep = lab != ignore_index
        flat, lab = flat[keep], lab[keep]
    if lab.numel() == 0:
        return logits.sum() * 0.0
    m = flat.max(dim=-1, keepdim=True).values.detach()
    lse = torch.log(torch.exp(flat - m).sum(dim=-1)) + m.squeeze(-1)
    picked = flat.gather(1, lab[:, None]).squeeze(1)
    return (lse - picked).mean()


def backward(loss: torch.Tensor) -> None:
    """Populate ``.grad`` on every leaf; a second call on the same loss is an error."""
    if loss.numel() != 1 or loss.ndim != 0:
        raise BackwardError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if getattr(loss, "_backward_done", False):
        raise BackwardError("backward already ran on this loss; rebuild the graph first")
    loss.backward()
    loss._backward_done = True


@dataclass
class GradCheckReport:
    max_rel_err: float = 0.0
    n_checked: int = 0
    entries: list[tuple[str, tuple[int, ...], float, float, float]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.n_checked == 0


def finite_diff_check(
    fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    n_coords: int = 500,
    step: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn()`` with central differences.

    ``fn`` must read ``params`` (leaf tensors with ``requires_grad``) and
    return a scalar. Coordinates are drawn uniformly over all parameter
    entries; relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    report = GradCheckReport()
    names = [k for k, p in params.items() if p.numel()]
    if not names:
        return report
    for p in params.values():
        p.grad = None
    loss = fn()
    backward(loss)
    analytic = {k: params[k].grad.detach().clone() for k in names}

    sizes = torch.tensor([params[k].numel() for k in names])
    total = int(sizes.sum())
    gen = torch.Generator().manual_seed(seed)
    picks = torch.randperm(total, generator=gen)[: min(n_coords, total)]
    offsets = torch.cumsum(sizes, 0) - sizes
    with torch.no_grad():
        for flat in picks.tolist():
            i = int(torch.searchsorted(offsets, torch.tensor(flat), right=True)) - 1
            name = names[i]
            p = params[name]
            idx = flat - int(offsets[i])
            view = p.view(-1)
            orig = view[idx].item()
            view[idx] = orig + step
            up = fn().item()
            view[idx] = orig - step
            down = fn().item()
            view[idx] = orig
            num = (up - down) / (2 * step)
            ana = analytic[name].view(-1)[idx].item()
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            coord = tuple(int(c) for c in torch.unravel_index(torch.tensor(idx), p.shape))
            report.entries.append((name, coord, ana, num, err))
            report.max_rel_err = max(report.max_rel_err, err)
    report.n_checked = len(report.entries)
    return report
