"""Probes, accuracy metrics and representation diagnostics."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy import stats

from collatz_lab.model import EncoderOutput
from collatz_lab.numeral import collatz_step, residue_target


# ---------------------------------------------------------------------------
# accuracy metrics
# ---------------------------------------------------------------------------


def clopper_pearson(k: int, n: int, alpha: float = 0.05) -> tuple[float, float]:
    """Exact two-sided binomial interval from Beta quantiles."""
    if not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
    if n == 0:
        return 0.0, 1.0
    lo = 0.0 if k == 0 else float(stats.beta.ppf(alpha / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - alpha / 2, k + 1, n - k))
    return lo, hi


@dataclass
class Proportion:
    k: int
    n: int
    lo: float
    hi: float

    @property
    def value(self) -> float:
        return self.k / self.n if self.n else float("nan")


def acc_seq(predictions: Sequence[Sequence[int]], targets: Sequence[Sequence[int]],
            operands: Sequence[int] | None = None, branch: str | None = None,
            alpha: float = 0.05) -> Proportion:
    """Exact full-sequence match rate, optionally restricted to one parity branch."""
    if len(predictions) != len(targets):
        raise ValueError(f"{len(predictions)} predictions vs {len(targets)} targets")
    if branch is not None:
        if operands is None or len(operands) != len(targets):
            raise ValueError("branch filtering needs one operand per target")
        want = 0 if branch == "even" else 1
        idx = [i for i, n in enumerate(operands) if n % 2 == want]
    else:
        idx = range(len(targets))
    k = sum(1 for i in idx if list(predictions[i]) == list(targets[i]))
    n = len(idx)
    lo, hi = clopper_pearson(k, n, alpha)
    return Proportion(k, n, lo, hi)


def digit_accuracy(predictions: Sequence[Sequence[int]], targets: Sequence[Sequence[int]]) -> float:
    """Per-digit match rate; positions beyond the shorter sequence count as wrong."""
    if len(predictions) != len(targets):
        raise ValueError(f"{len(predictions)} predictions vs {len(targets)} targets")
    hit = total = 0
    for p, t in zip(predictions, targets):
        hit += sum(1 for a, b in zip(p, t) if a == b)
        total += max(len(p), len(t))
    return hit / total if total else float("nan")


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


def pool_hidden(enc: EncoderOutput, layer: int = -1) -> torch.Tensor:
    """Mean over non-PAD positions of one layer's states -> (B, d)."""
    h = enc.hidden[layer]
    keep = (~enc.pad_mask).to(h.dtype)[..., None]
    return (h * keep).sum(1) / keep.sum(1)


@dataclass
class ProbeModel:
    w: np.ndarray  # in standardized feature space
    bias: float
    mean: np.ndarray
    std: np.ndarray  # 0 marks a constant feature
    l2: float
    target: str = ""
    n_iter: int = 0
    grad_norm: float = 0.0

    def _standardize(self, x: np.ndarray) -> np.ndarray:
        safe = np.where(self.std > 0, self.std, 1.0)
        return np.where(self.std > 0, (x - self.mean) / safe, 0.0)

    def decision(self, x: np.ndarray) -> np.ndarray:
        return self._standardize(np.asarray(x, dtype=np.float64)) @ self.w + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (self.decision(x) > 0).astype(np.int64)

    @property
    def direction(self) -> np.ndarray:
        """Unit direction of the probe in standardized coordinates."""
        n = np.linalg.norm(self.w)
        return self.w / n if n > 0 else self.w

    @property
    def raw_direction(self) -> np.ndarray:
        """Unit direction in the original feature space (the probe's normal vector there)."""
        safe = np.where(self.std > 0, self.std, np.inf)
        v = self.w / safe
        n = np.linalg.norm(v)
        return v / n if n > 0 else v


@dataclass
class ProbeResult:
    probe: ProbeModel
    accuracy: float
    n_test: int
    majority_rate: float


def _stratified_split(y: np.ndarray, test_frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(test_frac * len(idx)))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def _logistic_newton(x: np.ndarray, y: np.ndarray, l2: float, tol: float, max_iter: int):
    """Minimize sum log-loss + l2/2 |w|^2 (bias unpenalized) by damped Newton steps."""
    n, d = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    reg = np.full(d + 1, l2)
    reg[-1] = 0.0
    theta = np.zeros(d + 1)

    def objective(th):
        z = xa @ th
        return float(np.sum(np.logaddexp(0.0, z) - y * z) + 0.5 * np.sum(reg * th * th))

    f = objective(theta)
    gnorm = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        z = xa @ theta
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        g = xa.T @ (p - y) + reg * theta
        gnorm = float(np.linalg.norm(g)) / n
        if gnorm < tol:
            break
        hess = (xa * (p * (1 - p))[:, None]).T @ xa + np.diag(reg) + 1e-10 * np.eye(d + 1)
        step = np.linalg.solve(hess, g)
        t = 1.0
        while True:
            cand = theta - t * step
            fc = objective(cand)
            if fc <= f - 1e-4 * t * float(g @ step) or t < 1e-10:
                break
            t *= 0.5
        theta, f = cand, fc
    return theta[:-1], float(theta[-1]), it, gnorm


def fit_probe(features, targets, l2: float = 1.0, test_frac: float = 0.2, seed: int = 0,
              tol: float = 1e-6, max_iter: int = 100, target: str = "",
              const_tol: float = 1e-6) -> ProbeResult:
    """L2 logistic probe on standardized features with a stratified 80/20 split.

    Features whose train-split std is below ``const_tol`` are treated as
    constant and contribute nothing.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("features must be (N, d) aligned with targets")
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("probe targets contain a single class")
    tr, te = _stratified_split(y, test_frac, seed)
    if min(int((y[tr] == c).sum()) for c in classes) < 2:
        raise ValueError("need at least 2 training examples per class")
    mean = x[tr].mean(0)
    std = x[tr].std(0)
    std = np.where(std < const_tol, 0.0, std)
    probe = ProbeModel(np.zeros(x.shape[1]), 0.0, mean, std, l2, target)
    xs = probe._standardize(x)
    w, b, it, gnorm = _logistic_newton(xs[tr], y[tr], l2, tol, max_iter)
    probe.w, probe.bias, probe.n_iter, probe.grad_norm = w, b, it, gnorm
    pred = probe.predict(x[te])
    acc = float((pred == y[te]).mean()) if len(te) else float("nan")
    maj = float(max((y[te] == c).mean() for c in classes)) if len(te) else float("nan")
    return ProbeResult(probe, acc, len(te), maj)


def residue_labels(ns: Sequence[int], k: int) -> np.ndarray:
    return np.array([residue_target(int(n), k) for n in ns], dtype=np.int64)


def conditional_probe(features, ns: Sequence[int], k: int, l2: float = 1.0, seed: int = 0, **kw) -> float:
    """Accuracy on bit k within each class of n mod 2^(k-1), weighted by class size.

    A class whose k-th bit is constant is scored as perfectly predictable.
    """
    if k < 2:
        raise ValueError("conditional probes need k >= 2")
    x = np.asarray(features, dtype=np.float64)
    ns = np.asarray(ns, dtype=np.int64)
    m = 2 ** (k - 1)
    y = residue_labels(ns, k)
    total = 0.0
    weight = 0
    for r in range(m):
        idx = np.flatnonzero(ns % m == r)
        if len(idx) == 0:
            raise ValueError(f"coarse residue class {r} mod {m} is empty")
        if len(np.unique(y[idx])) < 2:
            total += len(idx)
            weight += len(idx)
            continue
        res = fit_probe(x[idx], y[idx], l2=l2, seed=seed, target=f"a{k}|r{r}", **kw)
        total += res.accuracy * len(idx)
        weight += len(idx)
    return total / weight


# ---------------------------------------------------------------------------
# representation diagnostics
# ---------------------------------------------------------------------------


@dataclass
class PRResult:
    value: float
    degenerate: bool = False


def participation_ratio(states) -> PRResult:
    """(sum lambda)^2 / sum lambda^2 of the centered covariance.

    Computed as trace(C)^2 / ||C||_F^2, which equals the eigenvalue form
    without an eigendecomposition.
    """
    x = np.asarray(states, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("need an (N >= 2, d) state matrix")
    xc = x - x.mean(0)
    cov = xc.T @ xc / (len(x) - 1) if x.shape[1] <= len(x) else None
    if cov is None:
        # Gram trick: nonzero spectrum of X^T X equals that of X X^T
        cov = xc @ xc.T / (len(x) - 1)
    tr = float(np.trace(cov))
    fro2 = float(np.sum(cov * cov))
    if fro2 == 0.0:
        return PRResult(1.0, True)
    return PRResult(tr * tr / fro2)


def scope_vector(params, scope: str = "full") -> torch.Tensor:
    prefix = {"full": "", "encoder": "enc.", "decoder": "dec."}[scope]
    return torch.cat([p.detach().double().reshape(-1) for k, p in params.items() if k.startswith(prefix)])


def checkpoint_cosine(params_a, params_b, scope: str = "full") -> float:
    if list(params_a) != list(params_b) or any(params_a[k].shape != params_b[k].shape for k in params_a):
        raise ValueError("checkpoints have different parameter layouts")
    a, b = scope_vector(params_a, scope), scope_vector(params_b, scope)
    denom = float(torch.linalg.vector_norm(a) * torch.linalg.vector_norm(b))
    if denom == 0:
        return 0.0
    return float(torch.clamp((a @ b) / denom, -1.0, 1.0))


def _suffix(n: int, b: int, window: int) -> tuple[int, ...]:
    out = []
    for _ in range(window):
        n, d = divmod(n, b)
        out.append(d)
    return tuple(out)


def local_predictability(b: int, branch: str, lo: int = 1, hi: int = 10_000, window: int = 2) -> float:
    """Plug-in conditional entropy (bits) of T(n)'s last digits given n's last digits."""
    want = 0 if branch == "even" else 1
    joint: Counter = Counter()
    marg: Counter = Counter()
    for n in range(lo, hi + 1):
        if n % 2 != want:
            continue
        x = _suffix(n, b, window)
        y = _suffix(collatz_step(n), b, window)
        joint[(x, y)] += 1
        marg[x] += 1
    total = sum(marg.values())
    if total == 0:
        raise ValueError("no integers on this branch in the range")
    h = 0.0
    for (x, _), c in joint.items():
        h -= (c / total) * math.log2(c / marg[x])
    return max(h, 0.0)


@dataclass
class PlateauReport:
    spans: list[tuple[int, int]]  # inclusive index ranges into the series
    transition_step: int | None
    longest: tuple[int, int] | None


def plateau_detect(steps: Sequence[int], acc: Sequence[float], window: int, epsilon: float) -> PlateauReport:
    """Windows with range < epsilon, merged into spans; transition follows the longest one."""
    acc = list(acc)
    if len(acc) < window or window < 1:
        raise ValueError("series shorter than window")
    flat = [max(acc[i:i + window]) - min(acc[i:i + window]) < epsilon for i in range(len(acc) - window + 1)]
    spans: list[tuple[int, int]] = []
    for i, ok in enumerate(flat):
        if not ok:
            continue
        end = i + window - 1
        if spans and i <= spans[-1][1]:
            spans[-1] = (spans[-1][0], end)
        else:
            spans.append((i, end))
    if not spans:
        return PlateauReport([], None, None)
    longest = max(spans, key=lambda s: (s[1] - s[0], -s[0]))
    top = max(acc[longest[0]:longest[1] + 1])
    transition = None
    for i in range(longest[1] + 1, len(acc)):
        if acc[i] > top + 5 * epsilon:
            transition = steps[i]
            break
    return PlateauReport(spans, transition, longest)


def is_converged(accs: Sequence[float], window: int = 5, tol: float = 0.005) -> bool:
    """True when the last ``window`` accuracies vary by less than ``tol``."""
    if len(accs) < window:
        return False
    tail = accs[-window:]
    return max(tail) - min(tail) < tol


def converged_index(accs: Sequence[float], window: int = 5, tol: float = 0.005) -> int | None:
    for i in range(window, len(accs) + 1):
        if is_converged(accs[:i], window, tol):
            return i - 1
    return None


def steps_to_threshold(steps: Sequence[int], accs: Sequence[float], threshold: float) -> int | None:
    for s, a in zip(steps, accs):
        if a >= threshold:
            return s
    return None


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------


@dataclass
class MetricRecord:
    step: int
    loss: float | None = None
    n_eval: int = 0
    n_correct: int = 0
    acc: float = 0.0
    acc_lo: float = 0.0
    acc_hi: float = 0.0
    n_even: int = 0
    n_even_correct: int = 0
    acc_even: float | None = None
    acc_even_lo: float | None = None
    acc_even_hi: float | None = None
    n_odd: int = 0
    n_odd_correct: int = 0
    acc_odd: float | None = None
    acc_odd_lo: float | None = None
    acc_odd_hi: float | None = None
    digit_acc: float = 0.0
    probe_acc: dict = field(default_factory=dict)  # "layer:target" -> accuracy
    erased_acc: float | None = None
    delta_erase: float | None = None
    participation_ratio: float | None = None
    ckpt_cosine: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricRecord":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown MetricRecord fields {sorted(unknown)}")
        return cls(**d)


def score_predictions(step: int, predictions, targets, operands: Sequence[int] | None,
                      loss: float | None = None) -> MetricRecord:
    """Build the accuracy part of a MetricRecord; operands=None skips branch splits."""
    overall = acc_seq(predictions, targets)
    rec = MetricRecord(step=step, loss=loss, n_eval=overall.n, n_correct=overall.k,
                       acc=overall.value, acc_lo=overall.lo, acc_hi=overall.hi,
                       digit_acc=digit_accuracy(predictions, targets))
    if operands is not None:
        for br in ("even", "odd"):
            p = acc_seq(predictions, targets, operands, br)
            setattr(rec, f"n_{br}", p.n)
            setattr(rec, f"n_{br}_correct", p.k)
            if p.n:
                setattr(rec, f"acc_{br}", p.value)
                setattr(rec, f"acc_{br}_lo", p.lo)
                setattr(rec, f"acc_{br}_hi", p.hi)
    return rec
