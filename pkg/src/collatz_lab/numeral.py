"""Exact integer arithmetic and base-b digit codecs.

Digit sequences are MSB-first at every public boundary. The transducers
below work LSB-first internally and reverse on the way out.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

SWEEP_BASES = (2, 3, 4, 6, 8, 9, 10, 12, 16, 18, 24, 27, 32, 36, 48)
EVEN_SWEEP_BASES = tuple(b for b in SWEEP_BASES if b % 2 == 0)
MAX_VALUE = 2**63 - 1


def _check_base(b: int) -> None:
    if b < 2:
        raise ValueError(f"base must be >= 2, got {b}")


def to_digits(n: int, b: int) -> list[int]:
    """Return the MSB-first base-``b`` digits of ``n`` (``[0]`` for zero)."""
    _check_base(b)
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    if n == 0:
        return [0]
    out = []
    while n:
        n, d = divmod(n, b)
        out.append(d)
    out.reverse()
    return out


def from_digits(digits: Sequence[int], b: int) -> int:
    """Inverse of :func:`to_digits`; leading zeros are accepted."""
    _check_base(b)
    n = 0
    for d in digits:
        if not 0 <= d < b:
            raise ValueError(f"digit {d} out of range for base {b}")
        n = n * b + d
    return n


def strip_leading_zeros(digits: Sequence[int]) -> list[int]:
    i = 0
    while i < len(digits) - 1 and digits[i] == 0:
        i += 1
    return list(digits[i:])


@dataclass(frozen=True)
class Numeral:
    value: int
    base: int
    digits: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "digits", tuple(to_digits(self.value, self.base)))

    @classmethod
    def from_digit_seq(cls, digits: Sequence[int], base: int) -> "Numeral":
        return cls(from_digits(digits, base), base)


def collatz_step(n: int) -> int:
    if n < 1:
        raise ValueError(f"collatz_step is defined for n >= 1, got {n}")
    return n // 2 if n % 2 == 0 else 3 * n + 1


def halve_digits_local(digits: Sequence[int], b: int) -> list[int]:
    """Halve an even number digit-by-digit using a two-digit window.

    Output digit i is ``d_i // 2 + (d_{i+1} % 2) * b // 2``; no carry is
    ever produced, so each position is computed independently.
    """
    _check_base(b)
    if b % 2:
        raise ValueError(f"local halving needs an even base, got {b}")
    if not digits:
        raise ValueError("empty digit sequence")
    if min(digits) < 0 or max(digits) >= b:
        raise ValueError(f"digit out of range for base {b}")
    if digits[-1] % 2:
        raise ValueError("local halving needs an even number")
    half = b // 2
    # MSB-first: output digit j reads input digits j and j-1 (the more significant neighbour)
    out = [digits[0] // 2]
    out += [d // 2 + (prev & 1) * half for prev, d in zip(digits, digits[1:])]
    return strip_leading_zeros(out)


@dataclass
class CarryTrace:
    """Output of the LSB-first ``3n+1`` transducer.

    ``out_digits`` is LSB-first. ``carries[i]`` is the carry leaving
    position ``i``.
    """

    out_digits: list[int]
    carries: list[int]

    @property
    def depth(self) -> int:
        return sum(1 for c in self.carries if c)

    def msb_first(self) -> list[int]:
        return strip_leading_zeros(self.out_digits[::-1])


def mul3_add1_digits(digits: Sequence[int], b: int) -> CarryTrace:
    _check_base(b)
    if not digits:
        raise ValueError("empty digit sequence")
    lsb = list(digits[::-1])
    out, carries = [], []
    carry = 1  # the +1 enters at position 0
    i = 0
    while i < len(lsb) or carry:
        d = lsb[i] if i < len(lsb) else 0
        if not 0 <= d < b:
            raise ValueError(f"digit {d} out of range for base {b}")
        t = 3 * d + carry
        out.append(t % b)
        carry = t // b
        carries.append(carry)
        i += 1
    return CarryTrace(out, carries)


def carry_depth(n: int, b: int) -> int:
    """Number of positions with a nonzero outgoing carry when computing 3n+1."""
    if n < 1 or n % 2 == 0:
        raise ValueError(f"carry depth is defined for odd n >= 1, got {n}")
    return mul3_add1_digits(to_digits(n, b), b).depth


def residue_target(n: int, k: int) -> int:
    """The k-th low-order bit of n; level 1 is parity."""
    if k < 1:
        raise ValueError(f"level k must be >= 1, got {k}")
    return (n >> (k - 1)) & 1


def gcd(a: int, b: int) -> int:
    if a < 1 or b < 1:
        raise ValueError(f"gcd inputs must be positive, got ({a}, {b})")
    while b:
        a, b = b, a % b
    return a


def digits_of_target(n: int, b: int) -> list[int]:
    return to_digits(collatz_step(n), b)
