import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from collatz_lab.numeral import (EVEN_SWEEP_BASES, SWEEP_BASES, CarryTrace, Numeral, carry_depth, collatz_step,
                                 from_digits, gcd, halve_digits_local, mul3_add1_digits, residue_target,
                                 strip_leading_zeros, to_digits)

bases = st.sampled_from(SWEEP_BASES)
even_bases = st.sampled_from(EVEN_SWEEP_BASES)


def carry_depth_closed_form(n: int, b: int) -> int:
    """Independent oracle: the carry out of position i is floor((3*(n mod b^(i+1)) + 1) / b^(i+1))."""
    depth, p = 0, b
    while p <= 3 * n + 1:
        if (3 * (n % p) + 1) // p:
            depth += 1
        p *= b
    return depth


class TestCodec:
    def test_paper_example_80_base_8(self):
        assert to_digits(80, 8) == [1, 2, 0]
        assert from_digits([1, 2, 0], 8) == 80

    def test_zero(self):
        assert to_digits(0, 10) == [0]

    def test_binary_10000_has_14_digits(self):
        assert len(to_digits(10_000, 2)) == 14
        assert to_digits(10_000, 2) == [int(c) for c in bin(10_000)[2:]]

    def test_from_digits_examples(self):
        assert from_digits([0, 0, 7], 10) == 7
        assert from_digits([1, 0, 1, 1], 2) == 11

    def test_rejects_bad_base_and_digits(self):
        with pytest.raises(ValueError):
            to_digits(5, 1)
        with pytest.raises(ValueError):
            from_digits([1, 8], 8)
        with pytest.raises(ValueError):
            to_digits(-1, 10)

    @given(st.integers(0, 10**7), bases)
    def test_round_trip(self, n, b):
        ds = to_digits(n, b)
        assert from_digits(ds, b) == n
        assert ds == [0] or ds[0] != 0
        assert all(0 <= d < b for d in ds)

    @given(st.integers(0, 10**7), st.integers(2, 48))
    def test_matches_positional_expansion(self, n, b):
        ds = to_digits(n, b)
        assert sum(d * b**i for i, d in enumerate(reversed(ds))) == n

    def test_numeral_dataclass(self):
        x = Numeral(80, 10)
        assert x.digits == (8, 0)
        assert Numeral.from_digit_seq([0, 1, 2, 0], 8).value == 80

    def test_strip_leading_zeros(self):
        assert strip_leading_zeros([0, 0, 3, 0]) == [3, 0]
        assert strip_leading_zeros([0, 0]) == [0]


class TestCollatzStep:
    @pytest.mark.parametrize("n,expected", [(6, 3), (5, 16), (80, 40), (1, 4)])
    def test_examples(self, n, expected):
        assert collatz_step(n) == expected

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            collatz_step(0)


class TestLocalHalving:
    def test_examples(self):
        assert halve_digits_local([8, 0], 10) == [4, 0]
        assert halve_digits_local([1, 4], 8) == [6]

    def test_rejects_odd_base_and_odd_n(self):
        with pytest.raises(ValueError):
            halve_digits_local([1, 2], 9)
        with pytest.raises(ValueError):
            halve_digits_local([1, 3], 10)

    @given(st.integers(1, 10**9), even_bases)
    def test_equals_exact_division(self, m, b):
        assert halve_digits_local(to_digits(2 * m, b), b) == to_digits(m, b)

    @given(st.integers(1, 10**9), even_bases)
    def test_each_output_digit_reads_only_two_neighbours(self, m, b):
        ds = to_digits(2 * m, b)
        lsb = ds[::-1] + [0]
        expected = [lsb[i] // 2 + (lsb[i + 1] % 2) * (b // 2) for i in range(len(ds))]
        out = halve_digits_local(ds, b)
        assert all(0 <= e < b for e in expected)  # no carry can be produced
        assert strip_leading_zeros(expected[::-1]) == out

    def test_exhaustive_small_range(self):
        for b in EVEN_SWEEP_BASES:
            for n in range(2, 5000, 2):
                assert halve_digits_local(to_digits(n, b), b) == to_digits(n // 2, b)


class TestTransducer:
    def test_n1_base10(self):
        tr = mul3_add1_digits([1], 10)
        assert tr.msb_first() == [4] and tr.depth == 0

    def test_n7_base10(self):
        tr = mul3_add1_digits([7], 10)
        assert tr.msb_first() == [2, 2] and tr.depth == 1
        assert tr.carries == [2, 0]

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            mul3_add1_digits([], 10)

    @given(st.integers(1, 10**12), bases)
    def test_reconstructs_3n_plus_1(self, n, b):
        tr = mul3_add1_digits(to_digits(n, b), b)
        assert from_digits(tr.out_digits[::-1], b) == 3 * n + 1
        assert tr.depth == sum(1 for c in tr.carries if c)
        assert all(0 <= c <= 3 for c in tr.carries)  # 3(b-1)+3 < 4b

    def test_carry_depth_examples(self):
        assert carry_depth(1, 10) == 0
        assert carry_depth(7, 10) == 1

    def test_carry_depth_rejects_even(self):
        with pytest.raises(ValueError):
            carry_depth(8, 10)

    def test_carry_depth_matches_closed_form_on_random_odds(self):
        rng = random.Random(0)
        for _ in range(10_000):
            n = 2 * rng.randrange(0, 5_000_000) + 1
            b = rng.choice(SWEEP_BASES)
            assert carry_depth(n, b) == carry_depth_closed_form(n, b)

    def test_depth_matches_hand_trace_base2(self):
        # 111b: t = 4, 5, 5 at the digits, then 2 and 1 past the top; 22 = 10110b
        tr = mul3_add1_digits(to_digits(7, 2), 2)
        assert tr.carries == [2, 2, 2, 1, 0]
        assert tr.depth == 4 == carry_depth_closed_form(7, 2)


def divisors(n: int) -> set[int]:
    out = set()
    for d in range(1, math.isqrt(n) + 1):
        if n % d == 0:
            out |= {d, n // d}
    return out


class TestResidueAndGcd:
    @pytest.mark.parametrize("n,k,bit", [(5, 1, 1), (6, 3, 1), (24, 4, 1), (24, 1, 0)])
    def test_examples(self, n, k, bit):
        assert residue_target(n, k) == bit

    @given(st.integers(1, 10**9), st.integers(1, 20))
    def test_definition(self, n, k):
        assert residue_target(n, k) == (n // 2 ** (k - 1)) % 2

    @given(st.integers(1, 10**9), even_bases)
    def test_parity_from_last_digit_in_even_base(self, n, b):
        assert residue_target(n, 1) == n % 2 == to_digits(n, b)[-1] % 2

    def test_gcd_examples(self):
        assert gcd(12, 8) == 4
        assert gcd(7, 1) == 1
        with pytest.raises(ValueError):
            gcd(0, 5)

    def test_gcd_matches_divisor_scan(self):
        rng = random.Random(1)
        for _ in range(10_000):
            a, b = rng.randint(1, 10_000), rng.randint(1, 10_000)
            assert gcd(a, b) == max(divisors(a) & divisors(b))


def test_carry_trace_depth_property():
    assert CarryTrace([0, 1], [1, 0, 2]).depth == 2
