"""Tests for the Q-format kernels: quantization maps, mantissa algebra, shifts."""

from fractions import Fraction

import numpy as np
import pytest

from fxpquant.errors import FormatError
from fxpquant.formats import (
    FixFormat,
    FixTensor,
    accumulator_format,
    fix_quant,
    fix_quant_signed,
    fix_quant_unsigned,
    from_mantissa,
    mul_accumulate,
    rescale_shift,
    round_half_away,
    shift_round_half_away,
    to_mantissa,
)

U84 = FixFormat(8, 4, signed=False)
U88 = FixFormat(8, 8, signed=False)
U80 = FixFormat(8, 0, signed=False)
S84 = FixFormat(8, 4, signed=True)
S87 = FixFormat(8, 7, signed=True)


class TestFixFormat:
    def test_valid_ranges(self):
        assert FixFormat(8, 8, signed=False).mantissa_max == 255
        assert FixFormat(8, 7, signed=True).mantissa_min == -127
        assert FixFormat(2, 0, signed=False).mantissa_max == 3
        assert FixFormat(32, 31, signed=True).mantissa_max == 2**31 - 1

    @pytest.mark.parametrize(
        "wl,fl,signed",
        [
            (8, 9, False),   # unsigned FL > WL
            (8, 8, True),    # signed FL > WL - 1
            (8, -1, False),
            (1, 0, False),   # WL below 2
            (33, 0, False),  # WL above 32
        ],
    )
    def test_invalid_formats_rejected(self, wl, fl, signed):
        with pytest.raises(FormatError):
            FixFormat(wl, fl, signed=signed)

    def test_signed_range_is_symmetric(self):
        fmt = FixFormat(8, 0, signed=True)
        assert (fmt.mantissa_min, fmt.mantissa_max) == (-127, 127)


class TestRounding:
    def test_ties_away_from_zero(self):
        x = np.array([0.5, -0.5, 1.5, -1.5, 2.5, -2.5, 127.5])
        expect = np.array([1.0, -1.0, 2.0, -2.0, 3.0, -3.0, 128.0])
        assert np.array_equal(round_half_away(x), expect)

    def test_matches_plain_rounding_off_ties(self):
        rng = np.random.default_rng(7)
        x = rng.normal(0, 100, 10_000)
        # keep away from exact .5 boundaries
        x = x[np.abs(np.abs(x - np.floor(x)) - 0.5) > 1e-6]
        assert np.array_equal(round_half_away(x), np.round(x))


class TestFixQuant:
    def test_zero_is_fixed_point(self):
        assert fix_quant_unsigned(0.0, U84) == 0.0

    def test_saturates_at_top(self):
        assert fix_quant_unsigned(300.0, U80) == 255.0

    def test_hand_evaluated_unsigned(self):
        # round(0.3 * 256) = 77
        assert fix_quant_unsigned(0.3, U88) == 77.0 / 256.0

    def test_negative_saturation_signed(self):
        assert fix_quant_signed(-10.0, S84) == -127.0 / 16.0

    def test_hand_evaluated_signed(self):
        assert fix_quant_signed(-5.0, S84) == -5.0
        # round(0.0312 * 128) = 4
        assert fix_quant_signed(0.0312, S87) == 4.0 / 128.0

    def test_signedness_enforced(self):
        with pytest.raises(FormatError):
            fix_quant_unsigned(1.0, S84)
        with pytest.raises(FormatError):
            fix_quant_signed(1.0, U84)

    @pytest.mark.parametrize("fmt", [U84, U88, U80, S84, S87, FixFormat(6, 3, True)])
    def test_idempotent(self, fmt):
        rng = np.random.default_rng(11)
        x = rng.normal(0, 37.0, 5_000)
        q = fix_quant(x, fmt)
        assert np.array_equal(fix_quant(q, fmt), q)

    @pytest.mark.parametrize("fmt", [U84, S84, S87])
    def test_monotone(self, fmt):
        rng = np.random.default_rng(13)
        x = np.sort(rng.normal(0, 10.0, 5_000))
        q = fix_quant(x, fmt)
        assert np.all(np.diff(q) >= 0)

    @pytest.mark.parametrize("fmt", [U84, U88, S84, S87])
    def test_range(self, fmt):
        rng = np.random.default_rng(17)
        q = fix_quant(rng.normal(0, 50.0, 5_000), fmt)
        assert q.min() >= fmt.value_min and q.max() <= fmt.value_max

    @pytest.mark.parametrize("fmt", [U84, U88, S84, S87])
    def test_resolution_inside_range(self, fmt):
        rng = np.random.default_rng(19)
        x = rng.uniform(fmt.value_min, fmt.value_max, 5_000)
        q = fix_quant(x, fmt)
        assert np.max(np.abs(q - x)) <= 2.0 ** (-fmt.fl - 1) + 1e-12


class TestMantissa:
    def test_examples(self):
        assert to_mantissa(1.0, U84) == 16
        assert from_mantissa(255, U88) == 255.0 / 256.0
        assert to_mantissa(0.0, S87) == 0

    @pytest.mark.parametrize("fmt", [U84, U88, S84, S87])
    def test_roundtrip_equals_fix_quant(self, fmt):
        rng = np.random.default_rng(23)
        x = rng.normal(0, 20.0, 5_000)
        assert np.array_equal(from_mantissa(to_mantissa(x, fmt), fmt), fix_quant(x, fmt))

    def test_from_mantissa_saturates(self):
        assert from_mantissa(999, U80) == 255.0
        assert from_mantissa(-999, FixFormat(8, 0, True)) == -127.0

    def test_fixtensor_rejects_out_of_range(self):
        with pytest.raises(FormatError):
            FixTensor(np.array([256]), U80)

    def test_fixtensor_values(self):
        t = FixTensor.from_real([0.5, 1.0], U84)
        assert np.array_equal(t.mantissa, [8, 16])
        assert np.array_equal(t.values, [0.5, 1.0])


class TestMulAccumulate:
    def test_hand_product(self):
        a = FixTensor(np.array(16), U84)
        b = FixTensor(np.array(8), U84)
        acc = mul_accumulate(a, b)
        assert acc.mantissa == 128
        assert acc.fmt == FixFormat(32, 8, signed=True)
        assert acc.values == 0.5

    def test_zero_annihilates(self):
        a = FixTensor(np.zeros(4, dtype=int), U84)
        b = FixTensor(np.array([1, 50, 255, 7]), U88)
        assert np.array_equal(mul_accumulate(a, b).mantissa, np.zeros(4, dtype=int))

    def test_extreme_signed_product(self):
        a = FixTensor(np.array(-127), S87)
        b = FixTensor(np.array(127), S87)
        acc = mul_accumulate(a, b)
        assert acc.mantissa == -16129
        assert acc.fmt.fl == 14

    def test_wide_operands_rejected(self):
        wide = FixTensor(np.array(5), FixFormat(16, 4, signed=True))
        with pytest.raises(FormatError):
            mul_accumulate(wide, wide)


class TestRescaleShift:
    def test_exact_division(self):
        acc = FixTensor(np.array(128), FixFormat(32, 8, True))
        out = rescale_shift(acc, U84)
        assert out.mantissa == 8 and out.values == 0.5

    def test_zero(self):
        acc = FixTensor(np.array(0), FixFormat(32, 9, True))
        assert rescale_shift(acc, U84).mantissa == 0

    def test_hand_rounding(self):
        # 37 / 2**(6-4) = 9.25 -> 9
        acc = FixTensor(np.array(37), FixFormat(32, 6, True))
        assert rescale_shift(acc, U84).mantissa == 9

    def test_half_away_ties(self):
        acc = FixTensor(np.array([6, -6, 10, -10]), FixFormat(32, 2, True))
        out = rescale_shift(acc, FixFormat(8, 0, True))
        # 1.5 -> 2, -1.5 -> -2, 2.5 -> 3, -2.5 -> -3
        assert np.array_equal(out.mantissa, [2, -2, 3, -3])

    def test_left_shift_exact(self):
        acc = FixTensor(np.array(3), FixFormat(32, 2, True))
        out = rescale_shift(acc, FixFormat(8, 4, True))
        assert out.mantissa == 12

    def test_saturates(self):
        acc = FixTensor(np.array(10_000), FixFormat(32, 0, True))
        assert rescale_shift(acc, U80).mantissa == 255


class TestMantissaDomainEquivalence:
    """to_mantissa -> mul_accumulate -> rescale_shift == real multiply-then-quantize."""

    @pytest.mark.parametrize(
        "fa,fb,target",
        [
            (S87, S87, FixFormat(8, 7, True)),
            (S84, U88, FixFormat(8, 6, True)),
            (U84, U84, FixFormat(8, 4, False)),
            (S84, U80, FixFormat(8, 2, True)),
        ],
    )
    def test_exhaustive_int8_pairs(self, fa, fb, target):
        ma = np.arange(fa.mantissa_min, fa.mantissa_max + 1)
        mb = np.arange(fb.mantissa_min, fb.mantissa_max + 1)
        ga, gb = np.meshgrid(ma, mb, indexing="ij")
        ta, tb = FixTensor(ga, fa), FixTensor(gb, fb)

        int_path = rescale_shift(mul_accumulate(ta, tb), target)
        real_product = ta.values * tb.values  # exact in float64
        real_path = to_mantissa(real_product, target)
        assert np.array_equal(int_path.mantissa, real_path)


class TestExactRationalOracle:
    """fix_quant cross-checked against integer/rational arithmetic.

    Float64 inputs are exact rationals, so the independent oracle can decide
    every rounding, including ties, without any floating point.
    """

    @staticmethod
    def _fix_quant_exact(x: Fraction, fmt: FixFormat) -> Fraction:
        scaled = x * 2**fmt.fl
        scaled = min(max(scaled, Fraction(fmt.mantissa_min)), Fraction(fmt.mantissa_max))
        n, d = scaled.numerator, scaled.denominator
        q, r = divmod(abs(n), d)
        mag = q + (1 if 2 * r >= d else 0)
        return Fraction(mag if n >= 0 else -mag, 2**fmt.fl)

    @pytest.mark.parametrize(
        "fmt",
        [U84, U88, U80, S84, S87, FixFormat(3, 1, True), FixFormat(32, 20, True),
         FixFormat(16, 12, False)],
    )
    def test_matches_float_path(self, fmt):
        rng = np.random.default_rng(41)
        span = max(abs(fmt.value_min), fmt.value_max) * 2.5
        xs = np.concatenate([
            rng.uniform(-span, span, 400),
            rng.normal(0, fmt.scale * 4, 400),  # dense around the grid
        ])
        for x in xs:
            got = float(fix_quant(x, fmt))
            want = self._fix_quant_exact(Fraction(float(x)), fmt)
            assert Fraction(got) == want, (x, fmt)

    @pytest.mark.parametrize("fmt", [U84, S84, S87])
    def test_ties_decided_identically(self, fmt):
        # arguments landing exactly on k + 1/2 in the scaled domain
        ks = np.arange(fmt.mantissa_min, fmt.mantissa_max, 7)
        xs = (ks + 0.5) * fmt.scale  # exact dyadics in float64
        for x in xs:
            got = float(fix_quant(x, fmt))
            want = self._fix_quant_exact(Fraction(float(x)), fmt)
            assert Fraction(got) == want, x


def test_shift_round_half_away_matches_float_reference():
    rng = np.random.default_rng(31)
    m = rng.integers(-(2**30), 2**30, 20_000)
    for s in (0, 1, 3, 7, 12):
        ref = round_half_away(m / 2.0**s).astype(np.int64)
        assert np.array_equal(shift_round_half_away(m, s), ref)


def test_accumulator_format_adds_fls():
    assert accumulator_format(U84, S87) == FixFormat(32, 11, signed=True)
