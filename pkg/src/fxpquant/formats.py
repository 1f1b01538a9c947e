"""Q-format fixed-point representation and quantization kernels.

A fixed-point number is an integer mantissa interpreted against a format
(WL, FL): word length WL bits in total, FL bits to the right of the binary
point.  The represented real value is ``mantissa / 2**FL`` exactly.

Quantization maps a real x onto the format's grid:

    unsigned:  round(clip(x * 2**FL, 0, 2**WL - 1)) / 2**FL
    signed:    round(clip(x * 2**FL, -(2**(WL-1) - 1), 2**(WL-1) - 1)) / 2**FL

The signed range is symmetric: the most negative two's-complement code is
never produced.  Rounding is round-half-away-from-zero everywhere, in both
the real-domain reference and the integer executor, so that the two can be
compared for exact equality.
"""

from __future__ import annotations

import operator
from dataclasses import dataclass

import numpy as np

from .errors import AccumulatorOverflowError, FormatError

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1


@dataclass(frozen=True)
class FixFormat:
    """Fixed-point format: word length, fractional length, signedness."""

    word_length: int = 8
    fractional_length: int = 0
    signed: bool = False

    def __post_init__(self):
        try:
            wl = operator.index(self.word_length)
            fl = operator.index(self.fractional_length)
        except TypeError:
            raise FormatError(
                f"word/fractional lengths must be integers, got "
                f"{self.word_length!r}, {self.fractional_length!r}"
            ) from None
        object.__setattr__(self, "word_length", wl)
        object.__setattr__(self, "fractional_length", fl)
        object.__setattr__(self, "signed", bool(self.signed))
        if not 2 <= wl <= 32:
            raise FormatError(f"word_length must be in [2, 32], got {wl}")
        hi = wl - 1 if self.signed else wl
        if not 0 <= fl <= hi:
            kind = "signed" if self.signed else "unsigned"
            raise FormatError(f"{kind} format requires 0 <= FL <= {hi}, got FL={fl}")

    @property
    def wl(self) -> int:
        return self.word_length

    @property
    def fl(self) -> int:
        return self.fractional_length

    @property
    def scale(self) -> float:
        """Value of one mantissa step: 2**-FL."""
        return 2.0 ** -self.fractional_length

    @property
    def mantissa_min(self) -> int:
        return -(2 ** (self.word_length - 1) - 1) if self.signed else 0

    @property
    def mantissa_max(self) -> int:
        return 2 ** (self.word_length - 1) - 1 if self.signed else 2**self.word_length - 1

    @property
    def value_min(self) -> float:
        return self.mantissa_min * self.scale

    @property
    def value_max(self) -> float:
        return self.mantissa_max * self.scale

    def describe(self) -> str:
        sign = "s" if self.signed else "u"
        return f"{sign}({self.word_length},{self.fractional_length})"


def round_half_away(x):
    """Round to nearest integer, ties away from zero.  Works on scalars and arrays."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def fix_quant(x, fmt: FixFormat):
    """Quantize real value(s) onto the grid of ``fmt`` (saturating)."""
    scaled = np.asarray(x, dtype=np.float64) * (2.0**fmt.fl)
    clipped = np.clip(scaled, fmt.mantissa_min, fmt.mantissa_max)
    return round_half_away(clipped) * fmt.scale


def fix_quant_unsigned(x, fmt: FixFormat):
    """Quantization map for unsigned formats: clip into [0, 2**WL - 1]."""
    if fmt.signed:
        raise FormatError(f"expected unsigned format, got {fmt.describe()}")
    return fix_quant(x, fmt)


def fix_quant_signed(x, fmt: FixFormat):
    """Quantization map for signed formats: symmetric clip, -2**(WL-1) never produced."""
    if not fmt.signed:
        raise FormatError(f"expected signed format, got {fmt.describe()}")
    return fix_quant(x, fmt)


def to_mantissa(x, fmt: FixFormat) -> np.ndarray:
    """Integer mantissa(s) of the quantized value(s): round(clip(x * 2**FL))."""
    scaled = np.asarray(x, dtype=np.float64) * (2.0**fmt.fl)
    clipped = np.clip(scaled, fmt.mantissa_min, fmt.mantissa_max)
    return round_half_away(clipped).astype(np.int64)


def from_mantissa(m, fmt: FixFormat):
    """Real value of integer mantissa(s); saturates out-of-range mantissas."""
    m = np.clip(np.asarray(m, dtype=np.int64), fmt.mantissa_min, fmt.mantissa_max)
    return m.astype(np.float64) * fmt.scale


class FixTensor:
    """Integer mantissas plus a shared format.  Value = mantissa / 2**FL, exactly."""

    __slots__ = ("mantissa", "fmt")

    def __init__(self, mantissa, fmt: FixFormat):
        m = np.asarray(mantissa, dtype=np.int64)
        if m.size and (m.min() < fmt.mantissa_min or m.max() > fmt.mantissa_max):
            raise FormatError(
                f"mantissas outside {fmt.describe()} range "
                f"[{fmt.mantissa_min}, {fmt.mantissa_max}]"
            )
        self.mantissa = m
        self.fmt = fmt

    @classmethod
    def from_real(cls, x, fmt: FixFormat) -> "FixTensor":
        return cls(to_mantissa(x, fmt), fmt)

    @property
    def values(self) -> np.ndarray:
        return self.mantissa.astype(np.float64) * self.fmt.scale

    @property
    def shape(self):
        return self.mantissa.shape

    def __eq__(self, other):
        return (
            isinstance(other, FixTensor)
            and self.fmt == other.fmt
            and np.array_equal(self.mantissa, other.mantissa)
        )

    def __repr__(self):
        return f"FixTensor({self.mantissa!r}, {self.fmt.describe()})"


# A scalar is a 0-d FixTensor.
FixScalar = FixTensor


def accumulator_format(fmt_a: FixFormat, fmt_b: FixFormat) -> FixFormat:
    """32-bit signed accumulator format for products of fmt_a and fmt_b operands."""
    return FixFormat(32, fmt_a.fl + fmt_b.fl, signed=True)


def mul_accumulate(a: FixTensor, b: FixTensor) -> FixTensor:
    """Exact integer product of 8-bit operands into a 32-bit accumulator.

    The accumulator carries FL = FL_a + FL_b.  Products of valid 8-bit
    mantissas can never overflow 32 bits on their own; the check guards the
    contract for any caller that accumulates into the result.
    """
    for fmt in (a.fmt, b.fmt):
        if fmt.word_length > 8:
            raise FormatError(f"mul_accumulate operands must be <= 8-bit, got {fmt.describe()}")
    prod = a.mantissa * b.mantissa
    if prod.size and (prod.min() < INT32_MIN or prod.max() > INT32_MAX):
        raise AccumulatorOverflowError("product exceeds the 32-bit accumulator")
    return FixTensor(prod, accumulator_format(a.fmt, b.fmt))


def shift_round_half_away(m: np.ndarray, shift: int) -> np.ndarray:
    """Divide mantissas by 2**shift, rounding half away from zero, in pure ints.

    Negative shift is an exact left shift.  Implemented as add-half-then-shift
    on nonnegative values and mirrored for negatives, matching round_half_away
    on the represented rationals bit for bit.
    """
    m = np.asarray(m, dtype=np.int64)
    if shift < 0:
        return m << (-shift)
    if shift == 0:
        return m.copy()
    half = np.int64(1) << np.int64(shift - 1)
    mag = (np.abs(m) + half) >> np.int64(shift)
    return np.sign(m) * mag


def rescale_shift(acc: FixTensor, target: FixFormat) -> FixTensor:
    """Move an accumulator onto a target grid by shift-with-rounding, saturating."""
    shifted = shift_round_half_away(acc.mantissa, acc.fmt.fl - target.fl)
    return FixTensor(np.clip(shifted, target.mantissa_min, target.mantissa_max), target)
