"""Clipped activation quantization with a trainable clipping level.

The quantizer clips into [0, alpha], scales to [0, M] and rounds:

    pact(x) = (alpha / M) * round((M / alpha) * clip(x, 0, alpha))

With M = 2**WL - 1 this is exactly unsigned fixed-point quantization after a
change of scale.  The scale linking the two is the fix scaling factor

    eta_fix = 2**FL * alpha / (2**WL - 1)

so that pact(x) == eta_fix * fix_quant(x / eta_fix) for every x.  The FL in
eta_fix is pure bookkeeping: it relabels the mantissas without changing them,
which is what lets sibling layers share one clipping level while keeping
private fractional lengths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError
from .formats import FixFormat, fix_quant_unsigned, round_half_away


@dataclass(frozen=True)
class ClipParam:
    """Trainable clipping level alpha and the quantizer's integer scale M."""

    alpha: float
    scale_m: float = 255.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise DomainError(f"alpha must be positive, got {self.alpha}")
        if not self.scale_m > 0:
            raise DomainError(f"scale_m must be positive, got {self.scale_m}")


def pact(x, p: ClipParam):
    """Clipping quantizer: (alpha/M) * round((M/alpha) * clip(x, 0, alpha))."""
    clipped = np.clip(np.asarray(x, dtype=np.float64), 0.0, p.alpha)
    return (p.alpha / p.scale_m) * round_half_away((p.scale_m / p.alpha) * clipped)


def eta_fix(p: ClipParam, fmt: FixFormat) -> float:
    """Fix scaling factor 2**FL * alpha / (2**WL - 1)."""
    return (2.0**fmt.fl) * p.alpha / (2.0**fmt.wl - 1.0)


def pact_via_fixquant(x, p: ClipParam, fmt: FixFormat):
    """Rewrite of pact as scaled fixed-point quantization.

    Requires the typical setting M = 2**WL - 1; equals pact(x, p) up to
    float64 rounding of the two evaluation orders.
    """
    if p.scale_m != 2.0**fmt.wl - 1.0:
        raise ContractError(
            f"identity requires M == 2**WL - 1, got M={p.scale_m}, WL={fmt.wl}"
        )
    eta = eta_fix(p, fmt)
    return eta * fix_quant_unsigned(np.asarray(x, dtype=np.float64) / eta, fmt)


def pact_ste_grad(x, p: ClipParam):
    """Straight-through gradient masks of the clipping quantizer.

    Returns (passthrough mask for d/dx, indicator for d/dalpha):
    d/dx = 1 on 0 < x < alpha, else 0; d/dalpha = 1 on x >= alpha, else 0.
    """
    x = np.asarray(x, dtype=np.float64)
    mask = ((x > 0.0) & (x < p.alpha)).astype(np.float64)
    alpha_ind = (x >= p.alpha).astype(np.float64)
    return mask, alpha_ind
