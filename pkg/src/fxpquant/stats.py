"""Statistical analysis of fixed-point representability.

Sweeps zero-mean Gaussian samples (rectified for the unsigned case) through
every candidate fractional length of a word length and measures the relative
quantization error, defined as noise power over signal power:

    relative_error(v, fmt) = sum((fix_quant(v) - v)**2) / sum(v**2)

From the per-sigma argmin the sweep recovers the threshold standard
deviations at which the optimal FL steps down, which follow the closed-form
selector

    signed:   FL* = floor(log2(40 / sigma))
    unsigned: FL* = floor(log2(70 / sigma))

clamped into the legal FL range of the format.  The constants are calibrated
for 8-bit words.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError
from .formats import FixFormat, fix_quant

SIGNED_SELECTOR_CONST = 40.0
UNSIGNED_SELECTOR_CONST = 70.0


def default_sigma_grid(n_points: int = 200) -> np.ndarray:
    """Log-spaced sigma grid spanning [1e-2, 1e3]."""
    return np.logspace(-2.0, 3.0, n_points)


@dataclass(frozen=True)
class SweepConfig:
    sigma_grid: np.ndarray = field(default_factory=default_sigma_grid)
    n_samples: int = 10_000
    signed: bool = True
    word_length: int = 8
    seed: int = 0

    def __post_init__(self):
        grid = np.asarray(self.sigma_grid, dtype=np.float64)
        object.__setattr__(self, "sigma_grid", grid)
        if grid.ndim != 1 or grid.size < 2:
            raise ConfigError("sigma_grid must be a 1-d grid with at least 2 points")
        if grid[0] <= 0 or np.any(np.diff(grid) <= 0):
            raise ConfigError("sigma_grid must be positive and strictly increasing")
        if self.n_samples < 100:
            raise ConfigError(f"n_samples must be >= 100, got {self.n_samples}")
        if not 2 <= self.word_length <= 32:
            raise ConfigError(f"word_length must be in [2, 32], got {self.word_length}")

    def candidate_fls(self) -> list[int]:
        hi = self.word_length - 1 if self.signed else self.word_length
        return list(range(0, hi + 1))


@dataclass
class ErrorTable:
    """Relative-error grid over (sigma, FL) with the per-sigma optimum."""

    sigmas: np.ndarray
    fls: np.ndarray
    errors: np.ndarray  # shape (n_sigma, n_fl)
    opt_fl: np.ndarray
    min_error: np.ndarray
    signed: bool
    word_length: int


def sample_gaussian(sigma: float, n: int, seed) -> np.ndarray:
    """n zero-mean Gaussian draws with standard deviation sigma, seed-deterministic."""
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, sigma, int(n))


def rectify(v: np.ndarray) -> np.ndarray:
    """Elementwise max(0, v)."""
    return np.maximum(np.asarray(v, dtype=np.float64), 0.0)


def relative_error(v: np.ndarray, fmt: FixFormat) -> float:
    """Quantization noise power over signal power of a sample vector."""
    v = np.asarray(v, dtype=np.float64)
    power = float(np.sum(v * v))
    if power == 0.0:
        raise DomainError("relative_error is undefined for an all-zero vector")
    q = fix_quant(v, fmt)
    noise = q - v
    return float(np.sum(noise * noise)) / power


def cell_seed(seed: int, sigma_index: int) -> np.random.SeedSequence:
    """Randomness root for one sigma row: derived from (seed, sigma index).

    Every cell in a row reuses the row's sample, so results are independent
    of evaluation order and safe to compute in parallel.
    """
    return np.random.SeedSequence([int(seed), int(sigma_index)])


def sweep(cfg: SweepConfig) -> ErrorTable:
    """Full (sigma x FL) relative-error grid with per-sigma argmin."""
    fls = cfg.candidate_fls()
    errors = np.empty((cfg.sigma_grid.size, len(fls)), dtype=np.float64)
    for i, sigma in enumerate(cfg.sigma_grid):
        v = sample_gaussian(float(sigma), cfg.n_samples, cell_seed(cfg.seed, i))
        if not cfg.signed:
            v = rectify(v)
        for j, fl in enumerate(fls):
            fmt = FixFormat(cfg.word_length, fl, signed=cfg.signed)
            errors[i, j] = relative_error(v, fmt)
    amin = np.argmin(errors, axis=1)
    return ErrorTable(
        sigmas=cfg.sigma_grid.copy(),
        fls=np.asarray(fls),
        errors=errors,
        opt_fl=np.asarray([fls[k] for k in amin]),
        min_error=errors[np.arange(errors.shape[0]), amin],
        signed=cfg.signed,
        word_length=cfg.word_length,
    )


def fl_from_std(sigma: float, signed: bool, word_length: int = 8) -> int:
    """Closed-form optimal fractional length from a standard deviation.

    floor(log2(c / sigma)) with c = 40 (signed) or 70 (unsigned), clamped into
    the legal FL range of the format.
    """
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    c = SIGNED_SELECTOR_CONST if signed else UNSIGNED_SELECTOR_CONST
    raw = math.floor(math.log2(c / float(sigma)))
    hi = word_length - 1 if signed else word_length
    return int(min(max(raw, 0), hi))


def threshold_sigmas(table: ErrorTable) -> list[tuple[int, float]]:
    """Per-FL sigma at which the brute-force argmin transitions away from it.

    The transition point is the geometric mean of the last grid sigma where
    the FL is optimal and the next grid sigma.  FLs that never transition
    inside the grid are omitted; no transitions yields an empty list.
    """
    out = []
    for fl in table.fls:
        idx = np.flatnonzero(table.opt_fl == fl)
        if idx.size == 0 or idx[-1] + 1 >= table.sigmas.size:
            continue
        lo, hi = table.sigmas[idx[-1]], table.sigmas[idx[-1] + 1]
        out.append((int(fl), float(math.sqrt(lo * hi))))
    return out


def fit_threshold_line(points: list[tuple[int, float]]) -> tuple[float, float]:
    """Least-squares fit of log2(sigma_threshold) against FL: (slope, intercept)."""
    if len(points) < 2:
        raise ConfigError("need at least two threshold points to fit a line")
    x = np.asarray([p[0] for p in points], dtype=np.float64)
    y = np.log2([p[1] for p in points])
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept)


def _fmt_num(x) -> str:
    return repr(float(x))


def error_grid_csv(table: ErrorTable) -> str:
    """CSV of the full grid: sigma,fl,relative_error."""
    lines = ["sigma,fl,relative_error"]
    for i, sigma in enumerate(table.sigmas):
        for j, fl in enumerate(table.fls):
            lines.append(f"{_fmt_num(sigma)},{int(fl)},{_fmt_num(table.errors[i, j])}")
    return "\n".join(lines) + "\n"


def argmin_csv(table: ErrorTable) -> str:
    """CSV of the per-sigma optimum: sigma,opt_fl,min_error."""
    lines = ["sigma,opt_fl,min_error"]
    for i, sigma in enumerate(table.sigmas):
        lines.append(f"{_fmt_num(sigma)},{int(table.opt_fl[i])},{_fmt_num(table.min_error[i])}")
    return "\n".join(lines) + "\n"


def thresholds_csv(points: list[tuple[int, float]]) -> str:
    """CSV of argmin transitions: fl,sigma_threshold."""
    lines = ["fl,sigma_threshold"]
    for fl, sigma in points:
        lines.append(f"{int(fl)},{_fmt_num(sigma)}")
    return "\n".join(lines) + "\n"
