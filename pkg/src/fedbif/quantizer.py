"""Uniform symmetric quantization to signed m-bit integers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, SpecificationError

NORM_FLOOR = 1e-12
MIN_BITS, MAX_BITS = 2, 8


def int_range(m: int) -> tuple[int, int]:
    """Inclusive integer range ``[-2**(m-1), 2**(m-1) - 1]``."""
    return -(1 << (m - 1)), (1 << (m - 1)) - 1


def _check_bits(m: int, lo: int = MIN_BITS) -> None:
    if not (lo <= int(m) <= MAX_BITS):
        raise SpecificationError(f"bit width must be in [{lo}, {MAX_BITS}], got {m}")


@dataclass(frozen=True)
class QuantParams:
    alpha: float
    m: int

    def __post_init__(self):
        # 1-bit grids are only meaningful for the offset stochastic quantizer
        _check_bits(self.m, lo=1)
        if not (self.alpha > 0 and np.isfinite(self.alpha)):
            raise SpecificationError(f"step size must be positive and finite, got {self.alpha}")


def step_size(theta: np.ndarray, m: int) -> float:
    """Per-tensor step size: ``max(||theta||_inf, 1e-12) / 2**(m-1)``."""
    _check_bits(m)
    theta = np.asarray(theta)
    norm = float(np.max(np.abs(theta))) if theta.size else 0.0
    return max(norm, NORM_FLOOR) / (1 << (m - 1))


def wire_step_size(theta: np.ndarray, m: int) -> float:
    """``step_size`` rounded to float32, the precision it travels in."""
    return float(np.float32(step_size(theta, m)))


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise DataError("cannot quantize non-finite values")


def quantize(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    """``clamp(round(x / alpha))`` with round-half-to-even. Returns int64."""
    x = np.asarray(x)
    _check_finite(x)
    lo, hi = int_range(qp.m)
    return np.clip(np.rint(x / qp.alpha), lo, hi).astype(np.int64)


def dequantize(xbar: np.ndarray, alpha: float, dtype=np.float64) -> np.ndarray:
    if not alpha > 0:
        raise SpecificationError(f"step size must be positive, got {alpha}")
    return (np.asarray(xbar, dtype=np.float64) * alpha).astype(dtype)


def stochastic_quantize(x: np.ndarray, qp: QuantParams, rng: np.random.Generator) -> np.ndarray:
    """Unbiased stochastic rounding of ``x / alpha``, then clamping.

    Rounds up with probability equal to the fractional part. Entries whose
    scaled value is already an integer are left exactly where ``quantize``
    would put them (no randomness is consumed for their outcome).
    """
    x = np.asarray(x)
    _check_finite(x)
    scaled = x / qp.alpha
    floor = np.floor(scaled)
    frac = scaled - floor
    up = rng.random(scaled.shape) < frac
    lo, hi = int_range(qp.m)
    return np.clip(floor + up, lo, hi).astype(np.int64)
