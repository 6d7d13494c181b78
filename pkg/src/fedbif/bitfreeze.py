"""Bit freezing: train one bit plane of a quantized tensor through virtual bits.

An m-bit integer ``q`` is stored offset-binary, ``q = sum_i 2**i * b_i - 2**(m-1)``.
During local training one (or a few) planes are *activated*: each activated bit
gets a real-valued virtual bit ``v`` with ``b = 1 iff v > 0``; every other plane
is frozen and folded into a precomputed integer ``s``. The reconstructed weight
is ``alpha * (sum_active 2**i * step(v_i) + s)`` and gradients pass straight
through, ``d theta / d v = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, DimensionError, RangeError, SpecificationError
from .quantizer import int_range


@dataclass
class BitPlaneSet:
    m: int
    planes: list[np.ndarray]  # planes[i] holds bit i (LSB = 0), uint8 in {0, 1}

    @property
    def shape(self) -> tuple[int, ...]:
        return self.planes[0].shape


def decompose(xbar: np.ndarray, m: int) -> BitPlaneSet:
    xbar = np.asarray(xbar, dtype=np.int64)
    lo, hi = int_range(m)
    if xbar.size and (xbar.min() < lo or xbar.max() > hi):
        raise RangeError(f"integers must lie in [{lo}, {hi}] for m={m}")
    offset = xbar - lo
    return BitPlaneSet(m, [((offset >> i) & 1).astype(np.uint8) for i in range(m)])


def recompose(bits: BitPlaneSet) -> np.ndarray:
    acc = np.zeros(bits.shape, dtype=np.int64)
    for i, plane in enumerate(bits.planes):
        if not np.all((plane == 0) | (plane == 1)):
            raise DataError(f"bit plane {i} has non-binary entries")
        acc += plane.astype(np.int64) << i
    return acc - (1 << (bits.m - 1))


def _as_indices(activated: int | Sequence[int]) -> tuple[int, ...]:
    if isinstance(activated, (int, np.integer)):
        return (int(activated),)
    return tuple(int(i) for i in activated)


def frozen_sum(bits: BitPlaneSet, activated: int | Sequence[int]) -> np.ndarray:
    """``sum_{j not activated} 2**j * b_j - 2**(m-1)``."""
    active = _as_indices(activated)
    for i in active:
        if not 0 <= i < bits.m:
            raise SpecificationError(f"activated bit {i} out of range for m={bits.m}")
    s = np.full(bits.shape, -(1 << (bits.m - 1)), dtype=np.int64)
    for j, plane in enumerate(bits.planes):
        if j not in active:
            s += plane.astype(np.int64) << j
    return s


def step(v: np.ndarray) -> np.ndarray:
    """Binary step: 1 where ``v > 0`` (strictly), else 0."""
    return (np.asarray(v) > 0).astype(np.uint8)


def init_virtual(
    bits_at_i: np.ndarray,
    fan_in: int,
    seed: int | np.random.Generator,
    dtype=np.float64,
) -> np.ndarray:
    """Kaiming-normal magnitudes carrying the sign of the received bit.

    ``v = (2b - 1) * |n|``, ``n ~ N(0, 2/fan_in)``; exact zero draws are
    redrawn so that ``step(v) == b`` holds everywhere.
    """
    if fan_in < 1:
        raise SpecificationError(f"fan_in must be >= 1, got {fan_in}")
    bits_at_i = np.asarray(bits_at_i)
    if not np.all((bits_at_i == 0) | (bits_at_i == 1)):
        raise DataError("virtual-bit initialization needs a binary plane")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    std = np.sqrt(2.0 / fan_in)
    mag = np.abs(rng.normal(0.0, std, size=bits_at_i.shape))
    zeros = mag == 0
    while zeros.any():
        mag[zeros] = np.abs(rng.normal(0.0, std, size=int(zeros.sum())))
        zeros = mag == 0
    sign = 2.0 * bits_at_i.astype(np.float64) - 1.0
    return (sign * mag).astype(dtype)


@dataclass
class VirtualBitLayer:
    """Client-local trainable state for one weight tensor."""

    activated: tuple[int, ...]
    virtual: list[np.ndarray]  # one tensor per activated index, same order
    frozen_sum: np.ndarray
    alpha: float
    m: int

    @property
    def activated_index(self) -> int:
        if len(self.activated) != 1:
            raise SpecificationError(f"{len(self.activated)} bits are activated, not one")
        return self.activated[0]

    def bits(self) -> list[np.ndarray]:
        return [step(v) for v in self.virtual]


def make_virtual_layer(
    xbar: np.ndarray,
    alpha: float,
    m: int,
    activated: int | Sequence[int],
    rng: np.random.Generator,
    dtype=np.float64,
) -> VirtualBitLayer:
    """Decompose received integers, precompute the frozen sum, initialize virtual bits."""
    active = _as_indices(activated)
    bits = decompose(xbar, m)
    fan_in = xbar.shape[0]
    virtual = [init_virtual(bits.planes[i], fan_in, rng, dtype=dtype) for i in active]
    return VirtualBitLayer(active, virtual, frozen_sum(bits, active), float(alpha), m)


def reconstruct(vbl: VirtualBitLayer) -> np.ndarray:
    """``alpha * (sum_active 2**i * step(v_i) + s)`` in the virtual bits' dtype."""
    q = vbl.frozen_sum.copy()
    for i, v in zip(vbl.activated, vbl.virtual):
        q += step(v).astype(np.int64) << i
    return (q * vbl.alpha).astype(vbl.virtual[0].dtype)


def ste_backward(grad_theta_hat: np.ndarray, like: np.ndarray | None = None) -> np.ndarray:
    """Straight-through gradient: the virtual bit receives the weight gradient unchanged."""
    grad = np.asarray(grad_theta_hat)
    if like is not None and grad.shape != np.shape(like):
        raise DimensionError(f"gradient shape {grad.shape} vs virtual shape {np.shape(like)}")
    return grad.copy()


SCHEDULES = ("cyclic", "random", "fixed", "multi")


@dataclass(frozen=True)
class ActivationSchedule:
    """Which bit plane(s) a round trains.

    ``cyclic`` walks MSB to LSB (``order="lsb"`` reverses it); ``random`` draws
    one index per round from a seeded stream; ``fixed`` always trains ``index``;
    ``multi`` alternates through consecutive groups of ``k`` bits starting at
    the MSB side (``k = m`` trains every bit each round).
    """

    strategy: str = "cyclic"
    m: int = 4
    seed: int = 0
    index: int = 0
    k: int = 1
    order: str = "msb"

    def __post_init__(self):
        if self.strategy not in SCHEDULES:
            raise SpecificationError(f"unknown schedule {self.strategy!r}; expected one of {SCHEDULES}")
        if self.order not in ("msb", "lsb"):
            raise SpecificationError(f"cyclic order must be 'msb' or 'lsb', got {self.order!r}")
        if self.strategy == "fixed" and not 0 <= self.index < self.m:
            raise SpecificationError(f"fixed index {self.index} out of range for m={self.m}")
        if self.strategy == "multi" and not 1 <= self.k <= self.m:
            raise SpecificationError(f"multi k={self.k} must be in [1, m={self.m}]")

    @property
    def label(self) -> str:
        if self.strategy == "cyclic":
            return f"FedBiF-1/{self.m}"
        if self.strategy == "random":
            return f"FedBiF-R1/{self.m}"
        if self.strategy == "multi":
            return f"FedBiF-{self.k}/{self.m}"
        return "FedBiF-" + "".join("1" if j == self.index else "0" for j in range(self.m - 1, -1, -1))


def next_activated(schedule: ActivationSchedule, t: int) -> tuple[int, ...]:
    m = schedule.m
    if schedule.strategy == "cyclic":
        pos = t % m
        return (m - 1 - pos,) if schedule.order == "msb" else (pos,)
    if schedule.strategy == "random":
        return (int(np.random.default_rng([schedule.seed, t]).integers(m)),)
    if schedule.strategy == "fixed":
        return (schedule.index,)
    msb_first = list(range(m - 1, -1, -1))
    groups = [tuple(msb_first[g:g + schedule.k]) for g in range(0, m, schedule.k)]
    return groups[t % len(groups)]
