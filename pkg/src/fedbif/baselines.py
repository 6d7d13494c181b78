"""Reference compressors run through the same round driver as FedBiF.

All baselines broadcast / upload biases as raw float32 and apply their
compressor to weight tensors only, mirroring how FedBiF treats biases.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import DimensionError, SpecificationError
from .nn import GlobalModel, Layer, train_sgd
from .quantizer import QuantParams, int_range, quantize, stochastic_quantize, wire_step_size
from .sparsity import exact_zero_fraction
from .wire import (
    DOWNLINK,
    KIND_DENSE,
    KIND_SIGN,
    KIND_STOCHASTIC,
    KIND_UNIFORM,
    UPLINK,
    TensorMessage,
)

COMPRESSORS = ("none", "signsgd", "fedpaq", "lfl")


@dataclass(frozen=True)
class CompressorKind:
    name: str = "none"
    alpha: float = 0.001  # signsgd step
    m: int = 4  # fedpaq bit width
    m_up: int = 1  # lfl
    m_down: int = 4  # lfl

    def __post_init__(self):
        if self.name not in COMPRESSORS:
            raise SpecificationError(f"unknown compressor {self.name!r}; expected one of {COMPRESSORS}")
        if not self.alpha > 0:
            raise SpecificationError(f"SignSGD step must be positive, got {self.alpha}")
        for name in ("m", "m_up", "m_down"):
            if not 1 <= getattr(self, name) <= 8:
                raise SpecificationError(f"{name} must be in [1, 8], got {getattr(self, name)}")
        if self.name == "fedpaq" and self.m < 2:
            raise SpecificationError("FedPAQ needs m >= 2")


# ---------------------------------------------------------------------------
# compressors


def fedavg_aggregate(
    model: GlobalModel, deltas: Sequence[Sequence[Layer]], weights: Sequence[float], dtype=None
) -> GlobalModel:
    """``w + sum_k p_k * delta_k`` layer by layer."""
    dtype = dtype or model.dtype
    layers = []
    for l, base in enumerate(model.layers):
        w = base.weight.astype(np.float64)
        b = base.bias.astype(np.float64)
        for pk, delta in zip(weights, deltas):
            if delta[l].weight.shape != w.shape or delta[l].bias.shape != b.shape:
                raise DimensionError(f"layer {l}: delta shape does not match the model")
            w = w + pk * delta[l].weight
            b = b + pk * delta[l].bias
        layers.append(Layer(w.astype(dtype), b.astype(dtype)))
    return GlobalModel(layers, model.round + 1)


def signsgd_codes(delta: np.ndarray) -> np.ndarray:
    return np.sign(delta).astype(np.int8)


def signsgd_compress(delta: np.ndarray, alpha: float) -> np.ndarray:
    """``alpha * sign(delta)`` with ``sign(0) = 0``."""
    if not alpha > 0:
        raise SpecificationError(f"SignSGD step must be positive, got {alpha}")
    return alpha * signsgd_codes(delta).astype(np.float64)


def fedpaq_codes(delta: np.ndarray, m: int) -> tuple[np.ndarray, float]:
    alpha = wire_step_size(delta, m)
    return quantize(delta, QuantParams(alpha, m)), alpha


def fedpaq_compress(delta: np.ndarray, m: int) -> np.ndarray:
    ints, alpha = fedpaq_codes(delta, m)
    return ints * alpha


def _f32_ceil(x: float) -> float:
    y = np.float32(x)
    if y < x:
        y = np.nextafter(y, np.float32(np.inf))
    return float(y)


def lfl_codes(x: np.ndarray, m: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Stochastic rounding onto ``2**m`` evenly spaced levels spanning ``[-A, A]``.

    ``A = ||x||_inf`` (float32, rounded up). Codes are signed m-bit integers;
    the expected decoded value equals ``x``. Works down to ``m = 1``
    (levels ``{-A, A}``).
    """
    x = np.asarray(x, dtype=np.float64)
    span = _f32_ceil(max(float(np.max(np.abs(x))) if x.size else 0.0, 1e-12))
    spacing = 2.0 * span / ((1 << m) - 1)
    lo, _ = int_range(m)
    shifted = x + span + lo * spacing  # lands in [lo * spacing, hi * spacing]
    return stochastic_quantize(shifted, QuantParams(spacing, m), rng), span


def lfl_decode(codes: np.ndarray, span: float, m: int) -> np.ndarray:
    lo, _ = int_range(m)
    return span * (2.0 * (np.asarray(codes, dtype=np.float64) - lo) / ((1 << m) - 1) - 1.0)


def lfl_compress(x: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    if m < 1:
        raise SpecificationError(f"LFL bit width must be >= 1, got {m}")
    codes, span = lfl_codes(x, m, rng)
    return lfl_decode(codes, span, m)


# ---------------------------------------------------------------------------
# methods for the round driver


def _dense_message(model: GlobalModel, t: int) -> TensorMessage:
    return TensorMessage(
        KIND_DENSE, DOWNLINK, t,
        codes=[l.weight for l in model.layers],
        scales=[1.0] * len(model.layers),
        biases=[l.bias for l in model.layers],
    )


def _model_from_dense(msg: TensorMessage, dtype) -> GlobalModel:
    return GlobalModel([Layer(np.asarray(w, dtype=dtype).copy(), np.asarray(b, dtype=dtype).copy())
                        for w, b in zip(msg.codes, msg.biases)], msg.round)


class _DeltaMethod:
    """Shared client side: SGD from the received model, then compress the delta."""

    kind = KIND_DENSE
    m = 32

    def broadcast(self, state, t: int) -> TensorMessage:
        return _dense_message(state.model, t)

    def start_model(self, state, payload) -> GlobalModel:
        """The model clients hold after receiving ``payload``."""
        return _model_from_dense(payload, state.dtype)

    def compress(self, delta: np.ndarray, rng) -> tuple[np.ndarray, float]:
        return delta, 1.0

    def decompress(self, codes: np.ndarray, scale: float) -> np.ndarray:
        return scale * np.asarray(codes, dtype=np.float64)

    def local(self, state, payload, shard: Dataset, cfg, rng, client_id: int) -> TensorMessage:
        start = self.start_model(state, payload)
        x = shard.features.astype(state.dtype, copy=False)
        trained, loss = train_sgd(start.layers, x, shard.labels, cfg.local_epochs, cfg.batch_size, cfg.lr, rng)
        codes, scales = [], []
        for new, old in zip(trained, start.layers):
            c, s = self.compress(new.weight - old.weight, rng)
            codes.append(c)
            scales.append(s)
        return TensorMessage(
            self.kind, UPLINK, payload.round, codes, scales,
            biases=[new.bias - old.bias for new, old in zip(trained, start.layers)],
            m=self.m, client_id=client_id, sample_count=len(shard), train_loss=loss,
        )

    def aggregate(self, state, payload, updates) -> GlobalModel:
        total = float(sum(u.sample_count for u in updates))
        weights = [u.sample_count / total for u in updates]
        deltas = [
            [Layer(self.decompress(c, s), np.asarray(b, dtype=np.float64))
             for c, s, b in zip(u.codes, u.scales, u.biases)]
            for u in updates
        ]
        return fedavg_aggregate(self.start_model(state, payload), deltas, weights, dtype=state.dtype)

    def sparsity(self, model: GlobalModel) -> float:
        return exact_zero_fraction(model)


class FedAvg(_DeltaMethod):
    label = "FedAvg"

    def decompress(self, codes, scale):
        return np.asarray(codes, dtype=np.float64)


class SignSGD(_DeltaMethod):
    kind = KIND_SIGN
    m = 1

    def __init__(self, alpha: float = 0.001):
        self.alpha = float(np.float32(alpha))
        self.label = f"SignSGD(alpha={alpha:g})"

    def compress(self, delta, rng):
        return signsgd_codes(delta), self.alpha


class FedPAQ(_DeltaMethod):
    kind = KIND_UNIFORM

    def __init__(self, m: int = 4):
        self.m = m
        self.label = f"FedPAQ-{m}"

    def compress(self, delta, rng):
        return fedpaq_codes(delta, self.m)


class LFL(_DeltaMethod):
    """Stochastic quantization on both links.

    The downlink carries the quantized difference between the server model and
    the model clients currently hold (the *view*). Every client applies it, so
    all views stay identical. Clients start from the shared seeded initial
    model, so round 0 sends an all-zero difference.
    """

    kind = KIND_STOCHASTIC

    def __init__(self, m_up: int = 1, m_down: int = 4, seed: int = 0):
        self.m = self.m_up = m_up
        self.m_down = m_down
        self.seed = seed
        self.label = f"LFL-{m_up}/{m_down}"

    def broadcast(self, state, t):
        view = state.method_state.get("view") or state.model
        rng = np.random.default_rng([self.seed, t, 0xD0])
        codes, scales, layers = [], [], []
        for cur, seen in zip(state.model.layers, view.layers):
            diff = cur.weight.astype(np.float64) - seen.weight
            c, span = lfl_codes(diff, self.m_down, rng)
            codes.append(c)
            scales.append(span)
            # biases travel as float32 and replace the old ones
            layers.append(Layer(
                (seen.weight + lfl_decode(c, span, self.m_down)).astype(state.dtype),
                np.asarray(cur.bias, dtype=np.float32).astype(state.dtype),
            ))
        state.method_state["view"] = GlobalModel(layers, t)
        return TensorMessage(KIND_STOCHASTIC, DOWNLINK, t, codes, scales,
                             biases=[l.bias for l in layers], m=self.m_down)

    def start_model(self, state, payload):
        return state.method_state["view"]

    def compress(self, delta, rng):
        return lfl_codes(delta, self.m_up, rng)

    def decompress(self, codes, scale):
        return lfl_decode(codes, scale, self.m_up)


def make_baseline(kind: CompressorKind, seed: int = 0):
    if kind.name == "none":
        return FedAvg()
    if kind.name == "signsgd":
        return SignSGD(kind.alpha)
    if kind.name == "fedpaq":
        return FedPAQ(kind.m)
    return LFL(kind.m_up, kind.m_down, seed=seed)
