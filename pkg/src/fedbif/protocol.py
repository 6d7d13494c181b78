"""FedBiF rounds: quantize and broadcast, bit-frozen local training, aggregation.

The round driver (``run_round``) is shared with the baseline compressors in
:mod:`fedbif.baselines`; a *method* object supplies the three method-specific
steps (``broadcast``, ``local``, ``aggregate``) and the driver handles client
selection, RNG streams, wire accounting and evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import bitfreeze as bf
from .data import Dataset
from .errors import DataError, ProtocolError, SpecificationError
from .nn import GlobalModel, Layer, accuracy, forward, loss_and_backward
from .quantizer import QuantParams, quantize, wire_step_size
from .sparsity import measure_sparsity
from .wire import DOWNLINK, UPLINK, ClientUpdate, QuantizedModel, WireStats, bpp

# stream tags keep selection, client training and compression draws independent
TAG_SELECT, TAG_CLIENT = 1, 2


@dataclass(frozen=True)
class RoundConfig:
    clients_total: int = 8
    clients_per_round: int = 8
    local_epochs: int = 2
    batch_size: int = 32
    lr: float = 0.05
    m: int = 4
    schedule: bf.ActivationSchedule = field(default_factory=bf.ActivationSchedule)
    seed: int = 0

    def __post_init__(self):
        for name in ("clients_total", "clients_per_round", "local_epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise SpecificationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.clients_per_round > self.clients_total:
            raise SpecificationError("clients_per_round cannot exceed clients_total")
        if not self.lr >= 0:
            raise SpecificationError(f"learning rate must be non-negative, got {self.lr}")


def client_stream(seed: int, t: int, client: int) -> np.random.Generator:
    """Independent RNG stream for one client in one round."""
    return np.random.default_rng([seed, t, client, TAG_CLIENT])


def select_clients(cfg: RoundConfig, t: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, t, TAG_SELECT])
    return np.sort(rng.choice(cfg.clients_total, size=cfg.clients_per_round, replace=False))


def data_weights(sample_counts: Sequence[int]) -> np.ndarray:
    counts = np.asarray(sample_counts, dtype=np.float64)
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# FedBiF steps


def server_quantize(
    global_model: GlobalModel, m: int, activated: Sequence[int] = (0,), t: int | None = None
) -> QuantizedModel:
    """Per-layer step size and m-bit integers for every weight; biases pass through."""
    ints, alphas = [], []
    for layer in global_model.layers:
        alpha = wire_step_size(layer.weight, m)
        ints.append(quantize(layer.weight, QuantParams(alpha, m)))
        alphas.append(alpha)
    biases = [l.bias.copy() for l in global_model.layers]
    rnd = global_model.round if t is None else t
    return QuantizedModel(ints, alphas, biases, m, rnd, tuple(activated))


def dequantized_model(qm: QuantizedModel, dtype=np.float64) -> GlobalModel:
    layers = [
        Layer((q * a).astype(dtype), b.astype(dtype)) for q, a, b in zip(qm.ints, qm.alphas, qm.biases)
    ]
    return GlobalModel(layers, qm.round)


def client_train(
    qm: QuantizedModel,
    shard: Dataset,
    cfg: RoundConfig,
    rng: np.random.Generator,
    client_id: int = 0,
    dtype=np.float64,
    epochs: int | None = None,
) -> ClientUpdate:
    """Train the activated bit plane(s) of every layer; upload the final planes.

    Forward passes use the reconstructed weights; the weight gradient is
    applied unchanged to each activated virtual bit. Biases train as ordinary
    full-precision parameters.
    """
    if len(shard) == 0:
        raise DataError(f"client {client_id} has an empty shard")
    epochs = cfg.local_epochs if epochs is None else epochs
    vbls = [
        bf.make_virtual_layer(q, a, qm.m, qm.activated, rng, dtype=dtype)
        for q, a in zip(qm.ints, qm.alphas)
    ]
    start_bias = [np.asarray(b, dtype=dtype) for b in qm.biases]
    biases = [b.copy() for b in start_bias]
    x = shard.features.astype(dtype, copy=False)
    y = shard.labels
    last_loss = float("nan")
    for _ in range(epochs):
        order = rng.permutation(len(x))
        losses = []
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            params = [Layer(bf.reconstruct(v), b) for v, b in zip(vbls, biases)]
            logits, cache = forward(params, x[idx])
            loss, grads = loss_and_backward(logits, y[idx], cache)
            for vbl, b, g in zip(vbls, biases, grads):
                for v in vbl.virtual:
                    v -= cfg.lr * bf.ste_backward(g.weight, like=v)
                b -= cfg.lr * g.bias
            losses.append(loss)
        last_loss = float(np.mean(losses))
    return ClientUpdate(
        client_id=client_id,
        round=qm.round,
        activated=qm.activated,
        planes=[vbl.bits() for vbl in vbls],
        bias_deltas=[b - b0 for b, b0 in zip(biases, start_bias)],
        sample_count=len(shard),
        m=qm.m,
        train_loss=last_loss,
    )


def aggregate(
    updates: Sequence[ClientUpdate],
    qm: QuantizedModel,
    weights: Sequence[float] | None = None,
    dtype=np.float64,
) -> GlobalModel:
    """``theta = alpha * (sum_i 2**i * sum_k p_k b_{i,k} + s)`` per layer.

    ``s`` is recomputed from the broadcast integers, so only the uploaded
    planes are needed. Biases become the weighted mean of client biases.
    """
    if not updates:
        raise ProtocolError("cannot aggregate an empty update list")
    for up in updates:
        if up.round != qm.round:
            raise ProtocolError(f"update from client {up.client_id} is for round {up.round}, expected {qm.round}")
        if tuple(up.activated) != tuple(qm.activated):
            raise ProtocolError(
                f"client {up.client_id} trained bits {up.activated}, round activated {qm.activated}"
            )
    p = data_weights([u.sample_count for u in updates]) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(p) != len(updates) or abs(p.sum() - 1.0) > 1e-12 or np.any(p < 0):
        raise ProtocolError(f"aggregation weights must be non-negative and sum to 1, got {p.tolist()}")
    layers = []
    for l, (ints, alpha, bias) in enumerate(zip(qm.ints, qm.alphas, qm.biases)):
        bits = bf.decompose(ints, qm.m)
        level = bf.frozen_sum(bits, qm.activated).astype(np.float64)
        for j, i in enumerate(qm.activated):
            level += (1 << i) * sum(pk * up.planes[l][j].astype(np.float64) for pk, up in zip(p, updates))
        new_bias = np.asarray(bias, dtype=np.float64) + sum(pk * up.bias_deltas[l] for pk, up in zip(p, updates))
        layers.append(Layer((alpha * level).astype(dtype), new_bias.astype(dtype)))
    return GlobalModel(layers, qm.round + 1)


class FedBiF:
    """Bit-freezing method for the shared round driver."""

    uplink_kind = "bitplane"

    def __init__(self, m: int, schedule: bf.ActivationSchedule):
        if schedule.m != m:
            raise SpecificationError(f"schedule is for m={schedule.m}, method uses m={m}")
        self.m = m
        self.schedule = schedule

    @property
    def label(self) -> str:
        return self.schedule.label

    def broadcast(self, state: "FederatedState", t: int) -> QuantizedModel:
        return server_quantize(state.model, self.m, bf.next_activated(self.schedule, t), t)

    def local(self, state: "FederatedState", payload: QuantizedModel, shard: Dataset, cfg: RoundConfig, rng, client_id: int):
        return client_train(payload, shard, cfg, rng, client_id=client_id, dtype=state.dtype)

    def aggregate(self, state: "FederatedState", payload: QuantizedModel, updates) -> GlobalModel:
        return aggregate(updates, payload, dtype=state.dtype)

    def sparsity(self, model: GlobalModel) -> float:
        # zeros of the model the server broadcasts next round
        return measure_sparsity(model, self.m)


# ---------------------------------------------------------------------------
# round driver


@dataclass
class RoundMetrics:
    round: int
    test_accuracy: float
    train_loss: float
    uplink_bpp: float
    downlink_bpp: float
    uplink_weight_bpp: float
    downlink_weight_bpp: float
    sparsity: float
    activated: list[int]
    clients: list[int]

    def as_record(self) -> dict:
        return {
            "round": self.round,
            "test_accuracy": self.test_accuracy,
            "train_loss": self.train_loss,
            "uplink_bpp": self.uplink_bpp,
            "downlink_bpp": self.downlink_bpp,
            "uplink_weight_bpp": self.uplink_weight_bpp,
            "downlink_weight_bpp": self.downlink_weight_bpp,
            "sparsity": self.sparsity,
            "activated": list(self.activated),
            "clients": list(self.clients),
        }


@dataclass
class FederatedState:
    model: GlobalModel
    shards: list[Dataset]
    test: Dataset
    method: object
    stats: WireStats
    dtype: type = np.float32
    t: int = 0
    method_state: dict = field(default_factory=dict)

    @classmethod
    def create(cls, model: GlobalModel, shards, test, method, dtype=np.float32) -> "FederatedState":
        model = GlobalModel(
            [Layer(l.weight.astype(dtype), l.bias.astype(dtype)) for l in model.layers], model.round
        )
        stats = WireStats(model.parameter_count, model.weight_count)
        return cls(model, list(shards), test, method, stats, dtype)


def run_round(state: FederatedState, cfg: RoundConfig) -> tuple[FederatedState, RoundMetrics]:
    t = state.t
    method = state.method
    if len(state.shards) != cfg.clients_total:
        raise SpecificationError(f"{len(state.shards)} shards for {cfg.clients_total} clients")
    payload = method.broadcast(state, t)
    state.stats.record(DOWNLINK, payload)
    chosen = select_clients(cfg, t)
    updates = []
    for k in chosen:
        up = method.local(state, payload, state.shards[k], cfg, client_stream(cfg.seed, t, int(k)), int(k))
        state.stats.record(UPLINK, up)
        updates.append(up)
    model = method.aggregate(state, payload, updates)
    model.round = t + 1
    state.model = model
    state.t = t + 1

    p = data_weights([u.sample_count for u in updates])
    metrics = RoundMetrics(
        round=t,
        test_accuracy=accuracy(model.layers, state.test.features.astype(state.dtype, copy=False), state.test.labels),
        train_loss=float(sum(pk * u.train_loss for pk, u in zip(p, updates))),
        uplink_bpp=bpp(state.stats, UPLINK),
        downlink_bpp=bpp(state.stats, DOWNLINK),
        uplink_weight_bpp=bpp(state.stats, UPLINK, weights_only=True),
        downlink_weight_bpp=bpp(state.stats, DOWNLINK, weights_only=True),
        sparsity=method.sparsity(model),
        activated=list(getattr(payload, "activated", ())),
        clients=[int(k) for k in chosen],
    )
    return state, metrics
