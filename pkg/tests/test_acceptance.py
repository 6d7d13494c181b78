"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v -s`` or
``python3 tests/test_acceptance.py``. The desk-scale runs are shared through
a memoised cache, so the whole suite costs a few minutes on one core.
"""

import functools
import time
from dataclasses import replace

import numpy as np
import pytest

from fedbif import bitfreeze as bf
from fedbif.baselines import FedAvg
from fedbif.data import Dataset, PartitionSpec, make_blobs, partition
from fedbif.experiments import RunConfig, records_to_jsonl, run_seed, with_method
from fedbif.floor import FloorHarnessConfig, run_floor_harness
from fedbif.nn import Layer, MlpSpec, forward, init_model, loss_and_backward, softmax_cross_entropy
from fedbif.protocol import FedBiF, FederatedState, RoundConfig, aggregate, client_train, run_round, server_quantize
from fedbif.quantizer import QuantParams, dequantize, int_range, quantize, step_size
from fedbif.sparsity import measure_sparsity
from fedbif.wire import ClientUpdate, QuantizedModel, decode, encode

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2, 3, 4)
DESK = RunConfig(name="desk", seeds=SEEDS)  # 10-class blobs, 8 clients, IID, [784, 32, 10], 60 rounds


RESULTS = []  # collected by conftest for the end-of-run summary


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}: {detail}"
        RESULTS.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        assert ok, line
    return emit


@functools.cache
def desk_run(scheme="iid", **method):
    """Final accuracies, sparsities, records and models of one desk config over all seeds."""
    cfg = with_method(DESK, **method)
    cfg = replace(cfg, partition=replace(cfg.partition, scheme=scheme))
    start = time.perf_counter()
    out = {"acc": [], "sparsity": [], "records": {}, "models": {}}
    for seed in cfg.seeds:
        records, model = run_seed(cfg, seed)
        out["acc"].append(records[-1]["test_accuracy"])
        out["sparsity"].append(records[-1]["sparsity"])
        out["records"][seed] = records
        out["models"][seed] = model
    out["seconds"] = time.perf_counter() - start
    out["mean"] = 100 * float(np.mean(out["acc"]))
    out["cfg"] = cfg
    return out


# 1 --------------------------------------------------------------------------


def test_c01_bit_round_trip(report):
    start = time.perf_counter()
    bad = 0
    for m in range(2, 9):
        lo, hi = int_range(m)
        ints = np.arange(lo, hi + 1)
        bad += int(np.count_nonzero(bf.recompose(bf.decompose(ints, m)) != ints))
    took = time.perf_counter() - start
    report(1, "bit round trip", bad == 0 and took < 1.0,
           f"{bad} mismatches over every m-bit integer, m = 2..8, in {took * 1e3:.1f} ms (< 1 s)")


# 2 --------------------------------------------------------------------------


def test_c02_quantizer_bound(report):
    rng = np.random.default_rng(2)
    violations = checked = 0
    for _ in range(100_000):
        m = int(rng.integers(2, 9))
        x = rng.normal(size=int(rng.integers(1, 17))) * 10.0 ** rng.uniform(-4, 3)
        alpha = step_size(x, m)
        lo, hi = int_range(m)
        raw = np.rint(x / alpha)
        inside = (raw >= lo) & (raw <= hi)  # the unclamped region
        err = np.abs(dequantize(quantize(x, QuantParams(alpha, m)), alpha) - x)
        # half a step, plus the rounding of x / alpha and q * alpha (a few ulps of x)
        limit = alpha / 2 + 4 * np.finfo(float).eps * np.abs(x)
        violations += int(np.count_nonzero(err[inside] > limit[inside]))
        checked += int(inside.sum())
    report(2, "quantizer bound", violations == 0,
           f"{violations} violations of |DeQ(Q(x)) - x| <= alpha/2 over {checked} unclamped entries "
           "in 1e5 random tensors")


# 3 --------------------------------------------------------------------------


def test_c03_ste_gradient_contract(report):
    rng = np.random.default_rng(3)
    worst, compared, nets = 0.0, 0, 0
    h = 1e-4  # five-point stencil: O(h^4) truncation, ~1e-12 roundoff
    while nets < 40:
        depth = int(rng.integers(1, 4))
        widths = [int(rng.integers(2, 6)) for _ in range(depth + 1)]
        m = int(rng.integers(2, 9))
        lo, hi = int_range(m)
        vbls = [bf.make_virtual_layer(rng.integers(lo, hi + 1, size=(a, b)), 0.05, m, int(rng.integers(m)), rng)
                for a, b in zip(widths[:-1], widths[1:])]
        biases = [0.1 * rng.normal(size=b) for b in widths[1:]]
        x = rng.normal(size=(4, widths[0]))
        y = rng.integers(widths[-1], size=4)
        params = [Layer(bf.reconstruct(v), b) for v, b in zip(vbls, biases)]
        logits, cache = forward(params, x)
        if any(np.min(np.abs(z)) < 1e-2 for z in cache.pre[:-1]):
            continue  # too close to a ReLU kink for finite differences
        nets += 1
        _, grads = loss_and_backward(logits, y, cache)
        for p, g, vbl in zip(params, grads, vbls):
            delivered = bf.ste_backward(g.weight, like=vbl.virtual[0])
            for idx in np.ndindex(p.weight.shape):
                old = p.weight[idx]
                f = []
                for k in (-2, -1, 1, 2):
                    p.weight[idx] = old + k * h
                    f.append(softmax_cross_entropy(forward(params, x)[0], y)[0])
                p.weight[idx] = old
                fd = (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h)
                if max(abs(fd), abs(delivered[idx])) > 1e-7:
                    worst = max(worst, abs(fd - delivered[idx]) / max(abs(fd), abs(delivered[idx])))
                    compared += 1
    report(3, "STE gradient contract", worst <= 1e-4,
           f"max relative error {worst:.2e} (<= 1e-4) over {compared} virtual-bit gradients in {nets} "
           "random float64 MLPs of depth 1-3")


# 4 --------------------------------------------------------------------------


def test_c04_aggregation_oracle(report):
    rng = np.random.default_rng(4)
    exact = True
    for seed in range(20):
        model = init_model(MlpSpec([5, 6, 3], seed=seed))
        qm = server_quantize(model, 4, (int(rng.integers(4)),))
        shard = Dataset(rng.normal(size=(30, 5)), rng.integers(3, size=30), 3)
        up = client_train(qm, shard, RoundConfig(1, 1, 2, 8, 0.5), np.random.default_rng(seed))
        merged = aggregate([up], qm)
        for l, (ints, plane) in enumerate(zip(qm.ints, up.planes)):
            # the client's reconstruction: its final bit plane over the frozen bits
            s = bf.frozen_sum(bf.decompose(ints, qm.m), qm.activated)
            mine = qm.alphas[l] * ((1 << qm.activated[0]) * plane[0].astype(np.float64) + s)
            exact &= np.array_equal(merged.layers[l].weight, mine)

    one = QuantizedModel([np.array([[7]])], [0.125], [np.zeros(1)], 4, 0, (1,))
    ups = [ClientUpdate(k, 0, (1,), [[np.array([[b]], np.uint8)]], [np.zeros(1)], 1, 4)
           for k, b in enumerate((1, 0, 1))]
    value = aggregate(ups, one, weights=[0.5, 0.3, 0.2]).layers[0].weight[0, 0]
    ok = exact and abs(value - 0.8) <= 1e-12
    report(4, "aggregation oracle", ok,
           f"single-client reconstruction exact in 20/20 models: {bool(exact)}; "
           f"3-client example -> {float(value)!r} (target 0.8, tol 1e-12)")


# 5 --------------------------------------------------------------------------


def wire_round(method, m, seed=5):
    """One measured round of a ~1e5-parameter model ([784, 128, 10])."""
    split = make_blobs(800, 16, 10, 3.0, seed, ambient_dim=784)
    shards = [split.train.subset(i) for i in partition(split.train, PartitionSpec("iid", 8, seed))]
    model = init_model(MlpSpec([784, 128, 10], seed=seed))
    state = FederatedState.create(model, shards, split.test, method, dtype=np.float32)
    cfg = RoundConfig(8, 8, 1, 32, 0.2, m, bf.ActivationSchedule("cyclic", m), seed)
    payload = method.broadcast(state, 0)
    up = method.local(state, payload, shards[0], cfg, np.random.default_rng(seed), 0)
    _, metrics = run_round(state, cfg)
    return model.parameter_count, payload, up, metrics


def byte_exact(payload):
    data = encode(payload)[0]
    return encode(decode(data))[0] == data


def test_c05_wire_exactness(report):
    m = 3
    params, down, up, fb = wire_round(FedBiF(m, bf.ActivationSchedule("cyclic", m)), m)
    _, fa_down, fa_up, fa = wire_round(FedAvg(), m)
    trips = all(byte_exact(p) for p in (down, up, fa_down, fa_up))
    ok = (trips and params >= 100_000
          and 1.0 <= fb.uplink_bpp <= 1.1 and m <= fb.downlink_bpp <= m + 0.1
          and fa.uplink_weight_bpp == 32.0 and fa.downlink_weight_bpp == 32.0)
    report(5, "wire exactness", ok,
           f"round trips byte-exact: {trips}; {params} parameters; FedBiF m={m} uplink {fb.uplink_bpp:.4f} bpp "
           f"in [1.0, 1.1], downlink {fb.downlink_bpp:.4f} bpp in [{m}, {m}.1]; FedAvg weights "
           f"{fa.uplink_weight_bpp:g}/{fa.downlink_weight_bpp:g} bpp (total {fa.uplink_bpp:.3f})")


# 6 --------------------------------------------------------------------------


def test_c06_end_to_end_trend(report):
    fb = desk_run()
    fa = desk_run(name="none")
    sg = desk_run(name="signsgd")
    seconds = fb["seconds"] + fa["seconds"] + sg["seconds"]
    gap = fb["mean"] - fa["mean"]
    ok = abs(gap) <= 2.0 and fb["mean"] > sg["mean"] and seconds < 600
    report(6, "end-to-end trend (IID)", ok,
           f"FedBiF-1/4 {fb['mean']:.2f}%, FedAvg {fa['mean']:.2f}% (|diff| {abs(gap):.2f} <= 2), "
           f"SignSGD {sg['mean']:.2f}% (< FedBiF); 5 seeds each, {seconds:.0f} s total (< 600 s)")


# 7 --------------------------------------------------------------------------


def test_c07_non_iid_trend(report):
    fb = desk_run("dirichlet")
    fa = desk_run("dirichlet", name="none")
    gap = fb["mean"] - fa["mean"]
    report(7, "non-IID (Dirichlet 0.3) trend", abs(gap) <= 3.0,
           f"FedBiF-1/4 {fb['mean']:.2f}%, FedAvg {fa['mean']:.2f}% (|diff| {abs(gap):.2f} <= 3)")


# 8 --------------------------------------------------------------------------


def test_c08_sparsity_emergence(report):
    fb = desk_run(m=2)
    fa = desk_run(name="none")
    fb_sparsity = float(np.mean(fb["sparsity"]))
    fa_sparsity = float(np.mean(fa["sparsity"]))  # raw weights with |w| <= 1e-12
    fa_grid = float(np.mean([measure_sparsity(mdl, 2) for mdl in fa["models"].values()]))
    ok = fb_sparsity >= 0.10 and fa_sparsity <= 0.001
    report(8, "sparsity emergence", ok,
           f"FedBiF m=2 zero integers {100 * fb_sparsity:.1f}% (>= 10%); FedAvg exact zeros "
           f"{100 * fa_sparsity:.3f}% (<= 0.1%) [for reference, FedAvg weights rounded to the m=2 grid: "
           f"{100 * fa_grid:.1f}% zeros]")


# 9 --------------------------------------------------------------------------


def test_c09_error_floor(report):
    summary = run_floor_harness(FloorHarnessConfig(m_values=(2, 4, 6, 8), seeds=SEEDS))
    g = {m: summary.gap(m) for m in (2, 4, 6, 8)}
    ratio = g[8] / summary.fp32_gap
    ok = summary.validated and g[2] >= g[4] >= g[6] and ratio <= 10
    report(9, "error floor vs bit width", ok,
           f"mean gaps m=2 {g[2]:.3e}, m=4 {g[4]:.3e}, m=6 {g[6]:.3e} (non-increasing), m=8 {g[8]:.3e} = "
           f"{ratio:.2f}x FP32 {summary.fp32_gap:.3e} (<= 10x); control gap {max(summary.control_gaps):.1e} "
           f"(<= 1e-6), over {len(SEEDS)} seeds")


# 10 -------------------------------------------------------------------------


def test_c10_schedule_ablation(report):
    cyc = desk_run()["mean"]
    rnd = desk_run(schedule="random")["mean"]
    fixed = {i: desk_run(schedule="fixed", index=i)["mean"] for i in range(4)}
    best_fixed = max(fixed.values())
    ok = abs(cyc - rnd) <= 2.0 and min(cyc, rnd) >= best_fixed + 5.0
    report(10, "bit-schedule ablation", ok,
           f"cyclic {cyc:.2f}%, random {rnd:.2f}% (|diff| {abs(cyc - rnd):.2f} <= 2); fixed bits "
           + ", ".join(f"b{i} {v:.2f}%" for i, v in fixed.items())
           + f" (both lead the best by {min(cyc, rnd) - best_fixed:.2f} >= 5)")


# 11 -------------------------------------------------------------------------


def test_c11_determinism(report):
    checks = []
    fb = desk_run()
    again, _ = run_seed(fb["cfg"], 0)
    checks.append(records_to_jsonl(again) == records_to_jsonl(fb["records"][0]))
    # a stateful baseline and a sampled-participation run, on a smaller task
    small = replace(DESK, rounds=5, seeds=(3,),
                    data=replace(DESK.data, samples=600, input_dim=64),
                    training=replace(DESK.training, clients_per_round=3))
    for method in ({"name": "lfl"}, {"name": "fedbif", "schedule": "random"}):
        cfg = with_method(small, **method)
        checks.append(records_to_jsonl(run_seed(cfg, 3)[0]) == records_to_jsonl(run_seed(cfg, 3)[0]))
    report(11, "determinism", all(checks),
           f"byte-identical metrics logs on rerun: {sum(checks)}/{len(checks)} "
           "(desk FedBiF seed 0, LFL, random-schedule FedBiF with client sampling)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
