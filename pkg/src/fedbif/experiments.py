"""Run configuration, experiment driver, metrics log and summary.

A run is described by a YAML file with a few top-level keys and four
sections (``method``, ``data``, ``partition``, ``training``); the floor
harness takes its own flat file. See ``docs/config.md`` for the grammar.
Every run writes

* ``<output>/<name>.jsonl``: one JSON record per round per seed, and
* ``<output>/<name>_summary.csv``: one row with mean and std of the final
  accuracy over seeds plus the final communication and sparsity figures.

Both are produced only from seeded RNG streams, so rerunning an identical
config gives byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import os
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import yaml

from .baselines import COMPRESSORS, CompressorKind, make_baseline
from .bitfreeze import ActivationSchedule
from .data import Dataset, PartitionSpec, load_csv, load_idx, make_blobs, partition
from .errors import ConfigError, DataError, FedBiFError
from .floor import FloorHarnessConfig
from .nn import GlobalModel, Layer, MlpSpec, init_model
from .protocol import FedBiF, FederatedState, RoundConfig, run_round
from .sparsity import exact_zero_fraction, measure_sparsity  # noqa: F401  (re-exported)

OUTPUT_ENV = "FEDBIF_OUTPUT_DIR"
LOG_SCHEMA = "fedbif.round/1"
METHODS = ("fedbif",) + COMPRESSORS
# desk-scale learning rates; FedBiF's acts on virtual bits, the others on weights
DEFAULT_LR = {"fedbif": 0.2, "none": 0.4, "signsgd": 0.4, "fedpaq": 0.4, "lfl": 0.4}


@dataclass(frozen=True)
class MethodConfig:
    name: str = "fedbif"
    m: int = 4
    schedule: str = "cyclic"
    index: int = 0
    k: int = 1
    order: str = "msb"
    alpha: float = 0.001
    m_up: int = 1
    m_down: int = 4

    def __post_init__(self):
        if self.name not in METHODS:
            raise ConfigError(f"unknown method {self.name!r}; expected one of {METHODS}")
        if self.name == "fedbif":
            if not 2 <= self.m <= 8:
                raise ConfigError(f"m must be in [2, 8], got {self.m}")
            ActivationSchedule(self.schedule, self.m, 0, self.index, self.k, self.order)
        else:
            self.compressor()

    def compressor(self) -> CompressorKind:
        return CompressorKind(self.name, self.alpha, self.m, self.m_up, self.m_down)

    def schedule_for(self, seed: int) -> ActivationSchedule:
        return ActivationSchedule(self.schedule, self.m, seed, self.index, self.k, self.order)

    def build(self, seed: int):
        if self.name == "fedbif":
            return FedBiF(self.m, self.schedule_for(seed))
        return make_baseline(self.compressor(), seed=seed)


@dataclass(frozen=True)
class DataConfig:
    source: str = "blobs"  # blobs | csv | idx
    samples: int = 6000
    test_samples: int | None = None
    latent_dim: int = 16
    input_dim: int | None = 784
    classes: int = 10
    separation: float = 3.0
    clusters_per_class: int = 5
    train: tuple[str, ...] = ()
    test: tuple[str, ...] = ()

    def __post_init__(self):
        need = {"blobs": 0, "csv": 1, "idx": 2}
        if self.source not in need:
            raise ConfigError(f"unknown data source {self.source!r}; expected blobs, csv or idx")
        if self.source != "blobs" and (len(self.train) != need[self.source] or len(self.test) != need[self.source]):
            raise ConfigError(f"{self.source} data needs {need[self.source]} train and test path(s)")

    def load(self, seed: int) -> tuple[Dataset, Dataset]:
        if self.source == "blobs":
            split = make_blobs(
                self.samples, self.latent_dim, self.classes, self.separation, seed,
                n_test=self.test_samples, clusters_per_class=self.clusters_per_class,
                ambient_dim=self.input_dim,
            )
            return split.train, split.test
        if self.source == "csv":
            train, test = load_csv(self.train[0]), load_csv(self.test[0])
        else:
            train, test = load_idx(*self.train), load_idx(*self.test)
        if train.features.shape[1] != test.features.shape[1]:
            raise DataError("train and test feature widths differ")
        classes = max(train.num_classes, test.num_classes)
        return Dataset(train.features, train.labels, classes), Dataset(test.features, test.labels, classes)


@dataclass(frozen=True)
class PartitionConfig:
    scheme: str = "iid"
    beta: float = 0.3
    fraction: float = 0.3

    def __post_init__(self):
        PartitionSpec(self.scheme, 1, 0, self.beta, self.fraction)

    def spec(self, clients: int, seed: int) -> PartitionSpec:
        return PartitionSpec(self.scheme, clients, seed, self.beta, self.fraction)


@dataclass(frozen=True)
class TrainingConfig:
    clients: int = 8
    clients_per_round: int | None = None
    local_epochs: int = 2
    batch_size: int = 32
    lr: float | None = None
    hidden: tuple[int, ...] = (32,)
    dtype: str = "float32"

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden widths must be positive, got {list(self.hidden)}")
        self.round_config(0.1, 4, ActivationSchedule(), 0)

    def round_config(self, lr: float, m: int, schedule: ActivationSchedule, seed: int) -> RoundConfig:
        return RoundConfig(
            clients_total=self.clients,
            clients_per_round=self.clients_per_round or self.clients,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            lr=lr,
            m=m,
            schedule=schedule,
            seed=seed,
        )


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    method: MethodConfig = field(default_factory=MethodConfig)
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    rounds: int = 60
    seeds: tuple[int, ...] = (0,)
    output: str = "runs"
    save_model: bool = False

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct, got {list(self.seeds)}")
        if not self.name or any(c in self.name for c in "/\\"):
            raise ConfigError(f"run name must be a plain file stem, got {self.name!r}")

    @property
    def lr(self) -> float:
        return DEFAULT_LR[self.method.name] if self.training.lr is None else self.training.lr


# ---------------------------------------------------------------------------
# config files


SECTIONS = {
    "method": MethodConfig,
    "data": DataConfig,
    "partition": PartitionConfig,
    "training": TrainingConfig,
}


def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _coerce(value: Any, hint: Any, where: str) -> Any:
    origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin is typing.Union or str(origin) == "<class 'types.UnionType'>":
        if value is None and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _coerce(value, inner, where)
    if origin is tuple:
        items = value if isinstance(value, list) else [value]
        return tuple(_coerce(v, args[0], where) for v in items)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, (str, int, float)) or isinstance(value, bool):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return str(value)
    raise ConfigError(f"{where}: unsupported field type {hint}")


def _build(cls, values: dict, lines: dict, prefix: str, source: str):
    hints = _hints(cls)
    kwargs = {}
    for key, value in values.items():
        where = f"{source}:{lines.get(prefix + key, '?')}: {prefix}{key}"
        if key not in hints:
            raise ConfigError(f"{where}: unknown key (allowed: {', '.join(hints)})")
        kwargs[key] = _coerce(value, hints[key], where)
    try:
        return cls(**kwargs)
    except FedBiFError as exc:
        # point at the field the message names, else at the section
        named = [k for k in values if str(exc).startswith(k + " ") or f" {k} " in str(exc)]
        key = prefix + named[0] if named else prefix.rstrip(".")
        line = lines.get(key, lines.get(prefix.rstrip("."), "?"))
        raise ConfigError(f"{source}:{line}: {key or 'run'}: {exc}") from None


def _node_tree(node: yaml.Node, path: str, lines: dict) -> Any:
    """Plain Python value of a composed YAML node, recording 1-based key lines."""
    if isinstance(node, yaml.MappingNode):
        out = {}
        for key_node, value_node in node.value:
            key = str(key_node.value)
            full = f"{path}.{key}" if path else key
            if key in out:
                raise ConfigError(f"line {key_node.start_mark.line + 1}: duplicate key {full!r}")
            lines[full] = key_node.start_mark.line + 1
            out[key] = _node_tree(value_node, full, lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_node_tree(v, path, lines) for v in node.value]
    return yaml.safe_load(yaml.serialize(node))


def parse_config(text: str, source: str = "<config>", overrides: Iterable[str] = ()) -> RunConfig:
    """Build a :class:`RunConfig` from YAML text plus ``key.path=value`` overrides."""
    lines: dict[str, Any] = {}
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: not valid YAML ({exc})") from None
    tree = {} if node is None else _node_tree(node, "", lines)
    if not isinstance(tree, dict):
        raise ConfigError(f"{source}: top level must be a mapping of keys")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        parts = key.strip().split(".")
        target = tree
        for p in parts[:-1]:
            target = target.setdefault(p, {})
            if not isinstance(target, dict):
                raise ConfigError(f"override {item!r}: {p!r} is not a section")
        target[parts[-1]] = yaml.safe_load(raw) if raw.strip() else None
        lines[key.strip()] = f"--set {key.strip()}"
        lines.setdefault(parts[0], f"--set {key.strip()}")

    kwargs = {}
    top = _hints(RunConfig)
    for key, value in tree.items():
        where = f"{source}:{lines.get(key, '?')}: {key}"
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: section must be a mapping")
            kwargs[key] = _build(SECTIONS[key], value, lines, key + ".", source)
        elif key in top:
            kwargs[key] = _coerce(value, top[key], where)
        else:
            raise ConfigError(f"{where}: unknown key (allowed: {', '.join(top)})")
    try:
        return RunConfig(**kwargs)
    except FedBiFError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path: str | Path, overrides: Iterable[str] = ()) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path), overrides)


def parse_floor_config(text: str, source: str = "<config>") -> FloorHarnessConfig:
    lines: dict[str, Any] = {}
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: not valid YAML ({exc})") from None
    tree = {} if node is None else _node_tree(node, "", lines)
    if not isinstance(tree, dict):
        raise ConfigError(f"{source}: top level must be a mapping of keys")
    return _build(FloorHarnessConfig, tree, lines, "", source)


# ---------------------------------------------------------------------------
# running


@dataclass
class ExperimentResult:
    config: RunConfig
    records: list[dict]
    summary: dict
    log_path: Path
    summary_path: Path


def output_dir(cfg: RunConfig, override: str | Path | None = None) -> Path:
    """Explicit argument, then ``$FEDBIF_OUTPUT_DIR``, then the config's path."""
    return Path(override or os.environ.get(OUTPUT_ENV) or cfg.output)


def _dtype(cfg: RunConfig):
    return np.float32 if cfg.training.dtype == "float32" else np.float64


def run_seed(cfg: RunConfig, seed: int) -> tuple[list[dict], GlobalModel]:
    """Simulate one seed; returns its per-round records and the final model."""
    train, test = cfg.data.load(seed)
    shards = [train.subset(idx) for idx in partition(train, cfg.partition.spec(cfg.training.clients, seed))]
    widths = [train.features.shape[1], *cfg.training.hidden, train.num_classes]
    model = init_model(MlpSpec(widths, seed=seed))
    method = cfg.method.build(seed)
    rc = cfg.training.round_config(cfg.lr, cfg.method.m, cfg.method.schedule_for(seed), seed)
    state = FederatedState.create(model, shards, test, method, dtype=_dtype(cfg))
    records = []
    for _ in range(cfg.rounds):
        state, metrics = run_round(state, rc)
        records.append({"schema": LOG_SCHEMA, "run": cfg.name, "method": method.label, "seed": seed,
                        **metrics.as_record()})
    return records, state.model


def summarize(records: list[dict]) -> dict:
    """Summary row recomputed purely from per-round records."""
    if not records:
        raise DataError("no records to summarize")
    last_round = max(r["round"] for r in records)
    finals = sorted((r for r in records if r["round"] == last_round), key=lambda r: r["seed"])
    acc = np.array([r["test_accuracy"] for r in finals])
    return {
        "run": finals[0]["run"],
        "method": finals[0]["method"],
        "seeds": len(finals),
        "rounds": last_round + 1,
        "final_accuracy_mean": float(acc.mean()),
        "final_accuracy_std": float(acc.std()),
        "uplink_bpp": float(np.mean([r["uplink_bpp"] for r in finals])),
        "downlink_bpp": float(np.mean([r["downlink_bpp"] for r in finals])),
        "uplink_weight_bpp": float(np.mean([r["uplink_weight_bpp"] for r in finals])),
        "downlink_weight_bpp": float(np.mean([r["downlink_weight_bpp"] for r in finals])),
        "final_sparsity_mean": float(np.mean([r["sparsity"] for r in finals])),
    }


def records_to_jsonl(records: list[dict]) -> str:
    return "".join(json.dumps(r, allow_nan=False) + "\n" for r in records)


def summary_to_csv(summary: dict) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(summary), lineterminator="\n")
    writer.writeheader()
    writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in summary.items()})
    return buf.getvalue()


def save_model(path: str | Path, model: GlobalModel) -> None:
    arrays = {}
    for i, layer in enumerate(model.layers):
        arrays[f"weight{i}"] = layer.weight
        arrays[f"bias{i}"] = layer.bias
    np.savez(path, round=np.int64(model.round), **arrays)


def load_model(path: str | Path) -> GlobalModel:
    try:
        with np.load(path) as z:
            count = sum(1 for k in z.files if k.startswith("weight"))
            layers = [Layer(z[f"weight{i}"], z[f"bias{i}"]) for i in range(count)]
            rnd = int(z["round"]) if "round" in z.files else 0
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load model from {path}: {exc}") from None
    if not layers:
        raise DataError(f"{path} holds no layers")
    return GlobalModel(layers, rnd)


def run_experiment(cfg: RunConfig, output: str | Path | None = None, write: bool = True) -> ExperimentResult:
    out = output_dir(cfg, output)
    records = []
    models = {}
    for seed in cfg.seeds:
        seed_records, model = run_seed(cfg, seed)
        records.extend(seed_records)
        models[seed] = model
    summary = summarize(records)
    log_path = out / f"{cfg.name}.jsonl"
    summary_path = out / f"{cfg.name}_summary.csv"
    if write:
        out.mkdir(parents=True, exist_ok=True)
        log_path.write_text(records_to_jsonl(records))
        summary_path.write_text(summary_to_csv(summary))
        if cfg.save_model:
            for seed, model in models.items():
                save_model(out / f"{cfg.name}_seed{seed}_model.npz", model)
    return ExperimentResult(cfg, records, summary, log_path, summary_path)


def with_method(cfg: RunConfig, **changes) -> RunConfig:
    """Copy of ``cfg`` with some method fields replaced."""
    return replace(cfg, method=replace(cfg.method, **changes))


def config_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]
