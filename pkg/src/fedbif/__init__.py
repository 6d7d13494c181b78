"""Federated bit freezing: clients train one bit plane of a quantized model.

Layers, bottom up: :mod:`nn` (numpy MLP), :mod:`quantizer`, :mod:`bitfreeze`
(bit planes and virtual bits), :mod:`wire` (payload codecs and bpp
accounting), :mod:`protocol` (rounds), :mod:`baselines`, :mod:`data`,
:mod:`floor` (least-squares error-floor harness) and :mod:`experiments`.
"""

from .baselines import LFL, CompressorKind, FedAvg, FedPAQ, SignSGD, make_baseline
from .bitfreeze import ActivationSchedule, decompose, next_activated, reconstruct, recompose
from .data import Dataset, PartitionSpec, make_blobs, partition
from .errors import FedBiFError
from .experiments import RunConfig, load_config, parse_config, run_experiment
from .floor import FloorHarnessConfig, run_floor_harness
from .nn import GlobalModel, Layer, MlpSpec, init_model
from .protocol import FedBiF, FederatedState, RoundConfig, run_round
from .quantizer import QuantParams, dequantize, quantize, step_size
from .sparsity import measure_sparsity
from .wire import WireStats, bpp, decode, encode

__version__ = "0.1.0"

__all__ = [
    "ActivationSchedule", "CompressorKind", "Dataset", "FedAvg", "FedBiF", "FedBiFError", "FedPAQ",
    "FederatedState", "FloorHarnessConfig", "GlobalModel", "LFL", "Layer", "MlpSpec", "PartitionSpec",
    "QuantParams", "RoundConfig", "RunConfig", "SignSGD", "WireStats", "bpp", "decode", "decompose",
    "dequantize", "encode", "init_model", "load_config", "make_baseline", "make_blobs",
    "measure_sparsity", "next_activated", "parse_config", "partition", "quantize", "reconstruct",
    "recompose", "run_experiment", "run_floor_harness", "run_round", "step_size",
]
