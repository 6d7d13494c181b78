import numpy as np

from .nn import GlobalModel
from .quantizer import QuantParams, quantize, wire_step_size


def measure_sparsity(model: GlobalModel, m: int) -> float:
    """Fraction of weights whose m-bit integer (per-layer step size) is exactly 0.

    Uses the same float32 step size the server broadcasts. Zero integers are
    exactly the bit pattern ``(1, 0, ..., 0)``; biases are not counted.
    """
    zeros = total = 0
    for layer in model.layers:
        q = quantize(layer.weight, QuantParams(wire_step_size(layer.weight, m), m))
        zeros += int(np.count_nonzero(q == 0))
        total += q.size
    return zeros / total


def exact_zero_fraction(model: GlobalModel, atol: float = 1e-12) -> float:
    """Fraction of raw weights with ``|w| <= atol``."""
    zeros = sum(int(np.count_nonzero(np.abs(l.weight) <= atol)) for l in model.layers)
    return zeros / model.weight_count
