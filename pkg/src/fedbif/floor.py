"""Error floor versus bit width on a convex least-squares problem.

Every bit of every weight is trainable (nothing is frozen). The trainable state
is a latent real vector ``v``; the model used for each gradient is its m-bit
rounding ``w = alpha * (sum_i 2**i b_i - 2**(m-1))`` where ``b_i`` are the bit
planes of ``round(v / alpha)``, and the gradient passes straight through
(``dw/dv = 1``). The step size decays as ``c / sqrt(t)`` and the objective gap
is measured at the quantized running average of ``v``.

Two full-precision runs anchor the table: a full-batch gradient-descent
*control* that must land on the normal-equations optimum (validating the
harness itself) and a minibatch SGD *reference* that shares the quantized
runs' sample stream.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .bitfreeze import decompose, recompose
from .errors import SpecificationError
from .quantizer import QuantParams, int_range, quantize

log = logging.getLogger(__name__)

CONTROL_GAP_TOL = 1e-6
CONTROL_PARAM_TOL = 1e-8
MAX_CONDITION = 1e8
_REGEN_TAG = 0x5EED


@dataclass(frozen=True)
class FloorHarnessConfig:
    m_values: tuple[int, ...] = (2, 4, 6, 8)
    dim: int = 10
    samples: int = 500
    rounds: int = 2000
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    c: float = 0.5  # step constant, in units of 1 / L
    batch_size: int = 8
    noise: float = 1.0
    margin: float = 1.25  # P = margin * ||w*||_inf
    control_rounds: int = 3000

    def __post_init__(self):
        object.__setattr__(self, "m_values", tuple(int(m) for m in self.m_values))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if len(self.m_values) < 2:
            raise SpecificationError("the floor harness needs at least two bit widths")
        if any(not 2 <= m <= 8 for m in self.m_values):
            raise SpecificationError(f"bit widths must be in [2, 8], got {self.m_values}")
        if not self.seeds:
            raise SpecificationError("need at least one seed")
        for name in ("dim", "samples", "rounds", "batch_size", "control_rounds"):
            if getattr(self, name) < 1:
                raise SpecificationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.samples < self.dim:
            raise SpecificationError(f"need samples >= dim for a unique optimum ({self.samples} < {self.dim})")
        if not (self.c > 0 and self.margin >= 1 and self.noise >= 0):
            raise SpecificationError("need c > 0, margin >= 1 and noise >= 0")


@dataclass
class LeastSquares:
    x: np.ndarray
    y: np.ndarray
    seed: int  # seed actually used after any regeneration

    def objective(self, w: np.ndarray) -> float:
        r = self.x @ w - self.y
        return 0.5 * float(r @ r) / len(self.y)

    def gradient(self, w: np.ndarray, idx: np.ndarray | None = None) -> np.ndarray:
        x, y = (self.x, self.y) if idx is None else (self.x[idx], self.y[idx])
        return x.T @ (x @ w - y) / len(y)

    @property
    def smoothness(self) -> float:
        return float(np.linalg.eigvalsh(self.x.T @ self.x / len(self.y)).max())

    def optimum(self) -> np.ndarray:
        """Closed-form minimizer from the normal equations."""
        return np.linalg.solve(self.x.T @ self.x, self.x.T @ self.y)


def make_problem(dim: int, samples: int, noise: float, seed: int) -> LeastSquares:
    """Gaussian design with a planted solution; ill-conditioned draws are redrawn."""
    s = seed
    for attempt in range(100):
        rng = np.random.default_rng(s)
        x = rng.normal(size=(samples, dim))
        w = rng.normal(size=dim)
        y = x @ w + noise * rng.normal(size=samples)
        if np.linalg.cond(x) < MAX_CONDITION:
            return LeastSquares(x, y, s)
        log.warning("design matrix for seed %d is near-singular; regenerating", s)
        s = int(np.random.default_rng([seed, attempt, _REGEN_TAG]).integers(2**31))
    raise SpecificationError(f"could not draw a well-conditioned design for seed {seed}")


def bit_rounding(w: np.ndarray, alpha: float, m: int) -> np.ndarray:
    """``w`` mapped onto the m-bit grid via its bit planes."""
    planes = decompose(quantize(w, QuantParams(alpha, m)), m)
    return alpha * recompose(planes).astype(np.float64)


def decayed_sgd(
    problem: LeastSquares,
    rounds: int,
    c: float,
    batches: np.ndarray | None,
    project=None,
) -> tuple[np.ndarray, np.ndarray]:
    """SGD with ``eta_t = c / (L sqrt t)``; returns (last, mean) iterates.

    ``batches`` holds one row of sample indices per step (``None`` for full
    batch). ``project`` maps the latent iterate to the model the gradient is
    taken at; the returned iterates are latent.
    """
    project = project or (lambda w: w)
    step = c / problem.smoothness
    w = np.zeros(problem.x.shape[1])
    total = np.zeros_like(w)
    for t in range(1, rounds + 1):
        idx = None if batches is None else batches[t - 1]
        w = w - step / np.sqrt(t) * problem.gradient(project(w), idx)
        total += w
    return w, total / rounds


@dataclass
class FloorRow:
    m: int
    gaps: list[float]

    @property
    def mean_gap(self) -> float:
        return float(np.mean(self.gaps))


@dataclass
class FloorSummary:
    rows: list[FloorRow]
    fp32_gaps: list[float]
    control_gaps: list[float]
    control_distances: list[float]
    seeds_used: list[int] = field(default_factory=list)

    @property
    def fp32_gap(self) -> float:
        return float(np.mean(self.fp32_gaps))

    @property
    def validated(self) -> bool:
        return max(self.control_gaps) <= CONTROL_GAP_TOL and max(self.control_distances) <= CONTROL_PARAM_TOL

    def gap(self, m: int) -> float:
        for row in self.rows:
            if row.m == m:
                return row.mean_gap
        raise KeyError(m)

    def table(self) -> list[dict]:
        out = [{"m": r.m, "mean_gap": r.mean_gap, "std_gap": float(np.std(r.gaps)),
                "ratio_to_fp32": r.mean_gap / self.fp32_gap if self.fp32_gap > 0 else float("inf")}
               for r in self.rows]
        out.append({"m": 32, "mean_gap": self.fp32_gap, "std_gap": float(np.std(self.fp32_gaps)),
                    "ratio_to_fp32": 1.0})
        return out


def run_floor_harness(cfg: FloorHarnessConfig) -> FloorSummary:
    rows = {m: FloorRow(m, []) for m in cfg.m_values}
    fp32, control, dist, used = [], [], [], []
    for seed in cfg.seeds:
        problem = make_problem(cfg.dim, cfg.samples, cfg.noise, seed)
        used.append(problem.seed)
        w_star = problem.optimum()
        f_star = problem.objective(w_star)

        last, _ = decayed_sgd(problem, cfg.control_rounds, cfg.c, None)
        control.append(problem.objective(last) - f_star)
        dist.append(float(np.max(np.abs(last - w_star))))

        batches = np.random.default_rng([problem.seed, 1]).integers(
            cfg.samples, size=(cfg.rounds, cfg.batch_size)
        )
        _, mean = decayed_sgd(problem, cfg.rounds, cfg.c, batches)
        fp32.append(problem.objective(mean) - f_star)

        bound = cfg.margin * float(np.max(np.abs(w_star)))
        for m in cfg.m_values:
            alpha = bound / (1 << (m - 1))
            project = lambda w, a=alpha, m=m: bit_rounding(w, a, m)  # noqa: E731
            _, mean = decayed_sgd(problem, cfg.rounds, cfg.c, batches, project)
            rows[m].gaps.append(problem.objective(project(mean)) - f_star)
    return FloorSummary(list(rows.values()), fp32, control, dist, used)


def reachable_levels_all_bits_identity(v0: np.ndarray, alpha: float, m: int, drift: np.ndarray) -> np.ndarray:
    """Values one weight can take when each of its ``m`` virtual bits is its own
    trainable real and all receive the same straight-through gradient.

    ``v0`` holds the ``m`` initial virtual bits (LSB first) and ``drift`` the
    cumulative gradient values to probe. Every bit moves in lockstep, so bit
    ``i`` is on exactly while ``v0[i] - drift > 0``; the weight is therefore a
    monotone step function of the drift with at most ``m + 1`` distinct
    values, regardless of ``m``. This is why the harness trains a latent
    full-precision value instead of per-bit reals.
    """
    lo, _ = int_range(m)
    on = (v0[None, :] - np.asarray(drift, dtype=np.float64)[:, None]) > 0
    return alpha * (on @ (1 << np.arange(m)) + lo)
