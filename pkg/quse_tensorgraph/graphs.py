"""Spatial and temporal tensor graphs built from windowed training data.

``x`` is always a DataTensor of shape (samples, time, nodes, features).
Distances are mean absolute differences over samples and features; edge
weights come from the thresholded Gaussian kernel ``exp(-d**2 / sigma2)``.
"""
import enum
import logging
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from .errors import DataError, NumericalError, ShapeMismatchError, ValidationError
from .tensor import as_tensor, relu, row_softmax, svd

logger = logging.getLogger(__name__)

DEFAULT_SIGMA2 = 0.1
DEFAULT_EPSILON = 0.5

# boundary weights within this relative slack of epsilon are kept (at epsilon)
_BOUNDARY_SLACK = 1e-12


class GraphMode(enum.Enum):
    KERNEL = "kernel"
    EVOLVED = "evolved"


@dataclass(frozen=True)
class SpatialTensorGraph:
    weights: np.ndarray  # N x N x T
    sigma2: float = DEFAULT_SIGMA2
    epsilon: float = DEFAULT_EPSILON
    mode: GraphMode = GraphMode.EVOLVED

    @property
    def num_nodes(self) -> int:
        return self.weights.shape[0]

    @property
    def num_steps(self) -> int:
        return self.weights.shape[2]


@dataclass(frozen=True)
class TemporalTensorGraph:
    weights: np.ndarray  # T x T x N
    sigma2: float = DEFAULT_SIGMA2
    epsilon: float = DEFAULT_EPSILON
    mode: GraphMode = GraphMode.KERNEL

    @property
    def num_nodes(self) -> int:
        return self.weights.shape[2]

    @property
    def num_steps(self) -> int:
        return self.weights.shape[0]


def _check_kernel_params(sigma2: float, epsilon: float) -> None:
    errors = []
    if not sigma2 > 0:
        errors.append(f"sigma2 must be positive, got {sigma2}")
    if not 0 < epsilon <= 1:
        errors.append(f"epsilon must lie in (0, 1], got {epsilon}")
    if errors:
        raise ValidationError(errors)


def kernel_weight(d, sigma2: float = DEFAULT_SIGMA2, epsilon: float = DEFAULT_EPSILON):
    """Thresholded Gaussian kernel, elementwise.

    Returns ``exp(-d**2 / sigma2)`` where that value is at least ``epsilon``
    and 0 elsewhere. Works on scalars and arrays; the zero-diagonal guard is
    the caller's job.
    """
    _check_kernel_params(sigma2, epsilon)
    d_arr = np.asarray(d, dtype=np.float64)
    if np.any(d_arr < 0):
        raise ValidationError("distances must be non-negative")
    w = np.exp(-(d_arr**2) / sigma2)
    kept = w >= epsilon * (1.0 - _BOUNDARY_SLACK)
    out = np.where(kept, np.clip(w, epsilon, 1.0), 0.0)
    if np.ndim(d) == 0:
        return float(out)
    return out


def _check_data(x: np.ndarray) -> np.ndarray:
    x = as_tensor(x, "data tensor")
    if x.ndim != 4:
        raise ShapeMismatchError(
            f"data tensor must have 4 modes (samples, time, nodes, features), got {x.ndim}"
        )
    if x.shape[0] == 0:
        raise DataError("training split is empty")
    return x


def spatial_distance(x: np.ndarray, i: int, j: int, t: int) -> float:
    x = _check_data(x)
    _, steps, nodes, _ = x.shape
    if not (0 <= i < nodes and 0 <= j < nodes):
        raise ValidationError(f"node indices ({i}, {j}) outside [0, {nodes})")
    if not 0 <= t < steps:
        raise ValidationError(f"time index {t} outside [0, {steps})")
    if i == j:
        return 0.0
    return float(np.mean(np.abs(x[:, t, i, :] - x[:, t, j, :])))


def spatial_distances(x: np.ndarray) -> np.ndarray:
    """All pairwise d_ijt as an N x N x T tensor."""
    x = _check_data(x)
    _, steps, nodes, _ = x.shape
    out = np.empty((nodes, nodes, steps))
    for t in range(steps):
        slab = x[:, t]  # samples x nodes x features
        out[:, :, t] = np.abs(slab[:, :, None, :] - slab[:, None, :, :]).mean(axis=(0, 3))
    return out


def temporal_distances(x: np.ndarray) -> np.ndarray:
    """All pairwise d(t1, t2, n) as a T x T x N tensor."""
    x = _check_data(x)
    _, steps, nodes, _ = x.shape
    out = np.empty((steps, steps, nodes))
    for n in range(nodes):
        slab = x[:, :, n]  # samples x time x features
        out[:, :, n] = np.abs(slab[:, :, None, :] - slab[:, None, :, :]).mean(axis=(0, 3))
    return out


def _kernel_slices(distances: np.ndarray, sigma2: float, epsilon: float) -> np.ndarray:
    w = kernel_weight(distances, sigma2, epsilon)
    size = distances.shape[0]
    w[np.arange(size), np.arange(size), :] = 0.0
    return w


def build_initial_stg(
    x: np.ndarray, sigma2: float = DEFAULT_SIGMA2, epsilon: float = DEFAULT_EPSILON
) -> np.ndarray:
    """Kernel slice at the first time step, the seed of the evolution."""
    x = _check_data(x)
    return _kernel_slices(spatial_distances(x[:, :1]), sigma2, epsilon)[:, :, 0]


def build_kernel_stg(
    x: np.ndarray, sigma2: float = DEFAULT_SIGMA2, epsilon: float = DEFAULT_EPSILON
) -> SpatialTensorGraph:
    weights = _kernel_slices(spatial_distances(x), sigma2, epsilon)
    return SpatialTensorGraph(weights, sigma2, epsilon, GraphMode.KERNEL)


def evolution_increment(a: np.ndarray, embed_rank: int) -> np.ndarray:
    """SoftMax(ReLU(E1 @ E2.T)) with E1 = U_k sqrt(S_k), E2 = V_k sqrt(S_k)."""
    u, s, v = svd(a)
    k = min(embed_rank, s.size)
    root = np.sqrt(s[:k])
    e1 = u[:, :k] * root
    e2 = v[:, :k] * root
    return row_softmax(relu(e1 @ e2.T))


def evolve_slices(a0: np.ndarray, t_steps: int, embed_rank: int, step: float) -> np.ndarray:
    a0 = as_tensor(a0, "initial slice")
    if a0.ndim != 2 or a0.shape[0] != a0.shape[1]:
        raise ShapeMismatchError(f"initial slice must be square, got {a0.shape}")
    errors = []
    if t_steps < 1:
        errors.append(f"t_steps must be at least 1, got {t_steps}")
    if not 1 <= embed_rank <= a0.shape[0]:
        errors.append(f"embed_rank must lie in [1, {a0.shape[0]}], got {embed_rank}")
    if step < 0:
        errors.append(f"step must be non-negative, got {step}")
    if errors:
        raise ValidationError(errors)
    out = np.empty(a0.shape + (t_steps,))
    out[:, :, 0] = a0
    for t in range(1, t_steps):
        try:
            delta = evolution_increment(out[:, :, t - 1], embed_rank)
        except NumericalError as exc:
            raise NumericalError(f"graph evolution failed at time step {t}: {exc}") from exc
        out[:, :, t] = out[:, :, t - 1] + step * delta
    return out


def evolve_stg(
    a0: np.ndarray,
    t_steps: int,
    embed_rank: int = 10,
    step: float = 1.0,
    sigma2: float = DEFAULT_SIGMA2,
    epsilon: float = DEFAULT_EPSILON,
) -> SpatialTensorGraph:
    weights = evolve_slices(a0, t_steps, min(embed_rank, np.shape(a0)[0]), step)
    return SpatialTensorGraph(weights, sigma2, epsilon, GraphMode.EVOLVED)


def build_stg(
    x: np.ndarray,
    sigma2: float = DEFAULT_SIGMA2,
    epsilon: float = DEFAULT_EPSILON,
    mode: GraphMode = GraphMode.EVOLVED,
    embed_rank: int = 10,
    step: float = 1.0,
) -> SpatialTensorGraph:
    mode = GraphMode(mode)
    if mode is GraphMode.KERNEL:
        graph = build_kernel_stg(x, sigma2, epsilon)
    else:
        x = _check_data(x)
        a0 = build_initial_stg(x, sigma2, epsilon)
        graph = evolve_stg(a0, x.shape[1], embed_rank, step, sigma2, epsilon)
    logger.info(
        "Built %s STG with %d nodes over %d steps", mode.value, graph.num_nodes, graph.num_steps
    )
    return graph


def build_ttg(
    x: np.ndarray,
    sigma2: float = DEFAULT_SIGMA2,
    epsilon: float = DEFAULT_EPSILON,
    mode: GraphMode = GraphMode.KERNEL,
    embed_rank: int = 10,
    step: float = 1.0,
) -> TemporalTensorGraph:
    """Per-node step x step kernel slices.

    In evolved mode every node slice takes one evolution step from its own
    kernel slice: ``B[:, :, n] = K_n + step * SoftMax(ReLU(E1 E2^T))`` with
    the embeddings taken from ``K_n``.
    """
    x = _check_data(x)
    if x.shape[1] < 2:
        raise ValidationError(f"TTG needs at least 2 time steps, got {x.shape[1]}")
    mode = GraphMode(mode)
    weights = _kernel_slices(temporal_distances(x), sigma2, epsilon)
    if mode is GraphMode.EVOLVED:
        rank = min(embed_rank, x.shape[1])
        if rank < 1 or step < 0:
            raise ValidationError(f"embed_rank must be positive and step non-negative, got {embed_rank}, {step}")
        weights = np.stack(
            [weights[:, :, n] + step * evolution_increment(weights[:, :, n], rank) for n in range(weights.shape[2])],
            axis=2,
        )
    logger.info(
        "Built %s TTG over %d steps for %d nodes", mode.value, weights.shape[0], weights.shape[2]
    )
    return TemporalTensorGraph(weights, sigma2, epsilon, mode)


def graph_summary(weights: np.ndarray) -> Dict[str, List[float]]:
    """Per-slice off-diagonal density and the overall entry range."""
    weights = np.asarray(weights, dtype=np.float64)
    size = weights.shape[0]
    off = ~np.eye(size, dtype=bool)
    pairs = max(size * (size - 1), 1)
    density = [
        float(np.count_nonzero(weights[:, :, s][off]) / pairs)
        for s in range(weights.shape[2])
    ]
    return {
        "density": density,
        "min": float(weights.min()) if weights.size else 0.0,
        "max": float(weights.max()) if weights.size else 0.0,
    }
