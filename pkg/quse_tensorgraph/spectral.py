"""Normalized Laplacians, Chebyshev filter stacks and the 3-D to 4-D lift."""
import enum
import logging
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ShapeMismatchError, TensorGraphError, ValidationError
from .graphs import SpatialTensorGraph, TemporalTensorGraph
from .tensor import as_tensor

logger = logging.getLogger(__name__)

POWER_SHIFT = 2.0
POWER_TOL = 1e-6
POWER_MAX_ITER = 1000
LAMBDA_FLOOR = 1e-6
LAMBDA_CEIL = 2.0 + 1e-6


class Provenance(enum.Enum):
    SPATIAL = "spatial"
    TEMPORAL = "temporal"


@dataclass(frozen=True)
class LambdaMax:
    value: float
    converged: bool = True
    iterations: int = 0


@dataclass(frozen=True)
class ChebyshevStack:
    filters: np.ndarray  # n x n x K
    lambda_max: float

    @property
    def order(self) -> int:
        return self.filters.shape[2]


@dataclass(frozen=True)
class LiftedGraph:
    filters: np.ndarray  # n x n x K x S
    provenance: Provenance

    @property
    def size(self) -> int:
        return self.filters.shape[0]

    @property
    def order(self) -> int:
        return self.filters.shape[2]

    @property
    def num_slices(self) -> int:
        return self.filters.shape[3]

    def stack(self, s: int) -> np.ndarray:
        return self.filters[:, :, :, s]


def _square(m: np.ndarray, name: str) -> np.ndarray:
    m = as_tensor(m, name)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeMismatchError(f"{name} must be a square matrix, got shape {m.shape}")
    return m


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def normalized_laplacian(a: np.ndarray) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2`` with ``D^-1/2 = 0`` on isolated nodes."""
    a = _square(a, "adjacency")
    if np.any(a < 0):
        raise ValidationError("adjacency must be non-negative")
    degree = a.sum(axis=1)
    inv_root = np.zeros_like(degree)
    np.divide(1.0, np.sqrt(degree), out=inv_root, where=degree > 0)
    return np.eye(a.shape[0]) - inv_root[:, None] * a * inv_root[None, :]


def estimate_lambda_max(
    laplacian: np.ndarray, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER
) -> LambdaMax:
    """Largest eigenvalue of a Laplacian by shifted power iteration.

    Iterates on ``L + 2I`` until the unit iterate moves by less than ``tol``.
    Asymmetric input is symmetrized first. Falls back to 2 (with
    ``converged=False``) when the iteration cap is hit.
    """
    lap = _square(laplacian, "laplacian")
    if not np.allclose(lap, lap.T, atol=1e-8, rtol=0.0):
        lap = symmetrize(lap)
    n = lap.shape[0]
    shifted = lap + POWER_SHIFT * np.eye(n)
    vec = np.random.default_rng(0).standard_normal(n)
    vec /= np.linalg.norm(vec)
    for iteration in range(1, max_iter + 1):
        nxt = shifted @ vec
        norm = np.linalg.norm(nxt)
        if norm == 0:
            break
        nxt /= norm
        if np.linalg.norm(nxt - vec) < tol:
            value = float(nxt @ shifted @ nxt) - POWER_SHIFT
            return LambdaMax(float(np.clip(value, LAMBDA_FLOOR, LAMBDA_CEIL)), True, iteration)
        vec = nxt
    logger.warning(
        "Power iteration did not converge in %d steps for a %dx%d Laplacian; using 2",
        max_iter,
        n,
        n,
    )
    return LambdaMax(2.0, False, max_iter)


def scaled_laplacian(laplacian: np.ndarray, lambda_max: float) -> np.ndarray:
    lap = _square(laplacian, "laplacian")
    if not lambda_max > 0:
        raise ValidationError(f"lambda_max must be positive, got {lambda_max}")
    return 2.0 * lap / lambda_max - np.eye(lap.shape[0])


def chebyshev_polynomials(l_hat: np.ndarray, k: int) -> np.ndarray:
    """T_0 .. T_{K-1} evaluated at ``l_hat``, stacked on the last axis."""
    l_hat = _square(l_hat, "scaled laplacian")
    if k < 1:
        raise ValidationError(f"Chebyshev order count must be at least 1, got {k}")
    n = l_hat.shape[0]
    out = np.empty((n, n, k))
    out[:, :, 0] = np.eye(n)
    if k > 1:
        out[:, :, 1] = l_hat
    for order in range(2, k):
        out[:, :, order] = 2.0 * l_hat @ out[:, :, order - 1] - out[:, :, order - 2]
    return out


def chebyshev_stack(laplacian: np.ndarray, lambda_max: float, k: int) -> ChebyshevStack:
    filters = chebyshev_polynomials(scaled_laplacian(laplacian, lambda_max), k)
    return ChebyshevStack(filters=filters, lambda_max=float(lambda_max))


def _slice_stack(adjacency: np.ndarray, k: int, respect_asymmetry: bool) -> ChebyshevStack:
    sym = symmetrize(adjacency)
    lam = estimate_lambda_max(normalized_laplacian(sym)).value
    if respect_asymmetry:
        return chebyshev_stack(normalized_laplacian(adjacency), lam, k)
    return chebyshev_stack(normalized_laplacian(sym), lam, k)


def lift_graph(
    graph: Union[SpatialTensorGraph, TemporalTensorGraph],
    k: int,
    respect_asymmetry: bool = False,
) -> LiftedGraph:
    """Chebyshev-lift every slice of a tensor graph to an n x n x K x S tensor."""
    if k < 1:
        raise ValidationError(f"Chebyshev order count must be at least 1, got {k}")
    provenance = (
        Provenance.SPATIAL if isinstance(graph, SpatialTensorGraph) else Provenance.TEMPORAL
    )
    weights = as_tensor(graph.weights, "graph weights")
    n, _, slices = weights.shape
    filters = np.empty((n, n, k, slices))
    for s in range(slices):
        try:
            filters[:, :, :, s] = _slice_stack(weights[:, :, s], k, respect_asymmetry).filters
        except TensorGraphError as exc:
            raise type(exc)(f"slice {s}: {exc}") from exc
    logger.info("Lifted %s graph to shape %s", provenance.value, filters.shape)
    return LiftedGraph(filters=filters, provenance=provenance)


def identity_lift(n: int, k: int, slices: int, provenance: Provenance) -> LiftedGraph:
    """A lifted graph whose every filter is the identity."""
    filters = np.broadcast_to(np.eye(n)[:, :, None, None], (n, n, k, slices))
    return LiftedGraph(filters=np.ascontiguousarray(filters), provenance=provenance)
