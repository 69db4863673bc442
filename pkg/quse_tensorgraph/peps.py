"""Joint low-rank compression of an STG/TTG pair through shared bonds.

The STG ``A`` (N x N x T) and the TTG ``B`` (T x T x N) are approximated as

    A ~ core_a x_0 U x_1 U x_2 V        B ~ core_b x_0 V x_1 V x_2 U

with a node factor ``U`` (N x r_N) and a time factor ``V`` (T x r_T), both
with orthonormal columns, shared by the two cores. The shared factors are the
bonds of the entangled pair: each one carries an index that both graphs
contract over. Fitting alternates closed-form core projections with
Procrustes (polar) updates of each factor; a factor update is only accepted
when it does not raise the joint objective.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import List, Tuple, Union

import numpy as np

from .errors import ShapeMismatchError, ValidationError
from .graphs import SpatialTensorGraph, TemporalTensorGraph
from .tensor import (
    as_tensor,
    leading_left_singular_vectors,
    multi_mode_product,
    orthonormal_polar,
    unfold,
)

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-6
DEFAULT_MAX_SWEEPS = 50


@dataclass(frozen=True)
class PepsPair:
    node_factor: np.ndarray  # N x r_N
    time_factor: np.ndarray  # T x r_T
    core_a: np.ndarray  # r_N x r_N x r_T
    core_b: np.ndarray  # r_T x r_T x r_N
    joint_error: float
    sweeps: int = 0
    history: Tuple[float, ...] = ()

    @property
    def ranks(self) -> Tuple[int, int]:
        return self.node_factor.shape[1], self.time_factor.shape[1]

    @property
    def parameter_count(self) -> int:
        n, r_n = self.node_factor.shape
        t, r_t = self.time_factor.shape
        return n * r_n + t * r_t + r_n * r_n * r_t + r_t * r_t * r_n


def default_ranks(n: int, t: int) -> Tuple[int, int]:
    return math.ceil(n / 4), math.ceil(t / 2)


def _weights(g: Union[SpatialTensorGraph, TemporalTensorGraph, np.ndarray], name: str) -> np.ndarray:
    w = g.weights if isinstance(g, (SpatialTensorGraph, TemporalTensorGraph)) else g
    w = as_tensor(w, name)
    if w.ndim != 3 or w.shape[0] != w.shape[1]:
        raise ShapeMismatchError(f"{name} must be an n x n x s tensor, got {w.shape}")
    return w


def _cores(a, b, u, v) -> Tuple[np.ndarray, np.ndarray]:
    core_a = multi_mode_product(a, (u, u, v), transpose=True)
    core_b = multi_mode_product(b, (v, v, u), transpose=True)
    return core_a, core_b


def _reconstruct(core_a, core_b, u, v) -> Tuple[np.ndarray, np.ndarray]:
    return multi_mode_product(core_a, (u, u, v)), multi_mode_product(core_b, (v, v, u))


def _objective(a, b, core_a, core_b, u, v) -> float:
    approx_a, approx_b = _reconstruct(core_a, core_b, u, v)
    return float(np.sum((a - approx_a) ** 2) + np.sum((b - approx_b) ** 2))


def _node_update(a, b, core_a, core_b, u, v) -> np.ndarray:
    # every occurrence of U, with the others held fixed, is a linear LS term
    target = (
        unfold(a, 0) @ unfold(multi_mode_product(core_a, (np.eye(u.shape[1]), u, v)), 0).T
        + unfold(a, 1) @ unfold(multi_mode_product(core_a, (u, np.eye(u.shape[1]), v)), 1).T
        + unfold(b, 2) @ unfold(multi_mode_product(core_b, (v, v, np.eye(u.shape[1]))), 2).T
    )
    return orthonormal_polar(target)


def _time_update(a, b, core_a, core_b, u, v) -> np.ndarray:
    eye = np.eye(v.shape[1])
    target = (
        unfold(a, 2) @ unfold(multi_mode_product(core_a, (u, u, eye)), 2).T
        + unfold(b, 0) @ unfold(multi_mode_product(core_b, (eye, v, u)), 0).T
        + unfold(b, 1) @ unfold(multi_mode_product(core_b, (v, eye, u)), 1).T
    )
    return orthonormal_polar(target)


def peps_fit(
    a: Union[SpatialTensorGraph, np.ndarray],
    b: Union[TemporalTensorGraph, np.ndarray],
    r_n: int,
    r_t: int,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    tol: float = DEFAULT_TOL,
) -> PepsPair:
    a = _weights(a, "spatial graph")
    b = _weights(b, "temporal graph")
    n, t = a.shape[0], b.shape[0]
    if a.shape[2] != t or b.shape[2] != n:
        raise ShapeMismatchError(
            f"graphs do not share extents: STG {a.shape}, TTG {b.shape}"
        )
    errors = []
    if not 1 <= r_n <= n:
        errors.append(f"node rank {r_n} not in [1, {n}]")
    if not 1 <= r_t <= t:
        errors.append(f"time rank {r_t} not in [1, {t}]")
    if max_sweeps < 1:
        errors.append(f"max_sweeps must be at least 1, got {max_sweeps}")
    if not tol > 0:
        errors.append(f"tol must be positive, got {tol}")
    if errors:
        raise ValidationError(errors)

    u = leading_left_singular_vectors(np.concatenate([unfold(a, 0), unfold(a, 1)], axis=1), r_n)
    v = leading_left_singular_vectors(np.concatenate([unfold(b, 0), unfold(b, 1)], axis=1), r_t)
    core_a, core_b = _cores(a, b, u, v)
    current = _objective(a, b, core_a, core_b, u, v)
    history: List[float] = [current]

    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        previous = current
        for update in (_node_update, _time_update):
            result = update(a, b, core_a, core_b, u, v)
            cand_u, cand_v = (result, v) if update is _node_update else (u, result)
            cand_a, cand_b = _cores(a, b, cand_u, cand_v)
            candidate = _objective(a, b, cand_a, cand_b, cand_u, cand_v)
            if candidate <= current:
                u, v, core_a, core_b, current = cand_u, cand_v, cand_a, cand_b, candidate
        history.append(current)
        logger.debug("PEPS sweep %d: objective %.6e", sweeps, current)
        if previous <= np.finfo(float).tiny or (previous - current) / previous < tol:
            break

    logger.info(
        "PEPS fit with ranks (%d, %d) finished after %d sweeps, objective %.6e",
        r_n,
        r_t,
        sweeps,
        current,
    )
    return PepsPair(
        node_factor=u,
        time_factor=v,
        core_a=core_a,
        core_b=core_b,
        joint_error=current,
        sweeps=sweeps,
        history=tuple(history),
    )


def peps_reconstruct(pair: PepsPair) -> Tuple[np.ndarray, np.ndarray]:
    return _reconstruct(pair.core_a, pair.core_b, pair.node_factor, pair.time_factor)


def compression_ratio(pair: PepsPair, n: int, t: int) -> float:
    return (n * n * t + t * t * n) / pair.parameter_count


def peps_graphs(
    pair: PepsPair,
    stg: SpatialTensorGraph,
    ttg: TemporalTensorGraph,
    clamp: bool = True,
) -> Tuple[SpatialTensorGraph, TemporalTensorGraph]:
    """Graphs rebuilt from the pair, clamped at zero unless ``clamp`` is off."""
    approx_a, approx_b = peps_reconstruct(pair)
    if clamp:
        approx_a = np.maximum(approx_a, 0.0)
        approx_b = np.maximum(approx_b, 0.0)
    return replace(stg, weights=approx_a), replace(ttg, weights=approx_b)
