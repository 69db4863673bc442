"""Dense multi-way array primitives.

Tensors are C-contiguous float64 ``numpy.ndarray`` values. Modes are 0-based
axes. The mode-n unfolding moves axis ``n`` to the front and reshapes the rest
in row-major order, so ``fold(unfold(x, n), x.shape, n)`` is the identity.
"""
import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import NumericalError, ShapeMismatchError, ValidationError

logger = logging.getLogger(__name__)


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a float64 array, rejecting NaN and Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def _check_mode(x: np.ndarray, mode: int) -> None:
    if not 0 <= mode < x.ndim:
        raise ShapeMismatchError(
            f"mode {mode} is out of range for a tensor of rank {x.ndim}"
        )


def unfold(x: np.ndarray, mode: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_mode(x, mode)
    return np.ascontiguousarray(np.moveaxis(x, mode, 0).reshape(x.shape[mode], -1))


def fold(matrix: np.ndarray, shape: Sequence[int], mode: int) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    shape = tuple(int(s) for s in shape)
    if not 0 <= mode < len(shape):
        raise ShapeMismatchError(
            f"mode {mode} is out of range for a tensor of rank {len(shape)}"
        )
    rest = shape[:mode] + shape[mode + 1 :]
    expected = (shape[mode], int(np.prod(rest, dtype=np.int64)))
    if matrix.shape != expected:
        raise ShapeMismatchError(
            f"cannot fold a {matrix.shape} matrix into shape {shape} along mode {mode}"
        )
    full = matrix.reshape((shape[mode],) + rest)
    return np.ascontiguousarray(np.moveaxis(full, 0, mode))


def mode_n_product(x: np.ndarray, m: np.ndarray, mode: int) -> np.ndarray:
    """Contract axis ``mode`` of ``x`` with the columns of ``m``."""
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    _check_mode(x, mode)
    if m.ndim != 2 or m.shape[1] != x.shape[mode]:
        raise ShapeMismatchError(
            f"mode {mode}: matrix of shape {m.shape} cannot act on extent {x.shape[mode]}"
        )
    out = np.tensordot(m, x, axes=(1, mode))
    return np.ascontiguousarray(np.moveaxis(out, 0, mode))


def multi_mode_product(
    x: np.ndarray, matrices: Sequence[np.ndarray], transpose: bool = False
) -> np.ndarray:
    """Apply one matrix per mode, in mode order."""
    if len(matrices) != np.ndim(x):
        raise ShapeMismatchError(
            f"expected {np.ndim(x)} matrices, got {len(matrices)}"
        )
    out = x
    for mode, m in enumerate(matrices):
        out = mode_n_product(out, m.T if transpose else m, mode)
    return out


def _fix_signs(u: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # largest-magnitude entry of each left singular vector is non-negative
    if u.size == 0:
        return u, v
    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivots, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, v * signs


def svd(
    m: np.ndarray, full_matrices: bool = False
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(U, S, V)`` with ``m = U @ diag(S) @ V.T``.

    Signs are fixed so that the largest-magnitude entry of every column of
    ``U`` is non-negative, which makes the result deterministic.
    """
    m = as_tensor(m, "matrix")
    if m.ndim != 2:
        raise ShapeMismatchError(f"svd expects a matrix, got rank {m.ndim}")
    try:
        u, s, vh = np.linalg.svd(m, full_matrices=full_matrices)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"SVD did not converge for a {m.shape[0]}x{m.shape[1]} matrix"
        ) from exc
    v = vh.T
    if full_matrices:
        k = min(m.shape)
        u_head, v_head = _fix_signs(u[:, :k], v[:, :k])
        u = np.concatenate([u_head, u[:, k:]], axis=1)
        v = np.concatenate([v_head, v[:, k:]], axis=1)
    else:
        u, v = _fix_signs(u, v)
    return u, s, v


def leading_left_singular_vectors(m: np.ndarray, rank: int) -> np.ndarray:
    u, _, _ = svd(m, full_matrices=rank > min(m.shape))
    return np.ascontiguousarray(u[:, :rank])


@dataclass(frozen=True)
class HosvdFactorization:
    core: np.ndarray
    factors: Tuple[np.ndarray, ...]

    @property
    def ranks(self) -> Tuple[int, ...]:
        return tuple(self.core.shape)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(f.shape[0] for f in self.factors)

    def reconstruct(self) -> np.ndarray:
        return multi_mode_product(self.core, self.factors)


def truncated_hosvd(x: np.ndarray, ranks: Sequence[int]) -> HosvdFactorization:
    x = as_tensor(x)
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != x.ndim:
        raise ShapeMismatchError(
            f"expected {x.ndim} ranks for shape {x.shape}, got {len(ranks)}"
        )
    errors = [
        f"mode {mode}: rank {rank} not in [1, {extent}]"
        for mode, (rank, extent) in enumerate(zip(ranks, x.shape))
        if not 1 <= rank <= extent
    ]
    if errors:
        raise ValidationError(errors)
    factors = tuple(
        leading_left_singular_vectors(unfold(x, mode), rank)
        for mode, rank in enumerate(ranks)
    )
    core = multi_mode_product(x, factors, transpose=True)
    return HosvdFactorization(core=core, factors=factors)


def relative_error(approx: np.ndarray, exact: np.ndarray) -> float:
    norm = np.linalg.norm(exact)
    diff = np.linalg.norm(np.asarray(approx) - np.asarray(exact))
    return float(diff / norm) if norm > 0 else float(diff)


def row_softmax(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def orthonormal_polar(m: np.ndarray) -> np.ndarray:
    """Orthonormal polar factor ``U @ V.T`` of a tall matrix."""
    u, _, v = svd(m)
    return u @ v.T
