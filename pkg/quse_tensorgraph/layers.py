"""Spatial/temporal graph convolution layers and the Tucker-fused variant.

Data flows as (samples, time, nodes, channels). Filter index ``k`` and input
channel ``c`` are merged k-major into the first kernel mode (``k * C_i + c``),
so the Chebyshev coefficients live inside the kernel tensors.
"""
import enum
import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .errors import ShapeMismatchError, ValidationError
from .spectral import LiftedGraph
from .tensor import relu, truncated_hosvd

logger = logging.getLogger(__name__)

LAYOUT_K_MAJOR = 0


class Composition(enum.Enum):
    SEQUENTIAL = "sequential"
    SANDWICH = "sandwich"
    ADDITIVE = "additive"


class Activation(enum.Enum):
    NONE = "none"
    RELU = "relu"


@dataclass(frozen=True)
class LayerConfig:
    composition: Composition = Composition.SEQUENTIAL
    activation: Activation = Activation.NONE

    @property
    def needs_second_temporal(self) -> bool:
        return self.composition is not Composition.SEQUENTIAL


@dataclass(frozen=True)
class SpatialKernel:
    w: np.ndarray  # (C_i * K_A) x C_o x T
    order: int

    def __post_init__(self):
        _check_kernel(self.w, self.order, "spatial")

    @property
    def in_channels(self) -> int:
        return self.w.shape[0] // self.order

    @property
    def out_channels(self) -> int:
        return self.w.shape[1]


@dataclass(frozen=True)
class TemporalKernel:
    w: np.ndarray  # (C'_i * K_B) x C'_o x N
    order: int

    def __post_init__(self):
        _check_kernel(self.w, self.order, "temporal")

    @property
    def in_channels(self) -> int:
        return self.w.shape[0] // self.order

    @property
    def out_channels(self) -> int:
        return self.w.shape[1]


def _check_kernel(w: np.ndarray, order: int, kind: str) -> None:
    if np.ndim(w) != 3:
        raise ShapeMismatchError(f"{kind} kernel must have 3 modes, got {np.ndim(w)}")
    if order < 1 or w.shape[0] % order:
        raise ShapeMismatchError(
            f"{kind} kernel first extent {w.shape[0]} is not a multiple of order {order}"
        )
    if not np.all(np.isfinite(w)):
        raise ValidationError(f"{kind} kernel contains non-finite values")


Graph = Union[LiftedGraph, np.ndarray]
Kernel = Union[SpatialKernel, TemporalKernel, np.ndarray]


def _filters(g: Graph) -> np.ndarray:
    return g.filters if isinstance(g, LiftedGraph) else np.asarray(g, dtype=np.float64)


def _weights(w: Kernel) -> np.ndarray:
    if isinstance(w, (SpatialKernel, TemporalKernel)):
        return w.w
    return np.asarray(w, dtype=np.float64)


def _check_data(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeMismatchError(f"data must have 4 modes, got {x.ndim}")
    return x


def _check_spatial(x: np.ndarray, a4: np.ndarray, w: np.ndarray) -> int:
    _, steps, nodes, channels = x.shape
    if a4.ndim != 4 or a4.shape[:2] != (nodes, nodes) or a4.shape[3] != steps:
        raise ShapeMismatchError(
            f"spatial filters of shape {a4.shape} do not fit {nodes} nodes and {steps} steps"
        )
    k = a4.shape[2]
    if w.ndim != 3 or w.shape[0] != channels * k or w.shape[2] != steps:
        raise ShapeMismatchError(
            f"spatial kernel of shape {w.shape} expected first extent {channels * k} "
            f"(channels {channels} x order {k}) and last extent {steps} (time)"
        )
    return k


def _check_temporal(x: np.ndarray, b4: np.ndarray, w: np.ndarray) -> int:
    _, steps, nodes, channels = x.shape
    if b4.ndim != 4 or b4.shape[:2] != (steps, steps) or b4.shape[3] != nodes:
        raise ShapeMismatchError(
            f"temporal filters of shape {b4.shape} do not fit {steps} steps and {nodes} nodes"
        )
    k = b4.shape[2]
    if w.ndim != 3 or w.shape[0] != channels * k or w.shape[2] != nodes:
        raise ShapeMismatchError(
            f"temporal kernel of shape {w.shape} expected first extent {channels * k} "
            f"(channels {channels} x order {k}) and last extent {nodes} (nodes)"
        )
    return k


# Both layers run slice by slice: the data is moved to (slices, rows, samples,
# channels) so that every graph slice is one batched matmul. The spatial layer
# slices over time steps with nodes as rows; the temporal layer slices over
# nodes with time steps as rows.
_SPATIAL_AXES = (1, 2, 0, 3)
_SPATIAL_BACK = (2, 0, 1, 3)
_TEMPORAL_AXES = (2, 1, 0, 3)
_TEMPORAL_BACK = (2, 1, 0, 3)


def _slice_filters(g4: np.ndarray) -> np.ndarray:
    """(n, n, K, S) filters as (S, K * n, n), row ``k * n + i``."""
    n, _, k, slices = g4.shape
    return g4.transpose(3, 2, 0, 1).reshape(slices, k * n, n)


def _graph_features(x: np.ndarray, g4: np.ndarray, axes) -> Tuple[np.ndarray, np.ndarray]:
    """Slice-major input (S, n, b * C) and filtered features (S, n * b, K * C)."""
    xs = x.transpose(axes)
    slices, n, b, channels = xs.shape
    k = g4.shape[2]
    flat = xs.reshape(slices, n, b * channels)
    z = np.matmul(_slice_filters(g4), flat).reshape(slices, k, n, b, channels)
    return flat, z.transpose(0, 2, 3, 1, 4).reshape(slices, n * b, k * channels)


def _conv_forward(x: np.ndarray, g4: np.ndarray, w: np.ndarray, axes, back) -> np.ndarray:
    _, z = _graph_features(x, g4, axes)
    slices, n, b = x.shape[axes[0]], x.shape[axes[1]], x.shape[0]
    out = np.matmul(z, w.transpose(2, 0, 1))
    return np.ascontiguousarray(out.reshape(slices, n, b, w.shape[1]).transpose(back))


def _conv_backward(
    x: np.ndarray, g4: np.ndarray, w: np.ndarray, grad_out: np.ndarray, axes, back, with_graph: bool
) -> "LayerGradients":
    expected = x.shape[:3] + (w.shape[1],)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != expected:
        raise ShapeMismatchError(f"output gradient of shape {grad_out.shape}, expected {expected}")
    flat, z = _graph_features(x, g4, axes)
    slices, n, b, channels = x.shape[axes[0]], x.shape[axes[1]], x.shape[0], x.shape[3]
    k = g4.shape[2]
    ws = w.transpose(2, 0, 1)
    g = grad_out.transpose(axes).reshape(slices, n * b, w.shape[1])
    grad_w = np.matmul(z.transpose(0, 2, 1), g).transpose(1, 2, 0)
    grad_z = np.matmul(g, ws.transpose(0, 2, 1)).reshape(slices, n, b, k, channels)
    grad_z = grad_z.transpose(0, 3, 1, 2, 4).reshape(slices, k * n, b * channels)
    grad_x = np.matmul(_slice_filters(g4).transpose(0, 2, 1), grad_z)
    grad_x = grad_x.reshape(slices, n, b, channels).transpose(back)
    grad_g4 = None
    if with_graph:
        grad_g4 = np.matmul(grad_z, flat.transpose(0, 2, 1)).reshape(slices, k, n, n)
        grad_g4 = np.ascontiguousarray(grad_g4.transpose(2, 3, 1, 0))
    return LayerGradients(
        x=np.ascontiguousarray(grad_x), w=np.ascontiguousarray(grad_w), graph=grad_g4
    )


def sgcl_forward(x: np.ndarray, a4: Graph, w: Kernel) -> np.ndarray:
    """Per time step: filter along nodes, then mix (order, channel) features."""
    x, a4, w = _check_data(x), _filters(a4), _weights(w)
    _check_spatial(x, a4, w)
    return _conv_forward(x, a4, w, _SPATIAL_AXES, _SPATIAL_BACK)


def tgcl_forward(x: np.ndarray, b4: Graph, w: Kernel) -> np.ndarray:
    """Per node: filter along time, then mix (order, channel) features."""
    x, b4, w = _check_data(x), _filters(b4), _weights(w)
    _check_temporal(x, b4, w)
    return _conv_forward(x, b4, w, _TEMPORAL_AXES, _TEMPORAL_BACK)


@dataclass(frozen=True)
class LayerGradients:
    x: np.ndarray
    w: np.ndarray
    graph: Optional[np.ndarray] = None


def sgcl_backward(
    x: np.ndarray, a4: Graph, w: Kernel, grad_out: np.ndarray, with_graph: bool = False
) -> LayerGradients:
    x, a4, w = _check_data(x), _filters(a4), _weights(w)
    _check_spatial(x, a4, w)
    return _conv_backward(x, a4, w, grad_out, _SPATIAL_AXES, _SPATIAL_BACK, with_graph)


def tgcl_backward(
    x: np.ndarray, b4: Graph, w: Kernel, grad_out: np.ndarray, with_graph: bool = False
) -> LayerGradients:
    x, b4, w = _check_data(x), _filters(b4), _weights(w)
    _check_temporal(x, b4, w)
    return _conv_backward(x, b4, w, grad_out, _TEMPORAL_AXES, _TEMPORAL_BACK, with_graph)


def _require_second(w_b2: Optional[Kernel], config: LayerConfig) -> None:
    if config.needs_second_temporal and w_b2 is None:
        raise ValidationError(
            f"{config.composition.value} composition needs a second temporal kernel"
        )


def _stgcl_linear(x, a4, b4, w_a, w_b, w_b2, config: LayerConfig) -> np.ndarray:
    if config.composition is Composition.SEQUENTIAL:
        return sgcl_forward(tgcl_forward(x, b4, w_b), a4, w_a)
    if config.composition is Composition.SANDWICH:
        return tgcl_forward(sgcl_forward(tgcl_forward(x, b4, w_b), a4, w_a), b4, w_b2)
    first = tgcl_forward(x, b4, w_b)
    spatial = sgcl_forward(x, a4, w_a)
    if first.shape != spatial.shape:
        raise ShapeMismatchError(
            f"additive terms disagree: temporal {first.shape} vs spatial {spatial.shape}"
        )
    return first + spatial + tgcl_forward(x, b4, w_b2)


def stgcl_forward(
    x: np.ndarray,
    a4: Graph,
    b4: Graph,
    w_a: Kernel,
    w_b: Kernel,
    w_b2: Optional[Kernel] = None,
    config: LayerConfig = LayerConfig(),
) -> np.ndarray:
    _require_second(w_b2, config)
    out = _stgcl_linear(x, a4, b4, w_a, w_b, w_b2, config)
    if config.activation is Activation.RELU:
        out = relu(out)
    return out


@dataclass(frozen=True)
class StgclGradients:
    x: np.ndarray
    w_a: np.ndarray
    w_b: np.ndarray
    w_b2: Optional[np.ndarray] = None
    a4: Optional[np.ndarray] = None
    b4: Optional[np.ndarray] = None


def _add(a: Optional[np.ndarray], b: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def stgcl_backward(
    x: np.ndarray,
    a4: Graph,
    b4: Graph,
    w_a: Kernel,
    w_b: Kernel,
    w_b2: Optional[Kernel],
    config: LayerConfig,
    grad_out: np.ndarray,
    with_graph: bool = False,
) -> StgclGradients:
    """Gradients of ``<grad_out, stgcl_forward(...)>`` w.r.t. every input."""
    _require_second(w_b2, config)
    g = np.asarray(grad_out, dtype=np.float64)
    if config.activation is Activation.RELU:
        pre = _stgcl_linear(x, a4, b4, w_a, w_b, w_b2, config)
        g = g * (pre > 0)

    if config.composition is Composition.SEQUENTIAL:
        h1 = tgcl_forward(x, b4, w_b)
        spatial = sgcl_backward(h1, a4, w_a, g, with_graph)
        temporal = tgcl_backward(x, b4, w_b, spatial.x, with_graph)
        return StgclGradients(
            x=temporal.x,
            w_a=spatial.w,
            w_b=temporal.w,
            a4=spatial.graph,
            b4=temporal.graph,
        )

    if config.composition is Composition.SANDWICH:
        h1 = tgcl_forward(x, b4, w_b)
        h2 = sgcl_forward(h1, a4, w_a)
        outer = tgcl_backward(h2, b4, w_b2, g, with_graph)
        spatial = sgcl_backward(h1, a4, w_a, outer.x, with_graph)
        inner = tgcl_backward(x, b4, w_b, spatial.x, with_graph)
        return StgclGradients(
            x=inner.x,
            w_a=spatial.w,
            w_b=inner.w,
            w_b2=outer.w,
            a4=spatial.graph,
            b4=_add(inner.graph, outer.graph),
        )

    first = tgcl_backward(x, b4, w_b, g, with_graph)
    spatial = sgcl_backward(x, a4, w_a, g, with_graph)
    third = tgcl_backward(x, b4, w_b2, g, with_graph)
    return StgclGradients(
        x=first.x + spatial.x + third.x,
        w_a=spatial.w,
        w_b=first.w,
        w_b2=third.w,
        a4=spatial.graph,
        b4=_add(first.graph, third.graph),
    )


def effective_spatial_map(a4: Graph, w_a: Kernel) -> np.ndarray:
    """[A W_A] as a (T, N, C_o, N, C_i) tensor: out node/channel by in node/channel."""
    a4, w = _filters(a4), _weights(w_a)
    k = a4.shape[2]
    if w.shape[0] % k or w.shape[2] != a4.shape[3]:
        raise ShapeMismatchError(
            f"spatial kernel {w.shape} does not match filters {a4.shape}"
        )
    wr = w.reshape(k, w.shape[0] // k, w.shape[1], w.shape[2])
    return np.einsum("njkt,kcot->tnojc", a4, wr, optimize=True)


def effective_temporal_map(b4: Graph, w_b: Kernel) -> np.ndarray:
    """[B W_B] as a (N, T, C'_o, T, C'_i) tensor: out step/channel by in step/channel."""
    b4, w = _filters(b4), _weights(w_b)
    k = b4.shape[2]
    if w.shape[0] % k or w.shape[2] != b4.shape[3]:
        raise ShapeMismatchError(
            f"temporal kernel {w.shape} does not match filters {b4.shape}"
        )
    wr = w.reshape(k, w.shape[0] // k, w.shape[1], w.shape[2])
    return np.einsum("tskn,kcon->ntosc", b4, wr, optimize=True)


def compress_map(effective: np.ndarray, rank: int) -> np.ndarray:
    """Truncated-HOSVD approximation of a stack of effective maps.

    The map is viewed as (slices, rows, cols) with rows = out index x out
    channel and cols = in index x in channel; both matrix modes are truncated
    to ``rank`` while the slice mode is kept whole.
    """
    s, n_out, c_out, n_in, c_in = effective.shape
    stacked = np.moveaxis(effective.reshape(s, n_out * c_out, n_in * c_in), 0, 2)
    ranks = (min(rank, stacked.shape[0]), min(rank, stacked.shape[1]), s)
    approx = truncated_hosvd(stacked, ranks).reconstruct()
    return np.moveaxis(approx, 2, 0).reshape(effective.shape)


def tucker_fused_forward(
    x: np.ndarray,
    a4: Graph,
    b4: Graph,
    w_a: Kernel,
    w_b: Kernel,
    hosvd_rank: Optional[int] = None,
) -> np.ndarray:
    """X x_1 [A W_A] x_2 [B W_B] as a single contraction.

    Equals ``sgcl_forward(tgcl_forward(x, b4, w_b), a4, w_a)`` when
    ``hosvd_rank`` is None; otherwise the pre-contracted maps are first
    compressed with truncated HOSVD.
    """
    x = _check_data(x)
    _check_temporal(x, _filters(b4), _weights(w_b))
    spatial = effective_spatial_map(a4, w_a)
    temporal = effective_temporal_map(b4, w_b)
    if spatial.shape[4] != temporal.shape[2]:
        raise ShapeMismatchError(
            f"temporal output channels {temporal.shape[2]} do not feed "
            f"spatial input channels {spatial.shape[4]}"
        )
    if spatial.shape[0] != x.shape[1] or spatial.shape[3] != x.shape[2]:
        raise ShapeMismatchError(
            f"spatial map of shape {spatial.shape} does not fit data of shape {x.shape}"
        )
    if hosvd_rank is not None:
        spatial = compress_map(spatial, hosvd_rank)
        temporal = compress_map(temporal, hosvd_rank)
    return np.einsum("tnojc,jtcsd,bsjd->btno", spatial, temporal, x, optimize=True)
