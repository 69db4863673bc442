"""Forecasting model, squared-error loss, analytic gradients and training.

The model is ``input projection -> STGCL blocks -> per-node output head``.
Graph filters are frozen unless ``train_graphs`` is set.
"""
import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import WindowedDataset
from .errors import NumericalError, ShapeMismatchError, ValidationError
from .layers import (
    Activation,
    LayerConfig,
    SpatialKernel,
    TemporalKernel,
    stgcl_backward,
    stgcl_forward,
)
from .spectral import LiftedGraph

logger = logging.getLogger(__name__)


class LossKind(enum.Enum):
    MEAN = "mean"
    SUM = "sum"


class OptimizerKind(enum.Enum):
    MOMENTUM = "momentum"
    ADAM = "adam"


@dataclass(frozen=True)
class ForecastTask:
    window: int
    horizon: int

    def __post_init__(self):
        if self.window < 1 or self.horizon < 1:
            raise ValidationError(
                f"window and horizon must be at least 1, got {self.window} and {self.horizon}"
            )

    def check_length(self, available: int) -> None:
        if self.window + self.horizon > available:
            raise ValidationError(
                f"window {self.window} plus horizon {self.horizon} exceeds {available} steps"
            )


@dataclass(frozen=True)
class BlockParams:
    w_a: SpatialKernel
    w_b: TemporalKernel
    w_b2: Optional[TemporalKernel] = None


@dataclass(frozen=True)
class ModelParams:
    input_proj: np.ndarray  # D x C
    blocks: Tuple[BlockParams, ...]
    output_head: np.ndarray  # (l * C) x (T' * D)
    spatial: LiftedGraph
    temporal: LiftedGraph
    layer: LayerConfig = LayerConfig()

    @property
    def features(self) -> int:
        return self.input_proj.shape[0]

    @property
    def hidden(self) -> int:
        return self.input_proj.shape[1]

    @property
    def window(self) -> int:
        return self.spatial.num_slices

    @property
    def horizon(self) -> int:
        return self.output_head.shape[1] // self.features

    def block_config(self, index: int) -> LayerConfig:
        # activation sits between blocks, never after the last one
        if index == len(self.blocks) - 1:
            return replace(self.layer, activation=Activation.NONE)
        return self.layer

    def arrays(self, with_graphs: bool = False) -> List[np.ndarray]:
        out = [self.input_proj]
        for block in self.blocks:
            out.extend([block.w_a.w, block.w_b.w])
            if block.w_b2 is not None:
                out.append(block.w_b2.w)
        out.append(self.output_head)
        if with_graphs:
            out.extend([self.spatial.filters, self.temporal.filters])
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray], with_graphs: bool = False) -> "ModelParams":
        it = iter(arrays)
        input_proj = next(it)
        blocks = []
        for block in self.blocks:
            w_a = SpatialKernel(next(it), block.w_a.order)
            w_b = TemporalKernel(next(it), block.w_b.order)
            w_b2 = None if block.w_b2 is None else TemporalKernel(next(it), block.w_b2.order)
            blocks.append(BlockParams(w_a, w_b, w_b2))
        head = next(it)
        spatial, temporal = self.spatial, self.temporal
        if with_graphs:
            spatial = replace(spatial, filters=next(it))
            temporal = replace(temporal, filters=next(it))
        return replace(
            self,
            input_proj=input_proj,
            blocks=tuple(blocks),
            output_head=head,
            spatial=spatial,
            temporal=temporal,
        )


@dataclass(frozen=True)
class BlockGradients:
    w_a: np.ndarray
    w_b: np.ndarray
    w_b2: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ModelGradients:
    input_proj: np.ndarray
    blocks: Tuple[BlockGradients, ...]
    output_head: np.ndarray
    spatial: Optional[np.ndarray] = None
    temporal: Optional[np.ndarray] = None

    def arrays(self) -> List[np.ndarray]:
        out = [self.input_proj]
        for block in self.blocks:
            out.extend([block.w_a, block.w_b])
            if block.w_b2 is not None:
                out.append(block.w_b2)
        out.append(self.output_head)
        if self.spatial is not None:
            out.extend([self.spatial, self.temporal])
        return out


def _glorot(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    std = math.sqrt(2.0 / (shape[0] + shape[1]))
    return rng.normal(scale=std, size=shape)


def init_params(
    task: ForecastTask,
    features: int,
    spatial: LiftedGraph,
    temporal: LiftedGraph,
    hidden: int = 32,
    num_blocks: int = 2,
    layer: LayerConfig = LayerConfig(),
    rng: Optional[np.random.Generator] = None,
) -> ModelParams:
    """Seeded Glorot-normal initialisation; every block maps hidden -> hidden."""
    if num_blocks < 1 or hidden < 1 or features < 1:
        raise ValidationError("num_blocks, hidden and features must be positive")
    if spatial.num_slices != task.window or temporal.size != task.window:
        raise ShapeMismatchError(
            f"graphs were lifted for {spatial.num_slices} / {temporal.size} steps, "
            f"the task window is {task.window}"
        )
    if spatial.size != temporal.num_slices:
        raise ShapeMismatchError(
            f"spatial graph has {spatial.size} nodes, temporal graph {temporal.num_slices}"
        )
    rng = rng if rng is not None else np.random.default_rng(0)
    nodes, steps = spatial.size, task.window
    k_a, k_b = spatial.order, temporal.order
    blocks = []
    for _ in range(num_blocks):
        w_b = TemporalKernel(_glorot(rng, (hidden * k_b, hidden, nodes)), k_b)
        w_a = SpatialKernel(_glorot(rng, (hidden * k_a, hidden, steps)), k_a)
        w_b2 = None
        if layer.needs_second_temporal:
            w_b2 = TemporalKernel(_glorot(rng, (hidden * k_b, hidden, nodes)), k_b)
        blocks.append(BlockParams(w_a, w_b, w_b2))
    return ModelParams(
        input_proj=_glorot(rng, (features, hidden)),
        blocks=tuple(blocks),
        output_head=_glorot(rng, (steps * hidden, task.horizon * features)),
        spatial=spatial,
        temporal=temporal,
        layer=layer,
    )


@dataclass
class _Trace:
    block_inputs: List[np.ndarray] = field(default_factory=list)
    flat: Optional[np.ndarray] = None


def _check_window(x: np.ndarray, params: ModelParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeMismatchError(f"input window must have 4 modes, got {x.ndim}")
    _, steps, nodes, features = x.shape
    expected = (params.window, params.spatial.size, params.features)
    if (steps, nodes, features) != expected:
        raise ShapeMismatchError(
            f"input window extents (time, nodes, features) = {(steps, nodes, features)}, "
            f"model expects {expected}"
        )
    return x


def _forward(x: np.ndarray, params: ModelParams, trace: Optional[_Trace] = None) -> np.ndarray:
    h = np.einsum("btnd,dc->btnc", x, params.input_proj, optimize=True)
    for index, block in enumerate(params.blocks):
        if trace is not None:
            trace.block_inputs.append(h)
        h = stgcl_forward(
            h,
            params.spatial,
            params.temporal,
            block.w_a,
            block.w_b,
            block.w_b2,
            params.block_config(index),
        )
    b, steps, nodes, channels = h.shape
    flat = h.transpose(0, 2, 1, 3).reshape(b, nodes, steps * channels)
    if trace is not None:
        trace.flat = flat
    out = flat @ params.output_head
    return out.reshape(b, nodes, params.horizon, params.features).transpose(0, 2, 1, 3)


def model_forward(x_window: np.ndarray, params: ModelParams) -> np.ndarray:
    """Forecast ``b x T' x N x D`` from an input window ``b x l x N x D``."""
    return _forward(_check_window(x_window, params), params)


def _check_pair(prediction: np.ndarray, target: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape:
        raise ShapeMismatchError(
            f"prediction shape {prediction.shape} differs from target shape {target.shape}"
        )
    return prediction, target


def loss(prediction: np.ndarray, target: np.ndarray, kind: LossKind = LossKind.MEAN) -> float:
    """Squared error: the plain sum, or its mean over entries."""
    prediction, target = _check_pair(prediction, target)
    total = float(np.sum((prediction - target) ** 2))
    if LossKind(kind) is LossKind.SUM or prediction.size == 0:
        return total
    return total / prediction.size


def _loss_gradient(prediction: np.ndarray, target: np.ndarray, kind: LossKind) -> np.ndarray:
    grad = 2.0 * (prediction - target)
    if LossKind(kind) is LossKind.MEAN:
        grad /= prediction.size
    return grad


def _backward(
    x: np.ndarray, params: ModelParams, trace: _Trace, grad_pred: np.ndarray, with_graphs: bool
) -> ModelGradients:
    b, horizon, nodes, features = grad_pred.shape
    grad_out = grad_pred.transpose(0, 2, 1, 3).reshape(b, nodes, horizon * features)
    grad_head = np.einsum("bnf,bng->fg", trace.flat, grad_out, optimize=True)
    grad_flat = grad_out @ params.output_head.T
    grad_h = grad_flat.reshape(b, nodes, params.window, params.hidden).transpose(0, 2, 1, 3)

    grad_spatial = np.zeros_like(params.spatial.filters) if with_graphs else None
    grad_temporal = np.zeros_like(params.temporal.filters) if with_graphs else None
    block_grads = []
    for index in reversed(range(len(params.blocks))):
        block = params.blocks[index]
        grads = stgcl_backward(
            trace.block_inputs[index],
            params.spatial,
            params.temporal,
            block.w_a,
            block.w_b,
            block.w_b2,
            params.block_config(index),
            grad_h,
            with_graph=with_graphs,
        )
        block_grads.append(BlockGradients(grads.w_a, grads.w_b, grads.w_b2))
        if with_graphs:
            grad_spatial += grads.a4
            grad_temporal += grads.b4
        grad_h = grads.x
    grad_proj = np.einsum("btnd,btnc->dc", x, grad_h, optimize=True)
    return ModelGradients(
        input_proj=grad_proj,
        blocks=tuple(reversed(block_grads)),
        output_head=grad_head,
        spatial=grad_spatial,
        temporal=grad_temporal,
    )


def loss_and_gradients(
    x_window: np.ndarray,
    target: np.ndarray,
    params: ModelParams,
    kind: LossKind = LossKind.MEAN,
    with_graphs: bool = False,
) -> Tuple[float, ModelGradients]:
    x = _check_window(x_window, params)
    trace = _Trace()
    prediction = _forward(x, params, trace)
    prediction, target = _check_pair(prediction, target)
    value = loss(prediction, target, kind)
    grads = _backward(x, params, trace, _loss_gradient(prediction, target, kind), with_graphs)
    return value, grads


def gradients(
    x_window: np.ndarray,
    target: np.ndarray,
    params: ModelParams,
    kind: LossKind = LossKind.MEAN,
    with_graphs: bool = False,
) -> ModelGradients:
    """Exact gradients of the configured loss w.r.t. every trainable tensor."""
    return loss_and_gradients(x_window, target, params, kind, with_graphs)[1]


@dataclass(frozen=True)
class TrainingConfig:
    optimizer: OptimizerKind = OptimizerKind.MOMENTUM
    learning_rate: float = 1e-3
    momentum: float = 0.9
    beta2: float = 0.999
    batch_size: int = 16
    epochs: int = 100
    patience: int = 10
    lr_decay: float = 1.0
    lr_decay_every: int = 0
    loss: LossKind = LossKind.MEAN
    train_graphs: bool = False
    seed: int = 0

    def learning_rate_at(self, epoch: int) -> float:
        if self.lr_decay_every <= 0:
            return self.learning_rate
        return self.learning_rate * self.lr_decay ** ((epoch - 1) // self.lr_decay_every)


class MomentumOptimizer:
    """Heavy-ball SGD: ``v = mu v + g``, ``p -= lr v``."""

    def __init__(self, momentum: float):
        self.momentum = momentum
        self.velocity: Optional[List[np.ndarray]] = None

    def step(self, arrays, grads, lr: float) -> List[np.ndarray]:
        if self.velocity is None:
            self.velocity = [np.zeros_like(g) for g in grads]
        self.velocity = [self.momentum * v + g for v, g in zip(self.velocity, grads)]
        return [p - lr * v for p, v in zip(arrays, self.velocity)]


class AdamOptimizer:
    def __init__(self, beta1: float, beta2: float, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.first: Optional[List[np.ndarray]] = None
        self.second: Optional[List[np.ndarray]] = None
        self.count = 0

    def step(self, arrays, grads, lr: float) -> List[np.ndarray]:
        if self.first is None:
            self.first = [np.zeros_like(g) for g in grads]
            self.second = [np.zeros_like(g) for g in grads]
        self.count += 1
        self.first = [self.beta1 * m + (1 - self.beta1) * g for m, g in zip(self.first, grads)]
        self.second = [self.beta2 * s + (1 - self.beta2) * g * g for s, g in zip(self.second, grads)]
        fix1 = 1 - self.beta1**self.count
        fix2 = 1 - self.beta2**self.count
        return [
            p - lr * (m / fix1) / (np.sqrt(s / fix2) + self.eps)
            for p, m, s in zip(arrays, self.first, self.second)
        ]


def make_optimizer(config: TrainingConfig):
    if OptimizerKind(config.optimizer) is OptimizerKind.ADAM:
        return AdamOptimizer(config.momentum, config.beta2)
    return MomentumOptimizer(config.momentum)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    train_sse: float
    val_sse: float


@dataclass(frozen=True)
class TrainingResult:
    params: ModelParams
    history: Tuple[EpochRecord, ...]
    best_epoch: int
    stopped_early: bool


def predict(x_window: np.ndarray, params: ModelParams, batch_size: int = 64) -> np.ndarray:
    x = _check_window(x_window, params)
    if x.shape[0] == 0:
        return np.empty((0, params.horizon, params.spatial.size, params.features))
    parts = [_forward(x[i : i + batch_size], params) for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(parts, axis=0)


def predict_dataset(dataset: WindowedDataset, params: ModelParams) -> Tuple[np.ndarray, np.ndarray]:
    """Forecasts and targets of a split, both back in the data's original units."""
    prediction = predict(dataset.x, params)
    return dataset.stats.invert(prediction), dataset.stats.invert(dataset.y)


def evaluate(dataset: WindowedDataset, params: ModelParams, kind: LossKind = LossKind.MEAN) -> float:
    if dataset.empty:
        return float("nan")
    return loss(predict(dataset.x, params), dataset.y, kind)


def train(
    train_set: WindowedDataset,
    val_set: Optional[WindowedDataset],
    params: ModelParams,
    config: TrainingConfig = TrainingConfig(),
) -> TrainingResult:
    """Mini-batch training with early stopping on validation loss.

    Batches are drawn from a generator seeded with ``config.seed`` so equal
    inputs give bit-identical trajectories. The returned params are the ones
    with the best validation loss (training loss when there is no
    validation split).
    """
    if train_set.empty:
        raise ValidationError("training split is empty")
    if config.batch_size < 1 or config.epochs < 1:
        raise ValidationError("batch_size and epochs must be at least 1")
    rng = np.random.default_rng(config.seed)
    optimizer = make_optimizer(config)
    with_graphs = config.train_graphs
    has_val = val_set is not None and not val_set.empty
    samples = train_set.x.shape[0]

    history: List[EpochRecord] = []
    best_params, best_score, best_epoch = params, math.inf, 0
    waited = 0
    stopped_early = False
    for epoch in range(1, config.epochs + 1):
        lr = config.learning_rate_at(epoch)
        order = rng.permutation(samples)
        batch_losses = []
        for start in range(0, samples, config.batch_size):
            idx = order[start : start + config.batch_size]
            value, grads = loss_and_gradients(
                train_set.x[idx], train_set.y[idx], params, config.loss, with_graphs
            )
            if not math.isfinite(value):
                raise NumericalError(f"training diverged at epoch {epoch} (loss {value})")
            updated = optimizer.step(params.arrays(with_graphs), grads.arrays(), lr)
            if not all(np.all(np.isfinite(a)) for a in updated):
                raise NumericalError(f"training diverged at epoch {epoch} (non-finite parameters)")
            params = params.with_arrays(updated, with_graphs)
            batch_losses.append(value)

        train_loss = float(np.mean(batch_losses))
        train_sse = evaluate(train_set, params, LossKind.SUM)
        val_loss = val_sse = float("nan")
        if has_val:
            val_pred = predict(val_set.x, params)
            val_loss = loss(val_pred, val_set.y, config.loss)
            val_sse = loss(val_pred, val_set.y, LossKind.SUM)
        history.append(EpochRecord(epoch, train_loss, val_loss, lr, train_sse, val_sse))
        logger.info(
            "Epoch %d: train %.6f, val %.6f, lr %.2e", epoch, train_loss, val_loss, lr
        )

        score = val_loss if has_val else train_loss
        if score < best_score:
            best_params, best_score, best_epoch = params, score, epoch
            waited = 0
        else:
            waited += 1
            if waited >= config.patience:
                logger.warning("Early stopping at epoch %d (best %d)", epoch, best_epoch)
                stopped_early = True
                break

    if best_epoch == 0:
        best_params = params
    return TrainingResult(
        params=best_params,
        history=tuple(history),
        best_epoch=best_epoch,
        stopped_early=stopped_early,
    )


@dataclass(frozen=True)
class Metrics:
    mae: float
    rmse: float
    mape: Optional[float]  # percent; None when every target is masked

    def as_dict(self) -> Dict[str, Optional[float]]:
        return {"mae": self.mae, "rmse": self.rmse, "mape": self.mape}


def metrics(prediction: np.ndarray, target: np.ndarray, mask_threshold: float = 1e-3) -> Metrics:
    """MAE, RMSE and masked MAPE (percent) in the data's original units."""
    prediction, target = _check_pair(prediction, target)
    if prediction.size == 0:
        raise ValidationError("cannot score an empty prediction")
    diff = prediction - target
    mae = float(np.mean(np.abs(diff)))
    rmse = float(np.sqrt(np.mean(diff**2)))
    mask = np.abs(target) > mask_threshold
    mape = None
    if mask.any():
        mape = float(np.mean(np.abs(diff[mask]) / np.abs(target[mask])) * 100.0)
    return Metrics(mae=mae, rmse=rmse, mape=mape)


def horizon_metrics(
    prediction: np.ndarray,
    target: np.ndarray,
    horizons: Sequence[int],
    mask_threshold: float = 1e-3,
) -> Dict[int, Metrics]:
    """Metrics at each 1-based horizon step."""
    prediction, target = _check_pair(prediction, target)
    out = {}
    for step in horizons:
        if not 1 <= step <= prediction.shape[1]:
            raise ValidationError(
                f"horizon {step} exceeds the trained horizon {prediction.shape[1]}"
            )
        out[step] = metrics(prediction[:, step - 1], target[:, step - 1], mask_threshold)
    return out


def persistence_forecast(x_window: np.ndarray, horizon: int) -> np.ndarray:
    """Repeat the last observed step for every horizon step."""
    x_window = np.asarray(x_window, dtype=np.float64)
    return np.repeat(x_window[:, -1:], horizon, axis=1)
