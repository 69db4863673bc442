import math

import numpy as np
import pytest

from quse_tensorgraph.data import NormalizationStats, Split, WindowedDataset
from quse_tensorgraph.errors import NumericalError, ShapeMismatchError, ValidationError
from quse_tensorgraph.layers import (
    Activation,
    Composition,
    LayerConfig,
    SpatialKernel,
    TemporalKernel,
)
from quse_tensorgraph.spectral import LiftedGraph, Provenance, identity_lift
from quse_tensorgraph.training import (
    BlockParams,
    ForecastTask,
    LossKind,
    ModelParams,
    OptimizerKind,
    TrainingConfig,
    evaluate,
    gradients,
    horizon_metrics,
    init_params,
    loss,
    loss_and_gradients,
    metrics,
    model_forward,
    persistence_forecast,
    predict,
    predict_dataset,
    train,
)

WINDOW, HORIZON, NODES, FEATURES = 3, 2, 3, 2


def _graphs(rng, k=2):
    spatial = LiftedGraph(0.5 * rng.standard_normal((NODES, NODES, k, WINDOW)), Provenance.SPATIAL)
    temporal = LiftedGraph(0.5 * rng.standard_normal((WINDOW, WINDOW, k, NODES)), Provenance.TEMPORAL)
    return spatial, temporal


def _params(rng, layer=LayerConfig(), num_blocks=2, hidden=2):
    spatial, temporal = _graphs(rng)
    return init_params(
        ForecastTask(WINDOW, HORIZON),
        FEATURES,
        spatial,
        temporal,
        hidden=hidden,
        num_blocks=num_blocks,
        layer=layer,
        rng=np.random.default_rng(5),
    )


def _dataset(rng, samples=12, split=Split.TRAIN):
    stats = NormalizationStats(mean=np.zeros((NODES, FEATURES)), std=np.ones((NODES, FEATURES)))
    return WindowedDataset(
        x=rng.standard_normal((samples, WINDOW, NODES, FEATURES)),
        y=rng.standard_normal((samples, HORIZON, NODES, FEATURES)),
        split=split,
        stats=stats,
    )


def test_forward_shape(rng):
    params = _params(rng)
    out = model_forward(rng.standard_normal((4, WINDOW, NODES, FEATURES)), params)
    assert out.shape == (4, HORIZON, NODES, FEATURES)
    assert params.horizon == HORIZON and params.window == WINDOW


def test_forward_rejects_wrong_window(rng):
    with pytest.raises(ShapeMismatchError, match="model expects"):
        model_forward(np.zeros((1, WINDOW + 1, NODES, FEATURES)), _params(rng))


def test_init_params_checks_graph_extents(rng):
    spatial, temporal = _graphs(rng)
    with pytest.raises(ShapeMismatchError):
        init_params(ForecastTask(WINDOW + 1, HORIZON), FEATURES, spatial, temporal)


def test_init_params_is_seeded(rng):
    spatial, temporal = _graphs(rng)
    first = init_params(ForecastTask(WINDOW, HORIZON), FEATURES, spatial, temporal, rng=np.random.default_rng(9))
    second = init_params(ForecastTask(WINDOW, HORIZON), FEATURES, spatial, temporal, rng=np.random.default_rng(9))
    for a, b in zip(first.arrays(), second.arrays()):
        np.testing.assert_array_equal(a, b)


def test_loss_kinds():
    prediction = np.array([[1.0, 2.0]])
    target = np.array([[0.0, 0.0]])
    assert loss(prediction, target, LossKind.SUM) == 5.0
    assert loss(prediction, target) == 2.5


@pytest.mark.parametrize(
    "layer",
    [
        LayerConfig(Composition.SEQUENTIAL, Activation.RELU),
        LayerConfig(Composition.SANDWICH, Activation.NONE),
        LayerConfig(Composition.ADDITIVE, Activation.RELU),
    ],
)
def test_gradients_match_finite_differences(rng, layer):
    params = _params(rng, layer=layer)
    x = rng.standard_normal((2, WINDOW, NODES, FEATURES))
    y = rng.standard_normal((2, HORIZON, NODES, FEATURES))
    analytic = gradients(x, y, params, with_graphs=True).arrays()
    arrays = [a.copy() for a in params.arrays(with_graphs=True)]

    def objective():
        return loss(model_forward(x, params.with_arrays(arrays, with_graphs=True)), y)

    h = 1e-6
    for grad, array in zip(analytic, arrays):
        for index in np.ndindex(*array.shape):
            keep = array[index]
            array[index] = keep + h
            up = objective()
            array[index] = keep - h
            down = objective()
            array[index] = keep
            numeric = (up - down) / (2 * h)
            scale = max(abs(grad[index]), abs(numeric), 1e-4)
            assert abs(grad[index] - numeric) / scale < 1e-4


def test_single_entry_gradient(rng):
    params = _params(rng, num_blocks=1, hidden=1)
    x = rng.standard_normal((1, WINDOW, NODES, FEATURES))
    y = rng.standard_normal((1, HORIZON, NODES, FEATURES))
    value, grads = loss_and_gradients(x, y, params, LossKind.SUM)
    arrays = params.arrays()
    h = 1e-5
    nudged = arrays[0].copy()
    nudged[0, 0] += h
    up = loss(model_forward(x, params.with_arrays([nudged] + arrays[1:])), y, LossKind.SUM)
    nudged[0, 0] -= 2 * h
    down = loss(model_forward(x, params.with_arrays([nudged] + arrays[1:])), y, LossKind.SUM)
    numeric = (up - down) / (2 * h)
    assert value == pytest.approx(loss(model_forward(x, params), y, LossKind.SUM))
    assert abs(grads.input_proj[0, 0] - numeric) / max(abs(numeric), 1e-4) < 1e-6


def test_zero_learning_rate_keeps_parameters(rng):
    params = _params(rng)
    config = TrainingConfig(learning_rate=0.0, epochs=3, batch_size=4, patience=5)
    result = train(_dataset(rng), _dataset(rng, 6, Split.VAL), params, config)
    for a, b in zip(result.params.arrays(), params.arrays()):
        np.testing.assert_array_equal(a, b)
    assert len(result.history) == 3


def test_training_is_deterministic(rng):
    params = _params(rng)
    train_set, val_set = _dataset(rng), _dataset(rng, 6, Split.VAL)
    config = TrainingConfig(learning_rate=1e-2, epochs=3, batch_size=5, seed=11)
    first = train(train_set, val_set, params, config)
    second = train(train_set, val_set, params, config)
    assert first.history == second.history
    for a, b in zip(first.params.arrays(), second.params.arrays()):
        np.testing.assert_array_equal(a, b)


def test_training_reduces_loss(rng):
    params = _params(rng)
    train_set = _dataset(rng)
    config = TrainingConfig(optimizer=OptimizerKind.ADAM, learning_rate=1e-2, epochs=30, batch_size=4, patience=30)
    result = train(train_set, None, params, config)
    assert evaluate(train_set, result.params, LossKind.SUM) < evaluate(train_set, params, LossKind.SUM)
    assert math.isnan(result.history[0].val_loss)


def test_early_stopping_keeps_best_epoch(rng):
    params = _params(rng)
    config = TrainingConfig(learning_rate=10.0, momentum=0.0, epochs=50, batch_size=12, patience=2)
    try:
        result = train(_dataset(rng), _dataset(rng, 6, Split.VAL), params, config)
    except NumericalError as exc:
        assert "epoch" in str(exc)
        return
    best = min(r.val_loss for r in result.history)
    assert result.history[result.best_epoch - 1].val_loss == best


def test_divergence_reports_epoch(rng, monkeypatch):
    params = _params(rng)
    monkeypatch.setattr(
        "quse_tensorgraph.training.loss_and_gradients",
        lambda *args: (float("inf"), None),
    )
    with pytest.raises(NumericalError, match="epoch 1"):
        train(_dataset(rng), None, params, TrainingConfig(epochs=2))


def test_empty_training_split_is_rejected(rng):
    with pytest.raises(ValidationError):
        train(_dataset(rng, 0), None, _params(rng))


def test_learning_rate_schedule():
    config = TrainingConfig(learning_rate=1.0, lr_decay=0.5, lr_decay_every=2)
    assert [config.learning_rate_at(e) for e in (1, 2, 3, 5)] == [1.0, 1.0, 0.5, 0.25]
    assert TrainingConfig(learning_rate=0.1).learning_rate_at(40) == 0.1


def test_predict_batches_consistently(rng):
    params = _params(rng)
    x = rng.standard_normal((7, WINDOW, NODES, FEATURES))
    np.testing.assert_allclose(predict(x, params, batch_size=3), model_forward(x, params), atol=1e-12)
    assert predict(x[:0], params).shape == (0, HORIZON, NODES, FEATURES)


def test_predict_dataset_returns_original_units(rng):
    params = _params(rng)
    dataset = _dataset(rng, 3)
    stats = NormalizationStats(mean=np.full((NODES, FEATURES), 10.0), std=np.full((NODES, FEATURES), 2.0))
    shifted = WindowedDataset(x=dataset.x, y=dataset.y, split=Split.TEST, stats=stats)
    prediction, truth = predict_dataset(shifted, params)
    np.testing.assert_allclose(truth, dataset.y * 2.0 + 10.0)
    np.testing.assert_allclose(prediction, model_forward(dataset.x, params) * 2.0 + 10.0)


def test_metrics_example():
    result = metrics(np.array([3.0, 2.0]), np.array([2.0, 4.0]))
    assert result.mae == pytest.approx(1.5)
    assert result.rmse == pytest.approx(math.sqrt(2.5))
    assert result.mape == pytest.approx(50.0)


def test_identical_forecast_scores_zero():
    target = np.arange(1.0, 7.0).reshape(1, 2, 3, 1)
    assert metrics(target, target).as_dict() == {"mae": 0.0, "rmse": 0.0, "mape": 0.0}


def test_mape_is_none_when_everything_is_masked():
    result = metrics(np.array([1.0, 1.0]), np.array([0.0, 0.0]))
    assert result.mape is None and result.mae == 1.0


def test_horizon_metrics_are_one_based():
    prediction = np.zeros((1, 3, 2, 1))
    target = np.zeros((1, 3, 2, 1))
    target[:, 2] = 1.0
    scores = horizon_metrics(prediction, target, [1, 3])
    assert scores[1].mae == 0.0 and scores[3].mae == 1.0
    with pytest.raises(ValidationError, match="exceeds"):
        horizon_metrics(prediction, target, [4])


def test_persistence_forecast_repeats_last_step(rng):
    x = rng.standard_normal((2, WINDOW, NODES, FEATURES))
    forecast = persistence_forecast(x, 4)
    assert forecast.shape == (2, 4, NODES, FEATURES)
    for step in range(4):
        np.testing.assert_array_equal(forecast[:, step], x[:, -1])


def _identity_params(nodes, window, features=1):
    spatial = identity_lift(nodes, 1, window, Provenance.SPATIAL)
    temporal = identity_lift(window, 1, nodes, Provenance.TEMPORAL)
    eye = np.eye(features)
    block = BlockParams(
        SpatialKernel(np.repeat(eye[:, :, None], window, axis=2), 1),
        TemporalKernel(np.repeat(eye[:, :, None], nodes, axis=2), 1),
    )
    return ModelParams(
        input_proj=eye.copy(),
        blocks=(block,),
        output_head=np.eye(window * features),
        spatial=spatial,
        temporal=temporal,
        layer=LayerConfig(Composition.SEQUENTIAL, Activation.NONE),
    )


def _linear_dataset(x, y):
    nodes, features = x.shape[2], x.shape[3]
    stats = NormalizationStats(mean=np.zeros((nodes, features)), std=np.ones((nodes, features)))
    return WindowedDataset(x=x, y=y, split=Split.TRAIN, stats=stats)


@pytest.mark.parametrize("features", [1, 2])
def test_identity_pipeline_returns_its_input(rng, features):
    params = _identity_params(nodes=3, window=4, features=features)
    x = rng.standard_normal((5, 4, 3, features))
    np.testing.assert_allclose(model_forward(x, params), x, atol=1e-12)


def test_forward_is_linear_without_activation(rng):
    params = _params(rng, layer=LayerConfig(Composition.SEQUENTIAL, Activation.NONE))
    first = rng.standard_normal((3, WINDOW, NODES, FEATURES))
    second = rng.standard_normal((3, WINDOW, NODES, FEATURES))
    combined = model_forward(2.0 * first - 0.5 * second, params)
    expected = 2.0 * model_forward(first, params) - 0.5 * model_forward(second, params)
    np.testing.assert_allclose(combined, expected, atol=1e-10)


def _model_loops(x, params):
    """One sequential block written as explicit sums: temporal, spatial, then the head."""
    b, steps, nodes, _ = x.shape
    block = params.blocks[0]
    a4, b4 = params.spatial.filters, params.temporal.filters
    h = np.einsum("btnd,dc->btnc", x, params.input_proj)
    hidden = h.shape[3]
    mid = np.zeros_like(h)
    for s, t, n, o in np.ndindex(*mid.shape):
        mid[s, t, n, o] = sum(
            b4[t, u, k, n] * h[s, u, n, c] * block.w_b.w[k * hidden + c, o, n]
            for k in range(b4.shape[2])
            for u in range(steps)
            for c in range(hidden)
        )
    out = np.zeros_like(h)
    for s, t, n, o in np.ndindex(*out.shape):
        out[s, t, n, o] = sum(
            a4[n, j, k, t] * mid[s, t, j, c] * block.w_a.w[k * hidden + c, o, t]
            for k in range(a4.shape[2])
            for j in range(nodes)
            for c in range(hidden)
        )
    features = params.features
    forecast = np.zeros((b, params.horizon, nodes, features))
    for s, step, n, d in np.ndindex(*forecast.shape):
        forecast[s, step, n, d] = sum(
            out[s, t, n, c] * params.output_head[t * hidden + c, step * features + d]
            for t in range(steps)
            for c in range(hidden)
        )
    return forecast


def test_forward_matches_loop_composition_over_seeds():
    nodes, window, horizon, features = 3, 4, 2, 1
    for seed in range(100):
        rng = np.random.default_rng(seed)
        spatial = LiftedGraph(rng.standard_normal((nodes, nodes, 2, window)), Provenance.SPATIAL)
        temporal = LiftedGraph(rng.standard_normal((window, window, 2, nodes)), Provenance.TEMPORAL)
        params = init_params(
            ForecastTask(window, horizon),
            features,
            spatial,
            temporal,
            hidden=2,
            num_blocks=1,
            layer=LayerConfig(Composition.SEQUENTIAL, Activation.RELU),
            rng=rng,
        )
        x = rng.standard_normal((2, window, nodes, features))
        np.testing.assert_allclose(model_forward(x, params), _model_loops(x, params), atol=1e-10)


def test_loss_decreases_every_epoch_on_noiseless_linear_task(rng):
    params = _identity_params(nodes=3, window=4)
    x = rng.standard_normal((16, 4, 3, 1))
    train_set = _linear_dataset(x, 0.5 * x)
    config = TrainingConfig(learning_rate=0.05, momentum=0.0, epochs=5, batch_size=16, patience=5)
    result = train(train_set, None, params, config)
    sse = [record.train_sse for record in result.history]
    assert len(sse) == 5
    assert all(later < earlier for earlier, later in zip(sse, sse[1:]))
    assert sse[0] < evaluate(train_set, params, LossKind.SUM)


def test_trained_model_beats_persistence_on_noiseless_linear_task(rng):
    nodes, window, horizon = 3, 4, 2
    x = rng.standard_normal((32, window, nodes, 1))
    trend = 2.0 * x[:, -1:] - x[:, -2:-1]
    train_set = _linear_dataset(x, np.repeat(trend, horizon, axis=1))
    spatial = identity_lift(nodes, 1, window, Provenance.SPATIAL)
    temporal = identity_lift(window, 1, nodes, Provenance.TEMPORAL)
    params = init_params(
        ForecastTask(window, horizon),
        1,
        spatial,
        temporal,
        hidden=4,
        num_blocks=1,
        layer=LayerConfig(Composition.SEQUENTIAL, Activation.NONE),
        rng=np.random.default_rng(3),
    )
    config = TrainingConfig(
        optimizer=OptimizerKind.ADAM, learning_rate=2e-2, epochs=200, batch_size=8, patience=200
    )
    result = train(train_set, None, params, config)
    prediction, truth = predict_dataset(train_set, result.params)
    baseline = persistence_forecast(train_set.x, horizon)
    assert metrics(prediction, truth).mae < metrics(baseline, truth).mae
