"""Pipeline stages. Each stage reads the artifacts of earlier stages from the
output directory, writes its own, and returns a JSON-ready payload."""
import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np
import pandas as pd

from .config import RunConfig, resolve_peps_ranks
from .data import (
    NormalizationStats,
    Split,
    WindowedDataset,
    load_csv,
    synth_diffusion,
    window_split,
)
from .errors import DataError
from .graphs import (
    GraphMode,
    SpatialTensorGraph,
    TemporalTensorGraph,
    build_stg,
    build_ttg,
    graph_summary,
)
from .layers import (
    LAYOUT_K_MAJOR,
    Activation,
    Composition,
    LayerConfig,
    SpatialKernel,
    TemporalKernel,
)
from .peps import PepsPair, compression_ratio, peps_fit, peps_graphs
from .spectral import LiftedGraph, Provenance, identity_lift, lift_graph
from .storage import (
    dump_json,
    read_container,
    read_tensor,
    write_container,
    write_edge_list,
    write_tensor,
)
from .training import (
    BlockParams,
    ModelParams,
    TrainingResult,
    horizon_metrics,
    init_params,
    persistence_forecast,
    predict_dataset,
    train,
)

logger = logging.getLogger(__name__)

VARIANT_STG = "STG"
VARIANT_STG_TTG = "STG+TTG"
VARIANT_PEPS = "STG+TTG+PEPS"
VARIANT_PERSISTENCE = "persistence"
METRIC_NAMES = ("mae", "rmse", "mape")
STORED_CONFIG = "config.json"


class StageCommand:
    name = ""
    help = ""
    # stages after prepare start from the configuration it stored in --out
    uses_stored_config = True

    def __init__(self, config: RunConfig, out: Path):
        self.config = config
        self.out = Path(out)

    def dispatch(self) -> Dict[str, Any]:
        self.out.mkdir(parents=True, exist_ok=True)
        logger.info("Running stage %s into %s", self.name, self.out)
        payload = self.run()
        payload.setdefault("stage", self.name)
        return payload

    def run(self) -> Dict[str, Any]:
        raise NotImplementedError

    @property
    def dataset_dir(self) -> Path:
        return self.out / "dataset"

    @property
    def graph_dir(self) -> Path:
        return self.out / "graphs"

    @property
    def peps_dir(self) -> Path:
        return self.out / "peps"

    @property
    def lifted_dir(self) -> Path:
        return self.out / "lifted"

    @property
    def model_dir(self) -> Path:
        return self.out / "model"

    @property
    def forecast_dir(self) -> Path:
        return self.out / "forecast"


def load_series(config: RunConfig):
    if config.data_path is not None:
        return load_csv(config.data_path, config.timestamp_column)
    series, _ = synth_diffusion(
        config.synth_nodes, config.synth_steps, seed=config.seed, noise=config.synth_noise
    )
    return series


def prepare_datasets(config: RunConfig) -> Tuple[WindowedDataset, ...]:
    return window_split(load_series(config), config.window, config.horizon, config.split)


def save_datasets(directory: Path, datasets: Tuple[WindowedDataset, ...], config: RunConfig) -> Path:
    tensors = {"mean": datasets[0].stats.mean, "std": datasets[0].stats.std}
    for dataset in datasets:
        tensors[f"{dataset.split.value}_x"] = dataset.x
        tensors[f"{dataset.split.value}_y"] = dataset.y
    metadata = {
        "starts": {d.split.value: d.start for d in datasets},
        "window": config.window,
        "horizon": config.horizon,
        "fractions": list(config.split),
        "seed": config.seed,
        "source": config.data_path or "synthetic",
    }
    return write_container(directory, tensors, metadata)


def load_datasets(directory: Path) -> Tuple[WindowedDataset, ...]:
    tensors, metadata = read_container(directory)
    stats = NormalizationStats(mean=tensors["mean"], std=tensors["std"])
    return tuple(
        WindowedDataset(
            x=tensors[f"{split.value}_x"],
            y=tensors[f"{split.value}_y"],
            split=split,
            stats=stats,
            start=int(metadata["starts"][split.value]),
        )
        for split in Split
    )


def graph_input(config: RunConfig, train_set: WindowedDataset) -> np.ndarray:
    if config.graph_on_normalized:
        return train_set.x
    return train_set.stats.invert(train_set.x)


def build_graphs(config: RunConfig, train_set: WindowedDataset) -> Tuple[SpatialTensorGraph, TemporalTensorGraph]:
    x = graph_input(config, train_set)
    stg = build_stg(
        x,
        config.sigma2,
        config.epsilon,
        GraphMode(config.stg_mode),
        config.embed_rank,
        config.evolve_step,
    )
    ttg = build_ttg(
        x,
        config.sigma2,
        config.epsilon,
        GraphMode(config.ttg_mode),
        config.embed_rank,
        config.evolve_step,
    )
    return stg, ttg


def fit_peps(config: RunConfig, stg: SpatialTensorGraph, ttg: TemporalTensorGraph) -> PepsPair:
    r_n, r_t = resolve_peps_ranks(config, stg.num_nodes, stg.num_steps)
    return peps_fit(stg, ttg, r_n, r_t, config.peps_max_sweeps, config.peps_tol)


def lift_pair(config: RunConfig, stg, ttg) -> Tuple[LiftedGraph, LiftedGraph]:
    return (
        lift_graph(stg, config.k_a, config.respect_asymmetry),
        lift_graph(ttg, config.k_b, config.respect_asymmetry),
    )


def fit_model(
    config: RunConfig,
    datasets: Tuple[WindowedDataset, ...],
    spatial: LiftedGraph,
    temporal: LiftedGraph,
) -> TrainingResult:
    train_set, val_set, _ = datasets
    params = init_params(
        config.task,
        train_set.x.shape[-1],
        spatial,
        temporal,
        hidden=config.hidden_channels,
        num_blocks=config.num_blocks,
        layer=config.layer,
        rng=np.random.default_rng(config.seed),
    )
    return train(train_set, val_set, params, config.training())


def save_checkpoint(directory: Path, result: TrainingResult, config: RunConfig) -> Path:
    params = result.params
    tensors = {
        "input_proj": params.input_proj,
        "output_head": params.output_head,
        "spatial_filters": params.spatial.filters,
        "temporal_filters": params.temporal.filters,
    }
    kernels = directory / "kernels"
    for index, block in enumerate(params.blocks):
        tensors[f"block{index}_w_a"] = block.w_a.w
        tensors[f"block{index}_w_b"] = block.w_b.w
        write_tensor(kernels / f"block{index}_w_a.bin", block.w_a.w, "WA31", LAYOUT_K_MAJOR)
        write_tensor(kernels / f"block{index}_w_b.bin", block.w_b.w, "WB31", LAYOUT_K_MAJOR)
        if block.w_b2 is not None:
            tensors[f"block{index}_w_b2"] = block.w_b2.w
            write_tensor(kernels / f"block{index}_w_b2.bin", block.w_b2.w, "WB31", LAYOUT_K_MAJOR)
    metadata = {
        "num_blocks": len(params.blocks),
        "k_a": params.spatial.order,
        "k_b": params.temporal.order,
        "composition": config.composition,
        "activation": config.activation,
        "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early,
    }
    return write_container(directory, tensors, metadata)


def load_checkpoint(directory: Path) -> ModelParams:
    tensors, metadata = read_container(directory)
    k_a, k_b = int(metadata["k_a"]), int(metadata["k_b"])
    blocks = []
    for index in range(int(metadata["num_blocks"])):
        second = tensors.get(f"block{index}_w_b2")
        blocks.append(
            BlockParams(
                SpatialKernel(tensors[f"block{index}_w_a"], k_a),
                TemporalKernel(tensors[f"block{index}_w_b"], k_b),
                None if second is None else TemporalKernel(second, k_b),
            )
        )
    layer = LayerConfig(Composition(metadata["composition"]), Activation(metadata["activation"]))
    return ModelParams(
        input_proj=tensors["input_proj"],
        blocks=tuple(blocks),
        output_head=tensors["output_head"],
        spatial=LiftedGraph(tensors["spatial_filters"], Provenance.SPATIAL),
        temporal=LiftedGraph(tensors["temporal_filters"], Provenance.TEMPORAL),
        layer=layer,
    )


def score_records(
    tag: str, prediction: np.ndarray, truth: np.ndarray, config: RunConfig
) -> List[Dict[str, Any]]:
    scores = horizon_metrics(prediction, truth, config.eval_horizons, config.mape_threshold)
    return [dict(tag=tag, horizon=step, **scores[step].as_dict()) for step in config.eval_horizons]


def _require_test(test_set: WindowedDataset) -> None:
    if test_set.empty:
        raise DataError("the test split holds no windows; lower the window or change the split")


def _model_tag(config: RunConfig) -> str:
    return VARIANT_PEPS if config.use_peps else VARIANT_STG_TTG


def write_jsonl(path: Path, records: List[Dict[str, Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    return path


class DumpConfigCommand(StageCommand):
    name = "dump-config"
    help = "Write the effective configuration as JSON."
    uses_stored_config = False

    def run(self):
        path = self.config.dump(self.out / STORED_CONFIG)
        return {"config": str(path)}


class PrepareCommand(StageCommand):
    name = "prepare"
    help = "Ingest or synthesize the series, split, window and normalize it."
    uses_stored_config = False

    def run(self):
        datasets = prepare_datasets(self.config)
        save_datasets(self.dataset_dir, datasets, self.config)
        self.config.dump(self.out / STORED_CONFIG)
        return {
            "windows": {d.split.value: int(d.x.shape[0]) for d in datasets},
            "nodes": int(datasets[0].x.shape[2]),
            "features": int(datasets[0].x.shape[3]),
        }


class BuildGraphCommand(StageCommand):
    name = "build-graph"
    help = "Build the spatial and temporal tensor graphs from the training windows."

    def run(self):
        train_set = load_datasets(self.dataset_dir)[0]
        stg, ttg = build_graphs(self.config, train_set)
        write_tensor(self.graph_dir / "stg.bin", stg.weights, "STG1")
        write_tensor(self.graph_dir / "ttg.bin", ttg.weights, "TTG1")
        if self.config.write_edge_lists:
            write_edge_list(self.graph_dir / "stg_edges.txt", stg.weights)
            write_edge_list(self.graph_dir / "ttg_edges.txt", ttg.weights)
        summary = {"stg": graph_summary(stg.weights), "ttg": graph_summary(ttg.weights)}
        dump_json(self.graph_dir / "summary.json", summary)
        return {"summary": summary}


class GraphArtifactsMixin:
    def _read_graphs(self, directory: Path) -> Tuple[SpatialTensorGraph, TemporalTensorGraph]:
        config = self.config
        stg, _ = read_tensor(directory / "stg.bin", "STG1")
        ttg, _ = read_tensor(directory / "ttg.bin", "TTG1")
        return (
            SpatialTensorGraph(stg, config.sigma2, config.epsilon, GraphMode(config.stg_mode)),
            TemporalTensorGraph(ttg, config.sigma2, config.epsilon, GraphMode(config.ttg_mode)),
        )


class PepsCommand(GraphArtifactsMixin, StageCommand):
    name = "peps"
    help = "Jointly compress the graph pair through shared node and time factors."

    def run(self):
        stg, ttg = self._read_graphs(self.graph_dir)
        pair = fit_peps(self.config, stg, ttg)
        metadata = {
            "ranks": list(pair.ranks),
            "joint_error": pair.joint_error,
            "sweeps": pair.sweeps,
            "history": list(pair.history),
            "compression_ratio": compression_ratio(pair, stg.num_nodes, stg.num_steps),
        }
        write_container(
            self.peps_dir,
            {
                "node_factor": pair.node_factor,
                "time_factor": pair.time_factor,
                "core_a": pair.core_a,
                "core_b": pair.core_b,
            },
            metadata,
        )
        approx_stg, approx_ttg = peps_graphs(pair, stg, ttg, self.config.peps_clamp)
        write_tensor(self.peps_dir / "stg.bin", approx_stg.weights, "STG1")
        write_tensor(self.peps_dir / "ttg.bin", approx_ttg.weights, "TTG1")
        return metadata


class LiftCommand(GraphArtifactsMixin, StageCommand):
    name = "lift"
    help = "Chebyshev-lift both graphs, from the PEPS reconstruction when enabled."

    def run(self):
        source = self.peps_dir if self.config.use_peps else self.graph_dir
        stg, ttg = self._read_graphs(source)
        spatial, temporal = lift_pair(self.config, stg, ttg)
        write_tensor(self.lifted_dir / "spatial.bin", spatial.filters, "LG41")
        write_tensor(self.lifted_dir / "temporal.bin", temporal.filters, "LG41")
        return {
            "source": source.name,
            "spatial": list(spatial.filters.shape),
            "temporal": list(temporal.filters.shape),
        }


class TrainCommand(StageCommand):
    name = "train"
    help = "Train the forecaster on the lifted graphs and write a checkpoint."

    def run(self):
        datasets = load_datasets(self.dataset_dir)
        spatial, _ = read_tensor(self.lifted_dir / "spatial.bin", "LG41")
        temporal, _ = read_tensor(self.lifted_dir / "temporal.bin", "LG41")
        result = fit_model(
            self.config,
            datasets,
            LiftedGraph(spatial, Provenance.SPATIAL),
            LiftedGraph(temporal, Provenance.TEMPORAL),
        )
        save_checkpoint(self.model_dir, result, self.config)
        history = pd.DataFrame([asdict(record) for record in result.history])
        history.to_csv(self.model_dir / "history.csv", index=False)
        last = result.history[-1]
        return {
            "best_epoch": result.best_epoch,
            "epochs_run": len(result.history),
            "stopped_early": result.stopped_early,
            "train_loss": last.train_loss,
            "val_loss": None if np.isnan(last.val_loss) else last.val_loss,
        }


class PredictCommand(StageCommand):
    name = "predict"
    help = "Forecast the test split in original units."

    def run(self):
        test_set = load_datasets(self.dataset_dir)[2]
        _require_test(test_set)
        params = load_checkpoint(self.model_dir)
        prediction, truth = predict_dataset(test_set, params)
        baseline = test_set.stats.invert(persistence_forecast(test_set.x, test_set.horizon))
        write_container(
            self.forecast_dir,
            {"prediction": prediction, "truth": truth, "persistence": baseline},
            {"tag": _model_tag(self.config), "start": test_set.start, "window": test_set.window},
        )
        return {"forecasts": list(prediction.shape)}


class EvalCommand(StageCommand):
    name = "eval"
    help = "Score forecasts per horizon and write plot data."

    def run(self):
        tensors, metadata = read_container(self.forecast_dir)
        prediction, truth = tensors["prediction"], tensors["truth"]
        records = score_records(metadata["tag"], prediction, truth, self.config)
        if "persistence" in tensors:
            records += score_records(VARIANT_PERSISTENCE, tensors["persistence"], truth, self.config)
        write_jsonl(self.out / "metrics.jsonl", records)
        self._plot_data(prediction, truth, metadata).to_csv(self.out / "plot_data.csv", index=False)
        return {"metrics": records}

    def _plot_data(self, prediction, truth, metadata) -> pd.DataFrame:
        # first feature at the shortest evaluated horizon
        step = min(self.config.eval_horizons)
        samples, _, nodes, _ = prediction.shape
        first = int(metadata["start"]) + int(metadata["window"]) + step - 1
        time = np.repeat(first + np.arange(samples), nodes)
        return pd.DataFrame(
            {
                "time": time,
                "node": np.tile(np.arange(nodes), samples),
                "truth": truth[:, step - 1, :, 0].reshape(-1),
                "prediction": prediction[:, step - 1, :, 0].reshape(-1),
            }
        )


class AblateCommand(StageCommand):
    name = "ablate"
    help = "Train STG, STG+TTG and STG+TTG+PEPS variants with one seed and compare them."
    uses_stored_config = False

    def run(self):
        config = self.config
        datasets = prepare_datasets(config)
        train_set, _, test_set = datasets
        _require_test(test_set)
        stg, ttg = build_graphs(config, train_set)
        spatial, temporal = lift_pair(config, stg, ttg)
        pair = fit_peps(config, stg, ttg)
        peps_spatial, peps_temporal = lift_pair(config, *peps_graphs(pair, stg, ttg, config.peps_clamp))
        nodes = train_set.x.shape[2]
        variants = (
            (VARIANT_STG, spatial, identity_lift(config.window, config.k_b, nodes, Provenance.TEMPORAL)),
            (VARIANT_STG_TTG, spatial, temporal),
            (VARIANT_PEPS, peps_spatial, peps_temporal),
        )
        records = []
        for tag, lifted_a, lifted_b in variants:
            logger.info("Training ablation variant %s", tag)
            result = fit_model(config, datasets, lifted_a, lifted_b)
            prediction, truth = predict_dataset(test_set, result.params)
            records += score_records(tag, prediction, truth, config)
        baseline = test_set.stats.invert(persistence_forecast(test_set.x, test_set.horizon))
        records += score_records(VARIANT_PERSISTENCE, baseline, test_set.stats.invert(test_set.y), config)

        directory = self.out / "ablation"
        write_jsonl(directory / "ablation.jsonl", records)
        ablation_table(records).to_csv(directory / "ablation.csv")
        return {"metrics": records}


def ablation_table(records: List[Dict[str, Any]]) -> pd.DataFrame:
    """One row per variant, one column per ``metric@horizon``."""
    frame = pd.DataFrame(records)
    table = frame.pivot(index="tag", columns="horizon", values=list(METRIC_NAMES))
    table.columns = [f"{metric}@{step}" for metric, step in table.columns]
    order = [t for t in (VARIANT_STG, VARIANT_STG_TTG, VARIANT_PEPS, VARIANT_PERSISTENCE) if t in table.index]
    table = table.loc[order]
    table.index.name = "variant"
    return table
