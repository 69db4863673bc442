import json
import typing
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .errors import ConfigError, DataError, ValidationError
from .graphs import GraphMode
from .layers import Activation, Composition, LayerConfig
from .peps import default_ranks
from .training import ForecastTask, LossKind, OptimizerKind, TrainingConfig


def _choices(enum_cls) -> Dict[str, Any]:
    return {"choices": tuple(member.value for member in enum_cls)}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data_path: Optional[str] = None
    timestamp_column: Optional[str] = None
    synth_nodes: int = 16
    synth_steps: int = 2000
    synth_noise: float = 0.05
    window: int = 12
    horizon: int = 12
    eval_horizons: List[int] = field(default_factory=lambda: [3, 6, 12])
    split: List[float] = field(default_factory=lambda: [0.7, 0.1, 0.2])
    sigma2: float = 0.1
    epsilon: float = 0.5
    stg_mode: str = field(default="evolved", metadata=_choices(GraphMode))
    ttg_mode: str = field(default="kernel", metadata=_choices(GraphMode))
    embed_rank: int = 10
    evolve_step: float = 1.0
    graph_on_normalized: bool = True
    k_a: int = 3
    k_b: int = 3
    respect_asymmetry: bool = False
    composition: str = field(default="sequential", metadata=_choices(Composition))
    activation: str = field(default="relu", metadata=_choices(Activation))
    hidden_channels: int = 32
    num_blocks: int = 2
    use_peps: bool = False
    peps_rank_nodes: Optional[int] = None
    peps_rank_time: Optional[int] = None
    peps_tol: float = 1e-6
    peps_max_sweeps: int = 50
    peps_clamp: bool = True
    optimizer: str = field(default="momentum", metadata=_choices(OptimizerKind))
    learning_rate: float = 1e-3
    momentum: float = 0.9
    beta2: float = 0.999
    batch_size: int = 16
    epochs: int = 100
    patience: int = 10
    lr_decay: float = 1.0
    lr_decay_every: int = 0
    loss: str = field(default="mean", metadata=_choices(LossKind))
    train_graphs: bool = False
    mape_threshold: float = 1e-3
    write_edge_lists: bool = False

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any]) -> "RunConfig":
        form = RunConfigForm(raw)
        if not form.is_valid():
            raise ConfigError(form.errors)
        return form.save()

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def dump(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @property
    def task(self) -> ForecastTask:
        return ForecastTask(self.window, self.horizon)

    @property
    def layer(self) -> LayerConfig:
        return LayerConfig(Composition(self.composition), Activation(self.activation))

    def training(self) -> TrainingConfig:
        return TrainingConfig(
            optimizer=OptimizerKind(self.optimizer),
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            beta2=self.beta2,
            batch_size=self.batch_size,
            epochs=self.epochs,
            patience=self.patience,
            lr_decay=self.lr_decay,
            lr_decay_every=self.lr_decay_every,
            loss=LossKind(self.loss),
            train_graphs=self.train_graphs,
            seed=self.seed,
        )


class RunConfigForm:
    """Validates a raw mapping into a RunConfig.

    Each field is coerced from its annotation, then passed through an
    optional ``clean_<name>`` hook; ``clean`` runs the cross-field checks.
    """

    def __init__(self, data: Mapping[str, Any]):
        self.data = dict(data)
        self.errors: List[str] = []
        self.cleaned_data: Dict[str, Any] = {}
        self._fields = {f.name: f for f in fields(RunConfig)}

    def is_valid(self) -> bool:
        self.errors = []
        self.cleaned_data = {}
        unknown = sorted(set(self.data) - set(self._fields))
        for key in unknown:
            self.errors.append(f"unknown config key {key!r}")
        for name, declared in self._fields.items():
            if name in self.data:
                value = self.data[name]
            elif declared.default_factory is not MISSING:
                value = declared.default_factory()
            else:
                value = declared.default
            try:
                value = self._coerce(name, declared, value)
                hook = getattr(self, f"clean_{name}", None)
                if hook is not None:
                    value = hook(value)
            except ConfigError as exc:
                self.errors.extend(exc.messages)
                continue
            self.cleaned_data[name] = value
        if not self.errors:
            try:
                self.clean()
            except ConfigError as exc:
                self.errors.extend(exc.messages)
        return not self.errors

    def save(self) -> RunConfig:
        return RunConfig(**self.cleaned_data)

    def _coerce(self, name: str, declared, value: Any) -> Any:
        kind = declared.type
        optional = False
        if typing.get_origin(kind) is Union:
            args = [a for a in typing.get_args(kind) if a is not type(None)]
            kind, optional = args[0], True
        if value is None:
            if optional:
                return None
            raise ConfigError(f"{name} may not be null")
        if typing.get_origin(kind) in (list, List):
            (item,) = typing.get_args(kind)
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{name} must be a list, got {value!r}")
            return [self._scalar(name, item, v) for v in value]
        value = self._scalar(name, kind, value)
        choices = declared.metadata.get("choices")
        if choices and value not in choices:
            raise ConfigError(f"{name} must be one of {', '.join(choices)}, got {value!r}")
        return value

    @staticmethod
    def _scalar(name: str, kind, value: Any) -> Any:
        if kind is bool:
            if isinstance(value, bool):
                return value
            raise ConfigError(f"{name} must be true or false, got {value!r}")
        if kind is int:
            if isinstance(value, int) and not isinstance(value, bool):
                return value
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        if kind is float:
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                return float(value)
            raise ConfigError(f"{name} must be a number, got {value!r}")
        if kind is str:
            if isinstance(value, str):
                return value
            raise ConfigError(f"{name} must be a string, got {value!r}")
        return value

    @staticmethod
    def _positive(name: str, value):
        if value <= 0:
            raise ConfigError(f"{name} must be positive, got {value}")
        return value

    def clean_window(self, value):
        return self._positive("window", value)

    def clean_horizon(self, value):
        return self._positive("horizon", value)

    def clean_synth_nodes(self, value):
        if value < 2:
            raise ConfigError(f"synth_nodes must be at least 2, got {value}")
        return value

    def clean_synth_steps(self, value):
        return self._positive("synth_steps", value)

    def clean_synth_noise(self, value):
        if value < 0:
            raise ConfigError(f"synth_noise must be non-negative, got {value}")
        return value

    def clean_sigma2(self, value):
        return self._positive("sigma2", value)

    def clean_epsilon(self, value):
        if not 0 < value <= 1:
            raise ConfigError(f"epsilon must lie in (0, 1], got {value}")
        return value

    def clean_embed_rank(self, value):
        return self._positive("embed_rank", value)

    def clean_evolve_step(self, value):
        if value < 0:
            raise ConfigError(f"evolve_step must be non-negative, got {value}")
        return value

    def clean_k_a(self, value):
        return self._positive("k_a", value)

    def clean_k_b(self, value):
        return self._positive("k_b", value)

    def clean_hidden_channels(self, value):
        return self._positive("hidden_channels", value)

    def clean_num_blocks(self, value):
        return self._positive("num_blocks", value)

    def clean_peps_rank_nodes(self, value):
        return value if value is None else self._positive("peps_rank_nodes", value)

    def clean_peps_rank_time(self, value):
        return value if value is None else self._positive("peps_rank_time", value)

    def clean_peps_tol(self, value):
        return self._positive("peps_tol", value)

    def clean_peps_max_sweeps(self, value):
        return self._positive("peps_max_sweeps", value)

    def clean_learning_rate(self, value):
        if value < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {value}")
        return value

    def clean_momentum(self, value):
        if not 0 <= value < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {value}")
        return value

    def clean_beta2(self, value):
        if not 0 <= value < 1:
            raise ConfigError(f"beta2 must lie in [0, 1), got {value}")
        return value

    def clean_batch_size(self, value):
        return self._positive("batch_size", value)

    def clean_epochs(self, value):
        return self._positive("epochs", value)

    def clean_patience(self, value):
        return self._positive("patience", value)

    def clean_lr_decay(self, value):
        return self._positive("lr_decay", value)

    def clean_lr_decay_every(self, value):
        if value < 0:
            raise ConfigError(f"lr_decay_every must be non-negative, got {value}")
        return value

    def clean_mape_threshold(self, value):
        if value < 0:
            raise ConfigError(f"mape_threshold must be non-negative, got {value}")
        return value

    def clean_split(self, value):
        if len(value) != 3 or any(v < 0 for v in value) or abs(sum(value) - 1.0) > 1e-9:
            raise ConfigError(f"split must be three non-negative fractions summing to 1, got {value}")
        return value

    def clean_eval_horizons(self, value):
        if not value or any(v < 1 for v in value):
            raise ConfigError(f"eval_horizons must be a non-empty list of positive steps, got {value}")
        return value

    def clean(self) -> None:
        cleaned = self.cleaned_data
        too_far = [h for h in cleaned["eval_horizons"] if h > cleaned["horizon"]]
        if too_far:
            raise ConfigError(
                f"eval_horizons {too_far} exceed the trained horizon {cleaned['horizon']}"
            )
        if cleaned["window"] < 2:
            raise ConfigError("window must be at least 2 to build a temporal graph")


def parse_overrides(pairs: Sequence[str]) -> Dict[str, Any]:
    """``key=value`` strings; values are read as JSON, else kept as text."""
    out = {}
    for pair in pairs:
        key, sep, text = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        try:
            value = json.loads(text)
        except ValueError:
            value = text
        out[key.strip()] = value
    return out


PINNED_KEYS = ("window", "horizon")


def _read_json(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"could not decode JSON in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return raw


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    stored: Optional[Union[str, Path]] = None,
) -> RunConfig:
    """Layer ``stored``, then ``path``, then ``overrides`` and ``seed``.

    ``stored`` is the configuration written when the datasets were prepared;
    its window and horizon may not change afterwards.
    """
    raw: Dict[str, Any] = {}
    base: Dict[str, Any] = {}
    if stored is not None:
        base = _read_json(stored)
        raw.update(base)
    if path is not None:
        raw.update(_read_json(path))
    raw.update(parse_overrides(overrides))
    if seed is not None:
        raw["seed"] = seed
    config = RunConfig.from_mapping(raw)
    changed = [
        f"{key} is {base[key]} in {stored}, got {getattr(config, key)}"
        for key in PINNED_KEYS
        if key in base and base[key] != getattr(config, key)
    ]
    if changed:
        raise ValidationError(changed)
    return config


def resolve_peps_ranks(config: RunConfig, nodes: int, steps: int) -> Tuple[int, int]:
    r_n, r_t = default_ranks(nodes, steps)
    return (
        min(config.peps_rank_nodes or r_n, nodes),
        min(config.peps_rank_time or r_t, steps),
    )
