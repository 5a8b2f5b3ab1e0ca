"""Run configuration: one flat key=value namespace shared by all subcommands.

Config files hold ``key = value`` lines; ``#`` starts a comment. Values are
parsed according to the field type of :class:`RunConfig`; tuples are comma
separated and an empty value means "use the default".
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Iterable, get_type_hints

from . import __version__
from .dataset import GenerateConfig
from .oracle import FlowCase, SolverSettings
from .surrogate import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # shared
    seed: int = 0
    workers: int = 0  # 0 means one per logical CPU
    # flow case and oracle
    reynolds: float = 10.0
    prandtl: float = 0.7
    oracle_resolution: int = 32
    t_end: float = 30.0
    avg_start: float = 20.0
    dt_max: float = 0.05
    # dataset generation
    n_samples: int = 500
    n_shapes: int = 1
    points: tuple[int, ...] = (4, 5)
    resolution: int = 64
    labels: str = "oracle"
    fractions: tuple[float, ...] = ()  # empty: 70/15/15 single, 90/5/5 multi
    max_retries: int = 5
    # grid study
    grid_sets: int = 5
    grid_resolutions: tuple[int, ...] = (32, 48, 64)
    grid_tolerance: float = 0.01
    # model and training
    dataset: str = ""
    model: str = "cnn"
    width: float = 1.0
    stem_stride: int = 2
    target: str = "heat_transfer"
    batch_size: int = 32
    epochs: int = 200
    learning_rate: float = 1e-3
    decay: float = 5e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    plateau_patience: int = 20
    early_stop_patience: int = 0
    mirror_augment: bool = False
    # search
    search_budget: int = 8
    search_epochs: int = 20
    # evaluation, prediction, timing
    bundle: str = ""
    split: str = "test"
    ci_level: float = 0.99
    image: str = ""
    bench_shapes: int = 20
    bench_trials: int = 1
    bench_resolution: int = 64

    def __post_init__(self) -> None:
        if self.model not in ("cnn", "xception"):
            raise ConfigError(f"model must be 'cnn' or 'xception', got {self.model!r}")
        if self.split not in ("train", "val", "test"):
            raise ConfigError(f"split must be train, val or test, got {self.split!r}")
        if self.seed < 0 or self.workers < 0:
            raise ConfigError("seed and workers must be non-negative")

    # derived configs -------------------------------------------------------

    @property
    def case(self) -> FlowCase:
        return FlowCase(reynolds=self.reynolds, prandtl=self.prandtl)

    @property
    def solver_settings(self) -> SolverSettings:
        return SolverSettings(t_end=self.t_end, avg_start=self.avg_start, dt_max=self.dt_max)

    def generate_config(self) -> GenerateConfig:
        return GenerateConfig(
            n_samples=self.n_samples,
            n_shapes=self.n_shapes,
            points=self.points,
            resolution=self.resolution,
            oracle_resolution=self.oracle_resolution,
            case=self.case,
            seed=self.seed,
            fractions=tuple(self.fractions) or None,
            max_retries=self.max_retries,
            settings=self.solver_settings,
            labels=self.labels,
        )

    def train_config(self, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            epochs=epochs or self.epochs,
            learning_rate=self.learning_rate,
            decay=self.decay,
            optimizer=self.optimizer,
            beta1=self.beta1,
            beta2=self.beta2,
            momentum=self.momentum,
            seed=self.seed,
            target=self.target,
            plateau_patience=self.plateau_patience,
            early_stop_patience=self.early_stop_patience,
            mirror_augment=self.mirror_augment,
        )

    # text form -------------------------------------------------------------

    def dumps(self) -> str:
        lines = [f"# finsurrogate {__version__} resolved configuration"]
        for f in fields(self):
            v = getattr(self, f.name)
            text = ",".join(str(x) for x in v) if isinstance(v, tuple) else repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


_TYPES = get_type_hints(RunConfig)
FIELD_NAMES = tuple(f.name for f in fields(RunConfig))


def parse_value(key: str, text: str) -> Any:
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    text = text.strip()
    try:
        if kind is bool:
            if text.lower() not in ("1", "true", "yes", "0", "false", "no"):
                raise ValueError(text)
            return text.lower() in ("1", "true", "yes")
        if kind in (int, float, str):
            return kind(text)
        item = int if kind == tuple[int, ...] else float
        return tuple(item(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse key=value lines; every error names its line number."""
    values: dict[str, Any] = {}
    errors = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key = key.strip()
        if not eq:
            errors.append(f"{source}:{n}: expected key = value")
            continue
        try:
            values[key] = parse_value(key, value)
        except ConfigError as exc:
            errors.append(f"{source}:{n}: {exc}")
    if errors:
        raise ConfigError("; ".join(errors))
    return values


def load_config(path: str | Path | None = None, overrides: Iterable[tuple[str, Any]] = ()) -> RunConfig:
    values = parse_config_text(Path(path).read_text(), str(path)) if path else {}
    for key, value in overrides:
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = parse_value(key, value) if isinstance(value, str) else value
    try:
        return replace(RunConfig(), **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
