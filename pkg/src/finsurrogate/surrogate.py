"""Surrogate architectures, training loop, random search, and model bundles.

Two model families are built on :mod:`finsurrogate.nn`:

* the optimized CNN: stacked (conv, conv, maxpool) blocks whose final block
  keeps a single conv, then flatten and two fully connected layers;
* a mini-Xception: a strided conv stem, residual blocks of depthwise
  separable convs with pooled 1x1 skip projections, global average
  pooling and a linear output.

Training is full float64, deterministic given the seed: initial weights come
from the ``init`` stream, epoch ``e`` is shuffled by ``stream(seed, "shuffle", e)``.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import layers as L
from .nn.functional import mse_loss
from .nn.io import dumps_weights, load_into
from .nn.layers import Network, NetworkSpec, SpecError
from .nn.optim import OptimizerError, OptimizerState, step
from .rng import derive_seed, stream

log = logging.getLogger(__name__)

TARGETS = ("heat_transfer", "pressure_drop")
CNN_FILTERS = (8, 8, 16, 16, 24, 24, 32, 32, 40, 40, 48)
CNN_FC_UNITS = 64
MIN_RESOLUTION = 32


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str = "non-finite loss"):
        super().__init__(f"{detail} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


def _check_resolution(resolution: int, n_pools: int) -> None:
    if resolution < MIN_RESOLUTION:
        raise ValueError(f"input resolution {resolution} below minimum {MIN_RESOLUTION}")
    if resolution >> n_pools < 1:
        raise ValueError(f"resolution {resolution} too small for {n_pools} 2x2 poolings")


def build_optimized_cnn(
    input_resolution: int,
    filters: Sequence[int] = CNN_FILTERS,
    n_pools: int = 5,
    fc_units: int = CNN_FC_UNITS,
) -> NetworkSpec:
    """Conv pairs separated by 2x2 pooling; the last block has one conv unless
    ``n_pools`` asks for a pool after it as well.

    ``filters`` lists one entry per conv; 11 entries give the (2+2+2+2+2+1) layout.
    """
    n_conv = len(filters)
    if n_conv < 1 or n_conv % 2 == 0:
        raise ValueError("filters needs an odd count: pairs per block plus one final conv")
    n_blocks = n_conv // 2 + 1
    if not n_blocks - 1 <= n_pools <= n_blocks:
        raise ValueError(f"{n_blocks} blocks take {n_blocks - 1} or {n_blocks} poolings, not {n_pools}")
    _check_resolution(input_resolution, n_pools)
    layers: list[L.LayerSpec] = []
    for b in range(n_blocks - 1):
        layers += [L.conv(filters[2 * b]), L.relu(), L.conv(filters[2 * b + 1]), L.relu(), L.maxpool()]
    layers += [L.conv(filters[-1]), L.relu()]
    if n_pools == n_blocks:
        layers.append(L.maxpool())
    layers += [L.flatten(), L.dense(fc_units), L.relu(), L.dense(1)]
    spec = NetworkSpec((1, input_resolution, input_resolution), tuple(layers), name="optimized_cnn")
    spec.validate()
    return spec


def build_mini_xception(
    input_resolution: int,
    width_multiplier: float = 1.0,
    block_filters: Sequence[int] = (48, 64, 96),
    stem_stride: int = 2,
) -> NetworkSpec:
    """Stem (strided conv, conv), residual separable blocks, GAP, linear(1).

    ``stem_stride=1`` keeps full resolution into the first block, which small
    inputs need: at 64 px a stride-2 stem discards most of the fin outline.
    """
    if width_multiplier <= 0:
        raise ValueError("width_multiplier must be positive")
    if len(block_filters) < 3:
        raise ValueError("mini-Xception needs at least 3 residual blocks")
    if stem_stride not in (1, 2):
        raise ValueError("stem_stride must be 1 or 2")
    _check_resolution(input_resolution, len(block_filters) + stem_stride - 1)

    def w(c: int) -> int:
        return max(1, int(round(c * width_multiplier)))

    layers = [L.conv(w(16), stride=stem_stride, padding=1), L.relu(), L.conv(w(32)), L.relu()]
    for c in block_filters:
        main = [L.relu(), L.sepconv(w(c)), L.relu(), L.sepconv(w(c)), L.maxpool()]
        skip = [L.maxpool(), L.conv(w(c), kernel=1)]
        layers.append(L.residual(main, skip))
    layers += [L.relu(), L.global_avg_pool(), L.dense(1)]
    spec = NetworkSpec((1, input_resolution, input_resolution), tuple(layers), name="mini_xception")
    spec.validate()
    return spec


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 200
    learning_rate: float = 1e-3
    decay: float = 5e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    seed: int = 0
    target: str = "heat_transfer"
    plateau_patience: int = 20
    plateau_factor: float = 0.5
    early_stop_patience: int = 0  # 0 disables
    # flip each training image upside down with probability 1/2; exact for layouts symmetric about the centreline
    mirror_augment: bool = False

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.learning_rate < 0 or self.decay < 0:
            raise ValueError("learning_rate and decay must be non-negative")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(
            kind=self.optimizer,
            learning_rate=self.learning_rate,
            decay=self.decay,
            betas=(self.beta1, self.beta2),
            momentum=self.momentum,
        )

    def dumps(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in fields(self))

    @classmethod
    def loads(cls, text: str) -> TrainConfig:
        kinds = {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            if key not in kinds:
                raise ValueError(f"unknown train config key {key!r}")
            if kinds[key] is bool:
                kw[key] = value == "True"
            else:
                kw[key] = value.strip("'\"") if kinds[key] is str else kinds[key](value)
        return cls(**kw)


@dataclass
class TrainHistory:
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    learning_rate: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self) -> int:
        return len(self.train_mse)

    @property
    def best_val_mse(self) -> float:
        return self.val_mse[self.best_epoch] if self.best_epoch >= 0 else math.inf

    def to_csv(self) -> str:
        rows = ["epoch,train_mse,val_mse,seconds,learning_rate"]
        for e, row in enumerate(zip(self.train_mse, self.val_mse, self.seconds, self.learning_rate)):
            rows.append(f"{e}," + ",".join(repr(float(v)) for v in row))
        return "\n".join(rows) + "\n"


@dataclass
class TrainedModel:
    spec: NetworkSpec
    network: Network
    config: TrainConfig
    history: TrainHistory
    label_range: tuple[float, float] = (0.0, 1.0)

    @property
    def mirror_average(self) -> bool:
        """Models trained on mirrored images predict the mean over both orientations."""
        return self.config.mirror_augment

    def predict(self, images: np.ndarray) -> np.ndarray:
        return predict(self.network, images, mirror_average=self.mirror_average)

    def timed_predict(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return timed_predict(self.network, images, mirror_average=self.mirror_average)

    def denormalize(self, values: np.ndarray | float) -> np.ndarray | float:
        return denormalize(values, *self.label_range)


@dataclass
class ArraySplits:
    """Images (N, 1, H, W) in [0, 1] and normalized labels (N,) per split."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray | None = None
    y_test: np.ndarray | None = None
    label_range: tuple[float, float] = (0.0, 1.0)


def _as_splits(data, target: str) -> ArraySplits:
    if isinstance(data, ArraySplits):
        return data
    from .dataset import DatasetManifest, split_arrays

    if isinstance(data, DatasetManifest):
        return split_arrays(data, target)
    raise TypeError(f"cannot train on {type(data).__name__}")


def evaluate_mse(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 64) -> float:
    total = 0.0
    for i in range(0, len(x), batch_size):
        out = net.forward(x[i : i + batch_size])[:, 0]
        d = out - y[i : i + batch_size]
        total += float(d @ d)
    return total / len(x)


def train(spec: NetworkSpec, data, cfg: TrainConfig = TrainConfig()) -> TrainedModel:
    """Mini-batch training; keeps the weights of the best validation epoch.

    The learning rate is ``lr / (1 + decay * epoch)`` times ``plateau_factor``
    for every ``plateau_patience`` epochs without validation improvement.
    """
    splits = _as_splits(data, cfg.target)
    if len(splits.x_train) == 0 or len(splits.x_val) == 0:
        raise ValueError("training needs non-empty train and validation splits")
    spec.validate()
    if tuple(splits.x_train.shape[1:]) != spec.input_shape:
        raise ValueError(f"images {splits.x_train.shape[1:]} do not match network input {spec.input_shape}")
    net = Network.from_spec(spec, cfg.seed)
    state = cfg.optimizer_state()
    params = net.params()
    hist = TrainHistory()
    best = net.get_weights()
    best_val = math.inf
    plateau_scale, since_best, since_cut = 1.0, 0, 0
    n = len(splits.x_train)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = state.scheduled_lr(epoch) * plateau_scale
        order = stream(cfg.seed, "shuffle", epoch).permutation(n)
        running = 0.0
        for b, i in enumerate(range(0, n, cfg.batch_size)):
            idx = order[i : i + cfg.batch_size]
            xb = splits.x_train[idx]
            if cfg.mirror_augment:
                flip = stream(cfg.seed, "shuffle", epoch, b).random(len(idx)) < 0.5
                xb = np.where(flip[:, None, None, None], xb[:, :, ::-1, :], xb)
            out = net.forward(xb)
            loss, dout = mse_loss(splits.y_train[idx].reshape(out.shape), out)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, b)
            net.backward(dout, need_input_grad=False)
            try:
                step(params, net.grads(), state, lr)
            except OptimizerError as exc:
                raise TrainingDiverged(epoch, b, str(exc)) from exc
            running += loss * len(idx)
        val = evaluate_mse(net, splits.x_val, splits.y_val)
        if not math.isfinite(val):
            raise TrainingDiverged(epoch, -1, "non-finite validation loss")
        hist.train_mse.append(running / n)
        hist.val_mse.append(val)
        hist.learning_rate.append(lr)
        if val < best_val:
            best_val, best, hist.best_epoch = val, net.get_weights(), epoch
            since_best = since_cut = 0
        else:
            since_best += 1
            since_cut += 1
            if since_cut >= cfg.plateau_patience:
                plateau_scale *= cfg.plateau_factor
                since_cut = 0
        hist.seconds.append(time.perf_counter() - t0)
        log.debug("epoch %d train %.3g val %.3g lr %.3g", epoch, hist.train_mse[-1], val, lr)
        if cfg.early_stop_patience and since_best >= cfg.early_stop_patience:
            log.info("early stop at epoch %d (best %d)", epoch, hist.best_epoch)
            break
    net.set_weights(best)
    return TrainedModel(spec, net, cfg, hist, splits.label_range)


def predict(net: Network, images: np.ndarray, batch_size: int = 64, mirror_average: bool = False) -> np.ndarray:
    """Normalized predictions for a batch (N, 1, H, W) or a single (H, W) image.

    With ``mirror_average`` each image and its upside-down flip are both
    evaluated and the two outputs averaged.
    """
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if tuple(x.shape[1:]) != net.spec.input_shape:
        raise ValueError(f"image shape {x.shape[1:]} does not match network input {net.spec.input_shape}")
    out = np.concatenate([net.forward(x[i : i + batch_size])[:, 0] for i in range(0, len(x), batch_size)])
    if mirror_average:
        flipped = x[:, :, ::-1, :]
        out = 0.5 * (out + np.concatenate([net.forward(flipped[i : i + batch_size])[:, 0] for i in range(0, len(x), batch_size)]))
    return out[0] if single else out


def timed_predict(net: Network, images: np.ndarray, mirror_average: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Per-image predictions and wall-clock seconds, one forward pass each."""
    x = np.asarray(images, dtype=np.float64)
    values, seconds = np.empty(len(x)), np.empty(len(x))
    for i in range(len(x)):
        t0 = time.perf_counter()
        values[i] = predict(net, x[i : i + 1], mirror_average=mirror_average)[0]
        seconds[i] = time.perf_counter() - t0
    return values, seconds


def normalize(values, lo: float, hi: float):
    if hi == lo:
        raise ValueError("degenerate label range")
    return (np.asarray(values, dtype=np.float64) - lo) / (hi - lo)


def denormalize(values, lo: float, hi: float):
    return np.asarray(values, dtype=np.float64) * (hi - lo) + lo


# model bundles ---------------------------------------------------------------

WEIGHTS_FILE = "weights.fsrw"
SPEC_FILE = "spec.txt"
CONFIG_FILE = "train_config.txt"
HISTORY_FILE = "history.csv"
META_FILE = "meta.txt"


def save_bundle(model: TrainedModel, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / WEIGHTS_FILE).write_bytes(dumps_weights(model.network))
    (d / SPEC_FILE).write_text(model.spec.dumps())
    (d / CONFIG_FILE).write_text(model.config.dumps())
    (d / HISTORY_FILE).write_text(model.history.to_csv())
    lo, hi = model.label_range
    (d / META_FILE).write_text(f"label_min={lo!r}\nlabel_max={hi!r}\nbest_epoch={model.history.best_epoch}\n")
    return d


def load_bundle(directory: str | Path) -> TrainedModel:
    d = Path(directory)
    missing = [f for f in (WEIGHTS_FILE, SPEC_FILE, CONFIG_FILE, META_FILE) if not (d / f).is_file()]
    if missing:
        raise FileNotFoundError(f"model bundle {d} lacks {', '.join(missing)}")
    spec = NetworkSpec.loads((d / SPEC_FILE).read_text())
    cfg = TrainConfig.loads((d / CONFIG_FILE).read_text())
    net = Network.from_spec(spec, cfg.seed)
    load_into(net, (d / WEIGHTS_FILE).read_bytes())
    meta = dict(line.split("=", 1) for line in (d / META_FILE).read_text().splitlines() if line)
    hist = TrainHistory(best_epoch=int(meta.get("best_epoch", -1)))
    if (d / HISTORY_FILE).is_file():
        for row in (d / HISTORY_FILE).read_text().splitlines()[1:]:
            _, tr, va, sec, lr = row.split(",")
            hist.train_mse.append(float(tr))
            hist.val_mse.append(float(va))
            hist.seconds.append(float(sec))
            hist.learning_rate.append(float(lr))
    return TrainedModel(spec, net, cfg, hist, (float(meta["label_min"]), float(meta["label_max"])))


# random search ---------------------------------------------------------------


@dataclass(frozen=True)
class SearchSpace:
    """Inclusive integer ranges sampled uniformly."""

    blocks: tuple[int, int] = (4, 9)
    filters: tuple[int, int] = (9, 95)
    fc_layers: tuple[int, int] = (3, 4)
    fc_units: tuple[int, int] = (9, 95)

    def __post_init__(self) -> None:
        for name in ("blocks", "filters", "fc_layers", "fc_units"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ValueError(f"bad range for {name}: {(lo, hi)}")


@dataclass(frozen=True)
class Candidate:
    index: int
    blocks: int
    filters: tuple[int, ...]
    fc_layers: int
    fc_units: tuple[int, ...]

    def spec(self, resolution: int) -> NetworkSpec:
        """Blocks of two convs and a pool, the last block a single conv;
        ``fc_layers`` counts dense layers including the linear output."""
        pools = self.blocks - 1
        if resolution >> pools < 1:
            raise SpecError(f"{pools} poolings exceed resolution {resolution}")
        layers: list[L.LayerSpec] = []
        for b in range(self.blocks - 1):
            layers += [L.conv(self.filters[2 * b]), L.relu(), L.conv(self.filters[2 * b + 1]), L.relu(), L.maxpool()]
        layers += [L.conv(self.filters[-1]), L.relu(), L.flatten()]
        for u in self.fc_units:
            layers += [L.dense(u), L.relu()]
        layers.append(L.dense(1))
        spec = NetworkSpec((1, resolution, resolution), tuple(layers), name=f"search_{self.index}")
        spec.validate()
        return spec


def sample_candidate(space: SearchSpace, seed: int, index: int) -> Candidate:
    rng = stream(seed, "search", index)
    blocks = int(rng.integers(space.blocks[0], space.blocks[1] + 1))
    filters = tuple(int(v) for v in rng.integers(space.filters[0], space.filters[1] + 1, size=2 * blocks - 1))
    fc = int(rng.integers(space.fc_layers[0], space.fc_layers[1] + 1))
    units = tuple(int(v) for v in rng.integers(space.fc_units[0], space.fc_units[1] + 1, size=fc - 1))
    return Candidate(index, blocks, filters, fc, units)


@dataclass
class LeaderboardEntry:
    candidate: Candidate
    val_mse: float
    n_params: int
    seconds: float


@dataclass
class SearchResult:
    leaderboard: list[LeaderboardEntry]
    skipped: list[tuple[Candidate, str]]

    @property
    def best(self) -> LeaderboardEntry:
        return self.leaderboard[0]

    def to_csv(self) -> str:
        rows = ["rank,index,blocks,filters,fc_layers,fc_units,n_params,val_mse"]
        for r, e in enumerate(self.leaderboard):
            c = e.candidate
            rows.append(
                f"{r},{c.index},{c.blocks},{' '.join(map(str, c.filters))},{c.fc_layers},"
                f"{' '.join(map(str, c.fc_units))},{e.n_params},{e.val_mse!r}"
            )
        return "\n".join(rows) + "\n"


def _evaluate_candidate(args) -> LeaderboardEntry:
    cand, resolution, splits, cfg = args
    spec = cand.spec(resolution)
    t0 = time.perf_counter()
    model = train(spec, splits, cfg)
    return LeaderboardEntry(cand, model.history.best_val_mse, spec.n_params(), time.perf_counter() - t0)


def random_search(
    space: SearchSpace,
    budget: int,
    data,
    seed: int,
    base_config: TrainConfig = TrainConfig(epochs=20),
    workers: int = 1,
    max_draws: int | None = None,
) -> SearchResult:
    """Train ``budget`` feasible candidates; infeasible draws are logged and skipped.

    Each candidate trains with ``base_config`` reseeded from the search seed,
    so the leaderboard is independent of ``workers``.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    splits = _as_splits(data, base_config.target)
    resolution = splits.x_train.shape[-1]
    max_draws = max_draws or 50 * budget
    jobs, skipped = [], []
    index = 0
    while len(jobs) < budget and index < max_draws:
        cand = sample_candidate(space, seed, index)
        index += 1
        try:
            cand.spec(resolution)
        except SpecError as exc:
            log.warning("search candidate %d skipped: %s", cand.index, exc)
            skipped.append((cand, str(exc)))
            continue
        cfg = replace(base_config, seed=derive_seed(seed, "search", cand.index) % 2**31)
        jobs.append((cand, resolution, splits, cfg))
    if not jobs:
        raise ValueError(f"no feasible candidate in {max_draws} draws")
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            entries = list(pool.map(_evaluate_candidate, jobs))
    else:
        entries = [_evaluate_candidate(j) for j in jobs]
    entries.sort(key=lambda e: (e.val_mse, e.candidate.index))
    return SearchResult(entries, skipped)


__all__ = [
    "ArraySplits",
    "Candidate",
    "SearchResult",
    "SearchSpace",
    "TrainConfig",
    "TrainHistory",
    "TrainedModel",
    "TrainingDiverged",
    "build_mini_xception",
    "build_optimized_cnn",
    "denormalize",
    "load_bundle",
    "normalize",
    "predict",
    "random_search",
    "sample_candidate",
    "save_bundle",
    "timed_predict",
    "train",
]
