"""Labeled datasets: geometry -> raster -> oracle, with splits and normalization.

On disk a dataset is a directory::

    manifest.txt        key=value header, checksum line, '---', CSV records
    images/000017.pgm   surrogate input for sample 17
    shapes/000017.txt   the fins of sample 17 (geometry text format)

Sample ``i`` uses the seed ``derive_seed(seed, "geometry", i, retry)``; that
per-sample seed is stored in the record and is all that is needed to rebuild
its fins, image and labels.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import CHANNEL, FinShape, GenerationExhausted, dumps_shape, sample_fin, slot_boxes
from .oracle import FinPlacementError, FlowCase, SolverError, SolverSettings, baseline, solve
from .raster import RasterImage, load_pgm, rasterize, write_pgm
from .rng import derive_seed, stream

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
UNASSIGNED = "none"
COLUMNS = ("id", "image", "n_shapes", "seed", "re", "pr", "q", "dp", "q_norm", "dp_norm", "split")
LABEL_SOURCES = ("oracle", "pixel_fraction")
SINGLE_FRACTIONS = (0.7, 0.15, 0.15)
MULTI_FRACTIONS = (0.9, 0.05, 0.05)


class ManifestFormatError(ValueError):
    pass


class IntegrityError(RuntimeError):
    def __init__(self, missing: list[int]):
        super().__init__(f"missing image files for ids {missing}")
        self.missing = missing


class PartialManifestError(RuntimeError):
    """Some samples failed every retry; ``manifest`` holds the successes."""

    def __init__(self, failures: list[tuple[int, str]], manifest: DatasetManifest):
        ids = ", ".join(str(i) for i, _ in failures)
        super().__init__(f"{len(failures)} samples exhausted their retries: {ids}")
        self.failures = failures
        self.manifest = manifest


class DegenerateRangeError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    id: int
    image: str
    n_shapes: int
    seed: int
    re: float
    pr: float
    q: float
    dp: float
    q_norm: float = math.nan
    dp_norm: float = math.nan
    split: str = UNASSIGNED

    def to_row(self) -> str:
        return ",".join(
            [str(self.id), self.image, str(self.n_shapes), str(self.seed)]
            + [repr(float(getattr(self, c))) for c in ("re", "pr", "q", "dp", "q_norm", "dp_norm")]
            + [self.split]
        )

    @classmethod
    def from_row(cls, row: str) -> SampleRecord:
        parts = row.split(",")
        if len(parts) != len(COLUMNS):
            raise ManifestFormatError(f"expected {len(COLUMNS)} fields, got {len(parts)}: {row!r}")
        split = parts[10]
        if split not in SPLITS + (UNASSIGNED,):
            raise ManifestFormatError(f"unknown split {split!r}")
        try:
            return cls(int(parts[0]), parts[1], int(parts[2]), int(parts[3]), *map(float, parts[4:10]), split)
        except ValueError as exc:
            raise ManifestFormatError(f"bad record {row!r}: {exc}") from None


@dataclass
class DatasetManifest:
    seed: int
    resolution: int
    oracle_resolution: int
    n_shapes: int
    points: tuple[int, ...]
    reynolds: float
    prandtl: float
    q_b: float
    dp_b: float
    records: list[SampleRecord] = field(default_factory=list)
    fractions: tuple[float, float, float] = SINGLE_FRACTIONS
    split_seed: int = 0
    q_min: float = math.nan
    q_max: float = math.nan
    dp_min: float = math.nan
    dp_max: float = math.nan
    labels: str = "oracle"
    format_version: int = FORMAT_VERSION
    root: Path | None = field(default=None, compare=False, repr=False)

    _HEADER = (
        "format_version", "labels", "seed", "resolution", "oracle_resolution", "n_shapes", "points",
        "reynolds", "prandtl", "q_b", "dp_b", "fractions", "split_seed",
        "q_min", "q_max", "dp_min", "dp_max",
    )  # fmt: skip

    def __eq__(self, other: object) -> bool:
        return isinstance(other, DatasetManifest) and self.dumps() == other.dumps()

    def __len__(self) -> int:
        return len(self.records)

    @property
    def case(self) -> FlowCase:
        return FlowCase(reynolds=self.reynolds, prandtl=self.prandtl)

    def ids(self, split: str | None = None) -> list[int]:
        return [r.id for r in self.records if split is None or r.split == split]

    def subset(self, split: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == split]

    def label_range(self, target: str) -> tuple[float, float]:
        return (self.q_min, self.q_max) if target == "heat_transfer" else (self.dp_min, self.dp_max)

    def image_path(self, rec: SampleRecord) -> Path:
        return (self.root or Path(".")) / rec.image

    def dumps(self) -> str:
        lines = []
        for key in self._HEADER:
            v = getattr(self, key)
            if isinstance(v, tuple):
                text = ",".join(repr(x) for x in v)
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            lines.append(f"{key}={text}")
        body = "\n".join(lines) + "\n---\n" + ",".join(COLUMNS) + "\n" + "".join(r.to_row() + "\n" for r in self.records)
        digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
        return f"# finsurrogate dataset manifest\nchecksum=sha256:{digest}\n" + body

    @classmethod
    def loads(cls, text: str) -> DatasetManifest:
        lines = text.split("\n")
        if len(lines) < 3 or not lines[0].startswith("#") or not lines[1].startswith("checksum=sha256:"):
            raise ManifestFormatError("missing manifest preamble or checksum line")
        body = "\n".join(lines[2:])
        if hashlib.sha256(body.encode("utf-8")).hexdigest() != lines[1].split(":", 1)[1]:
            raise ManifestFormatError("checksum mismatch")
        head, sep, table = body.partition("---\n")
        if not sep:
            raise ManifestFormatError("missing '---' separator")
        kv = {}
        for n, line in enumerate(head.splitlines(), start=3):
            key, eq, value = line.partition("=")
            if not eq or key not in cls._HEADER:
                raise ManifestFormatError(f"line {n}: unexpected header entry {line!r}")
            kv[key] = value
        if set(kv) != set(cls._HEADER):
            raise ManifestFormatError(f"missing header keys: {sorted(set(cls._HEADER) - set(kv))}")
        rows = table.splitlines()
        if not rows or rows[0] != ",".join(COLUMNS):
            raise ManifestFormatError("bad CSV column line")
        if int(kv["format_version"]) != FORMAT_VERSION:
            raise ManifestFormatError(f"unsupported format version {kv['format_version']}")
        return cls(
            seed=int(kv["seed"]),
            resolution=int(kv["resolution"]),
            oracle_resolution=int(kv["oracle_resolution"]),
            n_shapes=int(kv["n_shapes"]),
            points=tuple(int(x) for x in kv["points"].split(",")),
            reynolds=float(kv["reynolds"]),
            prandtl=float(kv["prandtl"]),
            q_b=float(kv["q_b"]),
            dp_b=float(kv["dp_b"]),
            records=[SampleRecord.from_row(r) for r in rows[1:]],
            fractions=tuple(float(x) for x in kv["fractions"].split(",")),
            split_seed=int(kv["split_seed"]),
            q_min=float(kv["q_min"]),
            q_max=float(kv["q_max"]),
            dp_min=float(kv["dp_min"]),
            dp_max=float(kv["dp_max"]),
            labels=kv["labels"],
        )


MANIFEST_FILE = "manifest.txt"


def save_manifest(manifest: DatasetManifest, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    path = d / MANIFEST_FILE
    path.write_text(manifest.dumps(), encoding="utf-8")
    return path


def load_manifest(path: str | Path, verify: bool = False) -> DatasetManifest:
    """Load a manifest file (or the manifest inside a dataset directory)."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_FILE
    m = DatasetManifest.loads(p.read_text(encoding="utf-8"))
    m.root = p.parent
    if verify:
        missing = [r.id for r in m.records if not m.image_path(r).is_file()]
        if missing:
            raise IntegrityError(missing)
    return m


# generation --------------------------------------------------------------------


@dataclass(frozen=True)
class GenerateConfig:
    n_samples: int = 500
    n_shapes: int = 1
    points: tuple[int, ...] = (4, 5)
    resolution: int = 64
    oracle_resolution: int = 32
    case: FlowCase = FlowCase()
    seed: int = 0
    fractions: tuple[float, float, float] | None = None
    max_retries: int = 5
    settings: SolverSettings = SolverSettings()
    labels: str = "oracle"

    def __post_init__(self) -> None:
        if self.n_samples < 10:
            raise ValueError("n_samples must be >= 10")
        if self.n_shapes not in (1, 5):
            raise ValueError("n_shapes must be 1 or 5")
        if not self.points or any(p not in (4, 5) for p in self.points):
            raise ValueError("points must be drawn from {4, 5}")
        if self.labels not in LABEL_SOURCES:
            raise ValueError(f"labels must be one of {LABEL_SOURCES}")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")

    @property
    def split_fractions(self) -> tuple[float, float, float]:
        if self.fractions is not None:
            return self.fractions
        return SINGLE_FRACTIONS if self.n_shapes == 1 else MULTI_FRACTIONS


def sample_shapes(sample_seed: int, n_shapes: int, points: Sequence[int] = (4, 5)) -> list[FinShape]:
    """The fins of one sample; slot ``k`` gets its point count and fin from ``sample_seed``."""
    shapes = []
    for k, box in enumerate(slot_boxes(n_shapes)):
        n_pts = int(points[stream(sample_seed, "misc", k).integers(len(points))])
        shapes.append(sample_fin(sample_seed, n_pts, box, key=(k,)))
    return shapes


def render(shapes: Sequence[FinShape], resolution: int) -> RasterImage:
    return rasterize(shapes, resolution, resolution, CHANNEL)


@dataclass
class _Outcome:
    id: int
    seed: int = 0
    q: float = math.nan
    dp: float = math.nan
    pgm: bytes = b""
    shapes: str = ""
    errors: list[str] = field(default_factory=list)


def pixel_fraction(image: RasterImage) -> float:
    return float(np.count_nonzero(image.pixels)) / image.pixels.size


def _labels(source, shapes, image, case, resolution, settings) -> tuple[float, float]:
    """(q, dp) from the oracle, or the filled-pixel fraction for both in the sanity task."""
    if source == "pixel_fraction":
        frac = pixel_fraction(image)
        return frac, frac
    res = solve(case, shapes, resolution, settings)
    if not (math.isfinite(res.q) and math.isfinite(res.dp)):
        raise SolverError("non-finite observables")
    return res.q, res.dp


def _make_sample(args: tuple[int, GenerateConfig]) -> _Outcome:
    i, cfg = args
    out = _Outcome(i)
    for retry in range(cfg.max_retries + 1):
        seed = derive_seed(cfg.seed, "geometry", i, retry)
        try:
            shapes = sample_shapes(seed, cfg.n_shapes, cfg.points)
            image = render(shapes, cfg.resolution)
            q, dp = _labels(cfg.labels, shapes, image, cfg.case, cfg.oracle_resolution, cfg.settings)
        except (SolverError, FinPlacementError, GenerationExhausted) as exc:
            log.warning("sample %d retry %d failed: %s", i, retry, exc)
            out.errors.append(f"{type(exc).__name__}: {exc}")
            continue
        out.seed, out.q, out.dp = seed, q, dp
        out.pgm = write_pgm(image)
        out.shapes = "".join(dumps_shape(s) for s in shapes)
        return out
    return out


def _image_name(i: int) -> str:
    return f"images/{i:06d}.pgm"


def generate(cfg: GenerateConfig, out_dir: str | Path, workers: int | None = None) -> DatasetManifest:
    """Build, split and normalize a dataset under ``out_dir``; writes the manifest.

    Raises :class:`PartialManifestError` (after writing the successes and a
    ``failures.txt``) when some sample exhausts its retries.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "shapes").mkdir(exist_ok=True)
    if cfg.labels == "oracle":
        base = baseline(cfg.case, cfg.oracle_resolution, cfg.settings)
        q_b, dp_b = base.q, base.dp
    else:
        q_b = dp_b = 1.0
    jobs = [(i, cfg) for i in range(cfg.n_samples)]
    workers = workers or os.cpu_count() or 1
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            outcomes = list(pool.map(_make_sample, jobs, chunksize=4))
    else:
        outcomes = []
        for job in jobs:
            outcomes.append(_make_sample(job))
            if len(outcomes) % 25 == 0:
                log.info("generated %d/%d samples", len(outcomes), cfg.n_samples)
    records, failures = [], []
    for o in sorted(outcomes, key=lambda o: o.id):
        if not o.pgm:
            failures.append((o.id, " | ".join(o.errors)))
            continue
        (out / _image_name(o.id)).write_bytes(o.pgm)
        (out / f"shapes/{o.id:06d}.txt").write_text(o.shapes)
        records.append(
            SampleRecord(o.id, _image_name(o.id), cfg.n_shapes, o.seed, cfg.case.reynolds, cfg.case.prandtl, o.q, o.dp)
        )
    manifest = DatasetManifest(
        seed=cfg.seed,
        resolution=cfg.resolution,
        oracle_resolution=cfg.oracle_resolution,
        n_shapes=cfg.n_shapes,
        points=tuple(cfg.points),
        reynolds=cfg.case.reynolds,
        prandtl=cfg.case.prandtl,
        q_b=q_b,
        dp_b=dp_b,
        records=records,
        labels=cfg.labels,
        root=out,
    )
    manifest = normalize_labels(split(manifest, cfg.split_fractions, cfg.seed))
    save_manifest(manifest, out)
    if failures:
        (out / "failures.txt").write_text("".join(f"{i},{msg}\n" for i, msg in failures))
        raise PartialManifestError(failures, manifest)
    return manifest


def regenerate(
    manifest: DatasetManifest, rec: SampleRecord, settings: SolverSettings = SolverSettings()
) -> tuple[RasterImage, float, float]:
    """Rebuild one record's image and raw labels from its stored seed.

    ``settings`` must match the ones the dataset was generated with.
    """
    shapes = sample_shapes(rec.seed, rec.n_shapes, manifest.points)
    image = render(shapes, manifest.resolution)
    case = FlowCase(reynolds=rec.re, prandtl=rec.pr)
    q, dp = _labels(manifest.labels, shapes, image, case, manifest.oracle_resolution, settings)
    return image, q, dp


# splits and normalization -----------------------------------------------------------


def split_counts(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    """(train, val, test) sizes: val and test rounded half up, train takes the rest."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    n_val = math.floor(fractions[1] * n + 0.5)
    n_test = math.floor(fractions[2] * n + 0.5)
    n_train = n - n_val - n_test
    if n_train < 0:
        raise ValueError("split fractions leave no room for training samples")
    return n_train, n_val, n_test


def split(manifest: DatasetManifest, fractions: Sequence[float], seed: int) -> DatasetManifest:
    n_train, n_val, _ = split_counts(len(manifest.records), fractions)
    order = stream(seed, "split").permutation(len(manifest.records))
    labels = np.empty(len(order), dtype=object)
    labels[order[:n_train]] = "train"
    labels[order[n_train : n_train + n_val]] = "val"
    labels[order[n_train + n_val :]] = "test"
    records = [replace(r, split=str(s)) for r, s in zip(manifest.records, labels)]
    return replace(manifest, records=records, fractions=tuple(float(f) for f in fractions), split_seed=seed)


def normalize_labels(manifest: DatasetManifest) -> DatasetManifest:
    """Min-max scale q and dp with constants taken from the train split only."""
    train = manifest.subset("train")
    if not train:
        raise ValueError("normalization needs a non-empty train split")
    q = np.array([r.q for r in train])
    dp = np.array([r.dp for r in train])
    q_min, q_max, dp_min, dp_max = float(q.min()), float(q.max()), float(dp.min()), float(dp.max())
    if q_max == q_min or dp_max == dp_min:
        raise DegenerateRangeError("train labels have zero range")
    records = [
        replace(r, q_norm=(r.q - q_min) / (q_max - q_min), dp_norm=(r.dp - dp_min) / (dp_max - dp_min))
        for r in manifest.records
    ]
    return replace(manifest, records=records, q_min=q_min, q_max=q_max, dp_min=dp_min, dp_max=dp_max)


def load_images(manifest: DatasetManifest, records: Sequence[SampleRecord]) -> np.ndarray:
    """Stack of images as (N, 1, H, W) float64 in [0, 1]."""
    if not records:
        return np.zeros((0, 1, manifest.resolution, manifest.resolution))
    return np.stack([load_pgm(manifest.image_path(r)).normalized() for r in records])[:, None]


def labels(records: Sequence[SampleRecord], target: str) -> np.ndarray:
    key = "q_norm" if target == "heat_transfer" else "dp_norm"
    return np.array([getattr(r, key) for r in records], dtype=np.float64)


def split_arrays(manifest: DatasetManifest, target: str = "heat_transfer"):
    from .surrogate import ArraySplits

    parts = {s: manifest.subset(s) for s in SPLITS}
    return ArraySplits(
        load_images(manifest, parts["train"]),
        labels(parts["train"], target),
        load_images(manifest, parts["val"]),
        labels(parts["val"], target),
        load_images(manifest, parts["test"]),
        labels(parts["test"], target),
        manifest.label_range(target),
    )
