"""``finsurrogate`` command line tool.

Every subcommand writes into ``--out`` a ``config.txt`` holding the fully
resolved configuration (including the tool version), then its own artifacts.
Failures print one line ``finsurrogate: error: <Kind>: <message>`` to stderr
and exit nonzero; argument errors exit 2 with usage text.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import FIELD_NAMES, ConfigError, RunConfig, load_config

log = logging.getLogger("finsurrogate")

ALIASES = {"n": "n_samples", "shapes": "n_shapes"}


def _fail(kind: str, message: str, code: int = 1) -> int:
    text = " ".join(str(message).split())
    print(f"finsurrogate: error: {kind}: {text}", file=sys.stderr)
    return code


def _prepare(cfg: RunConfig, out: Path, command: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(f"# command: {command}\n" + cfg.dumps())
    return out


def _require(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} path not set")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _workers(cfg: RunConfig) -> int | None:
    return cfg.workers or None


def cmd_gen(cfg: RunConfig, out: Path) -> int:
    from .dataset import PartialManifestError, generate

    try:
        m = generate(cfg.generate_config(), out, workers=_workers(cfg))
    except PartialManifestError as exc:
        return _fail("PartialManifestError", f"{exc}; see {out / 'failures.txt'}")
    print(f"wrote {len(m)} records to {out / 'manifest.txt'}")
    return 0


def cmd_grid_study(cfg: RunConfig, out: Path) -> int:
    from .dataset import sample_shapes
    from .oracle import grid_convergence
    from .rng import derive_seed

    sets = [sample_shapes(derive_seed(cfg.seed, "misc", k), cfg.n_shapes, cfg.points) for k in range(cfg.grid_sets)]
    table = grid_convergence(cfg.case, sets, cfg.grid_resolutions, cfg.solver_settings, cfg.grid_tolerance)
    (out / "grid_study.csv").write_text(table.to_csv())
    lines = ["set,last_change,converged"]
    for k in range(len(sets)):
        lines.append(f"{k},{table.last_change(k)!r},{table.converged(k)}")
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def _spec_for(cfg: RunConfig, resolution: int):
    from .surrogate import build_mini_xception, build_optimized_cnn

    if cfg.model == "cnn":
        return build_optimized_cnn(resolution)
    return build_mini_xception(resolution, cfg.width, stem_stride=cfg.stem_stride)


def cmd_train(cfg: RunConfig, out: Path) -> int:
    from .dataset import load_manifest
    from .surrogate import save_bundle, train

    manifest = load_manifest(_require(cfg.dataset, "dataset"), verify=True)
    model = train(_spec_for(cfg, manifest.resolution), manifest, cfg.train_config())
    save_bundle(model, out)
    h = model.history
    print(f"trained {len(h)} epochs; best epoch {h.best_epoch} val_mse {h.best_val_mse:.6g}")
    return 0


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    from .dataset import labels, load_images, load_manifest
    from .evaluation import evaluate, render_report
    from .surrogate import load_bundle

    model = load_bundle(_require(cfg.bundle, "bundle"))
    manifest = load_manifest(_require(cfg.dataset, "dataset"), verify=True)
    records = manifest.subset(cfg.split)
    y = labels(records, model.config.target)
    y_hat = model.predict(load_images(manifest, records))
    report = evaluate(
        y, y_hat, cfg.ci_level, model=model.spec.name, target=model.config.target, n_shapes=manifest.n_shapes
    )
    render_report(report, out / "report")
    print(f"r2={report.r2:.6f} mae={report.mae:.6f} mse={report.mse:.6g} n={report.n}")
    return 0


def cmd_predict(cfg: RunConfig, out: Path) -> int:
    from .raster import load_pgm
    from .surrogate import load_bundle

    model = load_bundle(_require(cfg.bundle, "bundle"))
    paths = [_require(p.strip(), "image") for p in cfg.image.split(",") if p.strip()]
    if not paths:
        raise ConfigError("image path not set")
    images = np.stack([load_pgm(p).normalized() for p in paths])[:, None]
    values, seconds = model.timed_predict(images)
    rows = ["image,normalized,physical,seconds"]
    for p, v, s in zip(paths, values.tolist(), seconds.tolist()):
        rows.append(f"{p},{v!r},{float(model.denormalize(v))!r},{s!r}")
    (out / "predictions.csv").write_text("\n".join(rows) + "\n")
    print("\n".join(rows))
    return 0


def cmd_search(cfg: RunConfig, out: Path) -> int:
    from .dataset import load_manifest
    from .surrogate import SearchSpace, random_search

    manifest = load_manifest(_require(cfg.dataset, "dataset"), verify=True)
    result = random_search(
        SearchSpace(), cfg.search_budget, manifest, cfg.seed, cfg.train_config(cfg.search_epochs), cfg.workers or 1
    )
    (out / "leaderboard.csv").write_text(result.to_csv())
    (out / "best_spec.txt").write_text(result.best.candidate.spec(manifest.resolution).dumps())
    (out / "skipped.txt").write_text("".join(f"{c.index},{why}\n" for c, why in result.skipped))
    print(result.to_csv(), end="")
    return 0


def cmd_bench(cfg: RunConfig, out: Path) -> int:
    from .dataset import render, sample_shapes
    from .evaluation import timing_benchmark, timing_table
    from .oracle import solve
    from .rng import derive_seed
    from .surrogate import load_bundle

    model = load_bundle(_require(cfg.bundle, "bundle"))
    res = model.spec.input_shape[-1]
    cases = []
    for k in range(cfg.bench_shapes):
        shapes = sample_shapes(derive_seed(cfg.seed, "misc", 1000 + k), cfg.n_shapes, cfg.points)
        cases.append((render(shapes, res).normalized(), shapes))
    rows = timing_benchmark(
        lambda img: model.predict(img),
        lambda shapes: solve(cfg.case, shapes, cfg.bench_resolution, cfg.solver_settings),
        cases,
        cfg.bench_trials,
        label=model.spec.name,
    )
    text = timing_table(rows)
    (out / "timing.csv").write_text(text)
    print(text, end="")
    return 0


COMMANDS = {
    "gen": (cmd_gen, "generate a labeled dataset"),
    "grid-study": (cmd_grid_study, "oracle grid-convergence study on random shape sets"),
    "train": (cmd_train, "train a surrogate on a dataset"),
    "eval": (cmd_eval, "evaluate a trained model on a dataset split"),
    "predict": (cmd_predict, "predict labels for PGM images"),
    "search": (cmd_search, "random hyperparameter search"),
    "bench": (cmd_bench, "surrogate vs oracle timing table"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="finsurrogate", description="Fin geometry surrogate workbench.")
    parser.add_argument("--version", action="version", version=f"finsurrogate {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", metavar="PATH", help="key = value config file")
        p.add_argument("--out", metavar="DIR", help=f"output directory (default runs/{name})")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        p.add_argument("-v", "--verbose", action="store_true")
        group = p.add_argument_group("config fields")
        for field in FIELD_NAMES:
            flags = [f"--{field.replace('_', '-')}"]
            flags += [f"--{a}" for a, target in ALIASES.items() if target == field]
            group.add_argument(*flags, dest=f"cfg_{field}", metavar="VALUE", default=None)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = []
        for item in args.set:
            key, eq, value = item.partition("=")
            if not eq:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            overrides.append((key.strip(), value))
        overrides += [(f, getattr(args, f"cfg_{f}")) for f in FIELD_NAMES if getattr(args, f"cfg_{f}") is not None]
        cfg = load_config(args.config, overrides)
        out = _prepare(cfg, Path(args.out or f"runs/{args.command}"), args.command)
        return COMMANDS[args.command][0](cfg, out)
    except ConfigError as exc:
        return _fail("ConfigError", exc, 2)
    except Exception as exc:  # the one-line error contract covers every failure
        log.debug("unhandled error", exc_info=True)
        return _fail(type(exc).__name__, exc)


if __name__ == "__main__":
    sys.exit(main())
