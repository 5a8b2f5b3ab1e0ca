"""Regression metrics, residual analysis, confidence bands, timing and report files."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

DEFAULT_EDGES = np.linspace(-0.3, 0.3, 31)

# Published full-scale figures, written into reports for comparison only.
REFERENCE_METRICS = (
    # model, target, shapes, r2, mae
    ("cnn", "heat_transfer", 1, 0.997, 0.022),
    ("xception", "heat_transfer", 1, 0.998, 0.019),
    ("cnn", "pressure_drop", 1, 0.999, 0.0378),
    ("xception", "pressure_drop", 1, 0.999, 0.023),
    ("xception", "heat_transfer", 5, 0.968, 0.032),
    ("xception", "pressure_drop", 5, 0.98, 0.033),
)
REFERENCE_TIMINGS = (("cnn", 0.42), ("xception", 2.03), ("high_fidelity_cfd", 45 * 60.0))


class DegenerateDataError(ValueError):
    pass


def _pair(y, y_hat, min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.size} vs {y_hat.size}")
    if y.size < min_len:
        raise ValueError(f"need at least {min_len} values, got {y.size}")
    return y, y_hat


def r2(y, y_hat) -> float:
    """1 - SS_res / SS_tot with the mean of ``y`` as baseline."""
    y, y_hat = _pair(y, y_hat, 2)
    dev = y - y.mean()
    ss_tot = float(dev @ dev)
    if ss_tot == 0.0:
        raise DegenerateDataError("r2 undefined for constant ground truth")
    res = y - y_hat
    return 1.0 - float(res @ res) / ss_tot


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def mse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    d = y - y_hat
    return float(d @ d) / d.size


@dataclass
class ResidualReport:
    y: np.ndarray
    y_hat: np.ndarray
    residuals: np.ndarray  # y_hat - y
    edges: np.ndarray
    counts: np.ndarray


def residual_report(y, y_hat, bins: int | Sequence[float] | None = None) -> ResidualReport:
    """Residuals as prediction minus truth and their histogram.

    ``bins`` is either explicit edges or a count of equal bins over a range
    symmetric about zero. Values beyond the outer edges land in the end bins,
    so counts always sum to N.
    """
    y, y_hat = _pair(y, y_hat)
    res = y_hat - y
    if bins is None:
        edges = DEFAULT_EDGES
    elif np.ndim(bins) == 0:
        half = float(np.max(np.abs(res)))
        edges = np.linspace(-half, half, int(bins) + 1) if half > 0 else np.array([0.0, 0.0])
    else:
        edges = np.asarray(bins, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) < 0):
        raise ValueError("bin edges must be a non-decreasing sequence of length >= 2")
    if edges[0] == edges[-1]:
        counts = np.array([res.size])
    else:
        idx = np.searchsorted(edges, np.clip(res, edges[0], edges[-1]), side="right") - 1
        counts = np.bincount(np.clip(idx, 0, len(edges) - 2), minlength=len(edges) - 1)
    return ResidualReport(y, y_hat, res, edges, counts)


# Student t quantiles via the regularized incomplete beta function ------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for I_x(a, b) (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_cdf(t: float, dof: float) -> float:
    t2 = t * t
    if t2 < dof:
        # central form avoids cancellation near t = 0
        half = 0.5 * betainc(0.5, dof / 2.0, t2 / (dof + t2))
        return 0.5 + half if t >= 0 else 0.5 - half
    tail = 0.5 * betainc(dof / 2.0, 0.5, dof / (dof + t2))
    return 1.0 - tail if t >= 0 else tail


def t_quantile(p: float, dof: float) -> float:
    """Inverse of :func:`t_cdf` by bracketing bisection to full precision."""
    if not 0.0 < p < 1.0 or dof <= 0:
        raise ValueError("need 0 < p < 1 and dof > 0")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -t_quantile(1.0 - p, dof)
    lo, hi = 0.0, 1.0
    while t_cdf(hi, dof) < p:
        lo, hi = hi, hi * 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if t_cdf(mid, dof) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class ConfidenceBand:
    level: float
    slope: float
    intercept: float
    slope_halfwidth: float
    intercept_halfwidth: float
    x: np.ndarray  # ground truth values, ascending
    fit: np.ndarray
    halfwidth: np.ndarray


def confidence_band(y, y_hat, level: float = 0.99) -> ConfidenceBand:
    """OLS fit of predictions on truth with a pointwise band for the mean response."""
    y, y_hat = _pair(y, y_hat)
    n = y.size
    if n < 3:
        raise ValueError("confidence band needs at least 3 points")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    x_bar, z_bar = y.mean(), y_hat.mean()
    sxx = float((y - x_bar) @ (y - x_bar))
    if sxx == 0.0:
        raise DegenerateDataError("ground truth is constant")
    slope = float((y - x_bar) @ (y_hat - z_bar)) / sxx
    intercept = float(z_bar - slope * x_bar)
    resid = y_hat - (intercept + slope * y)
    s = math.sqrt(float(resid @ resid) / (n - 2))
    tq = t_quantile(0.5 + level / 2.0, n - 2)
    xs = np.sort(y)
    half = tq * s * np.sqrt(1.0 / n + (xs - x_bar) ** 2 / sxx)
    return ConfidenceBand(
        level,
        slope,
        intercept,
        tq * s / math.sqrt(sxx),
        tq * s * math.sqrt(1.0 / n + x_bar**2 / sxx),
        xs,
        intercept + slope * xs,
        half,
    )


@dataclass
class TimingRow:
    method: str
    mean: float
    std: float
    n_trials: int
    source: str = "measured"

    @property
    def single_trial(self) -> bool:
        return self.n_trials == 1


def _summarize(method: str, samples: Sequence[float]) -> TimingRow:
    s = np.asarray(samples, dtype=np.float64)
    std = float(s.std(ddof=1)) if s.size > 1 else 0.0
    return TimingRow(method, float(s.mean()), std, int(s.size))


def time_calls(fn: Callable[[], object], n_trials: int) -> list[float]:
    out = []
    for _ in range(n_trials):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def timing_benchmark(
    predict_fn: Callable[[np.ndarray], object],
    solve_fn: Callable[[object], object],
    cases: Sequence[tuple[np.ndarray, object]],
    n_trials: int = 1,
    label: str = "surrogate",
) -> list[TimingRow]:
    """Mean and spread of wall-clock time per call for both methods on the same inputs.

    ``cases`` pairs each image with the shapes it was rendered from; every
    case is timed ``n_trials`` times per method.
    """
    if n_trials < 1 or not cases:
        raise ValueError("need n_trials >= 1 and at least one case")
    pred, sim = [], []
    for image, shapes in cases:
        pred += time_calls(lambda: predict_fn(image), n_trials)
        sim += time_calls(lambda: solve_fn(shapes), n_trials)
    return [_summarize(label, pred), _summarize("oracle", sim)]


@dataclass
class EvalReport:
    r2: float
    mae: float
    mse: float
    residuals: ResidualReport
    band: ConfidenceBand
    timing: list[TimingRow] = field(default_factory=list)
    model: str = "model"
    target: str = "heat_transfer"
    n_shapes: int = 1

    @property
    def ci_level(self) -> float:
        return self.band.level

    @property
    def n(self) -> int:
        return int(self.residuals.y.size)


def evaluate(
    y,
    y_hat,
    level: float = 0.99,
    bins: int | Sequence[float] | None = None,
    model: str = "model",
    target: str = "heat_transfer",
    n_shapes: int = 1,
) -> EvalReport:
    return EvalReport(
        r2(y, y_hat),
        mae(y, y_hat),
        mse(y, y_hat),
        residual_report(y, y_hat, bins),
        confidence_band(y, y_hat, level),
        model=model,
        target=target,
        n_shapes=n_shapes,
    )


def _csv(header: str, rows) -> str:
    return header + "\n" + "".join(",".join(str(v) for v in r) + "\n" for r in rows)


def timing_table(rows: Sequence[TimingRow]) -> str:
    """Measured rows followed by the published reference timings."""
    body = [(t.source, t.method, repr(t.mean), repr(t.std), t.n_trials, int(t.single_trial)) for t in rows]
    body += [("reference", m, repr(s), "", "", "") for m, s in REFERENCE_TIMINGS]
    return _csv("source,method,mean_s,std_s,n_trials,single_trial", body)


def report_tables(rep: EvalReport) -> dict[str, str]:
    """CSV file contents keyed by file name; floats use repr so values round-trip."""
    b = rep.band
    metrics = [
        ("measured", rep.model, rep.target, rep.n_shapes, rep.n, repr(rep.r2), repr(rep.mae), repr(rep.mse),
         repr(b.level), repr(b.slope), repr(b.intercept), repr(b.slope_halfwidth), repr(b.intercept_halfwidth)),
    ]  # fmt: skip
    metrics += [("reference", m, t, s, "", repr(r), repr(a), "", "", "", "", "", "") for m, t, s, r, a in REFERENCE_METRICS]
    rr = rep.residuals
    residuals = [(i, repr(a), repr(p), repr(d)) for i, (a, p, d) in enumerate(zip(rr.y, rr.y_hat, rr.residuals))]
    band = [(repr(x), repr(f), repr(f - h), repr(f + h)) for x, f, h in zip(b.x, b.fit, b.halfwidth)]
    hist = [(repr(lo), repr(hi), int(c)) for lo, hi, c in zip(rr.edges[:-1], rr.edges[1:], rr.counts)]
    return {
        "metrics.csv": _csv(
            "source,model,target,n_shapes,n,r2,mae,mse,ci_level,slope,intercept,slope_halfwidth,intercept_halfwidth",
            metrics,
        ),
        "residuals.csv": _csv("index,y,y_hat,residual", residuals),
        "histogram.csv": _csv("lower,upper,count", hist),
        "band.csv": _csv("y,fit,lower,upper", band),
        "timing.csv": timing_table(rep.timing),
    }


def render_report(rep: EvalReport, out_dir: str | Path) -> list[Path]:
    """Write CSV tables and SVG plots; identical reports give identical bytes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in report_tables(rep).items():
        (out / name).write_text(text)
        written.append(out / name)
    written += _plots(rep, out)
    return written


def _plots(rep: EvalReport, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rc = {"svg.hashsalt": "finsurrogate", "svg.fonttype": "none", "path.simplify": False}
    meta = {"Date": None, "Creator": None}
    rr, b = rep.residuals, rep.band
    paths = [out / "predicted_vs_truth.svg", out / "residual_plot.svg"]
    with plt.rc_context(rc):
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.scatter(rr.y, rr.y_hat, s=8, alpha=0.7, label="test samples")
        ax.plot(b.x, b.fit, color="k", lw=1, label=f"fit (slope {b.slope:.3f})")
        ax.fill_between(b.x, b.fit - b.halfwidth, b.fit + b.halfwidth, color="tab:orange", alpha=0.3,
                        label=f"{100 * b.level:g}% band")  # fmt: skip
        lo, hi = float(min(rr.y.min(), rr.y_hat.min())), float(max(rr.y.max(), rr.y_hat.max()))
        ax.plot([lo, hi], [lo, hi], ls="--", color="gray", lw=0.8)
        ax.set_xlabel("ground truth (normalized)")
        ax.set_ylabel("prediction (normalized)")
        ax.set_title(f"{rep.model} {rep.target}: R2={rep.r2:.4f}, MAE={rep.mae:.4f}")
        ax.legend(loc="upper left", fontsize=8)
        fig.savefig(paths[0], format="svg", metadata=meta)
        plt.close(fig)

        fig = plt.figure(figsize=(7, 5))
        grid = fig.add_gridspec(2, 2, width_ratios=(4, 1), height_ratios=(1, 4), wspace=0.05, hspace=0.05)
        main = fig.add_subplot(grid[1, 0])
        top = fig.add_subplot(grid[0, 0], sharex=main)
        side = fig.add_subplot(grid[1, 1], sharey=main)
        main.scatter(rr.y, rr.residuals, s=8, alpha=0.7)
        main.axhline(0.0, color="k", lw=0.8)
        main.set_xlabel("ground truth (normalized)")
        main.set_ylabel("residual (prediction - truth)")
        top.hist(rr.y, bins=20, color="gray")
        if rr.edges[0] < rr.edges[-1]:
            side.hist(np.clip(rr.residuals, rr.edges[0], rr.edges[-1]), bins=rr.edges, orientation="horizontal",
                      color="gray")  # fmt: skip
        top.tick_params(labelbottom=False)
        side.tick_params(labelleft=False)
        fig.savefig(paths[1], format="svg", metadata=meta)
        plt.close(fig)
    return paths
