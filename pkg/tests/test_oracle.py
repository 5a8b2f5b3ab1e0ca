import math

import numpy as np
import pytest

from finsurrogate.geometry import Rect, bezier_circle, polygon_fin, sample_fin, slot_boxes
from finsurrogate.oracle import (
    CSV_HEADER,
    ConvergenceRow,
    ConvergenceTable,
    FinPlacementError,
    FlowCase,
    Grid,
    SolverSettings,
    UnresolvedFinError,
    baseline,
    baseline_shape,
    csv_row,
    dump_fields,
    grid_convergence,
    load_fields,
    solve,
    solve_normalized,
)

CASE = FlowCase(reynolds=10.0, prandtl=0.7)
N = 32


@pytest.fixture(scope="module")
def empty():
    return solve(CASE, [], N, return_fields=True)


@pytest.fixture(scope="module")
def circle():
    return solve(CASE, [baseline_shape()], N, return_fields=True)


def slot_fin(seed, n=5):
    box = slot_boxes(1)[0]
    return sample_fin(seed, n, box)


def developed_gradient(fields, grid):
    x = (np.arange(grid.nx) + 0.5) * grid.dx
    sel = (x > 1.5) & (x < 2.5)
    return -np.polyfit(x[sel], fields.p.mean(axis=0)[sel], 1)[0]


def test_case_validation():
    with pytest.raises(ValueError):
        FlowCase(reynolds=0.0)
    with pytest.raises(ValueError):
        FlowCase(prandtl=-1.0)


def test_resolution_floor():
    with pytest.raises(ValueError):
        solve(CASE, [], 16)


def test_grid_dimensions():
    g = Grid.build([baseline_shape()], 32)
    assert (g.ny, g.nx) == (32, 96)
    assert g.nx * g.dx == pytest.approx(3.0) and g.ny * g.dy == pytest.approx(1.0)
    assert g.solid_mask.shape == (32, 96) and g.solid_mask.any()


def test_empty_channel(empty):
    res, fields, grid = empty
    assert res.q == 0.0
    assert res.dp > 0
    assert res.diagnostics["max_divergence"] <= 1e-6
    # fully developed Poiseuille flow at mean speed 1 has dp/dx = 12 / Re
    assert developed_gradient(fields, grid) == pytest.approx(12 / CASE.reynolds, rel=0.05)
    # developed profile is parabolic with peak 1.5
    assert fields.u[:, 3 * grid.nx // 4].max() == pytest.approx(1.5, rel=0.02)


def test_circle_obstructs_and_heats(empty, circle):
    res = circle[0]
    assert res.q > 0
    assert res.dp > empty[0].dp
    assert res.diagnostics["max_divergence"] <= 1e-6


def test_energy_balance(circle):
    res = circle[0]
    assert abs(res.diagnostics["enthalpy_out"] - res.q) <= 0.05 * res.q


def test_symmetric_fin_gives_symmetric_temperature(circle):
    _, fields, _ = circle
    assert np.abs(fields.T - fields.T[::-1]).max() <= 1e-3


def test_temperatures_bounded(circle):
    _, fields, _ = circle
    assert fields.T.min() >= -1e-12 and fields.T.max() <= 1 + 1e-12


def test_deterministic(circle):
    again = solve(CASE, [baseline_shape()], N)
    assert again == circle[0]
    assert again.q.hex() == circle[0].q.hex() and again.dp.hex() == circle[0].dp.hex()


def test_baseline_self_normalizes_and_caches():
    b = baseline(CASE, N)
    assert b.q_over_qb == 1.0 and b.dp_over_dpb == 1.0
    assert baseline(CASE, N) is b


def test_large_fin_beats_tiny_fin():
    c = (1.5, 0.5)
    big = solve_normalized(CASE, [bezier_circle(c, 0.12)], N)
    tiny = solve_normalized(CASE, [bezier_circle(c, 0.04)], N)
    assert big.q_over_qb > tiny.q_over_qb > 0


def test_mirror_image_fin_gives_same_observables():
    shape = slot_fin(21)
    a = solve(CASE, [shape], N)
    b = solve(CASE, [shape.mirrored()], N)
    assert b.q == pytest.approx(a.q, rel=1e-10)
    assert b.dp == pytest.approx(a.dp, rel=1e-10)


def test_dilation_monotone():
    shape = slot_fin(21)
    qs = [solve(CASE, [shape.scaled(f)], N).q for f in (0.6, 0.8, 1.0)]
    assert qs[0] <= qs[1] <= qs[2]


def test_fin_touching_outlet_rejected():
    wall = polygon_fin([(2.95, 0.4), (3.0, 0.4), (3.0, 0.6), (2.95, 0.6)], Rect(2.9, 0.3, 0.1, 0.4))
    with pytest.raises(FinPlacementError):
        solve(CASE, [wall], N)


def test_sliver_below_grid_spacing_rejected():
    sliver = polygon_fin([(1.2, 0.49), (1.8, 0.49), (1.8, 0.505), (1.2, 0.505)], slot_boxes(1)[0])
    with pytest.raises(UnresolvedFinError):
        solve(CASE, [sliver], N)


def test_averaging_window_validated():
    with pytest.raises(ValueError):
        solve(CASE, [], N, SolverSettings(t_end=10, avg_start=10))


def test_short_horizon_without_steady_exit():
    s = SolverSettings(t_end=1.0, avg_start=0.5, steady_tol=0.0)
    res = solve(CASE, [baseline_shape()], N, s)
    assert res.avg_window == (0.5, 1.0)
    assert res.diagnostics["steady_at"] is None
    assert res.diagnostics["max_divergence"] <= 1e-6
    assert math.isfinite(res.q) and res.q > 0


def test_field_dump_round_trip(circle):
    _, fields, grid = circle
    data = dump_fields(fields, grid)
    assert data.startswith(b"finsurrogate-fields nx=96 ny=32")
    back = load_fields(data)
    for name in ("u", "v", "p", "T"):
        assert np.array_equal(getattr(back, name), getattr(fields, name))
    with pytest.raises(ValueError):
        load_fields(data[:-8])


def test_csv_row(circle):
    row = csv_row("000001", CASE, N, circle[0].normalized(circle[0]))
    assert len(row.split(",")) == len(CSV_HEADER.split(","))
    assert row.endswith(",1.0,1.0")


def test_grid_convergence_single_resolution_and_empty_set():
    table = grid_convergence(CASE, [[]], [32])
    assert len(table.rows) == 1 and table.rows[0].q == 0.0
    assert table.converged(0) is None
    assert "set,resolution,q,error" in table.to_csv()


def test_convergence_table_logic():
    rows = [ConvergenceRow(0, 32, 1.0), ConvergenceRow(0, 64, 1.005), ConvergenceRow(1, 32, 1.0), ConvergenceRow(1, 64, 1.2)]
    t = ConvergenceTable(rows)
    assert t.converged(0) is True and t.converged(1) is False
    assert t.change_over_doubling(0) == pytest.approx(0.005 / 1.005)
    failed = ConvergenceTable([ConvergenceRow(0, 32, 1.0), ConvergenceRow(0, 64, float("nan"), "SolverError")])
    assert failed.converged(0) is None
