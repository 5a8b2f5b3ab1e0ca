"""Desk-scale conjugate heat transfer oracle.

Two-dimensional incompressible channel flow past isothermal fins on a
uniform staggered (MAC) grid. Fins are immersed by direct forcing: cells
whose centre lies inside a fin are solid, every face touching a solid cell
carries zero velocity, and solid cells are held at the wall temperature.

Time stepping is an incremental pressure-correction scheme:

* momentum predictor with explicit central convection and backward-Euler
  diffusion (stable for dt <= 2 nu / |u|^2, independent of the spacing),
* pressure Poisson solve restricted to fluid cells (solid faces are walls),
  so the corrected velocity is discretely divergence free,
* temperature transport with hybrid convection (central, upwind where
  the face cell-Peclet number reaches 2) and implicit diffusion.

Every sparse operator depends only on the mask and the time step, so it is
factorized once per solve. Heat transfer ``q`` is the conductive flux from
solid faces into adjacent fluid cells; ``dp`` is the mean pressure over the
first cell column minus the mean over the last one.

Units are nondimensional: channel height 1, inlet speed 1, so viscosity is
1/Re and thermal diffusivity 1/(Re Pr).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from .geometry import CHANNEL, CHANNEL_HEIGHT, CHANNEL_LENGTH, FinShape, bezier_circle, slot_boxes
from .geometry import polygonize
from .raster import SAMPLES_PER_SEGMENT, solid_mask

log = logging.getLogger(__name__)

DIVERGENCE_TOL = 1e-6


class SolverError(RuntimeError):
    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class FinPlacementError(ValueError):
    """Fin touches the inlet or outlet column."""


class UnresolvedFinError(FinPlacementError):
    """Fin too thin to cover any cell centre at the requested resolution."""


@dataclass(frozen=True)
class FlowCase:
    reynolds: float = 10.0
    prandtl: float = 0.7
    inlet_velocity: float = 1.0
    wall_temperature: float = 1.0
    inlet_temperature: float = 0.0

    def __post_init__(self) -> None:
        if not (self.reynolds > 0 and self.prandtl > 0):
            raise ValueError("reynolds and prandtl must be positive")

    @property
    def viscosity(self) -> float:
        return 1.0 / self.reynolds

    @property
    def diffusivity(self) -> float:
        return 1.0 / (self.reynolds * self.prandtl)


@dataclass(frozen=True)
class SolverSettings:
    t_end: float = 30.0
    avg_start: float = 20.0
    dt_max: float = 0.05
    safety: float = 0.5
    # march stops early once the per-unit-time change of every field drops below this
    steady_tol: float = 1e-8
    max_steps: int = 200_000


@dataclass(frozen=True, eq=False)
class Grid:
    nx: int
    ny: int
    dx: float
    dy: float
    solid_mask: np.ndarray  # (ny, nx), row 0 at the bottom wall
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))  # fin boundary (x0, y0, x1, y1)

    @classmethod
    def build(cls, shapes: Sequence[FinShape], resolution: int) -> Grid:
        ny, nx = resolution, int(round(resolution * CHANNEL_LENGTH / CHANNEL_HEIGHT))
        if shapes:
            solid = solid_mask(shapes, nx, ny, CHANNEL)[::-1].copy()
            polys = [polygonize(s, SAMPLES_PER_SEGMENT).vertices for s in shapes]
            edges = np.concatenate([np.hstack([v, np.roll(v, -1, axis=0)]) for v in polys])
        else:
            solid = np.zeros((ny, nx), dtype=bool)
            edges = np.zeros((0, 4))
        # fluid pockets sealed off from the inlet cannot carry a pressure; fill them
        labels, _ = ndimage.label(~solid)
        inlet_labels = set(np.unique(labels[:, 0])) - {0}
        solid |= ~np.isin(labels, list(inlet_labels))
        return cls(nx, ny, CHANNEL_LENGTH / nx, CHANNEL_HEIGHT / ny, solid, edges)

    def boundary_distance(self, x: np.ndarray, y: np.ndarray, axis: int, sign: int, h: float) -> np.ndarray:
        """Distance (in units of ``h``) from each point to the nearest fin boundary
        crossing along the ray in direction ``sign`` on ``axis`` (0 = x, 1 = y).

        ``inf`` where the ray meets no boundary.
        """
        x, y = np.asarray(x, float), np.asarray(y, float)
        if len(self.edges) == 0 or x.size == 0:
            return np.full(x.shape, np.inf)
        ex0, ey0, ex1, ey1 = (self.edges[:, k][None, :] for k in range(4))
        if axis == 0:
            a0, a1, b0, b1, pa, pb = ey0, ey1, ex0, ex1, y[:, None], x[:, None]
        else:
            a0, a1, b0, b1, pa, pb = ex0, ex1, ey0, ey1, x[:, None], y[:, None]
        spans = (np.minimum(a0, a1) <= pa) & (pa < np.maximum(a0, a1))
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (pa - a0) / (a1 - a0)
            hit = b0 + t * (b1 - b0)
        s = sign * (hit - pb)
        s = np.where(spans & (s > 0), s, np.inf)
        return s.min(axis=1) / h


@dataclass(frozen=True)
class SimResult:
    q: float
    dp: float
    q_over_qb: float = float("nan")
    dp_over_dpb: float = float("nan")
    avg_window: tuple[float, float] = (20.0, 30.0)
    diagnostics: dict = field(default_factory=dict, compare=False, repr=False)

    def normalized(self, base: SimResult) -> SimResult:
        return SimResult(self.q, self.dp, self.q / base.q, self.dp / base.dp, self.avg_window, self.diagnostics)


@dataclass
class FlowFields:
    u: np.ndarray  # (ny, nx+1)
    v: np.ndarray  # (ny+1, nx)
    p: np.ndarray  # (ny, nx)
    T: np.ndarray  # (ny, nx)


def _assemble(n, diag, rows, cols, vals):
    me = np.arange(n)
    return sp.csc_matrix(
        (np.concatenate([diag, *vals]), (np.concatenate([me, *rows]), np.concatenate([me, *cols]))),
        shape=(n, n),
    )


class _Operators:
    """Index maps and factorized operators for one grid, case and time step.

    Where a stencil arm meets a fin, the Dirichlet value is imposed at the
    actual boundary crossing ``theta * h`` away (linear ghost value), clipped
    to ``[THETA_MIN, THETA_MAX]``. With theta = 1/2 this reduces to the
    plain staircase mirror condition.
    """

    THETA_MIN = 0.1
    THETA_MAX = 1.5

    def __init__(self, grid: Grid, case: FlowCase, dt: float):
        self.grid, self.case, self.dt = grid, case, dt
        ny, nx = grid.ny, grid.nx
        solid = grid.solid_mask
        fluid = ~solid
        if solid[:, 0].any() or solid[:, -1].any():
            raise FinPlacementError("fin touches the inlet or outlet column")
        self.fluid = fluid

        # u faces (ny, nx+1): open when both neighbouring cells are fluid
        u_open = np.zeros((ny, nx + 1), dtype=bool)
        u_open[:, 1:nx] = fluid[:, :-1] & fluid[:, 1:]
        self.u_unknown = u_open
        v_open = np.zeros((ny + 1, nx), dtype=bool)
        v_open[1:ny, :] = fluid[:-1, :] & fluid[1:, :]
        self.v_unknown = v_open
        self.u_id = self._ids(u_open)
        self.v_id = self._ids(v_open)
        self.c_id = self._ids(fluid)

        self.lu_u, self.rhs_u = self._momentum_operator("u")
        self.lu_v, self.rhs_v = self._momentum_operator("v")
        self.lap_p, self.lu_p = self._pressure_operator()
        self.lu_T, self.rhs_T, self.flux_T = self._temperature_operator()

    @staticmethod
    def _ids(mask: np.ndarray) -> np.ndarray:
        ids = np.full(mask.shape, -1, dtype=np.int64)
        ids[mask] = np.arange(int(mask.sum()))
        return ids

    def _theta(self, x, y, axis, sign, default):
        th = self.grid.boundary_distance(x, y, axis, sign, self.grid.dx if axis == 0 else self.grid.dy)
        th = np.where(np.isfinite(th) & (th <= self.THETA_MAX), th, default)
        return np.clip(th, self.THETA_MIN, self.THETA_MAX)

    def _momentum_operator(self, comp: str):
        g, dt, nu = self.grid, self.dt, self.case.viscosity
        ids = self.u_id if comp == "u" else self.v_id
        n = int((ids >= 0).sum())
        jj, ii = np.nonzero(ids >= 0)
        if comp == "u":
            px, py = ii * g.dx, (jj + 0.5) * g.dy
        else:
            px, py = (ii + 0.5) * g.dx, jj * g.dy
        diag = np.full(n, 1.0 / dt)
        rhs = np.zeros(n)
        rows, cols, vals = [], [], []
        shape = ids.shape
        for dj, di in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            axis, sign = (0, di) if di else (1, dj)
            a = nu / (g.dx if axis == 0 else g.dy) ** 2
            nj, ni = jj + dj, ii + di
            inside = (nj >= 0) & (nj < shape[0]) & (ni >= 0) & (ni < shape[1])
            nid = np.full(n, -1, dtype=np.int64)
            nid[inside] = ids[nj[inside], ni[inside]]
            open_nb = nid >= 0
            diag += a * open_nb
            rows.append(ids[jj, ii][open_nb])
            cols.append(nid[open_nb])
            vals.append(np.full(int(open_nb.sum()), -a))
            closed = ~open_nb
            if comp == "u":
                outlet = closed & (ni == shape[1] - 1) if axis == 0 else np.zeros(n, bool)
                inlet = closed & (ni == 0) if axis == 0 else np.zeros(n, bool)
                wall = closed & ((nj < 0) | (nj >= shape[0]))
            else:
                outlet = closed & (ni >= shape[1])
                inlet = closed & (ni < 0)
                wall = closed & ((nj <= 0) | (nj >= shape[0] - 1)) if axis == 1 else np.zeros(n, bool)
            fin = closed & ~(outlet | inlet | wall)
            theta = np.ones(n)
            if comp == "u":
                theta[wall] = 0.5
            else:
                theta[inlet] = 0.5
            if fin.any():
                theta[fin] = self._theta(px[fin], py[fin], axis, sign, default=1.0)
            # outlet: zero gradient, no contribution
            diag += np.where(closed & ~outlet, a / theta, 0.0)
            if comp == "u":
                rhs += a * self.case.inlet_velocity * inlet
        A = _assemble(n, diag, rows, cols, vals)
        return spla.splu(A), rhs

    def _pressure_operator(self):
        g = self.grid
        ids = self.c_id
        n = int((ids >= 0).sum())
        jj, ii = np.nonzero(ids >= 0)
        diag = np.zeros(n)
        rows, cols, vals = [], [], []
        for dj, di, h in ((0, 1, g.dx), (0, -1, g.dx), (1, 0, g.dy), (-1, 0, g.dy)):
            nj, ni = jj + dj, ii + di
            inside = (nj >= 0) & (nj < g.ny) & (ni >= 0) & (ni < g.nx)
            nid = np.full(n, -1, dtype=np.int64)
            nid[inside] = ids[nj[inside], ni[inside]]
            open_nb = nid >= 0
            diag -= open_nb / h**2
            rows.append(ids[jj, ii][open_nb])
            cols.append(nid[open_nb])
            vals.append(np.full(int(open_nb.sum()), 1.0 / h**2))
            # outlet face carries p = 0 half a cell away
            diag -= 2.0 * (ni == g.nx) / h**2
        L = _assemble(n, diag, rows, cols, vals)
        return L, spla.splu(L)

    def _temperature_operator(self):
        g, dt, alpha = self.grid, self.dt, self.case.diffusivity
        ids = self.c_id
        solid = g.solid_mask
        n = int((ids >= 0).sum())
        jj, ii = np.nonzero(ids >= 0)
        px, py = (ii + 0.5) * g.dx, (jj + 0.5) * g.dy
        diag = np.full(n, 1.0 / dt)
        rhs = np.zeros(n)
        # sum over fin-facing stencil arms of 1/theta: q = alpha * sum (Tw - T) / theta
        wall_coeff = np.zeros(n)
        rows, cols, vals = [], [], []
        for dj, di in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            axis, sign = (0, di) if di else (1, dj)
            h = g.dx if axis == 0 else g.dy
            a = alpha / h**2
            nj, ni = jj + dj, ii + di
            inside = (nj >= 0) & (nj < g.ny) & (ni >= 0) & (ni < g.nx)
            nid = np.full(n, -1, dtype=np.int64)
            nid[inside] = ids[nj[inside], ni[inside]]
            open_nb = nid >= 0
            diag += a * open_nb
            rows.append(ids[jj, ii][open_nb])
            cols.append(nid[open_nb])
            vals.append(np.full(int(open_nb.sum()), -a))
            fin = np.zeros(n, dtype=bool)
            fin[inside] = solid[nj[inside], ni[inside]]
            inlet = ni < 0
            theta = np.full(n, 0.5)
            if fin.any():
                th = self._theta(px[fin], py[fin], axis, sign, default=0.5)
                theta[fin] = np.minimum(th, 1.0)
            diag += a * (fin | inlet) / theta
            rhs += a * (fin * self.case.wall_temperature + inlet * self.case.inlet_temperature) / theta
            wall_coeff += fin / theta
        A = _assemble(n, diag, rows, cols, vals)
        return spla.splu(A), rhs, wall_coeff


def _hybrid(a: np.ndarray, b: np.ndarray, vel: np.ndarray, h: float, diff: float) -> np.ndarray:
    """Face value between ``a`` (upstream for vel > 0) and ``b``: central unless cell Peclet >= 2."""
    central = 0.5 * (a + b)
    upwind = np.where(vel >= 0, a, b)
    return np.where(np.abs(vel) * h / diff < 2.0, central, upwind)


class _Stepper:
    def __init__(self, grid: Grid, case: FlowCase, settings: SolverSettings):
        self.grid, self.case, self.settings = grid, case, settings
        ny, nx = grid.ny, grid.nx
        self.f = FlowFields(
            u=np.zeros((ny, nx + 1)), v=np.zeros((ny + 1, nx)), p=np.zeros((ny, nx)), T=np.zeros((ny, nx))
        )
        self.speed = 1.5 * case.inlet_velocity
        self.ops = _Operators(grid, case, self._dt_for(self.speed))
        f, ops = self.f, self.ops
        f.u[:, 0] = case.inlet_velocity
        f.u[ops.u_unknown] = case.inlet_velocity
        f.u[:, nx] = np.where(ops.fluid[:, -1], case.inlet_velocity, 0.0)
        f.T[grid.solid_mask] = case.wall_temperature
        f.T[ops.fluid] = case.inlet_temperature
        self.max_div = 0.0
        self._project(f.u, f.v, update_pressure=False)

    def _dt_for(self, speed: float) -> float:
        # explicit central convection with implicit diffusion is stable for dt <= 2 nu / |u|^2
        nu_min = min(self.case.viscosity, self.case.diffusivity)
        raw = min(self.settings.dt_max, self.settings.safety * 2.0 * nu_min / speed**2)
        # whole number of steps per horizon keeps the averaging window aligned
        return self.settings.t_end / math.ceil(self.settings.t_end / raw - 1e-9)

    @property
    def dt(self) -> float:
        return self.ops.dt

    def _corners(self, u, v):
        g = self.grid
        uc = np.zeros((g.ny + 1, g.nx + 1))
        uc[1:-1, :] = 0.5 * (u[:-1, :] + u[1:, :])
        vc = np.zeros((g.ny + 1, g.nx + 1))
        vc[:, 1:-1] = 0.5 * (v[:, :-1] + v[:, 1:])
        vc[:, -1] = v[:, -1]
        return uc, vc

    def _convection(self, u, v):
        g = self.grid
        ucell = 0.5 * (u[:, :-1] + u[:, 1:])
        vcell = 0.5 * (v[:-1, :] + v[1:, :])
        uc, vc = self._corners(u, v)
        uv = uc * vc
        cu = np.zeros_like(u)
        cu[:, 1:-1] = (ucell[:, 1:] ** 2 - ucell[:, :-1] ** 2) / g.dx + (uv[1:, 1:-1] - uv[:-1, 1:-1]) / g.dy
        cv = np.zeros_like(v)
        cv[1:-1, :] = (vcell[1:, :] ** 2 - vcell[:-1, :] ** 2) / g.dy + (uv[1:-1, 1:] - uv[1:-1, :-1]) / g.dx
        return cu, cv

    def _project(self, u, v, update_pressure=True):
        g, ops, dt = self.grid, self.ops, self.dt
        f = self.f
        div = (u[:, 1:] - u[:, :-1]) / g.dx + (v[1:, :] - v[:-1, :]) / g.dy
        rhs = div[ops.fluid] / dt
        phi_vec = ops.lu_p.solve(rhs)
        res = float(np.max(np.abs(ops.lap_p @ phi_vec - rhs))) if rhs.size else 0.0
        scale = max(1.0, float(np.max(np.abs(rhs)))) if rhs.size else 1.0
        if not math.isfinite(res) or res > 1e-8 * scale:
            raise SolverError("pressure solve did not converge", res)
        phi = np.zeros((g.ny, g.nx))
        phi[ops.fluid] = phi_vec
        u[:, 1:-1] -= np.where(ops.u_unknown[:, 1:-1], dt * (phi[:, 1:] - phi[:, :-1]) / g.dx, 0.0)
        u[:, -1] += np.where(ops.fluid[:, -1], dt * 2.0 * phi[:, -1] / g.dx, 0.0)
        v[1:-1, :] -= np.where(ops.v_unknown[1:-1, :], dt * (phi[1:, :] - phi[:-1, :]) / g.dy, 0.0)
        div = (u[:, 1:] - u[:, :-1]) / g.dx + (v[1:, :] - v[:-1, :]) / g.dy
        mdiv = float(np.max(np.abs(div[ops.fluid])))
        self.max_div = max(self.max_div, mdiv)
        if mdiv > DIVERGENCE_TOL:
            raise SolverError("velocity not divergence free after projection", mdiv)
        f.u, f.v = u, v
        if update_pressure:
            f.p = f.p + phi

    def step(self):
        g, ops, case, dt = self.grid, self.ops, self.case, self.dt
        f = self.f
        u, v, p, T = f.u, f.v, f.p, f.T
        cu, cv = self._convection(u, v)

        gpx = (p[:, 1:] - p[:, :-1]) / g.dx
        rhs_u = u[:, 1:-1] / dt - cu[:, 1:-1] - gpx
        ustar = np.zeros_like(u)
        ustar[:, 0] = case.inlet_velocity
        ustar[ops.u_unknown] = ops.lu_u.solve(rhs_u[ops.u_unknown[:, 1:-1]] + ops.rhs_u)
        ustar[:, -1] = np.where(ops.fluid[:, -1], ustar[:, -2], 0.0)

        gpy = (p[1:, :] - p[:-1, :]) / g.dy
        rhs_v = v[1:-1, :] / dt - cv[1:-1, :] - gpy
        vstar = np.zeros_like(v)
        vstar[ops.v_unknown] = ops.lu_v.solve(rhs_v[ops.v_unknown[1:-1, :]] + ops.rhs_v)

        self._project(ustar, vstar)

        # temperature with the old (divergence free) velocity
        alpha = case.diffusivity
        Tw = np.concatenate([np.full((g.ny, 1), case.inlet_temperature), T], axis=1)
        Te = np.concatenate([T, T[:, -1:]], axis=1)
        Tx = _hybrid(Tw, Te, u, g.dx, alpha)
        Tx[:, 0] = case.inlet_temperature
        Tx[:, -1] = T[:, -1]
        Fx = u * Tx
        Ts = np.concatenate([T[:1], T], axis=0)
        Tn = np.concatenate([T, T[-1:]], axis=0)
        Fy = v * _hybrid(Ts, Tn, v, g.dy, alpha)
        adv = (Fx[:, 1:] - Fx[:, :-1]) / g.dx + (Fy[1:, :] - Fy[:-1, :]) / g.dy
        rhs_T = T[ops.fluid] / dt - adv[ops.fluid] + ops.rhs_T
        Tn_ = T.copy()
        Tn_[ops.fluid] = ops.lu_T.solve(rhs_T)
        f.T = Tn_

    def observables(self) -> tuple[float, float]:
        ops, case = self.ops, self.case
        T = self.f.T
        alpha = case.diffusivity
        # conductive flux along every stencil arm that ends on a fin (face length == spacing)
        q = float(alpha * np.sum(ops.flux_T * (case.wall_temperature - T[ops.fluid])))
        p = self.f.p
        inlet = ops.fluid[:, 0]
        outlet = ops.fluid[:, -1]
        dp = float(p[inlet, 0].mean() - p[outlet, -1].mean())
        return q, dp

    def enthalpy_balance(self) -> float:
        g, case = self.grid, self.case
        f = self.f
        out = float(np.sum(f.u[:, -1] * f.T[:, -1]) * g.dy)
        inn = float(np.sum(f.u[:, 0] * case.inlet_temperature) * g.dy)
        return out - inn

    def max_speed(self) -> float:
        return float(np.max(np.abs(self.f.u)) + np.max(np.abs(self.f.v)))


def solve(
    case: FlowCase,
    shapes: Sequence[FinShape],
    grid_resolution: int,
    settings: SolverSettings = SolverSettings(),
    return_fields: bool = False,
):
    """Time-averaged heat transfer and pressure drop for fins in the channel.

    The average runs over ``[settings.avg_start, settings.t_end]``. When every
    field has stopped changing (steady flow, typical at Re=10) the march ends
    early and the steady values stand in for the rest of the window.
    """
    if grid_resolution < 32:
        raise ValueError("grid_resolution must be >= 32 cells across the channel")
    if not 0 <= settings.avg_start < settings.t_end:
        raise ValueError("averaging window must satisfy 0 <= avg_start < t_end")
    started = time.perf_counter()
    grid = Grid.build(shapes, grid_resolution)
    for k, shape in enumerate(shapes):
        if not solid_mask([shape], grid.nx, grid.ny, CHANNEL).any():
            raise UnresolvedFinError(f"fin {k} covers no cell at resolution {grid_resolution}")
    st = _Stepper(grid, case, settings)
    t = 0.0
    acc_q = acc_dp = 0.0
    q = dp = 0.0
    steps = 0
    steady_at = None
    while t < settings.t_end - 1e-12:
        speed = st.max_speed()
        dt_need = st._dt_for(max(speed, 1e-12))
        if dt_need < 0.999 * st.dt:
            st.ops = _Operators(grid, case, dt_need)
            log.debug("time step reduced to %.3e at t=%.3f", dt_need, t)
        dt = st.dt
        u0, v0, T0 = st.f.u, st.f.v, st.f.T
        st.step()
        steps += 1
        t += dt
        if not (np.isfinite(st.f.u).all() and np.isfinite(st.f.T).all()):
            raise SolverError(f"non-finite field at t={t:.3f}")
        q, dp = st.observables()
        if t > settings.avg_start:
            w = min(dt, t - settings.avg_start)
            acc_q += w * q
            acc_dp += w * dp
        change = max(
            float(np.max(np.abs(st.f.u - u0))),
            float(np.max(np.abs(st.f.v - v0))),
            float(np.max(np.abs(st.f.T - T0))),
        ) / dt
        if change < settings.steady_tol:
            steady_at = t
            break
        if steps >= settings.max_steps:
            raise SolverError("step budget exhausted", change)
    window = settings.t_end - settings.avg_start
    if steady_at is not None:
        rest = settings.t_end - max(t, settings.avg_start)
        acc_q += rest * q
        acc_dp += rest * dp
    diag = {
        "steps": steps,
        "dt": st.dt,
        "steady_at": steady_at,
        "max_divergence": st.max_div,
        "enthalpy_out": st.enthalpy_balance(),
        "q_final": q,
        "solid_cells": int(grid.solid_mask.sum()),
        "seconds": time.perf_counter() - started,
    }
    res = SimResult(acc_q / window, acc_dp / window, avg_window=(settings.avg_start, settings.t_end), diagnostics=diag)
    if return_fields:
        return res, st.f, grid
    return res


BASELINE_DIAMETER = CHANNEL_HEIGHT / 4
_BASELINE_CACHE: dict[tuple, SimResult] = {}


def baseline_shape() -> FinShape:
    """Circle of diameter H/4 centred in the first fin slot."""
    slot = slot_boxes(1)[0]
    center = (slot.x0 + slot.width / 2, slot.y0 + slot.height / 2)
    return bezier_circle(center, BASELINE_DIAMETER / 2, bbox=slot)


def baseline(case: FlowCase, grid_resolution: int, settings: SolverSettings = SolverSettings()) -> SimResult:
    """Reference run used to normalize q and dp; cached per (case, resolution, settings)."""
    key = (case, grid_resolution, settings)
    if key not in _BASELINE_CACHE:
        raw = solve(case, [baseline_shape()], grid_resolution, settings)
        _BASELINE_CACHE[key] = raw.normalized(raw)
    return _BASELINE_CACHE[key]


def solve_normalized(
    case: FlowCase, shapes: Sequence[FinShape], grid_resolution: int, settings: SolverSettings = SolverSettings()
) -> SimResult:
    return solve(case, shapes, grid_resolution, settings).normalized(baseline(case, grid_resolution, settings))


@dataclass
class ConvergenceRow:
    set_index: int
    resolution: int
    q: float
    error: str = ""


@dataclass
class ConvergenceTable:
    rows: list[ConvergenceRow]
    tolerance: float = 0.01

    def series(self, set_index: int) -> list[ConvergenceRow]:
        return sorted((r for r in self.rows if r.set_index == set_index), key=lambda r: r.resolution)

    def last_change(self, set_index: int) -> float:
        """Relative change of q between the two finest successful resolutions."""
        s = [r for r in self.series(set_index) if not r.error]
        if len(s) < 2:
            return float("nan")
        a, b = s[-2].q, s[-1].q
        if a == b:
            return 0.0
        return abs(b - a) / max(abs(a), abs(b))

    def change_over_doubling(self, set_index: int) -> float:
        """Relative change of q from the finest resolution to the one at half of it."""
        s = {r.resolution: r.q for r in self.series(set_index) if not r.error}
        finest = max(s, default=None)
        if finest is None or finest % 2 or finest // 2 not in s:
            return float("nan")
        a, b = s[finest // 2], s[finest]
        return 0.0 if a == b else abs(b - a) / max(abs(a), abs(b))

    def converged(self, set_index: int) -> bool | None:
        """None (flag unset) with fewer than two resolutions."""
        change = self.last_change(set_index)
        if math.isnan(change):
            return None
        return change < self.tolerance

    def to_csv(self) -> str:
        lines = ["set,resolution,q,error"]
        lines += [f"{r.set_index},{r.resolution},{r.q!r},{r.error}" for r in self.rows]
        return "\n".join(lines) + "\n"


def grid_convergence(
    case: FlowCase,
    shape_sets: Sequence[Sequence[FinShape]],
    resolutions: Sequence[int],
    settings: SolverSettings = SolverSettings(),
    tolerance: float = 0.01,
) -> ConvergenceTable:
    """q for every shape set at every resolution; solver errors are kept per cell."""
    rows = []
    for k, shapes in enumerate(shape_sets):
        for n in sorted(resolutions):
            try:
                rows.append(ConvergenceRow(k, n, solve(case, shapes, n, settings).q))
            except (SolverError, FinPlacementError) as exc:
                log.warning("grid study set %d at %d failed: %s", k, n, exc)
                rows.append(ConvergenceRow(k, n, float("nan"), type(exc).__name__))
    return ConvergenceTable(rows, tolerance)


CSV_HEADER = "id,re,pr,resolution,q,dp,q_over_qb,dp_over_dpb"


def csv_row(sample_id: str, case: FlowCase, resolution: int, res: SimResult) -> str:
    return (
        f"{sample_id},{case.reynolds!r},{case.prandtl!r},{resolution},"
        f"{res.q!r},{res.dp!r},{res.q_over_qb!r},{res.dp_over_dpb!r}"
    )


def dump_fields(fields: FlowFields, grid: Grid) -> bytes:
    """Debug dump: one text header line, then u, v, p, T as little-endian float64."""
    header = (
        f"finsurrogate-fields nx={grid.nx} ny={grid.ny} dx={grid.dx!r} dy={grid.dy!r} "
        f"u={fields.u.shape[0]}x{fields.u.shape[1]} v={fields.v.shape[0]}x{fields.v.shape[1]} "
        f"p={grid.ny}x{grid.nx} T={grid.ny}x{grid.nx}\n"
    ).encode("ascii")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in (fields.u, fields.v, fields.p, fields.T))
    return header + body


def load_fields(data: bytes) -> FlowFields:
    head, _, body = data.partition(b"\n")
    kv = dict(tok.split("=", 1) for tok in head.decode("ascii").split()[1:])
    shapes = [tuple(int(t) for t in kv[name].split("x")) for name in ("u", "v", "p", "T")]
    arrays, pos = [], 0
    for shp in shapes:
        n = shp[0] * shp[1] * 8
        if pos + n > len(body):
            raise ValueError("truncated field dump")
        arrays.append(np.frombuffer(body[pos : pos + n], dtype="<f8").reshape(shp).copy())
        pos += n
    return FlowFields(*arrays)
