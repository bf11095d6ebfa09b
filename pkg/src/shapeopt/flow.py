"""2D incompressible flow past an immersed obstacle.

Marker-and-cell grid: ``u`` lives on vertical cell faces, shape ``(nx+1, ny)``;
``v`` on horizontal faces, shape ``(nx, ny+1)``; ``p`` at cell centres,
shape ``(nx, ny)``. Index ``[i, j]`` runs along x then y.

Time marching is an incremental pressure-correction projection with a BDF2
time derivative (BDF1 on the first step). Advection is semi-Lagrangian: the
velocity at the current and previous levels is carried back along
characteristics and interpolated with cubic splines. Diffusion is implicit.
The obstacle is a cell mask: every face touching a solid cell carries zero
velocity and is excluded from the pressure Poisson operator, which is
therefore Neumann at the body.

Two wall layouts are supported:

``channel``
    uniform inflow on the left, free-slip top and bottom, traction-free
    outflow on the right (p = 0, zero normal gradient of velocity).
``cavity``
    no-slip walls everywhere, the top lid moving at ``v_in``. Only used to
    benchmark the solver.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from .geometry import Polygon

log = logging.getLogger(__name__)

# ghost layers around padded velocity arrays
GHOST = 3
# largest viscous system solved by sparse LU; bigger ones use CG
DIRECT_LIMIT = 200_000


class ObstacleOutOfDomain(ValueError):
    pass


class SolverDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class FlowConfig:
    length: float = 45.0
    width: float = 30.0
    v_in: float = 1.0
    rho: float = 1.0
    re_ref: float = 200.0
    r_cyl: float = 1.0
    cfl: float = 0.5
    nx: int = 450
    ny: int = 300
    center: Optional[tuple[float, float]] = None
    t_max: Optional[float] = None
    walls: str = "channel"
    kick: float = 0.0
    divergence_speed: float = 50.0
    force_margin: int = 4
    pressure_solver: str = "direct"
    # explicit timestep; required when v_in = 0, otherwise overrides the CFL rule
    dt_fixed: Optional[float] = None

    def __post_init__(self):
        if self.walls not in ("channel", "cavity"):
            raise ValueError(f"unknown wall layout {self.walls!r}")
        if self.pressure_solver not in ("direct", "amg"):
            raise ValueError(f"unknown pressure solver {self.pressure_solver!r}")
        if self.nx < 4 or self.ny < 4:
            raise ValueError("grid needs at least 4x4 cells")
        if min(self.length, self.width, self.rho, self.re_ref, self.cfl) <= 0 or self.v_in < 0:
            raise ValueError("lengths, density, Reynolds and CFL must be positive, v_in >= 0")
        if self.v_in == 0 and (self.dt_fixed is None or self.t_max is None):
            raise ValueError("v_in = 0 needs both dt_fixed and t_max")
        if self.dt_fixed is not None and self.dt_fixed <= 0:
            raise ValueError("dt_fixed must be positive")

    @property
    def mu(self) -> float:
        return 2.0 * self.rho * self.v_in * self.r_cyl / self.re_ref

    @property
    def nu(self) -> float:
        return self.mu / self.rho

    @property
    def dx(self) -> float:
        return self.length / self.nx

    @property
    def dy(self) -> float:
        return self.width / self.ny

    @property
    def h_min(self) -> float:
        return min(self.dx, self.dy)

    @property
    def dt(self) -> float:
        if self.dt_fixed is not None:
            return float(self.dt_fixed)
        return self.cfl * self.h_min / self.v_in

    @property
    def t_end(self) -> float:
        if self.t_max is not None:
            return float(self.t_max)
        return 2.0 / self.v_in * self.length

    @property
    def obstacle_center(self) -> tuple[float, float]:
        if self.center is not None:
            return (float(self.center[0]), float(self.center[1]))
        return (self.length / 3.0, self.width / 2.0)


@dataclass
class FlowState:
    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    mask: np.ndarray
    t: float = 0.0
    nstep: int = 0
    u_prev: Optional[np.ndarray] = None
    v_prev: Optional[np.ndarray] = None
    momentum: list = field(default_factory=list, repr=False)
    _solver: Optional["FlowSolver"] = field(default=None, repr=False, compare=False)

    def copy(self) -> "FlowState":
        def c(a):
            return None if a is None else a.copy()
        return FlowState(self.u.copy(), self.v.copy(), self.p.copy(), self.mask,
                         self.t, self.nstep, c(self.u_prev), c(self.v_prev),
                         list(self.momentum),
                         self._solver)


@dataclass(frozen=True)
class ForceSample:
    t: float
    fd: float
    fl: float
    cd: float
    cl: float


@dataclass
class FlowResult:
    mean_cd: float
    mean_cl: float
    mean_ratio: float
    samples: list
    failed: bool = False
    failure_reason: str = ""
    ref_length: float = 2.0

    @property
    def cl_amplitude(self) -> float:
        """Half peak-to-peak lift coefficient over the averaging window."""
        w = self.window()
        if not w:
            return 0.0
        cl = np.array([s.cl for s in w])
        return 0.5 * float(cl.max() - cl.min())

    def window(self) -> list:
        if not self.samples:
            return []
        t_end = self.samples[-1].t
        return [s for s in self.samples if s.t >= 0.5 * t_end]


# ---------------------------------------------------------------- rasterize

def _points_in_polygon(px: np.ndarray, py: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Even-odd rule, vectorised over query points."""
    inside = np.zeros(px.shape, dtype=bool)
    x0, y0 = verts[:, 0], verts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        straddle = (ay > py) != (by > py)
        if not straddle.any():
            continue
        xc = ax + (py - ay) * (bx - ax) / (by - ay if by != ay else 1.0)
        inside ^= straddle & (px < xc)
    return inside


def rasterize(poly: Polygon, cfg: FlowConfig, centered: bool = True) -> np.ndarray:
    """Boolean solid mask of shape (nx, ny).

    With ``centered`` the polygon is given in body coordinates and is placed
    at the configured obstacle centre. Fluid pockets cut off from the open
    boundaries are folded into the solid.
    """
    verts = poly.vertices
    if centered:
        verts = verts + np.asarray(cfg.obstacle_center)
    xmin, ymin = verts.min(axis=0)
    xmax, ymax = verts.max(axis=0)
    mx, my = 2 * cfg.dx, 2 * cfg.dy
    if xmin < mx or ymin < my or xmax > cfg.length - mx or ymax > cfg.width - my:
        raise ObstacleOutOfDomain(
            f"obstacle bounds ({xmin:.3g}, {ymin:.3g})-({xmax:.3g}, {ymax:.3g}) "
            f"leave less than 2 cells to the {cfg.length}x{cfg.width} domain edge")
    i0 = max(int(math.floor(xmin / cfg.dx)) - 1, 0)
    i1 = min(int(math.ceil(xmax / cfg.dx)) + 1, cfg.nx)
    j0 = max(int(math.floor(ymin / cfg.dy)) - 1, 0)
    j1 = min(int(math.ceil(ymax / cfg.dy)) + 1, cfg.ny)
    xc = (np.arange(i0, i1) + 0.5) * cfg.dx
    yc = (np.arange(j0, j1) + 0.5) * cfg.dy
    X, Y = np.meshgrid(xc, yc, indexing="ij")
    mask = np.zeros((cfg.nx, cfg.ny), dtype=bool)
    mask[i0:i1, j0:j1] = _points_in_polygon(X, Y, verts)
    labels, count = ndimage.label(~mask)
    if count > 1:
        edge = np.concatenate([labels[0, :], labels[-1, :], labels[:, 0], labels[:, -1]])
        open_labels = np.unique(edge[edge > 0])
        mask |= ~np.isin(labels, open_labels)
    mask.setflags(write=False)
    return mask


# ---------------------------------------------------------------- padding

def _pad(a: np.ndarray, axis: int, lo: str, hi: str, lo_val: float = 0.0,
         hi_val: float = 0.0, width: int = GHOST) -> np.ndarray:
    """Add ghost layers along one axis.

    Kinds: ``edge`` copies the boundary value; ``even`` mirrors about a wall
    lying half a cell outside the first entry; ``odd_cell`` is the same
    mirror with ghost = 2 * wall - interior; ``odd_face`` mirrors about a
    wall sitting on the first entry itself.
    """
    n = a.shape[axis]
    k = np.arange(1, width + 1)

    def ghosts(kind, val, side):
        if side == "lo":
            first, near0, near1 = np.zeros(width, dtype=int), k - 1, k
        else:
            first, near0, near1 = np.full(width, n - 1), n - k, n - 1 - k
        if kind == "edge":
            idx, sign = first, 1.0
        elif kind == "even":
            idx, sign = near0, 1.0
        elif kind == "odd_cell":
            idx, sign = near0, -1.0
        elif kind == "odd_face":
            idx, sign = near1, -1.0
        else:
            raise ValueError(kind)
        if side == "lo":
            idx = idx[::-1]
        g = np.take(a, idx, axis=axis)
        return g if sign > 0 else 2.0 * val - g

    return np.concatenate([ghosts(lo, lo_val, "lo"), a, ghosts(hi, hi_val, "hi")], axis=axis)


def _ghost_rules(cfg: FlowConfig, comp: str) -> tuple:
    """((lo, hi, lo_val, hi_val) along x, same along y) for one velocity component."""
    if cfg.walls == "channel":
        if comp == "u":
            return ("edge", "edge", 0.0, 0.0), ("even", "even", 0.0, 0.0)
        return ("odd_cell", "edge", 0.0, 0.0), ("odd_face", "odd_face", 0.0, 0.0)
    if comp == "u":
        return ("odd_face", "odd_face", 0.0, 0.0), ("odd_cell", "odd_cell", 0.0, cfg.v_in)
    return ("odd_cell", "odd_cell", 0.0, 0.0), ("odd_face", "odd_face", 0.0, 0.0)


def _pad_field(a: np.ndarray, cfg: FlowConfig, comp: str, homogeneous: bool = False) -> np.ndarray:
    for axis, (lo, hi, lv, hv) in enumerate(_ghost_rules(cfg, comp)):
        if homogeneous:
            lv = hv = 0.0
        a = _pad(a, axis, lo, hi, lv, hv)
    return a


def _pad_u(u: np.ndarray, cfg: FlowConfig) -> np.ndarray:
    return _pad_field(u, cfg, "u")


def _pad_v(v: np.ndarray, cfg: FlowConfig) -> np.ndarray:
    return _pad_field(v, cfg, "v")


def _laplacian_matrix(free: np.ndarray, rules: tuple, dx: float, dy: float) -> sp.csr_matrix:
    """Five-point Laplacian restricted to the free entries, ghosts folded in.

    Non-free neighbours are left out; their contribution is affine and is
    added separately.
    """
    shape = free.shape
    idx = np.full(shape, -1, dtype=np.int64)
    idx[free] = np.arange(int(free.sum()))
    fi, fj = np.nonzero(free)
    rows = [idx[fi, fj]]
    cols = [idx[fi, fj]]
    vals = [np.full(fi.size, -2.0 / dx**2 - 2.0 / dy**2)]
    for axis, h in ((0, dx), (1, dy)):
        lo, hi = rules[axis][:2]
        n = shape[axis]
        for step, kind, edge in ((-1, lo, 0), (1, hi, n - 1)):
            pos = (fi, fj)[axis]
            nb = [fi.copy(), fj.copy()]
            nb[axis] = pos + step
            inside = (nb[axis] >= 0) & (nb[axis] < n)
            c = np.where(inside, idx[np.clip(nb[0], 0, shape[0] - 1), np.clip(nb[1], 0, shape[1] - 1)], -1)
            ok = inside & (c >= 0)
            rows.append(idx[fi, fj][ok]); cols.append(c[ok]); vals.append(np.full(ok.sum(), 1.0 / h**2))
            out = ~inside
            if not np.any(out):
                continue
            r = idx[fi, fj][out]
            if kind in ("edge", "even"):
                rows.append(r); cols.append(r); vals.append(np.full(r.size, 1.0 / h**2))
            elif kind == "odd_cell":
                rows.append(r); cols.append(r); vals.append(np.full(r.size, -1.0 / h**2))
            else:
                mir = [fi[out].copy(), fj[out].copy()]
                mir[axis] = np.full(r.size, edge - step)
                c2 = idx[mir[0], mir[1]]
                keep = c2 >= 0
                rows.append(r[keep]); cols.append(c2[keep]); vals.append(np.full(keep.sum(), -1.0 / h**2))
    m = int(free.sum())
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m))


def _laplacian(F: np.ndarray, dx: float, dy: float, g: int = GHOST) -> np.ndarray:
    nx, ny = F.shape[0] - 2 * g, F.shape[1] - 2 * g

    def sh(di, dj):
        return F[g + di:g + di + nx, g + dj:g + dj + ny]
    c = sh(0, 0)
    return (sh(-1, 0) - 2.0 * c + sh(1, 0)) / dx**2 + (sh(0, -1) - 2.0 * c + sh(0, 1)) / dy**2


class _Sampler:
    """Interpolates a ghost-padded staggered field at arbitrary points."""

    def __init__(self, F: np.ndarray, x0: float, y0: float, dx: float, dy: float, order: int):
        self.order = order
        self.F = ndimage.spline_filter(F, order=order, mode="nearest") if order > 1 else F
        self.x0, self.y0, self.dx, self.dy = x0, y0, dx, dy
        self.hi = np.array(F.shape, dtype=float) - 1.0

    def __call__(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        fx = np.clip((X - self.x0) / self.dx + GHOST, 0.0, self.hi[0])
        fy = np.clip((Y - self.y0) / self.dy + GHOST, 0.0, self.hi[1])
        out = ndimage.map_coordinates(self.F, [fx.ravel(), fy.ravel()], order=self.order,
                                      mode="nearest", prefilter=False)
        return out.reshape(X.shape)


# ---------------------------------------------------------------- solver

class FlowSolver:
    """Operators and factorised pressure matrix for one (config, mask) pair."""

    def __init__(self, cfg: FlowConfig, mask: Optional[np.ndarray] = None):
        self.cfg = cfg
        nx, ny = cfg.nx, cfg.ny
        if mask is None:
            mask = np.zeros((nx, ny), dtype=bool)
        if mask.shape != (nx, ny):
            raise ValueError(f"mask shape {mask.shape} does not match grid {(nx, ny)}")
        self.mask = mask

        # faces touching a solid cell are blocked
        su = np.zeros((nx + 1, ny), dtype=bool)
        su[:-1] |= mask
        su[1:] |= mask
        sv = np.zeros((nx, ny + 1), dtype=bool)
        sv[:, :-1] |= mask
        sv[:, 1:] |= mask
        self.solid_u, self.solid_v = su, sv

        # faces whose velocity is advanced by the momentum equation
        free_u = ~su
        free_u[0] = False
        if cfg.walls == "cavity":
            free_u[-1] = False
        free_v = ~sv
        free_v[:, 0] = False
        free_v[:, -1] = False
        self.free_u, self.free_v = free_u, free_v

        self._build_operators()
        self._poisson_cache = None
        self._lap = {"u": _laplacian_matrix(free_u, _ghost_rules(cfg, "u"), cfg.dx, cfg.dy),
                     "v": _laplacian_matrix(free_v, _ghost_rules(cfg, "v"), cfg.dx, cfg.dy)}
        self._helmholtz: dict = {}
        xs = np.arange(nx + 1) * cfg.dx
        ys = (np.arange(ny) + 0.5) * cfg.dy
        self.pts_u = np.meshgrid(xs, ys, indexing="ij")
        xs = (np.arange(nx) + 0.5) * cfg.dx
        ys = np.arange(ny + 1) * cfg.dy
        self.pts_v = np.meshgrid(xs, ys, indexing="ij")

    def _build_operators(self):
        cfg = self.cfg
        nx, ny = cfg.nx, cfg.ny
        dx, dy = cfg.dx, cfg.dy
        cell = np.arange(nx * ny).reshape(nx, ny)
        nu_f = (nx + 1) * ny
        uf = np.arange(nu_f).reshape(nx + 1, ny)
        vf = nu_f + np.arange(nx * (ny + 1)).reshape(nx, ny + 1)
        nf = nu_f + nx * (ny + 1)

        # divergence: cells x faces
        rows = np.concatenate([cell.ravel()] * 4)
        cols = np.concatenate([uf[1:].ravel(), uf[:-1].ravel(), vf[:, 1:].ravel(), vf[:, :-1].ravel()])
        vals = np.concatenate([np.full(nx * ny, 1.0 / dx), np.full(nx * ny, -1.0 / dx),
                               np.full(nx * ny, 1.0 / dy), np.full(nx * ny, -1.0 / dy)])
        self.D = sp.csr_matrix((vals, (rows, cols)), shape=(nx * ny, nf))

        # gradient on faces that the projection corrects
        open_u = self.free_u.copy()
        open_v = self.free_v.copy()
        gr, gc, gv = [], [], []
        iu, ju = np.nonzero(open_u[1:nx])
        iu = iu + 1
        gr += [uf[iu, ju], uf[iu, ju]]
        gc += [cell[iu, ju], cell[iu - 1, ju]]
        gv += [np.full(iu.size, 1.0 / dx), np.full(iu.size, -1.0 / dx)]
        if cfg.walls == "channel":
            jo = np.nonzero(open_u[nx])[0]
            # p = 0 on the outflow face, half a cell from the last centre
            gr.append(uf[nx, jo])
            gc.append(cell[nx - 1, jo])
            gv.append(np.full(jo.size, -2.0 / dx))
        iv, jv = np.nonzero(open_v[:, 1:ny])
        jv = jv + 1
        gr += [vf[iv, jv], vf[iv, jv]]
        gc += [cell[iv, jv], cell[iv, jv - 1]]
        gv += [np.full(iv.size, 1.0 / dy), np.full(iv.size, -1.0 / dy)]
        self.G = sp.csr_matrix((np.concatenate(gv), (np.concatenate(gr), np.concatenate(gc))),
                               shape=(nf, nx * ny))
        self.n_uface = nu_f
        self.open_u, self.open_v = open_u, open_v

        A = (self.D @ self.G).tolil()
        diag = A.diagonal()
        self.dead = np.nonzero(diag == 0.0)[0]
        for k in self.dead:
            A[k, k] = 1.0
        self.pinned = None
        if cfg.walls == "cavity":
            k = int(np.nonzero(~self.mask.ravel())[0][0])
            A[k, :] = 0.0
            A[k, k] = 1.0
            self.pinned = k
        self.A = A.tocsc()

    def _poisson(self):
        if self._poisson_cache is None:
            if self.cfg.pressure_solver == "direct":
                lu = spla.splu(self.A, permc_spec="MMD_AT_PLUS_A")
                self._poisson_cache = lu.solve
            else:
                import pyamg
                # -A is symmetric positive definite on the live cells
                ml = pyamg.smoothed_aggregation_solver((-self.A).tocsr(), symmetry="symmetric")

                def solve(b, _ml=ml):
                    x = _ml.solve(-b, tol=1e-11, accel="cg", maxiter=500)
                    return x
                self._poisson_cache = solve
        return self._poisson_cache

    def solve_pressure(self, rhs: np.ndarray) -> np.ndarray:
        b = rhs.ravel().copy()
        b[self.dead] = 0.0
        if self.pinned is not None:
            b[self.pinned] = 0.0
        return self._poisson()(b).reshape(self.cfg.nx, self.cfg.ny)

    def divergence(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        nx, ny = self.cfg.nx, self.cfg.ny
        return (np.diff(u, axis=0) / self.cfg.dx + np.diff(v, axis=1) / self.cfg.dy).reshape(nx, ny)

    def gradient(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g = self.G @ p.ravel()
        nx, ny = self.cfg.nx, self.cfg.ny
        return g[:self.n_uface].reshape(nx + 1, ny), g[self.n_uface:].reshape(nx, ny + 1)

    # -------------------------------------------------------- state handling

    def apply_boundaries(self, u: np.ndarray, v: np.ndarray) -> None:
        cfg = self.cfg
        if cfg.walls == "channel":
            u[0] = cfg.v_in
        else:
            u[0] = 0.0
            u[-1] = 0.0
        v[:, 0] = 0.0
        v[:, -1] = 0.0
        u[self.solid_u] = 0.0
        v[self.solid_v] = 0.0

    def project(self, u: np.ndarray, v: np.ndarray, coef: float) -> np.ndarray:
        """Make (u, v) discretely divergence free in place; returns the potential.

        ``coef`` is the factor multiplying u^{n+1} in the time derivative
        (1/dt for BDF1, 3/(2 dt) for BDF2) times density.
        """
        phi = self.solve_pressure(coef * self.divergence(u, v))
        gu, gv = self.gradient(phi)
        u -= gu / coef
        v -= gv / coef
        return phi

    def initial_state(self) -> FlowState:
        cfg = self.cfg
        nx, ny = cfg.nx, cfg.ny
        u = np.zeros((nx + 1, ny))
        v = np.zeros((nx, ny + 1))
        if cfg.walls == "channel":
            u[:] = cfg.v_in
            if cfg.kick:
                xc, yc = cfg.obstacle_center
                x = (np.arange(nx) + 0.5) * cfg.dx
                y = np.arange(ny + 1) * cfg.dy
                X, Y = np.meshgrid(x, y, indexing="ij")
                r2 = ((X - xc - 3.0 * cfg.r_cyl) ** 2 + (Y - yc) ** 2) / cfg.r_cyl**2
                v += cfg.kick * cfg.v_in * np.exp(-r2)
        self.apply_boundaries(u, v)
        self.project(u, v, cfg.rho)
        state = FlowState(u, v, np.zeros((nx, ny)), self.mask)
        state._solver = self
        return state

    def _padded(self, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _pad_u(u, self.cfg), _pad_v(v, self.cfg)

    def _samplers(self, U: np.ndarray, V: np.ndarray, order: int):
        """Interpolators for padded u and v fields."""
        dx, dy = self.cfg.dx, self.cfg.dy
        return (_Sampler(U, 0.0, 0.5 * dy, dx, dy, order),
                _Sampler(V, 0.5 * dx, 0.0, dx, dy, order))

    @staticmethod
    def _face_velocities(U: np.ndarray, V: np.ndarray):
        """Both velocity components at u faces and at v faces, from padded fields."""
        g = GHOST
        u = U[g:-g, g:-g]
        v = V[g:-g, g:-g]
        Vx = V[g - 1:-g + 1, g:-g]
        v_at_u = 0.25 * (Vx[:-1, :-1] + Vx[1:, :-1] + Vx[:-1, 1:] + Vx[1:, 1:])
        Uy = U[g:-g, g - 1:-g + 1]
        u_at_v = 0.25 * (Uy[:-1, :-1] + Uy[1:, :-1] + Uy[:-1, 1:] + Uy[1:, 1:])
        return (u, v_at_u), (u_at_v, v)

    def _advected(self, field_samplers, U, V, span):
        """Fields carried back along characteristics over ``span`` time units.

        ``U, V`` are the padded advecting velocity; departure points come from
        the midpoint rule.
        """
        su, sv = self._samplers(U, V, 1)
        out = []
        for (X, Y), (a, b), f in zip((self.pts_u, self.pts_v), self._face_velocities(U, V),
                                     field_samplers):
            xm = X - 0.5 * span * a
            ym = Y - 0.5 * span * b
            out.append(f(X - span * su(xm, ym), Y - span * sv(xm, ym)))
        return out

    def _viscous_system(self, comp: str, gamma: float):
        key = (comp, gamma)
        if key not in self._helmholtz:
            cfg = self.cfg
            free = self.free_u if comp == "u" else self.free_v
            M = (sp.identity(int(free.sum()), format="csr") - gamma * cfg.nu * self._lap[comp]).tocsc()
            # boundary faces hold fixed values, so their contribution is constant
            known = np.zeros(free.shape)
            if comp == "u":
                self.apply_boundaries(known, np.zeros(self.free_v.shape))
            else:
                self.apply_boundaries(np.zeros(self.free_u.shape), known)
            lap_known = _laplacian(_pad_field(known, cfg, comp), cfg.dx, cfg.dy)[free]
            if M.shape[0] <= DIRECT_LIMIT:
                solve = spla.splu(M, permc_spec="MMD_AT_PLUS_A").solve
            else:
                inv_diag = sp.diags(1.0 / M.diagonal())

                def solve(b, _M=M, _P=inv_diag):
                    x, info = spla.cg(_M, b, x0=b, rtol=1e-12, atol=0.0, maxiter=500, M=_P)
                    if info != 0:
                        raise SolverDiverged(f"viscous solve did not converge (info={info})")
                    return x
            self._helmholtz[key] = (solve, gamma * cfg.nu * lap_known)
        return self._helmholtz[key]

    def _diffuse(self, comp: str, rhs: np.ndarray, gamma: float) -> np.ndarray:
        """Solve (I - gamma nu L) x = rhs on the free faces, in place.

        Non-free faces must already hold their boundary values.
        """
        free = self.free_u if comp == "u" else self.free_v
        solve, known = self._viscous_system(comp, gamma)
        rhs[free] = solve(rhs[free] + known)
        return rhs

    def step(self, state: FlowState) -> FlowState:
        cfg = self.cfg
        dt, rho = cfg.dt, cfg.rho
        u, v = state.u, state.v
        U, V = self._padded(u, v)
        cu, cv = self._samplers(U, V, 3)
        gpu, gpv = self.gradient(state.p)
        if state.u_prev is None:
            au, av = self._advected((cu, cv), U, V, dt)
            gamma = dt
            us = au - gamma * gpu / rho
            vs = av - gamma * gpv / rho
        else:
            Up, Vp = self._padded(state.u_prev, state.v_prev)
            pu, pv = self._samplers(Up, Vp, 3)
            # padding is affine with weights summing to one, so it commutes with extrapolation
            au, av = self._advected((cu, cv), 1.5 * U - 0.5 * Up, 1.5 * V - 0.5 * Vp, dt)
            bu, bv = self._advected((pu, pv), U, V, 2.0 * dt)
            gamma = 2.0 * dt / 3.0
            us = (4.0 * au - bu) / 3.0 - gamma * gpu / rho
            vs = (4.0 * av - bv) / 3.0 - gamma * gpv / rho
        coef = rho / gamma
        # only faces advanced by the momentum equation take the predictor
        us = np.where(self.free_u, us, u)
        vs = np.where(self.free_v, vs, v)
        self.apply_boundaries(us, vs)
        self._diffuse("u", us, gamma)
        self._diffuse("v", vs, gamma)
        phi = self.project(us, vs, coef)

        speed = max(float(np.max(np.abs(us))), float(np.max(np.abs(vs))))
        if not (np.isfinite(speed) and np.all(np.isfinite(phi))):
            raise SolverDiverged(f"non-finite field at t={state.t + dt:.4g}")
        if speed > cfg.divergence_speed * cfg.v_in:
            raise SolverDiverged(f"speed {speed:.3g} exceeds {cfg.divergence_speed}*v_in at t={state.t + dt:.4g}")

        return FlowState(us, vs, state.p + phi, state.mask, state.t + dt, state.nstep + 1,
                         u, v, state.momentum, self)

    # -------------------------------------------------------- forces

    def force_box(self) -> tuple[int, int, int, int]:
        """Cell index bounds [i0, i1) x [j0, j1) of the control volume."""
        cfg = self.cfg
        ii, jj = np.nonzero(self.mask)
        m = cfg.force_margin
        if ii.size == 0:
            xc, yc = cfg.obstacle_center
            ic, jc = int(xc / cfg.dx), int(yc / cfg.dy)
            ii, jj = np.array([ic]), np.array([jc])
        i0 = max(int(ii.min()) - m, 2)
        i1 = min(int(ii.max()) + 1 + m, cfg.nx - 2)
        j0 = max(int(jj.min()) - m, 2)
        j1 = min(int(jj.max()) + 1 + m, cfg.ny - 2)
        return i0, i1, j0, j1

    def box_momentum(self, u: np.ndarray, v: np.ndarray) -> tuple[float, float]:
        cfg = self.cfg
        i0, i1, j0, j1 = self.force_box()
        cell = cfg.dx * cfg.dy * cfg.rho
        uu = u[i0:i1 + 1, j0:j1]
        mx = uu[1:-1].sum() + 0.5 * (uu[0].sum() + uu[-1].sum())
        vv = v[i0:i1, j0:j1 + 1]
        my = vv[:, 1:-1].sum() + 0.5 * (vv[:, 0].sum() + vv[:, -1].sum())
        return float(mx * cell), float(my * cell)

    def surface_flux(self, u: np.ndarray, v: np.ndarray, p: np.ndarray) -> tuple[float, float]:
        """Outward momentum flux plus pressure minus viscous traction on the box."""
        cfg = self.cfg
        rho, mu, dx, dy = cfg.rho, cfg.mu, cfg.dx, cfg.dy
        i0, i1, j0, j1 = self.force_box()
        fx = fy = 0.0
        js = slice(j0, j1)
        for i, sign in ((i1, 1.0), (i0, -1.0)):
            uf = u[i, js]
            pf = 0.5 * (p[i - 1, js] + p[i, js])
            vc_r = 0.5 * (v[i, j0:j1] + v[i, j0 + 1:j1 + 1])
            vc_l = 0.5 * (v[i - 1, j0:j1] + v[i - 1, j0 + 1:j1 + 1])
            vf = 0.5 * (vc_r + vc_l)
            dudx = (u[i + 1, js] - u[i - 1, js]) / (2 * dx)
            dudy = (u[i, j0 + 1:j1 + 1] - u[i, j0 - 1:j1 - 1]) / (2 * dy)
            dvdx = (vc_r - vc_l) / dx
            fx += sign * dy * np.sum(rho * uf * uf + pf - 2.0 * mu * dudx)
            fy += sign * dy * np.sum(rho * uf * vf - mu * (dudy + dvdx))
        is_ = slice(i0, i1)
        for j, sign in ((j1, 1.0), (j0, -1.0)):
            vf = v[is_, j]
            pf = 0.5 * (p[is_, j - 1] + p[is_, j])
            uc_t = 0.5 * (u[i0:i1, j] + u[i0 + 1:i1 + 1, j])
            uc_b = 0.5 * (u[i0:i1, j - 1] + u[i0 + 1:i1 + 1, j - 1])
            uf = 0.5 * (uc_t + uc_b)
            dvdy = (v[is_, j + 1] - v[is_, j - 1]) / (2 * dy)
            dvdx = (v[i0 + 1:i1 + 1, j] - v[i0 - 1:i1 - 1, j]) / (2 * dx)
            dudy = (uc_t - uc_b) / dy
            fx += sign * dx * np.sum(rho * uf * vf - mu * (dudy + dvdx))
            fy += sign * dx * np.sum(rho * vf * vf + pf - 2.0 * mu * dvdy)
        return float(fx), float(fy)

    def ref_length(self) -> float:
        """Projected height of the obstacle, taken as the coefficient reference length."""
        return getattr(self, "_ref_length", 2.0 * self.cfg.r_cyl)

    def forces(self, state: FlowState) -> ForceSample:
        cfg = self.cfg
        m_now = self.box_momentum(state.u, state.v)
        hist = state.momentum
        hist.append(m_now)
        dt = cfg.dt
        if len(hist) >= 3:
            dmx = (3 * hist[-1][0] - 4 * hist[-2][0] + hist[-3][0]) / (2 * dt)
            dmy = (3 * hist[-1][1] - 4 * hist[-2][1] + hist[-3][1]) / (2 * dt)
        elif len(hist) == 2:
            dmx = (hist[-1][0] - hist[-2][0]) / dt
            dmy = (hist[-1][1] - hist[-2][1]) / dt
        else:
            dmx = dmy = 0.0
        sx, sy = self.surface_flux(state.u, state.v, state.p)
        fd = -dmx - sx
        fl = -dmy - sy
        q = 0.5 * cfg.rho * cfg.v_in**2 * self.ref_length()
        return ForceSample(state.t, fd, fl, fd / q, fl / q)


def _solver_for(state: FlowState, cfg: FlowConfig) -> FlowSolver:
    s = state._solver
    if s is None or s.cfg != cfg or s.mask is not state.mask:
        s = FlowSolver(cfg, state.mask)
        state._solver = s
    return s


def step(state: FlowState, cfg: FlowConfig) -> FlowState:
    return _solver_for(state, cfg).step(state)


def compute_forces(state: FlowState, cfg: FlowConfig) -> ForceSample:
    """Force on the obstacle from a momentum balance over a box around it.

    Positive drag points along +x and positive lift along +y. Call once per
    step, in order: the box momentum history kept on the state supplies the
    time-derivative term.
    """
    return _solver_for(state, cfg).forces(state)


def make_solver(poly: Optional[Polygon], cfg: FlowConfig) -> FlowSolver:
    mask = rasterize(poly, cfg) if poly is not None else None
    solver = FlowSolver(cfg, mask)
    if poly is not None:
        _, ymin, _, ymax = poly.bounds
        solver._ref_length = ymax - ymin
    return solver


def run_flow(poly: Polygon, cfg: FlowConfig, snapshot_every: int = 0,
             on_snapshot: Optional[Callable[[FlowState], None]] = None) -> FlowResult:
    """Simulate from impulsive start to t_max and average forces over the second half.

    Numerical failures come back as ``failed=True`` with the samples gathered
    so far; they never raise. With ``snapshot_every > 0`` the callback sees
    the state after every that many steps.
    """
    samples: list[ForceSample] = []
    ref = 2.0 * cfg.r_cyl
    try:
        solver = make_solver(poly, cfg)
        ref = solver.ref_length()
        state = solver.initial_state()
        t_end = cfg.t_end
        n_steps = int(math.ceil(t_end / cfg.dt - 1e-9))
        solver.forces(state)
        for k in range(1, n_steps + 1):
            state = solver.step(state)
            samples.append(solver.forces(state))
            if snapshot_every > 0 and on_snapshot is not None and k % snapshot_every == 0:
                on_snapshot(state)
    except (SolverDiverged, ObstacleOutOfDomain, FloatingPointError, RuntimeError, ValueError) as exc:
        log.debug("flow failed: %s", exc)
        return FlowResult(math.nan, math.nan, math.nan, samples, True, str(exc), ref)
    return summarize(samples, ref)


def summarize(samples: list, ref_length: float = 2.0) -> FlowResult:
    if not samples:
        return FlowResult(math.nan, math.nan, math.nan, samples, True, "no samples", ref_length)
    t_end = samples[-1].t
    w = [s for s in samples if s.t >= 0.5 * t_end]
    cd = np.array([s.cd for s in w])
    cl = np.array([s.cl for s in w])
    ratio = cl / np.abs(cd)
    res = FlowResult(float(cd.mean()), float(cl.mean()), float(ratio.mean()), samples,
                     False, "", ref_length)
    if not all(np.isfinite([res.mean_cd, res.mean_cl, res.mean_ratio])):
        res.failed = True
        res.failure_reason = "non-finite force average"
    return res


# ---------------------------------------------------------------- export

def write_forces_csv(samples: list, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "fd", "fl", "cd", "cl"])
        for s in samples:
            w.writerow([repr(s.t), repr(s.fd), repr(s.fl), repr(s.cd), repr(s.cl)])
    return path


def cell_centered_u(state: FlowState) -> np.ndarray:
    return 0.5 * (state.u[:-1] + state.u[1:])


def write_ppm(field: np.ndarray, path: str | Path, lo: float = -1.0, hi: float = 1.0,
              mask: Optional[np.ndarray] = None) -> Path:
    """Plain (P3) PPM of a cell field, blue-white-red over [lo, hi], y up."""
    path = Path(path)
    f = np.clip((np.asarray(field, dtype=float) - lo) / (hi - lo), 0.0, 1.0)
    # rows are y from top to bottom
    img = f.T[::-1]
    r = np.where(img < 0.5, 2 * img, 1.0)
    g = np.where(img < 0.5, 2 * img, 2 * (1 - img))
    b = np.where(img < 0.5, 1.0, 2 * (1 - img))
    rgb = (np.stack([r, g, b], axis=-1) * 255).round().astype(int)
    if mask is not None:
        rgb[mask.T[::-1]] = 0
    h, w = img.shape
    with path.open("w") as fh:
        fh.write(f"P3\n{w} {h}\n255\n")
        for row in rgb:
            fh.write(" ".join(str(c) for c in row.ravel()) + "\n")
    return path
