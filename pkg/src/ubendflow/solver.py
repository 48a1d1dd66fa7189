"""Steady incompressible 2D velocity fields on a masked Cartesian grid.

Pressure-velocity coupling follows the classic predictor / pressure-correction
/ velocity-correction loop on a staggered (MAC) arrangement: an explicit
momentum predictor with a constant effective viscosity, an exact sparse solve
for the pressure correction (prefactorized once per geometry), under-relaxed
corrections, and residuals normalized by their first-iteration values.

The turbulence closure of the physical problem is replaced by the constant
effective viscosity; the nominal kinematic viscosity stays in the config as a
record of the physical regime.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import ChannelBoundary, points_in_domain


class SolverError(RuntimeError):
    """Non-convergence or an invalid solver setup."""

    def __init__(self, message, residual_history=None):
        super().__init__(message)
        self.residual_history = residual_history


@dataclass(frozen=True)
class SolverConfig:
    inlet_velocity: float = 8.8          # m/s
    kinematic_viscosity: float = 1.5e-5  # m^2/s, nominal physical value
    effective_viscosity: float = 3.3e-3  # m^2/s, ~Re_eff 200 at defaults
    residual_tolerance: float = 1.0e-4
    max_iterations: int = 30000
    relaxation_u: float = 1.0
    relaxation_p: float = 1.0
    grid_resolution: int = 12            # cells per channel width
    reference_width: float = 0.075       # m, sets the cell size
    cfl: float = 0.5

    def validate(self) -> None:
        if self.inlet_velocity < 0.0:
            raise SolverError("inlet_velocity must be non-negative")
        for name in ("kinematic_viscosity", "effective_viscosity",
                     "reference_width", "cfl"):
            if getattr(self, name) <= 0.0:
                raise SolverError(f"{name} must be positive")
        if not 0.0 < self.residual_tolerance < 1.0:
            raise SolverError("residual_tolerance must lie in (0, 1)")
        if self.max_iterations < 1 or self.grid_resolution < 4:
            raise SolverError("max_iterations/grid_resolution too small")
        for name in ("relaxation_u", "relaxation_p"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise SolverError(f"{name} must lie in (0, 1]")

    @property
    def spacing(self) -> float:
        return self.reference_width / self.grid_resolution

    def nominal_reynolds(self) -> float:
        return self.inlet_velocity * self.reference_width / self.kinematic_viscosity

    def effective_reynolds(self) -> float:
        return self.inlet_velocity * self.reference_width / self.effective_viscosity


@dataclass
class FlowField:
    """Solver-native staggered fields. Arrays are indexed [ix, iy]."""

    u: np.ndarray            # (nx+1, ny) face-normal x velocity
    v: np.ndarray            # (nx, ny+1) face-normal y velocity
    p: np.ndarray            # (nx, ny) gauge pressure (kinematic units)
    fluid_mask: np.ndarray   # (nx, ny) bool
    origin: tuple[float, float]
    spacing: float
    residual_history: np.ndarray  # (k, 2): continuity, momentum
    converged: bool
    iterations: int
    inlet_flux: float

    def cell_centered_velocity(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-centred (vx, vy) as (ny, nx) arrays, zero on solid cells."""
        uc = 0.5 * (self.u[:-1, :] + self.u[1:, :]) * self.fluid_mask
        vc = 0.5 * (self.v[:, :-1] + self.v[:, 1:]) * self.fluid_mask
        return uc.T.copy(), vc.T.copy()


def _segment_of(boundary: ChannelBoundary, which: str) -> tuple[np.ndarray, np.ndarray]:
    i, j = getattr(boundary, which)
    return boundary.points[i], boundary.points[j]


def _open_faces(boundary, which, fluid, origin, h):
    """Grid faces realizing an axis-aligned open (inlet/outlet) segment.

    Returns (axis, faces, inward) with axis 'u' or 'v', faces a list of
    (i, j, cell_i, cell_j) face indices plus the adjacent fluid cell, and
    inward = +1/-1, the into-domain direction along the face-normal axis.
    """
    a, b = _segment_of(boundary, which)
    nx, ny = fluid.shape
    tol = 1e-9
    faces = []
    if abs(a[1] - b[1]) <= tol:  # horizontal segment -> v faces
        y_seg = 0.5 * (a[1] + b[1])
        jf = int(round((y_seg - origin[1]) / h))
        xlo, xhi = min(a[0], b[0]), max(a[0], b[0])
        mid = (0.5 * (xlo + xhi), y_seg + 0.5 * h)
        inward = 1 if point_inside(boundary, mid) else -1
        for i in range(nx):
            xc = origin[0] + (i + 0.5) * h
            if not xlo < xc < xhi:
                continue
            cj = jf if inward == 1 else jf - 1
            if 0 <= cj < ny and fluid[i, cj]:
                faces.append((i, jf, i, cj))
        return "v", faces, inward
    if abs(a[0] - b[0]) <= tol:  # vertical segment -> u faces
        x_seg = 0.5 * (a[0] + b[0])
        if_ = int(round((x_seg - origin[0]) / h))
        ylo, yhi = min(a[1], b[1]), max(a[1], b[1])
        mid = (x_seg + 0.5 * h, 0.5 * (ylo + yhi))
        inward = 1 if point_inside(boundary, mid) else -1
        for j in range(ny):
            yc = origin[1] + (j + 0.5) * h
            if not ylo < yc < yhi:
                continue
            ci = if_ if inward == 1 else if_ - 1
            if 0 <= ci < nx and fluid[ci, j]:
                faces.append((if_, j, ci, j))
        return "u", faces, inward
    raise SolverError(f"{which} segment is not axis-aligned")


def point_inside(boundary: ChannelBoundary, p) -> bool:
    return bool(points_in_domain(boundary, np.asarray(p, dtype=float)[None, :])[0])


def _build_poisson(fluid, outlet_axis, outlet_faces, outlet_inward):
    """Laplacian over fluid cells: Neumann at walls/inlet, ghost-mirror
    Dirichlet (zero face pressure) across outlet faces."""
    nx, ny = fluid.shape
    index = -np.ones((nx, ny), dtype=int)
    cells = np.argwhere(fluid)
    for k, (i, j) in enumerate(cells):
        index[i, j] = k
    n = len(cells)
    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    for k, (i, j) in enumerate(cells):
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ni, nj = i + di, j + dj
            if 0 <= ni < nx and 0 <= nj < ny and fluid[ni, nj]:
                rows.append(k)
                cols.append(index[ni, nj])
                vals.append(-1.0)
                diag[k] += 1.0
    for (_, _, ci, cj) in outlet_faces:
        diag[index[ci, cj]] += 2.0
    if not outlet_faces:
        diag[0] += 1.0  # pin the nullspace when there is no outlet
    rows.extend(range(n))
    cols.extend(range(n))
    vals.extend(diag.tolist())
    mat = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))
    return index, spla.splu(mat)


def solve_flow(boundary: ChannelBoundary, config: SolverConfig) -> FlowField:
    """Iterate to the steady velocity/pressure field for one geometry."""
    config.validate()
    h = config.spacing
    xmin, ymin, xmax, ymax = boundary.bounding_box
    nx = int(np.ceil((xmax - xmin) / h)) + 2
    ny = int(np.ceil((ymax - ymin) / h)) + 2
    origin = (xmin - h, ymin - h)

    xs = origin[0] + (np.arange(nx) + 0.5) * h
    ys = origin[1] + (np.arange(ny) + 0.5) * h
    xg, yg = np.meshgrid(xs, ys, indexing="ij")
    fluid = points_in_domain(
        boundary, np.column_stack([xg.ravel(), yg.ravel()])).reshape(nx, ny)
    if not fluid.any():
        raise SolverError("no fluid cells inside the boundary")

    u_act = np.zeros((nx + 1, ny), dtype=bool)
    u_act[1:nx, :] = fluid[:-1, :] & fluid[1:, :]
    v_act = np.zeros((nx, ny + 1), dtype=bool)
    v_act[:, 1:ny] = fluid[:, :-1] & fluid[:, 1:]

    in_axis, in_faces, in_dir = _open_faces(boundary, "inlet", fluid, origin, h)
    out_axis, out_faces, out_dir = _open_faces(boundary, "outlet", fluid, origin, h)
    if not in_faces or not out_faces:
        raise SolverError("inlet or outlet has no grid faces")

    # faces carrying meaningful values; tangential neighbours outside this set
    # are mirrored so the no-slip zero sits on the wall, not half a cell inside
    u_valid = u_act.copy()
    v_valid = v_act.copy()
    for axis, faces in ((in_axis, in_faces), (out_axis, out_faces)):
        arr = u_valid if axis == "u" else v_valid
        for (i, j, _, _) in faces:
            arr[i, j] = True
    u_valid_jm = np.zeros_like(u_valid)
    u_valid_jm[:, 1:] = u_valid[:, :-1]
    u_valid_jp = np.zeros_like(u_valid)
    u_valid_jp[:, :-1] = u_valid[:, 1:]
    v_valid_im = np.zeros_like(v_valid)
    v_valid_im[1:, :] = v_valid[:-1, :]
    v_valid_ip = np.zeros_like(v_valid)
    v_valid_ip[:-1, :] = v_valid[1:, :]

    index, lu = _build_poisson(fluid, out_axis, out_faces, out_dir)

    u = np.zeros((nx + 1, ny))
    v = np.zeros((nx, ny + 1))
    p = np.zeros((nx, ny))

    def set_inlet(uu, vv):
        arr = uu if in_axis == "u" else vv
        for (i, j, _, _) in in_faces:
            arr[i, j] = in_dir * config.inlet_velocity

    def copy_outlet(uu, vv):
        arr = uu if out_axis == "u" else vv
        for (i, j, _, _) in out_faces:
            if out_axis == "v":
                arr[i, j] = arr[i, j + out_dir]
            else:
                arr[i, j] = arr[i + out_dir, j]

    set_inlet(u, v)
    inlet_flux = config.inlet_velocity * h * len(in_faces)

    nu = config.effective_viscosity
    if config.inlet_velocity > 0.0:
        dt = config.cfl * min(h / (3.0 * config.inlet_velocity),
                              h * h / (4.0 * nu))
    else:
        dt = config.cfl * h * h / (4.0 * nu)

    out_cells = tuple(np.array(k) for k in
                      zip(*[(ci, cj) for (_, _, ci, cj) in out_faces]))
    out_face_idx = tuple(np.array(k) for k in
                         zip(*[(i, j) for (i, j, _, _) in out_faces]))
    phi_full = np.zeros((nx, ny))
    history = []
    cont0 = mom0 = None
    converged = False
    it = 0

    for it in range(1, config.max_iterations + 1):
        # --- momentum predictor -------------------------------------------
        up = np.roll(u, -1, axis=0)
        um = np.roll(u, 1, axis=0)
        ujp = np.where(u_valid_jp, np.roll(u, -1, axis=1), -u)
        ujm = np.where(u_valid_jm, np.roll(u, 1, axis=1), -u)
        va = np.zeros_like(u)
        va[1:nx, :] = 0.25 * (v[:-1, :-1] + v[:-1, 1:] + v[1:, :-1] + v[1:, 1:])
        conv_u = (u * np.where(u > 0.0, (u - um), (up - u))
                  + va * np.where(va > 0.0, (u - ujm), (ujp - u))) / h
        lap_u = (up + um + ujp + ujm - 4.0 * u) / (h * h)
        gpx = np.zeros_like(u)
        gpx[1:nx, :] = (p[1:, :] - p[:-1, :]) / h
        u_star = u.copy()
        u_star[u_act] = (u + config.relaxation_u * dt
                         * (-conv_u - gpx + nu * lap_u))[u_act]

        vp = np.roll(v, -1, axis=1)
        vm = np.roll(v, 1, axis=1)
        vip = np.where(v_valid_ip, np.roll(v, -1, axis=0), -v)
        vim = np.where(v_valid_im, np.roll(v, 1, axis=0), -v)
        ua = np.zeros_like(v)
        ua[:, 1:ny] = 0.25 * (u[:-1, :-1] + u[:-1, 1:] + u[1:, :-1] + u[1:, 1:])
        conv_v = (ua * np.where(ua > 0.0, (v - vim), (vip - v))
                  + v * np.where(v > 0.0, (v - vm), (vp - v))) / h
        lap_v = (vp + vm + vip + vim - 4.0 * v) / (h * h)
        gpy = np.zeros_like(v)
        gpy[:, 1:ny] = (p[:, 1:] - p[:, :-1]) / h
        v_star = v.copy()
        v_star[v_act] = (v + config.relaxation_u * dt
                         * (-conv_v - gpy + nu * lap_v))[v_act]

        set_inlet(u_star, v_star)
        copy_outlet(u_star, v_star)

        # --- pressure correction ------------------------------------------
        div = ((u_star[1:, :] - u_star[:-1, :])
               + (v_star[:, 1:] - v_star[:, :-1])) / h
        div[~fluid] = 0.0
        rhs = -(h * h / dt) * div[fluid]
        phi = lu.solve(rhs)
        phi_full.fill(0.0)
        phi_full[fluid] = phi

        # --- velocity and pressure corrections ----------------------------
        u_new = u_star.copy()
        dphix = (phi_full[1:, :] - phi_full[:-1, :]) / h
        u_new[1:nx, :][u_act[1:nx, :]] -= dt * dphix[u_act[1:nx, :]]
        v_new = v_star.copy()
        dphiy = (phi_full[:, 1:] - phi_full[:, :-1]) / h
        v_new[:, 1:ny][v_act[:, 1:ny]] -= dt * dphiy[v_act[:, 1:ny]]
        # outlet faces: ghost mirror keeps the face pressure at zero
        phi_out = phi_full[out_cells]
        corr = -out_dir * (2.0 * dt / h) * phi_out
        if out_axis == "v":
            v_new[out_face_idx] = v_star[out_face_idx] - corr
        else:
            u_new[out_face_idx] = u_star[out_face_idx] - corr
        p[fluid] += config.relaxation_p * phi

        # --- residuals -----------------------------------------------------
        cont = float(np.abs(div[fluid]).sum() * h * h)
        mom = max(float(np.abs(u_new - u)[u_act].max(initial=0.0)),
                  float(np.abs(v_new - v)[v_act].max(initial=0.0))) / dt
        history.append((cont, mom))
        u, v = u_new, v_new
        if cont0 is None:
            cont0, mom0 = cont, mom
            if cont0 == 0.0 and mom0 == 0.0:
                converged = True
                break
        rc = cont / cont0 if cont0 > 0.0 else 0.0
        rm = mom / mom0 if mom0 > 0.0 else 0.0
        if rc < config.residual_tolerance and rm < config.residual_tolerance:
            converged = True
            break

    hist = np.array(history).reshape(-1, 2)
    if not converged:
        raise SolverError(
            f"no convergence after {it} iterations "
            f"(last residuals {hist[-1].tolist()})", residual_history=hist)
    return FlowField(u=u, v=v, p=p, fluid_mask=fluid, origin=origin, spacing=h,
                     residual_history=hist, converged=True, iterations=it,
                     inlet_flux=inlet_flux)


def flux_horizontal(flow: FlowField, y: float, x_range=None) -> float:
    """Volumetric flux (per unit depth) through the horizontal line at ``y``."""
    h = flow.spacing
    jf = int(round((y - flow.origin[1]) / h))
    if not 0 <= jf < flow.v.shape[1]:
        raise SolverError(f"station y={y} outside the grid")
    total = 0.0
    for i in range(flow.v.shape[0]):
        xc = flow.origin[0] + (i + 0.5) * h
        if x_range is not None and not x_range[0] <= xc <= x_range[1]:
            continue
        total += flow.v[i, jf] * h
    return total


def flux_vertical(flow: FlowField, x: float, y_range=None) -> float:
    h = flow.spacing
    if_ = int(round((x - flow.origin[0]) / h))
    if not 0 <= if_ < flow.u.shape[0]:
        raise SolverError(f"station x={x} outside the grid")
    total = 0.0
    for j in range(flow.u.shape[1]):
        yc = flow.origin[1] + (j + 0.5) * h
        if y_range is not None and not y_range[0] <= yc <= y_range[1]:
            continue
        total += flow.u[if_, j] * h
    return total


def _profile(flow: FlowField, y: float, x_range):
    h = flow.spacing
    jf = int(round((y - flow.origin[1]) / h))
    if not 1 <= jf < flow.v.shape[1] - 1:
        raise SolverError(f"station y={y} outside the grid")
    cols = []
    vals = []
    for i in range(flow.v.shape[0]):
        xc = flow.origin[0] + (i + 0.5) * h
        if x_range is not None and not x_range[0] <= xc <= x_range[1]:
            continue
        if flow.fluid_mask[i, jf - 1] and flow.fluid_mask[i, jf]:
            cols.append(i)
            vals.append(flow.v[i, jf])
    return cols, np.array(vals)


def fully_developed_check(flow: FlowField, station_a: float, station_b: float,
                          x_range=None) -> float:
    """Max relative difference of the streamwise profiles at two y stations."""
    cols_a, prof_a = _profile(flow, station_a, x_range)
    cols_b, prof_b = _profile(flow, station_b, x_range)
    common = sorted(set(cols_a) & set(cols_b))
    if not common:
        raise SolverError("stations share no fluid columns")
    pa = np.array([prof_a[cols_a.index(c)] for c in common])
    pb = np.array([prof_b[cols_b.index(c)] for c in common])
    scale = float(np.abs(pa).max())
    if scale == 0.0:
        return 0.0 if np.abs(pb).max() == 0.0 else np.inf
    return float(np.abs(pa - pb).max() / scale)


def dump_csv(flow: FlowField, prefix) -> None:
    """u/v/p grids as CSV for inspection (cell-centred velocity)."""
    uc, vc = flow.cell_centered_velocity()
    for name, arr in (("u", uc), ("v", vc), ("p", flow.p.T)):
        np.savetxt(f"{prefix}_{name}.csv", arr, delimiter=",", fmt="%.9g")
