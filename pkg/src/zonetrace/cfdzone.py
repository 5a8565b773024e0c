"""Grid-resolved treatment of the source zone, coupled to the network.

The marked zone's floor plan is discretized on an nx x ny structured grid.
Air moves on the grid as potential-flow-like pressure-driven advection:
cell pressures solve a discrete continuity system whose boundary terms are
the opening flows f_p = c_Lp * (P_drive - P_p), and face mass flows follow
the cell pressure differences. Contaminant obeys steady or implicit-Euler
advection-diffusion with upwind faces, a diffusive exchange across open
boundaries, and the per-path doorway exchange shared with the network
model.

Coupling to the multizone solution: the network Newton solve is the
authority for zone pressures and macroscopic path flows F_M. Each opening
apportions a linearized coefficient c_L,ic = c * n * max(|dP|, floor)^(n-1)
uniformly over its boundary cells, and a per-path driving-pressure
correction delta_ic (added to the multizone-side total pressure) is relaxed
with damping 0.5 until the grid-side totals F_C match F_M within
coupling_tol. At the fixed point sum_p f_p = F_C = F_M, so both models
carry identical air flows through the resolved zone's openings.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .errors import ConfigError, CouplingDiverged, NonConvergence
from .netflow import (
    AMBIENT_ID,
    RHO_AIR,
    BuildingNetwork,
    PressureSolution,
    SourceScenario,
    TransientTrace,
    Zone,
    solve_pressures,
)


@dataclasses.dataclass(frozen=True)
class CfdConfig:
    """Numerical knobs for the resolved zone.

    diffusivity is the dynamic diffusion coefficient Gamma in kg/(m s); when
    None it is derived so the diffusive time across the zone is
    diffusive_time_scale_min minutes. grid_conductance ("auto") sets the
    face conductance to 10x the largest opening cell coefficient, which
    keeps in-zone pressure drops small relative to opening drops.
    """

    nx: int = 20
    ny: int = 20
    diffusivity: Optional[float] = None
    diffusive_time_scale_min: float = 5.0
    grid_conductance: Optional[float] = None
    coupling_tol: float = 1e-6       # kg/s on sum |F_M - F_C|
    max_outer: int = 50
    damping: float = 0.5
    linearization_floor: float = 0.01  # Pa

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise ConfigError("grid must be at least 8 x 8")
        if not 0.0 < self.damping <= 1.0:
            raise ConfigError("damping must be in (0, 1]")

    def gamma_for(self, zone: Zone) -> float:
        if self.diffusivity is not None:
            return self.diffusivity
        length = math.sqrt(zone.width * zone.depth)
        d_eff = length ** 2 / (self.diffusive_time_scale_min * 60.0)
        return RHO_AIR * d_eff


@dataclasses.dataclass
class PathCoupling:
    """One opening of the resolved zone as the grid sees it."""

    path_index: int
    other_end: int            # zone id on the far side (0 = outdoors)
    cells: np.ndarray         # flattened cell indices along the opening
    cell_coeff: float         # c_Lp, kg/s/Pa per boundary cell
    macro_coeff: float        # c_L,ic, linearized path coefficient
    drive_base: float         # total pressure on the far side, Pa
    macro_flow: float         # F_M, kg/s, positive into the resolved zone
    downwind_pressure: float  # total pressure on the downwind side, Pa
    open_area: float          # m^2 of the opening
    half_dist: float          # m, cell center to wall
    exchange: float           # kg/s symmetric doorway exchange
    offset: float = 0.0       # delta_ic, Pa, tuned by couple()

    @property
    def drive(self) -> float:
        return self.drive_base + self.offset


@dataclasses.dataclass
class CfdGrid:
    """Grid geometry plus the solved air state of the resolved zone."""

    zone: Zone
    nx: int
    ny: int
    diffusivity: float
    conductance: float
    cell_pressures: Optional[np.ndarray] = None     # (ny*nx,)
    face_flow_x: Optional[np.ndarray] = None        # (ny, nx-1), kg/s, +x
    face_flow_y: Optional[np.ndarray] = None        # (ny-1, nx), kg/s, +y

    @property
    def dx(self) -> float:
        return self.zone.width / self.nx

    @property
    def dy(self) -> float:
        return self.zone.depth / self.ny

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_mass(self) -> float:
        return RHO_AIR * self.dx * self.dy * self.zone.height

    def cell_index(self, x: float, y: float) -> int:
        """Flattened index of the cell containing local point (x, y)."""
        if not (0.0 <= x <= self.zone.width and 0.0 <= y <= self.zone.depth):
            raise ConfigError(f"point ({x}, {y}) outside zone {self.zone.id}")
        i = min(int(x / self.dx), self.nx - 1)
        j = min(int(y / self.dy), self.ny - 1)
        return j * self.nx + i

    def face_velocities(self) -> Tuple[np.ndarray, np.ndarray]:
        """Face-normal air velocities (m/s) matching the face flows."""
        ax = self.dy * self.zone.height
        ay = self.dx * self.zone.height
        return self.face_flow_x / (RHO_AIR * ax), self.face_flow_y / (RHO_AIR * ay)


def _wall_cells(grid: CfdGrid, wall: str, center: float, width: float) -> np.ndarray:
    """Flattened indices of boundary cells covered by an opening."""
    if wall in ("N", "S"):
        count, step, length = grid.nx, grid.dx, grid.zone.width
    else:
        count, step, length = grid.ny, grid.dy, grid.zone.depth
    if not 0.0 <= center <= length:
        raise ConfigError(
            f"opening center {center} beyond wall length {length} "
            f"(zone {grid.zone.id}, wall {wall})"
        )
    lo, hi = center - width / 2.0, center + width / 2.0
    centers = (np.arange(count) + 0.5) * step
    picked = np.nonzero((centers >= lo) & (centers <= hi))[0]
    if picked.size == 0:
        picked = np.array([int(np.argmin(np.abs(centers - center)))])
    if wall == "S":
        return picked                                   # j = 0 row
    if wall == "N":
        return (grid.ny - 1) * grid.nx + picked
    if wall == "W":
        return picked * grid.nx                         # i = 0 column
    return picked * grid.nx + (grid.nx - 1)             # wall == "E"


def build_couplings(net: BuildingNetwork, sol: PressureSolution,
                    grid: CfdGrid, config: CfdConfig) -> List[PathCoupling]:
    """Linearize every path touching the resolved zone onto the grid."""
    zone_id = grid.zone.id
    couplings = []
    for k, path in enumerate(net.paths):
        if zone_id not in (path.from_zone, path.to_zone):
            continue
        geom = path.geometry_for(zone_id)
        if geom is None:
            raise ConfigError(
                f"path {path.name or k} touches zone {zone_id} but has no "
                "wall geometry on that side"
            )
        other = path.to_zone if path.from_zone == zone_id else path.from_zone
        flow_in = sol.path_flows[k] if path.to_zone == zone_id else -sol.path_flows[k]
        p_other = sol.total_pressure(other, k)
        p_zone = sol.pressures[zone_id]
        dp = p_other - p_zone
        dp_mag = max(abs(dp), config.linearization_floor)
        macro_coeff = path.flow_coeff * path.flow_exp * dp_mag ** (path.flow_exp - 1.0)
        cells = _wall_cells(grid, geom.wall, geom.center, path.width)
        if geom.wall in ("N", "S"):
            half = grid.dy / 2.0
        else:
            half = grid.dx / 2.0
        downwind = p_zone if flow_in >= 0 else p_other
        couplings.append(PathCoupling(
            path_index=k,
            other_end=other,
            cells=cells,
            cell_coeff=macro_coeff / len(cells),
            macro_coeff=macro_coeff,
            drive_base=p_other,
            macro_flow=flow_in,
            downwind_pressure=downwind,
            open_area=path.area,
            half_dist=half,
            exchange=path.exchange,
        ))
    if not couplings:
        raise ConfigError(f"resolved zone {zone_id} has no openings")
    return couplings


def _pressure_system(grid: CfdGrid, couplings: List[PathCoupling]):
    """SPD continuity system for cell pressures (matrix only; RHS varies)."""
    nx, ny, n = grid.nx, grid.ny, grid.n_cells
    k0 = grid.conductance
    kx = k0 * grid.dy / grid.dx
    ky = k0 * grid.dx / grid.dy
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    for j in range(ny):
        for i in range(nx):
            p = j * nx + i
            if i + 1 < nx:
                q = p + 1
                add(p, p, kx), add(q, q, kx), add(p, q, -kx), add(q, p, -kx)
            if j + 1 < ny:
                q = p + nx
                add(p, p, ky), add(q, q, ky), add(p, q, -ky), add(q, p, -ky)
    for cp in couplings:
        for cell in cp.cells:
            add(int(cell), int(cell), cp.cell_coeff)
    return scipy.sparse.csc_matrix(
        (vals, (rows, cols)), shape=(n, n))


def _opening_flows(grid: CfdGrid, couplings: List[PathCoupling],
                   pressures: np.ndarray) -> List[np.ndarray]:
    """Per-cell air flows into the grid for every opening, kg/s."""
    return [cp.cell_coeff * (cp.drive - pressures[cp.cells]) for cp in couplings]


def couple(net: BuildingNetwork, config: Optional[CfdConfig] = None,
           sol: Optional[PressureSolution] = None,
           ) -> Tuple[CfdGrid, List[PathCoupling], List[float]]:
    """Match grid opening flows to the multizone solution.

    Returns the grid (with solved cell pressures and face flows), the
    couplings (with converged offsets), and the mismatch history in kg/s.
    Raises CouplingDiverged when max_outer iterations cannot reach
    coupling_tol.
    """
    if net.cfd_zone is None:
        raise ConfigError("network has no zone marked for grid resolution")
    config = config or CfdConfig()
    sol = sol or solve_pressures(net)
    zone = net.zone(net.cfd_zone)
    if zone.air_source != 0.0:
        raise ConfigError(
            "grid-resolved zone cannot carry a direct air source; the grid "
            "continuity system balances opening flows only")
    grid = CfdGrid(zone=zone, nx=config.nx, ny=config.ny,
                   diffusivity=config.gamma_for(zone), conductance=0.0)
    couplings = build_couplings(net, sol, grid, config)
    k0 = config.grid_conductance
    if k0 is None:
        k0 = 10.0 * max(cp.cell_coeff for cp in couplings)
    grid.conductance = k0

    matrix = _pressure_system(grid, couplings)
    lu = scipy.sparse.linalg.splu(matrix)
    rhs = np.zeros(grid.n_cells)
    history: List[float] = []
    pressures = np.zeros(grid.n_cells)
    for iteration in range(config.max_outer + 1):
        rhs[:] = 0.0
        for cp in couplings:
            rhs[cp.cells] += cp.cell_coeff * cp.drive
        pressures = lu.solve(rhs)
        flows = _opening_flows(grid, couplings, pressures)
        mismatch = sum(abs(cp.macro_flow - f.sum())
                       for cp, f in zip(couplings, flows))
        history.append(float(mismatch))
        if mismatch <= config.coupling_tol:
            break
        if iteration == config.max_outer:
            raise CouplingDiverged(
                f"coupling stalled at mismatch {mismatch:.3e} kg/s "
                f"after {iteration} iterations",
                iteration=iteration, mismatch=mismatch)
        for cp, f in zip(couplings, flows):
            cp.offset += config.damping * (cp.macro_flow - f.sum()) / cp.macro_coeff

    grid.cell_pressures = pressures
    nx, ny = grid.nx, grid.ny
    pr = pressures.reshape(ny, nx)
    kx = k0 * grid.dy / grid.dx
    ky = k0 * grid.dx / grid.dy
    grid.face_flow_x = kx * (pr[:, :-1] - pr[:, 1:])
    grid.face_flow_y = ky * (pr[:-1, :] - pr[1:, :])
    return grid, couplings, history


def _grid_operator(grid: CfdGrid, couplings: List[PathCoupling]):
    """Advection-diffusion entries for the grid cells.

    Returns (rows, cols, vals) for the cell-cell block plus per-coupling
    per-cell inflow/outflow/contact coefficients used to tie the grid to
    zone concentrations:
      inflow[cp][c]  multiplies the far-side concentration (gain),
      outflow[cp][c] multiplies the cell concentration (loss),
      contact[cp][c] is the symmetric diffusive + doorway exchange part.
    All in kg/s; advective pieces are upwind.
    """
    nx, ny = grid.nx, grid.ny
    gam = grid.diffusivity
    h = grid.zone.height
    dif_x = gam * grid.dy * h / grid.dx
    dif_y = gam * grid.dx * h / grid.dy
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    fx, fy = grid.face_flow_x, grid.face_flow_y
    for j in range(ny):
        for i in range(nx):
            p = j * nx + i
            if i + 1 < nx:
                q = p + 1
                g = fx[j, i]
                donor, receiver = (p, q) if g >= 0 else (q, p)
                add(donor, donor, abs(g))
                add(receiver, donor, -abs(g))
                add(p, p, dif_x), add(q, q, dif_x)
                add(p, q, -dif_x), add(q, p, -dif_x)
            if j + 1 < ny:
                q = p + nx
                g = fy[j, i]
                donor, receiver = (p, q) if g >= 0 else (q, p)
                add(donor, donor, abs(g))
                add(receiver, donor, -abs(g))
                add(p, p, dif_y), add(q, q, dif_y)
                add(p, q, -dif_y), add(q, p, -dif_y)

    inflow, outflow, contact = [], [], []
    for cp, f in zip(couplings, _opening_flows(grid, couplings,
                                               grid.cell_pressures)):
        n_c = len(cp.cells)
        area = cp.open_area / n_c
        dif_open = gam * area / cp.half_dist
        exch = cp.exchange / n_c
        cell_in = np.maximum(f, 0.0)
        cell_out = np.maximum(-f, 0.0)
        for c, cell in enumerate(cp.cells):
            add(int(cell), int(cell), cell_out[c] + dif_open + exch)
        inflow.append(cell_in)
        outflow.append(cell_out)
        contact.append(np.full(n_c, dif_open + exch))
    return (rows, cols, vals), inflow, outflow, contact


def solve_cfd_zone(grid: CfdGrid, couplings: List[PathCoupling],
                   sources: Dict[int, float],
                   boundary_conc: Optional[Dict[int, float]] = None,
                   tol: float = 1e-8,
                   ) -> Tuple[np.ndarray, np.ndarray]:
    """Steady contaminant field on the grid and air flows per opening.

    sources maps flattened cell index to g/s; boundary_conc maps far-side
    zone id (0 = outdoors) to g/kg, defaulting to clean air. Returns the
    field in g/kg (ny*nx,) and F_C per coupling in kg/s (positive into the
    zone). Raises NonConvergence if the discrete residual exceeds tol.
    """
    if grid.cell_pressures is None:
        raise ConfigError("grid has no solved air state; run couple() first")
    boundary_conc = boundary_conc or {}
    (rows, cols, vals), inflow, outflow, contact = _grid_operator(grid, couplings)
    n = grid.n_cells
    rhs = np.zeros(n)
    for cell, rate in sources.items():
        rhs[int(cell)] += rate
    for cp, f_in, cont in zip(couplings, inflow, contact):
        c_far = boundary_conc.get(cp.other_end, 0.0)
        if c_far != 0.0:
            rhs[cp.cells] += (f_in + cont) * c_far
    matrix = scipy.sparse.csc_matrix((vals, (rows, cols)), shape=(n, n))
    field = scipy.sparse.linalg.spsolve(matrix, rhs)
    resid = float(np.max(np.abs(matrix @ field - rhs)))
    scale = max(float(np.max(np.abs(rhs))), 1e-30)
    if resid > tol * max(1.0, scale):
        raise NonConvergence(
            f"steady grid solve residual {resid:.3e}", residual=resid)
    flows = np.array([f.sum() for f in _opening_flows(
        grid, couplings, grid.cell_pressures)])
    return field, flows


@dataclasses.dataclass
class CoupledRun:
    """Transient result with grid-level detail kept for inspection."""

    trace: TransientTrace
    field: np.ndarray                 # final grid field, g/kg
    path_outflow_g: np.ndarray        # contaminant through each opening, g
    mismatch_history: List[float]


class CoupledOperator:
    """Implicit-Euler integrator for the network with one resolved zone.

    The flow field is quasi-steady, so the transport matrix is assembled
    and factorized once; simulating a scenario is then a sequence of sparse
    triangular solves, which keeps direct-simulator inference affordable.
    """

    def __init__(self, net: BuildingNetwork, config: Optional[CfdConfig] = None,
                 internal_dt_s: float = 1.0):
        if net.cfd_zone is None:
            raise ConfigError("network has no zone marked for grid resolution")
        self.net = net
        self.config = config or CfdConfig()
        self.dt = internal_dt_s
        self.sol = solve_pressures(net)
        self.grid, self.couplings, self.mismatch_history = couple(
            net, self.config, self.sol)

        ids = [z.id for z in net.zones]
        self.zone_ids = tuple(ids)
        self.cfd_zone = net.cfd_zone
        self.mix_ids = [z for z in ids if z != net.cfd_zone]
        self.mix_index = {z: i for i, z in enumerate(self.mix_ids)}
        n_mix = len(self.mix_ids)
        n_cells = self.grid.n_cells
        self.n_dof = n_mix + n_cells
        self.cell0 = n_mix

        masses = np.empty(self.n_dof)
        for z, i in self.mix_index.items():
            masses[i] = net.zone(z).air_mass
        masses[self.cell0:] = self.grid.cell_mass
        self.masses = masses

        rows, cols, vals = [], [], []
        amb = np.zeros(self.n_dof)

        def add(r, c, v):
            rows.append(r)
            cols.append(c)
            vals.append(v)

        cfd_paths = {cp.path_index for cp in self.couplings}
        for k, path in enumerate(net.paths):
            if k in cfd_paths:
                continue
            flow = self.sol.path_flows[k]
            donor, receiver = (path.from_zone, path.to_zone) if flow >= 0 \
                else (path.to_zone, path.from_zone)
            rate = abs(flow)
            if donor != AMBIENT_ID:
                i = self.mix_index[donor]
                add(i, i, rate)
                if receiver != AMBIENT_ID:
                    add(self.mix_index[receiver], i, -rate)
                else:
                    amb[i] += rate
            if path.exchange > 0.0:
                ends = (path.from_zone, path.to_zone)
                for a, b in (ends, ends[::-1]):
                    if a == AMBIENT_ID:
                        continue
                    i = self.mix_index[a]
                    add(i, i, path.exchange)
                    if b != AMBIENT_ID:
                        add(i, self.mix_index[b], -path.exchange)
                    else:
                        amb[i] += path.exchange
        for zid in self.mix_ids:
            extraction = net.zone(zid).air_source
            if extraction < 0.0:
                i = self.mix_index[zid]
                add(i, i, -extraction)
                amb[i] += -extraction

        (g_rows, g_cols, g_vals), inflow, outflow, contact = _grid_operator(
            self.grid, self.couplings)
        rows += [self.cell0 + r for r in g_rows]
        cols += [self.cell0 + c for c in g_cols]
        vals += g_vals
        # tie each opening's cells to the far-side zone (or outdoors)
        self._amb_cells = np.zeros(n_cells)
        for cp, f_in, f_out, cont in zip(self.couplings, inflow, outflow, contact):
            if cp.other_end == AMBIENT_ID:
                for c, cell in enumerate(cp.cells):
                    dof = self.cell0 + int(cell)
                    amb[dof] += f_out[c] + cont[c]
                    self._amb_cells[int(cell)] += f_out[c] + cont[c]
                continue
            far = self.mix_index[cp.other_end]
            for c, cell in enumerate(cp.cells):
                dof = self.cell0 + int(cell)
                add(dof, far, -(f_in[c] + cont[c]))
                add(far, far, f_in[c] + cont[c])
                add(far, dof, -(f_out[c] + cont[c]))
        self.ambient_coeffs = amb

        diag = scipy.sparse.diags(masses / self.dt)
        self.matrix = scipy.sparse.csc_matrix(
            (vals, (rows, cols)), shape=(self.n_dof, self.n_dof)) + diag
        self.lu = scipy.sparse.linalg.splu(self.matrix)
        self._outflow = outflow
        self._contact = contact

    def source_cells(self, scenario: SourceScenario) -> List[int]:
        return [self.grid.cell_index(x, y) for (x, y) in scenario.locations]

    def step(self, state: np.ndarray, sources_g_s: np.ndarray) -> np.ndarray:
        """Advance the joint state one internal step (implicit Euler)."""
        rhs = self.masses / self.dt * state + sources_g_s
        return self.lu.solve(rhs)

    def run_detailed(self, scenario: SourceScenario, horizon_min: float,
                     report_dt_min: float = 1.0) -> CoupledRun:
        if scenario.zone != self.cfd_zone:
            raise ConfigError(
                f"scenario zone {scenario.zone} is not the resolved zone "
                f"{self.cfd_zone}")
        if horizon_min <= scenario.start_min:
            raise ConfigError("horizon must extend past the activation time")
        cells = self.source_cells(scenario)

        n_report = int(round(horizon_min / report_dt_min))
        times = np.arange(n_report + 1) * report_dt_min
        conc = np.zeros((n_report + 1, len(self.zone_ids)))
        state = np.zeros(self.n_dof)
        injected = 0.0
        exhausted = 0.0
        path_out = np.zeros(len(self.couplings))
        src = np.zeros(self.n_dof)
        steps_per_report = max(1, int(round(report_dt_min * 60.0 / self.dt)))
        cell_slice = slice(self.cell0, None)
        for r in range(n_report):
            if times[r + 1] <= scenario.start_min:
                continue
            t_start = times[r] * 60.0
            for s in range(steps_per_report):
                t0 = t_start + s * self.dt
                t1 = t0 + self.dt
                active = min(max((t1 - scenario.start_min * 60.0) / self.dt, 0.0), 1.0)
                if active == 0.0 and not state.any():
                    continue
                src[:] = 0.0
                for cell in cells:
                    src[self.cell0 + cell] += scenario.rate * active
                state = self.step(state, src)
                injected += scenario.rate * active * len(cells) * self.dt
                exhausted += float(np.dot(self.ambient_coeffs, state)) * self.dt
                for c_i, cp in enumerate(self.couplings):
                    u_cells = state[cell_slice][cp.cells]
                    far = 0.0 if cp.other_end == AMBIENT_ID \
                        else state[self.mix_index[cp.other_end]]
                    flux = float(np.dot(self._outflow[c_i], u_cells)
                                 + np.dot(self._contact[c_i], u_cells - far))
                    path_out[c_i] += flux * self.dt
            conc[r + 1] = self._report(state)
        stored = float(np.dot(self.masses, state))
        trace = TransientTrace(
            times_min=times, zone_ids=self.zone_ids, conc=conc,
            injected_g=injected, exhausted_g=exhausted, stored_g=stored)
        return CoupledRun(trace=trace, field=state[cell_slice].copy(),
                          path_outflow_g=path_out,
                          mismatch_history=self.mismatch_history)

    def run(self, scenario: SourceScenario, horizon_min: float,
            report_dt_min: float = 1.0) -> TransientTrace:
        return self.run_detailed(scenario, horizon_min, report_dt_min).trace

    def _report(self, state: np.ndarray) -> np.ndarray:
        out = np.empty(len(self.zone_ids))
        cell_mean = float(np.mean(state[self.cell0:]))   # uniform cell masses
        for i, zid in enumerate(self.zone_ids):
            if zid == self.cfd_zone:
                out[i] = max(cell_mean, 0.0)
            else:
                out[i] = max(state[self.mix_index[zid]], 0.0)
        return out
