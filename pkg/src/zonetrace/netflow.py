"""Multizone airflow network: steady pressures and well-mixed transport.

A building is a set of zones joined by power-law flow paths,

    F = c * sign(dP) * |dP| ** n        [kg/s]

with dP the total pressure difference across the path (zone pressure plus a
wind offset on the ambient side). Zone pressures come from a damped Newton
solve of the steady air mass balance. Contaminant is advanced with implicit
Euler on the well-mixed zone balances at a 1 s internal step, holding the
flow field quasi-steady, and reported on a 1 min grid.

Concentrations are handled internally in g contaminant per kg air. The CSV
trace format is in g/m^3; the conversion is g/m^3 = g/kg * RHO_AIR.

Interior doorways additionally carry a symmetric turbulent exchange term
(equal and opposite air trade with no net flow). One-way power-law flow
cannot move contaminant into rooms that only feed air toward the source
zone, while real large openings do; the exchange coefficient is declared
per path in the building file.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from .errors import ConfigError, NonConvergence, SingularJacobian

RHO_AIR = 1.204          # kg/m^3 at ~20 C
CP_WINDWARD = 0.6
CP_LEEWARD = -0.3
DP_LINEAR = 1e-6         # Pa; below this the power law is linearized
AMBIENT_ID = 0           # zone id reserved for outdoors

# Outward facade normals in building coordinates (x east, y north).
_WALL_NORMALS = {
    "N": (0.0, 1.0),
    "S": (0.0, -1.0),
    "E": (1.0, 0.0),
    "W": (-1.0, 0.0),
}


@dataclasses.dataclass(frozen=True)
class Zone:
    """A well-mixed room. Dimensions in m; volume is width*depth*height."""

    id: int
    name: str
    width: float
    depth: float
    height: float
    air_source: float = 0.0   # kg/s of outside air injected (+) or drawn (-)

    def __post_init__(self):
        if self.id <= 0:
            raise ConfigError(f"zone id must be positive, got {self.id}")
        for field in ("width", "depth", "height"):
            if getattr(self, field) <= 0:
                raise ConfigError(f"zone {self.id}: {field} must be positive")

    @property
    def volume(self) -> float:
        return self.width * self.depth * self.height

    @property
    def air_mass(self) -> float:
        return RHO_AIR * self.volume


@dataclasses.dataclass(frozen=True)
class OpeningGeometry:
    """Where an opening sits on a zone's wall.

    wall is one of N/S/E/W in the zone's local frame; center is measured in m
    along that wall from the zone's south-west corner.
    """

    wall: str
    center: float

    def __post_init__(self):
        if self.wall not in _WALL_NORMALS:
            raise ConfigError(f"unknown wall tag {self.wall!r}")


@dataclasses.dataclass(frozen=True)
class FlowPath:
    """A power-law opening between two zones (id 0 = outdoors).

    flow_coeff has units kg/s/Pa^flow_exp. exchange is a symmetric air trade
    in kg/s applied to the contaminant balance only.
    """

    from_zone: int
    to_zone: int
    flow_coeff: float
    flow_exp: float
    width: float
    height: float
    geom_from: Optional[OpeningGeometry] = None
    geom_to: Optional[OpeningGeometry] = None
    exchange: float = 0.0
    kind: str = "opening"
    name: str = ""

    def __post_init__(self):
        if self.from_zone == self.to_zone:
            raise ConfigError("path endpoints must differ")
        if self.from_zone == AMBIENT_ID and self.to_zone == AMBIENT_ID:
            raise ConfigError("path cannot join outdoors to outdoors")
        if self.flow_coeff <= 0:
            raise ConfigError("flow_coeff must be positive")
        if not 0.5 <= self.flow_exp <= 1.0:
            raise ConfigError("flow_exp outside [0.5, 1.0]")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("opening width/height must be positive")
        if self.exchange < 0:
            raise ConfigError("exchange must be >= 0")

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def is_exterior(self) -> bool:
        return self.from_zone == AMBIENT_ID or self.to_zone == AMBIENT_ID

    def interior_end(self) -> int:
        if self.from_zone != AMBIENT_ID:
            return self.from_zone
        return self.to_zone

    def geometry_for(self, zone_id: int) -> Optional[OpeningGeometry]:
        if zone_id == self.from_zone:
            return self.geom_from
        if zone_id == self.to_zone:
            return self.geom_to
        return None


@dataclasses.dataclass(frozen=True)
class BuildingNetwork:
    """Zones, paths and the ambient/wind boundary condition.

    cfd_zone marks at most one zone for grid-resolved treatment; the base
    network leaves it unset and callers opt in via with_cfd().
    """

    zones: Tuple[Zone, ...]
    paths: Tuple[FlowPath, ...]
    wind_speed: float = 0.0        # m/s
    wind_direction: float = 0.0    # deg, direction the wind comes from
    outdoor_temp: float = 20.0     # C (buoyancy is out of scope; recorded only)
    cfd_zone: Optional[int] = None

    def __post_init__(self):
        ids = [z.id for z in self.zones]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate zone ids")
        if list(ids) != sorted(ids):
            object.__setattr__(self, "zones", tuple(sorted(self.zones, key=lambda z: z.id)))
        known = set(ids)
        for p in self.paths:
            for end in (p.from_zone, p.to_zone):
                if end != AMBIENT_ID and end not in known:
                    raise ConfigError(f"path references unknown zone {end}")
            if p.is_exterior and p.geometry_for(p.interior_end()) is None:
                raise ConfigError(
                    f"exterior path {p.from_zone}-{p.to_zone} needs a wall tag "
                    "on the interior side to orient it for wind"
                )
        if self.wind_speed < 0:
            raise ConfigError("wind_speed must be >= 0")
        if self.cfd_zone is not None and self.cfd_zone not in known:
            raise ConfigError(f"cfd_zone {self.cfd_zone} is not a zone id")

    @property
    def zone_ids(self) -> Tuple[int, ...]:
        return tuple(z.id for z in self.zones)

    def zone(self, zone_id: int) -> Zone:
        for z in self.zones:
            if z.id == zone_id:
                return z
        raise KeyError(f"no zone {zone_id}")

    def with_cfd(self, zone_id: int) -> "BuildingNetwork":
        """Return a copy with zone_id marked for grid-resolved treatment."""
        return dataclasses.replace(self, cfd_zone=zone_id)

    def adjacency(self) -> Dict[int, List[int]]:
        """Interior-zone adjacency through any shared path."""
        adj: Dict[int, List[int]] = {z.id: [] for z in self.zones}
        for p in self.paths:
            if p.is_exterior:
                continue
            if p.to_zone not in adj[p.from_zone]:
                adj[p.from_zone].append(p.to_zone)
            if p.from_zone not in adj[p.to_zone]:
                adj[p.to_zone].append(p.from_zone)
        for v in adj.values():
            v.sort()
        return adj


def wind_pressure_offset(net: BuildingNetwork, path: FlowPath) -> float:
    """Wind pressure on the ambient side of an exterior path, in Pa.

    Cp is +0.6 for a facade whose outward normal points within 45 deg of
    upwind, -0.3 within 45 deg of downwind, and 0 for side walls. Interior
    paths have no offset.
    """
    if not path.is_exterior or net.wind_speed == 0.0:
        return 0.0
    geom = path.geometry_for(path.interior_end())
    nx, ny = _WALL_NORMALS[geom.wall]
    d = math.radians(net.wind_direction)
    ux, uy = math.sin(d), math.cos(d)      # unit vector pointing upwind
    dot = nx * ux + ny * uy
    cos45 = math.cos(math.radians(45.0))
    if dot >= cos45 - 1e-12:
        cp = CP_WINDWARD
    elif dot <= -cos45 + 1e-12:
        cp = CP_LEEWARD
    else:
        cp = 0.0
    return 0.5 * RHO_AIR * net.wind_speed ** 2 * cp


def _power_flow(coeff: float, expo: float, dp: float) -> Tuple[float, float]:
    """Flow and d(flow)/d(dP) for one path, linearized for |dP| < DP_LINEAR."""
    if abs(dp) < DP_LINEAR:
        slope = coeff * DP_LINEAR ** (expo - 1.0)
        return coeff * dp * DP_LINEAR ** (expo - 1.0), slope
    mag = coeff * abs(dp) ** expo
    return math.copysign(mag, dp), coeff * expo * abs(dp) ** (expo - 1.0)


@dataclasses.dataclass(frozen=True)
class PressureSolution:
    """Steady zone pressures and the resulting path flows.

    path_flows[i] is signed positive from path.from_zone to path.to_zone.
    residual_norm is the max absolute zone mass imbalance in kg/s.
    """

    net: BuildingNetwork
    pressures: Dict[int, float]            # Pa, per interior zone id
    path_flows: np.ndarray                 # kg/s, aligned with net.paths
    wind_offsets: np.ndarray               # Pa, ambient-side offset per path
    residual_norm: float
    iterations: int

    def total_pressure(self, zone_id: int, path_index: int) -> float:
        """Total driving pressure at one end of a path (ambient gets wind)."""
        if zone_id == AMBIENT_ID:
            return float(self.wind_offsets[path_index])
        return self.pressures[zone_id]

    def flow_into(self, zone_id: int) -> float:
        """Net advective air flow into a zone, kg/s."""
        total = 0.0
        for k, p in enumerate(self.net.paths):
            if p.to_zone == zone_id:
                total += self.path_flows[k]
            elif p.from_zone == zone_id:
                total -= self.path_flows[k]
        return total


def _floating_anchors(net: BuildingNetwork) -> List[int]:
    """Lowest zone id of every component with no route to outdoors.

    Pressures in such a component are defined only up to a constant, so the
    Newton step pins one zone per component at 0 Pa (its mass balance is
    implied by the others when the component's air sources balance).
    """
    neighbors: Dict[int, set] = {z.id: set() for z in net.zones}
    neighbors[AMBIENT_ID] = set()
    for p in net.paths:
        neighbors[p.from_zone].add(p.to_zone)
        neighbors[p.to_zone].add(p.from_zone)
    seen = set()
    stack = [AMBIENT_ID]
    while stack:
        node = stack.pop()
        if node in seen:
            continue
        seen.add(node)
        stack.extend(neighbors[node] - seen)
    anchors = []
    remaining = [z.id for z in net.zones if z.id not in seen]
    while remaining:
        start = min(remaining)
        comp = set()
        stack = [start]
        while stack:
            node = stack.pop()
            if node in comp:
                continue
            comp.add(node)
            stack.extend(neighbors[node] - comp)
        anchors.append(start)
        remaining = [z for z in remaining if z not in comp]
    return anchors


def solve_pressures(net: BuildingNetwork, tol_flow: float = 1e-8,
                    max_iter: int = 200) -> PressureSolution:
    """Newton solve of the steady air mass balance over interior zones.

    Raises SingularJacobian if the (regularized) Jacobian cannot be
    factorized and NonConvergence if max_iter is exhausted.
    """
    ids = list(net.zone_ids)
    index = {zid: i for i, zid in enumerate(ids)}
    nz = len(ids)
    offsets = np.array([wind_pressure_offset(net, p) for p in net.paths])
    pressures = np.zeros(nz)
    sources = np.array([net.zone(z).air_source for z in ids])
    anchor_idx = [index[z] for z in _floating_anchors(net)]

    def assemble(pvec):
        resid = sources.copy()
        jac = np.zeros((nz, nz))
        flows = np.zeros(len(net.paths))
        for k, path in enumerate(net.paths):
            pf = offsets[k] if path.from_zone == AMBIENT_ID else pvec[index[path.from_zone]]
            pt = offsets[k] if path.to_zone == AMBIENT_ID else pvec[index[path.to_zone]]
            flow, slope = _power_flow(path.flow_coeff, path.flow_exp, pf - pt)
            flows[k] = flow
            if path.to_zone != AMBIENT_ID:
                j = index[path.to_zone]
                resid[j] += flow
                jac[j, j] -= slope
                if path.from_zone != AMBIENT_ID:
                    jac[j, index[path.from_zone]] += slope
            if path.from_zone != AMBIENT_ID:
                i = index[path.from_zone]
                resid[i] -= flow
                jac[i, i] -= slope
                if path.to_zone != AMBIENT_ID:
                    jac[i, index[path.to_zone]] += slope
        return resid, jac, flows

    def finish(norm, flows, iteration):
        return PressureSolution(
            net=net,
            pressures={zid: float(pressures[index[zid]]) for zid in ids},
            path_flows=flows,
            wind_offsets=offsets,
            residual_norm=norm,
            iterations=iteration,
        )

    resid, jac, flows = assemble(pressures)
    norm = float(np.max(np.abs(resid))) if nz else 0.0
    for iteration in range(1, max_iter + 1):
        if norm <= tol_flow:
            return finish(norm, flows, iteration - 1)
        step_resid = resid.copy()
        step_jac = jac.copy()
        for i in anchor_idx:
            step_jac[i, :] = 0.0
            step_jac[i, i] = 1.0
            step_resid[i] = pressures[i]
        try:
            step = np.linalg.solve(step_jac, -step_resid)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(
                f"network Jacobian singular at iteration {iteration}: {exc}"
            ) from exc
        # Backtracking keeps the iteration from overshooting the flat
        # power-law region at large dP.
        scale = 1.0
        for _ in range(30):
            trial = pressures + scale * step
            t_resid, t_jac, t_flows = assemble(trial)
            t_norm = float(np.max(np.abs(t_resid)))
            if t_norm < norm or t_norm <= tol_flow:
                break
            scale *= 0.5
        pressures, resid, jac, flows, norm = trial, t_resid, t_jac, t_flows, t_norm
    if norm <= tol_flow:
        return finish(norm, flows, max_iter)
    raise NonConvergence(
        f"pressure solve stalled at residual {norm:.3e} kg/s",
        iterations=max_iter, residual=norm,
    )


@dataclasses.dataclass(frozen=True)
class SourceScenario:
    """A contaminant release hypothesis.

    count sources, each emitting rate g/s, all in the given zone, active
    from start_min onward. locations are (x, y) in the zone's local frame
    (m from its south-west corner); exactly count pairs.
    """

    count: int
    zone: int
    rate: float
    start_min: float
    locations: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("source count must be >= 1")
        if len(self.locations) != self.count:
            raise ConfigError("need exactly one location per source")
        if self.rate < 0:
            raise ConfigError("source rate must be >= 0")

    @property
    def total_rate(self) -> float:
        return self.count * self.rate


@dataclasses.dataclass
class TransientTrace:
    """Zone concentrations on a reporting grid, plus a conservation ledger.

    conc[t, j] is in g/kg for zone zone_ids[j] at times_min[t]. The ledger
    tracks injected mass, mass advected/exchanged to outdoors, and stored
    mass, all in grams.
    """

    times_min: np.ndarray
    zone_ids: Tuple[int, ...]
    conc: np.ndarray
    injected_g: float = 0.0
    exhausted_g: float = 0.0
    stored_g: float = 0.0

    def column(self, zone_id: int) -> np.ndarray:
        return self.conc[:, self.zone_ids.index(zone_id)]

    def at(self, zone_id: int, times: Sequence[float]) -> np.ndarray:
        """Concentrations at reporting times (must lie on the grid)."""
        col = self.column(zone_id)
        out = np.empty(len(times))
        for i, t in enumerate(times):
            k = int(round((t - self.times_min[0]) /
                          (self.times_min[1] - self.times_min[0])))
            if k < 0 or k >= len(self.times_min) or \
                    abs(self.times_min[k] - t) > 1e-9:
                raise ValueError(f"time {t} not on the reporting grid")
            out[i] = col[k]
        return out

    def closure_error(self) -> float:
        """Relative conservation gap |in - out - stored| / max(in, tiny)."""
        gap = abs(self.injected_g - self.exhausted_g - self.stored_g)
        return gap / max(self.injected_g, 1e-30)


def _transport_matrix(net: BuildingNetwork, sol: PressureSolution,
                      dt: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Implicit-Euler system for the well-mixed zone balances.

    Returns (A, masses, amb_loss) with A the left-hand matrix, masses the
    zone air masses (kg) and amb_loss the per-zone coefficient (kg/s)
    multiplying the new concentration for mass leaving to outdoors.
    """
    ids = list(net.zone_ids)
    index = {zid: i for i, zid in enumerate(ids)}
    nz = len(ids)
    masses = np.array([net.zone(z).air_mass for z in ids])
    a = np.diag(masses / dt)
    amb_loss = np.zeros(nz)
    for k, path in enumerate(net.paths):
        flow = sol.path_flows[k]
        donor, receiver = (path.from_zone, path.to_zone) if flow >= 0 else \
                          (path.to_zone, path.from_zone)
        rate = abs(flow)
        if donor != AMBIENT_ID:
            i = index[donor]
            a[i, i] += rate
            if receiver != AMBIENT_ID:
                a[index[receiver], i] -= rate
            else:
                amb_loss[i] += rate
        # inflow from outdoors carries zero concentration: no matrix term
        if path.exchange > 0.0:
            e = path.exchange
            if path.from_zone != AMBIENT_ID:
                i = index[path.from_zone]
                a[i, i] += e
                if path.to_zone != AMBIENT_ID:
                    a[i, index[path.to_zone]] -= e
                else:
                    amb_loss[i] += e
            if path.to_zone != AMBIENT_ID:
                j = index[path.to_zone]
                a[j, j] += e
                if path.from_zone != AMBIENT_ID:
                    a[j, index[path.from_zone]] -= e
                else:
                    amb_loss[j] += e
    for zid in ids:
        extraction = net.zone(zid).air_source
        if extraction < 0.0:
            i = index[zid]
            a[i, i] += -extraction
            amb_loss[i] += -extraction
    return a, masses, amb_loss


def step_transport(net: BuildingNetwork, sol: PressureSolution,
                   conc: np.ndarray, sources_g_s: np.ndarray,
                   dt: float = 1.0) -> np.ndarray:
    """One implicit-Euler transport step of dt seconds.

    conc and sources_g_s are aligned with net.zone_ids; concentrations in
    g/kg, sources in g/s. Upwind convention: each path carries the donor
    zone's concentration. Returns the new concentration vector (>= 0).
    """
    a, masses, _ = _transport_matrix(net, sol, dt)
    rhs = masses / dt * conc + sources_g_s
    new = np.linalg.solve(a, rhs)
    return np.maximum(new, 0.0)


def simulate(net: BuildingNetwork, scenario: SourceScenario,
             horizon_min: float, report_dt_min: float = 1.0,
             internal_dt_s: float = 1.0) -> TransientTrace:
    """Simulate the release end to end and report minute-resolution traces.

    Pressures are solved once (the boundary condition is steady) and held.
    If net.cfd_zone equals the scenario zone the source room is resolved on
    a grid (see cfdzone); otherwise the release enters the zone balance as a
    well-mixed source of count*rate g/s. Source activation inside an
    internal step injects for the covered fraction of that step, so results
    vary smoothly with start_min.
    """
    if horizon_min <= scenario.start_min:
        raise ConfigError("horizon must extend past the activation time")
    if scenario.zone not in net.zone_ids:
        raise ConfigError(f"scenario zone {scenario.zone} is not in the network")
    zone = net.zone(scenario.zone)
    for (x, y) in scenario.locations:
        if not (0.0 <= x <= zone.width and 0.0 <= y <= zone.depth):
            raise ConfigError(f"source location ({x}, {y}) outside zone {zone.id}")

    if net.cfd_zone is not None and net.cfd_zone == scenario.zone:
        from . import cfdzone
        op = cfdzone.CoupledOperator(net, internal_dt_s=internal_dt_s)
        return op.run(scenario, horizon_min, report_dt_min=report_dt_min)

    sol = solve_pressures(net)
    ids = list(net.zone_ids)
    index = {zid: i for i, zid in enumerate(ids)}
    nz = len(ids)
    a, masses, amb_loss = _transport_matrix(net, sol, internal_dt_s)
    lu = scipy.linalg.lu_factor(a)

    n_report = int(round(horizon_min / report_dt_min))
    times = np.arange(n_report + 1) * report_dt_min
    conc = np.zeros((n_report + 1, nz))
    state = np.zeros(nz)
    injected = 0.0
    exhausted = 0.0
    src = np.zeros(nz)
    steps_per_report = max(1, int(round(report_dt_min * 60.0 / internal_dt_s)))
    for r in range(n_report):
        t_start = times[r] * 60.0
        if times[r + 1] <= scenario.start_min:
            conc[r + 1] = state    # still all zero, nothing to integrate
            continue
        for s in range(steps_per_report):
            t0 = t_start + s * internal_dt_s
            t1 = t0 + internal_dt_s
            active = min(max((t1 - scenario.start_min * 60.0) / internal_dt_s, 0.0), 1.0)
            if active == 0.0 and not state.any():
                continue
            src[:] = 0.0
            src[index[scenario.zone]] = scenario.total_rate * active
            rhs = masses / internal_dt_s * state + src
            new = scipy.linalg.lu_solve(lu, rhs)
            injected += scenario.total_rate * active * internal_dt_s
            exhausted += float(np.dot(amb_loss, new)) * internal_dt_s
            state = new
        conc[r + 1] = np.maximum(state, 0.0)
    stored = float(np.dot(masses, state))
    return TransientTrace(
        times_min=times, zone_ids=tuple(ids), conc=conc,
        injected_g=injected, exhausted_g=exhausted, stored_g=stored,
    )


def write_trace_csv(trace: TransientTrace, path: str) -> None:
    """Write a trace as CSV in g/m^3 (header: time_min, zone_1, ...)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_min"] + [f"zone_{z}" for z in trace.zone_ids])
        for i, t in enumerate(trace.times_min):
            row = [f"{t:.6f}"] + [repr(float(v) * RHO_AIR) for v in trace.conc[i]]
            writer.writerow(row)


def read_trace_csv(path: str) -> TransientTrace:
    """Read a trace CSV written by write_trace_csv (back to g/kg)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0].strip() != "time_min":
            raise ConfigError(f"{path}: not a trace CSV (header {header[0]!r})")
        zone_ids = tuple(int(h.strip().split("_", 1)[1]) for h in header[1:])
        times = []
        rows = []
        for row in reader:
            times.append(float(row[0]))
            rows.append([float(v) / RHO_AIR for v in row[1:]])
    return TransientTrace(
        times_min=np.array(times), zone_ids=zone_ids, conc=np.array(rows),
    )
