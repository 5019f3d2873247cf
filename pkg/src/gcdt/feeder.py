"""Radial feeder description and a backward/forward-sweep power flow.

Feeders are JSON documents (see ``data/feeder13.json``).  All electrical
quantities are per-unit; loads, capacitor ratings and battery ratings are
given *per phase* and apply to every phase the bus carries.  Each phase is
solved independently on the same tree (balanced approximation), so there is
no mutual coupling between phases.

Voltage regulators sit at the receiving end of the line into their bus and
act as ideal transformers: the regulator bus and everything below it see the
upstream voltage multiplied by the tap ratio.  The solver refers all
quantities to the source side, which turns the network into a plain
transformer-free tree with scaled impedances ``Z / A(parent)**2``, where
``A`` is the cumulative tap ratio.  Sweeps are then the usual
``V = V_src - D @ conj(S / V)`` fixed point with ``D = T diag(Z') T^T`` and
``T`` the bus/branch path incidence matrix.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

PHASES = (1, 2, 3)
TAP_COUNT = 33
NEUTRAL_TAP = 16


class FeederError(ValueError):
    """Malformed or physically invalid feeder document."""


@dataclass(frozen=True)
class Bus:
    id: str
    phases: tuple[int, ...]


@dataclass(frozen=True)
class Line:
    from_bus: str
    to_bus: str
    resistance_pu: float
    reactance_pu: float


@dataclass(frozen=True)
class Capacitor:
    bus: str
    q_injection_pu: float


@dataclass(frozen=True)
class Regulator:
    bus: str
    tap_count: int = TAP_COUNT
    ratio_min: float = 0.9
    ratio_max: float = 1.1

    def ratio(self, tap) -> float:
        return self.ratio_min + tap * (self.ratio_max - self.ratio_min) / (self.tap_count - 1)


@dataclass(frozen=True)
class Battery:
    bus: str
    capacity_puh: float
    max_discharge_pu: float


@dataclass(frozen=True)
class Load:
    bus: str
    base_p_pu: float
    base_q_pu: float


@dataclass(frozen=True)
class FeederSpec:
    name: str
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    source_bus: str
    cap_buses: tuple[Capacitor, ...] = ()
    reg_buses: tuple[Regulator, ...] = ()
    batt_buses: tuple[Battery, ...] = ()
    load_buses: tuple[Load, ...] = ()

    def __post_init__(self):
        _validate(self)
        object.__setattr__(self, "_topology", _Topology.build(self))

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_cap(self) -> int:
        return len(self.cap_buses)

    @property
    def n_reg(self) -> int:
        return len(self.reg_buses)

    @property
    def n_batt(self) -> int:
        return len(self.batt_buses)

    @property
    def topology(self) -> _Topology:
        return self._topology

    def bus_index(self, bus_id) -> int:
        return self._topology.index[bus_id]

    def downstream(self, bus_id) -> list[str]:
        """Bus ids strictly below ``bus_id`` in the tree."""
        topo = self._topology
        i = topo.index[bus_id]
        return [self.buses[j].id for j in range(self.n_buses) if j != i and topo.path[j, i]]


@dataclass(frozen=True)
class DeviceState:
    cap_on: tuple[bool, ...]
    tap: tuple[int, ...]
    soc: tuple[float, ...]
    discharge: tuple[float, ...]

    @classmethod
    def neutral(cls, spec: FeederSpec) -> DeviceState:
        return cls(
            cap_on=(False,) * spec.n_cap,
            tap=(NEUTRAL_TAP,) * spec.n_reg,
            soc=(0.5,) * spec.n_batt,
            discharge=(0.0,) * spec.n_batt,
        )

    def check(self, spec: FeederSpec):
        dims = (len(self.cap_on), len(self.tap), len(self.soc), len(self.discharge))
        want = (spec.n_cap, spec.n_reg, spec.n_batt, spec.n_batt)
        if dims != want:
            raise ValueError(f"device state dimensions {dims} do not match feeder {want}")
        for reg, tap in zip(spec.reg_buses, self.tap):
            if not 0 <= tap < reg.tap_count:
                raise ValueError(f"tap {tap} out of range for regulator at {reg.bus}")
        if any(not 0.0 <= s <= 1.0 for s in self.soc):
            raise ValueError("soc must lie in [0, 1]")
        if any(not -1.0 <= d <= 1.0 for d in self.discharge):
            raise ValueError("discharge must lie in [-1, 1]")


@dataclass(frozen=True)
class PowerFlowSolution:
    voltage: np.ndarray  # (n_buses, 3) magnitudes, NaN where a phase is absent
    power_loss_pu: float
    total_power_pu: float
    converged: bool
    iterations: int

    def bus_max(self) -> np.ndarray:
        return np.nanmax(self.voltage, axis=1)

    def bus_min(self) -> np.ndarray:
        return np.nanmin(self.voltage, axis=1)


# ---------------------------------------------------------------------------
# parsing and validation
# ---------------------------------------------------------------------------


def _field(record, key, where, kind=float):
    if not isinstance(record, dict):
        raise FeederError(f"{where}: expected an object, got {type(record).__name__}")
    if key not in record:
        raise FeederError(f"{where}: missing field {key!r}")
    try:
        return kind(record[key])
    except (TypeError, ValueError) as exc:
        raise FeederError(f"{where}.{key}: {exc}") from None


def parse_feeder(doc: dict, name: str = "feeder") -> FeederSpec:
    """Build a :class:`FeederSpec` from an already-decoded JSON object."""
    if not isinstance(doc, dict):
        raise FeederError("feeder document must be a JSON object")
    for key in ("buses", "lines", "source"):
        if key not in doc:
            raise FeederError(f"missing top-level key {key!r}")

    buses = []
    for i, rec in enumerate(doc["buses"]):
        where = f"buses[{i}]"
        bus_id = _field(rec, "id", where, str)
        phases = rec.get("phases", [1, 2, 3])
        if not phases or any(p not in PHASES for p in phases) or len(set(phases)) != len(phases):
            raise FeederError(f"{where}.phases: must be a non-empty subset of {{1,2,3}}")
        buses.append(Bus(bus_id, tuple(sorted(int(p) for p in phases))))

    lines = []
    for i, rec in enumerate(doc["lines"]):
        where = f"lines[{i}]"
        lines.append(
            Line(
                _field(rec, "from", where, str),
                _field(rec, "to", where, str),
                _field(rec, "resistance_pu", where),
                _field(rec, "reactance_pu", where),
            )
        )

    caps = [
        Capacitor(_field(r, "bus", f"capacitors[{i}]", str), _field(r, "q_injection_pu", f"capacitors[{i}]"))
        for i, r in enumerate(doc.get("capacitors", []))
    ]
    regs = []
    for i, rec in enumerate(doc.get("regulators", [])):
        where = f"regulators[{i}]"
        regs.append(
            Regulator(
                _field(rec, "bus", where, str),
                int(rec.get("tap_count", TAP_COUNT)),
                float(rec.get("ratio_min", 0.9)),
                float(rec.get("ratio_max", 1.1)),
            )
        )
    batts = [
        Battery(
            _field(r, "bus", f"batteries[{i}]", str),
            _field(r, "capacity_puh", f"batteries[{i}]"),
            _field(r, "max_discharge_pu", f"batteries[{i}]"),
        )
        for i, r in enumerate(doc.get("batteries", []))
    ]
    loads = [
        Load(
            _field(r, "bus", f"loads[{i}]", str),
            _field(r, "base_p_pu", f"loads[{i}]"),
            _field(r, "base_q_pu", f"loads[{i}]"),
        )
        for i, r in enumerate(doc.get("loads", []))
    ]
    return FeederSpec(
        name=str(doc.get("name", name)),
        buses=tuple(buses),
        lines=tuple(lines),
        source_bus=str(doc["source"]),
        cap_buses=tuple(caps),
        reg_buses=tuple(regs),
        batt_buses=tuple(batts),
        load_buses=tuple(loads),
    )


def load_feeder(text: str, name: str = "feeder") -> FeederSpec:
    """Parse a feeder JSON document.  Raises :class:`FeederError` with a location on failure."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FeederError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_feeder(doc, name)


def load_feeder_file(path) -> FeederSpec:
    path = Path(path)
    return load_feeder(path.read_text(), name=path.stem)


def bundled_feeder(name: str) -> FeederSpec:
    """One of ``feeder13``, ``feeder34``, ``feeder123``."""
    text = resources.files("gcdt.data").joinpath(f"{name}.json").read_text()
    return load_feeder(text, name=name)


def bundled_feeder_path(name: str) -> Path:
    return Path(str(resources.files("gcdt.data").joinpath(f"{name}.json")))


def _validate(spec: FeederSpec):
    ids = [b.id for b in spec.buses]
    seen = set()
    for bus_id in ids:
        if bus_id in seen:
            raise FeederError(f"duplicate bus id {bus_id!r}")
        seen.add(bus_id)
    if spec.source_bus not in seen:
        raise FeederError(f"source bus {spec.source_bus!r} is not a bus")
    if len(spec.lines) != len(ids) - 1:
        raise FeederError(
            f"not radial: {len(spec.lines)} lines for {len(ids)} buses (a tree needs {len(ids) - 1})"
        )
    for i, line in enumerate(spec.lines):
        for end in (line.from_bus, line.to_bus):
            if end not in seen:
                raise FeederError(f"lines[{i}]: unknown bus {end!r}")
        if line.resistance_pu < 0 or line.reactance_pu < 0:
            raise FeederError(f"lines[{i}]: impedances must be non-negative")
    for kind, devices in (
        ("capacitor", spec.cap_buses),
        ("regulator", spec.reg_buses),
        ("battery", spec.batt_buses),
        ("load", spec.load_buses),
    ):
        for dev in devices:
            if dev.bus not in seen:
                raise FeederError(f"{kind} at unknown bus {dev.bus!r}")
    for reg in spec.reg_buses:
        if not reg.ratio_min < reg.ratio_max:
            raise FeederError(f"regulator at {reg.bus}: ratio_min must be < ratio_max")
        if reg.bus == spec.source_bus:
            raise FeederError("a regulator cannot sit on the source bus")
        if reg.tap_count < 2:
            raise FeederError(f"regulator at {reg.bus}: tap_count must be >= 2")
    if len({r.bus for r in spec.reg_buses}) != len(spec.reg_buses):
        raise FeederError("at most one regulator per bus")
    for batt in spec.batt_buses:
        if batt.capacity_puh <= 0 or batt.max_discharge_pu < 0:
            raise FeederError(f"battery at {batt.bus}: capacity must be > 0 and max_discharge >= 0")


@dataclass(frozen=True)
class _Topology:
    index: dict
    order: tuple  # breadth-first bus indices starting at the source
    parent: np.ndarray  # parent bus index, -1 for the source
    line_of: np.ndarray  # index into spec.lines of the line feeding each bus, -1 for the source
    path: np.ndarray  # path[i, j] = 1 if the line into j lies on the source->i path
    phase_mask: np.ndarray  # (3, n) bool

    @classmethod
    def build(cls, spec: FeederSpec) -> _Topology:
        index = {b.id: i for i, b in enumerate(spec.buses)}
        n = len(spec.buses)
        adj = [[] for _ in range(n)]
        for k, line in enumerate(spec.lines):
            a, b = index[line.from_bus], index[line.to_bus]
            if a == b:
                raise FeederError(f"lines[{k}]: self loop at {line.from_bus!r}")
            adj[a].append((b, k))
            adj[b].append((a, k))
        root = index[spec.source_bus]
        parent = np.full(n, -1)
        line_of = np.full(n, -1)
        visited = np.zeros(n, dtype=bool)
        visited[root] = True
        order = [root]
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for v, k in adj[u]:
                if visited[v]:
                    if v != parent[u]:
                        raise FeederError(f"not radial: cycle through bus {spec.buses[v].id!r}")
                    continue
                visited[v] = True
                parent[v] = u
                line_of[v] = k
                order.append(v)
                queue.append(v)
        if not visited.all():
            missing = [spec.buses[i].id for i in np.flatnonzero(~visited)]
            raise FeederError(f"not radial: buses unreachable from source: {missing[:5]}")

        path = np.zeros((n, n))
        for i in range(n):
            j = i
            while j != root:
                path[i, j] = 1.0
                j = parent[j]

        mask = np.zeros((3, n), dtype=bool)
        for i, bus in enumerate(spec.buses):
            for p in bus.phases:
                mask[p - 1, i] = True
            if parent[i] >= 0 and not set(bus.phases) <= set(spec.buses[parent[i]].phases):
                raise FeederError(f"bus {bus.id!r} carries phases its parent does not")
        return cls(index, tuple(order), parent, line_of, path, mask)


# ---------------------------------------------------------------------------
# power flow
# ---------------------------------------------------------------------------


def solve_power_flow(
    spec: FeederSpec,
    dev: DeviceState,
    load_scale=None,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> PowerFlowSolution:
    """Constant-power backward/forward sweep.

    ``load_scale`` holds one multiplier per entry of ``spec.load_buses``
    (defaults to all ones).  Non-convergence is reported through
    ``converged=False`` rather than an exception.
    """
    dev.check(spec)
    topo = spec.topology
    n = spec.n_buses
    if load_scale is None:
        load_scale = np.ones(len(spec.load_buses))
    load_scale = np.asarray(load_scale, dtype=float)
    if load_scale.shape != (len(spec.load_buses),):
        raise ValueError(f"load_scale must have {len(spec.load_buses)} entries, got {load_scale.shape}")

    # net complex power drawn at each bus, per phase
    s_bus = np.zeros(n, dtype=complex)
    for load, scale in zip(spec.load_buses, load_scale):
        s_bus[topo.index[load.bus]] += scale * complex(load.base_p_pu, load.base_q_pu)
    for cap, on in zip(spec.cap_buses, dev.cap_on):
        if on:
            s_bus[topo.index[cap.bus]] -= 1j * cap.q_injection_pu
    for batt, d in zip(spec.batt_buses, dev.discharge):
        s_bus[topo.index[batt.bus]] -= d * batt.max_discharge_pu
    s = np.where(topo.phase_mask, s_bus[None, :], 0.0)

    ratio = np.ones(n)
    for reg, tap in zip(spec.reg_buses, dev.tap):
        ratio[topo.index[reg.bus]] = reg.ratio(tap)
    cum = np.ones(n)
    for i in topo.order[1:]:
        cum[i] = cum[topo.parent[i]] * ratio[i]

    z = np.zeros(n, dtype=complex)
    for i in topo.order[1:]:
        line = spec.lines[topo.line_of[i]]
        z[i] = complex(line.resistance_pu, line.reactance_pu) / cum[topo.parent[i]] ** 2
    drop = topo.path @ (z[:, None] * topo.path.T)

    v_ref = np.ones((3, n), dtype=complex)
    converged = False
    iterations = 0
    with np.errstate(all="ignore"):
        for iterations in range(1, max_iter + 1):
            current = np.conj(s / v_ref)
            v_new = 1.0 - current @ drop.T
            change = np.max(np.abs((v_new - v_ref) * cum))
            v_ref = v_new
            if not np.isfinite(change):
                break
            if change <= tol:
                converged = True
                break
        current = np.conj(s / v_ref)
        branch = current @ topo.path  # referred current in the line into each bus
        loss = float(np.sum(np.abs(branch) ** 2 * z.real[None, :]))
        total = float(np.sum(current.sum(axis=1).real))

    vmag = np.abs(v_ref * cum).T
    if converged and not np.all(vmag[topo.phase_mask.T] > 0):
        converged = False
    vmag = np.where(topo.phase_mask.T, vmag, np.nan)
    return PowerFlowSolution(vmag, loss, total, converged, iterations)
