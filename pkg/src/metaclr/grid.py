"""Radial distribution grid description and the LinDistFlow voltage solver.

Powers are carried in kW/kVAr at the API surface and converted to per-unit
with ``NetworkModel.base_kva`` inside the solver. Voltages are squared
magnitudes (p.u.^2), the natural LinDistFlow variable.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

DER_KINDS = ("fuel", "storage", "renewable")


class GridError(ValueError):
    """Raised for malformed network, load or fleet definitions."""


@dataclass(frozen=True)
class Line:
    from_bus: str
    to_bus: str
    r: float
    x: float


@dataclass(frozen=True, eq=False)
class NetworkModel:
    buses: tuple[str, ...]
    root: str
    lines: tuple[Line, ...]
    v_min: float = 0.95**2
    v_max: float = 1.05**2
    root_voltage: float = 1.0
    base_kva: float = 1000.0
    base_kv: float = 4.16

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(str(b) for b in self.buses))
        object.__setattr__(self, "root", str(self.root))
        object.__setattr__(self, "lines", tuple(self.lines))
        if self.root not in self.buses:
            raise GridError(f"root bus {self.root!r} not among buses")
        if len(set(self.buses)) != len(self.buses):
            raise GridError("duplicate bus ids")
        if not self.v_min < self.v_max:
            raise GridError("v_min must be below v_max")
        for ln in self.lines:
            if ln.r <= 0 or ln.x <= 0:
                raise GridError(f"line {ln.from_bus}-{ln.to_bus}: impedance must be positive")
        self._tree  # validates radiality eagerly

    @cached_property
    def index(self) -> dict[str, int]:
        return {b: i for i, b in enumerate(self.buses)}

    @cached_property
    def _tree(self):
        """(parent, line_r, line_x, order) with ``order`` a root-first traversal."""
        n = len(self.buses)
        if len(self.lines) != n - 1:
            raise GridError(f"radial network needs {n - 1} lines, got {len(self.lines)}")
        adj: dict[int, list[tuple[int, float, float]]] = {i: [] for i in range(n)}
        for ln in self.lines:
            try:
                a, b = self.index[str(ln.from_bus)], self.index[str(ln.to_bus)]
            except KeyError as exc:
                raise GridError(f"line references unknown bus {exc.args[0]!r}") from None
            if a == b:
                raise GridError("self-loop line")
            adj[a].append((b, ln.r, ln.x))
            adj[b].append((a, ln.r, ln.x))
        root = self.index[self.root]
        parent = np.full(n, -1)
        r = np.zeros(n)
        x = np.zeros(n)
        seen = {root}
        order = [root]
        for node in order:
            for nb, lr, lx in adj[node]:
                if nb in seen:
                    continue
                seen.add(nb)
                parent[nb] = node
                r[nb], x[nb] = lr, lx
                order.append(nb)
        if len(order) != n:
            raise GridError("network is not connected (or contains a cycle)")
        return parent, r, x, np.array(order)

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @cached_property
    def voltage_sensitivity(self) -> tuple[np.ndarray, np.ndarray]:
        """Matrices (Rs, Xs) with v = v_root - 2 (Rs @ w_p + Xs @ w_q) for per-unit withdrawals w."""
        eye = np.eye(self.n_buses)
        rs = (self.root_voltage - _lindistflow(self, eye, np.zeros_like(eye), self.root_voltage)) / 2
        xs = (self.root_voltage - _lindistflow(self, np.zeros_like(eye), eye, self.root_voltage)) / 2
        return rs, xs


@dataclass(frozen=True)
class Load:
    id: str
    bus: str
    demand_p: float
    demand_q: float
    priority: float

    @property
    def q_ratio(self) -> float:
        return self.demand_q / self.demand_p


@dataclass(frozen=True)
class LoadSet:
    loads: tuple[Load, ...]

    def __post_init__(self):
        object.__setattr__(self, "loads", tuple(self.loads))
        for ld in self.loads:
            if ld.demand_p <= 0 or ld.demand_q < 0:
                raise GridError(f"load {ld.id}: need demand_p > 0 and demand_q >= 0")
            if not 0 < ld.priority <= 1:
                raise GridError(f"load {ld.id}: priority must lie in (0, 1]")

    def __len__(self):
        return len(self.loads)

    @property
    def demand_p(self) -> np.ndarray:
        return np.array([ld.demand_p for ld in self.loads])

    @property
    def demand_q(self) -> np.ndarray:
        return np.array([ld.demand_q for ld in self.loads])

    @property
    def priorities(self) -> np.ndarray:
        return np.array([ld.priority for ld in self.loads])

    def with_demands(self, demand_p) -> "LoadSet":
        """Replace active demands, keeping each load's power factor."""
        return LoadSet(tuple(
            Load(ld.id, ld.bus, float(p), float(p) * ld.q_ratio, ld.priority)
            for ld, p in zip(self.loads, demand_p, strict=True)
        ))


@dataclass(frozen=True)
class Der:
    """One distributed energy resource.

    Power bounds are in kW with discharge/generation positive. Storage uses
    ``p_charge``/``p_discharge`` for its asymmetric box; the other kinds use
    ``p_min``/``p_max`` (renewables: ``p_max`` is the nameplate capacity).
    """

    id: str
    kind: str
    bus: str
    p_min: float = 0.0
    p_max: float = 0.0
    alpha_min: float = 0.0
    alpha_max: float = math.pi / 4
    fuel_reserve: float | None = None
    p_charge: float | None = None
    p_discharge: float | None = None
    soc_min: float | None = None
    soc_max: float | None = None
    soc_init: float | None = None
    eff_charge: float = 0.95
    eff_discharge: float = 0.95
    resource: str | None = None

    def __post_init__(self):
        if self.kind not in DER_KINDS:
            raise GridError(f"DER {self.id}: unknown kind {self.kind!r}")
        if not 0 <= self.alpha_min <= self.alpha_max < math.pi / 2:
            raise GridError(f"DER {self.id}: need 0 <= alpha_min <= alpha_max < pi/2")
        if self.kind == "fuel":
            if self.fuel_reserve is None or self.fuel_reserve <= 0 or self.p_max <= 0:
                raise GridError(f"DER {self.id}: fuel unit needs fuel_reserve > 0 and p_max > 0")
        elif self.kind == "storage":
            need = (self.p_charge, self.p_discharge, self.soc_min, self.soc_max, self.soc_init)
            if any(v is None for v in need):
                raise GridError(f"DER {self.id}: storage needs power and SOC parameters")
            if self.p_charge <= 0 or self.p_discharge <= 0:
                raise GridError(f"DER {self.id}: charge/discharge bounds must be positive")
            if not self.soc_min <= self.soc_init <= self.soc_max:
                raise GridError(f"DER {self.id}: need soc_min <= soc_init <= soc_max")
            if not (0 < self.eff_charge <= 1 and 0 < self.eff_discharge <= 1):
                raise GridError(f"DER {self.id}: efficiencies must lie in (0, 1]")
        elif self.p_max <= 0:
            raise GridError(f"DER {self.id}: renewable capacity must be positive")

    @property
    def capacity(self) -> float:
        return self.p_max


@dataclass(frozen=True)
class DerFleet:
    ders: tuple[Der, ...]

    def __post_init__(self):
        object.__setattr__(self, "ders", tuple(self.ders))

    def __len__(self):
        return len(self.ders)

    def of_kind(self, kind: str) -> list[Der]:
        return [d for d in self.ders if d.kind == kind]

    @property
    def renewables(self) -> list[Der]:
        return self.of_kind("renewable")

    @property
    def storage(self) -> list[Der]:
        return self.of_kind("storage")

    @property
    def fuel(self) -> list[Der]:
        return self.of_kind("fuel")


@dataclass(frozen=True)
class GridSystem:
    network: NetworkModel
    loads: LoadSet
    fleet: DerFleet
    name: str = "custom"

    def __post_init__(self):
        for ld in self.loads.loads:
            if ld.bus not in self.network.index:
                raise GridError(f"load {ld.id} attaches to unknown bus {ld.bus!r}")
        for d in self.fleet.ders:
            if d.bus not in self.network.index:
                raise GridError(f"DER {d.id} attaches to unknown bus {d.bus!r}")

    def __iter__(self):
        return iter((self.network, self.loads, self.fleet))


# -- power flow ---------------------------------------------------------------

def _lindistflow(net: NetworkModel, w_p: np.ndarray, w_q: np.ndarray, v0: float) -> np.ndarray:
    parent, r, x, order = net._tree
    flow_p = w_p.astype(float).copy()
    flow_q = w_q.astype(float).copy()
    # leaves first: each bus passes its accumulated downstream withdrawal to its parent
    for b in order[:0:-1]:
        flow_p[parent[b]] += flow_p[b]
        flow_q[parent[b]] += flow_q[b]
    v = np.empty_like(flow_p)
    v[order[0]] = v0
    for b in order[1:]:
        v[b] = v[parent[b]] - 2.0 * (r[b] * flow_p[b] + x[b] * flow_q[b])
    return v


def solve_power_flow(net: NetworkModel, p_injection, q_injection) -> np.ndarray:
    """Squared bus voltages (p.u.^2) from net bus injections in kW / kVAr.

    Injections are generation minus consumption, one entry per bus in
    ``net.buses`` order; a trailing axis batches independent cases. The root
    injection is ignored since the root acts as the slack bus.
    """
    p = np.asarray(p_injection, dtype=float)
    q = np.asarray(q_injection, dtype=float)
    if p.shape[:1] != (net.n_buses,) or q.shape != p.shape:
        raise GridError(f"expected injections for {net.n_buses} buses, got shapes {p.shape}, {q.shape}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise GridError("injections must be finite")
    return _lindistflow(net, -p / net.base_kva, -q / net.base_kva, net.root_voltage)


def voltage_penalty(v, net: NetworkModel, lam: float) -> float:
    """-lam * ||[v - v_max]^+ + [v_min - v]^+||^2 on squared magnitudes."""
    v = np.asarray(v, dtype=float)
    viol = np.maximum(v - net.v_max, 0.0) + np.maximum(net.v_min - v, 0.0)
    return -lam * float(viol @ viol)


# -- builders -----------------------------------------------------------------

IEEE13_PRIORITIES = (1.0, 1.0, 0.9, 0.85, 0.8, 0.8, 0.75, 0.7, 0.65, 0.5, 0.45, 0.4, 0.3, 0.3, 0.2)

_IEEE13_LINES = (
    ("650", "632"), ("632", "633"), ("633", "634"), ("632", "645"), ("645", "646"),
    ("632", "671"), ("671", "692"), ("692", "675"), ("671", "684"), ("684", "611"),
    ("684", "652"), ("671", "680"),
)

# (id, bus, base kW, base kVAr); reactive ratios follow the feeder's spot loads
_IEEE13_LOADS = (
    ("671", "671", 150.0, 86.0), ("634a", "634", 160.0, 110.0), ("634b", "634", 120.0, 90.0),
    ("634c", "634", 120.0, 90.0), ("675a", "675", 140.0, 55.0), ("675b", "675", 68.0, 60.0),
    ("675c", "675", 120.0, 88.0), ("645", "645", 100.0, 74.0), ("646", "646", 130.0, 75.0),
    ("692", "692", 100.0, 89.0), ("652", "652", 128.0, 86.0), ("611", "611", 100.0, 47.0),
    ("670a", "632", 20.0, 12.0), ("670b", "632", 66.0, 38.0), ("670c", "632", 117.0, 68.0),
)


def _storage(id: str, bus: str) -> Der:
    return Der(id, "storage", bus, p_charge=250.0, p_discharge=250.0, soc_min=160.0,
               soc_max=1250.0, soc_init=1200.0)


def _microturbine(id: str, bus: str) -> Der:
    return Der(id, "fuel", bus, p_min=0.0, p_max=400.0, fuel_reserve=1200.0)


def _renewable(id: str, bus: str, resource: str) -> Der:
    return Der(id, "renewable", bus, p_min=0.0, p_max=300.0, resource=resource)


def build_ieee13_analog(r: float = 0.01, x: float = 0.02) -> GridSystem:
    """Balanced single-phase analog of the modified IEEE 13-bus feeder."""
    buses = ["650", "632", "633", "634", "645", "646", "671", "692", "675", "684", "611", "652", "680"]
    net = NetworkModel(tuple(buses), "650", tuple(Line(a, b, r, x) for a, b in _IEEE13_LINES))
    loads = LoadSet(tuple(
        Load(lid, bus, p, q, prio) for (lid, bus, p, q), prio in zip(_IEEE13_LOADS, IEEE13_PRIORITIES)
    ))
    fleet = DerFleet((
        _storage("ST", "632"),
        _microturbine("MT", "671"),
        _renewable("PV", "675", "solar"),
        _renewable("WT", "680", "wind"),
    ))
    return GridSystem(net, loads, fleet, name="ieee13")


def build_ieee123_analog(r: float = 0.01, x: float = 0.02) -> GridSystem:
    """123-bus radial analog: six feeder branches with laterals, 20 loads, 6 DERs."""
    buses = ["150"]
    lines = []
    trunk_heads = []
    # six branches of 20 buses each: a 6-bus backbone with two 7-bus laterals
    for br in range(6):
        prev = "150"
        backbone = []
        for k in range(6):
            b = f"{br + 1}{k:02d}"
            buses.append(b)
            lines.append(Line(prev, b, r, x))
            backbone.append(b)
            prev = b
        trunk_heads.append(backbone)
        for lat, anchor in enumerate((backbone[1], backbone[3])):
            prev = anchor
            for k in range(7):
                b = f"{br + 1}{lat + 1}{k}"
                buses.append(b)
                lines.append(Line(prev, b, r, x))
                prev = b
    # two spare buses hanging off the root complete the 123-bus count
    for b in ("151", "152"):
        buses.append(b)
        lines.append(Line("150", b, r, x))
    net = NetworkModel(tuple(buses), "150", tuple(lines))

    priorities = np.round(np.linspace(1.0, 0.2, 20), 4)
    load_buses = []
    for br in range(6):
        load_buses += [f"{br + 1}02", f"{br + 1}05", f"{br + 1}13"]
    load_buses += ["116", "226"]
    loads = []
    for i, (bus, prio) in enumerate(zip(load_buses, priorities)):
        p = 60.0 + 10.0 * (i % 7)
        loads.append(Load(f"L{i + 1:02d}", bus, p, 0.5 * p, float(prio)))
    fleet = DerFleet((
        _storage("ST1", "101"), _storage("ST2", "401"),
        _microturbine("MT1", "201"), _microturbine("MT2", "501"),
        _renewable("PV", "301", "solar"), _renewable("WT", "601", "wind"),
    ))
    return GridSystem(net, LoadSet(tuple(loads)), fleet, name="ieee123")


SYSTEMS = {"ieee13": build_ieee13_analog, "ieee123": build_ieee123_analog}


# -- JSON schema --------------------------------------------------------------

def system_to_dict(system: GridSystem) -> dict:
    net = system.network
    return {
        "name": system.name,
        "buses": list(net.buses),
        "root": net.root,
        "lines": [{"from": ln.from_bus, "to": ln.to_bus, "r": ln.r, "x": ln.x} for ln in net.lines],
        "v_min": net.v_min,
        "v_max": net.v_max,
        "root_voltage": net.root_voltage,
        "base_kva": net.base_kva,
        "base_kv": net.base_kv,
        "loads": [asdict(ld) for ld in system.loads.loads],
        "ders": [{k: v for k, v in asdict(d).items() if v is not None} for d in system.fleet.ders],
    }


def system_from_dict(data: dict) -> GridSystem:
    try:
        net = NetworkModel(
            tuple(data["buses"]),
            data["root"],
            tuple(Line(str(ln["from"]), str(ln["to"]), float(ln["r"]), float(ln["x"])) for ln in data["lines"]),
            v_min=float(data.get("v_min", 0.95**2)),
            v_max=float(data.get("v_max", 1.05**2)),
            root_voltage=float(data.get("root_voltage", 1.0)),
            base_kva=float(data.get("base_kva", 1000.0)),
            base_kv=float(data.get("base_kv", 4.16)),
        )
        loads = LoadSet(tuple(Load(**{**ld, "bus": str(ld["bus"])}) for ld in data["loads"]))
        fleet = DerFleet(tuple(Der(**{**d, "bus": str(d["bus"])}) for d in data["ders"]))
    except (KeyError, TypeError) as exc:
        raise GridError(f"malformed system definition: {exc}") from None
    return GridSystem(net, loads, fleet, name=data.get("name", "custom"))


def load_system(path) -> GridSystem:
    return system_from_dict(json.loads(Path(path).read_text()))


def save_system(system: GridSystem, path) -> None:
    Path(path).write_text(json.dumps(system_to_dict(system), indent=2))
