"""Renewable profiles, forecast tensors and task families."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import GridSystem, system_from_dict, system_to_dict

SHAPES = ("diurnal-solar", "gusty-wind", "csv")


class ScenarioError(ValueError):
    pass


def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed from a tuple of non-negative integers."""
    ss = np.random.SeedSequence([int(k) for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0]) & (2**63 - 1)


@dataclass(frozen=True, eq=False)
class RenewableProfile:
    device: str
    actual: np.ndarray
    cap: float

    @property
    def horizon(self) -> int:
        return len(self.actual)


@dataclass(frozen=True, eq=False)
class ForecastTensor:
    """``values[t, x]`` is the forecast issued at step t for step t + x (kW)."""

    device: str
    values: np.ndarray
    kappa: float
    tau: float

    @property
    def lookahead_steps(self) -> int:
        return self.values.shape[1]


def lookahead_steps(kappa: float, tau: float) -> int:
    k = kappa / tau
    if k < 1 or abs(k - round(k)) > 1e-9:
        raise ScenarioError(f"kappa/tau must be a positive integer, got {k}")
    return int(round(k))


def read_profiles_csv(path, T: int | None = None) -> dict[str, np.ndarray]:
    """One column per device (header row of ids), one row per step, kW."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ScenarioError(f"{path}: empty csv")
    header, body = rows[0], rows[1:]
    try:
        data = np.array([[float(v) for v in row] for row in body if row], dtype=float)
    except ValueError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    data = data.reshape(-1, len(header))
    if T is not None and len(data) < T:
        raise ScenarioError(f"{path}: {len(data)} rows, need at least {T}")
    return {dev: data[:T, j].copy() for j, dev in enumerate(header)}


def generate_profile(cap: float, T: int, shape: str, seed: int, device: str = "",
                     csv_path=None) -> RenewableProfile:
    if cap <= 0 or T < 1:
        raise ScenarioError("need cap > 0 and T >= 1")
    rng = np.random.default_rng(seed)
    if shape == "diurnal-solar":
        peak = cap * rng.uniform(0.6, 0.95)
        phase = (np.arange(T) + 0.5) / T
        bump = 0.5 * (1.0 - np.cos(2.0 * np.pi * phase))
        actual = peak * bump * rng.lognormal(0.0, 0.1, size=T)
    elif shape == "gusty-wind":
        mean = cap * rng.uniform(0.3, 0.7)
        x = np.empty(T)
        x[0] = mean * rng.uniform(0.5, 1.5)
        # discrete Ornstein-Uhlenbeck recurrence with reversion 0.15 per step
        shocks = rng.normal(0.0, 0.08 * cap, size=T)
        for t in range(1, T):
            x[t] = x[t - 1] + 0.15 * (mean - x[t - 1]) + shocks[t]
            x[t] = min(max(x[t], 0.0), cap)
        actual = x
    elif shape == "csv":
        if csv_path is None:
            raise ScenarioError("csv shape needs csv_path")
        cols = read_profiles_csv(csv_path, T)
        if device not in cols:
            raise ScenarioError(f"{csv_path}: no column for device {device!r}")
        actual = cols[device]
    else:
        raise ScenarioError(f"unknown profile shape {shape!r}")
    return RenewableProfile(device, np.clip(actual, 0.0, cap), float(cap))


def synthesize_forecast(profile: RenewableProfile, xi: float, kappa: float, tau: float,
                        seed: int) -> ForecastTensor:
    """Forecasts with relative Gaussian error growing linearly in lookahead.

    The error std at lookahead x is ``xi * x / K`` with K = kappa/tau, so the
    farthest lookahead has relative error scale ``xi``; lookahead 0 is the
    realized value. Targets past the horizon reuse the last actual value.
    """
    if not 0 <= xi <= 1:
        raise ScenarioError(f"error level must lie in [0, 1], got {xi}")
    K = lookahead_steps(kappa, tau)
    T = profile.horizon
    idx = np.minimum(np.arange(T)[:, None] + np.arange(K)[None, :], T - 1)
    target = profile.actual[idx]
    z = np.random.default_rng(seed).standard_normal((T, K))
    rel_std = xi * np.arange(K) / K
    values = np.clip(target * (1.0 + z * rel_std), 0.0, profile.cap)
    values[:, 0] = profile.actual
    return ForecastTensor(profile.device, values, kappa, tau)


@dataclass(frozen=True, eq=False)
class Task:
    """One restoration problem instance."""

    task_id: int
    system: GridSystem
    profiles: dict[str, RenewableProfile]
    forecasts: dict[str, ForecastTensor]
    xi: float
    horizon: int = 72
    tau: float = 1 / 12
    kappa: float = 4.0
    mu: float = 1.0
    lam: float = 1e8
    seed: int = 0

    def __post_init__(self):
        names = [d.id for d in self.system.fleet.renewables]
        if sorted(names) != sorted(self.profiles) or sorted(names) != sorted(self.forecasts):
            raise ScenarioError("every renewable needs exactly one profile and one forecast")
        for p in self.profiles.values():
            if p.horizon != self.horizon:
                raise ScenarioError(f"profile {p.device} has {p.horizon} steps, horizon is {self.horizon}")

    @property
    def loads(self):
        return self.system.loads

    @property
    def fleet(self):
        return self.system.fleet

    @property
    def network(self):
        return self.system.network

    @property
    def lookahead(self) -> int:
        return lookahead_steps(self.kappa, self.tau)

    def resample_forecasts(self, seed: int) -> dict[str, ForecastTensor]:
        """Fresh forecast draws over the same actual profiles."""
        if self.xi == 0:
            return self.forecasts
        return {
            dev: synthesize_forecast(p, self.xi, self.kappa, self.tau, derive_seed(self.seed, 7, seed, j))
            for j, (dev, p) in enumerate(sorted(self.profiles.items()))
        }


def _shape_for(der) -> str:
    return "diurnal-solar" if der.resource == "solar" else "gusty-wind"


def make_task(system: GridSystem, demand_p, task_id: int, seed: int, *, xi: float = 0.0,
              kappa: float = 4.0, tau: float = 1 / 12, horizon: int = 72, mu: float = 1.0,
              lam: float = 1e8, csv_path=None) -> Task:
    system = GridSystem(system.network, system.loads.with_demands(demand_p), system.fleet, system.name)
    profiles, forecasts = {}, {}
    for j, der in enumerate(system.fleet.renewables):
        shape = "csv" if csv_path is not None else _shape_for(der)
        prof = generate_profile(der.capacity, horizon, shape, derive_seed(seed, 1, j), der.id, csv_path)
        profiles[der.id] = prof
        forecasts[der.id] = synthesize_forecast(prof, xi, kappa, tau, derive_seed(seed, 2, j))
    return Task(task_id, system, profiles, forecasts, xi, horizon, tau, kappa, mu, lam, seed)


def make_task_family(system: GridSystem, M: int, demand_range=(20.0, 160.0), xi: float = 0.0,
                     kappa: float = 4.0, seed: int = 0, **task_kw) -> list[Task]:
    """M tasks with per-load active demands drawn uniformly from ``demand_range``.

    The demand and renewable streams of task m depend only on (seed, m), so
    families built with different ``xi`` or ``kappa`` share their scenarios.
    """
    lo, hi = demand_range
    if M < 1 or not 0 < lo <= hi:
        raise ScenarioError("need M >= 1 and 0 < lo <= hi")
    tasks = []
    for m in range(M):
        tseed = derive_seed(seed, m)
        demands = np.random.default_rng(derive_seed(tseed, 0)).uniform(lo, hi, size=len(system.loads))
        tasks.append(make_task(system, demands, m, tseed, xi=xi, kappa=kappa, **task_kw))
    return tasks


def split_tasks(tasks: list[Task], n_train: int = 32) -> tuple[list[Task], list[Task]]:
    if not 0 < n_train <= len(tasks):
        raise ScenarioError(f"n_train must lie in [1, {len(tasks)}]")
    return tasks[:n_train], tasks[n_train:]


# -- JSON ---------------------------------------------------------------------

def task_to_dict(task: Task) -> dict:
    return {
        "task_id": task.task_id,
        "seed": task.seed,
        "xi": task.xi,
        "horizon": task.horizon,
        "tau": task.tau,
        "kappa": task.kappa,
        "mu": task.mu,
        "lam": task.lam,
        "system": system_to_dict(task.system),
        "profiles": {k: {"cap": p.cap, "actual": p.actual.tolist()} for k, p in task.profiles.items()},
        "forecasts": {k: f.values.tolist() for k, f in task.forecasts.items()},
    }


def task_from_dict(d: dict) -> Task:
    profiles = {k: RenewableProfile(k, np.array(v["actual"], dtype=float), float(v["cap"]))
                for k, v in d["profiles"].items()}
    forecasts = {k: ForecastTensor(k, np.array(v, dtype=float), d["kappa"], d["tau"])
                 for k, v in d["forecasts"].items()}
    return Task(d["task_id"], system_from_dict(d["system"]), profiles, forecasts, d["xi"],
                d["horizon"], d["tau"], d["kappa"], d["mu"], d["lam"], d["seed"])


def dump_tasks(tasks: list[Task]) -> str:
    return json.dumps({"format": "metaclr-tasks/1", "tasks": [task_to_dict(t) for t in tasks]})


def save_tasks(tasks: list[Task], path) -> None:
    Path(path).write_text(dump_tasks(tasks))


def load_tasks(path) -> list[Task]:
    data = json.loads(Path(path).read_text())
    return [task_from_dict(d) for d in data["tasks"]]
