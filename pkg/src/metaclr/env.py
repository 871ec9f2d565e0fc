"""Episodic restoration environment.

A step takes a policy output, maps it onto the device boxes tightened by the
current SOC and fuel reserve, repairs the active power balance, runs the
linear power flow on the realized injections and scores the result.

Action vector layout (physical units)::

    [load kW (N) | storage kW, discharge > 0 (S) | fuel kW (F) | angles rad (G-1)]

Angles cover every DER in fleet order except the first one, whose angle is
held at its lower bound.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .grid import voltage_penalty
from .scenarios import ForecastTensor, Task


class EnvError(RuntimeError):
    pass


def soc_update(soc, p, eff_charge, eff_discharge, tau):
    """SOC after one interval at power ``p`` (kW, discharge positive).

    Discharging removes ``p / eff_discharge * tau``; charging stores
    ``eff_charge * |p| * tau``.
    """
    p = np.asarray(p, dtype=float)
    rate = np.where(p > 0, 1.0 / np.asarray(eff_discharge, dtype=float), eff_charge)
    out = np.asarray(soc, dtype=float) - rate * p * tau
    return float(out) if out.ndim == 0 else out


@dataclass(eq=False)
class EnvState:
    forecast: np.ndarray
    prev_restoration: np.ndarray
    soc: np.ndarray
    fuel: np.ndarray
    t: int

    def as_vector(self) -> np.ndarray:
        return np.concatenate((self.forecast.ravel(), self.prev_restoration, self.soc,
                               self.fuel, (float(self.t),)))

    @property
    def dim(self) -> int:
        return self.forecast.size + self.prev_restoration.size + self.soc.size + self.fuel.size + 1


@dataclass(eq=False)
class Action:
    load_levels: np.ndarray
    storage_p: np.ndarray
    fuel_p: np.ndarray
    angles: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate((self.load_levels, self.storage_p, self.fuel_p, self.angles))


@dataclass(eq=False)
class StepOutcome:
    state: EnvState
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


def state_dim(task: Task) -> int:
    fleet = task.fleet
    return (len(fleet.renewables) * task.lookahead + len(task.loads)
            + len(fleet.storage) + len(fleet.fuel) + 1)


def action_dim(task: Task) -> int:
    fleet = task.fleet
    return len(task.loads) + len(fleet.storage) + len(fleet.fuel) + len(fleet) - 1


class ClrEnv:
    """Single-episode environment over one task.

    ``forecasts`` overrides the task's stored forecast tensors, which is how
    rollouts draw fresh forecast noise without touching the actual profiles.
    """

    def __init__(self, task: Task, forecasts: dict[str, ForecastTensor] | None = None):
        self.task = task
        net, loads, fleet = task.system
        self.tau = task.tau
        self.T = task.horizon
        self.N = len(loads)
        self.demand = loads.demand_p
        self.q_ratio = loads.demand_q / self.demand
        self.priority = loads.priorities

        ders = fleet.ders
        kinds = np.array([d.kind for d in ders])
        self.i_st = np.flatnonzero(kinds == "storage")
        self.i_fu = np.flatnonzero(kinds == "fuel")
        self.i_re = np.flatnonzero(kinds == "renewable")
        st, fu, re = fleet.storage, fleet.fuel, fleet.renewables
        self.S, self.F, self.R = len(st), len(fu), len(re)
        self.p_ch = np.array([d.p_charge for d in st], dtype=float)
        self.p_dis = np.array([d.p_discharge for d in st], dtype=float)
        self.soc_min = np.array([d.soc_min for d in st], dtype=float)
        self.soc_max = np.array([d.soc_max for d in st], dtype=float)
        self.soc0 = np.array([d.soc_init for d in st], dtype=float)
        self.eff_ch = np.array([d.eff_charge for d in st], dtype=float)
        self.eff_dis = np.array([d.eff_discharge for d in st], dtype=float)
        self.fu_lo = np.array([d.p_min for d in fu], dtype=float)
        self.fu_hi = np.array([d.p_max for d in fu], dtype=float)
        self.fuel0 = np.array([d.fuel_reserve for d in fu], dtype=float)
        self.alpha_lo = np.array([d.alpha_min for d in ders])
        self.alpha_hi = np.array([d.alpha_max for d in ders])
        self.caps = np.array([d.capacity for d in re], dtype=float)

        fc = forecasts if forecasts is not None else task.forecasts
        self.actual = np.stack([task.profiles[d.id].actual for d in re]) if re else np.zeros((0, self.T))
        K = task.lookahead
        self.forecast = (np.stack([fc[d.id].values for d in re]) if re
                         else np.zeros((0, self.T, K)))

        self.net = net
        nb = net.n_buses
        self.load_bus = np.zeros((nb, self.N))
        for i, ld in enumerate(loads.loads):
            self.load_bus[net.index[ld.bus], i] = 1.0
        self.der_bus = np.zeros((nb, len(ders)))
        for j, d in enumerate(ders):
            self.der_bus[net.index[d.bus], j] = 1.0
        rs, xs = net.voltage_sensitivity
        self._rs = 2.0 * rs / net.base_kva
        self._xs = 2.0 * xs / net.base_kva
        self.lam = task.lam
        self.mu = task.mu
        self.n_action = self.N + self.S + self.F + len(ders) - 1
        self.state: EnvState | None = None

    # -- lifecycle ------------------------------------------------------------

    def reset(self) -> EnvState:
        self._prev_served = np.zeros(self.N)
        self.state = EnvState(self.forecast[:, 0, :].copy(), np.zeros(self.N), self.soc0.copy(),
                              self.fuel0.copy(), 1)
        return self.state

    # -- action handling ------------------------------------------------------

    def bounds(self, state: EnvState) -> tuple[np.ndarray, np.ndarray]:
        """State-tightened lower/upper bounds of the physical action vector."""
        tau = self.tau
        dis_max = np.minimum(self.p_dis, np.maximum(state.soc - self.soc_min, 0.0) * self.eff_dis / tau)
        ch_max = np.minimum(self.p_ch, np.maximum(self.soc_max - state.soc, 0.0) / (self.eff_ch * tau))
        fu_cap = state.fuel / tau
        lo = np.concatenate((np.zeros(self.N), -ch_max, np.minimum(self.fu_lo, fu_cap), self.alpha_lo[1:]))
        hi = np.concatenate((self.demand, dis_max, np.minimum(self.fu_hi, fu_cap), self.alpha_hi[1:]))
        return lo, hi

    def _split(self, vec: np.ndarray) -> Action:
        a, b, c = self.N, self.N + self.S, self.N + self.S + self.F
        return Action(vec[:a], vec[a:b], vec[b:c], vec[c:])

    def nominal(self, raw) -> np.ndarray:
        """Map policy output in [-1, 1] onto the untightened device boxes."""
        u = np.clip(np.asarray(raw, dtype=float), -1.0, 1.0)
        if u.shape != (self.n_action,):
            raise EnvError(f"action has shape {u.shape}, expected ({self.n_action},)")
        a, b, c = self.N, self.N + self.S, self.N + self.S + self.F
        half = 0.5 * (u + 1.0)
        us = u[a:b]
        return np.concatenate((
            half[:a] * self.demand,
            np.where(us >= 0, us * self.p_dis, us * self.p_ch),
            self.fu_lo + half[b:c] * (self.fu_hi - self.fu_lo),
            self.alpha_lo[1:] + half[c:] * (self.alpha_hi[1:] - self.alpha_lo[1:]),
        ))

    def raw_from_action(self, action: Action) -> np.ndarray:
        """Inverse of :meth:`nominal` for actions inside the untightened boxes."""
        v = action.to_vector()
        a, b, c = self.N, self.N + self.S, self.N + self.S + self.F
        st = v[a:b]
        span_f = self.fu_hi - self.fu_lo
        span_a = self.alpha_hi[1:] - self.alpha_lo[1:]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.concatenate((
                2.0 * v[:a] / self.demand - 1.0,
                np.where(st >= 0, st / self.p_dis, st / self.p_ch),
                np.where(span_f > 0, 2.0 * (v[b:c] - self.fu_lo) / span_f - 1.0, 0.0),
                np.where(span_a > 0, 2.0 * (v[c:] - self.alpha_lo[1:]) / span_a - 1.0, 0.0),
            ))

    def clip(self, action: Action | np.ndarray, state: EnvState | None = None) -> Action:
        state = state or self.state
        vec = action.to_vector() if isinstance(action, Action) else np.asarray(action, dtype=float)
        lo, hi = self.bounds(state)
        return self._split(np.minimum(np.maximum(vec, lo), hi))

    def project_action(self, raw, state: EnvState | None = None) -> Action:
        return self.clip(self.nominal(raw), state)

    def reconcile(self, action: Action, renewables: np.ndarray, state: EnvState | None = None):
        """Repair the active balance: (served, storage_p, fuel_p, renewables used, curtailment)."""
        state = state or self.state
        loads = action.load_levels.copy()
        st = action.storage_p.copy()
        fu = action.fuel_p.copy()
        re = np.asarray(renewables, dtype=float).copy()

        discharge = st[st > 0].sum()
        charge = -st[st < 0].sum()
        supply = re.sum() + discharge + fu.sum()
        if charge > supply:
            st[st < 0] *= supply / charge
            charge = supply
        gen = supply - charge
        commanded = loads.sum()
        curtailed = 0.0
        if commanded <= gen:
            surplus = gen - commanded
            if surplus > 0:
                ch_max = np.minimum(self.p_ch, np.maximum(self.soc_max - state.soc, 0.0) / (self.eff_ch * self.tau))
                for j in range(self.S):
                    take = min(surplus, max(st[j] + ch_max[j], 0.0))
                    st[j] -= take
                    surplus -= take
            if surplus > 0:
                total_re = re.sum()
                curtailed = min(surplus, total_re)
                if total_re > 0:
                    re *= 1.0 - curtailed / total_re
                surplus -= curtailed
            if surplus > 0:
                fu *= 1.0 - surplus / fu.sum()
            served = loads
        else:
            served = loads * (gen / commanded)
        return served, st, fu, re, curtailed

    # -- dynamics -------------------------------------------------------------

    def step(self, action) -> StepOutcome:
        state = self.state
        if state is None:
            raise EnvError("call reset() before step()")
        if state.t > self.T:
            raise EnvError(f"episode finished after {self.T} steps")
        projected = self.clip(action, state) if isinstance(action, Action) else self.project_action(action, state)
        k = state.t - 1
        served, st, fu, re, curtailed = self.reconcile(projected, self.actual[:, k], state)

        p_der = np.empty(len(self.alpha_lo))
        p_der[self.i_st], p_der[self.i_fu], p_der[self.i_re] = st, fu, re
        angles = np.concatenate((self.alpha_lo[:1], projected.angles))
        q_der = p_der * np.tan(angles)
        q_load = served * self.q_ratio
        w_p = self.load_bus @ served - self.der_bus @ p_der
        w_q = self.load_bus @ q_load - self.der_bus @ q_der
        v = self.net.root_voltage - (self._rs @ w_p + self._xs @ w_q)

        priority_term = float(self.priority @ served)
        fluctuation = float(self.mu * (self.priority @ np.maximum(self._prev_served - served, 0.0)))
        v_pen = voltage_penalty(v, self.net, self.lam)
        reward = priority_term - fluctuation + v_pen

        soc = np.clip(soc_update(state.soc, st, self.eff_ch, self.eff_dis, self.tau), self.soc_min, self.soc_max)
        fuel = np.maximum(state.fuel - fu * self.tau, 0.0)
        t = state.t + 1
        nxt = EnvState(self.forecast[:, min(t, self.T) - 1, :], served / self.demand, soc, fuel, t)
        self._prev_served = served
        self.state = nxt
        info = {
            "served": served,
            "storage_p": st,
            "fuel_p": fu,
            "renewable_p": re,
            "der_p": p_der,
            "der_q": q_der,
            "curtailment": curtailed,
            "voltages": v,
            "balance_residual": float(served.sum() + (-st[st < 0]).sum()
                                      - (re.sum() + st[st > 0].sum() + fu.sum())),
            "reactive_slack": float(q_load.sum() - q_der.sum()),
            "priority_term": priority_term,
            "fluctuation_term": fluctuation,
            "voltage_penalty": v_pen,
            "soc": soc,
            "fuel": fuel,
        }
        return StepOutcome(nxt, reward, t > self.T, info)


def rollout(policy, task: Task, seed: int | None = None, record: bool = True):
    """Run one episode; returns (total reward, list of StepOutcome).

    ``policy`` is either policy parameters (anything with ``act(state_vector)``)
    or a controller ``f(state, env) -> Action | raw vector``. ``seed`` selects a
    forecast-noise draw; ``None`` uses the task's stored forecasts.
    """
    env = ClrEnv(task, task.resample_forecasts(seed) if seed is not None else None)
    state = env.reset()
    act = getattr(policy, "act", None)
    total = 0.0
    trace = []
    for _ in range(task.horizon):
        a = act(state.as_vector()) if act is not None else policy(state, env)
        out = env.step(a)
        total += out.reward
        if record:
            trace.append(out)
        state = out.state
    return total, trace


def write_trace_csv(trace: list[StepOutcome], task: Task, path) -> None:
    loads = [ld.id for ld in task.loads.loads]
    ders = [d.id for d in task.fleet.ders]
    storage = [d.id for d in task.fleet.storage]
    fuel = [d.id for d in task.fleet.fuel]
    header = (["t"] + [f"served_{i}" for i in loads] + [f"p_{d}" for d in ders]
              + [f"soc_{d}" for d in storage] + [f"fuel_{d}" for d in fuel]
              + ["v_min", "v_max", "reward", "priority_term", "fluctuation_term",
                 "voltage_penalty", "curtailment"])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, out in enumerate(trace, start=1):
            i = out.info
            w.writerow([t, *map(repr, i["served"].tolist()), *map(repr, i["der_p"].tolist()),
                        *map(repr, i["soc"].tolist()), *map(repr, i["fuel"].tolist()),
                        repr(float(i["voltages"].min())), repr(float(i["voltages"].max())),
                        repr(out.reward), repr(i["priority_term"]), repr(i["fluctuation_term"]),
                        repr(i["voltage_penalty"]), repr(float(i["curtailment"]))])
