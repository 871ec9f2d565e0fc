"""Sequential first-order meta-training, fine-tuning and the baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .env import Action, ClrEnv, EnvState, action_dim, rollout, state_dim
from .es import EsConfig, Quadratic, TrainRecord, train_task
from .policy import PolicyParams, init_params, task_normalizer
from .scenarios import Task, derive_seed


class ClrObjective:
    """Episode reward of a parameter vector on one task."""

    def __init__(self, task: Task, template: PolicyParams):
        self.task = task
        self.template = template

    def __call__(self, theta, seed=None) -> float:
        total, _ = rollout(self.template.with_theta(theta), self.task, seed=seed, record=False)
        return total


def policy_template(task: Task, hidden=(64, 64), seed: int = 0) -> PolicyParams:
    """Freshly initialized policy sized and normalized for ``task``."""
    scale, offset = task_normalizer(task)
    return init_params(state_dim(task), action_dim(task), hidden, seed, scale, offset)


def eta_schedule(spec) -> callable:
    """Meta step size as a function of the 1-based task index."""
    if isinstance(spec, (int, float)):
        value = float(spec)
        if not 0 < value <= 1:
            raise ValueError("constant meta rate must lie in (0, 1]")
        return lambda m: value
    if spec == "1/m":
        return lambda m: 1.0 / m
    if spec == "1/sqrt(m)":
        return lambda m: 1.0 / math.sqrt(m)
    raise ValueError(f"unknown meta-rate schedule {spec!r}")


@dataclass
class MetaConfig:
    tasks: list
    es: EsConfig
    theta0: np.ndarray
    eta: str | float = "1/m"
    finetune_budget: int = 40
    seed: int = 0

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("meta-training needs at least one task")
        self.theta0 = np.asarray(self.theta0, dtype=float)
        eta_schedule(self.eta)

    def task_seed(self, m: int) -> int:
        return derive_seed(self.seed, m)


@dataclass
class MetaRecord:
    initial: list[np.ndarray] = field(default_factory=list)
    adapted: list[np.ndarray] = field(default_factory=list)
    records: list[TrainRecord] = field(default_factory=list)
    etas: list[float] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    final: np.ndarray | None = None

    @property
    def last_adapted(self) -> np.ndarray:
        return self.adapted[-1]


def meta_update(phi0, phi_hat, eta: float):
    """phi0 + eta * (phi_hat - phi0); eta = 1 hands back phi_hat exactly."""
    if not 0 < eta <= 1:
        raise ValueError("meta step size must lie in (0, 1]")
    a = phi0.theta if isinstance(phi0, PolicyParams) else np.asarray(phi0, dtype=float)
    b = phi_hat.theta if isinstance(phi_hat, PolicyParams) else np.asarray(phi_hat, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    out = b.copy() if eta == 1 else a + eta * (b - a)
    return phi0.with_theta(out) if isinstance(phi0, PolicyParams) else out


def meta_train(cfg: MetaConfig, executor=None):
    """Thread one parameter vector through the task sequence.

    Returns the post-update initialization phi_{M+1,0} and the full record;
    the last task's adapted parameters are ``record.last_adapted``.
    """
    eta = eta_schedule(cfg.eta)
    theta = cfg.theta0.copy()
    rec = MetaRecord()
    for m, objective in enumerate(cfg.tasks):
        es_cfg = cfg.es.replace(seed=cfg.task_seed(m))
        phi_hat, trec = train_task(objective, theta, es_cfg, executor)
        step = eta(m + 1)
        rec.initial.append(theta)
        rec.adapted.append(phi_hat)
        rec.records.append(trec)
        rec.etas.append(step)
        rec.seeds.append(es_cfg.seed)
        theta = meta_update(theta, phi_hat, step)
    rec.final = theta
    return theta, rec


def warm_start_train(cfg: MetaConfig, executor=None):
    """Each task starts from the previous task's adapted parameters."""
    return meta_train(replace(cfg, eta=1.0), executor)


def fine_tune(theta, objective, budget: int, es: EsConfig, executor=None):
    """ES from a given initialization; returns (adapted params, learning curve record)."""
    return train_task(objective, theta, es.replace(iters=budget), executor)


def quadratic_family(M: int, dim: int, spread: float, seed: int, center=None) -> list[Quadratic]:
    """i.i.d. quadratic tasks with optima scattered around ``center``."""
    rng = np.random.default_rng(seed)
    c = np.full(dim, 2.0) if center is None else np.asarray(center, dtype=float)
    return [Quadratic(c + spread * rng.standard_normal(dim)) for _ in range(M)]


def alternating_family(M: int, centers) -> list[Quadratic]:
    """Tasks cycling through the given optima: c_0, c_1, ..., c_0, c_1, ..."""
    centers = [np.asarray(c, dtype=float) for c in centers]
    return [Quadratic(centers[m % len(centers)]) for m in range(M)]


# -- greedy rule --------------------------------------------------------------

def allocate_by_priority(generation: float, priorities, demands) -> np.ndarray:
    """Serve loads fully in descending priority (ties: larger demand, then index)."""
    priorities = np.asarray(priorities, dtype=float)
    demands = np.asarray(demands, dtype=float)
    order = np.lexsort((np.arange(len(demands)), -demands, -priorities))
    out = np.zeros_like(demands)
    left = max(float(generation), 0.0)
    for i in order:
        out[i] = min(demands[i], left)
        left -= out[i]
        if left <= 0:
            break
    return out


def greedy_dispatch(state: EnvState, env: ClrEnv | Task) -> Action:
    """Rule-based controller: full renewables and fuel, storage by forecast, loads by priority."""
    if isinstance(env, Task):
        env = ClrEnv(env)
    lo, hi = env.bounds(state)
    a, b, c = env.N, env.N + env.S, env.N + env.S + env.F
    renew_now = float(state.forecast[:, 0].sum())
    fuel_p = hi[b:c].copy()
    served_now = float(state.prev_restoration @ env.demand)
    expected = float(state.forecast.sum(axis=0).mean()) if env.R else 0.0
    storage = np.zeros(env.S)
    if expected < served_now:
        storage = hi[a:b].copy()
    else:
        surplus = renew_now + fuel_p.sum() - env.demand.sum()
        for j in range(env.S):
            if surplus <= 0:
                break
            storage[j] = -min(surplus, -lo[a + j])
            surplus += storage[j]
    gen = renew_now + fuel_p.sum() + storage.sum()
    loads = allocate_by_priority(gen, env.priority, env.demand)
    angles = 0.5 * (lo[c:] + hi[c:])
    return Action(loads, storage, fuel_p, angles)
