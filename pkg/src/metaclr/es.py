"""Evolution-strategies policy search.

Objectives are callables ``f(theta, seed) -> float`` to be maximized; the
seed selects an episode draw for stochastic objectives and is ignored by
deterministic ones. Population fitness is always assembled in perturbation
index order, so serial and concurrent evaluation give identical updates.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

from .scenarios import derive_seed

SHAPINGS = ("none", "centered-rank")
# training episode seeds live above this offset; evaluation seeds stay below it
_TRAIN_SEED_BASE = 2**40


@dataclass(frozen=True)
class EsConfig:
    n: int = 20
    sigma: float = 0.05
    alpha: float = 0.01
    iters: int = 40
    eval_episodes: int = 1
    fitness_shaping: str = "centered-rank"
    mirrored: bool = True
    seed: int = 0
    eval_seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.n < 2 or (self.mirrored and self.n % 2):
            raise ValueError("population must have n >= 2 (even when mirrored)")
        if self.sigma <= 0 or self.alpha <= 0:
            raise ValueError("sigma and alpha must be positive")
        if self.iters < 0 or self.eval_episodes < 1:
            raise ValueError("iters must be >= 0 and eval_episodes >= 1")
        if self.fitness_shaping not in SHAPINGS:
            raise ValueError(f"fitness_shaping must be one of {SHAPINGS}")
        if any(s < 0 or s >= _TRAIN_SEED_BASE for s in self.eval_seeds):
            raise ValueError("evaluation seeds must lie in [0, 2**40)")
        object.__setattr__(self, "eval_seeds", tuple(int(s) for s in self.eval_seeds))

    def replace(self, **kw) -> "EsConfig":
        return replace(self, **kw)


@dataclass
class TrainRecord:
    iteration: list[int] = field(default_factory=list)
    mean_fitness: list[float] = field(default_factory=list)
    eval_fitness: list[float] = field(default_factory=list)
    best_fitness: list[float] = field(default_factory=list)
    best_iteration: int = 0
    wall_time: list[float] = field(default_factory=list)

    def add(self, it, mean_fit, eval_fit, seconds):
        best = eval_fit if not self.best_fitness else max(self.best_fitness[-1], eval_fit)
        if not self.best_fitness or eval_fit > self.best_fitness[-1]:
            self.best_iteration = it
        self.iteration.append(it)
        self.mean_fitness.append(float(mean_fit))
        self.eval_fitness.append(float(eval_fit))
        self.best_fitness.append(float(best))
        self.wall_time.append(float(seconds))

    @property
    def curve(self) -> np.ndarray:
        """Evaluation reward after each iteration, starting with the initial point."""
        return np.array(self.eval_fitness)

    def write_csv(self, path, task=None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow((["task"] if task is not None else []) + ["iteration", "mean", "eval", "best"])
            for row in zip(self.iteration, self.mean_fitness, self.eval_fitness, self.best_fitness):
                w.writerow(([task] if task is not None else []) + [row[0], *map(repr, row[1:])])


def centered_ranks(x) -> np.ndarray:
    """Ranks mapped linearly onto [-0.5, 0.5]; ties share their average rank."""
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        return np.zeros_like(x)
    return (rankdata(x) - 1.0) / (len(x) - 1) - 0.5


def es_gradient_estimate(fitnesses, perturbations, sigma: float, shaping: str = "none") -> np.ndarray:
    """(1 / (n sigma)) * sum_i F_i eps_i with optional rank shaping of F."""
    f = np.asarray(fitnesses, dtype=float)
    eps = np.asarray(perturbations, dtype=float)
    if eps.ndim != 2 or eps.shape[0] != f.shape[0]:
        raise ValueError("need one perturbation row per fitness value")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if shaping == "centered-rank":
        f = centered_ranks(f)
    elif shaping != "none":
        raise ValueError(f"unknown shaping {shaping!r}")
    return f @ eps / (len(f) * sigma)


def _fitness(args):
    objective, theta, seeds = args
    return float(np.mean([objective(theta, s) for s in seeds]))


def evaluate_population(objective, thetas, seeds, executor=None) -> np.ndarray:
    jobs = [(objective, th, seeds) for th in thetas]
    if executor is None:
        return np.array([_fitness(j) for j in jobs])
    return np.array(list(executor.map(_fitness, jobs)))


def sample_perturbations(d: int, cfg: EsConfig, iteration: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(cfg.seed, iteration, 0))
    if cfg.mirrored:
        half = rng.standard_normal((cfg.n // 2, d))
        return np.stack((half, -half), axis=1).reshape(cfg.n, d)
    return rng.standard_normal((cfg.n, d))


def episode_seeds(cfg: EsConfig, iteration: int) -> list[int]:
    return [_TRAIN_SEED_BASE + derive_seed(cfg.seed, iteration, 1, k) % _TRAIN_SEED_BASE
            for k in range(cfg.eval_episodes)]


def es_step(theta, objective, cfg: EsConfig, iteration: int = 0, executor=None):
    """One ascent update; returns (new theta, stats dict)."""
    theta = np.asarray(theta, dtype=float)
    eps = sample_perturbations(theta.size, cfg, iteration)
    seeds = episode_seeds(cfg, iteration)
    fit = evaluate_population(objective, theta + cfg.sigma * eps, seeds, executor)
    g = es_gradient_estimate(fit, eps, cfg.sigma, cfg.fitness_shaping)
    stats = {"mean_fitness": float(fit.mean()), "max_fitness": float(fit.max()),
             "grad_norm": float(np.linalg.norm(g))}
    return theta + cfg.alpha * g, stats


def evaluate(objective, theta, cfg: EsConfig) -> float:
    return _fitness((objective, np.asarray(theta, dtype=float), cfg.eval_seeds))


def train_task(objective, theta0, cfg: EsConfig, executor=None):
    """Run ``cfg.iters`` ES steps and return the best-evaluated parameters.

    Entry 0 of the record is the evaluation of ``theta0`` itself.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    t0 = time.perf_counter()
    first = evaluate(objective, theta, cfg)
    rec = TrainRecord()
    rec.add(0, first, first, time.perf_counter() - t0)
    best, best_val = theta.copy(), first
    for it in range(1, cfg.iters + 1):
        t0 = time.perf_counter()
        theta, stats = es_step(theta, objective, cfg, it, executor)
        val = evaluate(objective, theta, cfg)
        if val > best_val:
            best, best_val = theta.copy(), val
        rec.add(it, stats["mean_fitness"], val, time.perf_counter() - t0)
    return best, rec


def theory_schedule(d: int, lipschitz: float, eps: float, iters: int) -> tuple[float, float]:
    """(alpha, sigma) from the Lipschitz-based convergence schedule.

    alpha = 1 / ((d + 4) sqrt(T + 1) L), sigma = eps / (2 L sqrt(d)). Only
    usable where the objective's Lipschitz constant is known.
    """
    alpha = 1.0 / ((d + 4) * math.sqrt(iters + 1) * lipschitz)
    sigma = eps / (2.0 * lipschitz * math.sqrt(d))
    return alpha, sigma


# -- benchmark objectives -----------------------------------------------------

def bench_f1(x):
    return -np.asarray(x, dtype=float) ** 2 + 10.0


def bench_f2(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return (100.0 - 20.0 * np.exp(-0.2 * np.sqrt(0.5 * (x**2 + y**2)))
            - np.exp(0.5 * (np.cos(2 * np.pi * x) + np.cos(2 * np.pi * y))) + np.e + 20.0)


class Benchmark:
    """Deterministic ES objective over f1 (1-D) or f2 (2-D).

    f2 as written is 100 plus the Ackley function, so its optimum at the
    origin is a minimum. The f2 objective therefore returns ``200 - f2``,
    which peaks at exactly 100 at the origin.
    """

    def __init__(self, name: str):
        if name not in ("f1", "f2"):
            raise ValueError(f"unknown benchmark {name!r}")
        self.name = name
        self.dim = 1 if name == "f1" else 2

    def __call__(self, theta, seed=None) -> float:
        if self.name == "f1":
            return float(bench_f1(theta[0]))
        return 200.0 - float(bench_f2(theta[0], theta[1]))


class Quadratic:
    """Synthetic task -||theta - center||^2 with a known optimum."""

    def __init__(self, center):
        self.center = np.asarray(center, dtype=float)

    def __call__(self, theta, seed=None) -> float:
        d = np.asarray(theta, dtype=float) - self.center
        return -float(d @ d)

    @property
    def optimum(self) -> np.ndarray:
        return self.center
