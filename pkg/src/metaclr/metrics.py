"""Reliability indices, adaptation metrics and empirical theory diagnostics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .policy import param_distance

THRESHOLDS = (50, 90, 95)


def served_matrix(trace) -> np.ndarray:
    """(T, N) served kW from a trace, or the array itself."""
    if isinstance(trace, np.ndarray):
        return trace
    return np.array([out.info["served"] for out in trace])


@dataclass
class ReliabilityReport:
    saidi_minutes: float
    restoration_time_minutes: dict[int, float | None]
    pct_restored_final: float
    outage_minutes: list[float]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["restoration_time_minutes"] = {str(k): v for k, v in self.restoration_time_minutes.items()}
        return d


def outage_minutes(trace, task, binary: bool = False) -> np.ndarray:
    frac = served_matrix(trace) / task.loads.demand_p
    out = (frac < 1.0 - 1e-9).astype(float) if binary else 1.0 - frac
    return out.sum(axis=0) * task.tau * 60.0


def saidi(trace, task, binary: bool = False) -> float:
    """Average outage minutes per load; partial service accrues outage fractionally."""
    return float(outage_minutes(trace, task, binary).mean())


def restored_fraction(trace, task) -> np.ndarray:
    return served_matrix(trace).sum(axis=1) / task.loads.demand_p.sum()


def restoration_time(trace, task, threshold_pct: float) -> float | None:
    """Minutes until the restored share of total demand first reaches the threshold."""
    if not 0 < threshold_pct <= 100:
        raise ValueError("threshold must lie in (0, 100]")
    frac = restored_fraction(trace, task)
    hit = np.flatnonzero(frac >= threshold_pct / 100.0 - 1e-12)
    if hit.size == 0:
        return None
    return float((hit[0] + 1) * task.tau * 60.0)


def reliability_report(trace, task, binary: bool = False) -> ReliabilityReport:
    return ReliabilityReport(
        saidi(trace, task, binary),
        {p: restoration_time(trace, task, p) for p in THRESHOLDS},
        float(100.0 * restored_fraction(trace, task)[-1]),
        outage_minutes(trace, task, binary).tolist(),
    )


@dataclass
class AdaptationReport:
    mean_cumulative_reward: float
    delta_init: float
    delta_r: float
    episodes_to_threshold: int | None

    def to_dict(self) -> dict:
        return asdict(self)


def adaptation_metrics(method_curve, baseline_curve, k: int = 5) -> AdaptationReport:
    """Jump-start and asymptotic gain of a learning curve over a baseline curve.

    ``episodes_to_threshold`` is the first curve index at which the method
    reaches the baseline's final (last-k mean) reward.
    """
    m = np.asarray(method_curve, dtype=float)
    b = np.asarray(baseline_curve, dtype=float)
    if m.shape != b.shape or m.ndim != 1 or m.size == 0:
        raise ValueError("curves must be 1-D and of equal length")
    k = min(k, m.size)
    target = b[-k:].mean()
    reached = np.flatnonzero(m >= target)
    return AdaptationReport(
        float(m.mean()),
        float(m[0] - b[0]),
        float(m[-k:].mean() - target),
        int(reached[0]) if reached.size else None,
    )


@dataclass
class TheoryDiagnostics:
    taog: list[float]
    task_similarity: float
    path_length: float
    temporal_variability: float
    proxy: str = "parameter-space (half squared Euclidean distance)"
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def probe_points(record, n: int = 32) -> list[np.ndarray]:
    """Up to ``n`` evenly spaced snapshots from the meta trajectory."""
    snaps = [p for pair in zip(record.initial, record.adapted) for p in pair] + [record.final]
    idx = np.unique(np.linspace(0, len(snaps) - 1, min(n, len(snaps))).round().astype(int))
    return [snaps[i] for i in idx]


def theory_diagnostics(record, pseudo_optima, objectives, probes=None, seed: int = 0) -> TheoryDiagnostics:
    """Empirical counterparts of the optimality gap, task similarity, path length and variability.

    ``pseudo_optima[m]`` stands in for task m's optimal parameters and
    ``objectives[m](theta, seed)`` evaluates task m's reward.
    """
    M = len(record.adapted)
    if pseudo_optima is None or len(pseudo_optima) != M or len(objectives) != M:
        raise ValueError("need one pseudo-optimum and one objective per task")
    opt = [np.asarray(c, dtype=float) for c in pseudo_optima]
    gaps = np.array([objectives[m](opt[m], seed) - objectives[m](record.adapted[m], seed) for m in range(M)])
    taog = (np.cumsum(gaps) / np.arange(1, M + 1)).tolist()

    candidates = [record.final, np.mean(record.adapted, axis=0)]
    similarity = min(np.mean([param_distance(a, c) for a in record.adapted]) for c in candidates)

    path = float(sum(np.linalg.norm(opt[m] - opt[m - 1]) for m in range(1, M)))

    probes = probe_points(record) if probes is None else probes
    values = np.array([[objectives[m](p, seed) for p in probes] for m in range(M)])
    variability = float(np.abs(np.diff(values, axis=0)).max(axis=1).sum()) if M > 1 else 0.0
    return TheoryDiagnostics(taog, float(similarity), path, variability,
                             notes={"n_probes": len(probes)})
