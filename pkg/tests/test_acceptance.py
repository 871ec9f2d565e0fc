"""Acceptance suite: one PASS/FAIL line per criterion, at the stated tolerances.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the verdict lines
are printed even without ``-s``.
"""

import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import binomtest

from metaclr.cli import main
from metaclr.env import ClrEnv, action_dim, state_dim
from metaclr.es import EsConfig, Quadratic, es_gradient_estimate, sample_perturbations
from metaclr.grid import build_ieee13_analog, build_ieee123_analog, solve_power_flow
from metaclr.meta import MetaConfig, meta_train, policy_template, ClrObjective, quadratic_family, warm_start_train
from metaclr.metrics import restoration_time, saidi, theory_diagnostics
from metaclr.scenarios import make_task_family
from oracles import brute_restoration_time, brute_saidi, dense_lindistflow, random_radial

SEEDS = range(5)
SCENARIO_SEED = 2024
DESK = {"tasks": {"M": 16, "n_train": 12, "horizon": 24, "seed": SCENARIO_SEED},
        "es": {"n": 20, "iters": 40}, "meta": {"finetune_budget": 40, "warm_start": False}}
SWEEP = {"tasks": {"M": 16, "n_train": 12, "horizon": 24, "seed": SCENARIO_SEED},
         "es": {"n": 20, "iters": 40}, "forecast": {"xi_list": [0, 0.25], "kappa_list": [4]},
         "sweep": {"n_tasks": 4}}
WALL = {}


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}", flush=True)
    assert ok, f"criterion {n}: {detail}"


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write(path: Path, obj) -> str:
    path.write_text(json.dumps(obj))
    return str(path)


def artifact_bytes(root: Path) -> dict:
    """Every file under a run directory except wall-clock timings and the lock."""
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in ("timings.csv", ".lock")}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def run_bench(out: Path) -> float:
    t0 = time.perf_counter()
    assert main(["bench", "--seed", "0", "--out", str(out)]) == 0
    return time.perf_counter() - t0


def run_desk(work: Path, seed: int, name: str) -> tuple[Path, float]:
    cfg = write(work / "desk.json", DESK)
    out = work / name
    t0 = time.perf_counter()
    assert main(["train-meta", "--config", cfg, "--seed", str(seed), "--out", str(out)]) == 0
    assert main(["finetune-eval", "--out", str(out)]) == 0
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def bench_run(work):
    out = work / "bench"
    return out, run_bench(out)


@pytest.fixture(scope="module")
def desk_runs(work):
    return {s: run_desk(work, s, f"desk_{s}") for s in SEEDS}


def test_criterion_1_benchmarks(capsys, bench_run):
    out, wall = bench_run
    res = json.loads((out / "bench" / "manifest.json").read_text())["results"]
    f1, f2 = res["f1"]["best_fitness"], res["f2"]["best_fitness"]
    ok = f1 >= 10 - 1e-2 and f2 >= 100 - 0.5 and wall < 10
    verdict(capsys, 1, ok, f"f1={f1:.6f} (>= 9.99), f2={f2:.4f} (>= 99.5), 300 iters, {wall:.2f}s (< 10s)")


def test_criterion_2_es_estimator(capsys):
    t0 = time.perf_counter()
    c, theta, sigma, n = np.array([0.5, -1.0, 2.0]), np.array([1.0, 1.0, 1.0]), 0.1, 10_000
    cfg = EsConfig(n=n, sigma=sigma, mirrored=False, fitness_shaping="none", seed=11)
    eps = sample_perturbations(3, cfg, 0)
    f = np.array([Quadratic(c)(theta + sigma * e) for e in eps])
    g = es_gradient_estimate(f, eps, sigma)
    se = (f[:, None] * eps / sigma).std(axis=0, ddof=1) / np.sqrt(n)
    smoothed = -2 * (theta - c)  # exact for a quadratic at any sigma
    z = np.abs(g - smoothed) / se
    # mirrored pairs on an affine objective: the estimate is exactly (1/n) sum (a.eps) eps
    a = np.array([3.0, -1.0, 0.5])
    mcfg = cfg.replace(mirrored=True, n=2_000)
    meps = sample_perturbations(3, mcfg, 0)
    mg = es_gradient_estimate((theta + sigma * meps) @ a + 7.0, meps, sigma)
    exact_err = float(np.abs(mg - (meps @ a) @ meps / mcfg.n).max())
    wall = time.perf_counter() - t0
    ok = bool(np.all(z < 3)) and exact_err < 1e-9 and wall < 5
    verdict(capsys, 2, ok, f"max |g - smoothed| / SE = {z.max():.2f} (< 3, n=1e4, sigma=0.1); "
                           f"mirrored affine error {exact_err:.1e}; {wall:.2f}s")


def test_criterion_3_power_flow_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        net = random_radial(int(rng.integers(4, 31)), rng)
        p, q = rng.normal(0, 200, net.n_buses), rng.normal(0, 100, net.n_buses)
        worst = max(worst, float(np.abs(solve_power_flow(net, p, q) - dense_lindistflow(net, p, q)).max()))
    wall = time.perf_counter() - t0
    verdict(capsys, 3, worst < 1e-9 and wall < 5, f"100 random radial nets, max |dv| = {worst:.2e} (< 1e-9), {wall:.2f}s")


def test_criterion_4_conservation(capsys):
    t0 = time.perf_counter()
    system = build_ieee13_analog()
    tasks = make_task_family(system, 50, horizon=24, xi=0.2, seed=4)
    rng = np.random.default_rng(4)
    worst_bal, worst_fuel, violations, steps = 0.0, 0.0, 0, 0
    for ep in range(1000):
        task = tasks[ep % len(tasks)]
        env = ClrEnv(task)
        s = env.reset()
        fuel0, used = s.fuel.copy(), np.zeros_like(s.fuel)
        for _ in range(task.horizon):
            prev = s.fuel
            out = env.step(rng.uniform(-1.5, 1.5, env.n_action))
            i, s = out.info, out.state
            worst_bal = max(worst_bal, abs(i["balance_residual"]))
            violations += int(np.any(s.soc < env.soc_min) or np.any(s.soc > env.soc_max)
                              or np.any(s.fuel < 0) or np.any(s.fuel > fuel0))
            violations += int(not np.array_equal(s.fuel, np.maximum(prev - i["fuel_p"] * task.tau, 0.0)))
            violations += int(out.reward != i["priority_term"] - i["fluctuation_term"] + i["voltage_penalty"])
            used += i["fuel_p"] * task.tau
            steps += 1
        worst_fuel = max(worst_fuel, float(np.abs(fuel0 - s.fuel - used).max()))
    wall = time.perf_counter() - t0
    ok = worst_bal < 1e-9 and violations == 0 and worst_fuel < 1e-9 and wall < 60
    verdict(capsys, 4, ok, f"1000 episodes / {steps} steps: max balance residual {worst_bal:.1e} kW, "
                           f"{violations} box/identity violations, cumulative fuel drift {worst_fuel:.1e}, {wall:.1f}s")


def test_criterion_5_dimensions(capsys):
    dims = []
    for build in (build_ieee13_analog, build_ieee123_analog):
        task = make_task_family(build(), 1, horizon=24, kappa=4, tau=1 / 12, seed=0)[0]
        dims.append((state_dim(task), action_dim(task), ClrEnv(task).reset().as_vector().size))
    ok = dims == [(114, 20, 114), (121, 29, 121)]
    verdict(capsys, 5, ok, f"13-bus (state, action) = {dims[0][:2]}, 123-bus = {dims[1][:2]}")


@pytest.mark.slow
def test_criterion_6_meta_advantage(capsys, desk_runs):
    d_init, d_r = [], []
    for s in SEEDS:
        out, _ = desk_runs[s]
        adapt = {r["task"]: r for r in rows(out / "eval" / "adaptation.csv") if r["method"] == "mgf-rl"}
        ids = sorted(adapt, key=int)
        d_init.append([float(adapt[t]["delta_init"]) for t in ids])
        d_r.append([float(adapt[t]["delta_r"]) for t in ids])
    med_init, med_r = np.median(d_init, axis=0), np.median(d_r, axis=0)
    good = int(np.sum((med_init > 0) & (med_r >= 0)))
    wall = sum(w for _, w in desk_runs.values())
    WALL[6] = wall
    ok = len(med_init) == 4 and good >= 3 and wall < 30 * 60
    detail = ", ".join(f"task {t}: d_init={a:.1f} dR={b:.1f}" for t, a, b in zip(ids, med_init, med_r))
    verdict(capsys, 6, ok, f"{good}/4 test tasks with median d_init > 0 and dR >= 0 over 5 seeds "
                           f"({detail}); {wall / 60:.1f} min")


def test_criterion_7_warm_start_equivalence(capsys, small_tasks):
    tpl = policy_template(small_tasks[0], hidden=(16, 16), seed=0)
    objs = [ClrObjective(t, tpl) for t in small_tasks]
    es = EsConfig(n=4, iters=2)
    w_phi, w = warm_start_train(MetaConfig(objs, es, tpl.theta, eta="1/m", seed=5))
    m_phi, m = meta_train(MetaConfig(objs, es, tpl.theta, eta=1.0, seed=5))
    same = (w_phi.tobytes() == m_phi.tobytes()
            and all(a.tobytes() == b.tobytes() for a, b in zip(w.initial + w.adapted, m.initial + m.adapted))
            and all(a.mean_fitness == b.mean_fitness for a, b in zip(w.records, m.records)))
    verdict(capsys, 7, same, f"warm_start_train vs meta_train(eta=1) on {len(objs)} CLR tasks: "
                             f"{'bit-identical' if same else 'DIFFERENT'}")


@pytest.mark.slow
def test_criterion_8_forecast_monotonicity(capsys, work):
    cfg = write(work / "sweep.json", SWEEP)
    t0 = time.perf_counter()
    r0, r25 = [], []
    for s in SEEDS:
        out = work / f"sweep_{s}"
        assert main(["sweep", "--config", cfg, "--seed", str(s), "--out", str(out)]) == 0
        table = {r["xi_pct"]: float(r["kappa_4h"]) for r in rows(out / "sweep" / "table.csv")}
        r0.append(table["0"])
        r25.append(table["25"])
    wall = time.perf_counter() - t0
    combined = wall + WALL.get(6, 0.0)
    ok = np.mean(r25) < np.mean(r0) and combined < 30 * 60
    verdict(capsys, 8, ok, f"mean ES-RL reward xi=0%: {np.mean(r0):.2f}, xi=25%: {np.mean(r25):.2f} "
                           f"(per seed {sum(a < b for a, b in zip(r25, r0))}/5 lower); "
                           f"{wall / 60:.1f} min, {combined / 60:.1f} min with criterion 6")


def test_criterion_9_theory_diagnostics(capsys):
    t0 = time.perf_counter()
    es = EsConfig(n=10, sigma=0.1, alpha=0.05, iters=10, fitness_shaping="none")

    def run(seed, iters, M=16):
        tasks = quadratic_family(M, 4, 0.5, seed=seed)
        _, rec = meta_train(MetaConfig(tasks, es.replace(iters=iters), np.zeros(4), seed=seed))
        return tasks, theory_diagnostics(rec, [t.optimum for t in tasks], tasks)

    path_err, wins_half, wins_first = 0.0, 0, 0
    for seed in range(20):
        tasks, d = run(seed, 10)
        c = [t.optimum for t in tasks]
        path_err = max(path_err, abs(d.path_length - sum(np.linalg.norm(c[m] - c[m - 1]) for m in range(1, 16))))
        wins_half += d.taog[-1] < d.taog[7]
        wins_first += d.taog[-1] < d.taog[0]
    p_half = binomtest(wins_half, 20, 0.5, alternative="greater").pvalue
    by_T = [np.mean([run(s, T)[1].taog[-1] for s in range(5)]) for T in (10, 40, 160)]
    wall = time.perf_counter() - t0
    ok = path_err == 0.0 and p_half < 0.05 and by_T[0] > by_T[1] > by_T[2] and wall < 300
    verdict(capsys, 9, ok, f"P_M error {path_err:.1e}; TAOG(16) < TAOG(8) in {wins_half}/20 seeds "
                           f"(sign test p={p_half:.1e}), < TAOG(1) in {wins_first}/20; "
                           f"TAOG by T=10/40/160: {by_T[0]:.3g} > {by_T[1]:.3g} > {by_T[2]:.3g}; {wall:.1f}s")


def test_criterion_10_reliability_oracle(capsys):
    from types import SimpleNamespace
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    tau = 1 / 12
    mismatches = 0
    for _ in range(100):
        T, N = int(rng.integers(1, 100)), int(rng.integers(1, 20))
        demand = rng.uniform(5, 300, N)
        served = np.minimum(rng.uniform(0, 1.2, (T, N)), 1.0) * demand
        task = SimpleNamespace(loads=SimpleNamespace(demand_p=demand), tau=tau)
        mismatches += not np.isclose(saidi(served, task), brute_saidi(served, demand, tau), rtol=1e-12, atol=1e-9)
        for p in (50, 90, 95, 100):
            mismatches += restoration_time(served, task, p) != brute_restoration_time(served, demand, tau, p)
    served = np.zeros((72, 2))
    served[24:, 0] = 100.0
    example = saidi(served, SimpleNamespace(loads=SimpleNamespace(demand_p=np.array([100.0, 50.0])), tau=tau))
    wall = time.perf_counter() - t0
    ok = mismatches == 0 and abs(example - 240.0) < 1e-9 and wall < 5
    verdict(capsys, 10, ok, f"100 random traces, {mismatches} mismatches vs brute force; "
                            f"worked example SAIDI = {example:.6f} min (240); {wall:.2f}s")


@pytest.mark.slow
def test_criterion_11_determinism(capsys, work, bench_run, desk_runs):
    bench_a, _ = bench_run
    bench_b = work / "bench_rerun"
    run_bench(bench_b)
    desk_a, _ = desk_runs[0]
    desk_b, _ = run_desk(work, 0, "desk_0_rerun")
    diffs = []
    for a, b in ((bench_a, bench_b), (desk_a, desk_b)):
        fa, fb = artifact_bytes(a), artifact_bytes(b)
        diffs += sorted(set(fa) ^ set(fb)) + [k for k in fa if k in fb and fa[k] != fb[k]]
    n_files = len(artifact_bytes(bench_a)) + len(artifact_bytes(desk_a))
    verdict(capsys, 11, not diffs, f"criteria 1 and 6 (seed 0) reruns: {n_files} artifacts compared, "
                                   f"{len(diffs)} differ{': ' + ', '.join(diffs[:5]) if diffs else ''}")
