"""Run orchestration behind the CLI verbs and the run-directory layout.

A run directory holds ``config.json`` (resolved), ``tasks.json`` and a
``manifest.json`` per stage. Wall-clock measurements go to ``timings.csv``
files only, so every other artifact is a pure function of (config, seed).
"""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config
from .env import rollout, write_trace_csv
from .es import Benchmark, EsConfig, train_task
from .meta import (ClrObjective, MetaConfig, fine_tune, greedy_dispatch, meta_train,
                   policy_template, warm_start_train)
from .metrics import adaptation_metrics, reliability_report
from .policy import load_params, save_params
from .scenarios import derive_seed, load_tasks, make_task_family, save_tasks, split_tasks

RUN_FORMAT = "metaclr-run/1"
METHODS = ("mgf-rl", "es-rl", "warm-start", "greedy")
# held-out forecast draws used only for reporting sweep rewards
REPORT_SEEDS = tuple(range(1000, 1010))


class RunDirError(ValueError):
    pass


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise RunDirError(f"cannot read {path}: {exc}") from None


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _read_rows(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _curve_rows(prefix, rec):
    return [(*prefix, it, m, e, b) for it, m, e, b in
            zip(rec.iteration, rec.mean_fitness, rec.eval_fitness, rec.best_fitness)]


def _timing_rows(prefix, rec):
    return [(*prefix, it, w) for it, w in zip(rec.iteration, rec.wall_time)]


def stored_config(cfg: RunConfig) -> dict:
    d = cfg.to_dict()
    d.pop("out")
    if isinstance(cfg.system, dict):
        d["system"] = {"path": str((cfg.base_dir / cfg.system["path"]).resolve())}
    if cfg.forecast.csv_path is not None:
        d["forecast"]["csv_path"] = str(cfg.csv_path().resolve())
    return d


def build_tasks(cfg: RunConfig, xi=None, kappa=None):
    t = cfg.tasks
    return make_task_family(
        cfg.build_system(), t.M, t.demand_range,
        xi=cfg.forecast.xi if xi is None else xi,
        kappa=cfg.forecast.kappa if kappa is None else kappa,
        seed=cfg.scenario_seed, horizon=t.horizon, tau=t.tau, mu=t.mu, lam=t.lam,
        csv_path=cfg.csv_path(),
    )


def _mean_eval(objective, theta, seeds) -> float:
    return float(np.mean([objective(theta, s) for s in seeds]))


# -- train-meta ---------------------------------------------------------------

def train_meta(cfg: RunConfig, out: Path, executor=None) -> dict:
    t0 = time.perf_counter()
    tasks = build_tasks(cfg)
    train, test = split_tasks(tasks, cfg.tasks.n_train)
    tpl = policy_template(train[0], cfg.hidden, cfg.seed)
    es = cfg.es_config()
    mcfg = MetaConfig([ClrObjective(t, tpl) for t in train], es, tpl.theta,
                      cfg.meta.eta, cfg.meta.finetune_budget, cfg.seed)
    phi, rec = meta_train(mcfg, executor)

    ck = out / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    _dump(out / "config.json", stored_config(cfg))
    save_tasks(tasks, out / "tasks.json")
    save_params(tpl, ck / "init.json")
    names = []
    for task, adapted in zip(train, rec.adapted):
        name = f"task_{task.task_id:03d}.json"
        save_params(tpl.with_theta(adapted), ck / name)
        names.append(name)
    meta = tpl.with_theta(phi)
    save_params(meta, ck / "meta_final.json")
    curves = [r for task, tr in zip(train, rec.records) for r in _curve_rows((task.task_id,), tr)]
    timings = [r for task, tr in zip(train, rec.records) for r in _timing_rows(("meta", task.task_id), tr)]
    _write_rows(out / "curves.csv", ["task", "iteration", "mean", "eval", "best"], curves)

    manifest = {
        "format": RUN_FORMAT,
        "kind": "train-meta",
        "train_task_ids": [t.task_id for t in train],
        "test_task_ids": [t.task_id for t in test],
        "task_seeds": [t.seed for t in tasks],
        "etas": rec.etas,
        "es_seeds": rec.seeds,
        "best_iterations": [r.best_iteration for r in rec.records],
        "checkpoints": {"init": "init.json", "tasks": names, "meta_final": "meta_final.json",
                        "last_adapted": names[-1]},
    }
    if cfg.meta.warm_start:
        warm, wrec = warm_start_train(mcfg, executor)
        save_params(tpl.with_theta(warm), ck / "warm_final.json")
        manifest["checkpoints"]["warm_final"] = "warm_final.json"
        _write_rows(out / "curves_warm.csv", ["task", "iteration", "mean", "eval", "best"],
                    [r for task, tr in zip(train, wrec.records) for r in _curve_rows((task.task_id,), tr)])
        timings += [r for task, tr in zip(train, wrec.records) for r in _timing_rows(("warm", task.task_id), tr)]

    final_eval = float(np.mean([_mean_eval(o, phi, es.eval_seeds) for o in mcfg.tasks]))
    manifest["final_meta_eval"] = final_eval
    trace_task = test[0] if test else train[0]
    traces = out / "traces"
    traces.mkdir(exist_ok=True)
    _, trace = rollout(meta, trace_task, seed=es.eval_seeds[0])
    write_trace_csv(trace, trace_task, traces / f"meta-final_task{trace_task.task_id:03d}.csv")
    _dump(out / "manifest.json", manifest)
    wall = time.perf_counter() - t0
    _write_rows(out / "timings.csv", ["stage", "task", "iteration", "seconds"], timings + [("total", "", "", wall)])
    return {"final_meta_eval": final_eval, "wall_time": wall, "M": len(train)}


# -- finetune-eval ------------------------------------------------------------

def _greedy_reward(task, seeds) -> float:
    return float(np.mean([rollout(greedy_dispatch, task, seed=s, record=False)[0] for s in seeds]))


def finetune_eval(cfg: RunConfig, out: Path, budget: int | None = None, executor=None) -> dict:
    t0 = time.perf_counter()
    budget = cfg.meta.finetune_budget if budget is None else budget
    es = cfg.es_config()
    starts = {}
    if (out / "manifest.json").exists():
        man = _read_json(out / "manifest.json")
        if man.get("kind") != "train-meta":
            raise RunDirError(f"{out} is not a train-meta run directory")
        tasks = {t.task_id: t for t in load_tasks(out / "tasks.json")}
        test_ids = man["test_task_ids"]
        if set(test_ids) & set(man["train_task_ids"]):
            raise RunDirError("test tasks overlap the training split")
        if not test_ids:
            raise RunDirError("run has no held-out test tasks")
        ck = out / "checkpoints"
        tpl = load_params(ck / man["checkpoints"]["init"])
        starts["mgf-rl"] = load_params(ck / man["checkpoints"]["meta_final"]).theta
        if "warm_final" in man["checkpoints"]:
            starts["warm-start"] = load_params(ck / man["checkpoints"]["warm_final"]).theta
        test = [tasks[i] for i in test_ids]
    else:
        all_tasks = build_tasks(cfg)
        _, test = split_tasks(all_tasks, cfg.tasks.n_train)
        if not test:
            raise RunDirError("config leaves no test tasks (tasks.n_train == tasks.M)")
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "config.json", stored_config(cfg))
        save_tasks(all_tasks, out / "tasks.json")
        tpl = policy_template(test[0], cfg.hidden, cfg.seed)
    starts["es-rl"] = tpl.theta

    ev = out / "eval"
    (ev / "traces").mkdir(parents=True, exist_ok=True)
    curves, timings, adapt, rel, reports, seeds = [], [], [], [], {}, {}
    for task in test:
        obj = ClrObjective(task, tpl)
        e = es.replace(seed=derive_seed(cfg.seed, 1000 + task.task_id))
        seeds[str(task.task_id)] = e.seed
        results = {}
        for method in METHODS:
            if method == "greedy":
                g = _greedy_reward(task, e.eval_seeds)
                results[method] = (None, [g] * (budget + 1))
                continue
            if method not in starts:
                continue
            theta, rec = fine_tune(starts[method], obj, budget, e, executor)
            results[method] = (theta, rec.curve)
            curves += _curve_rows((method, task.task_id), rec)
            timings += _timing_rows((method, task.task_id), rec)
        base = results["es-rl"][1]
        for method, (theta, curve) in results.items():
            a = adaptation_metrics(curve, base)
            policy = greedy_dispatch if theta is None else tpl.with_theta(theta)
            _, trace = rollout(policy, task, seed=e.eval_seeds[0])
            r = reliability_report(trace, task)
            write_trace_csv(trace, task, ev / "traces" / f"{method}_task{task.task_id:03d}.csv")
            adapt.append((method, task.task_id, a.mean_cumulative_reward, a.delta_init, a.delta_r,
                          a.episodes_to_threshold, curve[0], curve[-1]))
            rt = r.restoration_time_minutes
            rel.append((method, task.task_id, r.saidi_minutes, rt[50], rt[90], rt[95], r.pct_restored_final))
            reports[f"{method}/{task.task_id}"] = {"adaptation": a.to_dict(), "reliability": r.to_dict()}

    _write_rows(ev / "curves.csv", ["method", "task", "iteration", "mean", "eval", "best"], curves)
    _write_rows(ev / "adaptation.csv", ["method", "task", "mean_reward", "delta_init", "delta_r",
                                        "episodes_to_threshold", "zero_shot", "final"], adapt)
    _write_rows(ev / "reliability.csv", ["method", "task", "saidi_min", "restore50_min", "restore90_min",
                                         "restore95_min", "pct_restored"], rel)
    _dump(ev / "reports.json", reports)
    methods = [m for m in METHODS if m in starts or m == "greedy"]
    _dump(ev / "manifest.json", {"format": RUN_FORMAT, "kind": "finetune-eval", "budget": budget,
                                 "methods": methods, "test_task_ids": [t.task_id for t in test],
                                 "es_seeds": seeds})
    wall = time.perf_counter() - t0
    _write_rows(ev / "timings.csv", ["method", "task", "iteration", "seconds"], timings + [("total", "", "", wall)])
    return {"methods": methods, "n_tasks": len(test), "wall_time": wall}


# -- sweep ---------------------------------------------------------------------

def sweep(cfg: RunConfig, out: Path, executor=None) -> dict:
    t0 = time.perf_counter()
    es = cfg.es_config()
    sw = out / "sweep"
    sw.mkdir(parents=True, exist_ok=True)
    _dump(out / "config.json", stored_config(cfg))
    cells, timings, grid, scen = [], [], {}, {}
    for xi in cfg.forecast.xi_list:
        for kappa in cfg.forecast.kappa_list:
            tasks = build_tasks(cfg, xi, kappa)[:cfg.sweep_tasks]
            tpl = policy_template(tasks[0], cfg.hidden, cfg.seed)
            rewards = []
            for task in tasks:
                obj = ClrObjective(task, tpl)
                e = es.replace(seed=derive_seed(cfg.seed, 2000 + task.task_id))
                theta, rec = train_task(obj, tpl.theta, e, executor)
                r = _mean_eval(obj, theta, REPORT_SEEDS)
                rewards.append(r)
                cells.append((xi, kappa, task.task_id, task.seed, r, rec.best_iteration))
                timings += _timing_rows((xi, kappa, task.task_id), rec)
            grid[(xi, kappa)] = float(np.mean(rewards))
            scen[f"xi={xi!r},kappa={kappa!r}"] = [t.seed for t in tasks]
    _write_rows(sw / "cells.csv", ["xi", "kappa", "task", "scenario_seed", "reward", "best_iteration"], cells)
    _write_rows(sw / "table.csv", ["xi_pct"] + [f"kappa_{k:g}h" for k in cfg.forecast.kappa_list],
                [[f"{100 * xi:g}"] + [grid[(xi, k)] for k in cfg.forecast.kappa_list]
                 for xi in cfg.forecast.xi_list])
    _dump(sw / "manifest.json", {"format": RUN_FORMAT, "kind": "sweep", "xi": list(cfg.forecast.xi_list),
                                 "kappa": list(cfg.forecast.kappa_list), "scenario_seeds": scen,
                                 "report_seeds": list(REPORT_SEEDS)})
    wall = time.perf_counter() - t0
    _write_rows(sw / "timings.csv", ["xi", "kappa", "task", "iteration", "seconds"],
                timings + [("total", "", "", "", wall)])
    return {"cells": len(grid), "wall_time": wall}


# -- bench ---------------------------------------------------------------------

def bench(cfg: RunConfig, out: Path) -> dict:
    t0 = time.perf_counter()
    b = cfg.bench
    bd = out / "bench"
    bd.mkdir(parents=True, exist_ok=True)
    rows, timings, result = [], [], {}
    for fn in b.functions:
        obj = Benchmark(fn)
        es = EsConfig(n=b.n, sigma=b.sigma, alpha=b.alpha, iters=b.iters,
                      fitness_shaping=b.fitness_shaping, seed=derive_seed(cfg.seed, ord(fn[1])))
        theta, rec = train_task(obj, np.array(b.start[fn], dtype=float), es)
        rows += _curve_rows((fn,), rec)
        timings += _timing_rows((fn,), rec)
        result[fn] = {"best_fitness": rec.best_fitness[-1], "best_params": theta.tolist(),
                      "best_iteration": rec.best_iteration}
    _write_rows(bd / "curves.csv", ["function", "iteration", "mean", "eval", "best"], rows)
    _dump(bd / "manifest.json", {"format": RUN_FORMAT, "kind": "bench", "config": stored_config(cfg)["bench"],
                                 "seed": cfg.seed, "results": result})
    wall = time.perf_counter() - t0
    _write_rows(bd / "timings.csv", ["function", "iteration", "seconds"], timings + [("total", "", wall)])
    return {**{fn: r["best_fitness"] for fn, r in result.items()}, "wall_time": wall}


# -- report --------------------------------------------------------------------

def _trace_frames(path: Path, task):
    rows = _read_rows(path)
    loads = [ld.id for ld in task.loads.loads]
    demand = task.loads.demand_p
    heat = [(int(r["t"]), lid, float(r[f"served_{lid}"]) / demand[i])
            for r in rows for i, lid in enumerate(loads)]
    heat.sort(key=lambda x: (loads.index(x[1]), x[0]))
    dcols = [c for c in rows[0] if c.startswith(("p_", "soc_", "fuel_"))] if rows else []
    dispatch = [[int(r["t"])] + [float(r[c]) for c in dcols] for r in rows]
    return heat, dcols, dispatch


def _fmt_minutes(values) -> str:
    if any(v == "" for v in values):
        return "not restored"
    return repr(float(np.mean([float(v) for v in values])))


def report(run_dir: Path) -> dict:
    run_dir = Path(run_dir)
    manifests = [p for p in (run_dir / "manifest.json", run_dir / "eval" / "manifest.json",
                             run_dir / "sweep" / "manifest.json", run_dir / "bench" / "manifest.json")
                 if p.is_file()]
    if not manifests:
        raise RunDirError(f"{run_dir}: no manifest found")
    for p in manifests:
        if _read_json(p).get("format") != RUN_FORMAT:
            raise RunDirError(f"{p}: unrecognized manifest")
    rep = run_dir / "report"
    rep.mkdir(exist_ok=True)
    emitted = []

    if (run_dir / "curves.csv").is_file():
        _write_rows(rep / "curves.csv", ["task", "iteration", "mean", "best"],
                    [(r["task"], r["iteration"], r["mean"], r["best"]) for r in _read_rows(run_dir / "curves.csv")])
        emitted.append("curves.csv")
    if (run_dir / "eval" / "curves.csv").is_file():
        _write_rows(rep / "curves_eval.csv", ["method", "task", "iteration", "mean", "best"],
                    [(r["method"], r["task"], r["iteration"], r["mean"], r["best"])
                     for r in _read_rows(run_dir / "eval" / "curves.csv")])
        emitted.append("curves_eval.csv")

    traces = sorted((run_dir / "eval" / "traces").glob("*.csv")) + sorted((run_dir / "traces").glob("*.csv"))
    if traces:
        if not (run_dir / "tasks.json").is_file():
            raise RunDirError(f"{run_dir}: traces present but tasks.json missing")
        tasks = {t.task_id: t for t in load_tasks(run_dir / "tasks.json")}
        primary = next((p for p in traces if p.name.startswith("mgf-rl_")), traces[0])
        for p in traces:
            task = tasks[int(p.stem.rsplit("_task", 1)[1])]
            heat, dcols, dispatch = _trace_frames(p, task)
            names = [f"heatmap_{p.stem}.csv", f"dispatch_{p.stem}.csv"]
            if p == primary:
                names = ["heatmap.csv", "dispatch.csv"]
            _write_rows(rep / names[0], ["load", "t", "served_fraction"], [(l, t, f) for t, l, f in heat])
            _write_rows(rep / names[1], ["t", *dcols], dispatch)
            emitted += names

    if (run_dir / "eval" / "adaptation.csv").is_file():
        rows = _read_rows(run_dir / "eval" / "adaptation.csv")
        methods = [m for m in METHODS if m != "es-rl" and any(r["method"] == m for r in rows)]
        task_ids = list(dict.fromkeys(r["task"] for r in rows))
        by = {(r["method"], r["task"]): r for r in rows}
        _write_rows(rep / "table_adaptation.csv",
                    ["task"] + [f"{m}_{k}" for m in methods for k in ("delta_init", "delta_r")],
                    [[t] + [by[(m, t)][k] for m in methods for k in ("delta_init", "delta_r")] for t in task_ids])
        rel = _read_rows(run_dir / "eval" / "reliability.csv")
        methods = [m for m in METHODS if any(r["method"] == m for r in rel)]
        col = {m: [r for r in rel if r["method"] == m] for m in methods}
        _write_rows(rep / "table_reliability.csv", ["metric"] + methods, [
            ["SAIDI (min)"] + [repr(float(np.mean([float(r["saidi_min"]) for r in col[m]]))) for m in methods],
            ["90% restore (min)"] + [_fmt_minutes([r["restore90_min"] for r in col[m]]) for m in methods],
            ["% restored"] + [repr(float(np.mean([float(r["pct_restored"]) for r in col[m]]))) for m in methods],
        ])
        emitted += ["table_adaptation.csv", "table_reliability.csv"]

    if (run_dir / "sweep" / "table.csv").is_file():
        rows = _read_rows(run_dir / "sweep" / "table.csv")
        _write_rows(rep / "table_forecast.csv", list(rows[0]), [list(r.values()) for r in rows])
        emitted.append("table_forecast.csv")

    _dump(rep / "summary.json", {"run_dir_manifests": [str(p.relative_to(run_dir)) for p in manifests],
                                 "files": sorted(emitted)})
    return {"files": sorted(emitted)}


def load_run_config(run_dir: Path) -> RunConfig:
    return parse_config(_read_json(run_dir / "config.json"), run_dir)
