"""Command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 invalid input.
Environment overrides: METACLR_OUT (output directory), METACLR_PARALLEL
(worker processes for population evaluation). Flags win over both.
"""

from __future__ import annotations

import argparse
import fcntl
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

from . import runs
from .config import ConfigError, RunConfig, load_config
from .env import action_dim, state_dim
from .policy import PolicyError
from .scenarios import ScenarioError

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


class InputError(ValueError):
    pass


@contextmanager
def run_lock(directory: Path):
    """Advisory exclusive lock so one command writes a run directory at a time."""
    directory.mkdir(parents=True, exist_ok=True)
    fh = open(directory / ".lock", "w")
    try:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise RuntimeError(f"{directory} is locked by another command") from None
        yield
    finally:
        fh.close()


@contextmanager
def executor_for(parallel: int):
    if parallel <= 1:
        yield None
        return
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        yield pool


def _parallel(args) -> int:
    value = args.parallel if args.parallel is not None else os.environ.get("METACLR_PARALLEL", "1")
    try:
        n = int(value)
    except ValueError:
        raise InputError(f"--parallel / METACLR_PARALLEL must be an integer, got {value!r}") from None
    if n < 1:
        raise InputError("--parallel must be >= 1")
    return n


def _out_dir(args, cfg: RunConfig | None) -> Path:
    out = args.out or os.environ.get("METACLR_OUT") or (cfg.out if cfg else None)
    if not out:
        raise InputError("no output directory: pass --out, set METACLR_OUT or give 'out' in the config")
    if cfg is not None and not args.out and not os.environ.get("METACLR_OUT"):
        return cfg.base_dir / out
    return Path(out)


def _config(args, required: bool = True) -> RunConfig | None:
    if args.config is None:
        if required:
            raise InputError("--config is required")
        return None
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise InputError("--seed must be >= 0")
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_validate(args) -> int:
    cfg = _config(args)
    tasks = runs.build_tasks(cfg)
    t = tasks[0]
    print(f"ok: system={t.system.name} buses={t.network.n_buses} loads={len(t.loads)} "
          f"ders={len(t.fleet)} tasks={len(tasks)} (train {cfg.tasks.n_train}) "
          f"state_dim={state_dim(t)} action_dim={action_dim(t)}")
    return EXIT_OK


def cmd_train_meta(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    with run_lock(out), executor_for(_parallel(args)) as ex:
        s = runs.train_meta(cfg, out, ex)
    print(f"train-meta: M={s['M']} final meta-eval reward={s['final_meta_eval']:.4f} "
          f"wall={s['wall_time']:.1f}s out={out}")
    return EXIT_OK


def cmd_finetune_eval(args) -> int:
    cfg = _config(args, required=False)
    out = _out_dir(args, cfg)
    if cfg is None:
        if not (out / "config.json").is_file():
            raise InputError("--config is required unless --out is an existing run directory")
        cfg = runs.load_run_config(out)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
    if args.budget is not None and args.budget < 0:
        raise InputError("--budget must be >= 0")
    with run_lock(out), executor_for(_parallel(args)) as ex:
        s = runs.finetune_eval(cfg, out, args.budget, ex)
    print(f"finetune-eval: tasks={s['n_tasks']} methods={','.join(s['methods'])} "
          f"wall={s['wall_time']:.1f}s out={out / 'eval'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    with run_lock(out), executor_for(_parallel(args)) as ex:
        s = runs.sweep(cfg, out, ex)
    print(f"sweep: cells={s['cells']} wall={s['wall_time']:.1f}s out={out / 'sweep'}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args, required=False) or RunConfig(seed=args.seed or 0)
    out = _out_dir(args, cfg if args.config else None)
    with run_lock(out):
        s = runs.bench(cfg, out)
    fits = " ".join(f"{fn}={v:.6f}" for fn, v in s.items() if fn != "wall_time")
    print(f"bench: {fits} wall={s['wall_time']:.2f}s out={out / 'bench'}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir) if args.run_dir else _out_dir(args, None)
    if not run_dir.is_dir():
        raise InputError(f"{run_dir} is not a directory")
    with run_lock(run_dir):
        s = runs.report(run_dir)
    print(f"report: {len(s['files'])} files in {run_dir / 'report'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metaclr", description="Meta-learned ES controllers for critical load restoration.")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, budget=False):
        sp.add_argument("--config", help="run configuration (JSON)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="run directory (overrides METACLR_OUT and the config)")
        sp.add_argument("--parallel", help="worker processes (overrides METACLR_PARALLEL)")
        if budget:
            sp.add_argument("--budget", type=int, help="fine-tuning iterations per test task")
        return sp

    common(sub.add_parser("train-meta", help="meta-train across the training tasks")).set_defaults(fn=cmd_train_meta)
    common(sub.add_parser("finetune-eval", help="fine-tune and compare methods on held-out tasks"),
           budget=True).set_defaults(fn=cmd_finetune_eval)
    common(sub.add_parser("sweep", help="ES-RL over a forecast error x lookahead grid")).set_defaults(fn=cmd_sweep)
    rp = common(sub.add_parser("report", help="emit plot-ready CSV/JSON from a run directory"))
    rp.add_argument("run_dir", nargs="?", help="run directory (defaults to --out)")
    rp.set_defaults(fn=cmd_report)
    common(sub.add_parser("validate-config", help="check a configuration and print its dimensions")
           ).set_defaults(fn=cmd_validate)
    common(sub.add_parser("bench", help="ES on the f1/f2 benchmark functions")).set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        return args.fn(args)
    except (ConfigError, InputError, runs.RunDirError, ScenarioError, PolicyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
