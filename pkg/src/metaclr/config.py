"""Run configuration: a single JSON document, validated into typed objects.

Schema (all sections optional except where noted)::

    {
      "system": "ieee13" | "ieee123" | {"path": "grid.json"},
      "seed": 0,                       # policy init and ES streams
      "tasks": {"M": 16, "n_train": 12, "demand_range": [20, 160],
                "horizon": 24, "tau": 0.08333, "mu": 1.0, "lam": 1e8,
                "seed": null},         # scenario seed; defaults to "seed"
      "forecast": {"xi": 0.1, "kappa": 4, "csv_path": null,
                   "xi_list": [0, 0.05, 0.1, 0.15, 0.2, 0.25],
                   "kappa_list": [1, 2, 4, 6]},
      "es": {"n": 20, "sigma": 0.05, "alpha": 0.01, "iters": 40,
             "eval_episodes": 1, "fitness_shaping": "centered-rank",
             "mirrored": true, "eval_seeds": [0]},
      "meta": {"eta": "1/m", "finetune_budget": 40, "warm_start": true},
      "policy": {"hidden": [64, 64]},
      "sweep": {"n_tasks": 4},
      "bench": {"functions": ["f1", "f2"], "iters": 300, "n": 50,
                "sigma": 0.1, "alpha": 0.1, "fitness_shaping": "none",
                "start": {"f1": [3.0], "f2": [2.0, -1.5]}},
      "out": "runs/demo"
    }

Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .es import SHAPINGS, EsConfig
from .grid import SYSTEMS, GridError, GridSystem, load_system
from .meta import eta_schedule
from .scenarios import ScenarioError, lookahead_steps, read_profiles_csv

DEFAULT_XI = (0.0, 0.05, 0.10, 0.15, 0.20, 0.25)
DEFAULT_KAPPA = (1.0, 2.0, 4.0, 6.0)


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class TaskSpec:
    M: int = 16
    n_train: int = 12
    demand_range: tuple[float, float] = (20.0, 160.0)
    horizon: int = 24
    tau: float = 1 / 12
    mu: float = 1.0
    lam: float = 1e8
    seed: int | None = None


@dataclass
class ForecastSpec:
    xi: float = 0.1
    kappa: float = 4.0
    csv_path: str | None = None
    xi_list: tuple[float, ...] = DEFAULT_XI
    kappa_list: tuple[float, ...] = DEFAULT_KAPPA


@dataclass
class MetaSpec:
    eta: str | float = "1/m"
    finetune_budget: int = 40
    warm_start: bool = True


@dataclass
class BenchSpec:
    functions: tuple[str, ...] = ("f1", "f2")
    iters: int = 300
    n: int = 50
    sigma: float = 0.1
    alpha: float = 0.1
    fitness_shaping: str = "none"
    start: dict = field(default_factory=lambda: {"f1": [3.0], "f2": [2.0, -1.5]})


@dataclass
class RunConfig:
    system: str | dict = "ieee13"
    seed: int = 0
    tasks: TaskSpec = field(default_factory=TaskSpec)
    forecast: ForecastSpec = field(default_factory=ForecastSpec)
    es: EsConfig = field(default_factory=EsConfig)
    meta: MetaSpec = field(default_factory=MetaSpec)
    hidden: tuple[int, ...] = (64, 64)
    sweep_tasks: int = 4
    bench: BenchSpec = field(default_factory=BenchSpec)
    out: str | None = None
    base_dir: Path = field(default_factory=Path.cwd)

    @property
    def scenario_seed(self) -> int:
        return self.seed if self.tasks.seed is None else self.tasks.seed

    def build_system(self) -> GridSystem:
        if isinstance(self.system, str):
            return SYSTEMS[self.system]()
        return load_system(self.base_dir / self.system["path"])

    def csv_path(self) -> Path | None:
        p = self.forecast.csv_path
        return None if p is None else self.base_dir / p

    def es_config(self) -> EsConfig:
        return self.es.replace(seed=self.seed)

    def to_dict(self) -> dict:
        """Canonical resolved form (what gets stored in run directories)."""
        es = asdict(self.es)
        es.pop("seed")
        es["eval_seeds"] = list(es["eval_seeds"])
        return {
            "system": self.system,
            "seed": self.seed,
            "tasks": {**asdict(self.tasks), "demand_range": list(self.tasks.demand_range)},
            "forecast": {**asdict(self.forecast), "xi_list": list(self.forecast.xi_list),
                         "kappa_list": list(self.forecast.kappa_list)},
            "es": es,
            "meta": asdict(self.meta),
            "policy": {"hidden": list(self.hidden)},
            "sweep": {"n_tasks": self.sweep_tasks},
            "bench": {**asdict(self.bench), "functions": list(self.bench.functions)},
            "out": self.out,
        }


# -- parsing ------------------------------------------------------------------

def _section(d: dict, name: str, allowed) -> dict:
    sec = d.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(name, "must be an object")
    unknown = set(sec) - set(allowed)
    if unknown:
        raise ConfigError(f"{name}.{sorted(unknown)[0]}", "unknown key")
    return sec


def _num(sec: dict, name: str, key: str, default, kind=float, lo=None, hi=None, lo_open=False):
    v = sec.get(key, default)
    where = f"{name}.{key}" if name else key
    if v is None:
        return v
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (kind is int and int(v) != v):
        raise ConfigError(where, f"expected {kind.__name__}, got {v!r}")
    v = kind(v)
    if lo is not None and (v <= lo if lo_open else v < lo):
        raise ConfigError(where, f"must be {'>' if lo_open else '>='} {lo}")
    if hi is not None and v > hi:
        raise ConfigError(where, f"must be <= {hi}")
    return v


def _num_list(sec: dict, name: str, key: str, default, lo=0.0):
    v = sec.get(key, default)
    if not isinstance(v, (list, tuple)) or not v:
        raise ConfigError(f"{name}.{key}", "must be a nonempty list")
    for x in v:
        if isinstance(x, bool) or not isinstance(x, (int, float)) or x < lo:
            raise ConfigError(f"{name}.{key}", f"entries must be numbers >= {lo}")
    return tuple(float(x) for x in v)


def parse_config(data: dict, base_dir=None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    top = {"system", "seed", "tasks", "forecast", "es", "meta", "policy", "sweep", "bench", "out"}
    unknown = set(data) - top
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown key")
    base = Path(base_dir) if base_dir is not None else Path.cwd()

    system = data.get("system", "ieee13")
    if isinstance(system, str):
        if system not in SYSTEMS:
            raise ConfigError("system", f"must be one of {sorted(SYSTEMS)} or {{'path': ...}}")
    elif isinstance(system, dict) and isinstance(system.get("path"), str):
        if not (base / system["path"]).is_file():
            raise ConfigError("system.path", f"file not found: {system['path']}")
    else:
        raise ConfigError("system", "must be a system name or {'path': ...}")
    seed = _num(data, "", "seed", 0, int, lo=0)

    t = _section(data, "tasks", TaskSpec.__dataclass_fields__)
    dr = t.get("demand_range", [20.0, 160.0])
    if (not isinstance(dr, (list, tuple)) or len(dr) != 2
            or not all(isinstance(x, (int, float)) for x in dr) or not 0 < dr[0] <= dr[1]):
        raise ConfigError("tasks.demand_range", "must be [lo, hi] with 0 < lo <= hi")
    tasks = TaskSpec(
        M=_num(t, "tasks", "M", 16, int, lo=1),
        n_train=_num(t, "tasks", "n_train", 12, int, lo=1),
        demand_range=(float(dr[0]), float(dr[1])),
        horizon=_num(t, "tasks", "horizon", 24, int, lo=1),
        tau=_num(t, "tasks", "tau", 1 / 12, lo=0, lo_open=True),
        mu=_num(t, "tasks", "mu", 1.0, lo=0),
        lam=_num(t, "tasks", "lam", 1e8, lo=0),
        seed=_num(t, "tasks", "seed", None, int, lo=0),
    )
    if tasks.n_train > tasks.M:
        raise ConfigError("tasks.n_train", "cannot exceed tasks.M")

    f = _section(data, "forecast", ForecastSpec.__dataclass_fields__)
    csv_path = f.get("csv_path")
    if csv_path is not None:
        if not isinstance(csv_path, str) or not (base / csv_path).is_file():
            raise ConfigError("forecast.csv_path", f"file not found: {csv_path!r}")
        try:
            columns = read_profiles_csv(base / csv_path, tasks.horizon)
        except ScenarioError as exc:
            raise ConfigError("forecast.csv_path", str(exc)) from None
    forecast = ForecastSpec(
        xi=_num(f, "forecast", "xi", 0.1, lo=0),
        kappa=_num(f, "forecast", "kappa", 4.0, lo=0, lo_open=True),
        csv_path=csv_path,
        xi_list=_num_list(f, "forecast", "xi_list", DEFAULT_XI),
        kappa_list=_num_list(f, "forecast", "kappa_list", DEFAULT_KAPPA),
    )
    for key, values in (("kappa", [forecast.kappa]), ("kappa_list", forecast.kappa_list)):
        try:
            for k in values:
                lookahead_steps(k, tasks.tau)
        except ScenarioError as exc:
            raise ConfigError(f"forecast.{key}", str(exc)) from None

    e = _section(data, "es", set(EsConfig.__dataclass_fields__) - {"seed"})
    try:
        es = EsConfig(**{k: (tuple(v) if k == "eval_seeds" else v) for k, v in e.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError("es", str(exc)) from None

    m = _section(data, "meta", MetaSpec.__dataclass_fields__)
    eta = m.get("eta", "1/m")
    try:
        eta_schedule(eta)
    except ValueError as exc:
        raise ConfigError("meta.eta", str(exc)) from None
    meta = MetaSpec(eta, _num(m, "meta", "finetune_budget", 40, int, lo=0),
                    bool(m.get("warm_start", True)))

    p = _section(data, "policy", {"hidden"})
    hidden = p.get("hidden", [64, 64])
    if not isinstance(hidden, (list, tuple)) or not all(isinstance(h, int) and h > 0 for h in hidden):
        raise ConfigError("policy.hidden", "must be a list of positive integers")

    s = _section(data, "sweep", {"n_tasks"})
    sweep_tasks = _num(s, "sweep", "n_tasks", 4, int, lo=1)
    if sweep_tasks > tasks.M:
        raise ConfigError("sweep.n_tasks", "cannot exceed tasks.M")

    b = _section(data, "bench", BenchSpec.__dataclass_fields__)
    funcs = tuple(b.get("functions", ("f1", "f2")))
    if not funcs or any(fn not in ("f1", "f2") for fn in funcs):
        raise ConfigError("bench.functions", "entries must be 'f1' or 'f2'")
    shaping = b.get("fitness_shaping", "none")
    if shaping not in SHAPINGS:
        raise ConfigError("bench.fitness_shaping", f"must be one of {SHAPINGS}")
    start = dict(BenchSpec().start, **b.get("start", {}))
    for fn, dim in (("f1", 1), ("f2", 2)):
        if not isinstance(start.get(fn), list) or len(start[fn]) != dim:
            raise ConfigError(f"bench.start.{fn}", f"must be a list of {dim} numbers")
    bench = BenchSpec(funcs, _num(b, "bench", "iters", 300, int, lo=0), _num(b, "bench", "n", 50, int, lo=2),
                      _num(b, "bench", "sigma", 0.1, lo=0, lo_open=True),
                      _num(b, "bench", "alpha", 0.1, lo=0, lo_open=True), shaping, start)

    out = data.get("out")
    if out is not None and not isinstance(out, str):
        raise ConfigError("out", "must be a path string")

    cfg = RunConfig(system, seed, tasks, forecast, es, meta, tuple(hidden), sweep_tasks, bench, out, base)
    try:
        grid = cfg.build_system()
    except (GridError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError("system", f"invalid grid: {exc}") from None
    if csv_path is not None:
        missing = [d.id for d in grid.fleet.renewables if d.id not in columns]
        if missing:
            raise ConfigError("forecast.csv_path", f"no column for renewable {missing[0]!r}")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("--config", f"file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"not valid JSON ({exc})") from None
    return parse_config(data, path.parent)
