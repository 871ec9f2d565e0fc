"""Feed-forward tanh policy over a flat parameter vector.

Packing order of ``theta`` is layer-major; within a layer the weight matrix
of shape (fan_in, fan_out) comes first in C order, followed by the bias.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "metaclr-policy/1"


class PolicyError(ValueError):
    pass


def n_params(shape) -> int:
    return sum(a * b + b for a, b in zip(shape[:-1], shape[1:]))


@dataclass(frozen=True, eq=False)
class PolicyParams:
    shape: tuple[int, ...]
    theta: np.ndarray
    scale: np.ndarray | None = None
    offset: np.ndarray | None = None
    lineage: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.shape != (n_params(self.shape),):
            raise PolicyError(f"theta has {theta.size} entries, shape {self.shape} needs {n_params(self.shape)}")
        object.__setattr__(self, "theta", theta)
        d_in = self.shape[0]
        if self.scale is None:
            object.__setattr__(self, "scale", np.ones(d_in))
        if self.offset is None:
            object.__setattr__(self, "offset", np.zeros(d_in))

    @property
    def d_in(self) -> int:
        return self.shape[0]

    @property
    def d_out(self) -> int:
        return self.shape[-1]

    @cached_property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out, pos = [], 0
        for a, b in zip(self.shape[:-1], self.shape[1:]):
            w = self.theta[pos:pos + a * b].reshape(a, b)
            pos += a * b
            out.append((w, self.theta[pos:pos + b]))
            pos += b
        return out

    def with_theta(self, theta) -> "PolicyParams":
        return PolicyParams(self.shape, theta, self.scale, self.offset, dict(self.lineage))

    def act(self, state_vector) -> np.ndarray:
        return forward(self, state_vector)


def init_params(d_in: int, d_out: int, hidden=(64, 64), seed: int = 0,
                scale=None, offset=None) -> PolicyParams:
    """Gaussian weights scaled by 1/sqrt(fan_in), zero biases."""
    if d_in < 1 or d_out < 1:
        raise PolicyError("dimensions must be positive")
    shape = (d_in, *hidden, d_out)
    rng = np.random.default_rng(seed)
    parts = []
    for a, b in zip(shape[:-1], shape[1:]):
        parts.append(rng.standard_normal(a * b) / np.sqrt(a))
        parts.append(np.zeros(b))
    return PolicyParams(shape, np.concatenate(parts), scale, offset, {"init_seed": int(seed)})


def forward(params: PolicyParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.d_in:
        raise PolicyError(f"input has {x.shape[-1]} features, policy expects {params.d_in}")
    h = (x - params.offset) * params.scale
    for w, b in params.layers:
        h = np.tanh(h @ w + b)
    return h


def param_distance(a: PolicyParams, b: PolicyParams) -> float:
    """Half squared Euclidean distance between parameter vectors.

    This equals the KL divergence between unit-variance Gaussians centred on
    the two vectors; it is a parameter-space proxy, not a policy divergence.
    """
    ta = a.theta if isinstance(a, PolicyParams) else np.asarray(a, dtype=float)
    tb = b.theta if isinstance(b, PolicyParams) else np.asarray(b, dtype=float)
    if isinstance(a, PolicyParams) and isinstance(b, PolicyParams) and a.shape != b.shape:
        raise PolicyError(f"shape mismatch {a.shape} vs {b.shape}")
    if ta.shape != tb.shape:
        raise PolicyError(f"shape mismatch {ta.shape} vs {tb.shape}")
    d = ta - tb
    return 0.5 * float(d @ d)


def task_normalizer(task) -> tuple[np.ndarray, np.ndarray]:
    """(scale, offset) mapping the task's state vector to comparable ranges."""
    fleet = task.fleet
    K = task.lookahead
    scale = np.concatenate([
        np.repeat(1.0 / np.array([d.capacity for d in fleet.renewables], dtype=float), K),
        np.ones(len(task.loads)),
        1.0 / np.array([d.soc_max for d in fleet.storage], dtype=float),
        1.0 / np.array([d.fuel_reserve for d in fleet.fuel], dtype=float),
        [1.0 / task.horizon],
    ])
    return scale, np.zeros_like(scale)


# -- checkpoints --------------------------------------------------------------

def params_to_dict(params: PolicyParams) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "shape": list(params.shape),
        "packing": "layer-major; weights (fan_in x fan_out, C order) then bias; float64 little-endian",
        "scale": params.scale.tolist(),
        "offset": params.offset.tolist(),
        "lineage": params.lineage,
        "theta_b64": base64.b64encode(params.theta.astype("<f8").tobytes()).decode("ascii"),
    }


def params_from_dict(d: dict) -> PolicyParams:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise PolicyError(f"unsupported checkpoint format {d.get('format')!r}")
    theta = np.frombuffer(base64.b64decode(d["theta_b64"]), dtype="<f8").astype(np.float64)
    return PolicyParams(tuple(d["shape"]), theta, np.array(d["scale"], dtype=float),
                        np.array(d["offset"], dtype=float), dict(d.get("lineage", {})))


def save_params(params: PolicyParams, path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params), indent=1, sort_keys=True))


def load_params(path) -> PolicyParams:
    return params_from_dict(json.loads(Path(path).read_text()))
