"""Low-rank adapters and the task-common / task-specific adapter mixture.

For task ``t`` the mixture output is

    sum_i a_i * phi_i(x) + b * phi^t(x)

where ``phi_i`` are the ``A`` shared adapters, ``phi^t`` is the task's own
adapter, ``b = W_B[t, t]`` and ``a`` is row ``t`` of ``W_A``, used as-is in
``raw`` mode, through a sigmoid in ``eval`` mode and through a Gumbel-sigmoid
draw in ``train`` mode. Everything is float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ValidationError

MODES = ("raw", "eval", "train")
_TINY = np.nextafter(0.0, 1.0)
_ONE_MINUS = np.nextafter(1.0, 0.0)


def _matrix(a, name: str) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValidationError(f"{name} must be a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} has non-finite entries")
    a.setflags(write=False)
    return a


def _vector(x, n: int, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (n,):
        raise ValidationError(f"{name} must have shape ({n},), got {x.shape}")
    return x


@dataclass(frozen=True, eq=False)
class LowRankAdapter:
    down: np.ndarray  # r x d_in
    up: np.ndarray  # d_out x r
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "down", _matrix(self.down, "down"))
        object.__setattr__(self, "up", _matrix(self.up, "up"))
        if self.down.shape[0] < 1:
            raise ValidationError("adapter rank must be >= 1")
        if self.up.shape[1] != self.down.shape[0]:
            raise ValidationError(f"rank mismatch: down {self.down.shape}, up {self.up.shape}")
        if not np.isfinite(self.scale):
            raise ValidationError("scale must be finite")

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    @property
    def d_in(self) -> int:
        return self.down.shape[1]

    @property
    def d_out(self) -> int:
        return self.up.shape[0]

    def apply(self, x) -> np.ndarray:
        x = _vector(x, self.d_in)
        return self.scale * (self.up @ (self.down @ x))

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int, rank: int, scale: float = 1.0, zero_up: bool = True):
        """Gaussian ``down``; ``up`` zero unless ``zero_up`` is False."""
        down = rng.standard_normal((rank, d_in)) / np.sqrt(d_in)
        up = np.zeros((d_out, rank)) if zero_up else rng.standard_normal((d_out, rank)) / np.sqrt(rank)
        return cls(down, up, scale)


def adapter_apply(adapter: LowRankAdapter, x) -> np.ndarray:
    return adapter.apply(x)


@dataclass(frozen=True, eq=False)
class CpolyTaskConfig:
    shared_adapters: tuple[LowRankAdapter, ...]
    task_adapters: tuple[LowRankAdapter, ...]
    allocation: np.ndarray  # T x (A + T)
    tau: float = 1.0
    B: int = 1

    def __post_init__(self):
        object.__setattr__(self, "shared_adapters", tuple(self.shared_adapters))
        object.__setattr__(self, "task_adapters", tuple(self.task_adapters))
        object.__setattr__(self, "allocation", _matrix(self.allocation, "allocation"))
        if self.B != 1:
            raise ValidationError("only one task-specific adapter per task (B=1) is supported")
        if not (self.tau > 0):
            raise ValidationError(f"tau must be > 0, got {self.tau}")
        T, A = len(self.task_adapters), len(self.shared_adapters)
        if T < 1:
            raise ValidationError("need at least one task")
        if self.allocation.shape != (T, A + T):
            raise ValidationError(f"allocation must be {T}x{A + T}, got {self.allocation.shape}")
        adapters = self.shared_adapters + self.task_adapters
        dims = {(ad.d_in, ad.d_out, ad.rank) for ad in adapters}
        if len(dims) != 1:
            raise ValidationError(f"adapters disagree on (d_in, d_out, rank): {sorted(dims)}")
        w_b = self.allocation[:, A:]
        if np.any(w_b[~np.eye(T, dtype=bool)] != 0):
            raise ValidationError("task-specific block must be diagonal: task t may only use its own adapter")

    @property
    def T(self) -> int:
        return len(self.task_adapters)

    @property
    def A(self) -> int:
        return len(self.shared_adapters)

    @property
    def rank(self) -> int:
        return self.task_adapters[0].rank

    @property
    def d_in(self) -> int:
        return self.task_adapters[0].d_in

    @property
    def d_out(self) -> int:
        return self.task_adapters[0].d_out

    @property
    def W_A(self) -> np.ndarray:
        return self.allocation[:, : self.A]

    @property
    def W_B(self) -> np.ndarray:
        return self.allocation[:, self.A :]


def random_config(rng: np.random.Generator, T: int, A: int, d_in: int, d_out: int | None = None, rank: int = 4,
                  tau: float = 1.0, zero_up: bool = False) -> CpolyTaskConfig:
    d_out = d_in if d_out is None else d_out
    make = lambda: LowRankAdapter.init(rng, d_in, d_out, rank, zero_up=zero_up)
    allocation = np.concatenate([rng.standard_normal((T, A)), np.diag(rng.standard_normal(T))], axis=1)
    return CpolyTaskConfig(tuple(make() for _ in range(A)), tuple(make() for _ in range(T)), allocation, tau)


# -- Gumbel-sigmoid -------------------------------------------------------


def gumbel_noise(shape, seed) -> np.ndarray:
    """Difference of two independent standard Gumbel draws, deterministic under ``seed``."""
    rng = np.random.default_rng(seed)
    u = rng.random((2, *tuple(shape)))
    u = np.clip(u, _TINY, _ONE_MINUS)
    g = -np.log(-np.log(u))
    return g[0] - g[1]


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def gumbel_sigmoid(logit, tau: float, seed):
    """``sigmoid((logit + G1 - G2) / tau)``, clipped to the open interval (0, 1)."""
    if not (tau > 0):
        raise ValidationError(f"tau must be > 0, got {tau}")
    logit = np.asarray(logit, dtype=np.float64)
    noise = gumbel_noise(logit.shape, seed).reshape(logit.shape)
    sample = np.clip(_sigmoid((logit + noise) / tau), _TINY, _ONE_MINUS)
    return float(sample) if sample.ndim == 0 else sample


# -- forward and gradients ------------------------------------------------


def mixture_weights(config: CpolyTaskConfig, t: int, mode: str = "raw", seed=None) -> tuple[np.ndarray, float]:
    """Shared weights for task ``t`` after the mode's transform, plus the task weight."""
    if not (0 <= t < config.T):
        raise IndexError(f"task index {t} out of range for T={config.T}")
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}")
    row = config.W_A[t]
    if mode == "eval":
        row = _sigmoid(row)
    elif mode == "train":
        row = np.atleast_1d(gumbel_sigmoid(row, config.tau, seed)) if config.A else row
    return np.asarray(row, dtype=np.float64), float(config.W_B[t, t])


def cpoly_forward(config: CpolyTaskConfig, t: int, x, mode: str = "raw", seed=None) -> np.ndarray:
    x = _vector(x, config.d_in)
    shared_w, task_w = mixture_weights(config, t, mode, seed)
    out = task_w * config.task_adapters[t].apply(x)
    for w, adapter in zip(shared_w, config.shared_adapters):
        out = out + w * adapter.apply(x)
    return out


@dataclass
class CpolyGradients:
    """Gradients of ``upstream . cpoly_forward(config, t, x)``."""

    W_A_row: np.ndarray
    W_B_diag: float
    shared_down: list[np.ndarray]
    shared_up: list[np.ndarray]
    task_down: np.ndarray
    task_up: np.ndarray
    x: np.ndarray
    value: float = 0.0
    extras: dict = field(default_factory=dict)


def cpoly_gradients(config: CpolyTaskConfig, t: int, x, upstream, mode: str = "raw", seed=None) -> CpolyGradients:
    x = _vector(x, config.d_in)
    g = _vector(upstream, config.d_out, "upstream")
    shared_w, task_w = mixture_weights(config, t, mode, seed)

    def parts(adapter: LowRankAdapter, weight: float):
        h = adapter.down @ x
        y = adapter.scale * (adapter.up @ h)
        ug = adapter.up.T @ g
        return (
            float(g @ y),
            weight * adapter.scale * np.outer(ug, x),  # d/d down
            weight * adapter.scale * np.outer(g, h),  # d/d up
            weight * adapter.scale * (adapter.down.T @ ug),  # d/d x
            y,
        )

    task_gy, task_down, task_up, gx, task_y = parts(config.task_adapters[t], task_w)
    value = task_w * task_gy
    gw = np.empty(config.A)
    shared_down, shared_up = [], []
    for i, (w, adapter) in enumerate(zip(shared_w, config.shared_adapters)):
        gy, dd, du, dx, _ = parts(adapter, w)
        gw[i] = gy
        shared_down.append(dd)
        shared_up.append(du)
        gx = gx + dx
        value += w * gy

    if mode == "eval":
        gw = gw * shared_w * (1.0 - shared_w)
    elif mode == "train":
        gw = gw * shared_w * (1.0 - shared_w) / config.tau
    return CpolyGradients(gw, task_gy, shared_down, shared_up, task_down, task_up, gx, value)


def grad_check(f: Callable[[np.ndarray], tuple[float, np.ndarray]], x, eps: float, elementwise: bool = False) -> float:
    """Max over coordinates of ``|analytic - central difference|``, relative to the gradient's scale.

    ``f`` returns ``(value, analytic_gradient)``. The scale is ``max |analytic|`` over the whole
    block, so a coordinate whose true gradient is near zero is not judged on float roundoff alone.
    ``elementwise=True`` divides by ``|analytic_i| + 1e-12`` per coordinate instead.
    """
    if not (eps > 0):
        raise ValidationError(f"eps must be > 0, got {eps}")
    x = np.array(x, dtype=np.float64).reshape(-1)
    value, grad = f(x.copy())
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        raise ValidationError("function value or gradient is non-finite")
    diff = np.empty(x.size)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        fp, fm = f(xp)[0], f(xm)[0]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValidationError(f"non-finite value while perturbing coordinate {i}")
        diff[i] = abs(grad[i] - (fp - fm) / (2 * eps))
    if not x.size:
        return 0.0
    if elementwise:
        return float(np.max(diff / (np.abs(grad) + 1e-12)))
    return float(np.max(diff) / (np.max(np.abs(grad)) + 1e-12))


def _with_allocation_row(config: CpolyTaskConfig, t: int, cols: slice, values) -> CpolyTaskConfig:
    alloc = np.array(config.allocation)
    alloc[t, cols] = values
    return replace(config, allocation=alloc)


def _with_adapter(config: CpolyTaskConfig, group: str, index: int, part: str, values) -> CpolyTaskConfig:
    adapters = list(getattr(config, group))
    old = adapters[index]
    mat = np.asarray(values).reshape(getattr(old, part).shape)
    adapters[index] = replace(old, **{part: mat})
    return replace(config, **{group: tuple(adapters)})


def check_all_gradients(config: CpolyTaskConfig, t: int, x, upstream, eps: float = 1e-5, mode: str = "raw",
                        seed=None, elementwise: bool = False) -> dict[str, float]:
    """Finite-difference check of every parameter class of the mixture for task ``t``."""
    x = _vector(x, config.d_in)
    g = _vector(upstream, config.d_out, "upstream")
    value = lambda cfg, xx=x: float(g @ cpoly_forward(cfg, t, xx, mode, seed))
    grads = lambda cfg, xx=x: cpoly_gradients(cfg, t, xx, g, mode, seed)
    A = config.A
    results = {}

    if A:
        results["W_A_row"] = grad_check(
            lambda v: (value(_with_allocation_row(config, t, slice(0, A), v)), grads(_with_allocation_row(config, t, slice(0, A), v)).W_A_row),
            config.W_A[t], eps, elementwise,
        )
    col = A + t
    results["W_B_diag"] = grad_check(
        lambda v: (value(_with_allocation_row(config, t, slice(col, col + 1), v)),
                   [grads(_with_allocation_row(config, t, slice(col, col + 1), v)).W_B_diag]),
        [config.allocation[t, col]], eps, elementwise,
    )

    def adapter_check(group: str, index: int, part: str, pick):
        start = getattr(getattr(config, group)[index], part)
        return grad_check(
            lambda v: (value(_with_adapter(config, group, index, part, v)), pick(grads(_with_adapter(config, group, index, part, v)))),
            start, eps, elementwise,
        )

    results["task_down"] = adapter_check("task_adapters", t, "down", lambda gr: gr.task_down)
    results["task_up"] = adapter_check("task_adapters", t, "up", lambda gr: gr.task_up)
    for i in range(A):
        results[f"shared_down[{i}]"] = adapter_check("shared_adapters", i, "down", lambda gr, i=i: gr.shared_down[i])
        results[f"shared_up[{i}]"] = adapter_check("shared_adapters", i, "up", lambda gr, i=i: gr.shared_up[i])
    results["x"] = grad_check(lambda v: (value(config, v), grads(config, v).x), x, eps, elementwise)
    return results


# -- persistence ----------------------------------------------------------


def save_config(config: CpolyTaskConfig, path) -> tuple[Path, Path]:
    """Write ``<path>.npz`` (row-major arrays) and ``<path>.manifest.json``."""
    base = Path(path)
    arrays = {"allocation": config.allocation}
    for group, prefix in (("shared_adapters", "shared"), ("task_adapters", "task")):
        for i, ad in enumerate(getattr(config, group)):
            arrays[f"{prefix}_{i}_down"] = ad.down
            arrays[f"{prefix}_{i}_up"] = ad.up
    npz = base.with_name(base.name + ".npz")
    manifest = base.with_name(base.name + ".manifest.json")
    np.savez(npz, **arrays)
    meta = {
        "T": config.T,
        "A": config.A,
        "B": config.B,
        "r": config.rank,
        "tau": config.tau,
        "d_in": config.d_in,
        "d_out": config.d_out,
        "shared_scales": [ad.scale for ad in config.shared_adapters],
        "task_scales": [ad.scale for ad in config.task_adapters],
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
    }
    manifest.write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return npz, manifest


def load_config(path) -> CpolyTaskConfig:
    base = Path(path)
    meta = json.loads(base.with_name(base.name + ".manifest.json").read_text(encoding="utf-8"))
    with np.load(base.with_name(base.name + ".npz")) as data:
        for key, shape in meta["shapes"].items():
            if list(data[key].shape) != shape:
                raise ValidationError(f"{key}: manifest shape {shape} != stored {list(data[key].shape)}")
        shared = tuple(
            LowRankAdapter(data[f"shared_{i}_down"], data[f"shared_{i}_up"], s) for i, s in enumerate(meta["shared_scales"])
        )
        task = tuple(LowRankAdapter(data[f"task_{i}_down"], data[f"task_{i}_up"], s) for i, s in enumerate(meta["task_scales"]))
        config = CpolyTaskConfig(shared, task, data["allocation"], meta["tau"], meta["B"])
    if (config.T, config.A, config.rank) != (meta["T"], meta["A"], meta["r"]):
        raise ValidationError("manifest T/A/r disagree with stored arrays")
    return config
