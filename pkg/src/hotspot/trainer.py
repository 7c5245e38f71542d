"""Training loop: boundary mini-batches, importance-sampled volume batches, Adam."""

from __future__ import annotations

import csv
import math
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import InvalidArgument, InvalidConfig, TrainingDivergence
from .field import (AdamState, Architecture, NeuralField, adam_step, init_geometric, read_checkpoint,
                    write_checkpoint)
from .geometry import PointCloud
from .losses import (LossConfig, LossInputs, Schedule, default_schedules, parse_key_values, sample_volume,
                     total_loss)

# substream ids for the per-iteration generators
_STREAM_BOUNDARY = 1
_STREAM_VOLUME = 2


@dataclass(frozen=True)
class TrainConfig:
    arch: Architecture
    loss: LossConfig = field(default_factory=LossConfig)
    iterations: int = 20_000
    boundary_fraction: float = 0.1
    n_uniform: int = 4096
    n_gauss: int = 4096
    sigma: float = 0.5
    box_half: float = 1.5
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    init_radius: float = 0.5
    init_steps: int = 1000
    init_lr: float = 1e-3
    checkpoint_interval: int = 0
    checkpoint_path: str | None = None
    eval_interval: int = 0
    log_interval: int = 100
    threads: int | None = None

    def __post_init__(self):
        if self.iterations <= 0:
            raise InvalidConfig("iterations must be positive")
        if not 0 < self.boundary_fraction <= 1:
            raise InvalidConfig("boundary fraction must be in (0, 1]")
        if self.n_uniform < 0 or self.n_gauss < 0:
            raise InvalidConfig("sample counts must be nonnegative")
        if not (self.sigma > 0 and self.box_half > 0 and self.lr > 0):
            raise InvalidConfig("sigma, box size and learning rate must be positive")
        if self.checkpoint_interval < 0 or self.eval_interval < 0 or self.log_interval < 0:
            raise InvalidConfig("intervals must be nonnegative")

    @property
    def box(self) -> tuple[np.ndarray, np.ndarray]:
        d = self.arch.in_dim
        return np.full(d, -self.box_half), np.full(d, self.box_half)


def default_config(dim: int, **overrides) -> TrainConfig:
    """Desk-scale defaults: 32 x 3 softplus net, 512 + 512 volume samples, strong boundary weight.

    3D ramps lambda; 2D keeps lambda fixed and anneals the heat and eikonal weights.
    """
    arch = overrides.pop("arch", None) or Architecture(dim, width=32, layers=3)
    loss = overrides.pop("loss", None) or LossConfig(w_boundary=30.0, schedules=default_schedules(dim))
    base = dict(n_uniform=512, n_gauss=512, lr=3e-4)
    base.update(overrides)
    return TrainConfig(arch=arch, loss=loss, **base)


# flat config keys owned by the trainer; every other key goes to LossConfig
_ARCH_KEYS = {"width": int, "layers": int, "activation": str, "beta": float, "omega0": float}
_TRAIN_KEYS = {"iterations": int, "boundary_fraction": float, "n_uniform": int, "n_gauss": int,
               "sigma": float, "box_half": float, "lr": float, "seed": int, "init_radius": float,
               "init_steps": int, "init_lr": float, "checkpoint_interval": int, "log_interval": int}


def config_from_mapping(items: dict[str, str], dim: int) -> TrainConfig:
    """Build a configuration from flat ``key = value`` pairs on top of ``default_config(dim)``.

    ``<weight>.knots = none`` drops a default schedule.
    """
    base = default_config(dim)
    arch_kw: dict = {}
    train_kw: dict = {}
    loss_items = {k: v for k, v in parse_key_values(base.loss.to_text()).items() if not k.endswith(".knots")}
    dropped = set()
    for key, raw in items.items():
        kind = _ARCH_KEYS.get(key) or _TRAIN_KEYS.get(key)
        if kind is not None:
            try:
                val = kind(raw)
            except ValueError:
                raise InvalidConfig(f"{key}: cannot parse {raw!r}") from None
            (arch_kw if key in _ARCH_KEYS else train_kw)[key] = val
        elif key.endswith(".knots") and raw.strip().lower() == "none":
            dropped.add(key[:-len(".knots")])
        else:
            loss_items[key] = raw
    loss = LossConfig.from_mapping(loss_items)
    schedules = {k: v for k, v in base.loss.schedules.items() if k not in dropped}
    schedules.update(loss.schedules)
    try:
        arch = replace(base.arch, **arch_kw)
    except InvalidArgument as exc:
        raise InvalidConfig(str(exc)) from None
    return replace(base, arch=arch, loss=replace(loss, schedules=schedules), **train_kw)


def config_to_text(config: TrainConfig) -> str:
    lines = [f"{k} = {getattr(config.arch, k)}" for k in _ARCH_KEYS]
    lines += [f"{k} = {getattr(config, k)!r}" for k in _TRAIN_KEYS]
    lines += [f"{k}.knots = none" for k in default_schedules(config.arch.in_dim) if k not in config.loss.schedules]
    return "\n".join(lines) + "\n" + config.loss.to_text()


@dataclass
class HistoryRow:
    iteration: int
    wall_time: float
    grad_norm: float
    losses: dict


@dataclass
class TrainHistory:
    rows: list[HistoryRow] = field(default_factory=list)
    evals: list[tuple[int, dict]] = field(default_factory=list)
    recoveries: int = 0

    def append(self, row: HistoryRow) -> None:
        if self.rows and row.iteration <= self.rows[-1].iteration:
            raise InvalidArgument("history iterations must increase")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r.losses[name] for r in self.rows])

    @property
    def iterations(self) -> np.ndarray:
        return np.array([r.iteration for r in self.rows])

    def write_csv(self, path) -> None:
        if not self.rows:
            Path(path).write_text("iteration,time,grad_norm\n")
            return
        keys = list(self.rows[0].losses)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "time", "grad_norm"] + keys)
            for r in self.rows:
                w.writerow([r.iteration, f"{r.wall_time:.3f}", repr(r.grad_norm)]
                           + [repr(float(r.losses[k])) for k in keys])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def checkpoint_save(path, fld: NeuralField, adam: AdamState, iteration: int) -> None:
    write_checkpoint(path, fld, adam, iteration)


def checkpoint_load(path) -> tuple[NeuralField, AdamState, int]:
    fld, adam, iteration, _ = read_checkpoint(path)
    if adam is None:
        adam = AdamState.create(fld.arch.num_params)
    return fld, adam, iteration


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class _Cloud:
    """Boundary points plus a lazily built tree for unsigned cloud distances."""

    def __init__(self, points: np.ndarray):
        self.points = points
        self._tree = None

    def distance(self, x: np.ndarray) -> np.ndarray:
        if self._tree is None:
            from scipy.spatial import cKDTree
            self._tree = cKDTree(self.points)
        return self._tree.query(x)[0]


def iteration_batches(cloud_points: np.ndarray, config: TrainConfig, iteration: int):
    """Boundary mini-batch and volume batch for one iteration (pure function of seed and iteration)."""
    n = len(cloud_points)
    b = max(1, int(round(config.boundary_fraction * n)))
    rng_b = np.random.default_rng([config.seed, _STREAM_BOUNDARY, iteration])
    idx = np.sort(rng_b.choice(n, size=b, replace=False)) if b < n else np.arange(n)
    bpts = cloud_points[idx]
    lower, upper = config.box
    rng_v = np.random.default_rng([config.seed, _STREAM_VOLUME, iteration])
    vol = sample_volume(lower, upper, bpts, config.n_uniform, config.n_gauss, config.sigma, rng_v)
    return bpts, vol


def loss_and_gradient(fld: NeuralField, cloud: _Cloud, config: TrainConfig, iteration: int):
    bpts, vol = iteration_batches(cloud.points, config, iteration)
    tb = fld.tape(bpts, with_grad=False, threads=config.threads)
    weights = config.loss.at(iteration / config.iterations)
    need_volume = any(weights[k] > 0 for k in ("w_e", "w_h", "w_area", "w_sal", "w_phase"))
    tv = fld.tape(vol.points, with_grad=True, threads=config.threads) if need_volume else None
    inputs = LossInputs(boundary_u=tb.value)
    if tv is not None:
        inputs.volume_u = tv.value
        inputs.volume_grad = tv.grad
        inputs.batch = vol
        if weights["w_sal"] > 0:
            inputs.cloud_distance = cloud.distance(vol.points)
    bd, adj = total_loss(inputs, config.loss, iteration, config.iterations, with_adjoints=True)
    grad = tb.backward(adj.boundary_du)
    if tv is not None:
        grad = grad + tv.backward(adj.volume_du, adj.volume_dg)
    return bd, grad


ProgressFn = Callable[[int, "object", float], None]
EvalFn = Callable[[NeuralField, int], dict]


def train(cloud: PointCloud | np.ndarray, config: TrainConfig, init: NeuralField | None = None,
          resume_from=None, eval_fn: EvalFn | None = None, progress: ProgressFn | None = None,
          stop_at: int | None = None) -> tuple[NeuralField, TrainHistory]:
    """Fit a field to the boundary samples in ``cloud``.

    ``resume_from`` is a checkpoint path; the run continues from its iteration
    and reproduces an uninterrupted run bit for bit. ``stop_at`` ends the run
    early (after that many iterations) without changing the schedule.
    """
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=float)
    if pts.ndim != 2 or pts.shape[1] != config.arch.in_dim:
        raise InvalidArgument(f"cloud dimension does not match architecture input {config.arch.in_dim}")
    if len(pts) == 0:
        raise InvalidArgument("cloud is empty")
    cl = _Cloud(pts)
    if resume_from is not None:
        fld, adam, start = checkpoint_load(resume_from)
        if fld.arch != config.arch:
            raise InvalidConfig("checkpoint architecture differs from the configuration")
    else:
        if init is None:
            init = init_geometric(config.arch, config.init_radius, config.seed, steps=config.init_steps,
                                  lr=config.init_lr, threads=config.threads)
        fld = init
        adam = AdamState.create(config.arch.num_params, config.lr, config.beta1, config.beta2, config.adam_eps)
        start = 0
    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    history = TrainHistory()
    snapshot = (fld.theta.copy(), adam, start)
    retried = False
    t0 = time.perf_counter()
    theta = fld.theta
    it = start
    while it < end:
        bd, grad = loss_and_gradient(NeuralField(config.arch, theta), cl, config, it)
        if not (math.isfinite(bd.total) and np.all(np.isfinite(grad))):
            if retried:
                raise TrainingDivergence(f"non-finite loss at iteration {it} after recovery",
                                         checkpoint=config.checkpoint_path or snapshot)
            retried = True
            history.recoveries += 1
            theta, adam, it = snapshot[0].copy(), replace(snapshot[1], lr=snapshot[1].lr * 0.5), snapshot[2]
            continue
        theta, adam = adam_step(adam, theta, grad)
        it += 1
        log_now = config.log_interval and (it % config.log_interval == 0 or it == end)
        if log_now:
            gn = float(np.linalg.norm(grad))
            history.append(HistoryRow(it, time.perf_counter() - t0, gn, bd.as_row()))
            if progress is not None:
                progress(it, bd, gn)
        if config.checkpoint_interval and it % config.checkpoint_interval == 0:
            snapshot = (theta.copy(), adam, it)
            if config.checkpoint_path:
                checkpoint_save(config.checkpoint_path, NeuralField(config.arch, theta), adam, it)
        if config.eval_interval and it % config.eval_interval == 0 and eval_fn is not None:
            history.evals.append((it, eval_fn(NeuralField(config.arch, theta), it)))
    final = NeuralField(config.arch, theta)
    if config.checkpoint_path:
        checkpoint_save(config.checkpoint_path, final, adam, it)
    return final, history


def stderr_progress(total: int, machine: bool = False) -> ProgressFn:
    def report(it, bd, gn):
        print(f"[{it}/{total}] loss {bd.total:.5g} boundary {bd.boundary:.3g} eikonal {bd.eikonal:.3g} "
              f"heat {bd.heat:.3g} lambda {bd.lam:.3g}", file=sys.stderr)
        if machine:
            print(f"iter={it} total={bd.total!r} boundary={bd.boundary!r} eikonal={bd.eikonal!r} "
                  f"heat={bd.heat!r} lambda={bd.lam!r} grad_norm={gn!r}", flush=True)
    return report


# ---------------------------------------------------------------------------
# 1D demonstration
# ---------------------------------------------------------------------------

DEMO_BOUNDARY = np.array([[-0.5], [0.5]])


def sdf_1d(x) -> np.ndarray:
    """Signed distance to {-0.5, 0.5}, negative between them."""
    return np.abs(np.asarray(x, dtype=float)) - 0.5


def pseudo_sdf_1d(x) -> np.ndarray:
    """Unit-slope zigzag vanishing only at +-0.5 but far from the true distance.

    Inside it climbs back towards zero (-0.1 at the origin); outside it turns
    down at |x| = 0.8 and reaches 0.1 at |x| = 1, staying flat beyond.
    """
    a = np.minimum(np.abs(np.asarray(x, dtype=float)), 1.0)
    inside = np.where(a < 0.2, -0.1 - a, -(0.5 - a))
    outside = np.where(a < 0.8, a - 0.5, 0.3 - (a - 0.8))
    return np.where(a <= 0.5, inside, outside)


def probe_grid_1d(exclude: float = 0.05) -> np.ndarray:
    x = np.linspace(-1.0, 1.0, 1001)
    return x[np.abs(x) > exclude]


@dataclass(frozen=True)
class Demo1DConfig:
    iterations: int = 3000
    width: int = 32
    layers: int = 3
    lr: float = 1e-3
    lam_start: float = 2.0
    lam_end: float = 20.0
    ramp_start: float = 0.3   # fraction of training spent at lam_start
    ramp_end: float = 0.8
    w_b: float = 10.0
    w_e: float = 0.05
    w_h: float = 1.0
    n_volume: int = 256
    box_half: float = 1.5      # sampling reaches past the probe window [-1, 1]
    fit_steps: int = 1500
    log_interval: int = 100


def fit_profile(arch: Architecture, target: Callable, seed: int, steps: int, lr: float = 1e-3,
                n: int = 512, half: float = 1.0) -> NeuralField:
    """Regress a freshly initialised field onto ``target`` over [-half, half]^d."""
    from .field import init_random
    fld = init_random(arch, seed)
    rng = np.random.default_rng([seed, 0x31])
    x = rng.uniform(-half, half, (n, arch.in_dim))
    y = target(x[:, 0]) if arch.in_dim == 1 else target(x)
    state = AdamState.create(arch.num_params, lr=lr)
    theta = fld.theta
    for _ in range(steps):
        tape = NeuralField(arch, theta).tape(x, with_grad=False, threads=1)
        g = tape.backward(2.0 * (tape.value - y) / n)
        theta, state = adam_step(state, theta, g)
    return NeuralField(arch, theta)


def demo_train_config(mode: str, seed: int = 0, config: Demo1DConfig = Demo1DConfig()) -> TrainConfig:
    """Training setup of the 1D demonstration; ``eikonal_only`` drops the heat term."""
    if mode not in ("eikonal_only", "with_heat"):
        raise InvalidArgument("mode must be eikonal_only or with_heat")
    arch = Architecture(1, width=config.width, layers=config.layers)
    w_h = config.w_h if mode == "with_heat" else 0.0
    ramp = Schedule(((config.ramp_start, config.lam_start), (config.ramp_end, config.lam_end)))
    loss = LossConfig(w_boundary=config.w_b, w_eikonal=config.w_e, w_heat=w_h, lam=config.lam_end,
                      schedules={"lambda": ramp})
    return TrainConfig(arch=arch, loss=loss, iterations=config.iterations, boundary_fraction=1.0,
                       n_uniform=config.n_volume, n_gauss=0, box_half=config.box_half, lr=config.lr, seed=seed,
                       log_interval=config.log_interval, eval_interval=config.log_interval, threads=1)


def demo_1d(mode: str, seed: int = 0, config: Demo1DConfig = Demo1DConfig(), init: NeuralField | None = None):
    """Fit a 1D field to the two boundary points from the zigzag initialisation.

    Returns (field, curve) where curve is an array of (iteration, max probe error).
    """
    tc = demo_train_config(mode, seed, config)
    if init is None:
        init = fit_profile(tc.arch, pseudo_sdf_1d, seed, config.fit_steps, half=config.box_half)
    probe = probe_grid_1d()
    target = sdf_1d(probe)
    curve = [(0, float(np.max(np.abs(init.forward(probe[:, None]) - target))))]
    fld, hist = train(DEMO_BOUNDARY, tc, init=init,
                      eval_fn=lambda f, it: {"max_error": float(np.max(np.abs(f.forward(probe[:, None]) - target)))})
    curve += [(it, m["max_error"]) for it, m in hist.evals]
    return fld, np.array(curve)


def demo_max_error(fld: NeuralField) -> float:
    probe = probe_grid_1d()
    return float(np.max(np.abs(fld.forward(probe[:, None]) - sdf_1d(probe))))
