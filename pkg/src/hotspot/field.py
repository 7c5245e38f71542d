"""MLP field u(x) with exact input gradients and parameter gradients through them.

The forward pass carries, for every point, the activations and their Jacobian
with respect to the input point. The reverse pass runs over that augmented
computation, so losses may depend on both u and grad_x u.

Evaluation is done in fixed-size, zero-padded chunks: every BLAS call has the
same shape, so a point's result does not depend on what else is in the batch,
and per-chunk parameter gradients are summed in chunk order regardless of the
number of worker threads.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import CheckpointError, InvalidArgument, NumericalFailure, TrainingDivergence

CHUNK = 128

_DEFAULT_THREADS: int | None = None


def default_threads() -> int:
    if _DEFAULT_THREADS is not None:
        return _DEFAULT_THREADS
    env = os.environ.get("HOTSPOT_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def set_default_threads(n: int | None) -> None:
    global _DEFAULT_THREADS
    _DEFAULT_THREADS = None if n is None else max(1, int(n))


@dataclass(frozen=True)
class Architecture:
    in_dim: int
    width: int = 128
    layers: int = 5
    activation: str = "softplus"
    beta: float = 100.0
    omega0: float = 30.0

    def __post_init__(self):
        if self.in_dim < 1:
            raise InvalidArgument("input dimension must be positive")
        if self.width < 1 or self.layers < 0:
            raise InvalidArgument("width must be >= 1 and layers >= 0")
        if self.activation not in ("softplus", "sine"):
            raise InvalidArgument(f"unknown activation {self.activation!r}")
        if self.activation == "softplus" and not self.beta > 0:
            raise InvalidArgument("softplus beta must be positive")
        if self.activation == "sine" and not self.omega0 > 0:
            raise InvalidArgument("sine omega0 must be positive")

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out, in) for each affine map, output layer last."""
        dims = [self.in_dim] + [self.width] * self.layers + [1]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def num_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes())


def _activate(arch: Architecture, z: np.ndarray, second: bool = True):
    """Activation and its first two derivatives (the second is None unless requested)."""
    if arch.activation == "softplus":
        bz = arch.beta * z
        s = np.log1p(np.exp(-np.abs(bz)))
        s += np.maximum(bz, 0.0)
        s *= 1.0 / arch.beta
        s1 = np.tanh(0.5 * bz)
        s1 *= 0.5
        s1 += 0.5
        s2 = arch.beta * s1 * (1.0 - s1) if second else None
        return s, s1, s2
    wz = arch.omega0 * z
    sn = np.sin(wz)
    s2 = -arch.omega0 ** 2 * sn if second else None
    return sn, arch.omega0 * np.cos(wz), s2


@dataclass(frozen=True)
class EvalResult:
    value: np.ndarray   # (n,)
    grad: np.ndarray    # (n, d)


class NeuralField:
    """Architecture plus flat parameter vector (layer-major; weights row-major, then bias)."""

    def __init__(self, arch: Architecture, theta: np.ndarray | None = None):
        self.arch = arch
        if theta is None:
            theta = np.zeros(arch.num_params)
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (arch.num_params,):
            raise InvalidArgument(f"expected {arch.num_params} parameters, got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise InvalidArgument("parameters must be finite")
        self.theta = theta

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into theta."""
        out = []
        pos = 0
        for o, i in self.arch.layer_shapes():
            W = self.theta[pos:pos + o * i].reshape(o, i)
            pos += o * i
            b = self.theta[pos:pos + o]
            pos += o
            out.append((W, b))
        return out

    def with_params(self, theta: np.ndarray) -> "NeuralField":
        return NeuralField(self.arch, theta)

    # -- evaluation -------------------------------------------------------

    def forward(self, x, threads: int | None = None):
        pts, single = self._points(x)
        vals = _map_chunks(lambda c: _chunk_forward(self, c, False)[0], pts, threads)
        u = np.concatenate([v for v in vals])[: len(pts)]
        return float(u[0]) if single else u

    def forward_with_grad(self, x, threads: int | None = None) -> EvalResult:
        pts, single = self._points(x)
        res = _map_chunks(lambda c: _chunk_forward(self, c, True)[:2], pts, threads)
        u = np.concatenate([r[0] for r in res])[: len(pts)]
        g = np.concatenate([r[1] for r in res])[: len(pts)]
        if single:
            return EvalResult(u[0], g[0])
        return EvalResult(u, g)

    def tape(self, x, with_grad: bool = True, threads: int | None = None) -> "Tape":
        """Forward pass that keeps what the reverse pass needs."""
        pts, _ = self._points(x)
        return Tape(self, pts, with_grad, threads)

    def param_gradient(self, x, adj_value, adj_grad=None, threads: int | None = None) -> np.ndarray:
        """Gradient over theta of  sum_i adj_value_i * u(x_i) + adj_grad_i . grad_x u(x_i)."""
        tape = self.tape(x, with_grad=adj_grad is not None, threads=threads)
        return tape.backward(adj_value, adj_grad)

    def _points(self, x):
        arr = np.asarray(x, dtype=float)
        single = arr.ndim == 1
        if single:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != self.arch.in_dim:
            raise InvalidArgument(f"expected points of dimension {self.arch.in_dim}, got shape {np.shape(x)}")
        return arr, single


def _chunks(pts: np.ndarray) -> list[np.ndarray]:
    n, d = pts.shape
    out = []
    for s in range(0, max(n, 1), CHUNK):
        block = pts[s:s + CHUNK]
        if block.shape[0] < CHUNK:
            pad = np.zeros((CHUNK, d))
            pad[: block.shape[0]] = block
            block = pad
        out.append(np.ascontiguousarray(block))
    return out


def _map_chunks(fn, pts, threads):
    chunks = _chunks(pts)
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, chunks))


def _rowdot(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    # elementwise product + reduction: bitwise identical per row for any row count
    return np.add.reduce(a * w, axis=-1)


def _chunk_forward(fld: NeuralField, x: np.ndarray, with_grad: bool):
    """Returns (u, grad, cache) for one chunk."""
    arch = fld.arch
    layers = fld.layers()
    C, d = x.shape
    a = x
    J = None  # (C, d, width); None means identity at the input
    cache = []
    for W, b in layers[:-1]:
        z = a @ W.T + b
        s, s1, s2 = _activate(arch, z, with_grad)
        if with_grad:
            if J is None:
                Jz = np.broadcast_to(W.T[None, :, :], (C, d, W.shape[0]))
            else:
                Jz = (J.reshape(C * d, -1) @ W.T).reshape(C, d, -1)
            Jn = s1[:, None, :] * Jz
        else:
            Jz = Jn = None
        cache.append((a, J, Jz, s1, s2))
        a, J = s, Jn
    w_out, b_out = layers[-1]
    u = _rowdot(a, w_out[0]) + b_out[0]
    if not with_grad:
        return u, None, (cache, a, J)
    if J is None:
        g = np.broadcast_to(w_out[0], (C, d)).copy()
    else:
        g = _rowdot(J, w_out[0])
    return u, g, (cache, a, J)


def _chunk_backward(fld: NeuralField, x, cache_all, adj_u, adj_g) -> np.ndarray:
    layers = fld.layers()
    cache, a_last, J_last = cache_all
    C, d = x.shape
    grads: list[np.ndarray] = []
    w_out, _ = layers[-1]
    # output layer
    if adj_g is not None:
        A = np.concatenate([adj_u[:, None], adj_g], axis=1)              # (C, 1+d)
        if J_last is None:
            S = np.concatenate([a_last[:, None, :], np.broadcast_to(np.eye(d), (C, d, d))], axis=1)
        else:
            S = np.concatenate([a_last[:, None, :], J_last], axis=1)     # (C, 1+d, W)
        gw = A.reshape(-1) @ S.reshape(C * (1 + d), -1)
    else:
        gw = adj_u @ a_last
    grads.append(np.concatenate([gw, [adj_u.sum()]]))
    abar = adj_u[:, None] * w_out[0][None, :]
    Jbar = adj_g[:, :, None] * w_out[0][None, None, :] if adj_g is not None else None

    for (W, b), (a_prev, J_prev, Jz, s1, s2) in zip(reversed(layers[:-1]), reversed(cache)):
        zbar = abar * s1
        if Jbar is not None:
            zbar = zbar + np.einsum("ckw,ckw->cw", Jbar, Jz) * s2
            Jzbar = Jbar * s1[:, None, :]
            Zs = np.concatenate([zbar[:, None, :], Jzbar], axis=1)
            if J_prev is None:
                Ps = np.concatenate([a_prev[:, None, :], np.broadcast_to(np.eye(d), (C, d, d))], axis=1)
            else:
                Ps = np.concatenate([a_prev[:, None, :], J_prev], axis=1)
            gW = Zs.reshape(C * (1 + d), -1).T @ Ps.reshape(C * (1 + d), -1)
        else:
            Jzbar = None
            gW = zbar.T @ a_prev
        grads.append(np.concatenate([gW.ravel(), zbar.sum(axis=0)]))
        abar = zbar @ W
        Jbar = (Jzbar.reshape(C * d, -1) @ W).reshape(C, d, -1) if Jzbar is not None else None
    return np.concatenate(grads[::-1])


class Tape:
    """Cached forward pass over a batch; ``backward`` may be called repeatedly."""

    def __init__(self, fld: NeuralField, pts: np.ndarray, with_grad: bool, threads: int | None):
        self.field = fld
        self.n = len(pts)
        self.with_grad = with_grad
        self.threads = threads
        self._chunks = _chunks(pts)
        res = _map_chunks_list(lambda c: _chunk_forward(fld, c, with_grad), self._chunks, threads)
        self._caches = [r[2] for r in res]
        self.value = np.concatenate([r[0] for r in res])[: self.n]
        self.grad = np.concatenate([r[1] for r in res])[: self.n] if with_grad else None

    def result(self) -> EvalResult:
        return EvalResult(self.value, self.grad)

    def backward(self, adj_value, adj_grad=None) -> np.ndarray:
        adj_value = np.asarray(adj_value, dtype=float).reshape(self.n)
        if adj_grad is not None:
            if not self.with_grad:
                raise InvalidArgument("tape was recorded without input gradients")
            adj_grad = np.asarray(adj_grad, dtype=float).reshape(self.n, self.field.arch.in_dim)
        d = self.field.arch.in_dim
        jobs = []
        for k, (c, cache) in enumerate(zip(self._chunks, self._caches)):
            au = np.zeros(CHUNK)
            seg = adj_value[k * CHUNK:(k + 1) * CHUNK]
            au[: len(seg)] = seg
            ag = None
            if adj_grad is not None:
                ag = np.zeros((CHUNK, d))
                segg = adj_grad[k * CHUNK:(k + 1) * CHUNK]
                ag[: len(segg)] = segg
            jobs.append((c, cache, au, ag))
        parts = _map_chunks_list(lambda j: _chunk_backward(self.field, *j), jobs, self.threads)
        total = parts[0].copy()
        for p in parts[1:]:
            total += p
        return total


def _map_chunks_list(fn, items, threads):
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(items) == 1:
        return [fn(c) for c in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_random(arch: Architecture, seed: int) -> NeuralField:
    """Plain random init: He-style for softplus, SIREN-style for sine."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1A]))
    parts = []
    shapes = arch.layer_shapes()
    for k, (o, i) in enumerate(shapes):
        if arch.activation == "sine":
            bound = 1.0 / i if k == 0 else math.sqrt(6.0 / i) / arch.omega0
            W = rng.uniform(-bound, bound, (o, i))
            b = rng.uniform(-bound, bound, o)
        else:
            W = rng.normal(0.0, math.sqrt(2.0 / i), (o, i))
            b = np.zeros(o)
        parts += [W.ravel(), b]
    return NeuralField(arch, np.concatenate(parts))


def _analytic_sphere_init(arch: Architecture, radius: float, rng) -> NeuralField:
    # hidden layers ~ N(0, 2/out), last layer mean sqrt(pi)/sqrt(in), bias -radius
    parts = []
    shapes = arch.layer_shapes()
    for k, (o, i) in enumerate(shapes):
        if k == len(shapes) - 1:
            if arch.layers == 0:
                W = np.zeros((o, i))
            else:
                W = rng.normal(math.sqrt(math.pi) / math.sqrt(i), 1e-5, (o, i))
            b = np.full(o, -radius)
        else:
            W = rng.normal(0.0, math.sqrt(2.0) / math.sqrt(o), (o, i))
            b = np.zeros(o)
        parts += [W.ravel(), b]
    return NeuralField(arch, np.concatenate(parts))


def init_geometric(arch: Architecture, radius: float, seed: int, steps: int = 1000,
                   samples: int = 2000, lr: float = 1e-3, threads: int | None = None) -> NeuralField:
    """Field approximating ``|x| - radius`` on [-1, 1]^d.

    Starts from an analytic sphere-like init (softplus) or a random init (sine)
    and then regresses onto the target with Adam for ``steps`` full-batch steps.
    """
    if not radius > 0:
        raise InvalidArgument("radius must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6E]))
    if arch.activation == "softplus":
        fld = _analytic_sphere_init(arch, radius, rng)
    else:
        fld = init_random(arch, seed)
    if steps <= 0:
        return fld
    x = rng.uniform(-1.0, 1.0, (samples, arch.in_dim))
    target = np.linalg.norm(x, axis=1) - radius
    state = AdamState.create(arch.num_params, lr=lr)
    theta = fld.theta
    for _ in range(steps):
        tape = NeuralField(arch, theta).tape(x, with_grad=False, threads=threads)
        resid = tape.value - target
        g = tape.backward(2.0 * resid / samples)
        theta, state = adam_step(state, theta, g)
    fld = NeuralField(arch, theta)
    check_init(fld, radius, rng)
    return fld


def init_quality(fld: NeuralField, radius: float, rng, n: int = 1000) -> tuple[float, float]:
    """Sign agreement and Pearson correlation with |x| - radius on uniform samples of [-1, 1]^d."""
    x = rng.uniform(-1.0, 1.0, (n, fld.arch.in_dim))
    target = np.linalg.norm(x, axis=1) - radius
    u = fld.forward(x, threads=1)
    agree = float(np.mean(np.sign(u) == np.sign(target)))
    corr = float(np.corrcoef(u, target)[0, 1]) if np.std(u) > 0 else 0.0
    return agree, corr


def check_init(fld: NeuralField, radius: float, rng) -> None:
    agree, corr = init_quality(fld, radius, rng)
    if not (agree >= 0.9 and corr >= 0.9):
        raise NumericalFailure(f"geometric init failed its fit check (sign agreement {agree:.3f}, "
                               f"correlation {corr:.3f})", agree)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, n: int, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> "AdamState":
        return cls(0, np.zeros(n), np.zeros(n), lr, beta1, beta2, eps)


def adam_step(state: AdamState, theta: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, AdamState]:
    grads = np.asarray(grads, dtype=float)
    if grads.shape != theta.shape or state.m.shape != theta.shape:
        raise InvalidArgument("parameter, gradient and moment lengths differ")
    if not np.all(np.isfinite(grads)):
        raise TrainingDivergence("non-finite gradient")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    mhat = m / (1.0 - state.beta1 ** t)
    vhat = v / (1.0 - state.beta2 ** t)
    new_theta = theta - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return new_theta, replace(state, step=t, m=m, v=v)


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"HOTSPOT-CKPT"
CKPT_VERSION = 1


def write_checkpoint(path, fld: NeuralField, adam: AdamState | None = None, iteration: int = 0,
                     extra: dict | None = None) -> None:
    """Magic line, JSON header line, then little-endian float64 arrays (theta[, m, v])."""
    header = {
        "version": CKPT_VERSION,
        "arch": {"in_dim": fld.arch.in_dim, "width": fld.arch.width, "layers": fld.arch.layers,
                 "activation": fld.arch.activation, "beta": fld.arch.beta, "omega0": fld.arch.omega0},
        "num_params": fld.arch.num_params,
        "iteration": int(iteration),
        "adam": None if adam is None else {"step": adam.step, "lr": adam.lr, "beta1": adam.beta1,
                                           "beta2": adam.beta2, "eps": adam.eps},
        "extra": extra or {},
    }
    payload = [fld.theta]
    if adam is not None:
        payload += [adam.m, adam.v]
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for arr in payload:
            fh.write(np.asarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[NeuralField, AdamState | None, int, dict]:
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
        try:
            header = json.loads(fh.readline())
        except ValueError as exc:
            raise CheckpointError(f"{path}: corrupt header") from exc
        if header.get("version") != CKPT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {header.get('version')} "
                                  f"is not supported (expected {CKPT_VERSION})")
        raw = fh.read()
    if len(raw) % 8:
        raise CheckpointError(f"{path}: truncated payload ({len(raw)} bytes)")
    data = np.frombuffer(raw, dtype="<f8").astype(float)
    arch = Architecture(**header["arch"])
    n = arch.num_params
    if n != header["num_params"]:
        raise CheckpointError(f"{path}: parameter count does not match architecture")
    adam = None
    expected = n if header["adam"] is None else 3 * n
    if data.size != expected:
        raise CheckpointError(f"{path}: truncated payload ({data.size} of {expected} values)")
    fld = NeuralField(arch, data[:n].copy())
    if header["adam"] is not None:
        a = header["adam"]
        adam = AdamState(a["step"], data[n:2 * n].copy(), data[2 * n:].copy(), a["lr"], a["beta1"],
                         a["beta2"], a["eps"])
    return fld, adam, header["iteration"], header["extra"]
