"""Closed-form and numerical reference solutions for the screened Poisson problem.

    lap(h) - lam^2 h = 0 away from the boundary,  h = 1 on the boundary,  h -> 0 far away

Includes single-source solutions in 2D and 3D, a multi-source superposition with
its distance bounds, a matrix-free finite-difference solver, distance recovery
from heat values, and a Fourier-mode simulator for the gradient flows of the
heat and eikonal energies.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InvalidArgument, NumericalFailure
from .geometry import GridSpec, ScalarGrid

EULER_GAMMA = 0.5772156649015329


# ---------------------------------------------------------------------------
# Single-source closed forms
# ---------------------------------------------------------------------------

def _check_radius(r, eps):
    if not eps > 0:
        raise InvalidArgument("ball radius must be positive")
    r = np.asarray(r, dtype=float)
    if np.any(r < eps):
        raise InvalidArgument("radius must be at least the ball radius")
    return r


def h_point_3d(r, eps: float, lam: float, h0: float = 1.0):
    """Decaying radial solution in 3D with h(eps) = h0: (eps / r) h0 exp(lam (eps - r))."""
    r = _check_radius(r, eps)
    out = eps / r * h0 * np.exp(lam * (eps - r))
    return float(out) if out.ndim == 0 else out


def bessel_k0e(x, rtol: float = 1e-14):
    """exp(x) K0(x) for x > 0.

    Uses K0(x) = int_0^inf exp(-x cosh t) dt, so exp(x) K0(x) is the integral of
    exp(-x (cosh t - 1)). The integrand is analytic and decays double
    exponentially, so the trapezoid rule converges geometrically; the step is
    halved until two successive estimates agree to ``rtol``.
    """
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise DomainError("K0 is defined for x > 0 only")
    flat = x.ravel()
    # integrand below 1e-20 of its peak past t_max
    t_max = np.arccosh(1.0 + 46.0 / flat)
    step = 0.5
    prev = None
    for _ in range(20):
        n = np.ceil(t_max / step).astype(int) + 1
        m = int(n.max())
        t = np.arange(m)[None, :] * step
        vals = np.exp(-flat[:, None] * (np.cosh(t) - 1.0))
        vals[t > t_max[:, None] + step] = 0.0
        est = step * (vals.sum(axis=1) - 0.5 * vals[:, 0])
        if prev is not None and np.all(np.abs(est - prev) <= rtol * np.abs(est)):
            break
        prev = est
        step *= 0.5
    else:
        raise NumericalFailure("K0 quadrature did not converge")
    out = est.reshape(x.shape)
    return float(out) if out.ndim == 0 else out


def bessel_k0(x):
    """Modified Bessel function of the second kind, order zero."""
    x = np.asarray(x, dtype=float)
    out = bessel_k0e(x) * np.exp(-x)
    return float(out) if np.ndim(out) == 0 else out


def h_point_2d(r, eps: float, lam: float, h0: float | None = None):
    """Decaying radial solution in 2D with h(eps) = h0 (default exp(-lam eps)).

    h(r) = h0 K0(lam r) / K0(lam eps), evaluated with exponentially scaled K0
    so that large lam r does not underflow the ratio.
    """
    r = _check_radius(r, eps)
    if not lam > 0:
        raise InvalidArgument("lambda must be positive")
    if h0 is None:
        h0 = math.exp(-lam * eps)
    ratio = bessel_k0e(lam * r) / bessel_k0e(lam * eps)
    out = h0 * ratio * np.exp(-lam * (r - eps))
    return float(out) if np.ndim(out) == 0 else out


def varadhan_recover(h, lam: float):
    """Distance estimate -ln(h) / lam, elementwise; accepts arrays or a ScalarGrid."""
    if not lam > 0:
        raise InvalidArgument("lambda must be positive")
    if isinstance(h, ScalarGrid):
        return ScalarGrid(h.spec, varadhan_recover(h.values, lam))
    arr = np.asarray(h, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError("heat values must be positive")
    out = -np.log(arr) / lam
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Multi-source superposition and distance bounds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PointSourceSystem:
    centers: np.ndarray   # (N, d)
    eps: float
    lam: float
    coeffs: np.ndarray    # (N,)
    residual: float
    condition: float

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def source(self, r):
        """Single-source profile with value exp(-lam eps) on the ball surface."""
        if self.dim == 3:
            return self.eps / r * np.exp(-self.lam * r)
        return h_point_2d(r, self.eps, self.lam)

    def heat(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = np.linalg.norm(x[:, None, :] - self.centers[None, :, :], axis=2)
        if np.any(r < self.eps):
            raise InvalidArgument("query lies inside a source ball")
        return self.source(r) @ self.coeffs

    def log_heat(self, x) -> np.ndarray:
        """ln h computed without underflow for large lam * distance (3D closed form)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = np.linalg.norm(x[:, None, :] - self.centers[None, :, :], axis=2)
        if np.any(r < self.eps):
            raise InvalidArgument("query lies inside a source ball")
        if self.dim == 3:
            logs = math.log(self.eps) - np.log(r) - self.lam * r
        else:
            logs = (np.log(bessel_k0e(self.lam * r)) - np.log(bessel_k0e(self.lam * self.eps))
                    - self.lam * r)
        # ln sum c_i exp(logs_i); coefficients are positive
        top = logs.max(axis=1, keepdims=True)
        return top[:, 0] + np.log(np.exp(logs - top) @ self.coeffs)

    def distance_estimate(self, x) -> np.ndarray:
        return -self.log_heat(x) / self.lam


def solve_multipoint(centers, eps: float, lam: float, max_condition: float = 1e12) -> PointSourceSystem:
    """Coefficients making the superposed field equal exp(-lam eps) at every center.

    Off-diagonal entries use the far-field approximation: source j is evaluated
    at center i instead of on the surface of ball i.
    """
    c = np.atleast_2d(np.asarray(centers, dtype=float))
    n, d = c.shape
    if d not in (2, 3):
        raise InvalidArgument("multipoint systems are defined in 2D and 3D")
    if not (eps > 0 and lam > 0):
        raise InvalidArgument("eps and lambda must be positive")
    if n > 1000:
        raise InvalidArgument("dense solve limited to 1000 sources")
    r = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=2)
    off = ~np.eye(n, dtype=bool)
    if n > 1 and r[off].min() <= 2 * eps:
        raise InvalidArgument("source balls overlap: centers must be more than 2 eps apart")
    diag = math.exp(-lam * eps)
    H = np.full((n, n), diag)
    if n > 1:
        if d == 3:
            H[off] = eps / r[off] * np.exp(-lam * r[off])
        else:
            H[off] = h_point_2d(r[off], eps, lam)
    cond = float(np.linalg.cond(H))
    if not np.isfinite(cond) or cond > max_condition:
        raise NumericalFailure(f"source matrix is ill-conditioned (condition {cond:.3e})", cond)
    rhs = np.full(n, diag)
    coeffs = np.linalg.solve(H, rhs)
    residual = float(np.max(np.abs(H @ coeffs - rhs)))
    if residual > 1e-10 * diag:
        raise NumericalFailure(f"source solve residual {residual:.3e} too large", residual)
    return PointSourceSystem(c, float(eps), float(lam), coeffs, residual, cond)


@dataclass(frozen=True)
class BoundReport:
    distance: np.ndarray     # distance to nearest center
    estimate: np.ndarray     # -ln(h) / lam
    lower: np.ndarray        # ln(eps / d) / lam
    upper: np.ndarray        # lower + ln(N) / lam
    passed: np.ndarray
    tolerance: float

    @property
    def gap(self) -> np.ndarray:
        return self.distance - self.estimate

    @property
    def all_passed(self) -> bool:
        return bool(np.all(self.passed))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["distance", "estimate", "gap", "lower", "upper", "pass"])
            for row in zip(self.distance, self.estimate, self.gap, self.lower, self.upper, self.passed):
                w.writerow([repr(float(v)) for v in row[:5]] + [int(row[5])])


def bound_tolerance(eps: float) -> float:
    return max(1e-9, 2.0 * eps)


def check_bounds(system: PointSourceSystem, queries, estimate=None) -> BoundReport:
    """Check ln(eps/d)/lam <= d - |u| <= (ln(eps/d) + ln N)/lam at each query.

    ``estimate`` overrides |u| (to check an arbitrary field); by default it is
    recovered from the superposed heat field.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    r = np.linalg.norm(q[:, None, :] - system.centers[None, :, :], axis=2)
    d = r.min(axis=1)
    if np.any(d <= 2 * system.eps):
        raise InvalidArgument("queries must lie farther than 2 eps from every center")
    est = system.distance_estimate(q) if estimate is None else np.broadcast_to(
        np.asarray(estimate, dtype=float), d.shape).copy()
    lower = np.log(system.eps / d) / system.lam
    upper = lower + math.log(len(system.centers)) / system.lam
    tol = bound_tolerance(system.eps)
    gap = d - est
    passed = (gap >= lower - tol) & (gap <= upper + tol)
    return BoundReport(d, est, lower, upper, passed, tol)


def convergence_sweep(centers, eps: float, lams, queries) -> list[dict]:
    """Gap d - |u_lam| at fixed queries for each lambda."""
    rows = []
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    for lam in lams:
        system = solve_multipoint(centers, eps, lam)
        rep = check_bounds(system, q)
        rows.append({"lambda": float(lam), "gap": rep.gap, "max_abs_gap": float(np.max(np.abs(rep.gap)))})
    return rows


def write_sweep_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "max_abs_gap", "mean_abs_gap"])
        for row in rows:
            w.writerow([repr(row["lambda"]), repr(row["max_abs_gap"]), repr(float(np.mean(np.abs(row["gap"]))))])


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolveInfo:
    iterations: int
    residual: float


def _apply_stencil(v: np.ndarray, diag: float) -> np.ndarray:
    """diag * v - sum of axis neighbours, with zeros beyond the array edge."""
    out = diag * v
    for ax in range(v.ndim):
        lo = [slice(None)] * v.ndim
        hi = [slice(None)] * v.ndim
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        out[tuple(lo)] -= v[tuple(hi)]
        out[tuple(hi)] -= v[tuple(lo)]
    return out


def fd_screened_poisson(spec: GridSpec, mask, values=1.0, lam: float = 1.0, tol: float = 1e-8,
                        max_iter: int | None = None, return_info: bool = False):
    """Solve lap(h) - lam^2 h = 0 on the grid nodes of ``spec``.

    Nodes where ``mask`` is set are Dirichlet nodes carrying ``values`` (scalar
    or per-node array). Beyond the outermost nodes h = 0. Uses the (2d+1)-point
    stencil, with equations scaled by the squared spacing, and Jacobi-
    preconditioned conjugate gradients until the residual max-norm is below
    ``tol``. Grid spacing must be equal on all axes.
    """
    shape = tuple(spec.res)
    mask = np.asarray(mask, dtype=bool).reshape(shape)
    if not mask.any():
        raise InvalidArgument("boundary mask is empty")
    if lam < 0:
        raise InvalidArgument("lambda must be nonnegative")
    spacing = np.asarray(spec.spacing, dtype=float)
    if not np.allclose(spacing, spacing[0], rtol=1e-12):
        raise InvalidArgument("finite-difference grid needs equal spacing on all axes")
    dx = float(spacing[0])
    dim = len(shape)
    vals = np.asarray(values, dtype=float)
    vals = np.full(shape, float(vals)) if vals.ndim == 0 else vals.reshape(shape)
    diag = 2.0 * dim + (lam * dx) ** 2
    free = ~mask
    known = np.where(mask, vals, 0.0)
    # move Dirichlet data to the right-hand side
    b = np.where(free, -_apply_stencil(known, 0.0), 0.0)

    def apply(v):
        return np.where(free, _apply_stencil(np.where(free, v, 0.0), diag), 0.0)

    x = np.zeros(shape)
    r = b - apply(x)
    z = r / diag
    p = z.copy()
    rz = float(np.sum(r * z))
    cap = max_iter if max_iter is not None else 20 * sum(shape) + 1000
    it = 0
    res = float(np.max(np.abs(r))) if r.size else 0.0
    while res >= tol:
        if it >= cap:
            raise NumericalFailure(f"CG did not converge in {cap} iterations (residual {res:.3e})", res)
        Ap = apply(p)
        alpha = rz / float(np.sum(p * Ap))
        x += alpha * p
        r -= alpha * Ap
        it += 1
        if it % 50 == 0:
            r = b - apply(x)  # refresh against drift
        res = float(np.max(np.abs(r)))
        z = r / diag
        rz_new = float(np.sum(r * z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    h = np.where(mask, vals, x)
    grid = ScalarGrid(spec, h.ravel())
    if return_info:
        return grid, SolveInfo(it, res)
    return grid


def radial_fd_3d(eps: float, lam: float, h0: float = 1.0, outer: float = 3.0, n: int = 10_000):
    """Second-order FD solve of h'' + (2/r) h' - lam^2 h = 0 on [eps, outer].

    h(eps) = h0; at ``outer`` the radiation condition h' = -(lam + 1/r) h, which
    the decaying solution satisfies exactly, closes the system. Returns (r, h).
    """
    if not (outer > eps > 0):
        raise InvalidArgument("need 0 < eps < outer")
    r = np.linspace(eps, outer, n)
    dr = r[1] - r[0]
    m = n - 1  # unknowns r[1:]
    rr = r[1:]
    lower = 1.0 / dr ** 2 - 1.0 / (rr * dr)
    upper = 1.0 / dr ** 2 + 1.0 / (rr * dr)
    main = np.full(m, -2.0 / dr ** 2 - lam ** 2)
    rhs = np.zeros(m)
    rhs[0] = -lower[0] * h0
    # ghost node from the Robin condition: h_{n} = h_{n-2} - 2 dr (lam + 1/R) h_{n-1}
    robin = lam + 1.0 / rr[-1]
    main[-1] += -upper[-1] * 2.0 * dr * robin
    sub = lower[1:].copy()
    sub[-1] += upper[-1]
    sup = upper[:-1]
    h = _thomas(sub, main, sup, rhs)
    return r, np.concatenate([[h0], h])


def _thomas(sub, main, sup, rhs):
    """Tridiagonal solve; sub[i] couples row i+1 to i, sup[i] row i to i+1."""
    n = len(main)
    c = np.empty(n - 1)
    d = np.empty(n)
    c[0] = sup[0] / main[0]
    d[0] = rhs[0] / main[0]
    for i in range(1, n):
        denom = main[i] - sub[i - 1] * c[i - 1]
        if i < n - 1:
            c[i] = sup[i] / denom
        d[i] = (rhs[i] - sub[i - 1] * d[i - 1]) / denom
    x = np.empty(n)
    x[-1] = d[-1]
    for i in range(n - 2, -1, -1):
        x[i] = d[i] - c[i] * x[i + 1]
    return x


# ---------------------------------------------------------------------------
# Gradient-flow stability
# ---------------------------------------------------------------------------

def stability_sim(omegas, lam: float, dt: float, steps: int, flow: str = "heat",
                  kappa: float | None = None, amplitude0=1.0) -> np.ndarray:
    """Per-mode Fourier amplitudes under the exact linear flow; shape (steps + 1, modes).

    heat:    a <- a exp(-(w^2 + lam^2) dt)
    eikonal: a <- a exp(-kappa w^2 dt)
    """
    if not dt > 0:
        raise InvalidArgument("dt must be positive")
    w = np.atleast_1d(np.asarray(omegas, dtype=float))
    if flow == "heat":
        rate = w * w + lam * lam
    elif flow == "eikonal":
        if kappa is None:
            raise InvalidArgument("eikonal flow needs a diffusion coefficient kappa")
        rate = kappa * w * w
    else:
        raise InvalidArgument(f"unknown flow {flow!r}")
    factor = np.exp(-rate * dt)
    out = np.empty((steps + 1, len(w)))
    out[0] = np.broadcast_to(np.asarray(amplitude0, dtype=float), w.shape)
    for k in range(steps):
        out[k + 1] = out[k] * factor
    return out


def euler_stability_limit(dx: float, lam: float, dim: int = 1) -> float:
    """Largest stable explicit-Euler step for h_t = lap(h) - lam^2 h on a periodic grid."""
    return 2.0 / (4.0 * dim / dx ** 2 + lam ** 2)


def explicit_euler_heat(h0, dx: float, lam: float, dt: float, steps: int) -> np.ndarray:
    """Explicit Euler on a periodic 1D grid; returns the max-norm after every step."""
    h = np.asarray(h0, dtype=float).copy()
    norms = np.empty(steps + 1)
    norms[0] = np.max(np.abs(h))
    for k in range(steps):
        lap = (np.roll(h, 1) - 2.0 * h + np.roll(h, -1)) / dx ** 2
        h = h + dt * (lap - lam * lam * h)
        norms[k + 1] = np.max(np.abs(h))
    return norms


def write_trajectories_csv(omegas, traj: np.ndarray, dt: float, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + [f"omega={float(o)!r}" for o in np.atleast_1d(omegas)])
        for k, row in enumerate(traj):
            w.writerow([repr(k * dt)] + [repr(float(v)) for v in row])
