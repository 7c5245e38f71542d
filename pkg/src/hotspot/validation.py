"""Executable checks of the reference solutions and of the field derivatives.

Each suite returns a list of ``Check`` rows; ``run_suites`` collects them for
the command line and the acceptance tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidArgument
from .field import Architecture, NeuralField, init_random
from .geometry import GridSpec
from .oracles import (bessel_k0, bessel_k0e, check_bounds, convergence_sweep, euler_stability_limit,
                      explicit_euler_heat, fd_screened_poisson, h_point_2d, h_point_3d, radial_fd_3d,
                      solve_multipoint, stability_sim)

# tabulated K0 values
K0_TABLE = ((0.1, 2.4270690247020166), (1.0, 0.42102443824070834), (5.0, 0.0036910983340425942))


@dataclass(frozen=True)
class Check:
    suite: str
    name: str
    passed: bool
    measured: float
    limit: str

    def row(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"{mark}  {self.suite:<12} {self.name:<40} {self.measured:<14.6g} {self.limit}"


# ---------------------------------------------------------------------------
# Closed forms
# ---------------------------------------------------------------------------

def disk_fd_error(res: int, eps: float = 0.1, lam: float = 10.0, half: float = 1.0) -> float:
    """Max relative error of the grid solve against the 2D point source.

    Nodes inside the source disk carry the closed-form values; nodes within 3
    cells of the disk or within 3 / lam of the box edge are not compared.
    """
    spec = GridSpec.cube(2, res, -half, half)
    pts = spec.points()
    r = np.linalg.norm(pts, axis=1)
    mask = r <= eps
    inner = np.exp(-lam * eps) * bessel_k0e(lam * r[mask]) / bessel_k0e(lam * eps) * np.exp(-lam * (r[mask] - eps))
    vals = np.zeros(len(pts))
    vals[mask] = inner
    grid = fd_screened_poisson(spec, mask, vals, lam)
    exact = h_point_2d(np.maximum(r, eps), eps, lam)
    dx = spec.spacing[0]
    edge = half - np.max(np.abs(pts), axis=1)
    sel = (r >= eps + 3 * dx) & (edge >= 3.0 / lam)
    return float(np.max(np.abs(grid.values[sel] / exact[sel] - 1.0)))


def fd_convergence_ratios(resolutions=(80, 160, 320), eps: float = 0.1, lam: float = 10.0,
                          half: float = 0.6) -> list[float]:
    """Error ratios under grid halving, with exact data on the disk and the outer ring."""
    errs = []
    for res in resolutions:
        spec = GridSpec.cube(2, res, -half, half)
        pts = spec.points()
        r = np.linalg.norm(pts, axis=1)
        ring = np.zeros(tuple(spec.res), bool)
        ring[0, :] = ring[-1, :] = ring[:, 0] = ring[:, -1] = True
        mask = (r <= eps) | ring.ravel()
        exact = np.exp(-lam * eps) * bessel_k0e(lam * r) / bessel_k0e(lam * eps) * np.exp(-lam * (r - eps))
        grid = fd_screened_poisson(spec, mask, exact, lam, tol=1e-12)
        errs.append(float(np.max(np.abs(grid.values[~mask] - exact[~mask]))))
    return [a / b for a, b in zip(errs, errs[1:])]


def radial_error_3d(eps: float = 0.1, lam: float = 10.0) -> float:
    r, h = radial_fd_3d(eps, lam, 1.0, outer=3.0, n=10_000)
    sel = r <= 1.5
    return float(np.max(np.abs(h[sel] / h_point_3d(r[sel], eps, lam) - 1.0)))


def suite_closed_forms() -> list[Check]:
    out = []
    worst = max(abs(bessel_k0(x) / v - 1.0) for x, v in K0_TABLE)
    out.append(Check("closed_forms", "K0 against table", worst < 1e-12, worst, "< 1e-12"))
    r = np.linspace(0.1, 1.0, 50)
    h = h_point_2d(r, 0.1, 10.0)
    anchor = abs(h[0] - math.exp(-1.0))
    out.append(Check("closed_forms", "2D point source boundary value", anchor < 1e-14, anchor, "< 1e-14"))
    err = disk_fd_error(200)
    out.append(Check("closed_forms", "2D grid solve vs point source", err < 0.02, err, "< 0.02"))
    err = radial_error_3d()
    out.append(Check("closed_forms", "3D radial solve vs point source", err < 0.005, err, "< 0.005"))
    for k, ratio in enumerate(fd_convergence_ratios()):
        out.append(Check("closed_forms", f"grid halving error ratio {k + 1}", 3.0 <= ratio <= 5.0, ratio, "in [3, 5]"))
    return out


# ---------------------------------------------------------------------------
# Multipoint distance bounds
# ---------------------------------------------------------------------------

def random_centers(rng: np.random.Generator, n: int, eps: float, dim: int = 3, half: float = 0.5) -> np.ndarray:
    while True:
        c = rng.uniform(-half, half, (n, dim))
        r = np.linalg.norm(c[:, None] - c[None], axis=2) + np.eye(n) * 9.0
        if r.min() > 2 * eps:
            return c


def exterior_queries(rng: np.random.Generator, centers: np.ndarray, count: int, eps: float) -> np.ndarray:
    out = np.empty((0, centers.shape[1]))
    while len(out) < count:
        q = rng.uniform(-1.0, 1.0, (4 * count, centers.shape[1]))
        d = np.linalg.norm(q[:, None] - centers[None], axis=2).min(axis=1)
        out = np.concatenate([out, q[d > 2 * eps]])
    return out[:count]


def bound_sweep(configs: int = 100, queries: int = 100, eps: float = 0.01, seed: int = 0,
                lams=(20.0, 40.0, 80.0)) -> tuple[int, int]:
    """Random 3D multipoint systems; returns (configurations passing, total)."""
    rng = np.random.default_rng(seed)
    ok = 0
    for k in range(configs):
        centers = random_centers(rng, int(rng.integers(1, 21)), eps)
        system = solve_multipoint(centers, eps, lams[k % len(lams)])
        ok += check_bounds(system, exterior_queries(rng, centers, queries, eps)).all_passed
    return ok, configs


def violation_detected() -> bool:
    """A field that is identically zero cannot satisfy the bounds far from the sources."""
    centers = np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]])
    system = solve_multipoint(centers, 0.01, 30.0)
    return not check_bounds(system, [[0.0, 0.8, 0.0]], estimate=0.0).all_passed


def suite_bounds(configs: int = 100, seed: int = 0) -> list[Check]:
    ok, total = bound_sweep(configs, seed=seed)
    return [Check("bounds", f"{total} random configurations", ok == total, ok, f"== {total}"),
            Check("bounds", "zero field flagged", violation_detected(), 1.0, "flagged")]


def lambda_ratios(seed: int = 0, eps: float = 0.01, lams=(20.0, 40.0, 80.0, 160.0)) -> np.ndarray:
    """Per-query gap ratios between consecutive lambdas (each lambda doubles)."""
    rng = np.random.default_rng(seed)
    centers = random_centers(rng, 10, eps)
    q = exterior_queries(rng, centers, 50, eps)
    gaps = [row["gap"] for row in convergence_sweep(centers, eps, lams, q)]
    return np.array([b / a for a, b in zip(gaps, gaps[1:])])


def suite_convergence(seed: int = 0) -> list[Check]:
    ratios = lambda_ratios(seed)
    lo, hi = float(ratios.min()), float(ratios.max())
    return [Check("convergence", "smallest ratio under lambda doubling", lo >= 0.4, lo, ">= 0.4"),
            Check("convergence", "largest ratio under lambda doubling", hi <= 0.6, hi, "<= 0.6")]


# ---------------------------------------------------------------------------
# Gradient-flow stability
# ---------------------------------------------------------------------------

def spectral_ratio_error(omegas=(0.5, 1.0, 2.0, 5.0, 10.0), lams=(0.0, 1.0, 5.0, 20.0), dt: float = 1e-3,
                         steps: int = 100) -> float:
    worst = 0.0
    w = np.asarray(omegas, dtype=float)
    for lam in lams:
        traj = stability_sim(w, lam, dt, steps)
        ratio = traj[1:] / traj[:-1]
        worst = max(worst, float(np.max(np.abs(ratio - np.exp(-(w * w + lam * lam) * dt)))))
    return worst


def euler_growth(dt_fraction: float, n: int = 64, lam: float = 5.0, steps: int = 400, seed: int = 0) -> float:
    """Final / initial max-norm of explicit Euler at a fraction of the stability limit."""
    dx = 2 * math.pi / n
    h0 = np.random.default_rng(seed).standard_normal(n)
    norms = explicit_euler_heat(h0, dx, lam, dt_fraction * euler_stability_limit(dx, lam), steps)
    return float(norms[-1] / norms[0])


def suite_stability() -> list[Check]:
    err = spectral_ratio_error()
    grow = euler_growth(1.1)
    decay = euler_growth(0.9)
    traj = stability_sim([1.0, 3.0], 0.0, 1e-2, 50, flow="eikonal", kappa=-0.5)
    monotone = bool(np.all(np.diff(traj, axis=0) > 0))
    return [Check("stability", "heat amplitude ratios", err < 1e-12, err, "< 1e-12"),
            Check("stability", "explicit Euler below limit decays", decay < 1.0, decay, "< 1"),
            Check("stability", "explicit Euler above limit grows", grow > 1.0, grow, "> 1"),
            Check("stability", "anti-diffusive eikonal flow grows", monotone, float(traj[-1, -1]), "increasing")]


# ---------------------------------------------------------------------------
# Derivatives of the field
# ---------------------------------------------------------------------------

def reference_value_and_grad(arch: Architecture, theta: np.ndarray, x: np.ndarray):
    """Plain forward-mode evaluation of u and grad_x u, sharing no code with the field module."""
    fld = NeuralField(arch, theta)
    a = np.asarray(x, dtype=float)
    da = np.broadcast_to(np.eye(arch.in_dim), (len(a), arch.in_dim, arch.in_dim))
    layers = fld.layers()
    for W, b in layers[:-1]:
        z = a @ W.T + b
        dz = da @ W.T
        if arch.activation == "softplus":
            bz = arch.beta * z
            a = (np.logaddexp(0.0, bz)) / arch.beta
            slope = 1.0 / (1.0 + np.exp(-bz))
        else:
            a = np.sin(arch.omega0 * z)
            slope = arch.omega0 * np.cos(arch.omega0 * z)
        da = dz * slope[:, None, :]
    W, b = layers[-1]
    return (a @ W.T + b)[:, 0], (da @ W.T)[:, :, 0]


def gradient_fd_error(arch: Architecture, seed: int, points: int = 4, step: float = 1e-6,
                      floor: float = 1e-8) -> float:
    """Worst relative error of the parameter gradient against central differences.

    The objective mixes random adjoints on u and on grad_x u. Entries whose
    absolute error is below ``floor`` count as exact.
    """
    rng = np.random.default_rng([seed, 7])
    fld = init_random(arch, seed)
    x = rng.uniform(-1.0, 1.0, (points, arch.in_dim))
    adj_u = rng.standard_normal(points)
    adj_g = rng.standard_normal((points, arch.in_dim))
    analytic = fld.param_gradient(x, adj_u, adj_g, threads=1)

    def objective(theta):
        u, g = reference_value_and_grad(arch, theta, x)
        return float(adj_u @ u + np.sum(adj_g * g))

    theta = fld.theta.copy()
    worst = 0.0
    for k in range(len(theta)):
        keep = theta[k]
        theta[k] = keep + step
        up = objective(theta)
        theta[k] = keep - step
        down = objective(theta)
        theta[k] = keep
        fd = (up - down) / (2 * step)
        err = abs(fd - analytic[k])
        if err > floor:
            worst = max(worst, err / max(abs(fd), abs(analytic[k])))
    return worst


def random_architectures(count: int = 20, seed: int = 0) -> list[Architecture]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        out.append(Architecture(int(rng.integers(2, 4)), width=int(rng.choice([8, 16, 32, 64])),
                                layers=int(rng.integers(3, 6)), beta=float(rng.choice([3.0, 10.0, 100.0]))))
    return out


def suite_autodiff(count: int = 20, seed: int = 0) -> list[Check]:
    out = []
    for k, arch in enumerate(random_architectures(count, seed)):
        err = gradient_fd_error(arch, seed + k)
        name = f"net {k}: d={arch.in_dim} {arch.layers}x{arch.width} beta={arch.beta:g}"
        out.append(Check("autodiff", name, err < 1e-4, err, "< 1e-4"))
    return out


SUITES: dict[str, Callable[[], list[Check]]] = {
    "closed_forms": suite_closed_forms,
    "bounds": suite_bounds,
    "convergence": suite_convergence,
    "stability": suite_stability,
    "autodiff": suite_autodiff,
}


def run_suites(name: str, configs: int = 100, seed: int = 0) -> list[Check]:
    if name == "all":
        names = list(SUITES)
    elif name in SUITES:
        names = [name]
    else:
        raise InvalidArgument(f"unknown suite {name!r}; choose from {', '.join(SUITES)} or all")
    out = []
    for n in names:
        if n == "bounds":
            out += suite_bounds(configs, seed)
        elif n in ("convergence", "autodiff"):
            out += SUITES[n](seed=seed)
        else:
            out += SUITES[n]()
    return out
