"""Loss terms, importance sampling of the domain, and schedules.

Each ``*_term`` function returns a :class:`Term` holding the loss value and
its adjoints with respect to the per-point field values and input gradients,
which is what :meth:`hotspot.field.Tape.backward` consumes. The matching
``*_loss`` function returns only the value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, InvalidConfig

EXP_FLOOR = -700.0


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    """Piecewise-linear curve over normalized training time t in [0, 1]."""
    knots: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if not self.knots:
            raise InvalidConfig("schedule needs at least one knot")
        ts = [t for t, _ in self.knots]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise InvalidConfig(f"schedule knots are not sorted: {ts}")
        if not all(math.isfinite(t) and math.isfinite(v) for t, v in self.knots):
            raise InvalidConfig("schedule knots must be finite")

    @classmethod
    def constant(cls, value: float) -> "Schedule":
        return cls(((0.0, float(value)),))

    @classmethod
    def parse(cls, text: str) -> "Schedule":
        """Parse ``t:v,t:v,...``."""
        try:
            pairs = [item.split(":") for item in text.split(",") if item.strip()]
            knots = tuple((float(t), float(v)) for t, v in pairs)
        except ValueError as exc:
            raise InvalidConfig(f"bad schedule {text!r}; expected t:v,t:v,...") from exc
        return cls(knots)

    def format(self) -> str:
        return ",".join(f"{t!r}:{v!r}" for t, v in self.knots)

    def __call__(self, t: float) -> float:
        return schedule_eval(self, t)


def schedule_eval(curve: Schedule, t: float) -> float:
    ts = np.array([k[0] for k in curve.knots])
    vs = np.array([k[1] for k in curve.knots])
    if t <= ts[0]:
        return float(vs[0])
    if t >= ts[-1]:
        return float(vs[-1])
    i = int(np.searchsorted(ts, t, side="right"))
    t0, t1, v0, v1 = ts[i - 1], ts[i], vs[i - 1], vs[i]
    if t1 == t0:
        return float(v1)
    return float(v0 + (v1 - v0) * (t - t0) / (t1 - t0))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

# config-file key -> LossConfig attribute
_KEYS = {
    "w_b": "w_boundary",
    "w_e": "w_eikonal",
    "w_h": "w_heat",
    "w_area": "w_area",
    "w_sal": "w_sal",
    "w_phase": "w_phase",
    "lambda": "lam",
    "p": "p",
    "phase.eps": "phase_eps",
    "phase.clamp": "phase_clamp",
}
SCHEDULABLE = ("w_b", "w_e", "w_h", "w_area", "w_sal", "w_phase", "lambda")


@dataclass(frozen=True)
class LossConfig:
    w_boundary: float = 1.0
    w_eikonal: float = 0.1
    w_heat: float = 1.0
    w_area: float = 0.0
    w_sal: float = 0.0
    w_phase: float = 0.0
    lam: float = 10.0
    p: int = 1
    phase_eps: float = 0.01
    phase_clamp: float = 0.99
    schedules: dict = field(default_factory=dict)  # key in SCHEDULABLE -> Schedule

    def __post_init__(self):
        if not self.lam > 0:
            raise InvalidConfig("lambda must be positive")
        for key in ("w_boundary", "w_eikonal", "w_heat", "w_area", "w_sal", "w_phase"):
            if getattr(self, key) < 0:
                raise InvalidConfig(f"{key} must be nonnegative")
        if self.p not in (1, 2):
            raise InvalidConfig("p must be 1 or 2")
        if not (self.phase_eps > 0 and 0 < self.phase_clamp < 1):
            raise InvalidConfig("phase.eps must be positive and phase.clamp in (0, 1)")
        for key, sched in self.schedules.items():
            if key not in SCHEDULABLE:
                raise InvalidConfig(f"{key} cannot be scheduled")
            if not isinstance(sched, Schedule):
                raise InvalidConfig(f"schedule for {key} must be a Schedule")
            vals = [v for _, v in sched.knots]
            if key == "lambda" and min(vals) <= 0:
                raise InvalidConfig("scheduled lambda must stay positive")
            if min(vals) < 0:
                raise InvalidConfig(f"scheduled {key} must stay nonnegative")

    def base_value(self, key: str) -> float:
        return float(getattr(self, _KEYS[key]))

    def at(self, t: float) -> dict[str, float]:
        """Effective lambda and weights at normalized time t."""
        t = min(max(float(t), 0.0), 1.0)
        out = {}
        for key in SCHEDULABLE:
            sched = self.schedules.get(key)
            out[key] = sched(t) if sched is not None else self.base_value(key)
        return out

    def to_text(self) -> str:
        lines = []
        for key, attr in _KEYS.items():
            lines.append(f"{key} = {getattr(self, attr)!r}")
        for key in SCHEDULABLE:
            if key in self.schedules:
                lines.append(f"{key}.knots = {self.schedules[key].format()}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, items: dict[str, str]) -> "LossConfig":
        kwargs: dict = {}
        schedules = {}
        for key, raw in items.items():
            if key.endswith(".knots"):
                base = key[: -len(".knots")]
                if base not in SCHEDULABLE:
                    raise InvalidConfig(f"unknown schedule key {key!r}")
                schedules[base] = Schedule.parse(raw)
            elif key in _KEYS:
                try:
                    kwargs[_KEYS[key]] = int(raw) if key == "p" else float(raw)
                except ValueError as exc:
                    raise InvalidConfig(f"{key}: cannot parse {raw!r}") from exc
            else:
                raise InvalidConfig(f"unknown loss key {key!r}")
        return cls(schedules=schedules, **kwargs)

    @classmethod
    def from_text(cls, text: str) -> "LossConfig":
        return cls.from_mapping(parse_key_values(text))


def parse_key_values(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise InvalidConfig(f"line {n}: empty key")
        out[key] = value
    return out


def default_schedules(dim: int) -> dict:
    if dim == 3:
        return {"lambda": Schedule(((0.0, 5.0), (0.8, 30.0)))}
    return {"w_h": Schedule(((0.8, 1.0), (1.0, 0.2))),
            "w_e": Schedule(((0.8, 0.1), (1.0, 1.0)))}


# ---------------------------------------------------------------------------
# Importance sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VolumeBatch:
    points: np.ndarray     # (n, d)
    pdf: np.ndarray        # (n,) density of the sampling mixture at each point
    gaussian: np.ndarray   # (n,) bool, True for points drawn around boundary centers
    inside: np.ndarray     # (n,) bool, point lies in the integration box

    def __len__(self):
        return len(self.points)

    @property
    def weights(self) -> np.ndarray:
        """Per-point importance weights; points outside the box carry zero."""
        return np.where(self.inside, 1.0 / self.pdf, 0.0)


def mixture_pdf(x, lower, upper, centers, sigma: float, gaussian_fraction: float = 0.5) -> np.ndarray:
    """Density of the uniform-box / Gaussian-around-centers mixture at ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    d = x.shape[1]
    vol = float(np.prod(upper - lower))
    inside = np.all((x >= lower) & (x <= upper), axis=1)
    pdf = (1.0 - gaussian_fraction) * inside / vol
    if gaussian_fraction > 0:
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        norm = (2.0 * math.pi * sigma * sigma) ** (-0.5 * d)
        c2 = np.einsum("bd,bd->b", centers, centers)
        scale = -0.5 / (sigma * sigma)
        acc = np.zeros(len(x))
        # blocked to bound memory at O(block * B)
        for s in range(0, len(x), 1024):
            xb = x[s:s + 1024]
            r2 = xb @ centers.T
            r2 *= -2.0
            r2 += c2
            r2 += np.einsum("nd,nd->n", xb, xb)[:, None]
            np.maximum(r2, 0.0, out=r2)
            r2 *= scale
            np.exp(r2, out=r2)
            acc[s:s + 1024] = r2.mean(axis=1)
        pdf = pdf + gaussian_fraction * norm * acc
    return pdf


def sample_volume(lower, upper, boundary_batch, n_uniform: int, n_gauss: int, sigma: float,
                  seed) -> VolumeBatch:
    """Uniform box samples plus Gaussian samples around random boundary centers.

    The density is that of the 1:1 mixture regardless of the requested counts,
    so the estimator stays unbiased whenever both counts are equal; with
    ``n_gauss == 0`` the density is the plain uniform one.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if np.any(upper <= lower):
        raise InvalidArgument("box lower corner must be below upper corner")
    if n_uniform < 0 or n_gauss < 0:
        raise InvalidArgument("sample counts must be nonnegative")
    centers = np.empty((0, len(lower)))
    if boundary_batch is not None:
        centers = np.asarray(getattr(boundary_batch, "points", boundary_batch), dtype=float)
        centers = centers.reshape(-1, len(lower))
    if n_gauss > 0 and len(centers) == 0:
        raise InvalidArgument("Gaussian samples need a nonempty boundary batch")
    if n_gauss > 0 and not sigma > 0:
        raise InvalidArgument("sigma must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = len(lower)
    uni = rng.uniform(lower, upper, (n_uniform, d))
    pick = rng.integers(0, max(len(centers), 1), n_gauss)
    gau = centers[pick] + sigma * rng.standard_normal((n_gauss, d)) if n_gauss else np.empty((0, d))
    pts = np.concatenate([uni, gau])
    frac = 0.5 if n_gauss > 0 else 0.0
    pdf = mixture_pdf(pts, lower, upper, centers, sigma, frac)
    inside = np.all((pts >= lower) & (pts <= upper), axis=1)
    tags = np.concatenate([np.zeros(n_uniform, bool), np.ones(n_gauss, bool)])
    return VolumeBatch(pts, pdf, tags, inside)


def uniform_batch(lower, upper, n: int, seed) -> VolumeBatch:
    return sample_volume(lower, upper, None, n, 0, 1.0, seed)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Term:
    value: float
    du: np.ndarray               # d value / d u_i
    dg: np.ndarray | None = None  # d value / d grad_i


def _grad_norm(grad):
    g = np.asarray(grad, dtype=float)
    return g, np.sqrt(np.einsum("nd,nd->n", g, g))


def _safe_unit(g, n):
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n[:, None] > 0, g / np.where(n > 0, n, 1.0)[:, None], 0.0)


def boundary_term(u, p: int = 1) -> Term:
    u = np.asarray(u, dtype=float)
    if u.size == 0:
        raise InvalidArgument("boundary batch is empty")
    n = len(u)
    a = np.abs(u)
    if p == 1:
        return Term(float(a.mean()), np.sign(u) / n)
    return Term(float(np.mean(a ** p)), p * a ** (p - 1) * np.sign(u) / n)


def boundary_loss(u, p: int = 1) -> float:
    return boundary_term(u, p).value


def eikonal_term(grad, batch: VolumeBatch, p: int = 1) -> Term:
    g, nrm = _grad_norm(grad)
    if len(g) != len(batch):
        raise InvalidArgument("gradient count does not match batch")
    w = batch.weights
    n = len(g)
    dev = nrm - 1.0
    val = np.abs(dev) ** p
    coeff = w * p * np.abs(dev) ** (p - 1) * np.sign(dev) / n
    dg = coeff[:, None] * _safe_unit(g, nrm)
    return Term(float(np.mean(w * val)), np.zeros(n), dg)


def eikonal_loss(grad, batch: VolumeBatch, p: int = 1) -> float:
    return eikonal_term(grad, batch, p).value


def heat_integrand(u, grad_norm_sq, lam: float) -> np.ndarray:
    """1/2 exp(-2 lam |u|) (|grad u|^2 + 1), exponent clamped at -700."""
    e = np.exp(np.maximum(-2.0 * lam * np.abs(u), EXP_FLOOR))
    return 0.5 * e * (grad_norm_sq + 1.0)


def heat_term(u, grad, batch: VolumeBatch, lam: float) -> Term:
    if not lam > 0:
        raise InvalidArgument("lambda must be positive")
    u = np.asarray(u, dtype=float)
    g = np.asarray(grad, dtype=float)
    if len(u) != len(batch) or len(g) != len(batch):
        raise InvalidArgument("field values do not match batch")
    n = len(u)
    w = batch.weights
    e = np.exp(np.maximum(-2.0 * lam * np.abs(u), EXP_FLOOR))
    sq = np.einsum("nd,nd->n", g, g)
    integrand = 0.5 * e * (sq + 1.0)
    du = w * (-lam * np.sign(u)) * e * (sq + 1.0) / n
    dg = (w * e / n)[:, None] * g
    return Term(float(np.mean(w * integrand)), du, dg)


def heat_loss(u, grad, batch: VolumeBatch, lam: float) -> float:
    return heat_term(u, grad, batch, lam).value


def area_term(u, grad, batch: VolumeBatch, lam: float) -> Term:
    if not lam > 0:
        raise InvalidArgument("lambda must be positive")
    u = np.asarray(u, dtype=float)
    g, nrm = _grad_norm(grad)
    n = len(u)
    w = batch.weights
    e = np.exp(np.maximum(-lam * np.abs(u), EXP_FLOOR))
    du = w * (-lam * np.sign(u)) * e * nrm / n
    dg = (w * e / n)[:, None] * _safe_unit(g, nrm)
    return Term(float(np.mean(w * e * nrm)), du, dg)


def area_loss(u, grad, batch: VolumeBatch, lam: float) -> float:
    return area_term(u, grad, batch, lam).value


def area_bound(u, grad, batch: VolumeBatch, lam: float) -> float:
    """Cauchy-Schwarz bound on the area estimate computed on the same samples.

    ``area <= sqrt(mean(w) * 2 * heat)`` holds exactly for every batch, where
    ``mean(w)`` is the batch's own estimate of the box volume.
    """
    vol = float(np.mean(batch.weights))
    return math.sqrt(vol * 2.0 * heat_loss(u, grad, batch, lam))


def sal_term(u, cloud_distance) -> Term:
    u = np.asarray(u, dtype=float)
    dist = np.asarray(cloud_distance, dtype=float)
    if u.shape != dist.shape:
        raise InvalidArgument("field values and distances differ in length")
    n = len(u)
    diff = np.abs(u) - dist
    return Term(float(np.mean(np.abs(diff))), np.sign(diff) * np.sign(u) / n)


def sal_loss(u, cloud_distance) -> float:
    return sal_term(u, cloud_distance).value


def phase_potential(o):
    """Double-well potential o^2 - 2|o| + 1 = (1 - |o|)^2."""
    o = np.asarray(o, dtype=float)
    out = o * o - 2.0 * np.abs(o) + 1.0
    return float(out) if out.ndim == 0 else out


def phase_log_transform(o, eps: float, clamp: float = 1.0):
    """Occupancy-like value to signed distance: -sqrt(eps) ln(1 - |o|) sign(o)."""
    if not eps > 0:
        raise InvalidArgument("eps must be positive")
    o = np.asarray(o, dtype=float)
    a = np.minimum(np.abs(o), clamp)
    with np.errstate(divide="ignore"):
        s = -math.sqrt(eps) * np.log1p(-a) * np.sign(o)
    return float(s) if s.ndim == 0 else s


def occupancy_from_distance(u, eps: float, clamp: float = 1.0):
    """Inverse of :func:`phase_log_transform` (before clamping)."""
    u = np.asarray(u, dtype=float)
    o = np.sign(u) * np.minimum(-np.expm1(-np.abs(u) / math.sqrt(eps)), clamp)
    return float(o) if o.ndim == 0 else o


def phase_term(u, grad, batch: VolumeBatch, eps: float, clamp: float) -> Term:
    """Energy eps |grad o|^2 + W(o) with o obtained from u through the inverse log transform.

    Unclamped, the integrand equals exp(-2|u|/sqrt(eps)) (|grad u|^2 + 1), i.e. twice
    the heat integrand at lambda = 1/sqrt(eps).
    """
    u = np.asarray(u, dtype=float)
    g = np.asarray(grad, dtype=float)
    n = len(u)
    w = batch.weights
    k = 1.0 / math.sqrt(eps)
    h = np.exp(np.maximum(-k * np.abs(u), EXP_FLOOR))  # 1 - |o| before clamping
    active = (1.0 - h) < clamp
    h_eff = np.where(active, h, 1.0 - clamp)
    sq = np.einsum("nd,nd->n", g, g)
    # grad o = k h grad u where unclamped, 0 where clamped
    grad_o_sq = np.where(active, k * k * h * h * sq, 0.0)
    integrand = eps * grad_o_sq + h_eff * h_eff
    dh = np.where(active, 2.0 * eps * k * k * h * sq + 2.0 * h, 0.0)
    du = w * dh * (-k * np.sign(u)) * h / n
    dg = (w * np.where(active, 2.0 * eps * k * k * h * h, 0.0) / n)[:, None] * g
    return Term(float(np.mean(w * integrand)), du, dg)


def phase_loss(u, grad, batch: VolumeBatch, eps: float, clamp: float) -> float:
    return phase_term(u, grad, batch, eps, clamp).value


# ---------------------------------------------------------------------------
# Combination
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossBreakdown:
    boundary: float
    eikonal: float
    heat: float
    area: float
    sal: float
    phase: float
    total: float
    lam: float
    weights: dict

    def as_row(self) -> dict:
        row = {k: getattr(self, k) for k in ("total", "boundary", "eikonal", "heat", "area", "sal", "phase")}
        row["lambda"] = self.lam
        row.update({k: v for k, v in self.weights.items() if k != "lambda"})
        return row


@dataclass
class LossInputs:
    """Field values needed by the loss terms at one iteration."""
    boundary_u: np.ndarray
    volume_u: np.ndarray | None = None
    volume_grad: np.ndarray | None = None
    batch: VolumeBatch | None = None
    cloud_distance: np.ndarray | None = None  # unsigned distance to the cloud at volume points


@dataclass
class LossAdjoints:
    boundary_du: np.ndarray
    volume_du: np.ndarray | None
    volume_dg: np.ndarray | None


def total_loss(inputs: LossInputs, config: LossConfig, iteration: int = 0, total: int = 1,
               with_adjoints: bool = False):
    """Weighted sum of active terms with schedules evaluated at t = iteration / total.

    Returns a :class:`LossBreakdown`, or ``(breakdown, adjoints)`` when requested.
    """
    t = iteration / total if total > 0 else 0.0
    eff = config.at(t)
    lam = eff["lambda"]
    p = config.p
    terms = {}
    bt = boundary_term(inputs.boundary_u, p)
    terms["boundary"] = (eff["w_b"], bt)
    need_volume = any(eff[k] > 0 for k in ("w_e", "w_h", "w_area", "w_sal", "w_phase"))
    if need_volume:
        if inputs.batch is None or inputs.volume_u is None or inputs.volume_grad is None:
            raise InvalidArgument("volume terms are active but no volume samples were given")
        if eff["w_e"] > 0:
            terms["eikonal"] = (eff["w_e"], eikonal_term(inputs.volume_grad, inputs.batch, p))
        if eff["w_h"] > 0:
            terms["heat"] = (eff["w_h"], heat_term(inputs.volume_u, inputs.volume_grad, inputs.batch, lam))
        if eff["w_area"] > 0:
            terms["area"] = (eff["w_area"], area_term(inputs.volume_u, inputs.volume_grad, inputs.batch, lam))
        if eff["w_sal"] > 0:
            if inputs.cloud_distance is None:
                raise InvalidArgument("SAL term needs cloud distances")
            terms["sal"] = (eff["w_sal"], sal_term(inputs.volume_u, inputs.cloud_distance))
        if eff["w_phase"] > 0:
            terms["phase"] = (eff["w_phase"], phase_term(inputs.volume_u, inputs.volume_grad, inputs.batch,
                                                         config.phase_eps, config.phase_clamp))
    values = {name: term.value for name, (_, term) in terms.items()}
    tot = 0.0
    for name, (wt, term) in terms.items():
        tot += wt * term.value
    bd = LossBreakdown(
        boundary=values.get("boundary", 0.0), eikonal=values.get("eikonal", 0.0),
        heat=values.get("heat", 0.0), area=values.get("area", 0.0), sal=values.get("sal", 0.0),
        phase=values.get("phase", 0.0), total=tot, lam=lam, weights=eff)
    if not with_adjoints:
        return bd
    vdu = vdg = None
    if need_volume:
        nv = len(inputs.batch)
        vdu = np.zeros(nv)
        vdg = np.zeros((nv, inputs.batch.points.shape[1]))
        for name, (wt, term) in terms.items():
            if name == "boundary":
                continue
            vdu += wt * term.du
            if term.dg is not None:
                vdg += wt * term.dg
    return bd, LossAdjoints(eff["w_b"] * bt.du, vdu, vdg)
