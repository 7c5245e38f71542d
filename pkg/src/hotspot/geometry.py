"""Shapes with exact signed distance oracles, point clouds, grids and level sets.

Conventions: signed distances are negative inside the solid. Batched functions
take points as ``(n, d)`` arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateCloudError, InvalidArgument, ParseError, Unsupported


def _as_points(x, dim: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise InvalidArgument(f"expected points of dimension {dim}, got shape {np.shape(x)}")
    return arr, single


# ---------------------------------------------------------------------------
# Shapes
# ---------------------------------------------------------------------------

class Shape:
    """Base class. Subclasses implement ``_sdf`` on ``(n, d)`` arrays."""

    dim: int

    def sdf(self, x) -> np.ndarray | float:
        pts, single = _as_points(x, self.dim)
        out = self._sdf(pts)
        return float(out[0]) if single else out

    def _sdf(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def boundary_measure(self) -> float:
        raise NotImplementedError

    def _sample_raw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Points on the boundary of this primitive, density proportional to measure."""
        raise NotImplementedError


@dataclass(frozen=True)
class Circle(Shape):
    center: tuple[float, float]
    radius: float

    dim = 2

    def __post_init__(self):
        if self.radius <= 0:
            raise InvalidArgument("circle radius must be positive")

    def _sdf(self, pts):
        return np.linalg.norm(pts - np.asarray(self.center), axis=1) - self.radius

    def boundary_measure(self):
        return 2.0 * math.pi * self.radius

    def _sample_raw(self, n, rng):
        theta = rng.uniform(0.0, 2.0 * math.pi, n)
        return np.asarray(self.center) + self.radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)


@dataclass(frozen=True)
class Sphere(Shape):
    center: tuple[float, float, float]
    radius: float

    dim = 3

    def __post_init__(self):
        if self.radius <= 0:
            raise InvalidArgument("sphere radius must be positive")

    def _sdf(self, pts):
        return np.linalg.norm(pts - np.asarray(self.center), axis=1) - self.radius

    def boundary_measure(self):
        return 4.0 * math.pi * self.radius ** 2

    def _sample_raw(self, n, rng):
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * v


@dataclass(frozen=True)
class Torus(Shape):
    """Torus around the z axis through ``center``."""

    center: tuple[float, float, float]
    major: float
    minor: float

    dim = 3

    def __post_init__(self):
        if not (0 < self.minor < self.major):
            raise InvalidArgument("torus requires 0 < minor < major")

    def _sdf(self, pts):
        p = pts - np.asarray(self.center)
        q = np.hypot(p[:, 0], p[:, 1]) - self.major
        return np.hypot(q, p[:, 2]) - self.minor

    def boundary_measure(self):
        return 4.0 * math.pi ** 2 * self.major * self.minor

    def _sample_raw(self, n, rng):
        # area element is proportional to (R + r cos v); sample v by rejection
        R, r = self.major, self.minor
        out = np.empty(0)
        while out.size < n:
            v = rng.uniform(0.0, 2.0 * math.pi, 2 * n)
            keep = rng.uniform(0.0, R + r, 2 * n) < R + r * np.cos(v)
            out = np.concatenate([out, v[keep]])
        v = out[:n]
        u = rng.uniform(0.0, 2.0 * math.pi, n)
        rho = R + r * np.cos(v)
        pts = np.stack([rho * np.cos(u), rho * np.sin(u), r * np.sin(v)], axis=1)
        return pts + np.asarray(self.center)


def _segment_distance(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point to each segment, shape ``(n, m)``."""
    ab = b - a
    ap = pts[:, None, :] - a[None, :, :]
    t = np.einsum("nmd,md->nm", ap, ab) / np.einsum("md,md->m", ab, ab)
    t = np.clip(t, 0.0, 1.0)
    diff = ap - t[:, :, None] * ab[None, :, :]
    return np.sqrt(np.einsum("nmd,nmd->nm", diff, diff))


def _winding_number(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sum of signed crossing contributions (Sunday's algorithm) for directed edges a->b."""
    px, py = pts[:, 0:1], pts[:, 1:2]
    ax, ay, bx, by = a[:, 0], a[:, 1], b[:, 0], b[:, 1]
    cross = (bx - ax) * (py - ay) - (px - ax) * (by - ay)
    up = (ay <= py) & (by > py) & (cross > 0)
    down = (ay > py) & (by <= py) & (cross < 0)
    return up.sum(axis=1) - down.sum(axis=1)


@dataclass(frozen=True)
class Polygon(Shape):
    """Closed polygon; inside is where the winding number is nonzero."""

    vertices: tuple[tuple[float, float], ...]

    dim = 2

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
            raise InvalidArgument("polygon needs at least 3 two-dimensional vertices")
        x, y = v[:, 0], v[:, 1]
        area = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
        if abs(area) < 1e-14:
            raise InvalidArgument("polygon has zero area")
        if np.any(np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1) == 0):
            raise InvalidArgument("polygon has a zero-length edge")

    @property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        v = np.asarray(self.vertices, dtype=float)
        return v, np.roll(v, -1, axis=0)

    def _sdf(self, pts):
        a, b = self.edges
        dist = _segment_distance(pts, a, b).min(axis=1)
        inside = _winding_number(pts, a, b) != 0
        return np.where(inside, -dist, dist)

    def boundary_measure(self):
        a, b = self.edges
        return float(np.linalg.norm(b - a, axis=1).sum())

    def _sample_raw(self, n, rng):
        a, b = self.edges
        return _sample_segments(a, b, n, rng)


def _sample_segments(a, b, n, rng):
    lengths = np.linalg.norm(b - a, axis=1)
    idx = rng.choice(len(a), size=n, p=lengths / lengths.sum())
    t = rng.uniform(0.0, 1.0, n)[:, None]
    return a[idx] + t * (b[idx] - a[idx])


@dataclass(frozen=True)
class SegmentSoup(Shape):
    """Unordered 2D segments. Sign follows the even-odd rule, which is meaningful
    when the segments form closed loops; set ``signed=False`` for open curves."""

    segments: tuple[tuple[tuple[float, float], tuple[float, float]], ...]
    signed: bool = True

    dim = 2

    def __post_init__(self):
        s = np.asarray(self.segments, dtype=float)
        if s.ndim != 3 or s.shape[1:] != (2, 2) or len(s) == 0:
            raise InvalidArgument("segments must have shape (m, 2, 2)")
        if np.any(np.linalg.norm(s[:, 1] - s[:, 0], axis=1) == 0):
            raise InvalidArgument("segments must have nonzero length")

    def _sdf(self, pts):
        s = np.asarray(self.segments, dtype=float)
        a, b = s[:, 0], s[:, 1]
        dist = _segment_distance(pts, a, b).min(axis=1)
        if not self.signed:
            return dist
        # even-odd: count crossings of a +x ray, orientation-free
        px, py = pts[:, 0:1], pts[:, 1:2]
        straddle = (a[:, 1] > py) != (b[:, 1] > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = a[:, 0] + (py - a[:, 1]) * (b[:, 0] - a[:, 0]) / (b[:, 1] - a[:, 1])
        inside = (np.sum(straddle & (px < xcross), axis=1) % 2) == 1
        return np.where(inside, -dist, dist)

    def boundary_measure(self):
        s = np.asarray(self.segments, dtype=float)
        return float(np.linalg.norm(s[:, 1] - s[:, 0], axis=1).sum())

    def _sample_raw(self, n, rng):
        s = np.asarray(self.segments, dtype=float)
        return _sample_segments(s[:, 0], s[:, 1], n, rng)


@dataclass(frozen=True)
class Union(Shape):
    """Min of child distances; exact only when the children are disjoint."""

    children: tuple[Shape, ...]

    def __post_init__(self):
        if not self.children:
            raise InvalidArgument("union needs at least one child")
        dims = {c.dim for c in self.children}
        if len(dims) != 1:
            raise InvalidArgument("union children must share a dimension")

    @property
    def dim(self):  # type: ignore[override]
        return self.children[0].dim

    def _sdf(self, pts):
        return np.min([c._sdf(pts) for c in self.children], axis=0)

    def boundary_measure(self):
        return sum(c.boundary_measure() for c in self.children)

    def _sample_raw(self, n, rng):
        return _sample_children(self.children, n, rng)


@dataclass(frozen=True)
class Difference(Shape):
    """``a`` minus ``b`` as ``max(a, -b)``; exact for e.g. concentric annuli."""

    a: Shape
    b: Shape

    def __post_init__(self):
        if self.a.dim != self.b.dim:
            raise InvalidArgument("difference operands must share a dimension")

    @property
    def dim(self):  # type: ignore[override]
        return self.a.dim

    def _sdf(self, pts):
        return np.maximum(self.a._sdf(pts), -self.b._sdf(pts))

    def boundary_measure(self):
        return self.a.boundary_measure() + self.b.boundary_measure()

    def _sample_raw(self, n, rng):
        return _sample_children((self.a, self.b), n, rng)


def _sample_children(children, n, rng):
    w = np.array([c.boundary_measure() for c in children])
    counts = rng.multinomial(n, w / w.sum())
    parts = [c._sample_raw(int(k), rng) for c, k in zip(children, counts)]
    return np.concatenate(parts, axis=0) if parts else np.empty((0, children[0].dim))


def signed_distance_oracle(shape: Shape, x):
    """Exact signed distance of ``x`` (a point or ``(n, d)`` array) to ``shape``."""
    return shape.sdf(x)


# ---------------------------------------------------------------------------
# Named test shapes
# ---------------------------------------------------------------------------

def square(half: float = 0.5, center=(0.0, 0.0)) -> Polygon:
    cx, cy = center
    return Polygon(((cx - half, cy - half), (cx + half, cy - half),
                    (cx + half, cy + half), (cx - half, cy + half)))


def rectangle(width: float, height: float, center=(0.0, 0.0)) -> Polygon:
    cx, cy = center
    w, h = width / 2, height / 2
    return Polygon(((cx - w, cy - h), (cx + w, cy - h), (cx + w, cy + h), (cx - w, cy + h)))


def star(points: int = 5, outer: float = 0.7, inner: float = 0.32, rotation: float = math.pi / 2) -> Polygon:
    ang = rotation + np.arange(2 * points) * math.pi / points
    rad = np.where(np.arange(2 * points) % 2 == 0, outer, inner)
    return Polygon(tuple(map(tuple, np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1))))


def rings(outer: float = 0.6, inner: float = 0.3) -> Difference:
    return Difference(Circle((0.0, 0.0), outer), Circle((0.0, 0.0), inner))


SHAPE_BUILDERS = {
    "circle": lambda r=0.5: Circle((0.0, 0.0), r),
    "square": lambda half=0.5: square(half),
    "rings": lambda outer=0.6, inner=0.3: rings(outer, inner),
    "star": lambda outer=0.7, inner=0.32, points=5: star(int(points), outer, inner),
    "two_circles": lambda r=0.3: Union((Circle((-0.45, 0.0), r), Circle((0.45, 0.0), r))),
    "sphere": lambda r=0.5: Sphere((0.0, 0.0, 0.0), r),
    "torus": lambda major=0.35, minor=0.12: Torus((0.0, 0.0, 0.0), major, minor),
}


def make_shape(name: str, **params) -> Shape:
    try:
        builder = SHAPE_BUILDERS[name]
    except KeyError:
        raise InvalidArgument(f"unknown shape {name!r}; choose from {', '.join(sorted(SHAPE_BUILDERS))}") from None
    return builder(**params)


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------

@dataclass
class PointCloud:
    """Points in stored coordinates. Source coordinates are ``points / scale + offset``."""

    points: np.ndarray
    scale: float = 1.0
    offset: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2:
            raise InvalidArgument("points must be an (n, d) array")
        if not self.scale > 0:
            raise InvalidArgument("scale must be positive")
        if self.offset is None:
            self.offset = np.zeros(self.dim)
        self.offset = np.asarray(self.offset, dtype=float)
        if self.offset.shape != (self.dim,):
            raise InvalidArgument("offset must be a d-vector")

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]

    def to_source(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=float) / self.scale + self.offset

    def from_source(self, pts) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - self.offset) * self.scale


def sample_boundary(shape: Shape, n: int, seed: int) -> PointCloud:
    """``n`` boundary points, density proportional to boundary measure.

    Union/difference candidates that fall off the combined boundary are
    rejected and redrawn, which keeps the density uniform on what remains.
    """
    if n < 0:
        raise InvalidArgument("n must be nonnegative")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A]))
    if n == 0:
        return PointCloud(np.empty((0, shape.dim)))
    kept = np.empty((0, shape.dim))
    while len(kept) < n:
        cand = shape._sample_raw(max(2 * (n - len(kept)), 16), rng)
        # composites emit candidates child by child; shuffle so truncation keeps the mix
        cand = cand[rng.permutation(len(cand))]
        on = np.abs(shape._sdf(cand)) < 1e-12
        kept = np.concatenate([kept, cand[on]])
    return PointCloud(kept[:n])


def normalize_cloud(cloud: PointCloud, fraction: float = 0.7, radius: float = 0.45) -> PointCloud:
    """Center on the centroid and scale so the ceil(fraction*n)-th smallest norm equals ``radius``."""
    n = len(cloud)
    if n == 0:
        raise InvalidArgument("cannot normalize an empty cloud")
    if not (0 < fraction <= 1):
        raise InvalidArgument("fraction must lie in (0, 1]")
    centroid = cloud.points.mean(axis=0)
    centered = cloud.points - centroid
    norms = np.linalg.norm(centered, axis=1)
    k = math.ceil(fraction * n)
    q = np.partition(norms, k - 1)[k - 1]
    if q <= 0:
        raise DegenerateCloudError("quantile norm is zero (all points identical?)")
    s = radius / q
    # compose with any existing transform
    return PointCloud(centered * s, scale=cloud.scale * s, offset=cloud.offset + centroid / cloud.scale)


_FLOAT_RE_CHARS = set("0123456789+-.eEinfaINFAN")


def save_cloud(cloud: PointCloud, path) -> None:
    lines = [f"# hotspot point cloud dim={cloud.dim} n={len(cloud)}"]
    if cloud.scale != 1.0 or np.any(cloud.offset != 0):
        lines.append("# transform scale=" + repr(float(cloud.scale)) + " offset="
                     + ",".join(repr(float(v)) for v in cloud.offset))
    lines.extend(" ".join(repr(float(v)) for v in p) for p in cloud.points)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_cloud(path) -> PointCloud:
    rows: list[list[float]] = []
    scale, offset = 1.0, None
    dim = None
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if line.startswith("#"):
            if line.startswith("# transform"):
                fields = dict(tok.split("=", 1) for tok in line[len("# transform"):].split())
                scale = float(fields["scale"])
                offset = [float(v) for v in fields["offset"].split(",")]
            continue
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            vals = [float(tok) for tok in line.split()]
        except ValueError:
            raise ParseError(f"line {lineno}: cannot parse {raw!r} as floats", lineno) from None
        if dim is None:
            dim = len(vals)
        elif len(vals) != dim:
            raise ParseError(f"line {lineno}: expected {dim} values, got {len(vals)}", lineno)
        rows.append(vals)
    if dim is None:
        raise ParseError("no data lines", 0)
    return PointCloud(np.array(rows, dtype=float), scale=scale, offset=offset)


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Box ``[lower, upper]`` split into ``res`` cells per axis; samples sit at cell centers."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    res: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.lower) == len(self.upper) == len(self.res)):
            raise InvalidArgument("grid corner and resolution lengths differ")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise InvalidArgument("grid lower corner must be below upper corner")
        if any(r < 1 for r in self.res):
            raise InvalidArgument("grid resolution must be positive")

    @classmethod
    def cube(cls, dim: int, res: int, lo: float = -1.0, hi: float = 1.0) -> "GridSpec":
        return cls((lo,) * dim, (hi,) * dim, (res,) * dim)

    @property
    def dim(self) -> int:
        return len(self.res)

    @property
    def spacing(self) -> np.ndarray:
        return (np.asarray(self.upper) - np.asarray(self.lower)) / np.asarray(self.res)

    def axes(self) -> list[np.ndarray]:
        return [lo + (np.arange(r) + 0.5) * h for lo, r, h in zip(self.lower, self.res, self.spacing)]

    def points(self) -> np.ndarray:
        """Cell centers, row-major (last axis fastest), shape ``(prod(res), d)``."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass
class ScalarGrid:
    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.size != int(np.prod(self.spec.res)):
            raise InvalidArgument("grid values length does not match the resolution product")

    @property
    def dim(self) -> int:
        return self.spec.dim

    def array(self) -> np.ndarray:
        return self.values.reshape(self.spec.res)


def shape_grid(shape: Shape, spec: GridSpec) -> ScalarGrid:
    pts = spec.points()
    vals = np.concatenate([shape._sdf(pts[i:i + 65536]) for i in range(0, len(pts), 65536)])
    return ScalarGrid(spec, vals)


_GRID_MAGIC = b"HOTSPOT-GRID"


def save_grid(grid: ScalarGrid, path) -> None:
    header = json.dumps({"version": 1, "lower": list(grid.spec.lower), "upper": list(grid.spec.upper),
                         "res": list(grid.spec.res)}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_GRID_MAGIC + b"\n" + header + b"\n")
        fh.write(grid.values.astype("<f8").tobytes())


def load_grid(path) -> ScalarGrid:
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != _GRID_MAGIC:
            raise ParseError(f"{path}: not a grid file", 1)
        header = json.loads(fh.readline())
        data = np.frombuffer(fh.read(), dtype="<f8").astype(float)
    spec = GridSpec(tuple(header["lower"]), tuple(header["upper"]), tuple(header["res"]))
    return ScalarGrid(spec, data)


# ---------------------------------------------------------------------------
# Level sets
# ---------------------------------------------------------------------------

@dataclass
class LevelSet:
    dim: int
    vertices: np.ndarray
    cells: np.ndarray  # (m, 2) segments or (m, 3) triangles

    @property
    def empty(self) -> bool:
        return len(self.cells) == 0

    def element_measures(self) -> np.ndarray:
        v = self.vertices[self.cells]
        if self.dim == 2:
            return np.linalg.norm(v[:, 1] - v[:, 0], axis=1)
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def total_measure(self) -> float:
        return float(self.element_measures().sum()) if not self.empty else 0.0

    def sample(self, n: int, seed: int = 0) -> np.ndarray:
        """Measure-uniform points on the segments / triangles."""
        if self.empty:
            return np.empty((0, self.dim))
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1E]))
        w = self.element_measures()
        idx = rng.choice(len(w), size=n, p=w / w.sum())
        v = self.vertices[self.cells[idx]]
        if self.dim == 2:
            t = rng.uniform(0, 1, n)[:, None]
            return v[:, 0] + t * (v[:, 1] - v[:, 0])
        r1, r2 = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
        s = np.sqrt(r1)
        return ((1 - s)[:, None] * v[:, 0] + (s * (1 - r2))[:, None] * v[:, 1]
                + (s * r2)[:, None] * v[:, 2])

    def write_text(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# levelset dim={self.dim} vertices={len(self.vertices)} cells={len(self.cells)}\n")
            for v in self.vertices:
                fh.write("v " + " ".join(repr(float(c)) for c in v) + "\n")
            for c in self.cells:
                fh.write("c " + " ".join(str(int(i)) for i in c) + "\n")


def _edge_vertices(keys_a, keys_b, pos_a, pos_b, val_a, val_b, iso):
    """Unique crossing vertices for lattice edges given endpoint node ids, positions and values."""
    lo = np.minimum(keys_a, keys_b)
    hi = np.maximum(keys_a, keys_b)
    key = lo.astype(np.int64) * (np.int64(1) << 32) + hi
    uniq, first, inverse = np.unique(key, return_index=True, return_inverse=True)
    t = (iso - val_a[first]) / (val_b[first] - val_a[first])
    verts = pos_a[first] + t[:, None] * (pos_b[first] - pos_a[first])
    return verts, inverse


def _marching_squares(grid: ScalarGrid, iso: float) -> LevelSet:
    f = grid.array()
    nx, ny = f.shape
    xs, ys = grid.spec.axes()
    inside = f < iso
    # per-cell corner signs: (i,j), (i+1,j), (i+1,j+1), (i,j+1)
    c = [inside[:-1, :-1], inside[1:, :-1], inside[1:, 1:], inside[:-1, 1:]]
    code = c[0] * 1 + c[1] * 2 + c[2] * 4 + c[3] * 8
    ci, cj = np.nonzero((code != 0) & (code != 15))
    if ci.size == 0:
        return LevelSet(2, np.empty((0, 2)), np.empty((0, 2), dtype=np.int64))
    code = code[ci, cj]
    corner_ij = [(ci, cj), (ci + 1, cj), (ci + 1, cj + 1), (ci, cj + 1)]
    node_id = [i * ny + j for i, j in corner_ij]
    node_pos = [np.stack([xs[i], ys[j]], axis=1) for i, j in corner_ij]
    node_val = [f[i, j] for i, j in corner_ij]
    # cell edges e_k joins corner k and k+1
    ka, kb, pa, pb, va, vb, owner, which = [], [], [], [], [], [], [], []
    m = ci.size
    for k in range(4):
        k2 = (k + 1) % 4
        cross = ((code >> k) & 1) != ((code >> k2) & 1)
        sel = np.nonzero(cross)[0]
        ka.append(node_id[k][sel]); kb.append(node_id[k2][sel])
        pa.append(node_pos[k][sel]); pb.append(node_pos[k2][sel])
        va.append(node_val[k][sel]); vb.append(node_val[k2][sel])
        owner.append(sel); which.append(np.full(sel.size, k))
    verts, inv = _edge_vertices(np.concatenate(ka), np.concatenate(kb), np.concatenate(pa),
                                np.concatenate(pb), np.concatenate(va), np.concatenate(vb), iso)
    owner = np.concatenate(owner)
    which = np.concatenate(which)
    edge_vid = np.full((m, 4), -1, dtype=np.int64)
    edge_vid[owner, which] = inv
    segs = []
    # non-saddle cells have exactly two crossed edges
    ncross = (edge_vid >= 0).sum(axis=1)
    two = ncross == 2
    ev = edge_vid[two]
    ordered = np.sort(np.where(ev >= 0, np.arange(4), 99), axis=1)[:, :2]
    rows = np.arange(ev.shape[0])
    segs.append(np.stack([ev[rows, ordered[:, 0]], ev[rows, ordered[:, 1]]], axis=1))
    # saddles: decide by the cell-center average
    four = np.nonzero(ncross == 4)[0]
    if four.size:
        center = sum(v[four] for v in node_val) / 4.0
        ev = edge_vid[four]
        corner0_inside = ((code[four] & 1) == 1)
        center_inside = center < iso
        # if the center agrees with corner 0, corner 0's region connects across the cell
        join = corner0_inside == center_inside
        # join: pair edges (0,1) and (2,3); else pair (3,0) and (1,2)
        s1 = np.where(join[:, None], ev[:, [0, 1]], ev[:, [3, 0]])
        s2 = np.where(join[:, None], ev[:, [2, 3]], ev[:, [1, 2]])
        segs.extend([s1, s2])
    return LevelSet(2, verts, np.concatenate(segs, axis=0))


# Kuhn split of the unit cube into 6 tetrahedra sharing the 0-7 diagonal.
# Corner index bits: x=1, y=2, z=4.
_KUHN_TETS = np.array([
    [0, 1, 3, 7], [0, 1, 5, 7], [0, 2, 3, 7], [0, 2, 6, 7], [0, 4, 5, 7], [0, 4, 6, 7],
])


def _trilinear_root(cube_vals: np.ndarray, a: np.ndarray, b: np.ndarray, iso: float) -> np.ndarray:
    """Parameter t in [0,1] where the trilinear interpolant along corner a->b crosses iso."""
    def corner_xyz(c):
        return np.stack([(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1], axis=1).astype(float)

    pa, pb = corner_xyz(a), corner_xyz(b)

    def interp(t):
        p = pa + t[:, None] * (pb - pa)
        x, y, z = p[:, 0], p[:, 1], p[:, 2]
        out = np.zeros_like(t)
        for c in range(8):
            wx = x if c & 1 else 1 - x
            wy = y if c & 2 else 1 - y
            wz = z if c & 4 else 1 - z
            out += wx * wy * wz * cube_vals[:, c]
        return out - iso

    lo = np.zeros(len(a))
    hi = np.ones(len(a))
    flo = interp(lo)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        fm = interp(mid)
        same = (fm < 0) == (flo < 0)
        lo = np.where(same, mid, lo)
        flo = np.where(same, fm, flo)
        hi = np.where(same, hi, mid)
    fl, fh = interp(lo), interp(hi)
    denom = fh - fl
    t = np.where(denom != 0, lo - fl * (hi - lo) / np.where(denom != 0, denom, 1.0), lo)
    return np.clip(t, lo, hi)


def _marching_tetrahedra(grid: ScalarGrid, iso: float) -> LevelSet:
    f = grid.array()
    nx, ny, nz = f.shape
    axes = grid.spec.axes()
    inside = f < iso
    offs = [((c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1) for c in range(8)]
    corner_in = np.stack([inside[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz] for dx, dy, dz in offs])
    cnt = corner_in.sum(axis=0)
    ci, cj, ck = np.nonzero((cnt > 0) & (cnt < 8))
    if ci.size == 0:
        return LevelSet(3, np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
    cube_vals = np.stack([f[ci + dx, cj + dy, ck + dz] for dx, dy, dz in offs], axis=1)
    cube_ids = np.stack([((ci + dx) * ny + (cj + dy)) * nz + (ck + dz) for dx, dy, dz in offs], axis=1)
    origin = np.stack([axes[0][ci], axes[1][cj], axes[2][ck]], axis=1)
    h = grid.spec.spacing
    ncube = ci.size

    tets = np.tile(_KUHN_TETS, (ncube, 1))                    # (6m, 4) local corners
    tcube = np.repeat(np.arange(ncube), 6)
    tv = cube_vals[tcube[:, None], tets]                        # (6m, 4)
    tin = tv < iso
    ntin = tin.sum(axis=1)
    active = (ntin > 0) & (ntin < 4)
    tets, tcube, tv, tin, ntin = tets[active], tcube[active], tv[active], tin[active], ntin[active]

    # collect crossing edges of every active tet
    pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    ea, eb, eowner, eslot = [], [], [], []
    for s, (p, q) in enumerate(pairs):
        sel = np.nonzero(tin[:, p] != tin[:, q])[0]
        ea.append(tets[sel, p]); eb.append(tets[sel, q])
        eowner.append(sel); eslot.append(np.full(sel.size, s))
    ea, eb = np.concatenate(ea), np.concatenate(eb)
    eowner, eslot = np.concatenate(eowner), np.concatenate(eslot)
    ecube = tcube[eowner]
    gid_a = cube_ids[ecube, ea]
    gid_b = cube_ids[ecube, eb]
    lo_id = np.minimum(gid_a, gid_b)
    hi_id = np.maximum(gid_a, gid_b)
    key = lo_id * np.int64(nx * ny * nz) + hi_id
    uniq, first, inv = np.unique(key, return_index=True, return_inverse=True)

    fa, fb = ea[first], eb[first]
    fc = ecube[first]
    va = cube_vals[fc, fa]
    vb = cube_vals[fc, fb]
    axis_edge = np.isin(fa ^ fb, (1, 2, 4))
    t = np.empty(len(first))
    t[axis_edge] = (iso - va[axis_edge]) / (vb[axis_edge] - va[axis_edge])
    diag = ~axis_edge
    if diag.any():
        t[diag] = _trilinear_root(cube_vals[fc[diag]], fa[diag], fb[diag], iso)

    def corner_pos(c, cube):
        off = np.stack([(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1], axis=1) * h
        return origin[cube] + off

    pa, pb = corner_pos(fa, fc), corner_pos(fb, fc)
    verts = pa + t[:, None] * (pb - pa)

    slot_vid = np.full((len(tets), 6), -1, dtype=np.int64)
    slot_vid[eowner, eslot] = inv

    tris = []
    # single isolated corner (1 in or 3 in): triangle from its three edges
    for corner in range(4):
        odd = ((ntin == 1) & tin[:, corner]) | ((ntin == 3) & ~tin[:, corner])
        if not odd.any():
            continue
        slots = [s for s, pq in enumerate(pairs) if corner in pq]
        tris.append(slot_vid[odd][:, slots])
    # two in, two out: quad split into two triangles
    two = np.nonzero(ntin == 2)[0]
    if two.size:
        sv = slot_vid[two]
        t_in = tin[two]
        mate = np.where(t_in[:, 0], np.argmax(t_in[:, 1:], axis=1) + 1,
                        np.argmin(t_in[:, 1:], axis=1) + 1)  # corner sharing a side with corner 0
        # mate=1 -> edges 01, 23 uncrossed; crossing cycle 02,03,13,12 -> slots 1,2,4,3
        order = np.where(mate[:, None] == 1, np.array([1, 2, 4, 3]),
                         np.where(mate[:, None] == 2, np.array([0, 2, 5, 3]), np.array([0, 1, 5, 4])))
        q = np.take_along_axis(sv, order, axis=1)
        tris.append(q[:, [0, 1, 2]])
        tris.append(q[:, [0, 2, 3]])
    cells = np.concatenate(tris, axis=0) if tris else np.empty((0, 3), dtype=np.int64)
    return LevelSet(3, verts, cells)


def extract_level_set(grid: ScalarGrid, iso: float = 0.0) -> LevelSet:
    """Piecewise-linear ``iso`` crossing of a sampled field (marching squares / tetrahedra).

    Nodes with value exactly ``iso`` count as outside. In 3D, vertices on cube
    diagonals are placed on the zero of the trilinear interpolant.
    """
    if grid.dim == 1:
        raise Unsupported("level-set extraction needs a 2D or 3D grid")
    if any(r < 2 for r in grid.spec.res):
        raise InvalidArgument("level-set extraction needs at least 2 samples per axis")
    if grid.dim == 2:
        return _marching_squares(grid, iso)
    if grid.dim == 3:
        return _marching_tetrahedra(grid, iso)
    raise Unsupported(f"dimension {grid.dim} not supported")


def interpolate_grid(grid: ScalarGrid, pts: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of the cell-center samples at ``pts``."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    f = grid.array()
    h = grid.spec.spacing
    lower = np.asarray(grid.spec.lower) + 0.5 * h
    u = (pts - lower) / h
    base = np.clip(np.floor(u).astype(int), 0, np.asarray(grid.spec.res) - 2)
    frac = u - base
    out = np.zeros(len(pts))
    d = grid.dim
    for corner in range(1 << d):
        bits = [(corner >> k) & 1 for k in range(d)]
        w = np.ones(len(pts))
        idx = []
        for k, b in enumerate(bits):
            w = w * (frac[:, k] if b else 1 - frac[:, k])
            idx.append(base[:, k] + b)
        out += w * f[tuple(idx)]
    return out
