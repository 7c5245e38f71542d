"""Metrics against ground truth, sphere tracing, and image output."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import InvalidArgument
from .field import NeuralField
from .geometry import GridSpec, ScalarGrid, Shape, extract_level_set, sample_boundary, shape_grid

SMAPE_DELTA = 1e-8
NEAR_THRESHOLD = 0.1


def default_grid(dim: int, res: int | None = None) -> GridSpec:
    """Evaluation grids: [-1.2, 1.2]^2 at 256^2, [-1, 1]^3 at 128^3."""
    if dim == 2:
        return GridSpec.cube(2, res or 256, -1.2, 1.2)
    if dim == 3:
        return GridSpec.cube(3, res or 128, -1.0, 1.0)
    return GridSpec.cube(dim, res or 1001, -1.0, 1.0)


def grid_eval(fld: NeuralField, spec: GridSpec, threads: int | None = None) -> ScalarGrid:
    if spec.dim != fld.arch.in_dim:
        raise InvalidArgument("grid dimension does not match the field input")
    return ScalarGrid(spec, fld.forward(spec.points(), threads=threads))


def _same_spec(a: ScalarGrid, b: ScalarGrid):
    if a.spec != b.spec:
        raise InvalidArgument("grids have different specifications")


def iou(pred: ScalarGrid, gt: ScalarGrid) -> float:
    """Intersection over union of the cells with negative value."""
    _same_spec(pred, gt)
    a = pred.values < 0
    b = gt.values < 0
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def nearest_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from every point of ``a`` to its nearest neighbour in ``b`` (k-d tree)."""
    from scipy.spatial import cKDTree
    return cKDTree(b).query(a)[0]


def chamfer_hausdorff(a, b, one_sided: bool = False) -> tuple[float, float]:
    """Chamfer (mean of the two mean nearest distances) and Hausdorff distances.

    With ``one_sided`` only the a -> b direction is used.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise InvalidArgument("point sets must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise InvalidArgument("point sets differ in dimension")
    ab = nearest_distances(a, b)
    if one_sided:
        return float(ab.mean()), float(ab.max())
    ba = nearest_distances(b, a)
    return 0.5 * (float(ab.mean()) + float(ba.mean())), max(float(ab.max()), float(ba.max()))


@dataclass(frozen=True)
class DistanceErrors:
    rmse: float
    mae: float
    smape: float


def _errors(p: np.ndarray, g: np.ndarray) -> DistanceErrors:
    diff = np.abs(p - g)
    smape = np.mean(diff / ((np.abs(p) + np.abs(g)) / 2.0 + SMAPE_DELTA))
    return DistanceErrors(float(np.sqrt(np.mean(diff * diff))), float(diff.mean()), float(smape))


def sdf_metrics(pred: ScalarGrid, gt: ScalarGrid, near_threshold: float = NEAR_THRESHOLD
                ) -> tuple[DistanceErrors, DistanceErrors | None]:
    """Full-grid errors and errors restricted to |gt| < near_threshold (None if that set is empty)."""
    _same_spec(pred, gt)
    full = _errors(pred.values, gt.values)
    near = np.abs(gt.values) < near_threshold
    return full, (_errors(pred.values[near], gt.values[near]) if near.any() else None)


@dataclass
class MetricsReport:
    iou: float
    chamfer: float
    hausdorff: float
    rmse: float
    mae: float
    smape: float
    rmse_near: float | None = None
    mae_near: float | None = None
    smape_near: float | None = None
    grid_res: int | None = None
    trace: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "trace"}
        out.update(self.trace)
        return out

    def summary_line(self) -> str:
        parts = []
        for key, val in self.as_dict().items():
            if val is None:
                parts.append(f"{key}=absent")
            elif isinstance(val, (int, np.integer)):
                parts.append(f"{key}={int(val)}")
            else:
                parts.append(f"{key}={float(val):.9g}")
        return " ".join(parts)


def level_set_samples(grid: ScalarGrid, n: int, seed: int = 0) -> np.ndarray:
    return extract_level_set(grid).sample(n, seed)


def compare_grids(pred: ScalarGrid, gt: ScalarGrid, reference: np.ndarray | None = None,
                  n_samples: int = 10_000, seed: int = 0) -> MetricsReport:
    """Metrics of a predicted grid against a ground-truth grid.

    Chamfer/Hausdorff use area-uniform samples of the predicted zero level set
    against ``reference`` (default: samples of the ground-truth zero level set);
    an empty level set yields infinite distances.
    """
    full, near = sdf_metrics(pred, gt)
    if reference is None:
        reference = level_set_samples(gt, n_samples, seed)
    pts = level_set_samples(pred, n_samples, seed)
    if len(pts) == 0 or len(reference) == 0:
        ch = hd = math.inf
    else:
        ch, hd = chamfer_hausdorff(pts, reference)
    return MetricsReport(
        iou=iou(pred, gt), chamfer=ch, hausdorff=hd, rmse=full.rmse, mae=full.mae, smape=full.smape,
        rmse_near=near.rmse if near else None, mae_near=near.mae if near else None,
        smape_near=near.smape if near else None, grid_res=pred.spec.res[0])


def evaluate_field(fld: NeuralField, shape: Shape, spec: GridSpec | None = None, n_samples: int = 10_000,
                   seed: int = 0, threads: int | None = None, pred_grid: ScalarGrid | None = None
                   ) -> MetricsReport:
    """Compare a field with an analytic shape, using exact boundary samples as the reference."""
    spec = spec or default_grid(shape.dim)
    pred = pred_grid if pred_grid is not None else grid_eval(fld, spec, threads)
    ref = sample_boundary(shape, n_samples, seed).points
    return compare_grids(pred, shape_grid(shape, spec), ref, n_samples, seed)


# ---------------------------------------------------------------------------
# Sphere tracing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Camera:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    fov_deg: float = 60.0
    width: int = 500
    height: int = 500

    def __post_init__(self):
        if np.allclose(self.position, self.look_at):
            raise InvalidArgument("camera position equals its look-at point")
        if self.width < 1 or self.height < 1:
            raise InvalidArgument("resolution must be at least 1x1")
        if not 0 < self.fov_deg < 180:
            raise InvalidArgument("field of view must be in (0, 180) degrees")

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Origin (3,) and unit directions (height * width, 3), row-major from the top-left pixel."""
        eye = np.asarray(self.position, dtype=float)
        fwd = np.asarray(self.look_at, dtype=float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, dtype=float))
        if np.linalg.norm(right) < 1e-12:
            raise InvalidArgument("up vector is parallel to the viewing direction")
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        half = math.tan(math.radians(self.fov_deg) / 2.0)
        aspect = self.width / self.height
        xs = ((np.arange(self.width) + 0.5) / self.width * 2.0 - 1.0) * half * aspect
        ys = (1.0 - (np.arange(self.height) + 0.5) / self.height * 2.0) * half
        px, py = np.meshgrid(xs, ys)
        dirs = fwd[None, :] + px.ravel()[:, None] * right[None, :] + py.ravel()[:, None] * up[None, :]
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return eye, dirs


def camera_ring(count: int = 10, radius: float = 1.0, elevation: float = 0.5, **kwargs) -> list[Camera]:
    """Cameras evenly spaced on a horizontal circle at height ``elevation``, all looking at the origin."""
    cams = []
    for k in range(count):
        phi = 2.0 * math.pi * k / count
        cams.append(Camera((radius * math.cos(phi), elevation, radius * math.sin(phi)), **kwargs))
    return cams


@dataclass
class TraceResult:
    width: int
    height: int
    max_steps: int
    iterations: np.ndarray  # (h*w,) int
    hit: np.ndarray         # (h*w,) bool
    depth: np.ndarray       # (h*w,) distance from the eye along the ray, nan where missed
    normal: np.ndarray      # (h*w, 3), zeros where missed
    min_visited: np.ndarray  # (h*w,) smallest field value seen along the ray

    def stats(self) -> dict:
        it = self.iterations[self.hit]
        if it.size == 0:
            return {"trace_hit_ratio": 0.0, "trace_mean_iters": math.nan,
                    "trace_median_iters": math.nan, "trace_max_iters": 0}
        return {"trace_hit_ratio": float(self.hit.mean()), "trace_mean_iters": float(it.mean()),
                "trace_median_iters": float(np.median(it)), "trace_max_iters": int(it.max())}


def _unit_sphere_span(eye, dirs):
    """Entry/exit ray parameters for the unit sphere; nan where the ray misses it."""
    b = dirs @ eye
    c = float(eye @ eye) - 1.0
    disc = b * b - c
    with np.errstate(invalid="ignore"):
        s = np.sqrt(disc)
    t0 = np.where(disc >= 0, -b - s, np.nan)
    t1 = np.where(disc >= 0, -b + s, np.nan)
    return np.maximum(t0, 0.0), t1


def sphere_trace(sdf, camera: Camera, max_steps: int = 30, threshold: float = 5e-5) -> TraceResult:
    """March every pixel ray by the field value.

    ``sdf`` is a NeuralField (3D) or any callable mapping (n, 3) points to values.
    Rays start where they enter the unit sphere. A ray stops on |u| < threshold
    (hit), on leaving the unit sphere (miss), or after ``max_steps`` field
    evaluations (miss). Normals are normalised field gradients at the hit point.
    """
    if isinstance(sdf, NeuralField):
        if sdf.arch.in_dim != 3:
            raise InvalidArgument("sphere tracing needs a 3D field")
        value_fn = sdf.forward
    else:
        value_fn = sdf
    eye, dirs = camera.rays()
    n = len(dirs)
    t_enter, t_exit = _unit_sphere_span(eye, dirs)
    t = np.where(np.isnan(t_enter), 0.0, t_enter)
    active = ~np.isnan(t_enter)
    iters = np.zeros(n, dtype=int)
    hit = np.zeros(n, dtype=bool)
    min_seen = np.full(n, np.inf)
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        p = eye[None, :] + t[idx, None] * dirs[idx]
        u = np.asarray(value_fn(p), dtype=float)
        iters[idx] += 1
        min_seen[idx] = np.minimum(min_seen[idx], u)
        done = np.abs(u) < threshold
        hit[idx[done]] = True
        active[idx[done]] = False
        go = idx[~done]
        t[go] += u[~done]
        # left the unit sphere through its far side, or backed out through the near side
        out = (t[go] > t_exit[go]) | (t[go] < t_enter[go] - threshold)
        active[go[out]] = False
    depth = np.where(hit, t, np.nan)
    normal = np.zeros((n, 3))
    if hit.any():
        p = eye[None, :] + t[hit, None] * dirs[hit]
        g = _gradient(sdf, value_fn, p)
        normal[hit] = g / np.linalg.norm(g, axis=1, keepdims=True)
    return TraceResult(camera.width, camera.height, max_steps, iters, hit, depth, normal, min_seen)


def _gradient(sdf, value_fn, p, h: float = 1e-6):
    if isinstance(sdf, NeuralField):
        return sdf.forward_with_grad(p).grad
    if hasattr(sdf, "gradient"):
        return sdf.gradient(p)
    g = np.empty_like(p)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[:, k] = (value_fn(p + e) - value_fn(p - e)) / (2 * h)
    return g


def ray_sphere_depth(camera: Camera, center, radius: float) -> np.ndarray:
    """Analytic first intersection of every pixel ray with a sphere (nan on miss)."""
    eye, dirs = camera.rays()
    oc = eye - np.asarray(center, dtype=float)
    b = dirs @ oc
    c = float(oc @ oc) - radius * radius
    disc = b * b - c
    with np.errstate(invalid="ignore"):
        t = -b - np.sqrt(disc)
    return np.where((disc >= 0) & (t > 0), t, np.nan)


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6 image from an (h, w, 3) uint8 array."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise InvalidArgument("image must have shape (height, width, 3)")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise InvalidArgument(f"{path} is not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise InvalidArgument("only 8-bit PPM images are supported")
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def heatmap_rgb(values: np.ndarray, scale: float | None = None, contour: bool = True) -> np.ndarray:
    """Diverging map: white at zero, red for positive, blue for negative, black zero contour.

    ``values`` is indexed (x, y); the image has y increasing upwards.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim != 2:
        raise InvalidArgument("heatmap needs a 2D array")
    img_v = v.T[::-1]  # rows = y descending, columns = x
    top = float(np.max(np.abs(img_v))) if scale is None else float(scale)
    a = np.clip(np.abs(img_v) / top, 0.0, 1.0) if top > 0 else np.zeros_like(img_v)
    fade = np.rint(255.0 * (1.0 - a)).astype(np.uint8)
    full = np.full_like(fade, 255)
    pos = img_v > 0
    r = np.where(pos, full, fade)
    b = np.where(pos, fade, full)
    rgb = np.stack([r, fade, b], axis=-1)
    if contour:
        s = np.sign(img_v)
        edge = np.zeros(img_v.shape, dtype=bool)
        cross_x = s[:, 1:] * s[:, :-1] < 0
        cross_y = s[1:, :] * s[:-1, :] < 0
        edge[:, 1:] |= cross_x
        edge[:, :-1] |= cross_x
        edge[1:, :] |= cross_y
        edge[:-1, :] |= cross_y
        rgb[edge] = 0
    return rgb


def iteration_rgb(trace: TraceResult) -> np.ndarray:
    g = np.rint(255.0 * trace.iterations / trace.max_steps).astype(np.uint8)
    return np.repeat(g.reshape(trace.height, trace.width, 1), 3, axis=2)


def depth_rgb(trace: TraceResult) -> np.ndarray:
    d = trace.depth
    out = np.zeros(d.shape, dtype=np.uint8)
    if trace.hit.any():
        lo, hi = np.nanmin(d), np.nanmax(d)
        span = hi - lo if hi > lo else 1.0
        out[trace.hit] = np.rint(255.0 * (1.0 - (d[trace.hit] - lo) / span * 0.8)).astype(np.uint8)
    return np.repeat(out.reshape(trace.height, trace.width, 1), 3, axis=2)


def normal_rgb(trace: TraceResult) -> np.ndarray:
    rgb = np.where(trace.hit[:, None], np.rint((trace.normal + 1.0) * 127.5), 0).astype(np.uint8)
    return rgb.reshape(trace.height, trace.width, 3)


def iteration_histogram(trace: TraceResult) -> np.ndarray:
    return np.bincount(trace.iterations, minlength=trace.max_steps + 1)


RENDER_KINDS = ("sdf_heatmap", "iteration_map", "depth_map", "normal_map", "iteration_histogram_csv")


def render_outputs(payload, kind: str, path) -> None:
    if kind not in RENDER_KINDS:
        raise InvalidArgument(f"unknown output kind {kind!r}; choose from {', '.join(RENDER_KINDS)}")
    if kind == "sdf_heatmap":
        if not isinstance(payload, ScalarGrid):
            raise InvalidArgument("sdf_heatmap needs a ScalarGrid")
        arr = payload.array()
        if arr.ndim == 3:
            arr = arr[:, :, arr.shape[2] // 2]
        if arr.ndim != 2:
            raise InvalidArgument("sdf_heatmap needs a 2D or 3D grid")
        write_ppm(path, heatmap_rgb(arr))
        return
    if not isinstance(payload, TraceResult):
        raise InvalidArgument(f"{kind} needs a TraceResult")
    if kind == "iteration_map":
        write_ppm(path, iteration_rgb(payload))
    elif kind == "depth_map":
        write_ppm(path, depth_rgb(payload))
    elif kind == "normal_map":
        write_ppm(path, normal_rgb(payload))
    else:
        counts = iteration_histogram(payload)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iterations", "pixels", "hit_pixels"])
            hits = np.bincount(payload.iterations[payload.hit], minlength=payload.max_steps + 1)
            for k, (c, hc) in enumerate(zip(counts, hits)):
                w.writerow([k, int(c), int(hc)])
