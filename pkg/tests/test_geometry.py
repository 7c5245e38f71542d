import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from hotspot.errors import InvalidArgument, ParseError
from hotspot.geometry import (Circle, GridSpec, PointCloud, ScalarGrid, Sphere, Torus, extract_level_set,
                              interpolate_grid, load_cloud, load_grid, make_shape, normalize_cloud, rectangle,
                              sample_boundary, save_cloud, save_grid, shape_grid, signed_distance_oracle, square)

ALL_SHAPES = ["circle", "square", "rings", "star", "two_circles", "sphere", "torus"]


def brute_polygon_distance(vertices, x, per_edge):
    """Min distance to dense edge subsamples, sign from a ray-casting parity test."""
    v = np.asarray(vertices, dtype=float)
    pts = []
    for a, b in zip(v, np.roll(v, -1, axis=0)):
        t = np.linspace(0.0, 1.0, per_edge)[:, None]
        pts.append(a + t * (b - a))
    pts = np.concatenate(pts)
    d = np.sqrt(((x[:, None, :] - pts[None]) ** 2).sum(axis=2)).min(axis=1)
    inside = np.zeros(len(x), bool)
    for a, b in zip(v, np.roll(v, -1, axis=0)):
        crosses = (a[1] > x[:, 1]) != (b[1] > x[:, 1])
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = a[0] + (x[:, 1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
        inside ^= crosses & (x[:, 0] < xint)
    return np.where(inside, -d, d)


def test_circle_center_value():
    assert Circle((0.0, 0.0), 0.5).sdf([0.0, 0.0]) == -0.5


def test_sphere_radial_value():
    assert Sphere((0.0, 0.0, 0.0), 0.5).sdf([2.0, 0.0, 0.0]) == 1.5


def test_torus_values():
    t = Torus((0.0, 0.0, 0.0), 0.35, 0.12)
    assert t.sdf([0.35, 0.0, 0.0]) == pytest.approx(-0.12)
    assert t.sdf([0.0, 0.0, 0.0]) == pytest.approx(0.23)


def test_square_matches_brute_force_edge_sampling():
    sq = square(0.5)
    x = np.random.default_rng(1).uniform(-1.0, 1.0, (200, 2))
    ref = brute_polygon_distance(sq.vertices, x, 25_000)
    assert np.max(np.abs(sq.sdf(x) - ref)) < 1e-4


def test_star_matches_brute_force_edge_sampling():
    star = make_shape("star")
    x = np.random.default_rng(2).uniform(-1.0, 1.0, (200, 2))
    ref = brute_polygon_distance(star.vertices, x, 10_000)
    assert np.max(np.abs(star.sdf(x) - ref)) < 1e-4


def test_rings_sign_convention():
    rings = make_shape("rings")
    assert rings.sdf([0.45, 0.0]) < 0
    assert rings.sdf([0.0, 0.0]) == pytest.approx(0.3)
    assert rings.sdf([1.0, 0.0]) == pytest.approx(0.4)


def test_unknown_shape_lists_choices():
    with pytest.raises(InvalidArgument, match="circle"):
        make_shape("blob")


def test_empty_sample():
    assert len(sample_boundary(Circle((0.0, 0.0), 0.5), 0, 0)) == 0


def test_four_circle_samples_on_radius():
    pts = sample_boundary(Circle((0.0, 0.0), 0.5), 4, 3).points
    assert len(pts) == 4
    assert np.all(np.abs(np.linalg.norm(pts, axis=1) - 0.5) < 1e-12)


def test_rectangle_edge_counts_proportional_to_length():
    rect = rectangle(1.0, 3.0)
    pts = sample_boundary(rect, 10_000, 0).points
    w, h = 0.5, 1.5
    bottom = np.abs(pts[:, 1] + h) < 1e-9
    top = np.abs(pts[:, 1] - h) < 1e-9
    left = np.abs(pts[:, 0] + w) < 1e-9
    right = np.abs(pts[:, 0] - w) < 1e-9
    counts = np.array([bottom.sum(), top.sum(), left.sum(), right.sum()])
    assert counts.sum() == 10_000
    expected = 10_000 * np.array([1.0, 1.0, 3.0, 3.0]) / 8.0
    assert chisquare(counts, expected).pvalue > 0.01


@pytest.mark.parametrize("name,split", [("rings", lambda p: np.linalg.norm(p, axis=1) < 0.45),
                                        ("two_circles", lambda p: p[:, 0] < 0)])
def test_composite_samples_split_by_boundary_length(name, split):
    shape = make_shape(name)
    pts = sample_boundary(shape, 6000, 0).points
    first = int(split(pts).sum())
    lengths = [c.boundary_measure() for c in (shape.children if name == "two_circles" else (shape.b, shape.a))]
    expected = 6000 * np.array(lengths) / sum(lengths)
    assert chisquare([first, 6000 - first], expected).pvalue > 0.01


def test_sampling_is_deterministic():
    a = sample_boundary(make_shape("star"), 500, 7).points
    b = sample_boundary(make_shape("star"), 500, 7).points
    assert np.array_equal(a, b)


def test_normalize_unit_sphere_cloud():
    p = np.random.default_rng(0).standard_normal((500, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    cloud = normalize_cloud(PointCloud(np.concatenate([p, -p])))  # antipodal pairs: centroid at 0
    assert cloud.scale == pytest.approx(0.45, rel=1e-12)
    assert np.allclose(np.linalg.norm(cloud.points, axis=1), 0.45, atol=1e-12)


def test_normalize_constant_norm_cloud_scale():
    ang = np.linspace(0, 2 * np.pi, 400, endpoint=False)
    p = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    cloud = normalize_cloud(PointCloud(p))
    assert cloud.scale == pytest.approx(0.45, rel=1e-12)
    assert np.allclose(np.linalg.norm(cloud.points, axis=1), 0.45, atol=1e-12)


def test_normalize_quantile_rank():
    p = np.random.default_rng(3).standard_normal((10_000, 2)) * 2.0 + 0.3
    cloud = normalize_cloud(PointCloud(p))
    assert np.count_nonzero(np.linalg.norm(cloud.points, axis=1) <= 0.45 + 1e-9) == math.ceil(0.7 * 10_000)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
def test_normalize_round_trip(seed, spread, shift):
    p = np.random.default_rng(seed).standard_normal((50, 3)) * spread + shift
    cloud = normalize_cloud(PointCloud(p))
    assert np.allclose(cloud.to_source(cloud.points), p, atol=1e-12 * max(1.0, abs(shift) + spread))


def test_cloud_file_parse(tmp_path):
    path = tmp_path / "c.xyz"
    path.write_text("0 0\n1 0\n")
    cloud = load_cloud(path)
    assert cloud.points.shape == (2, 2)


def test_cloud_file_bad_line(tmp_path):
    path = tmp_path / "c.xyz"
    path.write_text("a b\n")
    with pytest.raises(ParseError, match="line 1") as info:
        load_cloud(path)
    assert info.value.line == 1


def test_cloud_round_trip_bitwise(tmp_path):
    p = np.random.default_rng(0).standard_normal((100, 3))
    cloud = normalize_cloud(PointCloud(p))
    save_cloud(cloud, tmp_path / "c.xyz")
    back = load_cloud(tmp_path / "c.xyz")
    assert np.array_equal(back.points, cloud.points)
    assert back.scale == cloud.scale and np.array_equal(back.offset, cloud.offset)


def test_grid_round_trip(tmp_path):
    spec = GridSpec.cube(2, 16, -1.0, 1.0)
    g = shape_grid(make_shape("circle"), spec)
    save_grid(g, tmp_path / "g.bin")
    back = load_grid(tmp_path / "g.bin")
    assert back.spec == spec and np.array_equal(back.values, g.values)


def test_positive_grid_gives_empty_level_set():
    g = ScalarGrid(GridSpec.cube(2, 8), np.ones(64))
    assert extract_level_set(g).empty


def test_circle_perimeter_from_level_set():
    g = shape_grid(make_shape("circle"), GridSpec.cube(2, 256, -1.0, 1.0))
    assert extract_level_set(g).total_measure() == pytest.approx(2 * math.pi * 0.5, rel=0.01)


def test_sphere_area_from_level_set():
    g = shape_grid(make_shape("sphere"), GridSpec.cube(3, 128, -1.0, 1.0))
    assert extract_level_set(g).total_measure() == pytest.approx(4 * math.pi * 0.25, rel=0.03)


@pytest.mark.parametrize("name", ["circle", "star", "rings"])
def test_level_set_vertices_on_bilinear_zero(name):
    g = shape_grid(make_shape(name), GridSpec.cube(2, 64, -1.0, 1.0))
    ls = extract_level_set(g)
    assert np.max(np.abs(interpolate_grid(g, ls.vertices))) < 1e-9


def test_level_set_vertices_on_trilinear_zero():
    g = shape_grid(make_shape("torus"), GridSpec.cube(3, 32, -0.6, 0.6))
    ls = extract_level_set(g)
    assert not ls.empty
    assert np.max(np.abs(interpolate_grid(g, ls.vertices))) < 1e-9


@pytest.mark.parametrize("name", ALL_SHAPES)
def test_boundary_samples_have_zero_distance(name):
    shape = make_shape(name)
    pts = sample_boundary(shape, 2000, 0).points
    assert np.max(np.abs(signed_distance_oracle(shape, pts))) < 1e-10


@pytest.mark.parametrize("name", ALL_SHAPES)
@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_distance_is_one_lipschitz(name, seed):
    shape = make_shape(name)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.2, 1.2, (200, shape.dim))
    y = rng.uniform(-1.2, 1.2, (200, shape.dim))
    lhs = np.abs(shape.sdf(x) - shape.sdf(y))
    assert np.all(lhs <= np.linalg.norm(x - y, axis=1) + 1e-12)


def test_level_set_sampling_lies_on_segments():
    g = shape_grid(make_shape("circle"), GridSpec.cube(2, 128, -1.0, 1.0))
    pts = extract_level_set(g).sample(1000, 0)
    assert np.max(np.abs(np.linalg.norm(pts, axis=1) - 0.5)) < 1e-3
