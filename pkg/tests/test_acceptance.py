"""End-to-end acceptance checks, one test per criterion, each within its wall-clock budget."""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from hotspot.evaluation import camera_ring, evaluate_field, ray_sphere_depth, sphere_trace
from hotspot.geometry import make_shape, sample_boundary
from hotspot.losses import (area_bound, area_loss, heat_loss, occupancy_from_distance, phase_log_transform,
                            sample_volume)
from hotspot.trainer import Demo1DConfig, default_config, demo_1d, demo_max_error, demo_train_config, fit_profile, \
    pseudo_sdf_1d, train
from hotspot.validation import (bound_sweep, fd_convergence_ratios, gradient_fd_error, lambda_ratios,
                                radial_error_3d, random_architectures, suite_closed_forms, suite_stability,
                                violation_detected)


class Clock:
    def __init__(self):
        self.start = time.perf_counter()

    @property
    def seconds(self) -> float:
        return time.perf_counter() - self.start


def finish(record, number, passed, detail, clock, budget):
    on_time = clock.seconds < budget
    record(number, passed and on_time, f"{detail}  time={clock.seconds:.1f}s (budget {budget:.0f}s)")
    assert passed, detail
    assert on_time, f"took {clock.seconds:.1f}s, budget {budget:.0f}s"


def test_criterion_01_autodiff(record):
    clock = Clock()
    archs = random_architectures(20, seed=0)
    assert {a.in_dim for a in archs} == {2, 3} and all(3 <= a.layers <= 5 and a.width <= 64 for a in archs)
    worst = max(gradient_fd_error(arch, seed) for seed, arch in enumerate(archs))
    finish(record, 1, worst < 1e-4, f"worst relative gradient error {worst:.3g} (< 1e-4) over 20 nets", clock, 120)


def test_criterion_02_closed_forms(record):
    clock = Clock()
    checks = {c.name: c for c in suite_closed_forms()}
    err2d = checks["2D grid solve vs point source"].measured
    err3d = radial_error_3d()
    ratios = fd_convergence_ratios()
    passed = err2d < 0.02 and err3d < 0.005 and all(3.0 <= r <= 5.0 for r in ratios)
    detail = f"2D error {err2d:.3g} (< 0.02), 3D error {err3d:.3g} (< 0.005), halving ratios {np.round(ratios, 3)}"
    finish(record, 2, passed, detail, clock, 180)


def test_criterion_03_distance_bounds(record):
    clock = Clock()
    ok, total = bound_sweep(configs=100, queries=100, eps=0.01, seed=0)[:2]
    flagged = violation_detected()
    finish(record, 3, ok == total == 100 and flagged,
           f"{ok}/{total} configurations within bounds, violation flagged={flagged}", clock, 120)


def test_criterion_04_lambda_convergence(record):
    clock = Clock()
    ratios = np.asarray(lambda_ratios(seed=0))
    passed = bool(np.all((ratios >= 0.4) & (ratios <= 0.6)))
    finish(record, 4, passed, f"error ratios under lambda doubling in [{ratios.min():.3f}, {ratios.max():.3f}]",
           clock, 60)


def test_criterion_05_temporal_stability(record):
    clock = Clock()
    checks = suite_stability()
    failed = [c.name for c in checks if not c.passed]
    finish(record, 5, not failed, f"{len(checks) - len(failed)}/{len(checks)} stability checks", clock, 30)


def test_criterion_06_one_dimensional_demo(record):
    clock = Clock()
    config = Demo1DConfig()
    heat_ok = heat_wins = 0
    for seed in range(10):
        # both modes start from the same adversarial profile
        arch = demo_train_config("with_heat", seed, config).arch
        init = fit_profile(arch, pseudo_sdf_1d, seed, config.fit_steps, half=config.box_half)
        with_heat = demo_max_error(demo_1d("with_heat", seed, config, init=init)[0])
        eikonal = demo_max_error(demo_1d("eikonal_only", seed, config, init=init)[0])
        heat_ok += with_heat < 0.05
        heat_wins += with_heat < eikonal
    finish(record, 6, heat_ok >= 8 and heat_wins >= 9,
           f"with_heat error < 0.05 on {heat_ok}/10 seeds (>= 8), beats eikonal_only on {heat_wins}/10 (>= 9)",
           clock, 300)


@pytest.mark.slow
def test_criterion_07_two_dimensional_suite(record):
    clock = Clock()
    rows = []
    for name in ("circle", "square", "rings", "star"):
        shape = make_shape(name)
        fld, _ = train(sample_boundary(shape, 10_000, 0), default_config(2, iterations=20_000, threads=1))
        rows.append(evaluate_field(fld, shape))
    mean_iou = float(np.mean([r.iou for r in rows]))
    mean_chamfer = float(np.mean([r.chamfer for r in rows]))
    mean_smape = float(np.mean([r.smape for r in rows]))
    passed = mean_iou >= 0.97 and mean_chamfer <= 0.004 and mean_smape <= 0.12
    detail = (f"mean IoU {mean_iou:.4f} (>= 0.97), Chamfer {mean_chamfer:.5f} (<= 0.004), "
              f"SMAPE {mean_smape:.4f} (<= 0.12)")
    finish(record, 7, passed, detail, clock, 2400)


@pytest.mark.slow
def test_criterion_08_analytic_3d(record):
    clock = Clock()
    fields = {}
    ious = {}
    for name in ("sphere", "torus"):
        shape = make_shape(name)
        fld, _ = train(sample_boundary(shape, 20_000, 0), default_config(3, iterations=20_000, threads=1))
        fields[name] = fld
        ious[name] = evaluate_field(fld, shape, n_samples=2000).iou
    hit_iters, depth_errors = [], []
    for cam in camera_ring(10):
        res = sphere_trace(fields["sphere"], cam)
        exact = ray_sphere_depth(cam, (0.0, 0.0, 0.0), 0.5)
        hit_iters.append(res.iterations[res.hit])
        depth_errors.append(np.abs(res.depth[res.hit] - exact[res.hit]))
    iters = np.concatenate(hit_iters)
    errors = np.nan_to_num(np.concatenate(depth_errors), nan=np.inf)
    mean_iters = float(iters.mean())
    good_depth = float(np.mean(errors < 5e-3))
    passed = min(ious.values()) >= 0.95 and mean_iters <= 12 and good_depth >= 0.99
    detail = (f"IoU sphere {ious['sphere']:.4f} torus {ious['torus']:.4f} (>= 0.95), mean trace iterations "
              f"{mean_iters:.2f} (<= 12), depth error < 5e-3 on {100 * good_depth:.2f}% of hits (>= 99%)")
    finish(record, 8, passed, detail, clock, 3600)


def test_criterion_09_phase_relation(record):
    clock = Clock()
    anchor = phase_log_transform(1 - math.exp(-20.0), 0.01)
    cap = phase_log_transform(1.0, 0.01, clamp=0.99)
    u = np.linspace(-0.3, 0.3, 101)
    round_trip = float(np.max(np.abs(phase_log_transform(occupancy_from_distance(u, 0.01), 0.01) - u)))
    transform_ok = abs(anchor - 2.0) < 1e-6 and abs(cap - 0.4605) < 1e-4 and round_trip < 1e-9
    rng = np.random.default_rng(0)
    lower, upper = np.full(2, -1.5), np.full(2, 1.5)
    volume = 9.0
    violations = 0
    for _ in range(1000):
        lam = float(rng.uniform(0.5, 100.0))
        spread = float(rng.uniform(0.01, 5.0))
        batch = sample_volume(lower, upper, rng.uniform(-1, 1, (8, 2)), 64, 64, 0.5, rng)
        vals = rng.standard_normal(128) * spread
        grads = rng.standard_normal((128, 2)) * spread
        area = area_loss(vals, grads, batch, lam)
        heat = heat_loss(vals, grads, batch, lam)
        violations += not (area <= area_bound(vals, grads, batch, lam) * (1 + 1e-12)
                           and area < math.sqrt(2 * volume * heat * 2))
    detail = (f"anchor {anchor:.9f}, cap {cap:.5f}, round trip {round_trip:.2g}, "
              f"area inequality violated on {violations}/1000 batches")
    finish(record, 9, transform_ok and violations == 0, detail, clock, 30)


def test_criterion_10_determinism_and_resume(record, tmp_path):
    clock = Clock()
    cloud = sample_boundary(make_shape("star"), 2000, 0)
    cfg = default_config(2, iterations=300, init_steps=300, checkpoint_interval=150)
    one, _ = train(cloud, replace(cfg, threads=1))
    four, _ = train(cloud, replace(cfg, threads=4))
    ck = tmp_path / "m.ckpt"
    train(cloud, replace(cfg, threads=2, checkpoint_path=str(ck)), stop_at=150)
    resumed, _ = train(cloud, replace(cfg, threads=3), resume_from=ck)
    same_threads = bool(np.array_equal(one.theta, four.theta))
    same_resume = bool(np.array_equal(one.theta, resumed.theta))
    finish(record, 10, same_threads and same_resume,
           f"bitwise equal across threads={same_threads}, resumed equals one-shot={same_resume}", clock, 300)
