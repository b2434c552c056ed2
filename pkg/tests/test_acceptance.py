"""Acceptance suite: one test per criterion, each printing a pass line with
its measured margin. Tolerances are pinned here and never loosened at
runtime. Run with `pytest tests/test_acceptance.py -v -s`.
"""

import time

import numpy as np
import pytest

from budgetsplat.backward import (
    accumulate_densify_stats,
    backward,
    loss_and_grad,
)
from budgetsplat.config import TrainConfig
from budgetsplat.core_math import dc_from_rgb, inverse_sigmoid, look_at_camera
from budgetsplat.density import budget_prune, grow, importance_scores
from budgetsplat.forward import RenderOptions, render
from budgetsplat.gaussians import (
    ORIGIN_COMPENSATION,
    make_set,
    nearest_neighbor_distances,
)
from budgetsplat.images import quantize_linear
from budgetsplat.metrics import psnr
from budgetsplat.optim import AdamState
from budgetsplat.reference import render_reference
from budgetsplat.scene_io import (
    ArrayImageSource,
    Dataset,
    PrefetchCache,
    generate_synthetic,
    load_dataset,
    scene_extent,
)
from budgetsplat.trainer import train

from conftest import central_difference, random_set, ring_camera
from test_density import importance_oracle


def report_pass(num, name, detail):
    print(f"\n[ACCEPTANCE] criterion {num} ({name}): PASS — {detail}")


# ---------------------------------------------------------------------------
# Shared expensive runs
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def budget_run(tmp_path_factory):
    """Criterion 3's full training run: F = 5000, 5000 iterations, every
    phase of the schedule exercised, artifacts on disk."""
    out = tmp_path_factory.mktemp("budget_run")
    scene = generate_synthetic(seed=3, n_gaussians=300, n_cameras=8, resolution=64)
    ds = scene.dataset()
    cfg = TrainConfig(
        iterations=5000, budget=5000, seed=0, precision="f32",
        densify_begin=500, densify_end=3000, grow_interval=50,
        budget_prune_interval=100,
        compensate_begin=3000, compensate_end=4500, compensate_interval=100,
        compensate_top_k=50,
        opacity_reset_iteration=2500, eval_interval=1000, sh_degree=2,
    )
    t0 = time.time()
    gs, report = train(ds, cfg, out_dir=out)
    elapsed = time.time() - t0
    return ds, gs, report, out, elapsed


@pytest.fixture(scope="module")
def reconstruction_run():
    """Criterion 9's run: seed-7 scene, 50 ground-truth Gaussians,
    8 cameras, 64x64, F = 200, 2000 iterations."""
    scene = generate_synthetic(seed=7, n_gaussians=50, n_cameras=8, resolution=64)
    ds = scene.dataset()
    cfg = TrainConfig(
        iterations=2000, budget=200, seed=0, precision="f32",
        densify_begin=50, densify_end=1000, grow_interval=50,
        budget_prune_interval=100,
        compensate_begin=1000, compensate_end=1500, compensate_interval=100,
        compensate_top_k=20,
        opacity_reset_iteration=0, eval_interval=2000, sh_degree=1,
        init_opacity=0.25,
    )
    t0 = time.time()
    gs, report = train(ds, cfg)
    elapsed = time.time() - t0
    return ds, gs, report, elapsed


# ---------------------------------------------------------------------------
# 1. Gradient correctness
# ---------------------------------------------------------------------------


def test_criterion_1_gradient_correctness():
    opts = RenderOptions(background=(0.12, 0.08, 0.2), alpha_skip=0.0, early_stop=False)
    t0 = time.time()
    worst_overall = 0.0
    sizes = [(16, 16), (20, 16), (24, 20), (32, 24), (32, 32)]
    for scene_idx in range(20):
        rng = np.random.default_rng(1000 + scene_idx)
        n = int(rng.integers(6, 21))
        w, h = sizes[scene_idx % len(sizes)]
        gs = random_set(rng, n, sh_degree=1)
        cam = ring_camera(width=w, height=h,
                          eye=(0.4 * rng.standard_normal(), 0.4, -2.4))
        target = rng.uniform(0, 1, (h, w, 3))

        def f():
            return loss_and_grad(render(gs, cam, opts), target, lam=0.2).loss

        out = render(gs, cam, opts)
        bundle = backward(gs, out, loss_and_grad(out, target, lam=0.2))
        worst = 0.0
        for arr, grad in [
            (gs.positions, bundle.d_position),
            (gs.rotations, bundle.d_rotation),
            (gs.log_scales, bundle.d_log_scale),
            (gs.opacity_logits, bundle.d_opacity_logit),
            (gs.sh, bundle.d_sh),
        ]:
            worst = max(worst, central_difference(f, arr, grad, h=1e-5, floor=1e-8))
        assert worst <= 1e-4, f"scene {scene_idx}: rel err {worst:.3e}"
        worst_overall = max(worst_overall, worst)
    elapsed = time.time() - t0
    assert elapsed <= 120.0
    report_pass(1, "gradient correctness",
                f"20 scenes, worst rel err {worst_overall:.2e} <= 1e-4, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 2. Rasterizer oracle equivalence
# ---------------------------------------------------------------------------


def test_criterion_2_oracle_equivalence():
    t0 = time.time()
    worst = 0.0
    for scene_idx in range(50):
        rng = np.random.default_rng(2000 + scene_idx)
        n = int(rng.integers(20, 201))
        res = int(rng.integers(16, 65))
        gs = random_set(rng, n, sh_degree=1, max_opacity=0.95,
                        scale_range=(0.04, 0.3))
        bg = tuple(rng.uniform(0.05, 0.3, 3))
        cam = ring_camera(width=res, height=max(16, res - 8),
                          eye=(0.5 * rng.standard_normal(), 0.4, -2.5))
        out = render(gs, cam, RenderOptions(background=bg).oracle_mode())
        ref = render_reference(gs, cam, background=bg)
        rel = np.abs(np.asarray(out.color) - ref.color) / np.maximum(np.abs(ref.color), 1e-9)
        worst = max(worst, float(rel.max()))
        assert rel.max() <= 1e-6
    elapsed = time.time() - t0
    assert elapsed <= 60.0
    report_pass(2, "rasterizer oracle equivalence",
                f"50 scenes, max rel pixel err {worst:.2e} <= 1e-6, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 3. Hard budget invariant
# ---------------------------------------------------------------------------


def test_criterion_3_hard_budget(budget_run):
    ds, gs, report, out, elapsed = budget_run
    assert elapsed <= 600.0, f"run took {elapsed:.0f}s > 10 min"

    csv = (out / "counts.csv").read_text().strip().splitlines()[1:]
    counts = [(int(r.split(",")[0]), int(r.split(",")[1]), r.split(",")[2]) for r in csv]
    over = [(t, c) for t, c, _ in counts if c > 5000]
    assert not over, f"budget exceeded at {over[:5]}"
    assert report.peak_gaussian_count <= 5000
    assert max(c for _, c, _ in counts) == 5000  # the budget is actually reached

    kinds = {e["event"] for e in report.events}
    for expected in ("grow", "opacity_prune", "budget_prune", "compensate_flush",
                     "opacity_reset"):
        assert expected in kinds, f"schedule never triggered {expected}"
    report_pass(3, "hard budget invariant",
                f"F=5000, 5000 iterations, peak count {report.peak_gaussian_count} <= F "
                f"across {len(counts)} series samples, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 4. Blending conservation
# ---------------------------------------------------------------------------


def test_criterion_4_blending_conservation(budget_run, reconstruction_run):
    ds32, gs32, _, _, _ = budget_run
    ds64, gs_rec, _, _ = reconstruction_run
    opts = TrainConfig().render_options()

    worst32 = 0.0
    for cid in [c.cam_id for c in ds32.cameras]:
        out = render(gs32, ds32.camera(cid), opts)  # float32 set
        assert out.color.dtype == np.float32
        gap = np.abs((1.0 - np.asarray(out.final_transmittance, dtype=np.float64))
                     - np.asarray(out.weight_sum, dtype=np.float64))
        worst32 = max(worst32, float(gap.max()))
    assert worst32 <= 1e-6

    gs64 = gs_rec.astype(np.float64)
    worst64 = 0.0
    for cid in [c.cam_id for c in ds64.cameras]:
        out = render(gs64, ds64.camera(cid), opts)
        gap = np.abs((1.0 - out.final_transmittance) - out.weight_sum)
        worst64 = max(worst64, float(gap.max()))
    assert worst64 <= 1e-12
    report_pass(4, "blending conservation",
                f"max gap 32-bit {worst32:.2e} <= 1e-6, 64-bit {worst64:.2e} <= 1e-12")


# ---------------------------------------------------------------------------
# 5. Symmetry breaking (shifted clones)
# ---------------------------------------------------------------------------


def test_criterion_5_symmetry_breaking():
    def clone_gradients(eta):
        gs = make_set(
            positions=np.array([[0.0, 0.0, 0.0], [0.25, 0.1, 0.4]]),
            rotations=np.tile([1.0, 0, 0, 0], (2, 1)),
            log_scales=np.log(0.3) * np.ones((2, 3)),
            opacity_logits=inverse_sigmoid(np.array([0.7, 0.6])),
            sh=dc_from_rgb(np.array([[0.8, 0.3, 0.2], [0.2, 0.6, 0.9]]))[:, :, None],
        )
        cam = ring_camera(width=28, height=24, eye=(0.1, 0.3, -2.3))
        target = np.random.default_rng(7).uniform(0, 1, (24, 28, 3))
        st = AdamState.for_set(gs)
        opts = RenderOptions(alpha_skip=0.0, early_stop=False)
        out = render(gs, cam, opts)
        accumulate_densify_stats(gs, backward(gs, out, loss_and_grad(out, target, lam=0.0)))
        from budgetsplat.density import BudgetPolicy

        pol = BudgetPolicy(budget=100, split_scale=10.0, tau_grow=1e-6,
                           growth_cap_fraction=0.2, shift_eta=eta)
        grow(gs, st, np.array([1.0, 0.0]), pol, np.random.default_rng(0))
        assert len(gs) == 3
        out2 = render(gs, cam, opts)
        b2 = backward(gs, out2, loss_and_grad(out2, target, lam=0.0))
        return b2.d_position[0], b2.d_position[2]

    gp0, gc0 = clone_gradients(eta=0.0)
    unshifted_gap = float(np.linalg.norm(gp0 - gc0))
    assert unshifted_gap <= 1e-12
    assert np.linalg.norm(gp0) > 0

    gp1, gc1 = clone_gradients(eta=-1.0)
    shifted_gap = float(np.linalg.norm(gp1 - gc1))
    assert shifted_gap > 0
    report_pass(5, "symmetry breaking",
                f"unshifted clone gradient gap {unshifted_gap:.2e} <= 1e-12, "
                f"shifted gap {shifted_gap:.2e} > 0")


# ---------------------------------------------------------------------------
# 6. Compensation efficacy
# ---------------------------------------------------------------------------


def build_wall_scene(grid=13, spacing=0.12, patch=1, res=48, n_cams=6, backdrop_gap=0.12):
    """Wall at z=0 with a bright central patch; the init cloud omits the
    patch and a margin around it, so only compensation (or slow clone creep)
    can recover the region. A dark backdrop just behind gives the hole
    pixels a blended depth to back-project through."""
    xs = (np.arange(grid) - grid // 2) * spacing
    gx, gy = np.meshgrid(xs, xs)
    wall = np.stack([gx.ravel(), gy.ravel(), np.zeros(grid * grid)], axis=1)
    n_wall = len(wall)
    ctr = grid // 2
    cell = np.stack([np.tile(np.arange(grid), grid), np.repeat(np.arange(grid), grid)], axis=1)
    dist_cells = np.maximum(np.abs(cell[:, 0] - ctr), np.abs(cell[:, 1] - ctr))
    is_patch = dist_cells <= patch
    hole = dist_cells <= patch + 1

    rng = np.random.default_rng(0)
    wall_colors = np.tile([0.3, 0.35, 0.45], (n_wall, 1))
    wall_colors[is_patch] = [0.95, 0.55, 0.1]
    wall_colors = np.clip(wall_colors + rng.normal(0, 0.02, wall_colors.shape), 0, 1)

    bxs = (np.arange(0, grid, 2) - grid // 2) * spacing
    bgx, bgy = np.meshgrid(bxs, bxs)
    backdrop = np.stack([bgx.ravel(), bgy.ravel(), np.full(bgx.size, backdrop_gap)], axis=1)
    backdrop_colors = np.tile([0.08, 0.08, 0.1], (len(backdrop), 1))

    pos = np.concatenate([wall, backdrop])
    colors = np.concatenate([wall_colors, backdrop_colors])
    n = len(pos)
    scales = np.concatenate([np.full(n_wall, 0.055), np.full(len(backdrop), 0.13)])
    gt = make_set(
        positions=pos, rotations=np.tile([1.0, 0, 0, 0], (n, 1)),
        log_scales=np.log(scales)[:, None] * np.ones(3),
        opacity_logits=np.full(n, inverse_sigmoid(0.93)),
        sh=dc_from_rgb(colors)[:, :, None], dtype=np.float32,
    ).astype(np.float64)

    cams = []
    for i in range(n_cams):
        a = (i / (n_cams - 1) - 0.5) * 1.5
        eye = (2.3 * np.sin(a), 0.3 * (-1) ** i, -2.3 * np.cos(a))
        split = "test" if i in (1, n_cams - 2) else "train"
        cams.append(look_at_camera(eye, (0, 0, 0), res, res, 0.95 * res,
                                   cam_id=i, split=split))
    images = {c.cam_id: quantize_linear(np.clip(
        render_reference(gt, c, alpha_skip=1 / 255.0, t_stop=1e-4).color, 0, 1))
        for c in cams}

    keep = np.concatenate([~hole, np.ones(len(backdrop), dtype=bool)])
    init_pos = pos[keep] + rng.normal(0, 0.008, (int(keep.sum()), 3))
    ds = Dataset(cameras=cams, source=ArrayImageSource(images),
                 points_positions=init_pos, points_colors=colors[keep],
                 extent=scene_extent(cams))
    return ds, np.zeros(3)


def test_criterion_6_compensation_efficacy():
    ds, patch_center = build_wall_scene()

    def run(with_comp):
        cfg = TrainConfig(
            iterations=900, budget=len(ds.points_positions) + 30, seed=0,
            precision="f64",
            densify_begin=40, densify_end=140, grow_interval=50,
            budget_prune_interval=100,
            compensate_begin=150 if with_comp else 897,
            compensate_end=700 if with_comp else 898,
            compensate_interval=25, compensate_top_k=4,
            opacity_reset_iteration=0, eval_interval=900, sh_degree=1,
        )
        gs, report = train(ds, cfg)
        return gs, report.evals[-1]["splits"]["test"]["aggregate"]["psnr"]

    gs_on, psnr_on = run(True)
    _, psnr_off = run(False)

    comp_rows = np.flatnonzero(gs_on.origin == ORIGIN_COMPENSATION)
    assert comp_rows.size > 0, "no compensation Gaussians survived"
    dists = np.linalg.norm(gs_on.positions[comp_rows] - patch_center, axis=1)
    med_nn = float(np.median(nearest_neighbor_distances(gs_on.positions)))
    assert dists.min() <= 3 * med_nn, (
        f"nearest compensation Gaussian {dists.min():.3f} > 3 x median NN {3 * med_nn:.3f}"
    )
    # Pilot-fixed gap: compensation must beat the ablation by at least 0.5 dB
    # (pilot measured +1.46 dB).
    assert psnr_on >= psnr_off + 0.5, f"comp {psnr_on:.2f} vs ablation {psnr_off:.2f}"
    report_pass(6, "compensation efficacy",
                f"nearest comp Gaussian {dists.min():.3f} <= {3 * med_nn:.3f} "
                f"(3 x median NN); PSNR {psnr_on:.2f} vs {psnr_off:.2f} without "
                f"(+{psnr_on - psnr_off:.2f} dB, bar +0.5)")


# ---------------------------------------------------------------------------
# 7. Iterative vs one-shot
# ---------------------------------------------------------------------------


def test_criterion_7_iterative_vs_one_shot():
    def run_pair(scene_seed):
        scene = generate_synthetic(seed=scene_seed, n_gaussians=40, n_cameras=6,
                                   resolution=48)
        ds = scene.dataset()
        results = {}
        for mode in ("iterative", "one_shot"):
            cfg = TrainConfig(
                iterations=800, budget=150, seed=0, precision="f32", mode=mode,
                densify_begin=50, densify_end=700, grow_interval=50,
                budget_prune_interval=100, growth_cap_fraction=1.0, tau_grow=1e-4,
                compensate_begin=710, compensate_end=790, compensate_interval=50,
                compensate_top_k=10,
                opacity_reset_iteration=0, eval_interval=800, sh_degree=1,
                init_opacity=0.25,
            )
            gs, report = train(ds, cfg)
            results[mode] = (
                report.evals[-1]["splits"]["test"]["aggregate"]["psnr"],
                report.peak_gaussian_count,
                report.modeled_peak_memory_bytes,
            )
        return results

    psnr_wins = 0
    lines = []
    for seed in (101, 202, 303):
        r = run_pair(seed)
        it_psnr, it_peak, it_mem = r["iterative"]
        os_psnr, os_peak, os_mem = r["one_shot"]
        assert it_peak <= 150, "iterative mode broke the budget"
        assert os_peak > 150, "one-shot baseline never overshot"
        assert it_mem < os_mem, (
            f"seed {seed}: iterative peak memory {it_mem} not below one-shot {os_mem}"
        )
        psnr_wins += it_psnr >= os_psnr
        lines.append(f"seed {seed}: {it_psnr:.2f} vs {os_psnr:.2f} dB, "
                     f"mem {it_mem} vs {os_mem}")
    assert psnr_wins >= 2, f"iterative won PSNR on only {psnr_wins}/3 seeds"
    report_pass(7, "iterative vs one-shot",
                f"PSNR wins {psnr_wins}/3, peak memory lower 3/3 [" + "; ".join(lines) + "]")


# ---------------------------------------------------------------------------
# 8. Importance pruning sanity
# ---------------------------------------------------------------------------


def test_criterion_8_importance_pruning_sanity():
    rng = np.random.default_rng(88)
    gs = random_set(rng, 27, max_opacity=0.9)
    dead = np.array([4, 11, 19])
    gs.opacity_logits[dead] = -800.0  # sigmoid underflows to exactly 0
    cams = [ring_camera(width=14, height=12, cam_id=0),
            ring_camera(width=14, height=12, eye=(-0.7, 0.2, -2.3), cam_id=1)]
    opts = RenderOptions(alpha_skip=1.0 / 255.0, early_stop=False)

    scores = importance_scores(gs, cams, opts)
    assert np.all(scores[dead] == 0.0)

    oracle = importance_oracle(gs, cams, alpha_skip=1.0 / 255.0)
    np.testing.assert_allclose(scores, oracle, rtol=1e-9, atol=1e-13)

    # Removal order: prune down to 20; the engine's removals must equal the
    # brute-force sort of the oracle scores under the same tie-breaks.
    k = 7
    opac = gs.opacities()
    oracle_order = np.lexsort((np.arange(len(gs)), opac, oracle))
    expected_removed = set(oracle_order[:k].tolist())
    assert set(dead.tolist()) <= expected_removed  # zero scorers go first

    st = AdamState.for_set(gs)
    gs.birth_iteration[:] = np.arange(len(gs))  # row labels that survive pruning
    budget_prune(gs, st, scores, budget=len(gs) - k)
    removed = set(range(27)) - set(gs.birth_iteration.tolist())
    assert removed == expected_removed
    assert set(dead.tolist()) <= removed
    report_pass(8, "importance pruning sanity",
                f"zero-opacity rows scored 0 and were removed first; removal set of "
                f"{k} matches the per-ray enumeration oracle exactly")


# ---------------------------------------------------------------------------
# 9. Synthetic reconstruction
# ---------------------------------------------------------------------------


def test_criterion_9_synthetic_reconstruction(reconstruction_run):
    ds, gs, report, elapsed = reconstruction_run
    assert elapsed <= 300.0, f"run took {elapsed:.0f}s > 5 min"
    test_psnr = report.evals[-1]["splits"]["test"]["aggregate"]["psnr"]
    # Bar revised upward from the provisional 30 dB after the pilot measured
    # 33.05 dB on the pinned seed.
    assert test_psnr >= 31.0, f"test PSNR {test_psnr:.2f} < 31.0 dB"
    assert report.peak_gaussian_count <= 200
    report_pass(9, "synthetic reconstruction",
                f"seed-7 scene: test PSNR {test_psnr:.2f} dB >= 31.0 "
                f"(provisional bar 30.0), peak count {report.peak_gaussian_count} <= 200, "
                f"{elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 10. Dataloader bound
# ---------------------------------------------------------------------------


def test_criterion_10_dataloader_bound(tmp_path):
    scene = generate_synthetic(seed=10, n_gaussians=10, n_cameras=20, resolution=32,
                               test_every=100)
    scene.write(tmp_path)
    ds = load_dataset(tmp_path)
    direct = {cid: ds.image(cid) for cid in range(20)}

    cache = PrefetchCache(ds.source, capacity=4)
    rng = np.random.default_rng(0)
    schedule = [int(v) for v in rng.integers(0, 20, 120)]
    max_resident = 0
    for i, cid in enumerate(schedule):
        cache.prefetch(schedule[i : i + 4])
        img = cache.get(cid)
        np.testing.assert_array_equal(img, direct[cid])
        max_resident = max(max_resident, cache.resident_count())
    assert max_resident <= 4
    assert cache.peak_resident <= 4
    cache.close()
    report_pass(10, "dataloader bound",
                f"120 accesses over 20 views, resident count peaked at "
                f"{max_resident} <= 4, all served images byte-identical to direct loads")


# ---------------------------------------------------------------------------
# 11. Determinism
# ---------------------------------------------------------------------------


def test_criterion_11_determinism(tmp_path):
    scene = generate_synthetic(seed=11, n_gaussians=20, n_cameras=6, resolution=32)
    ds = scene.dataset()
    cfg = TrainConfig(
        iterations=250, budget=120, seed=5, precision="f64", threads=1,
        densify_begin=20, densify_end=150, grow_interval=25,
        budget_prune_interval=50, compensate_begin=150, compensate_end=220,
        compensate_interval=25, compensate_top_k=8,
        opacity_reset_iteration=100, eval_interval=125, sh_degree=1,
    )
    train(ds, cfg, out_dir=tmp_path / "a")
    train(ds, cfg, out_dir=tmp_path / "b")
    rep_a = (tmp_path / "a/report.json").read_bytes()
    rep_b = (tmp_path / "b/report.json").read_bytes()
    ckpt_a = (tmp_path / "a/checkpoint.ply").read_bytes()
    ckpt_b = (tmp_path / "b/checkpoint.ply").read_bytes()
    assert rep_a == rep_b, "RunReports differ between identical runs"
    assert ckpt_a == ckpt_b, "checkpoints differ between identical runs"
    report_pass(11, "determinism",
                f"two identical single-worker 64-bit runs: report.json "
                f"({len(rep_a)} bytes) and checkpoint.ply ({len(ckpt_a)} bytes) "
                f"byte-identical")
