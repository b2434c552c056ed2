"""End-to-end training loop: per iteration fetch view, render, loss/backward,
Adam step, then on schedule grow+shift, opacity prune, compensation
collect/flush, budget prune, opacity reset, and eval — with the hard budget
holding at every iteration boundary.

Produces a RunReport (deterministic content only; wall-clock goes to a
separate timings sidecar so identical seeded runs write identical reports),
a count-vs-iteration series, a structured event log, eval renders, and a
checkpoint.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backward import (
    accumulate_densify_stats,
    backward,
    calibrate_mix_balance,
    hybrid_score,
    loss_and_grad,
)
from .config import TrainConfig
from .density import (
    CompensationBuffer,
    budget_prune,
    collect_compensation,
    flush_compensation,
    grow,
    importance_scores,
    opacity_prune,
)
from .forward import render
from .gaussians import GaussianSet, init_from_points
from .images import quantize_linear, save_png
from .metrics import psnr, ssim
from .optim import AdamState, reset_opacity
from .scene_io import ArrayImageSource, Dataset, PrefetchCache, save_checkpoint


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries the failing iteration."""

    def __init__(self, iteration: int):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration


@dataclass
class RunReport:
    config: dict
    evals: list = field(default_factory=list)
    count_series: list = field(default_factory=list)  # (iteration, count, event)
    events: list = field(default_factory=list)
    peak_gaussian_count: int = 0
    modeled_peak_memory_bytes: int = 0
    memory_breakdown: dict = field(default_factory=dict)
    mix_balance: float | None = None
    final_iteration: int = 0
    final_count: int = 0

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "evals": self.evals,
            "peak_gaussian_count": self.peak_gaussian_count,
            "modeled_peak_memory_bytes": self.modeled_peak_memory_bytes,
            "memory_breakdown": self.memory_breakdown,
            "mix_balance": self.mix_balance,
            "final_iteration": self.final_iteration,
            "final_count": self.final_count,
            "series": "counts.csv",
            "events": "events.jsonl",
        }


def account_memory(gs: GaussianSet, adam: AdamState, transient_bytes: int, cache_bytes: int):
    """Modeled footprint: primitives (params + optimizer moments + stats),
    transient blend records, resident image cache. Returns (total, parts)."""
    parts = {
        "params": gs.param_nbytes(),
        "optimizer": adam.nbytes(),
        "stats": gs.stats_nbytes(),
        "blend_records": int(transient_bytes),
        "cache": int(cache_bytes),
    }
    return sum(parts.values()), parts


def bytes_per_gaussian(dtype, sh_coeffs: int) -> int:
    """Parameter + optimizer-state floats for one primitive."""
    n_params = 3 + 4 + 3 + 1 + 3 * sh_coeffs
    return n_params * np.dtype(dtype).itemsize * 3  # params + two moments


class _ViewSchedule:
    """Shuffled epoch order with a look-ahead window for the prefetcher."""

    def __init__(self, ids, rng):
        self.ids = list(ids)
        self.rng = rng
        self.queue = []

    def _refill(self):
        order = self.rng.permutation(len(self.ids))
        self.queue.extend(self.ids[i] for i in order)

    def next(self):
        if not self.queue:
            self._refill()
        return self.queue.pop(0)

    def window(self, k):
        while len(self.queue) < k:
            self._refill()
        return self.queue[:k]


def _evaluate(gs, dataset, cam_ids, opts):
    per_view = []
    for cid in cam_ids:
        cam = dataset.camera(cid)
        out = render(gs, cam, opts)
        img = quantize_linear(np.clip(np.asarray(out.color, dtype=np.float64), 0.0, 1.0))
        target = dataset.image(cid)
        per_view.append(
            {"view": cid, "psnr": psnr(img, target), "ssim": ssim(img, target)}
        )
    agg = {
        "psnr": float(np.mean([v["psnr"] for v in per_view])),
        "ssim": float(np.mean([v["ssim"] for v in per_view])),
    }
    return {"aggregate": agg, "per_view": per_view}


def train(dataset: Dataset, config: TrainConfig, out_dir=None):
    """Run Algorithm-1 training on the dataset. Returns (GaussianSet,
    RunReport); artifacts are written when out_dir is given."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    dtype = config.dtype
    timings = {"render": 0.0, "backward": 0.0, "optimizer": 0.0, "density": 0.0,
               "eval": 0.0, "io": 0.0}

    n_init = len(dataset.points_positions)
    gs = init_from_points(
        dataset.points_positions,
        dataset.points_colors,
        sh_degree=config.sh_degree,
        opacity=config.init_opacity,
        dtype=dtype,
    )
    policy = config.budget_policy(extent=dataset.extent)
    policy.validate(initial_count=n_init)
    adam = AdamState.for_set(
        gs,
        lrs=config.learning_rates(extent=dataset.extent),
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
        eps=config.adam_eps,
    )
    opts = config.render_options()

    cache = None
    if not isinstance(dataset.source, ArrayImageSource):
        # BUDGETSPLAT_CACHE_CAPACITY overrides the configured capacity.
        import os

        cap = int(os.environ.get("BUDGETSPLAT_CACHE_CAPACITY", config.cache_capacity))
        cache = PrefetchCache(dataset.source, capacity=cap)

    train_ids = dataset.split_ids("train")
    test_ids = dataset.split_ids("test")
    if not train_ids:
        raise ValueError("dataset has no training views")
    train_cams = [dataset.camera(i) for i in train_ids]
    schedule = _ViewSchedule(train_ids, rng)
    buffer = CompensationBuffer()
    beta = config.mix_balance

    # The report echoes the training configuration; the artifact destination
    # is run-location metadata, not configuration, and would make otherwise
    # identical runs compare unequal.
    cfg_echo = {k: v for k, v in config.to_dict().items() if k != "out_dir"}
    report = RunReport(config=cfg_echo)
    report.count_series.append((0, len(gs), "init"))
    report.peak_gaussian_count = len(gs)

    peak_total = 0
    peak_parts = {}
    records_peak = 0

    def note_memory(transient):
        nonlocal peak_total, peak_parts, records_peak
        records_peak = max(records_peak, transient)
        cache_bytes = cache.resident_nbytes() if cache else dataset.source.nbytes()
        total, parts = account_memory(gs, adam, transient, cache_bytes)
        if total > peak_total:
            peak_total, peak_parts = total, parts

    def emit(event, count_too=True):
        report.events.append(event)
        if count_too and "after" in event:
            report.count_series.append((event["iteration"], event["after"], event["event"]))
            report.peak_gaussian_count = max(report.peak_gaussian_count, event["after"])

    def run_eval(t):
        start = time.perf_counter()
        entry = {"iteration": t, "splits": {}}
        if train_ids:
            entry["splits"]["train"] = _evaluate(gs, dataset, train_ids, opts)
        if test_ids:
            entry["splits"]["test"] = _evaluate(gs, dataset, test_ids, opts)
        report.evals.append(entry)
        report.count_series.append((t, len(gs), "eval"))
        timings["eval"] += time.perf_counter() - start
        return entry

    def fresh_scores():
        return importance_scores(gs, train_cams, opts, mode=policy.importance_mode)

    if config.iterations == 0:
        run_eval(0)

    for t in range(1, config.iterations + 1):
        if cache:
            cache.prefetch(schedule.window(min(cache.capacity, len(train_ids))))
        view = schedule.next()
        target = cache.get(view) if cache else dataset.image(view)
        cam = dataset.camera(view)

        start = time.perf_counter()
        out = render(gs, cam, opts)
        timings["render"] += time.perf_counter() - start

        lg = loss_and_grad(
            out, target, lam=config.loss_lambda,
            error_map_includes_ssim=config.error_map_includes_ssim,
        )
        if not np.isfinite(lg.loss):
            raise TrainingDiverged(t)

        start = time.perf_counter()
        bundle = backward(gs, out, lg)
        timings["backward"] += time.perf_counter() - start

        start = time.perf_counter()
        adam.step(gs, bundle)
        timings["optimizer"] += time.perf_counter() - start

        start = time.perf_counter()
        in_densify = policy.densify_begin < t < policy.densify_end
        in_compensate = policy.compensate_begin < t < policy.compensate_end

        if in_densify:
            accumulate_densify_stats(gs, bundle)
            if t % policy.grow_interval == 0:
                if beta is None:
                    beta = calibrate_mix_balance(
                        gs.grad_pos2d_accum, gs.grad_color_accum, gs.accum_count
                    )
                    emit({"event": "calibrate_mix", "iteration": t, "beta": beta},
                         count_too=False)
                scores = hybrid_score(
                    gs.grad_pos2d_accum.astype(np.float64),
                    gs.grad_color_accum.astype(np.float64),
                    gs.accum_count,
                    beta,
                )
                if config.mode == "one_shot":
                    emit(grow(gs, adam, scores, policy, rng, t, budget_gate=False))
                elif len(gs) < policy.budget:
                    emit(grow(gs, adam, scores, policy, rng, t))
                emit(opacity_prune(gs, adam, policy.opacity_threshold, t))
                gs.reset_densify_stats()
        elif in_compensate and config.mode == "iterative":
            ev = collect_compensation(buffer, gs, out, lg, target, policy.compensate_top_k)
            ev["iteration"] = t
            if ev["appended"]:
                emit(ev, count_too=False)
            if t % policy.compensate_interval == 0 and len(buffer):
                # Flush plus its immediate budget prune is one structural
                # event; the count series samples the post-prune boundary
                # state (the transient overshoot stays visible in the event
                # log and the records term of the memory model).
                emit(flush_compensation(buffer, gs, adam,
                                        opacity=policy.compensate_opacity,
                                        iteration=t,
                                        scale_clip=(1e-4, dataset.extent)),
                     count_too=False)
                emit(budget_prune(gs, adam, fresh_scores(), policy.budget, t))

        if config.mode == "iterative":
            if t % policy.budget_prune_interval == 0 and len(gs) > policy.budget:
                emit(budget_prune(gs, adam, fresh_scores(), policy.budget, t))
        elif t == policy.densify_end:
            emit(budget_prune(gs, adam, fresh_scores(), policy.budget, t))

        if config.opacity_reset_iteration and t == config.opacity_reset_iteration:
            reset_opacity(
                gs, adam,
                o_reset=config.opacity_reset_value,
                reset_position_moments=config.opacity_reset_positions,
            )
            emit({"event": "opacity_reset", "iteration": t, "after": len(gs),
                  "value": config.opacity_reset_value})
        timings["density"] += time.perf_counter() - start

        note_memory(out.records.nbytes())

        if t % config.eval_interval == 0 or t == config.iterations:
            run_eval(t)

    report.mix_balance = beta
    report.final_iteration = config.iterations
    report.final_count = len(gs)
    report.memory_breakdown = {k: int(v) for k, v in peak_parts.items()}
    report.memory_breakdown["records_peak"] = int(records_peak)
    report.modeled_peak_memory_bytes = int(peak_total)

    if out_dir is not None:
        start = time.perf_counter()
        root = Path(out_dir)
        root.mkdir(parents=True, exist_ok=True)
        save_checkpoint(gs, root / "checkpoint.ply")
        (root / "report.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n")
        with open(root / "counts.csv", "w") as f:
            f.write("iteration,count,event\n")
            for it, count, event in report.count_series:
                f.write(f"{it},{count},{event}\n")
        with open(root / "events.jsonl", "w") as f:
            for ev in report.events:
                f.write(json.dumps(ev) + "\n")
        if config.eval_save_images and test_ids:
            img_dir = root / "eval"
            img_dir.mkdir(exist_ok=True)
            for cid in test_ids:
                out = render(gs, dataset.camera(cid), opts)
                save_png(
                    img_dir / f"view_{cid:03d}.png",
                    np.clip(np.asarray(out.color, dtype=np.float64), 0.0, 1.0),
                )
        timings["io"] += time.perf_counter() - start
        cache_stats = (
            {"hits": cache.hits, "misses": cache.misses, "peak_resident": cache.peak_resident}
            if cache
            else {}
        )
        (root / "timings.json").write_text(
            json.dumps({"seconds": timings, "cache": cache_stats}, indent=1) + "\n"
        )
    if cache:
        cache.close()
    return gs, report
