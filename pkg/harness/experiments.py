"""
The experiment commands: correction ablation, sequence reuse, residual/EPE
correlation and the solver benchmark.

Independent arms, streams, samples and benchmark cells run concurrently in
worker threads (``asyncio.to_thread``), each with its own seeded stream.
Results come back from ``asyncio.gather`` in submission order, so the merged
CSVs do not depend on which worker finished first.
"""

import asyncio
import logging
import math
import os
import time
from collections.abc import Callable
from dataclasses import replace

import numpy as np

from engine.deq_layer import ReuseState, advance_reuse, forward_solve
from harness.experiment_config import ExperimentConfig, GradientSettings, save_config
from harness.run_log import (
    ABLATION_COLUMNS,
    ABLATION_SUMMARY_COLUMNS,
    BENCH_COLUMNS,
    BENCH_SUMMARY_COLUMNS,
    CORRELATION_COLUMNS,
    REUSE_COLUMNS,
    REUSE_CURVE_COLUMNS,
    REUSE_SUMMARY_COLUMNS,
    write_json,
    write_table,
)
from harness.training import TrainResult, held_out_set, load_trained, train_model
from numerics.rng import Rng, make_rng
from numerics.tensor_ops import Tensor
from solver.fixed_point import SolverConfig, SolverTrace, solve
from toyflow.metrics import epe, mean_flow_magnitude, pearson_r
from toyflow.model import FlowModel
from toyflow.synthetic import synth_sequence

logger = logging.getLogger(__name__)

# Share of the final training steps whose residuals the ablation summary averages.
FINAL_PHASE_FRACTION = 0.1


async def _gather_threads(jobs: list[Callable[[], object]]) -> list:
    return await asyncio.gather(*(asyncio.to_thread(job) for job in jobs))


def _run_concurrently(jobs: list[Callable[[], object]]) -> list:
    return asyncio.run(_gather_threads(jobs))


def _start(cfg: ExperimentConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_config(os.path.join(out_dir, "config.json"), cfg)


# --- Correction ablation ---

def ablation_arms(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """
    One training config per arm, in output order.

    ``freq<r>`` arms keep the configured main gradient and add r corrections;
    the ``ift`` arm uses the exact gradient without correction; ``jr<w>`` arms
    add the Jacobian penalty with weight w on top of the ``ift`` arm.
    """
    no_correction = replace(cfg.correction, freq=0, gammas=None)
    arms = [
        (f"freq{freq}", replace(cfg, correction=replace(cfg.correction, freq=freq, gammas=None)))
        for freq in cfg.ablation.freq_list
    ]
    ift = replace(cfg, correction=no_correction, gradient=GradientSettings(mode="ift"))
    if cfg.ablation.include_ift:
        arms.append(("ift", ift))
    for weight in cfg.ablation.jr_weights:
        arms.append((f"jr{weight:g}", replace(ift, jacobian_reg=replace(cfg.jacobian_reg, weight=weight))))
    return [(name, arm_cfg.validate()) for name, arm_cfg in arms]


def _final_phase_residual(result: TrainResult) -> float | None:
    residuals = [r["abs_residual"] for r in result.train_records]
    if not residuals:
        return None
    count = max(1, math.ceil(FINAL_PHASE_FRACTION * len(residuals)))
    return float(np.mean(residuals[-count:]))


def cmd_ablate_correction(cfg: ExperimentConfig, out_dir: str) -> dict[str, TrainResult]:
    """
    ``deqflow ablate-correction``: trains every arm under the shared forward
    budget on identical data and writes ``ablation.csv`` and ``ablation_summary.csv``.
    """
    _start(cfg, out_dir)
    budget_cfg = replace(cfg.forward_config(), max_iters=cfg.ablation.budget)
    arms = ablation_arms(cfg)
    eval_samples = held_out_set(cfg.data) if cfg.run.steps > 0 else None
    logger.info(f"Ablation: {len(arms)} arms ({', '.join(n for n, _ in arms)}), budget {cfg.ablation.budget}.")

    jobs = [
        (lambda arm_cfg=arm_cfg, name=name: train_model(
            arm_cfg, os.path.join(out_dir, "arms", name), budget_cfg, eval_samples))
        for name, arm_cfg in arms
    ]
    results = _run_concurrently(jobs)

    rows, summary = [], []
    for (name, _), result in zip(arms, results):
        for record in result.train_records:
            rows.append({
                "arm": name, "step": record["step"], "kind": "train", "loss_total": record["loss_total"],
                "abs_residual": record["abs_residual"], "rel_residual": record["rel_residual"], "aepe": None,
            })
        for record in result.eval_records:
            rows.append({
                "arm": name, "step": record["step"], "kind": "eval", "loss_total": None,
                "abs_residual": record["mean_residual"], "rel_residual": None, "aepe": record["aepe"],
            })
        summary.append({
            "arm": name,
            "final_phase_residual": _final_phase_residual(result),
            "final_aepe": (result.final_eval or {}).get("aepe"),
        })
        logger.info(f"Arm {name}: final-phase residual {summary[-1]['final_phase_residual']}, "
                    f"final AEPE {summary[-1]['final_aepe']}")
    write_table(os.path.join(out_dir, "ablation.csv"), ABLATION_COLUMNS, rows)
    write_table(os.path.join(out_dir, "ablation_summary.csv"), ABLATION_SUMMARY_COLUMNS, summary)
    return {name: result for (name, _), result in zip(arms, results)}


# --- Sequence reuse ---

def _trace_rows(stream: int, frame: int, arm: str, trace: SolverTrace) -> tuple[dict, list[dict]]:
    row = {
        "stream": stream, "frame": frame, "arm": arm, "iters": trace.n_iters,
        "initial_residual": trace.initial_residual, "final_residual": trace.final_residual,
        "converged": trace.converged,
    }
    curve = [{"stream": stream, "frame": frame, "arm": arm, "iteration": 0, "rel_residual": trace.initial_rel_residual}]
    curve += [
        {"stream": stream, "frame": frame, "arm": arm, "iteration": i, "rel_residual": r}
        for i, r in enumerate(trace.rel_residuals, start=1)
    ]
    return row, curve


def reuse_stream(
    model: FlowModel,
    theta: Tensor,
    cfg: ExperimentConfig,
    stream_id: int,
    forward_cfg: SolverConfig,
) -> tuple[list[dict], list[dict]]:
    """
    Solves every frame of one stream three ways: cold from zero, warm from
    the previous frame's equilibrium, and a fixed-length Picard unroll (the
    recurrent baseline) with the same budget.
    """
    d = cfg.data
    samples = synth_sequence(
        make_rng(d.seed, "reuse", stream_id), cfg.reuse.frames, d.image_size, d.image_size,
        d.max_disp, d.smoothness, d.motion, seed=d.seed, stream_id=stream_id,
    )
    unrolled_cfg = replace(forward_cfg, method="picard", rel_tol=0.0, abs_tol=0.0)
    reuse = ReuseState()
    rows, curves = [], []
    for sample in samples:
        operator = model.operator(model.prepare(sample.p1, sample.p2, theta), theta)
        cold = forward_solve(operator, operator.template, forward_cfg)
        warm = forward_solve(operator, operator.template, forward_cfg, reuse=reuse, stream_id=stream_id)
        reuse = advance_reuse(reuse, warm.z_star, stream_id)
        unrolled = forward_solve(operator, operator.template, unrolled_cfg)
        for arm, result in (("cold", cold), ("warm", warm), ("unrolled", unrolled)):
            row, curve = _trace_rows(stream_id, sample.frame, arm, result.trace)
            rows.append(row)
            curves.extend(curve)
    logger.debug(f"Reuse stream {stream_id}: {len(samples)} frames done.")
    return rows, curves


def cmd_sequence_reuse(cfg: ExperimentConfig, out_dir: str, checkpoint: str | None = None) -> dict:
    """
    ``deqflow sequence-reuse``: writes ``reuse.csv``, ``reuse_curves.csv`` and
    ``reuse_summary.csv`` (median iterations per arm and the speedup of each
    arm over cold starts).
    """
    _start(cfg, out_dir)
    model, theta = load_trained(cfg, checkpoint, out_dir)
    forward_cfg = cfg.forward_config()
    jobs = [
        (lambda sid=sid: reuse_stream(model, theta, cfg, sid, forward_cfg))
        for sid in range(cfg.reuse.n_streams)
    ]
    shards = _run_concurrently(jobs)
    rows = [row for shard_rows, _ in shards for row in shard_rows]
    curves = [point for _, shard_curves in shards for point in shard_curves]

    medians = {
        arm: float(np.median([r["iters"] for r in rows if r["arm"] == arm]))
        for arm in ("cold", "warm", "unrolled")
    }
    summary = [
        {"arm": arm, "median_iters": median, "speedup": medians["cold"] / median if median > 0 else None}
        for arm, median in medians.items()
    ]
    write_table(os.path.join(out_dir, "reuse.csv"), REUSE_COLUMNS, rows)
    write_table(os.path.join(out_dir, "reuse_curves.csv"), REUSE_CURVE_COLUMNS, curves)
    write_table(os.path.join(out_dir, "reuse_summary.csv"), REUSE_SUMMARY_COLUMNS, summary)
    logger.info(f"Reuse: median cold {medians['cold']}, warm {medians['warm']} iterations.")
    return medians


# --- Residual / EPE correlation ---

def _correlation_sample(model: FlowModel, theta: Tensor, cfg: ExperimentConfig, index: int, max_disp: float) -> dict:
    d = cfg.data
    sample = synth_sequence(
        make_rng(d.seed, "correlation", index), 1, d.image_size, d.image_size,
        max_disp, d.smoothness, d.motion, seed=d.seed, stream_id=index,
    )[0]
    operator = model.operator(model.prepare(sample.p1, sample.p2, theta), theta)
    forward = forward_solve(operator, operator.template, cfg.forward_config())
    return {
        "sample": index,
        "max_disp": max_disp,
        "epe": epe(model.to_image_flow(forward.z_star), sample.f_gt),
        "abs_residual": operator.residual(forward.z_star)[0],
        "flow_magnitude": mean_flow_magnitude(sample.f_gt),
    }


def cmd_correlation_study(cfg: ExperimentConfig, out_dir: str, checkpoint: str | None = None) -> float | None:
    """
    ``deqflow correlation-study``: per-sample EPE, absolute fixed-point residual
    and mean flow magnitude over held-out samples cycling through
    ``correlation.max_disps``; Pearson r of residual vs EPE goes to
    ``correlation_summary.json`` (``"undefined"`` for zero variance).
    """
    _start(cfg, out_dir)
    model, theta = load_trained(cfg, checkpoint, out_dir)
    disps = cfg.correlation.max_disps
    jobs = [
        (lambda i=i: _correlation_sample(model, theta, cfg, i, disps[i % len(disps)]))
        for i in range(cfg.correlation.n_samples)
    ]
    rows = _run_concurrently(jobs)
    r = pearson_r([row["abs_residual"] for row in rows], [row["epe"] for row in rows])
    write_table(os.path.join(out_dir, "correlation.csv"), CORRELATION_COLUMNS, rows)
    write_json(os.path.join(out_dir, "correlation_summary.json"), {
        "pearson_r": r if r is not None else "undefined",
        "n_samples": len(rows),
    })
    logger.info(f"Residual/EPE Pearson r over {len(rows)} samples: {r}")
    return r


# --- Solver benchmark ---

def contractive_map(rng: Rng, dim: int, spectral_radius: float, kind: str = "affine") -> Callable[[Tensor], Tensor]:
    """
    A random map with Lipschitz constant ``spectral_radius``.

    ``A = Q diag(lambda) Q^T`` with eigenvalues in [-rho, rho] (one equal to rho);
    ``"affine"`` is ``z -> A z + b``, ``"tanh"`` is ``z -> tanh(A z + b)``.
    """
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    eigenvalues = rng.uniform(-spectral_radius, spectral_radius, size=dim)
    eigenvalues[0] = spectral_radius
    a = (q * eigenvalues) @ q.T
    b = rng.standard_normal(dim)
    if kind == "affine":
        return lambda z: a @ z + b
    if kind == "tanh":
        return lambda z: np.tanh(a @ z + b)
    raise ValueError(f"Unknown map kind '{kind}'")


def _bench_cell(cfg: ExperimentConfig, kind: str, radius_index: int, radius: float) -> list[dict]:
    bench = cfg.bench
    rows = []
    for trial in range(bench.trials):
        f = contractive_map(make_rng(cfg.data.seed, "bench", kind, radius_index, trial), bench.dim, radius, kind)
        for method in bench.methods:
            solver_cfg = SolverConfig(method=method, max_iters=bench.max_iters, rel_tol=bench.rel_tol)
            started = time.perf_counter()
            _, trace = solve(f, np.zeros(bench.dim), solver_cfg)
            elapsed = (time.perf_counter() - started) * 1000.0
            rows.append({
                "method": method, "map": kind, "spectral_radius": radius, "trial": trial,
                "iters": trace.n_iters, "converged": trace.converged,
                "wall_ms": elapsed if cfg.run.record_wall_time else 0.0,
            })
    return rows


def cmd_bench_solvers(cfg: ExperimentConfig, out_dir: str) -> dict[tuple[str, str, float], float]:
    """
    ``deqflow bench-solvers``: iterations to ``bench.rel_tol`` for every method
    on seeded contractive maps; every method sees the same problem instances.
    Writes ``bench_solvers.csv`` and ``bench_summary.csv``.
    """
    _start(cfg, out_dir)
    cells = [
        (kind, i, radius)
        for kind in cfg.bench.maps
        for i, radius in enumerate(cfg.bench.spectral_radii)
    ]
    jobs = [(lambda cell=cell: _bench_cell(cfg, *cell)) for cell in cells]
    rows = [row for shard in _run_concurrently(jobs) for row in shard]

    medians = {}
    summary = []
    for kind, _, radius in cells:
        for method in cfg.bench.methods:
            iters = [r["iters"] for r in rows if r["method"] == method and r["map"] == kind and r["spectral_radius"] == radius]
            medians[(method, kind, radius)] = float(np.median(iters))
            summary.append({"method": method, "map": kind, "spectral_radius": radius,
                            "median_iters": medians[(method, kind, radius)]})
            logger.info(f"[bench] {method} on {kind} rho={radius}: median {medians[(method, kind, radius)]} iterations")
    write_table(os.path.join(out_dir, "bench_solvers.csv"), BENCH_COLUMNS, rows)
    write_table(os.path.join(out_dir, "bench_summary.csv"), BENCH_SUMMARY_COLUMNS, summary)
    return medians
