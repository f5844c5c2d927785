"""
Training and evaluation of the toy flow model.

Each step draws a batch of synthetic pairs and, for every pair, runs the
equilibrium layer end to end:

    forward_solve -> assemble_loss -> backward_grads (+ Jacobian penalty)

The batch-mean gradient then goes through a clipped AdamW update. Steps with
a non-finite loss or gradient are skipped; too many in a row abort the run.
"""

import logging
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from config import MAX_CONSECUTIVE_SKIPS
from engine.deq_layer import assemble_loss, backward_grads, forward_solve
from engine.implicit_grad import jacobian_reg_grad
from harness.experiment_config import DataSettings, ExperimentConfig, save_config
from harness.optimizer import AdamW
from harness.run_log import BEST_OF_COLUMNS, EVAL_COLUMNS, TRAIN_COLUMNS, RunLog, write_table
from numerics.rng import make_rng
from numerics.tensor_ops import Tensor, downsample_flow
from solver.fixed_point import SolverConfig
from toyflow.metrics import epe, f1_all
from toyflow.model import FlowModel
from toyflow.params import ParamLayout, load_checkpoint, save_checkpoint
from toyflow.synthetic import FlowSample, synth_sequence

logger = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoint"


class NumericalAbort(RuntimeError):
    """Raised when training keeps producing non-finite losses or gradients."""


class TrainingStream:
    """
    Deterministic supply of training pairs.

    Pair ``n`` is frame ``n % frames`` of stream ``n // frames`` (taken modulo
    ``n_streams`` when that is positive). Streams are generated on demand and
    the two most recent are kept.
    """

    def __init__(self, data: DataSettings, label: str = "train"):
        self.data = data
        self.label = label
        self._cache: dict[int, list[FlowSample]] = {}

    def _stream(self, stream_id: int) -> list[FlowSample]:
        if stream_id not in self._cache:
            if len(self._cache) >= 2:
                self._cache.pop(next(iter(self._cache)))
            d = self.data
            self._cache[stream_id] = synth_sequence(
                make_rng(d.seed, self.label, stream_id), d.frames, d.image_size, d.image_size,
                d.max_disp, d.smoothness, d.motion, seed=d.seed, stream_id=stream_id,
            )
        return self._cache[stream_id]

    def sample(self, index: int) -> FlowSample:
        stream_id, frame = divmod(index, self.data.frames)
        if self.data.n_streams > 0:
            stream_id %= self.data.n_streams
        return self._stream(stream_id)[frame]

    def batch(self, step: int) -> list[FlowSample]:
        """The pairs of 1-based training step ``step``."""
        size = self.data.batch_size
        return [self.sample((step - 1) * size + b) for b in range(size)]


def held_out_set(data: DataSettings, n_samples: int | None = None, max_disp: float | None = None) -> list[FlowSample]:
    """Single-pair streams from a seed path disjoint from training."""
    n_samples = data.eval_samples if n_samples is None else n_samples
    max_disp = data.max_disp if max_disp is None else max_disp
    return [
        synth_sequence(
            make_rng(data.seed, "eval", i), 1, data.image_size, data.image_size,
            max_disp, data.smoothness, data.motion, seed=data.seed, stream_id=i,
        )[0]
        for i in range(n_samples)
    ]


@dataclass
class StepStats:
    loss_total: float = 0.0
    loss_main: float = 0.0
    loss_cor: float = 0.0
    fwd_iters: int = 0
    abs_residual: float = 0.0
    rel_residual: float = 0.0
    fallbacks: int = 0


def batch_gradient(
    model: FlowModel,
    theta: Tensor,
    samples: list[FlowSample],
    cfg: ExperimentConfig,
    step: int,
    forward_cfg: SolverConfig | None = None,
) -> tuple[Tensor, StepStats]:
    """
    Batch-mean loss gradient for one training step.

    Losses and residuals in the returned stats are batch means; ``fwd_iters``
    is the sum of the forward traces' iteration counts.
    """
    forward_cfg = forward_cfg or cfg.forward_config()
    schedule = cfg.schedule()
    mode = cfg.gradient_mode()
    jr = cfg.jacobian_reg
    seed = cfg.data.seed
    stats = StepStats()
    grad = np.zeros_like(theta)

    for b, sample in enumerate(samples):
        inp = model.prepare(sample.p1, sample.p2, theta)
        operator = model.operator(inp, theta)
        forward = forward_solve(
            operator, operator.template, forward_cfg, schedule,
            rng=make_rng(seed, "placement", step, b),
        )
        f_gt = downsample_flow(sample.f_gt, cfg.model.total_stride)
        loss = assemble_loss(forward.z_star, forward.corrections, f_gt, schedule, cfg.run.loss_kind)
        bundle = operator.bundle()
        backward = backward_grads(bundle, forward.z_star, forward.corrections, inp, loss, mode)

        sample_grad = backward.grad
        total = loss.total
        if jr.weight > 0:
            estimate, jr_grad = jacobian_reg_grad(
                bundle, forward.z_star.pack(), inp, jr.n_probes,
                make_rng(seed, "hutchinson", step, b), jr.distribution,
            )
            total += jr.weight * estimate
            sample_grad = sample_grad + jr.weight * jr_grad

        grad += sample_grad
        stats.loss_total += total
        stats.loss_main += loss.main
        stats.loss_cor += loss.correction_total
        stats.fwd_iters += forward.trace.n_iters
        stats.abs_residual += forward.trace.final_residual
        stats.rel_residual += forward.trace.final_rel_residual
        stats.fallbacks += int(backward.fell_back)

    n = len(samples)
    stats.loss_total /= n
    stats.loss_main /= n
    stats.loss_cor /= n
    stats.abs_residual /= n
    stats.rel_residual /= n
    return grad / n, stats


def evaluate(model: FlowModel, theta: Tensor, samples: list[FlowSample], forward_cfg: SolverConfig) -> dict:
    """Mean AEPE, F1-all and absolute fixed-point residual over ``samples`` (no correction)."""
    aepes, f1s, residuals = [], [], []
    for sample in samples:
        inp = model.prepare(sample.p1, sample.p2, theta)
        operator = model.operator(inp, theta)
        forward = forward_solve(operator, operator.template, forward_cfg)
        flow = model.to_image_flow(forward.z_star)
        aepes.append(epe(flow, sample.f_gt))
        f1s.append(f1_all(flow, sample.f_gt))
        residuals.append(operator.residual(forward.z_star)[0])
    return {
        "aepe": float(np.mean(aepes)),
        "f1_all": float(np.mean(f1s)),
        "mean_residual": float(np.mean(residuals)),
    }


@dataclass
class TrainResult:
    theta: Tensor
    checkpoint: str
    initial_eval: dict | None = None
    final_eval: dict | None = None
    skipped_steps: int = 0
    train_records: list[dict] = field(default_factory=list)
    eval_records: list[dict] = field(default_factory=list)

    @property
    def fwd_iters_total(self) -> int:
        return sum(r["fwd_iters"] for r in self.train_records)


def train_model(
    cfg: ExperimentConfig,
    out_dir: str,
    forward_cfg: SolverConfig | None = None,
    eval_samples: list[FlowSample] | None = None,
) -> TrainResult:
    """
    Runs ``cfg.run.steps`` training steps and writes logs and a checkpoint to ``out_dir``.

    Args:
        cfg: Validated experiment config.
        out_dir: Receives ``train_log.csv``, ``eval_log.csv`` and ``checkpoint/``.
        forward_cfg: Overrides the forward solver (the ablation uses its own budget).
        eval_samples: Held-out pairs; built from ``cfg.data`` when None.

    Raises:
        NumericalAbort: After more than MAX_CONSECUTIVE_SKIPS skipped steps in a row.
    """
    os.makedirs(out_dir, exist_ok=True)
    forward_cfg = forward_cfg or cfg.forward_config()
    seed = cfg.data.seed
    model = FlowModel(cfg.model, rng=make_rng(seed, "init"))
    theta = model.theta
    opt = cfg.optimizer
    optimizer = AdamW(
        model.layout.size, lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps,
        weight_decay=opt.weight_decay, clip_norm=opt.clip_norm,
    )
    stream = TrainingStream(cfg.data)
    steps = cfg.run.steps
    result = TrainResult(theta=theta, checkpoint=os.path.join(out_dir, CHECKPOINT_DIR))
    if steps > 0 and eval_samples is None:
        eval_samples = held_out_set(cfg.data)

    logger.info(
        f"Training {cfg.model.variant} model ({model.layout.size} parameters) for {steps} steps, "
        f"{cfg.gradient.mode} gradient, {cfg.correction.freq} correction(s), "
        f"{forward_cfg.method} budget {forward_cfg.max_iters}."
    )

    consecutive_skips = 0
    with RunLog(os.path.join(out_dir, "train_log.csv"), TRAIN_COLUMNS) as train_log, \
            RunLog(os.path.join(out_dir, "eval_log.csv"), EVAL_COLUMNS) as eval_log:

        def run_eval(step: int) -> dict:
            metrics = evaluate(model, theta, eval_samples, forward_cfg)
            record = {"step": step, **metrics}
            eval_log.append(record)
            result.eval_records.append(record)
            logger.info(
                f"[eval] step {step}: AEPE {metrics['aepe']:.4f}, F1-all {metrics['f1_all']:.2f}%, "
                f"residual {metrics['mean_residual']:.3e}"
            )
            return metrics

        if steps > 0:
            result.initial_eval = run_eval(0)

        for step in range(1, steps + 1):
            started = time.perf_counter()
            grad, stats = batch_gradient(model, theta, stream.batch(step), cfg, step, forward_cfg)

            if not (np.isfinite(stats.loss_total) and np.all(np.isfinite(grad))):
                consecutive_skips += 1
                result.skipped_steps += 1
                logger.warning(f"Step {step}: non-finite loss or gradient, skipping ({consecutive_skips} in a row).")
                if consecutive_skips > MAX_CONSECUTIVE_SKIPS:
                    logger.critical(f"Aborting after {consecutive_skips} consecutive skipped steps at step {step}.")
                    raise NumericalAbort(
                        f"{consecutive_skips} consecutive non-finite steps (last loss {stats.loss_total}, "
                        f"residual {stats.abs_residual})"
                    )
                continue
            consecutive_skips = 0

            theta = optimizer.step(theta, grad)
            wall_ms = (time.perf_counter() - started) * 1000.0 if cfg.run.record_wall_time else 0.0
            record = {
                "step": step,
                "loss_total": stats.loss_total,
                "loss_main": stats.loss_main,
                "loss_cor": stats.loss_cor,
                "fwd_iters": stats.fwd_iters,
                "abs_residual": stats.abs_residual,
                "rel_residual": stats.rel_residual,
                "wall_ms": wall_ms,
            }
            train_log.append(record)
            result.train_records.append(record)
            if stats.fallbacks:
                logger.warning(f"Step {step}: {stats.fallbacks} sample(s) fell back to the 1-step gradient.")
            if step % cfg.run.log_every == 0:
                logger.info(
                    f"Step {step}/{steps}: loss {stats.loss_total:.4f} (main {stats.loss_main:.4f}, "
                    f"cor {stats.loss_cor:.4f}), {stats.fwd_iters} fwd iters, rel residual {stats.rel_residual:.3e}"
                )
            if (cfg.run.eval_every and step % cfg.run.eval_every == 0) or step == steps:
                result.final_eval = run_eval(step)

    result.theta = theta
    save_checkpoint(result.checkpoint, model.layout, theta)
    return result


def cmd_train(cfg: ExperimentConfig, out_dir: str) -> TrainResult:
    """
    ``deqflow train``: trains once, or ``run.best_of`` times with seeds
    ``seed, seed + 1, ...`` keeping the run with the lowest final AEPE.
    Every run is scored on the held-out set of the base seed.
    """
    os.makedirs(out_dir, exist_ok=True)
    save_config(os.path.join(out_dir, "config.json"), cfg)
    if cfg.run.best_of == 1:
        return train_model(cfg, out_dir)

    results, rows = [], []
    eval_samples = held_out_set(cfg.data) if cfg.run.steps > 0 else None
    for run in range(cfg.run.best_of):
        seed = cfg.data.seed + run
        run_cfg = _with_seed(cfg, seed)
        result = train_model(run_cfg, os.path.join(out_dir, f"run_{run}"), eval_samples=eval_samples)
        results.append(result)
        rows.append({"run": run, "seed": seed, "final_aepe": (result.final_eval or {}).get("aepe")})
    scores = [r["final_aepe"] if r["final_aepe"] is not None else np.inf for r in rows]
    best = int(np.argmin(scores))
    for i, row in enumerate(rows):
        row["best"] = i == best
    write_table(os.path.join(out_dir, "best_of.csv"), BEST_OF_COLUMNS, rows)
    logger.info(f"Best of {cfg.run.best_of} runs: run {best} (seed {rows[best]['seed']}).")
    return results[best]


def _with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(cfg, data=replace(cfg.data, seed=seed))


def cmd_eval(cfg: ExperimentConfig, checkpoint: str, out_dir: str) -> dict:
    """``deqflow eval``: scores a checkpoint on the held-out set; writes ``eval_log.csv`` (step 0)."""
    os.makedirs(out_dir, exist_ok=True)
    save_config(os.path.join(out_dir, "config.json"), cfg)
    model = load_model(cfg, checkpoint)
    metrics = evaluate(model, model.theta, held_out_set(cfg.data), cfg.forward_config())
    write_table(os.path.join(out_dir, "eval_log.csv"), EVAL_COLUMNS, [{"step": 0, **metrics}])
    logger.info(f"Checkpoint {checkpoint}: AEPE {metrics['aepe']:.4f}, F1-all {metrics['f1_all']:.2f}%")
    return metrics


def load_model(cfg: ExperimentConfig, checkpoint: str) -> FlowModel:
    """A model whose every parameter, encoders included, comes from ``checkpoint``."""
    return FlowModel(cfg.model, theta=load_checkpoint(checkpoint, ParamLayout(cfg.model)))


def load_trained(cfg: ExperimentConfig, checkpoint: str | None, out_dir: str) -> tuple[FlowModel, Tensor]:
    """Loads ``checkpoint``, or trains one into ``out_dir/train`` when none is given."""
    if checkpoint is None:
        logger.info("No checkpoint given; training one first.")
        checkpoint = train_model(cfg, os.path.join(out_dir, "train")).checkpoint
    model = load_model(cfg, checkpoint)
    return model, model.theta
