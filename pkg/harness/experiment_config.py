"""
Experiment configuration: JSON files mapped onto nested dataclasses.

Every section is a dataclass whose defaults come from ``config.py``; a file
only needs the keys it changes. Unknown keys anywhere are a ``ConfigError``.
The resolved configuration (:func:`to_dict`) is what each command echoes into
its output directory, and loading that echo reproduces the run.
"""

import dataclasses
import json
import logging
from dataclasses import dataclass, field

from config import (
    ABLATION_BUDGET,
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    ANDERSON_BETA,
    ANDERSON_MEMORY,
    ANDERSON_RIDGE,
    BATCH_SIZE,
    BENCH_REL_TOL,
    DEFAULT_SEED,
    FORWARD_MAX_ITERS,
    FORWARD_REL_TOL,
    GRAD_CLIP_NORM,
    HUTCHINSON_PROBES,
    IMAGE_SIZE,
    JACOBIAN_REG_WEIGHTS,
    LEARNING_RATE,
    MAX_DISPLACEMENT,
    SMOOTHNESS,
    SOLVER_METHOD,
    WEIGHT_DECAY,
)
from engine.deq_layer import LOSS_KINDS, CorrectionSchedule
from engine.implicit_grad import PROBE_DISTRIBUTIONS, GradientMode
from solver.fixed_point import METHODS, SolverConfig
from toyflow.params import ModelConfig
from toyflow.synthetic import MOTIONS
from utils.parsing import apply_overrides

logger = logging.getLogger(__name__)

MAP_KINDS = ("affine", "tanh")


class ConfigError(ValueError):
    """Invalid, unknown or unreadable experiment configuration."""


@dataclass
class SolverSettings:
    method: str = SOLVER_METHOD
    max_iters: int = FORWARD_MAX_ITERS
    rel_tol: float = FORWARD_REL_TOL
    abs_tol: float = 0.0
    anderson_memory: int = ANDERSON_MEMORY
    anderson_beta: float = ANDERSON_BETA
    anderson_ridge: float = ANDERSON_RIDGE
    picard_damping: float = 1.0

    def to_solver_config(self) -> SolverConfig:
        return SolverConfig(**dataclasses.asdict(self))


@dataclass
class GradientSettings:
    """``mode`` is ``"phantom"`` (k, damping) or ``"ift"`` (uses the adjoint solver)."""
    mode: str = "phantom"
    k: int = 1
    damping: float | str = 1.0


@dataclass
class CorrectionSettings:
    """``gammas`` defaults to ``0.8 ** (freq - i)`` when left null."""
    freq: int = 0
    gammas: list[float] | None = None
    placement: str = "uniform"

    def schedule(self) -> CorrectionSchedule:
        if self.gammas is None:
            return CorrectionSchedule.with_defaults(self.freq, self.placement)
        return CorrectionSchedule(freq=self.freq, gammas=tuple(self.gammas), placement=self.placement)


@dataclass
class JacobianRegSettings:
    """A weight above 0 adds ``weight * ||J_f(z*)||_F^2`` (Hutchinson estimate) to the loss."""
    weight: float = 0.0
    n_probes: int = HUTCHINSON_PROBES
    distribution: str = "gaussian"


@dataclass
class OptimizerSettings:
    lr: float = LEARNING_RATE
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    weight_decay: float = WEIGHT_DECAY
    clip_norm: float = GRAD_CLIP_NORM


@dataclass
class DataSettings:
    """
    Synthetic data. Training pairs are taken frame by frame from consecutive
    streams of ``frames`` pairs; ``n_streams > 0`` cycles over that many
    streams, 0 draws a new stream whenever one runs out.
    """
    seed: int = DEFAULT_SEED
    n_streams: int = 0
    frames: int = 4
    max_disp: float = MAX_DISPLACEMENT
    smoothness: float = SMOOTHNESS
    motion: str = "affine"
    image_size: int = IMAGE_SIZE
    batch_size: int = BATCH_SIZE
    eval_samples: int = 16


@dataclass
class RunSettings:
    steps: int = 200
    eval_every: int = 50
    log_every: int = 10
    loss_kind: str = "sq_l2"
    best_of: int = 1
    record_wall_time: bool = False


@dataclass
class AblationSettings:
    freq_list: list[int] = field(default_factory=lambda: [0, 1])
    budget: int = ABLATION_BUDGET
    include_ift: bool = True
    jr_weights: list[float] = field(default_factory=lambda: list(JACOBIAN_REG_WEIGHTS))


@dataclass
class ReuseSettings:
    n_streams: int = 20
    frames: int = 20


@dataclass
class CorrelationSettings:
    n_samples: int = 200
    max_disps: list[float] = field(default_factory=lambda: [1.0, 4.0, 8.0])


@dataclass
class BenchSettings:
    dim: int = 64
    spectral_radii: list[float] = field(default_factory=lambda: [0.0, 0.5, 0.9])
    trials: int = 20
    max_iters: int = 1000
    rel_tol: float = BENCH_REL_TOL
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    maps: list[str] = field(default_factory=lambda: ["affine"])


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    forward_solver: SolverSettings = field(default_factory=SolverSettings)
    # None means "same as forward_solver".
    adjoint_solver: SolverSettings | None = None
    gradient: GradientSettings = field(default_factory=GradientSettings)
    correction: CorrectionSettings = field(default_factory=CorrectionSettings)
    jacobian_reg: JacobianRegSettings = field(default_factory=JacobianRegSettings)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    data: DataSettings = field(default_factory=DataSettings)
    run: RunSettings = field(default_factory=RunSettings)
    ablation: AblationSettings = field(default_factory=AblationSettings)
    reuse: ReuseSettings = field(default_factory=ReuseSettings)
    correlation: CorrelationSettings = field(default_factory=CorrelationSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)

    def forward_config(self) -> SolverConfig:
        return self.forward_solver.to_solver_config()

    def adjoint_config(self) -> SolverConfig:
        return (self.adjoint_solver or self.forward_solver).to_solver_config()

    def gradient_mode(self) -> GradientMode:
        if self.gradient.mode == "ift":
            return GradientMode.ift(self.adjoint_config())
        return GradientMode.phantom(self.gradient.k, self.gradient.damping)

    def schedule(self) -> CorrectionSchedule:
        return self.correction.schedule()

    def validate(self) -> "ExperimentConfig":
        """Builds every derived object once so bad values surface as ConfigError."""
        try:
            self.forward_config()
            self.adjoint_config()
            self.gradient_mode()
            self.schedule()
        except ValueError as e:
            raise ConfigError(str(e)) from e

        checks = [
            (self.run.loss_kind in LOSS_KINDS, f"run.loss_kind must be one of {LOSS_KINDS}"),
            (self.run.steps >= 0, "run.steps must be >= 0"),
            (self.run.eval_every >= 0, "run.eval_every must be >= 0"),
            (self.run.log_every >= 1, "run.log_every must be >= 1"),
            (self.run.best_of >= 1, "run.best_of must be >= 1"),
            (self.data.motion in MOTIONS, f"data.motion must be one of {MOTIONS}"),
            (self.data.batch_size >= 1, "data.batch_size must be >= 1"),
            (self.data.frames >= 1, "data.frames must be >= 1"),
            (self.data.n_streams >= 0, "data.n_streams must be >= 0"),
            (self.data.eval_samples >= 1, "data.eval_samples must be >= 1"),
            (self.data.image_size % self.model.total_stride == 0,
             "data.image_size must be divisible by model.total_stride"),
            ((self.data.image_size // self.model.total_stride) % 2 ** (self.model.corr_levels - 1) == 0,
             "the feature grid must be divisible by 2 ** (model.corr_levels - 1)"),
            (0 <= self.data.max_disp < self.data.image_size / 4, "data.max_disp must be below image_size / 4"),
            (self.jacobian_reg.weight >= 0, "jacobian_reg.weight must be >= 0"),
            (self.jacobian_reg.distribution in PROBE_DISTRIBUTIONS,
             f"jacobian_reg.distribution must be one of {PROBE_DISTRIBUTIONS}"),
            (self.optimizer.lr > 0 and self.optimizer.clip_norm >= 0, "optimizer.lr must be > 0, clip_norm >= 0"),
            (all(f in (0, 1, 2, 3) for f in self.ablation.freq_list), "ablation.freq_list must be a subset of {0,1,2,3}"),
            (self.ablation.budget >= 1, "ablation.budget must be >= 1"),
            (self.reuse.n_streams >= 1 and self.reuse.frames >= 1, "reuse.n_streams and reuse.frames must be >= 1"),
            (self.correlation.n_samples >= 1 and bool(self.correlation.max_disps), "correlation needs samples and max_disps"),
            (all(0 <= d < self.data.image_size / 4 for d in self.correlation.max_disps),
             "correlation.max_disps must lie below image_size / 4"),
            (all(0 <= r < 1 for r in self.bench.spectral_radii), "bench.spectral_radii must lie in [0, 1)"),
            (all(m in METHODS for m in self.bench.methods), f"bench.methods must be drawn from {METHODS}"),
            (all(m in MAP_KINDS for m in self.bench.maps), f"bench.maps must be drawn from {MAP_KINDS}"),
            (self.bench.dim >= 1 and self.bench.trials >= 1, "bench.dim and bench.trials must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self


SECTION_TYPES = {
    "model": ModelConfig,
    "forward_solver": SolverSettings,
    "adjoint_solver": SolverSettings,
    "gradient": GradientSettings,
    "correction": CorrectionSettings,
    "jacobian_reg": JacobianRegSettings,
    "optimizer": OptimizerSettings,
    "data": DataSettings,
    "run": RunSettings,
    "ablation": AblationSettings,
    "reuse": ReuseSettings,
    "correlation": CorrelationSettings,
    "bench": BenchSettings,
}


def _build_section(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"'{path}' must be an object, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown key(s) {unknown} in '{path}'")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid '{path}': {e}") from e


def from_dict(raw: dict) -> ExperimentConfig:
    """Builds and validates a config from parsed JSON."""
    if not isinstance(raw, dict):
        raise ConfigError("The configuration must be a JSON object")
    unknown = sorted(set(raw) - set(SECTION_TYPES))
    if unknown:
        raise ConfigError(f"Unknown top-level key(s) {unknown}")
    sections = {}
    for name, value in raw.items():
        if name == "adjoint_solver" and value is None:
            sections[name] = None
            continue
        sections[name] = _build_section(SECTION_TYPES[name], value, name)
    return ExperimentConfig(**sections).validate()


def to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str | None, overrides: list[str] | None = None, seed: int | None = None) -> ExperimentConfig:
    """
    Reads a JSON config (or starts from defaults when ``path`` is None).

    Args:
        path: JSON file.
        overrides: ``key.path=value`` strings applied before validation.
        seed: Replaces ``data.seed`` when given.
    """
    raw = {}
    if path is not None:
        try:
            with open(path) as f:
                raw = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"Config file '{path}' not found") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file '{path}' is not valid JSON: {e}") from e
    try:
        apply_overrides(raw, overrides)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if seed is not None:
        raw.setdefault("data", {})["seed"] = seed
    cfg = from_dict(raw)
    logger.debug(f"Loaded config from {path or '<defaults>'} with {len(overrides or [])} override(s)")
    return cfg


def save_config(path: str, cfg: ExperimentConfig) -> None:
    with open(path, "w") as f:
        json.dump(to_dict(cfg), f, indent=2)
