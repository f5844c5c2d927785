"""
The equilibrium layer: forward solve, correction sampling, loss and backward assembly.

One training step for one sample runs

    forward_solve -> assemble_loss -> backward_grads

The forward solve records only the sparse correction iterates chosen by the
:class:`CorrectionSchedule`, so the backward pass reads at most r+1 states
(z* and r corrections) however many solver iterations were taken.
"""

import logging
from collections.abc import Callable, Hashable
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from config import CORRECTION_GAMMA_BASE
from engine.implicit_grad import GradientMode, VjpBundle, ift_gradient, phantom_gradient
from numerics.rng import Rng
from numerics.tensor_ops import ShapeError, Tensor, as_tensor
from solver.fixed_point import SolverConfig, SolverTrace, solve

logger = logging.getLogger(__name__)

PLACEMENTS = ("uniform", "random")
LOSS_KINDS = ("sq_l2", "l1")


@dataclass
class EquilibriumState:
    """
    A hidden state ``h`` [C_h,H',W'] and a flow ``f`` [2,H',W'] at feature resolution.

    The solver sees ``pack()``: ``h.ravel()`` followed by ``f.ravel()``.
    """
    h: Tensor
    f: Tensor

    def __post_init__(self):
        self.h = as_tensor(self.h)
        self.f = as_tensor(self.f)
        if self.h.ndim != 3 or self.f.ndim != 3 or self.f.shape[0] != 2:
            raise ShapeError(f"Expected h [C,H,W] and f [2,H,W], got {self.h.shape} and {self.f.shape}")
        if self.h.shape[1:] != self.f.shape[1:]:
            raise ShapeError(f"h and f spatial dims differ: {self.h.shape[1:]} vs {self.f.shape[1:]}")

    @property
    def hidden_channels(self) -> int:
        return self.h.shape[0]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.h.shape[1], self.h.shape[2]

    @property
    def size(self) -> int:
        return self.h.size + self.f.size

    def pack(self) -> Tensor:
        return np.concatenate([self.h.ravel(), self.f.ravel()])

    @classmethod
    def unpack(cls, vector: Tensor, hidden_channels: int, height: int, width: int) -> "EquilibriumState":
        vector = as_tensor(vector).ravel()
        split = hidden_channels * height * width
        if vector.size != split + 2 * height * width:
            raise ShapeError(
                f"Vector of size {vector.size} does not unpack to C_h={hidden_channels}, {height}x{width}"
            )
        return cls(
            h=vector[:split].reshape(hidden_channels, height, width).copy(),
            f=vector[split:].reshape(2, height, width).copy(),
        )

    @classmethod
    def zeros(cls, hidden_channels: int, height: int, width: int) -> "EquilibriumState":
        return cls(h=np.zeros((hidden_channels, height, width)), f=np.zeros((2, height, width)))

    def zeros_like(self) -> "EquilibriumState":
        return EquilibriumState.zeros(self.hidden_channels, *self.spatial)

    def like(self, vector: Tensor) -> "EquilibriumState":
        """Unpacks ``vector`` with this state's layout."""
        return EquilibriumState.unpack(vector, self.hidden_channels, *self.spatial)

    def same_layout(self, other: "EquilibriumState") -> bool:
        return self.h.shape == other.h.shape and self.f.shape == other.f.shape


def default_gammas(r: int) -> tuple[float, ...]:
    """``gamma_i = 0.8 ** (r - i)`` for i = 1..r, so the latest correction weighs most."""
    return tuple(CORRECTION_GAMMA_BASE ** (r - i) for i in range(1, r + 1))


@dataclass(frozen=True)
class CorrectionSchedule:
    """
    Sparse fixed-point correction.

    Attributes:
        freq: Number of corrections r (0 disables correction).
        gammas: One loss weight per correction, each in (0, 1]. ``gamma=1``
            is allowed so a correction can coincide with the main loss.
        placement: ``"uniform"`` or ``"random"`` positions on the trajectory.
    """
    freq: int = 0
    gammas: tuple[float, ...] = ()
    placement: str = "uniform"

    def __post_init__(self):
        if self.freq < 0:
            raise ValueError(f"correction freq must be >= 0, got {self.freq}")
        if len(self.gammas) != self.freq:
            raise ValueError(f"Expected {self.freq} correction weights, got {len(self.gammas)}")
        if any(not 0 < g <= 1 for g in self.gammas):
            raise ValueError(f"Correction weights must be in (0, 1], got {self.gammas}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"Unknown placement '{self.placement}', expected one of {PLACEMENTS}")

    @classmethod
    def with_defaults(cls, freq: int, placement: str = "uniform") -> "CorrectionSchedule":
        return cls(freq=freq, gammas=default_gammas(freq), placement=placement)

    @classmethod
    def disabled(cls) -> "CorrectionSchedule":
        return cls()


@dataclass
class ReuseState:
    """The previous frame's equilibrium for one stream, if any."""
    state: EquilibriumState | None = None
    stream_id: Hashable | None = None

    def warm_start(self, stream_id: Hashable, template: EquilibriumState) -> EquilibriumState | None:
        """The stored state when it belongs to ``stream_id`` and matches ``template``'s layout."""
        if self.state is None or self.stream_id != stream_id:
            return None
        if not self.state.same_layout(template):
            logger.warning(f"Discarding stored equilibrium for stream {stream_id}: layout changed.")
            return None
        return self.state


def advance_reuse(reuse: ReuseState | None, z_star: EquilibriumState, stream_id: Hashable) -> ReuseState:
    """Returns the reuse state holding ``z_star`` for ``stream_id``."""
    if reuse is not None and reuse.stream_id is not None and reuse.stream_id != stream_id:
        logger.debug(f"Reuse moves from stream {reuse.stream_id} to {stream_id}.")
    return ReuseState(
        state=EquilibriumState(h=z_star.h.copy(), f=z_star.f.copy()),
        stream_id=stream_id,
    )


def sample_correction_indices(
    n_iters: int,
    r: int,
    placement: str = "uniform",
    rng: Rng | None = None,
) -> tuple[list[int], bool]:
    """
    Chooses r interior positions on a trajectory of ``n_iters`` iterations.

    Uniform placement splits the trajectory into r+1 equal segments
    (``floor(i * n_iters / (r + 1))`` for i = 1..r); random placement draws r
    distinct indices from [1, n_iters - 1]. When ``n_iters < r + 1`` there
    are not enough interior points and all of them are returned.

    Returns:
        The sorted indices, and True when fewer than r could be placed.
    """
    if r < 0:
        raise ValueError(f"r must be >= 0, got {r}")
    if placement not in PLACEMENTS:
        raise ValueError(f"Unknown placement '{placement}', expected one of {PLACEMENTS}")
    if r == 0:
        return [], False
    if n_iters < r + 1:
        logger.warning(f"Only {max(n_iters - 1, 0)} interior iterations for {r} corrections.")
        return list(range(1, n_iters)), True
    if placement == "uniform":
        return [i * n_iters // (r + 1) for i in range(1, r + 1)], False
    if rng is None:
        raise ValueError("Random correction placement needs an rng")
    drawn = rng.choice(np.arange(1, n_iters), size=r, replace=False)
    return sorted(int(i) for i in drawn), False


@dataclass
class ForwardResult:
    """
    Output of :func:`forward_solve`.

    ``corrections`` pairs each scheduled index with the iterate there (or
    z* when the solve stopped before reaching it).
    """
    z_star: EquilibriumState
    corrections: list[tuple[int, EquilibriumState]]
    trace: SolverTrace
    warm_started: bool = False
    truncated: bool = False

    def retained_states(self) -> list[EquilibriumState]:
        return [self.z_star, *(state for _, state in self.corrections)]


def forward_solve(
    operator: Callable[[Tensor], Tensor],
    template: EquilibriumState,
    cfg: SolverConfig,
    schedule: CorrectionSchedule = CorrectionSchedule(),
    reuse: ReuseState | None = None,
    stream_id: Hashable | None = None,
    rng: Rng | None = None,
) -> ForwardResult:
    """
    Solves ``z = operator(z)`` for one problem.

    Args:
        operator: The equilibrium function closed over its input, on packed states.
        template: Any state with the problem's layout; only its shapes are used.
        cfg: Forward solver settings. Recording options are overridden here.
        schedule: Correction frequency, weights and placement.
        reuse: Previous equilibrium of the stream; used as z0 when it matches.
        stream_id: Identity of the current stream for the reuse check.
        rng: Needed only for random placement.

    Returns:
        A :class:`ForwardResult`. A diverged solve is returned with
        ``trace.diverged`` set and the best finite iterate as z*.
    """
    indices, truncated = sample_correction_indices(cfg.max_iters, schedule.freq, schedule.placement, rng)
    solve_cfg = replace(
        cfg,
        record="sampled" if indices else "none",
        record_indices=tuple(indices),
    )

    warm = reuse.warm_start(stream_id, template) if reuse is not None else None
    z0 = warm if warm is not None else template.zeros_like()
    z_flat, trace = solve(operator, z0.pack(), solve_cfg)
    z_star = template.like(z_flat)

    recorded = dict(trace.recorded_iterates)
    corrections = [(i, template.like(recorded[i]) if i in recorded else z_star) for i in indices]
    # Only the sampled iterates outlive the solve.
    trace.drop_iterates()

    logger.debug(
        f"Forward solve ({'warm' if warm is not None else 'cold'}): {trace.n_iters} iterations, "
        f"rel residual {trace.final_rel_residual:.3e}, corrections at {indices}"
    )
    return ForwardResult(
        z_star=z_star,
        corrections=corrections,
        trace=trace,
        warm_started=warm is not None,
        truncated=truncated,
    )


def _distance(f: Tensor, f_gt: Tensor, loss_kind: str) -> tuple[float, Tensor]:
    diff = f - f_gt
    if loss_kind == "sq_l2":
        return float(np.sum(diff * diff)), 2.0 * diff
    return float(np.sum(np.abs(diff))), np.sign(diff)


@dataclass
class LossParts:
    """
    The correction-augmented loss of one sample and its state cotangents.

    Cotangents are packed like the states; their h part is zero and each
    correction cotangent already carries its gamma.
    """
    total: float
    main: float
    corrections: list[float] = field(default_factory=list)
    main_cotangent: Tensor | None = None
    correction_cotangents: list[Tensor] = field(default_factory=list)

    @property
    def correction_total(self) -> float:
        return self.total - self.main


def assemble_loss(
    z_star: EquilibriumState,
    corrections: list[tuple[int, EquilibriumState]],
    f_gt: Tensor,
    schedule: CorrectionSchedule,
    loss_kind: str = "sq_l2",
) -> LossParts:
    """
    ``total = dist(f*, f_gt) + sum_i gamma_i dist(f_i, f_gt)``, flow components only.

    ``dist`` is the summed squared error (``sq_l2``) or summed absolute error
    (``l1``). Corrections are paired with the schedule's weights in order.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"Unknown loss kind '{loss_kind}', expected one of {LOSS_KINDS}")
    f_gt = as_tensor(f_gt)
    if len(corrections) > len(schedule.gammas):
        raise ValueError(f"{len(corrections)} corrections but only {len(schedule.gammas)} weights")
    for state in (z_star, *(s for _, s in corrections)):
        if state.f.shape != f_gt.shape:
            raise ShapeError(f"Flow of shape {state.f.shape} does not match ground truth {f_gt.shape}")

    def packed_cotangent(state: EquilibriumState, d_f: Tensor) -> Tensor:
        return np.concatenate([np.zeros(state.h.size), d_f.ravel()])

    main, d_main = _distance(z_star.f, f_gt, loss_kind)
    parts = LossParts(total=main, main=main, main_cotangent=packed_cotangent(z_star, d_main))
    for (_, state), gamma in zip(corrections, schedule.gammas):
        value, d_f = _distance(state.f, f_gt, loss_kind)
        parts.corrections.append(gamma * value)
        parts.correction_cotangents.append(packed_cotangent(state, gamma * d_f))
        parts.total += gamma * value
    return parts


@dataclass
class BackwardResult:
    grad: Tensor
    fell_back: bool = False
    adjoint_trace: SolverTrace | None = None


def backward_grads(
    bundle: VjpBundle,
    z_star: EquilibriumState,
    corrections: list[tuple[int, EquilibriumState]],
    x: Any,
    loss: LossParts,
    mode: GradientMode,
) -> BackwardResult:
    """
    Parameter gradient of ``loss.total``.

    The main term uses ``mode`` at z*. Every correction term uses the 1-step
    rule at its own state, whatever the main mode. Under IFT, a diverged
    adjoint solve falls back to the 1-step gradient and sets ``fell_back``.
    Only z* and the correction states are read.
    """
    z_flat = z_star.pack()
    fell_back = False
    adjoint_trace = None
    if mode.tag == "ift":
        grad, adjoint_trace = ift_gradient(bundle, z_flat, x, loss.main_cotangent, mode.backward or SolverConfig())
        if adjoint_trace.diverged or not np.all(np.isfinite(grad)):
            logger.warning("IFT adjoint diverged; using the 1-step gradient for this sample.")
            grad = phantom_gradient(bundle, z_flat, x, loss.main_cotangent, k=1)
            fell_back = True
    else:
        grad = phantom_gradient(bundle, z_flat, x, loss.main_cotangent, k=mode.k, damping=mode.damping)

    for (_, state), cotangent in zip(corrections, loss.correction_cotangents):
        grad = grad + phantom_gradient(bundle, state.pack(), x, cotangent, k=1)
    return BackwardResult(grad=grad, fell_back=fell_back, adjoint_trace=adjoint_trace)
