"""
Black-box fixed-point solvers for z = f(z).

Three methods share one driver (:func:`solve`) and one stopping rule:

1.  **Picard**: damped plain iteration, ``z <- (1 - d) z + d f(z)``.
2.  **Anderson**: mixes the last ``m`` iterates with weights from a
    ridge-regularized least-squares problem on their residuals.
3.  **Broyden**: quasi-Newton root finding on ``g(z) = f(z) - z`` with a
    limited-memory ("good" Broyden) approximation of the inverse Jacobian.

The driver evaluates ``f(z0)`` once to get the initial residual, then takes
one solver step per iteration and evaluates ``f`` at the new iterate. So
``trace.n_iters`` counts function evaluations after z0, and the identity map
converges at iteration 1. The returned state is the best iterate seen (by
absolute residual), since quasi-Newton residuals are not monotone. Non-finite
values stop the solve with ``trace.diverged`` set instead of raising.
"""

import logging
import math
import warnings
from collections import deque
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from config import (
    ANDERSON_BETA,
    ANDERSON_MEMORY,
    ANDERSON_RIDGE,
    BROYDEN_MIN_DENOMINATOR,
    FORWARD_MAX_ITERS,
    FORWARD_REL_TOL,
    RESIDUAL_FLOOR,
    SOLVER_METHOD,
)
from numerics.tensor_ops import Tensor, as_tensor

logger = logging.getLogger(__name__)

METHODS = ("picard", "anderson", "broyden")
RECORD_MODES = ("none", "sampled", "all")


@dataclass(frozen=True)
class SolverConfig:
    """Solver choice, stopping rule and trace recording for one solve."""
    method: str = SOLVER_METHOD
    max_iters: int = FORWARD_MAX_ITERS
    rel_tol: float = FORWARD_REL_TOL
    abs_tol: float = 0.0
    anderson_memory: int = ANDERSON_MEMORY
    anderson_beta: float = ANDERSON_BETA
    anderson_ridge: float = ANDERSON_RIDGE
    picard_damping: float = 1.0
    record: str = "none"
    record_indices: tuple[int, ...] = ()

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"Unknown solver method '{self.method}', expected one of {METHODS}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.rel_tol < 0 or self.abs_tol < 0:
            raise ValueError("Solver tolerances must be non-negative")
        if self.anderson_memory < 1:
            raise ValueError(f"anderson_memory must be >= 1, got {self.anderson_memory}")
        if not 0 < self.anderson_beta <= 1:
            raise ValueError(f"anderson_beta must be in (0, 1], got {self.anderson_beta}")
        if self.anderson_ridge <= 0:
            raise ValueError(f"anderson_ridge must be positive, got {self.anderson_ridge}")
        if not 0 < self.picard_damping <= 1:
            raise ValueError(f"picard_damping must be in (0, 1], got {self.picard_damping}")
        if self.record not in RECORD_MODES:
            raise ValueError(f"Unknown record mode '{self.record}', expected one of {RECORD_MODES}")


@dataclass
class SolverTrace:
    """Everything a solve observed. ``len(residuals) == n_iters`` always holds."""
    residuals: list[float] = field(default_factory=list)
    rel_residuals: list[float] = field(default_factory=list)
    n_iters: int = 0
    converged: bool = False
    diverged: bool = False
    recorded_iterates: list[tuple[int, Tensor]] = field(default_factory=list)
    initial_residual: float = math.nan
    initial_rel_residual: float = math.nan
    best_index: int = 0
    fallback_steps: int = 0
    skipped_updates: int = 0
    n_evals: int = 0

    @property
    def final_residual(self) -> float:
        return self.residuals[-1] if self.residuals else self.initial_residual

    @property
    def final_rel_residual(self) -> float:
        return self.rel_residuals[-1] if self.rel_residuals else self.initial_rel_residual

    @property
    def best_residual(self) -> float:
        return min([self.initial_residual, *self.residuals])

    def drop_iterates(self) -> None:
        """Forgets every recorded iterate (the residual history stays)."""
        self.recorded_iterates.clear()


def residual_norms(z: Tensor, fz: Tensor) -> tuple[float, float]:
    """Absolute ``||f(z) - z||`` and relative ``||f(z) - z|| / max(||f(z)||, 1e-8)`` residuals."""
    absolute = float(np.linalg.norm(fz - z))
    return absolute, absolute / max(float(np.linalg.norm(fz)), RESIDUAL_FLOOR)


def picard_step(f: Callable[[Tensor], Tensor], z: Tensor, damping: float, fz: Tensor | None = None) -> Tensor:
    """``(1 - damping) z + damping f(z)``; pass ``fz`` to reuse an evaluation already made."""
    if not 0 < damping <= 1:
        raise ValueError(f"damping must be in (0, 1], got {damping}")
    if fz is None:
        fz = f(z)
    return (1.0 - damping) * z + damping * fz


def anderson_step(history: Sequence[tuple[Tensor, Tensor]], beta: float, ridge: float) -> tuple[Tensor, bool]:
    """
    One Anderson mixing step over ``history`` (oldest first) of ``(z_i, f(z_i))`` pairs.

    Solves ``min ||sum_i a_i g_i||^2  s.t.  sum_i a_i = 1`` for the residuals
    ``g_i = f(z_i) - z_i`` through the normal equations ``(G^T G + lambda I) y = 1``,
    ``a = y / sum(y)``, then mixes ``(1 - beta) sum a_i z_i + beta sum a_i f(z_i)``.
    ``lambda`` is ``ridge`` times the mean squared residual norm, so the
    regularization keeps its strength as the residuals shrink.

    Returns:
        The new iterate and a flag that is True when the normal equations could
        not be solved and a plain Picard step on the newest pair was taken instead.
    """
    if not history:
        raise ValueError("anderson_step needs at least one (z, f(z)) pair")
    zs = np.stack([z for z, _ in history], axis=1)
    fzs = np.stack([fz for _, fz in history], axis=1)
    residuals = fzs - zs
    gram = residuals.T @ residuals
    scale = max(float(np.trace(gram)) / len(history), RESIDUAL_FLOOR ** 2)
    gram = gram + ridge * scale * np.eye(len(history))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            y = scipy.linalg.solve(gram, np.ones(len(history)), assume_a="sym")
        total = y.sum()
        if not np.all(np.isfinite(y)) or total == 0.0:
            raise scipy.linalg.LinAlgError("degenerate Anderson weights")
    except (scipy.linalg.LinAlgError, ValueError) as e:
        logger.warning(f"Anderson normal equations failed ({e}); taking a Picard step.")
        z_last, fz_last = history[-1]
        return (1.0 - beta) * z_last + beta * fz_last, True
    alpha = y / total
    return (1.0 - beta) * (zs @ alpha) + beta * (fzs @ alpha), False


@dataclass
class BroydenState:
    """
    Inverse-Jacobian approximation ``B = -I + sum_i u_i v_i^T`` of g = f(z) - z.

    Also remembers the previous ``(z, g)`` pair so the secant update can be
    applied when the next pair arrives.
    """
    us: list[Tensor] = field(default_factory=list)
    vs: list[Tensor] = field(default_factory=list)
    prev_z: Tensor | None = None
    prev_g: Tensor | None = None
    skipped_updates: int = 0

    @property
    def rank(self) -> int:
        return len(self.us)

    def matvec(self, x: Tensor) -> Tensor:
        out = -x
        for u, v in zip(self.us, self.vs):
            out = out + u * (v @ x)
        return out

    def rmatvec(self, x: Tensor) -> Tensor:
        out = -x
        for u, v in zip(self.us, self.vs):
            out = out + v * (u @ x)
        return out


def broyden_step(state: BroydenState, z: Tensor, g: Tensor) -> tuple[Tensor, BroydenState]:
    """
    Applies the pending good-Broyden update, then steps ``z' = z - B g``.

    The update uses ``dz = z - z_prev`` and ``dg = g - g_prev``:
    ``B <- B + (dz - B dg)(dz^T B) / (dz^T B dg)``. It is skipped (and counted in
    ``state.skipped_updates``) when the denominator is below 1e-12 in magnitude.
    """
    if state.prev_z is not None:
        dz = z - state.prev_z
        dg = g - state.prev_g
        b_dg = state.matvec(dg)
        denominator = float(dz @ b_dg)
        if abs(denominator) < BROYDEN_MIN_DENOMINATOR:
            state.skipped_updates += 1
            logger.debug(f"Broyden update skipped, denominator {denominator:.3e}")
        else:
            state.us.append((dz - b_dg) / denominator)
            state.vs.append(state.rmatvec(dz))
    state.prev_z = z
    state.prev_g = g
    return z - state.matvec(g), state


def _is_converged(absolute: float, relative: float, cfg: SolverConfig) -> bool:
    return (cfg.rel_tol > 0 and relative <= cfg.rel_tol) or (cfg.abs_tol > 0 and absolute <= cfg.abs_tol)


def solve(f: Callable[[Tensor], Tensor], z0, cfg: SolverConfig) -> tuple[Tensor, SolverTrace]:
    """
    Solves ``z = f(z)`` starting from ``z0``.

    Args:
        f: Map from a tensor shaped like ``z0`` to a tensor of the same size.
        z0: Initial guess.
        cfg: Method, budget, tolerances and recording options.

    Returns:
        ``(z_star, trace)`` where ``z_star`` has the shape of ``z0`` and is the
        iterate with the smallest absolute residual (z0 included).
    """
    z0 = as_tensor(z0)
    shape = z0.shape
    trace = SolverTrace()
    record_indices = frozenset(cfg.record_indices)

    def evaluate(v: Tensor) -> Tensor:
        trace.n_evals += 1
        return as_tensor(f(v.reshape(shape))).ravel()

    z = z0.ravel().copy()
    fz = evaluate(z)
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(fz))):
        logger.warning("Initial state or its image is non-finite; solve aborted.")
        trace.diverged = True
        return z0.copy(), trace

    trace.initial_residual, trace.initial_rel_residual = residual_norms(z, fz)
    best_z, best_residual = z.copy(), trace.initial_residual
    if cfg.record == "all":
        trace.recorded_iterates.append((0, z.reshape(shape).copy()))

    history = deque(maxlen=cfg.anderson_memory)
    broyden = BroydenState()

    for k in range(1, cfg.max_iters + 1):
        if cfg.method == "picard":
            z_next = picard_step(f, z, cfg.picard_damping, fz=fz)
        elif cfg.method == "anderson":
            history.append((z, fz))
            z_next, fell_back = anderson_step(history, cfg.anderson_beta, cfg.anderson_ridge)
            trace.fallback_steps += int(fell_back)
        else:
            z_next, broyden = broyden_step(broyden, z, fz - z)

        if not np.all(np.isfinite(z_next)):
            trace.diverged = True
            break
        fz_next = evaluate(z_next)
        if not np.all(np.isfinite(fz_next)):
            trace.diverged = True
            break

        z, fz = z_next, fz_next
        absolute, relative = residual_norms(z, fz)
        trace.residuals.append(absolute)
        trace.rel_residuals.append(relative)
        trace.n_iters = k
        logger.debug(f"[{cfg.method}] iter {k}: abs residual {absolute:.3e}, rel residual {relative:.3e}")

        if cfg.record == "all" or (cfg.record == "sampled" and k in record_indices):
            trace.recorded_iterates.append((k, z.reshape(shape).copy()))
        if absolute < best_residual:
            best_z, best_residual = z.copy(), absolute
            trace.best_index = k
        if _is_converged(absolute, relative, cfg):
            trace.converged = True
            break

    trace.skipped_updates = broyden.skipped_updates
    if trace.diverged:
        logger.warning(
            f"[{cfg.method}] non-finite iterate after {trace.n_iters} iterations; "
            f"returning best finite iterate (residual {best_residual:.3e})."
        )
    return best_z.reshape(shape), trace
