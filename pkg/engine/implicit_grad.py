"""
Backward passes for equilibrium solves.

Given a fixed point z* = f(z*, x) and the loss cotangent dL/dz*, the exact
parameter gradient is

    dL/dtheta = g*^T df/dtheta,   where   g*^T = g*^T df/dz* + dL/dz*.

This module offers three ways to get it:

1.  **IFT** (:func:`ift_gradient`): solve the adjoint fixed-point equation
    for g* with the same solvers as the forward pass.
2.  **Phantom / 1-step** (:func:`phantom_gradient`): truncate the Neumann
    series of the adjoint after k terms with damping lambda. k=1 is the
    1-step gradient, which needs a single parameter VJP and nothing else.
3.  **Jacobian regularization** helpers: a Hutchinson estimate of
    ||df/dz||_F^2 and its parameter gradient, for the comparison baseline.

Operators only need to supply vector-Jacobian products through a
:class:`VjpBundle`. All vectors here are flat float64 arrays.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, replace
from typing import Any

import numpy as np

from config import FD_EPSILON, JACOBIAN_REG_DELTA
from numerics.rng import Rng, make_rng
from numerics.tensor_ops import Tensor, as_tensor
from solver.fixed_point import SolverConfig, SolverTrace, solve

logger = logging.getLogger(__name__)

VjpFn = Callable[[Tensor, Any, Tensor], Tensor]
PROBE_DISTRIBUTIONS = ("gaussian", "rademacher")


@dataclass(frozen=True)
class VjpBundle:
    """
    The derivative hooks of an equilibrium function f(z, x; theta).

    Attributes:
        vjp_z: ``(z, x, v) -> v^T df/dz`` (flat, z-sized).
        vjp_theta: ``(z, x, v) -> v^T df/dtheta`` (flat, parameter-sized).
        jvp_z: Optional ``(z, x, u) -> (df/dz) u``.
        damping_gate: Optional ``(z, x) -> lambda`` per output element, used as
            the adaptive damping of the phantom gradient.
    """
    vjp_z: VjpFn
    vjp_theta: VjpFn
    jvp_z: VjpFn | None = None
    damping_gate: Callable[[Tensor, Any], Tensor] | None = None


@dataclass(frozen=True)
class GradientMode:
    """
    Which backward rule the main loss uses.

    ``tag="ift"`` solves the adjoint equation with ``backward`` (a SolverConfig).
    ``tag="phantom"`` unrolls ``k`` damped adjoint steps; ``damping`` is a float
    in (0, 1] or ``"gate"`` for the operator's adaptive gate.
    """
    tag: str = "phantom"
    k: int = 1
    damping: float | str = 1.0
    backward: SolverConfig | None = None

    def __post_init__(self):
        if self.tag not in ("ift", "phantom"):
            raise ValueError(f"Unknown gradient mode '{self.tag}'")
        if self.k < 1:
            raise ValueError(f"phantom k must be >= 1, got {self.k}")
        if isinstance(self.damping, str):
            if self.damping != "gate":
                raise ValueError(f"damping must be a float or 'gate', got '{self.damping}'")
        elif not 0 < self.damping <= 1:
            raise ValueError(f"damping must be in (0, 1], got {self.damping}")

    @classmethod
    def ift(cls, backward: SolverConfig | None = None) -> "GradientMode":
        return cls(tag="ift", backward=backward or SolverConfig())

    @classmethod
    def phantom(cls, k: int = 1, damping: float | str = 1.0) -> "GradientMode":
        return cls(tag="phantom", k=k, damping=damping)

    @classmethod
    def one_step(cls) -> "GradientMode":
        return cls(tag="phantom", k=1, damping=1.0)

    @property
    def is_one_step(self) -> bool:
        return self.tag == "phantom" and self.k == 1


def ift_gradient(
    bundle: VjpBundle,
    z_star: Tensor,
    x: Any,
    dL_dz: Tensor,
    backward_cfg: SolverConfig,
) -> tuple[Tensor, SolverTrace]:
    """
    Exact implicit-function-theorem gradient.

    Solves ``g = vjp_z(z*, x, g) + dL/dz*`` from g=0 with ``backward_cfg``,
    then returns ``vjp_theta(z*, x, g*)``. A diverged adjoint solve is
    reported through the returned trace; the gradient is then computed from
    the best finite adjoint iterate and callers decide whether to use it.

    Returns:
        ``(param_grad, adjoint_trace)``.
    """
    z_star = as_tensor(z_star).ravel()
    dL_dz = as_tensor(dL_dz).ravel()

    def adjoint_map(g: Tensor) -> Tensor:
        return bundle.vjp_z(z_star, x, g) + dL_dz

    cfg = replace(backward_cfg, record="none", record_indices=())
    g_star, trace = solve(adjoint_map, np.zeros_like(dL_dz), cfg)
    if trace.diverged:
        logger.warning(f"Adjoint solve diverged after {trace.n_iters} iterations.")
    else:
        logger.debug(
            f"Adjoint solve: {trace.n_iters} iterations, rel residual {trace.final_rel_residual:.3e}"
        )
    return bundle.vjp_theta(z_star, x, g_star), trace


def _resolve_damping(bundle: VjpBundle, z_star: Tensor, x: Any, damping: float | str) -> Tensor | float:
    if damping != "gate":
        return float(damping)
    if bundle.damping_gate is None:
        logger.warning("Adaptive damping requested but the operator has no gate; using lambda=1.")
        return 1.0
    return bundle.damping_gate(z_star, x)


def phantom_gradient(
    bundle: VjpBundle,
    z_star: Tensor,
    x: Any,
    dL_dz: Tensor,
    k: int = 1,
    damping: float | str = 1.0,
) -> Tensor:
    """
    Truncated, damped Neumann approximation of the IFT gradient.

    Starting from ``g = dL/dz*`` it repeats ``k - 1`` times
    ``g <- vjp_z(z*, x, lambda * g) + dL/dz*`` and returns ``vjp_theta(z*, x, g)``.
    For a scalar lambda the update is ``lambda * vjp_z(g) + dL/dz*``; a gate
    vector damps each output element of f separately. This is the
    Neumann-series member of the phantom-gradient family; ``k=1`` is the
    1-step gradient ``dL/dz* . df/dtheta`` and touches f exactly once.
    """
    if k < 1:
        raise ValueError(f"phantom k must be >= 1, got {k}")
    z_star = as_tensor(z_star).ravel()
    dL_dz = as_tensor(dL_dz).ravel()
    g = dL_dz
    if k > 1:
        lam = _resolve_damping(bundle, z_star, x, damping)
        for _ in range(k - 1):
            g = bundle.vjp_z(z_star, x, lam * g) + dL_dz
    return bundle.vjp_theta(z_star, x, g)


def _draw_probe(rng: Rng, size: int, distribution: str) -> Tensor:
    if distribution == "gaussian":
        return rng.standard_normal(size)
    if distribution == "rademacher":
        return rng.integers(0, 2, size=size).astype(np.float64) * 2.0 - 1.0
    raise ValueError(f"Unknown probe distribution '{distribution}', expected one of {PROBE_DISTRIBUTIONS}")


def hutchinson_frobenius(
    bundle: VjpBundle,
    z_star: Tensor,
    x: Any,
    n_probes: int,
    rng: Rng,
    distribution: str = "gaussian",
) -> float:
    """
    Unbiased estimate of ``||J_f(z*)||_F^2 = tr(J^T J)``.

    Averages ``||J eps||^2`` over ``n_probes`` probes when a JVP hook exists,
    ``||J^T eps||^2`` otherwise (both have expectation tr(J^T J)). Probes are
    drawn and summed in probe-index order.
    """
    if n_probes < 1:
        raise ValueError(f"n_probes must be >= 1, got {n_probes}")
    z_star = as_tensor(z_star).ravel()
    total = 0.0
    for _ in range(n_probes):
        eps = _draw_probe(rng, z_star.size, distribution)
        product = bundle.jvp_z(z_star, x, eps) if bundle.jvp_z is not None else bundle.vjp_z(z_star, x, eps)
        total += float(product @ product)
    return total / n_probes


def jacobian_reg_grad(
    bundle: VjpBundle,
    z_star: Tensor,
    x: Any,
    n_probes: int,
    rng: Rng,
    distribution: str = "gaussian",
    delta: float = JACOBIAN_REG_DELTA,
) -> tuple[float, Tensor]:
    """
    Hutchinson estimate of ``||J_f(z*)||_F^2`` and its gradient w.r.t. theta, z* held fixed.

    Per probe eps, with ``w = J^T eps``:

        d/dtheta ||w||^2 = 2 d/dt [vjp_theta(z* + t w, x, eps)] at t = 0,

    which is taken as a central difference of ``vjp_theta`` along ``w`` with
    step ``delta`` (relative to ||w||).

    Returns:
        ``(estimate, param_grad)``, both averaged over probes.
    """
    if n_probes < 1:
        raise ValueError(f"n_probes must be >= 1, got {n_probes}")
    z_star = as_tensor(z_star).ravel()
    estimate = 0.0
    grad = None
    for _ in range(n_probes):
        eps = _draw_probe(rng, z_star.size, distribution)
        w = bundle.vjp_z(z_star, x, eps)
        w_norm = float(np.linalg.norm(w))
        estimate += w_norm ** 2
        if w_norm == 0.0:
            continue
        step = delta / w_norm
        plus = bundle.vjp_theta(z_star + step * w, x, eps)
        minus = bundle.vjp_theta(z_star - step * w, x, eps)
        contribution = (plus - minus) / step
        grad = contribution if grad is None else grad + contribution
    if grad is None:
        grad = np.zeros_like(bundle.vjp_theta(z_star, x, np.zeros_like(z_star)))
    return estimate / n_probes, grad / n_probes


def finite_difference_check(
    loss_fn: Callable[[Tensor], float],
    theta: Tensor,
    param_grad: Tensor,
    epsilon: float = FD_EPSILON,
    n_coords: int | None = None,
    rng: Rng | None = None,
) -> float:
    """
    Compares ``param_grad`` against central differences of ``loss_fn``.

    Args:
        loss_fn: Loss as a function of the flat parameter vector.
        theta: Point at which ``param_grad`` was computed.
        param_grad: The gradient under test.
        epsilon: Central-difference half step.
        n_coords: Number of randomly chosen coordinates to check (all if None).
        rng: Source of the coordinate choice; a fixed stream if None.

    Returns:
        ``max_i |fd_i - grad_i| / max(|fd_i|, |grad_i|, 1e-8)``.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    theta = as_tensor(theta).ravel()
    param_grad = as_tensor(param_grad).ravel()
    n_coords = theta.size if n_coords is None else n_coords
    if not 1 <= n_coords <= theta.size:
        raise ValueError(f"n_coords must be in [1, {theta.size}], got {n_coords}")
    rng = rng or make_rng(0, "finite-difference")
    coords = np.sort(rng.choice(theta.size, size=n_coords, replace=False))

    worst = 0.0
    for i in coords:
        bumped = theta.copy()
        bumped[i] += epsilon
        upper = loss_fn(bumped)
        bumped[i] = theta[i] - epsilon
        lower = loss_fn(bumped)
        fd = (upper - lower) / (2.0 * epsilon)
        error = abs(fd - param_grad[i]) / max(abs(fd), abs(param_grad[i]), 1e-8)
        worst = max(worst, error)
    return worst
