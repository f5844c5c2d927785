import numpy as np
import pytest
from numpy.testing import assert_allclose

from engine.deq_layer import (
    CorrectionSchedule,
    EquilibriumState,
    ReuseState,
    advance_reuse,
    assemble_loss,
    backward_grads,
    default_gammas,
    forward_solve,
    sample_correction_indices,
)
from engine.implicit_grad import GradientMode, VjpBundle
from numerics.rng import make_rng
from numerics.tensor_ops import ShapeError
from solver.fixed_point import SolverConfig

C_H, H, W = 2, 3, 3
SIZE = (C_H + 2) * H * W


def _problem(radius: float = 0.7):
    """Packed-state map f(z) = A z + theta * x."""
    rng = make_rng(0, "deq-layer")
    q, _ = np.linalg.qr(rng.standard_normal((SIZE, SIZE)))
    a = (q * np.linspace(-radius, radius, SIZE)) @ q.T
    x = rng.standard_normal(SIZE)
    theta = rng.standard_normal(SIZE)
    bundle = VjpBundle(vjp_z=lambda z, x, v: a.T @ v, vjp_theta=lambda z, x, v: v * x)
    return a, x, theta, bundle


def test_state_pack_and_unpack():
    h = np.arange(C_H * H * W, dtype=float).reshape(C_H, H, W)
    f = -np.arange(2 * H * W, dtype=float).reshape(2, H, W)
    state = EquilibriumState(h, f)
    assert state.size == SIZE
    packed = state.pack()
    assert_allclose(packed[:h.size], h.ravel())
    back = state.like(packed)
    assert_allclose(back.h, h)
    assert_allclose(back.f, f)
    with pytest.raises(ShapeError):
        EquilibriumState.unpack(packed[:-1], C_H, H, W)
    with pytest.raises(ShapeError):
        EquilibriumState(np.zeros((C_H, H, W)), np.zeros((3, H, W)))


def test_default_gammas_grow_towards_the_last_correction():
    assert default_gammas(3) == pytest.approx((0.64, 0.8, 1.0))
    assert default_gammas(0) == ()


def test_schedule_validation():
    assert CorrectionSchedule.with_defaults(2).gammas == pytest.approx((0.8, 1.0))
    assert CorrectionSchedule.disabled().freq == 0
    with pytest.raises(ValueError):
        CorrectionSchedule(freq=2, gammas=(0.5,))
    with pytest.raises(ValueError):
        CorrectionSchedule(freq=1, gammas=(1.5,))
    with pytest.raises(ValueError):
        CorrectionSchedule(freq=1, gammas=(0.5,), placement="last")


@pytest.mark.parametrize("n_iters,r,expected", [(40, 1, [20]), (40, 3, [10, 20, 30]), (16, 2, [5, 10])])
def test_uniform_indices(n_iters, r, expected):
    assert sample_correction_indices(n_iters, r) == (expected, False)


def test_random_indices_are_distinct_interior_and_seeded():
    first, truncated = sample_correction_indices(40, 3, "random", make_rng(1, "placement"))
    assert not truncated
    assert len(set(first)) == 3
    assert all(1 <= i <= 39 for i in first)
    assert first == sorted(first)
    assert sample_correction_indices(40, 3, "random", make_rng(1, "placement"))[0] == first
    with pytest.raises(ValueError):
        sample_correction_indices(40, 3, "random")


def test_short_trajectories_truncate_the_schedule():
    assert sample_correction_indices(3, 3) == ([1, 2], True)
    assert sample_correction_indices(1, 2) == ([], True)
    assert sample_correction_indices(10, 0) == ([], False)


def test_forward_solve_keeps_only_sampled_corrections():
    a, x, theta, _ = _problem()
    template = EquilibriumState.zeros(C_H, H, W)
    cfg = SolverConfig(method="picard", max_iters=30, rel_tol=0.0)
    result = forward_solve(lambda z: a @ z + theta * x, template, cfg, CorrectionSchedule.with_defaults(2))
    assert [i for i, _ in result.corrections] == [10, 20]
    assert result.trace.recorded_iterates == []
    assert len(result.retained_states()) == 3

    # The iterate at index 10 is ten Picard steps from zero.
    z = np.zeros(SIZE)
    for _ in range(10):
        z = a @ z + theta * x
    assert_allclose(result.corrections[0][1].pack(), z)


def test_unreached_corrections_use_the_equilibrium():
    a, x, theta, _ = _problem(radius=0.0)
    template = EquilibriumState.zeros(C_H, H, W)
    cfg = SolverConfig(method="picard", max_iters=30, rel_tol=1e-10)
    result = forward_solve(lambda z: a @ z + theta * x, template, cfg, CorrectionSchedule.with_defaults(1))
    assert result.trace.n_iters < 15
    (index, state), = result.corrections
    assert index == 15
    assert state is result.z_star


def test_warm_start_requires_matching_stream_and_layout():
    a, x, theta, _ = _problem()
    template = EquilibriumState.zeros(C_H, H, W)
    operator = lambda z: a @ z + theta * x
    cfg = SolverConfig(method="anderson", max_iters=50, rel_tol=1e-8)

    cold = forward_solve(operator, template, cfg)
    reuse = advance_reuse(None, cold.z_star, stream_id="s0")
    warm = forward_solve(operator, template, cfg, reuse=reuse, stream_id="s0")
    assert warm.warm_started
    assert warm.trace.n_iters < cold.trace.n_iters

    other = forward_solve(operator, template, cfg, reuse=reuse, stream_id="s1")
    assert not other.warm_started
    assert ReuseState(cold.z_star, "s0").warm_start("s0", EquilibriumState.zeros(C_H + 1, H, W)) is None


def test_loss_weights_corrections_and_zeroes_hidden_cotangents():
    f_gt = np.ones((2, H, W))
    z_star = EquilibriumState(np.ones((C_H, H, W)), np.full((2, H, W), 2.0))
    early = EquilibriumState(np.ones((C_H, H, W)), np.full((2, H, W), 3.0))
    schedule = CorrectionSchedule(freq=1, gammas=(0.5,))
    loss = assemble_loss(z_star, [(5, early)], f_gt, schedule)
    n = 2 * H * W
    assert loss.main == pytest.approx(n * 1.0)
    assert loss.corrections == [pytest.approx(0.5 * n * 4.0)]
    assert loss.total == pytest.approx(n + 2.0 * n)
    assert loss.correction_total == pytest.approx(2.0 * n)
    assert_allclose(loss.main_cotangent[:C_H * H * W], 0.0)
    assert_allclose(loss.main_cotangent[C_H * H * W:], 2.0)
    assert_allclose(loss.correction_cotangents[0][C_H * H * W:], 0.5 * 2.0 * 2.0)

    l1 = assemble_loss(z_star, [], f_gt, CorrectionSchedule(), "l1")
    assert l1.total == pytest.approx(n)
    with pytest.raises(ValueError):
        assemble_loss(z_star, [], f_gt, CorrectionSchedule(), "huber")
    with pytest.raises(ShapeError):
        assemble_loss(z_star, [], np.ones((2, H + 1, W)), CorrectionSchedule())


def test_backward_adds_one_step_terms_per_correction():
    a, x, theta, bundle = _problem()
    template = EquilibriumState.zeros(C_H, H, W)
    schedule = CorrectionSchedule.with_defaults(2)
    cfg = SolverConfig(method="picard", max_iters=30, rel_tol=0.0)
    forward = forward_solve(lambda z: a @ z + theta * x, template, cfg, schedule)
    f_gt = np.zeros((2, H, W))
    loss = assemble_loss(forward.z_star, forward.corrections, f_gt, schedule)

    result = backward_grads(bundle, forward.z_star, forward.corrections, x, loss, GradientMode.one_step())
    expected = loss.main_cotangent * x + sum(c * x for c in loss.correction_cotangents)
    assert_allclose(result.grad, expected)
    assert not result.fell_back


def test_ift_backward_matches_the_exact_gradient():
    a, x, theta, bundle = _problem()
    template = EquilibriumState.zeros(C_H, H, W)
    cfg = SolverConfig(method="anderson", max_iters=100, rel_tol=1e-12)
    forward = forward_solve(lambda z: a @ z + theta * x, template, cfg)
    loss = assemble_loss(forward.z_star, [], np.zeros((2, H, W)), CorrectionSchedule())
    result = backward_grads(bundle, forward.z_star, [], x, loss, GradientMode.ift(cfg))
    exact = x * np.linalg.solve(np.eye(SIZE) - a.T, loss.main_cotangent)
    assert_allclose(result.grad, exact, rtol=1e-6, atol=1e-8)
    assert result.adjoint_trace.converged


def test_diverged_adjoint_falls_back_to_one_step():
    _, x, theta, _ = _problem()
    expanding = VjpBundle(vjp_z=lambda z, x, v: np.full_like(v, np.nan), vjp_theta=lambda z, x, v: v * x)
    z_star = EquilibriumState(np.zeros((C_H, H, W)), np.ones((2, H, W)))
    loss = assemble_loss(z_star, [], np.zeros((2, H, W)), CorrectionSchedule())
    result = backward_grads(expanding, z_star, [], x, loss, GradientMode.ift(SolverConfig(max_iters=20)))
    assert result.fell_back
    assert_allclose(result.grad, loss.main_cotangent * x)


@pytest.mark.parametrize("budget", [8, 16, 40])
def test_only_the_equilibrium_and_correction_states_are_retained(budget):
    a, x, theta, _ = _problem()
    template = EquilibriumState.zeros(C_H, H, W)
    cfg = SolverConfig(method="picard", max_iters=budget, rel_tol=0.0)
    result = forward_solve(lambda z: a @ z + theta * x, template, cfg, CorrectionSchedule.with_defaults(3))
    assert len(result.corrections) == 3
    assert len(result.retained_states()) == 3 + 1
    assert result.trace.recorded_iterates == []


def test_warm_starts_need_fewer_iterations_than_cold_starts():
    template = EquilibriumState.zeros(C_H, H, W)
    cfg = SolverConfig(method="picard", max_iters=500, rel_tol=1e-8)
    cold_iters, warm_iters = [], []
    for seed in range(100):
        rng = make_rng(seed, "warm-start")
        q, _ = np.linalg.qr(rng.standard_normal((SIZE, SIZE)))
        a = (q * rng.uniform(-0.7, 0.7, SIZE)) @ q.T
        b = rng.standard_normal(SIZE)
        previous = forward_solve(lambda z: a @ z + b, template, cfg)
        reuse = advance_reuse(None, previous.z_star, stream_id=seed)

        moved = b * (1.0 + 0.01 * rng.standard_normal(SIZE))
        cold = forward_solve(lambda z: a @ z + moved, template, cfg)
        warm = forward_solve(lambda z: a @ z + moved, template, cfg, reuse=reuse, stream_id=seed)
        assert cold.trace.converged and warm.trace.converged
        cold_iters.append(cold.trace.n_iters)
        warm_iters.append(warm.trace.n_iters)
    assert np.median(warm_iters) < np.median(cold_iters)


def test_ift_gradient_does_not_depend_on_the_solver_path():
    a, x, theta, bundle = _problem()
    template = EquilibriumState.zeros(C_H, H, W)
    operator = lambda z: a @ z + theta * x
    mode = GradientMode.ift(SolverConfig(method="anderson", max_iters=100, rel_tol=1e-12))
    f_gt = np.zeros((2, H, W))

    grads = []
    for method in ("picard", "anderson", "broyden"):
        forward = forward_solve(operator, template, SolverConfig(method=method, max_iters=300, rel_tol=1e-13))
        assert forward.trace.recorded_iterates == []
        loss = assemble_loss(forward.z_star, [], f_gt, CorrectionSchedule())
        grads.append(backward_grads(bundle, forward.z_star, [], x, loss, mode).grad)
    assert_allclose(grads[1], grads[0], rtol=1e-8, atol=1e-10)
    assert_allclose(grads[2], grads[0], rtol=1e-8, atol=1e-10)
