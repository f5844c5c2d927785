"""
The toy flow model as an equilibrium function.

:class:`FlowModel` owns the sizes and one parameter vector. It encodes an
image pair into a :class:`FlowInput` and wraps the update operator of that
pair in a :class:`FlowOperator`, which works on packed solver vectors and
exposes the VJP hooks the gradient code needs.
"""

import logging

import numpy as np

from engine.deq_layer import EquilibriumState
from engine.implicit_grad import VjpBundle
from numerics.rng import Rng
from numerics.tensor_ops import Tensor, as_tensor, upsample_flow
from solver.fixed_point import residual_norms
from toyflow.correlation import correlation_pyramid, encode
from toyflow.params import ModelConfig, ParamLayout, init_params
from toyflow.update_operator import (
    FlowInput,
    gma_update,
    gma_update_vjp,
    raft_update,
    raft_update_vjp,
    update_gate,
)

logger = logging.getLogger(__name__)


class FlowOperator:
    """
    The equilibrium function f_theta(., x) of one image pair, on packed states.

    Calling the operator applies the update once. :meth:`bundle` exposes the
    VJPs the implicit-gradient code needs; the ``x`` those hooks receive is a
    :class:`FlowInput`.
    """

    def __init__(self, cfg: ModelConfig, layout: ParamLayout, theta: Tensor, inp: FlowInput):
        self.cfg = cfg
        self.layout = layout
        self.params = layout.views(theta)
        self.inp = inp
        height, width = inp.pyramid.spatial
        self.template = EquilibriumState.zeros(cfg.hidden_channels, height, width)
        if cfg.variant == "gma":
            self._update, self._update_vjp = gma_update, gma_update_vjp
        else:
            self._update, self._update_vjp = raft_update, raft_update_vjp

    def __call__(self, z: Tensor) -> Tensor:
        return self._update(self.template.like(z), self.inp, self.params, self.cfg).pack()

    def residual(self, z_star: EquilibriumState) -> tuple[float, float]:
        """Absolute and relative fixed-point residual at ``z_star``."""
        z = z_star.pack()
        return residual_norms(z, self(z))

    def vjp_z(self, z: Tensor, x: FlowInput, v: Tensor) -> Tensor:
        d_z, _ = self._update_vjp(self.template.like(z), x, self.params, self.cfg, self.template.like(v))
        return d_z.pack()

    def vjp_theta(self, z: Tensor, x: FlowInput, v: Tensor) -> Tensor:
        _, grads = self._update_vjp(self.template.like(z), x, self.params, self.cfg, self.template.like(v))
        return self.layout.flatten(grads)

    def damping_gate(self, z: Tensor, x: FlowInput) -> Tensor:
        """The update gate on h entries and 1 on flow entries."""
        gate = update_gate(self.template.like(z), x, self.params, self.cfg)
        return np.concatenate([gate.ravel(), np.ones(self.template.f.size)])

    def bundle(self) -> VjpBundle:
        return VjpBundle(vjp_z=self.vjp_z, vjp_theta=self.vjp_theta, damping_gate=self.damping_gate)


class FlowModel:
    """Model sizes plus one parameter vector; builds per-pair operators."""

    def __init__(self, cfg: ModelConfig, theta: Tensor | None = None, rng: Rng | None = None):
        self.cfg = cfg
        self.layout = ParamLayout(cfg)
        if theta is None:
            if rng is None:
                raise ValueError("FlowModel needs either a parameter vector or an rng to draw one")
            theta = init_params(cfg, rng)
        self.theta = as_tensor(theta).copy()
        if self.theta.shape != (self.layout.size,):
            raise ValueError(f"Parameter vector has {self.theta.size} entries, expected {self.layout.size}")

    def prepare(self, p1: Tensor, p2: Tensor, theta: Tensor | None = None) -> FlowInput:
        """Encodes an image pair with ``theta`` (the model's own vector when None)."""
        params = self.layout.views(self.theta if theta is None else theta)
        p1, p2 = as_tensor(p1), as_tensor(p2)
        u1 = encode(p1, params["enc1_w"], params["enc1_b"], params["enc2_w"], params["enc2_b"], self.cfg)
        u2 = encode(p2, params["enc1_w"], params["enc1_b"], params["enc2_w"], params["enc2_b"], self.cfg)
        q = encode(p1, params["ctx1_w"], params["ctx1_b"], params["ctx2_w"], params["ctx2_b"], self.cfg)
        pyramid = correlation_pyramid(u1, u2, self.cfg.corr_levels, self.cfg.corr_radius)
        return FlowInput(q=q, pyramid=pyramid, p1=p1, p2=p2, u1=u1, u2=u2)

    def operator(self, inp: FlowInput, theta: Tensor | None = None) -> FlowOperator:
        return FlowOperator(self.cfg, self.layout, self.theta if theta is None else theta, inp)

    def to_image_flow(self, z_star: EquilibriumState) -> Tensor:
        """Upsamples the equilibrium flow to image resolution and pixels."""
        return upsample_flow(z_star.f, self.cfg.total_stride)
