"""
The recurrent update operator and its hand-written reverse mode.

One application maps ``(h, f)`` to ``(h', f')``:

    corr = lookup(pyramid, f)
    x    = relu(conv3x3([q, f, corr]))
    u    = [x, q]                      (RAFT)
         = [attention(q, q, x), x, q]  (GMA)
    z    = sigmoid(conv3x3([h, u]))
    r    = sigmoid(conv3x3([h, u]))
    c    = tanh(conv3x3([r * h, u]))
    h'   = (1 - z) * h + z * c
    f'   = f + conv3x3(relu(conv3x3(h')))

The update gate ``z`` doubles as the adaptive damping of the phantom
gradient. Channel orders above are fixed; checkpoints depend on them.

q and the pyramid are themselves functions of the encoder weights. When a
:class:`FlowInput` carries its images and features, the parameter VJPs
continue through the lookup and the pyramid into both encoders.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from engine.deq_layer import EquilibriumState
from numerics.tensor_ops import Tensor, conv2d, conv2d_vjp, relu, sigmoid
from toyflow.correlation import (
    CorrelationPyramid,
    correlation_lookup,
    correlation_lookup_pyramid_vjp,
    correlation_lookup_vjp,
    correlation_pyramid_vjp,
    encode_vjp,
)
from toyflow.params import ModelConfig

logger = logging.getLogger(__name__)


@dataclass
class FlowInput:
    """
    The per-pair input x: context features q [C_q,H',W'] and the correlation pyramid.

    ``p1``/``p2`` are the images and ``u1``/``u2`` their features. Without
    them the input counts as a constant and encoders get no gradient.
    """
    q: Tensor
    pyramid: CorrelationPyramid
    p1: Tensor | None = None
    p2: Tensor | None = None
    u1: Tensor | None = None
    u2: Tensor | None = None

    @property
    def differentiable(self) -> bool:
        return self.p1 is not None and self.u1 is not None


@dataclass
class _AttentionCache:
    q_flat: Tensor
    x_flat: Tensor
    queries: Tensor
    keys: Tensor
    weights: Tensor
    values: Tensor
    scale: float


@dataclass
class _UpdateCache:
    h: Tensor
    f: Tensor
    m_in: Tensor
    m_pre: Tensor
    u: Tensor
    hu: Tensor
    z: Tensor
    r: Tensor
    rhu: Tensor
    cand: Tensor
    h_new: Tensor
    a_pre: Tensor
    a: Tensor
    attention: _AttentionCache | None = None


def aggregate_motion(q: Tensor, x: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> tuple[Tensor, _AttentionCache]:
    """
    Single-head global motion aggregation over feature pixels.

    ``x_hat = V softmax(Q^T K / sqrt(d))^T`` with ``Q = W_q q``, ``K = W_k q``
    and ``V = W_v x`` (1x1 projections). Returns ``x_hat`` shaped like ``x``
    and the cache its reverse mode needs.
    """
    channels, height, width = x.shape
    q_flat = q.reshape(q.shape[0], -1)
    x_flat = x.reshape(channels, -1)
    queries = params["attn_q_w"] @ q_flat
    keys = params["attn_k_w"] @ q_flat
    scale = 1.0 / math.sqrt(cfg.attention_channels)
    weights = softmax((queries.T @ keys) * scale, axis=1)
    values = params["attn_v_w"] @ x_flat
    x_hat = (values @ weights.T).reshape(channels, height, width)
    return x_hat, _AttentionCache(q_flat, x_flat, queries, keys, weights, values, scale)


def _aggregate_motion_vjp(
    cache: _AttentionCache, params: dict[str, Tensor], d_x_hat: Tensor, q_shape: tuple[int, ...],
) -> tuple[Tensor, Tensor, dict[str, Tensor]]:
    """Returns ``(d_x, d_q, grads)``."""
    d_out = d_x_hat.reshape(d_x_hat.shape[0], -1)
    d_values = d_out @ cache.weights
    d_weights = d_out.T @ cache.values
    d_logits = cache.weights * (d_weights - np.sum(d_weights * cache.weights, axis=1, keepdims=True))
    d_queries = cache.scale * (cache.keys @ d_logits.T)
    d_keys = cache.scale * (cache.queries @ d_logits)
    grads = {
        "attn_q_w": d_queries @ cache.q_flat.T,
        "attn_k_w": d_keys @ cache.q_flat.T,
        "attn_v_w": d_values @ cache.x_flat.T,
    }
    d_x = (params["attn_v_w"].T @ d_values).reshape(d_x_hat.shape)
    d_q = (params["attn_q_w"].T @ d_queries + params["attn_k_w"].T @ d_keys).reshape(q_shape)
    return d_x, d_q, grads


def _forward(
    z: EquilibriumState, x: FlowInput, params: dict[str, Tensor], cfg: ModelConfig, aggregate: bool,
) -> tuple[EquilibriumState, _UpdateCache]:
    h, f, q = z.h, z.f, x.q
    corr = correlation_lookup(x.pyramid, f)
    m_in = np.concatenate([q, f, corr])
    m_pre = conv2d(m_in, params["motion_w"], params["motion_b"], padding=1)
    motion = relu(m_pre)

    attention = None
    if aggregate:
        x_hat, attention = aggregate_motion(q, motion, params, cfg)
        u = np.concatenate([x_hat, motion, q])
    else:
        u = np.concatenate([motion, q])

    hu = np.concatenate([h, u])
    gate_z = sigmoid(conv2d(hu, params["gru_z_w"], params["gru_z_b"], padding=1))
    gate_r = sigmoid(conv2d(hu, params["gru_r_w"], params["gru_r_b"], padding=1))
    rhu = np.concatenate([gate_r * h, u])
    cand = np.tanh(conv2d(rhu, params["gru_q_w"], params["gru_q_b"], padding=1))
    h_new = (1.0 - gate_z) * h + gate_z * cand

    a_pre = conv2d(h_new, params["head1_w"], params["head1_b"], padding=1)
    a = relu(a_pre)
    f_new = f + conv2d(a, params["head2_w"], params["head2_b"], padding=1)

    cache = _UpdateCache(
        h=h, f=f, m_in=m_in, m_pre=m_pre, u=u, hu=hu, z=gate_z, r=gate_r,
        rhu=rhu, cand=cand, h_new=h_new, a_pre=a_pre, a=a, attention=attention,
    )
    return EquilibriumState(h=h_new, f=f_new), cache


def _backward(
    cache: _UpdateCache,
    x: FlowInput,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    d_h_new: Tensor,
    d_f_new: Tensor,
) -> tuple[EquilibriumState, dict[str, Tensor]]:
    c_h = cfg.hidden_channels
    c_m = cfg.motion_channels
    c_q = cfg.context_channels
    grads = {}

    # flow head
    d_f = d_f_new.copy()
    d_a, grads["head2_w"], grads["head2_b"] = conv2d_vjp(cache.a, params["head2_w"], 1, 1, d_f_new)
    d_a_pre = d_a * (cache.a_pre > 0)
    d_from_head, grads["head1_w"], grads["head1_b"] = conv2d_vjp(cache.h_new, params["head1_w"], 1, 1, d_a_pre)
    d_h_new = d_h_new + d_from_head

    # GRU
    d_h = d_h_new * (1.0 - cache.z)
    d_z = d_h_new * (cache.cand - cache.h)
    d_cand_pre = d_h_new * cache.z * (1.0 - cache.cand ** 2)
    d_rhu, grads["gru_q_w"], grads["gru_q_b"] = conv2d_vjp(cache.rhu, params["gru_q_w"], 1, 1, d_cand_pre)
    d_rh = d_rhu[:c_h]
    d_u = d_rhu[c_h:].copy()
    d_h += d_rh * cache.r
    d_r_pre = d_rh * cache.h * cache.r * (1.0 - cache.r)
    d_z_pre = d_z * cache.z * (1.0 - cache.z)
    d_hu_z, grads["gru_z_w"], grads["gru_z_b"] = conv2d_vjp(cache.hu, params["gru_z_w"], 1, 1, d_z_pre)
    d_hu_r, grads["gru_r_w"], grads["gru_r_b"] = conv2d_vjp(cache.hu, params["gru_r_w"], 1, 1, d_r_pre)
    d_hu = d_hu_z + d_hu_r
    d_h += d_hu[:c_h]
    d_u += d_hu[c_h:]

    # motion features and context
    d_q = d_u[-c_q:].copy()
    if cache.attention is not None:
        d_motion = d_u[c_m:2 * c_m].copy()
        d_from_attention, d_q_attention, attention_grads = _aggregate_motion_vjp(
            cache.attention, params, d_u[:c_m], d_q.shape)
        d_motion += d_from_attention
        d_q += d_q_attention
        grads.update(attention_grads)
    else:
        d_motion = d_u[:c_m]
    d_m_pre = d_motion * (cache.m_pre > 0)
    d_m_in, grads["motion_w"], grads["motion_b"] = conv2d_vjp(cache.m_in, params["motion_w"], 1, 1, d_m_pre)
    d_q += d_m_in[:c_q]
    d_corr = d_m_in[c_q + 2:]
    d_f += d_m_in[c_q:c_q + 2]
    d_f += correlation_lookup_vjp(x.pyramid, cache.f, d_corr)

    if x.differentiable:
        grads.update(_input_grads(x, params, cfg, cache.f, d_q, d_corr))
    return EquilibriumState(h=d_h, f=d_f), grads


def _input_grads(
    x: FlowInput, params: dict[str, Tensor], cfg: ModelConfig, f: Tensor, d_q: Tensor, d_corr: Tensor,
) -> dict[str, Tensor]:
    """Encoder parameter cotangents reached through q and the correlation lookup."""
    grads = {}
    grads["ctx1_w"], grads["ctx1_b"], grads["ctx2_w"], grads["ctx2_b"] = encode_vjp(
        x.p1, params["ctx1_w"], params["ctx1_b"], params["ctx2_w"], params["ctx2_b"], cfg, d_q)

    d_levels = correlation_lookup_pyramid_vjp(x.pyramid, f, d_corr)
    d_u1, d_u2 = correlation_pyramid_vjp(x.u1, x.u2, d_levels)
    enc = (params["enc1_w"], params["enc1_b"], params["enc2_w"], params["enc2_b"])
    first = encode_vjp(x.p1, *enc, cfg, d_u1)
    second = encode_vjp(x.p2, *enc, cfg, d_u2)
    for name, a, b in zip(("enc1_w", "enc1_b", "enc2_w", "enc2_b"), first, second):
        grads[name] = a + b
    return grads


def _require_variant(cfg: ModelConfig, variant: str, entry: str) -> None:
    if cfg.variant != variant:
        raise ValueError(f"{entry} needs a model configured with variant='{variant}', got '{cfg.variant}'")


def raft_update(z: EquilibriumState, x: FlowInput, params: dict[str, Tensor], cfg: ModelConfig) -> EquilibriumState:
    """One application of the RAFT update operator (GRU input ``[x, q]``)."""
    _require_variant(cfg, "raft", "raft_update")
    z_new, _ = _forward(z, x, params, cfg, aggregate=False)
    return z_new


def raft_update_vjp(
    z: EquilibriumState,
    x: FlowInput,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    cotangent: EquilibriumState,
) -> tuple[EquilibriumState, dict[str, Tensor]]:
    """
    Reverse mode of :func:`raft_update`.

    Returns:
        The state cotangent and a dict of parameter cotangents: every
        operator parameter, plus the encoder parameters when ``x`` is
        differentiable.
    """
    _require_variant(cfg, "raft", "raft_update_vjp")
    _, cache = _forward(z, x, params, cfg, aggregate=False)
    return _backward(cache, x, params, cfg, cotangent.h, cotangent.f)


def gma_update(z: EquilibriumState, x: FlowInput, params: dict[str, Tensor], cfg: ModelConfig) -> EquilibriumState:
    """The update operator with global motion aggregation, GRU input ``[x_hat, x, q]``."""
    _require_variant(cfg, "gma", "gma_update")
    z_new, _ = _forward(z, x, params, cfg, aggregate=True)
    return z_new


def gma_update_vjp(
    z: EquilibriumState,
    x: FlowInput,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    cotangent: EquilibriumState,
) -> tuple[EquilibriumState, dict[str, Tensor]]:
    """Reverse mode of :func:`gma_update`; attention projections are included in the parameter cotangents."""
    _require_variant(cfg, "gma", "gma_update_vjp")
    _, cache = _forward(z, x, params, cfg, aggregate=True)
    return _backward(cache, x, params, cfg, cotangent.h, cotangent.f)


def update_gate(z: EquilibriumState, x: FlowInput, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """The GRU update gate at ``z``, shaped like ``h``."""
    _, cache = _forward(z, x, params, cfg, aggregate=cfg.variant == "gma")
    return cache.z
