"""
Feature encoding and the all-pairs correlation pyramid.

Level 0 holds ``C[i, j, m, n] = sum_d u1[d, i, j] * u2[d, m, n]`` for every
pair of feature pixels; each further level average-pools the last two axes.
A lookup samples a (2r+1) x (2r+1) window of every level around the pixel's
current match ``c0 + f``.
"""

import logging
from dataclasses import dataclass

import numpy as np

from numerics.tensor_ops import (
    ShapeError,
    Tensor,
    as_tensor,
    avg_pool2x2,
    avg_pool2x2_vjp,
    bilinear_sample_slabs,
    bilinear_sample_slabs_grid_vjp,
    bilinear_sample_slabs_vjp,
    conv2d,
    conv2d_vjp,
    relu,
)
from toyflow.params import ModelConfig, encoder_geometry

logger = logging.getLogger(__name__)


def encode(p: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, cfg: ModelConfig) -> Tensor:
    """
    Two strided conv + ReLU layers taking a [3,H,W] image to [C,H/S,W/S].

    Args:
        p: The image, H and W divisible by the total stride S.
        w1, b1: First layer (stride S/2).
        w2, b2: Second layer (stride 2).
        cfg: Model sizes.
    """
    p = as_tensor(p)
    if p.ndim != 3 or p.shape[0] != 3:
        raise ShapeError(f"encode expects a [3,H,W] image, got {p.shape}")
    stride = cfg.total_stride
    if p.shape[1] % stride or p.shape[2] % stride:
        raise ShapeError(f"Image size {p.shape[1:]} is not divisible by the total stride {stride}")
    (_, pad1, s1), (_, pad2, s2) = encoder_geometry(cfg)
    hidden = relu(conv2d(p, w1, b1, padding=pad1, stride=s1))
    return relu(conv2d(hidden, w2, b2, padding=pad2, stride=s2))


def encode_vjp(
    p: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, cfg: ModelConfig, cotangent: Tensor,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Parameter cotangents ``(d_w1, d_b1, d_w2, d_b2)`` of :func:`encode`; the image is a constant."""
    p = as_tensor(p)
    (_, pad1, s1), (_, pad2, s2) = encoder_geometry(cfg)
    pre1 = conv2d(p, w1, b1, padding=pad1, stride=s1)
    hidden = relu(pre1)
    pre2 = conv2d(hidden, w2, b2, padding=pad2, stride=s2)
    d_hidden, d_w2, d_b2 = conv2d_vjp(hidden, w2, pad2, s2, as_tensor(cotangent) * (pre2 > 0))
    _, d_w1, d_b1 = conv2d_vjp(p, w1, pad1, s1, d_hidden * (pre1 > 0))
    return d_w1, d_b1, d_w2, d_b2


@dataclass
class CorrelationPyramid:
    """``levels[k]`` has shape [H', W', H'/2^k, W'/2^k]."""
    levels: list[Tensor]
    radius: int

    @property
    def spatial(self) -> tuple[int, int]:
        return self.levels[0].shape[0], self.levels[0].shape[1]

    @property
    def channels(self) -> int:
        return len(self.levels) * (2 * self.radius + 1) ** 2


def correlation_pyramid(u1: Tensor, u2: Tensor, p_levels: int, radius: int) -> CorrelationPyramid:
    """All-pairs inner products of two [C,H',W'] feature maps, pooled ``p_levels - 1`` times."""
    u1, u2 = as_tensor(u1), as_tensor(u2)
    if u1.shape != u2.shape:
        raise ShapeError(f"Feature maps differ in shape: {u1.shape} vs {u2.shape}")
    if p_levels < 1:
        raise ValueError(f"p_levels must be >= 1, got {p_levels}")
    scale = 2 ** (p_levels - 1)
    if u1.shape[1] % scale or u1.shape[2] % scale:
        raise ShapeError(f"Feature grid {u1.shape[1:]} is not divisible by {scale} for {p_levels} levels")
    levels = [np.ascontiguousarray(np.tensordot(u1, u2, axes=([0], [0])))]
    for _ in range(1, p_levels):
        levels.append(avg_pool2x2(levels[-1]))
    return CorrelationPyramid(levels=levels, radius=radius)


def _window_offsets(radius: int) -> tuple[Tensor, Tensor]:
    """(dx, dy) of every window tap in (dy, dx) row-major order."""
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    dy, dx = np.meshgrid(d, d, indexing="ij")
    return dx.ravel(), dy.ravel()


def _lookup_points(pyr: CorrelationPyramid, flow: Tensor):
    """Yields ``(level_index, slabs [P,h,w], x [P,N], y [P,N], scale)`` per level."""
    height, width = pyr.spatial
    if flow.shape != (2, height, width):
        raise ShapeError(f"Flow of shape {flow.shape} does not match the pyramid grid {(height, width)}")
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    centre_x = (cols + flow[0]).ravel()
    centre_y = (rows + flow[1]).ravel()
    off_x, off_y = _window_offsets(pyr.radius)
    for k, level in enumerate(pyr.levels):
        scale = 2.0 ** k
        slabs = level.reshape(height * width, level.shape[2], level.shape[3])
        x = (centre_x / scale)[:, None] + off_x[None, :]
        y = (centre_y / scale)[:, None] + off_y[None, :]
        yield k, slabs, x, y, scale


def correlation_lookup(pyr: CorrelationPyramid, flow: Tensor) -> Tensor:
    """
    Samples the pyramid around ``c0 + flow`` for every feature pixel.

    Returns:
        [L_c, H', W'] with channels ordered (level, dy, dx); taps outside a
        level read as zero.
    """
    flow = as_tensor(flow)
    height, width = pyr.spatial
    taps = (2 * pyr.radius + 1) ** 2
    out = np.empty((pyr.channels, height, width))
    for k, slabs, x, y, _ in _lookup_points(pyr, flow):
        samples = bilinear_sample_slabs(slabs, x, y)
        out[k * taps:(k + 1) * taps] = samples.T.reshape(taps, height, width)
    return out


def correlation_lookup_vjp(pyr: CorrelationPyramid, flow: Tensor, cotangent: Tensor) -> Tensor:
    """Flow cotangent of :func:`correlation_lookup` at fixed pyramid values."""
    flow, cotangent = as_tensor(flow), as_tensor(cotangent)
    height, width = pyr.spatial
    taps = (2 * pyr.radius + 1) ** 2
    d_flow = np.zeros_like(flow)
    for k, slabs, x, y, scale in _lookup_points(pyr, flow):
        level_cot = cotangent[k * taps:(k + 1) * taps].reshape(taps, height * width).T
        d_x, d_y = bilinear_sample_slabs_vjp(slabs, x, y, level_cot)
        d_flow[0] += (d_x.sum(axis=1) / scale).reshape(height, width)
        d_flow[1] += (d_y.sum(axis=1) / scale).reshape(height, width)
    return d_flow


def correlation_lookup_pyramid_vjp(pyr: CorrelationPyramid, flow: Tensor, cotangent: Tensor) -> list[Tensor]:
    """Cotangents of every pyramid level for :func:`correlation_lookup` at a fixed flow."""
    flow, cotangent = as_tensor(flow), as_tensor(cotangent)
    height, width = pyr.spatial
    taps = (2 * pyr.radius + 1) ** 2
    d_levels = []
    for k, slabs, x, y, _ in _lookup_points(pyr, flow):
        level_cot = cotangent[k * taps:(k + 1) * taps].reshape(taps, height * width).T
        d_slabs = bilinear_sample_slabs_grid_vjp(slabs.shape, x, y, level_cot)
        d_levels.append(d_slabs.reshape(pyr.levels[k].shape))
    return d_levels


def correlation_pyramid_vjp(u1: Tensor, u2: Tensor, d_levels: list[Tensor]) -> tuple[Tensor, Tensor]:
    """
    Feature cotangents ``(d_u1, d_u2)`` of :func:`correlation_pyramid`.

    The level cotangents are folded back onto level 0 through the pooling
    chain, then split over the two factors of the inner product.
    """
    u1, u2 = as_tensor(u1), as_tensor(u2)
    d_c0 = as_tensor(d_levels[-1])
    for k in range(len(d_levels) - 1, 0, -1):
        d_c0 = d_levels[k - 1] + avg_pool2x2_vjp(d_c0)
    d_u1 = np.tensordot(u2, d_c0, axes=([1, 2], [2, 3]))
    d_u2 = np.tensordot(u1, d_c0, axes=([1, 2], [0, 1]))
    return np.ascontiguousarray(d_u1), np.ascontiguousarray(d_u2)
