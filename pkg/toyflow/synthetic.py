"""
Synthetic image-pair streams with exact ground-truth flow.

A stream is one procedural texture T (a sum of random low-frequency
sinusoids per colour channel, so it can be evaluated exactly anywhere) seen
through a sequence of affine camera poses. Frame t shows
``P_t(c) = T(A_t^-1 c)``; consecutive poses differ by a per-frame affine
motion ``w_t`` (``A_{t+1} = w_t A_t``), so the pair (P_t, P_{t+1}) has the
exact flow ``f(c) = w_t(c) - c``. The motion parameters follow a random walk
whose step size is ``smoothness``.
"""

import logging
from dataclasses import dataclass

import numpy as np

from config import MAX_DISPLACEMENT, SMOOTHNESS, TEXTURE_COMPONENTS
from numerics.rng import Rng
from numerics.serialization import load_tensors, save_tensors
from numerics.tensor_ops import Tensor

logger = logging.getLogger(__name__)

MOTIONS = ("affine", "translation")
# Texture frequencies in cycles per pixel.
MIN_FREQUENCY = 1.0 / 32.0
MAX_FREQUENCY = 1.0 / 10.0
# Sum of the absolute amplitudes per channel; keeps intensities inside [0.05, 0.95].
AMPLITUDE_BUDGET = 0.45


@dataclass
class ProceduralTexture:
    """``T_ch(x, y) = 0.5 + sum_k a_k cos(2 pi (fx_k x + fy_k y) + phase_k)`` per channel."""
    frequencies: Tensor  # [3, K, 2]
    phases: Tensor       # [3, K]
    amplitudes: Tensor   # [3, K]

    def sample(self, xs: Tensor, ys: Tensor) -> Tensor:
        """Evaluates all three channels at points of any shape; returns [3, *xs.shape]."""
        fx = self.frequencies[..., 0][..., None]
        fy = self.frequencies[..., 1][..., None]
        flat_x, flat_y = xs.ravel()[None, None, :], ys.ravel()[None, None, :]
        waves = np.cos(2.0 * np.pi * (fx * flat_x + fy * flat_y) + self.phases[..., None])
        values = 0.5 + np.sum(self.amplitudes[..., None] * waves, axis=1)
        return values.reshape(3, *xs.shape)


def random_texture(rng: Rng, n_components: int = TEXTURE_COMPONENTS) -> ProceduralTexture:
    radius = rng.uniform(MIN_FREQUENCY, MAX_FREQUENCY, size=(3, n_components))
    angle = rng.uniform(0.0, 2.0 * np.pi, size=(3, n_components))
    frequencies = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=-1)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(3, n_components))
    amplitudes = rng.uniform(0.5, 1.0, size=(3, n_components))
    amplitudes *= AMPLITUDE_BUDGET / amplitudes.sum(axis=1, keepdims=True)
    return ProceduralTexture(frequencies=frequencies, phases=phases, amplitudes=amplitudes)


@dataclass
class FlowSample:
    """
    One image pair with its exact flow.

    Attributes:
        p1, p2: [3,H,W] images with values in [0, 1].
        f_gt: [2,H,W] flow in pixels, (x, y) order.
        warp: [2,3] affine map w with ``w(c) = c + f_gt(c)``.
        seed: Root seed of the stream.
        stream_id: Stream index within the generating run.
        frame: Position of the pair in its stream.
    """
    p1: Tensor
    p2: Tensor
    f_gt: Tensor
    warp: Tensor
    seed: int = 0
    stream_id: int = 0
    frame: int = 0


def _pixel_grid(height: int, width: int) -> tuple[Tensor, Tensor]:
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return xs, ys


def _motion_matrix(m: Tensor, centre_x: float, centre_y: float) -> Tensor:
    """Homogeneous 3x3 matrix of ``c -> c + D (c - centre) + t`` with ``m = (D11, D12, D21, D22, tx, ty)``."""
    linear = np.array([[m[0], m[1]], [m[2], m[3]]])
    shift = np.array([m[4], m[5]]) - linear @ np.array([centre_x, centre_y])
    matrix = np.eye(3)
    matrix[:2, :2] += linear
    matrix[:2, 2] = shift
    return matrix


def _max_displacement(matrix: Tensor, height: int, width: int) -> float:
    # The displacement is affine, so its norm peaks at a corner.
    corners = np.array([[0, 0, 1], [width - 1, 0, 1], [0, height - 1, 1], [width - 1, height - 1, 1]], dtype=np.float64)
    moved = corners @ matrix.T
    return float(np.max(np.linalg.norm(moved[:, :2] - corners[:, :2], axis=1)))


def _clamped_motion(m: Tensor, max_disp: float, height: int, width: int) -> Tensor:
    matrix = _motion_matrix(m, (width - 1) / 2.0, (height - 1) / 2.0)
    largest = _max_displacement(matrix, height, width)
    if largest > max_disp:
        m = m * (max_disp / largest)
        matrix = _motion_matrix(m, (width - 1) / 2.0, (height - 1) / 2.0)
    return matrix


def synth_sequence(
    rng: Rng,
    n_frames: int,
    height: int,
    width: int,
    max_disp: float = MAX_DISPLACEMENT,
    smoothness: float = SMOOTHNESS,
    motion: str = "affine",
    seed: int = 0,
    stream_id: int = 0,
) -> list[FlowSample]:
    """
    Generates ``n_frames`` consecutive pairs of one stream.

    Args:
        rng: Source of the texture and the motion walk.
        n_frames: Number of pairs (the stream has ``n_frames + 1`` images).
        height, width: Image size in pixels.
        max_disp: Largest displacement of any pixel in any pair; must be
            below ``min(height, width) / 4``.
        smoothness: Step size of the motion random walk; 0 gives a static scene.
        motion: ``"affine"`` or ``"translation"`` (linear part fixed to identity).
        seed, stream_id: Recorded on every sample.
    """
    if n_frames < 1:
        raise ValueError(f"n_frames must be >= 1, got {n_frames}")
    if not 0 <= max_disp < min(height, width) / 4:
        raise ValueError(f"max_disp must be in [0, {min(height, width) / 4}), got {max_disp}")
    if smoothness < 0:
        raise ValueError(f"smoothness must be non-negative, got {smoothness}")
    if motion not in MOTIONS:
        raise ValueError(f"Unknown motion '{motion}', expected one of {MOTIONS}")

    texture = random_texture(rng)
    xs, ys = _pixel_grid(height, width)
    homogeneous = np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)])

    linear_scale = 0.0 if motion == "translation" else max_disp / max(height, width)
    translation_scale = max_disp / 2.0
    step_scale = np.array([linear_scale] * 4 + [translation_scale] * 2)

    def render(pose: Tensor) -> Tensor:
        source = np.linalg.solve(pose, homogeneous)
        return texture.sample(source[0].reshape(height, width), source[1].reshape(height, width))

    pose = np.eye(3)
    params = smoothness * step_scale * rng.standard_normal(6)
    image = render(pose)
    samples = []
    for frame in range(n_frames):
        if frame > 0:
            params = params + 0.5 * smoothness * step_scale * rng.standard_normal(6)
        matrix = _clamped_motion(params, max_disp, height, width)
        next_pose = matrix @ pose
        next_image = render(next_pose)
        moved = matrix @ homogeneous
        f_gt = (moved[:2] - homogeneous[:2]).reshape(2, height, width)
        samples.append(FlowSample(
            p1=image, p2=next_image, f_gt=f_gt, warp=matrix[:2].copy(),
            seed=seed, stream_id=stream_id, frame=frame,
        ))
        pose, image = next_pose, next_image
    logger.debug(f"Stream {stream_id}: {n_frames} pairs, max |f| {max(np.abs(s.f_gt).max() for s in samples):.3f}")
    return samples


def save_samples(directory: str, samples: list[FlowSample]) -> None:
    """Stores a stream in the manifest+blob tensor format."""
    tensors = {}
    for i, sample in enumerate(samples):
        tensors[f"{i}/p1"] = sample.p1
        tensors[f"{i}/p2"] = sample.p2
        tensors[f"{i}/f_gt"] = sample.f_gt
        tensors[f"{i}/warp"] = sample.warp
        tensors[f"{i}/meta"] = np.array([sample.seed, sample.stream_id, sample.frame], dtype=np.float64)
    save_tensors(directory, tensors)


def load_samples(directory: str) -> list[FlowSample]:
    tensors = load_tensors(directory)
    count = sum(1 for name in tensors if name.endswith("/meta"))
    samples = []
    for i in range(count):
        seed, stream_id, frame = (int(v) for v in tensors[f"{i}/meta"])
        samples.append(FlowSample(
            p1=tensors[f"{i}/p1"], p2=tensors[f"{i}/p2"], f_gt=tensors[f"{i}/f_gt"],
            warp=tensors[f"{i}/warp"], seed=seed, stream_id=stream_id, frame=frame,
        ))
    return samples

