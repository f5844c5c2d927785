"""
Model sizes and the flat parameter vector of the toy flow model.

All weights live in one float64 vector theta. :class:`ParamLayout` maps
names to slices of it in a fixed order, so checkpoints, the optimizer and the
VJPs agree on where every entry lives.
"""

import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from config import (
    ATTENTION_CHANNELS,
    CONTEXT_CHANNELS,
    CORR_LEVELS,
    CORR_RADIUS,
    ENCODER_HIDDEN_CHANNELS,
    FEATURE_CHANNELS,
    FLOW_HEAD_CHANNELS,
    HIDDEN_CHANNELS,
    MOTION_CHANNELS,
    TOTAL_STRIDE,
)
from numerics.rng import Rng
from numerics.serialization import load_tensors, save_tensors
from numerics.tensor_ops import Tensor, as_tensor

logger = logging.getLogger(__name__)

VARIANTS = ("raft", "gma")


@dataclass(frozen=True)
class ModelConfig:
    """Channel widths, stride and correlation settings of the toy model."""
    variant: str = "raft"
    total_stride: int = TOTAL_STRIDE
    encoder_channels: int = ENCODER_HIDDEN_CHANNELS
    feature_channels: int = FEATURE_CHANNELS
    context_channels: int = CONTEXT_CHANNELS
    hidden_channels: int = HIDDEN_CHANNELS
    motion_channels: int = MOTION_CHANNELS
    flow_head_channels: int = FLOW_HEAD_CHANNELS
    attention_channels: int = ATTENTION_CHANNELS
    corr_levels: int = CORR_LEVELS
    corr_radius: int = CORR_RADIUS

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"Unknown model variant '{self.variant}', expected one of {VARIANTS}")
        if self.total_stride < 2 or self.total_stride % 2:
            raise ValueError(f"total_stride must be an even number >= 2, got {self.total_stride}")
        if self.corr_levels < 1 or self.corr_radius < 0:
            raise ValueError("corr_levels must be >= 1 and corr_radius >= 0")
        widths = (
            self.encoder_channels, self.feature_channels, self.context_channels, self.hidden_channels,
            self.motion_channels, self.flow_head_channels, self.attention_channels,
        )
        if min(widths) < 1:
            raise ValueError(f"All channel counts must be positive, got {widths}")

    @property
    def first_stride(self) -> int:
        return self.total_stride // 2

    @property
    def corr_channels(self) -> int:
        return self.corr_levels * (2 * self.corr_radius + 1) ** 2

    @property
    def gru_input_channels(self) -> int:
        """Width of ``u``: ``[x, q]`` for RAFT, ``[x_hat, x, q]`` for GMA."""
        extra = self.motion_channels if self.variant == "gma" else 0
        return extra + self.motion_channels + self.context_channels


def _stride_kernel(stride: int) -> tuple[int, int]:
    """Kernel size and padding that map H to exactly H / stride."""
    return 2 * stride - 1, stride - 1


def encoder_geometry(cfg: ModelConfig) -> list[tuple[int, int, int]]:
    """(kernel, padding, stride) of the two encoder layers."""
    k1, p1 = _stride_kernel(cfg.first_stride)
    k2, p2 = _stride_kernel(2)
    return [(k1, p1, cfg.first_stride), (k2, p2, 2)]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every named parameter with its shape, in storage order."""
    (k1, _, _), (k2, _, _) = encoder_geometry(cfg)
    c_hu = cfg.hidden_channels + cfg.gru_input_channels
    shapes = [
        ("enc1_w", (cfg.encoder_channels, 3, k1, k1)),
        ("enc1_b", (cfg.encoder_channels,)),
        ("enc2_w", (cfg.feature_channels, cfg.encoder_channels, k2, k2)),
        ("enc2_b", (cfg.feature_channels,)),
        ("ctx1_w", (cfg.encoder_channels, 3, k1, k1)),
        ("ctx1_b", (cfg.encoder_channels,)),
        ("ctx2_w", (cfg.context_channels, cfg.encoder_channels, k2, k2)),
        ("ctx2_b", (cfg.context_channels,)),
        ("motion_w", (cfg.motion_channels, cfg.context_channels + 2 + cfg.corr_channels, 3, 3)),
        ("motion_b", (cfg.motion_channels,)),
        ("gru_z_w", (cfg.hidden_channels, c_hu, 3, 3)),
        ("gru_z_b", (cfg.hidden_channels,)),
        ("gru_r_w", (cfg.hidden_channels, c_hu, 3, 3)),
        ("gru_r_b", (cfg.hidden_channels,)),
        ("gru_q_w", (cfg.hidden_channels, c_hu, 3, 3)),
        ("gru_q_b", (cfg.hidden_channels,)),
        ("head1_w", (cfg.flow_head_channels, cfg.hidden_channels, 3, 3)),
        ("head1_b", (cfg.flow_head_channels,)),
        ("head2_w", (2, cfg.flow_head_channels, 3, 3)),
        ("head2_b", (2,)),
    ]
    if cfg.variant == "gma":
        shapes += [
            ("attn_q_w", (cfg.attention_channels, cfg.context_channels)),
            ("attn_k_w", (cfg.attention_channels, cfg.context_channels)),
            ("attn_v_w", (cfg.motion_channels, cfg.motion_channels)),
        ]
    return shapes


class ParamLayout:
    """Name -> slice mapping of the flat parameter vector."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.shapes: dict[str, tuple[int, ...]] = {}
        self.slices: dict[str, slice] = {}
        offset = 0
        for name, shape in param_shapes(cfg):
            size = math.prod(shape)
            self.shapes[name] = shape
            self.slices[name] = slice(offset, offset + size)
            offset += size
        self.size = offset

    @property
    def names(self) -> list[str]:
        return list(self.shapes)

    def views(self, theta: Tensor) -> dict[str, Tensor]:
        """Reshaped read-only views into ``theta``, one per parameter."""
        theta = as_tensor(theta)
        if theta.shape != (self.size,):
            raise ValueError(f"Parameter vector has shape {theta.shape}, expected ({self.size},)")
        return {name: theta[self.slices[name]].reshape(shape) for name, shape in self.shapes.items()}

    def flatten(self, named: dict[str, Tensor]) -> Tensor:
        """Packs named tensors into a vector; missing names are zero."""
        theta = np.zeros(self.size)
        for name, value in named.items():
            if name not in self.slices:
                raise ValueError(f"Unknown parameter '{name}'")
            value = as_tensor(value)
            if value.shape != self.shapes[name]:
                raise ValueError(f"Parameter '{name}' has shape {value.shape}, expected {self.shapes[name]}")
            theta[self.slices[name]] = value.ravel()
        return theta


def init_params(cfg: ModelConfig, rng: Rng) -> Tensor:
    """
    Draws an initial parameter vector.

    Kernels are Gaussian with variance 2 / fan_in (1 / fan_in before
    sigmoid/tanh), biases are zero. The first encoder layers have zero-mean
    filters so a constant image encodes to the same features everywhere. The
    last flow-head layer starts small so the first updates are gentle.
    """
    layout = ParamLayout(cfg)
    named = {}
    for name, shape in layout.shapes.items():
        if name.endswith("_b"):
            named[name] = np.zeros(shape)
            continue
        fan_in = math.prod(shape[1:])
        gain = 1.0 if name.startswith(("gru", "attn")) else 2.0
        weight = rng.standard_normal(shape) * math.sqrt(gain / fan_in)
        if name in ("enc1_w", "ctx1_w"):
            weight -= weight.mean(axis=(1, 2, 3), keepdims=True)
        if name == "head2_w":
            weight *= 0.1
        named[name] = weight
    logger.debug(f"Initialized {len(named)} parameter tensors ({layout.size} values) for '{cfg.variant}'")
    return layout.flatten(named)


def save_checkpoint(directory: str, layout: ParamLayout, theta: Tensor) -> None:
    """Writes ``theta`` as one named tensor per parameter."""
    save_tensors(directory, layout.views(theta))
    logger.info(f"Checkpoint with {layout.size} parameters written to {directory}")


def load_checkpoint(directory: str, layout: ParamLayout) -> Tensor:
    """Reads a checkpoint written by :func:`save_checkpoint` for the same layout."""
    if not os.path.isdir(directory):
        raise ValueError(f"Checkpoint directory '{directory}' does not exist")
    named = load_tensors(directory)
    missing = set(layout.names) - set(named)
    if missing:
        raise ValueError(f"Checkpoint {directory} is missing parameters {sorted(missing)}")
    return layout.flatten(named)
