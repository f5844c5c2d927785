"""
Dense tensor arithmetic for the solvers and the flow operator.

Every tensor in this code base is a C-ordered float64 ``numpy.ndarray``.
Nothing here broadcasts beyond scalars, and every function is a pure
function of its inputs: two calls with identical arguments give
bit-identical results.

The convolution and bilinear sampling primitives come with hand-written
reverse-mode companions (``*_vjp``). The flow operator chains these to
build its vector-Jacobian products; there is no general autodiff here.
"""

import logging

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage
from scipy.special import expit

logger = logging.getLogger(__name__)

Tensor = npt.NDArray[np.float64]


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


def as_tensor(value) -> Tensor:
    """Returns ``value`` as a contiguous float64 array (copying only if needed)."""
    return np.ascontiguousarray(value, dtype=np.float64)


def l2_norm(t) -> float:
    """Euclidean norm of the flattened tensor."""
    return float(np.linalg.norm(as_tensor(t).ravel()))


def relu(t: Tensor) -> Tensor:
    return np.maximum(t, 0.0)


def sigmoid(t: Tensor) -> Tensor:
    return expit(t)


def _padded_windows(inp: Tensor, kh: int, kw: int, padding: int, stride: int) -> Tensor:
    padded = np.pad(inp, ((0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))
    return windows[:, ::stride, ::stride]


def _check_conv_shapes(inp: Tensor, kernel: Tensor, padding: int, stride: int) -> None:
    if inp.ndim != 3:
        raise ShapeError(f"conv2d input must be [C,H,W], got shape {inp.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be [C_out,C_in,kH,kW], got shape {kernel.shape}")
    if kernel.shape[1] != inp.shape[0]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {inp.shape[0]} channels, "
            f"kernel expects {kernel.shape[1]}"
        )
    kh, kw = kernel.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel sizes must be odd, got {kh}x{kw}")
    if padding < 0 or stride < 1:
        raise ValueError(f"conv2d needs padding >= 0 and stride >= 1, got {padding}, {stride}")
    if inp.shape[1] + 2 * padding < kh or inp.shape[2] + 2 * padding < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {inp.shape[1:]}")


def conv2d(inp, kernel, bias, padding: int = 0, stride: int = 1) -> Tensor:
    """
    Cross-correlation of a [C_in,H,W] tensor with a [C_out,C_in,kH,kW] kernel.

    Zero padding of ``padding`` cells on every side; the output has
    ``(H + 2*padding - kH) // stride + 1`` rows (columns likewise).

    Raises:
        ShapeError: if the channel counts disagree or the kernel is not odd-sized.
    """
    inp, kernel, bias = as_tensor(inp), as_tensor(kernel), as_tensor(bias)
    _check_conv_shapes(inp, kernel, padding, stride)
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv2d bias must have shape ({kernel.shape[0]},), got {bias.shape}")
    kh, kw = kernel.shape[2:]
    windows = _padded_windows(inp, kh, kw, padding, stride)
    out = np.tensordot(kernel, windows, axes=([1, 2, 3], [0, 3, 4]))
    return np.ascontiguousarray(out + bias[:, None, None])


def conv2d_vjp(inp, kernel, padding: int, stride: int, cotangent) -> tuple[Tensor, Tensor, Tensor]:
    """
    Reverse mode of :func:`conv2d`.

    Args:
        inp: The [C_in,H,W] input of the forward call.
        kernel: The [C_out,C_in,kH,kW] kernel of the forward call.
        padding: Forward padding.
        stride: Forward stride.
        cotangent: [C_out,H',W'] cotangent of the output.

    Returns:
        ``(d_input, d_kernel, d_bias)``.
    """
    inp, kernel, cotangent = as_tensor(inp), as_tensor(kernel), as_tensor(cotangent)
    _check_conv_shapes(inp, kernel, padding, stride)
    kh, kw = kernel.shape[2:]
    out_h, out_w = cotangent.shape[1:]

    d_bias = cotangent.sum(axis=(1, 2))
    windows = _padded_windows(inp, kh, kw, padding, stride)
    d_kernel = np.tensordot(cotangent, windows, axes=([1, 2], [1, 2]))

    # [C_in, kH, kW, H', W']: what every output cell pushes back to each tap.
    spread = np.tensordot(kernel, cotangent, axes=([0], [0]))
    d_padded = np.zeros((inp.shape[0], inp.shape[1] + 2 * padding, inp.shape[2] + 2 * padding))
    row_span = stride * (out_h - 1) + 1
    col_span = stride * (out_w - 1) + 1
    for i in range(kh):
        for j in range(kw):
            d_padded[:, i:i + row_span:stride, j:j + col_span:stride] += spread[:, i, j]
    d_input = d_padded[:, padding:padding + inp.shape[1], padding:padding + inp.shape[2]]
    return np.ascontiguousarray(d_input), np.ascontiguousarray(d_kernel), d_bias


def _bilinear_corners(height: int, width: int, x: Tensor, y: Tensor):
    """
    Yields the four interpolation corners of every sample point.

    Each corner is ``(rows, cols, weight, d_weight_dx, d_weight_dy)``. Corners
    outside the grid keep a clipped (valid) index but get zero weight and zero
    weight derivatives, which is the zero-padding convention.
    """
    x0 = np.floor(x)
    y0 = np.floor(y)
    wx = x - x0
    wy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    terms = (
        (0, 0, (1 - wx) * (1 - wy), -(1 - wy), -(1 - wx)),
        (0, 1, wx * (1 - wy), 1 - wy, -wx),
        (1, 0, (1 - wx) * wy, -wy, 1 - wx),
        (1, 1, wx * wy, wy, wx),
    )
    for dy, dx, weight, dwdx, dwdy in terms:
        rows = y0 + dy
        cols = x0 + dx
        valid = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
        yield (
            np.clip(rows, 0, height - 1),
            np.clip(cols, 0, width - 1),
            np.where(valid, weight, 0.0),
            np.where(valid, dwdx, 0.0),
            np.where(valid, dwdy, 0.0),
        )


def bilinear_sample(grid, coords) -> Tensor:
    """
    Samples a [C,H,W] grid at N real-valued (x, y) points given as a [2,N] tensor.

    ``x`` indexes columns and ``y`` rows. Out-of-range corners read as zero.
    """
    grid, coords = as_tensor(grid), as_tensor(coords)
    _, height, width = grid.shape
    out = np.zeros((grid.shape[0], coords.shape[1]))
    for rows, cols, weight, _, _ in _bilinear_corners(height, width, coords[0], coords[1]):
        out += weight * grid[:, rows, cols]
    return out


def bilinear_sample_vjp(grid, coords, cotangent) -> tuple[Tensor, Tensor]:
    """Reverse mode of :func:`bilinear_sample`; returns ``(d_grid, d_coords)``."""
    grid, coords, cotangent = as_tensor(grid), as_tensor(coords), as_tensor(cotangent)
    _, height, width = grid.shape
    d_grid = np.zeros_like(grid)
    d_coords = np.zeros_like(coords)
    for rows, cols, weight, dwdx, dwdy in _bilinear_corners(height, width, coords[0], coords[1]):
        corner_values = grid[:, rows, cols]
        np.add.at(d_grid, (slice(None), rows, cols), weight * cotangent)
        pull = (cotangent * corner_values).sum(axis=0)
        d_coords[0] += dwdx * pull
        d_coords[1] += dwdy * pull
    return d_grid, d_coords


def bilinear_sample_slabs(slabs, x, y) -> Tensor:
    """
    Samples P independent [H,W] slabs, each at its own N points.

    Args:
        slabs: [P,H,W] tensor.
        x, y: [P,N] column / row coordinates.

    Returns:
        [P,N] tensor of samples.
    """
    _, height, width = slabs.shape
    owner = np.arange(slabs.shape[0])[:, None]
    out = np.zeros(x.shape)
    for rows, cols, weight, _, _ in _bilinear_corners(height, width, x, y):
        out += weight * slabs[owner, rows, cols]
    return out


def bilinear_sample_slabs_vjp(slabs, x, y, cotangent) -> tuple[Tensor, Tensor]:
    """Coordinate cotangents ``(d_x, d_y)`` of :func:`bilinear_sample_slabs`."""
    _, height, width = slabs.shape
    owner = np.arange(slabs.shape[0])[:, None]
    d_x = np.zeros(x.shape)
    d_y = np.zeros(y.shape)
    for rows, cols, _, dwdx, dwdy in _bilinear_corners(height, width, x, y):
        pull = cotangent * slabs[owner, rows, cols]
        d_x += dwdx * pull
        d_y += dwdy * pull
    return d_x, d_y


def bilinear_sample_slabs_grid_vjp(shape: tuple[int, int, int], x, y, cotangent) -> Tensor:
    """Slab cotangent [P,H,W] of :func:`bilinear_sample_slabs` (sampling is linear in the slabs)."""
    n_slabs, height, width = shape
    owner = np.broadcast_to(np.arange(n_slabs)[:, None], x.shape)
    d_slabs = np.zeros(shape)
    for rows, cols, weight, _, _ in _bilinear_corners(height, width, x, y):
        np.add.at(d_slabs, (owner, rows, cols), weight * cotangent)
    return d_slabs


def avg_pool2x2(t) -> Tensor:
    """2x2 mean pooling over the last two axes (both must be even)."""
    t = as_tensor(t)
    height, width = t.shape[-2:]
    if height % 2 or width % 2:
        raise ShapeError(f"avg_pool2x2 needs even trailing dims, got {t.shape}")
    pooled = t.reshape(*t.shape[:-2], height // 2, 2, width // 2, 2).mean(axis=(-3, -1))
    return np.ascontiguousarray(pooled)


def avg_pool2x2_vjp(cotangent) -> Tensor:
    """Reverse mode of :func:`avg_pool2x2`: every pooled cotangent is spread evenly over its 2x2 block."""
    cotangent = as_tensor(cotangent)
    spread = np.repeat(np.repeat(cotangent, 2, axis=-2), 2, axis=-1)
    return np.ascontiguousarray(0.25 * spread)


def downsample_flow(flow, factor: int) -> Tensor:
    """Average-pools a [2,H,W] image-resolution flow by ``factor`` and rescales it to feature pixels."""
    flow = as_tensor(flow)
    channels, height, width = flow.shape
    if height % factor or width % factor:
        raise ShapeError(f"flow of shape {flow.shape} is not divisible by {factor}")
    pooled = flow.reshape(channels, height // factor, factor, width // factor, factor).mean(axis=(2, 4))
    return np.ascontiguousarray(pooled / factor)


def upsample_flow(flow, factor: int) -> Tensor:
    """Bilinear x``factor`` upsampling of a feature-resolution flow, values rescaled to image pixels."""
    flow = as_tensor(flow)
    zoomed = ndimage.zoom(flow, (1, factor, factor), order=1, mode="nearest", grid_mode=True)
    return np.ascontiguousarray(zoomed * factor)
