"""
Pure numpy forward and vector-Jacobian rules for every operation the network uses.

Each ``*_forward`` returns the output array plus whatever intermediates the
matching ``*_backward`` needs. Nothing here records anything: the tape in
``app.tensor.tape`` pairs these rules and keeps the saved values.
"""

from typing import Dict, Tuple

import numpy as np

from app.errors import ShapeError, UsageError

DTYPE = np.float64


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    """Spatial output length of a dilated, strided, zero-padded convolution."""
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _check_conv_args(
    x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int, dilation: int, padding: int
) -> None:
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be (out_c, in_c, kh, kw), got shape {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(
            f"channel axis mismatch: input has {x.shape[1]} channels, "
            f"kernel expects {kernel.shape[1]}"
        )
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(
            f"bias axis mismatch: expected ({kernel.shape[0]},), got {bias.shape}"
        )
    kh, kw = kernel.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel height/width axes must be odd, got {kh}x{kw}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise UsageError(
            f"invalid convolution geometry: stride={stride}, dilation={dilation}, padding={padding}"
        )


def _im2col(
    xp: np.ndarray, kh: int, kw: int, oh: int, ow: int, stride: int, dilation: int
) -> np.ndarray:
    # cols[n, c, i, j, y, x] = xp[n, c, i*d + y*s, j*d + x*s]
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=DTYPE)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            cols[:, :, i, j] = xp[
                :,
                :,
                r0 : r0 + stride * (oh - 1) + 1 : stride,
                c0 : c0 + stride * (ow - 1) + 1 : stride,
            ]
    return cols


def conv2d_forward(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """
    Cross-correlation of a batch with a bank of kernels (no kernel flip).

    Args:
        x: Input of shape (n, in_c, h, w)
        kernel: Kernel bank of shape (out_c, in_c, kh, kw), kh and kw odd
        bias: Per-output-channel bias of shape (out_c,)
        stride: Step between output taps
        dilation: Spacing between kernel taps
        padding: Zero padding added on every spatial side

    Returns:
        The (n, out_c, oh, ow) output and the intermediates for the backward rule
    """
    _check_conv_args(x, kernel, bias, stride, dilation, padding)
    _, _, h, w = x.shape
    _, _, kh, kw = kernel.shape
    oh = conv_output_size(h, kh, stride, dilation, padding)
    ow = conv_output_size(w, kw, stride, dilation, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"height/width axes too small for the kernel: input {h}x{w}, output {oh}x{ow}"
        )

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, oh, ow, stride, dilation)

    # (n, oh, ow, out_c) -> (n, out_c, oh, ow)
    out = np.tensordot(cols, kernel, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias[None, :, None, None]
    saved = {"cols": cols, "padded_shape": np.array(xp.shape)}
    return np.ascontiguousarray(out), saved


def conv2d_backward(
    grad_out: np.ndarray,
    kernel: np.ndarray,
    saved: Dict[str, np.ndarray],
    stride: int,
    dilation: int,
    padding: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d with respect to input, kernel and bias."""
    cols = saved["cols"]
    n, c, hp, wp = (int(v) for v in saved["padded_shape"])
    _, _, kh, kw = kernel.shape
    oh, ow = grad_out.shape[2:]

    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_kernel = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 4, 5]))

    # (n, oh, ow, c, kh, kw) -> (n, c, kh, kw, oh, ow)
    grad_cols = np.tensordot(grad_out, kernel, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
    grad_xp = np.zeros((n, c, hp, wp), dtype=DTYPE)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            grad_xp[
                :,
                :,
                r0 : r0 + stride * (oh - 1) + 1 : stride,
                c0 : c0 + stride * (ow - 1) + 1 : stride,
            ] += grad_cols[:, :, i, j]

    grad_x = grad_xp[:, :, padding : hp - padding, padding : wp - padding]
    return np.ascontiguousarray(grad_x), grad_kernel, grad_bias


# ---------------------------------------------------------------------------
# Elementwise activations
# ---------------------------------------------------------------------------


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    return grad_out * (x > 0.0)


def tanh_forward(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(grad_out: np.ndarray, y: np.ndarray) -> np.ndarray:
    return grad_out * (1.0 - y * y)


# ---------------------------------------------------------------------------
# Spatial reductions
# ---------------------------------------------------------------------------


def spatial_softmax_forward(m: np.ndarray) -> np.ndarray:
    """Softmax over all (h, w) positions of a single-channel map, per batch item."""
    if m.shape[1] != 1:
        raise ShapeError(f"channel axis must be 1 for spatial softmax, got {m.shape[1]}")
    z = m - m.max(axis=(2, 3), keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=(2, 3), keepdims=True)


def spatial_softmax_backward(grad_out: np.ndarray, s: np.ndarray) -> np.ndarray:
    inner = (grad_out * s).sum(axis=(2, 3), keepdims=True)
    return s * (grad_out - inner)


def channel_sum_forward(x: np.ndarray) -> np.ndarray:
    return x.sum(axis=1, keepdims=True)


def channel_sum_backward(grad_out: np.ndarray, channels: int) -> np.ndarray:
    return np.repeat(grad_out, channels, axis=1)


def global_avg_pool_forward(x: np.ndarray) -> np.ndarray:
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"height/width axes must be non-empty, got {x.shape}")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(grad_out: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    _, _, h, w = shape
    grad = grad_out[:, :, None, None] / float(h * w)
    return np.ascontiguousarray(np.broadcast_to(grad, shape))


# ---------------------------------------------------------------------------
# Dense layers
# ---------------------------------------------------------------------------


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects matrices, got x {x.shape} and weight {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"feature axis mismatch: x has {x.shape[1]} features, weight expects {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias axis mismatch: expected ({weight.shape[0]},), got {bias.shape}")
    return x @ weight.T + bias


def linear_backward(
    grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def concat_forward(parts) -> np.ndarray:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"batch axis mismatch in concat: {sorted(rows)}")
    return np.concatenate(parts, axis=1)


def concat_backward(grad_out: np.ndarray, widths) -> list:
    splits = np.cumsum(widths)[:-1]
    return [np.ascontiguousarray(g) for g in np.split(grad_out, splits, axis=1)]


# ---------------------------------------------------------------------------
# Gated attention primitives
# ---------------------------------------------------------------------------


def check_map_shape(x: np.ndarray, s: np.ndarray) -> None:
    if s.shape[1] != 1:
        raise ShapeError(f"channel axis of the semantic map must be 1, got {s.shape[1]}")
    if s.shape[0] != x.shape[0] or s.shape[2:] != x.shape[2:]:
        raise ShapeError(
            f"spatial axes mismatch: features {x.shape}, map {s.shape}"
        )


def correspondence_forward(x: np.ndarray, s: np.ndarray) -> np.ndarray:
    """
    Inner product of every flattened channel with the flattened map.

    Produces one scalar per channel, (n, C); the C x C channel affinity is never formed.
    """
    check_map_shape(x, s)
    return np.einsum("nkhw,nhw->nk", x, s[:, 0])


def correspondence_backward(
    grad_out: np.ndarray, x: np.ndarray, s: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    grad_x = grad_out[:, :, None, None] * s
    grad_s = np.einsum("nk,nkhw->nhw", grad_out, x)[:, None]
    return grad_x, grad_s


def gated_mean_forward(x: np.ndarray, gates: np.ndarray) -> np.ndarray:
    """(1/C) * sum_k gate_k * X_k, one map per batch item."""
    if gates.shape != x.shape[:2]:
        raise ShapeError(f"gate axes mismatch: features {x.shape}, gates {gates.shape}")
    channels = x.shape[1]
    return np.einsum("nk,nkhw->nhw", gates, x)[:, None] / channels


def gated_mean_backward(
    grad_out: np.ndarray, x: np.ndarray, gates: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    channels = x.shape[1]
    grad_x = gates[:, :, None, None] * grad_out / channels
    grad_gates = np.einsum("nkhw,nhw->nk", x, grad_out[:, 0]) / channels
    return grad_x, grad_gates


# ---------------------------------------------------------------------------
# Bilinear crop and resize
# ---------------------------------------------------------------------------


def bilinear_matrix(src_len: int, dst_len: int) -> np.ndarray:
    """
    Resampling matrix R of shape (dst_len, src_len) so that dst = R @ src.

    Half-pixel centres: src = (dst + 0.5) * (src_len / dst_len) - 0.5, clamped to
    [0, src_len - 1]. Every row is a convex combination of at most two taps.
    """
    if src_len < 1 or dst_len < 1:
        raise UsageError(f"resample lengths must be positive, got {src_len} -> {dst_len}")
    if src_len == dst_len:
        return np.eye(dst_len, dtype=DTYPE)

    scale = src_len / dst_len
    matrix = np.zeros((dst_len, src_len), dtype=DTYPE)
    for dst in range(dst_len):
        src = min(max((dst + 0.5) * scale - 0.5, 0.0), src_len - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, src_len - 1)
        t = src - i0
        matrix[dst, i0] += 1.0 - t
        matrix[dst, i1] += t
    return matrix


def crop_resize_forward(
    image: np.ndarray, box: Tuple[int, int, int, int], out: int
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """
    Crop rows [row0, row1) and columns [col0, col1) and resample to out x out.

    Args:
        image: Array of shape (n, c, H, W)
        box: Pixel box (row0, col0, row1, col1), inclusive-exclusive
        out: Side length of the square output

    Returns:
        The (n, c, out, out) patch and the resampling matrices
    """
    row0, col0, row1, col1 = (int(v) for v in box)
    _, _, height, width = image.shape
    if row1 <= row0 or col1 <= col0:
        raise UsageError(f"degenerate crop box {box}: zero area")
    if row0 < 0 or col0 < 0 or row1 > height or col1 > width:
        raise UsageError(f"crop box {box} lies outside the {height}x{width} image")
    if out < 1:
        raise UsageError(f"output size must be positive, got {out}")

    ry = bilinear_matrix(row1 - row0, out)
    rx = bilinear_matrix(col1 - col0, out)
    crop = image[:, :, row0:row1, col0:col1]
    patch = ry @ crop @ rx.T
    return patch, {"ry": ry, "rx": rx}


def crop_resize_backward(
    grad_out: np.ndarray,
    image_shape: Tuple[int, ...],
    box: Tuple[int, int, int, int],
    saved: Dict[str, np.ndarray],
) -> np.ndarray:
    row0, col0, row1, col1 = (int(v) for v in box)
    grad_image = np.zeros(image_shape, dtype=DTYPE)
    grad_image[:, :, row0:row1, col0:col1] = saved["ry"].T @ grad_out @ saved["rx"]
    return grad_image


# ---------------------------------------------------------------------------
# Losses and scalar plumbing
# ---------------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax via log-sum-exp."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy_forward(logits: np.ndarray, label: int) -> np.ndarray:
    """Mean over rows of -log softmax(logits)[label]; logits is (n, K)."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (n, K), got {logits.shape}")
    num_classes = logits.shape[1]
    if not 0 <= label < num_classes:
        raise UsageError(f"label {label} out of range for {num_classes} classes")
    return np.array(-log_softmax(logits)[:, label].mean())


def cross_entropy_backward(grad_out: np.ndarray, logits: np.ndarray, label: int) -> np.ndarray:
    probs = softmax(logits)
    probs[:, label] -= 1.0
    return grad_out * probs / logits.shape[0]
