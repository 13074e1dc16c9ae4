"""Dense NHWC tensor primitives with hand-written backward passes.

Tensors are plain numpy arrays. Every op preserves the floating dtype of its
inputs, so the same code runs in float32 for training and float64 for
gradient checking.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class LayerGrad(NamedTuple):
    d_input: np.ndarray
    d_weights: np.ndarray
    d_bias: np.ndarray


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# activation
# ---------------------------------------------------------------------------

def elu(x: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    x = np.asarray(x)
    # expm1 only on the negative side so large positives cannot overflow
    neg = np.minimum(x, 0)
    return np.where(x > 0, x, alpha * np.expm1(neg)).astype(x.dtype, copy=False)


def elu_backward(x: np.ndarray, upstream: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    x = np.asarray(x)
    upstream = np.asarray(upstream)
    _check_same_shape(x, upstream, "elu_backward")
    slope = np.where(x > 0, 1, alpha * np.exp(np.minimum(x, 0)))
    return (upstream * slope).astype(np.result_type(x, upstream), copy=False)


# ---------------------------------------------------------------------------
# convolution geometry
# ---------------------------------------------------------------------------

def conv_output_size(extent: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-extent // stride)
    if padding == "valid":
        return (extent - kernel) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def _pads(extent: int, kernel: int, stride: int, padding: str) -> tuple[int, int]:
    """Leading/trailing zero counts; an odd total puts the extra zero last."""
    if padding == "valid":
        return 0, 0
    out = conv_output_size(extent, kernel, stride, padding)
    total = max((out - 1) * stride + kernel - extent, 0)
    return total // 2, total - total // 2


class _Geometry(NamedTuple):
    out_h: int
    out_w: int
    pad_h: tuple[int, int]
    pad_w: tuple[int, int]


def _geometry(in_h: int, in_w: int, kh: int, kw: int, stride: int, padding: str) -> _Geometry:
    if stride < 1:
        raise ValueError("stride must be a positive integer")
    pad_h = _pads(in_h, kh, stride, padding)
    pad_w = _pads(in_w, kw, stride, padding)
    if kh > in_h + sum(pad_h) or kw > in_w + sum(pad_w):
        raise ValueError(
            f"kernel {kh}x{kw} larger than padded input {in_h + sum(pad_h)}x{in_w + sum(pad_w)}"
        )
    return _Geometry(
        conv_output_size(in_h, kh, stride, padding),
        conv_output_size(in_w, kw, stride, padding),
        pad_h,
        pad_w,
    )


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, geo: _Geometry) -> np.ndarray:
    """Rows are output pixels (n, i, j); columns are (ki, kj, c)."""
    n, _, _, c = x.shape
    xp = np.pad(x, ((0, 0), geo.pad_h, geo.pad_w, (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (geo.out_h - 1) * stride + 1 : stride, : (geo.out_w - 1) * stride + 1 : stride]
    # (n, oh, ow, c, kh, kw) -> (n, oh, ow, kh, kw, c)
    cols = win.transpose(0, 1, 2, 4, 5, 3)
    return cols.reshape(n * geo.out_h * geo.out_w, kh * kw * c)


def _col2im(
    cols: np.ndarray, in_shape: tuple[int, ...], kh: int, kw: int, stride: int, geo: _Geometry
) -> np.ndarray:
    """Scatter-add adjoint of ``_im2col``."""
    n, h, w, c = in_shape
    cols = cols.reshape(n, geo.out_h, geo.out_w, kh, kw, c)
    hp = h + sum(geo.pad_h)
    wp = w + sum(geo.pad_w)
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    span_h = (geo.out_h - 1) * stride + 1
    span_w = (geo.out_w - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + span_h : stride, j : j + span_w : stride, :] += cols[:, :, :, i, j, :]
    return out[:, geo.pad_h[0] : geo.pad_h[0] + h, geo.pad_w[0] : geo.pad_w[0] + w, :]


def _check_conv_args(x: np.ndarray, kernels: np.ndarray) -> None:
    if x.ndim != 4 or kernels.ndim != 4:
        raise ValueError("conv expects input [N,H,W,C] and kernels [kh,kw,C,F]")
    if x.shape[3] != kernels.shape[2]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[3]}, kernels expect {kernels.shape[2]}"
        )


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(
    x: np.ndarray,
    kernels: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    padding: str = "same",
) -> np.ndarray:
    """Cross-correlation of ``x`` [N,H,W,C] with ``kernels`` [kh,kw,C,F]."""
    _check_conv_args(x, kernels)
    n, h, w, _ = x.shape
    kh, kw, c, f = kernels.shape
    geo = _geometry(h, w, kh, kw, stride, padding)
    out = _im2col(x, kh, kw, stride, geo) @ kernels.reshape(kh * kw * c, f)
    if bias is not None:
        out += bias
    return out.reshape(n, geo.out_h, geo.out_w, f)


def conv2d_backward(
    x: np.ndarray,
    kernels: np.ndarray,
    stride: int,
    padding: str,
    upstream: np.ndarray,
) -> LayerGrad:
    _check_conv_args(x, kernels)
    n, h, w, _ = x.shape
    kh, kw, c, f = kernels.shape
    geo = _geometry(h, w, kh, kw, stride, padding)
    expected = (n, geo.out_h, geo.out_w, f)
    if upstream.shape != expected:
        raise ValueError(f"conv2d_backward: upstream {upstream.shape}, expected {expected}")
    g = upstream.reshape(-1, f)
    cols = _im2col(x, kh, kw, stride, geo)
    d_weights = (cols.T @ g).reshape(kernels.shape)
    d_cols = g @ kernels.reshape(kh * kw * c, f).T
    d_input = _col2im(d_cols, x.shape, kh, kw, stride, geo)
    return LayerGrad(d_input, d_weights, g.sum(axis=0))


def _deconv_geometry(
    y: np.ndarray, kernels: np.ndarray, stride: int, padding: str, output_shape
) -> tuple[tuple[int, int, int, int], _Geometry]:
    if y.ndim != 4 or kernels.ndim != 4:
        raise ValueError("deconv expects input [N,h,w,F] and kernels [kh,kw,C,F]")
    if y.shape[3] != kernels.shape[3]:
        raise ValueError(
            f"channel mismatch: input has {y.shape[3]}, kernels expect {kernels.shape[3]}"
        )
    output_shape = tuple(output_shape)
    if len(output_shape) == 4:
        output_shape = output_shape[1:3]
    if len(output_shape) != 2:
        raise ValueError(f"output_shape must be (H, W) or (N, H, W, C), got {output_shape}")
    out_h, out_w = (int(v) for v in output_shape)
    kh, kw, c, _ = kernels.shape
    geo = _geometry(out_h, out_w, kh, kw, stride, padding)
    if (geo.out_h, geo.out_w) != y.shape[1:3]:
        raise ValueError(
            f"output shape {out_h}x{out_w} inconsistent with input {y.shape[1]}x{y.shape[2]} "
            f"at stride {stride} ({padding})"
        )
    return (y.shape[0], out_h, out_w, c), geo


def deconv2d(
    y: np.ndarray,
    kernels: np.ndarray,
    bias: np.ndarray | None,
    stride: int,
    output_shape,
    padding: str = "same",
) -> np.ndarray:
    """Transposed convolution: the adjoint of ``conv2d`` with the same kernels.

    ``output_shape`` gives the spatial extent (H, W) of the result; any
    leading entries are ignored.
    """
    in_shape, geo = _deconv_geometry(y, kernels, stride, padding, output_shape)
    kh, kw, c, f = kernels.shape
    cols = y.reshape(-1, f) @ kernels.reshape(kh * kw * c, f).T
    out = _col2im(cols, in_shape, kh, kw, stride, geo)
    if bias is not None:
        out = out + bias
    return out


def deconv2d_backward(
    y: np.ndarray,
    kernels: np.ndarray,
    stride: int,
    upstream: np.ndarray,
    padding: str = "same",
) -> LayerGrad:
    in_shape, geo = _deconv_geometry(y, kernels, stride, padding, upstream.shape[1:3])
    if upstream.shape != in_shape:
        raise ValueError(f"deconv2d_backward: upstream {upstream.shape}, expected {in_shape}")
    kh, kw, c, f = kernels.shape
    cols = _im2col(upstream, kh, kw, stride, geo)
    d_input = (cols @ kernels.reshape(kh * kw * c, f)).reshape(y.shape)
    d_weights = (cols.T @ y.reshape(-1, f)).reshape(kernels.shape)
    return LayerGrad(d_input, d_weights, upstream.sum(axis=(0, 1, 2)))


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ValueError(f"dense: cannot multiply {x.shape} by {weights.shape}")
    out = x @ weights
    if bias is not None:
        if bias.shape != (weights.shape[1],):
            raise ValueError(f"dense: bias shape {bias.shape}, expected ({weights.shape[1]},)")
        out += bias
    return out


def dense_backward(x: np.ndarray, weights: np.ndarray, upstream: np.ndarray) -> LayerGrad:
    if upstream.shape != (x.shape[0], weights.shape[1]) or x.shape[1] != weights.shape[0]:
        raise ValueError(
            f"dense_backward: input {x.shape}, weights {weights.shape}, upstream {upstream.shape}"
        )
    return LayerGrad(upstream @ weights.T, x.T @ upstream, upstream.sum(axis=0))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def gradient_check(
    scalar_fn: Callable[[dict], tuple[float, dict]],
    params: dict[str, np.ndarray],
    epsilon: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``scalar_fn(params)`` must return ``(value, grads)`` where ``grads`` maps
    parameter names to analytic gradients. Parameters are perturbed in place
    and restored. With ``max_entries`` only a seeded random subset of each
    tensor is probed.
    """
    if not 1e-6 <= epsilon <= 1e-2:
        raise ValueError("epsilon must lie in [1e-6, 1e-2]")
    value, analytic = scalar_fn(params)
    if not np.isfinite(value):
        raise FloatingPointError("scalar function returned a non-finite value")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        if name not in analytic:
            continue
        flat = p.reshape(-1)
        grad = np.asarray(analytic[name]).reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus, _ = scalar_fn(params)
            flat[i] = orig - epsilon
            f_minus, _ = scalar_fn(params)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(f"non-finite value while perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2 * epsilon)
            a = float(grad[i])
            denom = max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
