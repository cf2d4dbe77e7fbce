"""Forward and backward passes for the layer kinds used by the autoencoders.

Every forward function returns ``(output, cache)``; the matching backward
function takes the upstream gradient and the cache and returns gradients
for the input and for each parameter. Nothing here mutates its arguments.
Arrays are NCHW, float64.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, ShapeError


def _check_4d(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}")


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size, kernel, stride, padding, output_padding=0):
    return (size - 1) * stride - 2 * padding + kernel + output_padding


# --------------------------------------------------------------------------
# convolution


def conv2d_forward(x, weight, bias, stride=1, padding=0):
    """Cross-correlation with a (C_out, C_in, k, k) kernel."""
    _check_4d(x)
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be (C_out, C_in, kh, kw), got {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise ShapeError(f"conv2d expects {c_in} input channels, input has {c} (shape {x.shape})")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"invalid stride={stride} / padding={padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigError(
            f"conv2d kernel {kh}x{kw} does not fit padded input {h}x{w} (padding {padding})"
        )
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, c_out, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out += np.einsum("nchw,oc->nohw", patch, weight[:, :, i, j], optimize=True)
    if bias is not None:
        out += bias[None, :, None, None]
    cache = (xp, weight, stride, padding, x.shape, bias is not None)
    return out, cache


def conv2d_backward(dout, cache):
    """Returns ``(dx, dweight, dbias)``; ``dbias`` is None for bias-free convs."""
    xp, weight, stride, padding, x_shape, has_bias = cache
    _, _, kh, kw = weight.shape
    ho, wo = dout.shape[2:]
    dxp = np.zeros_like(xp)
    dweight = np.zeros_like(weight)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None),
                  slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
            dweight[:, :, i, j] = np.einsum("nohw,nchw->oc", dout, xp[sl], optimize=True)
            dxp[sl] += np.einsum("nohw,oc->nchw", dout, weight[:, :, i, j], optimize=True)
    h, w = x_shape[2:]
    dx = dxp[:, :, padding : padding + h, padding : padding + w]
    dbias = dout.sum(axis=(0, 2, 3)) if has_bias else None
    return dx, dweight, dbias


def conv_transpose2d_forward(x, weight, bias, stride=1, padding=0, output_padding=0):
    """Transposed convolution with a (C_in, C_out, k, k) kernel.

    With the same kernel array this is the adjoint of :func:`conv2d_forward`
    (bias aside), which is how it is tested.
    """
    _check_4d(x)
    if weight.ndim != 4:
        raise ShapeError(f"conv_transpose2d weight must be (C_in, C_out, kh, kw), got {weight.shape}")
    n, c, h, w = x.shape
    c_in, c_out, kh, kw = weight.shape
    if c != c_in:
        raise ShapeError(
            f"conv_transpose2d expects {c_in} input channels, input has {c} (shape {x.shape})"
        )
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv_transpose2d bias must have shape ({c_out},), got {bias.shape}")
    if stride < 1 or padding < 0 or output_padding < 0:
        raise ConfigError(f"invalid stride={stride} / padding={padding} / output_padding={output_padding}")
    ho = conv_transpose_output_size(h, kh, stride, padding, output_padding)
    wo = conv_transpose_output_size(w, kw, stride, padding, output_padding)
    if ho < 1 or wo < 1:
        raise ConfigError(
            f"conv_transpose2d output size {ho}x{wo} is not positive "
            f"(input {h}x{w}, kernel {kh}, stride {stride}, padding {padding})"
        )
    # full-size buffer before the padding crop; output_padding extends bottom/right
    hf = (h - 1) * stride + kh + output_padding
    wf = (w - 1) * stride + kw + output_padding
    full = np.zeros((n, c_out, hf, wf))
    for i in range(kh):
        for j in range(kw):
            full[:, :, i : i + stride * h : stride, j : j + stride * w : stride] += np.einsum(
                "nchw,cd->ndhw", x, weight[:, :, i, j], optimize=True
            )
    out = full[:, :, padding : padding + ho, padding : padding + wo].copy()
    if bias is not None:
        out += bias[None, :, None, None]
    cache = (x, weight, stride, padding, (hf, wf), bias is not None)
    return out, cache


def conv_transpose2d_backward(dout, cache):
    x, weight, stride, padding, (hf, wf), has_bias = cache
    n, _, h, w = x.shape
    _, c_out, kh, kw = weight.shape
    ho, wo = dout.shape[2:]
    dfull = np.zeros((n, c_out, hf, wf))
    dfull[:, :, padding : padding + ho, padding : padding + wo] = dout
    dx = np.zeros_like(x)
    dweight = np.zeros_like(weight)
    for i in range(kh):
        for j in range(kw):
            g = dfull[:, :, i : i + stride * h : stride, j : j + stride * w : stride]
            dx += np.einsum("ndhw,cd->nchw", g, weight[:, :, i, j], optimize=True)
            dweight[:, :, i, j] = np.einsum("nchw,ndhw->cd", x, g, optimize=True)
    dbias = dout.sum(axis=(0, 2, 3)) if has_bias else None
    return dx, dweight, dbias


# --------------------------------------------------------------------------
# batch normalisation


def batchnorm2d_forward(x, gamma, beta, running_mean, running_var,
                        training, momentum=0.1, eps=1e-5):
    """Returns ``(out, cache, new_running_mean, new_running_var)``.

    In eval mode the running statistics are returned unchanged. The running
    variance update uses the unbiased batch variance.
    """
    _check_4d(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm parameters must have shape ({c},)")
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if x.shape[0] < 2:
            raise ShapeError("batchnorm in train mode needs a batch of at least 2 samples")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
        new_mean = (1 - momentum) * running_mean + momentum * mean
        new_var = (1 - momentum) * running_var + momentum * var * m / max(m - 1, 1)
        cache = ("train", xhat, inv_std, gamma)
        return out, cache, new_mean, new_var
    inv_std = 1.0 / np.sqrt(running_var + eps)
    xhat = (x - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = ("eval", xhat, inv_std, gamma)
    return out, cache, running_mean, running_var


def batchnorm2d_backward(dout, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    mode, xhat, inv_std, gamma = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if mode == "eval":
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dx = (inv_std[None, :, None, None] / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    )
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# pooling


def maxpool2d_forward(x, size, stride=None):
    _check_4d(x)
    stride = size if stride is None else stride
    n, c, h, w = x.shape
    ho = (h - size) // stride + 1
    wo = (w - size) // stride + 1
    if size > h or size > w or ho < 1 or wo < 1:
        raise ConfigError(f"max-pool window {size} does not fit input {h}x{w}")
    windows = np.lib.stride_tricks.sliding_window_view(x, (size, size), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :ho, :wo].reshape(n, c, ho, wo, size * size)
    # argmax returns the first maximal index: ties go to the first occurrence
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg, size, stride)


def maxpool2d_backward(dout, cache):
    x_shape, arg, size, stride = cache
    n, c, ho, wo = dout.shape
    dx = np.zeros(x_shape)
    di, dj = np.divmod(arg, size)
    rows = np.arange(ho)[None, None, :, None] * stride + di
    cols = np.arange(wo)[None, None, None, :] * stride + dj
    nn_idx = np.arange(n)[:, None, None, None]
    cc_idx = np.arange(c)[None, :, None, None]
    # windows may overlap when stride < size
    np.add.at(dx, (nn_idx, cc_idx, rows, cols), dout)
    return dx


def _adaptive_bounds(size, out):
    starts = [(i * size) // out for i in range(out)]
    ends = [-((-(i + 1) * size) // out) for i in range(out)]
    return starts, ends


def adaptive_avgpool2d_forward(x, output_size=(1, 1)):
    _check_4d(x)
    n, c, h, w = x.shape
    oh, ow = output_size
    if oh > h or ow > w or oh < 1 or ow < 1:
        raise ConfigError(f"adaptive pool target {oh}x{ow} is larger than input {h}x{w}")
    hs, he = _adaptive_bounds(h, oh)
    ws, we = _adaptive_bounds(w, ow)
    out = np.empty((n, c, oh, ow))
    for i in range(oh):
        for j in range(ow):
            out[:, :, i, j] = x[:, :, hs[i] : he[i], ws[j] : we[j]].mean(axis=(2, 3))
    return out, (x.shape, hs, he, ws, we)


def adaptive_avgpool2d_backward(dout, cache):
    x_shape, hs, he, ws, we = cache
    dx = np.zeros(x_shape)
    for i in range(len(hs)):
        for j in range(len(ws)):
            area = (he[i] - hs[i]) * (we[j] - ws[j])
            dx[:, :, hs[i] : he[i], ws[j] : we[j]] += dout[:, :, i : i + 1, j : j + 1] / area
    return dx


# --------------------------------------------------------------------------
# activations and loss


def activation_forward(x, kind):
    if kind == "relu":
        out = np.maximum(x, 0.0)
    elif kind == "tanh":
        out = np.tanh(x)
    elif kind in ("none", None):
        out = x.copy()
    else:
        raise ConfigError(f"unknown activation {kind!r}")
    return out, (kind, x, out)


def activation_backward(dout, cache):
    kind, x, out = cache
    if kind == "relu":
        # subgradient at exactly 0 is 0
        return dout * (x > 0)
    if kind == "tanh":
        return dout * (1.0 - out * out)
    return dout.copy()


def mse_loss(pred, target):
    """Mean squared error and its gradient with respect to ``pred``."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def center_crop(x, height, width):
    h, w = x.shape[-2:]
    if height > h or width > w:
        raise ShapeError(f"cannot crop {h}x{w} to larger {height}x{width}")
    top = (h - height) // 2
    left = (w - width) // 2
    return x[..., top : top + height, left : left + width], (x.shape, top, left)


def center_crop_backward(dout, cache):
    shape, top, left = cache
    dx = np.zeros(shape)
    dx[..., top : top + dout.shape[-2], left : left + dout.shape[-1]] = dout
    return dx
