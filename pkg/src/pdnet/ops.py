"""Forward operators and their taped backward rules.

Convolutions are lowered to one GEMM per call via an im2col buffer in
(C*k*k, N*oh*ow) layout; the transposed convolution is the exact adjoint of
conv2d with the same geometry (cross-correlation, zero padding, no kernel
flip).  Gradient buffers of intermediates are allocated lazily on first
accumulation; an op whose output never received a gradient propagates
nothing.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, active_tape


def _result(data, *inputs) -> Tensor:
    rg = active_tape() is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs)
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = rg
    t.grad = None
    t.frozen = False
    return t


def _record(out: Tensor, fn):
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(fn)


def _acc(t: Tensor, arr):
    """Accumulate a gradient the caller owns (fresh array, safe to adopt)."""
    if t.grad is None:
        t.grad = arr
    else:
        t.grad += arr


def _acc_copy(t: Tensor, arr):
    """Accumulate a gradient from a shared array or view."""
    if t.grad is None:
        t.grad = arr.copy()
    else:
        t.grad += arr


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # (C*k*k, N*oh*ow) layout; per-sample copies avoid axis permutation
    n, c, _, _ = xp.shape
    col = np.empty((c, k, k, n, oh, ow), xp.dtype)
    for i in range(k):
        for j in range(k):
            dst = col[:, i, j]
            for nn in range(n):
                dst[:, nn] = xp[nn, :, i:i + oh * stride:stride,
                                j:j + ow * stride:stride]
    return col.reshape(c * k * k, n * oh * ow)


def _col2im_add(x: Tensor, gcol: np.ndarray, k: int, stride: int,
                padding: int, oh: int, ow: int):
    n, c, h, w = x.shape
    g6 = gcol.reshape(c, k, k, n, oh, ow)
    if padding:
        buf = np.zeros((n, c, h + 2 * padding, w + 2 * padding), gcol.dtype)
    else:
        if x.grad is None:
            x.grad = np.zeros((n, c, h, w), gcol.dtype)
        buf = x.grad
    for i in range(k):
        for j in range(k):
            dst = buf[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride]
            src = g6[:, i, j]
            for nn in range(n):
                dst[nn] += src[:, nn]
    if padding:
        _acc_copy(x, buf[:, :, padding:padding + h, padding:padding + w])


def _check_bias(bias, co, opname):
    if bias is not None and bias.shape != (1, co, 1, 1):
        raise ShapeError(f"{opname}: bias must have shape (1,{co},1,1), got {bias.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding; out = (H + 2p - k)//stride + 1."""
    n, ci, h, w = x.shape
    co, wci, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    k = kh
    if wci != ci:
        raise ShapeError(f"conv2d: input has {ci} channels but weight expects {wci}")
    _check_bias(bias, co, "conv2d")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(
            f"conv2d: padded input {h + 2 * padding}x{w + 2 * padding} smaller than kernel {k}")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("conv2d: zero-size spatial output")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    col = _im2col(xp, k, stride, oh, ow)
    wmat = weight.data.reshape(co, ci * k * k)
    out2 = wmat @ col  # (Co, N*oh*ow)
    if bias is not None:
        out2 += bias.data.reshape(co, 1)
    out = np.ascontiguousarray(out2.reshape(co, n, oh, ow).transpose(1, 0, 2, 3))

    t = _result(out, x, weight, bias)
    if t.requires_grad:
        col_saved = col if weight.requires_grad else None

        def bwd():
            g = t.grad
            if g is None:
                return
            g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, n * oh * ow)
            if bias is not None and bias.requires_grad:
                _acc(bias, g2.sum(axis=1).reshape(1, co, 1, 1))
            if weight.requires_grad:
                _acc(weight, (g2 @ col_saved.T).reshape(weight.shape))
            if x.requires_grad:
                _col2im_add(x, wmat.T @ g2, k, stride, padding, oh, ow)

        _record(t, bwd)
    return t


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                      stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of conv2d with the same geometry; out = (H-1)*stride - 2p + k."""
    n, ci, h, w = x.shape
    wci, co, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError(f"transposed_conv2d: kernel must be square, got {kh}x{kw}")
    k = kh
    if wci != ci:
        raise ShapeError(
            f"transposed_conv2d: input has {ci} channels but weight expects {wci}")
    _check_bias(bias, co, "transposed_conv2d")
    oh = (h - 1) * stride - 2 * padding + k
    ow = (w - 1) * stride - 2 * padding + k
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"transposed_conv2d: non-positive output extent {oh}x{ow}")

    x2 = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(ci, n * h * w)
    wmat = weight.data.reshape(ci, co * k * k)
    col = (wmat.T @ x2).reshape(co, k, k, n, h, w)
    buf = np.zeros((n, co, oh + 2 * padding, ow + 2 * padding), x.data.dtype)
    for i in range(k):
        for j in range(k):
            dst = buf[:, :, i:i + h * stride:stride, j:j + w * stride:stride]
            src = col[:, i, j]
            for nn in range(n):
                dst[nn] += src[:, nn]
    out = np.ascontiguousarray(buf[:, :, padding:padding + oh, padding:padding + ow]) \
        if padding else buf
    if bias is not None:
        out += bias.data

    t = _result(out, x, weight, bias)
    if t.requires_grad:
        x2_saved = x2 if weight.requires_grad else None

        def bwd():
            g = t.grad
            if g is None:
                return
            gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
                if padding else g
            gcol = _im2col(gp, k, stride, h, w)  # (Co*k*k, N*h*w)
            if bias is not None and bias.requires_grad:
                _acc(bias, g.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1))
            if weight.requires_grad:
                _acc(weight, (x2_saved @ gcol.T).reshape(weight.shape))
            if x.requires_grad:
                gx = (wmat @ gcol).reshape(ci, n, h, w).transpose(1, 0, 2, 3)
                _acc(x, np.ascontiguousarray(gx))

        _record(t, bwd)
    return t


def max_pool2d(x: Tensor) -> Tensor:
    """2x2/stride-2 max pool; gradient goes to the first max in row-major scan."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d: spatial extents must be even, got {h}x{w}")
    oh, ow = h // 2, w // 2
    win = x.data.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5) \
        .reshape(n, c, oh, ow, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    t = _result(out, x)
    if t.requires_grad:
        def bwd():
            if t.grad is None:
                return
            buf = np.zeros((n, c, oh, ow, 4), x.data.dtype)
            np.put_along_axis(buf, idx[..., None], t.grad[..., None], axis=-1)
            _acc(x, buf.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
                 .reshape(n, c, h, w))

        _record(t, bwd)
    return t


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, eps: float = 1e-5,
               momentum: float = 0.1) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Training mode normalizes with batch statistics and updates the running
    buffers in place (exponential moving average, unbiased variance); eval
    mode normalizes with the running buffers.
    """
    n, c, h, w = x.shape
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p.shape != (1, c, 1, 1):
            raise ShapeError(f"batch_norm: {name} must have shape (1,{c},1,1), got {p.shape}")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"batch_norm: running stats must have shape ({c},)")

    if training:
        m = n * h * w
        if m < 2:
            raise ShapeError(
                "batch_norm: training mode needs at least 2 values per channel")
        s1 = np.einsum("nchw->c", x.data, optimize=True)
        s2 = np.einsum("nchw,nchw->c", x.data, x.data, optimize=True)
        mean = s1 / m
        var = np.maximum(s2 / m - mean * mean, 0.0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1.0))
    else:
        mean = running_mean
        var = running_var

    invstd = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype).reshape(1, c, 1, 1)
    xhat = (x.data - mean.astype(x.data.dtype).reshape(1, c, 1, 1)) * invstd
    out = gamma.data * xhat + beta.data

    t = _result(out, x, gamma, beta)
    if t.requires_grad:
        def bwd():
            g = t.grad
            if g is None:
                return
            if gamma.requires_grad:
                _acc(gamma, np.einsum("nchw,nchw->c", g, xhat,
                                      optimize=True).reshape(1, c, 1, 1))
            if beta.requires_grad:
                _acc(beta, np.einsum("nchw->c", g, optimize=True).reshape(1, c, 1, 1))
            if x.requires_grad:
                gxhat = g * gamma.data
                if training:
                    m = float(n * h * w)
                    r1 = np.einsum("nchw->c", gxhat, optimize=True).reshape(1, c, 1, 1)
                    r2 = np.einsum("nchw,nchw->c", gxhat, xhat,
                                   optimize=True).reshape(1, c, 1, 1)
                    _acc(x, invstd * (gxhat - r1 / m - xhat * (r2 / m)))
                else:
                    _acc(x, gxhat * invstd)

        _record(t, bwd)
    return t


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    t = _result(out, x)
    if t.requires_grad:
        mask = x.data > 0  # subgradient at 0 is 0

        def bwd():
            if t.grad is not None:
                _acc(x, t.grad * mask)

        _record(t, bwd)
    return t


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; output strictly inside (0, 1)."""
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    tiny = np.nextafter(d.dtype.type(0), d.dtype.type(1))
    top = np.nextafter(d.dtype.type(1), d.dtype.type(0))
    np.clip(out, tiny, top, out=out)

    t = _result(out, x)
    if t.requires_grad:
        def bwd():
            if t.grad is not None:
                _acc(x, t.grad * (out * (1.0 - out)))

        _record(t, bwd)
    return t


def concat_channels(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels: empty part list")
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        pn, _, ph, pw = p.shape
        if (pn, ph, pw) != (n, h, w):
            raise ShapeError(
                f"concat_channels: mismatched N/H/W {p.shape} vs {parts[0].shape}")
    out = np.concatenate([p.data for p in parts], axis=1)

    t = _result(out, *parts)
    if t.requires_grad:
        offs = np.cumsum([0] + [p.shape[1] for p in parts])

        def bwd():
            if t.grad is None:
                return
            for p, a, b in zip(parts, offs[:-1], offs[1:]):
                if p.requires_grad:
                    _acc_copy(p, t.grad[:, a:b])

        _record(t, bwd)
    return t


def center_crop(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Centered spatial window; odd leftovers are dropped from bottom/right."""
    n, c, h, w = x.shape
    if target_h > h or target_w > w:
        raise ShapeError(
            f"center_crop: target {target_h}x{target_w} larger than input {h}x{w}")
    top = (h - target_h) // 2
    left = (w - target_w) // 2
    out = np.ascontiguousarray(x.data[:, :, top:top + target_h, left:left + target_w])

    t = _result(out, x)
    if t.requires_grad:
        def bwd():
            if t.grad is None:
                return
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[:, :, top:top + target_h, left:left + target_w] += t.grad

        _record(t, bwd)
    return t


def scale_combine(a: Tensor, b: Tensor, alpha: float, mode: str) -> Tensor:
    """add: a + alpha*b; gate: a * (1 + alpha*b). alpha is a fixed scalar."""
    if a.shape != b.shape:
        raise ShapeError(f"scale_combine: shape mismatch {a.shape} vs {b.shape}")
    if mode == "add":
        out = a.data + alpha * b.data
    elif mode == "gate":
        out = a.data * (1.0 + alpha * b.data)
    else:
        raise ValueError(f"scale_combine: unknown mode {mode!r}")

    t = _result(out, a, b)
    if t.requires_grad:
        def bwd():
            g = t.grad
            if g is None:
                return
            if mode == "add":
                if a.requires_grad:
                    _acc_copy(a, g)
                if b.requires_grad:
                    _acc(b, alpha * g)
            else:
                if a.requires_grad:
                    _acc(a, g * (1.0 + alpha * b.data))
                if b.requires_grad:
                    _acc(b, g * (a.data * alpha))

        _record(t, bwd)
    return t


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    t = _result(a.data + b.data, a, b)
    if t.requires_grad:
        def bwd():
            if t.grad is None:
                return
            if a.requires_grad:
                _acc_copy(a, t.grad)
            if b.requires_grad:
                _acc_copy(b, t.grad)

        _record(t, bwd)
    return t


def multiply(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"multiply: shape mismatch {a.shape} vs {b.shape}")
    t = _result(a.data * b.data, a, b)
    if t.requires_grad:
        def bwd():
            if t.grad is None:
                return
            if a.requires_grad:
                _acc(a, t.grad * b.data)
            if b.requires_grad:
                _acc(b, t.grad * a.data)

        _record(t, bwd)
    return t


def scale(x: Tensor, s: float) -> Tensor:
    t = _result(x.data * s, x)
    if t.requires_grad:
        def bwd():
            if t.grad is not None:
                _acc(x, s * t.grad)

        _record(t, bwd)
    return t


def reduce_sum(x: Tensor) -> Tensor:
    t = _result(np.full((1, 1, 1, 1), x.data.sum(), dtype=x.data.dtype), x)
    if t.requires_grad:
        def bwd():
            if t.grad is not None:
                _acc(x, np.full(x.shape, t.grad.reshape(()), x.data.dtype))

        _record(t, bwd)
    return t


def reduce_mean(x: Tensor) -> Tensor:
    inv = 1.0 / x.data.size
    t = _result(np.full((1, 1, 1, 1), x.data.mean(), dtype=x.data.dtype), x)
    if t.requires_grad:
        def bwd():
            if t.grad is not None:
                _acc(x, np.full(x.shape, inv * t.grad.reshape(()), x.data.dtype))

        _record(t, bwd)
    return t
