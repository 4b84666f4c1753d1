"""Differentiable tensor ops: convolution, batch normalization, pooling,
invertible space-to-depth, linear maps and losses.

All kernels are plain numpy in NCHW layout. Convolution uses cross-
correlation semantics (no kernel flip), zero padding, and an im2col
buffer backed by BLAS matmul; output extents must divide exactly.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter, Tensor, record, recording


def _needs(*tensors) -> bool:
    return recording() and any(t.requires_grad for t in tensors if t is not None)


def _out(data, *inputs) -> Tensor:
    y = Tensor(data)
    y.requires_grad = recording() and any(
        t.requires_grad for t in inputs if t is not None)
    return y


def _check_same_dtype(op: str, *tensors) -> None:
    dtypes = {t.dtype for t in tensors if t is not None}
    if len(dtypes) > 1:
        raise ValueError(f"{op}: mixed dtypes {sorted(map(str, dtypes))}")


# ---------------------------------------------------------------------------
# convolution

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride,
                                  j:j + stride * wo:stride]
    return cols


def _col2im(cols: np.ndarray, padded_shape, stride: int) -> np.ndarray:
    n, c, kh, kw, ho, wo = cols.shape
    dxp = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride,
                j:j + stride * wo:stride] += cols[:, :, i, j]
    return dxp


def conv2d(x: Tensor, weight: Parameter, bias: Parameter | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` [N,C,H,W] with ``weight`` [O,C,kH,kW].

    Requires odd kernel extents and exact output division:
    H' = (H + 2*padding - kH) / stride + 1.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(
            f"conv2d expects 4-d input/weight, got {x.shape} and {weight.shape}")
    _check_same_dtype("conv2d", x, weight, bias)
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if cw != c:
        raise ValueError(
            f"conv2d channel mismatch: input {tuple(x.shape)} vs weight "
            f"{tuple(weight.shape)}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride={stride} or padding={padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(
            f"conv2d: padded input {h + 2 * padding}x{w + 2 * padding} smaller "
            f"than kernel {kh}x{kw}")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ValueError(
            f"conv2d: output extent not exact for input {h}x{w}, kernel "
            f"{kh}x{kw}, stride {stride}, padding {padding}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(
            f"conv2d bias shape {tuple(bias.shape)} != ({o},)")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    xp = (np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
          if padding else x.data)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    cols2 = cols.reshape(n, c * kh * kw, ho * wo)
    wmat = weight.data.reshape(o, c * kh * kw)
    out = np.matmul(wmat, cols2).reshape(n, o, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)
    y = _out(out, x, weight, bias)

    if _needs(x, weight, bias):
        need_x, need_w = x.requires_grad, weight.requires_grad
        need_b = bias is not None and bias.requires_grad
        wshape, xshape = weight.shape, (n, c, h, w)

        def bwd(g):
            gm = g.reshape(n, o, ho * wo)
            gw = gb = gx = None
            if need_w:
                gw = np.tensordot(gm, cols2, axes=([0, 2], [0, 2])).reshape(wshape)
            if need_b:
                gb = g.sum(axis=(0, 2, 3))
            if need_x:
                dcols = np.matmul(wmat.T, gm).reshape(n, c, kh, kw, ho, wo)
                gxp = _col2im(dcols, xp.shape, stride)
                gx = gxp[:, :, padding:padding + h, padding:padding + w]
                if padding:
                    gx = np.ascontiguousarray(gx)
            return (gx, gw, gb) if bias is not None else (gx, gw)

        inputs = (x, weight, bias) if bias is not None else (x, weight)
        record(y, inputs, bwd)
    return y


# ---------------------------------------------------------------------------
# batch normalization

def batchnorm2d(x: Tensor, group, training: bool,
                update_stats: bool = True) -> Tensor:
    """Per-channel batch normalization with the group's scale/shift.

    Train mode normalizes by the batch mean and biased variance and, when
    ``update_stats``, folds them into the running statistics with the
    group's momentum. Eval mode normalizes by the stored running stats.
    """
    if x.data.ndim != 4:
        raise ValueError(f"batchnorm2d expects [N,C,H,W], got {tuple(x.shape)}")
    n, c, h, w = x.shape
    if group.channels != c:
        raise ValueError(
            f"batchnorm2d channel mismatch: input has {c} channels, "
            f"group has {group.channels}")
    gamma, beta = group.gamma, group.beta
    _check_same_dtype("batchnorm2d", x, gamma, beta)
    group.use_count += 1

    if training:
        m = n * h * w
        if m < 2:
            raise ValueError(
                "batchnorm2d: train mode needs at least 2 values per channel "
                f"(got N*H*W = {m})")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_stats:
            mom = group.momentum
            group.running_mean *= 1.0 - mom
            group.running_mean += mom * mu
            group.running_var *= 1.0 - mom
            group.running_var += mom * var
        invstd = 1.0 / np.sqrt(var + x.dtype.type(group.eps))
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)
    else:
        invstd = 1.0 / np.sqrt(group.running_var + x.dtype.type(group.eps))
        xhat = (x.data - group.running_mean.reshape(1, c, 1, 1)) \
            * invstd.reshape(1, c, 1, 1)

    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    y = _out(out, x, gamma, beta)

    if _needs(x, gamma, beta):
        need_x = x.requires_grad

        if training:
            m = n * h * w

            def bwd(g):
                dgamma = (g * xhat).sum(axis=(0, 2, 3))
                dbeta = g.sum(axis=(0, 2, 3))
                dx = None
                if need_x:
                    dxhat = g * gamma.data.reshape(1, c, 1, 1)
                    s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                    s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                    dx = (dxhat - s1 / m - xhat * (s2 / m)) \
                        * invstd.reshape(1, c, 1, 1)
                return dx, dgamma, dbeta
        else:
            def bwd(g):
                dgamma = (g * xhat).sum(axis=(0, 2, 3))
                dbeta = g.sum(axis=(0, 2, 3))
                dx = None
                if need_x:
                    dx = g * (gamma.data * invstd).reshape(1, c, 1, 1)
                return dx, dgamma, dbeta

        record(y, (x, gamma, beta), bwd)
    return y


# ---------------------------------------------------------------------------
# elementwise / pooling / reshaping

def relu(x: Tensor) -> Tensor:
    y = _out(np.maximum(x.data, 0), x)
    if _needs(x):
        mask = x.data > 0

        def bwd(g):
            return (g * mask,)

        record(y, (x,), bwd)
    return y


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly (no broadcasting)."""
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    _check_same_dtype("add", a, b)
    y = _out(a.data + b.data, a, b)
    if _needs(a, b):
        na, nb = a.requires_grad, b.requires_grad

        def bwd(g):
            return (g if na else None, g if nb else None)

        record(y, (a, b), bwd)
    return y


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    c = x.dtype.type(c)
    y = _out(x.data * c, x)
    if _needs(x):
        def bwd(g):
            return (g * c,)

        record(y, (x,), bwd)
    return y


def avgpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """2x2 stride-2 average pooling; spatial extents must be even."""
    if window != 2 or stride != 2:
        raise ValueError("avgpool2d supports window=2, stride=2 only")
    if x.data.ndim != 4:
        raise ValueError(f"avgpool2d expects [N,C,H,W], got {tuple(x.shape)}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2d: odd spatial extents {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    y = _out(out, x)
    if _needs(x):
        def bwd(g):
            gq = g * x.dtype.type(0.25)
            dx = np.empty((n, c, h, w), dtype=g.dtype)
            dx.reshape(n, c, h // 2, 2, w // 2, 2)[...] = \
                gq[:, :, :, None, :, None]
            return (dx,)

        record(y, (x,), bwd)
    return y


def global_avgpool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial mean."""
    if x.data.ndim != 4:
        raise ValueError(f"global_avgpool expects [N,C,H,W], got {tuple(x.shape)}")
    n, c, h, w = x.shape
    y = _out(x.data.mean(axis=(2, 3)), x)
    if _needs(x):
        inv = x.dtype.type(1.0 / (h * w))

        def bwd(g):
            return (np.broadcast_to((g * inv)[:, :, None, None],
                                    (n, c, h, w)).copy(),)

        record(y, (x,), bwd)
    return y


def linear(x: Tensor, weight: Parameter, bias: Parameter) -> Tensor:
    """[N,D] x [K,D]^T + [K] -> [N,K]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ValueError(
            f"linear expects 2-d input/weight, got {x.shape} and {weight.shape}")
    _check_same_dtype("linear", x, weight, bias)
    n, d = x.shape
    k, dw = weight.shape
    if dw != d or bias.shape != (k,):
        raise ValueError(
            f"linear shape mismatch: input {tuple(x.shape)}, weight "
            f"{tuple(weight.shape)}, bias {tuple(bias.shape)}")
    y = _out(x.data @ weight.data.T + bias.data, x, weight, bias)
    if _needs(x, weight, bias):
        need_x = x.requires_grad

        def bwd(g):
            dx = g @ weight.data if need_x else None
            return dx, g.T @ x.data, g.sum(axis=0)

        record(y, (x, weight, bias), bwd)
    return y


def _space_to_depth(a: np.ndarray) -> np.ndarray:
    n, c, h, w = a.shape
    return a.reshape(n, c, h // 2, 2, w // 2, 2) \
            .transpose(0, 1, 3, 5, 2, 4).reshape(n, 4 * c, h // 2, w // 2)


def _depth_to_space(a: np.ndarray) -> np.ndarray:
    n, c4, ho, wo = a.shape
    c = c4 // 4
    return a.reshape(n, c, 2, 2, ho, wo) \
            .transpose(0, 1, 4, 2, 5, 3).reshape(n, c, 2 * ho, 2 * wo)


def invpool(x: Tensor) -> Tensor:
    """Invertible 2x2 space-to-depth: [N,C,H,W] -> [N,4C,H/2,W/2].

    Output channel 4c+k holds the k-th 2x2-decimated copy of input
    channel c, phases in row-major order. Parameter-free and exactly
    inverted by :func:`invpool_inverse`.
    """
    if x.data.ndim != 4:
        raise ValueError(f"invpool expects [N,C,H,W], got {tuple(x.shape)}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"invpool: odd spatial extents {h}x{w}")
    y = _out(_space_to_depth(x.data), x)
    if _needs(x):
        def bwd(g):
            return (_depth_to_space(g),)

        record(y, (x,), bwd)
    return y


def invpool_inverse(x: Tensor) -> Tensor:
    """Exact inverse of :func:`invpool`: [N,4C,H,W] -> [N,C,2H,2W]."""
    if x.data.ndim != 4:
        raise ValueError(f"invpool_inverse expects [N,C,H,W], got {tuple(x.shape)}")
    if x.shape[1] % 4:
        raise ValueError(
            f"invpool_inverse: channel count {x.shape[1]} not divisible by 4")
    y = _out(_depth_to_space(x.data), x)
    if _needs(x):
        def bwd(g):
            return (_space_to_depth(g),)

        record(y, (x,), bwd)
    return y


# ---------------------------------------------------------------------------
# losses

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of softmax(logits) [N,K] against int labels [N].

    Softmax is computed with max subtraction for stability.
    """
    if logits.data.ndim != 2:
        raise ValueError(f"logits must be [N,K], got {tuple(logits.shape)}")
    lab = np.asarray(labels)
    n, k = logits.shape
    if lab.shape != (n,) or not np.issubdtype(lab.dtype, np.integer):
        raise ValueError(f"labels must be {n} integers, got shape {lab.shape} "
                         f"dtype {lab.dtype}")
    if lab.min() < 0 or lab.max() >= k:
        raise ValueError(
            f"label out of range [0, {k}): min={lab.min()}, max={lab.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    se = ez.sum(axis=1, keepdims=True)
    nll = np.log(se[:, 0]) - z[np.arange(n), lab]
    y = _out(np.asarray(nll.mean(), dtype=logits.dtype), logits)
    if _needs(logits):
        def bwd(g):
            p = ez / se
            p[np.arange(n), lab] -= 1.0
            p *= logits.dtype.type(float(g) / n)
            return (p,)

        record(y, (logits,), bwd)
    return y


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if pred.shape != target.shape:
        raise ValueError(
            f"mse_loss shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    _check_same_dtype("mse_loss", pred, target)
    diff = pred.data - target.data
    y = _out(np.asarray((diff * diff).mean(), dtype=pred.dtype), pred, target)
    if _needs(pred, target):
        np_, nt = pred.requires_grad, target.requires_grad

        def bwd(g):
            d = diff * pred.dtype.type(2.0 * float(g) / diff.size)
            return (d if np_ else None, -d if nt else None)

        record(y, (pred, target), bwd)
    return y
