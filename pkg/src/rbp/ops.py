"""Neural-network kernels with exact reverse-mode gradients.

Convolution uses explicit patch expansion (im2col) so the heavy lifting is
a single matmul; ``naive_conv2d`` is the deliberately slow nested-loop
reference kept for oracle tests and must never be folded into the fast
path.  Pooling kernels require stride == window and evenly divisible
spatial dims, which covers every architecture in this project.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor, make_node


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def conv2d(x: Tensor, weight: Tensor, stride=1, padding=0, bias: Tensor | None = None) -> Tensor:
    """2-d cross-correlation of NCHW input with OIHW filters."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: expected NCHW input and OIHW weight, got "
                         f"{x.data.shape} and {weight.data.shape}")
    n, c, h, w = x.data.shape
    out_c, in_c, kh, kw = weight.data.shape
    if c != in_c:
        raise ShapeError(f"conv2d: input has {c} channels but weight {weight.data.shape} "
                         f"expects {in_c}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} with padding {(ph, pw)} does not fit "
                         f"input {(h, w)}")

    padded = x.data
    if ph or pw:
        padded = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    bs, cs, hs, ws = padded.strides
    windows = np.lib.stride_tricks.as_strided(
        padded, (n, c, oh, ow, kh, kw), (bs, cs, sh * hs, sw * ws, hs, ws))
    # (N*OH*OW, C*KH*KW) patch matrix; contiguous copy feeds one matmul
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * oh * ow, c * kh * kw)
    w_mat = weight.data.reshape(out_c, -1)
    out = (cols @ w_mat.T).reshape(n, oh, ow, out_c).transpose(0, 3, 1, 2)
    if bias is not None:
        if bias.data.shape != (out_c,):
            raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({out_c},)")
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    need_dx = x.requires_grad
    need_dw = weight.requires_grad

    def backward(g):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, out_c)
        dw = (g_mat.T @ cols).reshape(weight.data.shape) if need_dw else None
        dx = None
        if need_dx:
            dcols = g_mat @ w_mat
            # one contiguous transpose, then kh*kw slab adds into the padding
            dwin = np.ascontiguousarray(
                dcols.reshape(n, oh, ow, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
            dpad = np.zeros_like(padded)
            for a in range(kh):
                for b in range(kw):
                    dpad[:, :, a:a + sh * oh:sh, b:b + sw * ow:sw] += dwin[a, b]
            dx = dpad[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else dpad
        if bias is not None:
            return dx, dw, g.sum(axis=(0, 2, 3))
        return dx, dw

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "conv2d")


def naive_conv2d(x: np.ndarray, weight: np.ndarray, stride=1, padding=0) -> np.ndarray:
    """Six-nested-loop reference convolution (oracle; forward only)."""
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = weight.shape
    assert c == in_c
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    padded = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((n, out_c, oh, ow), dtype=x.dtype)
    for b in range(n):
        for o in range(out_c):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += padded[b, ci, i * sh + a, j * sw + bb] * \
                                    weight[o, ci, a, bb]
                    out[b, o, i, j] = acc
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully-connected layer: (N, F) x (O, F) -> (N, O)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear: expected 2-d input and weight, got "
                         f"{x.data.shape} and {weight.data.shape}")
    n, f = x.data.shape
    o, f_w = weight.data.shape
    if f != f_w:
        raise ShapeError(f"linear: input features {x.data.shape} do not match weight "
                         f"{weight.data.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.data.shape != (o,):
            raise ShapeError(f"linear: bias shape {bias.data.shape} != ({o},)")
        out = out + bias.data[None, :]

    need_dx = x.requires_grad

    def backward(g):
        dx = g @ weight.data if need_dx else None
        dw = g.T @ x.data
        if bias is not None:
            return dx, dw, g.sum(axis=0)
        return dx, dw

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(np.ascontiguousarray(out), parents, backward, "linear")


def relu(x: Tensor) -> Tensor:
    x_data = x.data

    def backward(g):
        return (g * (x_data > 0),)

    return make_node(np.maximum(x_data, 0), (x,), backward, "relu")


def channel_scale(x: Tensor, scale: Tensor) -> Tensor:
    """Multiply each channel by a per-channel factor.

    For NCHW input the scale has one entry per channel.  For 2-d (N, F)
    input, F must be a multiple of len(scale) and each entry scales one
    contiguous block of F/len(scale) features (the flattened footprint of
    one channel).  Differentiable in both the input and the scale.
    """
    if scale.data.ndim != 1:
        raise ShapeError(f"channel_scale: scale must be 1-d, got {scale.data.shape}")
    c = scale.data.shape[0]
    need_dx, need_dscale = x.requires_grad, scale.requires_grad
    if x.data.ndim == 4:
        if x.data.shape[1] != c:
            raise ShapeError(f"channel_scale: input {x.data.shape} has {x.data.shape[1]} "
                             f"channels, scale has {c}")
        out = x.data * scale.data[None, :, None, None]

        def backward(g):
            dx = g * scale.data[None, :, None, None] if need_dx else None
            dscale = np.einsum("nchw,nchw->c", g, x.data) if need_dscale else None
            return dx, dscale

        return make_node(out, (x, scale), backward, "channel_scale")
    if x.data.ndim == 2:
        n, f = x.data.shape
        if f % c != 0:
            raise ShapeError(f"channel_scale: {f} features not divisible into {c} channels")
        block = f // c
        x3 = x.data.reshape(n, c, block)
        out = (x3 * scale.data[None, :, None]).reshape(n, f)

        def backward(g):
            g3 = g.reshape(n, c, block)
            dx = (g3 * scale.data[None, :, None]).reshape(n, f) if need_dx else None
            dscale = np.einsum("ncb,ncb->c", g3, x3) if need_dscale else None
            return dx, dscale

        return make_node(out, (x, scale), backward, "channel_scale")
    raise ShapeError(f"channel_scale: expected 2-d or 4-d input, got {x.data.shape}")


def _pool_geometry(x: Tensor, kernel, stride, op: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected NCHW input, got {x.data.shape}")
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride) if stride is not None else (kh, kw)
    if (sh, sw) != (kh, kw):
        raise NotImplementedError(f"{op}: only stride == window is supported")
    n, c, h, w = x.data.shape
    if h % kh or w % kw:
        raise ShapeError(f"{op}: input {(h, w)} not divisible by window {(kh, kw)}")
    return n, c, h // kh, kh, w // kw, kw


def maxpool2d(x: Tensor, kernel=2, stride=None) -> Tensor:
    n, c, oh, kh, ow, kw = _pool_geometry(x, kernel, stride, "maxpool2d")
    tiles = x.data.reshape(n, c, oh, kh, ow, kw)
    out = tiles.max(axis=(3, 5))

    def backward(g):
        # gradient goes to the first maximum of each window (deterministic
        # on ties); the argmax is deferred here so eval passes skip it
        flat = np.ascontiguousarray(tiles.transpose(0, 1, 2, 4, 3, 5)) \
            .reshape(n, c, oh, ow, kh * kw)
        idx = flat.argmax(axis=-1)
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        dx = dflat.reshape(n, c, oh, ow, kh, kw).transpose(0, 1, 2, 4, 3, 5) \
            .reshape(x.data.shape)
        return (np.ascontiguousarray(dx),)

    return make_node(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def avgpool2d(x: Tensor, kernel=2, stride=None) -> Tensor:
    n, c, oh, kh, ow, kw = _pool_geometry(x, kernel, stride, "avgpool2d")
    tiles = x.data.reshape(n, c, oh, kh, ow, kw)
    out = tiles.mean(axis=(3, 5))
    inv = 1.0 / (kh * kw)

    def backward(g):
        dx = np.broadcast_to((g * inv)[:, :, :, None, :, None],
                             (n, c, oh, kh, ow, kw)).reshape(x.data.shape)
        return (np.ascontiguousarray(dx),)

    return make_node(np.ascontiguousarray(out), (x,), backward, "avgpool2d")


def flatten(x: Tensor) -> Tensor:
    """Collapse NCHW to (N, C*H*W), keeping each channel's block contiguous."""
    if x.data.ndim != 4:
        raise ShapeError(f"flatten: expected NCHW input, got {x.data.shape}")
    shape = x.data.shape
    out = x.data.reshape(shape[0], -1)

    def backward(g):
        return (g.reshape(shape),)

    return make_node(out, (x,), backward, "flatten")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected (N, K) logits, got "
                         f"{logits.data.shape}")
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {k}): "
                         f"min={labels.min()}, max={labels.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    log_probs = z - np.log(sez)
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()

    def backward(g):
        d = ez / sez
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return make_node(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward,
                     "softmax_cross_entropy")
