"""Dense float tensors with reverse-mode automatic differentiation.

The graph is built define-by-run: every op records its parent tensors and
a closure mapping the output gradient to parent gradients, and `backward`
walks the recorded nodes in reverse topological order. Only the layer set
needed by the parameter estimator, the warping stage, and a small frozen
classifier is provided; there is no general broadcasting and no GPU path.

Storage is float32. Float64 graphs are supported so test oracles can run
a higher-precision shadow of the same computation, but model parameters
should never be float64.
"""

from __future__ import annotations

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Operand dimensions are inconsistent with the operation."""


class DegenerateBatchError(ValueError):
    """A batch statistic was requested over fewer than two elements."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_float_array(data):
    a = np.asarray(data)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float32)
    return a


class Tensor:
    """N-dimensional float array that can participate in backpropagation.

    A tensor is immutable after creation except for `grad`, which is
    accumulated only inside `backward`, and `data` of leaf parameters,
    which an optimizer may rewrite between steps (the graph is rebuilt
    from scratch every step, so no stale node ever observes the change).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = _as_float_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _make(data, parents, backward_fn):
    """Wrap an op result, recording the graph only when it can matter."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def _accum(t, g):
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True) if g.dtype != t.data.dtype else g.copy()
    else:
        t.grad += g.astype(t.data.dtype, copy=False)


def backward(loss):
    """Populate gradients of every requires_grad tensor reachable from `loss`.

    `loss` must be a scalar (shape ()). Frozen tensors (requires_grad=False)
    never receive a gradient; reachable branches that do not influence the
    loss end up with exact zeros.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")

    # iterative post-order over parents; recursion would overflow on deep nets
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _make(out_data, (a, b), bwd)


def mul(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make(out_data, (a, b), bwd)


def scale(a, c):
    """Multiply by a python float (no gradient for the scalar)."""
    c = float(c)
    out_data = a.data * a.data.dtype.type(c)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * a.data.dtype.type(c))

    return _make(out_data, (a,), bwd)


def tensor_sum(a):
    out_data = a.data.sum()

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(out_data, (a,), bwd)


def relu(a):
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    mask = a.data > 0
    out_data = np.where(mask, a.data, a.data.dtype.type(0))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * mask)

    return _make(out_data, (a,), bwd)


def reshape(a, shape):
    out_data = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), bwd)


def slice1d(a, start, stop):
    """Contiguous slice of a 1-D tensor (or of the last axis of a 2-D one)."""
    if a.data.ndim == 1:
        out_data = a.data[start:stop]
    elif a.data.ndim == 2:
        out_data = a.data[:, start:stop]
    else:
        raise ShapeError(f"slice1d supports 1-D or 2-D tensors, got {a.data.ndim}-D")

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            if a.data.ndim == 1:
                full[start:stop] = g
            else:
                full[:, start:stop] = g
            _accum(a, full)

    return _make(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# padding


def zero_pad2d(a, pad):
    p = int(pad)
    out_data = np.pad(a.data, ((0, 0), (0, 0), (p, p), (p, p)))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g[:, :, p:-p, p:-p] if p else g)

    return _make(out_data, (a,), bwd)


def replicate_pad2d(a, pad):
    """Edge-replication padding; its adjoint folds border sums back inward."""
    p = int(pad)
    out_data = np.pad(a.data, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")

    def bwd(g):
        if a.requires_grad:
            if p == 0:
                _accum(a, g)
                return
            gp = g.copy()
            gp[:, :, p, :] += gp[:, :, :p, :].sum(axis=2)
            gp[:, :, -p - 1, :] += gp[:, :, -p:, :].sum(axis=2)
            gp[:, :, :, p] += gp[:, :, :, :p].sum(axis=3)
            gp[:, :, :, -p - 1] += gp[:, :, :, -p:].sum(axis=3)
            _accum(a, gp[:, :, p:-p, p:-p])

    return _make(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# convolution / pooling


def _im2col(xp, kh, kw, stride):
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _col2im_add(cols_grad, padded_shape, kh, kw, stride, ho, wo):
    n, c, hp, wp = padded_shape
    g = cols_grad.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    out = np.zeros(padded_shape, dtype=cols_grad.dtype)
    for u in range(kh):
        iu = u + stride * (ho - 1) + 1
        for v in range(kw):
            jv = v + stride * (wo - 1) + 1
            out[:, :, u:iu:stride, v:jv:stride] += g[:, :, :, :, u, v]
    return out


def conv2d(x, weight, bias, stride=1, padding="zero"):
    """2-D convolution, NCHW input, OIkk weight, same-size output at stride 1.

    `padding` selects the border mode ("zero" or "replicate"); the amount is
    (k-1)/2 so odd kernels keep the spatial size at stride 1. Gradients are
    produced for x, weight and bias.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got {x.data.ndim}-D")
    o, i, kh, kw = weight.data.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {kh}x{kw}")
    if x.data.shape[1] != i:
        raise ShapeError(
            f"conv2d channel mismatch: input axis 1 is {x.data.shape[1]}, weight axis 1 is {i}"
        )
    if bias.data.shape != (o,):
        raise ShapeError(f"conv2d bias must have shape ({o},), got {bias.data.shape}")
    if padding not in ("zero", "replicate"):
        raise ValueError(f"unknown padding mode {padding!r}")

    p = (kh - 1) // 2
    xp = zero_pad2d(x, p) if padding == "zero" else replicate_pad2d(x, p)

    cols, ho, wo = _im2col(xp.data, kh, kw, stride)
    w2 = weight.data.reshape(o, i * kh * kw)
    out = cols @ w2.T
    n = x.data.shape[0]
    out_data = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]

    padded_shape = xp.data.shape
    # frozen weights (e.g. a frozen classifier) do not need the column matrix
    saved_cols = cols if weight.requires_grad else None

    def bwd(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        if bias.requires_grad:
            _accum(bias, gm.sum(axis=0))
        if weight.requires_grad:
            _accum(weight, (gm.T @ saved_cols).reshape(o, i, kh, kw))
        if xp.requires_grad:
            cols_grad = gm @ w2
            _accum(xp, _col2im_add(cols_grad, padded_shape, kh, kw, stride, ho, wo))

    return _make(out_data, (xp, weight, bias), bwd)


def avg_pool2d(x, kernel, stride, padding=None):
    """Average pooling; border windows average only in-bounds cells.

    Default padding (kernel-1)//2 reproduces the downsampling chain
    224 -> 56 -> 14 -> 4 for kernel 5, stride 4.
    """
    k = int(kernel)
    s = int(stride)
    p = (k - 1) // 2 if padding is None else int(padding)
    n, c, h, w = x.data.shape
    if k > h + 2 * p or k > w + 2 * p:
        raise ShapeError(f"pool kernel {k} exceeds padded input {h + 2 * p}x{w + 2 * p}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    cols, ho, wo = _im2col(xp, k, k, s)  # (n*ho*wo, c*k*k)
    sums = cols.reshape(n * ho * wo, c, k * k).sum(axis=2)

    valid = np.zeros((1, 1, h + 2 * p, w + 2 * p), dtype=x.data.dtype)
    valid[:, :, p : p + h, p : p + w] = 1
    vcols, _, _ = _im2col(valid, k, k, s)
    counts = np.tile(vcols.reshape(ho * wo, k * k).sum(axis=1), n)  # per output row

    out_data = (sums / counts[:, None]).reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
    padded_shape = xp.shape

    def bwd(g):
        if not x.requires_grad:
            return
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, c) / counts[:, None]
        cols_grad = np.repeat(gm[:, :, None], k * k, axis=2).reshape(n * ho * wo, c * k * k)
        gpad = _col2im_add(cols_grad, padded_shape, k, k, s, ho, wo)
        _accum(x, gpad[:, :, p : p + h, p : p + w] if p else gpad)

    return _make(out_data, (x,), bwd)


def global_avg_pool(x):
    """Spatial mean per channel: NCHW -> NC."""
    n, c, h, w = x.data.shape
    out_data = x.data.mean(axis=(2, 3))

    def bwd(g):
        if x.requires_grad:
            _accum(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape))

    return _make(out_data, (x,), bwd)


def linear(x, weight, bias):
    """Affine map on the feature axis: (N,F) x (G,F) + (G,) -> (N,G)."""
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(
            f"linear feature mismatch: input axis 1 is {x.data.shape[1]}, "
            f"weight axis 1 is {weight.data.shape[1]}"
        )
    out_data = x.data @ weight.data.T + bias.data

    def bwd(g):
        if bias.requires_grad:
            _accum(bias, g.sum(axis=0))
        if weight.requires_grad:
            _accum(weight, g.T @ x.data)
        if x.requires_grad:
            _accum(x, g @ weight.data)

    return _make(out_data, (x, weight, bias), bwd)


def batch_norm2d(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization for NCHW tensors.

    Training mode normalizes by batch statistics and updates the running
    buffers in place (they are plain parameter tensors with
    requires_grad=False). Eval mode applies the running statistics as a
    fixed affine map, which keeps the op differentiable with respect to x
    so gradients can flow through a frozen downstream network.
    """
    n, c, h, w = x.data.shape
    dt = x.data.dtype

    if not training:
        inv = 1.0 / np.sqrt(running_var.data + dt.type(eps))
        scale_c = (gamma.data * inv).astype(dt)
        shift_c = (beta.data - running_mean.data * scale_c).astype(dt)
        out_data = x.data * scale_c[None, :, None, None] + shift_c[None, :, None, None]

        def bwd_eval(g):
            if gamma.requires_grad:
                xn = (x.data - running_mean.data[None, :, None, None]) * inv[None, :, None, None]
                _accum(gamma, (g * xn).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                _accum(beta, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                _accum(x, g * scale_c[None, :, None, None])

        return _make(out_data, (x, gamma, beta), bwd_eval)

    m = n * h * w
    if m < 2:
        raise DegenerateBatchError(f"batch statistics need >= 2 elements per channel, got {m}")

    mean = x.data.mean(axis=(0, 2, 3))
    diff = x.data - mean[None, :, None, None]
    var = (diff * diff).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xn = diff * inv[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xn + beta.data[None, :, None, None]

    mom = dt.type(momentum)
    running_mean.data = (1 - mom) * running_mean.data + mom * mean
    running_var.data = (1 - mom) * running_var.data + mom * var * (m / max(m - 1, 1))

    def bwd(g):
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            _accum(gamma, (g * xn).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxn = g * gamma.data[None, :, None, None]
            sum_gxn = gxn.sum(axis=(0, 2, 3))
            sum_gxn_xn = (gxn * xn).sum(axis=(0, 2, 3))
            gx = (
                gxn
                - (sum_gxn[None, :, None, None] + xn * sum_gxn_xn[None, :, None, None]) / m
            ) * inv[None, :, None, None]
            _accum(x, gx)

    return _make(out_data, (x, gamma, beta), bwd)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels.

    Stabilized by max-subtraction; the gradient is (softmax - onehot)/N.
    """
    n, c = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c}): {labels.min()}..{labels.max()}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sum_exp = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(sum_exp)
    out_data = np.asarray(-log_probs[np.arange(n), labels].mean(), dtype=logits.data.dtype)

    def bwd(g):
        if logits.requires_grad:
            grad = exp / sum_exp
            grad[np.arange(n), labels] -= 1
            _accum(logits, grad * (g / n))

    return _make(out_data, (logits,), bwd)


# ---------------------------------------------------------------------------
# warping-stage ops (per-sample filter kernel and color transform)


def depthwise_conv2d_valid(xp, kernels):
    """Valid correlation of every channel with one kernel per sample.

    xp:      (N, C, Hp, Wp), padded by the caller
    kernels: Tensor of shape (kh, kw) shared across the batch, or (N, kh, kw)
    """
    kd = kernels.data
    shared = kd.ndim == 2
    n = xp.data.shape[0]
    kb = np.broadcast_to(kd, (n,) + kd.shape) if shared else kd
    kh, kw = kb.shape[1], kb.shape[2]
    out_data = _kernels.depthwise_corr(xp.data, kb)

    def bwd(g):
        if kernels.requires_grad:
            win = np.lib.stride_tricks.sliding_window_view(xp.data, (kh, kw), axis=(2, 3))
            if shared:
                gk = np.einsum("nchwuv,nchw->uv", win, g)
            else:
                gk = np.einsum("nchwuv,nchw->nuv", win, g)
            _accum(kernels, gk)
        if xp.requires_grad:
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            flipped = np.ascontiguousarray(kb[:, ::-1, ::-1])
            _accum(xp, _kernels.depthwise_corr(gp, flipped))

    return _make(out_data, (xp, kernels), bwd)


def color_affine(x, matrix, shift):
    """Per-pixel channel mix: out[n,i] = sum_j M[i,j] x[n,j] + s[i].

    `matrix` is (d, d) or (N, d, d); `shift` is (d,) or (N, d). The batched
    forms apply one transform per sample.
    """
    md = matrix.data
    sd = shift.data
    shared_m = md.ndim == 2
    shared_s = sd.ndim == 1
    if shared_m:
        mixed = np.einsum("ij,njhw->nihw", md, x.data)
    else:
        mixed = np.einsum("nij,njhw->nihw", md, x.data)
    out_data = mixed + (sd[None, :, None, None] if shared_s else sd[:, :, None, None])

    def bwd(g):
        if shift.requires_grad:
            _accum(shift, g.sum(axis=(0, 2, 3)) if shared_s else g.sum(axis=(2, 3)))
        if matrix.requires_grad:
            if shared_m:
                _accum(matrix, np.einsum("nihw,njhw->ij", g, x.data))
            else:
                _accum(matrix, np.einsum("nihw,njhw->nij", g, x.data))
        if x.requires_grad:
            if shared_m:
                _accum(x, np.einsum("ij,nihw->njhw", md, g))
            else:
                _accum(x, np.einsum("nij,nihw->njhw", md, g))

    return _make(out_data, (x, matrix, shift), bwd)
