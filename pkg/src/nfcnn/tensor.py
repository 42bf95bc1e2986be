"""Dense NCHW tensors with reverse-mode automatic differentiation.

The gradient tape is distributed over op outputs: every differentiable op
stores its input tensors and a closure mapping the upstream gradient to
per-input gradients. ``backward`` replays that record in reverse
topological order, accumulating additively where a tensor feeds several
consumers. Repeated ``backward`` calls without ``zero_grad`` keep
accumulating into ``.grad``.

Only the operations the denoiser needs are implemented; there is no
general broadcasting, striding, or dilation. Arithmetic runs in float32
by default; build tensors with ``dtype=np.float64`` for finite-difference
verification.
"""

from __future__ import annotations

import numpy as np

from . import backend

_FLOAT_DTYPES = (np.float32, np.float64)
_default_dtype = np.float32


def set_default_dtype(dtype):
    """Set the dtype used when tensors are built from non-float data."""
    global _default_dtype
    dt = np.dtype(dtype).type
    if dt not in _FLOAT_DTYPES:
        raise ValueError("default dtype must be float32 or float64")
    _default_dtype = dt


def get_default_dtype():
    return _default_dtype


class Tensor:
    """A dense real array, optionally participating in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.item())

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __repr__(self):
        return (
            f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, "
            f"requires_grad={self.requires_grad})"
        )


def _node(data, parents, grad_fn):
    # grad_fn(upstream) -> tuple of gradients aligned with parents;
    # entries for parents with requires_grad=False may be None.
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def backward(loss):
    """Populate ``.grad`` on every tensor the scalar ``loss`` depends on."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is detached from the gradient tape")

    # Iterative DFS postorder; in a DAG this yields a valid topological
    # order with inputs appearing before their consumers.
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    pending = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for t in reversed(topo):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        if t._grad_fn is None:
            continue
        for p, pg in zip(t._parents, t._grad_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in pending:
                pending[id(p)] = pending[id(p)] + pg
            else:
                pending[id(p)] = pg


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    """Elementwise sum of two same-shape tensors."""
    _check_same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda up: (up, up))


def sub(a, b):
    """Elementwise difference of two same-shape tensors."""
    _check_same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda up: (up, -up))


def scale(a, factor):
    """Multiply by a python scalar (loss weighting)."""
    factor = float(factor)
    return _node(a.data * np.asarray(factor, dtype=a.dtype), (a,),
                 lambda up: (up * factor,))


def mean_of_squares(t):
    """Mean over all entries of x^2, as a 0-d tensor."""
    if t.size == 0:
        raise ValueError("reduce of empty tensor")
    n = t.size
    out = np.asarray(np.mean(np.square(t.data)))

    def grad_fn(up):
        return (t.data * (2.0 / n) * up,)

    return _node(out, (t,), grad_fn)


def mean_of_abs(t):
    """Mean over all entries of |x|, as a 0-d tensor; subgradient 0 at 0."""
    if t.size == 0:
        raise ValueError("reduce of empty tensor")
    n = t.size
    out = np.asarray(np.mean(np.abs(t.data)))

    def grad_fn(up):
        return (np.sign(t.data) * (1.0 / n) * up,)

    return _node(out, (t,), grad_fn)


def leaky_relu(t, slope):
    """x for x >= 0, slope*x otherwise; the gradient at exactly 0 is 1."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must be in [0, 1), got {slope}")
    factor = np.ones_like(t.data)
    factor[t.data < 0] = slope
    return _node(t.data * factor, (t,), lambda up: (up * factor,))


def concat_channels(tensors):
    """Concatenate NCHW tensors along the channel axis, argument order."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat_channels of empty list")
    first = tensors[0]
    for t in tensors[1:]:
        if t.ndim != 4 or first.ndim != 4:
            raise ValueError("concat_channels expects 4-d NCHW tensors")
        if (t.shape[0], t.shape[2], t.shape[3]) != (
            first.shape[0], first.shape[2], first.shape[3]
        ):
            raise ValueError(
                f"concat_channels: N/H/W mismatch {first.shape} vs {t.shape}"
            )
    if len(tensors) == 1:
        return tensors[0]
    widths = [t.shape[1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)

    def grad_fn(up):
        grads = []
        offset = 0
        for c in widths:
            grads.append(up[:, offset:offset + c])
            offset += c
        return tuple(grads)

    return _node(out, tuple(tensors), grad_fn)


def replication_pad2d(t, pad):
    """Pad H and W by ``pad`` on each side, replicating border values."""
    if t.ndim != 4:
        raise ValueError("replication_pad2d expects a 4-d NCHW tensor")
    pad = int(pad)
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    if pad == 0:
        return t
    out = np.pad(t.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")

    def grad_fn(up):
        # Fold the replicated border back onto its source cells: rows
        # first (corners land on the edge columns), then columns.
        rows = up[:, :, pad:up.shape[2] - pad, :].copy()
        rows[:, :, 0, :] += up[:, :, :pad, :].sum(axis=2)
        rows[:, :, -1, :] += up[:, :, up.shape[2] - pad:, :].sum(axis=2)
        g = rows[:, :, :, pad:rows.shape[3] - pad].copy()
        g[:, :, :, 0] += rows[:, :, :, :pad].sum(axis=3)
        g[:, :, :, -1] += rows[:, :, :, rows.shape[3] - pad:].sum(axis=3)
        return (g,)

    return _node(out, (t,), grad_fn)


def conv2d(x, weight, bias=None, pad=None):
    """Size-preserving 2-d cross-correlation with replicated borders.

    ``x`` is (N, Cin, H, W), ``weight`` (Cout, Cin, k, k) with odd k, and
    ``pad`` must equal (k-1)//2 (the size-preserving width); it defaults
    to that value. The kernel is not flipped. Differentiable with respect
    to input, weight, and bias.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be 4-d NCHW, got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d weight must be (F, C, k, k), got {weight.shape}")
    k = weight.shape[2]
    if k % 2 != 1:
        raise ValueError(f"conv2d kernel size must be odd, got {k}")
    if weight.shape[1] != x.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.shape[1]}, "
            f"weight expects {weight.shape[1]}"
        )
    same_pad = (k - 1) // 2
    if pad is None:
        pad = same_pad
    elif pad != same_pad:
        raise ValueError(f"pad must be (k-1)//2 = {same_pad}, got {pad}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
    if weight.dtype != x.dtype or (bias is not None and bias.dtype != x.dtype):
        raise ValueError("conv2d operands must share one dtype")

    xp = replication_pad2d(x, pad) if pad > 0 else x
    bias_arr = bias.data if bias is not None else np.zeros(weight.shape[0], x.dtype)
    out = backend.conv2d_forward(np.ascontiguousarray(xp.data),
                                 np.ascontiguousarray(weight.data), bias_arr)
    parents = (xp, weight) if bias is None else (xp, weight, bias)

    def grad_fn(up):
        gx, gw, gb = backend.conv2d_backward(
            np.ascontiguousarray(up),
            np.ascontiguousarray(xp.data),
            np.ascontiguousarray(weight.data),
        )
        if bias is None:
            return gx, gw
        return gx, gw, gb

    return _node(out, parents, grad_fn)


def batch_norm2d(x, gamma, beta, run_mean=None, run_var=None, training=True,
                 eps=1e-5, momentum=0.1):
    """Per-channel batch normalization over the (N, H, W) axes.

    Training mode normalizes by batch statistics and, when running-state
    arrays are supplied, updates them in place by exponential moving
    average (population variance). Eval mode normalizes by the stored
    state only and requires it to be initialized.
    """
    if x.ndim != 4:
        raise ValueError("batch_norm2d expects a 4-d NCHW tensor")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    axes = (0, 2, 3)
    shape = (1, c, 1, 1)

    if training:
        cnt = x.shape[0] * x.shape[2] * x.shape[3]
        if cnt < 2:
            raise ValueError(
                f"batch_norm2d training needs N*H*W >= 2 per channel, got {cnt}"
            )
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if run_mean is not None:
            run_mean *= 1.0 - momentum
            run_mean += momentum * mean
            run_var *= 1.0 - momentum
            run_var += momentum * var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(shape)) * inv.reshape(shape)
        out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

        def grad_fn(up):
            dxhat = up * gamma.data.reshape(shape)
            m1 = dxhat.mean(axis=axes, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
            gx = inv.reshape(shape) * (dxhat - m1 - xhat * m2)
            return gx, (up * xhat).sum(axis=axes), up.sum(axis=axes)

        return _node(out, (x, gamma, beta), grad_fn)

    if run_mean is None or run_var is None:
        raise RuntimeError(
            "batch_norm2d eval mode before running statistics are initialized"
        )
    inv = 1.0 / np.sqrt(run_var + eps)
    xhat = (x.data - run_mean.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def grad_fn(up):
        gx = up * (gamma.data * inv).reshape(shape)
        return gx, (up * xhat).sum(axis=axes), up.sum(axis=axes)

    return _node(out, (x, gamma, beta), grad_fn)


def dropout(t, p, mode="elementwise", training=True, rng=None):
    """Inverted dropout; identity at eval time or p = 0.

    ``elementwise`` zeroes single entries, ``channelwise`` zeroes whole
    (n, c) feature maps. Survivors are scaled by 1/(1-p) so eval needs no
    rescaling. The mask comes from the supplied generator.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("elementwise", "channelwise"):
        raise ValueError(f"unknown dropout mode {mode!r}")
    if not training or p == 0.0:
        return t
    if rng is None:
        raise ValueError("dropout in training phase needs an rng")
    if mode == "channelwise":
        if t.ndim != 4:
            raise ValueError("channelwise dropout expects a 4-d NCHW tensor")
        keep = rng.random((t.shape[0], t.shape[1], 1, 1)) >= p
    else:
        keep = rng.random(t.shape) >= p
    factor = keep.astype(t.dtype) * t.dtype.type(1.0 / (1.0 - p))
    return _node(t.data * factor, (t,), lambda up: (up * factor,))
