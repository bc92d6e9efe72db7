"""Minimal dense-tensor core: the handful of ops the network needs, with reverse-mode gradients.

Tensors are numpy arrays wrapped in a tape node. Every op records its parents and a
backward closure; backward() walks the tape in reverse topological order and accumulates
gradients into every node that requires them.

Convolution-facing ops exist in two layouts. The public conv2d_same / batch_norm take
activations as (channels, time, pitch) with an optional leading batch axis. Internally
the heavy lifting happens channels-last, (batch, time, pitch, channels), where the
im2col gather degenerates into nine nearly-contiguous block copies followed by one
GEMM; the network drives the channels-last ops directly and converts layout once at
each end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GradientError(ArithmeticError):
    """A non-finite gradient was produced; carries the name of the offending op."""


class Tensor:
    """Array node in a backward-traceable computation."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, data, parents=(), backward_fn=None, op="leaf", requires_grad=False,
                 dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, dtype={self.data.dtype})"


def parameter(data, dtype=None):
    """Leaf tensor that accumulates gradients."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def constant(data, dtype=None):
    """Leaf tensor excluded from gradient computation."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=False)


@dataclass
class BatchNormState:
    """Per-channel scale/shift plus running statistics for inference-mode normalization."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.99

    def __post_init__(self):
        c = self.gamma.data.shape[0]
        if not (self.beta.data.shape[0] == self.running_mean.shape[0]
                == self.running_var.shape[0] == c):
            raise ValueError("batch-norm per-channel vectors differ in length")
        if np.any(self.running_var < 0):
            raise ValueError("running variance must be nonnegative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @property
    def channels(self):
        return self.gamma.data.shape[0]


def batch_norm_state(channels, dtype=np.float64, epsilon=1e-5, momentum=0.99):
    return BatchNormState(
        gamma=parameter(np.ones(channels, dtype=dtype)),
        beta=parameter(np.zeros(channels, dtype=dtype)),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
        epsilon=epsilon,
        momentum=momentum,
    )


def _as_tensor(x):
    return x if isinstance(x, Tensor) else constant(x)


# ---------------------------------------------------------------------------
# Channels-last primitives (batch, time, pitch, channels)
# ---------------------------------------------------------------------------

def im2col(x, kt, kp):
    """Patch matrix for channels-last input: (B, T, P, C) -> (B*T*P, kt*kp*C).

    Row (b, t, p) lists the zero-padded neighborhood in (dt, dp, c) order. The
    channels-last window view makes this one nearly-sequential copy.
    """
    b, t, p, c = x.shape
    pt, pp = kt // 2, kp // 2
    xp = np.zeros((b, t + kt - 1, p + kp - 1, c), dtype=x.dtype)
    xp[:, pt:pt + t, pp:pp + p, :] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kt, kp), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(b * t * p, kt * kp * c)


def kernel_matrix(w):
    """(O, C, kt, kp) kernels to the (kt*kp*C, O) GEMM operand im2col expects."""
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0]))


def _correlate_cl(x, w):
    """Raw same-padding cross-correlation, channels-last in and out."""
    b, t, p, _ = x.shape
    kt, kp = w.shape[2], w.shape[3]
    out = im2col(x, kt, kp) @ kernel_matrix(w)
    return out.reshape(b, t, p, w.shape[0])


def conv2d_cl(x, kernels):
    """Tape op: channels-last same-padding convolution.

    x: (B, T, P, C_in) tensor; kernels: (C_out, C_in, kt, kp) tensor.
    """
    x = _as_tensor(x)
    w = _as_tensor(kernels)
    wd = w.data
    if wd.ndim != 4:
        raise ValueError(f"kernels must have 4 axes, got shape {wd.shape}")
    cout, cin, kt, kp = wd.shape
    if kt % 2 == 0 or kp % 2 == 0:
        raise ValueError(f"kernel spans must be odd, got {kt}x{kp}")
    if x.data.shape[-1] != cin:
        raise ValueError(f"input has {x.data.shape[-1]} channels, kernels expect {cin}")

    out = _correlate_cl(x.data, wd)

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            # Adjoint of same-padding cross-correlation: correlate the upstream
            # gradient with spatially flipped kernels, in/out channels swapped.
            wt = np.ascontiguousarray(wd.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            gx = _correlate_cl(g, wt)
        if w.requires_grad:
            cols = im2col(x.data, kt, kp)
            gmat = g.reshape(-1, cout)
            gw = (cols.T @ gmat).reshape(kt, kp, cin, cout).transpose(3, 2, 0, 1)
        return gx, gw

    return Tensor(out, parents=(x, w), backward_fn=backward, op="conv2d")


def batch_norm_cl(x, state, mode="train"):
    """Tape op: per-channel normalization of channels-last activations.

    Train mode uses the current batch's statistics over (batch, time, pitch) and
    folds them into the running averages; infer mode is a pure function of the
    input and the running statistics.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = _as_tensor(x)
    xd = x.data
    c = xd.shape[-1]
    if c != state.channels:
        raise ValueError(f"input has {c} channels, state has {state.channels}")
    gamma, beta = state.gamma, state.beta
    eps = state.epsilon
    axes = tuple(range(xd.ndim - 1))
    n = int(np.prod([xd.shape[a] for a in axes]))

    if mode == "train":
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1.0 - m) * mean
        state.running_var[...] = m * state.running_var + (1.0 - m) * var
    else:
        mean = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv_std
    out = gamma.data * xhat + beta.data

    def backward(g):
        dxhat = g * gamma.data
        gx = None
        if x.requires_grad:
            if mode == "train":
                # Batch statistics depend on x, so the mean/variance pathways
                # contribute; the usual three-term batch-norm gradient.
                sum_dxhat = dxhat.sum(axis=axes)
                sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes)
                gx = (inv_std / n) * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
            else:
                gx = dxhat * inv_std
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return Tensor(out, parents=(x, gamma, beta), backward_fn=backward, op="batch_norm")


def to_channels_last(x):
    """Tape op: (..., C, T, P) -> (..., T, P, C)."""
    x = _as_tensor(x)
    out = np.ascontiguousarray(np.moveaxis(x.data, -3, -1))

    def backward(g):
        return (np.ascontiguousarray(np.moveaxis(g, -1, -3)),) if x.requires_grad \
            else (None,)

    return Tensor(out, parents=(x,), backward_fn=backward, op="to_channels_last")


def to_channels_first(x):
    """Tape op: (..., T, P, C) -> (..., C, T, P)."""
    x = _as_tensor(x)
    out = np.ascontiguousarray(np.moveaxis(x.data, -1, -3))

    def backward(g):
        return (np.ascontiguousarray(np.moveaxis(g, -3, -1)),) if x.requires_grad \
            else (None,)

    return Tensor(out, parents=(x,), backward_fn=backward, op="to_channels_first")


# ---------------------------------------------------------------------------
# Public surface layout (channels, time, pitch), batched or not
# ---------------------------------------------------------------------------

def _with_batch(x):
    """Return (array, had_batch) with a guaranteed leading batch axis."""
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise ValueError(f"expected 3 or 4 axes, got shape {x.shape}")


def _squeeze_batch(t, batched):
    if batched:
        return t
    out = Tensor(t.data[0], parents=(t,), op="squeeze",
                 backward_fn=lambda g: (g[None],))
    return out


def conv2d_same(x, kernels):
    """Cross-correlate (B, C_in, T, P) with (C_out, C_in, kt, kp); zero padding keeps T, P.

    Kernel spans must be odd so that "same" padding is symmetric. A 3-axis input is
    treated as a single example.
    """
    x = _as_tensor(x)
    xd, batched = _with_batch(x.data)
    xb = x if batched else _expand_batch(x)
    out = to_channels_first(conv2d_cl(to_channels_last(xb), kernels))
    return _squeeze_batch(out, batched)


def batch_norm(x, state, mode="train"):
    """Normalize (B, C, T, P) per channel with statistics pooled over batch, time, pitch."""
    x = _as_tensor(x)
    xd, batched = _with_batch(x.data)
    xb = x if batched else _expand_batch(x)
    out = to_channels_first(batch_norm_cl(to_channels_last(xb), state, mode=mode))
    return _squeeze_batch(out, batched)


def _expand_batch(x):
    return Tensor(x.data[None], parents=(x,), op="expand",
                  backward_fn=lambda g: (g[0],))


def relu(x):
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def backward(g):
        return (g * (x.data > 0),) if x.requires_grad else (None,)

    return Tensor(out, parents=(x,), backward_fn=backward, op="relu")


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def backward(g):
        return (g if a.requires_grad else None, g if b.requires_grad else None)

    return Tensor(out, parents=(a, b), backward_fn=backward, op="add")


def softmax_over_last(x):
    """Softmax along the final axis; rows sum to one."""
    x = _as_tensor(x)
    out = _softmax(x.data)

    def backward(g):
        if not x.requires_grad:
            return (None,)
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor(out, parents=(x,), backward_fn=backward, op="softmax_over_last")


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def masked_nll(logits, targets, cell_weights):
    """Weighted categorical cross-entropy over the final axis, fused with softmax.

    targets are one-hot along the last axis; cell_weights has the logits' shape minus
    that axis and carries whatever per-cell weighting the caller wants (masking,
    1/|cells| scaling, batch averaging). Returns a scalar tensor. The gradient with
    respect to the logits is cell_weights * (softmax(logits) - targets).
    """
    logits = _as_tensor(logits)
    t = np.asarray(targets)
    w = np.asarray(cell_weights)
    if t.shape != logits.data.shape:
        raise ValueError(f"targets shape {t.shape} != logits shape {logits.data.shape}")
    if w.shape != logits.data.shape[:-1]:
        raise ValueError(f"cell_weights shape {w.shape} != cell shape "
                         f"{logits.data.shape[:-1]}")
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z - zmax).sum(axis=-1)) + zmax[..., 0]
    logp_true = (z * t).sum(axis=-1) - logsumexp
    value = -(w * logp_true).sum()

    def backward(g):
        if not logits.requires_grad:
            return (None,)
        p = _softmax(z)
        return (g * w[..., None] * (p - t),)

    return Tensor(value, parents=(logits,), backward_fn=backward, op="masked_nll")


def backward(loss):
    """Fill .grad on every gradient-requiring node reachable from the scalar loss."""
    if loss.data.ndim != 0:
        raise ValueError("backward expects a scalar loss")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient produced by op '{node.op}'")
            parent.grad = g if parent.grad is None else parent.grad + g


def _toposort(root):
    seen = set()
    order = []

    def visit(node):
        if id(node) in seen:
            return
        seen.add(id(node))
        for p in node.parents:
            if p.requires_grad:
                visit(p)
        order.append(node)

    visit(root)
    return order
