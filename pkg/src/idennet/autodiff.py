"""Dense NHWC tensors with tape-based reverse-mode differentiation.

Only the handful of operations the network needs are provided. Every op
runs eagerly on numpy arrays; when a :class:`Tape` is active and at least
one input requires a gradient, the op appends a backward rule to the tape.
Outside a tape, ops are plain numpy computations and keep no caches.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Tensor:
    """An n-d real array with an optional gradient slot."""

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside are recorded in
    execution order, which is a valid topological order by construction.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        self.records.clear()
        self.consumed = False


_ACTIVE: list[Tape] = []


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def needs_grad(*inputs: Tensor) -> bool:
    return bool(_ACTIVE) and any(t.requires_grad for t in inputs)


def make_op(out_data: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out_data`` in a Tensor and record ``backward_fn`` if needed.

    ``backward_fn`` maps the upstream gradient to one gradient (or None)
    per input, in order.
    """
    out = Tensor(out_data)
    if needs_grad(*inputs):
        out.requires_grad = True
        out.is_leaf = False
        _ACTIVE[-1].records.append(_Record(tuple(inputs), out, backward_fn))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` of every requires-grad leaf recorded on ``tape``.

    Leaves on the tape that the loss does not reach end up with zero grads.
    A tape can be traversed once; call :meth:`Tape.reset` to reuse it.
    """
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise RuntimeError("no tape to differentiate through")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if tape.consumed:
        raise RuntimeError("tape already traversed; reset it before another backward pass")
    if not tape.records or loss.is_leaf:
        raise RuntimeError("loss was not produced through this tape")

    for rec in tape.records:
        for t in rec.inputs:
            if t.is_leaf and t.requires_grad:
                t.grad = np.zeros_like(t.data)

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = pending.pop(id(rec.output), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                t.grad += gi
            elif id(t) in pending:
                pending[id(t)] = pending[id(t)] + gi
            else:
                pending[id(t)] = gi
    tape.consumed = True


# ---------------------------------------------------------------------------
# elementwise helpers


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def tensor_sum(x: Tensor) -> Tensor:
    return make_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        dx = np.zeros_like(x.data)
        dx[..., start:stop] = g
        return (dx,)

    return make_op(x.data[..., start:stop].copy(), (x,), bw)


# ---------------------------------------------------------------------------
# network ops


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two feature maps along the trailing (channel) axis."""
    if a.data.ndim != b.data.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_channels: leading dims differ, {a.shape} vs {b.shape}")
    d1 = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return make_op(out, (a, b), lambda g: (g[..., :d1], g[..., d1:]))


def _conv_cols(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, _, _, c = xp.shape
    if kh == 1 and kw == 1:
        sub = xp[:, : stride * ho : stride, : stride * wo : stride, :]
        return sub.reshape(b * ho * wo, c)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # (B,Ho,Wo,C,kh,kw) -> rows ordered (kh,kw,C) to match the filter layout
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, kh * kw * c)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NHWC input with a [kH,kW,Cin,Cout] filter, plus bias."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects a 4-D input and a 4-D filter")
    bsz, h, wd, cin = x.shape
    kh, kw, fcin, cout = w.shape
    if fcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, filter expects {fcin}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape}, expected ({cout},)")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    span_h, span_w = h + 2 * padding - kh, wd + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(f"conv2d: output size is not a positive integer for input {x.shape}")
    ho, wo = span_h // stride + 1, span_w // stride + 1

    pad = ((0, 0), (padding, padding), (padding, padding), (0, 0))
    xp = np.pad(x.data, pad) if padding else x.data
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (_conv_cols(xp, kh, kw, stride, ho, wo) @ wmat).reshape(bsz, ho, wo, cout) + b.data

    def bw(g):
        g2 = g.reshape(-1, cout)
        dx = dw = db = None
        if w.requires_grad:
            # recomputed rather than cached to bound memory on deep stacks
            xpad = np.pad(x.data, pad) if padding else x.data
            dw = (_conv_cols(xpad, kh, kw, stride, ho, wo).T @ g2).reshape(w.shape)
        if b.requires_grad:
            db = g2.sum(axis=0)
        if x.requires_grad and stride == 1:
            # full correlation of the upstream grad with the flipped filter
            ph, pw = kh - 1 - padding, kw - 1 - padding
            gp = np.pad(g, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else g
            wflip = w.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
            dx = (_conv_cols(gp, kh, kw, 1, h, wd) @ wflip).reshape(x.shape)
        elif x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(bsz, ho, wo, kh, kw, cin)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
            dx = dxp[:, padding : padding + h, padding : padding + wd, :] if padding else dxp
        return dx, dw, db

    return make_op(out, (x, w, b), bw)


@dataclass
class RunningStats:
    """Per-channel running mean/variance of a batch-norm layer.

    ``mean``/``var`` are None until populated.
    """

    mean: np.ndarray | None = None
    var: np.ndarray | None = None

    @classmethod
    def initial(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype))

    @property
    def populated(self) -> bool:
        return self.mean is not None and self.var is not None


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats | None = None,
               mode: str = "train", eps: float = 1e-5, momentum: float = 0.9) -> Tensor:
    """Per-channel batch normalization over all leading axes.

    In train mode the batch statistics normalize the input and, when
    ``running`` is given, are blended into it as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},)")
    axes = tuple(range(x.data.ndim - 1))
    n = x.data.size // c

    if mode == "train":
        if n < 2:
            raise ShapeError("batch_norm in train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running is not None:
            if not running.populated:
                running.mean = np.zeros(c, x.dtype)
                running.var = np.ones(c, x.dtype)
            running.mean = (momentum * running.mean + (1 - momentum) * mu).astype(running.mean.dtype)
            unbiased = var * (n / (n - 1))
            running.var = (momentum * running.var + (1 - momentum) * unbiased).astype(running.var.dtype)
    elif mode == "eval":
        if running is None or not running.populated:
            raise RuntimeError("batch_norm in eval mode requires populated running statistics")
        mu, var = running.mean, running.var
    else:
        raise ValueError(f"unknown mode {mode!r}")

    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data
        if mode == "train":
            dx = inv / n * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return make_op(out, (x, gamma, beta), bw)


def _relu_backward(grad: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, grad, 0).astype(grad.dtype)


def relu(x: Tensor) -> Tensor:
    # strict inequality: the subgradient at 0 is 0
    out = np.maximum(x.data, 0)
    if not needs_grad(x):
        return Tensor(out)
    mask = x.data > 0
    return make_op(out, (x,), lambda g: (_relu_backward(g, mask),))


def avg_pool_2x2(x: Tensor) -> Tensor:
    bsz, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool_2x2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(bsz, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def bw(g):
        q = (g * 0.25)[:, :, None, :, None, :]
        return (np.broadcast_to(q, (bsz, h // 2, 2, w // 2, 2, c)).reshape(x.shape),)

    return make_op(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    bsz, h, w, c = x.shape
    out = x.data.mean(axis=(1, 2))

    def bw(g):
        return (np.broadcast_to((g / (h * w))[:, None, None, :], x.shape).copy(),)

    return make_op(out, (x,), bw)


def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"fully_connected: cannot multiply {x.shape} by {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"fully_connected: bias shape {b.shape}, expected ({w.shape[1]},)")
    out = x.data @ w.data + b.data

    def bw(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return make_op(out, (x, w, b), bw)


def softmax_array(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    y = softmax_array(logits.data)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_op(y, (logits,), bw)


def dropout(x: Tensor, rate: float, mode: str = "train", rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate), eval is identity."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = ((rng.random(x.shape) >= rate) / (1.0 - rate)).astype(x.dtype)
    return make_op(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# finite-difference harness


def grad_check(op_closure: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-4) -> float:
    """Max relative error between tape gradients and central differences.

    The error for each input entry is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    ``op_closure`` must map ``inputs`` to a scalar Tensor deterministically.
    """
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = op_closure(*inputs)
    backward(out, tape)
    analytic = [t.grad.copy() for t in inputs]

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = float(op_closure(*inputs).data)
            flat[k] = orig - eps
            fm = float(op_closure(*inputs).data)
            flat[k] = orig
            num = (fp - fm) / (2 * eps)
            a = float(gflat[k])
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
    return worst
