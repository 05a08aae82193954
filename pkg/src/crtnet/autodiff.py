"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built define-by-run: every tracked operation attaches a
:class:`TapeNode` to its output, holding the input tensors and a backward
rule.  :func:`backward` walks the tape in reverse topological order, visits
each node once, and sums gradients from all consumers into ``.grad`` buffers
on the leaves.  :func:`detach` severs the tape, so a value can be consumed
without sending any gradient to its ancestors.

Shapes are strict: binary elementwise ops demand identical shapes (the only
implicit broadcast is multiplication by a scalar), and every mismatch raises
:class:`ShapeError` naming both shapes.  All data is float64, row-major.

Graph construction and backward are single-threaded per graph; tensors whose
values are final may be shared across threads for read-only inference.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "TapeNode", "ShapeError", "NumericError", "no_grad",
    "add", "sub", "mul", "scale", "scalar_mul", "relu", "sigmoid",
    "matmul", "transpose", "reshape", "sum_all", "stack_rows", "take_row",
    "token_at", "spatial_mean", "add_channel_bias", "conv2d",
    "pool_avg", "pool_max", "softmax", "layernorm", "dropout",
    "cross_entropy", "detach", "backward",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class TapeNode:
    """One recorded operation.

    ``inputs`` are the operand tensors in call order; ``rule(g)`` maps the
    output gradient to one gradient array (or None) per input.
    """

    __slots__ = ("inputs", "rule")

    def __init__(self, inputs, rule):
        self.inputs = inputs
        self.rule = rule


class Tensor:
    """N-dimensional float64 array with an optional gradient slot.

    ``grad`` is populated by :func:`backward` and always matches ``data`` in
    shape.  ``node`` links into the computation tape; it is None for leaves
    and for detached values, which therefore never propagate gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def tracked(self) -> bool:
        """True if this tensor participates in gradient computation."""
        return self.requires_grad or self.node is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self):
        backward(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self.node is not None:
            flags.append("tracked")
        tag = ", ".join([f"shape={self.shape}"] + flags)
        return f"Tensor({tag})"


def _result(data, inputs, rule) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(t.tracked() for t in inputs):
        out.node = TapeNode(tuple(inputs), rule)
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def scalar_mul(s: Tensor, x: Tensor) -> Tensor:
    """Multiply a tensor by a one-element tensor (gradients flow to both)."""
    if s.size != 1:
        raise ShapeError(f"scalar_mul: scalar operand has shape {s.shape}")
    sval = float(s.data.reshape(()))
    xd = x.data
    sshape = s.shape

    def rule(g):
        return (np.asarray(np.sum(g * xd)).reshape(sshape), g * sval)

    return _result(xd * sval, (s, x), rule)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign to avoid overflow in exp for large |x|.
    xd = x.data
    y = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                 np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expects a 2-D tensor, got {x.shape}")
    return _result(np.ascontiguousarray(x.data.T), (x,),
                   lambda g: (np.ascontiguousarray(g.T),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    in_shape = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(in_shape),))


def sum_all(x: Tensor) -> Tensor:
    """Sum over all elements; returns a scalar (shape ()) tensor."""
    in_shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,),
                   lambda g: (np.full(in_shape, float(g)),))


def stack_rows(rows) -> Tensor:
    """Stack L vectors of shape (D,) into an (L, D) matrix."""
    rows = tuple(rows)
    if not rows:
        raise ShapeError("stack_rows: empty sequence")
    d = rows[0].shape
    for r in rows:
        if r.data.ndim != 1 or r.shape != d:
            raise ShapeError(f"stack_rows: expected 1-D rows of shape {d}, got {r.shape}")
    out = np.stack([r.data for r in rows])
    return _result(out, rows, lambda g: tuple(g[i] for i in range(len(rows))))


def take_row(x: Tensor, i: int) -> Tensor:
    """Row i of an (N, D) matrix as a (D,) vector."""
    if x.data.ndim != 2:
        raise ShapeError(f"take_row: expects a 2-D tensor, got {x.shape}")
    if not 0 <= i < x.shape[0]:
        raise IndexError(f"take_row: row {i} out of range for shape {x.shape}")
    in_shape = x.shape

    def rule(g):
        dx = np.zeros(in_shape)
        dx[i] = g
        return (dx,)

    return _result(x.data[i].copy(), (x,), rule)


def token_at(x: Tensor, row: int, col: int) -> Tensor:
    """Channel vector at one spatial cell of a (C, H, W) feature map."""
    if x.data.ndim != 3:
        raise ShapeError(f"token_at: expects a (C, H, W) tensor, got {x.shape}")
    _, h, w = x.shape
    if not (0 <= row < h and 0 <= col < w):
        raise IndexError(f"token_at: cell ({row}, {col}) out of range for {x.shape}")
    in_shape = x.shape

    def rule(g):
        dx = np.zeros(in_shape)
        dx[:, row, col] = g
        return (dx,)

    return _result(x.data[:, row, col].copy(), (x,), rule)


def spatial_mean(x: Tensor) -> Tensor:
    """Mean over all spatial cells of a (C, H, W) map; returns (C,).

    Computed as the mean over the stacked (L, C) cell vectors so the result
    is bit-identical to stacking the per-cell tokens and averaging them.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"spatial_mean: expects a (C, H, W) tensor, got {x.shape}")
    c, h, w = x.shape
    l = h * w
    cells = np.ascontiguousarray(x.data.reshape(c, l).T)
    in_shape = x.shape

    def rule(g):
        return (np.broadcast_to((g / l)[:, None, None], in_shape).copy(),)

    return _result(cells.mean(axis=0), (x,), rule)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias (C,) to a (C, H, W) map."""
    if x.data.ndim != 3 or b.data.ndim != 1 or b.shape[0] != x.shape[0]:
        raise ShapeError(f"add_channel_bias: shapes {x.shape} and {b.shape} incompatible")
    return _result(x.data + b.data[:, None, None], (x, b),
                   lambda g: (g, g.sum(axis=(1, 2))))


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (Cin, H, W) input with (Cout, Cin, k, k) kernels.

    Zero padding; H' = floor((H + 2p - k) / stride) + 1 and likewise for W'.
    """
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d: expects (Cin,H,W) and (Cout,Cin,k,k), got {x.shape} and {kernels.shape}")
    cin, h, w = x.shape
    cout, kcin, kh, kw = kernels.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernels expect {kcin}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {(hp, wp)}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = np.empty((cin, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = padded[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    colmat = cols.reshape(cin * kh * kw, ho * wo)
    kmat = kernels.data.reshape(cout, cin * kh * kw)
    out = (kmat @ colmat).reshape(cout, ho, wo)
    kshape = kernels.shape

    def rule(g):
        gmat = g.reshape(cout, ho * wo)
        dk = (gmat @ colmat.T).reshape(kshape)
        dcols = (kmat.T @ gmat).reshape(cin, kh, kw, ho, wo)
        dpad = np.zeros((cin, hp, wp))
        for i in range(kh):
            for j in range(kw):
                dpad[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
        dx = dpad[:, padding:padding + h, padding:padding + w] if padding else dpad
        return (dx, dk)

    return _result(out, (x, kernels), rule)


def _pool_check(x: Tensor, window: int, stride: int):
    if x.data.ndim != 3:
        raise ShapeError(f"pool: expects a (C, H, W) tensor, got {x.shape}")
    _, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool: window {window} exceeds spatial extent {(h, w)}")
    if stride < 1:
        raise ValueError(f"pool: stride must be >= 1, got {stride}")


def pool_avg(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Per-window mean over a (C, H, W) map."""
    stride = window if stride is None else stride
    _pool_check(x, window, stride)
    c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    in_shape = x.shape

    if stride == window and h % window == 0 and w % window == 0:
        out = x.data.reshape(c, ho, window, wo, window).mean(axis=(2, 4))

        def rule(g):
            expanded = np.repeat(np.repeat(g, window, axis=1), window, axis=2)
            return (expanded / (window * window),)

        return _result(out, (x,), rule)

    out = np.empty((c, ho, wo))
    for r in range(ho):
        for cc in range(wo):
            out[:, r, cc] = x.data[:, r * stride:r * stride + window,
                                   cc * stride:cc * stride + window].mean(axis=(1, 2))

    def rule(g):
        dx = np.zeros(in_shape)
        inv = 1.0 / (window * window)
        for r in range(ho):
            for cc in range(wo):
                dx[:, r * stride:r * stride + window,
                   cc * stride:cc * stride + window] += g[:, r, cc, None, None] * inv
        return (dx,)

    return _result(out, (x,), rule)


def pool_max(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Per-window max over a (C, H, W) map.

    Backward routes the gradient to the window argmax, first index in
    row-major order on ties.
    """
    stride = window if stride is None else stride
    _pool_check(x, window, stride)
    c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = np.empty((c, ho, wo))
    argmax = np.empty((c, ho, wo), dtype=np.int64)
    for r in range(ho):
        for cc in range(wo):
            patch = x.data[:, r * stride:r * stride + window,
                           cc * stride:cc * stride + window].reshape(c, -1)
            idx = patch.argmax(axis=1)
            argmax[:, r, cc] = idx
            out[:, r, cc] = patch[np.arange(c), idx]
    in_shape = x.shape

    def rule(g):
        dx = np.zeros(in_shape)
        for r in range(ho):
            for cc in range(wo):
                idx = argmax[:, r, cc]
                rows = r * stride + idx // window
                colz = cc * stride + idx % window
                dx[np.arange(c), rows, colz] += g[:, r, cc]
        return (dx,)

    return _result(out, (x,), rule)


# ---------------------------------------------------------------------------
# normalisation, regularisation, losses
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along one axis (max-subtracted before exponentiation)."""
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax: non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _result(y, (x,), rule)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit population variance, then
    apply the affine (gamma, beta)."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    gd = gamma.data

    def rule(g):
        g2 = g.reshape(-1, d)
        xh2 = xhat.reshape(-1, d)
        dbeta = g2.sum(axis=0)
        dgamma = (g2 * xh2).sum(axis=0)
        gh = g * gd
        dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (dx, dgamma, dbeta)

    return _result(out, (x, gamma, beta), rule)


def dropout(x: Tensor, rate: float, training: bool, rng=None) -> Tensor:
    """Inverted dropout: zero with probability ``rate`` and scale survivors by
    1/(1-rate) at training time; identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy(probs: Tensor, target: int) -> Tensor:
    """Negative log-probability of the target class.

    Expects an already normalised distribution (positive, sums to 1 within
    1e-6); the picked probability is clamped below at 1e-12 before the log.
    """
    if probs.data.ndim != 1:
        raise ShapeError(f"cross_entropy: expects a 1-D distribution, got {probs.shape}")
    c = probs.shape[0]
    if not 0 <= target < c:
        raise IndexError(f"cross_entropy: target {target} out of range for {c} classes")
    if probs.data.min() < 0:
        raise ValueError("cross_entropy: probabilities must be non-negative")
    total = probs.data.sum()
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"cross_entropy: probabilities sum to {total!r}, not 1")
    p = max(float(probs.data[target]), 1e-12)

    def rule(g):
        dp = np.zeros(c)
        if probs.data[target] > 1e-12:
            dp[target] = -float(g) / p
        return (dp,)

    return _result(np.asarray(-np.log(p)), (probs,), rule)


# ---------------------------------------------------------------------------
# graph control
# ---------------------------------------------------------------------------

def detach(x: Tensor) -> Tensor:
    """Value-identical tensor with no tape linkage (shares the data buffer).

    Backward through any consumer contributes zero gradient to ``x`` and its
    ancestors.
    """
    return Tensor(x.data)


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` for all reachable leaves.

    Repeated calls before an optimizer step sum their gradients, so several
    losses can be backpropagated independently.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            seed = np.ones_like(loss.data)
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    # Iterative postorder DFS: parents precede children in `order`.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        for parent in t.node.inputs:
            if parent.node is not None and id(parent) not in visited:
                stack.append((parent, False))

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        for parent, pg in zip(t.node.inputs, t.node.rule(g)):
            if pg is None or not parent.tracked():
                continue
            if parent.node is None:
                if parent.requires_grad:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                acc = pending.get(id(parent))
                pending[id(parent)] = pg if acc is None else acc + pg
