"""Dense tensors with reverse-mode automatic differentiation.

Kernels are numpy-backed and record themselves on an explicit Tape; backward
walks the tape in reverse execution order (which is automatically a valid
topological order). float32 is the training dtype, float64 the verification
dtype used by gradient checking.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeMismatch(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """A dense row-major array plus autodiff bookkeeping.

    ``grad`` is populated by :func:`backward`.  Non-leaf tensors get their
    ``_vjp`` closure attached by the kernel that produced them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad=False, name=""):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, dtype={self.data.dtype.name})"


class Tape:
    """Ordered record of operations; execution order is topological order."""

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        _push_tape(self)
        return self

    def __exit__(self, *exc):
        _pop_tape(self)
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, node):
        self._nodes.append(node)


_TAPE_STACK: list[Tape] = []


def _push_tape(tape):
    _TAPE_STACK.append(tape)


def _pop_tape(tape):
    if not _TAPE_STACK or _TAPE_STACK[-1] is not tape:
        raise TapeError("tape stack corrupted: exiting a tape that is not current")
    _TAPE_STACK.pop()


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(out_data, parents, vjp, name=""):
    out = Tensor(out_data, name=name)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        tape.record(out)
    return out


def _sum_to_shape(grad, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


def backward(loss, tape):
    """Accumulate gradients of ``loss`` into every reachable requires_grad tensor."""
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward requires a scalar loss, got shape {loss.shape}")
    if tape._consumed:
        raise TapeError("tape already consumed; build a fresh tape for a new backward pass")
    tape._consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape._nodes):
        if node.grad is None or node._vjp is None:
            continue
        parent_grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            if g.dtype != parent.data.dtype:
                g = g.astype(parent.data.dtype)
            # accumulation is never in place, so vjps may hand out views of
            # the incoming gradient without aliasing hazards
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def _swap(a):
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if a.data.ndim > 2 and b.data.ndim == 2:
        # activations @ weights: collapse the batch into one 2D GEMM; per-row
        # dot products are unchanged
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(*lead, b.shape[-1])

        def vjp(g):
            g2 = g.reshape(-1, b.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a2.T @ g2
            return ga, gb

        return _make(out, (a, b), vjp)
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = _sum_to_shape(np.matmul(g, _swap(b.data)), a.shape)
        gb = _sum_to_shape(np.matmul(_swap(a.data), g), b.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return _make(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return _sum_to_shape(g * b.data, a.shape), _sum_to_shape(g * a.data, b.shape)

    return _make(out, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * np.asarray(s, dtype=a.dtype)

    def vjp(g):
        return (g * np.asarray(s, dtype=g.dtype),)

    return _make(out, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def vjp(g):
        return (g * (a.data > 0),)

    return _make(out, (a,), vjp)


# tanh form of gelu; its analytic gradient below matches this same form.
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + _GELU_A * x2))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        sech2 = 1.0 - t * t
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner),)

    return _make(out, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out.astype(a.dtype), (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), vjp)


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = a.data + np.asarray(c, dtype=a.dtype)

    def vjp(g):
        return (g,)

    return _make(out, (a,), vjp)


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x), computed as max(x,0) + log1p(e^{-|x|}) for stability
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        return (g * sig,)

    return _make(out, (a,), vjp)


def softmax_last_axis(a: Tensor) -> Tensor:
    """Softmax over the last axis; -inf entries are masked positions.

    A row with every entry masked has no valid distribution and is rejected.
    """
    x = a.data
    m = np.max(x, axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise ValueError("softmax_last_axis: some row is fully masked (all -inf)")
    # exp(-inf - finite max) is exactly 0, so masked positions need no fixup;
    # the GEMM-based row sum (ones as an (n, 1) matrix) is bit-stable when
    # masked zero columns are appended, unlike np.sum or matrix-vector
    # products whose reduction trees depend on the row length
    e = np.exp(x - m)
    denom = np.matmul(e, np.ones((e.shape[-1], 1), dtype=e.dtype))
    out = (e / denom).astype(x.dtype)

    def vjp(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), vjp)


def _row_mean(x):
    # matmul-based reduction: cheap and bit-stable across batch shapes
    ones = np.ones(x.shape[-1], dtype=x.dtype)
    return (np.matmul(x, ones) / x.shape[-1])[..., None]


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"layer_norm gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    mu = _row_mean(x.data)
    centered = x.data - mu
    var = _row_mean(centered * centered)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        # classic layer-norm backward over the last axis
        gx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        ggain = _sum_to_shape(g * xhat, gain.shape)
        gbias = _sum_to_shape(g, bias.shape)
        return gx.astype(x.dtype), ggain, gbias

    return _make(out, (x, gain, bias), vjp)


def cross_entropy_from_logits(logits: Tensor, targets) -> Tensor:
    """Mean of -log softmax(logits)[target] over the batch, max-subtracted."""
    targets = np.asarray(targets)
    n, c = logits.shape
    if targets.shape != (n,):
        raise ShapeMismatch(f"targets must have shape ({n},), got {targets.shape}")
    if targets.min() < 0 or targets.max() >= c:
        raise ValueError(f"target index out of range [0, {c})")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    out = -logp[np.arange(n), targets].mean()

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(out, dtype=x.dtype), (logits,), vjp)


def embedding_gather(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make(out, (table,), vjp)


def concat_last_axis(a: Tensor, b: Tensor) -> Tensor:
    out = np.concatenate([a.data, b.data], axis=-1)
    na = a.shape[-1]

    def vjp(g):
        return g[..., :na], g[..., na:]

    return _make(out, (a, b), vjp)


def concat_rows(parts) -> Tensor:
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=-2)
    sizes = [p.shape[-2] for p in parts]

    def vjp(g):
        grads, ofs = [], 0
        for s in sizes:
            grads.append(g[..., ofs:ofs + s, :])
            ofs += s
        return tuple(grads)

    return _make(out, tuple(parts), vjp)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[..., start:stop, :]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop, :] = g
        return (gx,)

    return _make(out, (x,), vjp)


def slice_last_axis(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[..., start:stop]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return _make(out, (x,), vjp)


def mean_pool(x: Tensor, axis: int = -2) -> Tensor:
    out = x.data.mean(axis=axis)
    n = x.shape[axis]

    def vjp(g):
        return (np.expand_dims(g, axis).repeat(n, axis=axis) / n,)

    return _make(out, (x,), vjp)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity over the last axis."""
    na = np.linalg.norm(a.data, axis=-1)
    nb = np.linalg.norm(b.data, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine_similarity: zero-norm input row")
    dot = np.sum(a.data * b.data, axis=-1)
    out = dot / (na * nb)

    def vjp(g):
        g_ = g[..., None]
        ga = g_ * (b.data / (na * nb)[..., None] - (out / (na * na))[..., None] * a.data)
        gb = g_ * (a.data / (na * nb)[..., None] - (out / (nb * nb))[..., None] * b.data)
        return ga.astype(a.dtype), gb.astype(b.dtype)

    return _make(out.astype(a.dtype), (a, b), vjp)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make(out, (x,), vjp)


def swap_last2(x: Tensor) -> Tensor:
    out = _swap(x.data)

    def vjp(g):
        return (_swap(g),)

    return _make(out, (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    out = x.data.sum()

    def vjp(g):
        return (np.full_like(x.data, g),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), vjp)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = x.data.mean()

    def vjp(g):
        return (np.full_like(x.data, g / n),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------


def uniform_init(rng: np.random.Generator, shape, fan_in, dtype=None):
    """Scaled uniform: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    dtype = dtype or DEFAULT_DTYPE
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def zeros(shape, dtype=None):
    return np.zeros(shape, dtype=dtype or DEFAULT_DTYPE)
